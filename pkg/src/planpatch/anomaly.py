"""Online transition-model failure detection and the failure-region GP.

A per-step anomaly gate (Gaussian deviation band plus binary contact
mismatch) labels executed transitions as expected or unexpected; a Matern-5/2
GP regressor fitted on the labeled end-effector positions predicts which
states belong to the failure region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize
from scipy.special import ndtri

from . import config as cfg
from .geometry import Pose4
from .world import Action

SQRT5 = math.sqrt(5.0)


class NotPositiveDefinite(RuntimeError):
    pass


class DegenerateData(RuntimeError):
    pass


@dataclass(frozen=True)
class TransitionSample:
    """One executed plan step with its model prediction and observation."""

    s_t: Pose4
    a_t: Action
    s_pred: Pose4
    s_obs: Pose4
    contact_pred: bool
    contact_obs: bool


@dataclass(frozen=True)
class AnomalyGateParams:
    p: float = 0.98
    k0: float = 0.05
    sigma_floor: float = 1e-4
    cumulative: bool = False  # gate on accumulated deviation instead of per-step

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("confidence level p must be in (0, 1)")
        if self.k0 <= 0.0:
            raise ValueError("k0 must be positive")


def gate_transition(sample: TransitionSample, params: AnomalyGateParams,
                    accumulated: float = 0.0) -> bool:
    """True = expected, False = unexpected.

    Unexpected iff contacts disagree or any translational deviation leaves the
    two-sided Gaussian band at level p, whose width grows with the commanded
    step length (floored for zero-length steps).
    """
    if sample.contact_obs != sample.contact_pred:
        return False
    z_p = ndtri((1.0 + params.p) / 2.0)
    step_len = float(np.linalg.norm(sample.s_pred.xyz - sample.s_t.xyz))
    band = z_p * max(params.k0 * step_len, params.sigma_floor)
    dev = np.abs(sample.s_obs.xyz - sample.s_pred.xyz)
    if params.cumulative:
        dev = dev + accumulated
    return bool(np.all(dev <= band))


@dataclass
class FailureDatasets:
    """States with expected transitions vs. states where the model failed."""

    expected: list = field(default_factory=list)    # Pose4, label 0
    unexpected: list = field(default_factory=list)  # Pose4, label 1

    def to_json(self) -> str:
        return json.dumps({
            "expected": [list(p.as_array()) for p in self.expected],
            "unexpected": [list(p.as_array()) for p in self.unexpected],
        })

    @classmethod
    def from_json(cls, doc: str | dict) -> "FailureDatasets":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(expected=[Pose4.from_array(v) for v in doc["expected"]],
                   unexpected=[Pose4.from_array(v) for v in doc["unexpected"]])

    def design_matrix(self, max_expected: int | None = None,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(X, y) over end-effector positions; expected states may be thinned.

        Exact duplicate (state, label) rows are dropped so near-noiseless
        kernels stay positive definite.
        """
        exp = self.expected
        if max_expected is not None and len(exp) > max_expected:
            rng = cfg.rng_from(seed, "gp-thin", len(exp))
            idx = np.sort(rng.choice(len(exp), size=max_expected, replace=False))
            exp = [exp[i] for i in idx]
        X = np.array([p.xyz for p in exp] + [p.xyz for p in self.unexpected])
        y = np.array([0.0] * len(exp) + [1.0] * len(self.unexpected))
        if len(y):
            _, keep = np.unique(np.column_stack([X, y]), axis=0,
                                return_index=True)
            keep = np.sort(keep)
            X, y = X[keep], y[keep]
        return X, y


# -- Matern 5/2 GP ------------------------------------------------------------

def matern52(x, x2, sigma_f: float, rho) -> float:
    """ARD Matern-5/2 kernel value between two points."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), x.shape)
    d = math.sqrt(float(np.sum(((x - x2) / rho) ** 2)))
    return sigma_f ** 2 * (1.0 + SQRT5 * d + 5.0 * d * d / 3.0) * math.exp(-SQRT5 * d)


def _kernel_matrix(Xa: np.ndarray, Xb: np.ndarray, sigma_f: float,
                   rho: np.ndarray) -> np.ndarray:
    A = Xa / rho
    B = Xb / rho
    d2 = np.maximum(
        (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :]
        - 2.0 * A @ B.T, 0.0)
    d = np.sqrt(d2)
    return sigma_f ** 2 * (1.0 + SQRT5 * d + 5.0 / 3.0 * d2) * np.exp(-SQRT5 * d)


DEFAULT_BOUNDS = {
    "sigma_f": (1e-2, 1e2),
    "rho": (1e-3, 1e1),
    "sigma_n": (1e-6, 1e0),
}


@dataclass
class GPModel:
    """Fitted GP: data, hyperparameters, and the cached Cholesky solve."""

    X: np.ndarray
    y: np.ndarray
    sigma_f: float
    rho: np.ndarray
    sigma_n: float
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None
    constant: float | None = None  # degenerate all-same-label model

    def factorize(self) -> "GPModel":
        d2 = np.tensordot(1.0 / np.asarray(self.rho, dtype=float) ** 2,
                          _sq_diffs(self.X), axes=(0, 0))
        dist = np.sqrt(np.maximum(d2, 0.0))
        K = (self.sigma_f ** 2 * (1.0 + SQRT5 * dist + 5.0 / 3.0 * d2)
             * np.exp(-SQRT5 * dist))
        last_err = None
        for jitter in (0.0, 1e-10, 1e-8):
            Kj = K.copy()
            Kj[np.diag_indices_from(Kj)] += self.sigma_n ** 2 + jitter
            try:
                self.chol = cholesky(Kj, lower=True)
                self.alpha = cho_solve((self.chol, True), self.y)
                return self
            except np.linalg.LinAlgError as e:
                last_err = e
        raise NotPositiveDefinite(str(last_err))

    def theta_dict(self) -> dict:
        return {"sigma_f": self.sigma_f, "rho": list(np.atleast_1d(self.rho)),
                "sigma_n": self.sigma_n}

    def to_json(self) -> str:
        return json.dumps({
            "X": self.X.tolist(), "y": self.y.tolist(),
            "theta": self.theta_dict(), "constant": self.constant,
        })

    @classmethod
    def from_json(cls, doc: str | dict) -> "GPModel":
        if isinstance(doc, str):
            doc = json.loads(doc)
        gp = cls(X=np.array(doc["X"]), y=np.array(doc["y"]),
                 sigma_f=doc["theta"]["sigma_f"],
                 rho=np.array(doc["theta"]["rho"]),
                 sigma_n=doc["theta"]["sigma_n"],
                 constant=doc.get("constant"))
        if gp.constant is None:
            gp.factorize()
        return gp


def log_marginal_likelihood(gp: GPModel) -> float:
    """Gaussian evidence computed from the stored factorization (noise in both terms)."""
    if gp.chol is None:
        raise NotPositiveDefinite("model not factorized")
    n = len(gp.y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(gp.chol))))
    fit = float(gp.y @ gp.alpha)
    return -0.5 * n * math.log(2.0 * math.pi) - 0.5 * logdet - 0.5 * fit


def _sq_diffs(X: np.ndarray) -> np.ndarray:
    """Per-dimension squared coordinate differences, shape (d, n, n)."""
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


def _lml_from_diffs(D: np.ndarray, y: np.ndarray, log_theta: np.ndarray) -> float:
    d = D.shape[0]
    sigma_f = math.exp(log_theta[0])
    rho = np.exp(log_theta[1:1 + d])
    sigma_n = math.exp(log_theta[1 + d])
    d2 = np.tensordot(1.0 / rho ** 2, D, axes=(0, 0))
    dist = np.sqrt(np.maximum(d2, 0.0))
    K = sigma_f ** 2 * (1.0 + SQRT5 * dist + 5.0 / 3.0 * d2) * np.exp(-SQRT5 * dist)
    K[np.diag_indices_from(K)] += sigma_n ** 2
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -1e12
    alpha = cho_solve((L, True), y)
    n = len(y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return (-0.5 * n * math.log(2.0 * math.pi) - 0.5 * logdet
            - 0.5 * float(y @ alpha))


def _lml_at(X: np.ndarray, y: np.ndarray, log_theta: np.ndarray) -> float:
    return _lml_from_diffs(_sq_diffs(X), y, log_theta)


def _gradient_from_diffs(D: np.ndarray, y: np.ndarray, log_theta: np.ndarray,
                         h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(log_theta)
    for i in range(len(log_theta)):
        up = log_theta.copy()
        dn = log_theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (_lml_from_diffs(D, y, up) - _lml_from_diffs(D, y, dn)) / (2.0 * h)
    return g


def lml_gradient(X: np.ndarray, y: np.ndarray, log_theta: np.ndarray,
                 h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the evidence w.r.t. log-hyperparameters."""
    return _gradient_from_diffs(_sq_diffs(X), y, log_theta, h=h)


def fit_gp(X, y, bounds: dict | None = None, restarts: int = 4,
           seed: int = 0) -> GPModel:
    """Maximize the evidence over log-hyperparameters with L-BFGS-B multistart."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < 1:
        raise DegenerateData("empty dataset")
    if np.all(y == y[0]):
        return GPModel(X=X, y=y, sigma_f=1.0, rho=np.ones(X.shape[1]),
                       sigma_n=1e-6, constant=float(y[0]))

    b = dict(DEFAULT_BOUNDS)
    if bounds:
        b.update(bounds)
    d = X.shape[1]
    lo = np.log(np.array([b["sigma_f"][0]] + [b["rho"][0]] * d + [b["sigma_n"][0]]))
    hi = np.log(np.array([b["sigma_f"][1]] + [b["rho"][1]] * d + [b["sigma_n"][1]]))
    spans = np.maximum(np.std(X, axis=0), 1e-2)
    theta0 = np.log(np.clip(
        np.concatenate([[np.std(y) + 0.5], spans, [1e-2]]),
        np.exp(lo), np.exp(hi)))

    D = _sq_diffs(X)
    best_theta, best_val = None, -np.inf
    for r in range(restarts):
        if r == 0:
            t0 = theta0
        else:
            rng = cfg.rng_from(seed, "gp-restart", r)
            t0 = lo + rng.random(len(lo)) * (hi - lo)
        res = minimize(lambda t: -_lml_from_diffs(D, y, t), t0,
                       method="L-BFGS-B",
                       jac=lambda t: -_gradient_from_diffs(D, y, t),
                       bounds=list(zip(lo, hi)),
                       options={"maxiter": 30})
        if -res.fun > best_val:
            best_val = -res.fun
            best_theta = res.x
    # never return something worse than the start point
    if _lml_from_diffs(D, y, theta0) > best_val:
        best_theta = theta0

    sigma_f = math.exp(best_theta[0])
    rho = np.exp(best_theta[1:1 + d])
    sigma_n = math.exp(best_theta[1 + d])
    return GPModel(X=X, y=y, sigma_f=sigma_f, rho=rho, sigma_n=sigma_n).factorize()


def predict_failure(gp: GPModel, s) -> float:
    """Posterior mean of the failure indicator at a state (Pose4 or xyz vector)."""
    if gp.constant is not None:
        return float(gp.constant)
    x = s.xyz if isinstance(s, Pose4) else np.asarray(s, dtype=float)
    k = _kernel_matrix(x[None, :], gp.X, gp.sigma_f, gp.rho)[0]
    return float(k @ gp.alpha)


def plan_crosses_failure(gp: GPModel | None, plan, tau: float = 0.75) -> bool:
    """True iff any plan waypoint is predicted inside the failure region."""
    if gp is None:
        return False
    return any(predict_failure(gp, w) > tau for w in plan.waypoints)
