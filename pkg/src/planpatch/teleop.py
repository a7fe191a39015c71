"""Teleoperation session service: live state streaming and human demos.

One WebSocket client at a time.  The service runs the training procedure,
streams a state snapshot per simulator step, and when the gate rejects a
transition it asks the operator to demonstrate.  Operator actions get the
same uniform noise as scripted demos and are recorded in the same JSON-lines
schema, so the resulting file trains a forest unchanged.
"""

from __future__ import annotations

import enum
import json
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from . import orchestrator as orch
from . import skill as sk
from . import ws
from .world import Action, Grip, make_task, observe, step


class SessionState(enum.Enum):
    IDLE = "Idle"
    EXECUTING = "Executing"
    AWAITING_DEMO = "AwaitingDemo"
    DEMO_ACTIVE = "DemoActive"
    REPLAY = "Replay"


class MalformedMessage(ValueError):
    pass


class ClientDisconnected(ConnectionError):
    pass


class CorruptLog(ValueError):
    pass


def snapshot_payload(t: int, world, phase: str) -> dict:
    obs = observe(world)
    return {
        "t": t,
        "ee": list(world.ee.as_array()),
        "piece_pose": (list(world.piece_pose.as_array())
                       if world.piece_pose is not None else None),
        "contact": bool(world.contact),
        "raster": list(obs.raster.pixels),
        "phase": phase,
    }


def parse_action_cmd(payload: dict) -> Action:
    try:
        d = payload["d"]
        grip = Grip(payload.get("grip", "hold"))
        return Action(float(d[0]), float(d[1]), float(d[2]), float(d[3]), grip)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise MalformedMessage(str(e)) from e


class _Peer:
    """One connected operator: framed JSON with per-direction sequencing."""

    def __init__(self, conn: socket.socket):
        self.conn = conn
        self.seq_out = 0
        self.inbox: queue.Queue = queue.Queue()
        self.alive = True
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                msg = ws.recv_message(self.conn)
                if msg is None:
                    break
                self.inbox.put(msg)
        except (OSError, ConnectionError):
            pass
        self.alive = False
        self.inbox.put(None)

    def send(self, mtype: str, payload: dict) -> None:
        self.seq_out += 1
        try:
            ws.send_text(self.conn, json.dumps(
                {"type": mtype, "seq": self.seq_out, "payload": payload}))
        except OSError as e:
            self.alive = False
            raise ClientDisconnected(str(e)) from e

    def poll(self):
        try:
            return self.inbox.get_nowait()
        except queue.Empty:
            return None

    def wait(self, timeout: float | None = None):
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        ws.send_close(self.conn)
        try:
            self.conn.close()
        except OSError:
            pass


@dataclass
class TeleopService:
    """Runs one training session, demonstrations supplied over the socket."""

    port: int = 8765
    n_demos: int = 1
    seed: int = 0
    config: cfg.FrameworkConfig = field(default_factory=cfg.FrameworkConfig)
    out_dir: str = "out"
    state: SessionState = SessionState.IDLE
    snapshot_period: float = 0.0  # extra delay per streamed step, seconds

    def serve_forever(self, ready_event: threading.Event | None = None,
                      max_sessions: int | None = None) -> None:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(("127.0.0.1", self.port))
        srv.listen(1)
        if ready_event is not None:
            ready_event.set()
        sessions = 0
        try:
            while max_sessions is None or sessions < max_sessions:
                conn, _ = srv.accept()
                sessions += 1
                try:
                    ws.accept_handshake(conn)
                    peer = _Peer(conn)
                    self.run_session(peer)
                except (ConnectionError, ValueError):
                    pass
                finally:
                    try:
                        conn.close()
                    except OSError:
                        pass
        finally:
            srv.close()

    # -- session logic --------------------------------------------------------

    def _drain_out_of_band(self, peer: _Peer) -> None:
        """Reject commands that arrive outside DemoActive."""
        while True:
            raw = peer.poll()
            if raw is None:
                return
            self._reject(peer, raw, f"no commands accepted in {self.state.value}")

    def _reject(self, peer: _Peer, raw, why: str) -> None:
        try:
            doc = json.loads(raw) if isinstance(raw, str) else None
            mtype = doc.get("type", "?") if isinstance(doc, dict) else "?"
        except json.JSONDecodeError:
            mtype = "malformed"
        peer.send("error", {"rejected": mtype, "reason": why})

    def run_session(self, peer: _Peer) -> None:
        """Training episodes with operator demos until n_demos are collected."""
        self.state = SessionState.EXECUTING
        conf = self.config
        artifacts = orch.SessionArtifacts(config=conf)
        demo_paths = []
        os.makedirs(self.out_dir, exist_ok=True)

        episode = 0
        cap = 10 * self.n_demos + 20
        while len(artifacts.demos) < self.n_demos and episode < cap:
            rng = cfg.rng_from(self.seed, "teleop-episode", episode)
            shape = cfg.SHAPES[episode % len(cfg.SHAPES)]
            goal = cfg.SHAPE_GOAL_CELL[shape]
            cells = [c for c in range(8) if c != goal]
            start = cells[int(rng.integers(0, len(cells)))]
            task = cfg.TaskConfig(shape=shape, start_cell=start, obstacle=False,
                                  eps_percept=conf.eps_percept,
                                  tol_insert=conf.tol_insert, seed=self.seed)
            world, scene = make_task(task, cfg.derive_seed(self.seed, "world", episode))
            demo_source = self._socket_demo_source(peer, scene)
            try:
                orch.train_episode(world, scene, artifacts,
                                   demo_source=demo_source,
                                   seed=cfg.derive_seed(self.seed, "episode", episode),
                                   fit_skill=False,
                                   step_callback=self._stream_step(peer))
            except ClientDisconnected:
                self.state = SessionState.AWAITING_DEMO
                return
            episode += 1

        path = os.path.join(self.out_dir, "teleop_demos.jsonl")
        artifacts.demos.write_jsonl(path)
        if len(artifacts.demos) > 0:
            orch.train_skill(artifacts, seed=cfg.derive_seed(self.seed, "skill"))
        peer.send("session_done", {"demos": len(artifacts.demos),
                                   "demo_file": path})
        self.state = SessionState.IDLE
        peer.close()

    def _stream_step(self, peer: _Peer):
        def callback(t, world):
            self._drain_out_of_band(peer)
            peer.send("state_snapshot",
                      snapshot_payload(t, world, self.state.value))
            if self.snapshot_period:
                time.sleep(self.snapshot_period)
        return callback

    def _socket_demo_source(self, peer: _Peer, scene):
        def source(world, seed):
            return self.collect_teleop_demo(peer, world, scene, seed)
        return source

    def collect_teleop_demo(self, peer: _Peer, world, scene, seed: int,
                            step_cap: int | None = None):
        """Operator-driven counterpart of the scripted demo collection."""
        conf = self.config
        cap = step_cap or conf.demo_step_cap
        rng = cfg.rng_from(seed, "demo-noise")
        goal_xy = scene.hole_centers_hat[world.goal_cell]
        self.state = SessionState.AWAITING_DEMO
        peer.send("demo_request",
                  {"failure_state": list(world.ee.as_array()),
                   "goal_center_hat": [float(goal_xy[0]), float(goal_xy[1])]})

        recorded = []
        w = world
        t = 0
        while t < cap:
            if w.inserted_depth >= w.board.lip_depth - 1e-9:
                self.state = SessionState.EXECUTING
                peer.send("demo_done", {"outcome": "Success", "steps": len(recorded)})
                return recorded, w
            raw = peer.wait(timeout=60.0)
            if raw is None:
                if not peer.alive:
                    self.state = SessionState.AWAITING_DEMO
                    raise ClientDisconnected("operator left mid-demo")
                continue
            try:
                doc = json.loads(raw)
                if doc.get("type") != "action_cmd":
                    self._reject(peer, raw, "expected action_cmd")
                    continue
                base = parse_action_cmd(doc.get("payload", {}))
            except (MalformedMessage, json.JSONDecodeError) as e:
                peer.send("error", {"rejected": "action_cmd", "reason": str(e)})
                continue
            self.state = SessionState.DEMO_ACTIVE
            noise = rng.uniform(-conf.demo_beta, conf.demo_beta, size=3)
            noised = Action(base.dx + noise[0], base.dy + noise[1],
                            base.dz + noise[2], base.dyaw, base.grip).clamped()
            obs = observe(w)
            recorded.append(sk.DemoStep(
                pose=sk.goal_frame_pose(w.ee, goal_xy), action=noised, obs=obs))
            w, _ = step(w, noised)
            t += 1
            peer.send("state_snapshot",
                      snapshot_payload(t, w, SessionState.DEMO_ACTIVE.value))
        self.state = SessionState.EXECUTING
        peer.send("demo_done", {"outcome": "Failed", "steps": len(recorded)})
        raise sk.DemoFailed(f"no insertion within {cap} teleop steps")


# -- replay -------------------------------------------------------------------

def iter_replay(path):
    """Yield replay_frame payloads from an episode JSON-lines log."""
    frames = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                frames.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptLog(str(e)) from e
    for i, rec in enumerate(frames):
        yield {"type": "replay_frame", "seq": i + 1, "payload": rec}


def stream_replay(peer: _Peer, path, cadence: float = 0.05) -> int:
    """Push replay frames to a connected peer at a fixed cadence."""
    n = 0
    for frame in iter_replay(path):
        peer.send("replay_frame", frame["payload"])
        n += 1
        if cadence:
            time.sleep(cadence)
    return n
