"""Minimal RFC 6455 WebSocket framing over plain sockets.

Just enough for one teleop client: HTTP upgrade handshake, text and close
frames, client masking.  Text payloads are UTF-8 JSON documents; the frame
header carries the payload length, keeping both sides language-neutral.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class SocketClosed(ConnectionError):
    pass


def _recv_exact(conn: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise SocketClosed("peer closed")
        buf += chunk
    return buf


def _read_http_head(conn: socket.socket) -> bytes:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            raise SocketClosed("peer closed during handshake")
        data += chunk
        if len(data) > 65536:
            raise ValueError("handshake too large")
    return data


def accept_handshake(conn: socket.socket) -> None:
    """Server side of the upgrade: read the request, send 101."""
    head = _read_http_head(conn).decode("latin1")
    key = None
    for line in head.split("\r\n"):
        if line.lower().startswith("sec-websocket-key:"):
            key = line.split(":", 1)[1].strip()
    if key is None:
        conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise ValueError("missing Sec-WebSocket-Key")
    accept = base64.b64encode(
        hashlib.sha1((key + GUID).encode()).digest()).decode()
    conn.sendall((
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept}\r\n\r\n").encode())


def client_handshake(conn: socket.socket, host: str, path: str = "/") -> None:
    key = base64.b64encode(os.urandom(16)).decode()
    conn.sendall((
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n\r\n").encode())
    head = _read_http_head(conn).decode("latin1")
    if "101" not in head.split("\r\n", 1)[0]:
        raise ConnectionError(f"handshake rejected: {head.splitlines()[0]}")


def _encode_frame(payload: bytes, opcode: int, mask: bool) -> bytes:
    header = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        header.append(mask_bit | n)
    elif n < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack(">H", n)
    else:
        header.append(mask_bit | 127)
        header += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        header += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(header) + payload


def send_text(conn: socket.socket, text: str, mask: bool = False) -> None:
    conn.sendall(_encode_frame(text.encode(), opcode=0x1, mask=mask))


def send_close(conn: socket.socket, mask: bool = False) -> None:
    try:
        conn.sendall(_encode_frame(b"", opcode=0x8, mask=mask))
    except OSError:
        pass


def recv_message(conn: socket.socket) -> str | None:
    """Next text message; None when the peer sent a close frame."""
    fragments = []
    while True:
        b0, b1 = _recv_exact(conn, 2)
        fin = b0 & 0x80
        opcode = b0 & 0x0F
        masked = b1 & 0x80
        n = b1 & 0x7F
        if n == 126:
            n = struct.unpack(">H", _recv_exact(conn, 2))[0]
        elif n == 127:
            n = struct.unpack(">Q", _recv_exact(conn, 8))[0]
        key = _recv_exact(conn, 4) if masked else None
        payload = _recv_exact(conn, n) if n else b""
        if key:
            payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        if opcode == 0x8:  # close
            send_close(conn)
            return None
        if opcode == 0x9:  # ping -> pong
            conn.sendall(_encode_frame(payload, opcode=0xA, mask=False))
            continue
        if opcode == 0xA:  # pong
            continue
        fragments.append(payload)
        if fin:
            return b"".join(fragments).decode()
