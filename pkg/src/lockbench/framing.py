"""Length-prefixed frames over stream sockets (u32 little-endian prefix)."""

from __future__ import annotations

import socket
import struct

_LEN = struct.Struct("<I")


def recv_exactly(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on EOF or a closed/reset socket."""
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = sock.recv(remaining)
        except OSError:
            return None
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes | None:
    header = recv_exactly(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length == 0:
        return b""
    return recv_exactly(sock, length)
