"""Length-prefixed binary message framing for the TCP transport.

Frame layout (little-endian): ``[length u32][type u8][payload]`` where
``length`` counts the type byte plus the payload.  Frames above 256 MiB are
rejected before any allocation.  Payloads carry only model parameters and
scalar metrics; demonstration data never crosses the wire.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

PROTO_VERSION = 1
MAX_FRAME = 256 * 1024 * 1024

TAG_HELLO = 0x01
TAG_FIT = 0x02
TAG_FIT_RESULT = 0x03
TAG_EVAL = 0x04
TAG_EVAL_RESULT = 0x05
TAG_SHUTDOWN = 0x06

_LEN = struct.Struct("<I")
_HELLO = struct.Struct("<IH")
_FIT_HEAD = struct.Struct("<IIdQQ")
_FIT_RESULT_HEAD = struct.Struct("<IQdQ")
_EVAL_HEAD = struct.Struct("<Q")
_EVAL_RESULT = struct.Struct("<dd")


class ProtocolError(Exception):
    """Base error for malformed or unexpected frames."""


class BadTagError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class OversizeFrameError(ProtocolError):
    pass


class FrameStructureError(ProtocolError):
    pass


class ProtocolVersionError(ProtocolError):
    pass


class ConnectionClosed(ProtocolError):
    """Peer closed the socket at a clean frame boundary."""


@dataclass(frozen=True)
class Hello:
    client_id: int
    proto_version: int = PROTO_VERSION


@dataclass(frozen=True, eq=False)
class Fit:
    round: int
    epochs: int
    lr: float
    shuffle_seed: int
    params: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Fit)
            and (self.round, self.epochs, self.lr, self.shuffle_seed)
            == (other.round, other.epochs, other.lr, other.shuffle_seed)
            and np.array_equal(self.params, other.params)
        )


@dataclass(frozen=True, eq=False)
class FitResult:
    client_id: int
    num_samples: int
    train_loss: float
    params: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, FitResult)
            and (self.client_id, self.num_samples, self.train_loss)
            == (other.client_id, other.num_samples, other.train_loss)
            and np.array_equal(self.params, other.params)
        )


@dataclass(frozen=True, eq=False)
class Eval:
    params: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Eval) and np.array_equal(self.params, other.params)


@dataclass(frozen=True)
class EvalResult:
    rmse: float
    success: float


@dataclass(frozen=True)
class Shutdown:
    pass


Message = Hello | Fit | FitResult | Eval | EvalResult | Shutdown


def _params_bytes(params: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(params, dtype="<f8")
    if arr.ndim != 1:
        raise ValueError("parameter payloads must be 1-D")
    return arr.tobytes()


def _parse_params(payload: bytes, offset: int, count: int, what: str) -> np.ndarray:
    remaining = len(payload) - offset
    if remaining != count * 8:
        raise FrameStructureError(
            f"{what}: params blob is {remaining} bytes, expected {count}*8"
        )
    return np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        tag, payload = TAG_HELLO, _HELLO.pack(msg.client_id, msg.proto_version)
    elif isinstance(msg, Fit):
        blob = _params_bytes(msg.params)
        tag = TAG_FIT
        payload = (
            _FIT_HEAD.pack(
                msg.round, msg.epochs, msg.lr, msg.shuffle_seed, len(blob) // 8
            )
            + blob
        )
    elif isinstance(msg, FitResult):
        blob = _params_bytes(msg.params)
        tag = TAG_FIT_RESULT
        payload = (
            _FIT_RESULT_HEAD.pack(
                msg.client_id, msg.num_samples, msg.train_loss, len(blob) // 8
            )
            + blob
        )
    elif isinstance(msg, Eval):
        blob = _params_bytes(msg.params)
        tag, payload = TAG_EVAL, _EVAL_HEAD.pack(len(blob) // 8) + blob
    elif isinstance(msg, EvalResult):
        tag, payload = TAG_EVAL_RESULT, _EVAL_RESULT.pack(msg.rmse, msg.success)
    elif isinstance(msg, Shutdown):
        tag, payload = TAG_SHUTDOWN, b""
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise OversizeFrameError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(length) + bytes([tag]) + payload


def _decode_payload(tag: int, payload: bytes) -> Message:
    try:
        if tag == TAG_HELLO:
            if len(payload) != _HELLO.size:
                raise FrameStructureError(f"HELLO payload is {len(payload)} bytes")
            client_id, version = _HELLO.unpack(payload)
            if version != PROTO_VERSION:
                raise ProtocolVersionError(
                    f"peer speaks protocol {version}, this side speaks {PROTO_VERSION}"
                )
            return Hello(client_id=client_id, proto_version=version)
        if tag == TAG_FIT:
            if len(payload) < _FIT_HEAD.size:
                raise FrameStructureError("FIT payload shorter than its header")
            rnd, epochs, lr, shuffle_seed, count = _FIT_HEAD.unpack_from(payload, 0)
            params = _parse_params(payload, _FIT_HEAD.size, count, "FIT")
            return Fit(round=rnd, epochs=epochs, lr=lr, shuffle_seed=shuffle_seed, params=params)
        if tag == TAG_FIT_RESULT:
            if len(payload) < _FIT_RESULT_HEAD.size:
                raise FrameStructureError("FIT_RESULT payload shorter than its header")
            client_id, num_samples, train_loss, count = _FIT_RESULT_HEAD.unpack_from(payload, 0)
            params = _parse_params(payload, _FIT_RESULT_HEAD.size, count, "FIT_RESULT")
            return FitResult(
                client_id=client_id,
                num_samples=num_samples,
                train_loss=train_loss,
                params=params,
            )
        if tag == TAG_EVAL:
            if len(payload) < _EVAL_HEAD.size:
                raise FrameStructureError("EVAL payload shorter than its header")
            (count,) = _EVAL_HEAD.unpack_from(payload, 0)
            return Eval(params=_parse_params(payload, _EVAL_HEAD.size, count, "EVAL"))
        if tag == TAG_EVAL_RESULT:
            if len(payload) != _EVAL_RESULT.size:
                raise FrameStructureError(f"EVAL_RESULT payload is {len(payload)} bytes")
            rmse, success = _EVAL_RESULT.unpack(payload)
            return EvalResult(rmse=rmse, success=success)
        if tag == TAG_SHUTDOWN:
            if payload:
                raise FrameStructureError("SHUTDOWN carries no payload")
            return Shutdown()
    except struct.error as exc:
        raise FrameStructureError(f"malformed payload for tag {tag:#x}: {exc}") from exc
    raise BadTagError(f"unknown message tag {tag:#x}")


def decode_message(frame: bytes) -> Message:
    """Decode one full frame (length prefix included)."""
    if len(frame) < _LEN.size:
        raise TruncatedFrameError(f"frame of {len(frame)} bytes has no length prefix")
    (length,) = _LEN.unpack_from(frame, 0)
    if length > MAX_FRAME:
        raise OversizeFrameError(f"declared frame length {length} exceeds {MAX_FRAME}")
    if length < 1:
        raise FrameStructureError("frame declares an empty body (no type byte)")
    body = frame[_LEN.size :]
    if len(body) < length:
        raise TruncatedFrameError(
            f"frame body is {len(body)} bytes, header declared {length}"
        )
    if len(body) > length:
        raise FrameStructureError(
            f"{len(body) - length} trailing bytes after the declared frame"
        )
    return _decode_payload(body[0], body[1:])


def _recv_exact(sock: socket.socket, n: int, *, at_boundary: bool) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if at_boundary and got == 0:
                raise ConnectionClosed("peer closed the connection")
            raise TruncatedFrameError(f"connection dropped after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, _LEN.size, at_boundary=True)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise OversizeFrameError(f"declared frame length {length} exceeds {MAX_FRAME}")
    if length < 1:
        raise FrameStructureError("frame declares an empty body (no type byte)")
    body = _recv_exact(sock, length, at_boundary=False)
    return _decode_payload(body[0], body[1:])
