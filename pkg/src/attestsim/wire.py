"""Binary framing between verifier and prover daemon.

Frame: ``len(4, big-endian) || msg_type(1) || payload``, where ``len``
counts payload bytes only and is capped at 4096. Payload layouts, offsets
in bytes:

=================  ====  =========================================
AttestRequest      0x01  pid(8 BE) chal(32)
AttestResponse     0x02  status(1) pid(8 BE) pk(32) sigma_len(2 BE) sigma
ChannelInit        0x03  eph_pk(32) nonce(12) ct(>=16)
ChannelConfirm     0x04  nonce(12) ct(>=16)
Error              0x05  code(1)
=================  ====  =========================================

``sigma_len`` is 32 (HMAC tag), 64 (Ed25519 signature), or 0 when status
is nonzero. Parsing is strict and total: truncation, trailing bytes,
unknown types, and out-of-range fields each raise a typed error, and no
input crashes the decoder. Anything beyond these five layouts (TLS,
compression, version negotiation) is deliberately absent.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Optional, Union

MAX_PAYLOAD = 4096
HEADER_LEN = 5
AEAD_TAG_LEN = 16

MSG_ATTEST_REQUEST = 0x01
MSG_ATTEST_RESPONSE = 0x02
MSG_CHANNEL_INIT = 0x03
MSG_CHANNEL_CONFIRM = 0x04
MSG_ERROR = 0x05

ERR_UNKNOWN_PID = 1
ERR_BAD_REQUEST = 2
ERR_NO_CONTEXT = 3
ERR_INTERNAL = 4
ERR_CHANNEL = 5


class WireError(Exception):
    pass


class OversizeFrameError(WireError):
    pass


class TruncatedError(WireError):
    pass


class UnknownTypeError(WireError):
    pass


class BadLengthError(WireError):
    pass


@dataclass(frozen=True)
class AttestRequest:
    pid: int
    chal: bytes


@dataclass(frozen=True)
class AttestResponse:
    status: int
    pid: int
    pk: bytes
    sigma: bytes


@dataclass(frozen=True)
class ChannelInit:
    eph_pk: bytes
    nonce: bytes
    ct: bytes


@dataclass(frozen=True)
class ChannelConfirm:
    nonce: bytes
    ct: bytes


@dataclass(frozen=True)
class ErrorMsg:
    code: int


WireMessage = Union[AttestRequest, AttestResponse, ChannelInit,
                    ChannelConfirm, ErrorMsg]


def _check_u64(value: int, what: str) -> None:
    if not 0 <= value < 2**64:
        raise BadLengthError(f"{what} out of u64 range")


def encode_payload(msg: WireMessage) -> tuple[int, bytes]:
    if isinstance(msg, AttestRequest):
        _check_u64(msg.pid, "pid")
        if len(msg.chal) != 32:
            raise BadLengthError("chal must be 32 bytes")
        return MSG_ATTEST_REQUEST, struct.pack(">Q", msg.pid) + msg.chal
    if isinstance(msg, AttestResponse):
        if not 0 <= msg.status <= 255:
            raise BadLengthError("status out of u8 range")
        _check_u64(msg.pid, "pid")
        if len(msg.pk) != 32:
            raise BadLengthError("pk must be 32 bytes")
        if len(msg.sigma) not in (0, 32, 64):
            raise BadLengthError("sigma must be 0, 32, or 64 bytes")
        return MSG_ATTEST_RESPONSE, (
            struct.pack(">BQ", msg.status, msg.pid) + msg.pk
            + struct.pack(">H", len(msg.sigma)) + msg.sigma)
    if isinstance(msg, ChannelInit):
        if len(msg.eph_pk) != 32 or len(msg.nonce) != 12:
            raise BadLengthError("eph_pk must be 32 bytes, nonce 12")
        if len(msg.ct) < AEAD_TAG_LEN:
            raise BadLengthError("ct shorter than an AEAD tag")
        return MSG_CHANNEL_INIT, msg.eph_pk + msg.nonce + msg.ct
    if isinstance(msg, ChannelConfirm):
        if len(msg.nonce) != 12:
            raise BadLengthError("nonce must be 12 bytes")
        if len(msg.ct) < AEAD_TAG_LEN:
            raise BadLengthError("ct shorter than an AEAD tag")
        return MSG_CHANNEL_CONFIRM, msg.nonce + msg.ct
    if isinstance(msg, ErrorMsg):
        if not 0 <= msg.code <= 255:
            raise BadLengthError("error code out of u8 range")
        return MSG_ERROR, struct.pack(">B", msg.code)
    raise UnknownTypeError(f"cannot encode {type(msg).__name__}")


def encode(msg: WireMessage) -> bytes:
    mtype, payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrameError(f"payload {len(payload)} exceeds {MAX_PAYLOAD}")
    return struct.pack(">IB", len(payload), mtype) + payload


def decode_payload(mtype: int, payload: bytes) -> WireMessage:
    """Strict per-type payload parser; every byte must be accounted for."""
    n = len(payload)
    if mtype == MSG_ATTEST_REQUEST:
        if n != 40:
            raise BadLengthError(f"attest request payload must be 40 bytes, got {n}")
        pid = struct.unpack(">Q", payload[:8])[0]
        return AttestRequest(pid=pid, chal=payload[8:40])
    if mtype == MSG_ATTEST_RESPONSE:
        if n < 43:
            raise TruncatedError(f"attest response payload too short ({n})")
        status, pid = struct.unpack(">BQ", payload[:9])
        pk = payload[9:41]
        sigma_len = struct.unpack(">H", payload[41:43])[0]
        if sigma_len not in (0, 32, 64):
            raise BadLengthError(f"sigma_len {sigma_len}")
        if n != 43 + sigma_len:
            raise BadLengthError(
                f"attest response payload {n} != {43 + sigma_len}")
        return AttestResponse(status=status, pid=pid, pk=pk,
                              sigma=payload[43:43 + sigma_len])
    if mtype == MSG_CHANNEL_INIT:
        if n < 44 + AEAD_TAG_LEN:
            raise TruncatedError(f"channel init payload too short ({n})")
        return ChannelInit(eph_pk=payload[:32], nonce=payload[32:44],
                           ct=payload[44:])
    if mtype == MSG_CHANNEL_CONFIRM:
        if n < 12 + AEAD_TAG_LEN:
            raise TruncatedError(f"channel confirm payload too short ({n})")
        return ChannelConfirm(nonce=payload[:12], ct=payload[12:])
    if mtype == MSG_ERROR:
        if n != 1:
            raise BadLengthError(f"error payload must be 1 byte, got {n}")
        return ErrorMsg(code=payload[0])
    raise UnknownTypeError(f"msg_type {mtype:#04x}")


def decode(frame: bytes) -> WireMessage:
    """Parse one complete frame; trailing bytes are an error."""
    if len(frame) < HEADER_LEN:
        raise TruncatedError(f"frame shorter than header ({len(frame)})")
    length, mtype = struct.unpack(">IB", frame[:HEADER_LEN])
    if length > MAX_PAYLOAD:
        raise BadLengthError(f"declared payload {length} exceeds {MAX_PAYLOAD}")
    if len(frame) < HEADER_LEN + length:
        raise TruncatedError(
            f"frame {len(frame)} shorter than declared {HEADER_LEN + length}")
    if len(frame) > HEADER_LEN + length:
        raise BadLengthError(f"{len(frame) - HEADER_LEN - length} trailing bytes")
    return decode_payload(mtype, frame[HEADER_LEN:])


class FrameStream:
    """Blocking frame reader/writer over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = None
                ) -> "FrameStream":
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock)

    def settimeout(self, timeout: Optional[float]) -> None:
        self._sock.settimeout(timeout)

    def send(self, msg: WireMessage) -> None:
        self._sock.sendall(encode(msg))

    def send_raw(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _recv_exact(self, n: int) -> Optional[bytes]:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def recv(self, allow_eof: bool = False) -> Optional[WireMessage]:
        """Read one frame. Clean EOF at a frame boundary returns None when
        ``allow_eof`` is set, otherwise raises TruncatedError."""
        header = self._recv_exact(HEADER_LEN)
        if header is None:
            if allow_eof:
                return None
            raise TruncatedError("connection closed before a frame arrived")
        length, mtype = struct.unpack(">IB", header)
        if length > MAX_PAYLOAD:
            raise BadLengthError(f"declared payload {length} exceeds {MAX_PAYLOAD}")
        payload = self._recv_exact(length) if length else b""
        if payload is None:
            raise TruncatedError("connection closed mid-frame")
        return decode_payload(mtype, payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "FrameStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
