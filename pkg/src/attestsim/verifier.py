"""Challenge-response verification and secure-channel bootstrap.

The verifier trusts only its policy file (verify keys and golden binaries
per device) and its own clock and randomness. Golden measurements are
recomputed locally from the referenced binaries at policy load, never
taken from a prover. Challenges are 32 random bytes, single-use, and
expire; acceptance consumes the challenge, so presenting the same
response twice is detected as replay.

A successful attestation can be extended into an authenticated channel:
ephemeral X25519 from the verifier, key derivation bound to the
attestation transcript (chal || pk || sigma), and a ChaCha20-Poly1305
confirm-token round trip. Only the process that owns the attested pk can
complete it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .boot import measure_binary
from .crypto import (
    CHAL_LEN,
    CHANNEL_AD_CONFIRM,
    CHANNEL_AD_INIT,
    NONCE_LEN,
    AttestToken,
    SignMode,
    VerifyKey,
    ct_equal,
    derive_session_key,
    open_sealed,
    seal,
    verify_token,
    x25519_public_key,
)
from .wire import (
    AttestRequest,
    AttestResponse,
    ChannelConfirm,
    ChannelInit,
    ErrorMsg,
    FrameStream,
    WireError,
)

log = logging.getLogger(__name__)

DEFAULT_TTL = 30.0
DEFAULT_TIMEOUT = 5.0


class AttestFailure(Exception):
    """Base for every way an attestation can be rejected."""


class AttestTimeoutError(AttestFailure):
    pass


class SigInvalidError(AttestFailure):
    pass


class PinMismatchError(SigInvalidError):
    """Response pk differs from the pinned first-seen pk."""


class ReplayDetectedError(AttestFailure):
    pass


class StaleChallengeError(AttestFailure):
    pass


class ProverError(AttestFailure):
    """The prover answered, but with an error status or error frame."""

    def __init__(self, code: int, source: str):
        super().__init__(f"prover reported error {code} ({source})")
        self.code = code
        self.source = source


class ConfirmFailedError(AttestFailure):
    pass


class PolicyError(Exception):
    pass


# --- policy ---------------------------------------------------------------

@dataclass
class DevicePolicy:
    device_id: str
    vk: VerifyKey
    golden: dict[int, bytes]            # pid -> expected measurement
    address: Optional[tuple[str, int]] = None
    pin_pk: bool = False
    pinned: dict[int, bytes] = field(default_factory=dict)


@dataclass
class Policy:
    devices: dict[str, DevicePolicy]

    @classmethod
    def load(cls, path: str) -> "Policy":
        """Read policy JSON and recompute golden digests from the trusted
        binary copies it references (paths relative to the policy file)."""
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict) or not isinstance(raw.get("devices"), dict):
            raise PolicyError(f"{path}: expected an object with 'devices'")
        base = os.path.dirname(os.path.abspath(path))
        devices: dict[str, DevicePolicy] = {}
        for device_id, entry in raw["devices"].items():
            if not isinstance(entry, dict):
                raise PolicyError(f"{path}: device {device_id} must be an object")
            try:
                mode = SignMode(entry["mode"])
                vk = VerifyKey.from_hex(mode, entry["verify_key"])
            except (KeyError, ValueError) as e:
                raise PolicyError(
                    f"{path}: device {device_id}: bad mode/verify_key") from e
            golden_raw = entry.get("golden")
            if not isinstance(golden_raw, dict) or not golden_raw:
                raise PolicyError(
                    f"{path}: device {device_id} needs a 'golden' map")
            golden: dict[int, bytes] = {}
            for pid_str, binary_path in golden_raw.items():
                try:
                    pid = int(pid_str)
                except ValueError as e:
                    raise PolicyError(
                        f"{path}: device {device_id}: pid {pid_str!r}") from e
                if not os.path.isabs(binary_path):
                    binary_path = os.path.join(base, binary_path)
                with open(binary_path, "rb") as bf:
                    golden[pid] = measure_binary(bf.read())
            address = None
            if "address" in entry:
                host, _, port = str(entry["address"]).rpartition(":")
                if not host or not port.isdigit():
                    raise PolicyError(
                        f"{path}: device {device_id}: address must be host:port")
                address = (host, int(port))
            devices[device_id] = DevicePolicy(
                device_id=device_id, vk=vk, golden=golden, address=address,
                pin_pk=bool(entry.get("pin_pk", False)))
        return cls(devices=devices)

    def device(self, device_id: str) -> DevicePolicy:
        dev = self.devices.get(device_id)
        if dev is None:
            raise PolicyError(f"unknown device {device_id!r}")
        return dev


# --- nonce ledger ---------------------------------------------------------

class NonceLedger:
    """Single-use challenge tracking with expiry.

    ``consume`` removes the challenge, so a second consume of the same
    bytes reports "unknown" and the caller treats it as replay. Expired
    entries are purged as a side effect of issuing, which bounds growth.
    """

    def __init__(self, ttl: float = DEFAULT_TTL,
                 clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self._clock = clock
        self._issued: dict[bytes, float] = {}
        self._lock = threading.Lock()

    def issue(self, chal: bytes) -> None:
        now = self._clock()
        with self._lock:
            cutoff = now - self.ttl
            for old in [c for c, t in self._issued.items() if t < cutoff]:
                del self._issued[old]
            self._issued[chal] = now

    def consume(self, chal: bytes) -> str:
        """Returns "fresh", "expired", or "unknown"; removes the entry."""
        now = self._clock()
        with self._lock:
            issued_at = self._issued.pop(chal, None)
        if issued_at is None:
            return "unknown"
        if now - issued_at > self.ttl:
            return "expired"
        return "fresh"

    def __len__(self) -> int:
        with self._lock:
            return len(self._issued)


# --- results --------------------------------------------------------------

@dataclass(frozen=True)
class AttestResult:
    device_id: str
    pid: int
    chal: bytes
    pk: bytes
    sigma: bytes
    measurement: bytes


class SessionKey:
    """Established channel key; repr never shows the key bytes."""

    __slots__ = ("key", "device_id", "pid")

    def __init__(self, key: bytes, device_id: str, pid: int):
        self.key = key
        self.device_id = device_id
        self.pid = pid

    def __repr__(self) -> str:
        return f"SessionKey(device={self.device_id!r}, pid={self.pid}, key=<redacted>)"


class Verifier:
    """Drives attestation rounds and judges responses against policy."""

    def __init__(self, policy: Policy, ttl: float = DEFAULT_TTL,
                 timeout: float = DEFAULT_TIMEOUT,
                 clock: Callable[[], float] = time.monotonic,
                 rng: Callable[[int], bytes] = os.urandom):
        self.policy = policy
        self.timeout = timeout
        self._rng = rng
        self.ledger = NonceLedger(ttl=ttl, clock=clock)

    def new_challenge(self) -> bytes:
        chal = self._rng(CHAL_LEN)
        self.ledger.issue(chal)
        return chal

    def check_response(self, device_id: str, pid: int, chal: bytes,
                       resp: AttestResponse) -> AttestResult:
        """Judge a captured response. Raises an AttestFailure subclass on
        any rejection; returns the accepted result otherwise.

        Order: prover status, response/request consistency, pin,
        signature, then challenge freshness. The challenge is consumed
        only when the signature is good, so a bad response does not burn
        it, while re-presenting an accepted response is replay.
        """
        dev = self.policy.device(device_id)
        expected_m = dev.golden.get(pid)
        if expected_m is None:
            raise PolicyError(f"device {device_id!r} has no golden entry for pid {pid}")
        if resp.status != 0:
            raise ProverError(resp.status, "signing-process")
        if resp.pid != pid:
            raise SigInvalidError(
                f"response names pid {resp.pid}, requested {pid}")
        if dev.pin_pk and pid in dev.pinned and resp.pk != dev.pinned[pid]:
            raise PinMismatchError(f"pk changed for device {device_id!r} pid {pid}")
        expected_sig_len = 32 if dev.vk.mode is SignMode.HMAC else 64
        if len(resp.sigma) != expected_sig_len:
            raise SigInvalidError(
                f"sigma length {len(resp.sigma)} does not fit mode {dev.vk.mode.value}")
        token = AttestToken(dev.vk.mode, resp.sigma)
        if not verify_token(dev.vk, chal, resp.pk, expected_m, token):
            raise SigInvalidError("token does not verify")
        freshness = self.ledger.consume(chal)
        if freshness == "unknown":
            raise ReplayDetectedError("challenge was never issued or already used")
        if freshness == "expired":
            raise StaleChallengeError("challenge outlived its ttl")
        if dev.pin_pk and pid not in dev.pinned:
            dev.pinned[pid] = resp.pk
        return AttestResult(device_id=device_id, pid=pid, chal=chal,
                            pk=resp.pk, sigma=resp.sigma, measurement=expected_m)

    def attest(self, device_id: str, pid: int, stream: FrameStream) -> AttestResult:
        """One full round over an open stream: challenge, send, judge."""
        chal = self.new_challenge()
        stream.settimeout(self.timeout)
        try:
            stream.send(AttestRequest(pid=pid, chal=chal))
            resp = stream.recv()
        except (socket.timeout, TimeoutError) as e:
            raise AttestTimeoutError(f"no response within {self.timeout}s") from e
        except WireError as e:
            raise ProverError(255, f"protocol: {e}") from e
        if isinstance(resp, ErrorMsg):
            raise ProverError(resp.code, "daemon")
        if not isinstance(resp, AttestResponse):
            raise ProverError(255, f"unexpected {type(resp).__name__}")
        return self.check_response(device_id, pid, chal, resp)

    def establish_channel(self, result: AttestResult, stream: FrameStream
                          ) -> SessionKey:
        """Bootstrap an authenticated channel from an accepted result.

        Fresh X25519 keypair per call; the session key binds the
        attestation transcript, so only the attested process (which holds
        the pk's private half) can decrypt the init and echo the token.
        """
        eph_private = os.urandom(32)
        eph_pk = x25519_public_key(eph_private)
        transcript = result.chal + result.pk + result.sigma
        key = derive_session_key(eph_private, result.pk, transcript)
        token = self._rng(32)
        nonce = os.urandom(NONCE_LEN)
        stream.settimeout(self.timeout)
        try:
            stream.send(ChannelInit(eph_pk=eph_pk, nonce=nonce,
                                    ct=seal(key, nonce, token, CHANNEL_AD_INIT)))
            resp = stream.recv()
        except (socket.timeout, TimeoutError) as e:
            raise AttestTimeoutError(f"no confirm within {self.timeout}s") from e
        except WireError as e:
            raise ConfirmFailedError(f"protocol: {e}") from e
        if isinstance(resp, ErrorMsg):
            raise ConfirmFailedError(f"prover error {resp.code}")
        if not isinstance(resp, ChannelConfirm):
            raise ConfirmFailedError(f"unexpected {type(resp).__name__}")
        echoed = open_sealed(key, resp.nonce, resp.ct, CHANNEL_AD_CONFIRM)
        if echoed is None or len(echoed) != len(token) or not ct_equal(echoed, token):
            raise ConfirmFailedError("confirm token did not authenticate")
        return SessionKey(key=key, device_id=result.device_id, pid=result.pid)


# --- CLI ------------------------------------------------------------------

def _cli_attest(args: argparse.Namespace) -> int:
    policy = Policy.load(args.policy)
    dev = policy.device(args.device)
    if dev.address is None:
        print(f"device {args.device!r} has no address in policy", file=sys.stderr)
        return 4
    verifier = Verifier(policy, timeout=args.timeout)
    try:
        with FrameStream.connect(*dev.address, timeout=args.timeout) as stream:
            result = verifier.attest(args.device, args.pid, stream)
            if args.channel:
                session = verifier.establish_channel(result, stream)
    except AttestTimeoutError as e:
        print(f"timeout: {e}", file=sys.stderr)
        return 3
    except AttestFailure as e:
        print(f"rejected: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"transport: {e}", file=sys.stderr)
        return 3
    print(f"accepted device={result.device_id} pid={result.pid} "
          f"measurement={result.measurement.hex()} sigma={result.sigma.hex()}")
    if args.channel:
        fingerprint = hashlib.sha256(session.key).hexdigest()[:16]
        print(f"channel established key_fingerprint={fingerprint}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="verifier",
        description="Attest a remote simulated device and optionally "
                    "bootstrap an authenticated channel.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, with_channel in (("attest", False), ("channel", True)):
        p = sub.add_parser(name, help="run one attestation round"
                           + (" and establish a channel" if with_channel else ""))
        p.add_argument("--device", required=True, help="device id in the policy")
        p.add_argument("--pid", required=True, type=int,
                       help="user process id to attest")
        p.add_argument("--policy", required=True, help="policy JSON path")
        p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
        p.set_defaults(channel=with_channel)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _cli_attest(args)
    except (PolicyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
