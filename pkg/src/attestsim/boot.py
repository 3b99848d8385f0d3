"""Measured boot: image verification, spawn-and-measure, map transfer.

The pipeline brings a device from power-on to a steady state in which the
only live processes are the signing process and the user processes, the
signing process holds a frozen measurement map, and no live process holds
spawn/terminate authority.

Stages, in order:

1. ``secure_boot`` checks the kernel and root-process images against the
   trust anchors and hands back a fresh kernel with the root process in
   place.
2. ``run_boot`` spawns the signing process with its two endpoints, then
   each user process from the manifest (write-xor-execute checked by the
   kernel at spawn, binary hashed into the measurement map, send
   capability minted with the next counter badge), and drives the
   transfer of the map into the signing process over IPC.
3. ``finalize_boot`` terminates the boot-time processes and drops kernel
   authority for good.

Any failure mid-pipeline tears the kernel down to an empty, finalized
state; a partially booted device is never observable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

from .crypto import SignKey, sha256
from .kernel import (
    Call,
    Kernel,
    KernelError,
    KernelProcessSpec,
    ProcessApi,
    RegionRequest,
    Rights,
    SELF_CODE_REGION,
)
from .signing import (
    SENTINEL_PID,
    TRANSFER_LEN,
    SpState,
    signing_program,
    words_from_bytes_be,
)
from .userland import make_relay_program

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 16

# Boot-time and signer pids live in a reserved band at the top of the pid
# space so a manifest pid can never collide with them or with the transfer
# sentinel (2**64 - 1).
RESERVED_PID_BASE = 2**64 - 256
RP_PID = RESERVED_PID_BASE
PST_PID = RESERVED_PID_BASE + 1
IP_PID = RESERVED_PID_BASE + 2
SP_PID = RESERVED_PID_BASE + 3


class BootError(Exception):
    pass


class KernelHashMismatchError(BootError):
    pass


class TcbHashMismatchError(BootError):
    pass


class CapacityExceededError(BootError):
    pass


class NackFromSpError(BootError):
    pass


class EmptyBinaryError(BootError):
    pass


class ManifestError(BootError):
    pass


# --- images and anchors ---------------------------------------------------

def _keystream_blob(label: str, size: int) -> bytes:
    """Deterministic filler so image bytes look like real binaries."""
    out = bytearray()
    block = hashlib.sha256(label.encode("ascii")).digest()
    while len(out) < size:
        out += block
        block = hashlib.sha256(block).digest()
    return bytes(out[:size])


KERNEL_IMAGE = b"\x7fKRN" + _keystream_blob("kernel-image-v1", 8188)
RP_IMAGE = b"\x7fRTP" + _keystream_blob("root-process-image-v1", 8188)
SP_IMAGE = b"\x7fSGN" + _keystream_blob("signing-process-image-v1", 4092)
IP_IMAGE = b"\x7fINI" + _keystream_blob("init-process-image-v1", 2044)


@dataclass(frozen=True)
class ImageManifest:
    kernel_image: bytes
    rp_image: bytes
    expected_kernel_sha256: bytes
    expected_rp_sha256: bytes


def default_anchors() -> dict[str, str]:
    """Hex digests of the built-in images, as they appear in anchor files."""
    return {
        "kernel_sha256": sha256(KERNEL_IMAGE).hex(),
        "rp_sha256": sha256(RP_IMAGE).hex(),
    }


def load_anchors(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    anchors = {}
    for field_name in ("kernel_sha256", "rp_sha256"):
        value = raw.get(field_name)
        if not isinstance(value, str) or len(value) != 64:
            raise ManifestError(f"{path}: {field_name} must be 64 hex chars")
        try:
            bytes.fromhex(value)
        except ValueError as e:
            raise ManifestError(f"{path}: {field_name} is not hex") from e
        anchors[field_name] = value.lower()
    return anchors


def write_anchor_file(path: str, anchors: Optional[dict[str, str]] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(anchors or default_anchors(), f, indent=2)
        f.write("\n")


def image_manifest(anchors: Optional[dict[str, str]] = None,
                   kernel_image: bytes = KERNEL_IMAGE,
                   rp_image: bytes = RP_IMAGE) -> ImageManifest:
    anchors = anchors or default_anchors()
    return ImageManifest(
        kernel_image=kernel_image,
        rp_image=rp_image,
        expected_kernel_sha256=bytes.fromhex(anchors["kernel_sha256"]),
        expected_rp_sha256=bytes.fromhex(anchors["rp_sha256"]),
    )


# --- user-process manifest ------------------------------------------------

@dataclass(frozen=True)
class ProcessSpec:
    pid: int
    binary: bytes
    regions: tuple[RegionRequest, ...] = (
        RegionRequest(SELF_CODE_REGION, Rights(read=True, execute=True)),
    )


def _region_from_entry(entry: dict) -> RegionRequest:
    region = entry.get("region")
    if not isinstance(region, str) or not region:
        raise ManifestError("cap entry needs a nonempty 'region'")
    return RegionRequest(region, Rights(
        read=bool(entry.get("read", False)),
        write=bool(entry.get("write", False)),
        execute=bool(entry.get("execute", False)),
    ))


def load_user_manifest(path: str) -> list[ProcessSpec]:
    """Read the JSON process manifest; binaries are loaded eagerly.

    Each entry: ``{"pid": n, "binary": "relative/or/abs/path",
    "caps": [{"region": ..., "read": ..., "write": ..., "execute": ...}]}``
    with ``caps`` defaulting to read+execute over the process's own code.
    """
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: top level must be a JSON array")
    base = os.path.dirname(os.path.abspath(path))
    specs: list[ProcessSpec] = []
    seen: set[int] = set()
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}[{i}]: entry must be an object")
        pid = entry.get("pid")
        if not isinstance(pid, int) or isinstance(pid, bool):
            raise ManifestError(f"{path}[{i}]: 'pid' must be an integer")
        if not 1 <= pid < RESERVED_PID_BASE:
            raise ManifestError(
                f"{path}[{i}]: pid {pid} outside [1, {RESERVED_PID_BASE})")
        if pid in seen:
            raise ManifestError(f"{path}[{i}]: duplicate pid {pid}")
        seen.add(pid)
        binary_path = entry.get("binary")
        if not isinstance(binary_path, str):
            raise ManifestError(f"{path}[{i}]: 'binary' must be a path")
        if not os.path.isabs(binary_path):
            binary_path = os.path.join(base, binary_path)
        with open(binary_path, "rb") as bf:
            binary = bf.read()
        caps = entry.get("caps")
        if caps is None:
            regions = ProcessSpec.__dataclass_fields__["regions"].default
        elif isinstance(caps, list):
            regions = tuple(_region_from_entry(c) for c in caps)
        else:
            raise ManifestError(f"{path}[{i}]: 'caps' must be a list")
        specs.append(ProcessSpec(pid=pid, binary=binary, regions=regions))
    return specs


# --- measurement ----------------------------------------------------------

def measure_binary(binary: bytes) -> bytes:
    if len(binary) == 0:
        raise EmptyBinaryError("refusing to measure an empty binary")
    return sha256(binary)


class MeasurementMap:
    """Boot-side builder: bounded, append-only, insertion-ordered."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: list[tuple[int, bytes]] = []
        self._pids: set[int] = set()

    def add(self, pid: int, digest: bytes) -> None:
        if len(self._entries) >= self.capacity:
            raise CapacityExceededError(
                f"measurement map full at {self.capacity} entries")
        if pid in self._pids:
            raise ManifestError(f"pid {pid} measured twice")
        if len(digest) != 32:
            raise ValueError("digest must be 32 bytes")
        self._entries.append((pid, bytes(digest)))
        self._pids.add(pid)

    def entries(self) -> list[tuple[int, bytes]]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


# --- pipeline -------------------------------------------------------------

@dataclass
class BootReport:
    sp_pid: int
    mode: str
    spawned: list[tuple[int, int, bytes]] = field(default_factory=list)
    terminated: list[int] = field(default_factory=list)

    def badge_of(self, pid: int) -> Optional[int]:
        for spawned_pid, badge, _ in self.spawned:
            if spawned_pid == pid:
                return badge
        return None

    def digest_of(self, pid: int) -> Optional[bytes]:
        for spawned_pid, _, digest in self.spawned:
            if spawned_pid == pid:
                return digest
        return None

    def up_pids(self) -> list[int]:
        return [pid for pid, _, _ in self.spawned]


@dataclass
class BootedSystem:
    kernel: Kernel
    report: BootReport
    sp_state: SpState


ProgramFactory = Callable[[ProcessSpec, int], Callable]


def secure_boot(manifest: ImageManifest) -> Kernel:
    """Verify images against anchors; a fresh kernel with the root process
    spawned is returned only if both match."""
    if sha256(manifest.kernel_image) != manifest.expected_kernel_sha256:
        raise KernelHashMismatchError("kernel image does not match anchor")
    if sha256(manifest.rp_image) != manifest.expected_rp_sha256:
        raise TcbHashMismatchError("root-process image does not match anchor")
    kernel = Kernel()
    kernel.spawn_process(KernelProcessSpec(RP_PID, manifest.rp_image))
    log.info("phase=boot kernel_sha256=%s rp_sha256=%s",
             manifest.expected_kernel_sha256.hex(),
             manifest.expected_rp_sha256.hex())
    return kernel


def transfer_mmap(kernel: Kernel, pst_pid: int, sp_boot_cap: int,
                  mmap: MeasurementMap) -> None:
    """Send every map entry, then the sentinel, over the boot endpoint.

    Runs as the process-spawn-and-transfer process. Each message must be
    acked with MR0 = 0; anything else aborts the boot.
    """

    entries = mmap.entries()

    def program(ctx: ProcessApi):
        for pid, digest in entries:
            ctx.set_mr(0, pid)
            for i, word in enumerate(words_from_bytes_be(digest), start=1):
                ctx.set_mr(i, word)
            reply_len = yield Call(sp_boot_cap, TRANSFER_LEN)
            if reply_len != 1 or ctx.get_mr(0) != 0:
                raise NackFromSpError(f"transfer of pid {pid} was refused")
        ctx.set_mr(0, SENTINEL_PID)
        reply_len = yield Call(sp_boot_cap, 1)
        if reply_len != 1 or ctx.get_mr(0) != 0:
            raise NackFromSpError("sentinel was refused")

    kernel.start_process(pst_pid, program)
    kernel.run()


def run_boot(kernel: Kernel, specs: list[ProcessSpec], sign_key: SignKey,
             capacity: int = DEFAULT_CAPACITY,
             up_program_factory: Optional[ProgramFactory] = None,
             ) -> tuple[BootReport, SpState]:
    """Spawn, measure, and wire up everything on a freshly booted kernel.

    On return the signing process is live and serving, every user process
    is live and holds exactly one badged send capability to the signing
    endpoint, and the measurement map has been transferred and installed.
    Boot authority is still held; call ``finalize_boot`` next.
    """
    if up_program_factory is None:
        up_program_factory = lambda spec, sp_cap: make_relay_program(sp_cap)
    report = BootReport(sp_pid=SP_PID, mode=sign_key.mode.value)
    sp_state = SpState(sign_key)
    try:
        if len(specs) > capacity:
            raise CapacityExceededError(
                f"{len(specs)} processes exceed map capacity {capacity}")
        seen = set()
        for spec in specs:
            if spec.pid in seen:
                raise ManifestError(f"duplicate pid {spec.pid}")
            if not 1 <= spec.pid < RESERVED_PID_BASE:
                raise ManifestError(f"pid {spec.pid} is reserved")
            seen.add(spec.pid)

        kernel.spawn_process(KernelProcessSpec(PST_PID, _keystream_blob("pst", 512)))
        kernel.spawn_process(KernelProcessSpec(IP_PID, IP_IMAGE))
        log.info("phase=process-spawn pid=%#x role=signing-process", SP_PID)
        kernel.spawn_process(KernelProcessSpec(
            SP_PID, SP_IMAGE,
            (RegionRequest(SELF_CODE_REGION, Rights(read=True, execute=True)),)))
        ep_boot = kernel.create_endpoint()
        ep_attest = kernel.create_endpoint()
        sp_boot_recv = kernel.mint_badged_cap(ep_boot, None, Rights(read=True), SP_PID)
        sp_attest_recv = kernel.mint_badged_cap(ep_attest, None, Rights(read=True), SP_PID)
        pst_send = kernel.mint_badged_cap(ep_boot, None, Rights(write=True), PST_PID)
        kernel.start_process(SP_PID, signing_program(sp_state, sp_boot_recv, sp_attest_recv))
        kernel.run()            # SP parks on the boot endpoint

        mmap = MeasurementMap(capacity)
        badge_counter = 1
        for spec in specs:
            log.info("phase=process-spawn pid=%d size=%d", spec.pid, len(spec.binary))
            digest = measure_binary(spec.binary)
            kernel.spawn_process(KernelProcessSpec(spec.pid, spec.binary, spec.regions))
            mmap.add(spec.pid, digest)
            log.info("phase=measurement pid=%d sha256=%s", spec.pid, digest.hex())
            badge = badge_counter
            badge_counter += 1
            sp_cap = kernel.mint_badged_cap(ep_attest, badge, Rights(write=True), spec.pid)
            kernel.start_process(spec.pid, up_program_factory(spec, sp_cap))
            report.spawned.append((spec.pid, badge, digest))
        kernel.run()            # user processes park on their net queues

        transfer_mmap(kernel, PST_PID, pst_send, mmap)
        if not sp_state.installed:
            raise NackFromSpError("signer never installed its state")
    except (KernelError, BootError):
        _teardown(kernel)
        raise
    return report, sp_state


def finalize_boot(kernel: Kernel, report: BootReport) -> None:
    """Terminate boot-time processes and drop all kernel authority."""
    for pid in (RP_PID, PST_PID, IP_PID):
        kernel.terminate_process(pid)
        report.terminated.append(pid)
    kernel.finalize()
    log.info("phase=boot-finalized live=%d", len(kernel.live_pids()))


def _teardown(kernel: Kernel) -> None:
    # boot failed: leave nothing behind but a finalized, empty kernel
    for pid in sorted(kernel.live_pids()):
        kernel.terminate_process(pid)
    kernel.finalize()


def bring_up(images: ImageManifest, specs: list[ProcessSpec], sign_key: SignKey,
             capacity: int = DEFAULT_CAPACITY,
             up_program_factory: Optional[ProgramFactory] = None) -> BootedSystem:
    """Full pipeline: verify images, boot, transfer, finalize."""
    kernel = secure_boot(images)
    report, sp_state = run_boot(kernel, specs, sign_key, capacity,
                                up_program_factory)
    finalize_boot(kernel, report)
    return BootedSystem(kernel=kernel, report=report, sp_state=sp_state)
