"""Deterministic single-core capability kernel simulator.

Processes are generator coroutines driven by a FIFO scheduler. A process
blocks by yielding a syscall descriptor (:class:`Call`, :class:`Recv`,
:class:`NetRecv`) and is resumed with that syscall's result. Non-blocking
operations (register access, replying, emitting a network event) go through
the :class:`ProcessApi` handed to the program at start.

Security properties maintained here and relied on by everything above:

* Capabilities are kernel-side records; processes only ever hold integer
  handles and the API offers no way to read a capability's badge or rights.
* The badge reported by ``Recv`` comes from the capability the sender
  invoked, never from message payload. Badge 0 is reserved for objects
  minted without a badge (boot-time authority).
* A process spawned without write rights to its own code region can never
  acquire them afterwards; the spawn call rejects write+execute on
  ``self_code`` outright.
* After ``finalize()`` every authority-bearing operation (endpoint or
  capability creation, spawn, terminate) raises ``AuthorityError``.

Scheduling is strictly FIFO over a ready queue and every state transition
appends a tuple to ``Kernel.trace``, so identical operation sequences
produce identical traces.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Generator, Optional

log = logging.getLogger(__name__)

MSG_MAX_LENGTH = 120          # IPC buffer size in 64-bit registers
WORD_MASK = (1 << 64) - 1
BOOT_BADGE = 0                # reported when the sender's cap carries no badge
SELF_CODE_REGION = "self_code"


class KernelError(Exception):
    """Base for all simulator faults."""


class AuthorityError(KernelError):
    """Privileged operation attempted after boot authority was dropped."""


class UnknownEndpointError(KernelError):
    pass


class DuplicateBadgeError(KernelError):
    pass


class UnknownPidError(KernelError):
    pass


class DuplicatePidError(KernelError):
    pass


class WxViolationError(KernelError):
    """Requested write and execute rights over the process's own code."""


class BadCapabilityError(KernelError):
    """Handle does not name a capability of the required kind."""


class NoSendRightError(KernelError):
    pass


class NoReceiveRightError(KernelError):
    pass


class NoPendingCallerError(KernelError):
    pass


class LengthOverflowError(KernelError):
    pass


class IndexOutOfRangeError(KernelError):
    pass


@dataclass(frozen=True)
class Rights:
    read: bool = False
    write: bool = False
    execute: bool = False
    grant: bool = False


@dataclass(frozen=True)
class Capability:
    """Kernel-side capability record. Processes see only the handle."""

    handle: int
    kind: str                     # "endpoint" or "region"
    obj: Any                      # endpoint id, or region name
    rights: Rights
    badge: Optional[int] = None


@dataclass(frozen=True)
class RegionRequest:
    region: str
    rights: Rights


@dataclass(frozen=True)
class KernelProcessSpec:
    pid: int
    code: bytes
    regions: tuple[RegionRequest, ...] = ()


class ProcState(Enum):
    RUNNABLE = "runnable"
    BLOCKED_RECV = "blocked_recv"
    BLOCKED_CALL = "blocked_call"
    BLOCKED_NET = "blocked_net"
    TERMINATED = "terminated"


# --- syscall descriptors (yielded by programs) ---------------------------

@dataclass(frozen=True)
class Call:
    """Rendezvous call: send ``msg_len`` registers, block until replied.

    Resumes with the reply's register count; reply payload is in the IPC
    buffer. There is deliberately no badge field here: the sender cannot
    choose how it appears to the receiver.
    """

    cap: int
    msg_len: int


@dataclass(frozen=True)
class Recv:
    """Block until a sender rendezvouses; resumes with (badge, msg_len)."""

    cap: int


@dataclass(frozen=True)
class NetRecv:
    """Block until the host injects a network event for this process."""


Syscall = Call | Recv | NetRecv
Program = Callable[["ProcessApi"], Generator[Syscall, Any, None]]


class _Endpoint:
    __slots__ = ("eid", "send_queue", "recv_queue", "badges")

    def __init__(self, eid: int):
        self.eid = eid
        # senders: (pid, msg_len, badge) in arrival order; payload stays in
        # the sender's buffer until rendezvous since the sender is blocked.
        self.send_queue: deque[tuple[int, int, int]] = deque()
        self.recv_queue: deque[int] = deque()
        self.badges: set[int] = set()


class _Process:
    __slots__ = (
        "pid", "code", "ipc", "cspace", "next_handle", "state",
        "gen", "started", "resume_value", "reply_to", "net_inbox",
    )

    def __init__(self, pid: int, code: bytes):
        self.pid = pid
        self.code = bytes(code)
        self.ipc: list[int] = [0] * MSG_MAX_LENGTH
        self.cspace: dict[int, Capability] = {}
        self.next_handle = 1
        self.state = ProcState.RUNNABLE
        self.gen: Optional[Generator] = None
        self.started = False
        self.resume_value: Any = None
        self.reply_to: Optional[int] = None
        self.net_inbox: deque[Any] = deque()


class ProcessApi:
    """Unprivileged per-process surface: IPC registers, reply, host I/O.

    This is everything a running program can touch. No operation here
    creates authority, inspects capabilities, or names another process.
    """

    __slots__ = ("_kernel", "_pid")

    def __init__(self, kernel: "Kernel", pid: int):
        self._kernel = kernel
        self._pid = pid

    def get_mr(self, index: int) -> int:
        if not 0 <= index < MSG_MAX_LENGTH:
            raise IndexOutOfRangeError(f"register index {index}")
        return self._kernel._procs[self._pid].ipc[index]

    def set_mr(self, index: int, word: int) -> None:
        if not 0 <= index < MSG_MAX_LENGTH:
            raise IndexOutOfRangeError(f"register index {index}")
        # exact 64-bit wraparound semantics, no implicit widening
        self._kernel._procs[self._pid].ipc[index] = word & WORD_MASK

    def reply(self, msg_len: int) -> None:
        self._kernel._reply(self._pid, msg_len)

    def net_send(self, event: Any) -> None:
        self._kernel._net_send(self._pid, event)


class Kernel:
    """Single-core kernel instance: endpoints, processes, scheduler."""

    def __init__(self) -> None:
        self._endpoints: dict[int, _Endpoint] = {}
        self._next_eid = 1
        self._procs: dict[int, _Process] = {}
        self._ready: deque[int] = deque()
        self._outbox: dict[int, deque[Any]] = {}
        self._finalized = False
        self.trace: list[tuple] = []

    # --- authority-bearing operations (boot-time only) -------------------

    def _require_authority(self, op: str) -> None:
        if self._finalized:
            raise AuthorityError(f"{op}: boot authority was dropped at finalize")

    def create_endpoint(self) -> int:
        self._require_authority("create_endpoint")
        eid = self._next_eid
        self._next_eid += 1            # ids are never reused within a run
        self._endpoints[eid] = _Endpoint(eid)
        self.trace.append(("endpoint", eid))
        return eid

    def mint_badged_cap(self, eid: int, badge: Optional[int], rights: Rights,
                        pid: int) -> int:
        """Mint a capability to endpoint ``eid`` into ``pid``'s cspace.

        ``badge`` is attached kernel-side and stamped on every message sent
        through the resulting cap. A badge may be minted at most once per
        endpoint; ``None`` means unbadged (reported to receivers as 0).
        """
        self._require_authority("mint_badged_cap")
        ep = self._endpoints.get(eid)
        if ep is None:
            raise UnknownEndpointError(f"endpoint {eid}")
        rec = self._procs.get(pid)
        if rec is None or rec.state is ProcState.TERMINATED:
            raise UnknownPidError(f"pid {pid}")
        if badge is not None:
            if badge in ep.badges:
                raise DuplicateBadgeError(f"badge {badge} on endpoint {eid}")
            ep.badges.add(badge)
        handle = rec.next_handle
        rec.next_handle += 1
        rec.cspace[handle] = Capability(handle, "endpoint", eid, rights, badge)
        self.trace.append(("mint", eid, -1 if badge is None else badge, pid, handle))
        return handle

    def spawn_process(self, spec: KernelProcessSpec) -> int:
        """Create a process record and install its requested region caps.

        Write-and-execute over the process's own code region is refused
        here, at creation time; nothing later can add rights.
        """
        self._require_authority("spawn_process")
        if spec.pid in self._procs:
            raise DuplicatePidError(f"pid {spec.pid}")
        for req in spec.regions:
            if req.region == SELF_CODE_REGION and req.rights.write and req.rights.execute:
                raise WxViolationError(
                    f"pid {spec.pid}: write+execute requested over own code")
        rec = _Process(spec.pid, spec.code)
        for req in spec.regions:
            handle = rec.next_handle
            rec.next_handle += 1
            rec.cspace[handle] = Capability(handle, "region", req.region, req.rights)
        self._procs[spec.pid] = rec
        self._outbox[spec.pid] = deque()
        self.trace.append(("spawn", spec.pid, len(spec.code)))
        return spec.pid

    def start_process(self, pid: int, program: Program) -> None:
        """Bind a program to a spawned process and make it runnable."""
        self._require_authority("start_process")
        rec = self._procs.get(pid)
        if rec is None:
            raise UnknownPidError(f"pid {pid}")
        if rec.gen is not None:
            raise KernelError(f"pid {pid} already started")
        rec.gen = program(ProcessApi(self, pid))
        rec.state = ProcState.RUNNABLE
        self._ready.append(pid)
        self.trace.append(("start", pid))

    def terminate_process(self, pid: int) -> None:
        """Tear a process down and revoke everything it held.

        The record stays (pids are never reused) but its cspace is emptied,
        it is pulled out of every queue, and any reply obligation pointing
        at it is dropped, so it can never send or be replied to again.
        """
        self._require_authority("terminate_process")
        rec = self._procs.get(pid)
        if rec is None:
            raise UnknownPidError(f"pid {pid}")
        if rec.state is ProcState.TERMINATED:
            return
        rec.state = ProcState.TERMINATED
        rec.cspace.clear()
        rec.net_inbox.clear()
        if rec.gen is not None:
            rec.gen.close()
        for ep in self._endpoints.values():
            ep.send_queue = deque(e for e in ep.send_queue if e[0] != pid)
            if pid in ep.recv_queue:
                ep.recv_queue.remove(pid)
        for other in self._procs.values():
            if other.reply_to == pid:
                other.reply_to = None
        if pid in self._ready:
            self._ready.remove(pid)
        self.trace.append(("terminate", pid))

    def finalize(self) -> None:
        """Drop boot authority for the rest of the run."""
        self._require_authority("finalize")
        self._finalized = True
        self.trace.append(("finalize",))

    # --- host-side interface ---------------------------------------------

    def inject_net(self, pid: int, event: Any) -> None:
        """Deliver a network event to ``pid`` (queued if it is not waiting)."""
        rec = self._procs.get(pid)
        if rec is None or rec.state is ProcState.TERMINATED:
            raise UnknownPidError(f"pid {pid}")
        self.trace.append(("net_in", pid, type(event).__name__))
        if rec.state is ProcState.BLOCKED_NET:
            rec.resume_value = event
            rec.state = ProcState.RUNNABLE
            self._ready.append(pid)
        else:
            rec.net_inbox.append(event)

    def drain_net(self, pid: int) -> list[Any]:
        """Collect events the process emitted via ``net_send``."""
        box = self._outbox.get(pid)
        if box is None:
            raise UnknownPidError(f"pid {pid}")
        out = list(box)
        box.clear()
        return out

    def live_pids(self) -> set[int]:
        return {p for p, r in self._procs.items()
                if r.state is not ProcState.TERMINATED}

    def process_state(self, pid: int) -> ProcState:
        rec = self._procs.get(pid)
        if rec is None:
            raise UnknownPidError(f"pid {pid}")
        return rec.state

    def registers(self, pid: int, count: int = MSG_MAX_LENGTH) -> list[int]:
        """Snapshot of a process's IPC registers (host-side inspection)."""
        rec = self._procs.get(pid)
        if rec is None:
            raise UnknownPidError(f"pid {pid}")
        return list(rec.ipc[:count])

    # --- scheduler --------------------------------------------------------

    def run(self, max_steps: Optional[int] = None) -> int:
        """Advance ready processes FIFO until everything blocks or exits.

        Returns the number of scheduler dispatches. Exceptions a syscall
        raises are thrown into the faulting program at its yield point; if
        the program does not handle them they propagate to the caller.
        """
        steps = 0
        while self._ready:
            if max_steps is not None and steps >= max_steps:
                break
            pid = self._ready.popleft()
            rec = self._procs[pid]
            if rec.state is not ProcState.RUNNABLE or rec.gen is None:
                continue
            steps += 1
            self._advance(rec)
        return steps

    def _advance(self, rec: _Process) -> None:
        assert rec.gen is not None
        pending_exc: Optional[KernelError] = None
        while True:
            try:
                if pending_exc is not None:
                    exc, pending_exc = pending_exc, None
                    sc = rec.gen.throw(exc)
                elif not rec.started:
                    rec.started = True
                    sc = rec.gen.send(None)
                else:
                    value, rec.resume_value = rec.resume_value, None
                    sc = rec.gen.send(value)
            except StopIteration:
                self._exit(rec)
                return
            try:
                done = self._dispatch(rec, sc)
            except KernelError as e:
                pending_exc = e
                continue
            if done:
                return

    def _exit(self, rec: _Process) -> None:
        # program ran to completion; fold it up like a terminate
        rec.state = ProcState.TERMINATED
        rec.cspace.clear()
        for other in self._procs.values():
            if other.reply_to == rec.pid:
                other.reply_to = None
        self.trace.append(("exit", rec.pid))

    def _dispatch(self, rec: _Process, sc: Syscall) -> bool:
        """Apply one syscall. True means the process yielded the CPU."""
        if isinstance(sc, Call):
            self._do_call(rec, sc)
            return True
        if isinstance(sc, Recv):
            return self._do_recv(rec, sc)
        if isinstance(sc, NetRecv):
            if rec.net_inbox:
                rec.resume_value = rec.net_inbox.popleft()
                self._ready.append(rec.pid)
            else:
                rec.state = ProcState.BLOCKED_NET
            return True
        raise KernelError(f"pid {rec.pid} yielded a non-syscall: {sc!r}")

    def _cap(self, rec: _Process, handle: int) -> Capability:
        cap = rec.cspace.get(handle)
        if cap is None or cap.kind != "endpoint":
            raise BadCapabilityError(f"pid {rec.pid}: handle {handle}")
        return cap

    def _do_call(self, rec: _Process, sc: Call) -> None:
        cap = self._cap(rec, sc.cap)
        if not cap.rights.write:
            raise NoSendRightError(f"pid {rec.pid}: endpoint {cap.obj}")
        if not 0 <= sc.msg_len <= MSG_MAX_LENGTH:
            raise LengthOverflowError(f"msg_len {sc.msg_len}")
        ep = self._endpoints[cap.obj]
        badge = BOOT_BADGE if cap.badge is None else cap.badge
        rec.state = ProcState.BLOCKED_CALL
        if ep.recv_queue:
            rpid = ep.recv_queue.popleft()
            self._deliver(rec, self._procs[rpid], ep, badge, sc.msg_len)
        else:
            ep.send_queue.append((rec.pid, sc.msg_len, badge))
            self.trace.append(("queued", rec.pid, ep.eid, sc.msg_len))

    def _do_recv(self, rec: _Process, sc: Recv) -> bool:
        cap = self._cap(rec, sc.cap)
        if not cap.rights.read:
            raise NoReceiveRightError(f"pid {rec.pid}: endpoint {cap.obj}")
        ep = self._endpoints[cap.obj]
        if ep.send_queue:
            spid, msg_len, badge = ep.send_queue.popleft()
            sender = self._procs[spid]
            rec.ipc[:msg_len] = sender.ipc[:msg_len]
            rec.reply_to = spid
            rec.resume_value = (badge, msg_len)
            self._ready.append(rec.pid)
            self.trace.append(("deliver", spid, rec.pid, ep.eid, badge, msg_len))
            return True
        rec.state = ProcState.BLOCKED_RECV
        ep.recv_queue.append(rec.pid)
        return True

    def _deliver(self, sender: _Process, receiver: _Process, ep: _Endpoint,
                 badge: int, msg_len: int) -> None:
        receiver.ipc[:msg_len] = sender.ipc[:msg_len]
        receiver.reply_to = sender.pid
        receiver.resume_value = (badge, msg_len)
        receiver.state = ProcState.RUNNABLE
        self._ready.append(receiver.pid)
        self.trace.append(("deliver", sender.pid, receiver.pid, ep.eid, badge, msg_len))

    def _reply(self, pid: int, msg_len: int) -> None:
        rec = self._procs[pid]
        if not 0 <= msg_len <= MSG_MAX_LENGTH:
            raise LengthOverflowError(f"msg_len {msg_len}")
        if rec.reply_to is None:
            raise NoPendingCallerError(f"pid {pid} has no caller awaiting reply")
        caller = self._procs[rec.reply_to]
        rec.reply_to = None
        if caller.state is not ProcState.BLOCKED_CALL:
            raise NoPendingCallerError(f"pid {pid}: caller no longer waiting")
        caller.ipc[:msg_len] = rec.ipc[:msg_len]
        caller.resume_value = msg_len
        caller.state = ProcState.RUNNABLE
        self._ready.append(caller.pid)
        self.trace.append(("reply", pid, caller.pid, msg_len))

    def _net_send(self, pid: int, event: Any) -> None:
        self._outbox[pid].append(event)
        self.trace.append(("net_out", pid, type(event).__name__))
