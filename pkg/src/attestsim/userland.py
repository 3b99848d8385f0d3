"""User-process side scaffolding: the network relay program.

A relay program is what an attestable user process runs in this simulator.
It owns an X25519 keypair (the private half lives only in the program
closure), forwards challenges to the signing process over its badged
endpoint capability, and speaks the host-injected network events below.
The daemon translates these events to and from wire frames; the programs
themselves never see sockets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Generator, Optional

from .crypto import (
    CHANNEL_AD_CONFIRM,
    CHANNEL_AD_INIT,
    NONCE_LEN,
    AllZeroSharedSecretError,
    derive_session_key,
    open_sealed,
    seal,
    x25519_public_key,
)
from .kernel import Call, NetRecv, ProcessApi
from .signing import REQUEST_LEN, bytes_from_words_be, words_from_bytes_be


@dataclass(frozen=True)
class NetAttest:
    chal: bytes


@dataclass(frozen=True)
class NetAttestReply:
    status: int
    pk: bytes
    sigma: bytes


@dataclass(frozen=True)
class NetChannelInit:
    eph_pk: bytes
    nonce: bytes
    ct: bytes


@dataclass(frozen=True)
class NetChannelReply:
    nonce: bytes
    ct: bytes


@dataclass(frozen=True)
class NetChannelFail:
    reason: str


def make_relay_program(sp_cap: int, x25519_seed: Optional[bytes] = None):
    """Program factory for a standard relay user process.

    ``sp_cap`` is the handle of the badged send capability to the signing
    endpoint. ``x25519_seed`` fixes the channel private key for
    deterministic tests; by default a fresh one is drawn. The private key
    is captured in the closure and never leaves it.
    """
    private = x25519_seed if x25519_seed is not None else os.urandom(32)
    pk = x25519_public_key(private)

    def program(ctx: ProcessApi) -> Generator:
        last: Optional[tuple[bytes, bytes]] = None    # (chal, sigma)
        while True:
            event = yield NetRecv()
            if isinstance(event, NetAttest):
                for i, word in enumerate(words_from_bytes_be(event.chal + pk)):
                    ctx.set_mr(i, word)
                reply_len = yield Call(sp_cap, REQUEST_LEN)
                status = ctx.get_mr(0)
                sigma = bytes_from_words_be(
                    [ctx.get_mr(i) for i in range(1, reply_len)])
                if status == 0:
                    last = (event.chal, sigma)
                ctx.net_send(NetAttestReply(status, pk, sigma))
            elif isinstance(event, NetChannelInit):
                if last is None:
                    ctx.net_send(NetChannelFail("no prior attestation"))
                    continue
                chal, sigma = last
                transcript = chal + pk + sigma
                try:
                    key = derive_session_key(private, event.eph_pk, transcript)
                except AllZeroSharedSecretError:
                    ctx.net_send(NetChannelFail("degenerate peer key"))
                    continue
                token = open_sealed(key, event.nonce, event.ct, CHANNEL_AD_INIT)
                if token is None:
                    ctx.net_send(NetChannelFail("init did not authenticate"))
                    continue
                nonce = os.urandom(NONCE_LEN)
                ctx.net_send(NetChannelReply(
                    nonce, seal(key, nonce, token, CHANNEL_AD_CONFIRM)))
            else:
                ctx.net_send(NetChannelFail(f"unhandled event {type(event).__name__}"))

    return program
