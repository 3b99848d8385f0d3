"""Desk-scale simulation of a remote-attestation root of trust.

A capability microkernel simulator hosts a measured-boot pipeline and an
isolated signing process; a networked verifier drives challenge-response
attestation over a small binary protocol and can bootstrap an
authenticated channel from an accepted attestation.
"""

__version__ = "0.1.0"

from .boot import BootedSystem, bring_up, image_manifest  # noqa: F401
from .crypto import SignKey, SignMode, VerifyKey  # noqa: F401
from .kernel import Kernel  # noqa: F401
from .verifier import Policy, Verifier  # noqa: F401
