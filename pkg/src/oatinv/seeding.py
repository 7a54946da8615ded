"""Counter-based seed derivation.

Every random stream in a run is keyed by the master seed plus a tuple of
labels, so results do not depend on the order in which work is scheduled.
"""

from __future__ import annotations

import hashlib
import os


def derive_seed(master: int, *keys) -> int:
    payload = repr((int(master),) + tuple(keys)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def master_seed(default: int) -> int:
    """The ``OAT_SEED`` environment variable overrides ``default`` when set."""
    value = os.environ.get("OAT_SEED")
    return int(value) if value not in (None, "") else int(default)
