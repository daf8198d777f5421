import hashlib
from typing import Union

import numpy as np

SeedPart = Union[str, int]


def derive_seed(*parts: SeedPart) -> int:
    """Stable 63-bit seed from an ordered tuple of ids.

    Depends only on the ids, never on execution order, so parallel runs
    reproduce serial ones.
    """
    sha256_hash = hashlib.sha256()
    sha256_hash.update("/".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(sha256_hash.digest()[:8], "little") >> 1


def rng_for(*parts: SeedPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
