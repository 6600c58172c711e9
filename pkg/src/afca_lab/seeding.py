"""Named seed derivation: every random draw hangs off one root seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"\x1f" + str(name).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(root: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))


def torch_generator(root: int, *names: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names))
    return g
