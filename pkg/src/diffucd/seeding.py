"""Named RNG sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np
import torch


def sub_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def numpy_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(root, name))


def torch_rng(root: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(sub_seed(root, name))
