"""Deterministic named RNG streams.

A single root seed is split into independent streams by hashing the
stream's name path, so no stage can consume another stage's randomness
and per-example streams can be pre-split for parallel work.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _digest(root_seed: int, path: str) -> int:
    h = hashlib.sha256(f"{root_seed}:{path}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class RngStream:
    """One named stream: owns a torch.Generator and a numpy Generator.

    Children derived with :meth:`child` are statistically independent of the
    parent and of each other; the same (root_seed, path) always reproduces
    the same draws.
    """

    def __init__(self, root_seed: int, path: str = "root"):
        self.root_seed = int(root_seed)
        self.path = path
        self._torch: torch.Generator | None = None
        self._numpy: np.random.Generator | None = None

    @property
    def seed(self) -> int:
        return _digest(self.root_seed, self.path)

    def child(self, name: str) -> "RngStream":
        return RngStream(self.root_seed, f"{self.path}/{name}")

    def spawn(self, index: int) -> "RngStream":
        return self.child(str(index))

    @property
    def torch_gen(self) -> torch.Generator:
        if self._torch is None:
            self._torch = torch.Generator().manual_seed(self.seed)
        return self._torch

    @property
    def numpy(self) -> np.random.Generator:
        if self._numpy is None:
            self._numpy = np.random.Generator(np.random.PCG64(self.seed))
        return self._numpy

    # torch helpers so call sites stay terse
    def randn(self, *shape, dtype=torch.float32) -> torch.Tensor:
        return torch.randn(*shape, generator=self.torch_gen, dtype=dtype)

    def rand(self, *shape, dtype=torch.float32) -> torch.Tensor:
        return torch.rand(*shape, generator=self.torch_gen, dtype=dtype)

    def randint(self, low: int, high: int, shape) -> torch.Tensor:
        return torch.randint(low, high, shape, generator=self.torch_gen)

    def uniform(self, lo: float, hi: float) -> float:
        return float(lo + (hi - lo) * torch.rand((), generator=self.torch_gen).item())

    def choice(self, n: int) -> int:
        return int(torch.randint(0, n, (), generator=self.torch_gen).item())

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.torch_gen)

    def __repr__(self) -> str:
        return f"RngStream({self.root_seed}, {self.path!r})"
