"""Watermark payloads: fixed-length bit strings and their decoded logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import PayloadError
from .rng import RngStream


@dataclass(frozen=True)
class Message:
    """An N-bit watermark payload."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if not all(b in (0, 1) for b in self.bits):
            raise PayloadError(f"message bits must be 0/1, got {self.bits!r}")
        if len(self.bits) == 0:
            raise PayloadError("empty message")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def random(cls, n_bits: int, rng: RngStream) -> "Message":
        bits = rng.randint(0, 2, (n_bits,)).tolist()
        return cls(tuple(int(b) for b in bits))

    @classmethod
    def from_string(cls, s: str) -> "Message":
        return cls(tuple(1 if c == "1" else 0 for c in s))

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def complement(self) -> "Message":
        return Message(tuple(1 - b for b in self.bits))

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)

    def signs(self, dtype=torch.float32) -> torch.Tensor:
        """Bits mapped to {-1, +1}."""
        return self.tensor(dtype) * 2.0 - 1.0

    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.uint8)


def bits_from_logits(logits: torch.Tensor) -> np.ndarray:
    """Hard decision: bit = 1 iff logit > 0 (exact zero decodes as 0)."""
    return (logits.detach().cpu().numpy() > 0.0).astype(np.uint8)


def check_same_length(a, b) -> int:
    if len(a) != len(b):
        raise PayloadError(f"length mismatch: {len(a)} vs {len(b)}")
    return len(a)
