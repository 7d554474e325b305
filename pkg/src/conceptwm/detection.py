"""Watermark detection and traceability with exact binomial statistics.

Detection decides whether an image carries a reference key by thresholding
the bit-match count against the exact Binomial(N, 1/2) tail, so the false
positive rate is controlled analytically (no normal approximation).
Traceability scans a keyring and applies a Bonferroni-corrected per-user FPR.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np
import torch

from .errors import InfeasibleFprError, PayloadError, ValidationError
from .message import Message, bits_from_logits, check_same_length


@dataclass(frozen=True)
class DetectionResult:
    match_count: int
    n_bits: int
    bit_accuracy: float
    p_value: float
    threshold: int
    decision: bool


@dataclass(frozen=True)
class UserKeyring:
    """user_id -> Message, all keys the same length."""

    entries: dict[str, Message]

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("empty keyring")
        lengths = {len(m) for m in self.entries.values()}
        if len(lengths) != 1:
            raise PayloadError(f"keyring keys have mixed lengths: {sorted(lengths)}")

    @property
    def n_bits(self) -> int:
        return len(next(iter(self.entries.values())))

    def __len__(self) -> int:
        return len(self.entries)


def bit_accuracy(extracted: Message, reference: Message) -> float:
    """Fraction of matching bit positions."""
    n = check_same_length(extracted, reference)
    matches = sum(1 for a, b in zip(extracted.bits, reference.bits) if a == b)
    return matches / n


def binomial_tail(n: int, k: int) -> float:
    """Exact P(K >= k) for K ~ Binomial(n, 1/2), via integer arithmetic."""
    if k < 0 or n < 0:
        raise ValidationError(f"need n, k >= 0, got n={n} k={k}")
    if k > n:
        raise ValidationError(f"k={k} exceeds n={n}")
    total = sum(comb(n, i) for i in range(k, n + 1))
    return float(Fraction(total, 2**n))


def detection_threshold(n_bits: int, fpr: float) -> int:
    """Smallest tau with binomial_tail(n_bits, tau) <= fpr."""
    if not (0.0 < fpr < 1.0):
        raise ValidationError(f"fpr must be in (0,1), got {fpr}")
    min_fpr = binomial_tail(n_bits, n_bits)
    if min_fpr > fpr:
        raise InfeasibleFprError(
            f"fpr={fpr} infeasible for {n_bits} bits; minimum achievable is {min_fpr}",
            min_achievable_fpr=min_fpr,
        )
    # binomial_tail is non-increasing in k, so the first feasible k wins
    for tau in range(n_bits + 1):
        if binomial_tail(n_bits, tau) <= fpr:
            return tau
    raise AssertionError("unreachable: tail at n_bits was feasible")


def match_count(extracted_bits: np.ndarray, reference: Message) -> int:
    ref = reference.array()
    if extracted_bits.shape != ref.shape:
        raise PayloadError(f"bit shape {extracted_bits.shape} vs key length {len(ref)}")
    return int(np.sum(extracted_bits == ref))


def decide(extracted_bits: np.ndarray, reference: Message, fpr: float) -> DetectionResult:
    """Detection verdict for already-extracted bits."""
    n = len(reference)
    k = match_count(extracted_bits, reference)
    tau = detection_threshold(n, fpr)
    return DetectionResult(
        match_count=k,
        n_bits=n,
        bit_accuracy=k / n,
        p_value=binomial_tail(n, k),
        threshold=tau,
        decision=k >= tau,
    )


def detect(image: torch.Tensor, codec, reference: Message, fpr: float) -> DetectionResult:
    """Extract bits from one image (3,H,W) and test against the reference key."""
    logits = codec.extract_logits(image.unsqueeze(0))[0]
    return decide(bits_from_logits(logits), reference, fpr)


def trace(
    image: torch.Tensor, codec, keyring: UserKeyring, fpr: float
) -> tuple[str | None, DetectionResult]:
    """Attribute one image to the best-matching user, or to nobody.

    Bits are extracted once; the best user is the argmax match count with
    ties broken by lexicographically smallest user id. The decision applies
    a Bonferroni-corrected per-user FPR of fpr / |keyring|.
    """
    logits = codec.extract_logits(image.unsqueeze(0))[0]
    bits = bits_from_logits(logits)
    return trace_bits(bits, keyring, fpr)


def trace_bits(
    extracted_bits: np.ndarray, keyring: UserKeyring, fpr: float
) -> tuple[str | None, DetectionResult]:
    """Keyring scan on already-extracted bits (used by vectorized sweeps)."""
    best_user = None
    best_count = -1
    for user_id in sorted(keyring.entries):
        k = match_count(extracted_bits, keyring.entries[user_id])
        if k > best_count:
            best_user, best_count = user_id, k
    per_user_fpr = fpr / len(keyring)
    result = decide(extracted_bits, keyring.entries[best_user], per_user_fpr)
    if not result.decision:
        return None, result
    return best_user, result
