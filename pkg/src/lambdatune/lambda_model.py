"""HEVC-style Lagrangian multiplier model and per-clip scaling.

The codec default lambda(Q) per frame type, the legacy H.263-era quadratic
rule, and the per-clip scale factor k applied uniformly to all frame types
(the uniform-scaling assumption is recorded in run metadata).
"""
from __future__ import annotations

from dataclasses import dataclass

Q_MIN, Q_MAX = 0, 51
FRAME_TYPES = ("I", "P", "B")


class LambdaModelError(ValueError):
    pass


def _check_q(q: int) -> None:
    if not Q_MIN <= q <= Q_MAX:
        raise LambdaModelError(f"q must be in [{Q_MIN}, {Q_MAX}], got {q}")


@dataclass(frozen=True)
class LambdaSpec:
    """Quantiser, frame type, and the per-clip scale k (k=1 is the stock codec)."""

    q: int
    frame_type: str
    k: float = 1.0

    def __post_init__(self):
        _check_q(self.q)
        if self.frame_type not in FRAME_TYPES:
            raise LambdaModelError(f"frame_type must be one of {FRAME_TYPES}")
        if not self.k > 0.0:
            raise LambdaModelError(f"k must be > 0, got {self.k}")


def default_lambda(q: int, frame_type: str) -> float:
    """Codec-default lambda for a quantiser and frame type.

    I: 0.57 * 2^((q-12)/3)
    P: 0.85 * 2^((q-12)/3)
    B: 0.68 * clamp((q-12)/6, 2, 4) * 2^((q-12)/3), real-valued clamp argument
    """
    _check_q(q)
    base = 2.0 ** ((q - 12) / 3.0)
    if frame_type == "I":
        return 0.57 * base
    if frame_type == "P":
        return 0.85 * base
    if frame_type == "B":
        return 0.68 * max(2.0, min(4.0, (q - 12) / 6.0)) * base
    raise LambdaModelError(f"frame_type must be one of {FRAME_TYPES}, got {frame_type!r}")


def scaled_lambda(spec: LambdaSpec) -> float:
    """k * default_lambda; identical to the default at k=1."""
    return spec.k * default_lambda(spec.q, spec.frame_type)


def legacy_lambda(q: int) -> float:
    """Historic 0.85 * Q^2 rule; kept for comparison plots only."""
    if q < 0:
        raise LambdaModelError(f"q must be >= 0, got {q}")
    return 0.85 * q * q
