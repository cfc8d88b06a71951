"""Per-clip search for the lambda scale that minimizes BD-rate.

The objective for a candidate scale k is the BD-rate of the clip's k-scaled
RD curve against its k=1 anchor (negative = bitrate saved at equal quality).
Each evaluation costs one encode per CRF point, so the search is
derivative-free and frugal: golden-section on [k_min, k_max], reusing the
anchor across all evaluations and memoizing repeated k values.

Golden section assumes a unimodal objective; on multimodal clips the result
is a local minimum. That scope is recorded in the result metadata.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .backends import DEFAULT_CRF_LIST, ClipRef, EncoderBackend, K_MAX, K_MIN
from .bd_metrics import CurveFit, RDCurve, bd_rate_pct

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0  # 0.6180339887...
MEMO_DECIMALS = 6


class OptimizerError(RuntimeError):
    pass


class BudgetExceeded(OptimizerError):
    """Raised when max_iters runs out; carries the best result so far."""

    def __init__(self, message: str, best: "OptResult"):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class OptConfig:
    k_min: float = K_MIN
    k_max: float = K_MAX
    tol: float = 0.01  # bracket width at which the search stops
    max_iters: int = 40
    crf_list: tuple[int, ...] = DEFAULT_CRF_LIST

    def __post_init__(self):
        if not 0.0 < self.k_min < 1.0 < self.k_max:
            raise ValueError("need 0 < k_min < 1 < k_max (k=1 is the anchor)")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if len(self.crf_list) < 4:
            raise ValueError("need at least 4 CRF points for BD-rate fits")


@dataclass(frozen=True)
class OptResult:
    clip_id: str
    k_opt: float
    bd_rate_at_k_opt: float
    iterations: int  # bracket shrinks performed
    encodes_used: int  # anchor curve + one curve per unique evaluation
    trace: tuple[tuple[float, float], ...]  # (k, bd_rate) per unique evaluation
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        expected = (1 + len(self.trace)) * len(
            self.metadata.get("crf_list", DEFAULT_CRF_LIST)
        )
        if self.encodes_used != expected:
            raise ValueError(
                f"encodes_used {self.encodes_used} != (1 + |trace|) * |crf_list| = {expected}"
            )


class Objective:
    """Memoizing BD-rate objective for one clip against its k=1 anchor.

    The anchor curve is encoded once at construction. Candidate k values are
    memoized on round(k, 6); repeated queries are cache hits and cost no
    encodes. `trace` lists unique evaluations in call order.
    """

    def __init__(
        self,
        clip: ClipRef,
        backend: EncoderBackend,
        crf_list: Sequence[int] = DEFAULT_CRF_LIST,
        anchor: RDCurve | None = None,
    ):
        self.clip = clip
        self.backend = backend
        self.crf_list = tuple(crf_list)
        self.anchor = (
            anchor if anchor is not None else backend.rd_curve(clip, self.crf_list, k=1.0)
        )
        self._anchor_fit = CurveFit(self.anchor)
        self.encodes_used = len(self.crf_list)  # the anchor curve
        self._cache: dict[float, float] = {}
        self.trace: list[tuple[float, float]] = []

    def __call__(self, k: float) -> float:
        key = round(k, MEMO_DECIMALS)
        if key in self._cache:
            return self._cache[key]
        curve = self.backend.rd_curve(self.clip, self.crf_list, k=k)
        self.encodes_used += len(self.crf_list)
        value = bd_rate_pct(self._anchor_fit, CurveFit(curve))
        self._cache[key] = value
        self.trace.append((float(k), value))
        return value


def objective(
    clip: ClipRef,
    k: float,
    anchor: RDCurve,
    backend: EncoderBackend,
    crf_list: Sequence[int] = DEFAULT_CRF_LIST,
) -> float:
    """One-shot BD-rate of the k-scaled curve against the given anchor."""
    curve = backend.rd_curve(clip, tuple(crf_list), k=k)
    return bd_rate(anchor, curve).bd_rate


def _best(trace: Sequence[tuple[float, float]]) -> tuple[float, float]:
    # Equal objective values tie-break toward the smaller k.
    return min(trace, key=lambda t: (t[1], t[0]))


def _make_result(
    clip: ClipRef, cfg: OptConfig, obj: Objective, iterations: int
) -> OptResult:
    k_opt, bd_opt = _best(obj.trace)
    return OptResult(
        clip_id=clip.id,
        k_opt=k_opt,
        bd_rate_at_k_opt=bd_opt,
        iterations=iterations,
        encodes_used=obj.encodes_used,
        trace=tuple(obj.trace),
        metadata={
            "method": "golden-section",
            "scope": "local minimum (global when the objective is unimodal in k)",
            "k_min": cfg.k_min,
            "k_max": cfg.k_max,
            "tol": cfg.tol,
            "crf_list": cfg.crf_list,
            "backend": obj.backend.name,
        },
    )


def optimize_k(
    clip: ClipRef,
    cfg: OptConfig,
    backend: EncoderBackend,
    anchor: RDCurve | None = None,
) -> OptResult:
    """Golden-section search for the BD-rate-minimizing lambda scale.

    Runs until the bracket is narrower than cfg.tol. The reported k_opt is
    the best evaluated point (ties go to the smaller k), so tightening tol
    never worsens bd_rate_at_k_opt: the evaluation sequence for a looser tol
    is a prefix of the sequence for a tighter one.
    """
    obj = Objective(clip, backend, cfg.crf_list, anchor=anchor)
    a, b = cfg.k_min, cfg.k_max
    c = b - (b - a) * INV_PHI
    d = a + (b - a) * INV_PHI
    fc, fd = obj(c), obj(d)
    iterations = 0
    while (b - a) > cfg.tol:
        if iterations >= cfg.max_iters:
            best = _make_result(clip, cfg, obj, iterations)
            raise BudgetExceeded(
                f"{clip.id}: bracket still {b - a:.6g} wide after "
                f"{iterations} iterations (tol {cfg.tol})",
                best,
            )
        if fc <= fd:  # keep the lower-k side on ties
            b, d, fd = d, c, fc
            c = b - (b - a) * INV_PHI
            fc = obj(c)
        else:
            a, c, fc = c, d, fd
            d = a + (b - a) * INV_PHI
            fd = obj(d)
        iterations += 1
    return _make_result(clip, cfg, obj, iterations)


def sweep_k(
    clip: ClipRef,
    grid: Sequence[float],
    backend: EncoderBackend,
    crf_list: Sequence[int] = DEFAULT_CRF_LIST,
    anchor: RDCurve | None = None,
) -> list[tuple[float, float]]:
    """Evaluate BD-rate on an explicit k grid (for figures and brute force)."""
    grid = [float(k) for k in grid]
    if not grid:
        raise ValueError("k grid must be non-empty")
    for k in grid:
        if not k > 0:
            raise ValueError(f"k grid values must be positive, got {k}")
    obj = Objective(clip, backend, tuple(crf_list), anchor=anchor)
    return [(k, obj(k)) for k in grid]


def parse_grid(spec: str) -> list[float]:
    """Parse "start:step:stop" into an inclusive float grid.

    Values are rounded to 9 decimals so textbook grids like 0:0.001:3 print
    cleanly; 0 start values are nudged to the step (k must stay positive).
    """
    try:
        start_s, step_s, stop_s = spec.split(":")
        start, step, stop = float(start_s), float(step_s), float(stop_s)
    except ValueError as exc:
        raise ValueError(f"grid spec must be start:step:stop, got {spec!r}") from exc
    if step <= 0 or stop < start:
        raise ValueError(f"bad grid spec {spec!r}")
    count = int(round((stop - start) / step)) + 1
    grid = [round(start + i * step, 9) for i in range(count)]
    return [k for k in grid if k > 0]
