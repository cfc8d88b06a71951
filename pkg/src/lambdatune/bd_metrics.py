"""Rate-distortion curves and Bjontegaard delta metrics.

An RD curve is a set of (bitrate, PSNR) operating points for one encode
configuration. BD-Rate between an anchor and a test curve is the average
percent bitrate difference at equal quality, obtained from cubic fits of
log10(rate) as a function of quality, integrated analytically over the
overlapping quality range. Negative BD-Rate means the test configuration
saves bitrate.

Fits are centered at mean(x) and solved on an abscissa scaled to [-1, 1],
which keeps the system well conditioned and makes the fit equivariant under
constant shifts of the quality axis. Optimizer sweeps evaluate thousands of
curve pairs against one anchor, so fits are exposed as reusable CurveFit
objects. All arithmetic is float64. Quality is global PSNR in dB throughout.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MIN_POINTS = 4
_COND_LIMIT = 1e12


class BDMetricError(ValueError):
    """Base class for RD-curve and BD-metric failures."""


class TooFewPoints(BDMetricError):
    pass


class NonMonotone(BDMetricError):
    pass


class DuplicateRate(BDMetricError):
    pass


class NoOverlap(BDMetricError):
    pass


class FitFailure(BDMetricError):
    pass


@dataclass(frozen=True)
class RDPoint:
    """One rate-quality sample: bitrate in kbps (>0), PSNR in dB (finite)."""

    rate: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0.0):
            raise BDMetricError(f"rate must be finite and > 0, got {self.rate!r}")
        if not math.isfinite(self.quality):
            raise BDMetricError(f"quality must be finite, got {self.quality!r}")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "quality", float(self.quality))


@dataclass(frozen=True)
class RDCurve:
    """A validated RD curve: >= 4 points, strictly increasing in both axes."""

    points: tuple[RDPoint, ...]
    label: str = ""

    @property
    def rates(self) -> np.ndarray:
        return np.fromiter((p.rate for p in self.points), dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.fromiter((p.quality for p in self.points), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class BDResult:
    """BD metrics plus the quality interval they were integrated over."""

    bd_rate: float  # percent; negative = bitrate saving
    bd_psnr: float  # dB
    overlap_low: float  # dB
    overlap_high: float  # dB

    def __post_init__(self):
        if not self.overlap_low < self.overlap_high:
            raise BDMetricError("empty overlap interval")
        if not self.bd_rate > -100.0:
            raise BDMetricError(f"bd_rate {self.bd_rate} out of range")

    def to_json(self) -> dict:
        return {
            "bd_rate_pct": self.bd_rate,
            "bd_psnr_db": None if math.isnan(self.bd_psnr) else self.bd_psnr,
            "overlap_db": [self.overlap_low, self.overlap_high],
        }


def validate_curve(points: Iterable[RDPoint], label: str = "") -> RDCurve:
    """Sort points by rate and check curve invariants.

    Raises TooFewPoints (< 4 points), DuplicateRate, or NonMonotone
    (quality not strictly increasing with rate).
    """
    pts = sorted(points, key=lambda p: p.rate)
    if len(pts) < MIN_POINTS:
        raise TooFewPoints(f"need >= {MIN_POINTS} points, got {len(pts)}")
    for a, b in zip(pts, pts[1:]):
        if b.rate == a.rate:
            raise DuplicateRate(f"duplicate rate {a.rate} kbps")
        if b.quality <= a.quality:
            raise NonMonotone(
                f"quality must increase strictly with rate: "
                f"{a.quality} dB @ {a.rate} kbps vs {b.quality} dB @ {b.rate} kbps"
            )
    return RDCurve(points=tuple(pts), label=label)


def _fit_cubic(x: np.ndarray, y: np.ndarray) -> tuple[tuple[float, ...], float]:
    """Least-squares cubic fit of y over x, centered at mean(x).

    Solved via normal equations on the centered abscissa scaled to [-1, 1];
    a conditioning guard rejects nearly coincident x values. Returns
    (coeffs highest power first, center).
    """
    center = float(x.mean())
    t = x - center
    scale = float(np.max(np.abs(t)))
    if not scale > 0.0:
        raise FitFailure("all abscissa values coincide")
    t = t / scale
    v = np.vander(t, 4)
    gram = v.T @ v
    if np.linalg.cond(gram) > _COND_LIMIT:
        raise FitFailure("singular cubic fit: nearly coincident abscissae")
    try:
        coeffs = np.linalg.solve(gram, v.T @ y)
    except np.linalg.LinAlgError as exc:
        raise FitFailure(f"singular cubic fit: {exc}") from exc
    if not np.all(np.isfinite(coeffs)):
        raise FitFailure("non-finite fit coefficients")
    return (
        float(coeffs[0]) / scale**3,
        float(coeffs[1]) / scale**2,
        float(coeffs[2]) / scale,
        float(coeffs[3]),
    ), center


def _poly_mean(coeffs: tuple[float, ...], center: float, lo: float, hi: float) -> float:
    """Exact mean of the fitted cubic over [lo, hi] via its antiderivative."""
    a, b, c, d = coeffs

    def anti(x: float) -> float:
        return x * (d + x * (c / 2.0 + x * (b / 3.0 + x * (a / 4.0))))

    return (anti(hi - center) - anti(lo - center)) / (hi - lo)


class CurveFit:
    """Precomputed cubic fits for one curve, for repeated BD evaluations.

    The log-rate-over-quality fit drives BD-Rate; the quality-over-log-rate
    fit drives BD-PSNR and is computed on first use (optimizer sweeps never
    need it).
    """

    __slots__ = ("q_min", "q_max", "lr_min", "lr_max", "_q", "_lr", "_rate_fit", "_qual_fit")

    def __init__(self, curve: RDCurve):
        q = curve.qualities
        lr = np.log10(curve.rates)
        self._q = q
        self._lr = lr
        self.q_min = float(q.min())
        self.q_max = float(q.max())
        self.lr_min = float(lr.min())
        self.lr_max = float(lr.max())
        self._rate_fit: tuple[tuple[float, ...], float] | None = None
        self._qual_fit: tuple[tuple[float, ...], float] | None = None

    @property
    def rate_fit(self) -> tuple[tuple[float, ...], float]:
        if self._rate_fit is None:
            self._rate_fit = _fit_cubic(self._q, self._lr)
        return self._rate_fit

    @property
    def qual_fit(self) -> tuple[tuple[float, ...], float]:
        if self._qual_fit is None:
            self._qual_fit = _fit_cubic(self._lr, self._q)
        return self._qual_fit


def bd_rate_pct(anchor_fit: CurveFit, test_fit: CurveFit) -> float:
    """BD-Rate in percent from precomputed fits (the optimizer hot path)."""
    lo = max(anchor_fit.q_min, test_fit.q_min)
    hi = min(anchor_fit.q_max, test_fit.q_max)
    if not lo < hi:
        raise NoOverlap(
            f"quality ranges disjoint: [{anchor_fit.q_min},{anchor_fit.q_max}]"
            f" vs [{test_fit.q_min},{test_fit.q_max}]"
        )
    mean_diff = _poly_mean(*test_fit.rate_fit, lo, hi) - _poly_mean(
        *anchor_fit.rate_fit, lo, hi
    )
    return (10.0**mean_diff - 1.0) * 100.0


def bd_from_fits(anchor_fit: CurveFit, test_fit: CurveFit) -> BDResult:
    """Both BD metrics from precomputed fits.

    bd_psnr integrates over the log-rate overlap; when that interval is
    empty (curves at wildly different bitrates) bd_rate is still defined,
    so the result carries bd_psnr = nan instead of failing.
    """
    lo = max(anchor_fit.q_min, test_fit.q_min)
    hi = min(anchor_fit.q_max, test_fit.q_max)
    bd_r = bd_rate_pct(anchor_fit, test_fit)

    rlo = max(anchor_fit.lr_min, test_fit.lr_min)
    rhi = min(anchor_fit.lr_max, test_fit.lr_max)
    if rlo < rhi:
        bd_p = _poly_mean(*test_fit.qual_fit, rlo, rhi) - _poly_mean(
            *anchor_fit.qual_fit, rlo, rhi
        )
    else:
        bd_p = math.nan
    return BDResult(bd_rate=bd_r, bd_psnr=bd_p, overlap_low=lo, overlap_high=hi)


def bd_rate(anchor: RDCurve, test: RDCurve) -> BDResult:
    """Bjontegaard delta rate and delta PSNR of `test` against `anchor`.

    bd_rate = (10**E[log10 R_test(q) - log10 R_anchor(q)] - 1) * 100 over the
    quality overlap; bd_psnr is the symmetric quality difference over the
    log-rate overlap (nan when that overlap is empty). Integration is
    analytic on the fitted cubics; no extrapolation is ever performed.
    Raises NoOverlap when the quality ranges are disjoint.
    """
    return bd_from_fits(CurveFit(anchor), CurveFit(test))


def bd_psnr(anchor: RDCurve, test: RDCurve) -> float:
    """Average PSNR difference of `test` over `anchor` at equal bitrate, in dB."""
    value = bd_rate(anchor, test).bd_psnr
    if math.isnan(value):
        raise NoOverlap("log-rate ranges disjoint; bd_psnr undefined")
    return value


CURVE_CSV_HEADER = ("rate_kbps", "psnr_db")


def write_curve_csv(curve: RDCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_CSV_HEADER)
        for p in curve.points:
            w.writerow([repr(p.rate), repr(p.quality)])


def read_curve_csv(path: str | Path, label: str | None = None) -> RDCurve:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_CSV_HEADER:
        raise BDMetricError(f"{path}: expected header {','.join(CURVE_CSV_HEADER)}")
    pts = [RDPoint(rate=float(r[0]), quality=float(r[1])) for r in rows[1:] if r]
    return validate_curve(pts, label=label if label is not None else path.stem)
