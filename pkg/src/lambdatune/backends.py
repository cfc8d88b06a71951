"""Encode backends: a synthetic parametric encoder and an external driver.

The synthetic backend models a clip with a closed-form rate/quality surface
so optimizer and pipeline behaviour can be checked against a known
ground-truth lambda scale:

    quality(crf)   = p0 - s * (crf - 22)
    rate(crf, k)   = r0 * 2^(-(crf - 22) / gamma) * dip(k)
    dip(k)         = 1 - g * exp(-(ln k - ln k_star)^2 / (2 * sigma^2))

The dip multiplies rate uniformly across CRF, so the BD-rate of the scaled
run against the k=1 anchor is exactly 100 * (dip(k) / dip(1) - 1): unimodal
in k with its minimum at k_star and a peak saving approaching 100 * g.

The external backend shells out to a real encoder via a command template and
parses the stats log it leaves behind. It requires a build that accepts a
lambda-scale argument; the template placeholders are {input}, {crf}, {k},
{output} and {log}.
"""
from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bd_metrics import RDCurve, RDPoint, validate_curve
from .features import (
    CANONICAL_FPS,
    FrameStats,
    StatsLog,
    aggregate_frames,
    global_psnr,
    read_stats_csv,
    FeatureError,
)

K_MIN = 0.2
K_MAX = 3.0
CRF_MIN = 0
CRF_MAX = 51
DEFAULT_CRF_LIST = (22, 27, 32, 37, 42)
FEATURE_CRF = 33

GOP_LENGTH = 30
P_PERIOD = 4


class BackendError(RuntimeError):
    pass


class EncoderFailure(BackendError):
    pass


class LogParseFailure(BackendError):
    pass


class UnknownClip(BackendError):
    pass


@dataclass(frozen=True)
class SyntheticClipParams:
    """Ground-truth surface parameters for one synthetic clip."""

    r0: float  # anchor rate in kbps at CRF 22
    gamma: float  # CRF increase per rate halving
    p0: float  # quality in dB at CRF 22
    s: float  # quality loss in dB per CRF step
    k_star: float  # true optimal lambda scale
    g: float  # peak fractional rate saving at k_star
    sigma: float  # log-k width of the saving dip
    seed: int = 0

    def __post_init__(self):
        if not (self.r0 > 0 and self.gamma > 0 and self.s > 0 and self.sigma > 0):
            raise ValueError("r0, gamma, s and sigma must be positive")
        if not np.isfinite(self.p0):
            raise ValueError("p0 must be finite")
        if not K_MIN <= self.k_star <= K_MAX:
            raise ValueError(f"k_star must lie in [{K_MIN}, {K_MAX}]")
        if not 0.0 <= self.g < 0.5:
            raise ValueError("g must lie in [0, 0.5)")

    def dip(self, k: float) -> float:
        z = (math.log(k) - math.log(self.k_star)) / self.sigma
        return 1.0 - self.g * math.exp(-0.5 * z * z)

    def rate_kbps(self, crf: float, k: float) -> float:
        return self.r0 * 2.0 ** (-(crf - 22.0) / self.gamma) * self.dip(k)

    def quality_db(self, crf: float) -> float:
        return self.p0 - self.s * (crf - 22.0)

    def to_json(self) -> dict:
        return {
            "r0": self.r0,
            "gamma": self.gamma,
            "p0": self.p0,
            "s": self.s,
            "k_star": self.k_star,
            "g": self.g,
            "sigma": self.sigma,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ClipRef:
    """Handle for one clip: either a synthetic surface or a source file path."""

    id: str
    source: SyntheticClipParams | str
    frame_count: int = 150
    width: int = 1920
    height: int = 1080

    def __post_init__(self):
        if not self.id:
            raise ValueError("clip id must be non-empty")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")

    @property
    def synthetic(self) -> bool:
        return isinstance(self.source, SyntheticClipParams)

    def to_json(self) -> dict:
        if self.synthetic:
            return {
                "id": self.id,
                "frame_count": self.frame_count,
                "width": self.width,
                "height": self.height,
                "synthetic": self.source.to_json(),
            }
        return {
            "id": self.id,
            "source": str(self.source),
            "frame_count": self.frame_count,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClipRef":
        if "synthetic" in obj:
            source: SyntheticClipParams | str = SyntheticClipParams(**obj["synthetic"])
        elif "source" in obj:
            source = obj["source"]
        else:
            raise ValueError("clip record needs either 'synthetic' or 'source'")
        return cls(
            id=obj["id"],
            source=source,
            frame_count=int(obj.get("frame_count", 150)),
            width=int(obj.get("width", 1920)),
            height=int(obj.get("height", 1080)),
        )


class EncodeResult:
    """Outcome of one encode: the RD point plus the full stats log.

    Stats are materialized lazily; optimizer sweeps only touch `point`, and
    frame-level synthesis for a 0.001-step grid sweep would dominate runtime.
    Materialization is deterministic, so equal inputs give equal results.
    """

    __slots__ = ("point", "encode_count_delta", "_stats", "_stats_factory")

    def __init__(
        self,
        point: RDPoint,
        stats: StatsLog | None = None,
        stats_factory: Callable[[], StatsLog] | None = None,
        encode_count_delta: int = 1,
    ):
        if stats is None and stats_factory is None:
            raise ValueError("EncodeResult needs stats or a stats factory")
        self.point = point
        self.encode_count_delta = encode_count_delta
        self._stats = stats
        self._stats_factory = stats_factory

    @property
    def stats(self) -> StatsLog:
        if self._stats is None:
            self._stats = self._stats_factory()
        return self._stats

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodeResult):
            return NotImplemented
        return (
            self.point == other.point
            and self.encode_count_delta == other.encode_count_delta
            and self.stats == other.stats
        )


def _check_encode_args(crf: float, k: float) -> None:
    if not CRF_MIN <= crf <= CRF_MAX:
        raise ValueError(f"crf must lie in [{CRF_MIN}, {CRF_MAX}], got {crf}")
    if not (np.isfinite(k) and k > 0):
        raise ValueError(f"lambda scale must be positive and finite, got {k}")


class EncoderBackend:
    """Shared counter plumbing for encode backends."""

    name = "abstract"

    def __init__(self):
        self._lock = threading.Lock()
        self._encodes = 0

    @property
    def encodes(self) -> int:
        """Total encodes performed by this backend instance."""
        with self._lock:
            return self._encodes

    def _tally(self, n: int = 1) -> None:
        with self._lock:
            self._encodes += n

    def encode(self, clip: ClipRef, crf: float, k: float) -> EncodeResult:
        raise NotImplementedError

    def rd_curve(
        self,
        clip: ClipRef,
        crf_list: Sequence[int] | None = None,
        k: float = 1.0,
    ) -> RDCurve:
        """Encode the clip at each CRF (one encode per point) and validate."""
        crfs = tuple(crf_list) if crf_list is not None else DEFAULT_CRF_LIST
        points = [self.encode(clip, crf, k).point for crf in crfs]
        return validate_curve(points, label=f"{clip.id} k={k:.6g}")


def _frame_type(index: int) -> str:
    if index % GOP_LENGTH == 0:
        return "I"
    if index % P_PERIOD == 0:
        return "P"
    return "B"


_TYPE_BIT_WEIGHT = {"I": 6.0, "P": 1.5, "B": 0.7}
_TYPE_PSNR_OFFSET = {"I": 0.9, "P": 0.1, "B": -0.25}


def _seed_words(seed: int, crf: float, k: float) -> list[int]:
    mask = (1 << 64) - 1
    return [
        seed & mask,
        int(np.float64(crf).view(np.uint64)),
        int(np.float64(k).view(np.uint64)),
    ]


def _synth_stats(
    params: SyntheticClipParams, frame_count: int, crf: float, k: float
) -> StatsLog:
    """Deterministic per-frame statistics for a synthetic encode.

    The I/P cost ratio and residual energy carry the clip's k_star (temporal
    complexity drives where the optimum sits), which is what makes the
    labelled corpus learnable from stats alone.
    """
    rng = np.random.default_rng(_seed_words(params.seed, crf, k))
    clip_rng = np.random.default_rng(_seed_words(params.seed, -1.0, -1.0))
    luma0 = clip_rng.uniform(40.0, 200.0)
    cb0 = clip_rng.uniform(112.0, 144.0)
    cr0 = clip_rng.uniform(112.0, 144.0)

    rate = params.rate_kbps(crf, k)
    quality = params.quality_db(crf)
    total_bits = rate * 1000.0 * (frame_count / CANONICAL_FPS)

    types = [_frame_type(i) for i in range(frame_count)]
    weights = np.array([_TYPE_BIT_WEIGHT[t] for t in types])
    weights = weights * np.exp(0.08 * rng.standard_normal(frame_count))
    bits = total_bits * weights / weights.sum()

    psnr_y = (
        quality
        + np.array([_TYPE_PSNR_OFFSET[t] for t in types])
        + 0.25 * rng.standard_normal(frame_count)
    )
    psnr_u = psnr_y + 3.2 + 0.15 * rng.standard_normal(frame_count)
    psnr_v = psnr_y + 3.6 + 0.15 * rng.standard_normal(frame_count)
    chroma = np.maximum(
        0.0, 24.0 + 2.1 * (crf - 22.0) + 1.5 * rng.standard_normal(frame_count)
    )
    res_energy = np.maximum(
        1.0,
        260.0 * (1.0 + 0.35 * math.log(params.k_star))
        + 7.0 * (crf - 22.0)
        + 9.0 * rng.standard_normal(frame_count),
    )
    luma = luma0 + 2.0 * rng.standard_normal(frame_count)
    cb = cb0 + 1.2 * rng.standard_normal(frame_count)
    cr = cr0 + 1.2 * rng.standard_normal(frame_count)
    ip_ratio = (
        0.8 + 0.6 * params.k_star + 0.05 * rng.standard_normal(frame_count)
    )

    frames = tuple(
        FrameStats(
            frame_type=types[i],
            bits=float(bits[i]),
            psnr_y=float(psnr_y[i]),
            psnr_u=float(psnr_u[i]),
            psnr_v=float(psnr_v[i]),
            avg_chroma_dist=float(chroma[i]),
            avg_res_energy=float(res_energy[i]),
            avg_luma=float(luma[i]),
            avg_cb=float(cb[i]),
            avg_cr=float(cr[i]),
            ip_cost_ratio=float(ip_ratio[i]),
        )
        for i in range(frame_count)
    )
    # Synthetic elapsed time: slower at low CRF, scaled by frame count.
    elapsed = frame_count * (0.01 + 0.5 / (crf + 10.0))
    clip_stats = aggregate_frames(
        frames, avg_qp=float(crf), elapsed_seconds=elapsed
    )
    return StatsLog(clip_stats=clip_stats, frame_stats=frames)


class SyntheticEncoder(EncoderBackend):
    """Closed-form encoder with a known optimal lambda scale per clip."""

    name = "synthetic"

    def encode(self, clip: ClipRef, crf: float, k: float) -> EncodeResult:
        if not clip.synthetic:
            raise UnknownClip(f"{clip.id}: synthetic backend needs synthetic params")
        _check_encode_args(crf, k)
        params = clip.source
        point = RDPoint(
            rate=params.rate_kbps(crf, k), quality=params.quality_db(crf)
        )
        self._tally()
        n = clip.frame_count
        return EncodeResult(
            point=point,
            stats_factory=lambda: _synth_stats(params, n, crf, k),
        )


class ExternalEncoder(EncoderBackend):
    """Drives a real encoder binary through a shell command template.

    The template must contain the placeholders {input}, {crf}, {k}, {output}
    and {log}; {k} is the lambda scale, so the binary must expose one (stock
    encoders do not; a patched build is assumed). The RD point is derived
    from the stats log: rate from total bits over clip duration, quality as
    the mean per-frame global PSNR.
    """

    name = "external"

    REQUIRED_PLACEHOLDERS = ("{input}", "{crf}", "{k}", "{output}", "{log}")

    def __init__(
        self,
        command_template: str,
        workdir: str | Path | None = None,
        log_format: str = "canonical",
        fps: float = CANONICAL_FPS,
    ):
        super().__init__()
        missing = [p for p in self.REQUIRED_PLACEHOLDERS if p not in command_template]
        if missing:
            raise ValueError(f"command template lacks placeholders: {missing}")
        self.command_template = command_template
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="enc_"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.log_format = log_format
        self.fps = fps

    def encode(self, clip: ClipRef, crf: float, k: float) -> EncodeResult:
        if clip.synthetic:
            raise UnknownClip(f"{clip.id}: external backend needs a source file")
        _check_encode_args(crf, k)
        stem = f"{clip.id.replace('/', '_')}_crf{crf:g}_k{k:.6f}"
        output = self.workdir / f"{stem}.bin"
        log = self.workdir / f"{stem}.csv"
        cmd = self.command_template.format(
            input=str(clip.source), crf=crf, k=k, output=output, log=log
        )
        proc = subprocess.run(
            shlex.split(cmd), capture_output=True, text=True
        )
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-5:]
            raise EncoderFailure(
                f"{clip.id}: encoder exited {proc.returncode}: {' | '.join(tail)}"
            )
        try:
            stats = read_stats_csv(log, fmt=self.log_format)
        except (OSError, FeatureError) as exc:
            raise LogParseFailure(f"{clip.id}: {exc}") from exc
        self._tally()
        return EncodeResult(point=self.rd_point_from_stats(stats), stats=stats)

    def rd_point_from_stats(self, stats: StatsLog) -> RDPoint:
        n = len(stats.frame_stats)
        total_bits = sum(f.bits for f in stats.frame_stats)
        rate = total_bits / 1000.0 / (n / self.fps)
        quality = float(
            np.mean(
                [global_psnr(f.psnr_y, f.psnr_u, f.psnr_v) for f in stats.frame_stats]
            )
        )
        return RDPoint(rate=rate, quality=quality)


# ---------------------------------------------------------------------------
# Clip manifests and the synthetic corpus

def write_manifest(clips: Sequence[ClipRef], path: str | Path) -> None:
    """JSON lines, one clip per line."""
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ClipRef]:
    clips = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                clips.append(ClipRef.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise LogParseFailure(f"{path}: line {i + 1}: {exc}") from exc
    return clips


def synthetic_corpus(n: int, seed: int = 0) -> list[ClipRef]:
    """Draw a corpus of synthetic clips with realistic parameter spread.

    k_star is a two-sided log-normal mixture: 55% of clips prefer a softer
    lambda (density mode 0.72, so the histogram mode lands in the [0.7, 0.8)
    bin) and 45% a harder one (mode 1.6), clipped to the legal range. The
    dip widths are narrow relative to the cluster spread, which is what
    gives per-clip adaptation its edge: no single fixed k can serve clips
    whose optima sit on opposite sides of 1, and even within a cluster a
    fixed k misses most narrow dips.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    rng = np.random.default_rng([seed, 0xC0FFEE])
    clips = []
    mu_low = math.log(0.72) + 0.25**2
    mu_high = math.log(1.6) + 0.3**2
    for i in range(n):
        if rng.random() < 0.55:
            k_star = math.exp(rng.normal(mu_low, 0.25))
        else:
            k_star = math.exp(rng.normal(mu_high, 0.3))
        params = SyntheticClipParams(
            r0=float(math.exp(rng.uniform(math.log(800.0), math.log(12000.0)))),
            gamma=float(rng.uniform(4.5, 8.0)),
            p0=float(rng.uniform(38.0, 50.0)),
            s=float(rng.uniform(0.55, 1.05)),
            k_star=float(np.clip(k_star, K_MIN, K_MAX)),
            g=float(rng.uniform(0.03, 0.28)),
            sigma=float(rng.uniform(0.06, 0.18)),
            seed=int(rng.integers(0, 2**32)),
        )
        clips.append(ClipRef(id=f"synth:{seed:04d}:{i:05d}", source=params))
    return clips


DEMO_CLIP = ClipRef(
    id="synth:demo",
    source=SyntheticClipParams(
        r0=5000.0, gamma=6.0, p0=45.0, s=0.8, k_star=0.7, g=0.12, sigma=0.3, seed=7
    ),
)


def resolve_clip(spec: str) -> ClipRef:
    """Turn a CLI clip spec into a ClipRef.

    "synth:demo" is the built-in demo clip; "synth:<seed>:<index>" addresses
    a clip of the seeded synthetic corpus; anything else is a file path.
    """
    if spec == "synth:demo":
        return DEMO_CLIP
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) == 3:
            try:
                seed, index = int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise UnknownClip(f"bad synthetic clip spec {spec!r}") from exc
            corpus = synthetic_corpus(index + 1, seed=seed)
            return replace(corpus[index], id=spec)
        raise UnknownClip(f"bad synthetic clip spec {spec!r}")
    return ClipRef(id=Path(spec).stem, source=spec)
