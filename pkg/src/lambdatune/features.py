"""Encoder statistics logs and the fixed-width feature vector.

A stats log holds one record per encoded frame (bits, I/P cost ratio,
PSNR Y/U/V, average chroma distortion, residual energy, and luma/Cb/Cr
levels) plus per-clip aggregates derived from those records. Feature
vectors pack a 23-element clip block, a 1500-element frame block
(150 frames x 10 features, frame-major), and an optional 1000-element
semantic block supplied by an external provider, for 2523 values total
(1523 when the semantic block is absent).

Canonical log format: CSV with one header row and the columns listed in
CANONICAL_COLUMNS, optionally preceded by `# avg_qp=...` and
`# elapsed_seconds=...` metadata lines (the clip-block extras are not
derivable from the frame columns). An adapter maps x265 CSV report
column names onto the canonical ones.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CANONICAL_FPS = 30.0  # 150-frame clip == 5 s DASH segment
CANONICAL_FRAME_COUNT = 150

CANONICAL_COLUMNS = (
    "frame_type",
    "bits",
    "psnr_y",
    "psnr_u",
    "psnr_v",
    "avg_chroma_dist",
    "avg_res_energy",
    "avg_luma",
    "avg_cb",
    "avg_cr",
    "ip_cost_ratio",
)
FRAME_FEATURES = CANONICAL_COLUMNS[1:]  # the 10 numeric per-frame features

CLIP_BLOCK_LAYOUT = (
    "avg_bitrate_kbps",
    "avg_psnr_y",
    "avg_psnr_u",
    "avg_psnr_v",
    "avg_psnr_global",
    "i_count",
    "p_count",
    "b_count",
    "i_bitrate_kbps",
    "p_bitrate_kbps",
    "b_bitrate_kbps",
    "i_psnr_y",
    "i_psnr_u",
    "i_psnr_v",
    "p_psnr_y",
    "p_psnr_u",
    "p_psnr_v",
    "b_psnr_y",
    "b_psnr_u",
    "b_psnr_v",
    "total_frames",
    "avg_qp",
    "elapsed_seconds",
)

CLIP_BLOCK_LEN = len(CLIP_BLOCK_LAYOUT)  # 23
FRAME_BLOCK_LEN = CANONICAL_FRAME_COUNT * len(FRAME_FEATURES)  # 1500
SEMANTIC_BLOCK_LEN = 1000
FULL_LEN = CLIP_BLOCK_LEN + FRAME_BLOCK_LEN + SEMANTIC_BLOCK_LEN  # 2523
NO_SEMANTIC_LEN = CLIP_BLOCK_LEN + FRAME_BLOCK_LEN  # 1523

# Frame index handed to external semantic-feature providers. Whether the
# source material's "median frame" means the 75th-percentile frame or simply
# frame 75 is provider business; this is only the default they receive.
DEFAULT_SEMANTIC_FRAME_INDEX = 75

STD_FLOOR = 1e-12


class FeatureError(ValueError):
    pass


class MissingColumn(FeatureError):
    pass


class MalformedRow(FeatureError):
    pass


class EmptyLog(FeatureError):
    pass


class TooFewVectors(FeatureError):
    pass


class FeatureLayoutMismatch(FeatureError):
    pass


def global_psnr(psnr_y: float, psnr_u: float, psnr_v: float) -> float:
    """Weighted global PSNR, (6*Y + U + V) / 8."""
    return (6.0 * psnr_y + psnr_u + psnr_v) / 8.0


@dataclass(frozen=True)
class FrameStats:
    frame_type: str  # I, P or B
    bits: float
    psnr_y: float
    psnr_u: float
    psnr_v: float
    avg_chroma_dist: float
    avg_res_energy: float
    avg_luma: float
    avg_cb: float
    avg_cr: float
    ip_cost_ratio: float

    def __post_init__(self):
        # Canonical float fields: ints and numpy scalars serialize identically.
        for name in FRAME_FEATURES:
            object.__setattr__(self, name, float(getattr(self, name)))

    def features(self) -> tuple[float, ...]:
        """The 10 numeric features in canonical column order."""
        return (
            self.bits,
            self.psnr_y,
            self.psnr_u,
            self.psnr_v,
            self.avg_chroma_dist,
            self.avg_res_energy,
            self.avg_luma,
            self.avg_cb,
            self.avg_cr,
            self.ip_cost_ratio,
        )


@dataclass(frozen=True)
class ClipStats:
    """Per-clip aggregates, one field per CLIP_BLOCK_LAYOUT entry.

    Per-frame-type values are 0.0 when the clip has no frames of that type.
    Per-type bitrates are the mean frame size of the type scaled to kbps at
    the clip frame rate.
    """

    avg_bitrate_kbps: float
    avg_psnr_y: float
    avg_psnr_u: float
    avg_psnr_v: float
    avg_psnr_global: float
    i_count: int
    p_count: int
    b_count: int
    i_bitrate_kbps: float
    p_bitrate_kbps: float
    b_bitrate_kbps: float
    i_psnr_y: float
    i_psnr_u: float
    i_psnr_v: float
    p_psnr_y: float
    p_psnr_u: float
    p_psnr_v: float
    b_psnr_y: float
    b_psnr_u: float
    b_psnr_v: float
    total_frames: int
    avg_qp: float
    elapsed_seconds: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [float(getattr(self, name)) for name in CLIP_BLOCK_LAYOUT],
            dtype=np.float64,
        )


def aggregate_frames(
    frames: Sequence[FrameStats],
    avg_qp: float = 0.0,
    elapsed_seconds: float = 0.0,
    fps: float = CANONICAL_FPS,
) -> ClipStats:
    """Derive the Table-style per-clip aggregates from frame records."""
    if not frames:
        raise EmptyLog("no frame records to aggregate")
    n = len(frames)
    duration = n / fps
    bits = np.array([f.bits for f in frames], dtype=np.float64)

    def _type_stats(t: str) -> tuple[int, float, float, float, float]:
        sel = [f for f in frames if f.frame_type == t]
        if not sel:
            return 0, 0.0, 0.0, 0.0, 0.0
        kbps = float(np.mean([f.bits for f in sel])) * fps / 1000.0
        return (
            len(sel),
            kbps,
            float(np.mean([f.psnr_y for f in sel])),
            float(np.mean([f.psnr_u for f in sel])),
            float(np.mean([f.psnr_v for f in sel])),
        )

    i_n, i_kbps, i_y, i_u, i_v = _type_stats("I")
    p_n, p_kbps, p_y, p_u, p_v = _type_stats("P")
    b_n, b_kbps, b_y, b_u, b_v = _type_stats("B")

    return ClipStats(
        avg_bitrate_kbps=float(bits.sum()) / 1000.0 / duration,
        avg_psnr_y=float(np.mean([f.psnr_y for f in frames])),
        avg_psnr_u=float(np.mean([f.psnr_u for f in frames])),
        avg_psnr_v=float(np.mean([f.psnr_v for f in frames])),
        avg_psnr_global=float(
            np.mean([global_psnr(f.psnr_y, f.psnr_u, f.psnr_v) for f in frames])
        ),
        i_count=i_n,
        p_count=p_n,
        b_count=b_n,
        i_bitrate_kbps=i_kbps,
        p_bitrate_kbps=p_kbps,
        b_bitrate_kbps=b_kbps,
        i_psnr_y=i_y,
        i_psnr_u=i_u,
        i_psnr_v=i_v,
        p_psnr_y=p_y,
        p_psnr_u=p_u,
        p_psnr_v=p_v,
        b_psnr_y=b_y,
        b_psnr_u=b_u,
        b_psnr_v=b_v,
        total_frames=n,
        avg_qp=float(avg_qp),
        elapsed_seconds=float(elapsed_seconds),
    )


@dataclass(frozen=True)
class StatsLog:
    clip_stats: ClipStats
    frame_stats: tuple[FrameStats, ...]

    def __post_init__(self):
        if len(self.frame_stats) < 1:
            raise EmptyLog("stats log must hold at least one frame record")
        for i, f in enumerate(self.frame_stats):
            if f.frame_type not in ("I", "P", "B"):
                raise MalformedRow(f"row {i}: frame_type {f.frame_type!r}")
            if not all(np.isfinite([f.psnr_y, f.psnr_u, f.psnr_v])):
                raise MalformedRow(f"row {i}: non-finite PSNR")
        cs = self.clip_stats
        if cs.total_frames != len(self.frame_stats):
            raise FeatureError("clip_stats.total_frames does not match frame records")
        if cs.i_count + cs.p_count + cs.b_count != cs.total_frames:
            raise FeatureError("frame counts by type do not sum to total frames")


# ---------------------------------------------------------------------------
# Log parsing and serialization

_X265_COLUMN_MAP = {
    "Type": "frame_type",
    "Bits": "bits",
    "Y PSNR": "psnr_y",
    "U PSNR": "psnr_u",
    "V PSNR": "psnr_v",
    "Avg chroma distortion": "avg_chroma_dist",
    "avg residual energy": "avg_res_energy",
    "avg luma level": "avg_luma",
    "avg cb level": "avg_cb",
    "avg cr level": "avg_cr",
    "I/P cost ratio": "ip_cost_ratio",
}

_X265_TYPE_MAP = {"I-SLICE": "I", "P-SLICE": "P", "B-SLICE": "B", "b-SLICE": "B"}

LOG_FORMATS = ("canonical", "x265-adapter")


def _normalize_type(raw: str, fmt: str) -> str:
    raw = raw.strip()
    if fmt == "x265-adapter":
        return _X265_TYPE_MAP.get(raw, raw.upper()[:1])
    return raw


def parse_stats(log: bytes | str, fmt: str = "canonical") -> StatsLog:
    """Parse an encoder statistics log into a StatsLog.

    `fmt` is "canonical" or "x265-adapter". Missing required columns raise
    MissingColumn naming the canonical column; bad rows raise MalformedRow
    with the data row index; an empty body raises EmptyLog.
    """
    if fmt not in LOG_FORMATS:
        raise FeatureError(f"unknown log format {fmt!r}; expected one of {LOG_FORMATS}")
    text = log.decode("utf-8") if isinstance(log, bytes) else log

    meta: dict[str, float] = {}
    body_lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            payload = line.lstrip("#").strip()
            if "=" in payload:
                key, _, value = payload.partition("=")
                try:
                    meta[key.strip()] = float(value.strip())
                except ValueError:
                    pass  # unknown annotations are ignored
        elif line.strip():
            body_lines.append(line)
    if not body_lines:
        raise EmptyLog("log contains no CSV body")

    rows = list(csv.reader(io.StringIO("\n".join(body_lines))))
    header = [h.strip() for h in rows[0]]
    if fmt == "x265-adapter":
        header = [_X265_COLUMN_MAP.get(h, h) for h in header]

    col_idx: dict[str, int] = {}
    for name in CANONICAL_COLUMNS:
        if name not in header:
            raise MissingColumn(name)
        col_idx[name] = header.index(name)
    qp_idx = header.index("QP") if (fmt == "x265-adapter" and "QP" in header) else None

    frames: list[FrameStats] = []
    qp_values: list[float] = []
    for i, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) < len(header):
            raise MalformedRow(f"row {i}: expected {len(header)} fields, got {len(row)}")
        try:
            frames.append(
                FrameStats(
                    frame_type=_normalize_type(row[col_idx["frame_type"]], fmt),
                    **{
                        name: float(row[col_idx[name]])
                        for name in FRAME_FEATURES
                    },
                )
            )
            if qp_idx is not None:
                qp_values.append(float(row[qp_idx]))
        except ValueError as exc:
            raise MalformedRow(f"row {i}: {exc}") from exc
    if not frames:
        raise EmptyLog("log contains a header but no frame rows")

    avg_qp = meta.get("avg_qp", float(np.mean(qp_values)) if qp_values else 0.0)
    elapsed = meta.get("elapsed_seconds", 0.0)
    clip = aggregate_frames(frames, avg_qp=avg_qp, elapsed_seconds=elapsed)
    return StatsLog(clip_stats=clip, frame_stats=tuple(frames))


def serialize_stats(stats: StatsLog) -> str:
    """Canonical CSV text for a StatsLog; parse(serialize(x)) == x byte-exactly."""
    out = io.StringIO()
    out.write(f"# avg_qp={stats.clip_stats.avg_qp!r}\n")
    out.write(f"# elapsed_seconds={stats.clip_stats.elapsed_seconds!r}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CANONICAL_COLUMNS)
    for f in stats.frame_stats:
        w.writerow([f.frame_type] + [repr(v) for v in f.features()])
    return out.getvalue()


def read_stats_csv(path: str | Path, fmt: str = "canonical") -> StatsLog:
    return parse_stats(Path(path).read_bytes(), fmt)


def write_stats_csv(stats: StatsLog, path: str | Path) -> None:
    Path(path).write_text(serialize_stats(stats))


# ---------------------------------------------------------------------------
# Feature vectors

@dataclass(frozen=True)
class SemanticFeatures:
    """Externally produced semantic descriptor for one clip, 1000 values."""

    clip_id: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (SEMANTIC_BLOCK_LEN,):
            raise FeatureLayoutMismatch(
                f"semantic block must hold {SEMANTIC_BLOCK_LEN} values, got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise FeatureError("semantic features must be finite")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    clip_block: np.ndarray  # 23
    frame_block: np.ndarray  # 1500, frame-major
    semantic_block: np.ndarray | None  # 1000 or absent
    padded: bool = False  # fewer than 150 frames, zero-filled tail
    truncated: bool = False  # more than 150 frames, tail dropped

    def __post_init__(self):
        clip = np.asarray(self.clip_block, dtype=np.float64)
        frame = np.asarray(self.frame_block, dtype=np.float64)
        if clip.shape != (CLIP_BLOCK_LEN,):
            raise FeatureLayoutMismatch(f"clip block must be {CLIP_BLOCK_LEN} wide")
        if frame.shape != (FRAME_BLOCK_LEN,):
            raise FeatureLayoutMismatch(f"frame block must be {FRAME_BLOCK_LEN} wide")
        sem = self.semantic_block
        if sem is not None:
            sem = np.asarray(sem, dtype=np.float64)
            if sem.shape != (SEMANTIC_BLOCK_LEN,):
                raise FeatureLayoutMismatch(f"semantic block must be {SEMANTIC_BLOCK_LEN} wide")
        for arr in (clip, frame) + ((sem,) if sem is not None else ()):
            if not np.all(np.isfinite(arr)):
                raise FeatureError("feature vector must be finite")
        object.__setattr__(self, "clip_block", clip)
        object.__setattr__(self, "frame_block", frame)
        object.__setattr__(self, "semantic_block", sem)

    @property
    def semantic_absent(self) -> bool:
        return self.semantic_block is None

    def full(self) -> np.ndarray:
        """All 2523 values; zeros stand in for an absent semantic block."""
        sem = (
            self.semantic_block
            if self.semantic_block is not None
            else np.zeros(SEMANTIC_BLOCK_LEN)
        )
        return np.concatenate([self.clip_block, self.frame_block, sem])

    def active(self) -> np.ndarray:
        """2523 values with semantics, 1523 without."""
        if self.semantic_block is None:
            return np.concatenate([self.clip_block, self.frame_block])
        return self.full()


def assemble_features(
    stats: StatsLog, semantic: SemanticFeatures | None = None
) -> FeatureVector:
    """Pack a StatsLog (and optional semantic block) into the fixed layout.

    The frame block is frame-major: all 10 features of frame 0, then frame 1,
    and so on, zero-padded or truncated to exactly 150 frames.
    """
    frames = stats.frame_stats
    mat = np.zeros((CANONICAL_FRAME_COUNT, len(FRAME_FEATURES)), dtype=np.float64)
    n = min(len(frames), CANONICAL_FRAME_COUNT)
    for i in range(n):
        mat[i, :] = frames[i].features()
    return FeatureVector(
        clip_block=stats.clip_stats.as_vector(),
        frame_block=mat.reshape(-1),
        semantic_block=None if semantic is None else semantic.values,
        padded=len(frames) < CANONICAL_FRAME_COUNT,
        truncated=len(frames) > CANONICAL_FRAME_COUNT,
    )


@dataclass(frozen=True, eq=False)
class UnpackedFeatures:
    clip: dict[str, float]
    frames: np.ndarray  # (150, 10)
    semantic: np.ndarray | None


def unpack_features(vector: FeatureVector) -> UnpackedFeatures:
    """Inverse of assemble_features on the documented layout (up to padding)."""
    clip = dict(zip(CLIP_BLOCK_LAYOUT, vector.clip_block))
    frames = vector.frame_block.reshape(CANONICAL_FRAME_COUNT, len(FRAME_FEATURES))
    return UnpackedFeatures(clip=clip, frames=frames, semantic=vector.semantic_block)


# ---------------------------------------------------------------------------
# Normalization

@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension standardization statistics.

    Dimensions whose corpus std falls below STD_FLOOR are marked inactive and
    normalize to 0 (their mean is still stored, so inversion recovers the
    constant value exactly).
    """

    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray  # bool mask

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        object.__setattr__(self, "active", np.asarray(self.active, dtype=bool))

    @property
    def width(self) -> int:
        return int(self.mean.shape[0])


def fit_norm_stats(rows: np.ndarray) -> NormStats:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise TooFewVectors("normalization needs at least 2 vectors")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return NormStats(mean=mean, std=std, active=std >= STD_FLOOR)


def apply_norm(stats: NormStats, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - stats.mean
    out = np.where(stats.active, centered / np.where(stats.active, stats.std, 1.0), 0.0)
    return out


def invert_norm(stats: NormStats, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return np.where(stats.active, rows * np.where(stats.active, stats.std, 1.0), 0.0) + stats.mean


def normalize_features(
    vectors: Sequence[FeatureVector],
) -> tuple[list[np.ndarray], NormStats]:
    """Standardize a corpus of feature vectors dimension by dimension.

    All vectors must agree on semantic presence; the stats cover the active
    layout (2523 or 1523 wide).
    """
    if len(vectors) < 2:
        raise TooFewVectors("normalization needs at least 2 vectors")
    absent = vectors[0].semantic_absent
    if any(v.semantic_absent != absent for v in vectors):
        raise FeatureLayoutMismatch("mixed semantic presence across corpus")
    rows = np.stack([v.active() for v in vectors])
    stats = fit_norm_stats(rows)
    normalized = apply_norm(stats, rows)
    return [normalized[i] for i in range(normalized.shape[0])], stats


# ---------------------------------------------------------------------------
# File formats

def write_features_csv(
    items: Iterable[tuple[str, FeatureVector]], path: str | Path, append: bool = False
) -> None:
    """One CSV row of 2523 values per clip id (zeros for absent semantics)."""
    mode = "a" if append and Path(path).exists() else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["clip_id"] + [f"v{i}" for i in range(FULL_LEN)])
        for clip_id, vec in items:
            w.writerow([clip_id] + [repr(float(v)) for v in vec.full()])


def read_features_csv(path: str | Path) -> list[tuple[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyLog(f"{path}: empty feature file")
    out = []
    for i, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) != FULL_LEN + 1:
            raise MalformedRow(f"row {i}: expected {FULL_LEN + 1} fields, got {len(row)}")
        out.append((row[0], np.array([float(v) for v in row[1:]], dtype=np.float64)))
    return out


def write_semantic_csv(
    items: Iterable[SemanticFeatures], path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id"] + [f"f{i}" for i in range(SEMANTIC_BLOCK_LEN)])
        for sem in items:
            w.writerow([sem.clip_id] + [repr(float(v)) for v in sem.values])


def read_semantic_csv(path: str | Path) -> dict[str, SemanticFeatures]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyLog(f"{path}: empty semantic file")
    out: dict[str, SemanticFeatures] = {}
    for i, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) != SEMANTIC_BLOCK_LEN + 1:
            raise MalformedRow(
                f"row {i}: expected {SEMANTIC_BLOCK_LEN + 1} fields, got {len(row)}"
            )
        out[row[0]] = SemanticFeatures(
            clip_id=row[0], values=np.array([float(v) for v in row[1:]])
        )
    return out
