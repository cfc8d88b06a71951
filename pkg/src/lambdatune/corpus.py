"""Corpus-scale orchestration: labeling, splits, two-pass evaluation, figures.

Labeling runs the per-clip optimizer over a manifest and persists one JSON
file per clip keyed by a content hash of (clip id, effective optimizer
config), so interrupted runs resume without re-encoding finished clips.

Two-pass evaluation mirrors deployment: encode the anchor curve at k=1,
pick k from a source (fixed value, trained model, or oracle labels),
re-encode at that k, and keep the better of the two encodes, flooring each
clip's loss at zero. The per-clip budget is exactly 10 encodes (2 curves of
5); the model source's feature probe at CRF 33 is tallied separately.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np

from .backends import (
    DEFAULT_CRF_LIST,
    FEATURE_CRF,
    ClipRef,
    EncoderBackend,
    read_manifest,
    write_manifest,
)
from .bd_metrics import BDMetricError, CurveFit, bd_rate_pct
from .features import SemanticFeatures
from .mlp import MLPModel, load_model, predict_k
from .optimizer import BudgetExceeded, Objective, OptConfig, OptResult, optimize_k

T = TypeVar("T")

K_HIST_EDGES = np.round(np.arange(0.2, 3.0 + 1e-9, 0.1), 10)


class CorpusError(RuntimeError):
    pass


class EmptyManifest(CorpusError):
    pass


class DuplicateClipId(CorpusError):
    pass


class TooFew(CorpusError):
    pass


class InvalidFraction(CorpusError):
    pass


class EmptyOutcomes(CorpusError):
    pass


class EmptyInput(CorpusError):
    pass


class MissingLabel(CorpusError):
    pass


@dataclass(frozen=True)
class CorpusManifest:
    clips: tuple[ClipRef, ...]
    backend: str = "synthetic"
    crf_list: tuple[int, ...] = DEFAULT_CRF_LIST
    storage_root: Path | None = None

    def __post_init__(self):
        if not self.clips:
            raise EmptyManifest("manifest holds no clips")
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateClipId(f"duplicate clip ids: {dupes[:5]}")
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "crf_list", tuple(self.crf_list))
        if self.storage_root is not None:
            object.__setattr__(self, "storage_root", Path(self.storage_root))

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        backend: str = "synthetic",
        crf_list: Sequence[int] = DEFAULT_CRF_LIST,
        storage_root: str | Path | None = None,
    ) -> "CorpusManifest":
        return cls(
            clips=tuple(read_manifest(path)),
            backend=backend,
            crf_list=tuple(crf_list),
            storage_root=Path(storage_root) if storage_root else None,
        )

    def save(self, path: str | Path) -> None:
        write_manifest(self.clips, path)


@dataclass(frozen=True)
class ClipLabel:
    """Direct-optimization label for one clip."""

    clip_id: str
    k_opt: float
    bd_rate_at_k_opt: float
    iterations: int
    encodes_used: int

    @property
    def bd_gain(self) -> float:
        """Positive improvement in percent at the labeled k."""
        return -self.bd_rate_at_k_opt

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "k_opt": self.k_opt,
            "bd_rate_at_k_opt": self.bd_rate_at_k_opt,
            "bd_gain": self.bd_gain,
            "iterations": self.iterations,
            "encodes_used": self.encodes_used,
        }

    @classmethod
    def from_opt_result(cls, res: OptResult) -> "ClipLabel":
        return cls(
            clip_id=res.clip_id,
            k_opt=res.k_opt,
            bd_rate_at_k_opt=res.bd_rate_at_k_opt,
            iterations=res.iterations,
            encodes_used=res.encodes_used,
        )


@dataclass(frozen=True)
class LabelRun:
    labels: tuple[ClipLabel, ...]
    failures: tuple[tuple[str, str], ...]  # (clip_id, error)
    encodes_used: int
    resumed: int  # clips loaded from the store instead of re-optimized


def _config_key(clip: ClipRef, cfg: OptConfig, backend_name: str) -> str:
    payload = json.dumps(
        {
            "clip": clip.to_json(),
            "k_min": cfg.k_min,
            "k_max": cfg.k_max,
            "tol": cfg.tol,
            "max_iters": cfg.max_iters,
            "crf_list": list(cfg.crf_list),
            "backend": backend_name,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _atomic_write_json(path: Path, obj: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, path)


def _safe_stem(clip_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", clip_id)


def label_corpus(
    manifest: CorpusManifest,
    opt_cfg: OptConfig,
    backend: EncoderBackend,
    jobs: int = 1,
    progress: Callable[[str, ClipLabel | None], None] | None = None,
) -> LabelRun:
    """Optimize k for every clip, resuming from the manifest's storage root.

    The manifest's crf_list overrides the one in opt_cfg so labels and
    anchors always share a grid. Per-clip failures are recorded and the run
    continues; `failures` lists them. Results keep manifest order.
    """
    cfg = replace(opt_cfg, crf_list=manifest.crf_list)
    store = None
    if manifest.storage_root is not None:
        store = manifest.storage_root / "labels"
        store.mkdir(parents=True, exist_ok=True)

    resumed = [0]
    encodes = [0]

    def label_one(clip: ClipRef) -> tuple[ClipLabel | None, str | None]:
        key = _config_key(clip, cfg, backend.name)
        path = store / f"{_safe_stem(clip.id)}_{key}.json" if store else None
        if path is not None and path.exists():
            try:
                obj = json.loads(path.read_text())
                if obj.get("config_key") == key:
                    resumed[0] += 1
                    label = ClipLabel(
                        clip_id=obj["clip_id"],
                        k_opt=obj["k_opt"],
                        bd_rate_at_k_opt=obj["bd_rate_at_k_opt"],
                        iterations=obj["iterations"],
                        encodes_used=obj["encodes_used"],
                    )
                    if progress:
                        progress(clip.id, label)
                    return label, None
            except (ValueError, KeyError):
                pass  # stale or corrupt entry: recompute below
        try:
            res = optimize_k(clip, cfg, backend)
        except BudgetExceeded as exc:
            return None, f"budget exceeded: {exc}"
        except (BDMetricError, RuntimeError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"
        encodes[0] += res.encodes_used
        label = ClipLabel.from_opt_result(res)
        if path is not None:
            record = label.to_json()
            record["config_key"] = key
            record["trace"] = [[k, bd] for k, bd in res.trace]
            _atomic_write_json(path, record)
        if progress:
            progress(clip.id, label)
        return label, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(label_one, manifest.clips))
    else:
        results = [label_one(c) for c in manifest.clips]

    labels = []
    failures = []
    for clip, (label, err) in zip(manifest.clips, results):
        if label is not None:
            labels.append(label)
        else:
            failures.append((clip.id, err))
    return LabelRun(
        labels=tuple(labels),
        failures=tuple(failures),
        encodes_used=encodes[0],
        resumed=resumed[0],
    )


def split_corpus(
    items: Sequence[T], fraction: float = 0.7, seed: int = 0
) -> tuple[list[T], list[T]]:
    """Deterministic shuffled split; both sides must end up non-empty."""
    n = len(items)
    if n < 2:
        raise TooFew(f"need at least 2 items to split, got {n}")
    n_train = round(n * fraction)
    if not 1 <= n_train <= n - 1:
        raise InvalidFraction(
            f"fraction {fraction} leaves an empty side for {n} items"
        )
    order = np.random.default_rng(seed).permutation(n)
    train = [items[i] for i in order[:n_train]]
    test = [items[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# k sources for the two-pass evaluation

class FixedK:
    """The same lambda scale for every clip (the global-k baseline)."""

    def __init__(self, k: float):
        if not k > 0:
            raise ValueError(f"fixed k must be positive, got {k}")
        self.k = float(k)
        self.description = f"fixed:{self.k:g}"

    def k_for(self, clip: ClipRef, backend: EncoderBackend) -> tuple[float, int]:
        return self.k, 0


class OracleK:
    """Per-clip k from a mapping of direct-optimization labels."""

    def __init__(self, labels: Mapping[str, float] | Sequence[ClipLabel]):
        if not isinstance(labels, Mapping):
            labels = {lb.clip_id: lb.k_opt for lb in labels}
        self.labels = dict(labels)
        self.description = "oracle"

    def k_for(self, clip: ClipRef, backend: EncoderBackend) -> tuple[float, int]:
        if clip.id not in self.labels:
            raise MissingLabel(f"no label for clip {clip.id}")
        return float(self.labels[clip.id]), 0


class ModelK:
    """k predicted by a trained network from a CRF-33 probe encode."""

    def __init__(
        self,
        model: MLPModel,
        feature_crf: int = FEATURE_CRF,
        semantics: Mapping[str, SemanticFeatures] | None = None,
    ):
        self.model = model
        self.feature_crf = feature_crf
        self.semantics = semantics or {}
        self.description = "model"

    def k_for(self, clip: ClipRef, backend: EncoderBackend) -> tuple[float, int]:
        result = backend.encode(clip, self.feature_crf, 1.0)
        semantic = self.semantics.get(clip.id)
        return predict_k(self.model, result.stats, semantic), 1


def parse_k_source(
    spec: str,
    labels: Sequence[ClipLabel] | None = None,
    semantics: Mapping[str, SemanticFeatures] | None = None,
):
    """CLI k-source forms: "fixed:<value>", "model:<path>", "oracle"."""
    if spec.startswith("fixed:"):
        return FixedK(float(spec.split(":", 1)[1]))
    if spec.startswith("model:"):
        return ModelK(load_model(spec.split(":", 1)[1]), semantics=semantics)
    if spec == "oracle":
        if labels is None:
            raise CorpusError("oracle k-source needs labels")
        return OracleK(labels)
    raise CorpusError(f"unknown k-source {spec!r}")


# ---------------------------------------------------------------------------
# Two-pass evaluation and summaries

@dataclass(frozen=True)
class ClipOutcome:
    clip_id: str
    k_used: float
    bd_gain: float  # -bd_rate of the re-run vs the anchor; positive = saving
    final_gain: float  # two-pass floor: max(0, bd_gain)
    encodes_used: int

    def __post_init__(self):
        if self.final_gain != max(0.0, self.bd_gain):
            raise CorpusError("final_gain must equal max(0, bd_gain)")

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "k_used": self.k_used,
            "bd_gain": self.bd_gain,
            "final_gain": self.final_gain,
            "encodes_used": self.encodes_used,
        }


@dataclass(frozen=True)
class SummaryStats:
    pct_gain_ge_0: float
    pct_gain_gt_0p1: float
    pct_gain_gt_1: float
    best_gain: float
    avg_final_gain: float
    n_clips: int

    def __post_init__(self):
        if not (
            self.pct_gain_ge_0 >= self.pct_gain_gt_0p1 >= self.pct_gain_gt_1
        ):
            raise CorpusError("gain-threshold percentages must be nested")
        if self.best_gain >= 0 and self.best_gain < self.avg_final_gain - 1e-12:
            raise CorpusError("best_gain cannot fall below avg_final_gain")

    def to_json(self) -> dict:
        return {
            "pct_gain_ge_0": self.pct_gain_ge_0,
            "pct_gain_gt_0p1": self.pct_gain_gt_0p1,
            "pct_gain_gt_1": self.pct_gain_gt_1,
            "best_gain": self.best_gain,
            "avg_final_gain": self.avg_final_gain,
            "n_clips": self.n_clips,
        }


@dataclass(frozen=True)
class EvaluationRun:
    outcomes: tuple[ClipOutcome, ...]
    summary: "SummaryStats"
    k_source: str
    two_pass_encodes: int  # exactly 10 per clip
    feature_encodes: int  # model probes, budgeted separately
    metadata: dict = field(default_factory=dict, compare=False)


def evaluate_two_pass(
    clips: Sequence[ClipRef],
    k_source,
    backend: EncoderBackend,
    crf_list: Sequence[int] = DEFAULT_CRF_LIST,
) -> EvaluationRun:
    """Anchor at k=1, re-run at the chosen k, keep the better encode.

    Exactly 10 encodes per clip (two 5-point curves); a model k-source's
    probe encode is tallied in feature_encodes, not in the outcomes.
    """
    if not clips:
        raise EmptyOutcomes("no clips to evaluate")
    crfs = tuple(crf_list)
    outcomes = []
    feature_encodes = 0
    for clip in clips:
        k, probes = k_source.k_for(clip, backend)
        feature_encodes += probes
        anchor = backend.rd_curve(clip, crfs, k=1.0)
        rerun = backend.rd_curve(clip, crfs, k=k)
        bd = bd_rate_pct(CurveFit(anchor), CurveFit(rerun))
        gain = -bd
        outcomes.append(
            ClipOutcome(
                clip_id=clip.id,
                k_used=k,
                bd_gain=gain,
                final_gain=max(0.0, gain),
                encodes_used=2 * len(crfs),
            )
        )
    return EvaluationRun(
        outcomes=tuple(outcomes),
        summary=summarize(outcomes),
        k_source=k_source.description,
        two_pass_encodes=sum(o.encodes_used for o in outcomes),
        feature_encodes=feature_encodes,
        metadata={"crf_list": crfs, "backend": backend.name},
    )


def summarize(outcomes: Sequence[ClipOutcome]) -> SummaryStats:
    """Gain-threshold percentages, best gain, and the floored average gain."""
    if not outcomes:
        raise EmptyOutcomes("no outcomes to summarize")
    gains = np.array([o.bd_gain for o in outcomes], dtype=np.float64)
    finals = np.array([o.final_gain for o in outcomes], dtype=np.float64)
    n = len(outcomes)
    return SummaryStats(
        pct_gain_ge_0=100.0 * float(np.count_nonzero(gains >= 0.0)) / n,
        pct_gain_gt_0p1=100.0 * float(np.count_nonzero(gains > 0.1)) / n,
        pct_gain_gt_1=100.0 * float(np.count_nonzero(gains > 1.0)) / n,
        best_gain=float(gains.max()),
        avg_final_gain=float(finals.mean()),
        n_clips=n,
    )


# ---------------------------------------------------------------------------
# Figure data

def emit_figures(
    outdir: str | Path,
    outcomes: Sequence[ClipOutcome] | None = None,
    sweeps: Sequence[Sequence[tuple[float, float]]] | None = None,
    k_values: Sequence[float] | None = None,
) -> dict[str, Path]:
    """Write whichever figure CSVs the inputs support; returns name -> path.

    cdf.csv needs outcomes, k_avg.csv needs per-clip sweeps on a shared
    grid, k_hist.csv needs k values (labels or predictions).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    if outcomes:
        path = outdir / "cdf.csv"
        gains = np.sort(np.array([o.bd_gain for o in outcomes], dtype=np.float64))
        n = gains.size
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gain_pct", "fraction_of_corpus_ge"])
            for g in np.unique(gains):
                frac = float(np.count_nonzero(gains >= g)) / n
                w.writerow([repr(float(g)), repr(frac)])
        written["cdf"] = path

    if sweeps:
        grids = [tuple(k for k, _ in sweep) for sweep in sweeps]
        if any(g != grids[0] for g in grids):
            raise CorpusError("sweeps must share one k grid to be averaged")
        values = np.array([[bd for _, bd in sweep] for sweep in sweeps])
        path = outdir / "k_avg.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "mean_bd_rate_pct"])
            for k, mean_bd in zip(grids[0], values.mean(axis=0)):
                w.writerow([repr(float(k)), repr(float(mean_bd))])
        written["k_avg"] = path

    if k_values is not None and len(k_values) > 0:
        counts, edges = np.histogram(np.asarray(k_values, dtype=np.float64), bins=K_HIST_EDGES)
        path = outdir / "k_hist.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        written["k_hist"] = path

    if not written:
        raise EmptyInput("nothing to emit: no outcomes, sweeps, or k values")
    return written


# ---------------------------------------------------------------------------
# Result files

def write_outcomes_jsonl(outcomes: Sequence[ClipOutcome], path: str | Path) -> None:
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_json(), sort_keys=True) + "\n")


def read_outcomes_jsonl(path: str | Path) -> list[ClipOutcome]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(
                    ClipOutcome(
                        clip_id=obj["clip_id"],
                        k_used=obj["k_used"],
                        bd_gain=obj["bd_gain"],
                        final_gain=obj["final_gain"],
                        encodes_used=obj["encodes_used"],
                    )
                )
    return out


def write_labels_csv(labels: Sequence[ClipLabel], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "k_opt", "bd_rate_at_k_opt", "iterations", "encodes_used"])
        for lb in labels:
            w.writerow(
                [lb.clip_id, repr(lb.k_opt), repr(lb.bd_rate_at_k_opt), lb.iterations, lb.encodes_used]
            )


def read_labels_csv(path: str | Path) -> list[ClipLabel]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise EmptyInput(f"{path}: no labels")
    out = []
    for row in rows[1:]:
        if row:
            out.append(
                ClipLabel(
                    clip_id=row[0],
                    k_opt=float(row[1]),
                    bd_rate_at_k_opt=float(row[2]),
                    iterations=int(row[3]),
                    encodes_used=int(row[4]),
                )
            )
    return out
