"""Command-line front end.

One subcommand per pipeline stage: lambda/bdrate/encode for the primitives,
sweep/optimize/label for direct search, features/train/predict for the
k-estimation network, evaluate/report for the two-pass deployment check,
selftest for a quick installation sanity run.

Exit codes: 0 on success, 1 on validation failures (bad inputs, bad file
contents), 2 on unknown commands or bad usage. Numeric stdout uses 9
significant digits.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backends import (
    BackendError,
    EncoderBackend,
    ExternalEncoder,
    SyntheticEncoder,
    resolve_clip,
    synthetic_corpus,
    write_manifest,
)
from .bd_metrics import BDMetricError, bd_rate, read_curve_csv
from .config import ConfigError, RunMetadata, effective_config, load_config
from .corpus import (
    CorpusError,
    CorpusManifest,
    evaluate_two_pass,
    emit_figures,
    label_corpus,
    parse_k_source,
    read_labels_csv,
    read_outcomes_jsonl,
    split_corpus,
    summarize,
    write_labels_csv,
    write_outcomes_jsonl,
)
from .features import (
    NO_SEMANTIC_LEN,
    FeatureError,
    assemble_features,
    read_features_csv,
    read_semantic_csv,
    read_stats_csv,
    write_features_csv,
    write_stats_csv,
)
from .lambda_model import FRAME_TYPES, LambdaSpec, scaled_lambda
from .mlp import (
    MLPError,
    MLPModel,
    TrainConfig,
    gradient_check,
    load_model,
    predict_k,
    save_model,
    train,
)
from .optimizer import OptConfig, OptimizerError, optimize_k, parse_grid, sweep_k

USER_ERRORS = (
    BackendError,
    BDMetricError,
    ConfigError,
    CorpusError,
    FeatureError,
    MLPError,
    OptimizerError,
    ValueError,
    OSError,
)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _cfg(args: argparse.Namespace, *keys: str) -> dict:
    """Effective config for this invocation: flags > config file > defaults."""
    file_cfg = load_config(args.config) if getattr(args, "config", None) else None
    flags = {k: getattr(args, k, None) for k in keys}
    return effective_config(file_cfg, flags)


def _crf_list(cfg: dict) -> tuple[int, ...]:
    value = cfg["crf_list"]
    if isinstance(value, str):
        value = value.split(",")
    crfs = tuple(int(v) for v in value)
    if len(crfs) < 4:
        raise ConfigError(f"need at least 4 CRF points, got {list(crfs)}")
    return crfs


def _backend(cfg: dict) -> EncoderBackend:
    if cfg["backend"] == "synthetic":
        return SyntheticEncoder()
    if cfg["backend"] == "external":
        if not cfg["encoder_cmd"]:
            raise ConfigError("external backend needs encoder_cmd")
        return ExternalEncoder(cfg["encoder_cmd"])
    raise ConfigError(f"unknown backend {cfg['backend']!r}")


def _write_meta(args, command: str, cfg: dict, **extra) -> None:
    if getattr(args, "meta", None):
        meta = RunMetadata(command=command, config=cfg, **extra)
        meta.write(args.meta)


# ---------------------------------------------------------------------------
# handlers

def cmd_lambda(args) -> int:
    value = scaled_lambda(LambdaSpec(q=args.q, frame_type=args.type, k=args.k))
    print(_fmt(value))
    return 0


def cmd_bdrate(args) -> int:
    anchor = read_curve_csv(args.anchor)
    test = read_curve_csv(args.test)
    res = bd_rate(anchor, test)
    if args.json:
        print(json.dumps(res.to_json(), sort_keys=True))
    else:
        print(_fmt(res.bd_rate))
    return 0


def cmd_encode(args) -> int:
    cfg = _cfg(args, "backend", "encoder_cmd")
    backend = _backend(cfg)
    result = backend.encode(resolve_clip(args.clip), args.crf, args.k)
    print(f"rate_kbps {_fmt(result.point.rate)}")
    print(f"psnr_db {_fmt(result.point.quality)}")
    if args.stats:
        write_stats_csv(result.stats, args.stats)
        print(f"stats {args.stats}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _cfg(args, "backend", "encoder_cmd", "crf_list", "grid")
    backend = _backend(cfg)
    clip = resolve_clip(args.clip)
    grid = parse_grid(cfg["grid"])
    trace = sweep_k(clip, grid, backend, _crf_list(cfg))
    best_k, best_bd = min(trace, key=lambda t: (t[1], t[0]))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("k,bd_rate_pct\n")
            for k, bd in trace:
                fh.write(f"{repr(k)},{repr(bd)}\n")
        print(f"sweep {args.out}")
    print(f"best_k {_fmt(best_k)}")
    print(f"best_bd_rate_pct {_fmt(best_bd)}")
    _write_meta(args, "sweep", cfg, encodes={"total": backend.encodes})
    return 0


def cmd_optimize(args) -> int:
    cfg = _cfg(
        args, "backend", "encoder_cmd", "crf_list", "k_min", "k_max", "tol", "max_iters"
    )
    backend = _backend(cfg)
    clip = resolve_clip(args.clip)
    opt_cfg = OptConfig(
        k_min=cfg["k_min"],
        k_max=cfg["k_max"],
        tol=cfg["tol"],
        max_iters=cfg["max_iters"],
        crf_list=_crf_list(cfg),
    )
    res = optimize_k(clip, opt_cfg, backend)
    print(f"k_opt {_fmt(res.k_opt)}")
    print(f"bd_rate_pct {_fmt(res.bd_rate_at_k_opt)}")
    print(f"encodes {res.encodes_used}")
    _write_meta(args, "optimize", cfg, encodes={"total": backend.encodes})
    return 0


def cmd_features(args) -> int:
    cfg = _cfg(args, "stats_format")
    stats = read_stats_csv(args.stats, fmt=cfg["stats_format"])
    clip_id = args.clip_id or Path(args.stats).stem
    semantic = None
    if args.semantic:
        table = read_semantic_csv(args.semantic)
        if clip_id not in table:
            raise ConfigError(f"no semantic row for clip {clip_id!r}")
        semantic = table[clip_id]
    vec = assemble_features(stats, semantic)
    write_features_csv([(clip_id, vec)], args.out, append=args.append)
    print(f"features {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(
        args,
        "epochs",
        "learning_rate",
        "momentum",
        "batch_size",
        "seed",
        "target_train_mae",
    )
    labels = {lb.clip_id: lb.k_opt for lb in read_labels_csv(args.labels)}
    rows = read_features_csv(args.features)
    matched = [(cid, vec) for cid, vec in rows if cid in labels]
    if not matched:
        raise ConfigError("no overlap between labels and features")
    full = np.stack([vec for _, vec in matched])
    semantics_used = bool(np.any(full[:, NO_SEMANTIC_LEN:] != 0.0))
    x = full if semantics_used else full[:, :NO_SEMANTIC_LEN]
    y = np.array([labels[cid] for cid, _ in matched])
    model = MLPModel(input_dim=x.shape[1], seed=cfg["seed"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch_size"],
        rng_seed=cfg["seed"],
        target_train_mae=cfg["target_train_mae"],
    )
    model, report = train(x, y, train_cfg, model=model, semantics_used=semantics_used)
    save_model(model, args.out)
    print(f"model {args.out}")
    print(f"clips {len(matched)}")
    print(f"epochs_run {report.epochs_run}")
    print(f"final_train_mae {_fmt(report.final_train_mae)}")
    _write_meta(args, "train", cfg, seeds={"seed": cfg["seed"]})
    return 0


def cmd_predict(args) -> int:
    cfg = _cfg(args, "stats_format")
    model = load_model(args.model)
    stats = read_stats_csv(args.stats, fmt=cfg["stats_format"])
    semantic = None
    if args.semantic:
        table = read_semantic_csv(args.semantic)
        clip_id = args.clip_id or Path(args.stats).stem
        if clip_id not in table:
            raise ConfigError(f"no semantic row for clip {clip_id!r}")
        semantic = table[clip_id]
    print(_fmt(predict_k(model, stats, semantic)))
    return 0


def cmd_label(args) -> int:
    cfg = _cfg(
        args,
        "backend",
        "encoder_cmd",
        "crf_list",
        "k_min",
        "k_max",
        "tol",
        "max_iters",
        "jobs",
    )
    backend = _backend(cfg)
    manifest = CorpusManifest.from_file(
        args.manifest,
        backend=cfg["backend"],
        crf_list=_crf_list(cfg),
        storage_root=args.store,
    )
    opt_cfg = OptConfig(
        k_min=cfg["k_min"],
        k_max=cfg["k_max"],
        tol=cfg["tol"],
        max_iters=cfg["max_iters"],
        crf_list=_crf_list(cfg),
    )
    jobs = cfg["jobs"] or os.cpu_count() or 1
    run = label_corpus(manifest, opt_cfg, backend, jobs=jobs)
    write_labels_csv(run.labels, args.out)
    print(f"labels {args.out}")
    print(f"labeled {len(run.labels)}")
    print(f"failed {len(run.failures)}")
    print(f"resumed {run.resumed}")
    print(f"encodes {run.encodes_used}")
    for clip_id, err in run.failures:
        print(f"failure {clip_id}: {err}", file=sys.stderr)
    _write_meta(args, "label", cfg, encodes={"label": run.encodes_used})
    return 0 if run.labels else 1


def cmd_split(args) -> int:
    cfg = _cfg(args, "fraction", "seed")
    labels = read_labels_csv(args.labels)
    train_side, test_side = split_corpus(labels, cfg["fraction"], cfg["seed"])
    write_labels_csv(train_side, args.train_out)
    write_labels_csv(test_side, args.test_out)
    print(f"train {len(train_side)} {args.train_out}")
    print(f"test {len(test_side)} {args.test_out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _cfg(args, "backend", "encoder_cmd", "crf_list")
    backend = _backend(cfg)
    manifest = CorpusManifest.from_file(
        args.manifest, backend=cfg["backend"], crf_list=_crf_list(cfg)
    )
    labels = read_labels_csv(args.labels) if args.labels else None
    semantics = read_semantic_csv(args.semantic) if args.semantic else None
    source = parse_k_source(args.k_source, labels=labels, semantics=semantics)
    run = evaluate_two_pass(manifest.clips, source, backend, _crf_list(cfg))
    if args.out:
        write_outcomes_jsonl(run.outcomes, args.out)
        print(f"outcomes {args.out}")
    print(json.dumps(run.summary.to_json(), indent=2, sort_keys=True))
    _write_meta(
        args,
        "evaluate",
        cfg,
        encodes={"two_pass": run.two_pass_encodes, "feature": run.feature_encodes},
        notes={"k_source": run.k_source},
    )
    return 0


def cmd_report(args) -> int:
    outcomes = read_outcomes_jsonl(args.outcomes)
    summary = summarize(outcomes)
    k_values = [o.k_used for o in outcomes]
    if args.labels:
        k_values = [lb.k_opt for lb in read_labels_csv(args.labels)]
    written = emit_figures(args.outdir, outcomes=outcomes, k_values=k_values)
    print(json.dumps(summary.to_json(), indent=2, sort_keys=True))
    for name in sorted(written):
        print(f"figure {name} {written[name]}")
    return 0


def cmd_synth(args) -> int:
    clips = synthetic_corpus(args.n, seed=args.seed)
    write_manifest(clips, args.out)
    print(f"manifest {args.out}")
    print(f"clips {len(clips)}")
    return 0


def cmd_selftest(args) -> int:
    failures = 0

    def check(name: str, fn) -> None:
        nonlocal failures
        try:
            fn()
        except Exception as exc:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")

    def lambda_table():
        cases = [
            (12, "I", 1.0, 0.57),
            (12, "P", 1.0, 0.85),
            (12, "B", 1.0, 0.68 * 2.0),
            (30, "B", 1.0, 130.56),
            (12, "P", 2.0, 1.70),
        ]
        for q, ft, k, want in cases:
            got = scaled_lambda(LambdaSpec(q=q, frame_type=ft, k=k))
            if abs(got - want) > 1e-12 * max(1.0, abs(want)):
                raise AssertionError(f"lambda({q},{ft},k={k}) = {got}, want {want}")

    def bd_identity():
        from .bd_metrics import RDCurve, RDPoint

        rng = np.random.default_rng(20240917)
        for _ in range(20):
            n = int(rng.integers(4, 8))
            rates = np.sort(rng.uniform(300, 20000, n))
            psnrs = np.sort(rng.uniform(28, 46, n))
            curve = RDCurve(tuple(RDPoint(r, q) for r, q in zip(rates, psnrs)))
            doubled = RDCurve(tuple(RDPoint(2 * r, q) for r, q in zip(rates, psnrs)))
            same = bd_rate(curve, curve).bd_rate
            if abs(same) > 1e-12:
                raise AssertionError(f"identity bd-rate {same}")
            up = bd_rate(curve, doubled).bd_rate
            if abs(up - 100.0) > 1e-6:
                raise AssertionError(f"doubling bd-rate {up}")

    def gradients():
        rng = np.random.default_rng(11)
        model = MLPModel(
            input_dim=6, sizes=(8, 4, 1), bn_layers=(1,), dropout_layers=(2,), seed=3
        )
        x = rng.normal(size=(12, 6))
        y = rng.normal(size=12)
        worst = gradient_check(model, x, y, rng=rng)
        if not worst < 1e-5:
            raise AssertionError(f"gradient mismatch {worst}")

    check("lambda-table", lambda_table)
    check("bd-identity", bd_identity)
    check("gradient-check", gradients)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lambdatune",
        description="Per-clip lambda scaling for rate-distortion optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=handler)
        p.add_argument("--config", help="TOML config file (flags win per key)")
        return p

    p = add("lambda", cmd_lambda, "print the scaled lambda for a QP and frame type")
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--type", choices=FRAME_TYPES, required=True)
    p.add_argument("--k", type=float, default=1.0)

    p = add("bdrate", cmd_bdrate, "BD-rate of a test curve against an anchor")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--json", action="store_true", help="full result as JSON")

    p = add("encode", cmd_encode, "run one encode and print its RD point")
    p.add_argument("--clip", required=True)
    p.add_argument("--crf", type=float, required=True)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--stats", help="write the per-frame stats log here")
    p.add_argument("--backend", choices=["synthetic", "external"])
    p.add_argument("--encoder-cmd", dest="encoder_cmd")

    p = add("sweep", cmd_sweep, "BD-rate over an explicit k grid")
    p.add_argument("--clip", required=True)
    p.add_argument("--grid", help="start:step:stop, default 0.2:0.05:3.0")
    p.add_argument("--out", help="write k,bd_rate_pct rows here")
    p.add_argument("--crf-list", dest="crf_list")
    p.add_argument("--backend", choices=["synthetic", "external"])
    p.add_argument("--encoder-cmd", dest="encoder_cmd")
    p.add_argument("--meta", help="write run metadata JSON here")

    p = add("optimize", cmd_optimize, "search the BD-rate-minimizing k for a clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--tol", type=float)
    p.add_argument("--k-min", dest="k_min", type=float)
    p.add_argument("--k-max", dest="k_max", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--crf-list", dest="crf_list")
    p.add_argument("--backend", choices=["synthetic", "external"])
    p.add_argument("--encoder-cmd", dest="encoder_cmd")
    p.add_argument("--meta", help="write run metadata JSON here")

    p = add("features", cmd_features, "turn a stats log into a feature vector")
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-id", dest="clip_id")
    p.add_argument("--semantic", help="semantic feature CSV keyed by clip id")
    p.add_argument("--format", dest="stats_format", choices=["canonical", "x265-adapter"])
    p.add_argument("--append", action="store_true", help="add to an existing feature CSV")

    p = add("train", cmd_train, "fit the k-estimation network")
    p.add_argument("--labels", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--target-train-mae", dest="target_train_mae", type=float)
    p.add_argument("--meta", help="write run metadata JSON here")

    p = add("predict", cmd_predict, "predict k from a stats log")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--semantic")
    p.add_argument("--clip-id", dest="clip_id")
    p.add_argument("--format", dest="stats_format", choices=["canonical", "x265-adapter"])

    p = add("label", cmd_label, "optimize k for every clip in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--store", help="resume store for per-clip results")
    p.add_argument("--jobs", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--k-min", dest="k_min", type=float)
    p.add_argument("--k-max", dest="k_max", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--crf-list", dest="crf_list")
    p.add_argument("--backend", choices=["synthetic", "external"])
    p.add_argument("--encoder-cmd", dest="encoder_cmd")
    p.add_argument("--meta", help="write run metadata JSON here")

    p = add("split", cmd_split, "deterministic train/test split of a label file")
    p.add_argument("--labels", required=True)
    p.add_argument("--train-out", dest="train_out", required=True)
    p.add_argument("--test-out", dest="test_out", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)

    p = add("evaluate", cmd_evaluate, "two-pass evaluation of a k source")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--k-source",
        dest="k_source",
        required=True,
        help='"fixed:<value>", "model:<path>", or "oracle"',
    )
    p.add_argument("--labels", help="label CSV (required for the oracle source)")
    p.add_argument("--semantic", help="semantic CSV for the model source")
    p.add_argument("--out", help="write per-clip outcomes JSONL here")
    p.add_argument("--crf-list", dest="crf_list")
    p.add_argument("--backend", choices=["synthetic", "external"])
    p.add_argument("--encoder-cmd", dest="encoder_cmd")
    p.add_argument("--meta", help="write run metadata JSON here")

    p = add("report", cmd_report, "summary stats and figure CSVs from outcomes")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--labels", help="use labeled k values for the histogram")

    p = add("synth", cmd_synth, "write a seeded synthetic corpus manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    add("selftest", cmd_selftest, "run the built-in sanity suites")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
