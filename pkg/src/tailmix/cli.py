"""Command-line entry point: ``tailmix {gen,fit,train,eval,sweep,project}``.

Every command writes into a run directory (``--out``, or
``runs/<cmd>-<timestamp>-s<seed>``) and finishes with ``manifest.json``
listing resolved flags, input and output hashes, and wall-clock duration.
Errors print one line ``error=<CODE> <message>`` on stderr and exit with
2 (usage/validation), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import ExitStack
from dataclasses import asdict
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetFiles, SynthConfig, class_prototypes, generate_synthetic_longtail
from .errors import DataError, NumericError, TailmixError, ValidationError
from .evaluate import SYNTHETIC_THRESHOLDS, bin_classes_by_frequency, macro_auc_report, pca_2d_projection, zero_shot_scores
from .mixture import MixtureConfig, gmm_em_fit, t_mixture_refine
from .trainer import (
    TrainConfig,
    TrainState,
    head_forward,
    load_checkpoint,
    prepare_training_data,
    save_checkpoint,
    train,
)

logger = logging.getLogger("tailmix")

CHECKPOINT = "checkpoint.json"
RUN_ARGS = "run_args.json"
LOSS_FLAGS = {"clip": "contrastive_only", "combined": "combined"}


class UsageError(ValidationError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _thresholds(text):
    vals = _csv_ints(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"need two ordered thresholds LOW,HIGH, got {text!r}")
    return tuple(vals)


def thread_limit():
    """Worker-thread cap from ``HTM_THREADS`` (``None`` means all logical cores)."""
    raw = os.environ.get("HTM_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ValidationError(f"HTM_THREADS must be a positive integer, got {raw!r}")
    return n


def run_dir(args) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{args.command}-{stamp}-s{args.seed}"
        base, k = out, 1
        while out.exists():
            out = base.with_name(f"{base.name}-{k}")
            k += 1
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, config: dict, inputs, started: float) -> dict:
    outputs = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp")
    }
    manifest = {
        "command": args.command,
        "version": __version__,
        "argv": list(args.argv),
        "config": config,
        "seed": args.seed,
        "threads": thread_limit(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": outputs,
        "duration_s": round(time.monotonic() - started, 3),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, default=str)
        fh.write("\n")
    return manifest


def _load_dataset(path):
    files = DatasetFiles(path)
    for p in (files.labels, files.vocabulary, files.embeddings, files.ids):
        if not p.exists():
            raise DataError(f"missing dataset file {p}")
    dataset, embeddings = files.load()
    return files, dataset, embeddings


def _dataset_inputs(files):
    return [files.labels, files.vocabulary, files.embeddings, files.ids]


def _fmt(x):
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    started = time.monotonic()
    cfg = SynthConfig(
        n_classes=args.n_classes,
        d=args.d,
        tier_classes=tuple(args.tier_classes),
        tier_samples=tuple(args.tier_samples),
        co_occurrence=args.co_occurrence,
        min_angle=args.min_angle,
        noise=args.noise,
        heavy_tail=args.heavy_tail,
        noise_dof=args.noise_dof,
        seed=args.seed,
    )
    syn = generate_synthetic_longtail(cfg)
    out = run_dir(args)
    DatasetFiles(out).save(syn.dataset, syn.embeddings)
    np.save(out / "directions.npy", syn.directions)
    write_manifest(out, args, cfg.to_dict(), [], started)
    print(out)
    return 0


def _write_trace(path, stages):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "iter", "loglik"])
        for stage, trace in stages:
            for it, ll in enumerate(trace.loglik):
                w.writerow([stage, it, repr(float(ll))])


def cmd_fit(args) -> int:
    started = time.monotonic()
    files, dataset, embeddings = _load_dataset(args.data)
    rows = dataset.indices(args.split) if args.split != "all" else np.arange(len(dataset))
    X = embeddings.aligned_to([dataset.ids[i] for i in rows])
    if args.normalize:
        X /= np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
    mcfg = MixtureConfig(covariance_type=args.covariance, tol=args.tol, max_iter=args.max_iter)
    model, gmm_trace = gmm_em_fit(X, args.k, args.seed, mcfg)
    stages = [("gmm", gmm_trace)]
    if not args.no_refine:
        model, t_trace = t_mixture_refine(X, model, args.nu, mcfg)
        stages.append(("t", t_trace))
    out = run_dir(args)
    model.save(out / "model.json")
    _write_trace(out / "trace.csv", stages)
    summary = {
        stage: {"n_iter": t.n_iter, "converged": t.converged, "gap": t.gap, "rescued": t.rescued,
                "final_loglik": t.loglik[-1]}
        for stage, t in stages
    }
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    config = {"k": args.k, "nu": None if args.no_refine else args.nu, "split": args.split,
              "normalize": args.normalize, "mixture": asdict(mcfg)}
    write_manifest(out, args, config, _dataset_inputs(files), started)
    print(out)
    return 0


def _train_config(args, **overrides) -> TrainConfig:
    base = dict(
        batch_size=args.bs,
        lr=args.lr,
        epochs=args.epochs,
        margin=args.margin,
        dof=args.nu,
        n_components=args.k,
        seed=args.seed,
        loss_mode=LOSS_FLAGS[args.loss],
        refine="gmm_only" if args.no_refine else "t_refine",
        refit_every=args.refit_every,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _read_batches(path, keep_epochs):
    if not path.exists():
        return []
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    # rows of unfinished epochs may be cut short by a kill; only whole rows of saved epochs survive
    return [r for r in rows[1:] if len(r) == 5 and r[0].isdigit() and int(r[0]) < keep_epochs]


def _run_training(out: Path, data, config: TrainConfig, state=None, reports=None):
    """Train with per-epoch checkpoints, ``epochs.jsonl`` and ``batches.csv``."""
    done = 0 if state is None else state.epoch
    kept = _read_batches(out / "batches.csv", done)
    with open(out / "batches.csv", "w", encoding="utf-8", newline="") as bfh:
        bw = csv.writer(bfh, lineterminator="\n")
        bw.writerow(["epoch", "batch", "loss", "contrastive", "triplet"])
        bw.writerows(kept)
        bfh.flush()

        def on_batch(epoch, batch, total, lc, lm):
            bw.writerow([epoch, batch, repr(float(total)), repr(float(lc)), repr(float(lm))])

        def on_epoch(st, reps):
            bfh.flush()
            with open(out / "epochs.jsonl", "w", encoding="utf-8") as efh:
                for r in reps:
                    efh.write(json.dumps(r.to_dict()) + "\n")
            save_checkpoint(out / CHECKPOINT, st, config, reps)
            r = reps[-1]
            print(f"epoch {r.epoch} loss {r.loss:.4f} auc total {r.auc_total} rare {r.auc_rare} lr {r.lr:.3g}",
                  flush=True)

        if reports:
            on_epoch(state, reports)
        return train(data, config, state, reports, on_epoch=on_epoch, on_batch=on_batch)


def cmd_train(args) -> int:
    started = time.monotonic()
    if args.resume is not None:
        out = Path(args.resume)
        with open(out / RUN_ARGS, encoding="utf-8") as fh:
            saved = json.load(fh)
        state, config, reports = load_checkpoint(out / CHECKPOINT)
        if args.epochs_given:
            config = TrainConfig(**{**config.to_dict(), "epochs": args.epochs})
        data_path, thresholds = saved["data"], tuple(saved["thresholds"])
        args.seed = config.seed
    else:
        config = _train_config(args)
        out = run_dir(args)
        data_path, thresholds = args.data, args.thresholds
        state, reports = None, None
        with open(out / RUN_ARGS, "w", encoding="utf-8") as fh:
            json.dump({"data": str(data_path), "thresholds": list(thresholds)}, fh, indent=1)
            fh.write("\n")
    files, dataset, embeddings = _load_dataset(data_path)
    groups = bin_classes_by_frequency(dataset.counts(), thresholds)
    data = prepare_training_data(dataset, embeddings, groups, config)
    state, reports = _run_training(out, data, config, state, reports)
    doc = {"train": config.to_dict(), "data": str(data_path), "thresholds": list(thresholds)}
    write_manifest(out, args, doc, _dataset_inputs(files), started)
    print(out)
    return 0


def _state_for(args, d_in):
    if args.checkpoint is None:
        config = TrainConfig(seed=args.seed)
        return TrainState.init(d_in, config), config
    state, config, _ = load_checkpoint(args.checkpoint)
    return state, config


def cmd_eval(args) -> int:
    started = time.monotonic()
    files, dataset, embeddings = _load_dataset(args.data)
    rows = dataset.indices(args.split)
    X = embeddings.aligned_to([dataset.ids[i] for i in rows])
    state, config = _state_for(args, embeddings.dim)
    groups = bin_classes_by_frequency(dataset.counts(), args.thresholds)
    if len(rows):
        Z = head_forward(state.head, X)
        prototypes = class_prototypes(dataset.vocabulary, Z.shape[1], config.text_seed)
        scores = zero_shot_scores(Z, prototypes)
    else:
        scores = np.zeros((0, dataset.n_classes))
    report = macro_auc_report(scores, dataset.label_matrix(rows), groups, dataset.vocabulary, dataset.counts())
    out = run_dir(args)
    extra = {"split": args.split, "thresholds": list(args.thresholds),
             "checkpoint": None if args.checkpoint is None else str(args.checkpoint), "train_config": config.to_dict()}
    report.write_json(out / "report.json", extra)
    report.write_csv(out / "report.csv")
    inputs = _dataset_inputs(files) + ([Path(args.checkpoint)] if args.checkpoint else [])
    write_manifest(out, args, extra, inputs, started)
    print(f"auc total {report.total} base {report.base} rare {report.rare}")
    print(out)
    return 0


SWEEP_FIELDS = ["bs", "nu", "n_seeds", "auc_total", "auc_base", "auc_rare", "error"]


def cmd_sweep(args) -> int:
    started = time.monotonic()
    files, dataset, embeddings = _load_dataset(args.data)
    groups = bin_classes_by_frequency(dataset.counts(), args.thresholds)
    out = run_dir(args)
    seeds = args.seeds if args.seeds is not None else [args.seed]
    data_cache = {}
    rows = []
    with open(out / "cells.jsonl", "w", encoding="utf-8") as cfh:
        for bs in args.bs_grid:
            for nu in args.nu_grid:
                finals, errors = [], []
                for seed in seeds:
                    try:
                        config = _train_config(args, batch_size=bs, dof=nu, seed=seed)
                        key = config.text_seed
                        if key not in data_cache:
                            data_cache[key] = prepare_training_data(dataset, embeddings, groups, config)
                        _, reports = train(data_cache[key], config)
                        final = reports[-1].to_dict()
                        finals.append(final)
                        cfh.write(json.dumps({"bs": bs, "nu": nu, "seed": seed, **final}) + "\n")
                    except (TailmixError, FloatingPointError, np.linalg.LinAlgError) as exc:
                        code = getattr(exc, "code", "E_NUMERIC")
                        errors.append(f"seed {seed}: {code}")
                        cfh.write(json.dumps({"bs": bs, "nu": nu, "seed": seed, "error": code, "message": str(exc)}) + "\n")
                        logger.warning("sweep cell bs=%s nu=%s seed=%s failed: %s", bs, nu, seed, exc)
                    cfh.flush()

                def mean(key):
                    vals = [f[key] for f in finals if f[key] is not None]
                    return float(np.mean(vals)) if vals else None

                rows.append([bs, nu, len(finals), _fmt(mean("auc_total")), _fmt(mean("auc_base")),
                             _fmt(mean("auc_rare")), "; ".join(errors)])
                print(f"bs={bs} nu={nu} total={rows[-1][3]} rare={rows[-1][5]}", flush=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        w.writerows(rows)
    doc = {"train": _train_config(args).to_dict(), "bs_grid": args.bs_grid, "nu_grid": args.nu_grid,
           "seeds": seeds, "thresholds": list(args.thresholds)}
    write_manifest(out, args, doc, _dataset_inputs(files), started)
    print(out)
    return 0


def cmd_project(args) -> int:
    started = time.monotonic()
    files, dataset, embeddings = _load_dataset(args.data)
    rows = dataset.indices(args.split)
    ids = [dataset.ids[i] for i in rows]
    state, config = _state_for(args, embeddings.dim)
    coords = pca_2d_projection(head_forward(state.head, embeddings.aligned_to(ids)), seed=args.seed)
    out = run_dir(args)
    with open(out / "projection.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label_set"])
        for item_id, i, (x, y) in zip(ids, rows, coords):
            w.writerow([item_id, repr(float(x)), repr(float(y)), ";".join(dataset.label_sets[i])])
    inputs = _dataset_inputs(files) + ([Path(args.checkpoint)] if args.checkpoint else [])
    write_manifest(out, args, {"split": args.split, "checkpoint": args.checkpoint}, inputs, started)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, *, grid: bool):
    if not grid:
        p.add_argument("--bs", type=int, default=32, help="batch size")
        p.add_argument("--nu", type=float, default=4.0, help="Student-t degrees of freedom for refinement")
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=sorted(LOSS_FLAGS), default="combined")
    p.add_argument("--refit-every", type=_positive_int, default=1)
    p.add_argument("--epochs", type=_positive_int, default=10)
    p.add_argument("--k", type=_positive_int, default=40, help="mixture components for pseudo-labels")
    p.add_argument("--no-refine", action="store_true", help="GMM pseudo-labels without Student-t refinement")
    p.add_argument("--thresholds", type=_thresholds, default=SYNTHETIC_THRESHOLDS, help="LOW,HIGH tier counts")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tailmix", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"tailmix {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, type=Path, help="dataset directory from `gen`")
        p.add_argument("--out", type=Path, default=None, help="run directory")
        p.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", allow_abbrev=False, help="generate a synthetic long-tailed dataset")
    common(g, data=False)
    g.add_argument("--n-classes", type=_positive_int, default=40)
    g.add_argument("--d", type=_positive_int, default=64)
    g.add_argument("--tier-classes", type=_csv_ints, default=[11, 17, 12])
    g.add_argument("--tier-samples", type=_csv_ints, default=[2000, 300, 40])
    g.add_argument("--co-occurrence", type=float, default=0.1)
    g.add_argument("--min-angle", type=float, default=60.0)
    g.add_argument("--noise", type=float, default=2.0)
    g.add_argument("--heavy-tail", action="store_true")
    g.add_argument("--noise-dof", type=float, default=3.0)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", allow_abbrev=False, help="fit a GMM, optionally refined to a Student-t mixture")
    common(f)
    f.add_argument("--k", type=_positive_int, default=40)
    f.add_argument("--nu", type=float, default=4.0)
    f.add_argument("--no-refine", action="store_true")
    f.add_argument("--covariance", choices=("full", "diag"), default="full")
    f.add_argument("--split", choices=("train", "test", "all"), default="train")
    f.add_argument("--normalize", action="store_true", help="L2-normalize rows before fitting")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=_positive_int, default=200)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("train", allow_abbrev=False, help="train the projection head")
    t.add_argument("--data", type=Path, help="dataset directory from `gen`")
    t.add_argument("--out", type=Path, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", type=Path, default=None, help="continue the run in this directory")
    _add_train_flags(t, grid=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", allow_abbrev=False, help="zero-shot macro AUC report")
    common(e)
    e.add_argument("--checkpoint", type=Path, default=None, help="omit to evaluate the untrained head")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--thresholds", type=_thresholds, default=SYNTHETIC_THRESHOLDS)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", allow_abbrev=False, help="batch size x degrees-of-freedom ablation grid")
    common(s)
    s.add_argument("--bs-grid", type=_csv_ints, default=[16, 32, 64])
    s.add_argument("--nu-grid", type=_csv_floats, default=[2.0, 4.0, 6.0])
    s.add_argument("--seeds", type=_csv_ints, default=None, help="seeds averaged per cell (default: --seed)")
    _add_train_flags(s, grid=True)
    s.set_defaults(func=cmd_sweep, bs=32, nu=4.0)

    p = sub.add_parser("project", allow_abbrev=False, help="2D PCA coordinates of validation embeddings")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        args.epochs_given = any(a == "--epochs" or a.startswith("--epochs=") for a in argv)
        if args.command == "train" and args.resume is None and args.data is None:
            raise UsageError("train needs --data (or --resume)")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        limit = thread_limit()
        with ExitStack() as stack:
            if limit is not None:
                from threadpoolctl import threadpool_limits

                stack.enter_context(threadpool_limits(limits=limit))
            return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except TailmixError as exc:
        _fail(exc.code, exc)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        _fail("E_IO", exc)
        return 3
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        _fail(NumericError.code, exc)
        return 4


def _fail(code, exc):
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error={code} {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
