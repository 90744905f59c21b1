"""Command-line entry point: ``relaff {gen,train,ablate,gradcheck,eval}``.

Every command validates the full configuration before touching data.  A bad
config exits with status 2 and names the offending field; other failures exit 1.
Log verbosity comes from ``RELAFF_LOG`` (``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, apply_overrides, from_dict
from .data import Video, generate_corpus, load_corpus, save_corpus
from .encoder import ConfigError
from .metrics import metrics_report, write_metrics_csv, write_metrics_kv

log = logging.getLogger("relaff")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
RECORD_KIND = "relaff.run_record"


class UsageError(Exception):
    """Operator mistake detected before any compute (exit status 2)."""


def _setup_logging() -> None:
    name = os.environ.get("RELAFF_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"RELAFF_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def read_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    """Load a config file (or a RunRecord, whose embedded config is replayed)."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if isinstance(raw, dict) and raw.get("kind") == RECORD_KIND:
            raw = raw["config"]
    return from_dict(apply_overrides(raw, overrides or []))


def _out_dir(path: str | None, default: str) -> Path:
    out = Path(path or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def check_corpus(cfg: ExperimentConfig, corpus: list[Video]) -> None:
    """Corpus/config agreement, checked before any training compute."""
    if not corpus:
        raise ConfigError("corpus", "no videos found")
    v0 = corpus[0]
    if v0.scale != cfg.synth.scale:
        raise ConfigError("synth.scale", f"config says {cfg.synth.scale!r}, corpus is {v0.scale!r}")
    C = len(v0.labels)
    if C != cfg.head.C:
        raise ConfigError("head.C", f"config says C={cfg.head.C}, corpus videos carry {C} labels")
    H, W = v0.frames.shape[1:3]
    if (H, W) != (cfg.encoder.H, cfg.encoder.W):
        raise ConfigError("encoder.H", f"config frames {cfg.encoder.H}x{cfg.encoder.W}, corpus {H}x{W}")
    short = [v.video_id for v in corpus if v.L < cfg.sampling.T]
    if short:
        raise ConfigError("sampling.T", f"T={cfg.sampling.T} exceeds the length of {len(short)} videos "
                                        f"(e.g. {short[0]})")


def _load_checked_corpus(cfg: ExperimentConfig, corpus_dir: str | None) -> list[Video]:
    if corpus_dir is None:
        raise UsageError("--corpus is required")
    if not (Path(corpus_dir) / "metadata.json").exists():
        raise UsageError(f"{corpus_dir} is not a corpus directory (no metadata.json)")
    corpus = load_corpus(Path(corpus_dir))
    check_corpus(cfg, corpus)
    return corpus


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = read_config(args.config, args.seed_override)
    out = _out_dir(args.out, "corpus")
    videos = generate_corpus(cfg.synth, cfg.seeds.corpus)
    save_corpus(videos, out)
    frames = sum(v.L for v in videos)
    print(f"corpus: subjects={cfg.synth.subjects} videos={len(videos)} frames={frames} "
          f"scale={cfg.synth.scale} C={cfg.synth.C} -> {out}")
    return 0


def _prediction_rows(folds) -> list[list]:
    rows = []
    for f in folds:
        for vid, p, t in zip(f.video_ids, f.predictions, f.targets):
            rows.append([f.held_out, vid, *(repr(float(x)) for x in p), *(repr(float(x)) for x in t)])
    return rows


def _write_predictions(path: Path, folds, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "video_id", *(f"pred_{n}" for n in names), *(f"true_{n}" for n in names)])
        w.writerows(_prediction_rows(folds))


def _epoch_dicts(epochs) -> list[dict]:
    return [dict(vars(e)) for e in epochs]


def cmd_train(args) -> int:
    from . import plotting
    from .training import Variant, eval_label_names, make_fold_plan, run_cross_validation
    from .weights import save_weights

    cfg = read_config(args.config, args.seed_override)
    corpus = _load_checked_corpus(cfg, args.corpus)
    out = _out_dir(args.out, "run")
    t = cfg.training
    print(f"train: mode={t.mode} loss={t.loss_kind} lambda={t.lam!r} K={t.K} B={t.B} T={cfg.sampling.T} "
          f"epochs={t.epochs} lr={t.lr!r} seeds=({cfg.seeds.corpus},{cfg.seeds.init},{cfg.seeds.train})")
    plan = make_fold_plan(corpus, t.subsample_fraction)
    if t.mode == "single":
        # one split: the last subject (sorted) is held out
        plan.folds = plan.folds[-1:]
    t0 = time.perf_counter()
    result = run_cross_validation(corpus, plan, cfg, Variant(), jobs=args.jobs, keep_weights=True)
    wall = time.perf_counter() - t0
    names = eval_label_names(cfg)

    write_metrics_csv(result.pooled, out / "metrics.csv")
    summary = {"alignment_score": result.alignment, **result.pooled.flat("pooled."),
               **{f"fold_mean.{k}": v for k, v in result.fold_mean.items()}}
    write_metrics_kv(summary, out / "metrics.txt")
    _write_predictions(out / "predictions.csv", result.folds, names)
    weight_files = []
    for f in result.folds:
        name = f"weights_fold{f.fold:02d}_{f.held_out}.rafw"
        save_weights(f.weights, out / name)
        weight_files.append(name)
    record = {
        "kind": RECORD_KIND,
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": vars(cfg.seeds),
        "folds": [{"fold": f.fold, "held_out": f.held_out, "n_train_videos": f.n_train_videos,
                   "epochs": _epoch_dicts(f.epochs), "weights": w}
                  for f, w in zip(result.folds, weight_files)],
        "metrics": {"pooled": result.pooled.flat(), "fold_mean": result.fold_mean,
                    "alignment_score": result.alignment, "undefined": result.pooled.undefined},
        "wall_clock_seconds": wall,
    }
    (out / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    plotting.loss_curves([_epoch_dicts(f.epochs) for f in result.folds], out / "loss_curves.png")
    preds = np.concatenate([f.predictions for f in result.folds])
    targets = np.concatenate([f.targets for f in result.folds])
    plotting.prediction_scatter(preds, targets, names, out / "predictions.png")
    agg = result.pooled.aggregate
    print(f"pooled: MAE={agg['MAE']:.4f} RMSE={agg['RMSE']:.4f} PCC={agg['PCC']:.4f} CCC={agg['CCC']:.4f} "
          f"alignment={result.alignment:.4f} ({wall:.1f}s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .training import build_model, eval_label_names, eval_targets, predict_videos
    from .weights import load_weights

    cfg = read_config(args.config, args.seed_override)
    if not args.weights:
        raise UsageError("eval needs --weights FILE")
    corpus = _load_checked_corpus(cfg, args.corpus)
    out = _out_dir(args.out, "eval")
    model = build_model(cfg, cfg.seeds.init)
    try:
        model.store.load(load_weights(Path(args.weights)))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"weights {args.weights} do not fit this config: {exc}") from None
    names = eval_label_names(cfg)
    preds = predict_videos(model, corpus, cfg, cfg.training.K)
    targets = eval_targets(cfg, corpus)
    report = metrics_report(preds, targets, names)
    write_metrics_csv(report, out / "metrics.csv")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "video_id", *(f"pred_{n}" for n in names), *(f"true_{n}" for n in names)])
        for v, p, t in zip(corpus, preds, targets):
            w.writerow([v.subject_id, v.video_id, *(repr(float(x)) for x in p), *(repr(float(x)) for x in t)])
    agg = report.aggregate
    print(f"eval: videos={len(corpus)} MAE={agg['MAE']:.4f} RMSE={agg['RMSE']:.4f} "
          f"PCC={agg['PCC']:.4f} CCC={agg['CCC']:.4f} -> {out}")
    return 0


ABLATION_COLUMNS = ("MAE", "RMSE", "PCC", "CCC")


def ablation_rows(results, names) -> list[dict]:
    rows = []
    for r in results:
        row = {"variant": r.variant, "alignment_score": r.alignment}
        for n in names:
            for m in ABLATION_COLUMNS:
                row[f"{n}_{m}"] = r.pooled.per_label[n][m]
        for m in ABLATION_COLUMNS:
            row[f"mean_{m}"] = r.pooled.aggregate[m]
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    from . import plotting
    from .training import eval_label_names, run_ablation

    cfg = read_config(args.config, args.seed_override)
    corpus = _load_checked_corpus(cfg, args.corpus)
    out = _out_dir(args.out, "ablation")
    print(f"ablate: lambda={cfg.training.lam!r} K={cfg.training.K} seeds=({cfg.seeds.corpus},"
          f"{cfg.seeds.init},{cfg.seeds.train}) variants=4")
    t0 = time.perf_counter()
    results = run_ablation(corpus, cfg, jobs=args.jobs)
    rows = ablation_rows(results, eval_label_names(cfg))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (v if isinstance(v, str) else repr(float(v))) for k, v in row.items()})
    plotting.ablation_bars(rows, out / "ablation.png")
    for row in rows:
        print(f"  {row['variant']:<18} CCC={row['mean_CCC']:.4f} PCC={row['mean_PCC']:.4f} "
              f"RMSE={row['mean_RMSE']:.4f} alignment={row['alignment_score']:.4f}")
    print(f"ablation finished in {time.perf_counter() - t0:.1f}s -> {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    if args.config is not None or args.seed_override:
        read_config(args.config, args.seed_override)  # validated only; the check model is fixed
    t0 = time.perf_counter()
    results = run_all(args.only or None)
    width = max(len(r.component) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<{width}}  max_rel_err={r.max_rel_error:.3e}  params={r.n_params:<5d} {status}")
    bad = [r.component for r in results if not r.passed]
    print(f"gradcheck: {len(results) - len(bad)}/{len(results)} below {TOLERANCE:g} "
          f"in {time.perf_counter() - t0:.1f}s")
    if bad:
        print("failing: " + ", ".join(bad))
        return 1
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (or a run_record.json to replay)")
    common.add_argument("--seed-override", metavar="K=V", action="append", default=[],
                        help="override a config value: 'init=3' sets a seed, 'training.lam=0' any field")
    parser = argparse.ArgumentParser(prog="relaff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(fn=cmd_gen)

    for name, fn, helptext in (("train", cmd_train, "train and evaluate (single split or LOSO)"),
                               ("ablate", cmd_ablate, "run the four-variant ablation")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--corpus", metavar="DIR")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--jobs", metavar="N", type=int, default=1, help="folds trained in parallel")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", parents=[common], help="score saved weights on a corpus")
    p.add_argument("--corpus", metavar="DIR")
    p.add_argument("--weights", metavar="FILE")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--jobs", metavar="N", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--only", metavar="NAME", action="append", help="restrict to named components")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.fn(args)
    except ConfigError as exc:
        print(f"relaff: invalid config: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"relaff: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"relaff: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
