"""Training loop, sliding-window inference, leave-one-subject-out CV and ablations."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateVectorError, NaNError, ParameterStore, Value
from .config import ExperimentConfig
from .data import SCALES, Batch, SamplingConfig, Video, clip_at, make_batch, scale_total, similarity_labels
from .data import _affine as affine_map
from .fusion import ContextRegressor
from .losses import (
    UndefinedCCCError,
    ccc_loss,
    contrastive_loss,
    cosine_similarity_matrix,
    relational_loss,
    rmse_loss,
    total_loss,
)
from .metrics import MetricsReport, metrics_report, pcc

log = logging.getLogger(__name__)

VARIANTS = ("Proposed", "w/o L_rel", "w/o K w/o L_rel", "L_cont")


# ------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One Adam update of every trainable parameter, weight decay decoupled.

    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta``
    """
    params = store.trainable()
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NaNError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= state.lr * update


def lr_schedule(epoch: int, base_lr: float = 1e-4, step: int = 5, gamma: float = 0.1) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step)


# ---------------------------------------------------------------- losses


def build_model(cfg: ExperimentConfig, init_seed: int) -> ContextRegressor:
    return ContextRegressor(cfg.encoder, cfg.head, init_seed=init_seed,
                            reencode_center=cfg.training.reencode_center)


def _regression_targets(cfg: ExperimentConfig, batch: Batch, out) -> tuple[Value, np.ndarray]:
    mask = np.flatnonzero(cfg.head.supervised_mask)
    pred = ad.take(out.per_label, (slice(None), mask))
    target = batch.labels[:, mask]
    if cfg.head.total_score_enabled:
        pred = ad.concat([pred, out.total_score], axis=1)
        target = np.concatenate([target, batch.totals[:, None]], axis=1)
    return pred, target


def label_similarity(cfg: ExperimentConfig, labels: np.ndarray, scale: str) -> np.ndarray:
    mask = np.asarray(cfg.head.supervised_mask, dtype=bool)
    shifted = similarity_labels(labels, scale)[:, mask]
    return cosine_similarity_matrix(shifted).data


@dataclass
class BatchLosses:
    l_reg: Value
    l_rel: Value
    l_total: Value
    z: Value


def batch_losses(model: ContextRegressor, batch: Batch, cfg: ExperimentConfig, K: int, lam: float,
                 rng: np.random.Generator | None, train_mode: bool = True) -> BatchLosses:
    enc = model.encoder
    clip_frozen = enc.frozen_features(batch.clip_frames())
    ctx = batch.context_frames(K)
    ctx_frozen = None if ctx is None else enc.frozen_features(ctx)
    out, z = model.forward(clip_frozen, ctx_frozen, K, train_mode=train_mode, rng=rng)
    pred, target = _regression_targets(cfg, batch, out)
    if cfg.training.loss_kind == "rmse":
        l_reg = rmse_loss(pred, target)
    else:
        l_reg = ccc_loss(pred, target)
    m = label_similarity(cfg, batch.labels, batch.scale)
    l_rel = relational_loss(cosine_similarity_matrix(z), ad.constant(m))
    return BatchLosses(l_reg, l_rel, total_loss(l_reg, l_rel, lam), z)


# ------------------------------------------------------------------ epochs


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_reg: float
    l_rel: float
    l_total: float
    batches: int
    skipped: int


def _batches_per_epoch(cfg: ExperimentConfig, n_videos: int) -> int:
    return cfg.training.batches_per_epoch or max(1, math.ceil(n_videos / cfg.training.B))


def _draw_batch(corpus: list[Video], cfg: ExperimentConfig, K: int, rng: np.random.Generator) -> Batch:
    sampling = SamplingConfig(T=cfg.sampling.T, K=K, seed=cfg.sampling.seed)
    return make_batch(corpus, cfg.training.B, sampling, rng, augment_clips=cfg.training.augment)


def train_epoch(model: ContextRegressor, corpus: list[Video], cfg: ExperimentConfig, state: AdamState,
                epoch: int, rng: np.random.Generator, K: int | None = None,
                lam: float | None = None) -> EpochRecord:
    K = cfg.training.K if K is None else K
    lam = cfg.training.lam if lam is None else lam
    t = cfg.training
    state.lr = lr_schedule(epoch, t.lr, t.lr_step, t.lr_gamma)
    sums = np.zeros(3)
    done = skipped = 0
    for _ in range(_batches_per_epoch(cfg, len(corpus))):
        batch = _draw_batch(corpus, cfg, K, rng)
        model.store.zero_grad()
        try:
            losses = batch_losses(model, batch, cfg, K, lam, rng, train_mode=True)
        except (DegenerateVectorError, UndefinedCCCError) as exc:
            log.warning("epoch %d: skipping batch (%s)", epoch, exc)
            skipped += 1
            continue
        ad.backward(losses.l_total)
        adam_step(model.store, state)
        sums += [float(losses.l_reg.data), float(losses.l_rel.data), float(losses.l_total.data)]
        done += 1
    mean = sums / max(done, 1)
    return EpochRecord(epoch, state.lr, float(mean[0]), float(mean[1]), float(mean[2]), done, skipped)


def pretrain_contrastive(model: ContextRegressor, corpus: list[Video], cfg: ExperimentConfig,
                         rng: np.random.Generator) -> list[float]:
    """Unsupervised pretraining: two clips of one video are positives, other videos negatives."""
    t = cfg.training
    names = model.encoder.parameter_names()
    keep = set(names) | model.store.frozen
    others = [n for n in model.store if n not in keep]
    model.store.freeze(others)
    state = AdamState(lr=t.lr, weight_decay=t.weight_decay)
    sampling = SamplingConfig(T=cfg.sampling.T, K=0)
    history = []
    B = max(2, min(t.B, len(corpus)))
    for epoch in range(t.contrastive_epochs):
        state.lr = lr_schedule(epoch, t.lr, t.lr_step, t.lr_gamma)
        losses = []
        for _ in range(_batches_per_epoch(cfg, len(corpus))):
            first = make_batch(corpus, B, sampling, rng, augment_clips=t.augment)
            idx = first.video_index
            second = [make_batch([corpus[int(i)]], 1, sampling, rng, augment_clips=t.augment).clips[0] for i in idx]
            enc = model.encoder
            za = enc.encode_from_frozen(enc.frozen_features(first.clip_frames()))
            zb = enc.encode_from_frozen(enc.frozen_features(np.stack([c.frames for c in second])))
            model.store.zero_grad()
            loss = contrastive_loss(za, zb, t.contrastive_temperature)
            ad.backward(loss)
            adam_step(model.store, state)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    model.store.unfreeze(others)
    return history


# -------------------------------------------------------------- inference


@dataclass
class VideoPrediction:
    video_id: str
    per_label: np.ndarray  # native range
    total: float | None
    n_clips: int


def inference_starts(L: int, T: int) -> list[int]:
    """Non-overlapping windows at stride T from frame 0; the partial tail is dropped."""
    if L < T:
        return [0]
    return list(range(0, L - T + 1, T))


def unscale_predictions(pred_train: np.ndarray, scale_id: str) -> np.ndarray:
    sc = SCALES[scale_id]
    return affine_map(pred_train, sc.train[: pred_train.shape[-1]], sc.native[: pred_train.shape[-1]])


def predict_clips_train_range(model: ContextRegressor, video: Video, T: int, K: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-clip predictions in the training range, ``(n_clips, C)`` and totals."""
    if video.L < T:
        log.info("video %s shorter than T=%d (L=%d); using one looped clip", video.video_id, T, video.L)
    starts = inference_starts(video.L, T)
    enc = model.encoder
    clips = np.stack([clip_at(video, T, s).frames for s in starts])
    ctx = None
    if K > 0:
        ctx = np.stack([
            np.stack([clip_at(video, T, s + j * T).frames for j in range(-K, K + 1) if j != 0])
            for s in starts
        ])
    with ad.no_grad():
        out, _ = model.forward(enc.frozen_features(clips), None if ctx is None else enc.frozen_features(ctx), K)
    totals = out.total_score.data[:, 0] if out.total_score is not None else None
    return out.per_label.data, totals


def infer_video(model: ContextRegressor, video: Video, T: int, K: int) -> VideoPrediction:
    per_clip, totals = predict_clips_train_range(model, video, T, K)
    mean = per_clip.mean(axis=0)
    total = None
    if totals is not None:
        sc = SCALES[video.scale]
        t = totals.mean()
        lo, hi = sc.total_train
        nlo, nhi = sc.total_native
        total = float(nlo + (t - lo) * (nhi - nlo) / (hi - lo))
    return VideoPrediction(video.video_id, unscale_predictions(mean, video.scale), total, per_clip.shape[0])


# ------------------------------------------------------------- alignment


def alignment_pairs(model: ContextRegressor, corpus: list[Video], cfg: ExperimentConfig, n_batches: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Off-diagonal (feature cosine, label cosine) pairs from ``n_batches`` batches."""
    B = min(cfg.training.B, len(corpus))
    if B < 2:
        return np.empty(0), np.empty(0)
    sampling = SamplingConfig(T=cfg.sampling.T, K=0)
    feats, labs = [], []
    iu = np.triu_indices(B, k=1)
    for _ in range(n_batches):
        batch = make_batch(corpus, B, sampling, rng)
        with ad.no_grad():
            z = model.encoder.encode_from_frozen(model.encoder.frozen_features(batch.clip_frames()))
        try:
            m_hat = cosine_similarity_matrix(z).data
        except DegenerateVectorError:
            continue
        m = label_similarity(cfg, batch.labels, batch.scale)
        feats.append(m_hat[iu])
        labs.append(m[iu])
    if not feats:
        return np.empty(0), np.empty(0)
    return np.concatenate(feats), np.concatenate(labs)


def alignment_score(model: ContextRegressor, corpus: list[Video], cfg: ExperimentConfig, n_batches: int,
                    rng: np.random.Generator) -> float:
    """Pearson correlation of off-diagonal feature vs label similarities (NaN if undefined)."""
    f, l = alignment_pairs(model, corpus, cfg, n_batches, rng)
    return pcc(f, l) if f.size >= 2 else math.nan


# -------------------------------------------------------- cross-validation


@dataclass
class FoldPlan:
    folds: list[tuple[str, list[str]]]
    subsample_fraction: float = 1.0

    def __post_init__(self):
        held = [h for h, _ in self.folds]
        if len(set(held)) != len(held):
            raise ValueError("every subject must be held out exactly once")
        for h, train in self.folds:
            if h in train:
                raise ValueError(f"subject {h} is both held out and in training")


def make_fold_plan(corpus: list[Video], subsample_fraction: float = 1.0) -> FoldPlan:
    subjects = sorted({v.subject_id for v in corpus})
    if len(subjects) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    return FoldPlan([(s, [o for o in subjects if o != s]) for s in subjects], subsample_fraction)


def fold_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Variant:
    name: str = "Proposed"
    K: int | None = None
    lam: float | None = None
    contrastive: bool = False


@dataclass
class FoldResult:
    fold: int
    held_out: str
    n_train_videos: int
    epochs: list[EpochRecord]
    predictions: np.ndarray  # (n_test, labels) native
    targets: np.ndarray
    video_ids: list[str]
    feature_sims: np.ndarray
    label_sims: np.ndarray
    weights: dict[str, np.ndarray] | None = None
    contrastive_history: list[float] = field(default_factory=list)


def eval_targets(cfg: ExperimentConfig, videos: list[Video]) -> np.ndarray:
    mask = np.flatnonzero(cfg.head.supervised_mask)
    rows = []
    for v in videos:
        row = list(v.labels[mask])
        if cfg.head.total_score_enabled:
            row.append(v.total)
        rows.append(row)
    return np.asarray(rows, dtype=float)


def eval_label_names(cfg: ExperimentConfig) -> list[str]:
    names = [n for n, keep in zip(cfg.label_names, cfg.head.supervised_mask) if keep]
    if cfg.head.total_score_enabled:
        names.append("total")
    return names


def predict_videos(model: ContextRegressor, videos: list[Video], cfg: ExperimentConfig, K: int) -> np.ndarray:
    mask = np.flatnonzero(cfg.head.supervised_mask)
    rows = []
    for v in videos:
        p = infer_video(model, v, cfg.sampling.T, K)
        row = list(p.per_label[mask])
        if cfg.head.total_score_enabled:
            row.append(p.total)
        rows.append(row)
    return np.asarray(rows, dtype=float)


def subsample(videos: list[Video], fraction: float, rng: np.random.Generator, minimum: int = 2) -> list[Video]:
    if fraction >= 1.0:
        return list(videos)
    n = min(len(videos), max(minimum, math.ceil(fraction * len(videos))))
    idx = np.sort(rng.choice(len(videos), size=n, replace=False))
    return [videos[i] for i in idx]


def train_model(cfg: ExperimentConfig, train_videos: list[Video], variant: Variant, init_seed: int,
                train_seed: int) -> tuple[ContextRegressor, list[EpochRecord], list[float]]:
    K = cfg.training.K if variant.K is None else variant.K
    lam = cfg.training.lam if variant.lam is None else variant.lam
    model = build_model(cfg, init_seed)
    rng = np.random.default_rng(train_seed)
    history: list[float] = []
    if variant.contrastive:
        history = pretrain_contrastive(model, train_videos, cfg, rng)
        model.store.freeze([n for n in model.encoder.parameter_names() if n not in model.store.frozen])
    state = AdamState(lr=cfg.training.lr, weight_decay=cfg.training.weight_decay)
    epochs = [train_epoch(model, train_videos, cfg, state, e, rng, K=K, lam=lam)
              for e in range(cfg.training.epochs)]
    return model, epochs, history


def run_fold(cfg: ExperimentConfig, corpus: list[Video], plan: FoldPlan, fold: int, variant: Variant,
             keep_weights: bool = False) -> FoldResult:
    held, train_subjects = plan.folds[fold]
    train_set = set(train_subjects)
    seeds = cfg.seeds
    train_videos = [v for v in corpus if v.subject_id in train_set]
    train_videos = subsample(train_videos, plan.subsample_fraction,
                             np.random.default_rng(fold_seed(seeds.train, fold, 1)))
    test_videos = [v for v in corpus if v.subject_id == held]
    model, epochs, history = train_model(cfg, train_videos, variant, fold_seed(seeds.init, fold),
                                         fold_seed(seeds.train, fold))
    K = cfg.training.K if variant.K is None else variant.K
    preds = predict_videos(model, test_videos, cfg, K)
    fs, ls = alignment_pairs(model, test_videos, cfg, cfg.training.alignment_batches,
                             np.random.default_rng(fold_seed(seeds.train, fold, 2)))
    return FoldResult(fold, held, len(train_videos), epochs, preds, eval_targets(cfg, test_videos),
                      [v.video_id for v in test_videos], fs, ls,
                      model.store.snapshot() if keep_weights else None, history)


def _run_fold_job(args):
    return run_fold(*args)


@dataclass
class CVResult:
    variant: str
    folds: list[FoldResult]
    pooled: MetricsReport
    fold_mean: dict[str, float]
    alignment: float

    def summary(self) -> dict[str, Any]:
        return {"variant": self.variant, "alignment_score": self.alignment,
                **self.pooled.flat("pooled."), **{f"fold_mean.{k}": v for k, v in self.fold_mean.items()}}


def run_cross_validation(corpus: list[Video], plan: FoldPlan, cfg: ExperimentConfig,
                         variant: Variant | None = None, jobs: int = 1, keep_weights: bool = False) -> CVResult:
    """Leave-one-subject-out CV; PCC/CCC pooled over all held-out videos (fold means also kept)."""
    variant = variant or Variant()
    if len({v.subject_id for v in corpus}) < 2:
        raise ValueError("cross-validation needs at least 2 subjects")
    args = [(cfg, corpus, plan, k, variant, keep_weights) for k in range(len(plan.folds))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_job, args))
    else:
        folds = [_run_fold_job(a) for a in args]
    names = eval_label_names(cfg)
    pooled = metrics_report(np.concatenate([f.predictions for f in folds]),
                            np.concatenate([f.targets for f in folds]), names)
    per_fold = []
    for f in folds:
        if f.targets.shape[0] >= 2:
            per_fold.append(metrics_report(f.predictions, f.targets, names).flat())
    fold_mean = {}
    if per_fold:
        for k in per_fold[0]:
            vals = [d[k] for d in per_fold if not math.isnan(d[k])]
            fold_mean[k] = float(np.mean(vals)) if vals else math.nan
    fs = np.concatenate([f.feature_sims for f in folds])
    ls = np.concatenate([f.label_sims for f in folds])
    align = pcc(fs, ls) if fs.size >= 2 else math.nan
    return CVResult(variant.name, folds, pooled, fold_mean, align)


def ablation_variants(cfg: ExperimentConfig) -> list[Variant]:
    return [
        Variant("Proposed"),
        Variant("w/o L_rel", lam=0.0),
        Variant("w/o K w/o L_rel", K=0, lam=0.0),
        Variant("L_cont", lam=0.0, contrastive=True),
    ]


def run_ablation(corpus: list[Video], cfg: ExperimentConfig, jobs: int = 1,
                 variants: list[Variant] | None = None) -> list[CVResult]:
    """The four-row comparison; every variant shares corpus, fold plan and seeds."""
    plan = make_fold_plan(corpus, cfg.training.subsample_fraction)
    return [run_cross_validation(corpus, plan, cfg, v, jobs=jobs) for v in (variants or ablation_variants(cfg))]


# ------------------------------------------------------------ gradient audit


def gradient_flow_audit(model: ContextRegressor, batch: Batch, cfg: ExperimentConfig, K: int,
                        lam: float) -> dict[str, float]:
    """Instrumented step: the context branch runs on a shadow copy of the
    encoder parameters with the graph recorded, then its output is detached.
    Any gradient landing on the shadow copy would be gradient attributable to
    context-branch evaluations."""
    from .encoder import VideoEncoder

    shadow_store = ParameterStore()
    shadow = VideoEncoder.__new__(VideoEncoder)
    shadow.cfg, shadow.store, shadow.prefix = model.encoder.cfg, shadow_store, model.encoder.prefix
    for name in model.encoder.parameter_names():
        shadow_store.add(name, model.store[name].data.copy())  # every copy requires grad
    enc = model.encoder
    clip_frozen = enc.frozen_features(batch.clip_frames())
    model.store.zero_grad()
    z = enc.encode_from_frozen(clip_frozen)
    B, D = z.shape
    ctx = batch.context_frames(K)
    if K > 0:
        live = shadow.encode_from_frozen(shadow.frozen_features(ctx).reshape(B * 2 * K, *clip_frozen.shape[1:]))
        neigh = ad.detach(live).data.reshape(B, 2 * K, D)
        Z = np.concatenate([neigh[:, :K], ad.detach(z).data[:, None], neigh[:, K:]], axis=1)
    else:
        live = None
        Z = ad.detach(z).data[:, None]
    out = model.head(fuse_for_audit(model, z, ad.constant(Z)), train_mode=False)
    pred, target = _regression_targets(cfg, batch, out)
    l_reg = rmse_loss(pred, target) if cfg.training.loss_kind == "rmse" else ccc_loss(pred, target)
    l_rel = relational_loss(cosine_similarity_matrix(z), ad.constant(label_similarity(cfg, batch.labels, batch.scale)))
    loss = total_loss(l_reg, l_rel, lam)
    ad.backward(loss)
    context_abs = sum(float(np.abs(v.grad).sum()) for _, v in shadow_store.items())
    frozen_abs = sum(float(np.abs(model.store[n].grad).sum()) for n in model.store.frozen
                     if model.store[n].grad is not None)
    encoder_abs = sum(float(np.abs(model.store[n].grad).sum()) for n in enc.parameter_names()
                      if model.store[n].grad is not None)
    return {"context_branch_abs_grad": context_abs, "frozen_abs_grad": frozen_abs,
            "clip_branch_abs_grad": encoder_abs, "loss": float(loss.data),
            "context_evaluated": live is not None}


def fuse_for_audit(model: ContextRegressor, z: Value, Z: Value) -> Value:
    from .fusion import fuse

    return fuse(z, model.attention(z, Z))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
