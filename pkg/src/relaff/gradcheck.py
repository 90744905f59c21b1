"""Finite-difference checks for every differentiable op, every loss and the full pipeline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Value
from .data import Batch, SamplingConfig, generate_corpus, make_batch

TOLERANCE = 1e-5

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    n_params: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE)


def _probe(out: Value, rng: np.random.Generator) -> Value:
    """Reduce ``out`` to a scalar through fixed random weights so no gradient is trivial."""
    w = ad.constant(rng.normal(size=out.shape))
    return ad.sum_(ad.mul(out, w))


def _op_check(make_inputs: Callable[[np.random.Generator], list[np.ndarray]],
              op: Callable[..., Value] | str, seed: int) -> tuple[float, int]:
    if isinstance(op, str):
        op = getattr(ad, op)  # late lookup, so a patched rule is what gets checked
    rng = np.random.default_rng(seed)
    leaves = [ad.parameter(x) for x in make_inputs(rng)]
    probe_seed = int(rng.integers(1 << 31))

    def f():
        return _probe(op(*leaves), np.random.default_rng(probe_seed))

    worst = max(ad.grad_check(f, leaf) for leaf in leaves)
    return worst, sum(leaf.size for leaf in leaves)


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _dropout_fixed(x: Value) -> Value:
    # fresh generator per call keeps the mask fixed across finite-difference evaluations
    return ad.dropout(x, 0.3, np.random.default_rng(7), True)


OP_CHECKS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], "add"),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], "sub"),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], "mul"),
    "div": (lambda r: [r.normal(size=(3, 4)), _away_from_zero(r, (3, 4), 0.5)], "div"),
    "scale": (lambda r: [r.normal(size=(5,))], lambda a: ad.scale(a, -1.7)),
    "add_scalar": (lambda r: [r.normal(size=(5,))], lambda a: ad.add_scalar(a, 0.3)),
    "relu": (lambda r: [_away_from_zero(r, (4, 3))], "relu"),
    "tanh": (lambda r: [r.normal(size=(4, 3))], "tanh"),
    "exp": (lambda r: [r.normal(size=(4, 3))], "exp"),
    "log": (lambda r: [r.uniform(0.3, 2.0, size=(4, 3))], "log"),
    "sqrt": (lambda r: [r.uniform(0.3, 2.0, size=(4, 3))], "sqrt"),
    "square": (lambda r: [r.normal(size=(4, 3))], "square"),
    "abs": (lambda r: [_away_from_zero(r, (4, 3))], "abs_"),
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], "matmul"),
    "matmul_batched": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))], "matmul"),
    "matmul_shared_rhs": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], "matmul"),
    "matmul_vector": (lambda r: [r.normal(size=(4,)), r.normal(size=(4, 3))], "matmul"),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: ad.transpose(a, (2, 0, 1))),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: ad.reshape(a, (3, 4))),
    "sum": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.sum_(a, axis=0)),
    "mean": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.mean(a, axis=1, keepdims=True)),
    "mean_pool": (lambda r: [r.normal(size=(2, 4, 3))], "mean_pool"),
    "expand": (lambda r: [r.normal(size=(1, 3))], lambda a: ad.expand(a, (4, 3))),
    "add_bias": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))], "add_bias"),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: ad.concat([a, b], axis=1)),
    "stack": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: ad.stack([a, b], axis=1)),
    "take": (lambda r: [r.normal(size=(4, 3))], lambda a: ad.take(a, (np.array([0, 2, 2]), slice(None)))),
    "softmax": (lambda r: [r.normal(size=(3, 5))], lambda a: ad.softmax(a, axis=-1)),
    "log_softmax": (lambda r: [r.normal(size=(3, 5))], lambda a: ad.log_softmax(a, axis=-1)),
    "layer_norm": (lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))], "layer_norm"),
    "l2_normalize_rows": (lambda r: [r.normal(size=(3, 4))], "l2_normalize_rows"),
    "dropout": (lambda r: [r.normal(size=(4, 5))], _dropout_fixed),
}


def _loss_checks() -> dict[str, tuple[Callable, Callable]]:
    def rel(a):
        m = np.array([[1.0, 0.2, -0.4], [0.2, 1.0, 0.6], [-0.4, 0.6, 1.0]])
        return losses.relational_loss(losses.cosine_similarity_matrix(a), ad.constant(m))

    def total(a, y):
        l_reg = losses.ccc_loss(a, y)
        return losses.total_loss(l_reg, losses.relational_loss(
            losses.cosine_similarity_matrix(a), ad.constant(np.eye(a.shape[0]))), 2.0)

    return {
        "cosine_similarity_matrix": (lambda r: [r.normal(size=(3, 5))], losses.cosine_similarity_matrix),
        "relational_loss": (lambda r: [r.normal(size=(3, 5))], rel),
        "rmse_loss": (lambda r: [r.normal(size=(6, 2)), r.normal(size=(6, 2))], losses.rmse_loss),
        "ccc": (lambda r: [r.normal(size=6), r.normal(size=6)], losses.ccc),
        "ccc_loss": (lambda r: [r.normal(size=(6, 2)), r.normal(size=(6, 2))], losses.ccc_loss),
        "total_loss": (lambda r: [r.normal(size=(4, 2)), r.normal(size=(4, 2))], total),
        "contrastive_loss": (lambda r: [r.normal(size=(4, 6)), r.normal(size=(4, 6))],
                             lambda a, b: losses.contrastive_loss(a, b, 0.5)),
    }


def pipeline_config(loss_kind: str = "one_minus_ccc"):
    """Tiny model for the end-to-end check: D = 16, T = 4, B = 2, dropout off."""
    from .config import from_dict

    return from_dict({
        "encoder": {"T": 4, "H": 8, "W": 8, "D": 16, "D_f": 16, "frozen_width": 16,
                    "transformer_layers": 1, "attention_heads": 2, "patch_grid": 2},
        "head": {"dropout_rate": 0.0, "penultimate_width": 8},
        "synth": {"subjects": 2, "videos_per_subject": 1, "L": 12},
        "training": {"K": 1, "B": 2, "lam": 2.0, "loss_kind": loss_kind, "augment": False},
    })


def pipeline_check(loss_kind: str = "one_minus_ccc", seed: int = 0) -> tuple[float, int]:
    """Max error over every trainable parameter of the full model under ``L_total``.

    The context stack is detached in the model, so the finite-difference oracle
    holds it fixed at the unperturbed parameters; otherwise the numeric side
    would measure the forward-only branch the analytic side correctly ignores.
    """
    from .fusion import fuse
    from .training import _regression_targets, build_model, label_similarity

    cfg = pipeline_config(loss_kind)
    corpus = generate_corpus(cfg.synth, seed)
    batch: Batch = make_batch(corpus, 2, SamplingConfig(T=4, K=1), np.random.default_rng(seed))
    model = build_model(cfg, seed)
    enc = model.encoder
    clip_frozen = enc.frozen_features(batch.clip_frames())
    with ad.no_grad():
        z0 = enc.encode_from_frozen(clip_frozen)
        Z = model.context_stack(z0, enc.frozen_features(batch.context_frames(1)), 1)
    m = ad.constant(label_similarity(cfg, batch.labels, batch.scale))

    def f():
        z = enc.encode_from_frozen(clip_frozen)
        out = model.head(fuse(z, model.attention(z, Z)))
        pred, target = _regression_targets(cfg, batch, out)
        l_reg = losses.rmse_loss(pred, target) if loss_kind == "rmse" else losses.ccc_loss(pred, target)
        l_rel = losses.relational_loss(losses.cosine_similarity_matrix(z), m)
        return losses.total_loss(l_reg, l_rel, cfg.training.lam)

    worst, n = 0.0, 0
    for p in model.store.trainable().values():
        worst = max(worst, ad.grad_check(f, p))
        n += p.size
    return worst, n


def run_all(only: list[str] | None = None) -> list[CheckResult]:
    checks: dict[str, Callable[[], tuple[float, int]]] = {}
    for i, (name, (inputs, op)) in enumerate({**OP_CHECKS, **_loss_checks()}.items()):
        checks[name] = (lambda inputs=inputs, op=op, i=i: _op_check(inputs, op, seed=100 + i))
    checks["pipeline"] = pipeline_check
    checks["pipeline_rmse"] = lambda: pipeline_check("rmse")
    results = []
    for name, fn in checks.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            err, n = fn()
        except Exception:  # a crashing backward rule is a failed check, not a crashed report
            log.exception("gradcheck %s raised", name)
            err, n = float("nan"), 0
        results.append(CheckResult(name, err, n, time.perf_counter() - t0))
    return results
