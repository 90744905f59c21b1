"""Differentiable training losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateVectorError, DimensionError, Value

__all__ = [
    "DegenerateVectorError",
    "UndefinedCCCError",
    "cosine_similarity_matrix",
    "relational_loss",
    "rmse_loss",
    "ccc",
    "ccc_loss",
    "total_loss",
    "contrastive_loss",
]

EPS_NORM = 1e-12


class UndefinedCCCError(ZeroDivisionError):
    pass


def _value(x) -> Value:
    return x if isinstance(x, Value) else ad.constant(x)


def cosine_similarity_matrix(vectors, eps: float = EPS_NORM) -> Value:
    """``B x B`` cosine similarities between the rows of ``vectors``."""
    v = _value(vectors)
    if v.ndim != 2:
        raise DimensionError(f"expected B x n rows, got shape {v.shape}")
    unit = ad.l2_normalize_rows(v, eps=eps)
    return ad.matmul(unit, ad.transpose(unit))


def relational_loss(m_hat, m) -> Value:
    """Root mean squared difference between two similarity matrices.

    Gradients flow into ``m_hat`` only when it carries a graph; ``m`` is
    treated like any other operand, so pass a constant for label similarities.
    """
    m_hat, m = _value(m_hat), _value(m)
    if m_hat.ndim != 2 or m_hat.shape != m.shape or m_hat.shape[0] != m_hat.shape[1]:
        raise DimensionError(f"similarity matrices must be equal B x B, got {m_hat.shape} and {m.shape}")
    return ad.sqrt(ad.mean(ad.square(ad.sub(m_hat, m))))


def rmse_loss(y_hat, y) -> Value:
    y_hat, y = _value(y_hat), _value(y)
    if y_hat.shape != y.shape:
        raise DimensionError(f"rmse_loss: {y_hat.shape} vs {y.shape}")
    return ad.sqrt(ad.mean(ad.square(ad.sub(y_hat, y))))


def _column_ccc(y_hat: Value, y: Value) -> Value:
    """Column-wise CCC of ``N x C`` inputs with population moments."""
    n = y_hat.shape[0]
    if n < 2:
        raise ValueError(f"CCC needs at least 2 samples, got {n}")
    mx = ad.mean(y_hat, axis=0, keepdims=True)
    my = ad.mean(y, axis=0, keepdims=True)
    xc = ad.sub(y_hat, ad.expand(mx, y_hat.shape))
    yc = ad.sub(y, ad.expand(my, y.shape))
    cov = ad.mean(ad.mul(xc, yc), axis=0)
    vx = ad.mean(ad.square(xc), axis=0)
    vy = ad.mean(ad.square(yc), axis=0)
    shift = ad.square(ad.reshape(ad.sub(mx, my), cov.shape))
    denom = ad.add(ad.add(vx, vy), shift)
    if np.any(denom.data <= 0.0):
        bad = int(np.flatnonzero(denom.data <= 0.0)[0])
        raise UndefinedCCCError(f"CCC undefined for column {bad}: both inputs constant with equal means")
    return ad.div(ad.scale(cov, 2.0), denom)


def ccc(y_hat, y) -> Value:
    """Concordance correlation coefficient of two length-N vectors."""
    y_hat, y = _value(y_hat), _value(y)
    if y_hat.shape != y.shape or y_hat.ndim != 1:
        raise DimensionError(f"ccc expects equal 1-D vectors, got {y_hat.shape} and {y.shape}")
    n = y_hat.shape[0]
    return ad.reshape(_column_ccc(ad.reshape(y_hat, (n, 1)), ad.reshape(y, (n, 1))), ())


def ccc_loss(y_hat, y) -> Value:
    """Mean over the C label columns of ``1 - CCC``."""
    y_hat, y = _value(y_hat), _value(y)
    if y_hat.shape != y.shape or y_hat.ndim != 2:
        raise DimensionError(f"ccc_loss: {y_hat.shape} vs {y.shape}")
    return ad.add_scalar(ad.scale(ad.mean(_column_ccc(y_hat, y)), -1.0), 1.0)


def total_loss(l_reg: Value, l_rel: Value, lam: float) -> Value:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return l_reg
    return ad.add(l_reg, ad.scale(l_rel, lam))


def contrastive_loss(anchors, positives, temperature: float = 0.1) -> Value:
    """NT-Xent over ``2B`` embeddings, averaged over the ``B`` anchors.

    Each anchor's softmax runs over its cosine similarity to the other
    ``2B - 1`` embeddings with its own positive as the target.
    """
    anchors, positives = _value(anchors), _value(positives)
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise DimensionError(f"contrastive_loss: {anchors.shape} vs {positives.shape}")
    B = anchors.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs B >= 2 so that negatives exist")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    unit = ad.l2_normalize_rows(ad.concat([anchors, positives], axis=0))
    logits = ad.scale(ad.matmul(ad.take(unit, slice(0, B)), ad.transpose(unit)), 1.0 / temperature)
    self_mask = np.zeros((B, 2 * B))
    self_mask[np.arange(B), np.arange(B)] = -1e9
    logp = ad.log_softmax(ad.add(logits, ad.constant(self_mask)), axis=-1)
    picked = ad.take(logp, (np.arange(B), np.arange(B) + B))
    return ad.scale(ad.mean(picked), -1.0)
