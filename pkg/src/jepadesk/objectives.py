"""Embedding-space losses and collapse diagnostics.

The contrastive loss is implemented as one fused graph op with a
hand-derived gradient w.r.t. predictions, targets and the learnable log
temperature; `numcore.grad_check` verifies it against central
differences in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import BatchTooSmall, NotNormalized, ShapeMismatch

TAU_MIN, TAU_MAX = 0.01, 1.0


class Temperature:
    """Contrastive temperature, either fixed or learnable as log(tau)
    through a 1x1 Parameter; always clamped to [0.01, 1.0]."""

    def __init__(self, value=0.07, param: nc.Parameter = None):
        self.param = param
        self._value = float(value)

    @property
    def tau(self):
        raw = math.exp(float(self.param.value[0, 0])) if self.param is not None \
            else self._value
        return min(max(raw, TAU_MIN), TAU_MAX)

    @property
    def clamped(self):
        raw = math.exp(float(self.param.value[0, 0])) if self.param is not None \
            else self._value
        return raw <= TAU_MIN or raw >= TAU_MAX


@dataclass
class LossOutput:
    value: nc.Node  # 1x1 scalar node
    per_direction: tuple = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)

    @property
    def scalar(self):
        return float(self.value.value[0, 0])


def collapse_metric(embeddings):
    """Mean per-dimension population variance (trace of covariance / D).
    Zero iff all rows are identical."""
    a = nc.as_matrix(embeddings, "collapse_metric")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    return float(a.var(axis=0).mean())


def _check_batch(preds, targets, norm_check=True, min_rows=2):
    p = preds if isinstance(preds, nc.Node) else nc.constant(preds)
    t = targets if isinstance(targets, nc.Node) else nc.constant(targets)
    if p.shape != t.shape:
        raise ShapeMismatch(f"preds {p.shape} vs targets {t.shape}")
    if p.shape[0] < min_rows:
        raise BatchTooSmall(f"batch size {p.shape[0]} < {min_rows}")
    if norm_check:
        for name, arr in (("preds", p.value), ("targets", t.value)):
            norms = np.linalg.norm(arr, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-3):
                raise NotNormalized(f"{name} rows deviate from unit norm")
    return p, t


def _uniformity(targets):
    b = targets.shape[0]
    sq = ((targets[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    off = sq[~np.eye(b, dtype=bool)]
    return float(np.log(np.mean(np.exp(-2.0 * off))))


def infonce_bidirectional(preds, targets, temp: Temperature) -> LossOutput:
    """Bi-directional contrastive loss with diagonal labels.

    logits = preds @ targets.T / tau; the loss averages row-wise and
    column-wise cross-entropy.  Diagnostics report the alignment /
    uniformity decomposition and the batch target variance.
    """
    p, t = _check_batch(preds, targets)
    b = p.shape[0]
    tau = temp.tau
    sims = p.value @ t.value.T
    logits = sims / tau

    def _ce(mat):
        z = mat - mat.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return lse - np.diag(z), nc.softmax_rows(mat)

    nll_row, soft_row = _ce(logits)
    nll_col, soft_col = _ce(logits.T)
    loss_row = float(nll_row.mean())
    loss_col = float(nll_col.mean())
    value = 0.5 * (loss_row + loss_col)

    eye = np.eye(b)
    g_logits = ((soft_row - eye) + (soft_col - eye).T) / (2.0 * b)

    parents = [p, t]
    log_tau_grad = None
    if temp.param is not None:
        parents.append(temp.param.node())
        log_tau_grad = 0.0 if temp.clamped else -float((g_logits * sims).sum()) / tau

    def bwd(g):
        s = g[0, 0]
        out = [s * (g_logits @ t.value) / tau,
               s * (g_logits.T @ p.value) / tau]
        if temp.param is not None:
            out.append(np.array([[s * log_tau_grad]]))
        return tuple(out)

    node = nc.Node(np.array([[value]]), tuple(parents), bwd)
    diags = {
        "alignment": float(((p.value - t.value) ** 2).sum(axis=1).mean()),
        "uniformity": _uniformity(t.value),
        "batch_target_variance": collapse_metric(t.value),
        "tau": tau,
    }
    return LossOutput(node, (loss_row, loss_col), diags)


def regression_loss(kind, preds, targets) -> LossOutput:
    """Per-pair regression alternatives: mean (1 - cosine), mean row L1
    distance, or mean squared row L2 distance."""
    p, t = _check_batch(preds, targets, norm_check=False, min_rows=1)
    b = p.shape[0]
    pv, tv = p.value, t.value
    diff = pv - tv

    if kind == "l2":
        value = float((diff ** 2).sum(axis=1).mean())

        def bwd(g):
            s = g[0, 0]
            return (s * 2.0 * diff / b, -s * 2.0 * diff / b)
    elif kind == "l1":
        value = float(np.abs(diff).sum(axis=1).mean())
        sign = np.sign(diff)

        def bwd(g):
            s = g[0, 0]
            return (s * sign / b, -s * sign / b)
    elif kind == "cosine":
        pn = np.linalg.norm(pv, axis=1, keepdims=True)
        tn = np.linalg.norm(tv, axis=1, keepdims=True)
        cos = (pv * tv).sum(axis=1, keepdims=True) / (pn * tn)
        value = float((1.0 - cos).mean())

        def bwd(g):
            s = g[0, 0]
            dp = -(tv / (pn * tn) - cos * pv / (pn ** 2)) / b
            dt = -(pv / (pn * tn) - cos * tv / (tn ** 2)) / b
            return (s * dp, s * dt)
    else:
        raise ValueError(f"unknown regression kind {kind!r}")

    node = nc.Node(np.array([[value]]), (p, t), bwd)
    diags = {"alignment": float((diff ** 2).sum(axis=1).mean())}
    return LossOutput(node, (value, value), diags)
