"""Batch-hard triplet loss, softmax cross-entropy, and the joint criterion.

Reductions are sums over the batch by default; ``reduction="mean"`` divides
both the value and the gradients by the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .tensor import as_matrix, check_finite


@dataclass
class TripletConfig:
    margin: float = 0.3
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


class BatchError(ValueError):
    """A batch violates the triplet-loss precondition."""


@dataclass
class TripletResult:
    loss: float
    grad: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    active: np.ndarray


def _euclidean(e: np.ndarray) -> np.ndarray:
    return squareform(pdist(e))


def triplet_batch_hard(embeddings, labels, cfg: TripletConfig | None = None) -> TripletResult:
    """Batch-hard triplet loss and its subgradient w.r.t. the embeddings.

    Mining ties go to the lowest index. At zero distance the norm's
    subgradient is taken as zero.
    """
    cfg = cfg or TripletConfig()
    e = as_matrix(embeddings)
    y = np.asarray(labels)
    n = len(e)
    if len(y) != n:
        raise BatchError(f"{n} embeddings but {len(y)} labels")
    # direct differences rather than the Gram expansion: exact zeros for
    # duplicate rows
    d = _euclidean(e)
    same = y[:, None] == y[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    for mask, what in ((pos_mask, "positive"), (neg_mask, "negative")):
        lacking = np.flatnonzero(~mask.any(axis=1))
        if len(lacking):
            i = lacking[0]
            raise BatchError(f"label {y[i].item()!r} (row {i}) has no {what} in the batch")
    # argmax/argmin return the first occurrence, which is the lowest index
    p = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    q = np.argmin(np.where(neg_mask, d, np.inf), axis=1)
    rows = np.arange(n)
    hinge = d[rows, p] - d[rows, q] + cfg.margin
    active = hinge > 0
    loss = float(hinge[active].sum())

    grad = np.zeros_like(e)
    a = np.flatnonzero(active)
    for other, sign in ((p[a], 1.0), (q[a], -1.0)):
        dist = d[a, other]
        ok = dist > 0
        u = (e[a[ok]] - e[other[ok]]) / dist[ok, None]
        np.add.at(grad, a[ok], sign * u)
        np.add.at(grad, other[ok], -sign * u)
    if cfg.reduction == "mean":
        loss /= n
        grad /= n
    return TripletResult(loss, grad, p, q, active)


@dataclass
class CEResult:
    loss: float
    grad_embeddings: np.ndarray
    grad_weight: np.ndarray


def softmax_ce(embeddings, labels, weight, reduction: str = "sum") -> CEResult:
    """Cross-entropy of ``softmax(e @ W)``; ``weight`` has shape (embed_dim, M)."""
    e = as_matrix(embeddings)
    w = as_matrix(weight)
    y = np.asarray(labels, dtype=np.int64)
    m = w.shape[1]
    if y.size and (y.min() < 0 or y.max() >= m):
        bad = y[(y < 0) | (y >= m)][0]
        raise ValueError(f"label {bad} out of range for a head with {m} classes")
    logits = e @ w
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(e))
    loss = float((lse - shifted[rows, y]).sum())
    probs = np.exp(shifted - lse[:, None])
    g = probs
    g[rows, y] -= 1.0
    if reduction == "mean":
        loss /= len(e)
        g /= len(e)
    return CEResult(loss, g @ w.T, e.T @ g)


def domain_loss(embeddings, labels, head_weight, cfg: TripletConfig | None = None):
    """``L = L_cls + L_tri`` on one domain's batch.

    Returns ``(loss, grad_embeddings, grad_head, parts)`` with ``parts`` the
    two unweighted terms.
    """
    cfg = cfg or TripletConfig()
    ce = softmax_ce(embeddings, labels, head_weight, cfg.reduction)
    tri = triplet_batch_hard(embeddings, labels, cfg)
    parts = {"ce": ce.loss, "triplet": tri.loss}
    return ce.loss + tri.loss, ce.grad_embeddings + tri.grad, ce.grad_weight, parts


def domain_step(encoder, x, labels, domain: str, cfg: TripletConfig | None = None) -> dict:
    """Forward one batch through ``domain``'s path, accumulate all gradients.

    Gradients are added to whatever the parameters already hold, so calling
    this once per domain and then stepping the optimizer yields the gradient
    of the summed objective.
    """
    head = encoder.heads[domain]
    if head is None:
        raise ValueError(f"no classifier head for domain {domain!r}")
    emb = encoder.forward(x, domain, "train")
    loss, g_emb, g_head, parts = domain_loss(emb, labels, head.weight.data, cfg)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite {domain} loss")
    head.weight.grad += g_head
    encoder.backward(g_emb, domain)
    return {"loss": loss, **parts}


def joint_loss(encoder, source_x, source_labels, target_x, target_labels,
               cfg: TripletConfig | None = None, joint_forward: bool | None = None) -> dict:
    """``L = L^S + L^T``: both terms enter with weight one.

    Accumulates the gradient of the sum into every reachable parameter. With
    shared batch-norm statistics the trunk processes the concatenated batch.
    """
    if target_labels is None or len(target_labels) == 0:
        raise ValueError("joint loss needs a non-empty pseudo-labelled target batch")
    if joint_forward is None:
        joint_forward = not encoder.cfg.domain_specific_bn
    if not joint_forward:
        src = domain_step(encoder, source_x, source_labels, "source", cfg)
        tgt = domain_step(encoder, target_x, target_labels, "target", cfg)
    else:
        es, et = encoder.forward_joint(source_x, target_x, "train")
        src_l, gs, ghs, src_parts = domain_loss(es, source_labels, encoder.heads["source"].weight.data, cfg)
        tgt_l, gt, ght, tgt_parts = domain_loss(et, target_labels, encoder.heads["target"].weight.data, cfg)
        encoder.heads["source"].weight.grad += ghs
        encoder.heads["target"].weight.grad += ght
        encoder.backward_joint(gs, gt)
        src = {"loss": src_l, **src_parts}
        tgt = {"loss": tgt_l, **tgt_parts}
    total = src["loss"] + tgt["loss"]
    check_finite(np.array([total]), "joint loss")
    return {"loss": total, "source": src, "target": tgt}
