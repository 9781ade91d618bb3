"""Metric and classification losses over per-part embeddings.

Embeddings arrive as ``(B, parts, d)`` with integer identity labels and,
where centres are involved, a ``(num_classes, parts, d)`` centre matrix
(the bottleneck classifier rows).  Every loss is computed independently
per horizontal part and averaged over parts, so its scale does not grow
with model capacity.

The triplet loss is the batch-all form: for each anchor, every
(positive, negative) pair contributes ``max(D+ - D- + m, 0)`` and the sum
is averaged over the batch.  Its centre-augmented variant extends each
anchor's positive set with the anchor's class centre, which both pulls
samples toward their centre and enlarges the positive set without
enlarging the batch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import Tensor

# keeps the distance gradient finite when two embeddings coincide
_DIST_EPS = 1e-12


def _as_labels(labels, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ValueError(f"labels must be shape ({batch},), got {labels.shape}")
    return labels.astype(np.int64)


def pairwise_distances(emb):
    """Euclidean distances per part: ``(B, parts, d) -> (B, B, parts)``."""
    b, parts, d = emb.shape
    diff = tz.reshape(emb, (b, 1, parts, d)) - tz.reshape(emb, (1, b, parts, d))
    sq = tz.sum_axis(tz.square(diff), axis=3)
    return tz.sqrt(sq + tz.Tensor(np.full((), _DIST_EPS, emb.dtype)))


def center_distances(emb, labels, centers):
    """Distance of each embedding to its own class centre, per part."""
    b, parts, d = emb.shape
    own = centers[labels]                       # (B, parts, d) gather
    diff = emb - own
    sq = tz.sum_axis(tz.square(diff), axis=2)
    return tz.sqrt(sq + tz.Tensor(np.full((), _DIST_EPS, emb.dtype)))


def _pair_masks(labels):
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    neg = ~same
    return pos, neg


def triplet_loss(emb, labels, margin=0.2):
    """Batch-all triplet loss; single-class batches are defined as 0."""
    b = emb.shape[0]
    labels = _as_labels(labels, b)
    dist = pairwise_distances(emb)              # (B, B, parts)
    pos, neg = _pair_masks(labels)
    # hinge over all (anchor, positive, negative) triples
    term = tz.reshape(dist, (b, b, 1, -1)) - tz.reshape(dist, (b, 1, b, -1))
    hinge = tz.relu(term + tz.Tensor(np.full((), margin, emb.dtype)))
    mask = (pos[:, :, None] & neg[:, None, :]).astype(emb.numpy().dtype)
    total = tz.sum_axis(hinge * Tensor(mask[..., None]), axis=(0, 1, 2))
    return tz.mean_axis(total) * (1.0 / b)


def ctl(emb, labels, centers, margin=0.2, center_grad=True):
    """Centre-augmented triplet loss.

    The positive set of each anchor is the batch positives plus the
    anchor's class centre; negatives are all other-identity samples.
    ``center_grad=False`` stops the gradient into the centre matrix.
    """
    b = emb.shape[0]
    labels = _as_labels(labels, b)
    if int(labels.max()) >= centers.shape[0]:
        raise ValueError(f"label {labels.max()} has no centre "
                         f"(got {centers.shape[0]} centres)")
    if not center_grad:
        centers = centers.detach()
    base = triplet_loss(emb, labels, margin)
    dist = pairwise_distances(emb)
    dist_c = center_distances(emb, labels, centers)    # (B, parts)
    _, neg = _pair_masks(labels)
    term = tz.reshape(dist_c, (b, 1, -1)) - dist
    hinge = tz.relu(term + tz.Tensor(np.full((), margin, emb.dtype)))
    mask = neg.astype(emb.numpy().dtype)
    total = tz.sum_axis(hinge * Tensor(mask[..., None]), axis=(0, 1))
    return base + tz.mean_axis(total) * (1.0 / b)


def center_loss(emb, labels, centers):
    """Mean squared distance of each embedding to its class centre."""
    b = emb.shape[0]
    labels = _as_labels(labels, b)
    own = centers[labels]
    sq = tz.sum_axis(tz.square(emb - own), axis=2)     # (B, parts)
    return tz.mean_axis(sq)


def triplet_center_loss(emb, labels, centers, margin=0.2):
    """Hinge between own-centre distance and the nearest other centre."""
    b, parts, d = emb.shape
    labels = _as_labels(labels, b)
    ncls = centers.shape[0]
    # distances to every centre: (B, ncls, parts)
    diff = tz.reshape(emb, (b, 1, parts, d)) - tz.reshape(centers, (1, ncls, parts, d))
    dist = tz.sqrt(tz.sum_axis(tz.square(diff), axis=3)
                   + tz.Tensor(np.full((), _DIST_EPS, emb.dtype)))
    own_mask = np.zeros((b, ncls, 1), dtype=bool)
    own_mask[np.arange(b), labels] = True
    own = tz.sum_axis(dist * Tensor(own_mask.astype(emb.numpy().dtype)), axis=1)
    # push the own class out of the min over other centres
    big = np.where(own_mask, emb.dtype.type(1e30), emb.dtype.type(0))
    nearest_other = -tz.max_pool_axis(-(dist + Tensor(big)), 1)
    hinge = tz.relu(own - nearest_other + tz.Tensor(np.full((), margin, emb.dtype)))
    return tz.mean_axis(hinge)


def cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over batch and parts."""
    b, parts, ncls = logits.shape
    labels = _as_labels(labels, b)
    if labels.min() < 0 or labels.max() >= ncls:
        raise ValueError(f"label out of range for {ncls} classes")
    lse = tz.logsumexp(logits, axis=2)                 # (B, parts)
    picked = logits[np.arange(b)[:, None], np.arange(parts)[None, :], labels[:, None]]
    return tz.mean_axis(lse - picked)


def combined(metric, ce, alpha=1.0, beta=1.0):
    """Weighted total ``alpha * metric + beta * ce``."""
    return metric * float(alpha) + ce * float(beta)
