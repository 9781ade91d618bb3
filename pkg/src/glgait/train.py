"""Toy training loop: SGD with momentum on the combined objective.

Batches follow the identities-times-sequences recipe; the metric loss is
selectable so the centre-augmented triplet loss can be compared against
its plain, centre-only and triplet-centre baselines under an otherwise
identical run.  Rank-1 evaluation embeds the held-out identities and
scores leave-one-out nearest-neighbour matches over the concatenated
part embeddings.

Every run is a pure function of (dataset, config): batch sampling, frame
sampling and weight init all derive from the run seed, so re-runs emit
byte-identical artifacts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import losses as L
from . import tensor as tz
from .blocks import build_backbone, capacity_config, save_checkpoint
from .rng import stream
from .synthdata import sample_fixed_length
from .tensor import Tensor

LOSSES = ("ctl", "tl", "cl", "tcl")


@dataclass(frozen=True)
class TrainConfig:
    capacity: str = "tiny"
    loss: str = "ctl"
    seed: int = 0
    iters: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (1200, 1700)
    lr_decay: float = 0.1
    batch_ids: int = 2
    batch_seqs: int = 2
    frames: int = 30
    margin: float = 0.2
    alpha: float = 1.0
    beta: float = 1.0
    center_grad: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch_ids < 1 or self.batch_seqs < 1 or self.iters < 0:
            raise ValueError("batch spec and iteration count must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + p.data * p.dtype.type(self.weight_decay)
            v *= self.momentum
            v += g
            p.data = p.data - p.dtype.type(self.lr) * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def metric_loss(name, emb, labels, centers, margin, center_grad=True):
    if name == "tl":
        return L.triplet_loss(emb, labels, margin)
    if name == "ctl":
        return L.ctl(emb, labels, centers, margin, center_grad=center_grad)
    if name == "cl":
        return L.center_loss(emb, labels, centers)
    if name == "tcl":
        return L.triplet_center_loss(emb, labels, centers, margin)
    raise ValueError(f"unknown metric loss {name!r}")


def _batch(dataset, cfg, it, by_id, label_of, dtype):
    # one stream per iteration covers identity, sequence and frame draws
    rng = stream(cfg.seed, "batch", it)
    ids = rng.choice(len(by_id), size=min(cfg.batch_ids, len(by_id)), replace=False)
    frames, labels = [], []
    for ident_idx in ids:
        ident, seqs = by_id[int(ident_idx)]
        take = rng.choice(len(seqs), size=cfg.batch_seqs,
                          replace=len(seqs) < cfg.batch_seqs)
        for s in take:
            seq = seqs[int(s)]
            if seq.length >= cfg.frames:
                idx = np.sort(rng.choice(seq.length, size=cfg.frames, replace=False))
            else:
                idx = np.sort(np.arange(cfg.frames) % seq.length)
            frames.append(seq.frames[idx].astype(dtype))
            labels.append(label_of[ident])
    return Tensor(np.stack(frames)), np.asarray(labels)


def embed_sequences(model, seqs, n_frames=30, seed=0, chunk=8):
    """Concatenated part embeddings, one row per sequence."""
    dtype = model.cfg.np_dtype()
    rows = []
    model.eval()
    with tz.no_grad():
        for start in range(0, len(seqs), chunk):
            batch = seqs[start:start + chunk]
            arr = np.stack([
                sample_fixed_length(s, n_frames, seed=seed + 7919 * (start + i))
                .frames.astype(dtype)
                for i, s in enumerate(batch)])
            emb, _ = model(Tensor(arr))
            rows.append(emb.data.reshape(len(batch), -1))
    return np.concatenate(rows, axis=0)


def evaluate(model, dataset, n_frames=30, seed=0):
    """Leave-one-out Rank-1 plus intra/inter class distance statistics."""
    seqs = dataset.split("test")
    emb = embed_sequences(model, seqs, n_frames=n_frames, seed=seed)
    labels = np.asarray([s.identity for s in seqs])
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    np.fill_diagonal(dist, np.inf)
    nearest = dist.argmin(axis=1)
    rank1 = float(np.mean(labels[nearest] == labels))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(seqs), dtype=bool)
    finite = np.where(np.isfinite(dist), dist, 0.0)
    intra = float(finite[same & off].mean())
    inter = float(finite[~same].mean())
    return {"rank1": rank1, "mean_intra": intra, "mean_inter": inter,
            "probes": int(len(seqs))}


def train_toy(dataset, cfg, out_dir=None):
    """Train on the corpus' training identities; returns the run report.

    Artifacts written to ``out_dir`` (when given): ``losses.csv`` with one
    row per iteration, ``model.ckpt`` and ``eval.json``.
    """
    train_ids = sorted(dataset.train_ids)
    label_of = {ident: i for i, ident in enumerate(train_ids)}
    by_id = [(ident, [s for s in dataset.sequences if s.identity == ident])
             for ident in train_ids]
    if not all(seqs for _, seqs in by_id):
        raise ValueError("every training identity needs at least one sequence")

    model_cfg = capacity_config(cfg.capacity, num_classes=len(train_ids))
    model = build_backbone(model_cfg, seed=cfg.seed)
    model.train()
    dtype = model_cfg.np_dtype()
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    log = ["iteration,l_ctl,l_ce,total"]

    lr = cfg.lr
    for it in range(cfg.iters):
        if it in cfg.milestones:
            lr *= cfg.lr_decay
            opt.lr = lr
        x, labels = _batch(dataset, cfg, it, by_id, label_of, dtype)
        emb, logits = model(x)
        centers = model.head.centers()
        lm = metric_loss(cfg.loss, emb, labels, centers, cfg.margin,
                         center_grad=cfg.center_grad)
        lce = L.cross_entropy(logits, labels)
        total = L.combined(lm, lce, cfg.alpha, cfg.beta)
        opt.zero_grad()
        total.backward()
        opt.step()
        log.append(f"{it},{lm.item():.9g},{lce.item():.9g},{total.item():.9g}")

    report = evaluate(model, dataset, n_frames=cfg.frames, seed=cfg.seed)
    report["loss_final"] = float(log[-1].rsplit(",", 1)[-1]) if cfg.iters else None
    report["config"] = asdict(cfg)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "losses.csv"), "w") as fh:
            fh.write("\n".join(log) + "\n")
        save_checkpoint(model, os.path.join(out_dir, "model.ckpt"))
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return model, report
