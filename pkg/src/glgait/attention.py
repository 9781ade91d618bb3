"""Temporal self-attention variants over a shared ``(L, T, C)`` layout.

``pgta_forward`` is the pseudo-global temporal attention used by the
network: the sequence is cut into ``T/P`` patches of ``P`` consecutive
frames, and for every within-patch offset the attention mixes the patches
at that offset.  Each token element therefore sees the whole duration at
stride ``P`` — a pseudo-global view that a kernel-``P`` temporal
convolution later welds into a truly global one.

The three comparison operators (joint spatio-temporal attention,
factorised temporal attention over spatio-temporal tokens taken per
location, and the patch/token-separated variant) run over the same input
layout so complexity and output claims are directly comparable.

All four preserve the input shape, use no positional encoding and no
projection biases.  Forwards are pure; weights may be shared read-only
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .container import load_tensors, save_tensors
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    """Head count, per-head width and patch extents for one variant."""

    heads: int = 4
    head_dim: int = 32
    patch_temporal: int = 3
    patch_spatial: int = 4
    channels: int = 128

    def __post_init__(self):
        for field in ("heads", "head_dim", "patch_temporal", "patch_spatial", "channels"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be a positive int")

    def token_dim(self, variant):
        if variant in ("pgta", "mobilevit"):
            return self.channels
        if variant == "factorised":
            return self.patch_temporal * self.channels
        if variant == "mhsa":
            return self.patch_spatial * self.patch_temporal * self.channels
        raise ValueError(f"unknown attention variant {variant!r}")


@dataclass
class ProjectionWeights:
    """Per-head QKV projections plus the shared output projection."""

    u_qkv: list  # k tensors of shape (token_dim, 3*D)
    u_msa: Tensor  # (k*D, token_dim)

    def tensors(self):
        return list(self.u_qkv) + [self.u_msa]


class MultiplyCounter:
    """Per-run accumulator of real multiplies in the score/apply path."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


VARIANTS = ("pgta", "mhsa", "factorised", "mobilevit")


def init_weights(variant, cfg, seed_stream, dtype=np.float64):
    """Glorot-uniform projection weights for ``variant`` under ``cfg``."""
    tok = cfg.token_dim(variant)
    d = cfg.head_dim
    heads = []
    for _ in range(cfg.heads):
        lim = math.sqrt(6.0 / (tok + 3 * d))
        heads.append(Tensor(seed_stream.uniform(-lim, lim, size=(tok, 3 * d)).astype(dtype),
                            requires_grad=True))
    lim = math.sqrt(6.0 / (cfg.heads * d + tok))
    u_msa = Tensor(seed_stream.uniform(-lim, lim, size=(cfg.heads * d, tok)).astype(dtype),
                   requires_grad=True)
    return ProjectionWeights(heads, u_msa)


def _validate(x, cfg, w, variant):
    if x.ndim != 3:
        raise ShapeError(f"attention input must be (L, T, C), got {x.shape}")
    l, t, c = x.shape
    if c != cfg.channels:
        raise ShapeError(f"input channels {c} != config channels {cfg.channels}")
    if t % cfg.patch_temporal:
        raise ShapeError(f"T={t} not divisible by temporal patch size {cfg.patch_temporal}")
    if variant in ("mhsa", "mobilevit") and l % cfg.patch_spatial:
        raise ShapeError(f"L={l} not divisible by spatial patch size {cfg.patch_spatial}")
    tok = cfg.token_dim(variant)
    if len(w.u_qkv) != cfg.heads:
        raise ShapeError(f"expected {cfg.heads} per-head projections, got {len(w.u_qkv)}")
    for i, u in enumerate(w.u_qkv):
        if u.shape != (tok, 3 * cfg.head_dim):
            raise ShapeError(f"head {i} projection {u.shape} != {(tok, 3 * cfg.head_dim)}")
        if not np.all(np.isfinite(u.data)):
            raise ValueError(f"non-finite values in head {i} projection")
    if w.u_msa.shape != (cfg.heads * cfg.head_dim, tok):
        raise ShapeError(f"output projection {w.u_msa.shape} != "
                         f"{(cfg.heads * cfg.head_dim, tok)}")
    if not np.all(np.isfinite(w.u_msa.data)):
        raise ValueError("non-finite values in output projection")


def _attend(tokens, cfg, w, counter):
    """Multi-head attention over the second-to-last axis of ``tokens``.

    ``tokens`` has shape ``(*batch, n, token_dim)``; attention is square
    over ``n`` and the output has the same shape.  Heads are evaluated as
    one batched matmul over a stacked projection.
    """
    d = cfg.head_dim
    heads = cfg.heads
    n = tokens.shape[-2]
    batch_shape = tokens.shape[:-2]
    batch = int(np.prod(batch_shape, dtype=np.int64))
    nb = len(batch_shape)

    u_all = w.u_qkv[0] if heads == 1 else tz.concat(w.u_qkv, axis=1)  # (tok, heads*3D)
    qkv = tz.matmul(tokens, u_all)
    qkv = tz.reshape(qkv, batch_shape + (n, heads, 3 * d))
    qkv = tz.moveaxis(qkv, -2, 0)                   # (heads, *batch, n, 3D)
    q = qkv[..., :d]
    k = qkv[..., d:2 * d]
    v = qkv[..., 2 * d:]
    scores = tz.matmul(q, tz.moveaxis(k, -1, -2)) * (1.0 / math.sqrt(d))
    if counter is not None:
        counter.add(heads * batch * n * n * d)      # q @ k^T
    attn = tz.softmax(scores, axis=-1)
    mixed = tz.matmul(attn, v)                      # (heads, *batch, n, D)
    if counter is not None:
        counter.add(heads * batch * n * n * d)      # A @ v
    mixed = tz.reshape(tz.moveaxis(mixed, 0, nb + 1), batch_shape + (n, heads * d))
    return tz.matmul(mixed, w.u_msa)


def pgta_forward(x, cfg, w, counter=None):
    """Pseudo-global temporal attention on ``(L, T, C)``.

    Per location and per within-patch offset, a ``(T/P, T/P)`` attention
    mixes the temporal patches; heads are concatenated and projected back
    to ``C``.
    """
    _validate(x, cfg, w, "pgta")
    l, t, c = x.shape
    p = cfg.patch_temporal
    n = t // p
    xr = tz.transpose(tz.reshape(x, (l, n, p, c)), (0, 2, 1, 3))  # (L, P, n, C)
    out = _attend(xr, cfg, w, counter)
    return tz.reshape(tz.transpose(out, (0, 2, 1, 3)), (l, t, c))


def mhsa_spatiotemporal_forward(x, cfg, w, counter=None):
    """Joint attention over all ``LT/(P_l P)`` spatio-temporal tokens."""
    _validate(x, cfg, w, "mhsa")
    l, t, c = x.shape
    pl, p = cfg.patch_spatial, cfg.patch_temporal
    nl, nt = l // pl, t // p
    tok = pl * p * c
    xr = tz.reshape(x, (nl, pl, nt, p, c))
    xr = tz.transpose(xr, (0, 2, 1, 3, 4))          # (nl, nt, P_l, P, C)
    tokens = tz.reshape(xr, (nl * nt, tok))
    out = _attend(tokens, cfg, w, counter)
    out = tz.transpose(tz.reshape(out, (nl, nt, pl, p, c)), (0, 2, 1, 3, 4))
    return tz.reshape(out, (l, t, c))


def factorised_temporal_forward(x, cfg, w, counter=None):
    """Temporal-patch tokens attended independently per spatial location."""
    _validate(x, cfg, w, "factorised")
    l, t, c = x.shape
    p = cfg.patch_temporal
    n = t // p
    tokens = tz.reshape(x, (l, n, p * c))
    out = _attend(tokens, cfg, w, counter)
    return tz.reshape(out, (l, t, c))


def mobilevit_attention_forward(x, cfg, w, counter=None):
    """Patch-separated attention across patches for each within-patch offset.

    Spatial and temporal patching both apply; tokens keep size ``C``.
    """
    _validate(x, cfg, w, "mobilevit")
    l, t, c = x.shape
    pl, p = cfg.patch_spatial, cfg.patch_temporal
    nl, nt = l // pl, t // p
    xr = tz.reshape(x, (nl, pl, nt, p, c))
    xr = tz.transpose(xr, (1, 3, 0, 2, 4))          # (P_l, P, nl, nt, C)
    tokens = tz.reshape(xr, (pl, p, nl * nt, c))
    out = _attend(tokens, cfg, w, counter)
    out = tz.transpose(tz.reshape(out, (pl, p, nl, nt, c)), (2, 0, 3, 1, 4))
    return tz.reshape(out, (l, t, c))


FORWARDS = {
    "pgta": pgta_forward,
    "mhsa": mhsa_spatiotemporal_forward,
    "factorised": factorised_temporal_forward,
    "mobilevit": mobilevit_attention_forward,
}


def save_weights(path, variant, w):
    """Store projection weights under the container naming convention."""
    entries = {}
    for i, u in enumerate(w.u_qkv):
        entries[f"attn/{variant}/head{i}/Uqkv"] = u.data
    entries[f"attn/{variant}/Umsa"] = w.u_msa.data
    save_tensors(path, entries)


def load_weights(path, variant, cfg):
    entries = load_tensors(path)
    heads = []
    for i in range(cfg.heads):
        heads.append(Tensor(entries[f"attn/{variant}/head{i}/Uqkv"], requires_grad=True))
    u_msa = Tensor(entries[f"attn/{variant}/Umsa"], requires_grad=True)
    w = ProjectionWeights(heads, u_msa)
    tok = cfg.token_dim(variant)
    for u in heads:
        if u.shape != (tok, 3 * cfg.head_dim):
            raise ShapeError(f"loaded head projection {u.shape} does not match config")
    if u_msa.shape != (cfg.heads * cfg.head_dim, tok):
        raise ShapeError(f"loaded output projection {u_msa.shape} does not match config")
    return w
