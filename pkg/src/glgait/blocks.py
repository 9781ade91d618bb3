"""Backbone blocks, assembly, recognition head and model probes.

Activations are laid out channels-last ``(N, T, H, W, C)`` so the
convolutions reduce to single im2col GEMMs; reported shape traces use the
conventional ``(T, C, H, W)`` order.  The vision encoder stacks residual
blocks with two spatial convolutions around one temporal convolution; the
later stages swap the temporal convolution for a global-local temporal
module (pseudo-global attention + temporal conv).  Stages double channels
with widths ``(C, 2C, 4C, 8C)`` and downsample spatially at stages 2 and
3, so a 64x44 silhouette ends at 16x11.

The head is temporal max pooling, horizontal strip pooling (max + mean
per strip), one fully connected map per part, and a bottleneck of
per-part batchnorm feeding a bias-free classifier whose weight rows act
as class centres for the metric losses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tz
from .attention import AttentionConfig, ProjectionWeights, init_weights, pgta_forward
from .container import load_tensors, save_tensors
from .rng import stream
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container with train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, arr):
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, k=3, stride=1, pad=1, dtype=np.float32):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype),
                             requires_grad=True)
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return tz.conv2d_cl(x, self.weight, stride=self.stride, pad=self.pad)


class TemporalConv(Module):
    """Kernel-3 temporal convolution applied to ``(N, T, H, W, C)``."""

    def __init__(self, c_in, c_out, rng, k=3, dtype=np.float32):
        super().__init__()
        std = math.sqrt(2.0 / (c_in * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k)).astype(dtype),
                             requires_grad=True)

    def forward(self, x):
        return tz.conv1d_time_cl(x, self.weight, t_axis=1)


class BatchNorm(Module):
    """Batch normalisation with an explicit parameter shape and stat axes."""

    def __init__(self, shape, axes, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(shape, dtype=dtype))
        self.register_buffer("running_var", np.ones(shape, dtype=dtype))
        self.axes = tuple(axes)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return tz.batchnorm(x, self.gamma, self.beta, self.axes, eps=self.eps,
                            running=(self.running_mean, self.running_var),
                            training=self.training, momentum=self.momentum)


def _bn5(channels, dtype):
    return BatchNorm((1, 1, 1, 1, channels), axes=(0, 1, 2, 3), dtype=dtype)


class P3DBlock(Module):
    """Residual block: two spatial convs around a temporal conv.

    ``y1 = relu(bn(conv2d(x)))``, ``y2 = bn(conv1d(y1))``,
    ``y3 = bn(conv2d(relu(y1 + y2)))``, output ``relu(x + y3)`` with the
    residual projected 3x3 when the block changes width or stride.
    """

    def __init__(self, c_in, c_out, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype)
        self.bn1 = _bn5(c_out, dtype)
        self.tconv = TemporalConv(c_out, c_out, rng, dtype=dtype)
        self.bn_t = _bn5(c_out, dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype=dtype)
        self.bn2 = _bn5(c_out, dtype)
        if c_in != c_out or stride != 1:
            self.proj = Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype)
            self.bn_p = _bn5(c_out, dtype)
        else:
            self.proj = None

    def forward(self, x):
        y1 = tz.relu(self.bn1(self.conv1(x)))
        y2 = self.bn_t(self.tconv(y1))
        y3 = self.bn2(self.conv2(tz.relu(y1 + y2)))
        res = x if self.proj is None else self.bn_p(self.proj(x))
        return tz.relu(res + y3)


class GLTM(Module):
    """Global-local temporal module over token maps ``(N, L, T, C)``.

    Pseudo-global temporal attention produces ``x_g``; a kernel-3
    temporal convolution of ``x_g + x`` followed by ReLU and a linear
    sub-update is added back onto ``x_g``.
    """

    def __init__(self, channels, rng, heads=4, head_dim=32, mlp_dim=None,
                 patch=3, dtype=np.float32):
        super().__init__()
        mlp_dim = channels if mlp_dim is None else mlp_dim
        self.cfg = AttentionConfig(heads=heads, head_dim=head_dim,
                                   patch_temporal=patch, patch_spatial=1,
                                   channels=channels)
        w = init_weights("pgta", self.cfg, rng, dtype=dtype)
        for i, u in enumerate(w.u_qkv):
            setattr(self, f"qkv{i}", u)
        self.u_msa = w.u_msa
        std = math.sqrt(2.0 / (channels * 3))
        self.tconv = Tensor(rng.normal(0.0, std, size=(mlp_dim, channels, 3)).astype(dtype),
                            requires_grad=True)
        lim = math.sqrt(6.0 / (mlp_dim + channels))
        self.u_mlp = Tensor(rng.uniform(-lim, lim, size=(mlp_dim, channels)).astype(dtype),
                            requires_grad=True)

    def attention_weights(self):
        return ProjectionWeights([getattr(self, f"qkv{i}") for i in range(self.cfg.heads)],
                                 self.u_msa)

    def forward(self, x, counter=None):
        n, l, t, c = x.shape
        flat = tz.reshape(x, (n * l, t, c))
        x_g = tz.reshape(pgta_forward(flat, self.cfg, self.attention_weights(), counter),
                         (n, l, t, c))
        x_l = tz.relu(tz.conv1d_time_cl(x_g + x, self.tconv, t_axis=2))
        return tz.matmul(x_l, self.u_mlp) + x_g


class GL3DBlock(Module):
    """Residual block with two spatial convs around a GLTM."""

    def __init__(self, c_in, c_out, rng, stride=1, heads=4, head_dim=32,
                 patch=3, dtype=np.float32):
        super().__init__()
        self.conv_a = Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype)
        self.bn_a = _bn5(c_out, dtype)
        self.gltm = GLTM(c_out, rng, heads=heads, head_dim=head_dim,
                         mlp_dim=c_out, patch=patch, dtype=dtype)
        self.conv_b = Conv2d(c_out, c_out, rng, dtype=dtype)
        self.bn_b = _bn5(c_out, dtype)
        if c_in != c_out or stride != 1:
            self.proj = Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype)
            self.bn_p = _bn5(c_out, dtype)
        else:
            self.proj = None

    def forward(self, x):
        y = tz.relu(self.bn_a(self.conv_a(x)))
        n, t, h, w, c = y.shape
        tokens = tz.reshape(tz.transpose(y, (0, 2, 3, 1, 4)), (n, h * w, t, c))
        z = self.gltm(tokens)
        z = tz.transpose(tz.reshape(z, (n, h, w, t, c)), (0, 3, 1, 2, 4))
        z = self.bn_b(self.conv_b(z))
        res = x if self.proj is None else self.bn_p(self.proj(x))
        return tz.relu(res + z)


@dataclass(frozen=True)
class BackboneConfig:
    """Channel widths, block counts and head hyperparameters."""

    base_channels: int = 32
    blocks_per_stage: tuple = (1, 4, 4, 1)
    patch_temporal: int = 3
    heads: int = 4
    head_dim: int = 0          # 0 means "stage-1 width"
    parts: int = 16
    embed_dim: int = 256
    num_classes: int = 20
    input_scale: int = 1
    stem_stride: int = 1
    stem_pool: int = 1
    stage1_stride: int = 1
    dtype: str = "f64"

    def __post_init__(self):
        if self.base_channels < 1 or self.parts < 1 or self.num_classes < 1:
            raise ValueError("config extents must be positive")
        if len(self.blocks_per_stage) != 4:
            raise ValueError("expected four stages")

    @property
    def stage_channels(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def resolved_head_dim(self):
        return self.head_dim if self.head_dim else self.base_channels

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


CAPACITIES = {
    "B": dict(base_channels=32),
    "L": dict(base_channels=64),
    "H": dict(base_channels=128),
    # Desk-scale preset: enough model to train on the synthetic corpus in
    # seconds per hundred iterations, same topology otherwise.
    "tiny": dict(base_channels=4, blocks_per_stage=(1, 1, 1, 1), input_scale=2,
                 stem_stride=2, parts=4, embed_dim=16, dtype="f32"),
}


def capacity_config(name, **overrides):
    if name not in CAPACITIES:
        raise ValueError(f"unknown capacity {name!r}; expected one of {sorted(CAPACITIES)}")
    params = dict(CAPACITIES[name])
    params.update(overrides)
    return BackboneConfig(**params)


class Backbone(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        c1, c2, c3, c4 = cfg.stage_channels
        dt = cfg.np_dtype()
        d = cfg.resolved_head_dim()
        self.stem = Conv2d(1, c1, rng, stride=cfg.stem_stride,
                           pad=1, dtype=dt)
        self.stem_bn = _bn5(c1, dt)
        b1, b2, b3, b4 = cfg.blocks_per_stage

        def p3d_stage(n, c_in, c, first_stride):
            mods = [P3DBlock(c_in, c, rng, stride=first_stride, dtype=dt)]
            mods += [P3DBlock(c, c, rng, dtype=dt) for _ in range(n - 1)]
            return mods

        def gl3d_stage(n, c_in, c, first_stride):
            mk = lambda ci, s: GL3DBlock(ci, c, rng, stride=s, heads=cfg.heads,
                                         head_dim=d, patch=cfg.patch_temporal, dtype=dt)
            return [mk(c_in, first_stride)] + [mk(c, 1) for _ in range(n - 1)]

        for i, blk in enumerate(p3d_stage(b1, c1, c1, cfg.stage1_stride)):
            setattr(self, f"stage1_{i}", blk)
        for i, blk in enumerate(p3d_stage(b2, c1, c2, 2)):
            setattr(self, f"stage2_{i}", blk)
        for i, blk in enumerate(gl3d_stage(b3, c2, c3, 2)):
            setattr(self, f"stage3_{i}", blk)
        for i, blk in enumerate(gl3d_stage(b4, c3, c4, 1)):
            setattr(self, f"stage4_{i}", blk)
        self.blocks_per_stage = cfg.blocks_per_stage
        self.stem_pool = cfg.stem_pool

    def stage_blocks(self, idx):
        return [self._modules[f"stage{idx}_{i}"] for i in range(self.blocks_per_stage[idx - 1])]

    def forward(self, x, trace=None):
        def record(y):
            if trace is not None:
                n, t, h, w, c = y.shape
                trace.append((t, c, h, w))

        y = self.stem(x)
        if self.stem_pool > 1:
            y = tz.avg_pool2d_cl(y, self.stem_pool)
        y = tz.relu(self.stem_bn(y))
        record(y)
        for s in (1, 2, 3, 4):
            for blk in self.stage_blocks(s):
                y = blk(y)
            record(y)
        return y


class Head(Module):
    """Temporal max pool, horizontal strip pool, per-part FC and bottleneck."""

    def __init__(self, channels, parts, embed_dim, num_classes, rng, dtype=np.float32):
        super().__init__()
        lim = math.sqrt(6.0 / (channels + embed_dim))
        self.fc = Tensor(rng.uniform(-lim, lim, size=(parts, channels, embed_dim)).astype(dtype),
                         requires_grad=True)
        self.bn = BatchNorm((1, parts, embed_dim), axes=(0,), dtype=dtype)
        lim = math.sqrt(6.0 / (embed_dim + num_classes))
        # rows double as class centres, hence (parts, classes, embed)
        self.classifier = Tensor(
            rng.uniform(-lim, lim, size=(parts, num_classes, embed_dim)).astype(dtype),
            requires_grad=True)
        self.parts = parts

    def centers(self):
        """Class centres ``(num_classes, parts, embed_dim)`` for the losses."""
        return tz.transpose(self.classifier, (1, 0, 2))

    def forward(self, feat):
        n, t, h, w, c = feat.shape
        if h % self.parts:
            raise ShapeError(f"feature height {h} not divisible by parts {self.parts}")
        pooled = tz.max_pool_axis(feat, 1)                     # (N, H, W, C)
        strips = tz.reshape(pooled, (n, self.parts, (h // self.parts) * w, c))
        part_vec = tz.max_pool_axis(strips, 2) + tz.mean_pool_axis(strips, 2)
        emb = tz.matmul(tz.reshape(part_vec, (n, self.parts, 1, c)), self.fc)
        emb = tz.reshape(emb, (n, self.parts, -1))
        neck = self.bn(emb)
        logits = tz.matmul(tz.reshape(neck, (n, self.parts, 1, -1)),
                           tz.transpose(self.classifier, (0, 2, 1)))
        return emb, tz.reshape(logits, (n, self.parts, -1))


class GaitModel(Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        rng = stream(seed, "model-init", cfg.base_channels, cfg.parts)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.head = Head(cfg.stage_channels[-1], cfg.parts, cfg.embed_dim,
                         cfg.num_classes, rng, dtype=cfg.np_dtype())

    def features(self, x, trace=None):
        """Backbone feature map ``(N, T, H, W, C)`` for silhouettes ``(N, T, H, W)``."""
        if x.ndim != 4:
            raise ShapeError(f"expected silhouettes (N, T, H, W), got {x.shape}")
        n, t, h, w = x.shape
        y = tz.reshape(x, (n, t, h, w, 1))
        if self.cfg.input_scale > 1:
            y = tz.avg_pool2d_cl(y, self.cfg.input_scale)
        return self.backbone(y, trace=trace)

    def forward(self, x, trace=None):
        return self.head(self.features(x, trace=trace))


def build_backbone(cfg, seed=0):
    """Assemble the full model for ``cfg`` with deterministic init."""
    return GaitModel(cfg, seed=seed)


def shape_trace(cfg, t=30, h=64, w=44):
    """Per-stage activation shapes ``(T, C, H, W)`` for a single sequence."""
    model = build_backbone(cfg, seed=0).eval()
    x = Tensor(np.zeros((1, t, h, w), dtype=cfg.np_dtype()))
    trace = []
    with tz.no_grad():
        model.features(x, trace=trace)
    return trace


def param_count(model, include_head=False):
    """Exact parameter count; the head is the per-part FC + bottleneck."""
    total = 0
    for name, p in model.named_parameters():
        if not include_head and name.startswith("head."):
            continue
        total += p.size
    return total


def count_params(model, include_head=False):
    """Parameter count in millions (see ``param_count`` for the raw total)."""
    return param_count(model, include_head) / 1e6


def silhouette_scores(model, frames):
    """Per-frame share of temporal-max wins, ties split equally.

    ``frames`` is ``(T, H, W)``; the scores are nonnegative and sum to 1.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ShapeError(f"expected frames (T, H, W) with T >= 1, got {frames.shape}")
    was_training = model.training
    model.eval()
    with tz.no_grad():
        feat = model.features(Tensor(frames[None].astype(model.cfg.np_dtype()))).data[0]
    model.train(was_training)
    peak = feat.max(axis=0, keepdims=True)
    ties = feat == peak                       # (T, C, H, W)
    share = ties / ties.sum(axis=0, keepdims=True)
    return share.reshape(share.shape[0], -1).sum(axis=1) / feat[0].size


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model, path):
    entries = {"config": np.frombuffer(
        json.dumps(asdict(model.cfg), sort_keys=True).encode(), dtype=np.uint8).copy()}
    for name, p in model.named_parameters():
        entries["param/" + name] = p.data
    for name, b in model.named_buffers():
        entries["buffer/" + name] = b
    save_tensors(path, entries)


def load_checkpoint(path):
    entries = load_tensors(path)
    if "config" not in entries:
        raise ShapeError(f"{path}: checkpoint missing config manifest")
    raw = json.loads(bytes(entries["config"]).decode())
    raw["blocks_per_stage"] = tuple(raw["blocks_per_stage"])
    cfg = BackboneConfig(**raw)
    model = build_backbone(cfg, seed=0)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for key, arr in entries.items():
        if key == "config":
            continue
        kind, name = key.split("/", 1)
        target = params if kind == "param" else buffers
        if name not in target:
            raise ShapeError(f"{path}: unexpected entry {key!r}")
        if target[name].shape != arr.shape:
            raise ShapeError(f"{path}: shape mismatch for {name}: "
                             f"{arr.shape} vs {target[name].shape}")
        if kind == "param":
            target[name].data = arr.astype(cfg.np_dtype(), copy=False)
        else:
            target[name][...] = arr
        seen.add(kind + "/" + name)
    missing = ({"param/" + n for n in params} | {"buffer/" + n for n in buffers}) - seen
    if missing:
        raise ShapeError(f"{path}: checkpoint missing entries {sorted(missing)[:3]}")
    return model
