"""Central-difference verification suite over every differentiable surface.

Each entry builds a deliberately small probe in f64, evaluates a weighted
scalar of the op's output (weighting avoids analytically-zero gradient
directions, e.g. batchnorm's scale invariance) and compares reverse-mode
gradients against central differences.  ReLU inputs are kept away from
the kink.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as tz
from .attention import FORWARDS, AttentionConfig, init_weights
from .blocks import GL3DBlock, GLTM, P3DBlock
from .rng import stream
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, gap=1e-2):
    signs = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(gap, 1.0, size=shape)


def _weigher(rng):
    """Weighted-sum reducer whose weights freeze on first use.

    grad_check re-evaluates the probe many times; the weights must be
    identical on every call or the comparison is meaningless.
    """
    frozen = {}

    def apply(out):
        if "w" not in frozen:
            frozen["w"] = Tensor(rng.normal(size=out.shape))
        return tz.sum_axis(out * frozen["w"])

    return apply


def _leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_matmul(seed):
    rng = stream(seed, "gc-matmul")
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (2, 4, 5))
    wsum = _weigher(rng)
    return grad_check(lambda a, b: wsum(tz.matmul(a, b)), [a, b])


def _check_softmax(seed):
    rng = stream(seed, "gc-softmax")
    x = _leaf(rng, (3, 6))
    wsum = _weigher(rng)
    return grad_check(lambda x: wsum(tz.softmax(x, 1)), [x])


def _check_logsumexp(seed):
    rng = stream(seed, "gc-lse")
    x = _leaf(rng, (3, 6))
    return grad_check(lambda x: tz.sum_axis(tz.logsumexp(x, 1)), [x])


def _check_relu(seed):
    rng = stream(seed, "gc-relu")
    x = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    wsum = _weigher(rng)
    return grad_check(lambda x: wsum(tz.relu(x)), [x])


def _check_conv1d(seed):
    rng = stream(seed, "gc-conv1d")
    x, w = _leaf(rng, (2, 5, 3)), _leaf(rng, (3, 2, 3))
    wsum = _weigher(rng)
    return grad_check(lambda x, w: wsum(tz.conv1d_temporal(x, w)), [x, w])


def _check_conv2d(seed):
    rng = stream(seed, "gc-conv2d")
    x, w = _leaf(rng, (1, 2, 4, 4)), _leaf(rng, (3, 2, 3, 3))
    w1, w2 = _weigher(rng), _weigher(rng)
    # the probe is bilinear, so central differences carry no truncation
    # error and a larger step only cuts round-off noise
    worst = grad_check(lambda x, w: w1(tz.conv2d_spatial(x, w, 1, 1)), [x, w], h=1e-5)
    return max(worst, grad_check(lambda x, w: w2(tz.conv2d_spatial(x, w, 2, 1)),
                                 [x, w], h=1e-5))


def _check_batchnorm(seed):
    rng = stream(seed, "gc-bn")
    x, g, b = _leaf(rng, (4, 3, 5)), _leaf(rng, (1, 3, 1)), _leaf(rng, (1, 3, 1))
    w1, w2 = _weigher(rng), _weigher(rng)
    worst = grad_check(
        lambda x, g, b: w1(tz.batchnorm(x, g, b, axes=(0, 2))), [x, g, b])
    running = (rng.normal(size=(1, 3, 1)), rng.uniform(0.5, 2.0, size=(1, 3, 1)))
    return max(worst, grad_check(
        lambda x, g, b: w2(tz.batchnorm(x, g, b, axes=(0, 2),
                                        running=running, training=False)),
        [x, g, b]))


def _check_pools(seed):
    rng = stream(seed, "gc-pool")
    x = _leaf(rng, (3, 4, 5))
    w1, w2, w3 = _weigher(rng), _weigher(rng), _weigher(rng)
    worst = grad_check(lambda x: w1(tz.max_pool_axis(x, 1)), [x])
    worst = max(worst, grad_check(lambda x: w2(tz.mean_pool_axis(x, 1)), [x]))
    y = _leaf(rng, (2, 4, 6, 3))
    return max(worst, grad_check(lambda y: w3(tz.avg_pool2d_cl(y, 2)), [y]))


def _check_pointwise(seed):
    rng = stream(seed, "gc-pointwise")
    x = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)), requires_grad=True)
    y = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)), requires_grad=True)
    ws = [_weigher(rng) for _ in range(5)]
    worst = grad_check(lambda x, y: ws[0](x * y + x - y), [x, y])
    worst = max(worst, grad_check(lambda x, y: ws[1](tz.div(x, y)), [x, y]))
    worst = max(worst, grad_check(lambda x: ws[2](tz.sqrt(x)), [x]))
    worst = max(worst, grad_check(lambda x: ws[3](tz.exp(x)), [x]))
    return max(worst, grad_check(lambda x: ws[4](tz.log(x)), [x]))


def _attention_cfg():
    return AttentionConfig(heads=2, head_dim=3, patch_temporal=3,
                           patch_spatial=2, channels=4)


def _check_attention(variant):
    def run(seed):
        rng = stream(seed, "gc-attn", variant)
        cfg = _attention_cfg()
        w = init_weights(variant, cfg, rng, dtype=np.float64)
        x = _leaf(rng, (4, 6, 4))
        wsum = _weigher(rng)
        leaves = [x] + w.tensors()
        return grad_check(lambda *_: wsum(FORWARDS[variant](x, cfg, w)), leaves)
    return run


def _check_gltm(seed):
    rng = stream(seed, "gc-gltm")
    mod = GLTM(4, stream(seed, "gc-gltm-init"), heads=2, head_dim=3, patch=3,
               dtype=np.float64)
    x = _leaf(rng, (1, 4, 6, 4))
    wsum = _weigher(rng)
    leaves = [x] + [p for _, p in mod.named_parameters()]
    return grad_check(lambda *_: wsum(mod(x)), leaves)


def _check_p3d(seed):
    rng = stream(seed, "gc-p3d")
    mod = P3DBlock(4, 4, stream(seed, "gc-p3d-init"), dtype=np.float64)
    x = Tensor(_away_from_zero(rng, (1, 6, 8, 4, 4)), requires_grad=True)
    wsum = _weigher(rng)
    leaves = [x] + [p for _, p in mod.named_parameters()]
    return grad_check(lambda *_: wsum(mod(x)), leaves)


def _check_gl3d(seed):
    rng = stream(seed, "gc-gl3d")
    mod = GL3DBlock(4, 4, stream(seed, "gc-gl3d-init"), heads=2, head_dim=3,
                    patch=3, dtype=np.float64)
    x = Tensor(_away_from_zero(rng, (1, 6, 8, 4, 4)), requires_grad=True)
    wsum = _weigher(rng)
    leaves = [x] + [p for _, p in mod.named_parameters()]
    return grad_check(lambda *_: wsum(mod(x)), leaves)


def _loss_fixture(seed):
    rng = stream(seed, "gc-loss")
    emb = Tensor(rng.normal(size=(6, 2, 3)), requires_grad=True)
    centers = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2])
    return rng, emb, centers, labels


def _check_loss(name):
    def run(seed):
        rng, emb, centers, labels = _loss_fixture(seed)
        if name == "tl":
            f = lambda e, c: L.triplet_loss(e, labels, 0.2)
        elif name == "ctl":
            f = lambda e, c: L.ctl(e, labels, c, 0.2)
        elif name == "cl":
            f = lambda e, c: L.center_loss(e, labels, c)
        elif name == "tcl":
            f = lambda e, c: L.triplet_center_loss(e, labels, c, 0.2)
        else:
            raise ValueError(name)
        return grad_check(f, [emb, centers])
    return run


def _check_cross_entropy(seed):
    rng = stream(seed, "gc-ce")
    logits = Tensor(rng.normal(size=(5, 2, 4)), requires_grad=True)
    labels = np.array([0, 1, 2, 3, 1])
    return grad_check(lambda lg: L.cross_entropy(lg, labels), [logits])


def _check_combined(seed):
    rng, emb, centers, labels = _loss_fixture(seed)
    logits = Tensor(stream(seed, "gc-comb").normal(size=(6, 2, 3)), requires_grad=True)
    return grad_check(
        lambda e, c, lg: L.combined(L.ctl(e, labels, c, 0.2),
                                    L.cross_entropy(lg, labels)),
        [emb, centers, logits])


SUITE = {
    "matmul": (_check_matmul, 20),
    "softmax": (_check_softmax, 20),
    "logsumexp": (_check_logsumexp, 20),
    "relu": (_check_relu, 20),
    "conv1d_temporal": (_check_conv1d, 20),
    "conv2d_spatial": (_check_conv2d, 20),
    "batchnorm": (_check_batchnorm, 20),
    "pools": (_check_pools, 20),
    "pointwise": (_check_pointwise, 20),
    "attn_pgta": (_check_attention("pgta"), 3),
    "attn_mhsa": (_check_attention("mhsa"), 3),
    "attn_factorised": (_check_attention("factorised"), 3),
    "attn_mobilevit": (_check_attention("mobilevit"), 3),
    "gltm": (_check_gltm, 2),
    "p3d_block": (_check_p3d, 2),
    "gl3d_block": (_check_gl3d, 2),
    "loss_tl": (_check_loss("tl"), 3),
    "loss_ctl": (_check_loss("ctl"), 3),
    "loss_cl": (_check_loss("cl"), 3),
    "loss_tcl": (_check_loss("tcl"), 3),
    "loss_ce": (_check_cross_entropy, 3),
    "loss_combined": (_check_combined, 3),
}


def run_suite(ops=None, base_seed=0):
    """Worst relative error per op; ``ops`` filters by exact name."""
    names = list(SUITE) if ops is None else list(ops)
    results = []
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown op {name!r}; known: {', '.join(SUITE)}")
        fn, n_seeds = SUITE[name]
        worst = max(fn(base_seed + i) for i in range(n_seeds))
        results.append((name, worst))
    return results
