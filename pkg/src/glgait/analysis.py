"""Attention complexity accounting and temporal receptive field analysis.

The analytic side evaluates the score/apply cost and projection-weight
size of each attention variant as closed-form polynomials; the empirical
side runs the real operators with a multiply counter and must agree
exactly.  A FLOP here is one real multiply; adds are not counted, and
ratios are insensitive to that choice.

The receptive-field engine computes the classic recurrence
``r <- r + (k_t - 1) * prod(previous strides)`` over a temporal layer
stack and validates it by perturbing one input frame of a randomly
weighted realisation of the stack.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention import FORWARDS, AttentionConfig, MultiplyCounter, init_weights
from .rng import stream
from .tensor import Tensor


@dataclass
class ComplexityReport:
    """Analytic and counted costs of one attention variant instance."""

    variant: str
    L: int
    T: int
    C: int
    D: int
    P: int
    Pl: int
    mem_analytic: int          # per-head projection weights, evaluated
    com_analytic: int          # score/apply O-form, evaluated
    mults_empirical: int       # counted multiplies (score + apply, all heads)
    activation_mem: int        # attention-matrix scalars across heads
    proj_cost: int             # shared projection cost O(LTCD), evaluated
    token_size: int
    info_loss: int
    mem_form: str
    com_form: str
    info_loss_form: str

    CSV_COLUMNS = ("variant", "L", "T", "C", "D", "P", "Pl", "mem_analytic",
                   "com_analytic", "mults_empirical", "activation_mem",
                   "proj_cost", "token_size", "info_loss", "mem_form",
                   "com_form", "info_loss_form")

    def row(self):
        return [getattr(self, c) for c in self.CSV_COLUMNS]

    def to_json(self):
        return {c: getattr(self, c) for c in self.CSV_COLUMNS}


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ComplexityReport.CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports):
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"


def token_size(variant, c, p, p_l):
    """Projection input width: the per-element size actually projected."""
    if variant in ("pgta", "mobilevit"):
        return c
    if variant == "factorised":
        return p * c
    if variant == "mhsa":
        return p_l * p * c
    raise ValueError(f"unknown attention variant {variant!r}")


def full_token_volume(variant, c, p, p_l):
    """Token volume: the D that makes a variant lossless.

    The patch-separated variants project per element, but their token
    still spans the whole patch, so the lossless regime sets D to the
    patch volume times C.
    """
    if variant in ("pgta", "factorised"):
        return p * c
    if variant in ("mhsa", "mobilevit"):
        return p_l * p * c
    raise ValueError(f"unknown attention variant {variant!r}")


def expected_mults(variant, heads, l, t, c, d, p, p_l):
    """Exact multiply count of the score + apply path, all heads.

    Each of q k^T and A v contributes ``batch * n^2 * d`` multiplies per
    head, where ``n`` is the token count one attention instance covers.
    """
    if t % p:
        raise ValueError(f"T={t} not divisible by P={p}")
    if variant == "pgta":
        batch, n = l * p, t // p
    elif variant == "factorised":
        batch, n = l, t // p
    elif variant == "mhsa":
        if l % p_l:
            raise ValueError(f"L={l} not divisible by P_l={p_l}")
        batch, n = 1, (l // p_l) * (t // p)
    elif variant == "mobilevit":
        if l % p_l:
            raise ValueError(f"L={l} not divisible by P_l={p_l}")
        batch, n = p_l * p, (l // p_l) * (t // p)
    else:
        raise ValueError(f"unknown attention variant {variant!r}")
    return 2 * heads * batch * n * n * d


def analytic_attention_cost(variant, l, t, c, d=None, p=3, p_l=4, heads=4,
                            empirical=None):
    """Closed-form memory/compute terms for one variant.

    ``d`` defaults to the variant's full token volume (the
    no-information-loss regime, in which the pseudo-global variant costs
    ``1/(P_l P)`` of the joint spatio-temporal attention).  ``empirical``
    optionally carries a counted multiply total into the report.
    """
    if min(l, t, c, p, p_l, heads) < 1:
        raise ValueError("complexity arguments must be positive")
    tok = token_size(variant, c, p, p_l)
    if d is None:
        d = full_token_volume(variant, c, p, p_l)
    if variant in ("mhsa", "mobilevit"):
        # joint spatio-temporal patching: P in the paper-facing forms is
        # the full patch volume P_l * P_t
        patch = p_l * p
        n = (l * t) // patch
        mem = patch * c * d if variant == "mhsa" else c * d
        com = n * n * d
        mem_form = "O(P_l*P_t*C*D)" if variant == "mhsa" else "O(C*D)"
        com_form = "O(N^2*D), N = L*T/(P_l*P_t)"
    elif variant == "factorised":
        n = t // p
        mem = p * c * d
        com = l * n * n * d
        mem_form = "O(P_t*C*D)"
        com_form = "O(L*N^2*D), N = T/P_t"
    else:  # pgta
        n = t // p
        mem = c * d
        com = l * t * n * d
        mem_form = "O(C*D)"
        com_form = "O(L*T*N*D), N = T/P_t"
    info = max(0, tok - d)
    return ComplexityReport(
        variant=variant, L=l, T=t, C=c, D=d, P=p, Pl=p_l,
        mem_analytic=mem, com_analytic=com,
        mults_empirical=-1 if empirical is None else int(empirical),
        activation_mem=_activation_mem(variant, heads, l, t, p, p_l),
        proj_cost=l * t * c * d,
        token_size=tok, info_loss=info,
        mem_form=mem_form, com_form=com_form,
        info_loss_form="O(C-D)" if variant in ("pgta", "mobilevit")
        else ("O(P_t*C-D)" if variant == "factorised" else "O(P_l*P_t*C-D)"),
    )


def _activation_mem(variant, heads, l, t, p, p_l):
    if variant == "pgta":
        return heads * l * p * (t // p) ** 2
    if variant == "factorised":
        return heads * l * (t // p) ** 2
    n = (l // p_l) * (t // p)
    per = n * n
    return heads * per if variant == "mhsa" else heads * p_l * p * per


def empirical_flop_count(variant, l, t, c, d=None, p=3, p_l=4, heads=4, seed=0):
    """Run the instrumented operator and return counted multiplies."""
    if d is None:
        d = full_token_volume(variant, c, p, p_l)
    cfg = AttentionConfig(heads=heads, head_dim=d, patch_temporal=p,
                          patch_spatial=p_l, channels=c)
    rng = stream(seed, "flops", variant, l, t, c, d)
    w = init_weights(variant, cfg, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(l, t, c)))
    counter = MultiplyCounter()
    with tz.no_grad():
        FORWARDS[variant](x, cfg, w, counter)
    return counter.count


def complexity_sweep(l, t, c, d=None, p=3, p_l=4, heads=4,
                     variants=("pgta", "mhsa", "factorised", "mobilevit"), seed=0):
    """Reports for several variants on one geometry, with counted multiplies."""
    out = []
    for v in variants:
        n = empirical_flop_count(v, l, t, c, d=d, p=p, p_l=p_l, heads=heads, seed=seed)
        out.append(analytic_attention_cost(v, l, t, c, d=d, p=p, p_l=p_l,
                                           heads=heads, empirical=n))
    return out


# -- temporal receptive field -------------------------------------------------


@dataclass(frozen=True)
class TemporalLayer:
    kind: str = "conv"        # "conv" or "pool_t"
    k_t: int = 3
    s_t: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "pool_t"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.k_t % 2 == 0 or self.k_t < 1:
                raise ValueError(f"temporal kernel must be odd and positive, got {self.k_t}")
            if self.s_t < 1:
                raise ValueError(f"temporal stride must be >= 1, got {self.s_t}")


@dataclass(frozen=True)
class ArchDescriptor:
    """Ordered temporal layer stack for receptive-field accounting."""

    layers: tuple = field(default_factory=tuple)

    @staticmethod
    def from_json(text):
        spec = json.loads(text)
        layers = []
        for item in spec["layers"]:
            layers.append(TemporalLayer(kind=item.get("kind", "conv"),
                                        k_t=int(item.get("k_t", 3)),
                                        s_t=int(item.get("s_t", 1))))
        return ArchDescriptor(tuple(layers))

    def to_json(self):
        return json.dumps({"layers": [
            {"kind": l.kind} if l.kind == "pool_t"
            else {"kind": "conv", "k_t": l.k_t, "s_t": l.s_t}
            for l in self.layers]}, indent=2) + "\n"


def p3d_stack_arch(blocks_per_stage=(1, 4, 4, 1), convs_per_block=1):
    """Temporal layer stack of a residual-3D-style backbone.

    One kernel-3 stride-1 temporal conv per block by default; two per
    block models the denser 3D variants whose receptive field sits in the
    several-dozen-frame regime.
    """
    n = sum(blocks_per_stage) * convs_per_block
    return ArchDescriptor(tuple(TemporalLayer("conv", 3, 1) for _ in range(n)))


def trf_analytic(arch):
    """Receptive field in frames; ``inf`` once a global temporal pool appears."""
    r = 1
    jump = 1
    for layer in arch.layers:
        if layer.kind == "pool_t":
            return math.inf
        r += (layer.k_t - 1) * jump
        jump *= layer.s_t
    return r


def _run_stack(arch, x, weights):
    for layer, w in zip(arch.layers, weights):
        k = w.shape[-1]
        pad = (k - 1) // 2
        xp = np.pad(x, ((pad, pad), (0, 0)))
        t_out = (x.shape[0] + 2 * pad - k) // layer.s_t + 1
        out = np.zeros((t_out, x.shape[1]))
        for j in range(k):
            out += w[0, 0, j] * xp[j:j + layer.s_t * t_out:layer.s_t]
        x = out
    return x


def trf_empirical(arch, t, delta=1.0, tol=1e-9, seed=0):
    """Measured receptive field: perturb the centre frame, count changes.

    Returns the length of the contiguous output window whose values move
    by more than ``tol``.  ``t`` must comfortably exceed the analytic
    receptive field or the window clips at the boundary.
    """
    if any(layer.kind == "pool_t" for layer in arch.layers):
        raise ValueError("cannot measure a windowed receptive field through "
                         "a global temporal pool")
    expected = trf_analytic(arch)
    if t < expected + 2:
        raise ValueError(f"T={t} too small to measure a receptive field of "
                         f"{expected}; use T > {int(expected) + 1}")
    rng = stream(seed, "trf", len(arch.layers))
    # single channel keeps the probe linear in the perturbation
    weights = [rng.normal(size=(1, 1, layer.k_t)) + 0.1 for layer in arch.layers]
    x = rng.normal(size=(t, 1))
    base = _run_stack(arch, x, weights)
    bumped = x.copy()
    bumped[t // 2, 0] += delta
    diff = np.abs(_run_stack(arch, bumped, weights) - base).max(axis=1)
    changed = np.nonzero(diff > tol)[0]
    return int(changed.size and changed[-1] - changed[0] + 1)
