"""Deterministic silhouette-sequence generator and dataset container.

Each identity is a parametric walking figure (torso, head, two-segment
arms and legs) whose joint phase advances by ``2*pi / period`` per frame.
Frames are rendered at twice the 64x44 target and thresholded back down,
which keeps edges smooth while the output stays strictly binary.

Lab-style sequences use an exact integer phase so frame ``t`` equals
frame ``t + period`` bit for bit.  Wild-style sequences modulate the
period (pace drift), zero out random rectangles (occlusion) and sprinkle
salt noise, which destroys that periodicity on purpose.

Everything is a pure function of explicit seeds through counter-based
Philox streams, so a corpus is reproducible from its recipe alone.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import stream

HEIGHT, WIDTH = 64, 44
_SS = 2          # supersampling factor for rendering
_GROUND_Y = 122  # at 2x scale

MAGIC = b"GLSEQSET"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IdentityParams:
    """Body proportions and gait style of one synthetic identity (2x px)."""

    head_r: float = 9.0
    neck_len: float = 4.0
    torso_h: float = 38.0
    torso_w: float = 20.0
    hip_w: float = 9.0
    leg_len: float = 50.0
    thigh_frac: float = 0.52
    limb_w: float = 3.2
    arm_len: float = 34.0
    arm_w: float = 2.6
    stride_amp: float = 0.55
    shin_amp: float = 0.45
    arm_amp: float = 0.5
    bob_amp: float = 1.5
    period: int = 20

    def __post_init__(self):
        for name in ("head_r", "torso_h", "torso_w", "leg_len", "limb_w",
                     "arm_len", "arm_w", "hip_w", "neck_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"body proportion {name} must be positive")
        if not 0.2 <= self.thigh_frac <= 0.8:
            raise ValueError(f"thigh fraction {self.thigh_frac} outside [0.2, 0.8]")
        if self.period < 2:
            raise ValueError(f"gait period must be >= 2 frames, got {self.period}")
        if self.leg_len + self.torso_h + self.neck_len + 2 * self.head_r > _GROUND_Y:
            raise ValueError("figure too tall for the canvas")

    @staticmethod
    def sample(rng):
        return IdentityParams(
            head_r=rng.uniform(7.5, 11.0),
            neck_len=rng.uniform(2.0, 6.0),
            torso_h=rng.uniform(32.0, 44.0),
            torso_w=rng.uniform(15.0, 26.0),
            hip_w=rng.uniform(7.0, 12.0),
            leg_len=rng.uniform(44.0, 56.0),
            thigh_frac=rng.uniform(0.45, 0.58),
            limb_w=rng.uniform(2.4, 4.2),
            arm_len=rng.uniform(28.0, 38.0),
            arm_w=rng.uniform(2.0, 3.4),
            stride_amp=rng.uniform(0.35, 0.75),
            shin_amp=rng.uniform(0.25, 0.6),
            arm_amp=rng.uniform(0.3, 0.7),
            bob_amp=rng.uniform(0.5, 2.5),
            period=int(rng.integers(16, 25)),
        )


@dataclass
class SilhouetteSequence:
    frames: np.ndarray      # (T, 64, 44) uint8 in {0, 1}
    identity: int
    period: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T, H, W) with T >= 1, got {self.frames.shape}")
        uniq = np.unique(self.frames)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError("silhouette frames must be strictly binary")

    @property
    def length(self):
        return self.frames.shape[0]


_YY, _XX = np.mgrid[0:HEIGHT * _SS, 0:WIDTH * _SS]
_YY = np.ascontiguousarray(_YY, dtype=np.float64).reshape(-1)
_XX = np.ascontiguousarray(_XX, dtype=np.float64).reshape(-1)

# phase quantisation for the render cache; fine enough to be invisible
PHASE_BINS = 256


def render_frame(params, phase, bob_phase=None):
    """One binary 64x44 silhouette of the figure at joint angle ``phase``."""
    p = params
    bob = p.bob_amp * 0.5 * (1.0 - math.cos(2.0 * (bob_phase if bob_phase is not None
                                                   else phase)))
    cx = WIDTH * _SS / 2.0
    hip_y = _GROUND_Y - p.leg_len - bob
    shoulder_y = hip_y - p.torso_h

    segments = [(shoulder_y, cx, shoulder_y - p.neck_len - 2.0, cx, p.limb_w)]
    thigh = p.leg_len * p.thigh_frac
    shin = p.leg_len - thigh
    for side, hip_x in ((1.0, cx - p.hip_w / 2.0), (-1.0, cx + p.hip_w / 2.0)):
        a = p.stride_amp * math.sin(phase) * side
        knee = (hip_y + thigh * math.cos(a), hip_x + thigh * math.sin(a))
        bend = p.shin_amp * max(0.0, math.sin(phase + 0.9)) * side
        b = a + bend * 0.8 - 0.15 * side * p.shin_amp
        foot = (knee[0] + shin * math.cos(b), knee[1] + shin * math.sin(b))
        segments.append((hip_y, hip_x, knee[0], knee[1], p.limb_w))
        segments.append((knee[0], knee[1], foot[0], foot[1], p.limb_w * 0.92))
    upper = p.arm_len * 0.52
    fore = p.arm_len - upper
    for side, sh_x in ((1.0, cx - p.torso_w * 0.42), (-1.0, cx + p.torso_w * 0.42)):
        a = p.arm_amp * math.sin(phase + math.pi) * side
        elbow = (shoulder_y + upper * math.cos(a), sh_x + upper * math.sin(a))
        b = a + 0.35 * p.arm_amp * side
        hand = (elbow[0] + fore * math.cos(b), elbow[1] + fore * math.sin(b))
        segments.append((shoulder_y, sh_x, elbow[0], elbow[1], p.arm_w))
        segments.append((elbow[0], elbow[1], hand[0], hand[1], p.arm_w * 0.9))

    # all limb capsules at once: point-to-segment distance over (S, pixels)
    seg = np.asarray(segments)
    p0y, p0x = seg[:, 0:1], seg[:, 1:2]
    vy, vx = seg[:, 2:3] - p0y, seg[:, 3:4] - p0x
    rr = seg[:, 4:5] ** 2
    dy = _YY[None, :] - p0y
    dx = _XX[None, :] - p0x
    vv = np.maximum(vy * vy + vx * vx, 1e-12)
    t = np.clip((dy * vy + dx * vx) / vv, 0.0, 1.0)
    ry = dy - t * vy
    rx = dx - t * vx
    mask = (ry * ry + rx * rx <= rr).any(axis=0)

    torso_cy = (hip_y + shoulder_y) / 2.0
    ay, ax = p.torso_h / 2.0 + 2.0, p.torso_w / 2.0
    mask |= ((_YY - torso_cy) / ay) ** 2 + ((_XX - cx) / ax) ** 2 <= 1.0
    head_cy = shoulder_y - p.neck_len - p.head_r
    mask |= (((_YY - head_cy) / p.head_r) ** 2
             + ((_XX - cx) / (p.head_r * 0.82)) ** 2 <= 1.0)

    down = mask.reshape(HEIGHT, _SS, WIDTH, _SS).mean(axis=(1, 3))
    return (down >= 0.5).astype(np.uint8)


_render_cache = {}


def _render_cached(params, num, den):
    """Frame at exact phase ``2*pi*num/den``, memoised per identity."""
    key = (params, num % den, den)
    hit = _render_cache.get(key)
    if hit is None:
        if len(_render_cache) > 20000:
            _render_cache.clear()
        hit = render_frame(params, 2.0 * math.pi * (num % den) / den)
        _render_cache[key] = hit
    return hit


def generate_sequence(identity_params, t, seed, identity=0, pace_drift=0.0,
                      occlusion_rate=0.0, noise_rate=0.0, dynamic_window=None):
    """Deterministic silhouette sequence for one identity.

    Lab mode (no drift) uses exact integer phase arithmetic, so frame
    ``t`` equals frame ``t + period`` bit for bit.  ``dynamic_window``
    restricts phase advance to ``[a, b)`` and freezes the figure outside,
    which builds the static-vs-dynamic probes.
    """
    if t < 1:
        raise ValueError(f"sequence length must be >= 1, got {t}")
    p = identity_params
    rng = stream(seed, "sequence", identity)
    phase0 = int(rng.integers(0, p.period))

    frames = np.empty((t, HEIGHT, WIDTH), dtype=np.uint8)
    if dynamic_window is not None:
        a, b = dynamic_window
        steps = np.cumsum([1 if a <= i < b else 0 for i in range(t)])
        for i, s in enumerate(steps):
            frames[i] = _render_cached(p, phase0 + int(s), p.period)
    elif pace_drift > 0.0:
        mod_period = p.period * rng.uniform(3.0, 6.0)
        psi = rng.uniform(0.0, 2.0 * math.pi)
        incr = (2.0 * math.pi / p.period) * (
            1.0 + pace_drift * np.sin(2.0 * math.pi * np.arange(t) / mod_period + psi))
        phases = np.concatenate(([0.0], np.cumsum(incr[:-1]))) \
            + 2.0 * math.pi * phase0 / p.period
        # quantised phase keeps wild rendering cacheable and deterministic
        for i, phase in enumerate(phases):
            frames[i] = _render_cached(
                p, int(np.round(phase / (2.0 * math.pi) * PHASE_BINS)), PHASE_BINS)
    else:
        for i in range(t):
            frames[i] = _render_cached(p, phase0 + i, p.period)

    if occlusion_rate > 0.0:
        occ = stream(seed, "occlusion", identity)
        for i in range(t):
            if occ.random() < occlusion_rate:
                h = int(occ.integers(HEIGHT // 6, HEIGHT // 2))
                w = int(occ.integers(WIDTH // 6, WIDTH // 2))
                y0 = int(occ.integers(0, HEIGHT - h))
                x0 = int(occ.integers(0, WIDTH - w))
                frames[i, y0:y0 + h, x0:x0 + w] = 0
    if noise_rate > 0.0:
        noi = stream(seed, "noise", identity)
        salt = noi.random(size=frames.shape) < noise_rate
        frames = np.where(salt, np.uint8(1), frames)

    meta = {"pace_drift": pace_drift, "occlusion_rate": occlusion_rate,
            "noise_rate": noise_rate, "seed": int(seed), "phase0": phase0}
    if dynamic_window is not None:
        meta["dynamic_window"] = [int(dynamic_window[0]), int(dynamic_window[1])]
    return SilhouetteSequence(frames=frames, identity=identity, period=p.period,
                              meta=meta)


def sample_fixed_length(seq, n=30, seed=0):
    """Order-preserving resample of a sequence to exactly ``n`` frames.

    With enough frames the indices are drawn without replacement and
    sorted; shorter sequences repeat frames cyclically before sorting.
    """
    if n <= 0:
        raise ValueError(f"target length must be positive, got {n}")
    t = seq.length
    if t >= n:
        rng = stream(seed, "sample", seq.identity, t)
        idx = np.sort(rng.choice(t, size=n, replace=False))
    else:
        idx = np.sort(np.arange(n) % t)
    meta = dict(seq.meta, sampled_from=t)
    return SilhouetteSequence(frames=seq.frames[idx], identity=seq.identity,
                              period=seq.period, meta=meta)


@dataclass
class SyntheticDataset:
    identities: list            # IdentityParams per identity index
    sequences: list             # SilhouetteSequence
    train_ids: list
    test_ids: list
    meta: dict = field(default_factory=dict)

    def split(self, which):
        ids = set(self.train_ids if which == "train" else self.test_ids)
        return [s for s in self.sequences if s.identity in ids]


def make_dataset(n_train=20, n_test=10, seqs_per_id=10, frames=60, mode="wild",
                 seed=0):
    """Seeded corpus with disjoint train/test identities."""
    if mode not in ("lab", "wild"):
        raise ValueError(f"mode must be lab or wild, got {mode!r}")
    total = n_train + n_test
    identities = [IdentityParams.sample(stream(seed, "identity", i))
                  for i in range(total)]
    sequences = []
    for ident in range(total):
        for j in range(seqs_per_id):
            wild = mode == "wild"
            knobs = stream(seed, "knobs", ident, j)
            sequences.append(generate_sequence(
                identities[ident], frames, seed=seed * 1000003 + ident * 1009 + j,
                identity=ident,
                pace_drift=float(knobs.uniform(0.15, 0.45)) if wild else 0.0,
                occlusion_rate=0.08 if wild else 0.0,
                noise_rate=0.01 if wild else 0.0))
    return SyntheticDataset(
        identities=identities, sequences=sequences,
        train_ids=list(range(n_train)), test_ids=list(range(n_train, total)),
        meta={"seed": seed, "mode": mode, "frames": frames,
              "seqs_per_id": seqs_per_id})


def save_dataset(ds, path):
    """Frames pack to 1 bit/pixel, little-endian bit order; round-trips exactly."""
    header = json.dumps({
        "identities": [asdict(p) for p in ds.identities],
        "train_ids": list(ds.train_ids), "test_ids": list(ds.test_ids),
        "meta": ds.meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(ds.sequences)))
        for seq in ds.sequences:
            t, h, w = seq.frames.shape
            meta = json.dumps(seq.meta, sort_keys=True).encode()
            fh.write(struct.pack("<QQQQq", seq.identity, t, h, w, seq.period))
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
            fh.write(np.packbits(seq.frames.reshape(-1), bitorder="little").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise DatasetFormatError(f"{path}: bad magic, not a silhouette dataset")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        (count,) = struct.unpack("<Q", fh.read(8))
        sequences = []
        for _ in range(count):
            ident, t, h, w, period = struct.unpack("<QQQQq", fh.read(40))
            (mlen,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(mlen).decode())
            nbits = t * h * w
            packed = np.frombuffer(fh.read((nbits + 7) // 8), dtype=np.uint8)
            bits = np.unpackbits(packed, count=nbits, bitorder="little")
            sequences.append(SilhouetteSequence(
                frames=bits.reshape(t, h, w).astype(np.uint8),
                identity=int(ident), period=int(period), meta=meta))
    identities = [IdentityParams(**p) for p in header["identities"]]
    return SyntheticDataset(identities=identities, sequences=sequences,
                            train_ids=header["train_ids"],
                            test_ids=header["test_ids"], meta=header["meta"])
