"""Feature tensors and edge-weight matrices for the risk model.

Embeddings are synthesized from simulator ground truth: object slots carry
a fixed random projection of the kinematic state, text slots carry a fixed
per-label table row, both lightly noised. Slot index 0 of every frame is
the frame-level feature; objects occupy slots 1..O with a per-video stable
assignment, so frame-to-frame differences are differences of the same
object, not of whichever object happened to sort first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .scenario import BEHAVIOR_LABELS, ScenarioRecord
from .util import stable_u64, stream_rng

# fixed scales that bring each state coordinate to roughly unit range
_STATE_SCALES = np.array([100.0, 100.0, 15.0, math.pi, 3.0, 100.0])

_VELOCITY_SIGNS = ("as-printed", "negated")


@dataclass(frozen=True)
class FeatureConfig:
    feature_dim: int = 32
    max_objects: int = 19
    feature_seed: int = 0
    noise_sigma: float = 0.01
    scale: float = 1.0 / 1280.0  # pixel-to-depth balance in the distance
    tau_text: float = 0.5
    velocity_sign: str = "as-printed"

    def __post_init__(self):
        if self.feature_dim < 1 or self.max_objects < 1:
            raise ValueError("feature_dim and max_objects must be >= 1")
        if self.velocity_sign not in _VELOCITY_SIGNS:
            raise ValueError(f"velocity_sign must be one of {_VELOCITY_SIGNS}")


@dataclass
class FeatureBatch:
    """Stacked per-video tensors; slot 0 is the frame-level feature."""

    visual: np.ndarray  # (B, T, N, F)
    text: np.ndarray  # (B, T, N, F)
    mask: np.ndarray  # (B, T, O) bool, object slots only
    centers: np.ndarray  # (B, T, O, 2) pixel centers, zero where absent
    depths: np.ndarray  # (B, T, O) meters, zero where absent
    video_ids: tuple[str, ...]
    labels: np.ndarray  # (B,) int, 1 for accident videos
    accident_frames: np.ndarray  # (B,) 1-based frame index, 0 for negatives

    @property
    def batch_size(self) -> int:
        return self.visual.shape[0]

    @property
    def frames(self) -> int:
        return self.visual.shape[1]

    @property
    def slots(self) -> int:
        return self.visual.shape[2]

    @property
    def objects(self) -> int:
        return self.slots - 1

    @property
    def feature_dim(self) -> int:
        return self.visual.shape[3]


def object_size(object_id: str) -> float:
    """Deterministic stand-in footprint, meters; the record schema has no
    size field, so it is derived from the id wherever needed."""
    return 1.5 + (stable_u64("size", object_id) % 2001) / 1000.0


def assign_slots(record: ScenarioRecord, max_objects: int) -> tuple[str, ...]:
    """Stable object-slot layout for one video.

    Ranked by (most frames visible, earliest appearance, id); ids past
    max_objects are dropped for the whole video rather than flickering in
    and out of different slots.
    """
    count: dict[str, int] = {}
    first: dict[str, int] = {}
    for t, frame in enumerate(record.objects):
        for o in frame:
            count[o.id] = count.get(o.id, 0) + 1
            first.setdefault(o.id, t)
    order = sorted(count, key=lambda i: (-count[i], first[i], i))
    return tuple(order[:max_objects])


def _visual_projections(feature_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    shape = (len(_STATE_SCALES), feature_dim)
    return {
        "object": rng.normal(size=shape) / math.sqrt(shape[0]),
        "frame": rng.normal(size=shape) / math.sqrt(shape[0]),
    }


def synth_visual_features(record: ScenarioRecord, feature_dim: int,
                          rng: np.random.Generator, *,
                          projections: dict[str, np.ndarray] | None = None,
                          noise_sigma: float = 0.01,
                          slot_ids: tuple[str, ...] | None = None) -> np.ndarray:
    """(T, 1+O, F) embeddings: slot 0 projects scene aggregates, object
    slots project (x, y, speed, heading, size, depth). Deterministic given
    the generator; pass shared projections to keep a dataset consistent."""
    if projections is None:
        projections = _visual_projections(feature_dim, rng)
    if slot_ids is None:
        slot_ids = assign_slots(record, max(1, sum(1 for _ in {
            o.id for f in record.objects for o in f})))
    index = {oid: k + 1 for k, oid in enumerate(slot_ids)}
    t_count = record.frames
    n_slots = len(slot_ids) + 1
    out = np.zeros((t_count, n_slots, feature_dim))
    filled = np.zeros((t_count, n_slots), dtype=bool)
    env_code = (stable_u64("env", record.environment.weather,
                           record.environment.lighting,
                           record.environment.road_type) % 1000) / 1000.0
    for t, frame in enumerate(record.objects):
        if frame:
            agg = np.array([
                len(frame) / 19.0,
                float(np.mean([o.speed for o in frame])) / 15.0,
                float(np.mean([o.depth for o in frame])) / 100.0,
                float(np.mean([o.x for o in frame])) / 100.0,
                float(np.mean([o.y for o in frame])) / 100.0,
                env_code,
            ])
            out[t, 0] = agg @ projections["frame"]
            filled[t, 0] = True
        for o in frame:
            k = index.get(o.id)
            if k is None:
                continue
            state = np.array([o.x, o.y, o.speed, o.heading,
                              object_size(o.id), o.depth]) / _STATE_SCALES
            out[t, k] = state @ projections["object"]
            filled[t, k] = True
    if noise_sigma > 0:
        out = out + noise_sigma * rng.normal(size=out.shape)
    return out * filled[:, :, None]


def _label_embedding(table_seed: int, label: str, feature_dim: int) -> np.ndarray:
    v = stream_rng(table_seed, "text-table", label).normal(size=feature_dim)
    return v / np.linalg.norm(v)


def synth_text_features(labels, feature_dim: int, rng: np.random.Generator, *,
                        table_seed: int | None = None,
                        noise_sigma: float = 0.01,
                        vocab=None) -> np.ndarray:
    """(len(labels), F) rows from a fixed unit-norm per-label table plus
    small noise, re-normalized. With a vocab, labels outside it raise."""
    if table_seed is None:
        table_seed = int(rng.integers(0, 2**63))
    cache: dict[str, np.ndarray] = {}
    rows = np.empty((len(labels), feature_dim))
    for i, label in enumerate(labels):
        if vocab is not None and label not in vocab:
            raise ValueError(f"unknown label {label!r}")
        if label not in cache:
            cache[label] = _label_embedding(table_seed, label, feature_dim)
        rows[i] = cache[label]
    if noise_sigma > 0:
        rows = rows + noise_sigma * rng.normal(size=rows.shape)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def build_features(records, cfg: FeatureConfig) -> FeatureBatch:
    """Stack records into one batch; features of a given video depend only
    on (video, cfg), never on which other videos share the batch."""
    records = list(records)
    if not records:
        raise ValueError("cannot build features from zero records")
    t_count = records[0].frames
    if any(r.frames != t_count for r in records):
        raise ValueError("all records in a batch must share the frame count")
    n_obj = cfg.max_objects
    n_slots = n_obj + 1
    f_dim = cfg.feature_dim
    b = len(records)

    projections = _visual_projections(f_dim, stream_rng(cfg.feature_seed, "projections"))
    visual = np.zeros((b, t_count, n_slots, f_dim))
    text = np.zeros((b, t_count, n_slots, f_dim))
    mask = np.zeros((b, t_count, n_obj), dtype=bool)
    centers = np.zeros((b, t_count, n_obj, 2))
    depths = np.zeros((b, t_count, n_obj))
    labels = np.zeros(b, dtype=np.int64)
    lam = np.zeros(b, dtype=np.int64)

    for i, rec in enumerate(records):
        slots = assign_slots(rec, n_obj)
        index = {oid: k for k, oid in enumerate(slots)}
        vis = synth_visual_features(
            rec, f_dim, stream_rng(cfg.feature_seed, "visual", rec.id),
            projections=projections, noise_sigma=cfg.noise_sigma, slot_ids=slots)
        visual[i, :, :vis.shape[1]] = vis

        text_rng = stream_rng(cfg.feature_seed, "text", rec.id)
        frame_rows = synth_text_features(
            rec.scene_labels, f_dim, text_rng, table_seed=cfg.feature_seed,
            noise_sigma=cfg.noise_sigma)
        text[i, :, 0] = frame_rows
        slots_at: list[tuple[int, int]] = []
        obj_labels: list[str] = []
        for t, frame in enumerate(rec.objects):
            for o in frame:
                k = index.get(o.id)
                if k is None:
                    continue
                slots_at.append((t, k))
                obj_labels.append(o.behavior)
                mask[i, t, k] = True
                centers[i, t, k] = (o.cx, o.cy)
                depths[i, t, k] = o.depth
        if obj_labels:
            rows = synth_text_features(
                obj_labels, f_dim, text_rng, table_seed=cfg.feature_seed,
                noise_sigma=cfg.noise_sigma, vocab=BEHAVIOR_LABELS)
            for (t, k), row in zip(slots_at, rows):
                text[i, t, k + 1] = row
        labels[i] = int(rec.positive)
        lam[i] = rec.accident_frame or 0

    return FeatureBatch(visual, text, mask, centers, depths,
                        tuple(r.id for r in records), labels, lam)


# ---------------------------------------------------------------------------
# edge weights

def pairwise_distance(centers, depths, s: float) -> np.ndarray:
    """d_ij = s^2 * ||c_i - c_j||^2 + |z_i - z_j|^2, elementwise over any
    leading axes; symmetric with an exact zero diagonal."""
    c = np.asarray(centers, dtype=float)
    z = np.asarray(depths, dtype=float)
    diff = c[..., :, None, :] - c[..., None, :, :]
    pix = (diff * diff).sum(axis=-1)
    dz = z[..., :, None] - z[..., None, :]
    return s * s * pix + dz * dz


def relative_velocity(d_t: np.ndarray, d_prev: np.ndarray | None = None) -> np.ndarray:
    """Frame-wise distance difference; the first frame has no predecessor
    and returns zeros."""
    d_t = np.asarray(d_t, dtype=float)
    if d_prev is None:
        return np.zeros_like(d_t)
    return d_t - np.asarray(d_prev, dtype=float)


def _maxabs_normalize(stack: np.ndarray) -> np.ndarray:
    peak = np.abs(stack).max(axis=(-2, -1), keepdims=True)
    return np.divide(stack, peak, out=np.zeros_like(stack), where=peak > 0)


def distance_velocity_stacks(centers, depths, mask, s: float):
    """Raw and per-frame max-abs normalized distance/velocity stacks.

    Entries touching an absent object are zeroed; velocities additionally
    require the pair in both frames. Returns (d, v, dbar, vbar, pair_mask).
    """
    mask = np.asarray(mask, dtype=bool)
    d = pairwise_distance(centers, depths, s)
    pair = mask[..., :, None] & mask[..., None, :]
    d = np.where(pair, d, 0.0)
    v = np.zeros_like(d)
    v[..., 1:, :, :] = d[..., 1:, :, :] - d[..., :-1, :, :]
    both = pair.copy()
    both[..., 1:, :, :] &= pair[..., :-1, :, :]
    both[..., 0, :, :] = False
    v = np.where(both, v, 0.0)
    return d, v, _maxabs_normalize(d), _maxabs_normalize(v), pair


def geo_weights(dbar, vbar, alpha) -> Tensor:
    """W_geo = alpha * exp(-dbar) + (1 - alpha) * vbar."""
    alpha = ad.as_tensor(alpha)
    return alpha * np.exp(-np.asarray(dbar, dtype=float)) + (1.0 - alpha) * np.asarray(vbar, dtype=float)


def text_weights(embeddings, tau_text: float, pair_mask=None) -> Tensor:
    """Row softmax over cosine similarity / tau; masked pairs contribute
    exactly zero. Expects unit-normalized embeddings (..., O, F)."""
    if tau_text <= 0:
        raise ValueError("tau_text must be positive")
    e = ad.as_tensor(embeddings)
    n_obj, f_dim = e.shape[-2], e.shape[-1]
    lead = e.shape[:-2]
    a = ad.reshape(e, lead + (n_obj, 1, f_dim))
    b = ad.reshape(e, lead + (1, n_obj, f_dim))
    logits = ad.tsum(ad.mul(a, b), axis=-1) / tau_text
    if pair_mask is not None:
        logits = logits + np.where(np.asarray(pair_mask, dtype=bool), 0.0, -1e30)
    return ad.softmax_lastdim(logits)


def fuse_weights(w_geo, w_text, beta) -> Tensor:
    """W = (1 - sigmoid(beta)) * W_geo + sigmoid(beta) * W_text."""
    lam = ad.sigmoid(ad.as_tensor(beta))
    return (1.0 - lam) * w_geo + lam * w_text


@dataclass
class GeometryParams:
    scale: float
    a: Parameter  # balance, kept >= 0 by the optimizer projection

    @property
    def alpha(self) -> Tensor:
        return ad.div(self.a, ad.add(self.a, 1.0))

    @classmethod
    def init(cls, scale: float = 1.0 / 1280.0, a0: float = 1.0) -> "GeometryParams":
        return cls(scale, Parameter(a0, name="geom.a"))


@dataclass
class FusionGate:
    """Gate parameters: W_g, b_g drive the embedding gate, beta (where
    present) drives the geometry/text weight mix."""

    w_g: Parameter  # (2F, F)
    b_g: Parameter  # (F,)
    beta: Parameter | None = None

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator, prefix: str,
             with_beta: bool = False) -> "FusionGate":
        w = rng.normal(size=(2 * feature_dim, feature_dim)) / math.sqrt(2 * feature_dim)
        beta = Parameter(0.0, name=f"{prefix}.beta") if with_beta else None
        return cls(Parameter(w, name=f"{prefix}.w_g"),
                   Parameter(np.zeros(feature_dim), name=f"{prefix}.b_g"),
                   beta)


def gated_fuse(x_vis, x_text, gate: FusionGate) -> Tensor:
    """g = sigmoid([x_vis; x_text] W_g + b_g); g*x_vis + (1-g)*x_text."""
    x_vis = ad.as_tensor(x_vis)
    x_text = ad.as_tensor(x_text)
    both = ad.concat([x_vis, x_text], axis=-1)
    g = ad.sigmoid(ad.add(ad.matmul(both, gate.w_g), gate.b_g))
    return g * x_vis + (1.0 - g) * x_text


@dataclass
class EdgeWeightStack:
    d: np.ndarray
    v: np.ndarray
    dbar: np.ndarray
    vbar: np.ndarray
    pair_mask: np.ndarray
    w_geo: Tensor
    w_text: Tensor
    w: Tensor


def edge_weight_stack(centers, depths, mask, text_normalized, *, alpha, beta,
                      scale: float, tau_text: float,
                      velocity_sign: str = "as-printed") -> EdgeWeightStack:
    """Full geometry/text/fused weight pipeline over (..., T, O, ...) data."""
    if velocity_sign not in _VELOCITY_SIGNS:
        raise ValueError(f"velocity_sign must be one of {_VELOCITY_SIGNS}")
    d, v, dbar, vbar, pair = distance_velocity_stacks(centers, depths, mask, scale)
    if velocity_sign == "negated":
        vbar = -vbar
    w_geo = geo_weights(dbar, vbar, alpha)
    w_text = text_weights(text_normalized, tau_text, pair)
    w = fuse_weights(w_geo, w_text, beta)
    return EdgeWeightStack(d, v, dbar, vbar, pair, w_geo, w_text, w)
