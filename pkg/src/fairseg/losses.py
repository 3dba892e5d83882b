"""Training objectives with exact analytic gradients.

Every loss returns a GradSlot whose gradients flow to the model's forward
outputs: "logits" for the cross-entropy and consistency terms, "features"
for the clustering and distillation terms.  All losses are means over
contributing pixels (or neighbor pairs for the consistency term) so their
scale is independent of image size.  Prototypes are constants here; they
are updated only by the momentum schedule in the prototypes module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, DimensionError, LabelError
from .numerics import GradSlot, log_softmax

IGNORE_ID = 65535


@dataclass
class ClassDistribution:
    """Empirical pixel-class distribution and the uniform-ideal weights.

    Weights are q(c)/p(c) where q is uniform over the counted classes and
    p is the (add-constant smoothed) empirical distribution, clamped to
    keep extreme minorities from destabilizing SGD.
    """

    pixel_counts: dict
    smoothing: float = 1.0
    clamp: Tuple[float, float] = (0.1, 10.0)

    def validate(self):
        if any(v < 0 for v in self.pixel_counts.values()):
            raise ConfigError("pixel counts must be >= 0")
        if self.smoothing < 0:
            raise ConfigError("smoothing must be >= 0")
        if self.clamp[0] > self.clamp[1] or self.clamp[0] < 0:
            raise ConfigError(f"invalid clamp range {self.clamp}")
        return self

    @property
    def num_classes(self):
        return len(self.pixel_counts)

    def probability(self, class_id):
        if class_id not in self.pixel_counts:
            raise LabelError(f"class {class_id} not in distribution")
        n = self.num_classes
        total = sum(self.pixel_counts.values())
        return (self.pixel_counts[class_id] + self.smoothing) / (
            total + self.smoothing * n
        )

    def raw_weight(self, class_id):
        """q/p before clamping (infinite when the class has zero mass)."""
        p = self.probability(class_id)
        q = 1.0 / self.num_classes
        return float("inf") if p == 0 else q / p

    def weight(self, class_id):
        lo, hi = self.clamp
        return min(max(self.raw_weight(class_id), lo), hi)


@dataclass
class ConsConfig:
    sigma_color: float = 0.1
    sigma_pred: float = 0.5
    window: int = 3
    form: str = "smooth"  # "smooth" (default) or the paper-literal kernel

    def validate(self):
        if self.sigma_color <= 0 or self.sigma_pred <= 0:
            raise ConfigError("consistency kernel scales must be > 0")
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 3")
        if self.form not in ("smooth", "literal"):
            raise ConfigError(f"unknown consistency form {self.form!r}")
        return self


@dataclass
class LossWeights:
    lambda_cluster: float = 1e-3
    lambda_cons: float = 1e-2
    lambda_distill: float = 1.0

    def validate(self):
        if min(self.lambda_cluster, self.lambda_cons, self.lambda_distill) < 0:
            raise ConfigError("loss weights must be >= 0")
        return self


def _flatten_pixels(arr, what, channels=None):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[2])
    if arr.ndim != 2:
        raise DimensionError(f"{what} must be (H, W, C) or (N, C)")
    if channels is not None and arr.shape[1] != channels:
        raise DimensionError(f"{what} has {arr.shape[1]} channels, expected {channels}")
    return arr


def weighted_ce(logits, labels, mask, row_weights=None):
    """Importance-weighted cross entropy over supervised pixels.

    ``labels`` holds head-row indices; ``mask`` selects supervised pixels;
    ``row_weights`` is a per-row weight vector (None = plain CE).  The
    gradient flows to the logits.  Returns zero loss when nothing is
    supervised.
    """
    shape = np.asarray(logits).shape
    z = _flatten_pixels(logits, "logits")
    n, k = z.shape
    y = np.asarray(labels).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if y.shape[0] != n or m.shape[0] != n:
        raise DimensionError("labels/mask size does not match logits")
    sel = np.flatnonzero(m)
    grad = np.zeros_like(z)
    if sel.size == 0:
        return GradSlot(value=0.0, grads={"logits": grad.reshape(shape)})
    ys = y[sel].astype(np.int64)
    if ys.min() < 0 or ys.max() >= k:
        raise LabelError(
            f"supervised label outside head range 0..{k - 1}"
        )
    if row_weights is None:
        w = np.ones(sel.size)
    else:
        row_weights = np.asarray(row_weights, dtype=np.float64)
        if row_weights.shape != (k,):
            raise DimensionError(f"row_weights must have shape ({k},)")
        w = row_weights[ys]
    logp = log_softmax(z[sel], axis=1)
    value = float(np.mean(-w * logp[np.arange(sel.size), ys]))
    p = np.exp(logp)
    g = p * w[:, None]
    g[np.arange(sel.size), ys] -= w
    grad[sel] = g / sel.size
    return GradSlot(value=value, grads={"logits": grad.reshape(shape)})


def ce_row_weights(dist, row_map, num_rows):
    """Per-head-row weight vector from a class distribution.

    Rows for classes absent from the distribution get weight 1 (they are
    never supervised in the epoch the distribution describes).
    """
    weights = np.ones(num_rows, dtype=np.float64)
    for cid in dist.pixel_counts:
        row = row_map[cid]
        weights[row] = dist.weight(cid)
    return weights


def cluster_loss(features, labels, protos, cfg, counters=None):
    """Prototype attraction/repulsion over labeled pixels.

    Per pixel, the term for the labeled class is its distance to that
    prototype; every other initialized prototype contributes a hinge
    max(0, margin - distance).  Pixels labeled with the ignore sentinel are
    excluded; a pixel whose labeled class has no initialized prototype
    loses only its attraction term (counted in ``counters``).  Gradients
    flow to the features; prototypes stay constant.
    """
    shape = np.asarray(features).shape
    f = _flatten_pixels(features, "features", channels=protos.feature_dim)
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != f.shape[0]:
        raise DimensionError("labels size does not match features")
    grad = np.zeros_like(f)
    live = y != IGNORE_ID
    n_live = int(np.count_nonzero(live))
    if counters is not None:
        counters.setdefault("cluster_skipped_pixels", 0)
    if n_live == 0:
        return GradSlot(value=0.0, grads={"features": grad.reshape(shape)})
    init_ids = protos.initialized_ids()
    if not init_ids:
        if counters is not None:
            counters["cluster_skipped_pixels"] += n_live
        return GradSlot(value=0.0, grads={"features": grad.reshape(shape)})
    if counters is not None:
        uninit = live & ~np.isin(y, np.array(init_ids, dtype=y.dtype))
        counters["cluster_skipped_pixels"] += int(np.count_nonzero(uninit))
    value = 0.0
    delta = cfg.margin
    for cid in init_ids:
        p = protos.vector(cid)
        diff = f - p[None, :]
        dist = np.sqrt(np.sum(diff**2, axis=1))
        match = live & (y == cid)
        other = live & (y != cid)
        if match.any():
            value += float(np.sum(dist[match]))
            nz = match & (dist > 0)
            grad[nz] += diff[nz] / dist[nz, None]
        if other.any():
            active = other & (dist < delta)
            value += float(np.sum(delta - dist[active]))
            nz = active & (dist > 0)
            grad[nz] -= diff[nz] / dist[nz, None]
    value /= n_live
    grad /= n_live
    return GradSlot(value=value, grads={"features": grad.reshape(shape)})


def _window_offsets(window):
    r = window // 2
    return [
        (dr, dc)
        for dr in range(-r, r + 1)
        for dc in range(-r, r + 1)
        if (dr, dc) != (0, 0)
    ]


def _probs_to_logits_grad(probs, dprobs):
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def cons_loss(image, probs, cfg):
    """Structural consistency over color-similar neighbor pairs.

    The default "smooth" form penalizes squared prediction differences
    weighted by a Gaussian color-affinity kernel, averaged over ordered
    neighbor pairs.  The "literal" form is the raw joint Gaussian kernel of
    color and prediction differences, kept for comparison.  Gradients are
    returned on probs and, through the softmax Jacobian, on logits.
    """
    cfg.validate()
    img = np.asarray(image, dtype=np.float64)
    pr = np.asarray(probs, dtype=np.float64)
    if img.ndim != 3 or pr.ndim != 3 or img.shape[:2] != pr.shape[:2]:
        raise DimensionError("image and probs must be (H, W, C) with equal H, W")
    h, w = img.shape[:2]
    dprobs = np.zeros_like(pr)
    value = 0.0
    n_pairs = 0
    two_s1 = 2.0 * cfg.sigma_color**2
    two_s2 = 2.0 * cfg.sigma_pred**2
    for dr, dc in _window_offsets(cfg.window):
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(w, w - dc)
        if r0 >= r1 or c0 >= c1:
            continue
        a = (slice(r0, r1), slice(c0, c1))
        b = (slice(r0 + dr, r1 + dr), slice(c0 + dc, c1 + dc))
        color2 = np.sum((img[a] - img[b]) ** 2, axis=-1)
        affinity = np.exp(-color2 / two_s1)
        pdiff = pr[a] - pr[b]
        n_pairs += affinity.size
        if cfg.form == "smooth":
            pdiff2 = np.sum(pdiff**2, axis=-1)
            value += float(np.sum(affinity * pdiff2))
            contrib = 2.0 * affinity[..., None] * pdiff
            dprobs[a] += contrib
            dprobs[b] -= contrib
        else:
            kern = np.exp(-color2 / two_s1 - np.sum(pdiff**2, axis=-1) / two_s2)
            value += float(np.sum(kern))
            contrib = -kern[..., None] * pdiff / cfg.sigma_pred**2
            dprobs[a] += contrib
            dprobs[b] -= contrib
    if n_pairs == 0:
        return GradSlot(value=0.0, grads={"probs": dprobs, "logits": dprobs.copy()})
    value /= n_pairs
    dprobs /= n_pairs
    dlogits = _probs_to_logits_grad(pr, dprobs)
    return GradSlot(value=value, grads={"probs": dprobs, "logits": dlogits})


def distill_loss(features_now, features_prev):
    """Mean per-pixel feature distance to the frozen previous-step model."""
    shape = np.asarray(features_now).shape
    fn = _flatten_pixels(features_now, "features_now")
    fp = _flatten_pixels(features_prev, "features_prev")
    if fn.shape != fp.shape:
        raise DimensionError(
            f"feature shapes differ: {fn.shape} vs {fp.shape}"
        )
    diff = fn - fp
    dist = np.sqrt(np.sum(diff**2, axis=1))
    n = fn.shape[0]
    value = float(np.mean(dist))
    grad = np.zeros_like(fn)
    nz = dist > 0
    grad[nz] = diff[nz] / (dist[nz, None] * n)
    return GradSlot(value=value, grads={"features": grad.reshape(shape)})


@dataclass
class Prop1Report:
    """Per-pixel check that the feature drift is bounded by prototype sums."""

    num_pixels: int
    num_prototypes: int
    min_slack: float
    mean_lhs: float
    mean_rhs: float
    max_lhs: float
    max_rhs: float
    holds: bool


def verify_proposition1(features_now, features_prev, protos, tolerance=1e-9):
    """Check lhs = ||f_t - f_prev|| <= rhs = mean_c [||f_t - p_c|| + ||p_c - f_prev||]."""
    fn = _flatten_pixels(features_now, "features_now", channels=protos.feature_dim)
    fp = _flatten_pixels(features_prev, "features_prev", channels=protos.feature_dim)
    if fn.shape != fp.shape:
        raise DimensionError("feature shapes differ")
    ids, matrix = protos.initialized_matrix()
    lhs = np.sqrt(np.sum((fn - fp) ** 2, axis=1))
    d_now = np.sqrt(np.sum((fn[:, None, :] - matrix[None, :, :]) ** 2, axis=2))
    d_prev = np.sqrt(np.sum((fp[:, None, :] - matrix[None, :, :]) ** 2, axis=2))
    rhs = np.mean(d_now + d_prev, axis=1)
    slack = rhs - lhs
    return Prop1Report(
        num_pixels=int(fn.shape[0]),
        num_prototypes=len(ids),
        min_slack=float(np.min(slack)),
        mean_lhs=float(np.mean(lhs)),
        mean_rhs=float(np.mean(rhs)),
        max_lhs=float(np.max(lhs)),
        max_rhs=float(np.max(rhs)),
        holds=bool(np.all(lhs <= rhs + tolerance)),
    )
