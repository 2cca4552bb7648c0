"""Training-loss formulas over rendered annotations.

Per-task losses (L1 depth, stabilized cross-entropy segmentation, L2
keypoints), their weighted multi-task combination, and a self-supervised
affine-equivariance loss that compares encode-then-warp against
warp-then-encode. Encoders are small deterministic test doubles; no
training machinery lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASKS = ("seg", "depth", "kp")


@dataclass
class FeatureMap:
    """C×H×W float grid with an optional per-position validity mask."""

    values: np.ndarray          # (C, H, W)
    valid: np.ndarray = None    # (H, W) bool; None means all valid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("feature map must be C x H x W")
        c, h, w = self.values.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError("feature map dims must be >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map values must be finite")
        if self.valid is None:
            self.valid = np.ones((h, w), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != (h, w):
                raise ValueError("validity mask must be H x W")

    @property
    def shape(self):
        return self.values.shape


class Encoder:
    """Deterministic map from a 3-channel FeatureMap to a C-channel one,
    preserving H×W. Subclasses implement `encode`."""

    out_channels = 3

    def encode(self, fmap):
        raise NotImplementedError


class IdentityEncoder(Encoder):
    def encode(self, fmap):
        return FeatureMap(values=fmap.values.copy(), valid=fmap.valid.copy())


class PointwiseEncoder(Encoder):
    """1x1 channel mix: out[:, i, j] = M @ in[:, i, j]. Commutes with any
    purely spatial rearrangement, including translations."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != 3:
            raise ValueError("pointwise matrix must be C_out x 3")
        self.out_channels = self.matrix.shape[0]

    def encode(self, fmap):
        out = np.einsum("oc,chw->ohw", self.matrix, fmap.values)
        return FeatureMap(values=out, valid=fmap.valid.copy())


class BlurEncoder(Encoder):
    """Fixed 3x3 box blur per channel (zero padded). Has spatial support,
    so it commutes with translations but not with rotations."""

    def encode(self, fmap):
        c, h, w = fmap.values.shape
        padded = np.zeros((c, h + 2, w + 2))
        padded[:, 1:-1, 1:-1] = fmap.values
        out = np.zeros_like(fmap.values)
        for dy in range(3):
            for dx in range(3):
                out += padded[:, dy:dy + h, dx:dx + w]
        return FeatureMap(values=out / 9.0, valid=fmap.valid.copy())


def l1_depth(pred, gt, mask=None):
    """Mean absolute depth difference over masked pixels (0 if none)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("depth grids must share a shape")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(pred[mask] - gt[mask])))


def cross_entropy_seg(logits, labels, mask=None):
    """Mean −log softmax(logits)[label] over masked pixels.

    Stabilized by max-subtraction so large logits do not overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 3:
        raise ValueError("logits must be C x H x W")
    c = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ValueError("labels must match the logits' spatial dims")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    sel = logits[:, mask]                      # (C, M)
    m = sel.max(axis=0)
    logsumexp = m + np.log(np.sum(np.exp(sel - m), axis=0))
    true_logit = sel[labels[mask], np.arange(sel.shape[1])]
    return float(np.mean(logsumexp - true_logit))


def l2_keypoints(pred, gt, visibility=None):
    """Mean Euclidean distance over visible keypoints (0 if none visible)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError("keypoints must be matching K x 2 arrays")
    if visibility is None:
        visibility = np.ones(len(pred), dtype=bool)
    visibility = np.asarray(visibility, dtype=bool)
    if not visibility.any():
        return 0.0
    d = np.linalg.norm(pred[visibility] - gt[visibility], axis=1)
    return float(np.mean(d))


@dataclass
class TaskWeights:
    """Per-sample, per-task loss weights λ; rows are samples."""

    seg: np.ndarray
    depth: np.ndarray
    kp: np.ndarray

    def __post_init__(self):
        self.seg = np.atleast_1d(np.asarray(self.seg, dtype=np.float64))
        self.depth = np.atleast_1d(np.asarray(self.depth, dtype=np.float64))
        self.kp = np.atleast_1d(np.asarray(self.kp, dtype=np.float64))
        if not (len(self.seg) == len(self.depth) == len(self.kp)):
            raise ValueError("per-task weight vectors must share a length")
        if min(self.seg.min(), self.depth.min(), self.kp.min()) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def constant(cls, n, seg=1.0, depth=1.0, kp=1.0):
        return cls(seg=np.full(n, seg), depth=np.full(n, depth),
                   kp=np.full(n, kp))

    def matrix(self):
        return np.stack([self.seg, self.depth, self.kp], axis=1)  # (N, 3)


def task_loss(per_task_losses, weights):
    """Weighted multi-task loss: (1/N) * sum_n sum_t lambda[n,t] * L[n,t].

    `per_task_losses` is (N, 3) ordered (seg, depth, kp); `weights` is a
    TaskWeights or an (N, 3) array.
    """
    losses = np.asarray(per_task_losses, dtype=np.float64)
    if losses.ndim == 1:
        losses = losses[None, :]
    lam = weights.matrix() if isinstance(weights, TaskWeights) else \
        np.asarray(weights, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[None, :]
    if lam.shape != losses.shape:
        raise ValueError("weights and losses must align sample-by-task")
    if lam.min() < 0:
        raise ValueError("loss weights must be nonnegative")
    n = losses.shape[0]
    return float(np.sum(lam * losses) / n)


@dataclass
class AffineWarp:
    """2x3 affine map on normalized image coordinates (u, v) in [0, 1].

    `warp` resamples the input at the mapped coordinates, so the matrix
    takes output positions to input positions (pull-back convention).
    """

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("warp matrix must be finite")
        if abs(np.linalg.det(self.matrix[:, :2])) < 1e-12:
            raise ValueError("warp linear block must be invertible")

    @classmethod
    def identity(cls):
        return cls(matrix=np.hstack([np.eye(2), np.zeros((2, 1))]))

    @classmethod
    def translation(cls, du, dv):
        return cls(matrix=np.array([[1.0, 0.0, du], [0.0, 1.0, dv]]))

    @classmethod
    def rotation(cls, degrees, center=(0.5, 0.5)):
        a = np.deg2rad(degrees)
        R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        c = np.asarray(center, dtype=np.float64)
        return cls(matrix=np.hstack([R, (c - R @ c)[:, None]]))

    def inverse(self):
        Minv = np.linalg.inv(self.matrix[:, :2])
        return AffineWarp(matrix=np.hstack(
            [Minv, (-Minv @ self.matrix[:, 2])[:, None]]))

    def apply_points(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv @ self.matrix[:, :2].T + self.matrix[:, 2]


def warp(fmap, eps):
    """Bilinearly resample a FeatureMap through an AffineWarp.

    Output positions whose sample point leaves the image (or whose bilinear
    support touches an invalid input position) are zero-filled and marked
    invalid.
    """
    c, h, w = fmap.values.shape
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([(jj + 0.5) / w, (ii + 0.5) / h], axis=-1).reshape(-1, 2)
    src = eps.apply_points(uv)
    sx = src[:, 0] * w - 0.5
    sy = src[:, 1] * h - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    inb = (x0 >= 0) & (x0 + 1 <= w - 1 + (fx == 0)) & \
          (y0 >= 0) & (y0 + 1 <= h - 1 + (fy == 0))
    # exact hits on the last row/column only touch one neighbor
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    vals = fmap.values.reshape(c, -1)
    flat = lambda ys, xs: ys * w + xs
    out = (vals[:, flat(y0c, x0c)] * w00 + vals[:, flat(y0c, x1c)] * w10 +
           vals[:, flat(y1c, x0c)] * w01 + vals[:, flat(y1c, x1c)] * w11)
    vmask = fmap.valid.reshape(-1)
    support_ok = np.ones(len(sx), dtype=bool)
    for ws, ys, xs in ((w00, y0c, x0c), (w10, y0c, x1c),
                       (w01, y1c, x0c), (w11, y1c, x1c)):
        support_ok &= (ws == 0) | vmask[flat(ys, xs)]
    valid = inb & support_ok
    out[:, ~valid] = 0.0
    return FeatureMap(values=out.reshape(c, h, w),
                      valid=valid.reshape(h, w))


def ssl_loss(encoder, x, eps):
    """Equivariance residual: RMS of encode(warp(x)) − warp(encode(x)).

    Averaged over channels and positions valid under both paths' masks.
    """
    if x.values.shape[0] != 3:
        raise ValueError("ssl input must have 3 channels")
    a = encoder.encode(warp(x, eps))
    fx = encoder.encode(x)
    if fx.values.shape[1:] != x.values.shape[1:]:
        raise ValueError("encoder must preserve spatial dimensions")
    b = warp(fx, eps)
    if a.values.shape != b.values.shape:
        raise ValueError("encoder output channel count must be deterministic")
    both = a.valid & b.valid
    if not both.any():
        return 0.0
    diff = a.values[:, both] - b.values[:, both]
    return float(np.sqrt(np.mean(diff ** 2)))
