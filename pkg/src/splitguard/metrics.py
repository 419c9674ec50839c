"""Reconstruction-quality and utility metrics."""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError

C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2

CSV_FIELDS = ("round", "method", "accuracy", "attack_mse", "attack_ssim", "wall_time_s", "config_hash")


@dataclass
class MetricsRecord:
    round: int
    method: str
    accuracy: float
    attack_mse: float | None = None
    attack_ssim: float | None = None
    wall_time_s: float | None = None
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.attack_mse is not None and self.attack_mse < 0:
            raise ValueError(f"attack_mse {self.attack_mse} < 0")
        if self.attack_ssim is not None and not -1.0 <= self.attack_ssim <= 1.0:
            raise ValueError(f"attack_ssim {self.attack_ssim} outside [-1, 1]")

    def as_row(self):
        """CSV cells; floats in repr form so rows are byte-stable."""
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        d = asdict(self)
        return [cell(d[f]) for f in CSV_FIELDS]


def _check_pair(p, q):
    if p.shape != q.shape:
        raise ShapeError(f"image shapes differ: {p.shape} vs {q.shape}", expected=p.shape, got=q.shape)


def mse_image(p, q):
    """Mean squared pixel difference over all channels."""
    p, q = np.asarray(p), np.asarray(q)
    _check_pair(p, q)
    d = p.astype(np.float64) - q.astype(np.float64)
    return float(np.mean(d * d))


def ssim(p, q):
    """Global (un-windowed) SSIM; channels of a (C, H, W) image are scored separately and averaged."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    _check_pair(p, q)
    if p.ndim == 3:
        return float(np.mean([_ssim_plane(p[c], q[c]) for c in range(p.shape[0])]))
    return _ssim_plane(p, q)


def _ssim_plane(p, q):
    mp, mq = p.mean(), q.mean()
    dp, dq = p - mp, q - mq
    vp, vq = np.mean(dp * dp), np.mean(dq * dq)
    cov = np.mean(dp * dq)
    return float(((2 * mp * mq + C1) * (2 * cov + C2)) / ((mp * mp + mq * mq + C1) * (vp + vq + C2)))


def batch_mse(p, q):
    """Per-image MSE for (N, C, H, W) batches."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    _check_pair(p, q)
    return np.mean((p - q) ** 2, axis=tuple(range(1, p.ndim)))


def batch_ssim(p, q):
    """Per-image global SSIM for (N, C, H, W) batches, channel-averaged."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    _check_pair(p, q)
    if p.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got {p.shape}", got=p.shape)
    axes = (2, 3)
    mp, mq = p.mean(axis=axes), q.mean(axis=axes)
    dp = p - mp[..., None, None]
    dq = q - mq[..., None, None]
    vp, vq = (dp * dp).mean(axis=axes), (dq * dq).mean(axis=axes)
    cov = (dp * dq).mean(axis=axes)
    s = ((2 * mp * mq + C1) * (2 * cov + C2)) / ((mp * mp + mq * mq + C1) * (vp + vq + C2))
    return s.mean(axis=1)


def accuracy(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"need a non-empty (batch, classes) array, got {logits.shape}", got=logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))
