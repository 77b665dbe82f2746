"""Training loss, evaluation metrics and a two-component PCA."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import tensor as T


class DegenerateInputError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    huber_beta: float = 0.1
    w_start: float = 10.0
    w_end: float = 1.0
    w_last_bonus: float = 30.0
    region: str = "predicted_only"   # or "full_sequence"
    kind: str = "weighted_huber"     # "mse" and "huber" exist for experiments only

    def __post_init__(self):
        if self.huber_beta <= 0:
            raise ValueError("huber_beta must be positive")
        if not self.w_start >= self.w_end > 0:
            raise ValueError("need w_start >= w_end > 0")
        if self.region not in ("predicted_only", "full_sequence"):
            raise ValueError(f"unknown loss region {self.region!r}")
        if self.kind not in ("weighted_huber", "huber", "mse"):
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def huber(pred, truth, beta=0.1):
    """Scalar Huber loss of ``pred - truth``."""
    d = abs(float(pred) - float(truth))
    return d * d / (2.0 * beta) if d < beta else d - 0.5 * beta


def weight_schedule(t_eod, cfg=LossConfig()):
    """Per-step weights: linear ramp from ``w_start`` down to ``w_end`` plus a
    bonus on the final step, all halved. A single step gets ``(w_start + bonus) / 2``.
    """
    if t_eod < 1:
        raise ValueError("t_eod must be >= 1")
    if t_eod == 1:
        return np.array([0.5 * (cfg.w_start + cfg.w_last_bonus)])
    i = np.arange(t_eod, dtype=np.float64)
    w = cfg.w_start - (cfg.w_start - cfg.w_end) * i / (t_eod - 1)
    w[-1] += cfg.w_last_bonus
    return 0.5 * w


def loss_weights(mask, cfg=LossConfig(), prefix_len=0):
    """Weight matrix matching ``mask`` plus the extra denominator mass.

    Each row's schedule spans its own valid length. In ``full_sequence`` mode
    the schedule also spans ``prefix_len`` measured steps; those have zero
    error, so they only enter the normalizer.
    """
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    W = np.zeros_like(mask)
    extra = 0.0
    prefix = prefix_len if cfg.region == "full_sequence" else 0
    for b in range(mask.shape[0]):
        idx = np.flatnonzero(mask[b])
        if idx.size == 0:
            continue
        if cfg.kind != "weighted_huber":
            W[b, idx] = 1.0
            continue
        sched = weight_schedule(idx.size + prefix, cfg)
        W[b, idx] = sched[prefix:]
        extra += sched[:prefix].sum()
    return W, extra


def weighted_loss(pred, truth, mask, cfg=LossConfig(), prefix_len=0):
    """Mask- and weight-normalized loss over 1-D or ``(B, L)`` sequences."""
    pred = T.as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != truth.shape or truth.shape != mask.shape:
        raise T.ShapeError(f"shapes differ: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    W, extra = loss_weights(mask, cfg, prefix_len)
    W = (W * np.atleast_2d(mask)).reshape(-1)
    # sum over the valid entries only, so padding cannot even reorder the sum
    keep = np.flatnonzero(W)
    w = W[keep]
    denom = w.sum() + extra
    if denom <= 0:
        raise DegenerateInputError("mask selects no entries")
    if cfg.kind == "mse":
        d = pred - truth
        per = d * d
    else:
        per = T.huber(pred, truth, cfg.huber_beta)
    per = T.getitem(T.reshape(per, (-1,)), keep, unique=True)
    return T.tsum(per * w) * (1.0 / denom)


def metrics(pred, truth):
    """(RMSE, MAE, MAPE in percent)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("metrics needs equal, non-empty sequences")
    if np.any(truth == 0):
        raise DomainError("MAPE undefined for zero ground truth")
    err = truth - pred
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mape = float(100.0 * np.mean(np.abs(err) / truth))
    return rmse, mae, mape


# ---------------------------------------------------------------------------
# PCA


def jacobi_eigh(A, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns, in
    no particular order.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0 else np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return np.diag(A).copy(), V


@dataclass
class PcaFit:
    mean: np.ndarray
    components: np.ndarray   # (2, d), rows unit-norm
    eigenvalues: np.ndarray  # all, descending, clipped at 0
    scores: np.ndarray       # (k, 2)


def _canonical_sign(v, eps=1e-12):
    nz = np.flatnonzero(np.abs(v) > eps)
    return -v if nz.size and v[nz[0]] < 0 else v


def pca_fit(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs at least 2 points")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    k = min(2, vecs.shape[1])
    comps = np.stack([_canonical_sign(vecs[:, j]) for j in range(k)])
    if k < 2:
        comps = np.vstack([comps, np.zeros_like(comps)])
    scores = Xc @ comps.T
    return PcaFit(mean, comps, np.maximum(vals, 0.0), scores)


def pca2(embeddings, labels):
    """Project embeddings on the top two principal axes -> ``[(pc1, pc2, label), ...]``."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if len(labels) != X.shape[0]:
        raise ValueError("one label per embedding")
    fit = pca_fit(X)
    return [(float(a), float(b), lab) for (a, b), lab in zip(fit.scores, labels)]
