"""Log-space component, joint and mixture densities.

All production quantities are computed in log space with a max-shifted
log-sum-exp.  Linear-space evaluation only appears in :func:`underflow_ratio`,
which measures how often the linear-space joint density would round to zero.
"""
from __future__ import annotations

import csv
import enum
import math
from typing import Iterable, Sequence

import numpy as np

from .types import KeypointSet, MixtureField

LOG_2PI = math.log(2 * math.pi)
LOG_PI = math.log(math.pi)


class ComponentKind(str, enum.Enum):
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"
    CAUCHY = "cauchy"


def as_kind(kind) -> ComponentKind:
    return kind if isinstance(kind, ComponentKind) else ComponentKind(str(kind).lower())


def logsumexp(a, axis=None, keepdims=False):
    a = np.asarray(a, dtype=np.float64)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def log_pdf_1d(kind, x, mu, gamma):
    """Elementwise log density of a 1-D component with location mu and scale gamma."""
    kind = as_kind(kind)
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise ValueError("scale parameter gamma must be positive")
    r = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    if kind is ComponentKind.LAPLACE:
        out = -np.log(2 * gamma) - np.abs(r) / gamma
    elif kind is ComponentKind.GAUSSIAN:
        out = -0.5 * LOG_2PI - np.log(gamma) - 0.5 * (r / gamma) ** 2
    else:
        out = -LOG_PI - np.log(gamma) - np.log1p((r / gamma) ** 2)
    return out[()] if out.ndim == 0 else out


def log_pdf_1d_grad(kind, x, mu, gamma):
    """Partial derivatives of :func:`log_pdf_1d` w.r.t. ``mu`` and ``gamma``.

    The Laplace derivative in ``mu`` uses sign 0 at a zero residual.
    """
    kind = as_kind(kind)
    gamma = np.asarray(gamma, dtype=np.float64)
    r = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    if kind is ComponentKind.LAPLACE:
        d_mu = np.sign(r) / gamma
        d_gamma = (np.abs(r) / gamma - 1.0) / gamma
    elif kind is ComponentKind.GAUSSIAN:
        z = r / gamma
        d_mu = z / gamma
        d_gamma = (z * z - 1.0) / gamma
    else:
        z = r / gamma
        q = 1.0 + z * z
        d_mu = 2 * z / (gamma * q)
        d_gamma = (2 * z * z / q - 1.0) / gamma
    return d_mu, d_gamma


def _dims(sel, K_total: int) -> np.ndarray:
    """Scalar dimension indices (x and y) of the selected keypoints."""
    if sel is None:
        sel = range(K_total)
    sel = np.asarray(list(sel), dtype=np.int64)
    if len(sel) == 0:
        raise ValueError("empty keypoint selection")
    if len(np.unique(sel)) != len(sel) or sel.min() < 0 or sel.max() >= K_total:
        raise ValueError(f"invalid keypoint selection {sel.tolist()} for K_total={K_total}")
    return np.stack([2 * sel, 2 * sel + 1], axis=1).reshape(-1)


def _target(gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gt, KeypointSet):
        return gt.flat(), gt.flat_visibility()
    k = np.asarray(gt, dtype=np.float64).reshape(-1)
    return k, np.ones(len(k), dtype=bool)


def joint_log_pdf(kind, k, mu, gamma, sel=None):
    """Sum of 1-D log densities over the selected keypoints' x and y dimensions.

    ``mu``/``gamma`` may be a single ``2K`` vector or an ``(M, 2K)`` stack, in
    which case one value per component is returned.  Unlabeled keypoints of a
    :class:`KeypointSet` are marginalized (their dimensions are dropped).
    """
    target, vis = _target(k)
    mu = np.asarray(mu, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    dims = _dims(sel, mu.shape[-1] // 2)
    dims = dims[vis[dims]]
    lp = log_pdf_1d(kind, target[dims], mu[..., dims], gamma[..., dims])
    return np.sum(lp, axis=-1)


def component_log_joint(field: MixtureField, gt, sel=None, kind=ComponentKind.LAPLACE) -> np.ndarray:
    return np.atleast_1d(joint_log_pdf(kind, gt, field.mu, field.gamma, sel))


def _log_weighted(field: MixtureField, gt, sel, kind) -> np.ndarray:
    if field.M == 0:
        raise ValueError("empty mixture field")
    if not np.any(field.pi > 0):
        raise ValueError("all mixture coefficients are zero")
    with np.errstate(divide="ignore"):
        log_pi = np.log(field.pi)
    return log_pi + component_log_joint(field, gt, sel, kind)


def mixture_log_likelihood(field: MixtureField, gt, sel=None, kind=ComponentKind.LAPLACE) -> float:
    """log sum_m pi_m F(k; mu_m, gamma_m) over the selected keypoints."""
    return float(logsumexp(_log_weighted(field, gt, sel, kind)))


def responsibilities(field: MixtureField, gt, sel=None, kind=ComponentKind.LAPLACE) -> np.ndarray:
    a = _log_weighted(field, gt, sel, kind)
    return np.exp(a - logsumexp(a))


def underflow_floor(precision: str = "single") -> float:
    """Natural log of the smallest positive subnormal at the given precision."""
    dtype = {"single": np.float32, "double": np.float64}[precision]
    return math.log(float(np.nextafter(dtype(0), dtype(1))))


def underflow_mask(log_joint: np.ndarray, precision: str = "single") -> np.ndarray:
    return np.asarray(log_joint) < underflow_floor(precision)


def underflow_ratio(field: MixtureField, gts: Sequence, sel=None, kind=ComponentKind.LAPLACE,
                    precision: str = "single") -> float:
    """Fraction of (person, component) pairs whose linear-space joint density is 0.

    A pair counts as underflowed when its joint log density lies below the log
    of the smallest positive subnormal at ``precision``.
    """
    if len(gts) == 0:
        raise ValueError("underflow_ratio needs at least one ground truth")
    hits = [underflow_mask(component_log_joint(field, gt, sel, kind), precision) for gt in gts]
    return float(np.mean(np.concatenate(hits)))


def per_dim_log_pdf(kind, targets: np.ndarray, mu: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Batched per-dimension log density, shape ``(N, M, 2K)``.

    ``targets`` is ``(N, 2K)``; ``mu``/``gamma`` are ``(M, 2K)`` shared by all
    persons or ``(N, M, 2K)`` when each person belongs to its own field.
    """
    t = np.asarray(targets, dtype=np.float64)[:, None, :]
    if mu.ndim == 2:
        mu, gamma = mu[None], gamma[None]
    return log_pdf_1d(kind, t, mu, gamma)


def group_indicator(partition, K_total: int) -> np.ndarray:
    """``(2K, N_g)`` 0/1 matrix mapping scalar dimensions to their group."""
    ind = np.zeros((2 * K_total, len(partition.groups)))
    for g, group in enumerate(partition.groups):
        for j in group:
            ind[2 * j, g] = ind[2 * j + 1, g] = 1.0
    return ind


def write_underflow_csv(path, rows: Iterable[tuple]) -> None:
    """Rows of ``(K_g, kind, precision, ratio)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["K_g", "kind", "precision", "ratio"])
        for kg, kind, precision, ratio in rows:
            w.writerow([kg, as_kind(kind).value, precision, repr(float(ratio))])
