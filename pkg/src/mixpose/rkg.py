"""Mixture negative log-likelihood with random keypoint grouping.

The full objective sums, over persons, the negative mixture log-likelihood of
all ``2 * K_total`` coordinates.  The grouped objective splits the keypoints
into ``N_g`` groups of ``K_g`` and averages the per-group objectives; the
grouping is re-drawn every training iteration.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .density import (ComponentKind, as_kind, group_indicator, log_pdf_1d, log_pdf_1d_grad,
                      logsumexp, underflow_floor)
from .types import (GroupPartition, KeypointSet, MixtureField, PersonAnnotation, SkeletonSpec,
                    full_partition)


@dataclass(frozen=True)
class LossReport:
    loss: float
    group_losses: tuple[float, ...]
    underflow_ratio: float
    partition: GroupPartition


def append_auxiliary_center(ann: PersonAnnotation) -> KeypointSet:
    """Keypoints of ``ann`` with the box center appended as the last, always-labeled keypoint."""
    x0, y0, x1, y1 = ann.bbox
    kp = ann.keypoints
    coords = np.vstack([kp.coords, [[(x0 + x1) / 2, (y0 + y1) / 2]]])
    return KeypointSet(coords, np.append(kp.visibility, True))


def sample_partition(K_total: int, K_g: int, rng: np.random.Generator) -> GroupPartition:
    if K_g < 1 or K_total % K_g:
        raise ValueError(f"K_total={K_total} is not divisible by K_g={K_g}")
    perm = rng.permutation(K_total)
    return GroupPartition(tuple(tuple(int(i) for i in perm[s:s + K_g]) for s in range(0, K_total, K_g)))


def heuristic_partition(skeleton: SkeletonSpec) -> GroupPartition:
    if skeleton.groups is None:
        raise ValueError("skeleton has no preset grouping")
    return GroupPartition(skeleton.groups)


def partition_hash(partition: GroupPartition) -> str:
    return hashlib.sha1(repr(partition.groups).encode()).hexdigest()[:10]


# -- batched core --------------------------------------------------------------

@dataclass
class Targets:
    """Ground truths of a batch, flattened over persons."""
    coords: np.ndarray  # (N, 2K)
    vis: np.ndarray  # (N, 2K) float 0/1
    image: np.ndarray  # (N,) index of the owning image

    @classmethod
    def from_keypoints(cls, per_image: Sequence[Sequence[KeypointSet]]) -> "Targets":
        coords, vis, image = [], [], []
        for b, kps in enumerate(per_image):
            for kp in kps:
                coords.append(kp.flat())
                vis.append(kp.flat_visibility())
                image.append(b)
        if not coords:
            raise ValueError("no ground-truth persons")
        return cls(np.array(coords), np.array(vis, dtype=np.float64), np.array(image, dtype=np.int64))

    def __len__(self):
        return len(self.image)


def _group_log_joint(kind, t: Targets, mu, gamma, ind):
    """Per-dimension log densities (N, M, 2K) and group joints (N, M, G)."""
    lp = log_pdf_1d(kind, t.coords[:, None, :], mu[t.image], gamma[t.image]) * t.vis[:, None, :]
    return lp, lp @ ind


def _log_pi(o: np.ndarray) -> np.ndarray:
    o = np.atleast_2d(o)
    total = o.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("all mixture coefficients are zero")
    with np.errstate(divide="ignore"):
        return np.log(o) - np.log(total)


def _evaluate(kind, t: Targets, mu, gamma, log_pi, partition, space="log", precision="double"):
    """Loss terms of the grouped objective.

    Returns per-(person, group) log-likelihoods, responsibilities (N, M, G),
    per-dimension log densities and the group joints.  ``space="linear"``
    sums densities after exponentiating at ``precision``, so joints below the
    representable range contribute exactly zero.
    """
    ind = group_indicator(partition, mu.shape[-1] // 2)
    lp, lj = _group_log_joint(kind, t, mu, gamma, ind)
    a = log_pi[t.image][:, :, None] + lj
    if space == "log":
        ll = logsumexp(a, axis=1)
        with np.errstate(invalid="ignore"):
            r = np.exp(a - ll[:, None, :])
    elif space == "linear":
        dt = {"single": np.float32, "double": np.float64}[precision]
        with np.errstate(under="ignore", over="ignore", divide="ignore", invalid="ignore"):
            w = np.exp(a.astype(dt))
            p = w.sum(axis=1, dtype=dt)
            ll = np.log(p).astype(np.float64)
            r = (w / p[:, None, :]).astype(np.float64)
    else:
        raise ValueError(f"unknown loss space {space!r}")
    return ll, r, lp, lj, ind


# -- numpy API -----------------------------------------------------------------

def _single(field: MixtureField, gts: Sequence) -> Targets:
    kps = [g if isinstance(g, KeypointSet) else KeypointSet(np.asarray(g).reshape(-1, 2)) for g in gts]
    if not kps:
        raise ValueError("no ground-truth persons")
    return Targets.from_keypoints([kps])


def full_nll_loss(field: MixtureField, gts: Sequence, kind=ComponentKind.LAPLACE) -> float:
    """-sum_i log p(k_i) over all keypoints of every person."""
    return group_nll_loss(field, gts, full_partition(field.K_total), kind).loss


def group_nll_loss(field: MixtureField, gts: Sequence, partition: GroupPartition,
                   kind=ComponentKind.LAPLACE, precision: str = "single") -> LossReport:
    """Grouped objective: per-group negative log-likelihoods averaged over groups.

    ``precision`` only affects the reported underflow ratio.
    """
    if partition.K_total != field.K_total:
        raise ValueError(f"partition covers {partition.K_total} keypoints, field has {field.K_total}")
    t = _single(field, gts)
    log_pi = _log_pi(field.o)
    ll, _, _, lj, _ = _evaluate(as_kind(kind), t, field.mu[None], field.gamma[None], log_pi, partition)
    group_losses = -ll.sum(axis=0)
    return LossReport(
        loss=float(group_losses.sum() / partition.N_g),
        group_losses=tuple(float(v) for v in group_losses),
        underflow_ratio=float(np.mean(lj < underflow_floor(precision))),
        partition=partition,
    )


# -- tape API ------------------------------------------------------------------

def group_nll(mu: ad.Tensor, gamma: ad.Tensor, log_pi: ad.Tensor, targets: Targets,
              partition: GroupPartition, kind=ComponentKind.LAPLACE, space: str = "log",
              precision: str = "double") -> tuple[ad.Tensor, dict]:
    """Fused grouped NLL over a batch, summed over images.

    ``mu``/``gamma`` are (B, M, 2K) and ``log_pi`` is (B, M).  The backward
    rule is the closed form through the responsibilities.  Also returns
    diagnostics: per-group losses and the single-precision underflow ratio.
    """
    kind = as_kind(kind)
    N_g = partition.N_g
    ll, r, lp, lj, ind = _evaluate(kind, targets, mu.value, gamma.value, log_pi.value, partition,
                                   space, precision)
    value = -ll.sum() / N_g

    def bw(g):
        w = -(g / N_g) * r  # (N, M, G)
        B, M = log_pi.shape
        g_logpi = np.zeros((B, M))
        np.add.at(g_logpi, targets.image, w.sum(axis=2))
        g_lp = (w @ ind.T) * targets.vis[:, None, :]
        d_mu, d_gamma = log_pdf_1d_grad(kind, targets.coords[:, None, :], mu.value[targets.image],
                                        gamma.value[targets.image])
        g_mu = np.zeros(mu.shape)
        g_gamma = np.zeros(gamma.shape)
        np.add.at(g_mu, targets.image, g_lp * d_mu)
        np.add.at(g_gamma, targets.image, g_lp * d_gamma)
        return g_mu, g_gamma, g_logpi

    out = ad.record(value, (mu, gamma, log_pi), bw, "group_nll")
    info = {
        "group_losses": -ll.sum(axis=0),
        "underflow_ratio": float(np.mean(lj < underflow_floor("single"))),
    }
    return out, info


def _log_pdf_tape(kind, t, mu, gamma):
    r = ad.sub(t, mu)
    if kind is ComponentKind.LAPLACE:
        return ad.scalar_mul(ad.add(ad.log(ad.scalar_mul(gamma, 2.0)), ad.div(ad.abs(r), gamma)), -1.0)
    if kind is ComponentKind.GAUSSIAN:
        z = ad.div(r, gamma)
        return ad.scalar_mul(ad.add(ad.add(ad.log(gamma), ad.scalar_mul(ad.square(z), 0.5)),
                                    0.5 * np.log(2 * np.pi)), -1.0)
    z = ad.div(r, gamma)
    return ad.scalar_mul(ad.add(ad.add(ad.log(gamma), ad.log(ad.add(ad.square(z), 1.0))), np.log(np.pi)), -1.0)


def group_nll_composed(mu: ad.Tensor, gamma: ad.Tensor, log_pi: ad.Tensor, targets: Targets,
                       partition: GroupPartition, kind=ComponentKind.LAPLACE) -> ad.Tensor:
    """Same objective as :func:`group_nll` built from tape primitives only."""
    kind = as_kind(kind)
    mu_n = ad.gather(mu, targets.image, axis=0)
    gamma_n = ad.gather(gamma, targets.image, axis=0)
    lp_n = ad.gather(log_pi, targets.image, axis=0)
    t = ad.Tensor(targets.coords[:, None, :])
    lp = ad.mul(_log_pdf_tape(kind, t, mu_n, gamma_n), targets.vis[:, None, :])
    total = None
    for group in partition.groups:
        dims = np.array([[2 * j, 2 * j + 1] for j in group]).reshape(-1)
        joint = ad.sum_over(ad.gather(lp, dims, axis=2), axes=2)
        ll = ad.sum_over(ad.logsumexp_over(ad.add(joint, lp_n), axis=1))
        total = ll if total is None else ad.add(total, ll)
    return ad.scalar_mul(total, -1.0 / partition.N_g)


def write_training_log(path, rows) -> None:
    """Rows of ``(iter, loss, underflow_ratio, partition_hash)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "loss", "underflow_ratio", "partition_hash"])
        for row in rows:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3]])
