"""Finite-difference checks of every primitive and of the full image-to-loss path."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .density import ComponentKind
from .head import BackboneConfig, HeadConfig, Model
from .rkg import Targets, group_nll, sample_partition
from .types import KeypointSet


def _param(rng, shape, lo=-2.0, hi=2.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weights(rng, shape):
    return ad.Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng, shape):
    return ad.Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 2.0, size=shape), requires_grad=True)


def _cases(rng):
    """op name -> (f, params); every f reduces to a scalar through a random linear weighting."""
    def case(op, *params):
        w = rng.normal(size=op(*params).shape)
        return (lambda: ad.sum_over(ad.mul(op(*params), w))), list(params)

    idx = np.array([4, 0, 0, 2])
    return {
        "add": case(ad.add, _param(rng, (2, 3, 4)), _param(rng, (3, 4))),
        "scalar_mul": case(lambda a: ad.scalar_mul(a, -1.7), _param(rng, (3, 5))),
        "mul": case(ad.mul, _param(rng, (4, 3)), _param(rng, (4, 1))),
        "div": case(ad.div, _param(rng, (4, 3)), _param(rng, (4, 3), 0.5, 2.0)),
        "exp": case(ad.exp, _param(rng, (3, 4))),
        "log": case(ad.log, _param(rng, (3, 4), 0.2, 3.0)),
        "abs": case(ad.abs, _away_from_zero(rng, (3, 4))),
        "square": case(ad.square, _param(rng, (3, 4))),
        "sigmoid": case(ad.sigmoid, _param(rng, (2, 6), -6, 6)),
        "softplus": case(ad.softplus, _param(rng, (2, 6), -6, 6)),
        "swish": case(ad.swish, _param(rng, (2, 6), -6, 6)),
        "sum_over": case(lambda a: ad.sum_over(a, axes=(0, 2)), _param(rng, (2, 3, 4))),
        "logsumexp_over": case(lambda a: ad.logsumexp_over(a, axis=1), _param(rng, (3, 5), -4, 4)),
        "gather": case(lambda a: ad.gather(a, idx, axis=1), _param(rng, (3, 5))),
        "reshape": case(lambda a: ad.reshape(a, (3, 4)), _param(rng, (2, 6))),
        "transpose": case(lambda a: ad.transpose(a, (2, 0, 1)), _param(rng, (2, 3, 4))),
        "concat": case(lambda a, b: ad.concat([a, b], axis=0), _param(rng, (2, 3)), _param(rng, (1, 3))),
        "conv2d_3x3": case(ad.conv2d_3x3, _param(rng, (2, 3, 7, 7)), _weights(rng, (4, 3, 3, 3)),
                           _weights(rng, (4,))),
        "conv2d_3x3_stride2": case(lambda x, w, b: ad.conv2d_3x3(x, w, b, stride=2), _param(rng, (1, 2, 8, 8)),
                                   _weights(rng, (3, 2, 3, 3)), _weights(rng, (3,))),
    }


def check_primitives(probes: int = 64, seed: int = 0, eps: float = 1e-4) -> list[tuple[str, int, float]]:
    """Rows ``(op, probes, max_rel_err)`` for every primitive on random inputs."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, (f, params) in _cases(rng).items():
        rep = ad.grad_check(f, params, eps=eps, probes=probes, rng=rng)
        rows.append((name, rep.probes, rep.max_rel_err))
    return rows


SMALL_HEAD = HeadConfig(K_total=6, image_side=16, num_layers=3, width=8, levels=(2, 3),
                        backbone=BackboneConfig(stem_channels=(6, 8)))


def end_to_end_case(seed: int = 0, kind=ComponentKind.LAPLACE, kg: int = 3, batch: int = 2,
                    config: HeadConfig = SMALL_HEAD, out_std: float = 0.3):
    """(f, params) for image -> head -> transforms -> grouped NLL on a random problem.

    The last layer is redrawn with standard deviation ``out_std`` so the check
    sees spread-out means and scales rather than the near-constant initial field.
    """
    rng = np.random.default_rng(seed)
    side = config.image_side
    model = Model.init(config, seed)
    out_w = model.params["out.w"]
    out_w.value[...] = rng.normal(0, out_std, size=out_w.shape)
    images = rng.uniform(0, 1, size=(batch, 1, side, side))
    per_image = [[KeypointSet(rng.uniform(0, side, size=(config.K_total, 2))) for _ in range(rng.integers(1, 3))]
                 for _ in range(batch)]
    targets = Targets.from_keypoints(per_image)
    partition = sample_partition(config.K_total, kg, rng)
    params = list(model.params.values())

    def f():
        ft = model(images)
        total, _ = group_nll(ft.mu, ft.gamma, ft.log_pi, targets, partition, kind)
        return total
    return f, params


def check_end_to_end(probes: int = 64, seed: int = 0, eps: float = 1e-3, kind=ComponentKind.LAPLACE,
                     config: HeadConfig = HeadConfig(), out_std: float = 0.05):
    """Full desk-scale head by default.

    The default step is 1e-3 rather than 1e-4: the loss is O(50), so one ulp of
    it divided by 2 * 1e-4 already exceeds 1e-5 of the smallest parameter
    gradients of an eight-layer head.
    """
    f, params = end_to_end_case(seed, kind, config=config, out_std=out_std)
    return ad.grad_check(f, params, eps=eps, probes=probes, rng=seed)
