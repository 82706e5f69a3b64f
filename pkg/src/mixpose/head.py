"""Convolutional keypoint head and the transforms from raw maps to a mixture.

A small strided encoder stands in for the backbone and produces one feature
map per pyramid level; a shared stack of 3x3 convolutions (Swish between
layers, linear last layer) turns every level into raw maps

    mu_raw (2K channels), gamma_raw (2K channels), o_raw (1 channel)

which become ``mu = anchor + s * mu_raw``, ``gamma = softplus(gamma_raw) +
floor``, ``o = sigmoid(o_raw)`` and ``pi = o / sum(o)`` over all levels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .types import GridAnchors, MixtureField, PyramidSpec, make_anchors

GAMMA_FLOOR = 1e-3


@dataclass(frozen=True)
class BackboneConfig:
    # channels of the stride-2 stem convolutions; the last one reaches stride 2**len
    stem_channels: tuple[int, ...] = (16, 24, 32)


@dataclass(frozen=True)
class HeadConfig:
    K_total: int = 6
    image_side: int = 64
    num_layers: int = 8
    width: int = 32
    levels: tuple[int, ...] = (3, 4)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gamma_floor: float = GAMMA_FLOOR
    init_gamma_frac: float = 0.25
    init_o: float = 0.01
    last_layer_std: float = 0.01

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("head needs at least one convolution")
        if len(self.backbone.stem_channels) != min(self.levels):
            raise ValueError("stem depth must reach the stride of the finest pyramid level")
        if list(self.levels) != list(range(min(self.levels), max(self.levels) + 1)):
            raise ValueError("pyramid levels must be consecutive")

    @property
    def out_channels(self) -> int:
        return 4 * self.K_total + 1

    @property
    def pyramid(self) -> PyramidSpec:
        return PyramidSpec.for_image(self.image_side, self.levels)


def softplus_inverse(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def logit(p: float) -> float:
    return math.log(p / (1 - p))


def _uniform_conv(rng, out_c, in_c):
    bound = math.sqrt(6.0 / (in_c * 9))
    return rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3))


def init_parameters(rng, config: HeadConfig) -> dict[str, ad.Tensor]:
    """Fan-in scaled uniform hidden convolutions; the last layer starts near
    ``mu = anchor``, ``gamma = init_gamma_frac * image_side``, ``o = init_o``."""
    rng = np.random.default_rng(rng)
    params: dict[str, np.ndarray] = {}
    in_c = 1
    stem = list(config.backbone.stem_channels)
    for i, c in enumerate(stem):
        params[f"stem{i}.w"] = _uniform_conv(rng, c, in_c)
        params[f"stem{i}.b"] = np.zeros(c)
        in_c = c
    for l in config.levels:
        params[f"lateral{l}.w"] = _uniform_conv(rng, config.width, in_c)
        params[f"lateral{l}.b"] = np.zeros(config.width)
        in_c = config.width
    for i in range(config.num_layers - 1):
        params[f"head{i}.w"] = _uniform_conv(rng, config.width, config.width)
        params[f"head{i}.b"] = np.zeros(config.width)
    K2 = 2 * config.K_total
    params["out.w"] = rng.normal(0.0, config.last_layer_std, size=(config.out_channels, config.width, 3, 3))
    b = np.zeros(config.out_channels)
    target = config.init_gamma_frac * config.image_side - config.gamma_floor
    b[K2:2 * K2] = softplus_inverse(target)
    b[2 * K2] = logit(config.init_o)
    params["out.b"] = b
    return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def _features(params, x, config: HeadConfig):
    """Per-level feature maps, finest first."""
    h = x
    for i in range(len(config.backbone.stem_channels)):
        h = ad.swish(ad.conv2d_3x3(h, params[f"stem{i}.w"], params[f"stem{i}.b"], stride=2))
    feats = []
    for j, l in enumerate(config.levels):
        stride = 1 if j == 0 else 2
        h = ad.swish(ad.conv2d_3x3(h, params[f"lateral{l}.w"], params[f"lateral{l}.b"], stride=stride))
        feats.append(h)
    return feats


def forward(params, image, config: HeadConfig):
    """Raw maps per level: list of ``(mu_raw, gamma_raw, o_raw)`` tensors, each (B, C, H, W)."""
    image = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    if image.value.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (config.image_side,) * 2:
        raise ValueError(f"expected image of shape (B, 1, {config.image_side}, {config.image_side}), "
                         f"got {image.shape}")
    x = ad.add(image, -0.5)
    K2 = 2 * config.K_total
    raws = []
    for f in _features(params, x, config):
        h = f
        for i in range(config.num_layers - 1):
            h = ad.swish(ad.conv2d_3x3(h, params[f"head{i}.w"], params[f"head{i}.b"]))
        out = ad.conv2d_3x3(h, params["out.w"], params["out.b"])
        raws.append(_split_channels(out, K2))
    return raws


def _split_channels(out, K2):
    return (ad.gather(out, np.arange(K2), axis=1),
            ad.gather(out, np.arange(K2, 2 * K2), axis=1),
            ad.gather(out, np.array([2 * K2]), axis=1))


@dataclass
class FieldTensors:
    """Batched mixture parameters on the tape: (B, M, 2K), (B, M, 2K), (B, M), (B, M)."""
    mu: ad.Tensor
    gamma: ad.Tensor
    o: ad.Tensor
    log_pi: ad.Tensor

    def fields(self) -> list[MixtureField]:
        return [MixtureField(m, g, o) for m, g, o in zip(self.mu.value, self.gamma.value, self.o.value)]


def _flatten_levels(maps):
    """(B, C, H, W) per level -> (B, M, C)."""
    flat = []
    for m in maps:
        B, C, H, W = m.shape
        flat.append(ad.transpose(ad.reshape(m, (B, C, H * W)), (0, 2, 1)))
    return ad.concat(flat, axis=1)


def transform_parameters(raws, anchors: GridAnchors, spec: PyramidSpec,
                         gamma_floor: float = GAMMA_FLOOR) -> FieldTensors:
    if len(raws) != len(spec.levels):
        raise ValueError(f"{len(raws)} raw levels for a {len(spec.levels)}-level pyramid")
    for (mu_raw, _, _), lv in zip(raws, spec.levels):
        if mu_raw.shape[2:] != (lv.height, lv.width):
            raise ValueError(f"level {lv.index}: raw map {mu_raw.shape[2:]} vs grid {(lv.height, lv.width)}")
    mu_raw = _flatten_levels([r[0] for r in raws])
    gamma_raw = _flatten_levels([r[1] for r in raws])
    o_raw = _flatten_levels([r[2] for r in raws])
    B, M, K2 = mu_raw.shape
    if M != len(anchors.centers):
        raise ValueError(f"{M} components but {len(anchors.centers)} anchors")
    mu = ad.add(ad.mul(mu_raw, anchors.scales[None, :, None]), anchors.as_mu(K2 // 2)[None])
    gamma = ad.add(ad.softplus(gamma_raw), gamma_floor)
    o_raw = ad.reshape(o_raw, (B, M))
    o = ad.sigmoid(o_raw)
    log_o = ad.scalar_mul(ad.softplus(ad.scalar_mul(o_raw, -1.0)), -1.0)
    log_pi = ad.sub(log_o, ad.log(ad.sum_over(o, axes=1, keepdims=True)))
    return FieldTensors(mu, gamma, o, log_pi)


class Model:
    """Parameters plus the fixed pyramid and anchor grid of one configuration."""

    def __init__(self, config: HeadConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params
        self.pyramid = config.pyramid
        self.anchors = make_anchors(self.pyramid)

    @classmethod
    def init(cls, config: HeadConfig, seed) -> "Model":
        return cls(config, init_parameters(seed, config))

    def __call__(self, images) -> FieldTensors:
        images = np.asarray(images.value if isinstance(images, ad.Tensor) else images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[-1] == 1:  # (B, H, W, 1) -> (B, 1, H, W)
            images = images.transpose(0, 3, 1, 2)
        raws = forward(self.params, ad.Tensor(images), self.config)
        return transform_parameters(raws, self.anchors, self.pyramid, self.config.gamma_floor)

    def fields(self, images) -> list[MixtureField]:
        return self(images).fields()


# -- checkpoints -----------------------------------------------------------------

_MAGIC = "mixpose-checkpoint 1"


def _config_lines(config: HeadConfig) -> list[str]:
    d = asdict(config)
    d["stem_channels"] = d.pop("backbone")["stem_channels"]
    out = []
    for k, v in d.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"#{k} = {v}")
    return out


def _config_from_lines(lines: list[str]) -> HeadConfig:
    kv = {}
    for line in lines:
        k, v = line[1:].split("=", 1)
        kv[k.strip()] = v.strip()
    ints = lambda s: tuple(int(x) for x in s.split(",") if x)  # noqa: E731
    return HeadConfig(
        K_total=int(kv["K_total"]), image_side=int(kv["image_side"]), num_layers=int(kv["num_layers"]),
        width=int(kv["width"]), levels=ints(kv["levels"]),
        backbone=BackboneConfig(ints(kv["stem_channels"])), gamma_floor=float(kv["gamma_floor"]),
        init_gamma_frac=float(kv["init_gamma_frac"]), init_o=float(kv["init_o"]),
        last_layer_std=float(kv["last_layer_std"]),
    )


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Text header (config, then one ``name d0,d1,...`` line per tensor, then
    ``END``) followed by the tensors as little-endian float64."""
    lines = [_MAGIC] + _config_lines(model.config)
    for k, v in (extra or {}).items():
        lines.append(f"@{k} = {v}")
    for name, t in model.params.items():
        lines.append(f"{name} {','.join(str(d) for d in t.shape)}")
    lines.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"\nEND\n") + len(b"\nEND\n")
    lines = data[:end].decode().splitlines()
    if lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    config = _config_from_lines([l for l in lines if l.startswith("#")])
    extra = {}
    for l in lines:
        if l.startswith("@"):
            k, v = l[1:].split("=", 1)
            extra[k.strip()] = v.strip()
    params = {}
    offset = end
    for l in lines[1:-1]:
        if l[0] in "#@":
            continue
        name, shape = l.split(" ")
        shape = tuple(int(d) for d in shape.split(","))
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        params[name] = ad.Tensor(arr, requires_grad=True, name=name)
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return Model(config, params), extra
