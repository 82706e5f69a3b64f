"""Deterministic SGD training, evaluation and experiment sweeps."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .density import ComponentKind, as_kind, group_indicator, log_pdf_1d, underflow_floor
from .evaluation import EvalResult, average_precision, predict
from .head import HeadConfig, Model, save_checkpoint
from .rkg import (Targets, append_auxiliary_center, group_nll, heuristic_partition, partition_hash,
                  sample_partition, write_training_log)
from .synth import GenConfig, generate, load_dataset
from .types import SYNTH_SKELETON, GroupPartition, Scene, full_partition

log = logging.getLogger(__name__)

GROUPINGS = ("random", "heuristic", "none")


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 0.01
    lr_decay_at: tuple[float, ...] = (2 / 3, 8 / 9)  # fractions of the run
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    clip_norm: float = 7.0
    kg: int = 3
    grouping: str = "random"
    kind: str = "laplace"
    loss_space: str = "log"
    loss_precision: str = "double"
    seed: int = 0
    dataset: str = ""
    num_scenes: int = 2000
    data_seed: int = 1_000_000
    person_count: tuple[int, int] = (1, 3)
    max_iou_range: tuple[float, float] = (0.3, 0.8)
    eval_dataset: str = ""
    eval_scenes: int = 200
    eval_seed: int = 9_000_000
    eval_max_iou_range: tuple[float, float] = (0.3, 0.8)
    pose_jitter: float = 0.06
    eval_interval: int = 0
    image_side: int = 64
    width: int = 32
    num_layers: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        self.kind = as_kind(self.kind).value
        if self.grouping == "random" and self.K_total % self.kg:
            raise ValueError(f"K_total={self.K_total} is not divisible by kg={self.kg}")

    @property
    def K_total(self) -> int:
        return SYNTH_SKELETON.K_total

    def head_config(self) -> HeadConfig:
        return HeadConfig(K_total=self.K_total, image_side=self.image_side, width=self.width,
                          num_layers=self.num_layers)

    def gen_config(self, eval: bool = False) -> GenConfig:
        return GenConfig(image_side=self.image_side, person_count=tuple(self.person_count),
                         max_iou_range=tuple(self.eval_max_iou_range if eval else self.max_iou_range),
                         pose_jitter=self.pose_jitter)

    def decay_steps(self) -> list[int]:
        return [int(round(f * self.iterations)) for f in self.lr_decay_at]

    def lr_at(self, it: int) -> float:
        return self.lr * self.lr_decay_factor ** sum(it >= s for s in self.decay_steps())


# -- flat key = value config files -------------------------------------------------

def _parse_value(text: str, default):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in text.split(",") if x.strip())
    return type(default)(text)


def load_config(path, cls=TrainConfig, overrides: dict | None = None):
    defaults = cls.__dataclass_fields__
    base = cls()
    values = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in defaults:
                raise ValueError(f"{path}:{n}: unknown key {k!r}")
            values[k] = _parse_value(v, getattr(base, k))
    values.update(overrides or {})
    return cls(**values)


def dump_config(config, path) -> None:
    with open(path, "w") as f:
        for fld in dataclasses.fields(config):
            v = getattr(config, fld.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            f.write(f"{fld.name} = {v}\n")


# -- data ----------------------------------------------------------------------------

def training_scenes(config: TrainConfig) -> list[Scene]:
    if config.dataset:
        return load_dataset(config.dataset)
    return generate(config.gen_config(), config.num_scenes, config.data_seed)


def eval_scenes(config: TrainConfig) -> list[Scene]:
    if config.eval_dataset:
        return load_dataset(config.eval_dataset)
    return generate(config.gen_config(eval=True), config.eval_scenes, config.eval_seed)


def batch_targets(scenes: Sequence[Scene]) -> Targets:
    return Targets.from_keypoints([[append_auxiliary_center(p) for p in s.persons] for s in scenes])


def images_of(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.image for s in scenes])


# -- optimizer -----------------------------------------------------------------------

def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class SGD:
    """Momentum SGD; weight decay is added to the gradient before clipping."""

    def __init__(self, params: dict[str, ad.Tensor], momentum: float, weight_decay: float, clip_norm: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> float:
        g = {k: grads[k] + self.weight_decay * self.params[k].value for k in self.params}
        norm = clip_by_global_norm(g, self.clip_norm)
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g[k]
            p.value -= lr * v
        return norm


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    config: TrainConfig
    log: list = field(default_factory=list)  # (iter, loss, underflow_ratio, partition_hash)
    aborted: bool = False
    abort_iter: int | None = None
    abort_partition: GroupPartition | None = None
    seconds: float = 0.0
    evals: list = field(default_factory=list)  # (iter, EvalResult)

    @property
    def final_loss(self) -> float:
        return self.log[-1][1] if self.log else float("nan")

    def mean_underflow(self) -> float:
        return float(np.mean([r[2] for r in self.log])) if self.log else float("nan")


def partition_for(config: TrainConfig, rng) -> GroupPartition:
    if config.grouping == "random":
        return sample_partition(config.K_total, config.kg, rng)
    if config.grouping == "heuristic":
        return heuristic_partition(SYNTH_SKELETON)
    return full_partition(config.K_total)


def loss_and_grads(model: Model, scenes: Sequence[Scene], partition: GroupPartition, config: TrainConfig):
    """Batch-mean grouped NLL and its gradient for every parameter."""
    with ad.Tape() as tape:
        ft = model(images_of(scenes))
        total, info = group_nll(ft.mu, ft.gamma, ft.log_pi, batch_targets(scenes), partition,
                                config.kind, config.loss_space, config.loss_precision)
        loss = ad.scalar_mul(total, 1.0 / len(scenes))
    grads = ad.backward(tape, loss)
    return float(loss.value), {k: grads[p] for k, p in model.params.items()}, info


def train(config: TrainConfig, out_dir=None, scenes: Sequence[Scene] | None = None,
          eval_set: Sequence[Scene] | None = None, snapshots: Sequence[int] = ()) -> TrainResult:
    """Run the configured number of SGD iterations.

    Stops early (``aborted``) on a non-finite loss.  Parameters at iterations in
    ``snapshots`` are kept in ``result.snapshots``.
    """
    t0 = time.perf_counter()
    scenes = list(scenes) if scenes is not None else training_scenes(config)
    model = Model.init(config.head_config(), config.seed)
    opt = SGD(model.params, config.momentum, config.weight_decay, config.clip_norm)
    ss = np.random.SeedSequence(config.seed)
    data_rng, part_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    result = TrainResult(model, config)
    result.snapshots = {}
    for it in range(config.iterations):
        if it in snapshots:
            result.snapshots[it] = {k: p.value.copy() for k, p in model.params.items()}
        batch = [scenes[i] for i in data_rng.integers(len(scenes), size=config.batch_size)]
        partition = partition_for(config, part_rng)
        with np.errstate(all="ignore"):
            loss, grads, info = loss_and_grads(model, batch, partition, config)
        finite = math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
        result.log.append((it, loss, info["underflow_ratio"], partition_hash(partition)))
        if not finite:
            result.aborted, result.abort_iter, result.abort_partition = True, it, partition
            log.warning("non-finite loss at iteration %d (partition %s)", it, partition.groups)
            break
        opt.step(grads, config.lr_at(it))
        if config.eval_interval and (it + 1) % config.eval_interval == 0 and eval_set is not None:
            result.evals.append((it + 1, evaluate(model, eval_set)))
    if config.iterations in snapshots and not result.aborted:
        result.snapshots[config.iterations] = {k: p.value.copy() for k, p in model.params.items()}
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", model, {"kind": config.kind})
        write_training_log(out / "train_log.csv", result.log)
        dump_config(config, out / "config.txt")
        if result.aborted:
            with open(out / "ABORTED", "w") as f:
                f.write(f"iteration = {result.abort_iter}\npartition = {result.abort_partition.groups}\n")
    return result


# -- evaluation and diagnostics -------------------------------------------------------

def predictions(model: Model, scenes: Sequence[Scene], batch: int = 50, **kw):
    out = []
    for s in range(0, len(scenes), batch):
        chunk = scenes[s:s + batch]
        with np.errstate(all="ignore"):
            fields = model.fields(images_of(chunk))
        out.extend(predict(f, **kw) for f in fields)
    return out


def evaluate(model: Model, scenes: Sequence[Scene], **kw) -> EvalResult:
    preds = predictions(model, scenes, **kw)
    return average_precision(preds, [list(s.persons) for s in scenes], SYNTH_SKELETON)


def underflow_by_kg(model: Model, scenes: Sequence[Scene], kg_values: Sequence[int], kind="laplace",
                    precision: str = "single", seed: int = 0, fields=None) -> list[tuple]:
    """Underflow ratio over all (person, component, group) triples for each group size.

    Each group size uses one fixed seeded partition.  Returns rows
    ``(K_g, kind, precision, ratio)``.
    """
    kind = as_kind(kind)
    if fields is None:
        fields = []
        for s in range(0, len(scenes), 50):
            fields.extend(model.fields(images_of(scenes[s:s + 50])))
    t = batch_targets(scenes)
    mu = np.stack([f.mu for f in fields])
    gamma = np.stack([f.gamma for f in fields])
    lp = log_pdf_1d(kind, t.coords[:, None, :], mu[t.image], gamma[t.image]) * t.vis[:, None, :]
    floor = underflow_floor(precision)
    K_total = mu.shape[-1] // 2
    rows = []
    for kg in kg_values:
        part = sample_partition(K_total, kg, np.random.default_rng(seed))
        lj = lp @ group_indicator(part, K_total)
        rows.append((kg, kind.value, precision, float(np.mean(lj < floor))))
    return rows


def sweep_kg(base: TrainConfig, kg_values: Sequence[int], scenes=None, eval_set=None) -> list[tuple]:
    """Independent runs differing only in ``kg``; rows ``(K_g, AP, AP50, mean underflow ratio)``.

    A run that hits a non-finite loss gives a NaN row instead of stopping the sweep.
    """
    scenes = scenes if scenes is not None else training_scenes(base)
    eval_set = eval_set if eval_set is not None else eval_scenes(base)
    rows = []
    for kg in kg_values:
        cfg = dataclasses.replace(base, kg=kg)
        res = train(cfg, scenes=scenes)
        if res.aborted:
            rows.append((kg, float("nan"), float("nan"), res.mean_underflow()))
            continue
        ev = evaluate(res.model, eval_set)
        rows.append((kg, ev.ap, ev.ap50, res.mean_underflow()))
    return rows
