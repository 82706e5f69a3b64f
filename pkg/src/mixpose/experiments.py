"""Desk-scale trend experiments: grouping size, grouping mode, occlusion and component kind.

Each trial trains one model under the shared protocol and evaluates it on a
held-out set.  Trials are cached on disk keyed by their full configuration and
a fingerprint of the package source, so a rerun with unchanged code reuses
finished runs instead of retraining.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import ComponentKind
from .evaluation import duplicate_rate
from .head import load_checkpoint
from .train import TrainConfig, eval_scenes, evaluate, predictions, train, training_scenes
from .types import SYNTH_SKELETON

PROTOCOL = TrainConfig(iterations=5000, num_scenes=2000, image_side=64, person_count=(1, 3),
                       max_iou_range=(0.3, 0.8), eval_max_iou_range=(0.3, 0.8))
SEEDS = (0, 1, 2)


# modules whose code changes what a trial computes
_TRIAL_MODULES = ("types", "density", "autodiff", "rkg", "head", "synth", "evaluation", "train")


def source_fingerprint() -> str:
    h = hashlib.sha1()
    for p in (Path(__file__).parent / f"{m}.py" for m in _TRIAL_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def config_key(config: TrainConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha1((blob + source_fingerprint()).encode()).hexdigest()[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get("MIXPOSE_CACHE", Path.cwd() / ".trend_cache"))


def run_trial(config: TrainConfig, out_dir=None, scenes=None, eval_set=None) -> dict:
    scenes = scenes if scenes is not None else training_scenes(config)
    eval_set = eval_set if eval_set is not None else eval_scenes(config)
    res = train(config, out_dir, scenes=scenes)
    row = {"aborted": res.aborted, "abort_iter": res.abort_iter, "seconds": res.seconds,
           "final_loss": res.final_loss, "mean_underflow": res.mean_underflow()}
    if res.aborted:
        row.update(ap=math.nan, ap50=math.nan, duplicate_rate=math.nan)
        return row
    preds = predictions(res.model, eval_set)
    ev = evaluate(res.model, eval_set)
    row.update(ap=ev.ap, ap50=ev.ap50,
               duplicate_rate=duplicate_rate(preds, [list(s.persons) for s in eval_set], SYNTH_SKELETON))
    return row


def cached_trial(config: TrainConfig, cache_dir=None, scenes=None, eval_set=None) -> dict:
    """``run_trial`` with the result (and checkpoint) stored under ``cache_dir/<key>``."""
    d = Path(cache_dir or default_cache_dir()) / config_key(config)
    result = d / "result.json"
    if result.exists():
        return json.loads(result.read_text())
    d.mkdir(parents=True, exist_ok=True)
    row = run_trial(config, d, scenes, eval_set)
    row["dir"] = str(d)
    result.write_text(json.dumps(row, indent=2))
    return row


def checkpoint_of(row: dict):
    return load_checkpoint(Path(row["dir"]) / "model.ckpt")[0]


def seeded(config: TrainConfig, seeds: Sequence[int] = SEEDS) -> list[TrainConfig]:
    return [dataclasses.replace(config, seed=s) for s in seeds]


def median(rows: Sequence[dict], key: str) -> float:
    """Median over seeds; an aborted run (NaN) ranks below every finite value."""
    vals = [-math.inf if math.isnan(r[key]) else r[key] for r in rows]
    return float(np.median(vals))


VARIANTS = {
    "kg3": {},
    "kg1": {"kg": 1},
    "none_linear_single": {"grouping": "none", "loss_space": "linear", "loss_precision": "single"},
    "heuristic": {"grouping": "heuristic"},
    "gaussian": {"kind": ComponentKind.GAUSSIAN.value},
    "cauchy": {"kind": ComponentKind.CAUCHY.value},
    "light_kg3": {"max_iou_range": (0.0, 0.5), "eval_max_iou_range": (0.5, 0.9)},
    "light_kg1": {"kg": 1, "max_iou_range": (0.0, 0.5), "eval_max_iou_range": (0.5, 0.9)},
}


def variant(name: str, base: TrainConfig = PROTOCOL) -> TrainConfig:
    return dataclasses.replace(base, **VARIANTS[name])


def variant_trials(name: str, cache_dir=None, base: TrainConfig = PROTOCOL, seeds: Sequence[int] = SEEDS) -> list[dict]:
    """All seeds of one variant, training whatever is not cached yet."""
    return [cached_trial(cfg, cache_dir) for cfg in seeded(variant(name, base), seeds)]
