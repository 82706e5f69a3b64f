"""Command-line entry point: ``mixpose <subcommand> ...``.

Exit status is 0 on success, 2 when training stops on a non-finite loss and
1 on usage or input errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checks import check_end_to_end, check_primitives
from .evaluation import write_metrics_csv, write_pr_csv
from .head import load_checkpoint
from .synth import generate, load_dataset, write_dataset
from .train import (TrainConfig, eval_scenes, evaluate, load_config, sweep_kg, train, training_scenes,
                    underflow_by_kg)

EXIT_OK, EXIT_USAGE, EXIT_NAN = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    finally:
        if path:
            fh.close()


def _config(path) -> TrainConfig:
    if not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    return load_config(path)


def cmd_generate_data(args) -> int:
    cfg = _config(args.config)
    if args.eval:
        gen, n, seed0 = cfg.gen_config(eval=True), cfg.eval_scenes, cfg.eval_seed
    else:
        gen, n, seed0 = cfg.gen_config(), cfg.num_scenes, cfg.data_seed
    scenes = generate(gen, n, seed0)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(args.out, scenes, gen)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    scenes = training_scenes(cfg)
    ev = eval_scenes(cfg) if cfg.eval_interval else None
    res = train(cfg, args.out, scenes=scenes, eval_set=ev)
    out = Path(args.out)
    if res.evals:
        _write_rows(out / "eval_log.csv", ["iter", "AP", "AP50", "AP75"],
                    [(it, e.ap, e.ap50, e.ap75) for it, e in res.evals])
    if res.aborted:
        print(f"non-finite loss at iteration {res.abort_iter}; partition {res.abort_partition.groups}",
              file=sys.stderr)
        return EXIT_NAN
    print(f"trained {cfg.iterations} iterations in {res.seconds:.1f}s; final loss {res.final_loss:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    scenes = _load_data(args.data)
    result = evaluate(model, scenes)
    write_metrics_csv(args.out, result)
    pr = Path(args.out).with_suffix(".pr.csv")
    write_pr_csv(pr, result)
    print(f"AP {result.ap:.4f}  AP50 {result.ap50:.4f}  AP75 {result.ap75:.4f}")
    return EXIT_OK


def cmd_sweep_kg(args) -> int:
    base = _config(args.config)
    K_total = base.K_total
    bad = [k for k in args.kg if k < 1 or K_total % k]
    if bad:
        raise UsageError(f"kg values {bad} do not divide K_total={K_total}")
    rows = sweep_kg(base, args.kg)
    _write_rows(args.out, ["K_g", "AP", "AP50", "mean_underflow_ratio"], rows)
    return EXIT_OK


def cmd_diagnose_underflow(args) -> int:
    model, extra = _load_model(args.checkpoint)
    scenes = _load_data(args.data) if args.data else eval_scenes(TrainConfig())
    K_total = model.config.K_total
    bad = [k for k in args.kg if k < 1 or K_total % k]
    if bad:
        raise UsageError(f"kg values {bad} do not divide K_total={K_total}")
    kind = args.kind or extra.get("kind", "laplace")
    rows = underflow_by_kg(model, scenes, args.kg, kind, args.precision)
    _write_rows(args.out, ["K_g", "kind", "precision", "ratio"], rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = check_primitives(args.probes, args.seed)
    rep = check_end_to_end(args.probes, args.seed)
    rows.append(("end_to_end", rep.probes, rep.max_rel_err))
    if args.out:
        ad.write_gradcheck_csv(args.out, rows)
    else:
        _write_rows(None, ["op", "probes", "max_rel_err"], rows)
    worst = max(r[2] for r in rows[:-1])
    if worst >= 1e-6 or rep.max_rel_err >= 1e-5:
        logging.warning("gradient check above tolerance: primitives %.2e, end to end %.2e", worst, rep.max_rel_err)
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _load_data(path):
    if not Path(path).is_file():
        raise UsageError(f"dataset {path} not found")
    return load_dataset(path)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixpose", description="Mixture-density multi-person keypoint regression at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate-data", help="write a synthetic dataset as JSON lines")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eval", action="store_true", help="write the evaluation split instead")
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train", help="train a model; writes checkpoint, log and config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="OKS-AP of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-kg", help="independent runs over keypoints-per-group")
    s.add_argument("--config", required=True)
    s.add_argument("--kg", type=_int_list, default=[1, 2, 3, 6])
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_kg)

    s = sub.add_parser("diagnose-underflow", help="underflow ratio per group size")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--precision", choices=("single", "double"), default="single")
    s.add_argument("--data")
    s.add_argument("--kg", type=_int_list, default=[1, 2, 3, 6])
    s.add_argument("--kind", choices=("laplace", "gaussian", "cauchy"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_diagnose_underflow)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full model")
    s.add_argument("--probes", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with np.errstate(all="ignore"):
            return args.func(args)
    except (UsageError, ValueError, KeyError) as e:
        print(f"mixpose: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
