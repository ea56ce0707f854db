"""Command line: gen-data, train, eval, grad-check, viz-attention, ablate.

Every command validates its inputs before touching the filesystem and
builds its output in a temporary sibling directory that is renamed into
place only on success.  Failures print one JSON line to stderr and exit
nonzero.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checks, viz
from .data import DatasetError, GeneratorConfig, generate_dataset, read_dataset, stack, write_dataset
from .metrics import FIELDS
from .model import CheckpointError, forward, load_checkpoint
from .context import ideal_attention_map
from .sharing import allocated_features
from .train import ConfigError, TrainingError, evaluate, load_config, three_stage_train
from .validation import check_image_size, check_pixel

SCHEMA = 1
EXIT_USAGE = 2
EXIT_FAILURE = 1

log = logging.getLogger("cinet")


class CliError(Exception):
    def __init__(self, kind, message, code=EXIT_USAGE):
        super().__init__(message)
        self.kind = kind
        self.code = code


# -- output helpers -----------------------------------------------------------------

def _check_fresh(out, overwrite=False):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError("output_exists", f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CliError("output_exists", f"{out} is not empty (pass --overwrite to replace it)")
    return out


@contextlib.contextmanager
def atomic_dir(out, overwrite=False):
    """Yield a temp directory next to ``out``; it replaces ``out`` only on success."""
    out = _check_fresh(out, overwrite)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(path):
    try:
        return read_dataset(path)
    except (DatasetError, OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError("bad_data", str(exc)) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError("bad_checkpoint", str(exc)) from exc


def _load_cfg(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError("bad_config", str(exc)) from exc


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args):
    try:
        size = check_image_size(args.size)
        cfg = GeneratorConfig(seed=args.seed, height=size, width=size, n_classes=args.classes,
                              illumination_gradient=args.illumination_gradient)
    except ValueError as exc:
        raise CliError("invalid_argument", str(exc)) from exc
    if args.count < 1:
        raise CliError("invalid_argument", "--count must be positive")
    with atomic_dir(args.out, args.overwrite) as tmp:
        write_dataset(tmp, generate_dataset(cfg, args.count), cfg, overwrite=True)
    return {"schema": SCHEMA, "command": "gen-data", "out": str(args.out), "count": args.count}


def cmd_train(args):
    cfg = _load_cfg(args.config)
    samples, manifest = _load_data(args.data)
    data_classes = manifest["config"]["n_classes"]
    if data_classes != cfg.model.n_classes:
        raise CliError("bad_config", f"config has {cfg.model.n_classes} classes but the data has {data_classes}")
    with atomic_dir(args.out, args.overwrite) as tmp:
        try:
            _, report = three_stage_train(cfg, samples, out_dir=tmp, progress=_progress)
        except TrainingError as exc:
            raise CliError("training_failed", str(exc), EXIT_FAILURE) from exc
    return {"schema": SCHEMA, "command": "train", "out": str(args.out), "metrics": report["metrics"]}


def _progress(entry):
    m = entry["metrics"]
    log.info("stage %d done: delta1=%.3f mIoU=%.3f", entry["stage"], m["delta1"], m["mIoU"])


def cmd_eval(args):
    params, _ = _load_ckpt(args.checkpoint)
    samples, _ = _load_data(args.data)
    if samples[0].rgb.shape[-2:] != params.config.image_size:
        raise CliError("bad_data", f"data is {samples[0].rgb.shape[-2:]} but the model expects {params.config.image_size}")
    with atomic_dir(args.out, args.overwrite) as tmp:
        report = evaluate(params, samples)
        result = {"schema": SCHEMA, "count": len(samples), **report.to_dict()}
        _dump_json(tmp / "metrics.json", result)
        if args.images:
            for i in range(0, len(samples), 8):
                rgb = stack(samples[i:i + 8])[0]
                out = forward(params, rgb)
                for j, (d, lab) in enumerate(zip(out.depth.data, out.logits.data.argmax(axis=-3))):
                    viz.write_pgm(tmp / f"{i + j:04d}.depth.pgm", viz.depth_image(d))
                    viz.write_ppm(tmp / f"{i + j:04d}.label.ppm", viz.label_image(lab))
    return {"schema": SCHEMA, "command": "eval", "out": str(args.out), "metrics": report.to_dict()}


def cmd_grad_check(args):
    scopes = checks.SCOPES if args.scope == "all" else (args.scope,)
    summary = {"schema": SCHEMA, "tolerance": checks.TOLERANCE, "scopes": {}}
    failed = []
    for scope in scopes:
        results, seconds = checks.run_scope(scope, seed=args.seed)
        for item, err in results.items():
            ok = err <= checks.TOLERANCE
            print(f"{scope:8s} {item:40s} {err:.3e} {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(f"{scope}:{item}")
        summary["scopes"][scope] = {"worst": max(results.values()), "items": results, "seconds": round(seconds, 1)}
    if args.out:
        with atomic_dir(args.out, args.overwrite) as tmp:
            # timings vary run to run, so the file keeps only the errors
            stable = {**summary, "scopes": {k: {"worst": v["worst"], "items": v["items"]} for k, v in summary["scopes"].items()}}
            _dump_json(tmp / "grad_check.json", stable)
    if failed:
        raise CliError("grad_check_failed", f"relative error above {checks.TOLERANCE} for {', '.join(failed)}", EXIT_FAILURE)
    return {"schema": SCHEMA, "command": "grad-check", "worst": {k: v["worst"] for k, v in summary["scopes"].items()}}


def cmd_viz_attention(args):
    params, _ = _load_ckpt(args.checkpoint)
    if params.sum is None:
        raise CliError("bad_checkpoint", "checkpoint has no attention module")
    unsup = None
    if args.unsupervised:
        unsup, _ = _load_ckpt(args.unsupervised)
        if unsup.sum is None:
            raise CliError("bad_checkpoint", "unsupervised checkpoint has no attention module")
    samples, _ = _load_data(args.data)
    if not 0 <= args.index < len(samples):
        raise CliError("invalid_argument", f"--index {args.index} outside 0..{len(samples) - 1}")
    size = params.config.attention_size
    try:
        pixels = [check_pixel(p, size) for p in args.pixel]
    except ValueError as exc:
        raise CliError("invalid_argument", str(exc)) from exc

    sample = samples[args.index]
    n_classes = params.config.n_classes
    ideal = ideal_attention_map(sample.labels, n_classes, size)
    out = forward(params, sample.rgb[None])
    maps = {"ideal": ideal, "supervised": out.attention.data[0]}
    if unsup is not None:
        maps["unsupervised"] = forward(unsup, sample.rgb[None]).attention.data[0]

    with atomic_dir(args.out, args.overwrite) as tmp:
        for r, c in pixels:
            for name, a in maps.items():
                viz.write_pgm(tmp / f"{name}_r{r}_c{c}.pgm", viz.unit_to_u8(viz.attention_row(a, (r, c), size)))
        agreement = {name: float(((a >= 0.5) == (ideal > 0.5)).mean()) for name, a in maps.items() if name != "ideal"}
        if args.with_features and params.sharing:
            which = params.config.block.upper()
            for t, (fd, fs) in enumerate(out.stage_features):
                for branch in ("depth", "seg"):
                    energy = allocated_features(fd[0], fs[0], params.sharing[t], which, branch)
                    viz.write_pgm(tmp / f"alloc_{which.lower()}_stage{t}_{branch}.pgm", viz.unit_to_u8(energy))
        result = {"schema": SCHEMA, "index": args.index, "pixels": [list(p) for p in pixels], "agreement": agreement}
        _dump_json(tmp / "attention.json", result)
    return {"schema": SCHEMA, "command": "viz-attention", "out": str(args.out), "agreement": agreement}


ABLATION_GRID = (
    ("baseline", False, "none", False),
    ("+SUM", True, "none", False),
    ("+FSM", False, "fsm", False),
    ("+SUM+FSM", True, "fsm", False),
    ("+SUM+FSM+L_con", True, "fsm", True),
)
LSU_ROWS = (("baseline", "none"), ("baseline+LSU", "lsu"), ("baseline+FSM", "fsm"))
CSV_HEAD = ["schema", "row", "sum", "block", "consistency", *FIELDS]


def _run_row(cfg, samples, use_sum, block, use_con):
    row_cfg = cfg.replace(use_sum=use_sum, block=block, use_consistency=use_con)
    _, report = three_stage_train(row_cfg, samples)
    return report["metrics"]


def _csv_row(name, use_sum, block, use_con, metrics):
    return [SCHEMA, name, int(use_sum), block, int(use_con), *(repr(float(metrics[f])) for f in FIELDS)]


def cmd_ablate(args):
    cfg = _load_cfg(args.config)
    samples, _ = _load_data(args.data)
    with atomic_dir(args.out, args.overwrite) as tmp:
        cache = {}
        rows = []
        for name, use_sum, block, use_con in ABLATION_GRID:
            log.info("ablation row %s", name)
            try:
                cache[(use_sum, block, use_con)] = metrics = _run_row(cfg, samples, use_sum, block, use_con)
            except TrainingError as exc:
                raise CliError("training_failed", f"{name}: {exc}", EXIT_FAILURE) from exc
            rows.append(_csv_row(name, use_sum, block, use_con, metrics))
        _write_csv(tmp / "ablation.csv", rows)
        if args.with_lsu:
            lsu_rows = []
            for name, block in LSU_ROWS:
                key = (False, block, False)
                if key not in cache:
                    log.info("ablation row %s", name)
                    cache[key] = _run_row(cfg, samples, False, block, False)
                lsu_rows.append(_csv_row(name, False, block, False, cache[key]))
            _write_csv(tmp / "fsm_vs_lsu.csv", lsu_rows)
    return {"schema": SCHEMA, "command": "ablate", "out": str(args.out), "rows": len(rows)}


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEAD)
        writer.writerows(rows)


# -- entry point --------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="cinet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64, help="square image side, multiple of 8")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--illumination-gradient", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="three-stage training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", action="store_true", help="also write depth PGMs and label PPMs")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=(*checks.SCOPES, "all"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for grad_check.json")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("viz-attention", help="attention rows as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unsupervised", help="checkpoint trained without the attention loss")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    p.add_argument("--pixel", action="append", required=True, help="attention-grid position r,c (repeatable)")
    p.add_argument("--with-features", action="store_true", help="also write allocated sharing-block features")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_viz_attention)

    p = sub.add_parser("ablate", help="train the ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--with-lsu", action="store_true", help="add the FSM-vs-LSU comparison")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except CliError as exc:
        print(json.dumps({"schema": SCHEMA, "error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
