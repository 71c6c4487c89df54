"""Command-line entry point.

Exit codes: 0 success, 2 usage or config problems, 3 data or shape problems,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import gradcheck
from . import mechanisms as M
from . import serialize
from .errors import ConfigError, DivergenceError, ShapeError, SymbioticError, UsageError
from .metrics import EvalReport, attribute_scores
from .training import (
    MaskSource,
    Predictions,
    TrainConfig,
    build_model,
    ensemble_average,
    evaluate,
    load_model,
    read_predictions,
    save_model,
    train,
    write_predictions,
)

MANIFEST_NAME = "run_manifest.json"
TRAIN_REQUIRED = ("variant", "epochs", "batch_size", "lr", "seed")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """One per artifact-writing command."""

    def __init__(self, command: str, config: dict, seed: Optional[int] = None):
        self.record = {
            "command": command,
            "config": config,
            "seed": seed,
            "dataset_hash": None,
            "started": _now(),
            "finished": None,
            "final_metrics": None,
            "artifacts": [],
        }

    def add(self, *paths) -> None:
        self.record["artifacts"].extend(str(p) for p in paths)

    def write(self, path) -> Path:
        self.record["finished"] = _now()
        path = Path(path)
        path.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n")
        return path


def _prepare_dir(out: Path, force: bool) -> None:
    if out.exists():
        if not force:
            raise UsageError(f"{out} already exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True)


def _prepare_file(out: Path, force: bool) -> None:
    if out.exists() and not force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path} is not valid JSON: {e}") from None


def _split_dirs(root: Path):
    """(train, test) directories of a gen-data output, or the same directory twice."""
    if (root / "train").is_dir() and (root / "test").is_dir():
        return root / "train", root / "test"
    return root, root


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec_dict = _read_json(args.spec, "spec file") if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = D.SynthSpec.from_dict(spec_dict)
    n_test = args.n_test if args.n_test is not None else max(2, args.n // 5)
    # validate before touching the output directory
    if args.n < 2 or n_test < 2:
        raise ConfigError(f"need at least 2 samples per split, got n={args.n}, n_test={n_test}")
    if not 0.0 < args.split < 1.0:
        raise ConfigError(f"--split must lie in (0, 1), got {args.split}")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    run = RunManifest("gen-data", {"spec": spec.to_dict(), "n": args.n, "n_test": n_test, "split": args.split}, spec.seed)
    counts = {}
    for name, n, offset in (("train", args.n, 0), ("test", n_test, args.n)):
        ds = D.generate(spec, n, args.split, offset=offset)
        manifest = D.write_dataset(ds, out / name)
        counts[name] = manifest["counts"]
        run.add(out / name)
    hashes = {name: D.dataset_hash(out / name) for name in ("train", "test")}
    run.record["dataset_hash"] = hashes
    run.record["final_metrics"] = {
        "n_seg_labels": len(D.SEG_LABELS),
        "n_attributes": len(D.ATTR_NAMES),
        "counts": counts,
    }
    run.write(out / MANIFEST_NAME)
    print(json.dumps({"out": str(out), "dataset_hash": hashes, "N_S": len(D.SEG_LABELS), "N_A": len(D.ATTR_NAMES)}))
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_read_json(args.config, "config"), required=TRAIN_REQUIRED)
    train_dir, test_dir = _split_dirs(Path(args.data))
    train_ds = D.read_dataset(train_dir)
    test_ds = D.read_dataset(test_dir)
    out = Path(args.out)
    model = build_model(cfg, train_ds)  # surfaces config/dataset mismatches before any output
    _prepare_dir(out, args.force)
    run = RunManifest("train", cfg.to_dict(), cfg.seed)
    run.record["dataset_hash"] = D.dataset_hash(train_dir)
    meta = {"mask_source": cfg.mask_source, "train_config": cfg.to_dict()}

    log_path = out / "log.jsonl"
    state = {"last": None, "epoch": 0}
    steps_per_epoch = D.BatchSampler(train_ds, cfg.batch_size, cfg.seed, cfg.batch_mode).steps_per_epoch()

    with open(log_path, "w") as log_fh:

        def on_step(rec):
            log_fh.write(rec.to_json() + "\n")
            if (rec.step + 1) % steps_per_epoch == 0:
                state["epoch"] += 1
                path = out / f"epoch_{state['epoch']:03d}.ckpt"
                save_model(model, path, meta)
                state["last"] = path
                run.add(path)

        t0 = time.perf_counter()
        try:
            result = train(cfg, train_ds, test_ds, model=model, on_step=on_step)
        except DivergenceError as e:
            log_fh.flush()
            run.record["final_metrics"] = {"diverged": str(e), "last_checkpoint": str(state["last"])}
            run.add(log_path)
            run.write(out / MANIFEST_NAME)
            raise DivergenceError(f"{e}; last good checkpoint: {state['last']}", state["last"]) from None
    final = out / "final.ckpt"
    save_model(result.model, final, meta)
    report_path = out / "report.json"
    report_path.write_text(result.report.to_json())
    preds_path = out / "predictions.jsonl"
    write_predictions(result.predictions, preds_path)
    run.add(log_path, final, report_path, preds_path)
    run.record["final_metrics"] = dict(result.report.to_dict(), seconds=round(time.perf_counter() - t0, 1))
    run.write(out / MANIFEST_NAME)
    print(json.dumps({"out": str(out), "macro_ap": result.report.macro_ap, "mean_iou": result.report.mean_iou}))
    return 0


def _eval_predictions(preds: Predictions, ds: D.Dataset) -> EvalReport:
    pos = {int(sid): i for i, sid in enumerate(ds.ids)}
    try:
        rows = np.array([pos[int(s)] for s in preds.sample_ids], dtype=np.intp)
    except KeyError as e:
        raise ShapeError(f"prediction sample id {e.args[0]} is not in the dataset") from None
    if preds.attr_scores.shape[1] != len(D.ATTR_NAMES):
        raise ShapeError(f"predictions carry {preds.attr_scores.shape[1]} scores, dataset has {len(D.ATTR_NAMES)}")
    if ds.has_seg[rows].any():
        raise ShapeError("predictions refer to samples without attribute labels")
    report = EvalReport()
    report.per_attribute = attribute_scores(
        D.ATTR_NAMES, preds.attr_scores, ds.attrs[rows], ds.attrs_mask[rows].astype(bool)
    )
    return report


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    _, test_dir = _split_dirs(Path(args.data))
    ds = D.read_dataset(test_dir)
    out = Path(args.out)
    _prepare_file(out, args.force)
    run = RunManifest("eval", {k: v for k, v in vars(args).items() if k != "func"})
    run.record["dataset_hash"] = D.dataset_hash(test_dir)
    if args.predictions is not None:
        report = _eval_predictions(read_predictions(args.predictions), ds)
    else:
        _, meta = serialize.load_checkpoint(args.checkpoint)
        model = load_model(args.checkpoint)
        cfg = model.cfg
        if (cfg.n_seg, cfg.n_attr) != (ds.spec.n_seg, ds.spec.n_attr):
            raise ShapeError(f"checkpoint predicts {cfg.n_seg}/{cfg.n_attr} labels, dataset has {ds.spec.n_seg}/{ds.spec.n_attr}")
        if tuple(cfg.image_size) != (ds.spec.height, ds.spec.width):
            raise ShapeError(f"checkpoint expects {tuple(cfg.image_size)} images, dataset has {(ds.spec.height, ds.spec.width)}")
        mask_source = args.mask_source or meta.get("mask_source")
        report, preds = evaluate(model, ds, MaskSource(mask_source) if model.needs_masks() else None)
        if args.write_predictions:
            write_predictions(preds, args.write_predictions)
            run.add(args.write_predictions)
    out.write_text(report.to_json())
    run.add(out)
    run.record["final_metrics"] = report.to_dict()
    run.write(_sidecar(out))
    print(report.to_json(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        cases = gradcheck.select(args.module)
    except KeyError:
        names = sorted({c.module for c in gradcheck.CASES} | {c.name for c in gradcheck.CASES})
        raise UsageError(f"unknown module or op {args.module!r}; choose from all, {', '.join(names)}") from None
    results = gradcheck.run(args.module, range(args.seed, args.seed + args.n_seeds), cases)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} op(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_footprint(args) -> int:
    formula = M.footprint(args.mechanism, args.ns, args.na, args.c, args.h, args.w)
    records = M.measured_footprint(args.mechanism, args.ns, args.na, args.c, args.h, args.w)
    measured = sum(records.values())
    print(
        json.dumps(
            {
                "mechanism": args.mechanism,
                "dims": {"ns": args.ns, "na": args.na, "c": args.c, "h": args.h, "w": args.w},
                "formula": formula,
                "measured": measured,
                "intermediates": records,
                "equal": formula == measured,
            },
            indent=2,
        )
    )
    if formula != measured:
        print(f"footprint mismatch: formula {formula:,} vs measured {measured:,}", file=sys.stderr)
        return 1
    return 0


def cmd_inspect_phi(args) -> int:
    state, meta = serialize.load_checkpoint(args.checkpoint)
    key = {"phi_s": "phi_seg.phi.weight", "phi_a": "phi_attr.phi.weight"}[args.which]
    if key not in state:
        raise ShapeError(f"checkpoint has no {args.which} kernel (variant {meta.get('model', {}).get('variant')})")
    weight = state[key]
    cols = D.SEG_LABELS if args.which == "phi_s" else D.ATTR_NAMES
    if weight.shape[1] != len(cols):
        raise ShapeError(f"{args.which} has {weight.shape[1]} inputs, the dataset defines {len(cols)} labels")
    rows = None
    if args.by_attribute:
        if args.which != "phi_s":
            raise UsageError("--by-attribute applies to phi_s only")
        # attribute head weights (N_A x C) composed with the spatially averaged kernel (C x N_S)
        weight = (state["attr_head.weight"] @ weight.mean(axis=(2, 3)))[:, :, None, None]
        rows = list(D.ATTR_NAMES)
    matrix = M.inspect_phi(weight)
    out = Path(args.out)
    _prepare_file(out, args.force)
    out.write_text(M.phi_csv(matrix, cols, rows))
    run = RunManifest("inspect-phi", {k: v for k, v in vars(args).items() if k != "func"})
    run.add(out)
    run.record["final_metrics"] = {"rows": int(matrix.shape[0]), "cols": int(matrix.shape[1])}
    run.write(_sidecar(out))
    return 0


def cmd_ensemble(args) -> int:
    merged = ensemble_average(read_predictions(args.a), read_predictions(args.b))
    out = Path(args.out)
    _prepare_file(out, args.force)
    write_predictions(merged, out)
    run = RunManifest("ensemble", {k: v for k, v in vars(args).items() if k != "func"})
    run.add(out)
    run.record["final_metrics"] = {"n": int(len(merged.sample_ids))}
    run.write(_sidecar(out))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symbiotic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset (train/ and test/ splits)")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="training samples")
    p.add_argument("--n-test", type=int, help="held-out samples (default n/5, at least 2)")
    p.add_argument("--split", type=float, default=0.5, help="fraction with label maps")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-source", help="override the checkpoint's mask source")
    p.add_argument("--write-predictions", help="also write attribute scores as JSON lines")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--module", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("footprint", help="mechanism memory accounting")
    p.add_argument("--mechanism", choices=("ssp", "sa"), required=True)
    for flag in ("--ns", "--na", "--c", "--h", "--w"):
        p.add_argument(flag, type=int, required=True)
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser("inspect-phi", help="row-normalized embedding kernel as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=("phi_s", "phi_a"), required=True)
    p.add_argument("--by-attribute", action="store_true", help="compose phi_s with the attribute head")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_inspect_phi)

    p = sub.add_parser("ensemble", help="average two prediction files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on bad usage already
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except SymbioticError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
