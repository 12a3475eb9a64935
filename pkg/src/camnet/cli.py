"""Command line interface: ``synth``, ``train``, ``eval`` and ``attend``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures. Log verbosity comes from the ``CAMNET_LOG`` environment variable
(DEBUG/INFO/WARNING/ERROR; default INFO); logs go to stderr with
timestamps, while every file a subcommand writes is deterministic — the
same config, seed and inputs reproduce it byte for byte.

A training run owns its output directory through a ``.lock`` file so two
processes can't interleave checkpoints; ``eval`` and ``attend`` only read
checkpoints and may run concurrently with anything.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as datasets
from . import engine, metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides
from .engine import Tensor
from .errors import CamnetError, CheckpointError, ConfigError, ManifestError
from .model import DualBranchModel
from .training import train_phase, run_protocol

log = logging.getLogger("camnet.cli")

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for runtime
    failures, so route usage problems to exit code 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _setup_logging() -> None:
    name = os.environ.get("CAMNET_LOG", "INFO").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@contextmanager
def _run_lock(run_dir: Path):
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CamnetError(
            f"run directory {run_dir} is locked ({lock} exists); another "
            f"process owns it, or a crashed run left the file behind")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_run_config(args) -> RunConfig:
    payload = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
    payload = apply_overrides(payload, getattr(args, "set", []) or [])
    return RunConfig.from_dict(payload)


def _build_model(cfg: RunConfig, params: dict | None = None) -> DualBranchModel:
    model = DualBranchModel(cfg.backbone, cfg.attention, seed=cfg.seed)
    if params is not None:
        model.load_parameter_arrays(params)
    return model


def _resolve_dataset(args, cfg: RunConfig) -> datasets.Dataset:
    if getattr(args, "data", None):
        ds = datasets.load_dataset_dir(args.data,
                                       target_size=cfg.backbone.input_size)
        if len(ds.class_names) != cfg.backbone.num_classes:
            raise ConfigError(
                f"dataset {args.data} has {len(ds.class_names)} classes but "
                f"the model expects {cfg.backbone.num_classes}")
        return ds
    return datasets.generate_synthetic(cfg.synth)


def _model_from_checkpoint(args) -> tuple[DualBranchModel, RunConfig, dict]:
    params, echo, meta = load_checkpoint(args.ckpt)
    payload = apply_overrides(echo, getattr(args, "set", []) or [])
    cfg = RunConfig.from_dict(payload)
    return _build_model(cfg, params), cfg, meta


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    ds = datasets.generate_synthetic(cfg.synth)
    summary = datasets.save_dataset(ds, args.out)
    print(f"wrote {summary['num_samples']} images for "
          f"{summary['num_patients']} patients to {args.out}")
    return 0


def _save_phase_checkpoint(run_dir: Path, name: str, params: dict,
                           cfg: RunConfig, meta: dict) -> None:
    save_checkpoint(run_dir / name, params, config=cfg.to_dict(), meta=meta)
    log.info("saved %s", run_dir / name)


def _write_curves(run_dir: Path, rows: list[dict]) -> None:
    with open(run_dir / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "phase", "lr", "loss"])
        for row in rows:
            writer.writerow([row["iteration"], row["phase"], row["lr"], row["loss"]])


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    with _run_lock(run_dir):
        (run_dir / "config_used.json").write_text(
            json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        dataset = _resolve_dataset(args, cfg)
        train_set, val_set, test_set = datasets.patient_split(
            dataset, cfg.train.train_frac, cfg.train.val_frac, seed=cfg.seed)
        log.info("split: %d train / %d val / %d test images",
                 len(train_set), len(val_set), len(test_set))

        init_params = None
        if args.init:
            init_params, _, _ = load_checkpoint(args.init)
        model = _build_model(cfg, init_params)

        if args.phase == "all":
            results = run_protocol(model, train_set, cfg.train, val_set=val_set)
            rows = []
            for phase, result in results.items():
                rows.extend(result.curve)
                meta = {"phase": phase, "best_val_auc": result.best_val_auc,
                        "final_val_auc": result.final_val_auc}
                _save_phase_checkpoint(run_dir, f"phase{phase}.ckpt",
                                       result.best_params, cfg, meta)
            _save_phase_checkpoint(run_dir, "best.ckpt", results[3].best_params,
                                   cfg, {"phase": 3,
                                         "best_val_auc": results[3].best_val_auc})
            _write_curves(run_dir, rows)
            for phase, result in results.items():
                print(f"phase {phase}: best val auc "
                      f"{result.best_val_auc if result.best_val_auc is not None else 'n/a'}")
        else:
            phase = int(args.phase)
            if phase > 1 and not args.init:
                raise ConfigError(
                    f"phase {phase} continues an earlier phase: pass --init "
                    f"with the phase {phase - 1} checkpoint "
                    f"(e.g. {run_dir / f'phase{phase - 1}.ckpt'})")
            result = train_phase(model, train_set,
                                 replace(cfg.train, phase=phase), val_set=val_set)
            model.load_parameter_arrays(result.best_params)
            meta = {"phase": phase, "best_val_auc": result.best_val_auc,
                    "final_val_auc": result.final_val_auc}
            _save_phase_checkpoint(run_dir, f"phase{phase}.ckpt",
                                   result.best_params, cfg, meta)
            _write_curves(run_dir, result.curve)
            print(f"phase {phase}: best val auc "
                  f"{result.best_val_auc if result.best_val_auc is not None else 'n/a'}")
    return 0


def _select_split(dataset, split: str, cfg: RunConfig):
    if split == "all":
        return dataset
    train_set, val_set, test_set = datasets.patient_split(
        dataset, cfg.train.train_frac, cfg.train.val_frac, seed=cfg.seed)
    return {"train": train_set, "val": val_set, "test": test_set}[split]


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args)
    dataset = _resolve_dataset(args, cfg)
    subset = _select_split(dataset, args.split, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    images = subset.images_array(dtype=model.dtype,
                                 channels=cfg.backbone.input_channels)
    labels = subset.labels_array()
    scores = metrics.branch_scores(model, images, args.branch,
                                   batch_size=cfg.train.batch_size)
    report = metrics.scores_report(scores, labels, subset.class_names,
                                   branch=args.branch)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    for c, name in enumerate(subset.class_names):
        if report.per_class_auc[c] is None:
            continue
        curve = metrics.roc_curve(scores[:, c], labels[:, c], class_id=c)
        stem = _safe_name(name)
        (out_dir / f"roc_{stem}.csv").write_text(metrics.roc_to_csv(curve))
        (out_dir / f"roc_{stem}.svg").write_text(metrics.roc_to_svg(curve))
    print(report.to_text())
    return 0


def _single_image(path: Path, cfg: RunConfig) -> np.ndarray:
    arr = datasets.bilinear_resize(datasets._load_png(path),
                                   cfg.backbone.input_size)
    return arr[None].astype(np.float32)


def cmd_attend(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args)
    num_classes = cfg.backbone.num_classes
    if args.cls is not None and not 0 <= args.cls < num_classes:
        raise ConfigError(
            f"--class {args.cls} out of range; model has {num_classes} classes")

    source = Path(args.source)
    boxes: list[tuple[int, int, int, int, int]] = []
    if source.is_dir():
        ds = datasets.load_dataset_dir(source, target_size=cfg.backbone.input_size)
        if len(ds.class_names) != num_classes:
            raise ConfigError(
                f"dataset {source} has {len(ds.class_names)} classes but "
                f"the model expects {num_classes}")
        if not 0 <= args.index < len(ds):
            raise ConfigError(
                f"--index {args.index} out of range; dataset has {len(ds)} samples")
        sample = ds.samples[args.index]
        image = sample.image
        boxes = sample.motif_boxes
        class_names = ds.class_names
    else:
        image = _single_image(source, cfg)
        class_names = [f"class{c}" for c in range(num_classes)]

    batch = image[None]
    if cfg.backbone.input_channels == 3 and batch.shape[1] == 1:
        batch = np.repeat(batch, 3, axis=1)
    with engine.record():
        out = model.forward(Tensor(np.ascontiguousarray(batch)),
                            include_attention=True)
    raw = out.attention.maps.raw[0]
    norm = out.attention.maps.normalized[0]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wanted = [args.cls] if args.cls is not None else list(range(num_classes))
    for c in wanted:
        span = norm[c].max() - norm[c].min()
        scaled = (norm[c] - norm[c].min()) / span if span > 0 else np.zeros_like(norm[c])
        img8 = np.rint(scaled * 255).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(
            out_dir / f"attention_{_safe_name(class_names[c])}.png")

    with open(out_dir / "saliency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "row", "col", "raw", "normalized"])
        h, w = norm.shape[1:]
        for c in wanted:
            for r in range(h):
                for col in range(w):
                    writer.writerow([class_names[c], r, col,
                                     f"{raw[c, r, col]:.10g}",
                                     f"{norm[c, r, col]:.10g}"])

    if boxes:
        stats: dict[str, dict] = {}
        for cls, x, y, bw, bh in boxes:
            if cls not in wanted:
                continue
            mass, baseline = metrics.box_mass(norm[cls], (x, y, bw, bh),
                                              cfg.backbone.input_size)
            entry = stats.setdefault(class_names[cls],
                                     {"in_box_mass": 0.0, "baseline": 0.0})
            entry["in_box_mass"] += mass
            entry["baseline"] += baseline
        for entry in stats.values():
            entry["ratio"] = (entry["in_box_mass"] / entry["baseline"]
                              if entry["baseline"] > 0 else None)
        (out_dir / "box_overlap.json").write_text(
            json.dumps(stats, indent=2, sort_keys=True) + "\n")

    print(f"wrote {len(wanted)} attention map(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camnet",
                     description="Dual-branch attention classifier toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{synth,train,eval,attend}")

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.batch_size=8")

    p_synth = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train one phase or the full protocol")
    common(p_train)
    p_train.add_argument("--data", help="dataset directory (default: synthesize in memory)")
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--phase", choices=["1", "2", "3", "all"], default="all")
    p_train.add_argument("--init", help="checkpoint to start from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint file")
    p_eval.add_argument("--data", help="dataset directory (default: synthesize from config echo)")
    p_eval.add_argument("--split", choices=["train", "val", "test", "all"],
                        default="test")
    p_eval.add_argument("--branch", choices=list(metrics.EVAL_BRANCHES),
                        default="fused")
    p_eval.add_argument("--out", required=True, help="report directory")
    p_eval.set_defaults(func=cmd_eval)

    p_att = sub.add_parser("attend", help="export per-class saliency maps")
    p_att.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_att.add_argument("--ckpt", required=True, help="checkpoint file")
    p_att.add_argument("source", help="dataset directory or a single PNG")
    p_att.add_argument("--index", type=int, default=0,
                       help="sample index when source is a dataset directory")
    p_att.add_argument("--class", dest="cls", type=int, default=None,
                       help="restrict output to one class index")
    p_att.add_argument("--out", required=True, help="output directory")
    p_att.set_defaults(func=cmd_attend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except (ConfigError, ManifestError, CheckpointError) as exc:
        log.error("%s", exc)
        return USAGE_EXIT
    except CamnetError as exc:
        log.error("%s", exc)
        return RUNTIME_EXIT
    except Exception:  # surface the traceback but keep the exit-code contract
        log.exception("unhandled error")
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
