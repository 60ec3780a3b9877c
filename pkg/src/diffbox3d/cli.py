"""Command-line entry point: dataset generation, training, evaluation, ablations.

Commands are deterministic given (config, seed) and emit CSV reports only.

Exit codes:
  0  success
  2  invalid configuration (message names the offending key)
  3  missing/incompatible checkpoint or dataset
  4  non-finite loss during training (message carries epoch context)

Run directory layout (train):
  config.ini    verbatim snapshot of the effective configuration
  pretrain.ckpt / student.ckpt / teacher.ckpt
  run_state.json                    resume cursor (phase, next epoch)
  metrics.csv                       per-epoch loss/lr, append-only
  plq.csv                           teacher pseudo-label quality on the
                                    unlabeled split (epoch, mAP@0.5, recall@0.5)

The default output root is the DIFFBOX3D_OUT_ROOT environment variable (else
the current directory).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ABLATION_AXES, ConfigError, RunConfig, apply_axis, load_run_config
from .detector import init_detector_params
from .diffusion import NoiseSchedule
from .netcore import OptimState, ParamStore
from .synthdata import Dataset, generate_scene, load_dataset, save_dataset, split_dataset
from .training import (
    evaluate,
    pretrain,
    teacher_pseudo_label_quality,
    train_ssl,
)

CSV_SCHEMA_VERSION = 1

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NONFINITE = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_root() -> Path:
    return Path(os.environ.get("DIFFBOX3D_OUT_ROOT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _out_root() / p


def _fmt(value) -> str:
    """Deterministic, round-trippable CSV cell."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _append_csv(path: Path, header: list[str], row: list) -> None:
    """Append one row, writing the header only when the file is new."""
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow([_fmt(v) for v in row])


def _load_config(path, overrides) -> RunConfig:
    try:
        return load_run_config(path, overrides)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from exc


def _load_checkpoint(path: Path, cfg: RunConfig) -> ParamStore:
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    try:
        params = ParamStore.load(path)
    except ValueError as exc:
        raise CliError(f"unreadable checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc
    expected = init_detector_params(cfg.detector, np.random.default_rng(0))
    if not params.same_manifest(expected):
        raise CliError(
            f"checkpoint {path} does not match the configured detector architecture",
            EXIT_CHECKPOINT,
        )
    return params


def _snapshot_config(config_path: str, out_dir: Path) -> None:
    (out_dir / "config.ini").write_bytes(Path(config_path).read_bytes())


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.set)
    scenes = [generate_scene(cfg.scene, cfg.seed * 1_000_000 + i) for i in range(cfg.n_scenes)]
    try:
        labeled, unlabeled = split_dataset(scenes, cfg.labeled_ratio, cfg.seed)
    except ValueError as exc:
        raise CliError(f"invalid config: [run] labeled_ratio: {exc}", EXIT_CONFIG) from exc
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(
        Dataset(
            scenes=scenes,
            config=cfg.scene,
            labeled_ids=[s.scene_id for s in labeled],
            unlabeled_ids=[s.scene_id for s in unlabeled],
        ),
        out,
    )
    print(f"wrote {len(scenes)} scenes ({len(labeled)} labeled) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _run_train(cfg: RunConfig, dataset: Dataset, out_dir: Path, *, do_pretrain: bool,
               ssl_on: bool, resume: bool) -> None:
    labeled = dataset.labeled_scenes()
    unlabeled = dataset.unlabeled_scenes()
    metrics_path = out_dir / "metrics.csv"
    plq_path = out_dir / "plq.csv"
    state_path = out_dir / "run_state.json"
    metrics_header = ["schema_version", "phase", "epoch", "loss", "lr"]

    state = {"phase": "pretrain", "next_epoch": 0}
    if resume and state_path.exists():
        state = json.loads(state_path.read_text())

    schedule = NoiseSchedule(T=cfg.ssl.T)

    # ---- phase 1: supervised pretraining ----
    pretrain_ckpt = out_dir / "pretrain.ckpt"
    if state["phase"] == "pretrain":
        if do_pretrain:
            losses = []

            def log(epoch, loss):
                if not np.isfinite(loss):
                    raise CliError(
                        f"non-finite loss at pretrain epoch {epoch}", EXIT_NONFINITE
                    )
                _append_csv(metrics_path, metrics_header,
                            [CSV_SCHEMA_VERSION, "pretrain", epoch, loss, "-"])
                losses.append(loss)

            try:
                params = pretrain(labeled, cfg.detector, cfg.ssl, cfg.seed, log=log)
            except FloatingPointError as exc:
                raise CliError(f"non-finite loss during pretraining: {exc}", EXIT_NONFINITE) from exc
            params.save(pretrain_ckpt)
        elif not pretrain_ckpt.exists():
            raise CliError(
                f"pretrain checkpoint missing at {pretrain_ckpt}; rerun with --pretrain",
                EXIT_CHECKPOINT,
            )
        state = {"phase": "ssl", "next_epoch": 0}
        state_path.write_text(json.dumps(state))

    if not ssl_on:
        if not (out_dir / "student.ckpt").exists():
            ParamStore.load(pretrain_ckpt).save(out_dir / "student.ckpt")
        return

    # ---- phase 2: teacher-student SSL ----
    init = ParamStore.load(pretrain_ckpt)
    start_epoch = int(state["next_epoch"]) if state["phase"] == "ssl" else 0
    teacher = None
    if start_epoch > 0 and (out_dir / "teacher.ckpt").exists():
        init = ParamStore.load(out_dir / "student.ckpt")
        teacher = ParamStore.load(out_dir / "teacher.ckpt")

    def hook(epoch, result, opt):
        loss = result.epoch_losses[-1]
        if not np.isfinite(loss):
            raise CliError(f"non-finite loss at ssl epoch {epoch}", EXIT_NONFINITE)
        _append_csv(metrics_path, metrics_header,
                    [CSV_SCHEMA_VERSION, "ssl", epoch, loss, opt.lr])
        result.student.save(out_dir / "student.ckpt")
        result.teacher.save(out_dir / "teacher.ckpt")
        state_path.write_text(json.dumps({"phase": "ssl", "next_epoch": epoch + 1}))
        last = epoch == cfg.ssl.ssl_epochs - 1
        if unlabeled and (epoch % cfg.ssl.plq_interval == 0 or last):
            q = teacher_pseudo_label_quality(
                result.teacher, unlabeled, cfg.detector, cfg.ssl, schedule, cfg.seed
            )
            _append_csv(plq_path, ["schema_version", "epoch", "map@0.5", "recall@0.5"],
                        [CSV_SCHEMA_VERSION, epoch, q["map"], q["recall"]])

    try:
        train_ssl(
            labeled, unlabeled, init, cfg.detector, cfg.ssl, cfg.seed,
            epoch_hook=hook, start_epoch=start_epoch, teacher=teacher,
        )
    except FloatingPointError as exc:
        raise CliError(f"non-finite loss during SSL training: {exc}", EXIT_NONFINITE) from exc


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    data_path = _resolve(args.data)
    if not data_path.exists():
        raise CliError(f"dataset not found: {data_path}", EXIT_CHECKPOINT)
    dataset = load_dataset(data_path)
    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(args.config, out_dir)
    _run_train(
        cfg, dataset, out_dir,
        do_pretrain=args.pretrain,
        ssl_on=args.ssl == "on",
        resume=args.resume,
    )
    print(f"run complete: {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.ddim_steps is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, ssl=dataclasses.replace(cfg.ssl, ddim_steps=args.ddim_steps))
    params = _load_checkpoint(_resolve(args.checkpoint), cfg)
    data_path = _resolve(args.data)
    if not data_path.exists():
        raise CliError(f"dataset not found: {data_path}", EXIT_CHECKPOINT)
    dataset = load_dataset(data_path)
    schedule = NoiseSchedule(T=cfg.ssl.T)
    results = evaluate(params, dataset.scenes, cfg.detector, cfg.ssl, schedule, cfg.seed)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schema_version", "metric", "class", "value"])
        for thr in (0.25, 0.5):
            writer.writerow([CSV_SCHEMA_VERSION, f"map@{thr}", "all", _fmt(results[f"map@{thr}"])])
            for cid in sorted(results[f"per_class@{thr}"]):
                writer.writerow(
                    [CSV_SCHEMA_VERSION, f"ap@{thr}", cid, _fmt(results[f"per_class@{thr}"][cid])]
                )
    print(f"map@0.25 = {results['map@0.25']:.4f}  map@0.5 = {results['map@0.5']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.set)
    if not cfg.grid:
        raise CliError("invalid config: [ablation] no grid axes configured", EXIT_CONFIG)
    data_path = _resolve(args.data)
    if not data_path.exists():
        raise CliError(f"dataset not found: {data_path}", EXIT_CHECKPOINT)
    dataset = load_dataset(data_path)
    eval_scenes = [
        generate_scene(cfg.scene, (cfg.seed + 7) * 1_000_000 + i)
        for i in range(max(10, cfg.n_scenes // 10))
    ]
    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(args.config, out_dir)

    axes = sorted(cfg.grid)
    header = ["schema_version", *axes, "seed", "map@0.25", "map@0.5"]
    rows = []
    for values in itertools.product(*(cfg.grid[a] for a in axes)):
        ssl = cfg.ssl
        for axis, value in zip(axes, values):
            ssl = apply_axis(ssl, axis, value)
        cell = "_".join(f"{a}-{v}" for a, v in zip(axes, values))
        cell_dir = out_dir / cell
        cell_dir.mkdir(exist_ok=True)
        import dataclasses

        cell_cfg = dataclasses.replace(cfg, ssl=ssl)
        _run_train(cell_cfg, dataset, cell_dir, do_pretrain=True, ssl_on=True, resume=False)
        student = ParamStore.load(cell_dir / "student.ckpt")
        schedule = NoiseSchedule(T=ssl.T)
        results = evaluate(student, eval_scenes, cfg.detector, ssl, schedule, cfg.seed)
        rows.append([CSV_SCHEMA_VERSION, *values, cfg.seed,
                     results["map@0.25"], results["map@0.5"]])
        print(f"cell {cell}: map@0.25 = {results['map@0.25']:.4f}")

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffbox3d",
        description="Diffusion-denoised pseudo-labels for semi-supervised 3D detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with a labeled split")
    common(p)
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain and/or run teacher-student SSL training")
    common(p)
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--pretrain", action="store_true", help="run supervised pretraining")
    p.add_argument("--ssl", choices=("on", "off"), default="on")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--ddim-steps", type=int, default=None,
                   help="override the number of DDIM steps (0 = direct decode)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the configured ablation grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="grid output directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
