"""Command-line entry point.

Every command works inside one run directory (see :class:`RunDir`). A command
marks the directory ``INCOMPLETE`` while it runs, appends itself to
``run.json`` and refreshes ``hashes.json`` when it succeeds. ``replay`` re-runs
a directory's history into a fresh directory and compares artifact hashes.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import ablation as abl
from .config import SEED_ENV, RunDir, derive_seed, load_config, resolve
from .dataio import (Dataset, Recipe, denormalize, export_csv, ingest_csv, load_dataset, normalize, read_store,
                     toy_generate, write_store)
from .diffusion import SampleRequest, TrainConfig, load_denoiser, sample, train
from .errors import ConfigError, DataError, NumericalError, TransConvError
from .metrics import MetricConfig, emit_kde, evaluate, render_metric_table
from .ndgrad import new_rng
from .schedule import schedule_from_config
from .unet import DenoiserModel, UNetConfig
from .utility import UtilityConfig, render_utility_table, run_utility_experiment, toy_fall_dataset

log = logging.getLogger("transconv")

DATASET_MANIFEST = "data/dataset.manifest.json"
FINAL_CKPT = "checkpoints/final.ckpt"
SYNTH_STORE = "samples/synthetic.windows"
SYNTH_NORM_STORE = "samples/normalized.windows"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _seed_override(args) -> Optional[int]:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _open_run(args) -> tuple:
    """Resolve the config and prepare the run directory."""
    run_path = args.out
    if args.config is None:
        if run_path is None:
            raise ConfigError("give --config or an existing --out run directory")
        run = RunDir(run_path)
        cfg = run.config()
        seed = getattr(args, "seed", None)
        if seed is not None and seed != cfg["seed"]:
            raise ConfigError(f"run directory was resolved with seed {cfg['seed']}, not {seed}")
        return run, cfg
    cfg = resolve(load_config(args.config), _seed_override(args))
    if run_path is None:
        run_path = RunDir.default_root() / cfg["name"]
    return RunDir(run_path).create(cfg), cfg


def build_dataset_from_config(cfg: dict) -> Dataset:
    data = cfg["data"]
    src = data["source"]
    if src == "toy":
        t = data["toy"]
        return toy_generate(t["kind"], t["n"], t["length"], t["channels"], t["seed"], t["eval_fraction"])
    if src == "csv":
        return ingest_csv(data.get("files", []), data["channels"], Recipe(**data["recipe"]), name=cfg["name"])
    if src == "manifest":
        return load_dataset(data["manifest"])
    raise ConfigError(f"unknown data source {src!r}")


def _dataset(run: RunDir, cfg: dict) -> Dataset:
    path = run / DATASET_MANIFEST
    if path.exists():
        return load_dataset(path)
    ds = build_dataset_from_config(cfg)
    ds.save(path.parent, "dataset")
    return ds


def _sched(cfg):
    return schedule_from_config(cfg["schedule"])


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")


def _rel(run: RunDir, p) -> str:
    p = Path(p)
    try:
        return p.resolve().relative_to(run.path.resolve()).as_posix()
    except ValueError:
        return str(p)


def _abs(run: RunDir, p: Optional[str]) -> Optional[Path]:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() or q.exists() and not (run.path / q).exists() else run.path / q


# ---------------------------------------------------------------- commands

def cmd_ingest(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    log.info("dataset %s: %d windows of [%d, %d]", ds.manifest.name, *ds.windows.shape)
    print(f"{ds.windows.shape[0]} windows -> {run / DATASET_MANIFEST}")
    return {}


def cmd_train(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    ucfg = UNetConfig.from_dict(cfg["unet"])
    model = DenoiserModel(ucfg, new_rng(derive_seed(cfg["seed"], "init")))
    tcfg = TrainConfig(**cfg["train"])
    resume = _abs(run, args.resume)
    result = train(model, ds.normalized("train"), tcfg, _sched(cfg), run_dir=run.path, resume=resume,
                   meta={"dataset_sha256": ds.manifest.store_sha256})
    tail = result.losses[-100:]
    print(f"trained {tcfg.iterations} iterations, final mean loss {np.mean(tail):.5f} -> {result.checkpoint}")
    return {"resume": None if resume is None else _rel(run, resume)}


def cmd_generate(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    ckpt = _abs(run, args.checkpoint or FINAL_CKPT)
    if not ckpt.exists():
        raise DataError("checkpoint not found; run 'train' first", path=ckpt)
    model, sched, _ = load_denoiser(ckpt)
    gen = cfg["generate"]
    count = args.count if args.count is not None else gen["count"]
    seed = args.sample_seed if args.sample_seed is not None else gen["seed"]
    req = SampleRequest(count, model.cfg.length, model.cfg.in_channels, seed=seed, shard_size=gen["shard_size"])
    norm = sample(model, sched, req)
    raw = denormalize(norm, ds.manifest.scaler)
    write_store(run / SYNTH_NORM_STORE, norm)
    write_store(run / SYNTH_STORE, raw)
    if not args.no_csv:
        csv_dir = run / "samples" / "csv"
        shutil.rmtree(csv_dir, ignore_errors=True)
        export_csv(raw, ds.manifest.channel_names, csv_dir, prefix="synthetic")
    print(f"{count} sequences -> {run / SYNTH_STORE}")
    return {"count": count, "sample_seed": seed, "checkpoint": _rel(run, ckpt), "no_csv": bool(args.no_csv)}


def _synthetic(run: RunDir, ds: Dataset, path: Optional[str]) -> tuple:
    """``(normalized, original-units)`` synthetic windows."""
    if path is None:
        if not (run / SYNTH_NORM_STORE).exists():
            raise DataError("no synthetic samples; run 'generate' first", path=run / SYNTH_NORM_STORE)
        return read_store(run / SYNTH_NORM_STORE), read_store(run / SYNTH_STORE)
    raw = read_store(_abs(run, path))
    return normalize(raw, ds.manifest.scaler), raw


def cmd_evaluate(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    synth_norm, synth_raw = _synthetic(run, ds, args.samples)
    real_norm = ds.normalized()
    ckpt = run / FINAL_CKPT
    ckpt_hash = run.hashes().get(FINAL_CKPT)
    mcfg = MetricConfig.from_dict(cfg["metrics"])
    report = evaluate(real_norm, synth_norm, ds.windows, synth_raw, mcfg,
                      dataset_sha256=ds.manifest.store_sha256, checkpoint_sha256=ckpt_hash if ckpt.exists() else None)
    _write_text(run / "reports" / "metrics.json", report.to_json())
    table = render_metric_table({cfg["name"]: {"TransConv-DDPM": report}})
    _write_text(run / "reports" / "metrics_table.txt", table)
    print(table)
    return {"samples": args.samples}


def cmd_utility(run: RunDir, cfg: dict, args) -> dict:
    ucfg = UtilityConfig(**cfg["utility"])
    if args.real is not None:
        real = load_dataset(_abs(run, args.real))
    elif cfg["data"]["source"] == "toy":
        real = toy_fall_dataset(n_subjects=6, rows=ucfg.window_length + 6 * ucfg.window_step,
                                channels=cfg["unet"]["in_channels"], window_length=ucfg.window_length,
                                window_step=ucfg.window_step, seed=derive_seed(cfg["seed"], "utility-data"))
    else:
        raise ConfigError("utility needs --real: a manifest with subject_id and label per file")
    synth = read_store(_abs(run, args.synth or SYNTH_STORE))
    report = run_utility_experiment(real, synth, ucfg, arm_name="TransConv-DDPM")
    _write_text(run / "reports" / "utility.json", report.to_json())
    table = render_utility_table(report, {"baseline": "Real ADL + Real Fall (baseline)",
                                          "TransConv-DDPM": "Real ADL + TransConv-DDPM"})
    _write_text(run / "reports" / "utility_table.txt", table)
    print(table)
    return {"real": args.real, "synth": args.synth}


def cmd_ablate(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    a = cfg["ablation"]
    iterations = args.iterations if args.iterations is not None else a["iterations"]
    samples = args.count if args.count is not None else a["samples"]
    tcfg = TrainConfig(**{**cfg["train"], "iterations": iterations, "checkpoint_every": max(iterations, 1)})
    reports = abl.run_ablation(ds, UNetConfig.from_dict(cfg["unet"]), _sched(cfg), tcfg,
                               MetricConfig.from_dict(cfg["metrics"]), samples, derive_seed(cfg["seed"], "ablation"),
                               run_dir=None)
    payload = {label: json.loads(r.to_json()) for label, r in reports.items()}
    _write_text(run / "reports" / "ablation.json", json.dumps(payload, indent=1, sort_keys=True))
    table = abl.render_ablation_table(reports, cfg["name"])
    _write_text(run / "reports" / "ablation_table.txt", table)
    print(table)
    return {"iterations": iterations, "count": samples}


def cmd_plot(run: RunDir, cfg: dict, args) -> dict:
    ds = _dataset(run, cfg)
    _, synth_raw = _synthetic(run, ds, args.samples)
    paths = emit_kde(ds.windows, synth_raw, run / "plots" / "kde", title=cfg["name"])
    print("\n".join(str(p) for p in paths.values()))
    return {"samples": args.samples}


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate,
    "utility": cmd_utility, "ablate": cmd_ablate, "plot": cmd_plot,
}


def execute(command: str, run: RunDir, cfg: dict, args) -> dict:
    run.begin(command)
    recorded = COMMANDS[command](run, cfg, args)
    return run.finish(command, recorded)


def _namespace(command: str, recorded: dict) -> argparse.Namespace:
    defaults = {"resume": None, "checkpoint": None, "count": None, "sample_seed": None, "no_csv": False,
                "samples": None, "real": None, "synth": None, "iterations": None}
    defaults.update(recorded)
    return argparse.Namespace(**defaults)


def replay(source, target) -> dict:
    """Re-run ``source``'s history into ``target``; returns ``{artifact: (old, new)}`` for mismatches."""
    src = RunDir(source)
    cfg = src.config()
    history = src.history()
    if not history:
        raise DataError("run directory has no recorded commands", path=src / "run.json")
    dst = RunDir(target).create(cfg)
    for entry in history:
        # relative input paths resolve inside the new run, where earlier commands recreated them
        args = _namespace(entry["command"], entry["args"])
        execute(entry["command"], dst, cfg, args)
    old, new = src.hashes(), dst.hashes()
    return {k: (old.get(k), new.get(k)) for k in sorted(set(old) | set(new)) if old.get(k) != new.get(k)}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transconv", description="Diffusion-based time-series synthesis and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config file or preset name (toy, smartfall, eeg, stick)")
        p.add_argument("--out", help="run directory (default: $TRANSCONV_OUT/<name>, else runs/<name>)")
        if seed:
            p.add_argument("--seed", type=int, help=f"global seed (overrides the config and ${SEED_ENV})")
        return p

    common(sub.add_parser("ingest", help="prepare windows and the dataset manifest"))
    p = common(sub.add_parser("train", help="train the denoiser"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p = common(sub.add_parser("generate", help="sample synthetic sequences"), seed=False)
    p.add_argument("--count", type=int, help="number of sequences (default from config)")
    p.add_argument("--seed", dest="sample_seed", type=int, help="sampling seed (default derived from the run seed)")
    p.add_argument("--checkpoint", help=f"checkpoint path (default {FINAL_CKPT})")
    p.add_argument("--no-csv", action="store_true", help="skip per-sequence CSV export")
    p = common(sub.add_parser("evaluate", help="compute the four-metric report"))
    p.add_argument("--samples", help=f"synthetic window store in original units (default {SYNTH_STORE})")
    p = common(sub.add_parser("utility", help="run the fall-classifier augmentation experiment"))
    p.add_argument("--real", help="manifest of labelled real windows with subject ids")
    p.add_argument("--synth", help=f"synthetic fall store (default {SYNTH_STORE})")
    p = common(sub.add_parser("ablate", help="train and score the four architecture variants"))
    p.add_argument("--iterations", type=int, help="shared training budget (default from config)")
    p.add_argument("--count", type=int, help="samples per variant (default from config)")
    p = common(sub.add_parser("plot", help="write KDE comparison artifacts"))
    p.add_argument("--samples", help="synthetic window store in original units")
    p = sub.add_parser("replay", help="re-run a run directory's history and compare hashes")
    p.add_argument("source", help="existing run directory")
    p.add_argument("--out", required=True, help="fresh directory for the re-run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    run = None
    try:
        if args.command == "replay":
            diff = replay(args.source, args.out)
            if diff:
                for name, (old, new) in diff.items():
                    print(f"MISMATCH {name}: {old} != {new}")
                raise TransConvError(f"{len(diff)} artifact hashes differ after replay")
            print(f"replay reproduced all artifact hashes in {args.out}")
            return 0
        run, cfg = _open_run(args)
        execute(args.command, run, cfg, args)
        return 0
    except TransConvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return DataError.exit_code
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
