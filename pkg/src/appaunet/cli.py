"""Command line harness: ``appaunet {train,eval,report,sweep,synth,manifest}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config, load_matrix
from .data import (
    DATA_ROOT_ENV,
    DATASETS,
    DatasetError,
    audit_manifest,
    dataset_hash,
    get_spec,
    load_dataset,
    save_dataset,
    synth_splits,
    write_manifest,
)
from .discriminator import Discriminator
from .metrics import binarize
from .report import METRICS_FILE, ReportError, metrics_row, report, write_report, write_rows
from .segmentor import Segmentor
from .trainer import TrainingDivergence, evaluate, predict, train_semisupervised, train_supervised

log = logging.getLogger("appaunet")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DATA = 4

TRACE_FILE = "loss_trace.csv"
CONFIG_SNAPSHOT = "config.txt"


def load_splits(cfg: RunConfig):
    if cfg.dataset == "SYNTH" and not cfg.data_root:
        return synth_splits(cfg.synth_count, cfg.data_seed, cfg.input_size)
    spec = get_spec(cfg.dataset, cfg.data_root or None)
    return load_dataset(spec, seed=cfg.data_seed, size=cfg.input_size)


def _device(name: str) -> torch.device:
    dev = torch.device(name)
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"device {name!r} requested but CUDA is not available", key="device")
    return dev


def _write_trace(path: Path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,step,term,value\n")
        for epoch, step, term, value in trace:
            fh.write(f"{epoch},{step},{term},{value!r}\n")


def _write_metrics(run_dir: Path, cfg: RunConfig, metrics) -> None:
    row = metrics_row(metrics, cfg.dataset, cfg.model_name, cfg.loss, cfg.mode, cfg.variant)
    write_rows(run_dir / METRICS_FILE, [row])
    lines = [f"# {cfg.model_name} on {cfg.dataset} ({cfg.mode})", ""]
    lines += ["| metric | value |", "|---|---|"]
    for k, v in row.items():
        if k not in ("dataset", "model", "loss", "mode", "variant") and v != "":
            lines.append(f"| {k} | {v} |")
    (run_dir / "metrics.md").write_text("\n".join(lines) + "\n")


def _write_overlays(run_dir: Path, cfg: RunConfig, segmentor, test) -> None:
    from .plotting import overlay_figure

    chosen = test[: cfg.overlays]
    if not chosen:
        return
    probs = predict(segmentor, chosen)
    for s, p in zip(chosen, probs):
        stem = s.source_id.replace("/", "_")
        overlay_figure(s.image, s.mask, binarize(p, cfg.threshold), run_dir / "figures" / f"overlay_{stem}.png", s.source_id)


def run_experiment(cfg: RunConfig, resume: bool = False, device: str = "cpu") -> Path:
    """Train and evaluate one configuration; every artifact lands in ``cfg.out``."""
    from .plotting import loss_curves_figure

    dev = _device(device)
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    (run_dir / CONFIG_SNAPSHOT).write_text(cfg.to_text())
    meta = dict(version=__version__, torch=torch.__version__, numpy=np.__version__, seed=cfg.seed)
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    torch.manual_seed(cfg.seed)
    train, val, test = load_splits(cfg)
    log.info("%s: %d train / %d val / %d test", cfg.dataset, len(train), len(val), len(test))
    segmentor = Segmentor(cfg.segmentor_config(), seed=cfg.seed).to(dev)
    tcfg = cfg.train_config(str(ckpt_dir))
    resume_from = None
    if resume:
        if not (ckpt_dir / "trainer_state.pt").exists():
            raise ConfigError(f"--resume given but {ckpt_dir / 'trainer_state.pt'} does not exist", key="resume")
        resume_from = ckpt_dir

    def progress(state):
        if state.epoch % max(1, cfg.epochs // 10) == 0 or state.epoch == cfg.epochs:
            terms = ", ".join(f"{k}={v[-1]:.4g}" for k, v in state.history.items())
            log.info("epoch %d/%d %s", state.epoch, cfg.epochs, terms)

    discriminator = None
    if cfg.mode == "multi-task":
        n_classes = len(DATASETS[cfg.dataset].classes)
        discriminator = Discriminator(cfg.discriminator_config(n_classes), seed=cfg.seed + 1).to(dev)
        state = train_semisupervised(segmentor, discriminator, train, tcfg, val or None, resume_from, progress)
    else:
        state = train_supervised(segmentor, train, tcfg, val or None, resume_from, progress)

    ckpt.save_model(segmentor, ckpt_dir / "segmentor_best.npz")
    if discriminator is not None:
        ckpt.save_model(discriminator, ckpt_dir / "discriminator_best.npz")
    _write_trace(run_dir / TRACE_FILE, state.trace)
    metrics = evaluate(segmentor, test, discriminator, cfg.threshold, cfg.classify_with)
    _write_metrics(run_dir, cfg, metrics)
    loss_curves_figure(state.history, run_dir / "figures" / "loss_curves.png", cfg.model_name)
    _write_overlays(run_dir, cfg, segmentor, test)
    log.info("best epoch %d, test DS %.4f", state.best_epoch, metrics.ds)
    return run_dir


def evaluate_run(run_dir: Path, device: str = "cpu") -> Path:
    cfg = load_config(run_dir / CONFIG_SNAPSHOT)
    dev = _device(device)
    _, _, test = load_splits(cfg)
    segmentor = ckpt.load_model(run_dir / "checkpoints" / "segmentor_best.npz").to(dev)
    discriminator = None
    disc_path = run_dir / "checkpoints" / "discriminator_best.npz"
    if cfg.mode == "multi-task" and disc_path.exists():
        discriminator = ckpt.load_model(disc_path).to(dev)
    metrics = evaluate(segmentor, test, discriminator, cfg.threshold, cfg.classify_with)
    _write_metrics(run_dir, cfg, metrics)
    return run_dir


def run_sweep(matrix_path, out_dir, device: str = "cpu") -> tuple:
    """Run every cell of a matrix in its own directory; failures are recorded, not fatal."""
    matrix = load_matrix(matrix_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    status = []
    done_dirs = []
    for cfg in matrix.runs():
        name = f"{cfg.dataset}_{cfg.mode}_{cfg.variant}_{cfg.loss}"
        cfg.out = str(out_dir / name)
        if (Path(cfg.out) / METRICS_FILE).is_file():
            status.append(dict(run=name, status="skipped"))
            done_dirs.append(cfg.out)
            continue
        try:
            run_experiment(cfg, device=device)
            status.append(dict(run=name, status="ok"))
            done_dirs.append(cfg.out)
        except Exception as exc:  # keep sweeping
            log.error("run %s failed: %s", name, exc)
            status.append(dict(run=name, status=f"failed: {type(exc).__name__}: {exc}"))
    write_rows(out_dir / "sweep_status.csv", status, ("run", "status"))
    if done_dirs:
        write_report(report(done_dirs), out_dir, "summary")
    return status, done_dirs


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="appaunet", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="flat key = value run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--device", default="cpu")

    t = sub.add_parser("train", help="train and evaluate one configuration")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from the run's last training checkpoint")

    e = sub.add_parser("eval", help="re-evaluate a finished run on its test split")
    e.add_argument("run", help="run directory")
    e.add_argument("--device", default="cpu")

    r = sub.add_parser("report", help="merge run directories into one table")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out", default=".", help="where to write report.csv / report.md")
    r.add_argument("--no-figure", action="store_true")

    s = sub.add_parser("sweep", help="run a matrix of configurations")
    s.add_argument("--config", required=True, help="matrix file (datasets/variants/losses lists)")
    s.add_argument("--out", required=True)
    s.add_argument("--device", default="cpu")

    g = sub.add_parser("synth", help="write a synthetic dataset in the on-disk layout")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64, choices=(32, 64, 128))
    g.add_argument("--out", required=True)

    m = sub.add_parser("manifest", help="build a curated manifest for a dataset directory")
    m.add_argument("dataset", choices=("MCX", "SCX", "JCX"))
    m.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV))
    m.add_argument("--out", help="defaults to <root>/<dataset>/manifest.txt")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        if args.command == "train":
            cfg = load_config(args.config, dict(seed=args.seed, out=args.out))
            run_experiment(cfg, resume=args.resume, device=args.device)
        elif args.command == "eval":
            evaluate_run(Path(args.run), args.device)
        elif args.command == "report":
            table = report(args.runs)
            paths = write_report(table, args.out, figure=not args.no_figure)
            sys.stdout.write(table.to_markdown())
            log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
        elif args.command == "sweep":
            status, _ = run_sweep(args.config, args.out, args.device)
            failed = [s for s in status if s["status"].startswith("failed")]
            if failed:
                log.warning("%d of %d runs failed; see sweep_status.csv", len(failed), len(status))
        elif args.command == "synth":
            splits = synth_splits(args.count, args.seed, args.size)
            out = save_dataset(dict(zip(("train", "val", "test"), splits)), args.out)
            digest = dataset_hash([s for part in splits for s in part])
            print(f"{out}\t{digest}")
        elif args.command == "manifest":
            if not args.root:
                raise ConfigError(f"no dataset root; pass --root or set {DATA_ROOT_ENV}", key="root")
            entries = audit_manifest(args.dataset, args.root)
            dest = Path(args.out) if args.out else Path(args.root) / args.dataset / "manifest.txt"
            write_manifest(dest, entries)
            print(f"{dest}\t{len(entries)} entries")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (DatasetError, ReportError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:
        log.error("unexpected failure\n%s", traceback.format_exc())
        return EXIT_FAILURE
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
