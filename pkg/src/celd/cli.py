"""``celd`` command line.

Run directory layout::

    RUN/data/synth/        synthetic images + manifest.csv
    RUN/data/pooled.csv    pooled manifest
    RUN/data/split.json    train/val/test split
    RUN/checkpoints/       source.pt, target.pt (+ .json sidecars)
    RUN/logs/              training histories and the run log
    RUN/reports/           eval/*.json, metrics.csv, confusion panels, charts

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from . import datahub, evaluator, nnmodel, trainer
from .config import ConfigError, ExperimentConfig, load_config
from .perturb import PerturbationSpec, parse_perturb
from .synthgen import generate

log = logging.getLogger("celd")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4


class MissingPrerequisite(RuntimeError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"{path} not found; run `celd {command}` first")


class OutputExists(RuntimeError):
    pass


@dataclass
class Run:
    root: Path
    cfg: ExperimentConfig
    force: bool = False

    @property
    def synth_dir(self):
        return self.root / "data" / "synth"

    @property
    def pooled(self):
        return self.root / "data" / "pooled.csv"

    @property
    def split(self):
        return self.root / "data" / "split.json"

    def checkpoint(self, stage: str) -> Path:
        return self.root / "checkpoints" / f"{stage}.pt"

    def history(self, stage: str) -> Path:
        return self.root / "logs" / f"history_{stage}.csv"

    @property
    def reports(self):
        return self.root / "reports"

    def eval_report(self, spec: PerturbationSpec) -> Path:
        stem = spec.label().replace(":", "_").replace("=", "-").replace(",", "_")
        return self.reports / "eval" / f"{stem}.json"

    def require(self, path: Path, command: str) -> Path:
        if not path.exists():
            raise MissingPrerequisite(path, command)
        return path

    def claim(self, *paths: Path) -> None:
        """Refuse to overwrite existing outputs unless ``--force``."""
        for p in paths:
            if p.exists():
                if not self.force:
                    raise OutputExists(f"{p} exists; pass --force to overwrite")
                if p.is_dir():
                    shutil.rmtree(p)
                else:
                    p.unlink()


def cmd_synth(run: Run) -> None:
    if run.cfg.data.synth is None:
        raise ConfigError("[data.synth] is not configured")
    run.claim(run.synth_dir)
    ds, manifest = generate(run.cfg.data.synth, run.synth_dir)
    log.info("wrote %d synthetic images and %s", len(ds), manifest)


def cmd_pool(run: Run) -> None:
    manifests = list(run.cfg.data.manifests)
    if run.cfg.data.synth is not None:
        manifests.append(run.require(run.synth_dir / "manifest.csv", "synth"))
    for m in manifests:
        if not m.is_file():
            raise ConfigError(f"manifest not found: {m}")
    run.claim(run.pooled)
    pooled = datahub.pool([datahub.load_manifest(m) for m in manifests])
    datahub.write_manifest(pooled.records, run.pooled)
    log.info("pooled %d records: %s", len(pooled), pooled.class_totals())


def cmd_split(run: Run) -> None:
    pooled = datahub.load_manifest(run.require(run.pooled, "pool"))
    run.claim(run.split)
    split = datahub.stratified_split(pooled, run.cfg.data.ratios, run.cfg.data.seed)
    datahub.save_split(split, run.split)
    log.info("split sizes train/val/test = %d/%d/%d", len(split.train), len(split.val), len(split.test))


def _train_stage(run: Run, stage: str, model, split, cfg) -> nnmodel.Checkpoint:
    ckpt, history = trainer.train(model, split.train, split.val, cfg)
    nnmodel.save(ckpt, run.checkpoint(stage))
    history.to_csv(run.history(stage))
    log.info(
        "%s stage: %d epochs, best epoch %d, val loss %.4f, val acc %.4f",
        stage, history.stopped_epoch, history.best_epoch, history.best_val_loss,
        history.val_acc[history.best_epoch - 1],
    )
    return ckpt


def cmd_train_source(run: Run) -> None:
    split = datahub.load_split(run.require(run.split, "split"))
    run.claim(run.checkpoint("source"), run.history("source"))
    source = datahub.restrict_to_source(split, datahub.LabelSpace.source())
    model = nnmodel.build(run.cfg.model, source.labelspace)
    _train_stage(run, "source", model, source, run.cfg.train_source)


def cmd_extend(run: Run) -> None:
    src = nnmodel.load(run.require(run.checkpoint("source"), "train-source"))
    split = datahub.load_split(run.require(run.split, "split"))
    run.claim(run.checkpoint("target"), run.history("target"))
    model = nnmodel.extend_head(src, split.labelspace, seed=run.cfg.model.init_seed + 1, config=run.cfg.model)
    if run.cfg.source_fraction < 1:
        train = trainer.subsample_source_classes(
            split.train, src.labelspace, run.cfg.source_fraction, run.cfg.train_target.seed
        )
        split = datahub.SplitManifest(tuple(train), split.val, split.test, split.ratios, split.seed, split.labelspace)
    _train_stage(run, "target", model, split, run.cfg.train_target)


def cmd_eval(run: Run, specs: list[PerturbationSpec] | None = None) -> list[evaluator.EvalReport]:
    model = nnmodel.load(run.require(run.checkpoint("target"), "extend")).to_model()
    split = datahub.load_split(run.require(run.split, "split"))
    specs = specs or run.cfg.perturb
    run.claim(*(run.eval_report(s) for s in specs))
    images = [datahub.load_image(r, model.config.input_side) for r in split.test]
    reports = []
    for spec in specs:
        rep = evaluator.evaluate(model, split.test, spec, images=images)
        rep.save(run.eval_report(spec))
        log.info("eval %s: accuracy %.4f", spec.label(), rep.accuracy)
        reports.append(rep)
    return reports


def cmd_report(run: Run) -> None:
    eval_dir = run.require(run.reports / "eval", "eval")
    paths = sorted(eval_dir.glob("*.json"))
    if not paths:
        raise MissingPrerequisite(eval_dir / "*.json", "eval")
    run.claim(run.reports / "metrics.csv")
    for stale in list(run.reports.glob("cm_*")) + list(run.reports.glob("confusion_grid.*")) + list(
        run.reports.glob("metrics_bars.*")
    ):
        stale.unlink()
    reports = [evaluator.EvalReport.load(p) for p in paths]
    files = evaluator.comparison_report(reports, run.reports, formats=("png", "svg"))
    log.info("wrote %s and %d confusion panels", files["csv"][0], len(files["panels"]))


def cmd_run_all(run: Run, specs=None) -> None:
    if run.cfg.data.synth is not None:
        cmd_synth(run)
    cmd_pool(run)
    cmd_split(run)
    cmd_train_source(run)
    cmd_extend(run)
    cmd_eval(run, specs)
    cmd_report(run)


COMMANDS = {
    "synth": (cmd_synth, "render the synthetic corpus from [data.synth]"),
    "pool": (cmd_pool, "pool the configured manifests"),
    "split": (cmd_split, "stratified train/val/test split"),
    "train-source": (cmd_train_source, "train the Healthy/DR source classifier"),
    "extend": (cmd_extend, "extend the source head to three classes and fine-tune"),
    "eval": (cmd_eval, "evaluate the target model under perturbations"),
    "report": (cmd_report, "write metrics.csv, confusion panels and charts"),
    "run-all": (cmd_run_all, "run every stage in order"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment TOML file")
    common.add_argument("--out", required=True, type=Path, help="run directory")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="celd", description="Class extension for fundus image classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("eval", "run-all"):
            p.add_argument("--perturb", action="append", metavar="KIND[:k=v,...]",
                           help="perturbation to evaluate (repeatable); defaults to the config's list")
    return parser


def _setup_logging(run_root: Path, verbose: bool) -> None:
    (run_root / "logs").mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(run_root / "logs" / "celd.log")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    sh.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(fh)
    root.addHandler(sh)
    logging.getLogger("celd.trainer").setLevel(logging.DEBUG if verbose else logging.WARNING)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        specs = [parse_perturb(p) for p in args.perturb] if getattr(args, "perturb", None) else None
    except (ConfigError, ValueError) as exc:
        print(f"celd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    run = Run(args.out, cfg, args.force)
    if args.command == "run-all" and run.root.exists() and any(run.root.iterdir()) and not args.force:
        print(f"celd: {run.root} is not empty; pass --force to overwrite", file=sys.stderr)
        return EXIT_CONFIG
    _setup_logging(run.root, args.verbose)
    func = COMMANDS[args.command][0]
    try:
        func(run, specs) if args.command in ("eval", "run-all") else func(run)
    except (ConfigError, OutputExists) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (MissingPrerequisite, nnmodel.CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_PREREQ
    except Exception as exc:
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
