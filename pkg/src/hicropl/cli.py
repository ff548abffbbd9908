"""``hicropl`` command-line entry point.

Every command reads the layered configuration (defaults, ``--config`` file,
``--set`` overrides), writes its artifacts under ``--out`` together with a
``config.txt`` snapshot and a ``manifest.json`` of file hashes, and prints
``key=value`` lines. Failures print one ``hicropl: error[kind]: message``
line to stderr and exit with the code of that kind.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config
from .encoders import DualEncoder, load_vocab
from .errors import (
    CheckpointError,
    ConfigError,
    HiCroPLError,
    NumericError,
    OutputExistsError,
    ProtocolError,
    SpecError,
)
from .gradsuite import TOLERANCE, run_suite
from .harness.ablation import GRIDS, builtin_grid, flow_comparison, report_line, run_ablation
from .harness.data import LabeledImages, Task, generate_dataset, split_base_novel
from .harness.training import (
    evaluate_task,
    harmonic_mean,
    pretrain_backbone,
    pretraining_corpus,
    run_variant,
)
from .objectives import load_templates

log = logging.getLogger("hicropl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5
EXIT_OUTPUT_EXISTS = 6
EXIT_IO = 7
EXIT_GRADCHECK = 8


class GradcheckFailed(HiCroPLError):
    pass


ERROR_KINDS: list[tuple[type, str, int]] = [
    (GradcheckFailed, "gradcheck", EXIT_GRADCHECK),
    (OutputExistsError, "output-exists", EXIT_OUTPUT_EXISTS),
    (CheckpointError, "checkpoint", EXIT_CHECKPOINT),
    (ConfigError, "config", EXIT_CONFIG),
    (SpecError, "config", EXIT_CONFIG),
    (NumericError, "numeric", EXIT_NUMERIC),
    (HiCroPLError, "error", EXIT_ERROR),
    (OSError, "io", EXIT_IO),
]


def classify(exc: BaseException) -> tuple[str, int]:
    for cls, kind, code in ERROR_KINDS:
        if isinstance(exc, cls):
            return kind, code
    return "internal", EXIT_ERROR


# -- output handling ----------------------------------------------------------------

class Outputs:
    """Collects artifacts for one command and writes them under ``root``."""

    def __init__(self, root: Path, overwrite: bool, cfg: RunConfig, command: str):
        self.root, self.overwrite, self.cfg, self.command = root, overwrite, cfg, command
        self.files: dict[str, str] = {}
        self.extra: dict[str, object] = {}

    def path(self, name: str) -> Path:
        target = self.root / name
        if target.exists() and not self.overwrite:
            raise OutputExistsError(f"{target} exists; pass --overwrite to replace it")
        self.root.mkdir(parents=True, exist_ok=True)
        return target

    def check_free(self, names: Sequence[str]) -> None:
        for name in (*names, "config.txt", "manifest.json"):
            self.path(name)

    def record(self, name: str) -> None:
        self.files[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")
        self.record(name)

    def finish(self) -> None:
        self.write_text("config.txt", self.cfg.to_text())
        manifest = {"command": self.command, "config": self.cfg.to_text(), "files": self.files, **self.extra}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def emit(**pairs) -> None:
    print(" ".join(f"{k}={v}" for k, v in pairs.items()))


# -- shared loaders -----------------------------------------------------------------

def save_dataset(ds: LabeledImages, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, images=ds.images, labels=ds.labels, class_names=np.array(ds.class_names))


def load_dataset(cfg: RunConfig) -> LabeledImages:
    if not cfg.paths.dataset:
        return generate_dataset(cfg.data)
    try:
        with np.load(cfg.paths.dataset, allow_pickle=False) as z:
            return LabeledImages(z["images"], z["labels"], [str(s) for s in z["class_names"]])
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file not found: {cfg.paths.dataset}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{cfg.paths.dataset} is not a dataset archive: {exc}") from exc


def load_task(cfg: RunConfig) -> Task:
    s = cfg.split
    return split_base_novel(load_dataset(cfg), s.holdout, s.seed, s.rule, s.train_fraction)


def load_teacher(cfg: RunConfig) -> DualEncoder:
    if not cfg.paths.teacher:
        raise CheckpointError("no teacher checkpoint configured; run 'hicropl pretrain' and "
                              "set paths.teacher")
    return checkpoint.load_encoder(cfg.paths.teacher, cfg.encoder)


def metric_lines(base: float, novel: float) -> str:
    hm = harmonic_mean(base, novel) if base > 0 and novel > 0 else 0.0
    return f"base={base:.2f}\nnovel={novel:.2f}\nhm={hm:.4f}\n"


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["dataset.npz"])
    ds = generate_dataset(cfg.data)
    save_dataset(ds, out.path("dataset.npz"))
    out.record("dataset.npz")
    digest = ds.content_hash()
    out.extra.update(content_hash=digest, classes=len(ds.class_names), samples=len(ds))
    out.finish()
    emit(classes=len(ds.class_names), samples=len(ds), content_hash=digest)


def cmd_pretrain(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["teacher.ckpt", "pretrain_metrics.txt"])
    vocab, templates = load_vocab(), load_templates()
    corpus = pretraining_corpus(cfg.data, cfg.pretrain)
    backbone = pretrain_backbone(corpus, cfg.pretrain.epochs, cfg.pretrain.seed, cfg.encoder,
                                 vocab, templates, cfg.pretrain)
    checkpoint.save_encoder(backbone, out.path("teacher.ckpt"))
    out.record("teacher.ckpt")
    base, novel = evaluate_task(backbone, None, load_task(cfg), vocab, templates, cfg.train.tau)
    out.write_text("pretrain_metrics.txt", f"teacher_hash={backbone.state_hash()}\n" + metric_lines(base, novel))
    out.extra["teacher_hash"] = backbone.state_hash()
    out.finish()
    emit(teacher=out.root / "teacher.ckpt", zero_shot_base=f"{base:.2f}", zero_shot_novel=f"{novel:.2f}")


def cmd_train(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["prompts.ckpt", "metrics.txt", "losses.csv"])
    backbone = load_teacher(cfg)
    before = backbone.state_hash()
    vocab, templates = load_vocab(), load_templates()
    stack, report = run_variant(backbone, load_task(cfg), cfg.flow, cfg.train, vocab, templates)
    if backbone.state_hash() != before:
        raise ProtocolError("teacher weights changed during training")
    checkpoint.save_stack(stack, out.path("prompts.ckpt"))
    out.record("prompts.ckpt")
    out.write_text("metrics.txt", metric_lines(report.base_acc, report.novel_acc))
    out.write_text("losses.csv", "epoch,ce,cons,total\n" + "".join(
        f"{i},{ce!r},{cons!r},{total!r}\n" for i, (ce, cons, total) in enumerate(report.losses)))
    out.finish()
    print(report_line(report))


def cmd_eval(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["eval_metrics.txt"])
    backbone = load_teacher(cfg)
    stack = None
    if cfg.paths.prompts:
        stack = checkpoint.load_stack(cfg.paths.prompts, cfg.encoder, cfg.flow)
    base, novel = evaluate_task(backbone, stack, load_task(cfg), load_vocab(), load_templates(), cfg.train.tau)
    out.write_text("eval_metrics.txt", f"mode={'prompted' if stack else 'zero_shot'}\n" + metric_lines(base, novel))
    out.finish()
    emit(mode="prompted" if stack else "zero_shot", base=f"{base:.2f}", novel=f"{novel:.2f}")


def cmd_ablate(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["ablation.csv", "reports.txt", "summary.txt"])
    backbone = load_teacher(cfg)
    grid = cfg.ablate.grid
    if grid not in GRIDS:
        raise ConfigError(f"unknown ablation grid {grid!r}; expected one of {GRIDS}")
    variants = builtin_grid(grid, cfg.flow, cfg.encoder.layers, cfg.encoder.prompt_len)
    seeds = [cfg.train.seed + i for i in range(cfg.ablate.seeds)]
    task, vocab, templates = load_task(cfg), load_vocab(), load_templates()
    table = run_ablation(backbone, task, variants, seeds, cfg.train, vocab, templates, grid=grid,
                         include_zero_shot=False, workers=cfg.ablate.workers)
    zs_base, zs_novel = evaluate_task(backbone, None, task, vocab, templates, cfg.train.tau)
    zs_hm = harmonic_mean(zs_base, zs_novel) if zs_base > 0 and zs_novel > 0 else 0.0
    summary = [f"variant=zero_shot base_mean={zs_base:.2f} novel_mean={zs_novel:.2f} hm={zs_hm:.2f}"]
    summary += table.summary_lines()
    if grid == "flow":
        ok, _ = flow_comparison(table)
        summary.append(f"check=bidir_TI_then_IT_hm_at_least_unidirectional result={'pass' if ok else 'FAIL'}")
    out.write_text("ablation.csv", table.to_csv())
    out.write_text("reports.txt", "\n".join(table.report_lines()) + "\n")
    out.write_text("summary.txt", "\n".join(summary) + "\n")
    out.finish()
    for line in summary:
        print(line)


def cmd_gradcheck(cfg: RunConfig, out: Outputs) -> None:
    out.check_free(["gradcheck.txt"])
    results = run_suite(seed=cfg.train.seed)
    worst = max(r.error for r in results)
    lines = [f"check={r.name} max_rel_error={r.error:.3e} pass={r.passed}" for r in results]
    out.write_text("gradcheck.txt", "\n".join(lines) + f"\nmax_rel_error={worst:.3e}\n")
    out.finish()
    for line in lines:
        print(line)
    emit(max_rel_error=f"{worst:.3e}", tolerance=TOLERANCE)
    if worst >= TOLERANCE:
        raise GradcheckFailed(f"max relative error {worst:.3e} exceeds {TOLERANCE}")


COMMANDS: dict[str, Callable[[RunConfig, Outputs], None]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hicropl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one key; repeatable, applied after --config")
    common.add_argument("--out", metavar="DIR", help="output directory (default: paths.out)")
    common.add_argument("--seed", type=int, help="sets train.seed and pretrain.seed")
    common.add_argument("--overwrite", action="store_true", help="replace existing output files")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), pretrain=replace(cfg.pretrain, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Outputs(Path(cfg.paths.out), args.overwrite, cfg, args.command)
        COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line and an exit code
        kind, code = classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"hicropl: error[{kind}]: {message}", file=sys.stderr)
        if kind == "internal":
            log.debug("traceback", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
