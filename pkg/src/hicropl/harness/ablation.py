"""Variant x seed grids over flow, boundary, compression and loss settings."""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..encoders import DualEncoder
from ..errors import ConfigError
from ..promptflow import MECHANISMS, FlowConfig
from .data import Task
from .training import Hyperparams, RunReport, evaluate_task, harmonic_mean, run_variant

log = logging.getLogger(__name__)

ZERO_SHOT = "zero_shot"
GRIDS = ("flow", "boundary", "mapper_scale", "compression", "criterion", "components",
         "depth", "length", "frozen_prompt")
FLOW_MECHANISMS = tuple(m for m in MECHANISMS if m != "independent")


@dataclass(frozen=True)
class Variant:
    """One grid row: a flow setting plus hyperparameter overrides."""

    name: str
    flow: FlowConfig = field(default_factory=FlowConfig)
    overrides: tuple[tuple[str, object], ...] = ()
    prompt_len: int | None = None
    zero_shot: bool = False

    def hyperparams(self, base: Hyperparams, seed: int) -> Hyperparams:
        return replace(base, seed=seed, **dict(self.overrides))


@dataclass
class CellResult:
    variant: str
    seed: int
    report: RunReport | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class AblationTable:
    grid: str
    cells: list[CellResult]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(c.variant for c in self.cells))

    def means(self) -> dict[str, dict[str, float]]:
        """Per variant: mean base and novel over successful seeds and the HM of those means."""
        out = {}
        for name in self.variants():
            good = [c.report for c in self.cells if c.variant == name and c.ok]
            failed = sum(1 for c in self.cells if c.variant == name and not c.ok)
            if not good:
                out[name] = {"base": float("nan"), "novel": float("nan"), "hm": float("nan"),
                             "seeds": 0, "failed": failed}
                continue
            base = float(np.mean([r.base_acc for r in good]))
            novel = float(np.mean([r.novel_acc for r in good]))
            hm = harmonic_mean(base, novel) if base > 0 and novel > 0 else 0.0
            out[name] = {"base": base, "novel": novel, "hm": hm, "seeds": len(good), "failed": failed}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "seed", "base", "novel", "hm"])
        for c in self.cells:
            if c.ok:
                r = c.report
                writer.writerow([c.variant, c.seed, f"{r.base_acc:.2f}", f"{r.novel_acc:.2f}", f"{r.hm:.4f}"])
            else:
                writer.writerow([c.variant, c.seed, "", "", ""])
        return buf.getvalue()

    def report_lines(self) -> list[str]:
        """One key=value record per cell."""
        lines = []
        for c in self.cells:
            if c.ok:
                lines.append(report_line(c.report))
            else:
                lines.append(f"variant={c.variant} seed={c.seed} error={c.error!r}")
        return lines

    def summary_lines(self) -> list[str]:
        return [f"variant={name} base_mean={m['base']:.2f} novel_mean={m['novel']:.2f} hm={m['hm']:.2f} "
                f"seeds={m['seeds']} failed={m['failed']}" for name, m in self.means().items()]


def report_line(r: RunReport) -> str:
    parts = [f"variant={r.variant}", f"seed={r.seed}", f"base={r.base_acc:.2f}",
             f"novel={r.novel_acc:.2f}", f"hm={r.hm:.4f}", f"epochs={len(r.losses)}"]
    if r.losses:
        ce, cons, total = r.losses[-1]
        parts += [f"final_ce={ce!r}", f"final_cons={cons!r}", f"final_total={total!r}"]
    return " ".join(parts)


def builtin_grid(name: str, flow: FlowConfig | None = None, layers: int = 8,
                 prompt_len: int = 4) -> list[Variant]:
    """Named grids; each row differs from ``flow`` and the default settings in one factor."""
    flow = flow or FlowConfig()
    if name == "flow":
        return [Variant(m, replace(flow, mechanism=m)) for m in FLOW_MECHANISMS]
    if name == "boundary":
        # five evenly spaced boundaries; {2, 3, 4, 5, 6} at eight layers
        lo, hi = min(2, layers - 1), max(layers - 2, 1)
        ks = sorted({int(round(k)) for k in np.linspace(lo, hi, 5)})
        return [Variant(f"k={k}", flow, (("boundary_k", k),)) for k in ks]
    if name == "mapper_scale":
        return [Variant(s, replace(flow, mapper_scale=s)) for s in ("single", "single|multi", "multi")]
    if name == "compression":
        return [Variant(c, replace(flow, compression=c)) for c in ("average", "mlp", "lkp")]
    if name == "criterion":
        return [Variant(c, flow, (("criterion", c),)) for c in ("mse", "l1", "cosine")]
    if name == "components":
        plain = replace(flow, mechanism="independent")
        return [
            Variant("bkf=off,cons=off", plain, (("use_consistency", False),)),
            Variant("bkf=off,cons=on", plain),
            Variant("bkf=on,cons=off", flow, (("use_consistency", False),)),
            Variant("bkf=on,cons=on", flow),
        ]
    if name == "depth":
        depths = sorted({d for d in (2, layers // 2, 3 * layers // 4, layers) if d >= 2})
        return [Variant(f"depth={d}", flow, (("prompt_depth", d),)) for d in depths]
    if name == "length":
        lengths = sorted({1, 2, prompt_len, 2 * prompt_len})
        return [Variant(f"m={m}", flow, prompt_len=m) for m in lengths]
    if name == "frozen_prompt":
        return [Variant(t, flow, (("teacher_prompts", t),)) for t in ("single", "ensemble")]
    raise ConfigError(f"unknown ablation grid {name!r}; expected one of {GRIDS}")


def _run_cell(backbone: DualEncoder, task: Task, variant: Variant, seed: int, hp: Hyperparams,
              vocab: Mapping[str, int], templates: Sequence[str]) -> CellResult:
    try:
        hp_cell = variant.hyperparams(hp, seed)
        if variant.zero_shot:
            base, novel = evaluate_task(backbone, None, task, vocab, templates, hp_cell.tau)
            report = RunReport.from_accuracies(base, novel, seed=seed, variant=variant.name,
                                               config={"zero_shot": True})
            return CellResult(variant.name, seed, report)
        enc = backbone if variant.prompt_len is None else backbone.with_prompt_len(variant.prompt_len)
        snapshot = {"flow": asdict(variant.flow), "train": asdict(hp_cell), "prompt_len": enc.config.prompt_len}
        _, report = run_variant(enc, task, variant.flow, hp_cell, vocab, templates, variant.name, snapshot)
        return CellResult(variant.name, seed, report)
    except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the grid
        log.warning("cell %s seed %d failed: %s", variant.name, seed, exc)
        return CellResult(variant.name, seed, error=f"{type(exc).__name__}: {exc}")


def worker_cap(requested: int) -> int:
    """Requested worker count, capped by the HICROPL_THREADS environment variable."""
    cap = os.environ.get("HICROPL_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"HICROPL_THREADS must be an integer, got {cap!r}") from exc
    return max(1, requested)


def run_ablation(backbone: DualEncoder, task: Task, variants: Sequence[Variant], seeds: Sequence[int],
                 hp: Hyperparams, vocab: Mapping[str, int], templates: Sequence[str],
                 grid: str = "custom", include_zero_shot: bool = True, workers: int = 1) -> AblationTable:
    """Run every variant for every seed; failures are recorded per cell.

    Cells are independent, so with ``workers > 1`` they run in separate
    processes. Results are ordered by (variant, seed) either way.
    """
    if not variants:
        raise ConfigError("an ablation needs at least one variant")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate variant names in {names}")
    rows = list(variants)
    if include_zero_shot:
        rows = [Variant(ZERO_SHOT, zero_shot=True)] + rows
    jobs = [(v, s) for v in rows for s in seeds]
    workers = worker_cap(workers)
    if workers == 1:
        cells = [_run_cell(backbone, task, v, s, hp, vocab, templates) for v, s in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, backbone, task, v, s, hp, vocab, templates) for v, s in jobs]
            cells = [f.result() for f in futures]
    return AblationTable(grid, cells)


def flow_comparison(table: AblationTable) -> tuple[bool, dict[str, float]]:
    """Whether bidir_TI_then_IT's mean HM is at least each unidirectional one."""
    means = table.means()
    hms = {m: means[m]["hm"] for m in FLOW_MECHANISMS if m in means}
    ours = hms.get("bidir_TI_then_IT", float("nan"))
    ok = all(ours >= hms[m] for m in ("unidir_TI", "unidir_IT") if m in hms)
    return ok, hms
