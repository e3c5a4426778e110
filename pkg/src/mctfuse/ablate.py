"""Ablation grid over module toggles, distillation placements and fusion variants.

A grid expression names axes joined by ``x`` (cartesian product); several
expressions separated by commas are unioned. Settings that a cell makes
irrelevant (placement with distillation off, fusion kind with token fusion
off) stay at the base configuration, and cells that coincide are run once.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .checkpoint import config_hash
from .data.synth import Dataset
from .fusion import KD_POLICIES, LATE_FUSIONS, TOKEN_FUSIONS
from .train import KD_FORMATS, TrainConfig, evaluate_checkpoint, train_pipeline

DEFAULT_GRID = "toggles x placements x fusions"

AXES: dict[str, list[dict]] = {
    # mctkd and mctf both need mct, which leaves five consistent combinations
    "toggles": [{"mct": a, "mctkd": b, "mctf": c} for a, b, c in itertools.product((False, True), repeat=3)
                if a or not (b or c)],
    "placements": [{"kd_placement": p, "kd_format": f} for f in KD_FORMATS for p in KD_POLICIES],
    "fusions": [{"fusion_kind": k, "late_fusion": None} for k in TOKEN_FUSIONS]
               + [{"late_fusion": k} for k in LATE_FUSIONS],
}


@dataclass
class AblationCell:
    name: str
    overrides: dict

    def config(self, base: TrainConfig) -> TrainConfig:
        return TrainConfig.from_dict({**base.to_dict(), **self.overrides})


def parse_grid(expr: str) -> list[list[str]]:
    terms = []
    for term in expr.split(","):
        axes = [a.strip() for a in term.split("x") if a.strip()]
        unknown = [a for a in axes if a not in AXES]
        if not axes or unknown:
            raise ValueError(f"bad grid term {term.strip()!r}; axes are {sorted(AXES)} joined by 'x'")
        terms.append(axes)
    return terms


def _canonical(over: dict, base: TrainConfig) -> dict:
    """The settings that matter for a cell, with the inapplicable ones dropped."""
    cfg = {**base.to_dict(), **over}
    if cfg["late_fusion"] is not None:
        # a late-fusion head replaces the token path, so distillation and token fusion do not apply
        cfg["mctkd"] = cfg["mctf"] = False
    out = {k: cfg[k] for k in ("mct", "mctkd", "mctf", "late_fusion")}
    if cfg["mctkd"]:
        out.update(kd_placement=cfg["kd_placement"], kd_format=cfg["kd_format"])
    if cfg["mctf"]:
        out["fusion_kind"] = cfg["fusion_kind"]
    return out


def cell_name(c: dict) -> str:
    parts = ["mct" if c["mct"] else "nomct"]
    if c["late_fusion"] is not None:
        parts.append(f"late-{c['late_fusion']}")
    else:
        parts.append(f"{c['kd_format']}-{c['kd_placement']}" if c["mctkd"] else "nokd")
        parts.append(f"fuse-{c['fusion_kind']}" if c["mctf"] else "nofuse")
    return "_".join(parts)


def grid_cells(expr: str, base: TrainConfig) -> list[AblationCell]:
    cells: dict[str, AblationCell] = {}
    for axes in parse_grid(expr):
        for combo in itertools.product(*(AXES[a] for a in axes)):
            over = {}
            for d in combo:
                over.update(d)
            canon = _canonical(over, base)
            name = cell_name(canon)
            if name not in cells:
                cells[name] = AblationCell(name, canon)
                cells[name].config(base)  # validates the cell
    return list(cells.values())


def run_ablation(base: TrainConfig, ds: Dataset, out_dir, expr: str = DEFAULT_GRID, resume: bool = True,
                 log: Callable[[str], None] | None = None) -> dict[str, Path]:
    """Train and evaluate every cell; writes ``<out>/<cell>/report.csv`` and an index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "stage1_cache"
    reports = {}
    index = []
    for cell in grid_cells(expr, base):
        cfg = cell.config(base)
        if log:
            log(f"[ablate] cell {cell.name}")
        # stage-1 runs depend only on the stage-1 keys; cells sharing them share the cache entry
        s1 = cache / config_hash(cfg.phase_dict("video"))[:16]
        final = train_pipeline(cfg, ds, out / cell.name, resume=resume, log=log, stage1_cache=s1)
        report = evaluate_checkpoint(final, ds)
        report.meta["cell"] = cell.name
        report.meta["overrides"] = cell.overrides
        path = out / cell.name / "report.csv"
        report.save(path)
        reports[cell.name] = path
        index.append({"cell": cell.name, "overrides": cell.overrides, "report": f"{cell.name}/report.csv",
                      **{k: getattr(report, k) for k in ("mean_val", "mean_test")}})
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return reports
