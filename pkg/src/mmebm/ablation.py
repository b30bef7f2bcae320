"""Ablation grids: named presets expand into rows that differ only in the prior
family, the posterior sampler and the latent layout. All rows of a grid train
on the same dataset bytes with the same seed."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ConfigError, RunConfig
from .data import dataset_hash, save_dataset
from .errors import IncompatibleError
from .trainer import load_checkpoint, resolve_dataset, train, CHECKPOINT_NAME


@dataclass(frozen=True)
class Row:
    name: str
    prior: str
    posterior_ld: bool
    latent_mode: str | None = None  # None keeps the base config's layout

    def apply(self, base: RunConfig) -> RunConfig:
        cfg = copy.deepcopy(base)
        cfg.model.prior = self.prior
        cfg.sampler.posterior.passthrough = not self.posterior_ld
        if self.latent_mode is not None:
            cfg.model.latent_mode = self.latent_mode
        return cfg.validate()


BASELINE = Row("gaussian-baseline", "gaussian", False)
EBM_ONLY = Row("ebm-prior-only", "ebm", False)
EBM_LD = Row("ebm-prior-plus-ld", "ebm", True)

PRESETS: dict[str, tuple[Row, ...]] = {
    "gaussian-baseline": (BASELINE,),
    "ebm-prior-only": (BASELINE, EBM_ONLY),
    "ebm-prior-plus-ld": (BASELINE, EBM_ONLY, EBM_LD),
    "split-latent-variants": (
        Row("shared/gaussian-baseline", "gaussian", False, "shared"),
        Row("shared/ebm-prior-plus-ld", "ebm", True, "shared"),
        Row("split/gaussian-baseline", "gaussian", False, "split"),
        Row("split/ebm-prior-plus-ld", "ebm", True, "split"),
    ),
}

COLUMNS = ("row", "latent_mode", "prior", "posterior_ld", "joint_coherence", "cross_coherence",
           "cross_pre_ld", "cross_post_ld", "frechet_joint", "frechet_cross")


def preset_rows(name: str) -> tuple[Row, ...]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation preset {name!r}; choose from {sorted(PRESETS)}") from None


def _summary(row: Row, cfg: RunConfig, report: dict) -> dict:
    return {
        "row": row.name,
        "latent_mode": cfg.model.latent_mode,
        "prior": cfg.model.prior,
        "posterior_ld": row.posterior_ld,
        "joint_coherence": report["joint_coherence"],
        "cross_coherence": report["cross_coherence_mean"],
        "cross_pre_ld": report["pre_ld"]["cross_coherence_mean"],
        "cross_post_ld": report["post_ld"]["cross_coherence_mean"],
        "frechet_joint": float(np.mean(report["frechet_joint"])),
        "frechet_cross": float(np.mean(report["frechet_cross"])),
    }


def format_table(rows: list[dict]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def run_ablation(preset: str, base: RunConfig, out_dir,
                 on_row: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate every row of ``preset``; write ``ablation.json`` and ``ablation.txt``."""
    rows = preset_rows(preset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    base = copy.deepcopy(base)
    if base.data.path is None:
        ds, _ = resolve_dataset(base)
        save_dataset(ds, out / "dataset")
        base.data.path = str(out / "dataset")
    shared_hash = dataset_hash(base.data.path)
    ds, _ = resolve_dataset(base)

    summaries = []
    for row in rows:
        if on_row is not None:
            on_row(row.name)
        cfg = row.apply(base)
        row_dir = out / row.name.replace("/", "__")
        result = train(cfg, row_dir, dataset=(ds, dataset_hash(base.data.path)))
        if load_checkpoint(row_dir / CHECKPOINT_NAME).dataset_hash != shared_hash:
            raise IncompatibleError(f"row {row.name} trained on different dataset bytes")
        summaries.append(_summary(row, cfg, result.report))

    table = {"preset": preset, "seed": base.train.seed, "dataset_hash": shared_hash, "rows": summaries}
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    (out / "ablation.txt").write_text(format_table(summaries), encoding="utf-8")
    return table
