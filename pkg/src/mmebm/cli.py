"""Command line entry point: ``mmebm {train,eval,generate,ablate}``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 numerical divergence,
4 I/O failure, 5 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import container
from .ablation import PRESETS, run_ablation
from .config import ConfigError, RunConfig
from .data import SynthDataset, load_dataset
from .errors import ContractError, IncompatibleError
from .evaluation import cross_generate, dump_report, joint_generate
from .trainer import (DivergenceError, apply_thread_limit, check_compatible, evaluate_checkpoint,
                      load_checkpoint, resolve_dataset, train)

log = logging.getLogger("mmebm")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_INCOMPATIBLE = 0, 2, 3, 4, 5

_CROSS = re.compile(r"^cross:(\d+)(?:->|→)(\d+)$")


def parse_mode(mode: str) -> tuple[str, Optional[int], Optional[int]]:
    """``"joint"`` or ``"cross:i->j"`` (``→`` also accepted) with ``i != j``."""
    if mode == "joint":
        return "joint", None, None
    match = _CROSS.match(mode)
    if not match:
        raise ConfigError(f"invalid mode {mode!r}: expected 'joint' or 'cross:i->j'")
    i, j = int(match.group(1)), int(match.group(2))
    if i == j:
        raise ConfigError(f"invalid mode {mode!r}: source and target modality must differ")
    return "cross", i, j


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "dataset", None):
        cfg.data.path = args.dataset
    if getattr(args, "deterministic64", False):
        cfg.train.deterministic64 = True
    return cfg.validate()


def _dataset_for(ckpt_config: RunConfig, path: Optional[str]) -> SynthDataset:
    if path:
        return load_dataset(path)
    return resolve_dataset(ckpt_config)[0]


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir or "runs/default")
    result = train(cfg, out, resume=not args.fresh)
    log.info("trained %d steps into %s", result.step, out)
    if result.report is not None:
        rep = result.report
        print(f"joint coherence {rep['joint_coherence']:.4f}  "
              f"cross coherence pre-LD {rep['pre_ld']['cross_coherence_mean']:.4f}  "
              f"post-LD {rep['post_ld']['cross_coherence_mean']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for(ckpt.config, args.dataset)
    if ds.test.labels is None:
        raise IncompatibleError("dataset has no labels; coherence needs them")
    report = evaluate_checkpoint(args.checkpoint, ds, args.seed)
    out = Path(args.out or Path(args.checkpoint).with_name("eval_report.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_report(report, out)
    print(json.dumps({k: report[k] for k in ("joint_coherence", "cross_coherence_mean", "headline")}))
    return EXIT_OK


def _scatter(path: Path, real: np.ndarray, fake: np.ndarray, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # project both sets on the top two principal axes of the real data
    mu = real.mean(0)
    _, _, vt = np.linalg.svd(real - mu, full_matrices=False)
    axes = vt[:2].T
    r, f = (real - mu) @ axes, (fake - mu) @ axes
    fig, ax = plt.subplots(figsize=(4.5, 4.5), dpi=100)
    ax.scatter(r[:, 0], r[:, 1], s=6, alpha=0.4, label="real")
    ax.scatter(f[:, 0], f[:, 1], s=6, alpha=0.6, label="generated")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_generate(args) -> int:
    kind, src, tgt = parse_mode(args.mode)
    if not args.checkpoint:
        raise ConfigError("generate needs --checkpoint")
    if args.n is None or args.n < 1:
        raise ConfigError("generate needs --n >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = ckpt.model, ckpt.config
    M = model.n_modalities
    if kind == "cross" and not (src < M and tgt < M):
        raise ConfigError(f"mode {args.mode!r} names a modality outside 0..{M - 1}")
    ds = _dataset_for(cfg, args.dataset)
    check_compatible(ckpt, ds)
    seed = cfg.eval.seed if args.seed is None else args.seed
    generator = torch.Generator().manual_seed(seed)
    out = Path(args.out or Path(args.checkpoint).with_name("generations"))
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": "generation", "mode": args.mode.replace("→", "->"), "n": args.n, "seed": seed,
                "config_hash": cfg.hash()}

    if kind == "joint":
        gens = dict(enumerate(joint_generate(model, args.n, generator, cfg.sampler.prior.langevin("prior"))))
    else:
        if args.n > ds.test.n:
            raise ConfigError(f"--n {args.n} exceeds the {ds.test.n} test samples available as sources")
        batch = ds.test.select(np.arange(args.n))
        use_ld = not cfg.sampler.posterior.passthrough
        post_cfg = cfg.sampler.posterior.langevin("posterior") if use_ld else None
        gens = {tgt: cross_generate(model, batch, src, tgt, use_ld, generator, post_cfg, cfg.eval.cross_latent)}

    for m, x in gens.items():
        x = np.asarray(x, dtype=np.float32)
        container.write(out / f"x{m}.mmeb", {f"x{m}": x}, {**manifest, "modality": m})
        _scatter(out / f"x{m}.png", np.asarray(ds.test.observations[m], dtype=np.float64), x.astype(np.float64),
                 f"modality {m}: {manifest['mode']}")
    print(f"wrote {len(gens)} tensor file(s) and {len(gens)} plot(s) to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.preset:
        raise ConfigError(f"ablate needs --preset (one of {sorted(PRESETS)})")
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown ablation preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = _load_config(args)
    out = Path(args.out or f"runs/ablate-{args.preset}")
    table = run_ablation(args.preset, cfg, out, on_row=lambda name: log.info("row %s", name))
    print((out / "ablation.txt").read_text(encoding="utf-8"), end="")
    log.info("%d rows written to %s", len(table["rows"]), out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmebm", description="Multimodal latent EBM prior: train, evaluate, "
                                                               "generate and run ablations on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", help="TOML run config (defaults to the desk-scale preset)")
    p.add_argument("--dataset", help="saved dataset directory (overrides the config)")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic64", action="store_true", help="train in float64")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="coherence / Fréchet report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (default: regenerate from the checkpoint config)")
    p.add_argument("--seed", type=int, help="evaluation seed")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="write generated samples and scatter plots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, help="'joint' or 'cross:i->j'")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="dataset directory for cross-generation sources and plots")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--preset", required=True, help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--config", help="base TOML config for every row")
    p.add_argument("--dataset", help="saved dataset directory shared by all rows")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic64", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        apply_thread_limit()
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompatibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
