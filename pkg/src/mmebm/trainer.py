"""Training runs: dataset resolution, the step loop, metrics, checkpoints, evaluation.

An output directory holds::

    config.resolved.toml   every setting, defaults included
    dataset/               the generated dataset (when the config does not name one)
    metrics.jsonl          one record per training step
    checkpoint.mmeb        latest good state (parameters, Adam moments, RNG, step)
    report.json            coherence / Fréchet report after the last step
    .lock                  held while a training process owns the directory
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import container
from .config import RunConfig
from .data import (BayesOracle, SynthDataset, dataset_hash, dataset_hash_of, generate, load_dataset,
                   save_dataset)
from .errors import ContainerError, IncompatibleError, LockError, NumericalError
from .evaluation import build_report, coherence, frechet_report, generate_for_eval
from .learning import GroupOptimizer, training_step
from .model import MultimodalModel, build_model

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "ebm_surrogate", "generator_loss", "inference_loss", "grad_norm_alpha",
                 "grad_norm_beta", "grad_norm_phi", "energy_pos", "energy_neg", "wall_ms")
CHECKPOINT_NAME = "checkpoint.mmeb"


class DivergenceError(NumericalError):
    """Training stopped on a non-finite step; the last good checkpoint is on disk."""

    def __init__(self, step: int, checkpoint: Path, cause: Exception) -> None:
        self.step, self.checkpoint = step, checkpoint
        super().__init__(f"training diverged at step {step} ({cause}); last good state in {checkpoint}")


def apply_thread_limit() -> None:
    """Honour ``MMEB_NUM_THREADS`` (intra-op threads for torch)."""
    raw = os.environ.get("MMEB_NUM_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"MMEB_NUM_THREADS must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError("MMEB_NUM_THREADS must be >= 1")
        torch.set_num_threads(n)


def run_dtype(config: RunConfig) -> torch.dtype:
    return torch.float64 if config.train.deterministic64 else torch.float32


def resolve_dataset(config: RunConfig) -> tuple[SynthDataset, str]:
    """The run's dataset and the SHA-256 of its container bytes."""
    if config.data.path is not None:
        return load_dataset(config.data.path), dataset_hash(config.data.path)
    ds = generate(config.data.spec())
    return ds, dataset_hash_of(ds)


def model_from_config(config: RunConfig, x_dims) -> MultimodalModel:
    m = config.model
    return build_model(list(x_dims), d=m.d, d_w=m.d_w, latent_mode=m.latent_mode, prior=m.prior,
                       base_dist=m.base_dist, ebm_hidden=m.ebm_hidden, enc_hidden=m.enc_hidden,
                       dec_hidden=m.dec_hidden, seed=config.train.seed, dtype=run_dtype(config))


def optimizer_from_config(config: RunConfig, model: MultimodalModel) -> GroupOptimizer:
    o = config.optim
    return GroupOptimizer(model, lr_alpha=o.lr_alpha, lr_beta=o.lr_beta, lr_phi=o.lr_phi, clip_norm=o.clip_norm)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    model: MultimodalModel
    optimizer: GroupOptimizer
    step: int
    rng_state: torch.Tensor
    x_dims: list
    dataset_hash: str


def save_checkpoint(path, config: RunConfig, model: MultimodalModel, optimizer: GroupOptimizer, step: int,
                    generator: torch.Generator, dataset_digest: str) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, value in model.state_dict().items():
        tensors[f"param/{name}"] = value.detach().cpu().numpy()
    for group, opt in optimizer.optimizers.items():
        for idx, state in opt.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"optim/{group}/{idx}/{key}"] = torch.as_tensor(value).cpu().numpy()
    tensors["rng/torch"] = generator.get_state().numpy()
    tensors["config/toml"] = np.frombuffer(config.to_toml().encode("utf-8"), dtype=np.uint8)
    x_dims = [model.decoders[m].x_dim for m in range(model.n_modalities)]
    manifest = {
        "kind": "checkpoint",
        "step": step,
        "dtype": str(model.dtype).replace("torch.", ""),
        "config_hash": config.hash(),
        "dataset_hash": dataset_digest,
        "x_dims": ",".join(str(x) for x in x_dims),
    }
    container.write(path, tensors, manifest)


def load_checkpoint(path) -> Checkpoint:
    manifest, tensors = container.read(path)
    if manifest.get("kind") != "checkpoint":
        raise ContainerError(f"{path} is not a checkpoint container")
    config = RunConfig.from_toml(tensors["config/toml"].tobytes().decode("utf-8"))
    x_dims = [int(x) for x in manifest["x_dims"].split(",")]
    model = model_from_config(config, x_dims)
    params = {k[len("param/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise IncompatibleError(f"checkpoint parameters do not match its config: {exc}") from exc
    optimizer = optimizer_from_config(config, model)
    for group, opt in optimizer.optimizers.items():
        state = opt.state_dict()
        prefix = f"optim/{group}/"
        for key, value in tensors.items():
            if key.startswith(prefix):
                idx, name = key[len(prefix):].split("/")
                state["state"].setdefault(int(idx), {})[name] = torch.from_numpy(value)
        opt.load_state_dict(state)
    return Checkpoint(config, model, optimizer, int(manifest["step"]), torch.from_numpy(tensors["rng/torch"]),
                      x_dims, manifest.get("dataset_hash", ""))


def check_compatible(ckpt: Checkpoint, ds: SynthDataset) -> None:
    dims = [x.shape[1] for x in ds.test.observations]
    if dims != ckpt.x_dims:
        raise IncompatibleError(f"checkpoint expects modality dimensions {ckpt.x_dims}, dataset has {dims}")


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------


def _metrics_line(step: int, report: dict, wall_ms: float) -> str:
    record = {"step": step, **report, "wall_ms": wall_ms}
    return json.dumps({k: record[k] for k in METRIC_FIELDS}) + "\n"


def _truncate_metrics(path: Path, keep_below: int) -> None:
    """Drop records at or after ``keep_below`` (written after the last checkpoint)."""
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines(keepends=True):
        if line.strip() and json.loads(line)["step"] < keep_below:
            kept.append(line)
    path.write_text("".join(kept), encoding="utf-8")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    step: int
    finished: bool
    report: Optional[dict]


def steps_per_epoch(config: RunConfig, n_train: int) -> int:
    spe = n_train // config.train.batch_size
    if spe < 1:
        raise IncompatibleError(f"batch_size {config.train.batch_size} exceeds the {n_train} training samples")
    return spe


def total_steps(config: RunConfig, n_train: int) -> int:
    total = config.train.epochs * steps_per_epoch(config, n_train)
    if config.train.max_steps is not None:
        total = min(total, config.train.max_steps)
    return total


def train(config: RunConfig, out_dir, *, resume: bool = True, evaluate: bool = True,
          stop_at: Optional[int] = None, dataset: Optional[tuple[SynthDataset, str]] = None) -> TrainResult:
    """Run (or resume) training in ``out_dir``.

    ``stop_at`` ends the run early after that global step with a checkpoint, as
    an interruption would; calling again resumes from it. ``dataset`` may pass
    an already resolved ``(dataset, hash)`` pair.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockError(f"{out} is in use by another training process") from None
    try:
        return _train_locked(config, out, resume, evaluate, stop_at, dataset)
    finally:
        lock.release()


def _train_locked(config, out: Path, resume: bool, evaluate: bool, stop_at, dataset) -> TrainResult:
    ds, digest = dataset if dataset is not None else resolve_dataset(config)
    if config.data.path is None and not (out / "dataset" / "manifest.txt").exists():
        save_dataset(ds, out / "dataset")
    dtype = run_dtype(config)
    x_dims = [x.shape[1] for x in ds.train.observations]
    ckpt_path, metrics_path = out / CHECKPOINT_NAME, out / "metrics.jsonl"

    generator = torch.Generator()
    start = 0
    if resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.config.hash() != config.hash():
            raise IncompatibleError(f"{ckpt_path} was written by a different config; use a fresh output directory")
        if ckpt.dataset_hash != digest:
            raise IncompatibleError(f"{ckpt_path} was trained on different dataset bytes")
        model, optimizer, start = ckpt.model, ckpt.optimizer, ckpt.step
        generator.set_state(ckpt.rng_state)
        _truncate_metrics(metrics_path, start)
        log.info("resuming from step %d", start)
    else:
        model = model_from_config(config, x_dims)
        optimizer = optimizer_from_config(config, model)
        generator.manual_seed(config.train.seed)
        if metrics_path.exists():
            metrics_path.unlink()
    (out / "config.resolved.toml").write_text(config.to_toml(), encoding="utf-8")

    prior_cfg = config.sampler.prior.langevin("prior")
    post_cfg = config.sampler.posterior.langevin("posterior")
    train_batch = ds.train.torch(dtype)
    spe = steps_per_epoch(config, ds.train.n)
    total = total_steps(config, ds.train.n)
    end = total if stop_at is None else min(total, stop_at)
    bs, seed = config.train.batch_size, config.train.seed
    perm_epoch, perm = -1, None

    with open(metrics_path, "a", encoding="utf-8") as metrics:
        step = start
        while step < end:
            epoch, k = divmod(step, spe)
            if epoch != perm_epoch:
                perm = torch.as_tensor(np.random.default_rng([seed, epoch]).permutation(ds.train.n))
                perm_epoch = epoch
            batch = train_batch.select(perm[k * bs:(k + 1) * bs])
            t0 = time.perf_counter()
            try:
                report = training_step(model, batch, prior_cfg, post_cfg, optimizer, generator,
                                       recon_source=config.optim.recon_source)
            except NumericalError as exc:
                # a failed step leaves parameters untouched, so the current state is the last good one
                metrics.flush()
                save_checkpoint(ckpt_path, config, model, optimizer, step, generator, digest)
                raise DivergenceError(step, ckpt_path, exc) from exc
            wall = round((time.perf_counter() - t0) * 1e3, 3) if config.train.log_wall_time else 0.0
            metrics.write(_metrics_line(step, report.as_dict(), wall))
            step += 1
            if step % config.train.checkpoint_every == 0 or step == end:
                metrics.flush()
                save_checkpoint(ckpt_path, config, model, optimizer, step, generator, digest)

    finished = step >= total
    report = None
    if finished and evaluate:
        report = evaluate_model(model, config, ds)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return TrainResult(out, step, finished, report)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_model(model: MultimodalModel, config: RunConfig, ds: SynthDataset,
                   seed: Optional[int] = None) -> dict:
    """Coherence and Fréchet report on the test split.

    Post-LD cross generation always runs the posterior chain, even for a model
    trained with a passthrough posterior; the headline follows the training mode.
    """
    if ds.test.labels is None:
        raise IncompatibleError("evaluation needs test labels")
    seed = config.eval.seed if seed is None else seed
    generator = torch.Generator().manual_seed(seed)
    prior_cfg = config.sampler.prior.langevin("prior")
    post_cfg = dataclasses.replace(config.sampler.posterior, passthrough=False).langevin("posterior")
    oracle = BayesOracle.from_dataset(ds)
    gens = generate_for_eval(model, ds.test, config.eval.n_joint, generator, prior_cfg, post_cfg,
                             config.eval.cross_latent)
    coh = coherence(model, ds.test, oracle, generator, prior_cfg, post_cfg, config.eval.n_joint,
                    config.eval.cross_latent, generations=gens)
    fd = frechet_report(ds.test, gens)
    headline = "pre_ld" if config.sampler.posterior.passthrough else "post_ld"
    return build_report(coh, fd, config.hash(), seed, headline=headline)


def evaluate_checkpoint(path, ds: SynthDataset, seed: Optional[int] = None) -> dict:
    ckpt = load_checkpoint(path)
    check_compatible(ckpt, ds)
    return evaluate_model(ckpt.model, ckpt.config, ds, seed)
