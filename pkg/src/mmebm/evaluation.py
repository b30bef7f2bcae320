"""Generation coherence, Fréchet distance and posterior-KL diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import BayesOracle
from .errors import ContractError, UnsupportedConfigError
from .model import MultimodalBatch, MultimodalModel, base_sample
from .sampler import LangevinConfig, sample_posterior, sample_prior

# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product root is computed as the trace of the root of the
    symmetric PSD matrix ``S_a^{1/2} S_b S_a^{1/2}``, whose eigenvalues are
    clamped at zero (round-off tolerance 1e-10).
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    out = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root)
    return max(out, 0.0)


def frechet_distance(samples_a, samples_b) -> float:
    """Fréchet distance between Gaussian fits of two sample sets (rows = samples)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ContractError(f"need at least d+1={d + 1} samples per set")
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_from_moments(a.mean(0), cov_a, b.mean(0), cov_b)


def gaussian_kl(mu0, cov0, mu1, cov1) -> float:
    """``KL(N(mu0, cov0) || N(mu1, cov1))`` in closed form."""
    mu0, mu1 = np.atleast_1d(mu0), np.atleast_1d(mu1)
    cov0, cov1 = np.atleast_2d(cov0), np.atleast_2d(cov1)
    d = mu0.shape[0]
    L1 = np.linalg.cholesky(cov1)
    L0 = np.linalg.cholesky(cov0)
    inv_l1 = np.linalg.inv(L1)
    a = inv_l1 @ L0
    diff = inv_l1 @ (mu1 - mu0)
    logdet1 = 2.0 * np.log(np.diag(L1)).sum()
    logdet0 = 2.0 * np.log(np.diag(L0)).sum()
    return float(0.5 * ((a * a).sum() + diff @ diff - d + logdet1 - logdet0))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _to_torch(batch: MultimodalBatch, model: MultimodalModel) -> MultimodalBatch:
    return batch.torch(model.dtype)


def _source_latents(model: MultimodalModel, b: MultimodalBatch, source: int, generator: torch.Generator,
                    latent: str) -> torch.Tensor:
    d, dw, M = model.d, model.d_w, model.n_modalities
    with torch.no_grad():
        mean, var = model.posterior.experts[source](b.observations[source])
        own = mean
        if latent == "sample":
            own = mean + var.sqrt() * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        ws = [torch.randn((b.n, dw), generator=generator, dtype=mean.dtype) for _ in range(M)] if dw else []
        if dw:
            ws[source] = own[:, d:]
        return model.assemble(own[:, :d], ws)


def _decode_targets(model: MultimodalModel, latents: Sequence[torch.Tensor], source: int,
                    generator: torch.Generator) -> list[dict[int, np.ndarray]]:
    """Decode every target modality from each latent set with shared target-``w`` draws."""
    M, d, dw = model.n_modalities, model.d, model.d_w
    n, dt = latents[0].shape[0], latents[0].dtype
    outs: list[dict[int, np.ndarray]] = [{} for _ in latents]
    with torch.no_grad():
        for j in range(M):
            if j == source:
                continue
            w_j = torch.randn((n, dw), generator=generator, dtype=dt) if dw else None
            for out, lat in zip(outs, latents):
                ws = [w_j if k == j else torch.zeros((n, dw), dtype=dt) for k in range(M)] if dw else []
                out[j] = model.decode(model.assemble(lat[:, :d], ws), j).numpy()
    return outs


def _check_source(model: MultimodalModel, source: int, latent: str) -> None:
    if not 0 <= source < model.n_modalities:
        raise ContractError(f"source modality {source} out of range")
    if latent not in ("sample", "mean"):
        raise ContractError("latent must be 'sample' or 'mean'")


def cross_generate_all(model: MultimodalModel, batch: MultimodalBatch, source: int, use_ld: bool,
                       generator: torch.Generator, config: Optional[LangevinConfig] = None,
                       latent: str = "sample") -> dict[int, np.ndarray]:
    """Generate every other modality from modality ``source``.

    The shared latent comes from expert ``source`` (its mean or a sample). With
    ``use_ld`` the latent is refined by Langevin dynamics on
    ``log p(z, w_source) + log p(x_source | z, w_source)``. Target specific
    latents are drawn from their prior; decoding is noise-free.
    """
    _check_source(model, source, latent)
    if use_ld and config is None:
        raise ContractError("use_ld needs a posterior LangevinConfig")
    b = _to_torch(batch, model)
    lat = _source_latents(model, b, source, generator, latent)
    if use_ld:
        lat = sample_posterior(model, b, config, generator, init_z=lat, modalities=[source]).final_z
    return _decode_targets(model, [lat], source, generator)[0]


def cross_generate_paired(model: MultimodalModel, batch: MultimodalBatch, source: int,
                          generator: torch.Generator, config: LangevinConfig,
                          latent: str = "sample") -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Pre- and post-Langevin generations from the same chains.

    The post-LD latents are the final states of chains started at the pre-LD
    latents, and both are decoded with the same target-``w`` draws, so the
    pre/post difference carries no extra sampling noise from the start or the
    decoding.
    """
    _check_source(model, source, latent)
    b = _to_torch(batch, model)
    pre = _source_latents(model, b, source, generator, latent)
    post = sample_posterior(model, b, config, generator, init_z=pre, modalities=[source]).final_z
    out_pre, out_post = _decode_targets(model, [pre, post], source, generator)
    return out_pre, out_post


def cross_generate(model: MultimodalModel, batch: MultimodalBatch, source: int, target: int, use_ld: bool,
                   generator: torch.Generator, config: Optional[LangevinConfig] = None,
                   latent: str = "sample") -> np.ndarray:
    if source == target:
        raise ContractError("cross generation needs distinct source and target modalities")
    if not 0 <= target < model.n_modalities:
        raise ContractError(f"target modality {target} out of range")
    return cross_generate_all(model, batch, source, use_ld, generator, config, latent)[target]


def joint_generate(model: MultimodalModel, n: int, generator: torch.Generator,
                   config: Optional[LangevinConfig] = None) -> list[np.ndarray]:
    """Unconditional generation of all modalities from the prior.

    With an energy tilt the shared latent comes from prior Langevin chains;
    otherwise from the base distribution directly.
    """
    M, d, dw, dt = model.n_modalities, model.d, model.d_w, model.dtype
    if n == 0:
        return [np.zeros((0, dec.x_dim), dtype=np.float64 if dt == torch.float64 else np.float32)
                for dec in model.decoders]
    if model.prior.has_energy:
        if config is None:
            raise ContractError("an energy prior needs a prior LangevinConfig")
        z = sample_prior(model.prior, n, config, generator, dtype=dt).final_z
    else:
        z = base_sample((n, d), model.prior.base, generator, dt)
    with torch.no_grad():
        ws = [torch.randn((n, dw), generator=generator, dtype=dt) for _ in range(M)] if dw else []
        lat = model.assemble(z, ws)
        return [model.decode(lat, m).numpy() for m in range(M)]


# ---------------------------------------------------------------------------
# coherence
# ---------------------------------------------------------------------------


def cross_coherence_matrix(generations: dict, labels, oracle: BayesOracle) -> np.ndarray:
    """Entry ``(i, j)``: fraction of rows where the oracle class of the
    generation ``generations[(i, j)]`` equals the conditioning label. Diagonal NaN."""
    M = oracle.n_modalities
    mat = np.full((M, M), np.nan)
    labels = np.asarray(labels)
    for (i, j), xhat in generations.items():
        pred, _ = oracle.classify(j, xhat)
        mat[i, j] = float(np.mean(pred == labels))
    return mat


def cross_hits(generations: dict, labels, oracle: BayesOracle) -> np.ndarray:
    """Per-sample fraction of cross directions whose generation is classified
    as the conditioning label (the row average behind the off-diagonal mean)."""
    labels = np.asarray(labels)
    hits = [oracle.classify(j, xhat)[0] == labels for (i, j), xhat in sorted(generations.items())]
    return np.mean(np.stack(hits, 0), axis=0)


def paired_difference(post_hits: np.ndarray, pre_hits: np.ndarray) -> tuple[float, float]:
    """Mean and standard error of the per-sample post-minus-pre coherence."""
    diff = np.asarray(post_hits, dtype=np.float64) - np.asarray(pre_hits, dtype=np.float64)
    se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else float("nan")
    return float(diff.mean()), se


def joint_coherence(generations: Sequence[np.ndarray], oracle: BayesOracle) -> float:
    """Fraction of joint samples on which all per-modality oracles agree."""
    preds = np.stack([oracle.classify(m, x)[0] for m, x in enumerate(generations)], 0)
    if preds.shape[1] == 0:
        return float("nan")
    return float(np.mean(np.all(preds == preds[0], axis=0)))


def offdiag_mean(mat: np.ndarray) -> float:
    mask = ~np.eye(mat.shape[0], dtype=bool)
    return float(np.mean(mat[mask]))


@dataclass
class CoherenceReport:
    joint_coherence: float
    cross_pre: np.ndarray
    cross_post: np.ndarray
    n_cross: int = 0
    n_joint: int = 0
    post_minus_pre: float = float("nan")
    post_minus_pre_se: float = float("nan")

    @property
    def cross_pre_mean(self) -> float:
        return offdiag_mean(self.cross_pre)

    @property
    def cross_post_mean(self) -> float:
        return offdiag_mean(self.cross_post)


@dataclass
class FrechetReport:
    joint: list
    cross_pre: np.ndarray
    cross_post: np.ndarray

    @staticmethod
    def per_target(mat: np.ndarray) -> list:
        return [float(np.nanmean(mat[:, j])) for j in range(mat.shape[1])]


@dataclass
class Generations:
    """Everything the evaluation reads, kept so coherence and Fréchet share samples."""

    joint: list
    cross_pre: dict = field(default_factory=dict)
    cross_post: dict = field(default_factory=dict)


def generate_for_eval(model: MultimodalModel, batch: MultimodalBatch, n_joint: int, generator: torch.Generator,
                      prior_config: LangevinConfig, posterior_config: LangevinConfig,
                      latent: str = "sample") -> Generations:
    gens = Generations(joint=joint_generate(model, n_joint, generator, prior_config))
    for i in range(model.n_modalities):
        pre, post = cross_generate_paired(model, batch, i, generator, posterior_config, latent)
        for j in pre:
            gens.cross_pre[(i, j)] = pre[j]
            gens.cross_post[(i, j)] = post[j]
    return gens


def coherence(model: MultimodalModel, batch: MultimodalBatch, oracle: BayesOracle, generator: torch.Generator,
              prior_config: LangevinConfig, posterior_config: LangevinConfig, n_joint: Optional[int] = None,
              latent: str = "sample", generations: Optional[Generations] = None) -> CoherenceReport:
    """Cross coherence before and after posterior Langevin, and joint coherence
    of prior generations."""
    if batch.labels is None:
        raise ContractError("coherence needs labelled test data")
    if oracle.n_modalities != model.n_modalities:
        raise ContractError("oracle and model disagree on the number of modalities")
    n_joint = batch.n if n_joint is None else n_joint
    gens = generations or generate_for_eval(model, batch, n_joint, generator, prior_config, posterior_config, latent)
    diff, se = paired_difference(cross_hits(gens.cross_post, batch.labels, oracle),
                                 cross_hits(gens.cross_pre, batch.labels, oracle))
    return CoherenceReport(
        joint_coherence=joint_coherence(gens.joint, oracle),
        cross_pre=cross_coherence_matrix(gens.cross_pre, batch.labels, oracle),
        cross_post=cross_coherence_matrix(gens.cross_post, batch.labels, oracle),
        n_cross=batch.n, n_joint=n_joint, post_minus_pre=diff, post_minus_pre_se=se,
    )


def frechet_report(batch: MultimodalBatch, gens: Generations) -> FrechetReport:
    M = batch.n_modalities
    real = [np.asarray(x, dtype=np.float64) for x in batch.observations]
    joint = [frechet_distance(gens.joint[m], real[m]) for m in range(M)]
    pre, post = np.full((M, M), np.nan), np.full((M, M), np.nan)
    for (i, j), xhat in gens.cross_pre.items():
        pre[i, j] = frechet_distance(xhat, real[j])
    for (i, j), xhat in gens.cross_post.items():
        post[i, j] = frechet_distance(xhat, real[j])
    return FrechetReport(joint, pre, post)


# ---------------------------------------------------------------------------
# posterior KL diagnostic
# ---------------------------------------------------------------------------


def posterior_kl_diagnostic(model: MultimodalModel, batch: MultimodalBatch, config: LangevinConfig,
                            generator: torch.Generator, n_chains: int = 1000,
                            init: str = "moe") -> tuple[np.ndarray, np.ndarray]:
    """``(kl_pre, kl_post)`` per observation in the linear-Gaussian case.

    ``n_chains`` posterior chains are run per observation, initialised from the
    mixture posterior (``"moe"``), the base prior (``"prior"``) or the exact
    posterior (``"true"``). Each returned value is ``KL(true || Gaussian fit)``
    of the initial and final chain states.
    """
    if not model.is_analytic():
        raise UnsupportedConfigError("posterior_kl_diagnostic needs f ≡ 0, a normal base, shared latents "
                                     "and linear decoders")
    if init not in ("moe", "prior", "true"):
        raise ContractError("init must be 'moe', 'prior' or 'true'")
    b = _to_torch(batch, model)
    n, d = b.n, model.d
    mean, cov = model.linear_gaussian_posterior(b)
    tiled = b.tile(n_chains)
    with torch.no_grad():
        if init == "moe":
            z0 = model.moe_sample(tiled, generator)
        elif init == "prior":
            z0 = torch.randn((n_chains * n, d), generator=generator, dtype=model.dtype)
        else:
            L = torch.linalg.cholesky(cov)
            eps = torch.randn((n_chains * n, d), generator=generator, dtype=model.dtype)
            z0 = mean.repeat(n_chains, 1) + eps @ L.T
    res = sample_posterior(model, tiled, config, generator, init_z=z0)
    mean_np, cov_np = mean.numpy().astype(np.float64), cov.numpy().astype(np.float64)

    def per_obs(z: torch.Tensor) -> np.ndarray:
        zs = z.numpy().astype(np.float64).reshape(n_chains, n, d)
        out = np.empty(n)
        for i in range(n):
            fit_cov = np.atleast_2d(np.cov(zs[:, i, :], rowvar=False))
            out[i] = gaussian_kl(mean_np[i], cov_np, zs[:, i, :].mean(0), fit_cov)
        return out

    return per_obs(res.init_z), per_obs(res.final_z)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating,)):
        return _clean(float(x))
    return x


def build_report(coh: CoherenceReport, fd: FrechetReport, config_hash: str, seed: int,
                 kl: Optional[tuple] = None, headline: str = "post_ld") -> dict:
    """JSON-ready report.

    Top-level cross-generation fields repeat the ``headline`` variant: a model
    trained with posterior Langevin is scored post-LD, a passthrough-trained
    baseline pre-LD. The ``pre_ld`` / ``post_ld`` blocks always carry both.
    """
    if headline not in ("pre_ld", "post_ld"):
        raise ContractError("headline must be 'pre_ld' or 'post_ld'")
    kl_pre = kl_post = None
    if kl is not None:
        kl_pre, kl_post = float(np.mean(kl[0])), float(np.mean(kl[1]))
    post = headline == "post_ld"
    return _clean({
        "headline": headline,
        "joint_coherence": coh.joint_coherence,
        "cross_coherence_mean": coh.cross_post_mean if post else coh.cross_pre_mean,
        "cross_coherence_matrix": coh.cross_post if post else coh.cross_pre,
        "frechet_joint": fd.joint,
        "frechet_cross": FrechetReport.per_target(fd.cross_post if post else fd.cross_pre),
        "kl_pre_mean": kl_pre,
        "kl_post_mean": kl_post,
        "config_hash": config_hash,
        "seed": seed,
        "pre_ld": {
            "cross_coherence_mean": coh.cross_pre_mean,
            "cross_coherence_matrix": coh.cross_pre,
            "frechet_cross": FrechetReport.per_target(fd.cross_pre),
            "frechet_cross_matrix": fd.cross_pre,
        },
        "post_ld": {
            "cross_coherence_mean": coh.cross_post_mean,
            "cross_coherence_matrix": coh.cross_post,
            "frechet_cross": FrechetReport.per_target(fd.cross_post),
            "frechet_cross_matrix": fd.cross_post,
        },
        "post_minus_pre": coh.post_minus_pre,
        "post_minus_pre_se": coh.post_minus_pre_se,
        "n_cross": coh.n_cross,
        "n_joint": coh.n_joint,
    })


def dump_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
