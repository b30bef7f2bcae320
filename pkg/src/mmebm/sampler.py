"""Short-run Langevin dynamics over the latent space.

Each update ascends the target log-density::

    z <- z + (s^2 / 2) * grad log pi(z) + noise_scale * s * eps,   eps ~ N(0, I)

Chains are non-persistent, uncorrected (no Metropolis step) and never
differentiate through the unrolled chain: the returned latents are detached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ChainDivergenceError, ContractError
from .model import BASE_DISTS, EnergyPrior, MultimodalBatch, MultimodalModel, base_sample

TARGETS = ("prior", "posterior")


@dataclass(frozen=True)
class LangevinConfig:
    """Step size ``s``, step budget and noise control for one chain family.

    ``init`` is the cold-start distribution of prior chains. ``passthrough``
    (posterior chains) skips the dynamics so the warm start is returned as is.
    ``grad_clip`` caps the per-sample gradient norm; ``None`` disables it.
    """

    step_size: float = 0.1
    num_steps: int = 60
    noise_scale: float = 1.0
    target: str = "prior"
    init: str = "normal"
    grad_clip: Optional[float] = 1e3
    passthrough: bool = False

    def __post_init__(self) -> None:
        if not self.step_size > 0:
            raise ContractError("step_size must be positive")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ContractError("num_steps must be an integer >= 1 (use passthrough for identity chains)")
        if not 0.0 <= self.noise_scale <= 1.0:
            raise ContractError("noise_scale must lie in [0, 1]")
        if self.target not in TARGETS:
            raise ContractError(f"target must be one of {TARGETS}")
        if self.init not in BASE_DISTS:
            raise ContractError(f"init must be one of {BASE_DISTS}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ContractError("grad_clip must be positive or None")


PRIOR_DEFAULT = LangevinConfig(step_size=0.1, num_steps=60, target="prior")
POSTERIOR_DEFAULT = LangevinConfig(step_size=0.05, num_steps=20, target="posterior")


@dataclass
class ChainResult:
    final_z: torch.Tensor
    init_z: torch.Tensor
    drift_norm: np.ndarray
    noise_norm: np.ndarray
    log_density: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.drift_norm)


def _clip_rows(grad: torch.Tensor, max_norm: Optional[float]) -> torch.Tensor:
    if max_norm is None:
        return grad
    norms = grad.norm(dim=-1, keepdim=True)
    scale = torch.clamp(max_norm / (norms + 1e-12), max=1.0)
    return grad * scale


def _update(z, grad, config, generator, step):
    if not torch.isfinite(grad).all():
        raise ChainDivergenceError(step)
    s = config.step_size
    drift = 0.5 * s * s * _clip_rows(grad, config.grad_clip)
    if config.noise_scale > 0:
        noise = (config.noise_scale * s) * torch.randn(z.shape, generator=generator, dtype=z.dtype)
    else:
        noise = torch.zeros_like(z)
    return z + drift + noise, drift, noise


def langevin_step(grad_fn: Callable[[torch.Tensor], torch.Tensor], z: torch.Tensor,
                  config: LangevinConfig, generator: torch.Generator, step: int = 0) -> torch.Tensor:
    """One Langevin update given the score ``grad_fn(z) = grad log pi(z)``.

    Raises ``ChainDivergenceError`` (carrying ``step``) on a non-finite gradient.
    """
    z_new, _, _ = _update(z, grad_fn(z), config, generator, step)
    return z_new


def run_chain(log_density: Callable[[torch.Tensor], torch.Tensor], z0: torch.Tensor,
              config: LangevinConfig, generator: torch.Generator) -> ChainResult:
    """Run ``config.num_steps`` updates against an unnormalised log-density.

    The score is obtained with ``torch.autograd.grad`` w.r.t. ``z`` only, so
    no parameter ``.grad`` is touched.
    """
    z = z0.detach()
    drift_norm = np.zeros(config.num_steps)
    noise_norm = np.zeros(config.num_steps)
    logp_trace = np.zeros(config.num_steps)
    with torch.enable_grad():
        for t in range(config.num_steps):
            zg = z.requires_grad_(True)
            logp = log_density(zg)
            (grad,) = torch.autograd.grad(logp.sum(), zg)
            z, drift, noise = _update(zg.detach(), grad, config, generator, t)
            drift_norm[t] = float(drift.norm(dim=-1).mean())
            noise_norm[t] = float(noise.norm(dim=-1).mean())
            logp_trace[t] = float(logp.detach().mean())
    if not torch.isfinite(z).all():
        raise ChainDivergenceError(config.num_steps, "Langevin chain left the finite range")
    return ChainResult(z.detach(), z0.detach(), drift_norm, noise_norm, logp_trace)


def sample_prior(prior: EnergyPrior, n: int, config: LangevinConfig,
                 generator: torch.Generator, dtype: Optional[torch.dtype] = None) -> ChainResult:
    """Cold-start chains from ``config.init`` targeting ``f(z) + log p0(z)``."""
    if config.target != "prior":
        raise ContractError("sample_prior needs a config with target='prior'")
    if dtype is None:
        dtype = next(iter(prior.parameters()), torch.zeros((), dtype=torch.float64)).dtype
    z0 = base_sample((n, prior.d), config.init, generator, dtype)
    return run_chain(prior.log_density_unnorm, z0, config, generator)


def sample_posterior(model: MultimodalModel, batch: MultimodalBatch, config: LangevinConfig,
                     generator: torch.Generator, init_z: Optional[torch.Tensor] = None,
                     modalities=None) -> ChainResult:
    """Warm-start chains targeting ``log p(latent, x)`` for the given batch.

    The warm start is ``model.moe_sample(batch)`` unless ``init_z`` is given.
    ``modalities`` restricts the likelihood terms (cross-generation conditions
    on a single modality). With ``config.passthrough`` the chain is the identity.
    """
    if config.target != "posterior":
        raise ContractError("sample_posterior needs a config with target='posterior'")
    if init_z is None:
        with torch.no_grad():
            init_z = model.moe_sample(batch, generator)
    init_z = init_z.detach()
    if config.passthrough:
        zeros = np.zeros(0)
        return ChainResult(init_z, init_z, zeros, zeros, zeros)
    return run_chain(lambda z: model.joint_log_density_unnorm(batch, z, modalities), init_z,
                     config, generator)
