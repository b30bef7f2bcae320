"""Learning objectives and the joint training step.

Three parameter groups are updated from three separate objectives:

* ``alpha`` (energy tilt) from the contrastive surrogate between posterior-refined
  and prior-sampled latents;
* ``beta`` (decoders) from the reconstruction log-likelihood at Langevin-refined
  posterior latents;
* ``phi`` (encoders) from the mixture-of-experts ELBO with the tilted prior.

Each objective only sends gradient to its own group. Chains are sampling
procedures; nothing is differentiated through them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch.func import functional_call

from .errors import ContractError, NumericalError, UnsupportedConfigError
from .model import (ElboNoise, MultimodalBatch, MultimodalModel, base_log_prob, gaussian_log_prob,
                    unit_gaussian_loglik)
from .sampler import LangevinConfig, sample_posterior, sample_prior

GROUPS = ("alpha", "beta", "phi")


@dataclass
class LossReport:
    ebm_surrogate: float
    generator_loss: float
    inference_loss: float
    grad_norm_alpha: float
    grad_norm_beta: float
    grad_norm_phi: float
    energy_pos: float
    energy_neg: float

    def as_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def _frozen(module: torch.nn.Module):
    """Call ``module`` with detached parameters: gradients reach the inputs only."""
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = dict(module.named_buffers())
    return lambda *args: functional_call(module, {**params, **buffers}, args)


def ebm_gradient_surrogate(prior, z_posterior: torch.Tensor, z_prior: torch.Tensor) -> torch.Tensor:
    """``-(mean f(z_posterior) - mean f(z_prior))``.

    Both latent sets are treated as constants; descending this loss follows the
    positive-minus-negative phase gradient of the tilt.
    """
    if z_posterior.shape[-1] != z_prior.shape[-1] or z_posterior.shape[-1] != prior.d:
        raise ContractError(f"latent widths differ: posterior {tuple(z_posterior.shape)}, "
                            f"prior {tuple(z_prior.shape)}, model d={prior.d}")
    pos = prior.energy(z_posterior.detach()).mean()
    neg = prior.energy(z_prior.detach()).mean()
    return -(pos - neg)


def _tiled(batch: MultimodalBatch, rows: int) -> MultimodalBatch:
    if rows % batch.n:
        raise ContractError(f"{rows} latent rows is not a multiple of batch size {batch.n}")
    return batch if rows == batch.n else batch.tile(rows // batch.n)


def generator_loss(model: MultimodalModel, batch: MultimodalBatch, z: torch.Tensor) -> torch.Tensor:
    """``-(1/M) sum_m mean log p(x_m | z)`` at fixed latents.

    ``z`` may hold several chains per observation, stacked copy-major
    (row ``k*n + i`` belongs to observation ``i``).
    """
    z = z.detach()
    b = _tiled(batch, z.shape[0])
    total = 0.0
    for m in range(model.n_modalities):
        total = total + model.decode_log_likelihood(m, z, b.observations[m]).mean()
    return -total / model.n_modalities


def _moe_elbo(model: MultimodalModel, batch: MultimodalBatch, noise: ElboNoise, *, use_energy: bool,
              freeze_decoders: bool, z_recon: Optional[torch.Tensor] = None) -> dict:
    """Single-sample MoE ELBO, one reparameterised draw per expert.

    For expert ``e``: reconstruct every modality from ``z ~ q_e``. Modality ``e``
    uses its own specific latent, the others draw theirs from the prior (split
    mode). The KL to the tilted prior is estimated as
    ``log q_e - log p0 - f`` with ``log Z`` dropped.
    """
    M, d = model.n_modalities, model.d
    params = model.posterior.expert_params(batch)
    lat = model.expert_latents(batch, noise, params)
    energy = None
    if use_energy and model.prior.has_energy:
        energy = _frozen(model.prior)
    decoders = [_frozen(dec) if freeze_decoders else dec for dec in model.decoders]
    if z_recon is not None:
        z_recon = z_recon.detach().reshape(M, batch.n, -1)

    recon_sum, kl_sum = 0.0, 0.0
    for e in range(M):
        mean_e, var_e = params[e]
        z_e = lat[e, :, :d]
        own = lat[e, :, :d] if model.d_w == 0 else torch.cat([z_e, model.specific(lat[e], e)], -1)
        log_q = gaussian_log_prob(own, mean_e, var_e)
        log_p0 = base_log_prob(z_e, model.prior.base)
        if model.d_w:
            log_p0 = log_p0 + base_log_prob(own[:, d:], "normal")
        kl = log_q - log_p0
        if energy is not None:
            kl = kl - energy(z_e)
        if not torch.isfinite(kl).all():
            raise NumericalError(f"non-finite KL estimate for expert {e}")
        recon = 0.0
        for j in range(M):
            if z_recon is not None:
                inp = model.decoder_input(z_recon[e], j)
            elif j == e or model.d_w == 0:
                inp = own
            else:
                inp = torch.cat([z_e, noise.prior_w[j]], -1)
            recon = recon + unit_gaussian_loglik(batch.observations[j], decoders[j](inp))
        recon_sum = recon_sum + recon.mean()
        kl_sum = kl_sum + kl.mean()
    recon_mean, kl_mean = recon_sum / M, kl_sum / M
    return {"elbo": recon_mean - kl_mean, "recon": recon_mean, "kl": kl_mean}


def inference_loss(model: MultimodalModel, batch: MultimodalBatch, generator: Optional[torch.Generator] = None,
                   noise: Optional[ElboNoise] = None, z_recon: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Negative MoE ELBO against the tilted prior; gradient reaches ``phi`` only.

    Pass either ``generator`` or pre-drawn ``noise``. ``z_recon`` (post-Langevin
    latents, copy-major over experts) switches the reconstruction expectation to
    refined latents, in which case encoders learn through the KL term alone.
    """
    if noise is None:
        if generator is None:
            raise ContractError("inference_loss needs a generator or noise")
        noise = model.draw_noise(batch.n, generator)
    return -_moe_elbo(model, batch, noise, use_energy=True, freeze_decoders=True, z_recon=z_recon)["elbo"]


def baseline_moe_elbo(model: MultimodalModel, batch: MultimodalBatch, generator: Optional[torch.Generator] = None,
                      noise: Optional[ElboNoise] = None) -> torch.Tensor:
    """Standard MoE ELBO with the fixed base prior (any tilt ignored).

    Gradient reaches both decoders and encoders; this is the Gaussian/Laplace
    prior baseline objective.
    """
    if model.latent_mode != "shared":
        raise UnsupportedConfigError("baseline_moe_elbo is defined for shared-only latents")
    if noise is None:
        if generator is None:
            raise ContractError("baseline_moe_elbo needs a generator or noise")
        noise = model.draw_noise(batch.n, generator)
    return _moe_elbo(model, batch, noise, use_energy=False, freeze_decoders=False)["elbo"]


class GroupOptimizer:
    """One Adam per parameter group with its own learning rate and norm clipping."""

    def __init__(self, model: MultimodalModel, lr_alpha: float = 1e-4, lr_beta: float = 1e-3,
                 lr_phi: float = 1e-3, clip_norm: Optional[float] = 10.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        groups = model.param_groups()
        self.params = {"alpha": groups.alpha, "beta": groups.beta, "phi": groups.phi}
        lrs = {"alpha": lr_alpha, "beta": lr_beta, "phi": lr_phi}
        self.clip_norm = clip_norm
        self.optimizers = {
            name: torch.optim.Adam(ps, lr=lrs[name], betas=betas, eps=eps, foreach=False)
            for name, ps in self.params.items() if ps
        }

    def step(self, grads: dict) -> None:
        for name, opt in self.optimizers.items():
            gs = grads.get(name)
            if gs is None:
                continue
            for p, g in zip(self.params[name], gs):
                p.grad = g.detach().clone()
            if self.clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(self.params[name], self.clip_norm, foreach=False)
            opt.step()
            opt.zero_grad(set_to_none=True)

    def state_dict(self) -> dict:
        return {name: opt.state_dict() for name, opt in self.optimizers.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, opt in self.optimizers.items():
            opt.load_state_dict(state[name])


def _grad(loss: torch.Tensor, params: list) -> list:
    if not params:
        return []
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def _norm(gs: list) -> float:
    if not gs:
        return 0.0
    return float(torch.sqrt(sum((g.double() ** 2).sum() for g in gs)))


def training_step(model: MultimodalModel, batch: MultimodalBatch, prior_config: LangevinConfig,
                  posterior_config: LangevinConfig, optimizer: GroupOptimizer,
                  generator: torch.Generator, recon_source: str = "pre") -> LossReport:
    """One joint update of ``alpha``, ``beta`` and ``phi``.

    1. one reparameterised draw per expert and observation (stratified MoE sample);
    2. posterior Langevin warm-started from those draws;
    3. prior Langevin from the cold-start distribution (EBM prior only);
    4-6. gradients of the three objectives; all are computed before any parameter
         changes, so a failure leaves the model untouched.

    The decoder step descends ``M * generator_loss`` (the sum over modalities of
    the reconstruction log-likelihood), which is exactly the decoder gradient of
    the MoE ELBO when the chain is a passthrough.
    """
    if recon_source not in ("pre", "post"):
        raise ContractError("recon_source must be 'pre' or 'post'")
    groups = optimizer.params
    M, n = model.n_modalities, batch.n
    noise = model.draw_noise(n, generator)
    with torch.no_grad():
        z_init = model.expert_latents(batch, noise).reshape(M * n, -1)
    post = sample_posterior(model, batch.tile(M), posterior_config, generator, init_z=z_init)
    z_post = post.final_z

    grads: dict = {}
    energy_pos = energy_neg = ebm = 0.0
    if model.prior.has_energy:
        z_prior = sample_prior(model.prior, n, prior_config, generator, dtype=model.dtype).final_z
        surrogate = ebm_gradient_surrogate(model.prior, model.shared(z_post), z_prior)
        grads["alpha"] = _grad(surrogate, groups["alpha"])
        with torch.no_grad():
            energy_pos = float(model.prior.energy(model.shared(z_post)).mean())
            energy_neg = float(model.prior.energy(z_prior).mean())
        ebm = float(surrogate.detach())

    gen = generator_loss(model, batch, z_post)
    grads["beta"] = _grad(M * gen, groups["beta"])

    inf = inference_loss(model, batch, noise=noise, z_recon=z_post if recon_source == "post" else None)
    grads["phi"] = _grad(inf, groups["phi"])

    report = LossReport(ebm_surrogate=ebm, generator_loss=float(gen.detach()), inference_loss=float(inf.detach()),
                        grad_norm_alpha=_norm(grads.get("alpha", [])), grad_norm_beta=_norm(grads["beta"]),
                        grad_norm_phi=_norm(grads["phi"]), energy_pos=energy_pos, energy_neg=energy_neg)
    if not report.is_finite():
        raise NumericalError(f"non-finite loss or gradient, step aborted: {report.as_dict()}")
    optimizer.step(grads)
    return report


def baseline_step(model: MultimodalModel, batch: MultimodalBatch, optimizer: GroupOptimizer,
                  generator: torch.Generator) -> LossReport:
    """Plain MoE-ELBO update of ``beta`` and ``phi`` with the fixed base prior."""
    groups = optimizer.params
    noise = model.draw_noise(batch.n, generator)
    loss = -baseline_moe_elbo(model, batch, noise=noise)
    flat = _grad(loss, groups["beta"] + groups["phi"])
    nb = len(groups["beta"])
    grads = {"beta": flat[:nb], "phi": flat[nb:]}
    with torch.no_grad():
        z_init = model.expert_latents(batch, noise).reshape(model.n_modalities * batch.n, -1)
        gen = float(generator_loss(model, batch, z_init))
    report = LossReport(ebm_surrogate=0.0, generator_loss=gen, inference_loss=float(loss.detach()),
                        grad_norm_alpha=0.0, grad_norm_beta=_norm(grads["beta"]),
                        grad_norm_phi=_norm(grads["phi"]), energy_pos=0.0, energy_neg=0.0)
    if not report.is_finite():
        raise NumericalError(f"non-finite loss or gradient, step aborted: {report.as_dict()}")
    optimizer.step(grads)
    return report
