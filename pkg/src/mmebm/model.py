"""Latent-variable multimodal model: energy-based prior, per-modality Gaussian
experts aggregated as a mixture, and unit-variance Gaussian decoders.

Latent layout. In ``shared`` mode the latent is ``z`` in R^d. In ``split`` mode
every modality additionally owns a specific latent ``w_m`` in R^{d_w} with a
standard-normal prior, and the full latent vector is the concatenation
``[z, w_0, ..., w_{M-1}]``. Expert ``m`` emits a Gaussian over ``[z, w_m]`` and
decoder ``m`` consumes ``[z, w_m]``. The energy tilt acts on ``z`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ContractError, NumericalError, UnsupportedConfigError

LATENT_MODES = ("shared", "split")
BASE_DISTS = ("normal", "laplace")
PRIOR_FAMILIES = ("ebm", "gaussian", "laplace")

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_MIN = math.log(1e-6)
LOGVAR_MAX = math.log(1e6)


# ---------------------------------------------------------------------------
# batches and base distributions
# ---------------------------------------------------------------------------


@dataclass
class MultimodalBatch:
    """Aligned observations ``x^(0..M-1)``; ``labels`` are for evaluation only."""

    observations: list
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if len(self.observations) == 0:
            raise ContractError("a batch needs at least one modality")
        sizes = {int(x.shape[0]) for x in self.observations}
        if len(sizes) != 1:
            raise ContractError(f"modalities disagree on batch size: {sorted(sizes)}")
        if self.labels is not None:
            if len(self.labels) != self.n:
                raise ContractError("labels length differs from batch size")
            if len(self.labels) and int(np.min(np.asarray(self.labels))) < 0:
                raise ContractError("labels must be non-negative class indices")

    @property
    def n(self) -> int:
        return int(self.observations[0].shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.observations)

    def torch(self, dtype: torch.dtype = torch.float64) -> "MultimodalBatch":
        obs = [torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)
               for x in self.observations]
        return MultimodalBatch(obs, self.labels)

    def select(self, idx) -> "MultimodalBatch":
        labels = None if self.labels is None else np.asarray(self.labels)[idx]
        return MultimodalBatch([x[idx] for x in self.observations], labels)

    def tile(self, reps: int) -> "MultimodalBatch":
        """Stack ``reps`` copies along the batch axis (copy-major order)."""
        obs = [x.repeat(reps, 1) if torch.is_tensor(x) else np.tile(x, (reps, 1))
               for x in self.observations]
        labels = None if self.labels is None else np.tile(np.asarray(self.labels), reps)
        return MultimodalBatch(obs, labels)


def base_log_prob(z: torch.Tensor, base: str = "normal") -> torch.Tensor:
    """Log density of the standard normal or standard Laplace base, summed over the last axis."""
    d = z.shape[-1]
    if base == "normal":
        return -0.5 * (z * z).sum(-1) - 0.5 * d * LOG_2PI
    if base == "laplace":
        return -z.abs().sum(-1) - d * math.log(2.0)
    raise ContractError(f"unknown base distribution {base!r}")


def base_sample(shape, base: str, generator: torch.Generator,
                dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if base == "normal":
        return torch.randn(shape, generator=generator, dtype=dtype)
    if base == "laplace":
        u = torch.rand(shape, generator=generator, dtype=dtype) - 0.5
        return -torch.sign(u) * torch.log1p(-2.0 * u.abs())
    raise ContractError(f"unknown base distribution {base!r}")


def gaussian_log_prob(z: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log density, summed over the last axis."""
    return -0.5 * (((z - mean) ** 2) / var + torch.log(var) + LOG_2PI).sum(-1)


def unit_gaussian_loglik(x: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    """log N(x; mean, I) per row: ``-0.5*||x - mean||^2 - (D/2) log 2pi``."""
    r = x - mean
    return -0.5 * (r * r).sum(-1) - 0.5 * x.shape[-1] * LOG_2PI


def mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Module:
    """Feed-forward net with softplus activations; ``hidden=()`` gives a single affine map."""
    layers: list[nn.Module] = []
    width = in_dim
    for h in hidden:
        layers += [nn.Linear(width, h), nn.Softplus()]
        width = h
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


def _check_dim(t: torch.Tensor, d: int, what: str) -> None:
    if t.dim() != 2 or t.shape[-1] != d:
        raise ContractError(f"{what}: expected shape (n, {d}), got {tuple(t.shape)}")


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------


class EnergyPrior(nn.Module):
    """Unnormalised prior ``p(z) ∝ exp(f(z)) p0(z)`` over the shared latent.

    ``energy(z)`` returns the tilt ``f(z)``; high values mean high prior mass
    (the physical energy is ``-f``). With ``hidden=None`` there is no network and
    ``f ≡ 0``, which gives the fixed Gaussian/Laplace prior of the baselines.
    The normalising constant is never computed.
    """

    def __init__(self, d: int, hidden: Optional[Sequence[int]] = (64, 64), base: str = "normal",
                 net: Optional[nn.Module] = None) -> None:
        super().__init__()
        if d <= 0:
            raise ContractError("latent dimension must be positive")
        if base not in BASE_DISTS:
            raise ContractError(f"base must be one of {BASE_DISTS}, got {base!r}")
        self.d = d
        self.base = base
        if net is None and hidden is not None:
            net = mlp(d, hidden, 1)
        self.net = net

    @property
    def has_energy(self) -> bool:
        return self.net is not None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.energy(z)

    def energy(self, z: torch.Tensor) -> torch.Tensor:
        _check_dim(z, self.d, "energy")
        if self.net is None:
            return z.new_zeros(z.shape[0])
        return self.net(z).reshape(z.shape[0])

    def log_base(self, z: torch.Tensor) -> torch.Tensor:
        _check_dim(z, self.d, "log_base")
        return base_log_prob(z, self.base)

    def log_density_unnorm(self, z: torch.Tensor) -> torch.Tensor:
        """``f(z) + log p0(z)``; ``log Z`` omitted."""
        return self.energy(z) + self.log_base(z)

    @torch.no_grad()
    def zero_init_(self) -> "EnergyPrior":
        """Zero the output layer so that ``f ≡ 0`` while hidden layers stay random."""
        if self.net is not None:
            last = [m for m in self.net.modules() if isinstance(m, nn.Linear)][-1]
            last.weight.zero_()
            if last.bias is not None:
                last.bias.zero_()
        return self

    def is_zero(self) -> bool:
        if self.net is None:
            return True
        last = [m for m in self.net.modules() if isinstance(m, nn.Linear)][-1]
        return bool((last.weight == 0).all()) and (last.bias is None or bool((last.bias == 0).all()))


# ---------------------------------------------------------------------------
# encoders / mixture posterior
# ---------------------------------------------------------------------------


class GaussianExpert(nn.Module):
    """Amortised diagonal Gaussian ``q(latent | x^(m))``.

    The network emits mean and log-variance; the variance is ``exp`` of the
    log-variance clamped to ``[1e-6, 1e6]``.
    """

    def __init__(self, x_dim: int, out_dim: int, hidden: Sequence[int] = (64,)) -> None:
        super().__init__()
        self.x_dim = x_dim
        self.out_dim = out_dim
        self.net = mlp(x_dim, hidden, 2 * out_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_dim(x, self.x_dim, "expert input")
        out = self.net(x)
        mean, logvar = out[:, :self.out_dim], out[:, self.out_dim:]
        var = torch.exp(logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))
        if not (torch.isfinite(mean).all() and torch.isfinite(var).all()):
            bad = (~torch.isfinite(mean)).any(-1) | (~torch.isfinite(var)).any(-1)
            raise NumericalError(f"encoder produced non-finite output for {int(bad.sum())} of "
                                 f"{x.shape[0]} rows (first bad row {int(bad.nonzero()[0])}, "
                                 f"input max |x| = {float(x.abs().max()):.3g})")
        return mean, var


class MoEPosterior(nn.Module):
    def __init__(self, experts: Sequence[GaussianExpert], weights: Optional[Sequence[float]] = None) -> None:
        super().__init__()
        self.experts = nn.ModuleList(experts)
        m = len(self.experts)
        w = torch.full((m,), 1.0 / m, dtype=torch.float64) if weights is None \
            else torch.as_tensor(weights, dtype=torch.float64)
        if w.shape != (m,) or (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ContractError("mixture weights must be non-negative, one per expert, summing to 1")
        self.register_buffer("weights", w)

    @property
    def uniform(self) -> bool:
        return bool(torch.all(self.weights == self.weights[0]))

    def expert_params(self, batch: MultimodalBatch) -> list[tuple[torch.Tensor, torch.Tensor]]:
        if batch.n_modalities != len(self.experts):
            raise ContractError(f"batch has {batch.n_modalities} modalities, posterior has "
                                f"{len(self.experts)} experts")
        return [expert(x) for expert, x in zip(self.experts, batch.observations)]

    def select_experts(self, n: int, generator: torch.Generator) -> torch.Tensor:
        """Expert index per sample: a balanced random tiling for uniform weights
        (stratified), independent categorical draws otherwise."""
        m = len(self.experts)
        if self.uniform:
            base = torch.arange(m).repeat((n + m - 1) // m)[:n]
            return base[torch.randperm(n, generator=generator)]
        return torch.multinomial(self.weights, n, replacement=True, generator=generator)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------


class ModalityDecoder(nn.Module):
    """Mean map ``g(latent)`` of the likelihood ``N(g(latent), I)``."""

    def __init__(self, in_dim: int, x_dim: int, hidden: Sequence[int] = (64,)) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.x_dim = x_dim
        self.net = mlp(in_dim, hidden, x_dim)

    @property
    def is_linear(self) -> bool:
        return len([m for m in self.net.modules() if isinstance(m, nn.Linear)]) == 1

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        _check_dim(latent, self.in_dim, "decoder input")
        return self.net(latent)

    def log_likelihood(self, latent: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        _check_dim(x, self.x_dim, "decoder target")
        if x.shape[0] != latent.shape[0]:
            raise ContractError(f"latent batch {latent.shape[0]} != observation batch {x.shape[0]}")
        return unit_gaussian_loglik(x, self(latent))


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class ElboNoise:
    """Standard-normal draws that drive one reparameterised pass over all experts.

    ``expert``: (M, n, d + d_w) noise for each expert's own Gaussian.
    ``prior_w``: (M, n, d_w) draws of each modality's specific latent from its
    prior (split mode only), used when that modality is reconstructed from a
    different expert's shared latent.
    """

    expert: torch.Tensor
    prior_w: Optional[torch.Tensor] = None


@dataclass
class ParamGroups:
    alpha: list
    beta: list
    phi: list


class MultimodalModel(nn.Module):
    def __init__(self, prior: EnergyPrior, posterior: MoEPosterior, decoders: Sequence[ModalityDecoder],
                 latent_mode: str = "shared", d_w: int = 0) -> None:
        super().__init__()
        if latent_mode not in LATENT_MODES:
            raise ContractError(f"latent_mode must be one of {LATENT_MODES}")
        if len(decoders) != len(posterior.experts):
            raise ContractError("decoder count must equal expert count")
        if latent_mode == "split" and d_w <= 0:
            raise ContractError("split mode needs d_w > 0")
        self.prior = prior
        self.posterior = posterior
        self.decoders = nn.ModuleList(decoders)
        self.latent_mode = latent_mode
        self.d = prior.d
        self.d_w = d_w if latent_mode == "split" else 0
        for m, (enc, dec) in enumerate(zip(posterior.experts, decoders)):
            if enc.out_dim != self.d + self.d_w or dec.in_dim != self.d + self.d_w:
                raise ContractError(f"modality {m}: encoder/decoder latent width mismatch")

    # -- layout ---------------------------------------------------------

    @property
    def n_modalities(self) -> int:
        return len(self.decoders)

    @property
    def latent_dim(self) -> int:
        """Width of the full latent vector carried by the samplers."""
        return self.d + self.n_modalities * self.d_w

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def shared(self, latent: torch.Tensor) -> torch.Tensor:
        return latent[:, :self.d]

    def specific(self, latent: torch.Tensor, m: int) -> torch.Tensor:
        lo = self.d + m * self.d_w
        return latent[:, lo:lo + self.d_w]

    def decoder_input(self, latent: torch.Tensor, m: int) -> torch.Tensor:
        if self.d_w == 0:
            return self.shared(latent)
        return torch.cat([self.shared(latent), self.specific(latent, m)], dim=-1)

    def assemble(self, z: torch.Tensor, ws: Sequence[torch.Tensor] = ()) -> torch.Tensor:
        return torch.cat([z, *ws], dim=-1) if self.d_w else z

    def param_groups(self) -> ParamGroups:
        return ParamGroups(alpha=list(self.prior.parameters()),
                           beta=list(self.decoders.parameters()),
                           phi=list(self.posterior.parameters()))

    # -- densities ------------------------------------------------------

    def decode(self, latent: torch.Tensor, m: int) -> torch.Tensor:
        return self.decoders[m](self.decoder_input(latent, m))

    def decode_log_likelihood(self, m: int, latent: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        _check_dim(latent, self.latent_dim, "latent")
        return self.decoders[m].log_likelihood(self.decoder_input(latent, m), x)

    def joint_log_density_unnorm(self, batch: MultimodalBatch, latent: torch.Tensor,
                                 modalities: Optional[Sequence[int]] = None) -> torch.Tensor:
        """``log p(z) + sum_m log p(w_m) + sum_{m in modalities} log p(x_m | z, w_m)``
        up to ``log Z``. Defaults to all modalities (the full posterior target)."""
        _check_dim(latent, self.latent_dim, "latent")
        if batch.n != latent.shape[0]:
            raise ContractError(f"latent batch {latent.shape[0]} != observation batch {batch.n}")
        out = self.prior.log_density_unnorm(self.shared(latent))
        for m in range(self.n_modalities if self.d_w else 0):
            out = out + base_log_prob(self.specific(latent, m), "normal")
        mods = range(self.n_modalities) if modalities is None else modalities
        for m in mods:
            out = out + self.decode_log_likelihood(m, latent, batch.observations[m])
        return out

    def moe_log_density(self, batch: MultimodalBatch, z: torch.Tensor) -> torch.Tensor:
        """``log sum_i w_i N(z; u_i, V_i)`` over the shared latent."""
        _check_dim(z, self.d, "moe_log_density")
        comps = []
        for (mean, var), w in zip(self.posterior.expert_params(batch), self.posterior.weights):
            comps.append(torch.log(w.to(z.dtype)) + gaussian_log_prob(z, mean[:, :self.d], var[:, :self.d]))
        return torch.logsumexp(torch.stack(comps, 0), dim=0)

    # -- sampling from the encoders ----------------------------------------

    def draw_noise(self, n: int, generator: torch.Generator) -> ElboNoise:
        m, dt = self.n_modalities, self.dtype
        expert = torch.randn((m, n, self.d + self.d_w), generator=generator, dtype=dt)
        prior_w = torch.randn((m, n, self.d_w), generator=generator, dtype=dt) if self.d_w else None
        return ElboNoise(expert, prior_w)

    def expert_latents(self, batch: MultimodalBatch, noise: ElboNoise,
                       params: Optional[list] = None) -> torch.Tensor:
        """Reparameterised sample per expert: (M, n, latent_dim).

        Row ``e`` carries ``z`` drawn from expert ``e``; the specific latents
        ``w_m`` always come from modality ``m``'s own expert.
        """
        params = self.posterior.expert_params(batch) if params is None else params
        own = [mean + var.sqrt() * eps for (mean, var), eps in zip(params, noise.expert)]
        ws = [o[:, self.d:] for o in own]
        return torch.stack([self.assemble(o[:, :self.d], ws) for o in own], 0)

    def moe_sample(self, batch: MultimodalBatch, generator: torch.Generator) -> torch.Tensor:
        """One latent per sample from the mixture: pick an expert (stratified when
        weights are uniform), then draw from it with the reparameterisation trick."""
        if batch.n == 0:
            raise ContractError("moe_sample on an empty batch")
        sel = self.posterior.select_experts(batch.n, generator)
        noise = self.draw_noise(batch.n, generator)
        lat = self.expert_latents(batch, noise)
        return lat[sel, torch.arange(batch.n)]

    # -- analytic special case ---------------------------------------------

    def is_analytic(self) -> bool:
        return (self.latent_mode == "shared" and self.prior.base == "normal" and self.prior.is_zero()
                and all(dec.is_linear for dec in self.decoders))

    def linear_gaussian_posterior(self, batch: MultimodalBatch, modalities: Optional[Sequence[int]] = None
                                  ) -> tuple[torch.Tensor, torch.Tensor]:
        """Exact posterior ``N(mean_i, cov)`` when ``f ≡ 0``, the base is normal and
        decoders are affine. Returns means (n, d) and the shared covariance (d, d)."""
        if not self.is_analytic():
            raise UnsupportedConfigError("closed-form posterior needs shared latents, f ≡ 0, a normal "
                                         "base and linear decoders")
        mods = range(self.n_modalities) if modalities is None else modalities
        with torch.no_grad():
            prec = torch.eye(self.d, dtype=self.dtype)
            rhs = torch.zeros(batch.n, self.d, dtype=self.dtype)
            for m in mods:
                lin = self.decoders[m].net[0]
                a, b = lin.weight, lin.bias
                prec = prec + a.T @ a
                rhs = rhs + (batch.observations[m] - b) @ a
            cov = torch.linalg.inv(prec)
            cov = 0.5 * (cov + cov.T)
            return rhs @ cov, cov


def build_model(x_dims: Sequence[int], d: int = 8, d_w: int = 4, latent_mode: str = "shared",
                prior: str = "ebm", base_dist: str = "normal", ebm_hidden: Sequence[int] = (64, 64),
                enc_hidden: Sequence[int] = (64,), dec_hidden: Sequence[int] = (64,),
                seed: int = 0, dtype: torch.dtype = torch.float32) -> MultimodalModel:
    """Construct a model with seeded initialisation.

    ``prior`` selects the tilt: ``"ebm"`` learns ``f`` over ``base_dist``;
    ``"gaussian"`` / ``"laplace"`` fix ``f ≡ 0`` with the named base.
    """
    if prior not in PRIOR_FAMILIES:
        raise ContractError(f"prior must be one of {PRIOR_FAMILIES}")
    dw = d_w if latent_mode == "split" else 0
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        if prior == "ebm":
            energy = EnergyPrior(d, tuple(ebm_hidden), base=base_dist)
        else:
            energy = EnergyPrior(d, None, base="normal" if prior == "gaussian" else "laplace")
        experts = [GaussianExpert(x, d + dw, tuple(enc_hidden)) for x in x_dims]
        decoders = [ModalityDecoder(d + dw, x, tuple(dec_hidden)) for x in x_dims]
        model = MultimodalModel(energy, MoEPosterior(experts), decoders, latent_mode, dw)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)
