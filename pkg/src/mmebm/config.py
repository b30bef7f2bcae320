"""Run configuration: TOML in, validated dataclasses, resolved TOML echo out."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, get_args, get_origin

import tomli
import tomli_w

from .data import SynthSpec
from .errors import ContractError
from .model import BASE_DISTS, LATENT_MODES, PRIOR_FAMILIES
from .sampler import LangevinConfig


class ConfigError(ContractError):
    pass


@dataclass
class DataConfig:
    """Either ``path`` to a saved dataset or the generator settings."""

    path: Optional[str] = None
    M: int = 3
    K: int = 5
    D_x: int = 16
    d_style: int = 4
    sigma_style: float = 1.0
    sigma_obs: float = 1.0
    signal_scale: float = 4.0
    seed: int = 0
    n_train: int = 4096
    n_test: int = 2048

    def spec(self) -> SynthSpec:
        return SynthSpec(**{f.name: getattr(self, f.name) for f in fields(SynthSpec)})


@dataclass
class ModelConfig:
    d: int = 8
    d_w: int = 4
    latent_mode: str = "split"
    prior: str = "ebm"
    base_dist: str = "normal"
    ebm_hidden: list = field(default_factory=lambda: [64, 64])
    enc_hidden: list = field(default_factory=lambda: [64])
    dec_hidden: list = field(default_factory=lambda: [64])


@dataclass
class ChainConfig:
    step_size: float = 0.1
    num_steps: int = 60
    noise_scale: float = 1.0
    init: str = "normal"
    grad_clip: Optional[float] = 1e3
    passthrough: bool = False

    def langevin(self, target: str) -> LangevinConfig:
        return LangevinConfig(step_size=self.step_size, num_steps=self.num_steps, noise_scale=self.noise_scale,
                              target=target, init=self.init, grad_clip=self.grad_clip,
                              passthrough=self.passthrough)


def _prior_chain() -> ChainConfig:
    return ChainConfig(step_size=0.4, num_steps=60)


def _posterior_chain() -> ChainConfig:
    return ChainConfig(step_size=0.05, num_steps=20)


@dataclass
class SamplerConfig:
    prior: ChainConfig = field(default_factory=_prior_chain)
    posterior: ChainConfig = field(default_factory=_posterior_chain)


@dataclass
class OptimConfig:
    lr_alpha: float = 1e-4
    lr_beta: float = 1e-3
    lr_phi: float = 1e-3
    clip_norm: Optional[float] = 10.0
    recon_source: str = "pre"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    checkpoint_every: int = 320
    deterministic64: bool = False
    max_steps: Optional[int] = None
    # wall_ms is 0 unless enabled, so reruns give byte-identical metrics files
    log_wall_time: bool = False


@dataclass
class EvalConfig:
    n_joint: int = 2048
    cross_latent: str = "sample"
    seed: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        m = self.model
        if m.latent_mode not in LATENT_MODES:
            raise ConfigError(f"model.latent_mode must be one of {LATENT_MODES}")
        if m.prior not in PRIOR_FAMILIES:
            raise ConfigError(f"model.prior must be one of {PRIOR_FAMILIES}")
        if m.base_dist not in BASE_DISTS:
            raise ConfigError(f"model.base_dist must be one of {BASE_DISTS}")
        if m.d < 1 or (m.latent_mode == "split" and m.d_w < 1):
            raise ConfigError("model.d (and d_w in split mode) must be >= 1")
        if self.optim.recon_source not in ("pre", "post"):
            raise ConfigError("optim.recon_source must be 'pre' or 'post'")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.checkpoint_every < 1:
            raise ConfigError("train.epochs >= 0, batch_size >= 1, checkpoint_every >= 1")
        if self.eval.cross_latent not in ("sample", "mean"):
            raise ConfigError("eval.cross_latent must be 'sample' or 'mean'")
        for lr in (self.optim.lr_alpha, self.optim.lr_beta, self.optim.lr_phi):
            if lr < 0:
                raise ConfigError("learning rates must be >= 0")
        try:
            self.sampler.prior.langevin("prior")
            self.sampler.posterior.langevin("posterior")
            if self.data.path is None:
                self.data.spec()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """Identity of the run; the output location does not take part."""
        ident = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return hashlib.sha256(tomli_w.dumps(ident).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "").validate()

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"TOML parse error: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        return cls.from_toml(text)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    return obj


def _coerce(tp: Any, value: Any, where: str):
    origin = get_origin(tp)
    if origin is not None and type(None) in get_args(tp):
        inner = [a for a in get_args(tp) if a is not type(None)][0]
        return None if value is None else _coerce(inner, value, where)
    if tp in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if tp in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if tp in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected boolean, got {value!r}")
        return value
    if tp in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if tp in (list, "list"):
        if not isinstance(value, list) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"{where}: expected a list of positive integers, got {value!r}")
        return list(value)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def _build(cls, raw: dict, prefix: str):
    import typing

    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{prefix or 'root'}]: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(hints[f.name], raw[f.name], f"{prefix}.{f.name}".lstrip("."))
    return cls(**kwargs)
