"""Latent-space energy-based prior for multimodal generative models.

Modules: ``model`` (prior, experts, decoders), ``sampler`` (short-run Langevin),
``learning`` (objectives and the joint training step), ``data`` (synthetic
multimodal data with a Bayes oracle), ``evaluation`` (coherence and Fréchet
metrics), ``trainer`` / ``cli`` (runs, checkpoints, command line).
"""

from .config import RunConfig
from .data import BayesOracle, SynthSpec, generate, load_dataset, save_dataset
from .model import MultimodalBatch, MultimodalModel, build_model
from .sampler import LangevinConfig, sample_posterior, sample_prior

__version__ = "0.1.0"

__all__ = ["RunConfig", "BayesOracle", "SynthSpec", "generate", "load_dataset", "save_dataset",
           "MultimodalBatch", "MultimodalModel", "build_model", "LangevinConfig", "sample_posterior",
           "sample_prior", "__version__"]
