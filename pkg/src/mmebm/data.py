"""Synthetic multimodal data with a closed-form Bayes classifier.

Each sample has a class ``c`` shared by all modalities and an independent
style vector per modality::

    x_m = W_m onehot(c) + U_m s_m + sigma_obs * eps,   s_m ~ N(0, sigma_style^2 I)

``W_m`` (D_x x K) and ``U_m`` (D_x x d_style) have i.i.d. N(0, signal_scale^2 / D_x)
entries. Every random quantity comes from its own Philox stream keyed by
``(seed, stream id)``, so regeneration is bitwise reproducible and independent
of draw order across streams.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import container
from .errors import ContainerError, ContractError
from .model import MultimodalBatch

_STREAM_W, _STREAM_U, _STREAM_LABELS, _STREAM_STYLE, _STREAM_NOISE = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class SynthSpec:
    M: int = 3
    K: int = 5
    D_x: int = 16
    d_style: int = 4
    sigma_style: float = 0.1
    sigma_obs: float = 0.05
    signal_scale: float = 1.0
    seed: int = 0
    n_train: int = 4096
    n_test: int = 2048

    def __post_init__(self) -> None:
        if self.M < 2 or self.K < 2:
            raise ContractError("need M >= 2 modalities and K >= 2 classes")
        if min(self.D_x, self.d_style) < 1 or min(self.n_train, self.n_test) < 0:
            raise ContractError("dimensions must be >= 1 and sample counts >= 0")
        if not (self.sigma_style > 0 and self.sigma_obs > 0 and self.signal_scale > 0):
            raise ContractError("sigma_style, sigma_obs and signal_scale must be positive")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must fit in 64 bits")

    def to_manifest(self) -> dict[str, str]:
        return {f"spec.{k}": repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_manifest(cls, manifest: dict[str, str]) -> "SynthSpec":
        kw = {}
        for f in fields(cls):
            raw = manifest.get(f"spec.{f.name}")
            if raw is None:
                raise ContainerError(f"manifest lacks spec.{f.name}")
            kw[f.name] = (int if f.type in ("int", int) else float)(raw)
        return cls(**kw)


def _stream(seed: int, stream: int, sub: int = 0) -> np.random.Generator:
    key = np.array([seed, (stream << 32) | sub], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class SynthDataset:
    spec: SynthSpec
    train: MultimodalBatch
    test: MultimodalBatch
    W: list
    U: list
    train_index: np.ndarray
    test_index: np.ndarray

    def equals(self, other: "SynthDataset") -> bool:
        """Bitwise equality of every array and the spec."""
        if self.spec != other.spec:
            return False
        pairs = [(self.train_index, other.train_index), (self.test_index, other.test_index),
                 (self.train.labels, other.train.labels), (self.test.labels, other.test.labels)]
        pairs += list(zip(self.W, other.W)) + list(zip(self.U, other.U))
        pairs += list(zip(self.train.observations, other.train.observations))
        pairs += list(zip(self.test.observations, other.test.observations))
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


def generate(spec: SynthSpec) -> SynthDataset:
    n = spec.n_train + spec.n_test
    scale = spec.signal_scale / math.sqrt(spec.D_x)
    W = [(_stream(spec.seed, _STREAM_W, m).standard_normal((spec.D_x, spec.K)) * scale).astype(np.float32)
         for m in range(spec.M)]
    U = [(_stream(spec.seed, _STREAM_U, m).standard_normal((spec.D_x, spec.d_style)) * scale).astype(np.float32)
         for m in range(spec.M)]
    labels = _stream(spec.seed, _STREAM_LABELS).integers(0, spec.K, size=n).astype(np.int32)
    xs = []
    for m in range(spec.M):
        style = _stream(spec.seed, _STREAM_STYLE, m).standard_normal((n, spec.d_style)) * spec.sigma_style
        eps = _stream(spec.seed, _STREAM_NOISE, m).standard_normal((n, spec.D_x)) * spec.sigma_obs
        x = W[m].astype(np.float64).T[labels] + style @ U[m].astype(np.float64).T + eps
        xs.append(x.astype(np.float32))
    index = np.arange(n, dtype=np.int64)
    tr, te = slice(0, spec.n_train), slice(spec.n_train, n)
    return SynthDataset(
        spec=spec,
        train=MultimodalBatch([x[tr] for x in xs], labels[tr]),
        test=MultimodalBatch([x[te] for x in xs], labels[te]),
        W=W, U=U, train_index=index[tr], test_index=index[te],
    )


# ---------------------------------------------------------------------------
# Bayes oracle
# ---------------------------------------------------------------------------


class BayesOracle:
    """Exact class posterior per modality under a uniform class prior.

    Given class ``c``, ``x_m ~ N(W_m e_c, sigma_style^2 U_m U_m^T + sigma_obs^2 I)``.
    Ties in the arg-max go to the lowest class index.
    """

    def __init__(self, W, U, sigma_style: float, sigma_obs: float) -> None:
        if len(W) != len(U):
            raise ContractError("need one W and one U per modality")
        self.means = [np.asarray(w, dtype=np.float64).T for w in W]  # (K, D)
        self._chol = []
        for w, u in zip(W, U):
            u = np.asarray(u, dtype=np.float64)
            cov = sigma_style**2 * u @ u.T + sigma_obs**2 * np.eye(u.shape[0])
            try:
                self._chol.append(np.linalg.cholesky(cov))
            except np.linalg.LinAlgError as exc:
                raise ContractError("observation covariance is singular") from exc

    @classmethod
    def from_dataset(cls, ds: SynthDataset) -> "BayesOracle":
        return cls(ds.W, ds.U, ds.spec.sigma_style, ds.spec.sigma_obs)

    @property
    def n_modalities(self) -> int:
        return len(self.means)

    @property
    def n_classes(self) -> int:
        return self.means[0].shape[0]

    def log_posterior(self, m: int, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.means[m].shape[1]:
            raise ContractError(f"modality {m} expects dimension {self.means[m].shape[1]}, got {x.shape[1]}")
        L = self._chol[m]
        # shared covariance: normalising terms cancel across classes
        resid = x[:, None, :] - self.means[m][None, :, :]
        sol = solve_triangular(L, resid.reshape(-1, x.shape[1]).T, lower=True)
        maha = (sol**2).sum(0).reshape(x.shape[0], -1)
        logits = -0.5 * maha
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def classify(self, m: int, x) -> tuple[np.ndarray, np.ndarray]:
        logpost = self.log_posterior(m, x)
        return np.argmax(logpost, axis=1), logpost


def bayes_classify(W_m, U_m, sigma_style: float, sigma_obs: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Class prediction and normalised log-posterior for one modality."""
    return BayesOracle([W_m], [U_m], sigma_style, sigma_obs).classify(0, x)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _split_tensors(ds: SynthDataset, split: str) -> dict[str, np.ndarray]:
    batch, index = (ds.train, ds.train_index) if split == "train" else (ds.test, ds.test_index)
    tensors = {f"x{m}": x for m, x in enumerate(batch.observations)}
    if batch.labels is not None:
        tensors["labels"] = batch.labels
    tensors["index"] = index
    for m in range(ds.spec.M):
        tensors[f"W{m}"] = ds.W[m]
        tensors[f"U{m}"] = ds.U[m]
    return tensors


def encode_split(ds: SynthDataset, split: str) -> bytes:
    """Container bytes of one split, exactly as ``save_dataset`` writes them."""
    manifest = {"kind": "dataset", "split": split, **ds.spec.to_manifest()}
    return container.encode(_split_tensors(ds, split), manifest)


def save_dataset(ds: SynthDataset, path) -> None:
    """Write ``<path>/train.mmeb``, ``<path>/test.mmeb`` and ``<path>/manifest.txt``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digests = {}
    for split in ("train", "test"):
        buf = encode_split(ds, split)
        container.write_bytes(root / f"{split}.mmeb", buf)
        digests[split] = hashlib.sha256(buf).hexdigest()
    text = container.format_manifest({
        "format_version": container.FORMAT_VERSION,
        **ds.spec.to_manifest(),
        "sha256.train": digests["train"],
        "sha256.test": digests["test"],
    })
    (root / "manifest.txt").write_text(text, encoding="utf-8")


def load_dataset(path) -> SynthDataset:
    root = Path(path)
    parts = {}
    for split in ("train", "test"):
        manifest, tensors = container.read(root / f"{split}.mmeb")
        if manifest.get("kind") != "dataset":
            raise ContainerError(f"{split}.mmeb is not a dataset container")
        parts[split] = (SynthSpec.from_manifest(manifest), tensors)
    spec, tr = parts["train"]
    spec_te, te = parts["test"]
    if spec != spec_te:
        raise ContainerError("train and test files were generated from different specs")
    M = spec.M
    return SynthDataset(
        spec=spec,
        train=MultimodalBatch([tr[f"x{m}"] for m in range(M)], tr.get("labels")),
        test=MultimodalBatch([te[f"x{m}"] for m in range(M)], te.get("labels")),
        W=[tr[f"W{m}"] for m in range(M)], U=[tr[f"U{m}"] for m in range(M)],
        train_index=tr["index"], test_index=te["index"],
    )


def dataset_hash(path) -> str:
    """SHA-256 over the train and test container bytes."""
    root = Path(path)
    h = hashlib.sha256()
    for split in ("train", "test"):
        h.update((root / f"{split}.mmeb").read_bytes())
    return h.hexdigest()


def dataset_hash_of(ds: SynthDataset) -> str:
    """``dataset_hash`` of ``ds`` without touching the filesystem."""
    h = hashlib.sha256()
    for split in ("train", "test"):
        h.update(encode_split(ds, split))
    return h.hexdigest()
