"""Small dense networks: conditional generator, image critic, encoders, classifier.

Conditioning is a per-condition scale-and-shift applied after each hidden
affine layer of the generator (no running statistics). The critic is
unconditional in its score and carries an auxiliary class head, AC-GAN style.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ContractViolation

PROVENANCES = ("real", "current_model", "snapshot")
FEATURE_SOURCES = ("learned_encoder", "distilled", "prior")


@dataclass
class SampleBatch:
    """Rows of data-space samples.

    ``conditions`` holds one condition id per row. ``pair_key`` is shared by two
    batches generated from the same latent draw, which is what the paired
    alignment losses check before comparing rows.
    """

    x: Tensor
    conditions: np.ndarray
    provenance: str = "real"
    pair_key: int | None = None

    def __post_init__(self):
        self.x = ad.as_tensor(self.x)
        self.conditions = np.broadcast_to(np.asarray(self.conditions, dtype=np.int64), (self.x.shape[0],))
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def condition(self) -> int:
        """The single condition of a homogeneous batch."""
        first = int(self.conditions[0])
        if not np.all(self.conditions == first):
            raise ContractViolation("batch mixes several conditions")
        return first


@dataclass
class FeatureBatch:
    h: Tensor
    source: str
    conditions: np.ndarray
    pair_key: int | None = None

    def __post_init__(self):
        self.h = ad.as_tensor(self.h)
        self.conditions = np.broadcast_to(np.asarray(self.conditions, dtype=np.int64), (self.h.shape[0],))
        if self.source not in FEATURE_SOURCES:
            raise ContractViolation(f"unknown feature source {self.source!r}")

    def __len__(self) -> int:
        return self.h.shape[0]


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def _dense_shapes(sizes: Sequence[int]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"l{k}.W"] = (a, b)
        shapes[f"l{k}.b"] = (b,)
    return shapes


def _fill_dense(params: ParameterSet, sizes: Sequence[int], rng: np.random.Generator, prefix: str = "") -> None:
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w, bias = _init_dense(rng, a, b)
        params[f"{prefix}l{k}.W"].data[...] = w
        params[f"{prefix}l{k}.b"].data[...] = bias


class Network:
    """Shared plumbing: a ParameterSet plus copy/freeze helpers."""

    name = "network"
    params: ParameterSet

    def copy(self, frozen: bool = False):
        out = object.__new__(type(self))
        out.__dict__.update(self.__dict__)
        out.params = self.params.copy(frozen=frozen)
        return out

    def _check_condition(self, conditions, n_conditions: int) -> None:
        c = np.asarray(conditions)
        if c.size and (c.min() < 0 or c.max() >= n_conditions):
            raise ContractViolation(f"condition index out of range [0, {n_conditions})")


class Generator(Network):
    """z -> data with per-condition modulation after each hidden layer.

    Hidden layers use a rectifier; the output layer is identity, or a sigmoid
    when ``squash`` is set (raster tasks living in [0, 1]).
    """

    name = "generator"

    def __init__(
        self,
        latent_dim: int,
        data_dim: int,
        n_conditions: int,
        hidden: Sequence[int] = (64, 64),
        squash: bool = False,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim, self.data_dim, self.n_conditions = latent_dim, data_dim, n_conditions
        self.hidden, self.squash = tuple(hidden), squash
        sizes = (latent_dim, *self.hidden, data_dim)
        shapes = _dense_shapes(sizes)
        for k, width in enumerate(self.hidden):
            shapes[f"mod{k}.scale"] = (n_conditions, width)
            shapes[f"mod{k}.shift"] = (n_conditions, width)
        self.params = ParameterSet(shapes, prefix=self.name)
        _fill_dense(self.params, sizes, rng)
        for k in range(len(self.hidden)):
            self.params[f"mod{k}.scale"].data[...] = 1.0

    def forward(self, z, conditions) -> Tensor:
        self._check_condition(conditions, self.n_conditions)
        p = self.params
        h = ad.as_tensor(z)
        for k in range(len(self.hidden)):
            h = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
            h = ad.relu(ad.modulate(h, p[f"mod{k}.scale"], p[f"mod{k}.shift"], conditions))
        last = len(self.hidden)
        out = ad.affine(h, p[f"l{last}.W"], p[f"l{last}.b"])
        return ad.sigmoid(out) if self.squash else out


def generate(
    generator: Generator, condition, z, provenance: str = "current_model", pair_key: int | None = None
) -> SampleBatch:
    """Deterministic map from (parameters, condition, latent batch) to samples."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if z.ndim != 2 or z.shape[1] != generator.latent_dim:
        raise ContractViolation(f"latent batch must have shape (n, {generator.latent_dim})")
    return SampleBatch(generator.forward(z, condition), condition, provenance, pair_key)


@dataclass
class CriticOutput:
    score: Tensor
    class_logits: Tensor
    tap: FeatureBatch


class Critic(Network):
    """Wasserstein critic with an auxiliary class head and a tapped hidden layer.

    The tap is the post-activation output of hidden layer ``tap_layer``.
    """

    name = "critic"

    def __init__(
        self,
        data_dim: int,
        n_conditions: int,
        hidden: Sequence[int] = (64, 64),
        tap_layer: int = 0,
        slope: float = 0.2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if not 0 <= tap_layer < len(hidden):
            raise ContractViolation("tap_layer must index a hidden layer")
        self.data_dim, self.n_conditions = data_dim, n_conditions
        self.hidden, self.tap_layer, self.slope = tuple(hidden), tap_layer, slope
        trunk = (data_dim, *self.hidden)
        shapes = _dense_shapes(trunk)
        shapes["score.W"] = (self.hidden[-1], 1)
        shapes["score.b"] = (1,)
        shapes["aux.W"] = (self.hidden[-1], n_conditions)
        shapes["aux.b"] = (n_conditions,)
        self.params = ParameterSet(shapes, prefix=self.name)
        _fill_dense(self.params, trunk, rng)
        for head, width in (("score", 1), ("aux", n_conditions)):
            w, b = _init_dense(rng, self.hidden[-1], width)
            self.params[f"{head}.W"].data[...] = w
            self.params[f"{head}.b"].data[...] = b

    @property
    def tap_width(self) -> int:
        return self.hidden[self.tap_layer]

    def trunk(self, x, stop_at: int | None = None) -> list[Tensor]:
        """Hidden activations, optionally truncated after layer ``stop_at``."""
        p = self.params
        h = ad.as_tensor(x)
        acts = []
        last = len(self.hidden) - 1 if stop_at is None else stop_at
        for k in range(last + 1):
            h = ad.leaky_relu(ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"]), self.slope)
            acts.append(h)
        return acts

    def score(self, x) -> Tensor:
        p = self.params
        return ad.affine(self.trunk(x)[-1], p["score.W"], p["score.b"])

    def forward(self, batch: SampleBatch) -> CriticOutput:
        p = self.params
        acts = self.trunk(batch.x)
        score = ad.affine(acts[-1], p["score.W"], p["score.b"])
        logits = ad.affine(acts[-1], p["aux.W"], p["aux.b"])
        tap = FeatureBatch(acts[self.tap_layer], "distilled", batch.conditions, batch.pair_key)
        return CriticOutput(score, logits, tap)

    def tap(self, batch: SampleBatch) -> FeatureBatch:
        acts = self.trunk(batch.x, stop_at=self.tap_layer)
        return FeatureBatch(acts[-1], "distilled", batch.conditions, batch.pair_key)

    def input_gradient(self, x: np.ndarray) -> Tensor:
        """d score / d x per row, built as a forward graph in the critic parameters.

        The leaky-rectifier derivative is piecewise constant, so treating the
        activation masks as constants gives the exact input gradient, and the
        gradient of any function of it w.r.t. the parameters follows by ordinary
        first-order backpropagation.
        """
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        masks = []
        with ad.no_grad():
            h = ad.Tensor(x)
            for k in range(len(self.hidden)):
                pre = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
                masks.append(np.where(pre.data > 0, 1.0, self.slope))
                h = ad.leaky_relu(pre, self.slope)
        g = ad.mul(masks[-1], ad.transpose(p["score.W"]))
        for k in range(len(self.hidden) - 1, 0, -1):
            g = ad.mul(ad.matmul(g, ad.transpose(p[f"l{k}.W"])), masks[k - 1])
        return ad.matmul(g, ad.transpose(p["l0.W"]))


def criticize(critic: Critic, batch: SampleBatch) -> CriticOutput:
    return critic.forward(batch)


class Encoder(Network):
    """Data -> feature vector, with an optional auxiliary class head on the features."""

    name = "encoder"

    def __init__(
        self,
        data_dim: int,
        feature_dim: int = 16,
        hidden: Sequence[int] = (64, 64),
        n_conditions: int = 0,
        slope: float = 0.2,
        source: str = "learned_encoder",
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if source not in ("learned_encoder", "prior"):
            raise ContractViolation("an encoder is either learned_encoder or prior")
        self.data_dim, self.feature_dim, self.hidden = data_dim, feature_dim, tuple(hidden)
        self.n_conditions, self.slope, self.source = n_conditions, slope, source
        sizes = (data_dim, *self.hidden, feature_dim)
        shapes = _dense_shapes(sizes)
        if n_conditions:
            shapes["aux.W"] = (feature_dim, n_conditions)
            shapes["aux.b"] = (n_conditions,)
        self.params = ParameterSet(shapes, prefix=f"{self.name}.{source}")
        _fill_dense(self.params, sizes, rng)
        if n_conditions:
            w, b = _init_dense(rng, feature_dim, n_conditions)
            self.params["aux.W"].data[...] = w
            self.params["aux.b"].data[...] = b
        self.fitted = source == "learned_encoder"

    def features(self, x) -> Tensor:
        p = self.params
        h = ad.as_tensor(x)
        n_layers = len(self.hidden) + 1
        for k in range(n_layers):
            h = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
            if k < n_layers - 1:
                h = ad.leaky_relu(h, self.slope)
        return h

    def class_logits(self, h: Tensor) -> Tensor:
        if not self.n_conditions:
            raise ContractViolation("encoder was built without an auxiliary head")
        return ad.affine(h, self.params["aux.W"], self.params["aux.b"])


def encode(encoder: Encoder, batch: SampleBatch) -> FeatureBatch:
    return FeatureBatch(encoder.features(batch.x), encoder.source, batch.conditions, batch.pair_key)


class FeatureCritic(Network):
    """Scores a concatenated feature pair [h_left, h_right]."""

    name = "feature_critic"

    def __init__(
        self, feature_dim: int = 16, hidden: Sequence[int] = (64,), slope: float = 0.2, rng: np.random.Generator | None = None
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim, self.hidden, self.slope = feature_dim, tuple(hidden), slope
        sizes = (2 * feature_dim, *self.hidden, 1)
        self.params = ParameterSet(_dense_shapes(sizes), prefix=self.name)
        _fill_dense(self.params, sizes, rng)

    @property
    def input_width(self) -> int:
        return 2 * self.feature_dim

    def score(self, pair) -> Tensor:
        p = self.params
        h = ad.as_tensor(pair)
        if h.shape[1] != self.input_width:
            raise ContractViolation(f"feature critic expects width {self.input_width}, got {h.shape[1]}")
        n_layers = len(self.hidden) + 1
        for k in range(n_layers):
            h = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
            if k < n_layers - 1:
                h = ad.leaky_relu(h, self.slope)
        return h

    def input_gradient(self, pair: np.ndarray) -> Tensor:
        p = self.params
        pair = np.asarray(pair, dtype=np.float64)
        masks = []
        with ad.no_grad():
            h = ad.Tensor(pair)
            for k in range(len(self.hidden)):
                pre = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
                masks.append(np.where(pre.data > 0, 1.0, self.slope))
                h = ad.leaky_relu(pre, self.slope)
        last = len(self.hidden)
        g = ad.mul(masks[-1], ad.transpose(p[f"l{last}.W"]))
        for k in range(len(self.hidden) - 1, 0, -1):
            g = ad.mul(ad.matmul(g, ad.transpose(p[f"l{k}.W"])), masks[k - 1])
        return ad.matmul(g, ad.transpose(p["l0.W"]))


class Classifier(Network):
    """Reference classifier used only on the evaluation side."""

    name = "classifier"

    def __init__(
        self, data_dim: int, n_classes: int, hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.data_dim, self.n_classes, self.hidden = data_dim, n_classes, tuple(hidden)
        sizes = (data_dim, *self.hidden, n_classes)
        self.params = ParameterSet(_dense_shapes(sizes), prefix=self.name)
        _fill_dense(self.params, sizes, rng)
        self.trained = False
        self.heldout_accuracy: float | None = None

    def logits(self, x) -> Tensor:
        p = self.params
        h = ad.as_tensor(x)
        n_layers = len(self.hidden) + 1
        for k in range(n_layers):
            h = ad.affine(h, p[f"l{k}.W"], p[f"l{k}.b"])
            if k < n_layers - 1:
                h = ad.relu(h)
        return h


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lower index (numpy's first-occurrence rule)."""
    return np.argmax(np.asarray(logits), axis=1)


def classify(classifier: Classifier, batch: SampleBatch | np.ndarray) -> np.ndarray:
    if not classifier.trained:
        raise ContractViolation("classifier has not been trained")
    x = batch.x if isinstance(batch, SampleBatch) else batch
    with ad.no_grad():
        return argmax_lowest(classifier.logits(x).data)


# ---------------------------------------------------------------- checkpoints


@dataclass
class ModelState:
    generator: Generator
    critic: Critic
    encoder: Encoder | None = None
    feature_critic: FeatureCritic | None = None
    prior_encoder: Encoder | None = None
    classifier: Classifier | None = None

    def parameter_sets(self) -> dict[str, ParameterSet]:
        out = {}
        for slot in ("generator", "critic", "encoder", "feature_critic", "prior_encoder", "classifier"):
            net = getattr(self, slot)
            if net is not None:
                out[slot] = net.params
        return out


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config_hash: str
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, state: ModelState, config_hash: str, meta: dict | None = None) -> None:
    """Write every parameter (id -> array) plus the config hash to an .npz file."""
    arrays = {}
    for slot, params in state.parameter_sets().items():
        for p in params:
            arrays[f"{slot}/{p.id}"] = p.data
    header = json.dumps({"config_hash": config_hash, "meta": meta or {}}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(header.encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    return Checkpoint(arrays, header["config_hash"], header["meta"])


def restore_params(net: Network, checkpoint: Checkpoint, slot: str) -> None:
    for p in net.params:
        key = f"{slot}/{p.id}"
        if key not in checkpoint.arrays:
            raise ContractViolation(f"checkpoint lacks {key}")
        value = checkpoint.arrays[key]
        if value.shape != p.data.shape:
            raise ContractViolation(f"shape mismatch for {key}: {value.shape} vs {p.data.shape}")
        p.data[...] = value
