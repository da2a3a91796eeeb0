"""Distances between generated and real data, and the forgetfulness ledger.

Ledger indices are 1-based task numbers: ``d[t, i]`` is the distance for task
``i`` measured right after training task ``t``.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericFailure
from .nets import Classifier, FeatureBatch, Generator, SampleBatch, classify
from .objectives import aux_class_loss
from .tasks import TaskStream, named_rng

COV_JITTER = 1e-6
DISTANCE_KINDS = ("frechet", "accuracy_drop")


def _as_rows(batch) -> np.ndarray:
    if isinstance(batch, SampleBatch):
        return batch.x.data
    if isinstance(batch, FeatureBatch):
        return batch.h.data
    rows = np.asarray(batch, dtype=np.float64)
    return rows.reshape(-1, 1) if rows.ndim == 1 else rows


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _stabilize(cov: np.ndarray) -> np.ndarray:
    # only near-singular fits get the jitter, so well-conditioned closed forms stay exact
    if np.linalg.eigvalsh(cov)[0] < COV_JITTER:
        return cov + COV_JITTER * np.eye(cov.shape[0])
    return cov


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S_a^(1/2) S_b S_a^(1/2)``, which share their spectrum
    with ``S_a S_b``; negative eigenvalues are clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    if not (np.isfinite(mu_a).all() and np.isfinite(mu_b).all() and np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise NumericFailure("non-finite moments in Frechet distance")
    if np.array_equal(mu_a, mu_b) and np.array_equal(cov_a, cov_b):
        return 0.0  # the eigen route would leave rounding residue here
    cov_a, cov_b = _stabilize(cov_a), _stabilize(cov_b)
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    trace_root = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(middle), 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * trace_root
    return max(value, 0.0)


def frechet_gaussian(a, b) -> float:
    """Frechet distance between Gaussian fits of two sample (or feature) batches."""
    xa, xb = _as_rows(a), _as_rows(b)
    if xa.shape[1] != xb.shape[1]:
        raise ContractViolation("batches differ in dimensionality")
    dim = xa.shape[1]
    if xa.shape[0] < dim + 1 or xb.shape[0] < dim + 1:
        raise ContractViolation(f"need at least {dim + 1} rows to fit a covariance")
    cov_a = np.atleast_2d(np.cov(xa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(xb, rowvar=False))
    return frechet_from_moments(xa.mean(axis=0), cov_a, xb.mean(axis=0), cov_b)


def wasserstein1_1d(a, b) -> float:
    """Exact W1 between two equal-size 1-D empirical samples via the sorted coupling."""
    a, b = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    if a.shape != b.shape:
        raise ContractViolation("sorted coupling needs equal sample counts")
    return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------- classifier side

Sampler = Callable[[int, int], np.ndarray]


def generator_sampler(generator: Generator, rng: np.random.Generator) -> Sampler:
    def sample(condition: int, n: int) -> np.ndarray:
        z = rng.standard_normal((n, generator.latent_dim))
        with ad.no_grad():
            return generator.forward(z, condition).data

    return sample


def accuracy_per_condition(classifier: Classifier, sampler: Sampler, conditions: Sequence[int], n: int) -> dict[int, float]:
    if n <= 0:
        raise ContractViolation("need at least one sample per condition")
    if not classifier.trained:
        raise ContractViolation("classifier has not been trained")
    out = {}
    for c in conditions:
        predicted = classify(classifier, sampler(int(c), n))
        out[int(c)] = float(np.mean(predicted == c))
    return out


def accuracy_proxy(classifier: Classifier, generator, conditions: Sequence[int], n: int, rng=None) -> float:
    """Fraction of generated samples classified as their condition, averaged over conditions.

    ``generator`` is a :class:`Generator` (sampled with ``rng``) or any
    callable ``(condition, n) -> rows``.
    """
    sampler = generator if callable(generator) and not isinstance(generator, Generator) else None
    if sampler is None:
        sampler = generator_sampler(generator, rng if rng is not None else np.random.default_rng(0))
    per = accuracy_per_condition(classifier, sampler, conditions, n)
    return float(np.mean(list(per.values())))


def train_reference_classifier(
    stream: TaskStream,
    seed: int,
    steps: int = 1500,
    batch_size: int = 128,
    train_per_task: int = 1000,
    heldout_per_task: int = 500,
    hidden: Sequence[int] = (64, 64),
    lr: float = 1e-3,
) -> Classifier:
    """Jointly train a classifier on every task's training split.

    Evaluation-side only; the continual engine never sees this data. The
    held-out accuracy is stored on the returned classifier.
    """
    rng = named_rng(seed, "classifier")
    net = Classifier(stream.data_dim, stream.T, hidden, rng=rng)
    xs = np.concatenate([t.draw(train_per_task, named_rng(seed, "classifier-train", t.condition)) for t in stream.tasks])
    ys = np.repeat(np.arange(stream.T), train_per_task)
    state = ad.AdamState.for_params(net.params, lr=lr, beta1=0.9, beta2=0.999)
    for _ in range(steps):
        idx = rng.integers(0, xs.shape[0], batch_size)
        net.params.zero_grad()
        ad.backward(aux_class_loss(net.logits(xs[idx]), ys[idx]))
        ad.adam_step(net.params, state)
    net.trained = True
    correct = [classify(net, stream.heldout(c, heldout_per_task)) == c for c in range(stream.T)]
    net.heldout_accuracy = float(np.mean(np.concatenate(correct)))
    return net


# ---------------------------------------------------------------- forgetfulness


@dataclass
class ForgetfulnessLedger:
    distance_kind: str = "frechet"
    distances: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.distance_kind not in DISTANCE_KINDS:
            raise ContractViolation(f"distance kind must be one of {DISTANCE_KINDS}")

    @property
    def T_seen(self) -> int:
        return max((t for t, _ in self.distances), default=0)

    def record(self, t: int, i: int, value: float) -> None:
        if not 1 <= i <= t:
            raise ContractViolation("ledger entries need 1 <= i <= t")
        if not np.isfinite(value):
            raise NumericFailure(f"non-finite distance for (t={t}, i={i})")
        if self.distance_kind == "frechet" and value < 0:
            raise ContractViolation("Frechet distances are non-negative")
        self.distances[(t, i)] = float(value)

    def __getitem__(self, key: tuple[int, int]) -> float:
        if key not in self.distances:
            raise ContractViolation(f"ledger has no entry d_{key[0]}^({key[1]})")
        return self.distances[key]

    def is_complete(self) -> bool:
        T = self.T_seen
        return all((t, i) in self.distances for t in range(1, T + 1) for i in range(1, t + 1))

    def to_json(self) -> dict:
        return {
            "distance_kind": self.distance_kind,
            "T_seen": self.T_seen,
            "entries": [{"t": t, "i": i, "d": d} for (t, i), d in sorted(self.distances.items())],
        }

    @classmethod
    def from_json(cls, payload: dict) -> ForgetfulnessLedger:
        out = cls(payload["distance_kind"])
        for row in payload["entries"]:
            out.record(row["t"], row["i"], row["d"])
        return out


def task_fs(ledger: ForgetfulnessLedger, t: int) -> float:
    """Mean growth of the distance on tasks 1..t-1 between their own end and task t's end."""
    if t < 2:
        raise ContractViolation("task forgetfulness needs t >= 2")
    return sum(ledger[t, i] - ledger[i, i] for i in range(1, t)) / (t - 1)


def task_cfs(ledger: ForgetfulnessLedger, t: int) -> float:
    return task_fs(ledger, t) + ledger[t, t]


def _weighted(scores: dict[int, float]) -> float:
    T = max(scores)
    return 2.0 / (T * (T - 1)) * sum((t - 1) * v for t, v in scores.items())


def overall_fs(ledger: ForgetfulnessLedger) -> float | None:
    """Weights FS_t by (t - 1); None when fewer than two tasks were seen."""
    T = ledger.T_seen
    if T < 2:
        return None
    return _weighted({t: task_fs(ledger, t) for t in range(2, T + 1)})


def overall_cfs(ledger: ForgetfulnessLedger) -> float | None:
    T = ledger.T_seen
    if T < 2:
        return None
    return _weighted({t: task_cfs(ledger, t) for t in range(2, T + 1)})


def weighted_average(scores: dict[int, float]) -> float:
    """The (t - 1)-weighted average used for overall FS and CFS, from per-task scores."""
    if not scores or min(scores) < 2 or sorted(scores) != list(range(2, max(scores) + 1)):
        raise ContractViolation("scores must cover t = 2..T")
    return _weighted(scores)


def forgetting_slope(points: Sequence[tuple[float, float]]) -> float:
    """Ordinary least-squares slope of value against t."""
    if len(points) < 2:
        raise ContractViolation("a slope needs at least two points")
    t = np.array([p[0] for p in points], dtype=float)
    v = np.array([p[1] for p in points], dtype=float)
    tc = t - t.mean()
    denom = float(tc @ tc)
    if denom == 0:
        raise ContractViolation("all points share the same t")
    return float(tc @ (v - v.mean())) / denom


@dataclass
class ForgetfulnessReport:
    fs: dict[int, float]
    cfs: dict[int, float]
    overall_fs: float
    overall_cfs: float
    slope_fs: float | None
    slope_cfs: float | None
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "fs": {str(t): v for t, v in self.fs.items()},
            "cfs": {str(t): v for t, v in self.cfs.items()},
            "overall_fs": self.overall_fs,
            "overall_cfs": self.overall_cfs,
            "slope_fs": self.slope_fs,
            "slope_cfs": self.slope_cfs,
            "warnings": list(self.warnings),
        }


def forgetfulness_report(ledger: ForgetfulnessLedger) -> ForgetfulnessReport | None:
    T = ledger.T_seen
    if T < 2:
        return None
    fs = {t: task_fs(ledger, t) for t in range(2, T + 1)}
    cfs = {t: task_cfs(ledger, t) for t in range(2, T + 1)}
    slope_fs = forgetting_slope(sorted(fs.items())) if len(fs) >= 2 else None
    slope_cfs = forgetting_slope(sorted(cfs.items())) if len(cfs) >= 2 else None
    warnings = []
    own = [ledger[i, i] for i in range(1, T + 1)]
    median = float(np.median(own))
    for t in range(1, T + 1):
        if median > 0 and ledger[t, t] > 5.0 * median:
            warnings.append(f"d_{t}^({t}) = {ledger[t, t]:.4g} exceeds 5x the median own-task distance; FS may be unreliable")
    return ForgetfulnessReport(fs, cfs, _weighted(fs), _weighted(cfs), slope_fs, slope_cfs, warnings)
