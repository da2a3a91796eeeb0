"""Loss terms for adversarial training and replay alignment.

Sign convention: the critic minimizes ``mean psi(fake) - mean psi(real)`` and
the generator minimizes ``-mean psi(fake)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, ContractViolation
from .nets import FeatureBatch, SampleBatch

LIPSCHITZ_MODES = ("weight_clip", "gradient_penalty")


@dataclass
class LossBreakdown:
    current_task: float
    feature_term: float
    image_term: float
    aux_class_term: float
    lipschitz_term: float
    total: float
    lambda_t: float
    alpha: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _rows(batch) -> Tensor:
    if isinstance(batch, SampleBatch):
        return batch.x
    if isinstance(batch, FeatureBatch):
        return batch.h
    return ad.as_tensor(batch)


def wasserstein_gap(score_real: Tensor, score_fake: Tensor) -> Tensor:
    if score_real.shape[0] == 0 or score_fake.shape[0] == 0:
        raise ContractViolation("empty batch")
    return ad.sub(ad.mean(score_fake), ad.mean(score_real))


def wasserstein_critic_loss(critic, real: SampleBatch, fake: SampleBatch) -> Tensor:
    """``mean psi(fake) - mean psi(real)``, the quantity the critic minimizes."""
    if len(real) == 0 or len(fake) == 0:
        raise ContractViolation("empty batch")
    if len(real) != len(fake):
        raise ContractViolation("real and fake batches differ in size")
    return wasserstein_gap(critic.score(_rows(real)), critic.score(_rows(fake)))


def wasserstein_generator_loss(critic, fake: SampleBatch) -> Tensor:
    if len(fake) == 0:
        raise ContractViolation("empty batch")
    return ad.neg(ad.mean(critic.score(_rows(fake))))


def gradient_penalty(critic, real, fake, rng: np.random.Generator) -> Tensor:
    """``mean (||grad_x psi(x_hat)|| - 1)^2`` on random interpolates of real and fake rows.

    ``critic`` must expose ``input_gradient(x) -> Tensor``.
    """
    r = np.asarray(_rows(real).data)
    f = np.asarray(_rows(fake).data)
    if r.shape != f.shape:
        raise ContractViolation("real and fake batches differ in shape")
    u = rng.uniform(size=(r.shape[0], 1))
    x_hat = u * r + (1.0 - u) * f
    slope = ad.norm(critic.input_gradient(x_hat), axis=1)
    return ad.mean(ad.square(ad.sub(slope, 1.0)))


def weight_clip(params: ParameterSet, bound: float) -> None:
    if bound <= 0:
        raise ConfigError("clip bound must be positive")
    params.clip_(bound)


def lipschitz_enforce(critic, real, fake, mode: str, rng=None, clip_value: float = 0.05):
    """Gradient penalty value (graph) or an in-place weight clip returning 0."""
    if mode == "gradient_penalty":
        return gradient_penalty(critic, real, fake, rng if rng is not None else np.random.default_rng(0))
    if mode == "weight_clip":
        weight_clip(critic.params, clip_value)
        return ad.Tensor(0.0)
    raise ConfigError(f"lipschitz mode must be one of {LIPSCHITZ_MODES}, got {mode!r}")


def _paired(a, b) -> None:
    a_meta = isinstance(a, (SampleBatch, FeatureBatch))
    b_meta = isinstance(b, (SampleBatch, FeatureBatch))
    if a_meta and b_meta:
        if a.pair_key is None or b.pair_key is None or a.pair_key != b.pair_key:
            raise ContractViolation("alignment losses need paired batches (shared latent draw)")
        if not np.array_equal(a.conditions, b.conditions):
            raise ContractViolation("paired batches disagree on conditions")


def squared_distance(a, b) -> Tensor:
    """Mean over rows of the squared Euclidean distance between paired rows."""
    _paired(a, b)
    ta, tb = _rows(a), _rows(b)
    if ta.shape != tb.shape:
        raise ContractViolation(f"shape mismatch {ta.shape} vs {tb.shape}")
    diff = ad.sub(ta, tb)
    return ad.mean(ad.tsum(ad.square(diff), axis=1))


def feature_l2(h_current: FeatureBatch, h_snapshot: FeatureBatch) -> Tensor:
    return squared_distance(h_current, h_snapshot)


def image_l2(x_current: SampleBatch, x_snapshot: SampleBatch) -> Tensor:
    return squared_distance(x_current, x_snapshot)


def feature_adversarial_loss(feature_critic, h_current, h_snapshot_a, h_snapshot_b) -> tuple[Tensor, Tensor]:
    """Pairwise Wasserstein losses over feature pairs.

    The "fake" pair is ``[h_current, h_snapshot_a]`` and the "real" pair is
    ``[h_snapshot_b, h_snapshot_a]``. Returns ``(critic_loss, matcher_loss)``.
    """
    cur, a, b = _rows(h_current), _rows(h_snapshot_a), _rows(h_snapshot_b)
    if not (cur.shape == a.shape == b.shape):
        raise ContractViolation("feature batches differ in shape")
    fake_score = feature_critic.score(ad.concat([cur, a], axis=1))
    real_score = feature_critic.score(ad.concat([b, a], axis=1))
    return wasserstein_gap(real_score, fake_score), ad.neg(ad.mean(fake_score))


def aux_class_loss(class_logits: Tensor, conditions) -> Tensor:
    """Mean softmax cross-entropy against integer labels (scalar or per row)."""
    logits = ad.as_tensor(class_logits)
    n, k = logits.shape
    labels = np.broadcast_to(np.asarray(conditions, dtype=np.int64), (n,))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.tsum(ad.mul(logits, onehot), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), picked))


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def compose_alpha_focl(
    current_task: Tensor,
    lambda_t: float | None = None,
    alpha: float = 1.0,
    feature_term: Tensor | None = None,
    image_term: Tensor | None = None,
    aux_class_term: Tensor | None = None,
    lipschitz_term: Tensor | None = None,
    ac_weight: float = 1.0,
    lipschitz_weight: float = 1.0,
) -> tuple[Tensor, LossBreakdown]:
    """``current + lambda_t * (alpha * feature + (1 - alpha) * image) + weighted extras``.

    Absent replay terms are skipped; callers leave out a term whose blend
    weight is 0 so it never enters the graph. ``alpha=1`` is pure feature
    alignment, ``alpha=0`` pure image alignment.
    """
    check_alpha(alpha)
    has_replay = feature_term is not None or image_term is not None
    if has_replay and (lambda_t is None or lambda_t <= 0):
        raise ContractViolation("replay terms need a positive lambda_t")

    total = current_task
    if has_replay:
        blend = None
        if feature_term is not None:
            blend = ad.mul(feature_term, alpha)
        if image_term is not None:
            weighted = ad.mul(image_term, 1.0 - alpha)
            blend = weighted if blend is None else ad.add(blend, weighted)
        total = ad.add(total, ad.mul(blend, lambda_t))
    if aux_class_term is not None:
        total = ad.add(total, ad.mul(aux_class_term, ac_weight))
    if lipschitz_term is not None:
        total = ad.add(total, ad.mul(lipschitz_term, lipschitz_weight))

    def value(t):
        return 0.0 if t is None else float(t.data)

    breakdown = LossBreakdown(
        current_task=value(current_task),
        feature_term=value(feature_term),
        image_term=value(image_term),
        aux_class_term=value(aux_class_term),
        lipschitz_term=value(lipschitz_term),
        total=float(total.data),
        lambda_t=float(lambda_t) if has_replay else 0.0,
        alpha=float(alpha),
    )
    return total, breakdown
