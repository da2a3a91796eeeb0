"""Task-incremental training engine with generative replay.

Tasks arrive one at a time. Before task ``t > 1`` a frozen snapshot of the
model is captured; previous-task data only ever comes from that snapshot.
Replay modes:

* ``none``: train on the current task alone.
* ``replay_data``: snapshot samples are mixed into the real stream, (t-1):1.
* ``align_image`` / ``align_feature`` / ``align_combined``: the generator is
  pulled towards the snapshot on replayed conditions, in data space, feature
  space, or an alpha blend of both.
* ``joint``: train on all tasks seen so far, no snapshot (upper bound).
"""

from __future__ import annotations

import time
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState
from .config import EvalConfig, ExperimentConfig, ModelConfig, ReplayConfig, config_hash
from .errors import ConfigError, ContractViolation, NumericFailure
from .metrics import (
    ForgetfulnessLedger,
    accuracy_per_condition,
    forgetfulness_report,
    frechet_gaussian,
    generator_sampler,
    train_reference_classifier,
)
from .nets import Classifier, Critic, Encoder, FeatureBatch, FeatureCritic, Generator, ModelState, SampleBatch
from .objectives import (
    LossBreakdown,
    aux_class_loss,
    compose_alpha_focl,
    feature_adversarial_loss,
    feature_l2,
    gradient_penalty,
    image_l2,
    wasserstein_gap,
    weight_clip,
)
from .tasks import Task, TaskStream, make_stream, named_rng, sample_real


def lambda_schedule(t: int, lambda_base: float) -> float:
    """Replay weight for task ``t``: ``lambda_base / (t - 1)``."""
    if t < 2:
        raise ContractViolation("the replay weight is defined from the second task on")
    return lambda_base / (t - 1)


@dataclass(frozen=True)
class ReplaySnapshot:
    generator: Generator
    task_index: int
    critic: Critic | None = None
    encoder: Encoder | None = None


@dataclass
class ReplayBatch:
    conditions: np.ndarray
    z: np.ndarray
    x_snapshot: SampleBatch
    x_current: SampleBatch | None = None


@dataclass
class EngineState:
    config: ReplayConfig
    model_config: ModelConfig
    eval_config: EvalConfig
    stream: TaskStream
    model: ModelState
    optimizers: dict[str, AdamState]
    rngs: dict[str, np.random.Generator]
    ledger: ForgetfulnessLedger
    seed: int
    t: int = 1
    snapshot: ReplaySnapshot | None = None
    real_draws: Counter = field(default_factory=Counter)
    loss_log: list[dict] = field(default_factory=list)
    accuracy: dict[int, dict[int, float]] = field(default_factory=dict)
    step: int = 0
    _pair_counter: int = 0

    def next_pair_key(self) -> int:
        self._pair_counter += 1
        return self._pair_counter


# ---------------------------------------------------------------- construction


def fit_prior_encoder(stream: TaskStream, model_config: ModelConfig, seed: int) -> Encoder:
    """Autoencoder-fit an encoder on a disjoint stream drawn from a different seed, then freeze it."""
    disjoint = make_stream(stream.name, stream.T, seed=stream.seed + 1_000_003, **stream.params)
    rng = named_rng(seed, "prior")
    data = np.concatenate([t.draw(500, named_rng(disjoint.seed, "prior-data", t.condition)) for t in disjoint.tasks])
    enc = Encoder(stream.data_dim, model_config.feature_dim, model_config.encoder_hidden, source="prior", rng=rng)
    decoder = ad.ParameterSet({"W": (model_config.feature_dim, stream.data_dim), "b": (stream.data_dim,)}, "prior_decoder")
    bound = 1.0 / np.sqrt(model_config.feature_dim)
    decoder["W"].data[...] = rng.uniform(-bound, bound, decoder["W"].shape)
    enc_opt = AdamState.for_params(enc.params, lr=1e-3, beta1=0.9)
    dec_opt = AdamState.for_params(decoder, lr=1e-3, beta1=0.9)
    for _ in range(model_config.prior_fit_steps):
        batch = data[rng.integers(0, data.shape[0], 128)]
        enc.params.zero_grad()
        decoder.zero_grad()
        recon = ad.affine(enc.features(batch), decoder["W"], decoder["b"])
        ad.backward(ad.mean(ad.tsum(ad.square(ad.sub(recon, batch)), axis=1)))
        ad.adam_step(enc.params, enc_opt)
        ad.adam_step(decoder, dec_opt)
    enc.params.freeze()
    enc.fitted = True
    return enc


def init_engine(config: ExperimentConfig, stream: TaskStream | None = None, classifier: Classifier | None = None) -> EngineState:
    rc, mc, ec = config.replay, config.model, config.evaluation
    if stream is None:
        s = config.stream
        stream = make_stream(s.name, s.T, seed=s.seed, **s.params())
    seed = config.seed
    init = named_rng(seed, "init")
    T = stream.T
    generator = Generator(mc.latent_dim, stream.data_dim, T, mc.generator_hidden, squash=stream.squash, rng=init)
    critic = Critic(stream.data_dim, T, mc.critic_hidden, tap_layer=mc.tap_layer, rng=init)
    model = ModelState(generator, critic, classifier=classifier)
    adam = dict(lr=mc.lr, beta1=mc.beta1, beta2=mc.beta2)
    optimizers = {"generator": AdamState.for_params(generator.params, **adam), "critic": AdamState.for_params(critic.params, **adam)}
    if rc.uses_feature_term and rc.feature_source == "learned_encoder":
        n_aux = T if rc.encoder_ac_weight > 0 else 0
        model.encoder = Encoder(stream.data_dim, mc.feature_dim, mc.encoder_hidden, n_conditions=n_aux, rng=init)
        model.feature_critic = FeatureCritic(mc.feature_dim, mc.feature_critic_hidden, rng=init)
        optimizers["encoder"] = AdamState.for_params(model.encoder.params, **adam)
        optimizers["feature_critic"] = AdamState.for_params(model.feature_critic.params, **adam)
    if rc.uses_feature_term and rc.feature_source == "prior":
        model.prior_encoder = fit_prior_encoder(stream, mc, seed)
    rngs = {name: named_rng(seed, name) for name in ("data", "latent", "replay", "lipschitz")}
    return EngineState(rc, mc, ec, stream, model, optimizers, rngs, ForgetfulnessLedger(ec.distance), seed)


# ---------------------------------------------------------------- replay


def take_snapshot(state: EngineState) -> ReplaySnapshot:
    """Frozen copy of the networks the replay side needs, tagged with the last finished task."""
    rc = state.config
    critic = None
    encoder = None
    if rc.uses_feature_term and rc.feature_source == "distilled":
        critic = state.model.critic.copy(frozen=True)
    if rc.uses_feature_term and rc.feature_source == "learned_encoder":
        encoder = state.model.encoder.copy(frozen=True)
    return ReplaySnapshot(state.model.generator.copy(frozen=True), state.t - 1, critic, encoder)


def _snapshot_samples(state: EngineState, conditions, z: np.ndarray, pair_key: int | None) -> SampleBatch:
    with ad.no_grad():
        x = state.snapshot.generator.forward(z, conditions)
    return SampleBatch(x, conditions, "snapshot", pair_key)


def build_replay_batch(state: EngineState, n: int, with_current: bool = True, track_current: bool = True) -> ReplayBatch:
    """Draw replayed previous-task samples from the snapshot.

    Each row gets its own condition, uniform over the previous tasks. In
    paired mode the live generator reuses the same latent draw, so rows
    correspond one-to-one. ``with_current=False`` (replay-as-data) skips the
    live-model side entirely.
    """
    if state.t < 2 or state.snapshot is None:
        raise ContractViolation("replay needs a previous task and a captured snapshot")
    rng = state.rngs["replay"]
    previous = state.t - 1
    conditions = rng.integers(0, previous, n)
    z = rng.standard_normal((n, state.model_config.latent_dim))
    key = state.next_pair_key()
    x_hat = _snapshot_samples(state, conditions, z, key)
    if not with_current:
        return ReplayBatch(conditions, z, x_hat)
    if state.config.pairing == "paired":
        z_cur, cur_key = z, key
    else:
        z_cur, cur_key = rng.standard_normal(z.shape), state.next_pair_key()
    gen = state.model.generator
    if track_current:
        x_cur = gen.forward(z_cur, conditions)
    else:
        with ad.no_grad():
            x_cur = gen.forward(z_cur, conditions)
    return ReplayBatch(conditions, z, x_hat, SampleBatch(x_cur, conditions, "current_model", cur_key))


def feature_pairs(state: EngineState, batch: ReplayBatch, snapshot_grad: bool = False):
    """Features of the live-model and snapshot replay samples under the configured source.

    Returns ``(h_current, h_snapshot, h_snapshot_b)``; the third is an
    independent snapshot draw, present only for the learned (adversarial)
    encoder.
    """
    rc = state.config
    model = state.model
    source = rc.feature_source
    if source == "distilled":
        h_cur = model.critic.tap(batch.x_current)
        with ad.no_grad():
            h_hat = state.snapshot.critic.tap(batch.x_snapshot)
        return h_cur, h_hat, None
    if source == "prior":
        enc = model.prior_encoder
        if enc is None or not enc.fitted:
            raise ConfigError("prior feature source needs a fitted prior encoder")
        h_cur = FeatureBatch(enc.features(batch.x_current.x), "prior", batch.conditions, batch.x_current.pair_key)
        with ad.no_grad():
            h_hat = FeatureBatch(enc.features(batch.x_snapshot.x), "prior", batch.conditions, batch.x_snapshot.pair_key)
        return h_cur, h_hat, None
    enc = model.encoder
    z_b = state.rngs["replay"].standard_normal(batch.z.shape)
    x_b = _snapshot_samples(state, batch.conditions, z_b, None)
    h_cur = FeatureBatch(enc.features(batch.x_current.x), source, batch.conditions, batch.x_current.pair_key)
    if snapshot_grad:
        h_hat = FeatureBatch(enc.features(batch.x_snapshot.x), source, batch.conditions, batch.x_snapshot.pair_key)
        h_b = FeatureBatch(enc.features(x_b.x), source, batch.conditions)
    else:
        with ad.no_grad():
            h_hat = FeatureBatch(enc.features(batch.x_snapshot.x), source, batch.conditions, batch.x_snapshot.pair_key)
            h_b = FeatureBatch(enc.features(x_b.x), source, batch.conditions)
    return h_cur, h_hat, h_b


# ---------------------------------------------------------------- training steps


def _draw_real(state: EngineState, task: Task, n: int) -> SampleBatch:
    state.real_draws[(state.t, task.condition)] += 1
    return sample_real(task, n, state.rngs["data"])


def _training_rows(state: EngineState, task: Task, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows the critic treats as real, with their conditions."""
    rc, t = state.config, state.t
    if rc.mode == "joint":
        counts = state.rngs["data"].multinomial(n, np.full(t, 1.0 / t))
        parts = [_draw_real(state, state.stream.tasks[c], int(k)) for c, k in enumerate(counts) if k > 0]
        return np.concatenate([p.x.data for p in parts]), np.concatenate([p.conditions for p in parts])
    if rc.mode == "replay_data" and t > 1:
        n_new = max(1, int(round(n / t)))
        real = _draw_real(state, task, n_new)
        replay = build_replay_batch(state, n - n_new, with_current=False)
        return (
            np.concatenate([real.x.data, replay.x_snapshot.x.data]),
            np.concatenate([real.conditions, replay.conditions]),
        )
    real = _draw_real(state, task, n)
    return real.x.data, np.asarray(real.conditions)


def _fake_conditions(state: EngineState, task: Task, n: int) -> np.ndarray:
    rc, t = state.config, state.t
    rng = state.rngs["latent"]
    if rc.mode == "joint":
        return rng.integers(0, t, n)
    if rc.mode == "replay_data" and t > 1:
        n_new = max(1, int(round(n / t)))
        return np.concatenate([np.full(n_new, task.condition), rng.integers(0, t - 1, n - n_new)])
    return np.full(n, task.condition)


def _backward_or_fail(state: EngineState, loss, breakdown=None) -> None:
    try:
        ad.backward(loss)
    except NumericFailure as exc:
        raise NumericFailure(
            f"numeric failure at step {state.step} (task {state.t}): {exc}", node=exc.node, step=state.step, breakdown=breakdown
        ) from exc


def critic_step(state: EngineState, task: Task) -> float:
    rc = state.config
    gen, critic = state.model.generator, state.model.critic
    n = rc.batch_size
    real_x, real_c = _training_rows(state, task, n)
    z = state.rngs["latent"].standard_normal((n, state.model_config.latent_dim))
    with ad.no_grad():
        fake_x = gen.forward(z, real_c).data
    acts = critic.trunk(np.concatenate([real_x, fake_x]))
    hidden = acts[-1]
    score = ad.affine(hidden, critic.params["score.W"], critic.params["score.b"])
    w_loss = wasserstein_gap(score[:n], score[n:])
    loss = w_loss
    if rc.ac_weight > 0:
        logits = ad.affine(hidden[:n], critic.params["aux.W"], critic.params["aux.b"])
        loss = ad.add(loss, ad.mul(aux_class_loss(logits, real_c), rc.ac_weight))
    if rc.lipschitz == "gradient_penalty":
        gp = gradient_penalty(critic, real_x, fake_x, state.rngs["lipschitz"])
        loss = ad.add(loss, ad.mul(gp, rc.gp_weight))
    critic.params.zero_grad()
    _backward_or_fail(state, loss)
    ad.adam_step(critic.params, state.optimizers["critic"])
    if rc.lipschitz == "weight_clip":
        weight_clip(critic.params, rc.clip_value)
    return float(w_loss.data)


def feature_critic_step(state: EngineState) -> float:
    """Update the pair critic, and the learned encoder alongside it."""
    rc = state.config
    enc, fc = state.model.encoder, state.model.feature_critic
    batch = build_replay_batch(state, rc.batch_size, track_current=False)
    h_cur, h_hat, h_b = feature_pairs(state, batch, snapshot_grad=True)
    critic_loss, _ = feature_adversarial_loss(fc, h_cur, h_hat, h_b)
    loss = critic_loss
    if rc.lipschitz == "gradient_penalty":
        with ad.no_grad():
            fake_pair = np.concatenate([h_cur.h.data, h_hat.h.data], axis=1)
            real_pair = np.concatenate([h_b.h.data, h_hat.h.data], axis=1)
        loss = ad.add(loss, ad.mul(gradient_penalty(fc, real_pair, fake_pair, state.rngs["lipschitz"]), rc.gp_weight))
    fc.params.zero_grad()
    enc.params.zero_grad()
    _backward_or_fail(state, loss)
    if rc.encoder_role == "fool_critic":
        enc.params.grads *= -1.0
    if rc.encoder_ac_weight > 0:
        logits = enc.class_logits(enc.features(batch.x_snapshot.x))
        _backward_or_fail(state, ad.mul(aux_class_loss(logits, batch.conditions), rc.encoder_ac_weight))
    ad.adam_step(fc.params, state.optimizers["feature_critic"])
    ad.adam_step(enc.params, state.optimizers["encoder"])
    if rc.lipschitz == "weight_clip":
        weight_clip(fc.params, rc.clip_value)
    if rc.encoder_role == "aid_critic":
        # an encoder helping the critic could otherwise inflate the gap by rescaling features
        weight_clip(enc.params, rc.clip_value)
    return float(critic_loss.data)


def replay_terms(state: EngineState):
    """Feature and image alignment terms for one replay batch; a term with zero blend weight is skipped."""
    rc = state.config
    feature_term = image_term = None
    if not (rc.uses_feature_term or rc.uses_image_term) or state.t < 2:
        return None, None
    batch = build_replay_batch(state, rc.batch_size)
    if rc.uses_image_term:
        image_term = image_l2(batch.x_current, batch.x_snapshot)
    if rc.uses_feature_term:
        h_cur, h_hat, h_b = feature_pairs(state, batch)
        if rc.feature_source == "learned_encoder":
            _, feature_term = feature_adversarial_loss(state.model.feature_critic, h_cur, h_hat, h_b)
        else:
            feature_term = feature_l2(h_cur, h_hat)
    return feature_term, image_term


def generator_step(state: EngineState, task: Task) -> LossBreakdown:
    rc = state.config
    gen, critic = state.model.generator, state.model.critic
    n = rc.batch_size
    conditions = _fake_conditions(state, task, n)
    z = state.rngs["latent"].standard_normal((n, state.model_config.latent_dim))
    fake = gen.forward(z, conditions)
    hidden = critic.trunk(fake)[-1]
    score = ad.affine(hidden, critic.params["score.W"], critic.params["score.b"])
    current = ad.neg(ad.mean(score))
    aux = None
    if rc.ac_weight > 0:
        aux = aux_class_loss(ad.affine(hidden, critic.params["aux.W"], critic.params["aux.b"]), conditions)
    feature_term, image_term = replay_terms(state)
    lam = lambda_schedule(state.t, rc.lambda_base) if (feature_term is not None or image_term is not None) else None
    total, breakdown = compose_alpha_focl(
        current, lam, rc.blend_alpha, feature_term, image_term, aux_class_term=aux, ac_weight=rc.ac_weight
    )
    gen.params.zero_grad()
    _backward_or_fail(state, total, breakdown)
    ad.adam_step(gen.params, state.optimizers["generator"])
    return breakdown


# ---------------------------------------------------------------- evaluation


def evaluate_after_task(state: EngineState, t: int) -> None:
    """Record d_t^(i) for every seen task i <= t, plus per-condition accuracy."""
    ec = state.eval_config
    n = ec.samples_per_condition
    rng = named_rng(state.seed, "eval", t)
    sampler = generator_sampler(state.model.generator, rng)
    samples = {c: sampler(c, n) for c in range(t)}
    classifier = state.model.classifier
    acc = None
    if classifier is not None:
        acc = accuracy_per_condition(classifier, lambda c, k: samples[c][:k], range(t), n)
        state.accuracy[t] = acc
    for i in range(1, t + 1):
        if ec.distance == "frechet":
            d = frechet_gaussian(samples[i - 1], state.stream.heldout(i - 1, n))
        else:
            if acc is None:
                raise ContractViolation("accuracy_drop distances need a reference classifier")
            d = 1.0 - acc[i - 1]
        state.ledger.record(t, i, d)


# ---------------------------------------------------------------- task loop


def train_task(state: EngineState, task: Task) -> EngineState:
    """Train one task in place and advance ``state.t``."""
    rc = state.config
    t = state.t
    if task.condition != t - 1:
        raise ContractViolation(f"expected task {t} (condition {t - 1}), got condition {task.condition}")
    if t > 1 and rc.uses_snapshot:
        state.snapshot = take_snapshot(state)
    learned = rc.uses_feature_term and rc.feature_source == "learned_encoder" and t > 1
    log_every = state.eval_config.log_every
    for k in range(rc.steps_per_task):
        state.step = k
        for _ in range(rc.critic_steps):
            critic_loss = critic_step(state, task)
        feature_critic_loss = None
        if learned:
            for _ in range(rc.feature_critic_steps):
                feature_critic_loss = feature_critic_step(state)
        breakdown = generator_step(state, task)
        if k % log_every == 0 or k == rc.steps_per_task - 1:
            row = {"task": t, "step": k, **breakdown.as_dict(), "critic_loss": critic_loss}
            row["feature_critic_loss"] = feature_critic_loss
            state.loss_log.append(row)
    evaluate_after_task(state, t)
    state.t += 1
    return state


@dataclass
class RunReport:
    config_hash: str
    config: dict
    seed: int
    tasks: list[dict]
    ledger: dict
    forgetfulness: dict | None
    accuracy: dict
    warnings: list[str]
    timings: dict

    def to_json(self, include_timings: bool = True) -> dict:
        out = {
            "config_hash": self.config_hash,
            "config": self.config,
            "seed": self.seed,
            "tasks": self.tasks,
            "ledger": self.ledger,
            "forgetfulness": self.forgetfulness,
            "accuracy": self.accuracy,
            "warnings": self.warnings,
        }
        if include_timings:
            out["timings"] = self.timings
        return out


def _loss_summary(rows: list[dict]) -> dict:
    keys = ("current_task", "feature_term", "image_term", "aux_class_term", "total", "critic_loss")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys} if rows else {}


def _average_accuracy(acc: dict[int, float]) -> float:
    return float(np.mean(list(acc.values())))


def run_stream(
    config: ExperimentConfig,
    stream: TaskStream | None = None,
    seed: int | None = None,
    on_task_end: Callable[[EngineState, int], None] | None = None,
    classifier: Classifier | None = None,
) -> tuple[EngineState, ForgetfulnessLedger, RunReport]:
    """Train every task of the stream in order and assemble the run report."""
    if seed is not None:
        config = config.with_seed(seed)
    s = config.stream
    stream = stream if stream is not None else make_stream(s.name, s.T, seed=s.seed, **s.params())
    timings: dict[str, float] = {}
    start = time.perf_counter()
    if classifier is None:
        classifier = train_reference_classifier(
            stream, config.seed, steps=config.evaluation.classifier_steps, hidden=config.model.classifier_hidden
        )
    timings["classifier"] = time.perf_counter() - start
    state = init_engine(config, stream, classifier)
    warnings: list[str] = []
    if classifier.heldout_accuracy is not None and classifier.heldout_accuracy < 0.9:
        warnings.append(f"reference classifier held-out accuracy {classifier.heldout_accuracy:.3f} < 0.9; accuracy metric unreliable")
    tasks = []
    for task in stream.tasks:
        t0 = time.perf_counter()
        t = state.t
        train_task(state, task)
        timings[f"task_{t}"] = time.perf_counter() - t0
        rows = [r for r in state.loss_log if r["task"] == t]
        acc = state.accuracy.get(t, {})
        tasks.append(
            {
                "t": t,
                "loss_summary": _loss_summary(rows),
                "accuracy": {str(c): v for c, v in acc.items()},
                "average_accuracy": _average_accuracy(acc) if acc else None,
                "real_draws": {str(c): k for (tt, c), k in sorted(state.real_draws.items()) if tt == t},
            }
        )
        if on_task_end is not None:
            on_task_end(state, t)
    fr = forgetfulness_report(state.ledger)
    if fr is not None:
        warnings.extend(fr.warnings)
    T = stream.T
    half = max(1, T // 2)
    accuracy = {
        "A_half_t": half,
        "A_half": _average_accuracy(state.accuracy[half]),
        "A_T": _average_accuracy(state.accuracy[T]),
        "classifier_heldout": classifier.heldout_accuracy,
    }
    timings["total"] = time.perf_counter() - start
    report = RunReport(
        config_hash=config_hash(config),
        config=config.to_json() | {"out_dir": None, "sweep": None},
        seed=config.seed,
        tasks=tasks,
        ledger=state.ledger.to_json(),
        forgetfulness=None if fr is None else fr.to_json(),
        accuracy=accuracy,
        warnings=warnings,
        timings=timings,
    )
    return state, state.ledger, report
