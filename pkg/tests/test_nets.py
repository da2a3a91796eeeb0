from __future__ import annotations

import numpy as np
import pytest

from featreplay import autodiff as ad
from featreplay.config import from_dict
from featreplay.continual import critic_step, generator_step, init_engine
from featreplay.errors import ContractViolation
from featreplay.metrics import train_reference_classifier
from featreplay.nets import (
    Classifier,
    Critic,
    Encoder,
    FeatureCritic,
    Generator,
    ModelState,
    SampleBatch,
    argmax_lowest,
    classify,
    criticize,
    encode,
    generate,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from featreplay.objectives import aux_class_loss, wasserstein_generator_loss
from featreplay.tasks import Task, TaskStream, make_gauss2d, make_glyphs8, named_rng


def _z(n, dim=8, seed=0):
    return np.random.default_rng(seed).standard_normal((n, dim))


def test_generate_shape_and_determinism():
    g = Generator(8, 2, 5, rng=named_rng(0, "g"))
    a = generate(g, 1, _z(4))
    b = generate(g, 1, _z(4))
    assert a.x.shape == (4, 2) and a.provenance == "current_model"
    assert np.array_equal(a.x.data, b.x.data)


def test_generate_rejects_out_of_range_condition():
    g = Generator(8, 2, 5)
    with pytest.raises(ContractViolation):
        generate(g, 5, _z(2))
    with pytest.raises(ContractViolation):
        generate(g, np.array([0, -1]), _z(2))


def test_modulation_separates_conditions():
    g = Generator(8, 2, 3, rng=named_rng(0, "g"))
    z = _z(6)
    g.params["mod0.shift"].data[1] += named_rng(1, "perturb").normal(size=64)
    assert not np.allclose(generate(g, 0, z).x.data, generate(g, 1, z).x.data)


def test_per_row_conditions_match_per_batch_calls():
    g = Generator(8, 2, 3, rng=named_rng(0, "g"))
    g.params["mod1.scale"].data[...] = named_rng(2, "s").normal(size=(3, 64))
    z = _z(6)
    cond = np.array([0, 1, 2, 2, 1, 0])
    mixed = g.forward(z, cond).data
    for c in range(3):
        rows = cond == c
        # BLAS may block a smaller matmul differently, so allow rounding
        np.testing.assert_allclose(mixed[rows], g.forward(z[rows], c).data, rtol=1e-12, atol=1e-14)


def test_glyph_generator_outputs_unit_range():
    g = Generator(8, 64, 10, squash=True)
    x = generate(g, 3, _z(5)).x.data
    assert x.shape == (5, 64) and x.min() > 0 and x.max() < 1


def test_criticize_shapes_and_tap():
    critic = Critic(2, 5, hidden=(16, 32), rng=named_rng(0, "c"))
    x = SampleBatch(named_rng(1, "x").normal(size=(3, 2)), 0)
    out = criticize(critic, x)
    assert out.score.shape == (3, 1) and out.class_logits.shape == (3, 5)
    assert out.tap.h.shape == (3, 16) and out.tap.source == "distilled"
    again = critic.tap(x)
    assert np.array_equal(out.tap.h.data, again.h.data)
    assert critic.tap_width == 16


def test_tap_matches_independent_truncated_forward():
    critic = Critic(2, 5, rng=named_rng(0, "c"))
    x = named_rng(1, "x").normal(size=(7, 2))
    p = critic.params
    pre = x @ p["l0.W"].data + p["l0.b"].data
    manual = np.where(pre > 0, pre, 0.2 * pre)
    np.testing.assert_allclose(critic.tap(SampleBatch(x, 0)).h.data, manual, rtol=0, atol=1e-15)


def test_input_gradient_matches_finite_differences():
    critic = Critic(3, 4, rng=named_rng(0, "c"))
    x = named_rng(1, "x").normal(size=(5, 3))
    analytic = critic.input_gradient(x).data
    eps = 1e-6
    numeric = np.zeros_like(x)
    for k in range(3):
        up, down = x.copy(), x.copy()
        up[:, k] += eps
        down[:, k] -= eps
        numeric[:, k] = (critic.score(up).data - critic.score(down).data)[:, 0] / (2 * eps)
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_feature_critic_input_gradient_matches_finite_differences():
    fc = FeatureCritic(3, hidden=(8, 8), rng=named_rng(0, "fc"))
    pair = named_rng(1, "p").normal(size=(4, 6))
    analytic = fc.input_gradient(pair).data
    eps = 1e-6
    numeric = np.zeros_like(pair)
    for k in range(6):
        up, down = pair.copy(), pair.copy()
        up[:, k] += eps
        down[:, k] -= eps
        numeric[:, k] = (fc.score(up).data - fc.score(down).data)[:, 0] / (2 * eps)
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_encode_shape_and_frozen_determinism():
    enc = Encoder(2, 16, rng=named_rng(0, "e"))
    batch = SampleBatch(named_rng(1, "x").normal(size=(5, 2)), 1)
    enc.params.freeze()
    a, b = encode(enc, batch), encode(enc, batch)
    assert a.h.shape == (5, 16) and a.source == "learned_encoder"
    assert np.array_equal(a.h.data, b.h.data)


def test_prior_encoder_lipschitz_oracle():
    enc = Encoder(2, 16, source="prior", rng=named_rng(11, "prior"))
    x = named_rng(11, "x").normal(size=(1, 2))
    step = 1e-6 * np.array([[0.6, 0.8]])
    moved = np.linalg.norm(enc.features(x + step).data - enc.features(x).data)
    # numeric Jacobian by central differences gives the local Lipschitz bound
    jac = np.stack(
        [(enc.features(x + 1e-7 * e).data - enc.features(x - 1e-7 * e).data)[0] / 2e-7 for e in np.eye(2)], axis=1
    )
    bound = np.linalg.norm(jac, 2) * np.linalg.norm(step)
    assert moved <= bound * (1 + 1e-3)


def test_feature_critic_width_contract():
    fc = FeatureCritic(16)
    assert fc.score(np.zeros((3, 32))).shape == (3, 1)
    with pytest.raises(ContractViolation):
        fc.score(np.zeros((3, 16)))


def test_argmax_ties_go_to_lower_index():
    np.testing.assert_array_equal(argmax_lowest(np.array([[0.1, 0.9, 0.0], [0.5, 0.5, 0.1]])), [1, 0])


def test_untrained_classifier_refuses():
    with pytest.raises(ContractViolation):
        classify(Classifier(2, 3), np.zeros((1, 2)))


def test_reference_classifier_on_gauss2d():
    net = train_reference_classifier(make_gauss2d(5), seed=0, steps=600)
    assert net.heldout_accuracy >= 0.95


def test_reference_classifier_on_clean_glyphs():
    stream = make_glyphs8(10, noise=0.0)
    net = train_reference_classifier(stream, seed=0, steps=300)
    assert net.heldout_accuracy == 1.0


def test_network_losses_pass_grad_check():
    rng = named_rng(0, "nets-gc")
    x = rng.normal(size=(4, 2))
    z = rng.normal(size=(4, 3))
    g = Generator(3, 2, 3, hidden=(5, 4), rng=rng)
    c = Critic(2, 3, hidden=(5, 4), rng=rng)
    e = Encoder(2, 3, hidden=(5,), n_conditions=3, rng=rng)
    fc = FeatureCritic(3, hidden=(4,), rng=rng)
    cls = Classifier(2, 3, hidden=(5,), rng=rng)
    labels = np.array([0, 2, 1, 1])
    cases = [
        (lambda: wasserstein_generator_loss(c, generate(g, labels, z)), g.params),
        (lambda: ad.add(ad.mean(c.score(x)), aux_class_loss(criticize(c, SampleBatch(x, labels)).class_logits, labels)), c.params),
        (lambda: aux_class_loss(e.class_logits(e.features(x)), labels), e.params),
        (lambda: ad.mean(fc.score(ad.concat([e.features(x), e.features(x[::-1])], axis=1))), fc.params),
        (lambda: aux_class_loss(cls.logits(x), labels), cls.params),
    ]
    for build, params in cases:
        assert ad.grad_check(build, params) < 1e-4


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    state = ModelState(Generator(8, 2, 3, rng=named_rng(0, "g")), Critic(2, 3, rng=named_rng(0, "c")))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, state, "abc123", {"task": 2})
    ckpt = load_checkpoint(path)
    assert ckpt.config_hash == "abc123" and ckpt.meta == {"task": 2}
    fresh = Generator(8, 2, 3, rng=named_rng(5, "other"))
    restore_params(fresh, ckpt, "generator")
    assert np.array_equal(fresh.params.values, state.generator.params.values)


def test_single_gaussian_training_oracle():
    stream = TaskStream("gauss2d", [Task(0, 2, "gauss2d", mean=np.array([2.0, 2.0]), sigma=0.1)], seed=3)
    cfg = from_dict({"stream": "gauss2d-1", "mode": "none", "steps_per_task": 2000, "seed": 3})
    state = init_engine(cfg, stream)
    for _ in range(cfg.replay.steps_per_task):
        for _ in range(cfg.replay.critic_steps):
            critic_step(state, stream.tasks[0])
        generator_step(state, stream.tasks[0])
    x = generate(state.model.generator, 0, named_rng(3, "check").standard_normal((2000, 8))).x.data
    assert np.linalg.norm(x.mean(axis=0) - [2.0, 2.0]) < 0.3
