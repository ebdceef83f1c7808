import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trap import affine, attacks, engine, zoo
from trap.attacks import AttackConfig, GuidanceState


@pytest.fixture(scope="module")
def source(mnist_train):
    # one short epoch gives a model with realistic, non-trivial gradients
    ds = mnist_train.subset(800)
    graph, _ = zoo.train_model(zoo.build_model(zoo.cnn3(), 0), ds, 1, lr=0.02, seed=0)
    return graph


@pytest.fixture(scope="module")
def batch(mnist_test):
    return mnist_test.images[:16], mnist_test.labels[:16]


# losses


def _logit_graph(k):
    return engine.ComputeGraph([engine.Flatten("f")], (k,), k).astype(np.float64)


def test_l1_confident_correct_is_near_zero():
    out = attacks.loss_l1(_logit_graph(3), np.array([[60.0, 0.0, 0.0]]), [0])
    assert 0 <= out[0] < 1e-20


def test_l1_uniform_is_log_k():
    assert attacks.loss_l1(_logit_graph(7), np.zeros((1, 7)), [3])[0] == pytest.approx(math.log(7), abs=1e-15)


def test_l1_equals_engine_cross_entropy():
    z = np.random.default_rng(0).normal(size=(4, 5))
    y = np.array([0, 4, 2, 2])
    assert np.array_equal(attacks.loss_l1(_logit_graph(5), z, y), engine.softmax_cross_entropy(z, y))


def _state(h_star, h_x):
    return GuidanceState(np.atleast_2d(np.asarray(h_star, float)), np.atleast_2d(np.asarray(h_x, float)))


def test_l2_at_guidance_is_one_plus_gamma():
    s = _state([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
    assert attacks.loss_l2(s.h_star, s, 0.8)[0] == pytest.approx(1.8, abs=1e-15)


def test_l2_orthogonal_equal_norm_is_gamma():
    s = _state([1.0, 1.0], [1.0, 0.0])  # a = (0, 1)
    assert attacks.loss_l2(np.array([[2.0, 0.0]]), s, 0.8)[0] == pytest.approx(0.8, abs=1e-15)


def test_l2_at_benign_feature_is_zero():
    s = _state([1.0, 1.0], [1.0, 0.0])
    assert attacks.loss_l2(s.h_x, s, 0.8)[0] == 0.0


def test_l2_zero_gap_rejected():
    s = _state([1.0, 0.0], [1.0, 0.0])
    with pytest.raises(attacks.GuidanceGapError):
        attacks.loss_l2(np.array([[2.0, 2.0]]), s, 0.8)


def test_l2_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    h_star, h_x, h = rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    head = attacks.GuidedFeatureHead(h_star, h_x, 0.8)
    _, grad = head.value_and_grad(h)
    eps = 1e-6
    for i in range(3):
        for j in range(6):
            e = np.zeros_like(h)
            e[i, j] = eps
            fd = (head.per_item(h + e)[i] - head.per_item(h - e)[i]) / (2 * eps)
            assert grad[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


# guidance update


def test_update_beta_one_keeps_guidance():
    s = _state([[0.3, -1.0]], [[0.0, 0.0]])
    out = attacks.update_guidance(s, np.array([[5.0, 5.0]]), 1.0)
    assert np.array_equal(out.h_star, s.h_star)


def test_update_beta_zero_returns_adversarial_feature():
    s = _state([[0.3, -1.0]], [[0.0, 0.0]])
    h = np.array([[5.0, 7.25]])
    assert np.array_equal(attacks.update_guidance(s, h, 0.0).h_star, h)


def test_convex_combination_example():
    s = _state([[1.0, 0.0]], [[0.0, 0.0]])
    out = attacks.update_guidance(s, np.array([[0.0, 1.0]]), 0.8)
    assert np.max(np.abs(out.h_star - [[0.8, 0.2]])) <= 1e-7


def test_update_dimension_mismatch():
    with pytest.raises(ValueError):
        attacks.update_guidance(_state([[1.0, 0.0]], [[0.0, 0.0]]), np.zeros((1, 3)), 0.5)


# momentum and step


def test_momentum_first_step_has_unit_l1_norm():
    g = np.random.default_rng(0).normal(size=(3, 1, 4, 4))
    out = attacks.momentum_normalize(g, np.zeros_like(g), 1.0)
    assert np.allclose(np.abs(out).sum(axis=(1, 2, 3)), 1.0, rtol=1e-12)


def test_momentum_zero_gradient_keeps_memory():
    gm = np.random.default_rng(1).normal(size=(2, 1, 3, 3))
    assert np.array_equal(attacks.momentum_normalize(np.zeros_like(gm), gm, 0.5), 0.5 * gm)


def test_momentum_mu_zero_is_memoryless():
    rng = np.random.default_rng(2)
    g, gm = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
    assert np.array_equal(attacks.momentum_normalize(g, gm, 0.0),
                          attacks.momentum_normalize(g, np.zeros_like(g), 0.0))


def test_saturating_step():
    x = np.random.default_rng(3).uniform(size=(2, 1, 4, 4)).astype(np.float32)
    eps = np.float32(16 / 255)
    out = attacks.step_and_clip(x, x, np.ones_like(x), eps, eps)
    assert np.array_equal(out, np.clip(x + eps, 0, 1))


def test_zero_gradient_step_keeps_iterate():
    x = np.random.default_rng(4).uniform(size=(1, 1, 4, 4)).astype(np.float32)
    assert np.array_equal(attacks.step_and_clip(x, x, np.zeros_like(x), 0.1, 0.1), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 0.5), st.floats(1e-3, 1.0))
def test_step_stays_in_ball(seed, eps, alpha):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 1, 5, 5)).astype(np.float32)
    eps32 = np.float32(eps)
    xt = np.clip(x + rng.uniform(-eps, eps, x.shape), 0, 1).astype(np.float32)
    out = attacks.step_and_clip(xt, x, rng.normal(size=x.shape), np.float32(alpha), eps32)
    assert np.abs(out - x).max() <= eps32 + 2**-20
    assert out.min() >= 0 and out.max() <= 1


# presets and config


def test_trap_defaults():
    cfg = attacks.preset("trap")
    assert (cfg.epsilon_255, cfg.T, cfg.t1, cfg.mu, cfg.p, cfg.beta, cfg.gamma) == (16, 10, 4, 1.0, 0.9, 0.8, 0.8)
    assert cfg.epsilon == np.float32(16 / 255) and cfg.transforms_on


def test_preset_reductions():
    base = AttackConfig()
    assert attacks.preset("ila", base).beta == 1.0
    mi = attacks.preset("mi_fgsm", base)
    assert mi.t1 == mi.T and not mi.transforms_on
    ai = attacks.preset("ai_mi_fgsm", base)
    assert ai.t1 == ai.T and ai.p == 0.9 and ai.transforms_on
    dg = attacks.preset("dg_ila", base)
    assert dg.t1 == 4 and not dg.transforms_on and dg.beta == 0.8
    with pytest.raises(ValueError):
        attacks.preset("pgd", base)


@pytest.mark.parametrize("kwargs", [dict(t1=0), dict(t1=11), dict(mu=-1), dict(p=1.1), dict(beta=-0.1),
                                    dict(gamma=-1), dict(epsilon_255=0), dict(order=("translate",) * 4)])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


# run_trap


def mi_fgsm_oracle(graph, x, y, eps, T, mu):
    """Plain MI-FGSM on the engine's cross-entropy gradient."""
    x = x.astype(np.float32)
    x_adv, g = x.copy(), np.zeros_like(x)
    alpha = np.float32(eps / T)
    for _ in range(T):
        _, b = engine.backward_graph(graph, x_adv, engine.SoftmaxCrossEntropy(y), param_grads=False)
        grad = b.input_grad
        norm = np.sum(np.abs(grad), axis=(1, 2, 3), keepdims=True)
        g = mu * g + grad / norm
        x_adv = np.clip(np.clip(x_adv + alpha * np.sign(g), x - eps, x + eps), 0, 1)
    return x_adv


class _FixedGuidance:
    """Cosine plus gamma-weighted norm ratio against a fixed guidance vector."""

    def __init__(self, h_star, h_x, gamma):
        self.a = h_star.astype(np.float64) - h_x
        self.h_x = h_x.astype(np.float64)
        self.gamma = gamma

    def per_item(self, h):
        raise NotImplementedError

    def value_and_grad(self, h):
        grads = []
        for a, b in zip(self.a, h.astype(np.float64) - self.h_x):
            na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
            if nb == 0:
                grads.append(self.gamma * a / na**2)
            else:
                grads.append(a / (na * nb) - (a @ b) * b / (na * nb**3) + self.gamma * b / (na * nb))
        return 0.0, np.array(grads).astype(h.dtype)


def ila_oracle(graph, x, y, eps, T, t1, mu, gamma, tap):
    """MI-FGSM baseline for t1 steps, then fixed-guidance feature ascent from the benign image."""
    baseline = mi_fgsm_oracle(graph, x, y, eps, t1, mu)
    h_star = zoo.hidden_output(graph, tap, baseline)
    h_x = zoo.hidden_output(graph, tap, x)
    head = _FixedGuidance(h_star, h_x, gamma)
    x = x.astype(np.float32)
    x_adv, g = x.copy(), np.zeros_like(x)
    alpha = np.float32(eps / (T - t1))
    for _ in range(T - t1):
        _, b = engine.backward_graph(graph, x_adv, engine.ActivationLoss(tap, head), param_grads=False)
        grad = b.input_grad
        norm = np.sum(np.abs(grad), axis=(1, 2, 3), keepdims=True)
        g = mu * g + grad / norm
        x_adv = np.clip(np.clip(x_adv + alpha * np.sign(g), x - eps, x + eps), 0, 1)
    return x_adv


def test_mi_fgsm_preset_matches_oracle(source, batch):
    x, y = batch
    cfg = attacks.preset("mi_fgsm", AttackConfig(seed=3))
    out, trace = attacks.run_trap(source, x, y, cfg)
    ref = mi_fgsm_oracle(source, x, y, cfg.epsilon, cfg.T, np.float32(cfg.mu))
    assert np.array_equal(out, ref)
    assert trace.l2_evaluations == 0


def test_ila_preset_matches_oracle(source, batch):
    x, y = batch
    cfg = attacks.preset("ila", AttackConfig(seed=3))
    out, _ = attacks.run_trap(source, x, y, cfg)
    ref = ila_oracle(source, x, y, cfg.epsilon, cfg.T, cfg.t1, np.float32(cfg.mu), cfg.gamma, "relu2")
    assert np.array_equal(out, ref)


def test_trace_layout(source, batch):
    x, y = batch
    cfg = AttackConfig(T=6, t1=2)
    _, trace = attacks.run_trap(source, x, y, cfg)
    assert [r.step for r in trace.records] == list(range(6))
    assert [r.phase for r in trace.records] == ["baseline"] * 2 + ["enhancement"] * 4
    eps = float(cfg.epsilon)
    assert [r.alpha for r in trace.records] == pytest.approx([eps / 2] * 2 + [eps / 4] * 4, rel=1e-6)
    assert trace.l2_evaluations == 4
    assert 0 < np.mean([r.transform_rate for r in trace.records]) <= 1


@pytest.mark.parametrize("name", attacks.PRESETS)
def test_every_iterate_in_ball(source, batch, name):
    x, y = batch
    cfg = attacks.preset(name, AttackConfig(seed=1))
    out, trace = attacks.run_trap(source, x, y, cfg, record_iterates=True)
    assert len(trace.iterates) == cfg.T
    for it in trace.iterates + [out]:
        assert np.abs(it - x).max() <= cfg.epsilon + 2**-20
        assert it.min() >= 0 and it.max() <= 1


def test_beta_one_freezes_guidance_across_enhancement(source, batch):
    x, y = batch
    cfg = replace(attacks.preset("ila"), T=14, t1=4)
    _, trace = attacks.run_trap(source, x, y, cfg, record_guidance=True)
    frozen = trace.guidance[cfg.t1 - 1]
    assert np.array_equal(frozen, zoo.hidden_output(source, "relu2", _baseline(source, x, y, cfg)))
    for k in range(cfg.t1, cfg.T):
        assert np.array_equal(trace.guidance[k], frozen)


def _baseline(graph, x, y, cfg):
    out, _ = attacks.run_trap(graph, x, y, replace(cfg, T=cfg.t1))
    return out


def test_beta_zero_tracks_adversarial_feature(source, batch):
    x, y = batch
    cfg = replace(attacks.preset("dg_ila"), beta=0.0)
    _, trace = attacks.run_trap(source, x, y, cfg, record_guidance=True, record_iterates=True)
    for k in range(cfg.t1, cfg.T):
        assert np.array_equal(trace.guidance[k], zoo.hidden_output(source, "relu2", trace.iterates[k]))


def test_enhancement_restarts_from_benign(source, batch):
    x, y = batch
    cfg = attacks.preset("dg_ila")  # T=10, t1=4
    _, trace = attacks.run_trap(source, x, y, cfg, record_iterates=True)
    alpha = cfg.epsilon / (cfg.T - cfg.t1)
    assert np.abs(trace.iterates[cfg.t1 - 1] - x).max() > 2 * alpha
    assert np.abs(trace.iterates[cfg.t1] - x).max() <= alpha + 2**-20


def test_run_is_deterministic_and_schedule_independent(source, batch):
    x, y = batch
    cfg = AttackConfig(seed=9)
    a, _ = attacks.run_attack(source, x, y, cfg, chunk_size=5, threads=1)
    b, _ = attacks.run_attack(source, x, y, cfg, chunk_size=5, threads=4)
    c, _ = attacks.run_attack(source, x, y, cfg, chunk_size=3, threads=2)
    d, _ = attacks.run_trap(source, x, y, cfg)
    assert np.array_equal(a, b) and np.array_equal(a, c) and np.array_equal(a, d)


def test_transforms_change_the_result(source, batch):
    x, y = batch
    a, _ = attacks.run_trap(source, x, y, attacks.preset("ai_mi_fgsm", AttackConfig(seed=1)))
    b, _ = attacks.run_trap(source, x, y, attacks.preset("ai_mi_fgsm", AttackConfig(seed=2)))
    c, _ = attacks.run_trap(source, x, y, attacks.preset("mi_fgsm"))
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_per_batch_transform_shares_draws(source, batch):
    x, y = batch
    cfg = attacks.preset("ai_mi_fgsm", AttackConfig(seed=4, per_batch_transform=True))
    _, trace = attacks.run_trap(source, x, y, cfg)
    assert all(r.transform_rate in (0.0, 1.0) for r in trace.records)


def test_sum_and_mean_reduction_give_the_same_step(source, batch):
    x, y = batch
    _, b = engine.backward_graph(source, x, engine.SoftmaxCrossEntropy(y), param_grads=False)
    g = b.input_grad
    assert np.array_equal(np.sign(g), np.sign(g / np.float32(len(x))))


def test_zero_gap_item_returns_baseline_result():
    # the tap output is constant, so h* equals h_x for every item
    layers = [engine.Conv2d("conv", 1, 1, 1, weight=np.zeros((1, 1, 1, 1)), bias=np.ones(1)), engine.ReLU("relu"),
              engine.Flatten("flat"), engine.Linear("fc", 16, 3, weight=np.ones((3, 16)), bias=np.zeros(3))]
    g = engine.ComputeGraph(layers, (1, 4, 4), 3).astype(np.float32)
    x = np.random.default_rng(0).uniform(size=(2, 1, 4, 4)).astype(np.float32)
    cfg = AttackConfig(T=4, t1=2, tap="relu", p=0.0)
    out, trace = attacks.run_trap(g, x, np.array([0, 1]), cfg)
    base, _ = attacks.run_trap(g, x, np.array([0, 1]), replace(cfg, T=2))
    assert trace.flagged == [0, 1]
    assert np.array_equal(out, base)


def test_amplitude_non_decreasing_on_linear_tap():
    # linear tap h = W x with the cosine term at its maximum: the ratio term dominates
    rng = np.random.default_rng(0)
    w = rng.normal(size=(6, 16))
    layers = [engine.Flatten("flat"), engine.Linear("tap", 16, 6, weight=w, bias=np.zeros(6)),
              engine.Linear("fc", 6, 3, weight=rng.normal(size=(3, 6)), bias=np.zeros(3))]
    g = engine.ComputeGraph(layers, (1, 4, 4), 3).astype(np.float32)
    x = np.full((1, 1, 4, 4), 0.5, np.float32)
    cfg = AttackConfig(T=12, t1=2, tap="tap", p=0.0, beta=1.0, epsilon_255=64)
    _, trace = attacks.run_trap(g, x, np.array([0]), cfg, record_iterates=True)
    h_x = zoo.hidden_output(g, "tap", x)
    amps = [np.linalg.norm(zoo.hidden_output(g, "tap", it) - h_x) for it in trace.iterates[cfg.t1:]]
    assert all(b >= a - 1e-6 for a, b in zip(amps, amps[1:]))


def test_unknown_tap_rejected(source, batch):
    x, y = batch
    with pytest.raises(engine.GraphError):
        attacks.run_trap(source, x, y, AttackConfig(tap="missing"))
