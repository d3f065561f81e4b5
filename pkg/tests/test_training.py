import math

import numpy as np
import pytest

from riskgen import autodiff as ad
from riskgen.datasim import SynthConfig, simulate
from riskgen.errors import DomainError, NumericalError
from riskgen.networks import Architecture, NoiseSpec, init_params
from riskgen.scorefn import RiskSpec, empirical_var_es, score
from riskgen.strategies import (BuyHold, StaticPortfolio, StrategySet, compile_strategies,
                                default_strategy_set, pnl_batch)
from riskgen.training import (Optimizer, TrainConfig, clip_global_norm, d_loss_graph,
                              discriminator_loss, g_loss_graph, generator_loss, hsm_estimates,
                              mean_score_node, order_stat_selector, train, train_gom)

ARCH = Architecture(n_assets=3, n_steps=12, noise_dim=4, gen_hidden=(8,), n_samples=20,
                    disc_hidden=(8,))
SPEC = RiskSpec.single(0.1)


def _config(**kw):
    base = dict(arch=ARCH, risk=SPEC, strategies=default_strategy_set(3, 0, n_static=2),
                epochs=3, batch_size=20, optimizer="adam", lr_d=1e-3, lr_g=1e-3, seed=4)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def data():
    return simulate(SynthConfig.desk(0, n_steps=12), 60)


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.trainable(), b.trainable()))


def test_mean_score_node_value_and_gradient(rng):
    x = rng.standard_normal((3, 50))
    v0, e0 = np.array([[-1.3], [-1.2], [-1.5]]), np.array([[-1.9], [-1.7], [-2.2]])
    tape = ad.Tape()
    node = mean_score_node(tape.param(v0), tape.param(e0), x, 0.1, 10.0)
    want = score(RiskSpec.single(0.1, 10.0), v0, e0, x).mean(axis=1, keepdims=True)
    assert np.allclose(node.value, want, rtol=1e-12)

    def build(tape, leaves):
        s = mean_score_node(leaves[0], leaves[1], x, 0.1, 10.0)
        return ad.sum(s)
    assert ad.grad_check(build, [v0, e0]) < 1e-6


def _graph_inputs(seed):
    rng = np.random.default_rng(seed)
    gen, disc = init_params(ARCH, seed)
    for a in gen.trainable() + disc.trainable():
        a += 0.05 * rng.standard_normal(a.shape)  # jitter off symmetric init
    sset = StrategySet((BuyHold(0), BuyHold(2), StaticPortfolio(np.array([0.5, -0.3, 0.2]))))
    compiled = compile_strategies(sset, 3, 12)
    real = pnl_batch(sset, rng.standard_normal((20, 3, 12)), compiled)
    z = rng.standard_t(5, size=(20, 4))
    return gen, disc, sset, compiled, real, z


@pytest.mark.parametrize("which", ["d", "g"])
def test_full_loss_graph_gradients(which):
    gen, disc, sset, compiled, real, z = _graph_inputs(1)
    ng = len(gen.trainable())

    def build(tape, leaves):
        g, d = leaves[:ng], leaves[ng:]
        if which == "d":
            loss, _, _ = d_loss_graph(tape, disc, gen, real, z, 1.0, compiled, sset, SPEC,
                                      train_d=True, train_g=True, d_leaves=d, g_leaves=g)
        else:
            loss, _, _ = g_loss_graph(tape, disc, gen, z, real, compiled, sset, SPEC,
                                      train_d=True, train_g=True, d_leaves=d, g_leaves=g)
        return loss

    err = ad.grad_check(build, gen.trainable() + disc.trainable(), max_coords=12)
    assert err < 1e-4


def test_discriminator_loss_is_linear_in_lam(rng):
    gen, disc = init_params(ARCH, 2)
    sset = default_strategy_set(3, 0, n_static=2)
    real = rng.standard_normal((20, 3, 12))
    z = rng.standard_t(5, size=(20, 4))
    l0 = discriminator_loss(disc, gen, real, z, 1e-300, sset, SPEC)
    assert l0 == pytest.approx(generator_loss(disc, gen, z, real, sset, SPEC), rel=1e-9)
    l1, l2 = (discriminator_loss(disc, gen, real, z, lam, sset, SPEC) for lam in (1.0, 2.0))
    assert l2 - l1 == pytest.approx(l1 - l0, rel=1e-9)
    with pytest.raises(DomainError):
        discriminator_loss(disc, gen, real[:10], z, 1.0, sset, SPEC)


def test_config_validation_and_round_trip():
    cfg = _config()
    assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(DomainError):
        _config(batch_size=30)
    with pytest.raises(DomainError):
        _config(optimizer="rmsprop")
    with pytest.raises(DomainError):
        _config(lr_d=0.0)
    with pytest.raises(DomainError):
        _config(noise=NoiseSpec(dim=5))
    with pytest.raises(DomainError):
        TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})
    with pytest.raises(DomainError):
        _config(risk=RiskSpec.single(0.01))  # 20 samples cannot hold a 1% tail


def test_zero_epochs_returns_initial_parameters(data):
    result = train(_config(epochs=0), data)
    gen, disc = init_params(ARCH, 4)
    assert _same(result.generator, gen) and _same(result.discriminator, disc)
    assert result.epoch == 0 and len(result.trace) == 0


def test_trace_rows_and_checkpoints(data):
    seen = []
    result = train(_config(epochs=5, log_every=2, checkpoint_every=2), data,
                   on_checkpoint=lambda e, c: seen.append(c.epoch))
    assert result.trace.epoch == [2, 4, 5]
    assert seen == [2, 4] and result.trace.checkpoints == [2, 4]
    assert all(math.isfinite(x) for x in result.trace.re_insample)


def test_training_is_deterministic(data):
    a, b = train(_config(), data), train(_config(), data)
    assert _same(a.generator, b.generator) and _same(a.discriminator, b.discriminator)
    assert a.trace.loss_d == b.trace.loss_d
    c = train(_config(seed=5), data)
    assert not _same(a.generator, c.generator)


def test_resume_matches_uninterrupted_run(data):
    straight = train(_config(epochs=4), data)
    first = train(_config(epochs=2), data)
    resumed = train(_config(epochs=2), data, init=first.checkpoint())
    assert resumed.trace.epoch == [3, 4] and resumed.epoch == 4
    assert _same(straight.generator, resumed.generator)
    assert _same(straight.discriminator, resumed.discriminator)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_carries_snapshot(data):
    with pytest.raises(NumericalError) as info:
        train(_config(optimizer="sgd", lr_d=1e300, lr_g=1e300, epochs=5), data)
    snap = info.value.snapshot
    assert {"message", "epoch", "step", "checkpoint"} <= set(snap)


def test_order_stat_selector_reads_tail(rng):
    x = rng.standard_normal(40)
    desc = np.sort(x)[::-1]
    var, es = desc @ order_stat_selector(40, SPEC)
    want = empirical_var_es(x, 0.1)
    assert var == want.var and es == pytest.approx(want.es, rel=1e-14)
    with pytest.raises(DomainError):
        order_stat_selector(5, SPEC)


def test_generator_only_baseline(data):
    result = train_gom(_config(epochs=3), data)
    assert result.discriminator is None and result.trace.epoch == [1, 2, 3]
    assert all(math.isnan(x) for x in result.trace.loss_d)
    again = train_gom(_config(epochs=3), data)
    assert _same(result.generator, again.generator)


def test_historical_baseline(rng):
    hist = rng.standard_normal((2, 300))
    est = hsm_estimates(hist, SPEC)
    assert [(e.var, e.es) for e in est] == [
        (empirical_var_es(r, 0.1).var, empirical_var_es(r, 0.1).es) for r in hist]


def test_adam_step_and_state_round_trip(rng):
    p = [rng.standard_normal((2, 3))]
    g = [rng.standard_normal((2, 3))]
    start = p[0].copy()
    opt = Optimizer(p, 0.01, "adam", betas=(0.5, 0.999))
    opt.step(g, -1.0)
    # first bias-corrected Adam step moves each coordinate by lr * sign(g)
    assert np.allclose(p[0], start - 0.01 * g[0] / (np.abs(g[0]) + 1e-8), atol=1e-12)
    other = Optimizer([p[0].copy()], 0.01, "adam", betas=(0.5, 0.999))
    other.load_state(opt.state())
    opt.step(g, -1.0)
    other.step(g, -1.0)
    assert np.array_equal(opt.params[0], other.params[0])


def test_clip_global_norm():
    grads = [np.full((2, 2), 3.0), np.full((1, 1), 4.0)]
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(math.sqrt(52.0))
    assert math.sqrt(sum((c ** 2).sum() for c in clipped)) == pytest.approx(1.0)
    same, _ = clip_global_norm(grads, 100.0)
    assert all(np.array_equal(a, b) for a, b in zip(same, grads))
