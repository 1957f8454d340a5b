"""
GPC loop tests: data collection, budgets, determinism, deployment modes,
evaluation and the experiment studies. End-to-end reproductions are marked
slow and excluded by default.
"""

from dataclasses import replace

import numpy as np
import pytest

from src.envs import make_env, stack_domains
from src.errors import ConfigError, ContractViolation
from src.flow import init_flow_model, sample_batch
from src.gpc import (GpcConfig, collect_iteration, evaluate, make_planner, roughness,
                     run_episodes, train)
from src.rng import substream
from src.spc import shift_knots
from src.studies import (benchmark, dr_study, multimodality_study, plan_latency,
                         route_fractions, warm_start_study)


def tiny_cfg(env='pendulum', **overrides):
    settings = dict(num_iterations=2, num_envs=2, num_spc_samples=4, num_policy_samples=2,
                    episode_length=0.1, epochs=2, batch_size=4, hidden_layers=1,
                    hidden_width=8, eval_samples=4, workers=1)
    settings.update(overrides)
    return GpcConfig.for_env(env, **settings)


def tiny_model(env, seed=0):
    return init_flow_model(env.spec, np.random.default_rng(seed), hidden_layers=1,
                           hidden_width=8)


def constant_field(model, value):
    tensors = [np.zeros_like(t) for t in model.net.tensors()]
    tensors[-1] = np.full_like(tensors[-1], value)
    return replace(model, net=model.net.with_tensors(tensors))


# ============================================================
# CONFIGURATION
# ============================================================

def test_profile_defaults():
    cfg = GpcConfig.for_env('double_cartpole')
    assert (cfg.num_iterations, cfg.num_envs, cfg.num_spc_samples, cfg.num_policy_samples) == (50, 256, 16, 16)
    assert cfg.hidden_layers == 2 and cfg.hidden_width == 64 and cfg.activation == 'swish'
    assert GpcConfig.for_env('pendulum', num_envs=4).num_envs == 4


@pytest.mark.parametrize('overrides, key', [
    ({'sigma': 0.0}, 'sigma'),
    ({'weighting': 'softmax'}, 'weighting'),
    ({'ode_step': 0.3}, 'ode_step'),
    ({'cvar_beta': 1.0}, 'cvar_beta'),
    ({'num_envs': 0}, 'num_envs'),
    ({'alpha': 1.5}, 'alpha'),
])
def test_invalid_values_name_the_key(overrides, key):
    with pytest.raises(ConfigError, match=key):
        GpcConfig.for_env('pendulum', **overrides)


def test_unknown_environment():
    with pytest.raises(ConfigError):
        GpcConfig.for_env('acrobot')


def test_risk_aggregator_from_config():
    assert tiny_cfg(risk='average', cvar_beta=0.5).risk_aggregator().beta == 0.0
    agg = tiny_cfg(risk='cvar', cvar_beta=0.25, num_domains=4).risk_aggregator()
    assert (agg.kind, agg.beta, agg.num_domains) == ('cvar', 0.25, 4)


# ============================================================
# DATA COLLECTION
# ============================================================

def test_collection_without_policy_samples():
    cfg = tiny_cfg(num_policy_samples=0)
    env = make_env('pendulum', cfg.episode_length)
    records, stats = collect_iteration(cfg, env, None, np.random.default_rng(0))
    steps = env.spec.episode_steps
    assert steps == 5
    assert len(records) == cfg.num_envs * steps == stats.num_records
    assert [(r.env_id, r.step) for r in records] == [(e, k) for e in range(2) for k in range(steps)]
    assert stats.policy_best_fraction == 0.0
    assert np.isfinite(stats.mean_cost)


def test_policy_samples_need_a_model():
    cfg = tiny_cfg()
    with pytest.raises(ContractViolation):
        collect_iteration(cfg, make_env('pendulum', cfg.episode_length), None,
                          np.random.default_rng(0))


@pytest.mark.parametrize('num_domains', [1, 3])
def test_rollout_budget(num_domains):
    cfg = tiny_cfg(num_domains=num_domains)
    env = make_env('pendulum', cfg.episode_length)
    _, stats = collect_iteration(cfg, env, tiny_model(env), np.random.default_rng(1))
    expected = cfg.num_envs * env.spec.episode_steps * (cfg.num_spc_samples + cfg.num_policy_samples) * num_domains
    assert stats.num_rollouts == expected
    assert 0.0 <= stats.policy_best_fraction <= 1.0


def test_records_replay_the_applied_actions():
    cfg = tiny_cfg(num_policy_samples=0)
    env = make_env('pendulum', cfg.episode_length)
    T, H = env.spec.episode_steps, env.spec.horizon_steps
    batch = run_episodes((cfg, env, None, 'collect', 0.0, stack_domains([env.nominal]),
                          env.nominal, 7, 'collect', np.arange(2), True))
    assert not batch.diverged.any()

    for e in range(2):
        records = batch.records[e * T:(e + 1) * T]
        q, v = batch.q[e, 0], batch.v[e, 0]
        for k, record in enumerate(records):
            applied = env.clamp_action(record.target[0] * env.limits)
            assert np.array_equal(batch.actions[e, k], applied)
            assert np.allclose(batch.observations[e, k], record.observation)
            if k + 1 < T:
                assert np.array_equal(records[k + 1].previous, shift_knots(record.target, H))
            q, v = env.advance(env.nominal, q, v, applied)
        assert np.allclose(q, batch.final_q[e], atol=1e-9)
        assert np.allclose(v, batch.final_v[e], atol=1e-9)


def test_collection_is_deterministic():
    cfg = tiny_cfg(num_domains=2)
    env = make_env('pendulum', cfg.episode_length)
    model = tiny_model(env)
    a, stats_a = collect_iteration(cfg, env, model, np.random.default_rng(3))
    b, stats_b = collect_iteration(cfg, env, model, np.random.default_rng(3))
    assert stats_a.mean_cost == stats_b.mean_cost
    assert all(np.array_equal(x.target, y.target) and np.array_equal(x.observation, y.observation)
               for x, y in zip(a, b))


def test_collection_independent_of_worker_count():
    cfg = tiny_cfg(num_envs=4)
    env = make_env('pendulum', cfg.episode_length)
    model = tiny_model(env)
    serial, _ = collect_iteration(cfg, env, model, np.random.default_rng(4))
    parallel, _ = collect_iteration(replace(cfg, workers=2), env, model, np.random.default_rng(4))
    assert len(serial) == len(parallel)
    for x, y in zip(serial, parallel):
        assert (x.env_id, x.step) == (y.env_id, y.step)
        assert np.array_equal(x.target, y.target)
        assert np.array_equal(x.previous, y.previous)


# ============================================================
# TRAINING
# ============================================================

def test_train_produces_stats_per_iteration():
    cfg = tiny_cfg()
    model, stats = train(cfg, progress=False)
    assert [s.iteration for s in stats] == [0, 1]
    assert all(len(s.fit_losses) == cfg.epochs for s in stats)
    assert all(s.num_records == cfg.num_envs * 5 for s in stats)
    assert set(stats[0].row()) == {'iteration', 'mean_cost', 'fit_loss', 'policy_best_fraction',
                                   'wall_time'}
    assert model.net.is_finite()


def test_train_is_deterministic():
    cfg = tiny_cfg()
    a, stats_a = train(cfg, progress=False)
    b, stats_b = train(cfg, progress=False)
    assert np.array_equal(a.net.flat(), b.net.flat())
    assert [s.mean_cost for s in stats_a] == [s.mean_cost for s in stats_b]


def test_zero_epochs_keeps_initial_policy():
    cfg = tiny_cfg(epochs=0, num_iterations=1)
    model, stats = train(cfg, progress=False)
    env = make_env('pendulum', cfg.episode_length)
    initial = init_flow_model(env.spec, substream(cfg.seed, 'init'), 1, 8)
    assert np.array_equal(model.net.flat(), initial.net.flat())
    assert np.isnan(stats[0].fit_loss)


# ============================================================
# DEPLOYMENT AND EVALUATION
# ============================================================

def test_planner_budgets():
    cfg = tiny_cfg(eval_samples=8)
    env = make_env('pendulum', cfg.episode_length)
    domains = stack_domains([env.nominal])
    model = tiny_model(env)
    spc = make_planner('spc', cfg, env, model, domains)
    plus = make_planner('gpc+', cfg, env, model, domains)
    assert (spc.num_gaussian, spc.num_policy) == (8, 0)
    assert (plus.num_gaussian, plus.num_policy) == (4, 4)
    assert make_planner('gpc', cfg, env, model, domains, 1.0).samples_per_step == 0
    with pytest.raises(ContractViolation):
        make_planner('ilqr', cfg, env, model, domains)


def test_modes_that_need_a_model():
    cfg = tiny_cfg()
    env = make_env('pendulum', cfg.episode_length)
    for mode in ('gpc', 'gpc+'):
        with pytest.raises(ContractViolation):
            evaluate(cfg, env, None, mode, 1, 1.0, 0)
    with pytest.raises(ContractViolation):
        evaluate(cfg, env, tiny_model(env), 'gpc', 1, 1.5, 0)


def test_spc_evaluation_ignores_the_model():
    cfg = tiny_cfg()
    env = make_env('pendulum', cfg.episode_length)
    a = evaluate(cfg, env, None, 'spc', 3, 1.0, 5)
    b = evaluate(cfg, env, tiny_model(env), 'spc', 3, 1.0, 5)
    assert a.episode_costs == b.episode_costs
    assert len(a.rows()) == 3
    assert set(a.rows()[0]) == {'episode', 'mode', 'alpha', 'cost_per_step', 'success', 'roughness'}


def test_constant_policy_applies_saturated_actions():
    cfg = tiny_cfg(episode_length=0.2)
    env = make_env('pendulum', cfg.episode_length)
    model = constant_field(tiny_model(env), 10.0)
    report = evaluate(cfg, env, model, 'gpc', 2, 1.0, 0)
    assert np.all(report.episodes.actions == env.limits[0])
    assert report.roughness == [0.0, 0.0]


def test_warm_start_smooths_actions():
    cfg = tiny_cfg(episode_length=1.0)
    env = make_env('pendulum', cfg.episode_length)
    model = replace(tiny_model(env), net=tiny_model(env).net.zeros_like())
    cold = evaluate(cfg, env, model, 'gpc', 4, 0.0, 1)
    warm = evaluate(cfg, env, model, 'gpc', 4, 1.0, 1)
    assert warm.mean_roughness < cold.mean_roughness
    # the first step ignores alpha, so both modes start from the same sample
    assert np.array_equal(cold.episodes.actions[:, 0], warm.episodes.actions[:, 0])


def test_evaluation_is_deterministic_across_workers():
    cfg = tiny_cfg(eval_samples=6)
    env = make_env('pendulum', cfg.episode_length)
    model = tiny_model(env)
    a = evaluate(cfg, env, model, 'gpc+', 4, 1.0, 9)
    b = evaluate(replace(cfg, workers=2), env, model, 'gpc+', 4, 1.0, 9)
    assert a.rows() == b.rows()


def test_diverged_plant_counts_as_failure():
    cfg = tiny_cfg(episode_length=1.0)
    env = make_env('pendulum', cfg.episode_length)
    unstable = env.nominal.scaled(damping=-1e7)
    report = evaluate(cfg, env, None, 'spc', 2, 1.0, 3, true_params=unstable)
    assert report.episodes.diverged.all()
    assert report.episode_costs == [float('inf')] * 2
    assert report.successes == [False, False]
    assert report.mean_cost == float('inf')


def test_roughness():
    steady = np.ones((1, 5, 2))
    jitter = np.zeros((1, 4, 1))
    jitter[0, 1::2] = 2.0
    assert roughness(steady).tolist() == [0.0]
    assert roughness(jitter).tolist() == [2.0]
    assert roughness(np.ones((2, 1, 1))).tolist() == [0.0, 0.0]


# ============================================================
# STUDIES
# ============================================================

def test_route_fractions():
    assert route_fractions(None, [1, -1, 1, 0]) == {'upper': 0.5, 'lower': 0.25}


def test_multimodality_with_a_deterministic_policy():
    env = make_env('nav2d')
    # a large constant field saturates every knot at +1: always the upper route
    model = constant_field(tiny_model(env), 10.0)
    rows = multimodality_study(env, model, seed=0, draws=20, resamples=5)
    assert [r['alpha'] for r in rows] == [0.0, 1.0]
    assert rows[0]['upper_fraction'] == 1.0
    assert rows[1]['upper_fraction'] == 1.0
    assert rows[1]['persistence'] == 1.0


def test_multimodality_needs_route_classes():
    env = make_env('pendulum')
    with pytest.raises(ContractViolation):
        multimodality_study(env, tiny_model(env), seed=0, draws=4, resamples=1)


def test_warm_start_study_rows():
    cfg = tiny_cfg()
    env = make_env('pendulum', cfg.episode_length)
    rows = warm_start_study(cfg, env, tiny_model(env), episodes=2, seed=0)
    assert [r['alpha'] for r in rows] == [0.0, 1.0]
    assert set(rows[0]) == {'alpha', 'mean_cost', 'success_rate', 'roughness'}


def test_dr_study_rows():
    cfg = tiny_cfg(num_iterations=1, epochs=1)
    rows = dr_study(cfg, episodes=2, seed=0, num_domains=3)
    assert [(r['variant'], r['plant']) for r in rows] == [
        (v, p) for v in ('no_dr', 'average', 'cvar') for p in ('nominal', 'shifted')
    ]
    assert all('cost_ratio' in r for r in rows)


def test_plan_latency_and_benchmark():
    cfg = tiny_cfg()
    env = make_env('pendulum', cfg.episode_length)
    assert len(plan_latency(cfg, env, tiny_model(env), 'gpc+', 12, 0)) == 12
    results = benchmark(cfg, env, None, steps=3, worker_counts=(1,), seed=0)
    assert [r['mode'] for r in results['latency']] == ['spc', 'gpc', 'gpc+']
    assert results['latency'][0]['steps'] == 3
    assert results['throughput'][0]['rollouts'] > 0


# ============================================================
# END-TO-END REPRODUCTIONS (slow)
# ============================================================

def trained_run(env_name):
    cfg = GpcConfig.for_env(env_name, workers=4)
    env = make_env(env_name, cfg.episode_length)
    model, stats = train(cfg, env, progress=False)
    return cfg, env, model, stats


@pytest.fixture(scope='module')
def pendulum_run():
    return trained_run('pendulum')


@pytest.fixture(scope='module')
def cartpole_run():
    return trained_run('cartpole')


@pytest.mark.slow
def test_pendulum_spc_baseline_swings_up(pendulum_run):
    cfg, env, _, _ = pendulum_run
    report = evaluate(cfg, env, None, 'spc', 100, 0.0, seed=1234)
    print(f"  SPC success {report.success_rate:.0%}, cost {report.mean_cost:.3f}")
    assert report.success_rate >= 0.8


@pytest.mark.slow
def test_pendulum_policy_swings_up(pendulum_run):
    cfg, env, model, stats = pendulum_run
    report = evaluate(cfg, env, model, 'gpc', 100, 1.0, seed=1234)
    print(f"  GPC success {report.success_rate:.0%}, cost {report.mean_cost:.3f}")
    assert report.success_rate >= 0.8
    assert stats[-1].mean_cost < stats[0].mean_cost


@pytest.mark.slow
def test_euler_refinement_on_trained_policy(pendulum_run):
    _, env, model, _ = pendulum_run
    rng = np.random.default_rng(21)
    y = np.stack([env.observe(env.sample_initial_state(rng)) for _ in range(200)])
    noise = rng.standard_normal((200, model.flat_dim))
    coarse = sample_batch(model, y, noise, 0.1)
    fine = sample_batch(model, y, noise, 0.01)
    rms = np.sqrt(np.mean((coarse - fine) ** 2))
    print(f"  RMS knot difference between Euler steps 0.1 and 0.01: {rms:.4f}")
    assert rms < 0.05


@pytest.mark.slow
@pytest.mark.parametrize('run', ['pendulum_run', 'cartpole_run'])
def test_gpc_plus_matches_the_best_mode(run, request):
    cfg, env, model, _ = request.getfixturevalue(run)
    costs = {mode: evaluate(cfg, env, model, mode, 100, 1.0, seed=99).mean_cost
             for mode in ('spc', 'gpc', 'gpc+')}
    print(f"  {env.name} mean costs: {costs}")
    assert costs['gpc+'] <= 1.05 * costs['spc']
    assert costs['gpc+'] <= 1.05 * costs['gpc']


@pytest.mark.slow
def test_warm_start_ablation():
    # full double cart-pole profile: 50 iterations of 256 environments
    cfg, env, model, _ = trained_run('double_cartpole')
    cold, warm = warm_start_study(cfg, env, model, episodes=50, seed=7)
    print(f"  roughness cold {cold['roughness']:.4f}, warm {warm['roughness']:.4f}")
    assert warm['roughness'] < cold['roughness']
    assert warm['success_rate'] >= cold['success_rate']


@pytest.mark.slow
def test_nav2d_policy_is_multimodal():
    cfg, env, model, _ = trained_run('nav2d')
    cold, warm = multimodality_study(env, model, seed=0, ode_step=cfg.ode_step)
    assert 0.2 <= cold['upper_fraction'] <= 0.8
    assert 0.2 <= cold['lower_fraction'] <= 0.8
    assert warm['persistence'] >= 0.95


@pytest.mark.slow
def test_cvar_trades_nominal_cost_for_robustness():
    cfg = GpcConfig.for_env('pendulum', workers=4)
    rows = dr_study(cfg, episodes=100, seed=11, num_domains=8, beta=0.25)
    by_key = {(r['variant'], r['plant']): r for r in rows}
    assert by_key[('average', 'nominal')]['mean_cost'] <= by_key[('cvar', 'nominal')]['mean_cost']
    assert by_key[('cvar', 'shifted')]['cost_ratio'] < by_key[('average', 'shifted')]['cost_ratio']
