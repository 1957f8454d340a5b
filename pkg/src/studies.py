"""
Experiment Studies
Warm-start ablation, domain-randomization robustness, nav2d multimodality
and planning-latency / throughput benchmarks. Each study returns flat rows
ready for CSV export.
"""

import logging
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.envs import Environment, make_env, shifted_domain, stack_domains
from src.errors import ContractViolation
from src.flow import FlowModel, init_flow_model, sample_batch, warm_start_noise
from src.gpc import GpcConfig, collect_iteration, evaluate, make_planner, train
from src.rng import substream
from src.spc import ActionSequence, shift_knots
from src.utils import latency_stats

logger = logging.getLogger(__name__)

Row = Dict[str, object]


def warm_start_study(cfg: GpcConfig, env: Environment, model: FlowModel, episodes: int,
                     seed: int, alphas: Sequence[float] = (0.0, 1.0)) -> List[Row]:
    """
    Deploy the policy directly at several warm-start levels on matched seeds

    Returns:
        One row per alpha: mean cost, success rate and action roughness
    """
    rows = []
    for alpha in alphas:
        report = evaluate(cfg, env, model, 'gpc', episodes, alpha, seed)
        rows.append({'alpha': alpha, 'mean_cost': report.mean_cost,
                     'success_rate': report.success_rate, 'roughness': report.mean_roughness})
        logger.info("warm start alpha=%.2f: roughness %.4f, success %.0f%%",
                    alpha, report.mean_roughness, 100 * report.success_rate)
    return rows


def dr_study(cfg: GpcConfig, episodes: int, seed: int, shift: float = 0.5,
             num_domains: int = 8, beta: float = 0.25, progress: bool = False) -> List[Row]:
    """
    Train without randomization, with Average and with CVaR(beta) over
    randomized domains, then evaluate each policy on the nominal plant and on
    an out-of-range shifted plant

    Args:
        cfg: Base configuration (environment, budgets)
        episodes: Evaluation episodes per (policy, plant)
        seed: Evaluation seed
        shift: Relative parameter shift of the test plant
        num_domains: N_D for the randomized variants
        beta: CVaR level
        progress: Show training progress bars

    Returns:
        One row per (variant, plant) with mean cost, success and the
        shifted/nominal cost ratio
    """
    variants = {
        'no_dr': replace(cfg, num_domains=1, risk='average'),
        'average': replace(cfg, num_domains=num_domains, risk='average'),
        'cvar': replace(cfg, num_domains=num_domains, risk='cvar', cvar_beta=beta),
    }
    env = make_env(cfg.env, cfg.episode_length)
    plants = {'nominal': env.nominal, 'shifted': shifted_domain(env, shift)}
    rows = []
    for name, variant in variants.items():
        model, _ = train(variant, env, progress=progress)
        costs = {}
        for plant, params in plants.items():
            report = evaluate(variant, env, model, 'gpc', episodes, cfg.alpha, seed,
                              true_params=params)
            costs[plant] = report.mean_cost
            rows.append({'variant': name, 'plant': plant, 'mean_cost': report.mean_cost,
                         'success_rate': report.success_rate})
        ratio = costs['shifted'] / costs['nominal'] if costs['nominal'] > 0 else float('inf')
        for row in rows[-2:]:
            row['cost_ratio'] = ratio
        logger.info("%s: nominal %.4f, shifted %.4f (ratio %.3f)", name, costs['nominal'],
                    costs['shifted'], ratio)
    return rows


def route_fractions(env: Environment, sides: np.ndarray) -> Dict[str, float]:
    sides = np.asarray(sides)
    return {'upper': float(np.mean(sides > 0)), 'lower': float(np.mean(sides < 0))}


def multimodality_study(env: Environment, model: FlowModel, seed: int, draws: int = 1000,
                        resamples: int = 200, ode_step: float = 0.1) -> List[Row]:
    """
    Homotopy split of policy samples at the symmetric nav2d start, and how
    often consecutive re-samples at that state keep their class

    Re-sampling uses the previous sample as the warm start, unshifted, since
    the state does not advance.

    Returns:
        One row per alpha in (0, 1): class fractions and persistence
    """
    if not hasattr(env, 'route_side'):
        raise ContractViolation(f"{env.name} has no homotopy classes")
    state = env.nominal_initial_state()
    y = env.observe(state)[None]
    d = model.flat_dim

    rng = substream(seed, 'modes')
    split = sample_batch(model, np.repeat(y, draws, axis=0), rng.standard_normal((draws, d)),
                         ode_step)
    fractions = route_fractions(env, env.route_side(env.nominal, state, split))

    rows = []
    for alpha in (0.0, 1.0):
        chain_rng = substream(seed, 'persistence', int(alpha))
        current = ActionSequence(split[0], model.horizon_steps)
        sides = [int(env.route_side(env.nominal, state, current.knots))]
        for _ in range(resamples):
            noise = warm_start_noise(current, alpha, chain_rng)
            current = ActionSequence(sample_batch(model, y, noise[None], ode_step)[0],
                                     model.horizon_steps)
            sides.append(int(env.route_side(env.nominal, state, current.knots)))
        sides = np.array(sides)
        persistence = float(np.mean(sides[1:] == sides[:-1]))
        row = {'alpha': alpha, 'persistence': persistence}
        row.update({f'{k}_fraction': v for k, v in fractions.items()} if alpha == 0.0
                   else {f'{k}_fraction': v for k, v in route_fractions(env, sides).items()})
        rows.append(row)
        logger.info("alpha=%.0f: upper %.2f / lower %.2f, persistence %.3f", alpha,
                    row['upper_fraction'], row['lower_fraction'], persistence)
    return rows


def plan_latency(cfg: GpcConfig, env: Environment, model: Optional[FlowModel], mode: str,
                 steps: int, seed: int) -> List[float]:
    """Wall time of each single-environment planning call over `steps` steps"""
    domains = stack_domains([env.nominal])
    planner = make_planner(mode, cfg, env, model, domains, cfg.alpha)
    spec = env.spec
    times = []
    episode = 0
    while len(times) < steps:
        rng = substream(seed, 'bench-init', episode)
        start = env.sample_initial_state(rng)
        q, v = start.q[None], start.v[None]
        prev = np.clip(cfg.sigma * rng.standard_normal((1, spec.num_knots, spec.action_dim)),
                       -1.0, 1.0)
        for k in range(min(spec.episode_steps, steps - len(times))):
            gens = [substream(seed, 'bench', episode, k)]
            y = env.observe_arrays(q, v)
            t0 = time.perf_counter()
            knots, _, _ = planner.plan(prev, q, v, y, gens, k == 0)
            times.append(time.perf_counter() - t0)
            with np.errstate(over='ignore', invalid='ignore'):
                q, v = env.advance(env.nominal, q, v, knots[:, 0, :] * env.limits)
            if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
                break
            prev = shift_knots(knots, spec.horizon_steps)
        episode += 1
    return times


def benchmark(cfg: GpcConfig, env: Environment, model: Optional[FlowModel], steps: int = 1000,
              worker_counts: Sequence[int] = (1, 2, 4), seed: int = 0) -> Dict[str, List[Row]]:
    """
    Planning latency per mode and collection throughput per worker count

    An untrained model is used when none is given; latency does not depend
    on the weights.

    Returns:
        {'latency': rows per mode, 'throughput': rows per worker count}
    """
    if model is None:
        model = init_flow_model(env.spec, substream(seed, 'init'), cfg.hidden_layers,
                                cfg.hidden_width, cfg.activation)
    latency = []
    for mode in ('spc', 'gpc', 'gpc+'):
        stats = latency_stats(plan_latency(cfg, env, model, mode, steps, seed))
        latency.append({'mode': mode, **stats})

    throughput = []
    short = make_env(env.name, episode_length=0.5)
    for workers in worker_counts:
        run_cfg = replace(cfg, workers=workers)
        t0 = time.perf_counter()
        _, stats = collect_iteration(run_cfg, short, model, substream(seed, 'bench-collect'))
        elapsed = time.perf_counter() - t0
        throughput.append({'workers': workers, 'rollouts': stats.num_rollouts,
                           'seconds': elapsed, 'rollouts_per_s': stats.num_rollouts / elapsed})
    return {'latency': latency, 'throughput': throughput}
