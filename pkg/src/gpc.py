"""
Generative Predictive Control
Iterated SPC data collection with mixed Gaussian / policy proposals, flow
fitting, and the evaluation harness comparing SPC, GPC and GPC+
"""

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

import config
from src.envs import DomainParams, Environment, make_env, randomize_domains, stack_domains
from src.errors import ConfigError, ContractViolation, GpcError
from src.net import ACTIVATIONS
from src.flow import FlowModel, TrainRecord, fit, init_flow_model, sample_batch, warm_start_noise
from src.rng import substream
from src.spc import (RISKS, WEIGHTINGS, ActionSequence, RiskAggregator, WeightingFn,
                     proposal_knots, shift_knots, spc_update_batch)

logger = logging.getLogger(__name__)

MODES = ('spc', 'gpc', 'gpc+')


@dataclass
class GpcConfig:
    """Everything a training or evaluation run needs besides the seed streams"""

    env: str = 'pendulum'
    seed: int = config.SEED
    workers: int = config.WORKERS

    # Data collection
    num_iterations: int = 10
    num_envs: int = 128
    num_spc_samples: int = 8
    num_policy_samples: int = 2
    episode_length: float = 4.0
    sigma: float = config.SIGMA
    weighting: str = config.WEIGHTING
    temperature: float = config.TEMPERATURE
    num_elites: int = config.NUM_ELITES
    tsallis_r: float = config.TSALLIS_R
    risk: str = config.RISK
    cvar_beta: float = config.CVAR_BETA
    num_domains: int = config.NUM_DOMAINS
    domain_scale: float = config.DOMAIN_SCALE

    # Flow fitting
    epochs: int = 10
    batch_size: int = config.BATCH_SIZE
    learning_rate: float = config.LEARNING_RATE
    hidden_layers: int = config.HIDDEN_LAYERS
    hidden_width: int = config.HIDDEN_WIDTH
    activation: str = config.ACTIVATION
    cosine_gamma: float = config.COSINE_GAMMA
    ode_step: float = config.ODE_STEP

    # Evaluation
    eval_episodes: int = config.EVAL_EPISODES
    eval_samples: int = config.EVAL_SAMPLES
    alpha: float = config.WARM_START

    @classmethod
    def for_env(cls, env: str, **overrides) -> 'GpcConfig':
        """Defaults for an environment profile, then explicit overrides"""
        if env not in config.ENV_PROFILES:
            raise ConfigError(
                f"Unknown environment '{env}' (choose from {', '.join(config.ENV_PROFILES)})"
            )
        profile = {k: v for k, v in config.ENV_PROFILES[env].items()
                   if k not in ('horizon', 'num_knots')}
        profile.update(overrides)
        cfg = cls(env=env, **profile)
        cfg.validate()
        return cfg

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def validate(self):
        """Range checks; raises ConfigError naming the offending key"""
        if self.env not in config.ENV_PROFILES:
            raise ConfigError(f"env: unknown environment '{self.env}'")
        positive = ('num_iterations', 'num_envs', 'num_spc_samples', 'num_domains', 'batch_size',
                    'hidden_layers', 'hidden_width', 'eval_episodes', 'eval_samples', 'workers')
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1 (got {getattr(self, key)})")
        for key in ('num_policy_samples', 'epochs', 'seed'):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0 (got {getattr(self, key)})")
        for key in ('episode_length', 'sigma', 'temperature', 'learning_rate', 'tsallis_r'):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be > 0 (got {getattr(self, key)})")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting: '{self.weighting}' not in {WEIGHTINGS}")
        if self.risk not in RISKS:
            raise ConfigError(f"risk: '{self.risk}' not in {RISKS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation: '{self.activation}' not in {ACTIVATIONS}")
        if self.weighting == 'tsallis' and self.tsallis_r <= 1.0:
            raise ConfigError("tsallis_r: must exceed 1")
        if self.num_elites < 1:
            raise ConfigError("num_elites: must be >= 1")
        if not 0.0 <= self.cvar_beta < 1.0:
            raise ConfigError("cvar_beta: must lie in [0, 1)")
        if not 0.0 <= self.domain_scale < 1.0:
            raise ConfigError("domain_scale: must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: must lie in [0, 1]")
        if self.cosine_gamma < 0:
            raise ConfigError("cosine_gamma: must be >= 0")
        steps = round(1.0 / self.ode_step) if self.ode_step > 0 else 0
        if steps < 1 or abs(steps * self.ode_step - 1.0) > 1e-9:
            raise ConfigError(f"ode_step: {self.ode_step} must divide 1 evenly")
        return self

    def weighting_fn(self) -> WeightingFn:
        return WeightingFn(self.weighting, self.temperature, self.num_elites, self.tsallis_r)

    def risk_aggregator(self) -> RiskAggregator:
        beta = self.cvar_beta if self.risk == 'cvar' else 0.0
        return RiskAggregator(self.risk, beta, self.num_domains)

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class IterationStats:
    """Per-iteration training curve entry"""

    iteration: int
    mean_cost: float
    fit_losses: List[float] = field(default_factory=list)
    policy_best_fraction: float = 0.0
    wall_time: float = 0.0
    num_rollouts: int = 0
    num_records: int = 0
    num_diverged: int = 0

    @property
    def fit_loss(self) -> float:
        return self.fit_losses[-1] if self.fit_losses else float('nan')

    def row(self) -> Dict[str, float]:
        return {
            'iteration': self.iteration,
            'mean_cost': self.mean_cost,
            'fit_loss': self.fit_loss,
            'policy_best_fraction': self.policy_best_fraction,
            'wall_time': self.wall_time,
        }


@dataclass
class EpisodeBatch:
    """Lockstep episodes: per-step logs (NaN after divergence) and collected records"""

    episode_ids: np.ndarray
    q: np.ndarray  # (B, T, nq), state before the action
    v: np.ndarray
    observations: np.ndarray  # (B, T, obs_dim)
    actions: np.ndarray  # (B, T, m), actuator units
    costs: np.ndarray  # (B, T), running cost
    final_q: np.ndarray  # (B, nq)
    final_v: np.ndarray
    diverged: np.ndarray  # (B,)
    records: List[TrainRecord] = field(default_factory=list)
    policy_best: int = 0
    planned: int = 0
    num_rollouts: int = 0

    @classmethod
    def concat(cls, parts: List['EpisodeBatch']) -> 'EpisodeBatch':
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(
            episode_ids=cat('episode_ids'), q=cat('q'), v=cat('v'),
            observations=cat('observations'), actions=cat('actions'), costs=cat('costs'),
            final_q=cat('final_q'), final_v=cat('final_v'), diverged=cat('diverged'),
            records=[r for p in parts for r in p.records],
            policy_best=sum(p.policy_best for p in parts),
            planned=sum(p.planned for p in parts),
            num_rollouts=sum(p.num_rollouts for p in parts),
        )

    def states_after(self) -> np.ndarray:
        """(B, T, nq) positions reached after each action"""
        return np.concatenate([self.q[:, 1:], self.final_q[:, None]], axis=1)


@dataclass
class EvalReport:
    """Per-episode costs, success and smoothness for one deployment mode"""

    mode: str
    alpha: float
    episode_costs: List[float]
    successes: List[bool]
    roughness: List[float]
    episodes: Optional[EpisodeBatch] = None

    @property
    def mean_cost(self) -> float:
        finite = [c for c in self.episode_costs if np.isfinite(c)]
        return float(np.mean(finite)) if finite else float('inf')

    @property
    def std_cost(self) -> float:
        finite = [c for c in self.episode_costs if np.isfinite(c)]
        return float(np.std(finite)) if finite else float('nan')

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else 0.0

    @property
    def mean_roughness(self) -> float:
        values = [r for r in self.roughness if np.isfinite(r)]
        return float(np.mean(values)) if values else float('nan')

    def rows(self) -> List[Dict[str, object]]:
        return [
            {'episode': i, 'mode': self.mode, 'alpha': self.alpha, 'cost_per_step': c,
             'success': int(s), 'roughness': r}
            for i, (c, s, r) in enumerate(zip(self.episode_costs, self.successes, self.roughness))
        ]

    def summary(self) -> Dict[str, float]:
        return {
            'mode': self.mode,
            'episodes': len(self.episode_costs),
            'mean_cost': self.mean_cost,
            'std_cost': self.std_cost,
            'success_rate': self.success_rate,
            'roughness': self.mean_roughness,
        }


# ============================================================
# PLANNERS
# ============================================================

class SamplingPlanner:
    """
    SPC update with Gaussian proposals, optionally mixed with policy samples
    (collection and GPC+). Policy samples start from pure noise.
    """

    def __init__(self, cfg: GpcConfig, env: Environment, model: Optional[FlowModel],
                 domains: DomainParams, num_gaussian: int, num_policy: int):
        if num_policy > 0 and model is None:
            raise ContractViolation("Policy samples requested but no flow model was given")
        self.cfg = cfg
        self.env = env
        self.model = model
        self.domains = domains
        self.num_gaussian = num_gaussian
        self.num_policy = num_policy
        self.fn = cfg.weighting_fn()
        self.agg = cfg.risk_aggregator()
        self.num_domains = np.size(next(iter(domains.values.values())))

    @property
    def samples_per_step(self) -> int:
        return (self.num_gaussian + self.num_policy) * self.num_domains

    def plan(self, prev: np.ndarray, q: np.ndarray, v: np.ndarray, y: np.ndarray,
             gens: List[np.random.Generator], first: bool):
        """
        Returns:
            Tuple of (knots to apply (b, K, m), valid (b,), best-from-policy (b,))
        """
        samples = np.stack([proposal_knots(p, self.cfg.sigma, self.num_gaussian, g)
                            for p, g in zip(prev, gens)])
        if self.num_policy:
            policy = policy_samples(self.model, prev, y, gens, self.num_policy, 0.0,
                                    self.cfg.ode_step)
            samples = np.concatenate([samples, policy], axis=1)
        new, _, _, best, valid = spc_update_batch(self.env, self.domains, self.fn, self.agg,
                                                  prev, q, v, samples)
        return new, valid, best >= self.num_gaussian


class PolicyPlanner:
    """Direct deployment: one warm-started flow sample per step"""

    samples_per_step = 0

    def __init__(self, cfg: GpcConfig, model: FlowModel, alpha: float):
        if model is None:
            raise ContractViolation("GPC deployment needs a flow model")
        if not 0.0 <= alpha <= 1.0:
            raise ContractViolation(f"Warm-start level {alpha} outside [0, 1]")
        self.cfg = cfg
        self.model = model
        self.alpha = alpha

    def plan(self, prev, q, v, y, gens, first):
        # no previous sequence exists before the first step
        alpha = 0.0 if first else self.alpha
        knots = policy_samples(self.model, prev, y, gens, 1, alpha, self.cfg.ode_step)[:, 0]
        b = knots.shape[0]
        return knots, np.ones(b, dtype=bool), np.ones(b, dtype=bool)


def policy_samples(model: FlowModel, prev: np.ndarray, y: np.ndarray,
                   gens: List[np.random.Generator], n: int, alpha: float, dt: float) -> np.ndarray:
    """n flow samples per row, warm-started from the (shifted) prev knots"""
    noise = np.stack([
        warm_start_noise(ActionSequence(p, model.horizon_steps), alpha, g, size=n)
        for p, g in zip(prev, gens)
    ])
    b, d = noise.shape[0], model.flat_dim
    knots = sample_batch(model, np.repeat(y, n, axis=0), noise.reshape(b * n, d), dt)
    return knots.reshape(b, n, model.num_knots, model.action_dim)


def make_planner(mode: str, cfg: GpcConfig, env: Environment, model: Optional[FlowModel],
                 domains: DomainParams, alpha: float = 0.0):
    """Planner for 'collect' or one of the deployment modes"""
    if mode == 'collect':
        return SamplingPlanner(cfg, env, model, domains, cfg.num_spc_samples,
                               cfg.num_policy_samples)
    if mode == 'spc':
        return SamplingPlanner(cfg, env, None, domains, cfg.eval_samples, 0)
    if mode == 'gpc+':
        half = max(cfg.eval_samples // 2, 1)
        return SamplingPlanner(cfg, env, model, domains, half, max(cfg.eval_samples - half, 1))
    if mode == 'gpc':
        return PolicyPlanner(cfg, model, alpha)
    raise ContractViolation(f"Unknown mode '{mode}' (choose from {MODES})")


# ============================================================
# EPISODE RUNNER
# ============================================================

def run_episodes(args) -> EpisodeBatch:
    """
    Run a chunk of episodes in lockstep. Top-level so it can be shipped to
    worker processes.

    Args:
        args: Tuple of (cfg, env, model, mode, alpha, domains, true_params,
              base_seed, purpose, episode_ids, keep_records)

    Returns:
        EpisodeBatch for the chunk, records sorted by (episode, step)
    """
    (cfg, env, model, mode, alpha, domains, true_params, base_seed, purpose,
     episode_ids, keep_records) = args
    spec = env.spec
    K, m, H, T = spec.num_knots, spec.action_dim, spec.horizon_steps, spec.episode_steps
    B = len(episode_ids)
    planner = make_planner(mode, cfg, env, model, domains, alpha)

    q, v, prev = [], [], []
    for e in episode_ids:
        rng = substream(base_seed, f'{purpose}-init', e)
        start = env.sample_initial_state(rng)
        q.append(start.q)
        v.append(start.v)
        prev.append(np.clip(cfg.sigma * rng.standard_normal((K, m)), -1.0, 1.0))
    q, v, prev = np.stack(q), np.stack(v), np.stack(prev)

    log_q = np.full((B, T, spec.nq), np.nan)
    log_v = np.full((B, T, spec.nq), np.nan)
    log_y = np.full((B, T, spec.obs_dim), np.nan)
    log_u = np.full((B, T, m), np.nan)
    log_c = np.full((B, T), np.nan)
    alive = np.ones(B, dtype=bool)
    records: List[TrainRecord] = []
    policy_best = planned = rollouts = 0

    for k in range(T):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        gens = [substream(base_seed, purpose, episode_ids[i], k) for i in idx]
        y = env.observe_arrays(q[idx], v[idx])
        knots, valid, from_policy = planner.plan(prev[idx], q[idx], v[idx], y, gens, k == 0)
        rollouts += idx.size * planner.samples_per_step

        if not valid.all():
            lost = idx[~valid]
            logger.warning("%s: every sample diverged for episodes %s at step %d",
                           env.name, list(episode_ids[lost]), k)
            alive[lost] = False
        idx, knots, y = idx[valid], knots[valid], y[valid]
        policy_best += int(from_policy[valid].sum())
        planned += idx.size

        if keep_records:
            records.extend(TrainRecord(y[j], knots[j], prev[i], int(episode_ids[i]), k)
                           for j, i in enumerate(idx))

        u = env.clamp_action(knots[:, 0, :] * env.limits)
        log_q[idx, k], log_v[idx, k], log_y[idx, k] = q[idx], v[idx], y
        log_u[idx, k] = u
        log_c[idx, k] = env.running_cost(q[idx], v[idx], u)

        with np.errstate(over='ignore', invalid='ignore'):
            q_next, v_next = env.advance(true_params, q[idx], v[idx], u)
        finite = np.all(np.isfinite(q_next), axis=-1) & np.all(np.isfinite(v_next), axis=-1)
        if not finite.all():
            logger.warning("%s: episodes %s diverged at step %d", env.name,
                           list(episode_ids[idx[~finite]]), k)
            alive[idx[~finite]] = False
        q[idx], v[idx] = q_next, v_next
        prev[idx] = shift_knots(knots, H)

    records.sort(key=lambda r: (r.env_id, r.step))
    return EpisodeBatch(
        episode_ids=np.asarray(episode_ids), q=log_q, v=log_v, observations=log_y,
        actions=log_u, costs=log_c, final_q=q, final_v=v, diverged=~alive, records=records,
        policy_best=policy_best, planned=planned, num_rollouts=rollouts,
    )


def _run_parallel(cfg: GpcConfig, env, model, mode, alpha, domains, true_params, base_seed,
                  purpose, num_episodes, keep_records) -> EpisodeBatch:
    chunks = [c for c in np.array_split(np.arange(num_episodes), cfg.workers) if c.size]
    jobs = [(cfg, env, model, mode, alpha, domains, true_params, base_seed, purpose, c,
             keep_records) for c in chunks]
    if len(jobs) == 1:
        parts = [run_episodes(jobs[0])]
    else:
        parts = process_map(run_episodes, jobs, max_workers=cfg.workers, chunksize=1,
                            disable=True)
    return EpisodeBatch.concat(parts)


# ============================================================
# TRAINING
# ============================================================

def collect_iteration(cfg: GpcConfig, env: Environment, model: Optional[FlowModel],
                      rng: np.random.Generator) -> Tuple[List[TrainRecord], IterationStats]:
    """
    Run N_E SPC episodes and record (observation, new mean, previous mean)

    Args:
        cfg: Run configuration
        env: Environment (its episode length sets the step count)
        model: Flow model for policy samples; may be None only when N_P = 0
        rng: Generator for this iteration's domain draws and seed streams

    Returns:
        Tuple of (dataset ordered by environment then step, partial stats)
    """
    if model is None and cfg.num_policy_samples > 0:
        raise ContractViolation("num_policy_samples > 0 requires a flow model")
    base_seed = int(rng.integers(0, 2 ** 63 - 1))
    domains = stack_domains(randomize_domains(env, cfg.num_domains, cfg.domain_scale, rng))
    batch = _run_parallel(cfg, env, model, 'collect', 0.0, domains, env.nominal, base_seed,
                          'collect', cfg.num_envs, keep_records=True)

    steps = np.isfinite(batch.costs)
    mean_cost = float(np.sum(batch.costs[steps]) / max(steps.sum(), 1))
    stats = IterationStats(
        iteration=0,
        mean_cost=mean_cost,
        policy_best_fraction=batch.policy_best / max(batch.planned, 1),
        num_rollouts=batch.num_rollouts,
        num_records=len(batch.records),
        num_diverged=int(batch.diverged.sum()),
    )
    return batch.records, stats


def train(cfg: GpcConfig, env: Optional[Environment] = None,
          progress: bool = True) -> Tuple[FlowModel, List[IterationStats]]:
    """
    Alternate data collection and flow fitting for cfg.num_iterations rounds

    Args:
        cfg: Run configuration (cfg.seed drives every random stream)
        env: Environment; built from cfg.env when omitted
        progress: Show a tqdm bar over iterations

    Returns:
        Tuple of (final model, per-iteration stats)
    """
    cfg.validate()
    env = env or make_env(cfg.env, cfg.episode_length)
    model = init_flow_model(env.spec, substream(cfg.seed, 'init'), cfg.hidden_layers,
                            cfg.hidden_width, cfg.activation)
    history = []

    for i in tqdm(range(cfg.num_iterations), desc=f"GPC {env.name}", disable=not progress):
        t0 = time.perf_counter()
        try:
            dataset, stats = collect_iteration(cfg, env, model, substream(cfg.seed, 'collect', i))
            model, losses = fit(model, dataset, cfg.epochs, cfg.batch_size, cfg.learning_rate,
                                substream(cfg.seed, 'fit', i), cfg.cosine_gamma)
        except GpcError as exc:
            raise type(exc)(f"iteration {i}: {exc}") from exc

        stats.iteration = i
        stats.fit_losses = losses
        stats.wall_time = time.perf_counter() - t0
        history.append(stats)
        logger.info("iteration %d: mean cost %.4f | fit loss %.4f | policy best %.1f%% | %.1fs",
                    i, stats.mean_cost, stats.fit_loss, 100 * stats.policy_best_fraction,
                    stats.wall_time)

    return model, history


# ============================================================
# EVALUATION
# ============================================================

def roughness(actions: np.ndarray) -> np.ndarray:
    """Mean norm of consecutive action differences per episode, (B, T, m) -> (B,)"""
    diffs = np.linalg.norm(np.diff(actions, axis=1), axis=-1)
    if diffs.shape[1] == 0:
        return np.zeros(actions.shape[0])
    return np.mean(diffs, axis=1)


def evaluate(cfg: GpcConfig, env: Environment, model: Optional[FlowModel], mode: str,
             episodes: int, alpha: float, seed: int,
             true_params: Optional[DomainParams] = None) -> EvalReport:
    """
    Deploy a controller on freshly seeded episodes

    Args:
        cfg: Run configuration (sampling budget, weighting, domains)
        env: Environment
        model: Flow model; required for 'gpc' and 'gpc+', ignored for 'spc'
        mode: 'spc', 'gpc' or 'gpc+'
        episodes: Number of episodes
        alpha: Warm-start level for 'gpc'
        seed: Evaluation seed
        true_params: Physical parameters of the simulated plant (nominal by default)

    Returns:
        EvalReport; diverged episodes have +inf cost and count as failures
    """
    if mode not in MODES:
        raise ContractViolation(f"Unknown mode '{mode}' (choose from {MODES})")
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"Warm-start level {alpha} outside [0, 1]")
    if mode == 'spc':
        model = None
    elif model is None:
        raise ContractViolation(f"Mode '{mode}' needs a trained model")

    domains = stack_domains(randomize_domains(env, cfg.num_domains, cfg.domain_scale,
                                              substream(seed, 'eval-domains')))
    batch = _run_parallel(cfg, env, model, mode, alpha, domains, true_params or env.nominal,
                          seed, 'eval', episodes, keep_records=False)

    logged = np.isfinite(batch.costs)
    per_step = np.where(logged, batch.costs, 0.0).sum(axis=1) / np.maximum(logged.sum(axis=1), 1)
    costs = np.where(batch.diverged, np.inf, per_step)
    successes = env.success(batch.states_after(), None) & ~batch.diverged
    rough = np.where(batch.diverged, np.nan, roughness(batch.actions))
    return EvalReport(
        mode=mode,
        alpha=alpha,
        episode_costs=[float(c) for c in costs],
        successes=[bool(s) for s in successes],
        roughness=[float(r) for r in rough],
        episodes=batch,
    )
