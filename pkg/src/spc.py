"""
Sampling-Based Predictive Control
Gaussian proposals, batched rollouts, weighting functions (MPPI, predictive
sampling, CEM, Tsallis), risk-aware domain aggregation and the Monte-Carlo
score estimator behind the mean update
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from src.envs import DomainParams, EnvSpec, EnvState, Environment, stack_domains
from src.errors import ContractViolation, NoValidRollout

logger = logging.getLogger(__name__)

WEIGHTINGS = ('mppi', 'ps', 'cem', 'tsallis')
RISKS = ('average', 'worst', 'cvar')

GAUSSIAN = 'gaussian'
POLICY = 'policy'


def shift_knots(knots: np.ndarray, horizon_steps: int, steps: int = 1) -> np.ndarray:
    """
    Time-shift zero-order-hold knots by whole control steps

    Each knot loses the share of its interval that has elapsed and takes it
    from the next knot; the last knot is repeated past the horizon.

    Args:
        knots: (..., K, m) knot values
        horizon_steps: Control steps spanned by the knots
        steps: Control steps to shift

    Returns:
        Shifted knots with the same shape
    """
    num_knots = knots.shape[-2]
    frac = min(steps * num_knots / max(horizon_steps, 1), 1.0)
    ahead = np.concatenate([knots[..., 1:, :], knots[..., -1:, :]], axis=-2)
    return (1.0 - frac) * knots + frac * ahead


@dataclass
class ActionSequence:
    """Normalized knot matrix (num_knots x action_dim) held over the horizon"""

    knots: np.ndarray
    horizon_steps: int

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        if self.knots.ndim == 1:
            self.knots = self.knots[:, None]
        if self.knots.ndim != 2 or self.knots.shape[0] < 1:
            raise ContractViolation(f"Knots must be (num_knots, action_dim), got {self.knots.shape}")
        if self.horizon_steps < 0:
            raise ContractViolation("horizon_steps must be non-negative")

    @property
    def num_knots(self) -> int:
        return self.knots.shape[0]

    @property
    def action_dim(self) -> int:
        return self.knots.shape[1]

    @classmethod
    def zeros(cls, spec: EnvSpec) -> 'ActionSequence':
        return cls(np.zeros((spec.num_knots, spec.action_dim)), spec.horizon_steps)

    @classmethod
    def from_flat(cls, flat: np.ndarray, num_knots: int, action_dim: int,
                  horizon_steps: int) -> 'ActionSequence':
        return cls(np.asarray(flat, dtype=np.float64).reshape(num_knots, action_dim), horizon_steps)

    def flat(self) -> np.ndarray:
        return self.knots.ravel().copy()


@dataclass(frozen=True)
class WeightingFn:
    """Weighting function g(J) selecting the SPC variant"""

    kind: str = 'mppi'
    temperature: float = 1.0
    num_elites: int = 2
    r: float = 1.5

    def __post_init__(self):
        if self.kind not in WEIGHTINGS:
            raise ContractViolation(f"Unknown weighting '{self.kind}' (choose from {WEIGHTINGS})")
        if self.kind in ('mppi', 'tsallis') and self.temperature <= 0:
            raise ContractViolation("Temperature must be positive")
        if self.kind == 'cem' and self.num_elites < 1:
            raise ContractViolation("CEM needs at least one elite")
        if self.kind == 'tsallis' and self.r <= 1.0:
            raise ContractViolation("Tsallis r must exceed 1")


@dataclass(frozen=True)
class RiskAggregator:
    """Aggregation of per-domain costs into one cost per sample"""

    kind: str = 'average'
    beta: float = 0.0
    num_domains: int = 1

    def __post_init__(self):
        if self.kind not in RISKS:
            raise ContractViolation(f"Unknown risk aggregator '{self.kind}' (choose from {RISKS})")
        if not 0.0 <= self.beta < 1.0:
            raise ContractViolation("CVaR beta must lie in [0, 1)")
        if self.num_domains < 1:
            raise ContractViolation("num_domains must be at least 1")


@dataclass
class RolloutBatch:
    """Samples of one SPC step with their per-domain and aggregated costs"""

    sequences: np.ndarray  # (N, K, m)
    costs: np.ndarray  # (N, N_D)
    aggregated: np.ndarray  # (N,)
    sources: np.ndarray  # (N,) 'gaussian' | 'policy'
    best_index: int

    @property
    def best_from_policy(self) -> bool:
        return self.sources[self.best_index] == POLICY


def weight(fn: WeightingFn, costs: np.ndarray) -> np.ndarray:
    """
    Unnormalized sample weights g(J) along the last axis

    Args:
        fn: Weighting function
        costs: (..., N) costs; +inf marks a diverged rollout

    Returns:
        Non-negative weights, zero for diverged samples

    Raises:
        NoValidRollout: if every cost in a row is +inf
    """
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not np.all(finite.any(axis=-1)):
        raise NoValidRollout("no valid rollout: every sample diverged")

    baseline = np.min(np.where(finite, costs, np.inf), axis=-1, keepdims=True)
    delta = np.where(finite, costs - baseline, 0.0)

    if fn.kind == 'mppi':
        return np.where(finite, np.exp(-delta / fn.temperature), 0.0)

    if fn.kind == 'tsallis':
        base = np.maximum(1.0 - (fn.r - 1.0) * delta / fn.temperature, 0.0)
        return np.where(finite, base ** (1.0 / (fn.r - 1.0)), 0.0)

    if fn.kind == 'ps':
        best = np.argmin(np.where(finite, costs, np.inf), axis=-1)
        return (np.arange(costs.shape[-1]) == best[..., None]).astype(np.float64)

    # cem: equal weight on the lowest-cost elites, ties by index
    order = np.argsort(np.where(finite, costs, np.inf), axis=-1, kind='stable')
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(costs.shape[-1]) + np.zeros_like(order), axis=-1)
    return ((ranks < fn.num_elites) & finite).astype(np.float64)


def normalize_weights(weights: np.ndarray) -> np.ndarray:
    return weights / np.sum(weights, axis=-1, keepdims=True)


def update_mean(prev, samples, weights: np.ndarray, clamp: bool = True):
    """
    Weighted mean update U_k = U_{k-1} + sum g_i (U_i - U_{k-1}) / sum g_i

    Args:
        prev: ActionSequence or (..., K, m) knots
        samples: list of ActionSequence or (..., N, K, m) knots
        weights: (..., N) weights from weight()
        clamp: Clip the result to [-1, 1]

    Returns:
        Updated mean, same type as prev
    """
    as_sequence = isinstance(prev, ActionSequence)
    prev_knots = prev.knots if as_sequence else np.asarray(prev, dtype=np.float64)
    if not isinstance(samples, np.ndarray):
        samples = np.stack([s.knots if isinstance(s, ActionSequence) else s for s in samples])
    weights = np.asarray(weights, dtype=np.float64)
    if samples.shape[-3] != weights.shape[-1]:
        raise ContractViolation(
            f"{samples.shape[-3]} samples but {weights.shape[-1]} weights"
        )
    total = np.sum(weights, axis=-1)
    if np.any(total <= 0):
        raise NoValidRollout("zero total weight")

    step = np.einsum('...n,...nkm->...km', weights, samples - prev_knots[..., None, :, :])
    new = prev_knots + step / total[..., None, None]
    if clamp:
        new = np.clip(new, -1.0, 1.0)
    return ActionSequence(new, prev.horizon_steps) if as_sequence else new


def proposal_knots(prev_knots: np.ndarray, sigma: float, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """n clamped draws from N(prev, sigma^2 I) in knot space, shape (n, K, m)"""
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    noise = rng.standard_normal((n,) + prev_knots.shape)
    return np.clip(prev_knots + sigma * noise, -1.0, 1.0)


def sample_proposal(prev: ActionSequence, sigma: float, n: int,
                    rng: np.random.Generator) -> List[ActionSequence]:
    """
    Draw candidate sequences around the current mean

    Args:
        prev: Proposal mean
        sigma: Isotropic standard deviation (> 0)
        n: Number of samples
        rng: Random generator

    Returns:
        List of n clamped ActionSequences
    """
    knots = proposal_knots(prev.knots, sigma, n, rng)
    return [ActionSequence(k, prev.horizon_steps) for k in knots]


def aggregate_rows(agg: RiskAggregator, costs: np.ndarray) -> np.ndarray:
    """Aggregate (..., N_D) domain costs along the last axis"""
    costs = np.asarray(costs, dtype=np.float64)
    if agg.kind == 'average' or (agg.kind == 'cvar' and agg.beta == 0.0):
        return np.mean(costs, axis=-1)
    if agg.kind == 'worst':
        return np.max(costs, axis=-1)

    # exact CVaR of the empirical distribution: mass of the upper (1 - beta)
    # tail spread over the sorted costs, fractional at the beta-quantile
    ordered = np.sort(costs, axis=-1)
    n = costs.shape[-1]
    upper = np.arange(1, n + 1) / n
    lower = np.maximum(np.arange(n) / n, agg.beta)
    mass = np.clip(upper - lower, 0.0, None)
    contrib = np.where(mass > 0, mass * ordered, 0.0)
    return np.sum(contrib, axis=-1) / np.sum(mass)


def aggregate(agg: RiskAggregator, domain_costs: Sequence[float]) -> float:
    """
    Risk aggregate of one sample's domain costs

    Args:
        agg: Aggregator
        domain_costs: N_D costs

    Returns:
        Average, worst case, or CVaR_beta
    """
    domain_costs = np.asarray(domain_costs, dtype=np.float64)
    if domain_costs.ndim != 1 or domain_costs.size < 1:
        raise ContractViolation("domain_costs must be a non-empty vector")
    return float(aggregate_rows(agg, domain_costs))


def spc_update_batch(env: Environment, domains: DomainParams, fn: WeightingFn,
                     agg: RiskAggregator, prev_knots: np.ndarray, q: np.ndarray, v: np.ndarray,
                     samples: np.ndarray):
    """
    Vectorized SPC update for a batch of independent controllers

    Args:
        env: Environment
        domains: Stacked domain parameters (N_D,)
        fn: Weighting function
        agg: Risk aggregator
        prev_knots: (B, K, m) proposal means
        q, v: (B, nq) start states
        samples: (B, N, K, m) candidate knots (Gaussian and policy)

    Returns:
        Tuple of (new means (B, K, m), costs (B, N, N_D), aggregated (B, N),
        best index (B,), valid (B,)). Rows where every sample diverged keep
        their previous mean and are flagged invalid.
    """
    costs = env.rollout_costs(domains, q[:, None, :], v[:, None, :], samples)
    totals = aggregate_rows(agg, costs)
    valid = np.isfinite(totals).any(axis=-1)
    new = np.array(prev_knots, dtype=np.float64, copy=True)
    if valid.any():
        weights = weight(fn, totals[valid])
        new[valid] = update_mean(prev_knots[valid], samples[valid], weights)
    best = np.argmin(np.where(np.isfinite(totals), totals, np.inf), axis=-1)
    return new, costs, totals, best, valid


def spc_step(env: Environment, domains: List[DomainParams], fn: WeightingFn,
             agg: RiskAggregator, prev: ActionSequence, state: EnvState,
             extra_samples: Optional[List[ActionSequence]], sigma: float, num_samples: int,
             rng: np.random.Generator):
    """
    One SPC iteration from a single state

    Args:
        env: Environment
        domains: Domain draws (length N_D)
        fn: Weighting function
        agg: Risk aggregator
        prev: Current proposal mean
        state: State the rollouts start from
        extra_samples: Policy samples appended to the Gaussian ones (may be empty)
        sigma: Proposal std
        num_samples: N_S Gaussian samples
        rng: Random generator

    Returns:
        Tuple of (new mean, RolloutBatch)
    """
    extra_samples = extra_samples or []
    gaussian = proposal_knots(prev.knots, sigma, num_samples, rng)
    if extra_samples:
        extras = np.stack([s.knots for s in extra_samples])
        samples = np.concatenate([gaussian, extras], axis=0)
    else:
        samples = gaussian
    sources = np.array([GAUSSIAN] * num_samples + [POLICY] * len(extra_samples))

    new, costs, totals, best, valid = spc_update_batch(
        env, stack_domains(domains), fn, agg, prev.knots[None], state.q[None], state.v[None],
        samples[None],
    )
    if not valid[0]:
        raise NoValidRollout(f"no valid rollout: all {samples.shape[0]} samples diverged")
    batch = RolloutBatch(samples, costs[0], totals[0], sources, int(best[0]))
    return ActionSequence(new[0], prev.horizon_steps), batch


def score_from_samples(prev: np.ndarray, samples: np.ndarray, weights: np.ndarray,
                       sigma: float) -> np.ndarray:
    """(1/sigma^2) sum g_i (U_i - U) / sum g_i over a shared sample set"""
    weights = np.asarray(weights, dtype=np.float64)
    total = np.sum(weights)
    if total <= 0:
        raise NoValidRollout("all weights are zero")
    diff = np.asarray(samples, dtype=np.float64) - np.asarray(prev, dtype=np.float64)
    return np.tensordot(weights, diff, axes=(0, 0)) / (sigma ** 2 * total)


def estimate_score(g: Callable[[np.ndarray], np.ndarray], U: np.ndarray, sigma: float,
                   n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """
    Monte-Carlo score of the noised target p_sigma(U) proportional to
    E[g(U + sigma z)]

    Args:
        g: Non-negative function evaluated on (n, d) samples, returning (n,)
        U: Point (d,) at which the score is estimated
        sigma: Noise level
        n_samples: Number of samples (>= 2)
        rng: Random generator

    Returns:
        Score estimate of shape (d,)
    """
    if n_samples < 2:
        raise ContractViolation("n_samples must be at least 2")
    U = np.atleast_1d(np.asarray(U, dtype=np.float64))
    samples = U + sigma * rng.standard_normal((n_samples,) + U.shape)
    values = np.asarray(g(samples), dtype=np.float64)
    if np.any(values < 0):
        raise ContractViolation("g must be non-negative")
    if not np.any(values > 0):
        raise NoValidRollout("g is zero on every sample")
    return score_from_samples(U, samples, values, sigma)
