"""
Control Environments
Analytically simulated systems (pendulum, cart-pole, double cart-pole and a
2D navigation task) with batched dynamics, costs and observations
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

import config
from src.errors import ContractViolation, EnvironmentDiverged

logger = logging.getLogger(__name__)

GRAVITY = 9.81


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap angles to [-pi, pi)"""
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class EnvState:
    """Generalized positions, velocities and control-step index"""

    q: np.ndarray
    v: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v)))


@dataclass(frozen=True)
class DomainParams:
    """Named physical parameters; values may be scalars or stacked arrays"""

    values: Dict[str, object] = field(default_factory=dict)

    def __getitem__(self, name: str):
        return self.values[name]

    def scaled(self, **factors: float) -> 'DomainParams':
        updated = dict(self.values)
        for name, factor in factors.items():
            updated[name] = updated[name] * factor
        return DomainParams(updated)

    def as_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.values.items()}


def stack_domains(domains: List[DomainParams]) -> DomainParams:
    """Stack a list of scalar domains into one DomainParams with (N_D,) arrays"""
    if not domains:
        raise ContractViolation("At least one domain is required")
    names = list(domains[0].values)
    return DomainParams({n: np.array([d[n] for d in domains], dtype=np.float64) for n in names})


@dataclass(frozen=True)
class EnvSpec:
    """Task specification (dimensions, limits, timing)"""

    name: str
    nq: int
    action_dim: int
    obs_dim: int
    action_limit: tuple
    physics_dt: float
    ctrl_freq: float
    horizon: float
    num_knots: int
    episode_length: float
    initial_conditions: str

    def __post_init__(self):
        ratio = 1.0 / (self.ctrl_freq * self.physics_dt)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ContractViolation(
                f"{self.name}: control period is not a multiple of the physics timestep"
            )
        if self.horizon <= 0 or self.num_knots < 1:
            raise ContractViolation(f"{self.name}: horizon and knots must be positive")
        if len(self.action_limit) != self.action_dim:
            raise ContractViolation(f"{self.name}: one actuator limit per action dimension")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.ctrl_freq * self.physics_dt)))

    @property
    def ctrl_dt(self) -> float:
        return 1.0 / self.ctrl_freq

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon * self.ctrl_freq))

    @property
    def episode_steps(self) -> int:
        return int(round(self.episode_length * self.ctrl_freq))

    def as_dict(self) -> dict:
        return {
            'name': self.name,
            'nq': self.nq,
            'action_dim': self.action_dim,
            'obs_dim': self.obs_dim,
            'action_limit': list(self.action_limit),
            'physics_dt': self.physics_dt,
            'ctrl_freq': self.ctrl_freq,
            'horizon': self.horizon,
            'num_knots': self.num_knots,
            'episode_length': self.episode_length,
            'initial_conditions': self.initial_conditions,
        }


def zoh_indices(horizon_steps: int, num_knots: int) -> np.ndarray:
    """Knot index of each control step under zero-order hold"""
    return (np.arange(horizon_steps) * num_knots) // horizon_steps


class Environment:
    """
    Base class: subclasses supply accelerations, state cost, observation,
    initial-state sampler and success predicate. Arrays carry arbitrary
    leading batch dimensions; stacked domain parameters broadcast against the
    last batch axis.
    """

    name = None
    nq = None
    obs_dim = None
    initial_conditions = ''
    action_weight = 0.001
    terminal_scale = 10.0

    def __init__(self, episode_length: Optional[float] = None):
        profile = config.ENV_PROFILES[self.name]
        limits = config.ACTUATOR_LIMITS[self.name]
        self.spec = EnvSpec(
            name=self.name,
            nq=self.nq,
            action_dim=len(limits),
            obs_dim=self.obs_dim,
            action_limit=tuple(float(x) for x in limits),
            physics_dt=config.PHYSICS_DT,
            ctrl_freq=config.CTRL_FREQ,
            horizon=profile['horizon'],
            num_knots=profile['num_knots'],
            episode_length=episode_length or profile['episode_length'],
            initial_conditions=self.initial_conditions,
        )
        self.nominal = DomainParams(dict(config.DOMAIN_DEFAULTS[self.name]))
        self.limits = np.array(self.spec.action_limit)

    # ---- subclass hooks -------------------------------------------------

    def accelerations(self, params: DomainParams, q, v, u):
        raise NotImplementedError

    def state_cost(self, q, v):
        raise NotImplementedError

    def observe_arrays(self, q, v):
        raise NotImplementedError

    def sample_initial_state(self, rng: np.random.Generator) -> EnvState:
        raise NotImplementedError

    def success(self, qs: np.ndarray, vs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # ---- dynamics -------------------------------------------------------

    def clamp_action(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, -self.limits, self.limits)

    def physics_step(self, params: DomainParams, q, v, u):
        """One semi-implicit Euler substep (velocity first, then position)"""
        qdd = self.accelerations(params, q, v, self.clamp_action(u))
        v = v + self.spec.physics_dt * qdd
        q = q + self.spec.physics_dt * v
        return q, v

    def advance(self, params: DomainParams, q, v, u):
        """One control period: N_sub physics substeps with a held action"""
        u = self.clamp_action(np.asarray(u, dtype=np.float64))
        for _ in range(self.spec.substeps):
            q, v = self.physics_step(params, q, v, u)
        return q, v

    def step(self, params: DomainParams, state: EnvState, action) -> EnvState:
        """
        Advance one control period

        Args:
            params: Domain parameters
            state: Current state
            action: Actuator command (clamped to limits)

        Returns:
            Next state with time index + 1

        Raises:
            EnvironmentDiverged: if the next state is not finite
        """
        with np.errstate(over='ignore', invalid='ignore'):
            q, v = self.advance(params, state.q, state.v, action)
        nxt = EnvState(q, v, state.t + 1)
        if not nxt.is_finite():
            raise EnvironmentDiverged(f"{self.name} diverged at step {nxt.t}")
        return nxt

    # ---- costs and observations -----------------------------------------

    def running_cost(self, q, v, u):
        u = self.clamp_action(np.asarray(u, dtype=np.float64))
        return self.state_cost(q, v) + self.action_weight * np.sum(u * u, axis=-1)

    def terminal_cost(self, q, v):
        return self.terminal_scale * self.state_cost(q, v)

    def observe(self, state: EnvState) -> np.ndarray:
        return self.observe_arrays(state.q, state.v)

    def knots_to_controls(self, knots: np.ndarray, horizon_steps: Optional[int] = None) -> np.ndarray:
        """De-normalize (..., K, m) knots into (..., H, m) actuator commands"""
        horizon_steps = self.spec.horizon_steps if horizon_steps is None else horizon_steps
        idx = zoh_indices(horizon_steps, knots.shape[-2]) if horizon_steps else np.zeros(0, int)
        return knots[..., idx, :] * self.limits

    def rollout_costs(self, domains: DomainParams, q, v, knots,
                      horizon_steps: Optional[int] = None) -> np.ndarray:
        """
        Batched rollout cost J = phi(x_T) + sum_tau l(x_tau, u_tau)

        Args:
            domains: Stacked domain parameters with (N_D,) arrays
            q, v: Start state, shape (..., nq) broadcastable to the sample batch
            knots: Normalized knots, shape (..., K, m)
            horizon_steps: Control steps to roll out (defaults to the spec horizon)

        Returns:
            Costs of shape (..., N_D); diverged rollouts are +inf
        """
        controls = self.knots_to_controls(np.asarray(knots, dtype=np.float64), horizon_steps)
        controls = controls[..., None, :, :]
        q = np.asarray(q, dtype=np.float64)[..., None, :]
        v = np.asarray(v, dtype=np.float64)[..., None, :]
        batch = np.broadcast_shapes(controls.shape[:-2], q.shape[:-1],
                                    np.shape(next(iter(domains.values.values()))))
        q = np.broadcast_to(q, batch + q.shape[-1:])
        v = np.broadcast_to(v, batch + v.shape[-1:])

        total = np.zeros(batch)
        with np.errstate(over='ignore', invalid='ignore'):
            for tau in range(controls.shape[-2]):
                u = controls[..., tau, :]
                total = total + self.running_cost(q, v, u)
                q, v = self.advance(domains, q, v, u)
            total = total + self.terminal_cost(q, v)

        diverged = ~np.isfinite(total)
        if diverged.any():
            logger.warning("%s: %d of %d rollouts diverged", self.name,
                           int(diverged.sum()), total.size)
            total = np.where(diverged, np.inf, total)
        return total

    def rollout_cost(self, params: DomainParams, start: EnvState, knots: np.ndarray,
                     horizon_steps: Optional[int] = None) -> float:
        """Cost of one knot sequence from one start state in one domain"""
        single = DomainParams({k: np.array([v]) for k, v in params.values.items()})
        return float(self.rollout_costs(single, start.q, start.v, knots, horizon_steps)[..., 0])


class Pendulum(Environment):
    """Torque-limited pendulum; theta = 0 is upright"""

    name = 'pendulum'
    nq = 1
    obs_dim = 3
    initial_conditions = 'theta ~ U(-pi, pi), theta_dot ~ U(-1, 1)'
    action_weight = 0.001
    energy_weight = 0.05

    def accelerations(self, p, q, v, u):
        inertia = p['mass'] * p['length'] ** 2
        theta, omega = q[..., 0], v[..., 0]
        qdd = (GRAVITY / p['length']) * np.sin(theta) + (p['gain'] * u[..., 0] - p['damping'] * omega) / inertia
        return qdd[..., None]

    def energy_error(self, q, v):
        """Mechanical energy relative to upright rest, nominal parameters"""
        mass, length = self.nominal['mass'], self.nominal['length']
        kinetic = 0.5 * mass * length ** 2 * v[..., 0] ** 2
        return kinetic - mass * GRAVITY * length * (1.0 - np.cos(q[..., 0]))

    def state_cost(self, q, v):
        # the energy term rewards pumping, which a short horizon cannot see
        return (wrap_angle(q[..., 0]) ** 2 + 0.1 * v[..., 0] ** 2
                + self.energy_weight * self.energy_error(q, v) ** 2)

    def observe_arrays(self, q, v):
        theta = q[..., 0]
        return np.stack([np.sin(theta), np.cos(theta), v[..., 0]], axis=-1)

    def sample_initial_state(self, rng):
        return EnvState([rng.uniform(-np.pi, np.pi)], [rng.uniform(-1.0, 1.0)])

    def upright_error(self, qs):
        return np.abs(wrap_angle(qs[..., 0]))

    def success(self, qs, vs):
        window = int(round(config.SUCCESS_WINDOW * self.spec.ctrl_freq))
        return np.all(self.upright_error(qs[..., -window:, :]) < config.SUCCESS_ANGLE, axis=-1)


class CartPole(Pendulum):
    """Pole on a force-driven cart; q = [x, theta], theta = 0 is upright"""

    name = 'cartpole'
    nq = 2
    obs_dim = 5
    initial_conditions = 'near hanging: x, theta - pi, velocities ~ U(-0.1, 0.1)'
    action_weight = 1e-4

    def accelerations(self, p, q, v, u):
        M, m, l = p['cart_mass'], p['pole_mass'], p['pole_length']
        theta = q[..., 1]
        xd, thd = v[..., 0], v[..., 1]
        s, c = np.sin(theta), np.cos(theta)
        a = M + m
        b = m * l * c
        d = m * l * l
        r1 = p['gain'] * u[..., 0] + m * l * s * thd ** 2
        r2 = m * GRAVITY * l * s - p['damping'] * thd
        det = a * d - b * b
        return np.stack([(d * r1 - b * r2) / det, (a * r2 - b * r1) / det], axis=-1)

    def state_cost(self, q, v):
        return (wrap_angle(q[..., 1]) ** 2 + 0.1 * q[..., 0] ** 2
                + 0.01 * (v[..., 0] ** 2 + v[..., 1] ** 2))

    def observe_arrays(self, q, v):
        theta = q[..., 1]
        return np.stack([np.sin(theta), np.cos(theta), q[..., 0], v[..., 0], v[..., 1]], axis=-1)

    def sample_initial_state(self, rng):
        noise = rng.uniform(-0.1, 0.1, size=4)
        return EnvState([noise[0], np.pi + noise[1]], noise[2:])

    def upright_error(self, qs):
        return np.abs(wrap_angle(qs[..., 1]))


class DoubleCartPole(CartPole):
    """
    Two point-mass links in series on a cart. q = [x, a1, a2] with a1, a2
    absolute link angles from upright; observations use joint angles
    (a1, a2 - a1).
    """

    name = 'double_cartpole'
    nq = 3
    obs_dim = 8
    initial_conditions = 'near hanging: x, a1 - pi, a2 - pi, velocities ~ U(-0.1, 0.1)'

    def mass_matrix(self, p, q):
        m1, m2, l1, l2 = p['mass1'], p['mass2'], p['length1'], p['length2']
        a1, a2 = q[..., 1], q[..., 2]
        mxx = p['cart_mass'] + m1 + m2 + 0.0 * a1
        mx1 = (m1 + m2) * l1 * np.cos(a1)
        mx2 = m2 * l2 * np.cos(a2)
        m11 = (m1 + m2) * l1 * l1 + 0.0 * a1
        m12 = m2 * l1 * l2 * np.cos(a1 - a2)
        m22 = m2 * l2 * l2 + 0.0 * a1
        rows = [np.stack([mxx, mx1, mx2], axis=-1),
                np.stack([mx1, m11, m12], axis=-1),
                np.stack([mx2, m12, m22], axis=-1)]
        return np.stack(rows, axis=-2)

    def accelerations(self, p, q, v, u):
        m1, m2, l1, l2 = p['mass1'], p['mass2'], p['length1'], p['length2']
        a1, a2 = q[..., 1], q[..., 2]
        w1, w2 = v[..., 1], v[..., 2]
        s1, s2, s12 = np.sin(a1), np.sin(a2), np.sin(a1 - a2)
        b = p['damping']
        # gravity + velocity-product terms moved to the right-hand side
        rhs = np.stack([
            p['gain'] * u[..., 0] + (m1 + m2) * l1 * s1 * w1 ** 2 + m2 * l2 * s2 * w2 ** 2,
            (m1 + m2) * GRAVITY * l1 * s1 - m2 * l1 * l2 * s12 * w2 ** 2 - b * w1 + b * (w2 - w1),
            m2 * GRAVITY * l2 * s2 + m2 * l1 * l2 * s12 * w1 ** 2 - b * (w2 - w1),
        ], axis=-1)
        M = self.mass_matrix(p, q)
        rhs = np.broadcast_to(rhs, M.shape[:-1])
        return np.linalg.solve(M, rhs[..., None])[..., 0]

    def state_cost(self, q, v):
        return (wrap_angle(q[..., 1]) ** 2 + wrap_angle(q[..., 2]) ** 2 + 0.1 * q[..., 0] ** 2
                + 0.01 * np.sum(v * v, axis=-1))

    def observe_arrays(self, q, v):
        a1, rel = q[..., 1], q[..., 2] - q[..., 1]
        return np.stack([np.sin(a1), np.cos(a1), np.sin(rel), np.cos(rel),
                         q[..., 0], v[..., 0], v[..., 1], v[..., 2] - v[..., 1]], axis=-1)

    def sample_initial_state(self, rng):
        noise = rng.uniform(-0.1, 0.1, size=6)
        return EnvState([noise[0], np.pi + noise[1], np.pi + noise[2]], noise[3:])

    def upright_error(self, qs):
        return np.maximum(np.abs(wrap_angle(qs[..., 1])), np.abs(wrap_angle(qs[..., 2])))


class Nav2d(Environment):
    """
    Point mass (double integrator with drag) that must reach a goal placed
    directly behind a circular obstacle, so the task has two homotopy classes
    """

    name = 'nav2d'
    nq = 2
    obs_dim = 4
    initial_conditions = 'fixed start (-1, 0) plus U(-0.02, 0.02) position noise'
    action_weight = 0.01
    obstacle_weight = 100.0
    obstacle_margin = 0.1

    def __init__(self, episode_length: Optional[float] = None):
        super().__init__(episode_length)
        self.start = np.array(config.NAV_START, dtype=np.float64)
        self.goal = np.array(config.NAV_GOAL, dtype=np.float64)
        self.center = np.array(config.NAV_OBSTACLE_CENTER, dtype=np.float64)
        self.radius = config.NAV_OBSTACLE_RADIUS

    def accelerations(self, p, q, v, u):
        gain = np.asarray(p['gain'])[..., None]
        drag = np.asarray(p['drag'])[..., None]
        return gain * u - drag * v

    def obstacle_penalty(self, q):
        dist = np.linalg.norm(q - self.center, axis=-1)
        return self.obstacle_weight * np.maximum(self.radius + self.obstacle_margin - dist, 0.0) ** 2

    def state_cost(self, q, v):
        err = q - self.goal
        return np.sum(err * err, axis=-1) + 0.1 * np.sum(v * v, axis=-1) + self.obstacle_penalty(q)

    def observe_arrays(self, q, v):
        return np.concatenate([q - self.goal, v], axis=-1)

    def nominal_initial_state(self) -> EnvState:
        return EnvState(self.start.copy(), np.zeros(2))

    def sample_initial_state(self, rng):
        return EnvState(self.start + rng.uniform(-0.02, 0.02, size=2), np.zeros(2))

    def success(self, qs, vs):
        return np.linalg.norm(qs[..., -1, :] - self.goal, axis=-1) < config.SUCCESS_RADIUS

    def route_side(self, params: DomainParams, state: EnvState, knots: np.ndarray) -> np.ndarray:
        """
        Homotopy class of the rolled-out path: +1 if it passes above the
        obstacle (positive lateral offset), -1 below, 0 if exactly centered

        Args:
            params: Domain parameters
            state: Start state
            knots: Normalized knots (..., K, m)

        Returns:
            Integer side per sequence
        """
        controls = self.knots_to_controls(np.asarray(knots, dtype=np.float64))
        q = np.broadcast_to(state.q, controls.shape[:-2] + (2,))
        v = np.broadcast_to(state.v, controls.shape[:-2] + (2,))
        lateral = np.zeros(controls.shape[:-2])
        for tau in range(controls.shape[-2]):
            q, v = self.advance(params, q, v, controls[..., tau, :])
            lateral = lateral + (q[..., 1] - self.center[1])
        return np.sign(lateral).astype(int)


ENVIRONMENTS = {
    'pendulum': Pendulum,
    'cartpole': CartPole,
    'double_cartpole': DoubleCartPole,
    'nav2d': Nav2d,
}


def make_env(name: str, episode_length: Optional[float] = None) -> Environment:
    """Build an environment by name"""
    if name not in ENVIRONMENTS:
        raise ContractViolation(
            f"Unknown environment '{name}' (choose from {', '.join(ENVIRONMENTS)})"
        )
    return ENVIRONMENTS[name](episode_length)


def randomize_domains(env: Environment, num_domains: int, scale: float,
                      rng: np.random.Generator) -> List[DomainParams]:
    """
    Draw randomized domains around the nominal parameters

    Domain 0 is always the nominal model; the others multiply every parameter
    by an independent factor in [1 - scale, 1 + scale].

    Args:
        env: Environment supplying the nominal parameters
        num_domains: N_D >= 1
        scale: Relative spread in [0, 1)
        rng: Random generator

    Returns:
        List of N_D DomainParams
    """
    if num_domains < 1:
        raise ContractViolation("num_domains must be at least 1")
    if not 0.0 <= scale < 1.0:
        raise ContractViolation("Domain scale must lie in [0, 1)")
    domains = [env.nominal]
    for _ in range(num_domains - 1):
        factors = {k: rng.uniform(1.0 - scale, 1.0 + scale) for k in env.nominal.values}
        domains.append(env.nominal.scaled(**factors))
    return domains


def shifted_domain(env: Environment, shift: float) -> DomainParams:
    """
    Model-error test domain: heavier bodies, less damping, weaker actuator

    Args:
        env: Environment supplying the nominal parameters
        shift: Relative change applied to each affected parameter

    Returns:
        Shifted DomainParams
    """
    factors = {}
    for name in env.nominal.values:
        if 'mass' in name:
            factors[name] = 1.0 + shift
        elif name in ('damping', 'drag'):
            factors[name] = max(1.0 - shift, 0.05)
        elif name == 'gain':
            factors[name] = max(1.0 - 0.5 * shift, 0.05)
    return env.nominal.scaled(**factors)
