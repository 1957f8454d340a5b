"""
Flow-Matching Policy
Conditional vector field v(U, y, t) over flattened knot sequences, trained on
SPC data with a cosine-similarity weighted flow-matching loss and sampled by
explicit Euler integration from (optionally warm-started) noise
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

import config
from src.envs import EnvSpec
from src.errors import ContractViolation, TrainingDiverged
from src.net import MlpParams, adam_init, adam_step, backward, forward, init_params
from src.spc import ActionSequence

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
DEGENERATE_NORM = 1e-12


@dataclass
class FlowModel:
    """Vector-field network plus observation normalizer and knot layout"""

    net: MlpParams
    obs_mean: np.ndarray
    obs_std: np.ndarray
    num_knots: int
    action_dim: int
    obs_dim: int
    horizon_steps: int

    def __post_init__(self):
        self.obs_mean = np.asarray(self.obs_mean, dtype=np.float64)
        self.obs_std = np.maximum(np.asarray(self.obs_std, dtype=np.float64), STD_FLOOR)
        flat = self.num_knots * self.action_dim
        if self.net.layer_sizes[0] != flat + self.obs_dim + 1 or self.net.layer_sizes[-1] != flat:
            raise ContractViolation(
                f"Network {self.net.layer_sizes} does not fit {self.num_knots} knots x "
                f"{self.action_dim} actions with {self.obs_dim} observations"
            )
        if self.obs_mean.shape != (self.obs_dim,) or self.obs_std.shape != (self.obs_dim,):
            raise ContractViolation("Normalizer statistics must match obs_dim")

    @property
    def flat_dim(self) -> int:
        return self.num_knots * self.action_dim

    def normalize_obs(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.obs_mean) / self.obs_std

    def denormalize_obs(self, y_norm: np.ndarray) -> np.ndarray:
        return np.asarray(y_norm, dtype=np.float64) * self.obs_std + self.obs_mean

    def copy(self) -> 'FlowModel':
        return replace(self, net=self.net.copy(), obs_mean=self.obs_mean.copy(),
                       obs_std=self.obs_std.copy())

    def field(self, U: np.ndarray, y_norm: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Evaluate v on a batch: U (B, d), y_norm (B, obs_dim), t (B,)"""
        return forward(self.net, self._inputs(U, y_norm, t))

    def _inputs(self, U, y_norm, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return np.concatenate([U, y_norm, t], axis=-1)


@dataclass
class TrainRecord:
    """One SPC step: observation, chosen mean and the mean it started from"""

    observation: np.ndarray
    target: np.ndarray  # (K, m), the updated mean U_k
    previous: np.ndarray  # (K, m), the shifted mean U_{k-1}
    env_id: int
    step: int

    def __post_init__(self):
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.previous = np.asarray(self.previous, dtype=np.float64)
        if not np.all(np.isfinite(self.observation)):
            raise ContractViolation(f"Non-finite observation in record ({self.env_id}, {self.step})")
        if np.any(np.abs(self.target) > 1.0) or np.any(np.abs(self.previous) > 1.0):
            raise ContractViolation(f"Knots outside [-1, 1] in record ({self.env_id}, {self.step})")


def init_flow_model(spec: EnvSpec, rng: np.random.Generator,
                    hidden_layers: int = config.HIDDEN_LAYERS,
                    hidden_width: int = config.HIDDEN_WIDTH,
                    activation: str = config.ACTIVATION) -> FlowModel:
    """
    Randomly initialized flow model for an environment

    Args:
        spec: Environment spec (knots, action and observation sizes)
        rng: Random generator
        hidden_layers: Number of hidden layers
        hidden_width: Units per hidden layer
        activation: Hidden nonlinearity

    Returns:
        FlowModel with an identity observation normalizer
    """
    flat = spec.num_knots * spec.action_dim
    sizes = [flat + spec.obs_dim + 1] + [hidden_width] * hidden_layers + [flat]
    return FlowModel(
        net=init_params(sizes, activation, rng),
        obs_mean=np.zeros(spec.obs_dim),
        obs_std=np.ones(spec.obs_dim),
        num_knots=spec.num_knots,
        action_dim=spec.action_dim,
        obs_dim=spec.obs_dim,
        horizon_steps=spec.horizon_steps,
    )


def cosine_weight(target: np.ndarray, previous: np.ndarray, noise: np.ndarray,
                  gamma: float = config.COSINE_GAMMA) -> np.ndarray:
    """
    exp(-gamma (1 - S_C)) with S_C the cosine similarity between
    (target - previous) and (target - noise), along the last axis

    A zero-norm argument carries no direction and gets weight 1.
    """
    a = np.asarray(target, dtype=np.float64) - previous
    b = np.asarray(target, dtype=np.float64) - noise
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    degenerate = (na < DEGENERATE_NORM) | (nb < DEGENERATE_NORM)
    denom = np.where(degenerate, 1.0, na * nb)
    similarity = np.clip(np.sum(a * b, axis=-1) / denom, -1.0, 1.0)
    return np.where(degenerate, 1.0, np.exp(-gamma * (1.0 - similarity)))


def flow_loss_batch(model: FlowModel, targets: np.ndarray, previous: np.ndarray,
                    y_norm: np.ndarray, noise: np.ndarray, t: np.ndarray,
                    gamma: float = config.COSINE_GAMMA) -> Tuple[float, MlpParams]:
    """
    Mean weighted flow-matching loss and gradient over a mini-batch

    Args:
        model: Flow model
        targets: (B, d) flattened targets
        previous: (B, d) flattened previous means
        y_norm: (B, obs_dim) normalized observations
        noise: (B, d) noise draws U_0
        t: (B,) flow times in [0, 1]
        gamma: Cosine decay rate

    Returns:
        Tuple of (mean loss, mean parameter gradients)
    """
    t_col = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = cosine_weight(targets, previous, noise, gamma)
    u_t = t_col * targets + (1.0 - t_col) * noise
    x = model._inputs(u_t, y_norm, t_col)
    residual = forward(model.net, x) - (targets - noise)
    per_record = w * np.sum(residual * residual, axis=-1)
    n = targets.shape[0]
    grads, _ = backward(model.net, x, (2.0 / n) * w[:, None] * residual)
    return float(np.mean(per_record)), grads


def flow_loss(model: FlowModel, record: TrainRecord, noise: np.ndarray, t: float,
              gamma: float = config.COSINE_GAMMA) -> Tuple[float, MlpParams]:
    """
    Weighted flow-matching loss of one record at one (noise, t) probe

    Args:
        model: Flow model
        record: Training record
        noise: Flat noise draw U_0 of size num_knots * action_dim
        t: Flow time in [0, 1]
        gamma: Cosine decay rate

    Returns:
        Tuple of (loss, parameter gradients)
    """
    noise = np.asarray(noise, dtype=np.float64).ravel()
    if noise.size != model.flat_dim or record.target.size != model.flat_dim:
        raise ContractViolation(f"Expected flat size {model.flat_dim}")
    if not 0.0 <= t <= 1.0:
        raise ContractViolation("Flow time must lie in [0, 1]")
    return flow_loss_batch(
        model,
        record.target.reshape(1, -1),
        record.previous.reshape(1, -1),
        model.normalize_obs(record.observation).reshape(1, -1),
        noise.reshape(1, -1),
        np.array([t]),
        gamma,
    )


def stack_records(records: List[TrainRecord]):
    """Dataset arrays (observations, flat targets, flat previous)"""
    obs = np.stack([r.observation for r in records])
    targets = np.stack([r.target.ravel() for r in records])
    previous = np.stack([r.previous.ravel() for r in records])
    return obs, targets, previous


def fit(model: FlowModel, dataset: List[TrainRecord], epochs: int, batch_size: int,
        learning_rate: float, rng: np.random.Generator,
        gamma: float = config.COSINE_GAMMA) -> Tuple[FlowModel, List[float]]:
    """
    Fit the vector field to SPC data with Adam

    The observation normalizer is recomputed from the dataset. Every epoch
    draws a fresh (t, U_0) pair per record.

    Args:
        model: Starting model (not modified)
        dataset: Non-empty list of TrainRecords
        epochs: Passes over the data (0 returns the model unchanged)
        batch_size: Records per Adam step
        learning_rate: Adam step size
        rng: Random generator
        gamma: Cosine decay rate

    Returns:
        Tuple of (fitted model, mean loss per epoch)

    Raises:
        TrainingDiverged: on a non-finite loss or gradient
    """
    if not dataset:
        raise ContractViolation("Cannot fit on an empty dataset")
    if epochs < 0 or batch_size < 1:
        raise ContractViolation("epochs must be >= 0 and batch_size >= 1")
    if epochs == 0:
        return model.copy(), []

    obs, targets, previous = stack_records(dataset)
    if targets.shape[1] != model.flat_dim or obs.shape[1] != model.obs_dim:
        raise ContractViolation("Dataset does not match the model dimensions")

    model = replace(model.copy(), obs_mean=obs.mean(axis=0), obs_std=obs.std(axis=0))
    y_norm = model.normalize_obs(obs)
    state = adam_init(model.net, learning_rate, config.ADAM_BETA1, config.ADAM_BETA2,
                      config.ADAM_EPSILON)
    n = len(dataset)
    losses = []

    for epoch in range(epochs):
        order = rng.permutation(n)
        t_all = rng.uniform(0.0, 1.0, size=n)
        noise_all = rng.standard_normal((n, model.flat_dim))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = flow_loss_batch(model, targets[idx], previous[idx], y_norm[idx],
                                          noise_all[idx], t_all[idx], gamma)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"Non-finite flow loss at epoch {epoch}, batch starting at {start}"
                )
            model.net, state = adam_step(model.net, grads, state)
            total += loss * len(idx)
        losses.append(total / n)
        logger.debug("epoch %d: flow loss %.5f", epoch, losses[-1])

    return model, losses


def _euler_steps(dt: float) -> int:
    if dt <= 0 or dt > 1:
        raise ContractViolation("ODE step must lie in (0, 1]")
    steps = int(round(1.0 / dt))
    if abs(steps * dt - 1.0) > 1e-9:
        raise ContractViolation(f"ODE step {dt} does not divide [0, 1] evenly")
    return steps


def sample_batch(model: FlowModel, y: np.ndarray, noise: np.ndarray,
                 dt: float = config.ODE_STEP) -> np.ndarray:
    """
    Integrate the field from noise for a batch of observations

    Args:
        model: Flow model
        y: (B, obs_dim) raw observations
        noise: (B, d) initial points U_0
        dt: Euler step (must divide 1)

    Returns:
        (B, num_knots, action_dim) clamped knots
    """
    steps = _euler_steps(dt)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    U = np.atleast_2d(np.asarray(noise, dtype=np.float64)).copy()
    if U.shape[1] != model.flat_dim or y.shape[1] != model.obs_dim or U.shape[0] != y.shape[0]:
        raise ContractViolation(
            f"sample: noise {U.shape} / observation {y.shape} do not match the model"
        )
    y_norm = model.normalize_obs(y)
    for j in range(steps):
        t = np.full(U.shape[0], j * dt)
        U = U + dt * model.field(U, y_norm, t)
    U = np.clip(U, -1.0, 1.0)
    return U.reshape(-1, model.num_knots, model.action_dim)


def sample(model: FlowModel, y: np.ndarray, noise: np.ndarray,
           dt: float = config.ODE_STEP) -> ActionSequence:
    """Draw one action sequence for observation y starting from noise"""
    knots = sample_batch(model, np.asarray(y)[None], np.asarray(noise).ravel()[None], dt)
    return ActionSequence(knots[0], model.horizon_steps)


def warm_start_noise(prev: ActionSequence, alpha: float, rng: np.random.Generator,
                     size: Optional[int] = None) -> np.ndarray:
    """
    Initial flow point (1 - alpha) z + alpha prev_flat, z ~ N(0, I)

    The caller passes the previous sequence already shifted by one control
    step.

    Args:
        prev: Previous action sequence (shifted)
        alpha: Warm-start level in [0, 1]
        rng: Random generator
        size: Optional number of draws; returns (size, d) instead of (d,)

    Returns:
        Flat noise vector(s)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"Warm-start level {alpha} outside [0, 1]")
    base = prev.flat()
    shape = base.shape if size is None else (size,) + base.shape
    z = rng.standard_normal(shape)
    return (1.0 - alpha) * z + alpha * base
