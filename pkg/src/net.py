"""
Minimal MLP Engine
Dense multi-layer perceptron with hand-written reverse-mode gradients and an
Adam optimizer, enough to train the flow vector field
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.errors import ContractViolation, TrainingDiverged

ACTIVATIONS = ('swish', 'tanh', 'relu')


@dataclass
class MlpParams:
    """Weights and biases of a dense network (row = output unit)"""

    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = 'swish'

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"Unknown activation '{self.activation}'")
        if len(self.layer_sizes) < 2 or any(int(n) < 1 for n in self.layer_sizes):
            raise ContractViolation(f"Invalid layer sizes {self.layer_sizes}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ContractViolation("Number of weight matrices does not match layer sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if W.shape != expected or b.shape != (expected[0],):
                raise ContractViolation(
                    f"Layer {i}: weight {W.shape} / bias {b.shape}, expected {expected}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def tensors(self) -> List[np.ndarray]:
        """All parameter arrays in declared order (W0, b0, W1, b1, ...)"""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def with_tensors(self, tensors: List[np.ndarray]) -> 'MlpParams':
        return MlpParams(
            layer_sizes=list(self.layer_sizes),
            weights=[np.asarray(t, dtype=np.float64) for t in tensors[0::2]],
            biases=[np.asarray(t, dtype=np.float64) for t in tensors[1::2]],
            activation=self.activation,
        )

    def copy(self) -> 'MlpParams':
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> 'MlpParams':
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def flat(self) -> np.ndarray:
        """Flatten in declared row-major order"""
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def from_flat(cls, layer_sizes: List[int], activation: str, flat: np.ndarray) -> 'MlpParams':
        flat = np.asarray(flat, dtype=np.float64)
        tensors, offset = [], 0
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            tensors.append(flat[offset:offset + n_out * n_in].reshape(n_out, n_in))
            offset += n_out * n_in
            tensors.append(flat[offset:offset + n_out].copy())
            offset += n_out
        if offset != flat.size:
            raise ContractViolation(
                f"Flat parameter vector has {flat.size} entries, expected {offset}"
            )
        return cls(
            layer_sizes=list(layer_sizes),
            weights=[t.copy() for t in tensors[0::2]],
            biases=tensors[1::2],
            activation=activation,
        )


def init_params(layer_sizes: List[int], activation: str, rng: np.random.Generator) -> MlpParams:
    """
    Glorot-uniform weights, zero biases

    Args:
        layer_sizes: input, hidden..., output widths
        activation: Hidden-layer nonlinearity
        rng: Random generator

    Returns:
        Freshly initialized parameters
    """
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(list(layer_sizes), weights, biases, activation)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'swish':
        return z * _sigmoid(z)
    if kind == 'tanh':
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'swish':
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if kind == 'tanh':
        return 1.0 - np.tanh(z) ** 2
    return (z > 0.0).astype(np.float64)


def _as_batch(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.layer_sizes[0]:
        raise ContractViolation(
            f"Input shape {x.shape} does not match input width {params.layer_sizes[0]}"
        )
    return np.atleast_2d(x), x.ndim == 1


def _forward_cache(params: MlpParams, x: np.ndarray):
    inputs, pre_activations = [], []
    h = x
    last = params.num_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        # row-by-row contraction: a row's output does not depend on the batch it is in
        z = np.einsum('bi,oi->bo', h, W) + b
        pre_activations.append(z)
        h = _activate(z, params.activation) if i < last else z
    return h, inputs, pre_activations


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """
    Evaluate the network

    Args:
        params: Network parameters
        x: Input vector (in,) or batch (n, in)

    Returns:
        Output with the same leading shape as x
    """
    batch, single = _as_batch(params, x)
    out, _, _ = _forward_cache(params, batch)
    return out[0] if single else out


def backward(params: MlpParams, x: np.ndarray,
             output_gradient: np.ndarray) -> Tuple[MlpParams, np.ndarray]:
    """
    Reverse-mode gradients of <forward(params, x), output_gradient>

    For a batch, parameter gradients are summed over rows and the input
    gradient is returned per row.

    Args:
        params: Network parameters
        x: Input vector or batch
        output_gradient: Cotangent with the output's shape

    Returns:
        Tuple of (parameter gradients as MlpParams, input gradient)
    """
    batch, single = _as_batch(params, x)
    g = np.atleast_2d(np.asarray(output_gradient, dtype=np.float64))
    if g.shape != (batch.shape[0], params.layer_sizes[-1]):
        raise ContractViolation(
            f"Output gradient shape {np.shape(output_gradient)} does not match output width "
            f"{params.layer_sizes[-1]}"
        )

    _, inputs, pre_activations = _forward_cache(params, batch)
    grad_w = [None] * params.num_layers
    grad_b = [None] * params.num_layers
    last = params.num_layers - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * _activate_grad(pre_activations[i], params.activation)
        grad_w[i] = g.T @ inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i]

    grads = MlpParams(list(params.layer_sizes), grad_w, grad_b, params.activation)
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    """Moment estimates and step counter for Adam"""

    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: MlpParams, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    if learning_rate <= 0:
        raise ContractViolation("Learning rate must be positive")
    return AdamState(
        first_moment=params.zeros_like(),
        second_moment=params.zeros_like(),
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: MlpParams, grads: MlpParams,
              state: AdamState) -> Tuple[MlpParams, AdamState]:
    """
    One bias-corrected Adam update

    Args:
        params: Current parameters
        grads: Gradients with the same shapes
        state: Optimizer state

    Returns:
        Tuple of (updated parameters, updated state)

    Raises:
        TrainingDiverged: if any gradient entry is not finite
    """
    if grads.layer_sizes != params.layer_sizes:
        raise ContractViolation("Gradient shapes do not match parameters")
    if not grads.is_finite():
        raise TrainingDiverged(f"Non-finite gradient at optimizer step {state.step_count + 1}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), grads.tensors(),
                          state.first_moment.tensors(), state.second_moment.tensors()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)

    new_state = AdamState(
        first_moment=params.with_tensors(new_m),
        second_moment=params.with_tensors(new_v),
        step_count=t,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
    )
    return params.with_tensors(new_p), new_state
