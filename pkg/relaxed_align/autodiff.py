"""
Reverse-mode automatic differentiation over numpy arrays
Dense feed-forward networks, Adam, and exact input-gradient norms for the
one-sided gradient penalty. Input tangents are carried as ordinary graph
nodes, so the penalty can itself be differentiated w.r.t. the parameters.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "relaxed-align-checkpoint/1"


class CheckpointError(ValueError):
    """Raised for corrupted or incompatible checkpoints"""


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array node in the computation graph"""

    # numpy operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, parents: Sequence["Tensor"] = (), requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def zero_grad(self):
        self.grad = None

    # graph construction

    def _child(self, data, parents, backward) -> "Tensor":
        out = Tensor(data, parents=parents)
        if out.requires_grad:
            out._backward = backward
        return out

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)
        return self._child(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._child(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        return self._child(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / other.data ** 2)
        return self._child(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        return self._child(self.data ** exponent, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)
        return self._child(self.data @ other.data, (self, other), backward)

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        return self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def exp(self):
        out_data = np.exp(self.data)
        return self._child(out_data, (self,), lambda g: self._accumulate(g * out_data))

    def log(self):
        return self._child(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            # Subgradient 0 at the origin
            safe = np.where(out_data > 0, out_data, 1.0)
            self._accumulate(np.where(out_data > 0, g * 0.5 / safe, 0.0))
        return self._child(out_data, (self,), backward)

    def relu(self):
        mask = (self.data > 0).astype(float)
        return self._child(self.data * mask, (self,), lambda g: self._accumulate(g * mask))

    def sigmoid(self):
        out_data = _sigmoid(self.data)
        return self._child(out_data, (self,), lambda g: self._accumulate(g * out_data * (1.0 - out_data)))

    def tanh(self):
        out_data = np.tanh(self.data)
        return self._child(out_data, (self,), lambda g: self._accumulate(g * (1.0 - out_data ** 2)))

    def softplus(self):
        s = _sigmoid(self.data)
        return self._child(np.logaddexp(0.0, self.data), (self,), lambda g: self._accumulate(g * s))

    def identity(self):
        return self

    # reverse pass

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite loss {self.data.item()!r}")

        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        for node in order:
            if node is not self:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            if not node._parents and node.grad is not None and not np.isfinite(node.grad).all():
                raise FloatingPointError(f"non-finite gradient reached {node!r}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softplus")

_NUMPY_ACTIVATIONS = {
    "identity": lambda a: a,
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "softplus": lambda a: np.logaddexp(0.0, a),
}


def _activation_slope(name: str, pre: Tensor, post: Tensor):
    """d act / d pre as a graph node (or a constant where the slope is piecewise constant)"""
    if name == "identity":
        return 1.0
    if name == "relu":
        return Tensor((pre.data > 0).astype(float))
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    if name == "softplus":
        return pre.sigmoid()
    raise ValueError(f"unknown activation '{name}'")


@dataclass(eq=False)
class DenseNetwork:
    """Feed-forward net; every layer but the last uses the hidden activation"""
    widths: List[int]
    hidden_activation: str
    output_activation: str
    weights: List[Tensor] = field(default_factory=list)
    biases: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{act}', expected one of {ACTIVATIONS}")
        if len(self.widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.widths[k], self.widths[k + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape} do not match widths {expected}")

    @classmethod
    def initialize(cls, widths: Sequence[int], hidden_activation: str, output_activation: str,
                   rng: np.random.Generator) -> "DenseNetwork":
        """Uniform fan-in initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))
        return cls(list(widths), hidden_activation, output_activation, weights, biases)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == self.depth - 1 else self.hidden_activation

    def parameters(self) -> List[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _check_input(self, x: Tensor):
        if x.data.ndim != 2 or x.data.shape[1] != self.widths[0]:
            raise ValueError(f"expected a batch with {self.widths[0]} columns, got shape {x.data.shape}")

    def _layers(self, x: Tensor):
        """Yield (pre-activation, post-activation) per layer"""
        self._check_input(x)
        h = x
        for k in range(self.depth):
            a = h @ self.weights[k] + self.biases[k]
            h = getattr(a, self.activation(k))()
            yield a, h

    def logits(self, batch) -> Tensor:
        """Output pre-activation"""
        a = None
        for a, _ in self._layers(as_tensor(batch)):
            pass
        return a

    def forward(self, batch) -> Tensor:
        h = None
        for _, h in self._layers(as_tensor(batch)):
            pass
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass for frozen networks"""
        h = np.asarray(x, dtype=float)
        for k in range(self.depth):
            h = _NUMPY_ACTIVATIONS[self.activation(k)](h @ self.weights[k].data + self.biases[k].data)
        return h

    def input_tangents(self, batch, direction: np.ndarray) -> Tensor:
        """Directional derivative of the output along a fixed input direction, per row"""
        x = as_tensor(batch)
        tangent = Tensor(np.broadcast_to(np.asarray(direction, dtype=float), x.data.shape).copy())
        for k, (a, h) in enumerate(self._layers(x)):
            tangent = _activation_slope(self.activation(k), a, h) * (tangent @ self.weights[k])
        return tangent

    def to_dict(self) -> Dict:
        return {
            'widths': list(self.widths),
            'hidden_activation': self.hidden_activation,
            'output_activation': self.output_activation,
            'weights': [{'shape': list(w.shape), 'values': w.data.ravel().tolist()} for w in self.weights],
            'biases': [{'shape': list(b.shape), 'values': b.data.ravel().tolist()} for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DenseNetwork":
        def restore(entry: Dict) -> Tensor:
            values = np.asarray(entry['values'], dtype=float)
            return Tensor(values.reshape(entry['shape']), requires_grad=True)

        try:
            return cls(widths=[int(w) for w in data['widths']],
                       hidden_activation=data['hidden_activation'],
                       output_activation=data['output_activation'],
                       weights=[restore(e) for e in data['weights']],
                       biases=[restore(e) for e in data['biases']])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed network entry: {e}") from e


def input_gradient_norms(critic: DenseNetwork, batch) -> Tensor:
    """Per-row ||grad_z g(z)||_2, differentiable w.r.t. the critic parameters"""
    if critic.widths[-1] != 1:
        raise ValueError(f"critic must have a scalar output, has {critic.widths[-1]}")
    dim = critic.widths[0]
    squared = None
    for axis in range(dim):
        t = critic.input_tangents(batch, np.eye(dim)[axis])
        squared = t * t if squared is None else squared + t * t
    return squared.sum(axis=1).sqrt()


def gradient_penalty(critic: DenseNetwork, points, coefficient: float) -> Tensor:
    """coefficient * mean(max(0, ||grad g|| - 1)^2)"""
    norms = input_gradient_norms(critic, points)
    return coefficient * ((norms - 1.0).relu() ** 2).mean()


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels"""
    y = np.asarray(labels, dtype=float).reshape(logits.shape)
    return (logits.softplus() - logits * y).mean()


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]] = None):
    """Bias-corrected Adam update applied in place"""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=float)
        if g.shape != p.data.shape or state.m[k].shape != p.data.shape:
            raise ValueError(f"parameter {k}: shape {p.data.shape} vs gradient {g.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / correction1
        v_hat = state.v[k] / correction2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_networks(path: Path, networks: Dict[str, DenseNetwork], meta: Optional[Dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {'format': CHECKPOINT_FORMAT, 'meta': meta or {},
               'networks': {name: net.to_dict() for name, net in networks.items()}}
    with open(path, 'w') as f:
        json.dump(payload, f)


def load_networks(path: Path):
    """Returns (networks by name, meta)"""
    try:
        with open(path, 'r') as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    networks = {name: DenseNetwork.from_dict(entry) for name, entry in payload.get('networks', {}).items()}
    return networks, payload.get('meta', {})
