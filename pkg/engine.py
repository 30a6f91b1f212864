"""
Dense float64 tensors with reverse-mode differentiation, plus the SGD,
warm-up and plateau machinery used by the trainers.

Every primitive records its parents and a backward closure on the output
tensor. `Graph` walks those records into a topological order and pushes
gradients back to the leaves. Parameters are leaves with a name and a
`frozen` flag; frozen parameters never receive a gradient entry.
"""
import itertools
import logging
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ArgumentError, DimensionError, NumericError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

_node_ids = itertools.count(1)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Row-major float64 array with an optional autodiff record."""

    __slots__ = ("values", "requires_grad", "parents", "backward_fn", "op", "node_id")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """
    Named leaf tensor. Frozen parameters take no gradient and no updates;
    `decay=False` keeps a trainable parameter out of weight decay.
    """

    __slots__ = ("name", "frozen", "decay")

    def __init__(self, values, name: str, frozen: bool = False, decay: bool = True):
        super().__init__(values, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.decay = decay

    def copy(self) -> "Parameter":
        return Parameter(self.values.copy(), self.name, self.frozen, self.decay)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, frozen={self.frozen})"


ParameterSet = Dict[str, Parameter]


def _record(op: str, values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(
        values,
        requires_grad=requires_grad,
        parents=parents if requires_grad else (),
        backward_fn=backward_fn if requires_grad else None,
        op=op,
    )
    if not np.all(np.isfinite(out.values)):
        raise NumericError(f"non-finite values produced by {op}", node_id=out.node_id)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# Primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), backward)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    if a.values.ndim != 2 or bias.shape != (a.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit rows of {a.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _record("add_bias", a.values + bias.values, (a, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", a.values * factor, (a,), lambda g: (g * factor,))


def shift(a: Tensor, offset: float) -> Tensor:
    return _record("shift", a.values + offset, (a,), lambda g: (g,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ArgumentError("add_n needs at least one tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_values(a.values)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.values, LOG_CLAMP)
    inside = a.values > LOG_CLAMP

    def backward(g):
        return (np.where(inside, g / clamped, 0.0),)

    return _record("log", np.log(clamped), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.sum(a.values), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, size = a.shape, a.values.size
    return _record("mean", np.mean(a.values), (a,), lambda g: (np.full(shape, float(g) / size),))


def max_all(a: Tensor) -> Tensor:
    flat_index = int(np.argmax(a.values))
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad.flat[flat_index] = float(g)
        return (grad,)

    return _record("max", a.values.flat[flat_index], (a,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum(q * log softmax(logits)); targets are row distributions."""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.values.ndim != 2 or targets.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    probs = softmax_values(logits.values)
    n = logits.shape[0]
    loss = -np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP))) / n

    def backward(g):
        return (float(g) * (probs * targets.sum(axis=1, keepdims=True) - targets) / n,)

    return _record("softmax_cross_entropy", loss, (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid binary cross-entropy of single-logit rows against 0/1 targets."""
    z = logits.values.reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.shape != targets.shape:
        raise DimensionError(f"binary_cross_entropy: {targets.shape[0]} targets for {z.shape[0]} logits")
    n = z.shape[0]
    loss = np.mean(bce_terms(z, targets))
    shape = logits.shape

    def backward(g):
        return ((float(g) * (sigmoid_values(z) - targets) / n).reshape(shape),)

    return _record("binary_cross_entropy", loss, (logits,), backward)


# Plain numpy helpers shared with evaluation code

def softmax_values(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid_values(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_terms(z: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-example sigmoid cross-entropy, stable for large |z|."""
    return np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def smoothed_targets(labels: np.ndarray, n_classes: int, label_smoothing: float) -> np.ndarray:
    if not 0.0 <= label_smoothing < 1.0:
        raise ArgumentError(f"label smoothing must lie in [0, 1), got {label_smoothing}")
    return (1.0 - label_smoothing) * one_hot(labels, n_classes) + label_smoothing / n_classes


class Graph:
    """Primitive operations reachable from `output`, parents before children."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = self._topological_order(output)

    @staticmethod
    def _topological_order(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> Dict[int, np.ndarray]:
        """Gradients of the scalar output, keyed by leaf node id."""
        if self.output.values.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {self.output.shape}")
        grads: Dict[int, np.ndarray] = {self.output.node_id: np.ones_like(self.output.values)}
        leaves: Dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            grad = grads.pop(node.node_id, None)
            if grad is None:
                continue
            if node.backward_fn is None:
                leaves[node.node_id] = grad
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=np.float64).reshape(parent.shape)
                if not np.all(np.isfinite(parent_grad)):
                    raise NumericError(f"non-finite gradient flowing out of {node.op}", node_id=node.node_id)
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + parent_grad
                else:
                    grads[parent.node_id] = parent_grad
        return leaves


def gradients(loss: Tensor, params: Mapping[str, Parameter]) -> Dict[str, np.ndarray]:
    """d(loss)/d(param) for every trainable parameter; frozen ones are left out."""
    leaf_grads = Graph(loss).backward() if loss.requires_grad else {}
    return {
        name: leaf_grads.get(p.node_id, np.zeros_like(p.values))
        for name, p in params.items()
        if not p.frozen
    }


class LossKind(str, Enum):
    cross_entropy = "cross_entropy"
    smoothed_cross_entropy = "smoothed_cross_entropy"
    binary_cross_entropy = "binary_cross_entropy"


def forward_backward(
    forward: Callable[[Tensor], Tensor],
    params: Mapping[str, Parameter],
    batch: Tuple[np.ndarray, np.ndarray],
    loss_kind: LossKind,
    label_smoothing: float = 0.0,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Run `forward` on the batch inputs, apply the loss and backpropagate."""
    x, y = batch
    output = forward(Tensor(x))
    loss_kind = LossKind(loss_kind)
    if loss_kind is LossKind.binary_cross_entropy:
        loss = binary_cross_entropy(output, y)
    else:
        if output.values.ndim != 2:
            raise DimensionError(f"class logits must be 2-D, got shape {output.shape}")
        ls = label_smoothing if loss_kind is LossKind.smoothed_cross_entropy else 0.0
        loss = softmax_cross_entropy(output, smoothed_targets(y, output.shape[1], ls))
    return loss.item(), gradients(loss, params)


# Optimization

class OptimState(BaseModel):
    """Momentum buffers and schedule bookkeeping for one parameter group."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    velocity: Dict[str, np.ndarray] = Field(default_factory=dict)
    iteration: int = Field(default=0, ge=0)
    lr: float = Field(gt=0)
    plateau_count: int = Field(default=0, ge=0)
    best: Optional[float] = None


def sgd_momentum_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> Tuple[Mapping[str, Parameter], OptimState]:
    """Heavy-ball step: v <- momentum*v - lr*g; theta <- theta + v."""
    if lr < 0:
        raise ArgumentError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ArgumentError(f"momentum must lie in [0, 1), got {momentum}")
    for name, param in params.items():
        if param.frozen:
            continue
        if name not in grads:
            raise ArgumentError(f"no gradient for trainable parameter {name}")
        grad = grads[name]
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.values)
        elif velocity.shape != param.shape:
            raise DimensionError(f"velocity for {name} has shape {velocity.shape}, parameter has {param.shape}")
        if weight_decay and param.decay:
            grad = grad + weight_decay * param.values
        velocity = momentum * velocity - lr * grad
        state.velocity[name] = velocity
        param.values = param.values + velocity
    state.iteration += 1
    return params, state


def warmup_lr(iteration: int, nw: int, base_lr: float, floor_ratio: float) -> float:
    """Linear ramp from floor_ratio*base_lr at iteration 0 to base_lr at iteration nw."""
    if iteration < 0:
        raise ArgumentError(f"iteration must be non-negative, got {iteration}")
    if nw < 1:
        raise ArgumentError(f"warm-up length must be at least 1, got {nw}")
    if not 0.0 < floor_ratio <= 1.0:
        raise ArgumentError(f"warm-up floor ratio must lie in (0, 1], got {floor_ratio}")
    if iteration >= nw:
        return base_lr
    floor = floor_ratio * base_lr
    return floor + (base_lr - floor) * (iteration / nw)


def plateau_decay(state: OptimState, epoch_metric: float, patience: int, factor: float) -> OptimState:
    """Lower-is-better plateau rule: decay lr after `patience` calls without improvement."""
    if not 0.0 < factor < 1.0:
        raise ArgumentError(f"decay factor must lie in (0, 1), got {factor}")
    if patience < 1:
        raise ArgumentError(f"patience must be at least 1, got {patience}")
    if state.best is None or epoch_metric < state.best:
        state.best = epoch_metric
        state.plateau_count = 0
        return state
    state.plateau_count += 1
    if state.plateau_count >= patience:
        state.lr *= factor
        state.plateau_count = 0
        logger.info(f"Plateau reached, learning rate decayed to {state.lr:.3g}")
    return state


class SGD:
    """One parameter group with its own momentum buffers and schedule."""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        warmup_iterations: int = 0,
        warmup_floor: float = 1.0,
    ):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_iterations = warmup_iterations
        self.warmup_floor = warmup_floor
        # lr == 0 is allowed for frozen-player experiments; OptimState keeps a positive placeholder
        self.base_lr = lr
        self.state = OptimState(lr=lr if lr > 0 else 1.0)

    @property
    def lr(self) -> float:
        """Effective learning rate for the next step."""
        if self.base_lr == 0:
            return 0.0
        if self.warmup_iterations >= 1:
            return warmup_lr(self.state.iteration, self.warmup_iterations, self.state.lr, self.warmup_floor)
        return self.state.lr

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        sgd_momentum_step(self.params, grads, self.state, self.lr, self.momentum, self.weight_decay)

    def plateau(self, metric: float, patience: int, factor: float) -> None:
        if self.base_lr > 0:
            plateau_decay(self.state, metric, patience, factor)
