"""Feed-forward network with hand-written differentiation.

The backbone is a tuple of parallel MLP branches whose outputs are
concatenated into the feature vector h(x); a plain MLP is a single branch.
The linear head maps features to logits. Everything is batched: inputs are
``[n, D]`` arrays.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax as _softmax

from cloodbench.errors import ConfigError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Model parameters theta = (phi, w).

    Also used as the container for gradients, momentum buffers and masks,
    which share the exact same shapes.
    """

    branches: tuple[tuple[Layer, ...], ...]
    head_weight: np.ndarray  # [num_classes, feature_dim]
    head_bias: np.ndarray  # [num_classes]

    def __post_init__(self) -> None:
        if not self.branches or any(not branch for branch in self.branches):
            raise ConfigError("ParamSet needs at least one nonempty backbone branch")
        input_dim = self.branches[0][0].in_dim
        for b, branch in enumerate(self.branches):
            if branch[0].in_dim != input_dim:
                raise ConfigError(f"branch {b} expects input dim {branch[0].in_dim}, not {input_dim}")
            for k, layer in enumerate(branch):
                if layer.activation not in ACTIVATIONS:
                    raise ConfigError(f"unknown activation {layer.activation!r}")
                if layer.bias.shape != (layer.out_dim,):
                    raise ConfigError(f"branch {b} layer {k}: bias shape {layer.bias.shape}")
                if k > 0 and branch[k - 1].out_dim != layer.in_dim:
                    raise ConfigError(
                        f"branch {b} layer {k}: input dim {layer.in_dim} does not chain "
                        f"with previous output dim {branch[k - 1].out_dim}"
                    )
        if self.head_weight.ndim != 2 or self.head_weight.shape[1] != self.feature_dim:
            raise ConfigError(
                f"head weight shape {self.head_weight.shape} does not match feature dim {self.feature_dim}"
            )
        if self.head_bias.shape != (self.head_weight.shape[0],):
            raise ConfigError(f"head bias shape {self.head_bias.shape} does not match head rows")

    @property
    def backbone_layers(self) -> tuple[Layer, ...]:
        """Layers of the first (base) branch."""
        return self.branches[0]

    @property
    def input_dim(self) -> int:
        return self.branches[0][0].in_dim

    @property
    def branch_dims(self) -> tuple[int, ...]:
        return tuple(branch[-1].out_dim for branch in self.branches)

    @property
    def feature_dim(self) -> int:
        return sum(self.branch_dims)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for branch in self.branches:
            for layer in branch:
                out.extend((layer.weight, layer.bias))
        out.extend((self.head_weight, self.head_bias))
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> ParamSet:
        """Rebuild a ParamSet of the same structure from ``arrays()``-ordered tensors."""
        it = iter(arrays)
        branches = tuple(
            tuple(Layer(next(it), next(it), layer.activation) for layer in branch)
            for branch in self.branches
        )
        return ParamSet(branches, next(it), next(it))

    def map(self, fn: Callable[..., np.ndarray], *others: ParamSet) -> ParamSet:
        columns = zip(self.arrays(), *(o.arrays() for o in others), strict=True)
        return self.with_arrays([fn(*arrs) for arrs in columns])

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True, eq=False)
class ForwardRecord:
    inputs: np.ndarray  # [n, D]
    features: np.ndarray  # [n, F]
    logits: np.ndarray  # [n, K]
    probs: np.ndarray  # [n, K]
    # per branch, per layer: (layer input, pre-activation)
    cache: tuple[tuple[tuple[np.ndarray, np.ndarray], ...], ...] = field(repr=False, default=())


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] == 0:
        return np.zeros_like(logits)
    return _softmax(logits, axis=-1)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_branch(rng: np.random.Generator, input_dim: int, widths: list[int]) -> tuple[Layer, ...]:
    layers = []
    fan_in = input_dim
    for width in widths:
        layers.append(Layer(glorot_uniform(rng, fan_in, width), np.zeros(width), "relu"))
        fan_in = width
    return tuple(layers)


def init_params(
    rng: np.random.Generator, input_dim: int, hidden: list[int], num_classes: int = 0
) -> ParamSet:
    branch = init_branch(rng, input_dim, hidden)
    return ParamSet(
        branches=(branch,),
        head_weight=np.zeros((num_classes, hidden[-1])),
        head_bias=np.zeros(num_classes),
    )


def extract_features(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return forward(params, x).features


def head_logits(features: np.ndarray, head_weight: np.ndarray, head_bias: np.ndarray) -> np.ndarray:
    return features @ head_weight.T + head_bias


def forward(params: ParamSet, x: np.ndarray) -> ForwardRecord:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.input_dim:
        raise ConfigError(f"input dim {x.shape[1]} does not match network input dim {params.input_dim}")

    outputs = []
    cache = []
    for branch in params.branches:
        h = x
        branch_cache = []
        for layer in branch:
            pre = h @ layer.weight.T + layer.bias
            branch_cache.append((h, pre))
            h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        outputs.append(h)
        cache.append(tuple(branch_cache))

    features = outputs[0] if len(outputs) == 1 else np.concatenate(outputs, axis=1)
    logits = head_logits(features, params.head_weight, params.head_bias)
    return ForwardRecord(x, features, logits, softmax(logits), tuple(cache))


def head_backward(features: np.ndarray, grad_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the head parameters only, for losses that must not reach the backbone."""
    return grad_logits.T @ features, grad_logits.sum(axis=0)


def backward(
    params: ParamSet,
    record: ForwardRecord,
    grad_logits: np.ndarray,
    *,
    need_input_grad: bool = False,
) -> tuple[ParamSet, np.ndarray | None]:
    """Backpropagate ``grad_logits`` (dL/dz, shape [n, K]) through the network.

    Returns the parameter gradient as a ParamSet and, on request, dL/dx.
    """
    grad_logits = np.atleast_2d(grad_logits)
    if grad_logits.shape != record.logits.shape:
        raise ConfigError(f"upstream gradient shape {grad_logits.shape} != logits {record.logits.shape}")

    grad_head_w, grad_head_b = head_backward(record.features, grad_logits)
    grad_features = grad_logits @ params.head_weight

    grad_branches = []
    grad_input = np.zeros_like(record.inputs) if need_input_grad else None
    offset = 0
    for branch, branch_cache, width in zip(params.branches, record.cache, params.branch_dims, strict=True):
        g = grad_features[:, offset : offset + width]
        offset += width
        layer_grads: list[Layer] = []
        for layer, (layer_input, pre) in zip(reversed(branch), reversed(branch_cache), strict=True):
            if layer.activation == "relu":
                g = g * (pre > 0.0)
            layer_grads.append(Layer(g.T @ layer_input, g.sum(axis=0), layer.activation))
            g = g @ layer.weight
        if grad_input is not None:
            grad_input = grad_input + g
        grad_branches.append(tuple(reversed(layer_grads)))

    return ParamSet(tuple(grad_branches), grad_head_w, grad_head_b), grad_input


def cross_entropy(probs: np.ndarray, labels: np.ndarray | int) -> np.ndarray | float:
    """-log p[label] with a 1e-12 floor. Per-sample array for batches, float for one vector."""
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.atleast_1d(np.asarray(labels, dtype=int))
    picked = p[np.arange(len(y)), y]
    if np.any(picked < LOG_FLOOR):
        logger.warning("Cross-entropy clamped at log floor for %d sample(s)", int(np.sum(picked < LOG_FLOOR)))
    losses = -np.log(np.maximum(picked, LOG_FLOOR))
    if np.ndim(probs) == 1:
        return float(losses[0])
    return losses


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dL/dz of the batch-mean cross-entropy, given softmax probabilities."""
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


def zeros_like(params: ParamSet) -> ParamSet:
    return params.map(np.zeros_like)


def add(a: ParamSet, b: ParamSet) -> ParamSet:
    return a.map(np.add, b)


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten(vector: np.ndarray, like: ParamSet) -> ParamSet:
    arrays = []
    offset = 0
    for a in like.arrays():
        arrays.append(vector[offset : offset + a.size].reshape(a.shape))
        offset += a.size
    if offset != vector.size:
        raise ConfigError(f"vector of size {vector.size} does not match {offset} parameters")
    return like.with_arrays(arrays)


def _pad_to(old: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    overlap = tuple(slice(0, min(o, s)) for o, s in zip(old.shape, shape, strict=True))
    out[overlap] = old[overlap]
    return out


def resize_like(old: ParamSet, like: ParamSet) -> ParamSet:
    """Zero-pad a ParamSet-shaped tree (buffers, importance) after the model grew.

    New head rows/columns and new branches get zeros; existing entries keep
    their values.
    """
    arrays = []
    old_branches = old.branches
    for b, branch in enumerate(like.branches):
        for k, layer in enumerate(branch):
            if b < len(old_branches):
                ref = old_branches[b][k]
                arrays.extend((_pad_to(ref.weight, layer.weight.shape), _pad_to(ref.bias, layer.bias.shape)))
            else:
                arrays.extend((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
    # head columns follow branch order, so old columns sit at the front
    arrays.append(_pad_to(old.head_weight, like.head_weight.shape))
    arrays.append(_pad_to(old.head_bias, like.head_bias.shape))
    return like.with_arrays(arrays)


def expand_head(params: ParamSet, new_class_count: int) -> ParamSet:
    if new_class_count <= 0:
        raise ConfigError(f"new_class_count must be positive, got {new_class_count}")
    rows = np.zeros((new_class_count, params.feature_dim))
    return ParamSet(
        params.branches,
        np.vstack([params.head_weight, rows]),
        np.concatenate([params.head_bias, np.zeros(new_class_count)]),
    )


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[tuple[int, float], ...] = ()
    momentum_buffers: ParamSet | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for milestone, multiplier in sorted(self.milestones):
            if epoch >= milestone:
                lr *= multiplier
        return lr


def sgd_step(
    params: ParamSet,
    grads: ParamSet,
    state: OptimizerState,
    epoch: int,
    mask: ParamSet | None = None,
) -> ParamSet:
    """One SGD step with momentum and L2 weight decay.

    v <- m*v + (g + wd*theta); theta <- theta - lr(epoch)*v. Entries where
    ``mask`` is 0 are left bit-identical.
    """
    if not grads.is_finite():
        raise TrainingError("non-finite gradient; step rejected")

    if state.momentum_buffers is None:
        state.momentum_buffers = zeros_like(params)
    elif [a.shape for a in state.momentum_buffers.arrays()] != [a.shape for a in params.arrays()]:
        state.momentum_buffers = resize_like(state.momentum_buffers, params)

    lr = state.lr_at(epoch)
    m, wd = state.momentum, state.weight_decay

    def _velocity(v: np.ndarray, g: np.ndarray, theta: np.ndarray) -> np.ndarray:
        step = g + wd * theta if wd else g
        return m * v + step if m else step

    velocity = state.momentum_buffers.map(_velocity, grads, params)
    state.momentum_buffers = velocity
    if mask is None:
        return params.map(lambda theta, v: theta - lr * v, velocity)
    return params.map(lambda theta, v, keep: theta - lr * (keep * v), velocity, mask)
