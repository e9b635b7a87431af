"""Dense multi-task network engine with exact backpropagation.

A model is a shared trunk of dense layers plus one head per training
activity. All math is float64 numpy. Gradients are returned as a
``GradientSet``: a dict from block name (``trunk.0.weight``,
``head.s.0.bias``, ...) to an array shaped like the block.
"""

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

if TYPE_CHECKING:
    from .federation import Batch


REGRESSION = "regression"
CLASSIFICATION = "classification"
LOSS_KINDS = (REGRESSION, CLASSIFICATION)

TANH = "tanh"
LINEAR = "linear"

GradientSet = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when arrays do not match the shapes a model expects."""


class StaleCacheError(RuntimeError):
    """Raised when backward is given a cache from before a model mutation."""


@dataclass
class ParamBlock:
    """One weight matrix or bias vector with its gradient and momentum buffers."""
    values: np.ndarray
    grad: Optional[np.ndarray] = None
    momentum_buf: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape or self.momentum_buf.shape != self.values.shape:
            raise ShapeError(f"Buffer shapes {self.grad.shape}/{self.momentum_buf.shape} "
                             f"do not match values {self.values.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.values.copy(), self.grad.copy(), self.momentum_buf.copy())

    def reset_buffers(self) -> None:
        self.grad[...] = 0.0
        self.momentum_buf[...] = 0.0


@dataclass
class DenseLayer:
    """Dense layer ``act(x @ W + b)``; ``bias`` may be omitted."""
    weight: ParamBlock
    bias: Optional[ParamBlock] = None
    activation: str = TANH

    def __post_init__(self):
        if self.activation not in (TANH, LINEAR):
            raise ValueError(f"Unknown activation: {self.activation}")
        if self.weight.values.ndim != 2:
            raise ShapeError(f"Weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.out_dim,):
            raise ShapeError(f"Bias shape {self.bias.shape} does not match width {self.out_dim}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def param_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    @property
    def mac_count(self) -> int:
        """Multiply-accumulates per example."""
        return self.in_dim * self.out_dim

    def named_blocks(self, prefix: str) -> List[Tuple[str, ParamBlock]]:
        blocks = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            blocks.append((f"{prefix}.bias", self.bias))
        return blocks

    def copy(self) -> "DenseLayer":
        return DenseLayer(
            weight=self.weight.copy(),
            bias=self.bias.copy() if self.bias is not None else None,
            activation=self.activation,
        )


@dataclass
class HyperParams:
    """Optimizer settings: SGD with momentum, weight decay and polynomial LR decay."""
    eta0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_rounds: int = 100
    batch_size: int = 10

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError(f"eta0 must be positive, got {self.eta0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.total_rounds < 1:
            raise ValueError(f"total_rounds must be at least 1, got {self.total_rounds}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")


class MultiTaskModel:
    """Shared trunk plus one head per activity.

    ``version`` increases on every in-place mutation so that stale forward
    caches can be detected.
    """

    def __init__(self, trunk: List[DenseLayer], heads: Dict[str, List[DenseLayer]],
                 loss_kinds: Dict[str, str]):
        if not trunk:
            raise ValueError("Model needs at least one trunk layer")
        if not heads:
            raise ValueError("Model needs at least one head")
        for prev, nxt in zip(trunk, trunk[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"Trunk widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        width = trunk[-1].out_dim
        for activity, layers in heads.items():
            if not layers:
                raise ValueError(f"Head for activity '{activity}' has no layers")
            if layers[0].in_dim != width:
                raise ShapeError(f"Head '{activity}' expects width {layers[0].in_dim}, trunk gives {width}")
            for prev, nxt in zip(layers, layers[1:]):
                if prev.out_dim != nxt.in_dim:
                    raise ShapeError(f"Head '{activity}' widths do not chain")
            if loss_kinds.get(activity) not in LOSS_KINDS:
                raise ValueError(f"Activity '{activity}' needs a loss kind in {LOSS_KINDS}")

        self.trunk = trunk
        self.heads = dict(heads)
        self.loss_kinds = {a: loss_kinds[a] for a in heads}
        self.version = 0

    @property
    def activity_ids(self) -> Tuple[str, ...]:
        return tuple(self.heads)

    @property
    def input_dim(self) -> int:
        return self.trunk[0].in_dim

    @property
    def trunk_width(self) -> int:
        return self.trunk[-1].out_dim

    def layers_for(self, activity: str) -> List[DenseLayer]:
        if activity not in self.heads:
            raise KeyError(f"Unknown activity: {activity}")
        return self.trunk + self.heads[activity]

    def trunk_blocks(self) -> Dict[str, ParamBlock]:
        blocks = {}
        for i, layer in enumerate(self.trunk):
            blocks.update(layer.named_blocks(f"trunk.{i}"))
        return blocks

    def head_blocks(self, activity: str) -> Dict[str, ParamBlock]:
        if activity not in self.heads:
            raise KeyError(f"Unknown activity: {activity}")
        blocks = {}
        for i, layer in enumerate(self.heads[activity]):
            blocks.update(layer.named_blocks(f"head.{activity}.{i}"))
        return blocks

    def blocks(self, activity: Optional[str] = None) -> Dict[str, ParamBlock]:
        """All blocks in a stable order, or only trunk + one head."""
        blocks = self.trunk_blocks()
        for a in ([activity] if activity is not None else self.activity_ids):
            blocks.update(self.head_blocks(a))
        return blocks

    def layer_names(self, activity: str) -> List[str]:
        names = [f"trunk.{i}" for i in range(len(self.trunk))]
        names += [f"head.{activity}.{i}" for i in range(len(self.heads[activity]))]
        return names

    def clone(self) -> "MultiTaskModel":
        return self.select(self.activity_ids)

    def select(self, activity_ids) -> "MultiTaskModel":
        """Deep copy of the trunk with copies of the given heads only."""
        missing = [a for a in activity_ids if a not in self.heads]
        if missing:
            raise KeyError(f"Unknown activities: {missing}")
        return MultiTaskModel(
            trunk=[layer.copy() for layer in self.trunk],
            heads={a: [layer.copy() for layer in self.heads[a]] for a in activity_ids},
            loss_kinds={a: self.loss_kinds[a] for a in activity_ids},
        )

    def compatible_with(self, other: "MultiTaskModel") -> bool:
        """Aggregation compatibility: same activities and same block shapes."""
        if self.activity_ids != other.activity_ids:
            return False
        mine, theirs = self.blocks(), other.blocks()
        return list(mine) == list(theirs) and all(
            mine[name].shape == theirs[name].shape for name in mine
        )

    def reset_buffers(self) -> None:
        for block in self.blocks().values():
            block.reset_buffers()
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def digest(self) -> str:
        """SHA-256 over every parameter, gradient and momentum buffer."""
        h = hashlib.sha256()
        for name, block in self.blocks().items():
            h.update(name.encode())
            h.update(block.values.tobytes())
            h.update(block.grad.tobytes())
            h.update(block.momentum_buf.tobytes())
        return h.hexdigest()

    def param_count(self, activity: Optional[str] = None) -> int:
        return sum(block.size for block in self.blocks(activity).values())


def init_layer(in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: str = TANH, bias: bool = True) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ShapeError(f"Layer dimensions must be positive, got {in_dim}x{out_dim}")
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return DenseLayer(
        weight=ParamBlock(weight),
        bias=ParamBlock(np.zeros(out_dim)) if bias else None,
        activation=activation,
    )


def build_model(input_dim: int, trunk_widths: List[int], head_outputs: Dict[str, int],
                loss_kinds: Dict[str, str], trunk_rng: np.random.Generator,
                head_rngs: Dict[str, np.random.Generator]) -> MultiTaskModel:
    """Tanh trunk with linear heads; every head draws from its own generator."""
    trunk = []
    width = input_dim
    for hidden in trunk_widths:
        trunk.append(init_layer(width, hidden, trunk_rng, TANH))
        width = hidden
    heads = {
        activity: [init_layer(width, out_dim, head_rngs[activity], LINEAR)]
        for activity, out_dim in head_outputs.items()
    }
    return MultiTaskModel(trunk, heads, loss_kinds)


@dataclass
class ForwardCache:
    """Activations recorded by forward_loss for one activity."""
    activity: str
    version: int
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    output_grad: np.ndarray
    batch_size: int = field(default=0)


def _check_features(model: MultiTaskModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim or x.shape[0] < 1:
        raise ShapeError(f"Features of shape {x.shape} do not fit input width {model.input_dim}")
    return x


def _run_layers(x: np.ndarray, layers: List[DenseLayer], names: List[str],
                overrides: Optional[GradientSet] = None):
    inputs, outputs = [], []
    a = x
    for layer, name in zip(layers, names):
        weight = layer.weight.values
        bias = layer.bias.values if layer.bias is not None else None
        if overrides is not None:
            weight = overrides.get(f"{name}.weight", weight)
            if bias is not None:
                bias = overrides.get(f"{name}.bias", bias)
        inputs.append(a)
        z = a @ weight
        if bias is not None:
            z = z + bias
        a = np.tanh(z) if layer.activation == TANH else z
        outputs.append(a)
    return inputs, outputs


def _loss_and_grad(prediction: np.ndarray, targets, kind: str) -> Tuple[float, np.ndarray]:
    batch = prediction.shape[0]
    if kind == REGRESSION:
        t = np.asarray(targets, dtype=np.float64).reshape(batch, -1)
        if t.shape != prediction.shape:
            raise ShapeError(f"Regression targets {t.shape} do not match outputs {prediction.shape}")
        residual = prediction - t
        loss = float(np.sum(residual * residual) / batch)
        return loss, 2.0 * residual / batch

    labels = np.asarray(targets).reshape(-1).astype(np.int64)
    if labels.shape[0] != batch:
        raise ShapeError(f"Got {labels.shape[0]} labels for {batch} examples")
    if labels.min() < 0 or labels.max() >= prediction.shape[1]:
        raise ShapeError(f"Class labels outside [0, {prediction.shape[1]})")
    shifted = prediction - prediction.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].sum() / batch)
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def _targets_for(batch: "Batch", activity: str):
    try:
        return batch.targets[activity]
    except KeyError:
        raise KeyError(f"Batch has no targets for activity '{activity}'") from None


def forward_loss(model: MultiTaskModel, activity: str, batch: "Batch") -> Tuple[float, ForwardCache]:
    """Mean per-example loss of one activity on a batch, with a cache for backward."""
    layers = model.layers_for(activity)
    x = _check_features(model, batch.features)
    inputs, outputs = _run_layers(x, layers, model.layer_names(activity))
    loss, output_grad = _loss_and_grad(outputs[-1], _targets_for(batch, activity),
                                       model.loss_kinds[activity])
    cache = ForwardCache(activity, model.version, inputs, outputs, output_grad, x.shape[0])
    return loss, cache


def backward(model: MultiTaskModel, activity: str, cache: ForwardCache) -> GradientSet:
    """Exact gradients of the batch-mean loss for the trunk and one head."""
    if cache.activity != activity:
        raise ValueError(f"Cache was recorded for '{cache.activity}', not '{activity}'")
    if cache.version != model.version:
        raise StaleCacheError(f"Model changed since forward (version {cache.version} -> {model.version})")

    layers = model.layers_for(activity)
    names = model.layer_names(activity)
    grads: GradientSet = {}
    delta = cache.output_grad
    for idx in reversed(range(len(layers))):
        layer = layers[idx]
        if layer.activation == TANH:
            out = cache.outputs[idx]
            delta = delta * (1.0 - out * out)
        grads[f"{names[idx]}.weight"] = cache.inputs[idx].T @ delta
        if layer.bias is not None:
            grads[f"{names[idx]}.bias"] = delta.sum(axis=0)
        delta = delta @ layer.weight.values.T
    return {name: grads[name] for name in model.blocks(activity)}


def trunk_features(model: MultiTaskModel, features, trunk: Optional[GradientSet] = None) -> np.ndarray:
    """Trunk output, optionally with substituted trunk parameters."""
    x = _check_features(model, features)
    names = [f"trunk.{i}" for i in range(len(model.trunk))]
    _, outputs = _run_layers(x, model.trunk, names, trunk)
    return outputs[-1]


def head_loss(model: MultiTaskModel, activity: str, hidden: np.ndarray, targets) -> float:
    """Loss of one head applied to precomputed trunk features."""
    layers = model.heads.get(activity)
    if layers is None:
        raise KeyError(f"Unknown activity: {activity}")
    names = [f"head.{activity}.{i}" for i in range(len(layers))]
    _, outputs = _run_layers(hidden, layers, names)
    loss, _ = _loss_and_grad(outputs[-1], targets, model.loss_kinds[activity])
    return loss


def poly_lr(r: int, R: int, eta0: float) -> float:
    """Polynomial decay ``eta0 * (1 - r/R) ** 0.9``."""
    if R < 1:
        raise ValueError(f"Total rounds must be at least 1, got {R}")
    if r < 0 or r > R:
        raise ValueError(f"Round {r} outside [0, {R}]")
    return eta0 * (1.0 - r / R) ** 0.9


def sgd_step(model: MultiTaskModel, grads: GradientSet, lr: float, hyper: HyperParams) -> None:
    """Momentum SGD with L2 weight decay, applied only to blocks present in ``grads``."""
    blocks = model.blocks()
    for name, g in grads.items():
        if name not in blocks:
            raise ShapeError(f"Gradient for unknown block '{name}'")
        if np.shape(g) != blocks[name].shape:
            raise ShapeError(f"Gradient for '{name}' has shape {np.shape(g)}, expected {blocks[name].shape}")

    for name, g in grads.items():
        block = blocks[name]
        block.momentum_buf *= hyper.momentum
        block.momentum_buf += g + hyper.weight_decay * block.values
        block.values -= lr * block.momentum_buf
        block.grad[...] = g
    model.touch()


def lookahead_shared(model: MultiTaskModel, activity: str, batch: "Batch", lr: float) -> GradientSet:
    """Trunk parameters after one plain gradient step on ``activity``'s batch loss.

    The step uses no momentum and no weight decay; the model is not touched.
    """
    _, cache = forward_loss(model, activity, batch)
    grads = backward(model, activity, cache)
    return {
        name: block.values - lr * grads[name]
        for name, block in model.trunk_blocks().items()
    }
