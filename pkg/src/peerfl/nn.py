"""Dense MLP kernel for heterogeneous-width clients.

Models are plain value objects (per-layer weight/bias arrays plus SGD momentum
buffers), all float64, no framework underneath. Architecture is fixed to
affine layers with ReLU between all but the last; the last layer emits raw
logits. Shapes are checked eagerly: silent broadcasting is treated as a bug.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelSpec",
    "Model",
    "Gradients",
    "init_model",
    "forward",
    "backward",
    "sgd_step",
    "param_count",
    "layer_slice",
    "write_slice",
    "clone_model",
    "zero_gradients",
    "model_hash",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one client model.

    ``layer_widths`` lists the hidden-layer output widths in order; input and
    output dims complete the shape chain. Two specs denote the same
    architecture iff all three fields compare equal (cluster-wise averaging
    keys on exactly this equality).
    """

    layer_widths: tuple[int, ...]
    input_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) == 0:
            raise ValueError("layer_widths must be non-empty")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer_widths must be positive, got {self.layer_widths}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) weight shapes for every affine layer, in order."""
        dims = (self.input_dim, *self.layer_widths, self.num_classes)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def count_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


@dataclass
class Model:
    """Parameters plus SGD momentum buffers for one MLP."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    vel_w: list[np.ndarray] = field(repr=False, default_factory=list)
    vel_b: list[np.ndarray] = field(repr=False, default_factory=list)

    def __post_init__(self) -> None:
        shapes = self.spec.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match spec")
        for k, (o, i) in enumerate(shapes):
            if self.weights[k].shape != (o, i):
                raise ValueError(
                    f"layer {k}: weight shape {self.weights[k].shape} != expected {(o, i)}"
                )
            if self.biases[k].shape != (o,):
                raise ValueError(
                    f"layer {k}: bias shape {self.biases[k].shape} != expected {(o,)}"
                )
        if not self.vel_w:
            self.vel_w = [np.zeros_like(w) for w in self.weights]
        if not self.vel_b:
            self.vel_b = [np.zeros_like(b) for b in self.biases]


@dataclass
class Gradients:
    """Per-layer parameter gradients, congruent with some Model."""

    grad_w: list[np.ndarray]
    grad_b: list[np.ndarray]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def init_model(spec: ModelSpec, seed: int) -> Model:
    """Build a freshly initialized model.

    Weights are drawn U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases and momentum
    start at zero. The RNG is keyed on (seed, architecture), so two clients
    with the same architecture and seed start bit-identical, while different
    architectures get independent draws.
    """
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    ss = np.random.SeedSequence(
        [int(seed), spec.input_dim, spec.num_classes, len(spec.layer_widths), *spec.layer_widths]
    )
    rng = np.random.default_rng(ss)
    weights, biases = [], []
    for out_w, in_w in spec.layer_shapes():
        bound = 1.0 / np.sqrt(in_w)
        weights.append(rng.uniform(-bound, bound, size=(out_w, in_w)))
        biases.append(np.zeros(out_w))
    return Model(spec=spec, weights=weights, biases=biases)


def clone_model(model: Model) -> Model:
    """Deep copy (parameters and momentum buffers)."""
    return Model(
        spec=model.spec,
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        vel_w=[v.copy() for v in model.vel_w],
        vel_b=[v.copy() for v in model.vel_b],
    )


def zero_gradients(model: Model) -> Gradients:
    return Gradients(
        grad_w=[np.zeros_like(w) for w in model.weights],
        grad_b=[np.zeros_like(b) for b in model.biases],
    )


# ---------------------------------------------------------------------------
# forward / backward / step
# ---------------------------------------------------------------------------

def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"batch must be 2-D (B, input_dim), got ndim={batch.ndim}")
    if batch.shape[1] != model.spec.input_dim:
        raise ValueError(
            f"batch feature dim {batch.shape[1]} != model input_dim {model.spec.input_dim}"
        )
    return batch


def _forward_cache(model: Model, batch: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return (activations, pre-activations); activations[0] is the input."""
    acts = [batch]
    pres = []
    h = batch
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pres.append(z)
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pres


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (B, num_classes)."""
    batch = _check_batch(model, batch)
    _, pres = _forward_cache(model, batch)
    return pres[-1]


def backward(model: Model, batch: np.ndarray, logit_grad: np.ndarray) -> Gradients:
    """Backpropagate a loss gradient on the logits to parameter gradients.

    ``logit_grad`` must be (B, num_classes), i.e. d(loss)/d(logits) for the
    same batch; the ReLU derivative at exactly zero is taken as zero.
    """
    batch = _check_batch(model, batch)
    logit_grad = np.asarray(logit_grad, dtype=np.float64)
    expected = (batch.shape[0], model.spec.num_classes)
    if logit_grad.shape != expected:
        raise ValueError(f"logit_grad shape {logit_grad.shape} != expected {expected}")
    acts, pres = _forward_cache(model, batch)
    n_layers = len(model.weights)
    grad_w: list[np.ndarray | None] = [None] * n_layers
    grad_b: list[np.ndarray | None] = [None] * n_layers
    delta = logit_grad
    for k in range(n_layers - 1, -1, -1):
        grad_w[k] = delta.T @ acts[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pres[k - 1] > 0.0)
    return Gradients(grad_w=grad_w, grad_b=grad_b)  # type: ignore[arg-type]


def sgd_step(
    model: Model,
    grads: Gradients,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> Model:
    """One SGD update with classical momentum and L2 weight decay, in place.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
    Momentum buffers advance even when lr == 0. Non-finite gradients, or a
    non-finite parameter after the step, raise immediately.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(grads.grad_w) != len(model.weights) or len(grads.grad_b) != len(model.biases):
        raise ValueError("gradient layer count does not match model")
    for k, (gw, gb) in enumerate(zip(grads.grad_w, grads.grad_b)):
        if gw.shape != model.weights[k].shape or gb.shape != model.biases[k].shape:
            raise ValueError(f"layer {k}: gradient shape mismatch")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise ValueError(f"layer {k}: non-finite gradient")
    for k in range(len(model.weights)):
        model.vel_w[k] = momentum * model.vel_w[k] + (grads.grad_w[k] + weight_decay * model.weights[k])
        model.vel_b[k] = momentum * model.vel_b[k] + (grads.grad_b[k] + weight_decay * model.biases[k])
        model.weights[k] = model.weights[k] - lr * model.vel_w[k]
        model.biases[k] = model.biases[k] - lr * model.vel_b[k]
        if not (np.all(np.isfinite(model.weights[k])) and np.all(np.isfinite(model.biases[k]))):
            raise ValueError(f"layer {k}: non-finite parameter after update (diverged?)")
    return model


def param_count(model_or_spec: Model | ModelSpec) -> int:
    """Total scalar parameter count (weights + biases)."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    return spec.count_params()


# ---------------------------------------------------------------------------
# sub-model slicing (partial-training schemes)
# ---------------------------------------------------------------------------

def _check_indices(idx: np.ndarray, bound: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError(f"{what}: index set must be a non-empty 1-D array")
    if idx.min() < 0 or idx.max() >= bound:
        raise ValueError(f"{what}: index out of range for width {bound}")
    if np.unique(idx).size != idx.size:
        raise ValueError(f"{what}: duplicate indices")
    return idx


def layer_slice(
    model: Model,
    layer: int,
    out_indices: np.ndarray,
    in_indices: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Copy of the (out_indices x in_indices) weight block and bias sub-vector."""
    if not 0 <= layer < len(model.weights):
        raise ValueError(f"layer {layer} out of range")
    w = model.weights[layer]
    out_idx = _check_indices(out_indices, w.shape[0], f"layer {layer} out")
    in_idx = _check_indices(in_indices, w.shape[1], f"layer {layer} in")
    return w[np.ix_(out_idx, in_idx)], model.biases[layer][out_idx].copy()


def write_slice(
    model: Model,
    layer: int,
    out_indices: np.ndarray,
    in_indices: np.ndarray,
    w_block: np.ndarray,
    b_block: np.ndarray,
) -> None:
    """Write a weight block / bias sub-vector back in place (inverse of layer_slice)."""
    if not 0 <= layer < len(model.weights):
        raise ValueError(f"layer {layer} out of range")
    w = model.weights[layer]
    out_idx = _check_indices(out_indices, w.shape[0], f"layer {layer} out")
    in_idx = _check_indices(in_indices, w.shape[1], f"layer {layer} in")
    w_block = np.asarray(w_block, dtype=np.float64)
    b_block = np.asarray(b_block, dtype=np.float64)
    if w_block.shape != (out_idx.size, in_idx.size):
        raise ValueError(f"w_block shape {w_block.shape} != {(out_idx.size, in_idx.size)}")
    if b_block.shape != (out_idx.size,):
        raise ValueError(f"b_block shape {b_block.shape} != {(out_idx.size,)}")
    w[np.ix_(out_idx, in_idx)] = w_block
    model.biases[layer][out_idx] = b_block


def model_hash(model: Model) -> str:
    """SHA-256 over the architecture and raw parameter bytes (momentum excluded)."""
    h = hashlib.sha256()
    h.update(repr((model.spec.layer_widths, model.spec.input_dim, model.spec.num_classes)).encode())
    for w, b in zip(model.weights, model.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()
