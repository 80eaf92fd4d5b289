"""Bias-free ReLU feedforward networks with full activation traces.

The architecture is a plain stack of linear maps with ReLU between them and
no activation on the final layer:

    logits(x) = W_D relu( W_{D-1} relu( ... relu(W_1 x) ... ) )

There are deliberately no bias terms anywhere: every quantity downstream
(Jacobians, margins, perturbation tolerances) relies on the network being
positively homogeneous in its input.

Layer indexing convention used across the package: layer d in 1..D has
weight matrix ``weights[d-1]`` of shape dims[d] x dims[d-1]; layer 0 is the
input itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import RngStream, as_vector, sample_gaussian_matrix

__all__ = [
    "MlpParams",
    "ForwardTrace",
    "LabeledExample",
    "NarrowNetworkWarning",
    "init_network",
    "forward",
    "margin",
    "margin_loss",
    "grad_cross_entropy",
    "stack_examples",
    "batch_logits",
    "batch_margins",
]


class NarrowNetworkWarning(UserWarning):
    """A hidden layer is narrower than the input dimension.

    The analysis machinery assumes hidden width >= input width; narrower
    nets still run, but the norm-based diagnostics lose their intended
    interpretation.
    """


@dataclass(frozen=True)
class MlpParams:
    """Weights of a bias-free ReLU net plus a frozen snapshot of the
    weights at initialization (the snapshot anchors the distance-from-init
    terms and is never updated by training)."""

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    init_snapshot: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 3:
            raise ValueError(f"need at least 2 layers, got dims {dims}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dims must be positive, got {dims}")
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        zs = tuple(np.ascontiguousarray(z, dtype=np.float64) for z in self.init_snapshot)
        if len(ws) != len(dims) - 1 or len(zs) != len(ws):
            raise ValueError("weight count does not match dims")
        for d, w in enumerate(ws):
            want = (dims[d + 1], dims[d])
            if w.shape != want:
                raise ValueError(f"weights[{d}] has shape {w.shape}, expected {want}")
            if zs[d].shape != want:
                raise ValueError(f"init_snapshot[{d}] has shape {zs[d].shape}, expected {want}")
        for z in zs:
            z.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "init_snapshot", zs)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    @property
    def hidden_width(self) -> int:
        return max(self.dims[1:-1])

    def copy_weights(self) -> list[np.ndarray]:
        return [w.copy() for w in self.weights]

    def with_weights(self, new_weights) -> "MlpParams":
        """Same architecture and init snapshot, different current weights."""
        return MlpParams(self.dims, tuple(new_weights), self.init_snapshot)


@dataclass(frozen=True)
class ForwardTrace:
    """Everything a single forward pass produced.

    preacts[d-1] is the linear output of layer d (d = 1..D); acts[d] is the
    post-ReLU value of layer d for d = 0..D-1 with acts[0] == x; masks[d-1]
    is the 0/1 activation pattern of hidden layer d (d = 1..D-1), where a
    unit counts as active only for strictly positive preactivation.
    """

    x: np.ndarray
    preacts: tuple[np.ndarray, ...]
    acts: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        object.__setattr__(self, "x", as_vector(self.x))
        object.__setattr__(self, "y", int(self.y))
        if self.y < 0:
            raise ValueError(f"label must be nonnegative, got {self.y}")


def init_network(dims, scheme: str = "inv-sqrt-fanin", rng: RngStream | None = None) -> MlpParams:
    """Sample i.i.d. Gaussian weights and freeze them as the init snapshot.

    scheme 'inv-sqrt-fanin' (default): entry std 1/sqrt(fan_in), so an HxH
    layer has spectral norm near 2 and Frobenius norm near sqrt(H).
    scheme 'paper-footnote': entry *variance* 1/sqrt(fan_in); kept selectable
    because the two readings disagree and both are plausible elsewhere.
    """
    if rng is None:
        rng = RngStream(0)
    dims = tuple(int(d) for d in dims)
    if len(dims) < 3:
        raise ValueError(f"need at least 2 layers, got dims {dims}")
    if scheme not in ("inv-sqrt-fanin", "paper-footnote"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if min(dims[1:-1]) < dims[0]:
        warnings.warn(
            f"hidden width {min(dims[1:-1])} is below the input dimension {dims[0]}; "
            "norm-based diagnostics assume hidden layers at least as wide as the input",
            NarrowNetworkWarning,
            stacklevel=2,
        )
    ws = []
    for d in range(len(dims) - 1):
        fan_in = dims[d]
        if scheme == "inv-sqrt-fanin":
            std = 1.0 / np.sqrt(fan_in)
        else:
            std = fan_in ** -0.25  # variance 1/sqrt(fan_in)
        ws.append(sample_gaussian_matrix(dims[d + 1], fan_in, std, rng))
    return MlpParams(dims, tuple(ws), tuple(w.copy() for w in ws))


def forward(params: MlpParams, x) -> ForwardTrace:
    """Run the net on one input, recording preactivations, activations and
    activation masks for every layer."""
    x = as_vector(x)
    if x.shape[0] != params.input_dim:
        raise ValueError(f"input has dim {x.shape[0]}, network expects {params.input_dim}")
    depth = params.depth
    preacts: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    masks: list[np.ndarray] = []
    h = x
    for d in range(depth):
        f = params.weights[d] @ h
        preacts.append(f)
        if d < depth - 1:
            mask = (f > 0.0).astype(np.float64)  # strict: a unit at exactly 0 is inactive
            h = f * mask
            acts.append(h)
            masks.append(mask)
    return ForwardTrace(x=x, preacts=tuple(preacts), acts=tuple(acts), masks=tuple(masks))


def margin(trace: ForwardTrace, y: int) -> float:
    """Gap between the label's logit and the best competing logit."""
    logits = trace.logits
    k = logits.shape[0]
    if k < 2:
        raise ValueError(f"margin needs at least 2 classes, got {k}")
    if not 0 <= y < k:
        raise ValueError(f"label {y} out of range for {k} classes")
    rival = np.max(np.delete(logits, y))
    return float(logits[y] - rival)


def margin_loss(trace: ForwardTrace, y: int, gamma: float) -> int:
    """0/1 loss at margin threshold gamma: 0 iff margin >= gamma (ties
    count as satisfied); gamma = 0 recovers plain classification error."""
    if gamma < 0:
        raise ValueError(f"margin threshold must be nonnegative, got {gamma}")
    return 0 if margin(trace, y) >= gamma else 1


def stack_examples(batch) -> tuple[np.ndarray, np.ndarray]:
    """Pack a sequence of LabeledExample into (X, y) arrays."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    xs = np.stack([ex.x for ex in batch])
    ys = np.array([ex.y for ex in batch], dtype=np.int64)
    return xs, ys


def _batch_forward(weights, xs):
    """Batched layer outputs: returns (per-layer post-ReLU values starting
    with the input, hidden masks, logits). xs has shape (B, N)."""
    hs = [xs]
    masks = []
    cur = xs
    depth = len(weights)
    for d in range(depth):
        f = cur @ weights[d].T
        if d < depth - 1:
            m = f > 0.0
            cur = np.where(m, f, 0.0)
            hs.append(cur)
            masks.append(m)
        else:
            return hs, masks, f
    raise AssertionError("unreachable")


def batch_logits(params: MlpParams, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.input_dim:
        raise ValueError(f"expected shape (B, {params.input_dim}), got {xs.shape}")
    return _batch_forward(params.weights, xs)[2]


def batch_margins(params: MlpParams, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Per-example classification margins, vectorized over the batch."""
    logits = batch_logits(params, xs)
    if logits.shape[1] < 2:
        raise ValueError("margins need at least 2 classes")
    idx = np.arange(logits.shape[0])
    own = logits[idx, ys].copy()
    rivals = logits.copy()
    rivals[idx, ys] = -np.inf
    return own - rivals.max(axis=1)


def grad_cross_entropy(params: MlpParams, batch) -> list[np.ndarray]:
    """Mean gradient of softmax cross-entropy over the batch, one matrix per
    layer, same shapes as the weights."""
    xs, ys = stack_examples(batch)
    if xs.shape[1] != params.input_dim:
        raise ValueError(f"batch input dim {xs.shape[1]} != network dim {params.input_dim}")
    hs, masks, logits = _batch_forward(params.weights, xs)
    b, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)  # overflow-safe softmax
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(b), ys] -= 1.0
    delta /= b
    depth = params.depth
    grads: list[np.ndarray] = [np.empty(0)] * depth
    for d in range(depth - 1, -1, -1):
        grads[d] = delta.T @ hs[d]
        if d > 0:
            delta = (delta @ params.weights[d]) * masks[d - 1]
    return grads
