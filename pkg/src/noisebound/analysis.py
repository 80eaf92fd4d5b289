"""Interlayer Jacobians and the input-dependent quantities they feed.

For a ReLU net the derivative of layer d's preactivation with respect to
layer d'-s preactivation is an explicit product of weight matrices with the
inactive units' rows/columns zeroed out.  Everything here computes those
products exactly (never by numerical differentiation) and then reduces the
per-input quantities over a dataset into the norm constants the bound
machinery consumes:

  alpha  - per-layer activation l2 ceilings (clamped to >= 1)
  gamma  - per-layer floors on the magnitude of the least-committed unit,
           plus two robust variants (drop the worst 5% of points; use each
           layer's median unit instead of its minimum)
  zeta   - per layer-pair ceilings on Jacobian row l2 norms (clamped >= 1)
  kappa  - per layer-pair ceilings on Jacobian spectral norms (clamped >= 1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import max_row_l2, row_l2_norms, spectral_norm
from .network import ForwardTrace, LabeledExample, MlpParams, forward, margin

__all__ = [
    "InterlayerJacobian",
    "InputProperties",
    "PropertyBounds",
    "jacobian",
    "all_jacobians",
    "input_properties",
    "aggregate_bounds",
    "scan_dataset",
]


@dataclass(frozen=True)
class InterlayerJacobian:
    from_layer: int
    to_layer: int
    matrix: np.ndarray


@dataclass(frozen=True)
class InputProperties:
    """Every measured quantity for a single input.

    layer_l2[d] is the activation norm of layer d for d = 0..D-1 (index 0
    is the input itself).  min_preact and sorted_abs_preacts are keyed by
    hidden layer d = 1..D-1.  The Jacobian dicts are keyed by layer pairs
    (d_from, d_to) with 1 <= d_from < d_to <= D.
    """

    layer_l2: tuple[float, ...]
    min_preact: dict[int, float]
    sorted_abs_preacts: dict[int, np.ndarray]
    jac_row_l2: dict[tuple[int, int], float]
    jac_spec: dict[tuple[int, int], float]
    margin_value: float


@dataclass(frozen=True)
class PropertyBounds:
    """Dataset-level reductions of InputProperties.

    alpha[d] for d = 0..D-1; the gamma maps are keyed by hidden layer
    d = 1..D-1; zeta/kappa by pairs (d_from, d_to), 1 <= d_from < d_to <= D.
    """

    alpha: tuple[float, ...]
    gamma_min: dict[int, float]
    gamma_5pc: dict[int, float]
    gamma_median: dict[int, float]
    zeta: dict[tuple[int, int], float]
    kappa: dict[tuple[int, int], float]
    m: int
    gamma_class: float

    @property
    def depth(self) -> int:
        return len(self.alpha)

    def pairs(self):
        return sorted(self.zeta.keys())


def _masked_weight(params: MlpParams, trace: ForwardTrace, d: int) -> np.ndarray:
    """W_d with columns of inactive layer-(d-1) units zeroed; the d = 1 case
    has no mask on the input."""
    w = params.weights[d - 1]
    if d == 1:
        return w
    return w * trace.masks[d - 2]  # broadcast over columns


def jacobian(params: MlpParams, trace: ForwardTrace, d_from: int, d_to: int) -> InterlayerJacobian:
    """Derivative of layer d_to's preactivation w.r.t. layer d_from's,
    as the exact product of mask-filtered weight matrices."""
    depth = params.depth
    if not 0 <= d_from <= d_to <= depth:
        raise ValueError(f"invalid layer pair ({d_from}, {d_to}) for depth {depth}")
    if d_from == d_to:
        return InterlayerJacobian(d_from, d_to, np.eye(params.dims[d_from]))
    j = _masked_weight(params, trace, d_from + 1)
    for d in range(d_from + 2, d_to + 1):
        j = _masked_weight(params, trace, d) @ j
    return InterlayerJacobian(d_from, d_to, j)


def all_jacobians(params: MlpParams, trace: ForwardTrace) -> dict[tuple[int, int], np.ndarray]:
    """Matrices for every pair 1 <= d_from < d_to <= D in O(D^2) products."""
    depth = params.depth
    out: dict[tuple[int, int], np.ndarray] = {}
    for d_from in range(1, depth):
        j = _masked_weight(params, trace, d_from + 1)
        out[(d_from, d_from + 1)] = j
        for d_to in range(d_from + 2, depth + 1):
            j = _masked_weight(params, trace, d_to) @ j
            out[(d_from, d_to)] = j
    return out


def _median_abs_preact(abs_sorted: np.ndarray) -> float:
    """Smallest surviving unit after discarding the lower half of a layer."""
    h = abs_sorted.shape[0]
    idx = min(math.ceil(h / 2), h - 1)
    return float(abs_sorted[idx])


def input_properties(params: MlpParams, example: LabeledExample) -> InputProperties:
    trace = forward(params, example.x)
    depth = params.depth
    layer_l2 = tuple(float(np.linalg.norm(trace.acts[d])) for d in range(depth))
    min_preact: dict[int, float] = {}
    sorted_abs: dict[int, np.ndarray] = {}
    for d in range(1, depth):
        a = np.sort(np.abs(trace.preacts[d - 1]))
        sorted_abs[d] = a
        min_preact[d] = float(a[0])
    jac_row: dict[tuple[int, int], float] = {}
    jac_spec: dict[tuple[int, int], float] = {}
    for pair, mat in all_jacobians(params, trace).items():
        jac_row[pair] = float(max_row_l2(mat))
        jac_spec[pair] = float(spectral_norm(mat))
    return InputProperties(
        layer_l2=layer_l2,
        min_preact=min_preact,
        sorted_abs_preacts=sorted_abs,
        jac_row_l2=jac_row,
        jac_spec=jac_spec,
        margin_value=margin(trace, example.y),
    )


def aggregate_bounds(per_input, gamma_class: float) -> PropertyBounds:
    per_input = list(per_input)
    if not per_input:
        raise ValueError("cannot aggregate an empty property sequence")
    m = len(per_input)
    depth = len(per_input[0].layer_l2)
    hidden = range(1, depth)
    pairs = sorted(per_input[0].jac_row_l2.keys())

    alpha = tuple(max(max(p.layer_l2[d] for p in per_input), 1.0) for d in range(depth))
    gamma_min = {d: min(p.min_preact[d] for p in per_input) for d in hidden}
    zeta = {pr: max(max(p.jac_row_l2[pr] for p in per_input), 1.0) for pr in pairs}
    kappa = {pr: max(max(p.jac_spec[pr] for p in per_input), 1.0) for pr in pairs}

    # Robust variant 1: drop the ceil(5% of m) points whose overall smallest
    # |preactivation| (min across layers and units) is lowest, then take the
    # same per-layer minima over the survivors.
    drop = min(math.ceil(0.05 * m), m - 1)
    overall = np.array([min(p.min_preact[d] for d in hidden) for p in per_input])
    keep = np.argsort(overall, kind="stable")[drop:]
    gamma_5pc = {d: min(per_input[i].min_preact[d] for i in keep) for d in hidden}

    # Robust variant 2: per input, ignore the half of each layer's units with
    # the smallest |preactivation|; aggregate by min over inputs.
    gamma_median = {
        d: min(_median_abs_preact(p.sorted_abs_preacts[d]) for p in per_input) for d in hidden
    }

    return PropertyBounds(
        alpha=alpha,
        gamma_min=gamma_min,
        gamma_5pc=gamma_5pc,
        gamma_median=gamma_median,
        zeta=zeta,
        kappa=kappa,
        m=m,
        gamma_class=float(gamma_class),
    )


def scan_dataset(params: MlpParams, data, gamma_class: float = 10.0):
    """Per-input properties for a whole dataset plus their aggregation.

    Returns (PropertyBounds, list of InputProperties), the list in dataset
    order.  Aggregation is a pure max/min reduction, so any partitioning of
    the work gives identical results.
    """
    data = list(data)
    if not data:
        raise ValueError("cannot scan an empty dataset")
    archive = []
    for i, ex in enumerate(data):
        try:
            archive.append(input_properties(params, ex))
        except Exception as exc:
            raise RuntimeError(f"property extraction failed at dataset index {i}: {exc}") from exc
    return aggregate_bounds(archive, gamma_class), archive
