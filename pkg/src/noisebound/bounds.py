"""Deterministic generalization-bound assembly from measured properties.

Pipeline: the dataset-level property ceilings/floors (PropertyBounds) are
turned into one linear-in-sigma tolerance constraint per guarded property;
the largest noise scale sigma* satisfying every constraint at half its
margin follows by a direct min; the KL between the weight posterior
N(W, sigma*^2 I) and the init-centered prior N(Z, sigma*^2 I) is a squared
Frobenius distance; and the final bound is the margin-loss train term plus
the concentration penalty evaluated across all condition sets.

Dimensionless diagnostic ratios (the B terms) are computed alongside as a
reporting view: they determine 1/sigma* up to logarithmic factors and are
the quantities whose growth with depth the experiments track.

Conventions used throughout:
  - layer pairs (d_from, d_to) always satisfy 1 <= d_from < d_to <= D;
    a Jacobian from a layer to itself is the identity, so its row/spectral
    ceilings count as 1 in sums, and tolerance terms referencing the pair
    (a, a) contribute no perturbation allowance of their own.
  - Frobenius norms of Jacobians are bounded by sqrt(H) times the matching
    row-l2 ceiling when only dataset-level constants are available.
  - every big-O constant is instantiated as 1.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, replace

import numpy as np

from .analysis import PropertyBounds, scan_dataset
from .linalg import col_l2_sum, frobenius_norm, max_row_l2, spectral_norm
from .network import MlpParams
from .trainer import margin_accuracy

__all__ = [
    "DegenerateBoundWarning",
    "ToleranceConstraint",
    "BTerms",
    "SigmaStar",
    "LooseVariant",
    "Baselines",
    "BoundReport",
    "compute_B_terms",
    "build_tolerance_constraints",
    "solve_sigma_star",
    "kl_gaussians",
    "assemble_bound",
    "compute_loose_variant",
    "baseline_bounds",
    "audit_network",
]

CAVEAT = (
    "norm constants enter the bound unrounded (no covering-grid discretization); "
    "image features are assumed pre-scaled into [0,1]"
)


class DegenerateBoundWarning(RuntimeWarning):
    """A measured constant makes part of the bound infinite (e.g. a dead
    unit pushes a preactivation floor to zero)."""


@dataclass(frozen=True)
class ToleranceConstraint:
    """One guarded property: at noise scale sigma the property moves by at
    most coefficient*sigma, and it must stay within half of `margin`."""

    label: str
    margin: float
    coefficient: float

    def __post_init__(self):
        if self.coefficient < 0:
            raise ValueError(f"{self.label}: coefficient must be nonnegative")


@dataclass(frozen=True)
class BTerms:
    layer_l2: float
    preact: float
    preact_5pc: float
    preact_median: float
    output: float
    jac_row_l2: float
    jac_spec: float
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class SigmaStar:
    value: float
    binding_constraint: str


@dataclass(frozen=True)
class LooseVariant:
    b_jac_row_l2: float
    sigma_star: float
    binding_constraint: str
    kl: float
    final_bound: float


@dataclass(frozen=True)
class Baselines:
    neyshabur18: float
    bartlett17: float
    spectral_product: float


@dataclass(frozen=True)
class BoundReport:
    depth: int
    width: int
    m: int
    gamma_class: float
    delta: float
    b_layer_l2: float
    b_preact: float
    b_preact_5pc: float
    b_preact_median: float
    b_output: float
    b_jac_row_l2: float
    b_jac_spec: float
    sigma_star: float
    binding_constraint: str
    sigma_star_5pc: float
    sigma_star_median: float
    kl: float
    train_margin_loss: float
    test_error: float | None
    final_bound: float
    final_bound_5pc: float
    final_bound_median: float
    final_bound_loose: float
    baseline_neyshabur18: float
    baseline_bartlett17: float
    baseline_spectral_product: float
    warnings: tuple[str, ...]
    caveat: str = CAVEAT


# ---------------------------------------------------------------------------
# helpers

def _zeta(pb: PropertyBounds, a: int, b: int) -> float:
    return 1.0 if a >= b else pb.zeta[(a, b)]


def _kappa(pb: PropertyBounds, a: int, b: int) -> float:
    return 1.0 if a >= b else pb.kappa[(a, b)]


def _sqrt_h(params: MlpParams) -> float:
    return math.sqrt(params.hidden_width)


def _layer_norms(params: MlpParams):
    rows = [max_row_l2(w) for w in params.weights]
    specs = [spectral_norm(w) for w in params.weights]
    return rows, specs


# ---------------------------------------------------------------------------
# B terms

def compute_B_terms(pb: PropertyBounds, params: MlpParams) -> BTerms:
    """The dimensionless depth-growth diagnostics, one per guarded property
    family, plus the two robust preactivation variants."""
    depth = params.depth
    if pb.depth != depth:
        raise ValueError(f"property bounds cover depth {pb.depth}, network has {depth}")
    sqrt_h = _sqrt_h(params)
    rows, specs = _layer_norms(params)
    warn: list[str] = []

    def preact_numerator(d):
        return sum(_zeta(pb, dp, d) * pb.alpha[dp - 1] for dp in range(1, d + 1))

    b_layer = max(preact_numerator(d) / pb.alpha[d] for d in range(1, depth))

    def b_preact_for(gamma_map, tag):
        vals = []
        for d in range(1, depth):
            g = gamma_map[d]
            if g <= 0.0:
                warn.append(f"preactivation floor is zero at layer {d} ({tag} variant)")
                vals.append(math.inf)
            else:
                vals.append(preact_numerator(d) / (sqrt_h * g))
        return max(vals)

    b_preact = b_preact_for(pb.gamma_min, "min")
    b_preact_5pc = b_preact_for(pb.gamma_5pc, "5pc")
    b_preact_median = b_preact_for(pb.gamma_median, "median")

    b_output = sum(_zeta(pb, d, depth) * pb.alpha[d - 1] for d in range(1, depth + 1)) / (
        sqrt_h * pb.gamma_class
    )

    b_row, b_spec = 0.0, 0.0
    for d_from, d_to in pb.pairs():
        mid = sum(
            _kappa(pb, dm, d_to - 1) * _zeta(pb, d_from, dm - 1)
            for dm in range(d_from + 1, d_to)
        )
        num_row = _zeta(pb, d_from, d_to - 1) + rows[d_to - 1] * mid
        b_row = max(b_row, num_row / _zeta(pb, d_from, d_to))
        mid_spec = sum(
            _kappa(pb, dm, d_to - 1) * _kappa(pb, d_from, dm - 1)
            for dm in range(d_from + 1, d_to)
        )
        num_spec = _kappa(pb, d_from, d_to - 1) + specs[d_to - 1] * mid_spec
        b_spec = max(b_spec, num_spec / _kappa(pb, d_from, d_to))

    if warn:
        _warnings.warn("; ".join(dict.fromkeys(warn)), DegenerateBoundWarning, stacklevel=2)
    return BTerms(
        layer_l2=b_layer,
        preact=b_preact,
        preact_5pc=b_preact_5pc,
        preact_median=b_preact_median,
        output=b_output,
        jac_row_l2=b_row,
        jac_spec=b_spec,
        warnings=tuple(dict.fromkeys(warn)),
    )


# ---------------------------------------------------------------------------
# tolerance constraints and sigma*

def build_tolerance_constraints(
    pb: PropertyBounds,
    params: MlpParams,
    delta_hat: float,
    loose: bool = False,
    gamma_map=None,
) -> list[ToleranceConstraint]:
    """One linear-in-sigma constraint per guarded property.

    Each coefficient is the property's worst-case movement per unit of noise
    scale, with every per-input norm replaced by its dataset ceiling, every
    already-guarded perturbation replaced by half its own margin, and
    Jacobian Frobenius norms bounded by sqrt(H) times the row ceiling.
    `loose` swaps the Jacobian-row coefficients for a cruder expansion that
    needs no spectral ceilings (and drops the spectral constraints), at the
    price of an extra depth factor downstream.  `gamma_map` substitutes a
    robust preactivation-floor variant.
    """
    if not 0.0 < delta_hat < 1.0:
        raise ValueError(f"delta_hat must lie in (0,1), got {delta_hat}")
    depth = params.depth
    if pb.depth != depth:
        raise ValueError(f"property bounds cover depth {pb.depth}, network has {depth}")
    gammas = pb.gamma_min if gamma_map is None else gamma_map
    h = params.hidden_width
    sqrt_h = math.sqrt(h)
    rows, specs = _layer_norms(params)
    l1 = math.sqrt(2.0 * math.log(2.0 * depth * h / delta_hat))
    l2 = math.sqrt(4.0 * math.log(depth * h / delta_hat))
    l3 = math.sqrt(2.0 * math.log(depth * depth * h * h / delta_hat))

    def alpha_allow(j):
        # activation ceiling plus that layer's own guarded perturbation
        # (the input layer never moves)
        return pb.alpha[j] * (1.5 if j >= 1 else 1.0)

    def fro_allow(a, b):
        # sqrt(H)*zeta Frobenius ceiling, plus the guarded row perturbation
        # when the pair is nondegenerate
        return sqrt_h * _zeta(pb, a, b) * (1.5 if b > a else 1.0)

    def spec_allow(a, b):
        return _kappa(pb, a, b) * (1.5 if b > a else 1.0)

    out: list[ToleranceConstraint] = []
    for d in range(1, depth):
        coeff = l1 * sum(sqrt_h * _zeta(pb, dp, d) * alpha_allow(dp - 1) for dp in range(1, d + 1))
        out.append(ToleranceConstraint(f"layer_l2[{d}]", pb.alpha[d], coeff))
    for d in range(1, depth):
        coeff = l1 * sum(_zeta(pb, dp, d) * alpha_allow(dp - 1) for dp in range(1, d + 1))
        out.append(ToleranceConstraint(f"preact[{d}]", gammas[d] / 2.0, coeff))
    margin_coeff = l1 * sum(_zeta(pb, dp, depth) * alpha_allow(dp - 1) for dp in range(1, depth + 1))
    out.append(ToleranceConstraint("margin", pb.gamma_class, margin_coeff))

    for d_from, d_to in pb.pairs():
        if loose:
            coeff = l3 * sum(
                sqrt_h * _zeta(pb, dm, d_to) * fro_allow(d_from, dm - 1)
                for dm in range(d_from + 1, d_to + 1)
            )
        else:
            mid = sum(
                _kappa(pb, dm, d_to - 1) * fro_allow(d_from, dm - 1)
                for dm in range(d_from + 1, d_to)
            )
            coeff = l2 * (fro_allow(d_from, d_to - 1) + rows[d_to - 1] * mid)
        out.append(ToleranceConstraint(f"jac_row_l2[{d_from}->{d_to}]", pb.zeta[(d_from, d_to)], coeff))

    if not loose:
        for d_from, d_to in pb.pairs():
            mid = sum(
                _kappa(pb, dm, d_to - 1) * spec_allow(d_from, dm - 1)
                for dm in range(d_from + 1, d_to)
            )
            coeff = sqrt_h * l1 * (spec_allow(d_from, d_to - 1) + specs[d_to - 1] * mid)
            out.append(ToleranceConstraint(f"jac_spec[{d_from}->{d_to}]", pb.kappa[(d_from, d_to)], coeff))
    return out


def solve_sigma_star(constraints) -> SigmaStar:
    """Largest sigma keeping every property within half its margin; exact
    because each tolerance is linear in sigma."""
    constraints = list(constraints)
    if not constraints:
        raise ValueError("no constraints to solve")
    for c in constraints:
        if c.margin <= 0.0 or not math.isfinite(c.coefficient):
            _warnings.warn(
                f"constraint {c.label} admits no noise (margin {c.margin}, "
                f"coefficient {c.coefficient}); sigma* is 0",
                DegenerateBoundWarning,
                stacklevel=2,
            )
            return SigmaStar(0.0, c.label)
    best_val, best_label = math.inf, "unconstrained"
    for c in constraints:
        if c.coefficient == 0.0:
            continue  # never binds
        cand = (c.margin / 2.0) / c.coefficient
        if cand < best_val:
            best_val, best_label = cand, c.label
    return SigmaStar(best_val, best_label)


# ---------------------------------------------------------------------------
# KL and assembly

def kl_gaussians(params: MlpParams, sigma: float) -> float:
    """KL divergence between isotropic Gaussians of scale sigma centered at
    the current weights and at the init snapshot: squared Frobenius distance
    over 2*sigma^2."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    sq = sum(frobenius_norm(w - z) ** 2 for w, z in zip(params.weights, params.init_snapshot))
    return sq / (2.0 * sigma * sigma)


def assemble_bound(train_margin_loss: float, kl: float, depth: int, m: int,
                   delta: float, r: int | None = None) -> float:
    """Train term plus the concentration penalty, summed over the R+1
    condition sets of the recursive argument (R = 4*depth by default)."""
    if m < 2:
        raise ValueError(f"need at least 2 samples, got {m}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0,1), got {delta}")
    if kl < 0:
        raise ValueError("kl must be nonnegative")
    big_r = 4 * depth if r is None else r
    per_set = 2.0 * math.sqrt((2.0 * kl + math.log(2.0 * m * (big_r + 1) / delta)) / (m - 1))
    per_set += 2.0 / (math.sqrt(m) - 1.0)
    return train_margin_loss + (big_r + 1) * per_set


def compute_loose_variant(pb: PropertyBounds, params: MlpParams,
                          train_margin_loss: float, delta: float) -> LooseVariant:
    """The spectral-free pathway: cruder Jacobian-row tolerances, no
    spectral constraints, one extra depth factor in the condition-set count."""
    depth = params.depth
    m = pb.m
    delta_hat = 1.0 / (4.0 * depth * depth * math.sqrt(m))
    constraints = build_tolerance_constraints(pb, params, delta_hat, loose=True)
    star = solve_sigma_star(constraints)

    b_view = 0.0
    for d_from, d_to in pb.pairs():
        s = sum(
            _zeta(pb, dm, d_to - 1) * _zeta(pb, d_from, dm - 1)
            for dm in range(d_from + 1, d_to + 1)
        )
        b_view = max(b_view, s / pb.zeta[(d_from, d_to)])

    if star.value > 0 and math.isfinite(star.value):
        kl = kl_gaussians(params, star.value)
        bound = assemble_bound(train_margin_loss, kl, depth, m, delta, r=4 * depth * depth)
    else:
        kl, bound = math.inf, math.inf
    return LooseVariant(b_view, star.value, star.binding_constraint, kl, bound)


# ---------------------------------------------------------------------------
# baselines

def baseline_bounds(params: MlpParams, max_input_norm: float, gamma_class: float) -> Baselines:
    """Prior norm-based capacity bounds, distance-from-init versions, plus
    the bare spectral product that sets their depth scaling."""
    if gamma_class <= 0:
        raise ValueError("gamma_class must be positive")
    depth = params.depth
    sqrt_h = _sqrt_h(params)
    specs = [spectral_norm(w) for w in params.weights]
    prod = float(np.prod(specs))
    spectral_term = max_input_norm * depth * prod / gamma_class
    if any(s == 0.0 for s in specs):
        _warnings.warn(
            "a layer has zero spectral norm; ratio-based baselines are infinite",
            DegenerateBoundWarning,
            stacklevel=2,
        )
        return Baselines(math.inf, math.inf, spectral_term)
    fro_ratio = sum(
        frobenius_norm(w - z) ** 2 / s ** 2
        for w, z, s in zip(params.weights, params.init_snapshot, specs)
    )
    ney = max_input_norm * depth * sqrt_h * prod / gamma_class * math.sqrt(fro_ratio)
    col_ratio = sum(
        (col_l2_sum(w - z) / s) ** (2.0 / 3.0)
        for w, z, s in zip(params.weights, params.init_snapshot, specs)
    )
    bart = max_input_norm * prod / gamma_class * col_ratio ** 1.5
    return Baselines(ney, bart, spectral_term)


# ---------------------------------------------------------------------------
# audit driver

_RANGE_CHECKED = ("b_layer_l2", "b_output", "b_jac_row_l2", "b_jac_spec")
_RANGE_LO, _RANGE_HI = 1e-1, 1e3


def audit_network(params: MlpParams, data, gamma_class: float = 10.0,
                  delta: float = 0.01, test_data=None) -> BoundReport:
    """Measure a network on a dataset and assemble the full bound report."""
    data = list(data)
    pb, archive = scan_dataset(params, data, gamma_class)
    depth, m = params.depth, pb.m
    tml = 1.0 - margin_accuracy(params, data, gamma_class)
    bt = compute_B_terms(pb, params)
    warn = list(bt.warnings)

    delta_hat = 1.0 / (4.0 * depth * math.sqrt(m))

    def pathway(gamma_map):
        constraints = build_tolerance_constraints(pb, params, delta_hat, gamma_map=gamma_map)
        star = solve_sigma_star(constraints)
        if star.value > 0 and math.isfinite(star.value):
            kl = kl_gaussians(params, star.value)
            bound = assemble_bound(tml, kl, depth, m, delta)
        else:
            kl, bound = math.inf, math.inf
        return star, kl, bound

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore", DegenerateBoundWarning)
        star, kl, bound = pathway(None)
        star5, _, bound5 = pathway(pb.gamma_5pc)
        starm, _, boundm = pathway(pb.gamma_median)
        loose = compute_loose_variant(pb, params, tml, delta)
        max_x = max(p.layer_l2[0] for p in archive)
        base = baseline_bounds(params, max_x, gamma_class)

    if star.value == 0.0:
        warn.append(f"sigma* collapsed to 0 (constraint {star.binding_constraint})")

    test_error = None
    if test_data is not None:
        test_error = 1.0 - margin_accuracy(params, list(test_data), 0.0)

    report = BoundReport(
        depth=depth,
        width=params.hidden_width,
        m=m,
        gamma_class=gamma_class,
        delta=delta,
        b_layer_l2=bt.layer_l2,
        b_preact=bt.preact,
        b_preact_5pc=bt.preact_5pc,
        b_preact_median=bt.preact_median,
        b_output=bt.output,
        b_jac_row_l2=bt.jac_row_l2,
        b_jac_spec=bt.jac_spec,
        sigma_star=star.value,
        binding_constraint=star.binding_constraint,
        sigma_star_5pc=star5.value,
        sigma_star_median=starm.value,
        kl=kl,
        train_margin_loss=tml,
        test_error=test_error,
        final_bound=bound,
        final_bound_5pc=bound5,
        final_bound_median=boundm,
        final_bound_loose=loose.final_bound,
        baseline_neyshabur18=base.neyshabur18,
        baseline_bartlett17=base.bartlett17,
        baseline_spectral_product=base.spectral_product,
        warnings=(),
        caveat=CAVEAT,
    )
    for name in _RANGE_CHECKED:
        val = getattr(report, name)
        if not (_RANGE_LO <= val <= _RANGE_HI):
            warn.append(f"{name}={val:.6g} outside [{_RANGE_LO:g}, {_RANGE_HI:g}]")
    if warn:
        _warnings.warn("; ".join(warn), DegenerateBoundWarning, stacklevel=2)
    return replace(report, warnings=tuple(warn))
