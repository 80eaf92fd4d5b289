"""Monte Carlo exercise of the noise machinery on actual networks.

The tolerance algebra in `bounds` is deterministic: it promises that at
noise scale sigma each tracked quantity (activation norms, preactivations,
Jacobian row and spectral norms, the classification margin) moves by at
most a linear-in-sigma allowance, except with small probability over the
noise.  Everything in this module draws real entrywise Gaussian weight
noise and measures those movements directly, so the promises can be
checked rather than trusted:

  measure_perturbations - one noise draw, every per-property delta, both
      with activation masks pinned to the clean trace and with masks
      recomputed
  verify_lemma_e1       - failure frequencies of the four per-layer
      statement families against their recursive tolerances
  estimate_mu_hat       - fraction of a dataset on which the network is
      not noise-resilient at half the measured property ceilings
  check_gaussian_lemmas - the two primitive Gaussian tail inequalities the
      tolerances are built from, simulated at scale

All failure decisions use raw frequencies; a 95% Clopper-Pearson interval
rides along for interpretation.  Every operation takes an RngStream and
derives one child stream per draw, so results do not depend on how the
draws are partitioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as _beta

from .analysis import PropertyBounds, all_jacobians
from .linalg import (
    RngStream,
    frobenius_norm,
    max_row_l2,
    row_l2_norms,
    sample_gaussian_matrix,
    spectral_norm,
)
from .network import ForwardTrace, LabeledExample, MlpParams, forward, margin

__all__ = [
    "PropertyDeltas",
    "PerturbationSample",
    "PerturbationTolerances",
    "FailureEstimate",
    "frozen_forward",
    "measure_perturbations",
    "perturbation_tolerances",
    "verify_lemma_e1",
    "estimate_mu_hat",
    "check_gaussian_lemmas",
    "default_sigma_grid",
]

# Spectral norms of perturbed Jacobians dominate the per-draw cost; this
# tolerance is orders of magnitude below the deltas being measured.
SPECTRAL_TOL = 1e-8


# ---------------------------------------------------------------------------
# sample types

@dataclass(frozen=True)
class PropertyDeltas:
    """Absolute movement of every tracked quantity under one noise draw.

    layer_l2 and preact are keyed by layer d = 1..D (layer D's "activation"
    is the raw logit vector); the Jacobian dicts by pairs (d_from, d_to)
    with 1 <= d_from < d_to <= D.  preact holds max_h of the raw
    preactivation shift |f~_h - f_h|; preact_magnitude the shift in the
    magnitude ||f~_h| - |f_h||, which is what the resilience margins guard.
    """

    layer_l2: dict[int, float]
    preact: dict[int, float]
    preact_magnitude: dict[int, float]
    jac_row_l2: dict[tuple[int, int], float]
    jac_spec: dict[tuple[int, int], float]
    margin: float


@dataclass(frozen=True)
class PerturbationSample:
    """One noise draw with both propagation modes evaluated.

    `frozen` deltas come from propagating the noise with activation masks
    pinned to the clean trace (noise moves linearly); `free` deltas from the
    honestly recomputed network.  mask_flips counts, per hidden layer, how
    many units changed activation state in the free pass.
    """

    sigma: float
    noise: tuple[np.ndarray, ...]
    frozen_preacts: tuple[np.ndarray, ...]
    free_preacts: tuple[np.ndarray, ...]
    frozen: PropertyDeltas
    free: PropertyDeltas
    mask_flips: tuple[int, ...]

    def masks_unchanged_through(self, d: int) -> bool:
        """True when no unit in hidden layers 1..d changed state."""
        return all(f == 0 for f in self.mask_flips[:d])


@dataclass(frozen=True)
class FailureEstimate:
    """Empirical failure frequency against a probability threshold."""

    trials: int
    failures: int
    rate: float
    threshold: float
    passed: bool
    ci_low: float
    ci_high: float

    def __post_init__(self):
        if self.trials <= 0:
            raise ValueError("trials must be positive")
        if not 0 <= self.failures <= self.trials:
            raise ValueError("failures must lie in [0, trials]")
        if self.rate != self.failures / self.trials:
            raise ValueError("rate must equal failures/trials")
        if self.passed != (self.rate <= self.threshold):
            raise ValueError("passed must equal (rate <= threshold)")


def _estimate(trials: int, failures: int, threshold: float) -> FailureEstimate:
    rate = failures / trials
    # Clopper-Pearson 95%: exact beta quantiles, closed at the boundaries.
    lo = 0.0 if failures == 0 else float(_beta.ppf(0.025, failures, trials - failures + 1))
    hi = 1.0 if failures == trials else float(_beta.ppf(0.975, failures + 1, trials - failures))
    return FailureEstimate(trials, failures, rate, threshold, rate <= threshold, lo, hi)


# ---------------------------------------------------------------------------
# noise propagation

def _check_noise(params: MlpParams, noise) -> tuple[np.ndarray, ...]:
    noise = tuple(np.asarray(u, dtype=np.float64) for u in noise)
    if len(noise) != params.depth:
        raise ValueError(f"expected {params.depth} noise matrices, got {len(noise)}")
    for d, (u, w) in enumerate(zip(noise, params.weights)):
        if u.shape != w.shape:
            raise ValueError(f"noise[{d}] has shape {u.shape}, weights expect {w.shape}")
    return noise


def _draw_noise(params: MlpParams, sigma: float, rng: RngStream) -> tuple[np.ndarray, ...]:
    return tuple(
        sample_gaussian_matrix(params.dims[d + 1], params.dims[d], sigma, rng)
        for d in range(params.depth)
    )


def frozen_forward(params: MlpParams, noise, trace: ForwardTrace) -> tuple[np.ndarray, ...]:
    """Per-layer preactivations of the noised network with every hidden
    unit pinned to the activation state of `trace`.

    Because layer d only sees noise in the first d matrices, the d-th entry
    of the result is exactly the layer-d output of the partially-noised
    network, for every d at once.
    """
    noise = _check_noise(params, noise)
    preacts = []
    h = trace.x
    for d in range(params.depth):
        f = (params.weights[d] + noise[d]) @ h
        preacts.append(f)
        if d < params.depth - 1:
            h = f * trace.masks[d]
    return tuple(preacts)


@dataclass(frozen=True)
class _BaseState:
    """Clean-network quantities reused across many noise draws."""

    y: int
    trace: ForwardTrace
    out_norms: dict[int, float]  # d = 1..D; D is the logit norm
    rows: dict[tuple[int, int], np.ndarray]
    specs: dict[tuple[int, int], float]
    jacs: dict[tuple[int, int], np.ndarray]
    margin: float


def _margin_from_logits(logits: np.ndarray, y: int) -> float:
    rival = np.max(np.delete(logits, y))
    return float(logits[y] - rival)


def _base_state(params: MlpParams, example: LabeledExample) -> _BaseState:
    trace = forward(params, example.x)
    depth = params.depth
    out_norms = {d: float(np.linalg.norm(trace.acts[d])) for d in range(1, depth)}
    out_norms[depth] = float(np.linalg.norm(trace.logits))
    jacs = all_jacobians(params, trace)
    rows = {pair: row_l2_norms(mat) for pair, mat in jacs.items()}
    specs = {pair: spectral_norm(mat, tol=SPECTRAL_TOL) for pair, mat in jacs.items()}
    return _BaseState(example.y, trace, out_norms, rows, specs, jacs, margin(trace, example.y))


def _collect_deltas(base: _BaseState, preacts, hidden_acts, jacs) -> PropertyDeltas:
    """Deltas of a perturbed evaluation against the clean base.

    preacts: per-layer preactivation vectors (d = 1..D); hidden_acts: the
    matching post-activation vectors for d = 1..D-1; jacs: perturbed
    Jacobian matrices keyed like the base ones.
    """
    depth = len(preacts)
    layer_l2: dict[int, float] = {}
    pre: dict[int, float] = {}
    pre_mag: dict[int, float] = {}
    for d in range(1, depth + 1):
        f0 = base.trace.preacts[d - 1]
        f1 = preacts[d - 1]
        pre[d] = float(np.max(np.abs(f1 - f0)))
        pre_mag[d] = float(np.max(np.abs(np.abs(f1) - np.abs(f0))))
        moved = preacts[-1] if d == depth else hidden_acts[d - 1]
        layer_l2[d] = abs(float(np.linalg.norm(moved)) - base.out_norms[d])
    jac_row: dict[tuple[int, int], float] = {}
    jac_spec: dict[tuple[int, int], float] = {}
    for pair, mat in jacs.items():
        jac_row[pair] = float(np.max(np.abs(row_l2_norms(mat) - base.rows[pair])))
        jac_spec[pair] = abs(spectral_norm(mat, tol=SPECTRAL_TOL) - base.specs[pair])
    margin_delta = abs(_margin_from_logits(preacts[-1], base.y) - base.margin)
    return PropertyDeltas(layer_l2, pre, pre_mag, jac_row, jac_spec, margin_delta)


def _free_deltas(params: MlpParams, base: _BaseState, noise):
    """Deltas of the honestly recomputed noised network, plus per-layer
    counts of flipped activation states and the new preactivations."""
    pert = params.with_weights([w + u for w, u in zip(params.weights, noise)])
    trace = forward(pert, base.trace.x)
    jacs = all_jacobians(pert, trace)
    deltas = _collect_deltas(base, trace.preacts, trace.acts[1:], jacs)
    flips = tuple(
        int(np.count_nonzero(m1 != m0)) for m0, m1 in zip(base.trace.masks, trace.masks)
    )
    return deltas, flips, trace.preacts


def measure_perturbations(
    params: MlpParams, example: LabeledExample, sigma: float, rng: RngStream | None = None
) -> PerturbationSample:
    """Draw one set of Gaussian noise matrices at scale sigma and record
    how far every tracked quantity moved, in both propagation modes."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if rng is None:
        rng = RngStream(0, 0xA1)
    base = _base_state(params, example)
    noise = _draw_noise(params, sigma, rng)

    frozen_pre = frozen_forward(params, noise, base.trace)
    frozen_acts = tuple(f * m for f, m in zip(frozen_pre, base.trace.masks))
    pert = params.with_weights([w + u for w, u in zip(params.weights, noise)])
    frozen_jacs = all_jacobians(pert, base.trace)  # pinned masks, noised weights
    frozen = _collect_deltas(base, frozen_pre, frozen_acts, frozen_jacs)

    free, flips, free_pre = _free_deltas(params, base, noise)
    return PerturbationSample(
        sigma=float(sigma),
        noise=noise,
        frozen_preacts=frozen_pre,
        free_preacts=free_pre,
        frozen=frozen,
        free=free,
        mask_flips=flips,
    )


# ---------------------------------------------------------------------------
# per-input tolerances

@dataclass(frozen=True)
class PerturbationTolerances:
    """The recursive linear-in-sigma allowances for one input.

    out is keyed by d = 0..D (entry 0 is identically 0: the input never
    moves); preact by d = 1..D; the Jacobian dicts by pairs (d_from, d_to)
    with 1 <= d_from <= d_to <= D, the diagonal pinned to 0.
    """

    sigma: float
    delta_hat: float
    out: dict[int, float]
    preact: dict[int, float]
    jac_row: dict[tuple[int, int], float]
    jac_spec: dict[tuple[int, int], float]

    def scaled(self, factor: float) -> "PerturbationTolerances":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return PerturbationTolerances(
            self.sigma,
            self.delta_hat,
            {k: v * factor for k, v in self.out.items()},
            {k: v * factor for k, v in self.preact.items()},
            {k: v * factor for k, v in self.jac_row.items()},
            {k: v * factor for k, v in self.jac_spec.items()},
        )


def _tolerances(base: _BaseState, params: MlpParams, sigma: float, delta_hat: float) -> PerturbationTolerances:
    depth = params.depth
    h = params.hidden_width
    sqrt_h = math.sqrt(h)
    l1 = math.sqrt(2.0 * math.log(2.0 * depth * h / delta_hat))
    l2 = math.sqrt(4.0 * math.log(depth * h / delta_hat))

    # Norms of every interlayer Jacobian including the identity diagonal.
    jfro: dict[tuple[int, int], float] = {}
    jrowmax: dict[tuple[int, int], float] = {}
    jspec: dict[tuple[int, int], float] = {}
    for a in range(1, depth + 1):
        jfro[(a, a)] = math.sqrt(params.dims[a])
        jrowmax[(a, a)] = 1.0
        jspec[(a, a)] = 1.0
    for pair, mat in base.jacs.items():
        jfro[pair] = frobenius_norm(mat)
        jrowmax[pair] = float(np.max(base.rows[pair]))
        jspec[pair] = base.specs[pair]

    out_norm = {0: float(np.linalg.norm(base.trace.x))}
    for d in range(1, depth):
        out_norm[d] = base.out_norms[d]

    w_rowmax = [max_row_l2(w) for w in params.weights]
    w_spec = [spectral_norm(w, tol=SPECTRAL_TOL) for w in params.weights]

    tol_out: dict[int, float] = {0: 0.0}
    tol_pre: dict[int, float] = {}
    for d in range(1, depth + 1):
        tol_out[d] = sigma * l1 * sum(
            jfro[(dp, d)] * (out_norm[dp - 1] + tol_out[dp - 1]) for dp in range(1, d + 1)
        )
        tol_pre[d] = sigma * l1 * sum(
            jrowmax[(dp, d)] * (out_norm[dp - 1] + tol_out[dp - 1]) for dp in range(1, d + 1)
        )

    tol_row: dict[tuple[int, int], float] = {(d, d): 0.0 for d in range(1, depth + 1)}
    tol_spec: dict[tuple[int, int], float] = {(d, d): 0.0 for d in range(1, depth + 1)}
    for d in range(1, depth + 1):
        for dp in range(d - 1, 0, -1):
            acc_row = jfro[(dp, d - 1)] + tol_row[(dp, d - 1)] * sqrt_h
            acc_spec = jspec[(dp, d - 1)] + tol_spec[(dp, d - 1)]
            for dm in range(dp + 1, d):
                acc_row += (
                    w_rowmax[d - 1]
                    * jspec[(dm, d - 1)]
                    * (jfro[(dp, dm - 1)] + tol_row[(dp, dm - 1)] * sqrt_h)
                )
                acc_spec += (
                    w_spec[d - 1]
                    * jspec[(dm, d - 1)]
                    * (jspec[(dp, dm - 1)] + tol_spec[(dp, dm - 1)])
                )
            tol_row[(dp, d)] = sigma * l2 * acc_row
            tol_spec[(dp, d)] = sigma * sqrt_h * l1 * acc_spec

    return PerturbationTolerances(float(sigma), float(delta_hat), tol_out, tol_pre, tol_row, tol_spec)


def perturbation_tolerances(
    params: MlpParams, example: LabeledExample, sigma: float, delta_hat: float
) -> PerturbationTolerances:
    """Solve the triangular tolerance recursion for one input, using that
    input's exact Jacobian and activation norms.  Each allowance bounds its
    quantity's movement at noise scale sigma except with probability
    delta_hat, provided the allowances below it in the recursion held."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if not 0.0 < delta_hat < 1.0:
        raise ValueError(f"delta_hat must lie in (0,1), got {delta_hat}")
    return _tolerances(_base_state(params, example), params, sigma, delta_hat)


# ---------------------------------------------------------------------------
# statement verification

def _within_base(deltas: PropertyDeltas, tol: PerturbationTolerances, upto: int) -> bool:
    """Every property of layers 1..upto inside its allowance."""
    for e in range(1, upto + 1):
        if deltas.layer_l2[e] > tol.out[e] or deltas.preact[e] > tol.preact[e]:
            return False
        for dp in range(1, e):
            if deltas.jac_row_l2[(dp, e)] > tol.jac_row[(dp, e)]:
                return False
            if deltas.jac_spec[(dp, e)] > tol.jac_spec[(dp, e)]:
                return False
    return True


def _rows_within_at(deltas: PropertyDeltas, tol: PerturbationTolerances, d: int) -> bool:
    return all(deltas.jac_row_l2[(dp, d)] <= tol.jac_row[(dp, d)] for dp in range(1, d))


def verify_lemma_e1(
    params: MlpParams,
    example: LabeledExample,
    sigma: float,
    delta_hat: float,
    trials: int = 2000,
    rng: RngStream | None = None,
    tolerance_scale: float = 1.0,
) -> dict[str, FailureEstimate]:
    """Failure frequencies of the four statement families on one input.

    A draw fails statement `out[d]` when the layer-d activation norm
    escapes its allowance even though every property of layers < d and
    every Jacobian-row norm into layer d stayed within theirs and no
    activation below layer d flipped; `preact[d]` additionally conditions
    on the layer-d norm staying put; `jac_row[d]` / `jac_spec[d]` ask
    whether any Jacobian into layer d escaped while layers < d held.  Each
    family is guaranteed a failure probability at most delta_hat, so every
    returned estimate should pass.

    `tolerance_scale` multiplies every allowance; shrinking it is a power
    check for the Monte Carlo itself (rates must rise), not a verification
    mode.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if not 0.0 < delta_hat < 1.0:
        raise ValueError(f"delta_hat must lie in (0,1), got {delta_hat}")
    if rng is None:
        rng = RngStream(0, 0xE1)
    base = _base_state(params, example)
    tol = _tolerances(base, params, sigma, delta_hat)
    if tolerance_scale != 1.0:
        tol = tol.scaled(tolerance_scale)
    depth = params.depth

    fails: dict[str, int] = {}
    for d in range(1, depth + 1):
        fails[f"out[{d}]"] = 0
        fails[f"preact[{d}]"] = 0
    for d in range(2, depth + 1):
        fails[f"jac_row[{d}]"] = 0
        fails[f"jac_spec[{d}]"] = 0

    for t in range(trials):
        noise = _draw_noise(params, sigma, rng.derive(t))
        deltas, flips, _ = _free_deltas(params, base, noise)
        unchanged = [True]  # index d: no flips in hidden layers 1..d
        for f in flips:
            unchanged.append(unchanged[-1] and f == 0)
        for d in range(1, depth + 1):
            if not (unchanged[d - 1] and _within_base(deltas, tol, d - 1)):
                continue
            rows_ok = _rows_within_at(deltas, tol, d)
            if rows_ok and deltas.layer_l2[d] > tol.out[d]:
                fails[f"out[{d}]"] += 1
            if rows_ok and deltas.layer_l2[d] <= tol.out[d] and deltas.preact[d] > tol.preact[d]:
                fails[f"preact[{d}]"] += 1
            if d >= 2:
                if not rows_ok:
                    fails[f"jac_row[{d}]"] += 1
                if any(
                    deltas.jac_spec[(dp, d)] > tol.jac_spec[(dp, d)] for dp in range(1, d)
                ):
                    fails[f"jac_spec[{d}]"] += 1

    return {label: _estimate(trials, n, delta_hat) for label, n in fails.items()}


# ---------------------------------------------------------------------------
# dataset-level resilience fraction

def _resilience_failed(deltas: PropertyDeltas, pb: PropertyBounds) -> bool:
    """Did any tracked property move past half its ceiling/floor margin?"""
    depth = pb.depth
    for d in range(1, depth):
        if deltas.layer_l2[d] > pb.alpha[d] / 2.0:
            return True
        if deltas.preact_magnitude[d] > pb.gamma_min[d] / 4.0:
            return True
    for pair in pb.pairs():
        if deltas.jac_row_l2[pair] > pb.zeta[pair] / 2.0:
            return True
        if deltas.jac_spec[pair] > pb.kappa[pair] / 2.0:
            return True
    return deltas.margin > pb.gamma_class / 2.0


def estimate_mu_hat(
    params: MlpParams,
    data,
    sigma: float,
    pb: PropertyBounds,
    n_noise: int = 200,
    rng: RngStream | None = None,
    point_threshold: float | None = None,
) -> float:
    """Fraction of data points on which the network is not noise-resilient.

    A point fails when the estimated probability (over n_noise draws at
    scale sigma) that some property moves past half its margin exceeds the
    per-point threshold, 1/sqrt(len(data)) by default.  The margins are
    half the measured ceilings in `pb` (a floor for preactivations, where
    the guarded quantity is the magnitude shift).
    """
    data = list(data)
    if not data:
        raise ValueError("cannot estimate on an empty dataset")
    if n_noise < 100:
        raise ValueError(f"need at least 100 noise draws, got {n_noise}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if pb.depth != params.depth:
        raise ValueError(f"property bounds cover depth {pb.depth}, network has {params.depth}")
    if rng is None:
        rng = RngStream(0, 0xC7)
    threshold = 1.0 / math.sqrt(len(data)) if point_threshold is None else point_threshold

    failing = 0
    for i, ex in enumerate(data):
        base = _base_state(params, ex)
        point_rng = rng.derive(i)
        bad = 0
        for t in range(n_noise):
            noise = _draw_noise(params, sigma, point_rng.derive(t))
            deltas, _, _ = _free_deltas(params, base, noise)
            if _resilience_failed(deltas, pb):
                bad += 1
        if bad / n_noise > threshold:
            failing += 1
    return failing / len(data)


# ---------------------------------------------------------------------------
# primitive Gaussian tail inequalities

def _batch_spectral(mats: np.ndarray, v0: np.ndarray, tol: float = 1e-10, max_iters: int = 400) -> np.ndarray:
    """Largest singular value of every matrix in a (B, H, H) stack, by
    power iteration on a^T a run across the whole batch at once."""
    gram = np.matmul(np.transpose(mats, (0, 2, 1)), mats)
    norms = np.linalg.norm(v0, axis=1, keepdims=True)
    v = np.where(norms > 0, v0 / np.where(norms == 0.0, 1.0, norms), 1.0)
    lam = np.zeros(mats.shape[0])
    for _ in range(max_iters):
        w = np.matmul(gram, v[..., None])[..., 0]
        new_lam = np.einsum("bi,bi->b", v, w)
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        v = w / np.maximum(wn, 1e-300)
        done = np.all(np.abs(new_lam - lam) <= tol * np.maximum(new_lam, 1e-300))
        lam = new_lam
        if done:
            break
    return np.sqrt(np.maximum(lam, 0.0))


_DEFAULT_SUM_SETTINGS = (
    ((1.0,), 3.0),
    ((1.0,) * 8, 2.0 * math.sqrt(8.0)),
    ((0.5, 1.0, 1.5, 2.0, 3.0), 2.5 * math.sqrt(16.5)),
)


def check_gaussian_lemmas(
    rng: RngStream | None = None,
    draws: int = 120_000,
    matrix_dim: int = 16,
    sum_settings=_DEFAULT_SUM_SETTINGS,
    spectral_deltas=(0.25, 0.1, 0.02),
) -> dict[str, FailureEstimate]:
    """Simulate the two tail inequalities everything else leans on.

    (i) for independent Gaussians with deviations sigma_i, the one-sided
        tail Pr[sum >= t] is at most exp(-t^2 / (2 sum sigma_i^2));
    (ii) an H x H matrix with unit-Gaussian entries has spectral norm above
        sqrt(2 H ln(2H/delta)) with probability at most delta.

    Each sum setting is (sigmas, t); each spectral setting a delta.  Every
    returned estimate must pass for the machinery to be trustworthy.
    """
    if draws < 1:
        raise ValueError("draws must be positive")
    if rng is None:
        rng = RngStream(0, 0xB3)
    out: dict[str, FailureEstimate] = {}

    for k, (sigmas, t) in enumerate(sum_settings):
        sig = np.asarray(sigmas, dtype=np.float64)
        if t < 0:
            raise ValueError("tail thresholds must be nonnegative")
        z = rng.derive(k).normals(draws * sig.size).reshape(draws, sig.size)
        exceed = int(np.count_nonzero(z @ sig >= t))
        bound = min(math.exp(-t * t / (2.0 * float(sig @ sig))), 1.0)
        out[f"sum_tail[n={sig.size},t={t:g}]"] = _estimate(draws, exceed, bound)

    h = int(matrix_dim)
    if h < 2:
        raise ValueError("matrix_dim must be at least 2")
    specs = np.empty(draws)
    srng = rng.derive(10_000)
    chunk = 20_000
    done = 0
    ci = 0
    while done < draws:
        b = min(chunk, draws - done)
        mats = srng.derive(2 * ci).normals(b * h * h).reshape(b, h, h)
        v0 = srng.derive(2 * ci + 1).normals(b * h).reshape(b, h)
        specs[done : done + b] = _batch_spectral(mats, v0)
        done += b
        ci += 1
    for delta in spectral_deltas:
        if not 0.0 < delta <= 1.0:
            raise ValueError(f"spectral delta must lie in (0,1], got {delta}")
        thr = math.sqrt(2.0 * h * math.log(2.0 * h / delta))
        exceed = int(np.count_nonzero(specs > thr))
        out[f"spectral[H={h},delta={delta:g}]"] = _estimate(draws, exceed, float(delta))
    return out


def default_sigma_grid(sigma_star: float) -> tuple[float, float, float, float]:
    """The noise scales a sweep probes: quarter, half, at, and twice the
    solved operating point."""
    if sigma_star < 0:
        raise ValueError("sigma_star must be nonnegative")
    return (sigma_star / 4.0, sigma_star / 2.0, sigma_star, 2.0 * sigma_star)
