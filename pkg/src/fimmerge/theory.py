"""Numerical verification lab for the curvature analysis behind the merger.

Three families of checks live here:

* Interpolation-error bound: the deviation of a model summary from linear
  interpolation between endpoints is measured on an alpha grid and compared
  against the curvature bound alpha(1-alpha)/2 * ||delta||^2 * sup_t ||H||,
  with an empirically measured third-order slack budget (the bound drops
  cubic terms, so an honest check must account for them).
* Fisher-Hessian agreement: near an optimum of the NLL, squared-gradient
  averages should track the Hessian diagonal; checked exactly on a
  closed-form softmax toy at its MLE and statistically (per-layer means,
  rank correlation) on a trained micro model.
* Nonlinearity scores: per-layer ratio of interpolation error to total
  output change under a layer-restricted perturbation, and its correlation
  with per-layer relative merging error.

All perturbations used with Hessian machinery are restricted to a
coordinate subset, so the required Hessian block is the subset Hessian of
the restricted (still twice-differentiable) summary function.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .micromodel import (
    MicroModel,
    MicroModelConfig,
    Params,
    flatten_params,
    sample_uniform_tokens,
)
from .numerics import (
    ScalarFunction,
    fd_hessian_from_grad,
    pearson,
    spearman,
    spectral_norm,
)
from .topology import ModelTopology

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
DEFAULT_T_GRID = tuple(i / 10 for i in range(11))


@dataclass
class MicroScalarFunction:
    """The micro model's mean probe log-probability as a function of the
    flat parameter vector."""

    model: MicroModel
    probes: np.ndarray

    def __post_init__(self) -> None:
        self.probes = np.asarray(self.probes, dtype=np.int64)
        self.dim = self.model.num_params()

    def value(self, theta: np.ndarray) -> float:
        return self.model.with_flat(theta).scalar_output(self.probes)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return flatten_params(self.model.with_flat(theta).scalar_output_grad(self.probes))


# -- interpolation error and curvature bound ---------------------------------


def interpolation_error(fn: ScalarFunction, theta0: np.ndarray, delta: np.ndarray,
                        alpha: float) -> float:
    """|f(theta0 + alpha*delta) - [(1-alpha) f(theta0) + alpha f(theta0+delta)]|"""
    f0 = fn.value(theta0)
    f1 = fn.value(theta0 + delta)
    fa = fn.value(theta0 + alpha * delta)
    return abs(fa - ((1.0 - alpha) * f0 + alpha * f1))


def merging_error(model_base: MicroModel, delta, alpha: float, probes) -> float:
    """Interpolation error of the scalar probe summary at merge strength alpha."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    fn = MicroScalarFunction(model_base, probes)
    theta0 = model_base.flatten()
    return interpolation_error(fn, theta0, _delta_flat(model_base, delta), alpha)


def _delta_flat(model: MicroModel, delta) -> np.ndarray:
    if isinstance(delta, np.ndarray) and delta.ndim == 1:
        return np.asarray(delta, dtype=np.float64)
    entries = delta.entries if hasattr(delta, "entries") else delta
    aligned: Params = {
        n: np.asarray(entries[n], dtype=np.float64)
        if n in entries else np.zeros_like(model.params[n])
        for n in model.params
    }
    return flatten_params(aligned)


def sup_hessian_norm(fn: ScalarFunction, theta0: np.ndarray, delta: np.ndarray,
                     t_grid=DEFAULT_T_GRID, h: float = 1e-4,
                     max_support: int = 2000) -> float:
    """max_t ||H(theta0 + t*delta)||_2 over the grid, with one bisection
    refinement around the grid argmax.

    H is the Hessian block over delta's support coordinates -- exactly the
    Hessian of f restricted to the perturbed subspace.
    """
    support = np.flatnonzero(delta)
    if support.size == 0:
        return 0.0
    if support.size > max_support:
        raise ValueError(
            f"delta support {support.size} exceeds the dense-Hessian limit {max_support}"
        )
    t_grid = sorted(set(float(t) for t in t_grid))
    if t_grid[0] > 0.0 or t_grid[-1] < 1.0:
        raise ValueError("t_grid must cover [0, 1]")

    def norm_at(t: float) -> float:
        hess = fd_hessian_from_grad(
            lambda th: fn.grad(th), theta0 + t * delta, support, h=h
        )
        return spectral_norm(hess)

    norms = [norm_at(t) for t in t_grid]
    best = int(np.argmax(norms))
    refined = list(norms)
    # one bisection step: probe midpoints around the grid argmax
    step = max(
        t_grid[best] - t_grid[best - 1] if best > 0 else 0.0,
        t_grid[best + 1] - t_grid[best] if best + 1 < len(t_grid) else 0.0,
    )
    for t in (t_grid[best] - step / 2, t_grid[best] + step / 2):
        if 0.0 <= t <= 1.0:
            refined.append(norm_at(t))
    return float(max(refined))


def hessian_bound(model_base: MicroModel, delta, alpha: float,
                  t_grid=DEFAULT_T_GRID, probes=None, h: float = 1e-4) -> float:
    """alpha(1-alpha)/2 * ||delta||_2^2 * sup_t ||H||_2.

    ||delta||_2^2 here is the Euclidean sum of squares over all entries
    (distinct from the per-layer mean used by the coefficient policy).
    """
    if probes is None:
        raise ValueError("probes are required to define the summary function")
    fn = MicroScalarFunction(model_base, probes)
    theta0 = model_base.flatten()
    dvec = _delta_flat(model_base, delta)
    sup_norm = sup_hessian_norm(fn, theta0, dvec, t_grid=t_grid, h=h)
    return 0.5 * alpha * (1.0 - alpha) * float(dvec @ dvec) * sup_norm


def third_derivative_slack(g_values: np.ndarray, t_values: np.ndarray) -> float:
    """Empirical cubic-term budget from third differences of g(t) = f(theta0 + t delta).

    Returns (1/3) * max_t |g'''(t)|, an upper bound on the omitted
    (alpha + alpha^3)/6 * |g'''| remainder for alpha in [0, 1]. The third
    derivative scales as ||delta||^3, so this is the measured counterpart
    of a c*||delta||^3 slack term.
    """
    t = np.asarray(t_values, dtype=np.float64)
    g = np.asarray(g_values, dtype=np.float64)
    if len(t) < 5:
        raise ValueError("need at least 5 grid points for a third difference")
    step = t[1] - t[0]
    if not np.allclose(np.diff(t), step, rtol=1e-9):
        raise ValueError("third differences need a uniform grid")
    third = np.abs(g[4:] - 2.0 * g[3:-1] + 2.0 * g[1:-3] - g[:-4]) / (2.0 * step**3)
    return float(third.max()) / 3.0


@dataclass
class BoundCheckResult:
    alpha_grid: list[float]
    measured_error: list[float]
    bound: list[float]
    delta_norm_sq: float
    sup_hessian_norm: float
    cubic_slack_estimate: float
    passed: bool
    seed: int = 0
    tol_rel: float = 0.05

    def to_dict(self) -> dict:
        return {
            "alpha_grid": self.alpha_grid,
            "measured_error": self.measured_error,
            "bound": self.bound,
            "delta_norm_sq": self.delta_norm_sq,
            "sup_hessian_norm": self.sup_hessian_norm,
            "cubic_slack_estimate": self.cubic_slack_estimate,
            "passed": self.passed,
            "seed": self.seed,
            "tol_rel": self.tol_rel,
        }


def check_bound(fn: ScalarFunction, theta0: np.ndarray, delta: np.ndarray,
                alpha_grid=DEFAULT_ALPHA_GRID, t_grid=DEFAULT_T_GRID,
                tol_rel: float = 0.05, h: float = 1e-4, seed: int = 0) -> BoundCheckResult:
    """Measure E(alpha) against the curvature bound plus measured cubic slack."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    alpha_grid = [float(a) for a in alpha_grid]

    eval_ts = np.linspace(0.0, 1.0, 11)
    g = np.array([fn.value(theta0 + t * delta) for t in eval_ts])
    g0, g1 = g[0], g[-1]

    def g_at(a: float) -> float:
        hit = np.isclose(eval_ts, a, rtol=0.0, atol=1e-12)
        return float(g[hit.argmax()]) if hit.any() else fn.value(theta0 + a * delta)

    errors = [abs(g_at(a) - ((1.0 - a) * g0 + a * g1)) for a in alpha_grid]
    sup_norm = sup_hessian_norm(fn, theta0, delta, t_grid=t_grid, h=h)
    dsq = float(delta @ delta)
    bounds = [0.5 * a * (1.0 - a) * dsq * sup_norm for a in alpha_grid]
    slack = third_derivative_slack(g, eval_ts)
    passed = all(e <= b * (1.0 + tol_rel) + slack for e, b in zip(errors, bounds))
    return BoundCheckResult(
        alpha_grid=alpha_grid,
        measured_error=errors,
        bound=bounds,
        delta_norm_sq=dsq,
        sup_hessian_norm=sup_norm,
        cubic_slack_estimate=slack,
        passed=passed,
        seed=seed,
        tol_rel=tol_rel,
    )


def verify_bound(trials: int = 20, delta_scale: float = 0.05, seed: int = 42,
                 config: MicroModelConfig | None = None, subset_size: int = 40,
                 n_probes: int = 2, probe_len: int = 16,
                 tol_rel: float = 0.05) -> list[BoundCheckResult]:
    """Randomized bound trials on fresh micro models.

    Each trial draws a random parameter subset and a random direction on it
    scaled to ||delta|| = delta_scale (small enough that cubic terms stay
    subdominant), then runs :func:`check_bound`. Failures are recorded in
    the results, not raised.
    """
    if delta_scale > 0.1:
        raise ValueError("delta_scale above 0.1 leaves the small-perturbation regime")
    config = config or MicroModelConfig()
    results: list[BoundCheckResult] = []
    for trial in range(trials):
        trial_seed = seed + 1000 * trial
        model = MicroModel.initialize(replace(config, seed=trial_seed))
        probes = sample_uniform_tokens(
            config.vocab_size, n_probes, min(probe_len, config.seq_len), trial_seed + 1
        )
        rng = np.random.default_rng(trial_seed + 2)
        dim = model.num_params()
        subset = rng.choice(dim, size=min(subset_size, dim), replace=False)
        direction = rng.standard_normal(len(subset))
        direction *= delta_scale / np.linalg.norm(direction)
        delta = np.zeros(dim)
        delta[subset] = direction
        fn = MicroScalarFunction(model, probes)
        results.append(
            check_bound(fn, model.flatten(), delta, tol_rel=tol_rel, seed=trial_seed)
        )
    return results


def quadratic_coefficient_check(fn: ScalarFunction, theta0: np.ndarray,
                                delta: np.ndarray,
                                alpha_grid=DEFAULT_ALPHA_GRID) -> float:
    """Max relative deviation of E(alpha) / (alpha(1-alpha)) from its mean.

    Near zero confirms the alpha(1-alpha) error profile; exact (to float
    rounding) for constant-Hessian functions.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    f0 = fn.value(theta0)
    f1 = fn.value(theta0 + delta)
    ratios = []
    for a in alpha_grid:
        err = abs(fn.value(theta0 + a * delta) - ((1.0 - a) * f0 + a * f1))
        ratios.append(err / (a * (1.0 - a)))
    ratios = np.asarray(ratios)
    mean = ratios.mean()
    if mean == 0.0:
        return 0.0
    return float(np.max(np.abs(ratios - mean)) / abs(mean))


def quadratic_coefficient_check_micro(model: MicroModel, delta, probes,
                                      alpha_grid=DEFAULT_ALPHA_GRID) -> float:
    fn = MicroScalarFunction(model, probes)
    return quadratic_coefficient_check(
        fn, model.flatten(), _delta_flat(model, delta), alpha_grid
    )


# -- Fisher-Hessian agreement -------------------------------------------------


def softmax_toy_check(counts: np.ndarray | None = None, h: float = 1e-5) -> dict:
    """Closed-form check: a single softmax layer over one-hot features at its MLE.

    With weights W[k] = log(empirical conditional frequencies), per-sample
    squared gradients and the NLL Hessian diagonal coincide analytically:
    both equal (n_k / N) * p (1 - p). The Hessian side is measured by a
    second central difference of the mean NLL, so the reported gap is pure
    finite-difference error.
    """
    if counts is None:
        counts = np.array([[5, 3, 2, 1], [1, 6, 2, 3], [4, 1, 1, 2]], dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("all counts must be positive so the MLE is interior")
    n_groups, n_classes = counts.shape
    total = counts.sum()
    group_totals = counts.sum(axis=1, keepdims=True)
    probs = counts / group_totals
    weights = np.log(probs)

    def mean_nll(w: np.ndarray) -> float:
        z = w - w.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-(counts * logp).sum() / total)

    # empirical Fisher diagonal: average squared per-sample gradient,
    # enumerated exactly over the dataset
    fisher = np.zeros_like(counts)
    for k in range(n_groups):
        for y in range(n_classes):
            grad_ky = probs[k].copy()
            grad_ky[y] -= 1.0
            fisher[k] += counts[k, y] * grad_ky**2
    fisher /= total

    hess = np.zeros_like(counts)
    for k in range(n_groups):
        for c in range(n_classes):
            wp = weights.copy(); wp[k, c] += h
            wm = weights.copy(); wm[k, c] -= h
            hess[k, c] = (mean_nll(wp) - 2.0 * mean_nll(weights) + mean_nll(wm)) / h**2

    analytic = (group_totals / total) * probs * (1.0 - probs)
    return {
        "max_gap": float(np.max(np.abs(fisher - hess))),
        "fisher_diag": fisher,
        "hessian_diag": hess,
        "analytic_diag": analytic,
        "max_gap_fisher_analytic": float(np.max(np.abs(fisher - analytic))),
    }


def fisher_hessian_check(trained: MicroModel, corpus, topology: ModelTopology,
                         coords_per_layer: int = 200, seed: int = 0,
                         h: float = 1e-3) -> dict:
    """Per-layer means of empirical diagonal Fisher vs. NLL Hessian diagonal.

    The Fisher side averages squared per-sequence gradients of the mean
    NLL, rescaled by the number of predicted positions so its units match
    the Hessian of the corpus mean NLL. The Hessian diagonal is sampled at
    ``coords_per_layer`` random coefficient-set coordinates per layer via
    central differences of the corpus gradient. Equivalence is only
    expected near an optimum, so the trained model's gradient norm is
    reported alongside.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    n_pred = corpus.shape[1] - 1

    fisher_acc = {n: np.zeros_like(a) for n, a in trained.params.items()}
    for i in range(corpus.shape[0]):
        g = trained.backward_nll(corpus[i])
        for name, arr in g.items():
            fisher_acc[name] += arr * arr
    fisher_flat = flatten_params(fisher_acc) * (n_pred / corpus.shape[0])

    mean_nll, grads = trained.nll_and_grad(corpus)
    grad_norm = float(np.linalg.norm(flatten_params(grads)))

    offsets = _param_offsets(trained.params)
    rng = np.random.default_rng(seed)
    layers = topology.layers()
    layer_coords: dict[int, np.ndarray] = {}
    for layer in layers:
        flat_ids: list[np.ndarray] = []
        for name in topology.coefficient_names(layer):
            start, size = offsets[name]
            flat_ids.append(np.arange(start, start + size))
        pool = np.concatenate(flat_ids)
        take = min(coords_per_layer, pool.size)
        layer_coords[layer] = np.sort(rng.choice(pool, size=take, replace=False))

    all_coords = np.concatenate([layer_coords[l] for l in layers])
    theta0 = trained.flatten()
    hdiag = np.empty(all_coords.size)
    for i, j in enumerate(all_coords):
        e = np.zeros_like(theta0)
        e[j] = h
        gp = flatten_params(trained.with_flat(theta0 + e).backward_nll(corpus))
        gm = flatten_params(trained.with_flat(theta0 - e).backward_nll(corpus))
        hdiag[i] = (gp[j] - gm[j]) / (2.0 * h)

    per_layer_f: dict[int, float] = {}
    per_layer_h: dict[int, float] = {}
    cursor = 0
    for layer in layers:
        k = layer_coords[layer].size
        per_layer_f[layer] = float(fisher_flat[layer_coords[layer]].mean())
        per_layer_h[layer] = float(hdiag[cursor : cursor + k].mean())
        cursor += k

    f_vals = np.array([per_layer_f[l] for l in layers])
    h_vals = np.array([per_layer_h[l] for l in layers])
    gaps = np.abs(f_vals - h_vals) / np.maximum(np.abs(h_vals), 1e-30)
    return {
        "per_layer_fisher": per_layer_f,
        "per_layer_hessian": per_layer_h,
        "per_layer_rank_correlation": spearman(f_vals, h_vals),
        "mean_relative_gap": float(gaps.mean()),
        "grad_norm": grad_norm,
        "mean_nll": mean_nll,
        "coords_per_layer": coords_per_layer,
    }


def _param_offsets(params: Params) -> dict[str, tuple[int, int]]:
    offsets: dict[str, tuple[int, int]] = {}
    cursor = 0
    for name in sorted(params):
        size = params[name].size
        offsets[name] = (cursor, size)
        cursor += size
    return offsets


# -- nonlinearity analysis ------------------------------------------------------


@dataclass
class NlRecord:
    layer_index: int
    nl_score: float | None
    relative_merge_error: float | None


def interpolation_residual(f0: np.ndarray, f1: np.ndarray, fa: np.ndarray,
                           alpha: float) -> np.ndarray:
    return fa - ((1.0 - alpha) * f0 + alpha * f1)


def _layer_delta(base: MicroModel, delta_params: Params, topology: ModelTopology,
                 layer: int) -> Params:
    return {
        n: delta_params[n]
        if topology[n].layer_index == layer else np.zeros_like(delta_params[n])
        for n in delta_params
    }


def nl_score(base: MicroModel, delta, layer: int, topology: ModelTopology,
             alpha: float = 0.5, n_probes: int = 8, seed: int = 0) -> float | None:
    """Per-layer nonlinearity score at merge strength ``alpha``.

    The perturbation keeps only layer ``layer``'s task-vector entries. For
    each probe sequence the full next-token log-probability array is the
    (vector) model output; the score is the mean over probes of
    ||interpolation residual|| / ||total output change||. Probes whose
    output change is below 1e-12 make the ratio undefined (returns None).
    """
    records = nl_analysis(base, base.shifted(_as_params(base, delta)), topology,
                          alpha=alpha, n_probes=n_probes, seed=seed,
                          layers=[layer])[0]
    return records[0].nl_score


def _as_params(model: MicroModel, delta) -> Params:
    entries = delta.entries if hasattr(delta, "entries") else delta
    return {
        n: np.asarray(entries[n], dtype=np.float64)
        if n in entries else np.zeros_like(model.params[n])
        for n in model.params
    }


def nl_analysis(base: MicroModel, tuned: MicroModel, topology: ModelTopology,
                alpha: float = 0.5, n_probes: int = 8, seed: int = 0,
                layers: list[int] | None = None) -> tuple[list[NlRecord], float | None]:
    """Layer-by-layer nonlinearity scores and relative merging errors.

    The relative merging error of a layer reuses the layer-restricted
    interpolation residual but normalizes by the output change of the
    *full* task vector, so it measures each layer's contribution to the
    overall merge deviation on a common scale. Returns the records plus
    the Pearson correlation between the two columns (None if fewer than
    two layers have defined values).
    """
    probes = sample_uniform_tokens(
        base.config.vocab_size, n_probes, base.config.seq_len, seed
    )
    delta_params = {
        n: tuned.params[n] - base.params[n] for n in base.params
    }
    if layers is None:
        layers = sorted({
            r.layer_index for r in topology.records.values() if r.layer_index is not None
        })

    f0 = base.log_prob_outputs(probes)
    f1_full = base.shifted(delta_params).log_prob_outputs(probes)
    axes = tuple(range(1, f0.ndim))
    den_full = np.sqrt(np.sum((f1_full - f0) ** 2, axis=axes))

    records: list[NlRecord] = []
    for layer in layers:
        ld = _layer_delta(base, delta_params, topology, layer)
        f1 = base.shifted(ld).log_prob_outputs(probes)
        fa = base.shifted(ld, scale=alpha).log_prob_outputs(probes)
        num = np.sqrt(np.sum(interpolation_residual(f0, f1, fa, alpha) ** 2, axis=axes))
        den = np.sqrt(np.sum((f1 - f0) ** 2, axis=axes))
        nl = float(np.mean(num / den)) if np.all(den >= 1e-12) else None
        rme = float(np.mean(num / den_full)) if np.all(den_full >= 1e-12) else None
        records.append(NlRecord(layer_index=layer, nl_score=nl, relative_merge_error=rme))

    defined = [
        (r.nl_score, r.relative_merge_error)
        for r in records
        if r.nl_score is not None and r.relative_merge_error is not None
    ]
    corr = None
    if len(defined) >= 2:
        xs, ys = zip(*defined)
        if len(set(xs)) > 1 and len(set(ys)) > 1:
            corr = pearson(xs, ys)
    return records, corr
