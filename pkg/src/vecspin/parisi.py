"""Discrete-path free energy functionals and the sup-inf optimizer.

A discrete path with r levels is a pair of sequences

    0 <= x_0 <= ... <= x_{r-1} <= x_r = 1,
    0 = gamma_0 <= gamma_1 <= ... <= gamma_r = D   (PSD order),

and induces independent Gaussian vectors z_j with covariance
xi'(gamma_j) - xi'(gamma_{j-1}).  The base functional is the recursion

    X_r = log int exp( <sigma, z_1 + ... + z_r> + sum_{k<=k'} lam_{k,k'}
          sigma(k) sigma(k') ) dmu(sigma),
    X_j = (1/x_j) log E_j exp(x_j X_{j+1}),     E_j over z_{j+1},

with X_j = E_j X_{j+1} when x_j = 0, and Phi = X_0.  The full functional
subtracts the Lagrange pairing and a correction built from theta,

    P = Phi - sum_{k<=k'} lam_{k,k'} D_{k,k'}
        - (1/2) sum_{j<r} x_j Sum(theta(gamma_{j+1}) - theta(gamma_j)),

whose theta term can equivalently be written as (1/2) Sum(theta(D)) minus
(1/2) the integral of Sum(theta(pi(x))) over [0,1]; both forms are computed
and must agree.

Two evaluation backends are provided.  Quadrature tensorizes Gauss-Hermite
nodes per level through a factor of each covariance increment and performs
the recursion exactly (zero-variance directions are dropped, so duplicated
levels are transparent).  Monte Carlo grows a sampling tree with fresh
draws per node and reports a standard error across independent
replications.

Lambda coefficients are stored as a flat vector over the upper triangle in
row-major order: (0,0), (0,1), ..., (0,kappa-1), (1,1), ...
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import BudgetError, NumericalError, ValidationError
from .mixing import (
    PSD_TOL,
    MixedModel,
    sum_all,
    theta_matrix,
    validate_gram,
    xi_prime_matrix,
)
from .prior import ConstraintHull, SpinPrior
from .rng import parallel_map, spawn_rng

#: Below this, an x value is treated as exactly zero (plain expectation branch).
X_TINY = 1e-8

#: Grid-size guard for either backend.
MAX_GRID_POINTS = 1 << 24


# ---------------------------------------------------------------------------
# lambda coefficient helpers


def lambda_size(kappa: int) -> int:
    return kappa * (kappa + 1) // 2


def lambda_indices(kappa: int):
    """Upper-triangle index pair arrays matching the flat lambda layout."""
    return np.triu_indices(kappa)


def lambda_zero(kappa: int) -> np.ndarray:
    return np.zeros(lambda_size(kappa))


def lambda_validate(lam, kappa: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.shape != (lambda_size(kappa),):
        raise ValidationError(
            f"lambda must have {lambda_size(kappa)} entries for kappa={kappa}"
        )
    if not np.all(np.isfinite(lam)):
        raise ValidationError("lambda entries must be finite")
    return lam


def lambda_pairing(lam, d) -> float:
    """sum_{k<=k'} lam_{k,k'} d_{k,k'}."""
    d = np.asarray(d, dtype=float)
    iu = lambda_indices(d.shape[0])
    return float(np.asarray(lam, dtype=float) @ d[iu])


def lambda_norm1(lam) -> float:
    return float(np.sum(np.abs(lam)))


def upper_entries(d) -> np.ndarray:
    """Upper-triangle entries of a symmetric matrix in the lambda layout."""
    d = np.asarray(d, dtype=float)
    iu = lambda_indices(d.shape[0])
    return d[iu].copy()


def _atom_pair_products(prior: SpinPrior) -> np.ndarray:
    """Per-atom products sigma(k) sigma(k') over upper pairs, (n_atoms, C)."""
    iu = lambda_indices(prior.kappa)
    return prior.points[:, iu[0]] * prior.points[:, iu[1]]


# ---------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class Path:
    """Discrete monotone path: x holds (x_0..x_{r-1}), gammas (gamma_1..gamma_r).

    gamma_0 = 0 and x_r = 1 are implicit.  The x values must be
    non-decreasing in [0, 1]; every gamma increment must be PSD within
    ``PSD_TOL``.  The endpoint D is ``gammas[-1]``.
    """

    x: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        if x.size < 1:
            raise ValidationError("a path needs at least one level")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValidationError("x values must lie in [0, 1]")
        if np.any(np.diff(x) < 0):
            raise ValidationError("x values must be non-decreasing")
        gam = np.asarray(self.gammas, dtype=float)
        if gam.ndim == 2:
            gam = gam[None, :, :]
        if gam.ndim != 3 or gam.shape[0] != x.size or gam.shape[1] != gam.shape[2]:
            raise ValidationError(
                f"gammas must be (r, kappa, kappa) with r={x.size}, got {gam.shape}"
            )
        prev = np.zeros_like(gam[0])
        for j in range(gam.shape[0]):
            validate_gram(gam[j], name=f"gamma_{j + 1}")
            step = gam[j] - prev
            lo = float(np.linalg.eigvalsh((step + step.T) / 2.0)[0])
            if lo < -PSD_TOL:
                raise ValidationError(
                    f"path is not monotone: increment {j + 1} has eigenvalue {lo:.3e}"
                )
            prev = gam[j]
        x = x.copy()
        gam = gam.copy()
        x.flags.writeable = False
        gam.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "gammas", gam)

    @property
    def r(self) -> int:
        return self.x.size

    @property
    def kappa(self) -> int:
        return self.gammas.shape[1]

    @property
    def endpoint(self) -> np.ndarray:
        return self.gammas[-1]

    def gammas_full(self) -> np.ndarray:
        """(r+1, kappa, kappa) including the implicit gamma_0 = 0."""
        return np.concatenate(
            [np.zeros((1, self.kappa, self.kappa)), self.gammas], axis=0
        )

    def value_at(self, t: float) -> np.ndarray:
        """Left-continuous step value pi(t) for t in [0, 1]."""
        fullx = np.append(self.x, 1.0)
        j = int(np.searchsorted(fullx, t, side="left"))
        return self.gammas_full()[j]

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "gammas": self.gammas.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Path":
        return cls(np.asarray(data["x"]), np.asarray(data["gammas"]))


def path_distance(path_a: Path, path_b: Path) -> float:
    """Integral over [0,1] of the entrywise l1 distance between the steps."""
    if path_a.kappa != path_b.kappa:
        raise ValidationError("paths must share the spin dimension")
    bps = np.unique(np.concatenate([[0.0], path_a.x, path_b.x, [1.0]]))
    total = 0.0
    for a, b in zip(bps[:-1], bps[1:]):
        if b <= a:
            continue
        t = 0.5 * (a + b)
        total += (b - a) * float(
            np.sum(np.abs(path_a.value_at(t) - path_b.value_at(t)))
        )
    return total


def increments(model: MixedModel, path: Path) -> list[np.ndarray]:
    """Covariances xi'(gamma_j) - xi'(gamma_{j-1}) for j = 1..r.

    Eigenvalues in [-PSD_TOL, 0) are clipped to zero; anything lower means
    the path is not monotone for this model and raises.
    """
    out = []
    full = path.gammas_full()
    prev = xi_prime_matrix(model, full[0])
    for j in range(1, full.shape[0]):
        cur = xi_prime_matrix(model, full[j])
        diff = cur - prev
        diff = (diff + diff.T) / 2.0
        vals, vecs = np.linalg.eigh(diff)
        if vals[0] < -PSD_TOL:
            raise ValidationError(
                f"covariance increment {j} is not PSD (min eigenvalue {vals[0]:.3e})"
            )
        vals = np.clip(vals, 0.0, None)
        out.append((vecs * vals) @ vecs.T)
        prev = cur
    return out


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F^T = cov, keeping only non-negligible directions."""
    cov = (cov + cov.T) / 2.0
    vals, vecs = np.linalg.eigh(cov)
    cut = 1e-12 * max(float(vals[-1]) if vals.size else 0.0, 1.0)
    keep = vals > cut
    return vecs[:, keep] * np.sqrt(vals[keep])


# ---------------------------------------------------------------------------
# evaluation specs


@dataclass(frozen=True)
class EvalSpec:
    """How to evaluate the Gaussian recursion.

    quadrature: tensorized Gauss-Hermite with ``nodes_per_level`` nodes per
    scalar dimension; exact, std_error 0; refused when kappa*r exceeds
    ``dim_cap``.  monte_carlo: ``samples_per_level`` child draws per node,
    ``replications`` independent trees for the standard error.
    """

    backend: str = "quadrature"
    nodes_per_level: int = 16
    samples_per_level: int = 512
    replications: int = 8
    seed: int = 0
    antithetic: bool = False
    dim_cap: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.backend not in ("quadrature", "monte_carlo", "mc"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.nodes_per_level < 1 or self.samples_per_level < 1:
            raise ValidationError("node and sample counts must be positive")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.antithetic and self.samples_per_level % 2:
            raise ValidationError("antithetic sampling needs an even sample count")

    @property
    def is_quadrature(self) -> bool:
        return self.backend == "quadrature"


@dataclass(frozen=True)
class OptimizerSpec:
    """Budgets and step sizes for the Legendre transform and the sup-inf."""

    max_iter: int = 500
    step: float = 0.1
    grad_tol: float = 1e-8
    fd_step: float = 1e-4
    multistarts: int = 8
    alternations: int = 6
    path_steps: int = 60
    outer_iters: int = 25
    outer_step: float = 0.25
    seed: int = 0


# ---------------------------------------------------------------------------
# inner integral


def _inner_scores(prior, lam, z, external_field=None, quad_bonus=None):
    """Per-atom log integrand over a batch of field values z (P, kappa)."""
    lam = lambda_validate(lam, prior.kappa)
    pair = _atom_pair_products(prior)
    base = pair @ lam + prior.log_weights()
    if quad_bonus is not None:
        base = base + quad_bonus
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if external_field is not None:
        z = z + np.asarray(external_field, dtype=float)
    return z @ prior.points.T + base


def _logsumexp_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))


def eval_inner(prior: SpinPrior, lam, z_sum, external_field=None) -> float:
    """log of the weighted atom sum of exp(<sigma, z> + quadratic lambda term).

    Computed with a max shift, so large fields are safe.
    """
    scores = _inner_scores(prior, lam, np.asarray(z_sum, dtype=float)[None, :],
                           external_field)
    return float(_logsumexp_rows(scores)[0])


# ---------------------------------------------------------------------------
# the recursion, shared fold


def _fold(values, level_logw, x_seq, grads=None):
    """Collapse the level axes of the recursion from the innermost out.

    ``values`` has one entry per full tensor grid point, levels laid out
    row-major (level 1 outermost).  Level i is folded with x_seq[i]; the
    x = 0 branch is a plain weighted mean.  Gradients, if given, fold with
    the normalized exp(x X) reweighting of the same levels.
    """
    v = values
    g = grads
    for i in reversed(range(len(level_logw))):
        lw = level_logw[i]
        n = lw.size
        x = float(x_seq[i])
        v = v.reshape(-1, n)
        if g is not None:
            g = g.reshape(v.shape[0], n, -1)
        if x < X_TINY:
            w = np.exp(lw)
            if g is not None:
                g = np.einsum("pnc,n->pc", g, w)
            v = v @ w
        else:
            a = x * v + lw
            m = a.max(axis=1, keepdims=True)
            ls = m[:, 0] + np.log(np.exp(a - m).sum(axis=1))
            if g is not None:
                s = np.exp(a - ls[:, None])
                g = np.einsum("pn,pnc->pc", s, g)
            v = ls / x
    value = float(v[0])
    if g is not None:
        return value, g[0]
    return value


def _gh_nodes(n: int):
    """Nodes and weights for expectations against a standard normal."""
    z, w = np.polynomial.hermite.hermgauss(n)
    return z * math.sqrt(2.0), w / math.sqrt(math.pi)


def _quad_levels(factors, n_nodes):
    """Per level: (offsets (n_i, kappa), log-weights (n_i,)) tensor grids."""
    z1, w1 = _gh_nodes(n_nodes)
    logw1 = np.log(w1)
    levels = []
    for f in factors:
        kappa, d = f.shape
        if d == 0:
            levels.append((np.zeros((1, kappa)), np.zeros(1)))
            continue
        grids = np.meshgrid(*([z1] * d), indexing="ij")
        pts = np.stack([grid.ravel() for grid in grids], axis=1)
        wgrids = np.meshgrid(*([logw1] * d), indexing="ij")
        lw = np.sum([wg.ravel() for wg in wgrids], axis=0)
        levels.append((pts @ f.T, lw))
    return levels


def _assemble_grid(levels):
    """Stack per-level offsets into the full tensor grid of field sums."""
    total = 1
    for offs, _ in levels:
        total *= offs.shape[0]
        if total > MAX_GRID_POINTS:
            raise BudgetError(
                f"evaluation grid would exceed {MAX_GRID_POINTS} points; "
                "reduce nodes or samples per level"
            )
    kappa = levels[0][0].shape[1]
    z = np.zeros((1, kappa))
    for offs, _ in levels:
        z = (z[:, None, :] + offs[None, :, :]).reshape(-1, kappa)
    return z


def _phi_from_levels(prior, lam, levels, x_seq, external_field=None,
                     quad_bonus=None, extra_const=0.0, want_grad=False):
    z = _assemble_grid(levels)
    scores = _inner_scores(prior, lam, z, external_field, quad_bonus)
    values = _logsumexp_rows(scores) + extra_const
    logws = [lw for _, lw in levels]
    if not want_grad:
        return _fold(values, logws, x_seq)
    probs = np.exp(scores - values[:, None] + extra_const)
    grads = probs @ _atom_pair_products(prior)
    return _fold(values, logws, x_seq, grads=grads)


def _mc_levels(factors, spec: EvalSpec, rng):
    """Sampling-tree levels: fresh child draws per parent node."""
    kappa = factors[0].shape[0] if factors else 0
    z = np.zeros((1, kappa))
    logws = []
    s = spec.samples_per_level
    for f in factors:
        d = f.shape[1]
        if d == 0:
            logws.append(np.zeros(1))
            continue
        parents = z.shape[0]
        if parents * s > MAX_GRID_POINTS:
            raise BudgetError(
                f"sampling tree would exceed {MAX_GRID_POINTS} leaves; "
                "reduce samples_per_level or replications"
            )
        if spec.antithetic:
            half = rng.standard_normal((parents, s // 2, d))
            u = np.concatenate([half, -half], axis=1)
        else:
            u = rng.standard_normal((parents, s, d))
        z = (z[:, None, :] + u @ f.T).reshape(-1, kappa)
        logws.append(np.full(s, -math.log(s)))
    return z, logws


def _phi_mc_once(prior, lam, factors, x_seq, spec, rng, external_field=None):
    z, logws = _mc_levels(factors, spec, rng)
    scores = _inner_scores(prior, lam, z, external_field)
    values = _logsumexp_rows(scores)
    return _fold(values, logws, x_seq)


def eval_phi(model: MixedModel, prior: SpinPrior, lam, path: Path,
             spec: EvalSpec, external_field=None) -> tuple[float, float]:
    """Evaluate the recursion; returns (value, std_error).

    Quadrature is exact up to node truncation and reports std_error 0.
    Monte Carlo averages ``spec.replications`` independent sampling trees.
    """
    if prior.kappa != path.kappa:
        raise ValidationError("prior and path disagree on kappa")
    covs = increments(model, path)
    factors = [_psd_factor(c) for c in covs]
    if spec.is_quadrature:
        if path.kappa * path.r > spec.dim_cap:
            raise BudgetError(
                f"quadrature dimension kappa*r = {path.kappa * path.r} exceeds "
                f"dim_cap = {spec.dim_cap}; use the monte_carlo backend"
            )
        levels = _quad_levels(factors, spec.nodes_per_level)
        value = _phi_from_levels(prior, lam, levels, path.x, external_field)
        return value, 0.0

    def one(rep: int) -> float:
        rng = spawn_rng(spec.seed, rep)
        return _phi_mc_once(prior, lam, factors, path.x, spec, rng, external_field)

    vals = np.array(parallel_map(one, spec.replications, spec.threads))
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def eval_phi_mc_convergence(model, prior, lam, path, spec: EvalSpec,
                            external_field=None) -> dict:
    """Monte Carlo values at s and 2s samples per level, for bias reporting.

    The nested log-mean-exp estimator is biased at finite sample counts;
    comparing the two resolutions bounds the remaining bias empirically.
    """
    base = replace(spec, backend="monte_carlo")
    coarse = eval_phi(model, prior, lam, path, base, external_field)
    fine = eval_phi(
        model, prior, lam, path,
        replace(base, samples_per_level=2 * base.samples_per_level),
        external_field,
    )
    return {
        "samples": base.samples_per_level,
        "value": coarse[0],
        "std_error": coarse[1],
        "samples_doubled": 2 * base.samples_per_level,
        "value_doubled": fine[0],
        "std_error_doubled": fine[1],
    }


def eval_phi_smoothed(model, prior, lam, path, spec: EvalSpec,
                      delta: float) -> tuple[float, float]:
    """Recursion value with an independent N(0, delta) blur on each lambda slot.

    The blur multiplies the inner integrand by exp(sum_c lam_c g_c) with
    independent centered Gaussians g_c; its contribution is integrated here
    by one-dimensional Gauss-Hermite per component (quadrature backend
    only), shifting the value by (delta/2) sum_c lam_c^2.
    """
    if not spec.is_quadrature:
        raise ValidationError("the smoothed functional is quadrature-only")
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    lam = lambda_validate(lam, prior.kappa)
    z1, w1 = _gh_nodes(spec.nodes_per_level)
    shift = 0.0
    for lc in lam:
        shift += float(np.log(np.sum(w1 * np.exp(lc * math.sqrt(delta) * z1))))
    covs = increments(model, path)
    factors = [_psd_factor(c) for c in covs]
    levels = _quad_levels(factors, spec.nodes_per_level)
    value = _phi_from_levels(prior, lam, levels, path.x, extra_const=shift)
    return value, 0.0


def phi_grad_lambda(model, prior, lam, path, spec: EvalSpec,
                    external_field=None) -> tuple[float, np.ndarray]:
    """Value and gradient of the recursion in the lambda coefficients.

    Quadrature differentiates through the recursion exactly (the bottom
    gradient is the inner Gibbs average of sigma(k) sigma(k'); each fold
    reweights by the normalized exp(x_j X_{j+1})).  Monte Carlo falls back
    to central differences with step 1e-4 on a common seed.
    """
    lam = lambda_validate(lam, prior.kappa)
    if spec.is_quadrature:
        covs = increments(model, path)
        factors = [_psd_factor(c) for c in covs]
        levels = _quad_levels(factors, spec.nodes_per_level)
        value, grad = _phi_from_levels(
            prior, lam, levels, path.x, external_field, want_grad=True
        )
        return value, grad
    h = 1e-4
    value, _ = eval_phi(model, prior, lam, path, spec, external_field)
    grad = np.zeros_like(lam)
    for c in range(lam.size):
        lp = lam.copy()
        lp[c] += h
        lm = lam.copy()
        lm[c] -= h
        vp, _ = eval_phi(model, prior, lp, path, spec, external_field)
        vm, _ = eval_phi(model, prior, lm, path, spec, external_field)
        grad[c] = (vp - vm) / (2.0 * h)
    return value, grad


# ---------------------------------------------------------------------------
# the full functional


def theta_correction(model: MixedModel, path: Path) -> float:
    """(1/2) sum_j x_j Sum(theta(gamma_{j+1}) - theta(gamma_j))."""
    full = path.gammas_full()
    sums = np.array([sum_all(theta_matrix(model, g)) for g in full])
    return 0.5 * float(np.sum(path.x * np.diff(sums)))


def theta_correction_rearranged(model: MixedModel, path: Path) -> float:
    """Same correction via (1/2)[Sum(theta(D)) - int Sum(theta(pi(x))) dx]."""
    full = path.gammas_full()
    sums = np.array([sum_all(theta_matrix(model, g)) for g in full])
    fullx = np.concatenate([[0.0], path.x, [1.0]])
    integral = float(np.sum(np.diff(fullx) * sums))
    return 0.5 * (sums[-1] - integral)


@dataclass(frozen=True)
class ParisiResult:
    value: float
    std_error: float
    phi: float
    lagrange_term: float
    theta_term: float
    theta_term_rearranged: float

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "phi": self.phi,
            "lagrange_term": self.lagrange_term,
            "theta_term": self.theta_term,
            "theta_term_rearranged": self.theta_term_rearranged,
        }


def eval_parisi(model, prior, lam, d, path: Path, spec: EvalSpec,
                external_field=None) -> ParisiResult:
    """Full functional P = Phi - lambda pairing - theta correction.

    The declared constraint ``d`` must equal the path endpoint.  Both forms
    of the deterministic theta term are computed and must agree to 1e-10.
    """
    d = np.asarray(d, dtype=float)
    if not np.array_equal(d, path.endpoint):
        raise ValidationError("constraint matrix D must equal the path endpoint")
    t_direct = theta_correction(model, path)
    t_re = theta_correction_rearranged(model, path)
    if abs(t_direct - t_re) > 1e-10:
        raise NumericalError(
            f"theta-term rearrangement mismatch: {t_direct!r} vs {t_re!r}"
        )
    phi, se = eval_phi(model, prior, lam, path, spec, external_field)
    pair = lambda_pairing(lam, d)
    return ParisiResult(phi - pair - t_direct, se, phi, pair, t_direct, t_re)


def guerra_bound(model, prior, d, eps: float, lam, path: Path,
                 spec: EvalSpec) -> float:
    """eps * |lambda|_1 + P(lambda, D, path), the interpolation upper bound.

    The constant L*eps slack of the bound is not computable and is left to
    the caller's tolerance.
    """
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    res = eval_parisi(model, prior, lam, d, path, spec)
    return eps * lambda_norm1(lam) + res.value


# ---------------------------------------------------------------------------
# Legendre transform over lambda


@dataclass(frozen=True)
class PhiStarResult:
    value: float
    lam: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def phi_star(model, prior, d, path: Path, spec: EvalSpec,
             opt: OptimizerSpec | None = None, lam0=None) -> PhiStarResult:
    """inf over lambda of -<lambda, D> + Phi(lambda), by descent with backtracking.

    The objective is convex (log-sum-exp composed through the recursion
    preserves convexity in lambda), so plain gradient descent with Armijo
    backtracking is reliable.  Returns the best iterate with a flag when
    the budget runs out first.
    """
    opt = opt or OptimizerSpec()
    d = np.asarray(d, dtype=float)
    d_upper = upper_entries(d)
    lam = lambda_zero(prior.kappa) if lam0 is None else lambda_validate(lam0, prior.kappa)

    def value_and_grad(l):
        v, g = phi_grad_lambda(model, prior, l, path, spec)
        return v - float(l @ d_upper), g - d_upper

    def value_only(l):
        v, _ = eval_phi(model, prior, l, path, spec)
        return v - float(l @ d_upper)

    f, g = value_and_grad(lam)
    best = (f, lam.copy())
    it = 0
    converged = False
    step = opt.step
    for it in range(1, opt.max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= opt.grad_tol:
            converged = True
            break
        accepted = False
        while step > 1e-16:
            trial = lam - step * g
            ft = value_only(trial)
            if ft <= f - 1e-4 * step * float(g @ g):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        lam = trial
        f, g = value_and_grad(lam)
        if f < best[0]:
            best = (f, lam.copy())
        # the accepted step seeds the next try, growing while accepts are easy
        step = min(step * 2.0, 1e3 * opt.step)
    value, lam = best
    return PhiStarResult(value, lam, converged, it, float(np.max(np.abs(g))))


# ---------------------------------------------------------------------------
# sup over the hull, inf over lambda and the path


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    a = -np.sort(-v)
    cums = (np.cumsum(a) - 1.0) / np.arange(1, v.size + 1)
    k = np.nonzero(a > cums)[0][-1]
    return np.maximum(v - cums[k], 0.0)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _path_from_params(xs_raw, fs, d) -> Path:
    """Monotone path hitting D from free parameters.

    Raw x values are clipped to [0, 1] and sorted; raw increments F_i F_i^T
    are accumulated and the whole ramp is conjugated so the last value is D
    exactly.
    """
    kappa = d.shape[0]
    x = np.sort(np.clip(np.asarray(xs_raw, dtype=float), 0.0, 1.0))
    r = x.size
    cums = []
    g = np.zeros((kappa, kappa))
    for f in fs:
        g = g + f @ f.T
    total = g
    vals, vecs = np.linalg.eigh((total + total.T) / 2.0)
    if float(vals[-1]) <= 1e-12:
        # collapsed ramp: jump straight to the endpoint at the last level
        gammas = np.concatenate(
            [np.zeros((r - 1, kappa, kappa)), d[None, :, :]], axis=0
        )
        return Path(x, gammas)
    floor = 1e-12 * float(vals[-1])
    inv_sqrt = (vecs / np.sqrt(np.clip(vals, floor, None))) @ vecs.T
    m = _sqrt_psd(d) @ inv_sqrt
    g = np.zeros((kappa, kappa))
    gammas = []
    for f in fs:
        g = g + f @ f.T
        gammas.append(m @ g @ m.T)
    gammas[-1] = d
    return Path(x, np.array(gammas))


@dataclass(frozen=True)
class OptimizeResult:
    value: float
    d: np.ndarray
    lam: np.ndarray
    path: Path
    hull_weights: np.ndarray
    converged: bool
    ordering_values: dict

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "d": self.d.tolist(),
            "lambda": self.lam.tolist(),
            "path": self.path.to_dict(),
            "hull_weights": self.hull_weights.tolist(),
            "converged": self.converged,
            "ordering_values": self.ordering_values,
        }


def _parisi_value(model, prior, lam, path, spec) -> float:
    phi, _ = eval_phi(model, prior, lam, path, spec)
    return phi - lambda_pairing(lam, path.endpoint) - theta_correction(model, path)


def _inner_minimize(model, prior, d, r, spec, opt, rng, order: str):
    """inf over (lambda, path in Pi_D), alternating descent in one ordering."""
    kappa = d.shape[0]
    xs = np.sort(rng.uniform(0.2, 0.95, size=r))
    fs = rng.standard_normal((r, kappa, kappa)) * 0.3
    scale = math.sqrt(max(float(np.trace(d)), 1e-3) / max(r, 1))
    fs = fs * scale
    lam = lambda_zero(kappa)

    def pack(xs, fs):
        return np.concatenate([xs, fs.ravel()])

    def unpack(vec):
        return vec[:r], vec[r:].reshape(r, kappa, kappa)

    def path_objective(vec):
        xs_v, fs_v = unpack(vec)
        try:
            path = _path_from_params(xs_v, fs_v, d)
            return _parisi_value(model, prior, lam, path, spec)
        except (ValidationError, NumericalError, np.linalg.LinAlgError):
            return np.inf

    def lam_step(path):
        res = phi_star(model, prior, d, path, spec, opt, lam0=lam)
        return res.lam

    vec = pack(xs, fs)
    for round_idx in range(opt.alternations):
        path = _path_from_params(*unpack(vec), d)
        if order == "lambda_first" or round_idx > 0:
            lam = lam_step(path)
        res = minimize(
            path_objective,
            vec,
            method="Powell",
            options={"maxfev": opt.path_steps * (vec.size + 1), "xtol": 1e-6,
                     "ftol": 1e-10},
        )
        if np.isfinite(res.fun):
            vec = res.x
    path = _path_from_params(*unpack(vec), d)
    lam = lam_step(path)
    value = _parisi_value(model, prior, lam, path, spec)
    return value, lam, path


def optimize(model: MixedModel, prior: SpinPrior, r: int, spec: EvalSpec,
             opt: OptimizerSpec | None = None) -> OptimizeResult:
    """sup over the constraint hull of the inf over (lambda, path).

    The outer variable is a weight vector on the hull generators
    (simplex-projected ascent with a finite-difference gradient); the inner
    problem alternates the exact lambda descent with derivative-free path
    descent, run in both orderings, keeping the smaller value.  Degenerate
    hulls (all generators equal) skip the outer loop.
    """
    if r < 1:
        raise ValidationError("level budget r must be >= 1")
    opt = opt or OptimizerSpec()
    hull = ConstraintHull.from_prior(prior)
    n = hull.n_generators
    spread = float(np.max(np.abs(hull.generators - hull.generators[0])))
    degenerate = spread < 1e-14

    def inner(d, start_idx):
        results = {}
        for order in ("lambda_first", "path_first"):
            rng = spawn_rng(opt.seed, start_idx, 0 if order == "lambda_first" else 1)
            results[order] = _inner_minimize(model, prior, d, r, spec, opt, rng, order)
        best_order = min(results, key=lambda k: results[k][0])
        return results[best_order], {k: v[0] for k, v in results.items()}

    def inner_value(w, start_idx):
        d = hull.combine(project_simplex(w))
        (value, _, _), _ = inner(d, start_idx)
        return value

    best = None
    n_starts = 1 if degenerate else opt.multistarts
    for start in range(n_starts):
        rng = spawn_rng(opt.seed, 1000 + start)
        w = np.full(n, 1.0 / n) if start == 0 else project_simplex(rng.dirichlet(np.ones(n)))
        if degenerate:
            w = np.full(n, 1.0 / n)
        else:
            step = opt.outer_step
            value = inner_value(w, start)
            for _ in range(opt.outer_iters):
                grad = np.zeros(n)
                h = 1e-3
                for j in range(n):
                    wp = project_simplex(w + h * np.eye(n)[j])
                    wm = project_simplex(w - h * np.eye(n)[j])
                    denom = float(np.max(np.abs(wp - wm)))
                    if denom == 0.0:
                        continue
                    grad[j] = (inner_value(wp, start) - inner_value(wm, start)) / (2 * h)
                if float(np.max(np.abs(grad))) < 1e-10:
                    break
                w_new = project_simplex(w + step * grad)
                v_new = inner_value(w_new, start)
                if v_new > value + 1e-12:
                    w, value = w_new, v_new
                else:
                    step *= 0.5
                    if step < 1e-4:
                        break
        d = hull.combine(w)
        (value, lam, path), orderings = inner(d, start)
        if best is None or value > best[0]:
            best = (value, d, lam, path, w, orderings)
    value, d, lam, path, w, orderings = best
    return OptimizeResult(value, d, lam, path, w, True, orderings)
