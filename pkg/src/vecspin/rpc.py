"""Hierarchical random weights and tree-indexed Gaussian fields.

This module is the simulation oracle for the recursion in ``parisi``: the
same quantities are reachable as averages over a random hierarchy of
weights, with no nested integration at all.

The hierarchy is a depth-r tree.  Each node at depth j hands its children
the top arrivals of a Poisson process on (0, inf) with intensity
x_j t^(-1-x_j) dt, 0 < x_j < 1; a leaf's raw weight is the product of
arrivals along its root path, normalized over all kept leaves.  The
arrivals are generated exactly, largest first, by mapping the cumulative
sums of unit exponentials e_1 < e_2 < ... to e_i^(-1/x_j), and the tree is
truncated to a finite fanout (bias shrinks as the fanout grows; report at
fanout and 2*fanout to see it).

Gaussian fields live on the same tree: each node at depth j carries an
independent increment with the level-j covariance, and a leaf value is the
sum along its path, which realizes covariances that depend on two leaves
only through their common-ancestor depth.

Boundary x values cannot be simulated directly, so functional estimators
split the levels: leading x = 0 levels are drawn once per replication
(their field is shared by every leaf), and trailing x = 1 levels are
integrated in closed form into the leaf integrand (a Gaussian moment
identity).  Interior levels with equal x are merged first; the recursion
collapses them exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mixing import MixedModel, sum_all, theta_matrix
from .parisi import (
    X_TINY,
    Path,
    _inner_scores,
    _logsumexp_rows,
    _psd_factor,
    increments,
    lambda_validate,
)
from .prior import SpinPrior
from .rng import parallel_map, spawn_rng

#: Above this, an x value is folded analytically as x = 1.
X_NEAR_ONE = 1.0 - 1e-9


@dataclass(frozen=True)
class CascadeTree:
    """Truncated weight hierarchy for a strictly interior x sequence."""

    x: np.ndarray
    fanout: int
    log_weights: np.ndarray  # normalized leaf log-weights, length fanout**depth

    @property
    def depth(self) -> int:
        return self.x.size

    @property
    def n_leaves(self) -> int:
        return self.log_weights.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def leaf_coordinates(self, leaf: int) -> tuple[int, ...]:
        """Digits of the leaf index, one child index per depth."""
        digits = []
        for _ in range(self.depth):
            leaf, d = divmod(leaf, self.fanout)
            digits.append(d)
        return tuple(reversed(digits))


def ancestor_depth(alpha1, alpha2) -> int:
    """Number of leading coordinates two leaves share; depth r iff equal."""
    a1 = tuple(alpha1)
    a2 = tuple(alpha2)
    if len(a1) != len(a2):
        raise ValidationError("leaf coordinates must have equal length")
    depth = 0
    for c1, c2 in zip(a1, a2):
        if c1 != c2:
            break
        depth += 1
    return depth


def _validate_cascade_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 1:
        raise ValidationError("the cascade needs at least one level")
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValidationError("cascade parameters must lie strictly in (0, 1)")
    if np.any(np.diff(x) <= 0):
        raise ValidationError("cascade parameters must be strictly increasing")
    return x


def sample_cascade(x, fanout: int, seed) -> CascadeTree:
    """Sample the truncated weight tree for parameters ``x``.

    ``seed`` may be an integer or a numpy Generator.  Identical seeds give
    identical trees.
    """
    x = _validate_cascade_x(x)
    if fanout < 2:
        raise ValidationError("fanout must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else spawn_rng(int(seed))
    logw = np.zeros(1)
    for zeta in x:
        parents = logw.size
        arrivals = rng.exponential(size=(parents, fanout)).cumsum(axis=1)
        child_log = -np.log(arrivals) / zeta
        logw = (logw[:, None] + child_log).reshape(-1)
    logw = logw - _logsumexp_rows(logw[None, :])[0]
    return CascadeTree(x, int(fanout), logw)


@dataclass(frozen=True)
class TreeGaussianField:
    """Leaf sums of per-node Gaussian increments on a cascade tree.

    ``z`` is (n_leaves, kappa) and ``y`` is (n_leaves,); ``node_z`` and
    ``node_y`` keep the raw per-depth increments for covariance checks.
    """

    tree: CascadeTree
    z: np.ndarray
    y: np.ndarray
    node_z: list
    node_y: list


def _y_increments(model: MixedModel, path: Path) -> np.ndarray:
    """Variance increments Sum(theta(gamma_j)) - Sum(theta(gamma_{j-1}))."""
    sums = np.array(
        [sum_all(theta_matrix(model, g)) for g in path.gammas_full()]
    )
    diffs = np.diff(sums)
    if np.any(diffs < -1e-10):
        raise ValidationError("theta sums decrease along the path")
    return np.clip(diffs, 0.0, None)


def _sample_tree_fields(fanout, z_factors, y_vars, rng):
    """Per-depth increments and their leaf accumulations."""
    kappa = z_factors[0].shape[0] if z_factors else 0
    node_z, node_y = [], []
    z = np.zeros((1, kappa))
    y = np.zeros(1)
    nodes = 1
    for f, var in zip(z_factors, y_vars):
        nodes *= fanout
        inc_z = rng.standard_normal((nodes, f.shape[1])) @ f.T
        inc_y = math.sqrt(var) * rng.standard_normal(nodes)
        node_z.append(inc_z)
        node_y.append(inc_y)
        z = np.repeat(z, fanout, axis=0) + inc_z
        y = np.repeat(y, fanout) + inc_y
    return node_z, node_y, z, y


def sample_fields(tree: CascadeTree, model: MixedModel, path: Path,
                  seed) -> TreeGaussianField:
    """Sample the vector and scalar fields whose leaf covariances are
    xi'(gamma) and Sum(theta(gamma)) at the common-ancestor level.

    The tree depth must match the path level count.
    """
    if tree.depth != path.r:
        raise ValidationError("tree depth and path level count differ")
    rng = seed if isinstance(seed, np.random.Generator) else spawn_rng(int(seed))
    z_factors = [_psd_factor(c) for c in increments(model, path)]
    y_vars = _y_increments(model, path)
    node_z, node_y, z, y = _sample_tree_fields(tree.fanout, z_factors, y_vars, rng)
    return TreeGaussianField(tree, z, y, node_z, node_y)


# ---------------------------------------------------------------------------
# level splitting shared by the functional estimators


@dataclass(frozen=True)
class _SplitLevels:
    lead_z: np.ndarray  # summed covariance of the x = 0 levels
    lead_y: float
    core_x: np.ndarray
    core_z: list  # per-level covariances
    core_y: np.ndarray
    trail_z: np.ndarray  # summed covariance of the x = 1 levels
    trail_y: float


def _split_levels(model: MixedModel, path: Path) -> _SplitLevels:
    covs = increments(model, path)
    yv = _y_increments(model, path)
    kappa = path.kappa
    lead_z = np.zeros((kappa, kappa))
    trail_z = np.zeros((kappa, kappa))
    lead_y = trail_y = 0.0
    core_x, core_z, core_y = [], [], []
    for xj, cz, cy in zip(path.x, covs, yv):
        if xj < X_TINY:
            lead_z += cz
            lead_y += cy
        elif xj > X_NEAR_ONE:
            trail_z += cz
            trail_y += cy
        elif core_x and abs(core_x[-1] - xj) < 1e-12:
            core_z[-1] = core_z[-1] + cz
            core_y[-1] = core_y[-1] + cy
        else:
            core_x.append(float(xj))
            core_z.append(cz)
            core_y.append(cy)
    return _SplitLevels(
        lead_z, lead_y, np.array(core_x), core_z, np.array(core_y),
        trail_z, trail_y,
    )


def _quad_bonus(prior: SpinPrior, cov: np.ndarray) -> np.ndarray | None:
    """Per-atom bonus (1/2) sigma^T cov sigma from analytically folded levels."""
    if not np.any(cov):
        return None
    return 0.5 * np.einsum("ak,kl,al->a", prior.points, cov, prior.points)


def simulate_phi(model: MixedModel, prior: SpinPrior, lam, path: Path,
                 fanout: int = 128, replications: int = 200, seed: int = 0,
                 threads: int = 1, external_field=None) -> tuple[float, float]:
    """Cascade estimate of the recursion value; returns (value, std_error).

    Each replication samples the weight tree and the vector field, and
    evaluates log sum_leaves v_leaf exp(inner integrand).  Leading x = 0
    levels become a shared field draw; trailing x = 1 levels fold into the
    integrand exactly.
    """
    if prior.kappa != path.kappa:
        raise ValidationError("prior and path disagree on kappa")
    lam = lambda_validate(lam, prior.kappa)
    if replications < 1:
        raise ValidationError("replications must be >= 1")
    split = _split_levels(model, path)
    lead_f = _psd_factor(split.lead_z)
    core_f = [_psd_factor(c) for c in split.core_z]
    bonus = _quad_bonus(prior, split.trail_z)

    def one(rep: int) -> float:
        rng = spawn_rng(seed, rep)
        z0 = rng.standard_normal(lead_f.shape[1]) @ lead_f.T
        if split.core_x.size:
            tree = sample_cascade(split.core_x, fanout, rng)
            _, _, z_leaf, _ = _sample_tree_fields(fanout, core_f, np.zeros(len(core_f)), rng)
            z = z0[None, :] + z_leaf
            logw = tree.log_weights
        else:
            z = z0[None, :]
            logw = np.zeros(1)
        scores = _inner_scores(prior, lam, z, external_field, bonus)
        vals = _logsumexp_rows(scores)
        return float(_logsumexp_rows((logw + vals)[None, :])[0])

    vals = np.array(parallel_map(one, replications, threads))
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def y_functional_closed_form(model: MixedModel, path: Path) -> float:
    """(1/2) sum_j x_j Sum(theta(gamma_{j+1}) - theta(gamma_j))."""
    return 0.5 * float(np.sum(path.x * _y_increments(model, path)))


def simulate_y_functional(model: MixedModel, path: Path, m_sites: int,
                          fanout: int = 128, replications: int = 200,
                          seed: int = 0, threads: int = 1) -> tuple[float, float]:
    """Estimate (1/M) E log sum_leaves v exp(sqrt(M) Y) on the cascade.

    The closed form is ``y_functional_closed_form``; the identity holds for
    every M on the untruncated tree, so the deviation measures truncation
    bias plus sampling noise.
    """
    if m_sites <= 0:
        raise ValidationError("m_sites must be positive")
    split = _split_levels(model, path)
    root_m = math.sqrt(m_sites)
    trail_term = 0.5 * split.trail_y

    def one(rep: int) -> float:
        rng = spawn_rng(seed, rep)
        y0 = math.sqrt(split.lead_y) * rng.standard_normal() if split.lead_y > 0 else 0.0
        if split.core_x.size:
            tree = sample_cascade(split.core_x, fanout, rng)
            zero_f = [np.zeros((path.kappa, 0))] * len(split.core_y)
            _, _, _, y_leaf = _sample_tree_fields(fanout, zero_f, split.core_y, rng)
            inner = float(_logsumexp_rows((tree.log_weights + root_m * y_leaf)[None, :])[0])
        else:
            inner = 0.0
        return (root_m * y0 + inner) / m_sites + trail_term

    vals = np.array(parallel_map(one, replications, threads))
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


@dataclass(frozen=True)
class SplitCheckResult:
    lhs: float
    lhs_std_error: float
    rhs: float
    rhs_std_error: float
    log_n_over_x0: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 3.0 * (self.lhs_std_error + self.rhs_std_error)


def log_sum_split_check(model: MixedModel, path: Path, parts,
                        fanout: int = 128, replications: int = 200,
                        seed: int = 0, threads: int = 1) -> SplitCheckResult:
    """Estimate both sides of the cascade log-sum split bound.

    lhs = E log sum_a v_a sum_j A_j(a) and
    rhs = log(n)/x_0 + max_j E log sum_a v_a A_j(a),
    for positive leaf functionals ``parts`` (callables on a
    TreeGaussianField returning one positive value per leaf).  Expectations
    need replication, so the estimator takes the sampling parameters and
    draws its own trees.  All path x values must be strictly interior.
    """
    x = _validate_cascade_x(path.x)
    n_parts = len(parts)
    if n_parts < 1:
        raise ValidationError("at least one part is required")

    def one(rep: int):
        rng = spawn_rng(seed, rep)
        tree = sample_cascade(x, fanout, rng)
        fields = sample_fields(tree, model, path, rng)
        logw = tree.log_weights
        vals = np.array([np.asarray(p(fields), dtype=float) for p in parts])
        if np.any(vals <= 0):
            raise ValidationError("parts must be positive on every leaf")
        lhs = _logsumexp_rows((logw + np.log(vals.sum(axis=0)))[None, :])[0]
        per = [_logsumexp_rows((logw + np.log(v))[None, :])[0] for v in vals]
        return float(lhs), per

    results = parallel_map(one, replications, threads)
    lhs_vals = np.array([r[0] for r in results])
    per_vals = np.array([r[1] for r in results])  # (reps, n_parts)
    lhs = float(lhs_vals.mean())
    lhs_se = float(lhs_vals.std(ddof=1) / math.sqrt(len(lhs_vals))) if len(lhs_vals) > 1 else 0.0
    means = per_vals.mean(axis=0)
    best = int(np.argmax(means))
    corr = math.log(n_parts) / float(x[0])
    best_se = float(per_vals[:, best].std(ddof=1) / math.sqrt(per_vals.shape[0])) if per_vals.shape[0] > 1 else 0.0
    return SplitCheckResult(lhs, lhs_se, corr + float(means[best]), best_se, corr)
