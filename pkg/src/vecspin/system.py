"""Finite-size systems: Hamiltonians, exact free energies, perturbations.

Everything here is desk scale and exact where it can be.  Disorder is a set
of i.i.d. standard Gaussian coupling tensors, one per interaction degree p,
shared across the spin coordinates (that sharing is what produces the
cross-coordinate covariances).  Partition sums enumerate atom
configurations outright instead of sampling them, so Gibbs averages per
disorder draw carry no sampler bias; only the disorder average is Monte
Carlo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, InfeasibleError, ValidationError
from .mixing import MixedModel
from .prior import SpinPrior, build_modifier, self_overlap
from .rng import parallel_map, spawn_rng

DEFAULT_BUDGET = 10**7


# ---------------------------------------------------------------------------
# disorder and the Hamiltonian


@dataclass(frozen=True)
class DisorderSample:
    """Realized couplings g per degree p, each an (N,)*p tensor."""

    seed: int
    n_sites: int
    couplings: dict[int, np.ndarray]


def sample_disorder(model: MixedModel, n_sites: int, seed: int,
                    budget: int = DEFAULT_BUDGET) -> DisorderSample:
    if n_sites < 1:
        raise ValidationError("n_sites must be >= 1")
    couplings = {}
    for p in model.p_values:
        if n_sites**p > budget:
            raise BudgetError(
                f"coupling tensor for p={p} needs {n_sites**p} entries, over budget"
            )
        rng = spawn_rng(seed, p)
        couplings[p] = rng.standard_normal((n_sites,) * p)
    return DisorderSample(seed, n_sites, couplings)


def _as_config(config) -> np.ndarray:
    config = np.asarray(config, dtype=float)
    if config.ndim == 1:
        config = config[:, None]
    if config.ndim != 2:
        raise ValidationError("a configuration is an (N, kappa) array")
    return config


def _contract_all(tensor: np.ndarray, vec: np.ndarray) -> float:
    t = tensor
    for _ in range(tensor.ndim):
        t = np.tensordot(t, vec, axes=([-1], [0]))
    return float(t)


def hamiltonian(model: MixedModel, config, disorder: DisorderSample) -> float:
    """H(sigma) = sum_k sum_p beta_p(k) N^{-(p-1)/2} <g_p, sigma(k)^{tensor p}>.

    All index tuples are summed, diagonals included.
    """
    config = _as_config(config)
    n = config.shape[0]
    if n != disorder.n_sites:
        raise ValidationError("configuration size does not match the disorder")
    total = 0.0
    for p, beta in model.coefficients.items():
        g = disorder.couplings[p]
        scale = n ** (-(p - 1) / 2.0)
        for k in range(model.kappa):
            if beta[k] == 0.0:
                continue
            total += beta[k] * scale * _contract_all(g, config[:, k])
    return total


def hamiltonian_batch(model: MixedModel, configs, disorder: DisorderSample) -> np.ndarray:
    """Vectorized Hamiltonian over configs of shape (n_cfg, N, kappa)."""
    configs = np.asarray(configs, dtype=float)
    n_cfg, n, kappa = configs.shape
    out = np.zeros(n_cfg)
    for p, beta in model.coefficients.items():
        g = disorder.couplings[p]
        scale = n ** (-(p - 1) / 2.0)
        for k in range(kappa):
            if beta[k] == 0.0:
                continue
            v = configs[:, :, k]
            if p == 2:
                vals = np.einsum("ai,ij,aj->a", v, g, v)
            else:
                t = np.tensordot(g, v, axes=([p - 1], [1]))  # (N,)* (p-1) + (n_cfg,)
                for _ in range(p - 1):
                    t = np.einsum("i...a,ai->...a", t, v)
                vals = t
            out += beta[k] * scale * vals
    return out


def _hamiltonian_coefficients(model: MixedModel, config: np.ndarray) -> np.ndarray:
    """Flattened coefficients of H(sigma) as a linear form in the couplings."""
    n = config.shape[0]
    parts = []
    for p, beta in sorted(model.coefficients.items()):
        scale = n ** (-(p - 1) / 2.0)
        t = np.zeros((n,) * p)
        for k in range(model.kappa):
            if beta[k] == 0.0:
                continue
            o = np.array(1.0)
            for _ in range(p):
                o = np.multiply.outer(o, config[:, k])
            t += beta[k] * o
        parts.append(scale * t.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _linear_covariance_mc(coeff_a: np.ndarray, coeff_b: np.ndarray,
                          n_disorder: int, seed: int,
                          chunk: int = 20000) -> tuple[float, float]:
    """Empirical covariance of two linear Gaussian forms over fresh draws."""
    ha = np.empty(n_disorder)
    hb = np.empty(n_disorder)
    done = 0
    block = 0
    while done < n_disorder:
        take = min(chunk, n_disorder - done)
        g = spawn_rng(seed, block).standard_normal((take, coeff_a.size))
        ha[done:done + take] = g @ coeff_a
        hb[done:done + take] = g @ coeff_b
        done += take
        block += 1
    prod = (ha - ha.mean()) * (hb - hb.mean())
    cov = float(prod.mean())
    se = float(prod.std(ddof=1) / math.sqrt(n_disorder))
    return cov, se


def hamiltonian_covariance_mc(model: MixedModel, config_a, config_b,
                              n_disorder: int, seed: int) -> tuple[float, float]:
    """Monte Carlo Cov(H(sigma^1), H(sigma^2)) over disorder, with its s.e.

    Independent oracle for N * Sum(xi(R_12)); the Hamiltonian is linear in
    the couplings, so each draw is a dot product.
    """
    a = _as_config(config_a)
    b = _as_config(config_b)
    return _linear_covariance_mc(
        _hamiltonian_coefficients(model, a),
        _hamiltonian_coefficients(model, b),
        n_disorder, seed,
    )


def _perturbation_coefficients(term: "PerturbationTerm",
                               config: np.ndarray) -> np.ndarray:
    n = config.shape[0]
    t = np.array(1.0)
    for n_j, lam in zip(term.ns, term.lambdas):
        u = _direction_tensor(term, config, lam)
        for _ in range(n_j):
            t = np.multiply.outer(t, u)
    return t.ravel() * n ** (-term.p * term.total_n / 2.0)


def perturbation_covariance_mc(term: "PerturbationTerm", config_a, config_b,
                               n_disorder: int, seed: int) -> tuple[float, float]:
    """Monte Carlo Cov(h_term(sigma^1), h_term(sigma^2)) with its s.e.

    Independent oracle for ``term.covariance`` of the cross overlap.
    """
    a = _as_config(config_a)
    b = _as_config(config_b)
    return _linear_covariance_mc(
        _perturbation_coefficients(term, a),
        _perturbation_coefficients(term, b),
        n_disorder, seed,
    )


# ---------------------------------------------------------------------------
# exact free energies


def enumerate_configs(prior: SpinPrior, n_sites: int,
                      budget: int = DEFAULT_BUDGET):
    """All atom configurations in lexicographic order, with log prior masses."""
    n_cfg = prior.n_atoms**n_sites
    if n_cfg > budget:
        raise BudgetError(
            f"{n_cfg} configurations exceed the enumeration budget {budget}; "
            "use a sampling estimator instead"
        )
    idx = np.stack(
        np.meshgrid(*([np.arange(prior.n_atoms)] * n_sites), indexing="ij"),
        axis=-1,
    ).reshape(-1, n_sites)
    configs = prior.points[idx]  # (n_cfg, N, kappa)
    logw = np.log(prior.weights)[idx].sum(axis=1)
    return configs, logw


def _logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + math.log(float(np.sum(np.exp(a - m))))


@dataclass(frozen=True)
class FreeEnergyResult:
    value: float
    std_error: float
    per_draw: np.ndarray
    hit_fraction: float = 1.0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n_disorder": int(self.per_draw.size),
            "hit_fraction": self.hit_fraction,
        }


def exact_free_energy(model: MixedModel, prior: SpinPrior, n_sites: int,
                      n_disorder: int, seed: int, threads: int = 1,
                      budget: int = DEFAULT_BUDGET) -> FreeEnergyResult:
    """(1/N) E log sum_configs w(sigma) exp H(sigma), exact per draw."""
    configs, logw = enumerate_configs(prior, n_sites, budget)

    def one(draw: int) -> float:
        dis = sample_disorder(model, n_sites, spawn_rng(seed, draw).integers(2**63))
        h = hamiltonian_batch(model, configs, dis)
        return _logsumexp(logw + h) / n_sites

    per_draw = np.array(parallel_map(one, n_disorder, threads))
    se = float(per_draw.std(ddof=1) / math.sqrt(n_disorder)) if n_disorder > 1 else 0.0
    return FreeEnergyResult(float(per_draw.mean()), se, per_draw)


def constrained_free_energy(model: MixedModel, prior: SpinPrior, n_sites: int,
                            d, eps: float, n_disorder: int, seed: int,
                            threads: int = 1,
                            budget: int = DEFAULT_BUDGET) -> FreeEnergyResult:
    """Free energy restricted to self-overlaps within eps of ``d`` in sup norm.

    ``hit_fraction`` is the prior mass the constraint retains.
    """
    d = np.asarray(d, dtype=float)
    configs, logw = enumerate_configs(prior, n_sites, budget)
    overlaps = np.einsum("aik,ail->akl", configs, configs) / n_sites
    mask = np.max(np.abs(overlaps - d), axis=(1, 2)) < eps
    if not np.any(mask):
        raise InfeasibleError(
            f"no configuration of {n_sites} sites has self-overlap within "
            f"{eps:g} of the target; the constraint set is empty"
        )
    total_mass = _logsumexp(logw)
    hit = math.exp(_logsumexp(logw[mask]) - total_mass)
    configs = configs[mask]
    logw_kept = logw[mask]

    def one(draw: int) -> float:
        dis = sample_disorder(model, n_sites, spawn_rng(seed, draw).integers(2**63))
        h = hamiltonian_batch(model, configs, dis)
        return _logsumexp(logw_kept + h) / n_sites

    per_draw = np.array(parallel_map(one, n_disorder, threads))
    se = float(per_draw.std(ddof=1) / math.sqrt(n_disorder)) if n_disorder > 1 else 0.0
    return FreeEnergyResult(float(per_draw.mean()), se, per_draw, hit)


# ---------------------------------------------------------------------------
# the perturbation family


@dataclass(frozen=True)
class PerturbationTerm:
    """One interaction pattern: degree p, repetition counts, direction vectors.

    ``lambdas`` is (m, kappa) with entries in [-1, 1]; ``ns`` gives how many
    index blocks each direction receives.
    """

    p: int
    ns: tuple[int, ...]
    lambdas: np.ndarray

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError("perturbation degree p must be >= 1")
        ns = tuple(int(n) for n in self.ns)
        if len(ns) < 1 or any(n < 1 for n in ns):
            raise ValidationError("repetition counts must be positive")
        lam = np.atleast_2d(np.asarray(self.lambdas, dtype=float))
        if lam.shape[0] != len(ns):
            raise ValidationError("one direction vector per repetition count")
        if np.any(np.abs(lam) > 1.0):
            raise ValidationError("direction entries must lie in [-1, 1]")
        lam = lam.copy()
        lam.flags.writeable = False
        object.__setattr__(self, "ns", ns)
        object.__setattr__(self, "lambdas", lam)

    @property
    def m(self) -> int:
        return len(self.ns)

    @property
    def total_n(self) -> int:
        return sum(self.ns)

    def covariance(self, overlap_matrix) -> float:
        """prod_j (overlap^{hadamard p} lambda_j, lambda_j)^{n_j}."""
        rp = np.asarray(overlap_matrix, dtype=float) ** self.p
        out = 1.0
        for n_j, lam in zip(self.ns, self.lambdas):
            out *= float(lam @ rp @ lam) ** n_j
        return out


@dataclass(frozen=True)
class PerturbationSpec:
    """Finite family of terms with fixed mixing scalars u in [1, 2].

    ``strength_exponent`` sets s_N = N^exponent; the spectral weights
    2^{-j(theta)} b_p^{-sum n} keep the conditional variance below one.
    The direction-vector injection behind j(theta) enumerates distinct
    vectors in order of first appearance.
    """

    terms: tuple[PerturbationTerm, ...] = ()
    u: tuple[float, ...] = ()
    strength_exponent: float = 0.45

    def __post_init__(self):
        terms = tuple(self.terms)
        u = tuple(float(v) for v in self.u)
        if len(u) != len(terms):
            raise ValidationError("one u scalar per term required")
        if any(not (1.0 <= v <= 2.0) for v in u):
            raise ValidationError("u scalars must lie in [1, 2]")
        if not (0.25 < self.strength_exponent < 0.5):
            raise ValidationError("strength exponent must lie in (1/4, 1/2)")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "u", u)

    def _lambda_injection(self) -> dict[bytes, int]:
        seen: dict[bytes, int] = {}
        for term in self.terms:
            for lam in term.lambdas:
                key = lam.tobytes()
                if key not in seen:
                    seen[key] = len(seen) + 1
        return seen

    def term_weight(self, index: int, support_bound: float) -> float:
        """2^{-j(theta)} b_p^{-sum n} u_theta for the term at ``index``."""
        if support_bound <= 0:
            raise ValidationError("the prior support bound must be positive")
        term = self.terms[index]
        inj = self._lambda_injection()
        j = term.p + term.total_n + 22 * term.m
        j += sum(inj[lam.tobytes()] for lam in term.lambdas)
        b_p = term.lambdas.shape[1] * support_bound**term.p
        return 2.0**-j * b_p**-term.total_n * self.u[index]

    def strength(self, n_sites: int) -> float:
        return float(n_sites) ** self.strength_exponent


def sample_perturbation_disorder(term: PerturbationTerm, n_sites: int, seed: int,
                                 budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Gaussian tensor over the combined index blocks of one term."""
    size = n_sites ** (term.p * term.total_n)
    if size > budget:
        raise BudgetError(
            f"perturbation tensor needs {size} entries, over budget {budget}"
        )
    return spawn_rng(seed).standard_normal(size)


def _direction_tensor(term: PerturbationTerm, config: np.ndarray,
                      lam: np.ndarray) -> np.ndarray:
    """Flattened S_lambda values over one index block e in {1..N}^p."""
    n = config.shape[0]
    out = np.zeros((n,) * term.p)
    for k in range(config.shape[1]):
        if lam[k] == 0.0:
            continue
        t = np.array(1.0)
        for _ in range(term.p):
            t = np.multiply.outer(t, config[:, k])
        out += lam[k] * t
    return out.ravel()


def perturbation_h_theta(term: PerturbationTerm, config,
                         disorder_theta: np.ndarray) -> float:
    """Exact contraction of one perturbation term with its couplings."""
    config = _as_config(config)
    n = config.shape[0]
    block = n**term.p
    total = term.total_n
    expected = block**total
    if disorder_theta.size != expected:
        raise ValidationError(
            f"disorder tensor has {disorder_theta.size} entries, expected {expected}"
        )
    vectors = []
    for n_j, lam in zip(term.ns, term.lambdas):
        u = _direction_tensor(term, config, lam)
        vectors.extend([u] * n_j)
    t = disorder_theta.reshape((block,) * total)
    for u in reversed(vectors):
        t = np.tensordot(t, u, axes=([-1], [0]))
    return float(t) * n ** (-term.p * total / 2.0)


def perturbation_h(spec: PerturbationSpec, prior: SpinPrior, config,
                   disorders: list[np.ndarray]) -> float:
    """Weighted sum of the family's terms; zero for an empty family."""
    if len(disorders) != len(spec.terms):
        raise ValidationError("one disorder tensor per term required")
    total = 0.0
    c = prior.support_bound
    for i, term in enumerate(spec.terms):
        total += spec.term_weight(i, c) * perturbation_h_theta(term, config, disorders[i])
    return total


def perturbation_variance_check(spec: PerturbationSpec, prior: SpinPrior,
                                config, n_draws: int, seed: int) -> tuple[float, float]:
    """Empirical Var h(sigma) over disorder; raises if it exceeds 1 + 3 s.e."""
    config = _as_config(config)
    n = config.shape[0]
    vals = np.empty(n_draws)
    for draw in range(n_draws):
        ds = [
            sample_perturbation_disorder(t, n, int(spawn_rng(seed, draw, i).integers(2**63)))
            for i, t in enumerate(spec.terms)
        ]
        vals[draw] = perturbation_h(spec, prior, config, ds)
    var = float(vals.var(ddof=1)) if n_draws > 1 else 0.0
    se = var * math.sqrt(2.0 / max(n_draws - 1, 1))
    if var > 1.0 + 3.0 * se:
        raise ValidationError(
            f"perturbation variance {var:.3g} exceeds 1 + 3 s.e. = {1 + 3 * se:.3g}"
        )
    return var, se


# ---------------------------------------------------------------------------
# identity discrepancy for the perturbed constrained Gibbs measure


@dataclass(frozen=True)
class GGResult:
    delta: float
    std_error: float
    components: dict

    def to_dict(self) -> dict:
        return {"delta": self.delta, "std_error": self.std_error,
                "components": self.components}


def _modified_configs(configs: np.ndarray, d: np.ndarray, eps: float) -> np.ndarray:
    """Apply the overlap-fixing modifier to every configuration.

    The modifier depends on a configuration only through its self-overlap,
    so equal overlaps share one matrix.
    """
    out = np.empty_like(configs)
    cache: dict[bytes, np.ndarray] = {}
    n = configs.shape[1]
    for i in range(configs.shape[0]):
        r = self_overlap(configs[i])
        key = r.tobytes()
        a = cache.get(key)
        if a is None:
            a = build_modifier(r, d, eps).a
            cache[key] = a
        out[i] = configs[i] @ a.T
    return out


def gg_discrepancy(model: MixedModel, prior: SpinPrior, spec: PerturbationSpec,
                   n_sites: int, d, eps: float, n_replicas: int, f,
                   term: PerturbationTerm, n_disorder: int, seed: int,
                   threads: int = 1, budget: int = DEFAULT_BUDGET) -> GGResult:
    """Discrepancy of the replica identity for one covariance pattern.

    Replicas come from the Gibbs measure with Hamiltonian
    H + s_N h(modified sigma) restricted to self-overlaps within eps of
    ``d``; averages over replicas are exact enumerations per disorder draw,
    and only the disorder (and nothing else) is sampled.  ``f`` must be a
    vectorized functional of the (n, n, kappa, kappa) modified-overlap
    array.  Estimates

        | E<f C_{1,n+1}> - (1/n) E<f> E<C_{1,2}>
          - (1/n) sum_{l=2..n} E<f C_{1,l}> |

    with a delta-method standard error across draws.
    """
    if n_replicas < 2:
        raise ValidationError("the identity needs n >= 2 replicas")
    d = np.asarray(d, dtype=float)
    configs, logw = enumerate_configs(prior, n_sites, budget)
    overlaps = np.einsum("aik,ail->akl", configs, configs) / n_sites
    mask = np.max(np.abs(overlaps - d), axis=(1, 2)) < eps
    if not np.any(mask):
        raise InfeasibleError("the constrained configuration set is empty")
    configs = configs[mask]
    logw = logw[mask]
    n_cfg = configs.shape[0]
    if n_cfg**n_replicas * n_replicas**2 > budget:
        raise BudgetError(
            f"{n_cfg}^{n_replicas} replica tuples exceed the budget; "
            "reduce n_sites or n_replicas"
        )
    modified = _modified_configs(configs, d, eps)
    pair_overlap = np.einsum("aik,bil->abkl", modified, modified) / n_sites
    c_matrix = np.ones((n_cfg, n_cfg))
    rp = pair_overlap**term.p
    for n_j, lam in zip(term.ns, term.lambdas):
        c_matrix *= np.einsum("abkl,k,l->ab", rp, lam, lam) ** n_j

    # f evaluated once on the full tuple grid (draw independent)
    shape = (n_cfg,) * n_replicas
    rn = np.empty(shape + (n_replicas, n_replicas) + pair_overlap.shape[2:])
    ar = np.arange(n_cfg)
    for i in range(n_replicas):
        gi = ar.reshape((1,) * i + (n_cfg,) + (1,) * (n_replicas - 1 - i))
        for j in range(n_replicas):
            gj = ar.reshape((1,) * j + (n_cfg,) + (1,) * (n_replicas - 1 - j))
            rn[..., i, j, :, :] = pair_overlap[gi, gj]
    f_vals = np.asarray(f(rn), dtype=float)
    if f_vals.shape != shape:
        raise ValidationError(
            f"functional must map the tuple grid to shape {shape}, got {f_vals.shape}"
        )

    s_n = spec.strength(n_sites)
    letters = "abcdefgh"[:n_replicas]

    def contract(tensor, weights_by_axis):
        sub = letters + "," + ",".join(letters[i] for i in range(n_replicas))
        return float(np.einsum(sub + "->", tensor, *weights_by_axis))

    def one(draw: int):
        dis = sample_disorder(model, n_sites, int(spawn_rng(seed, draw, 0).integers(2**63)))
        h = hamiltonian_batch(model, configs, dis)
        if spec.terms:
            ds = [
                sample_perturbation_disorder(
                    t, n_sites, int(spawn_rng(seed, draw, 1 + i).integers(2**63))
                )
                for i, t in enumerate(spec.terms)
            ]
            h = h + s_n * np.array(
                [perturbation_h(spec, prior, modified[i], ds) for i in range(n_cfg)]
            )
        logits = logw + h
        probs = np.exp(logits - _logsumexp(logits))
        cbar = c_matrix @ probs
        t1 = contract(f_vals, [probs * cbar] + [probs] * (n_replicas - 1))
        af = contract(f_vals, [probs] * n_replicas)
        bc = float(probs @ c_matrix @ probs)
        t3 = []
        for ell in range(1, n_replicas):
            sub_in = [letters] + [letters[i] for i in range(n_replicas)]
            sub = f"{letters},{letters[0]}{letters[ell]}," + ",".join(
                letters[i] for i in range(n_replicas)
            )
            t3.append(float(np.einsum(sub + "->", f_vals, c_matrix,
                                      *([probs] * n_replicas))))
        return t1, af, bc, t3

    rows = parallel_map(one, n_disorder, threads)
    t1 = np.array([r[0] for r in rows])
    af = np.array([r[1] for r in rows])
    bc = np.array([r[2] for r in rows])
    t3 = np.array([r[3] for r in rows])  # (draws, n-1)
    n_inv = 1.0 / n_replicas
    inner = t1.mean() - n_inv * af.mean() * bc.mean() - n_inv * t3.mean(axis=0).sum()
    delta = abs(float(inner))
    if n_disorder > 1:
        stacked = np.column_stack([t1, af, bc, t3])
        grad = np.concatenate(
            [[1.0, -n_inv * bc.mean(), -n_inv * af.mean()],
             np.full(t3.shape[1], -n_inv)]
        )
        cov = np.cov(stacked, rowvar=False)
        se = float(np.sqrt(max(grad @ np.atleast_2d(cov) @ grad, 0.0) / n_disorder))
    else:
        se = 0.0
    components = {
        "t1": float(t1.mean()),
        "f_mean": float(af.mean()),
        "c_mean": float(bc.mean()),
        "t3": [float(v) for v in t3.mean(axis=0)],
        "n_configs": int(n_cfg),
        "strength": s_n,
    }
    return GGResult(delta, se, components)
