import math

import numpy as np
import pytest

from vecspin import (
    BudgetError,
    DisorderSample,
    InfeasibleError,
    MixedModel,
    PerturbationSpec,
    PerturbationTerm,
    SpinPrior,
    ValidationError,
    constrained_free_energy,
    exact_free_energy,
    gg_discrepancy,
    hamiltonian,
    hamiltonian_covariance,
    hamiltonian_covariance_mc,
    ising_prior,
    overlap,
    perturbation_covariance_mc,
    perturbation_h,
    perturbation_h_theta,
    sample_disorder,
)
from vecspin.system import (
    enumerate_configs,
    hamiltonian_batch,
    perturbation_variance_check,
    sample_perturbation_disorder,
)
from vecspin.rng import spawn_rng

from conftest import random_model, random_prior

PROB_ISING = ising_prior(1, normalized=True)
COUNTING_ISING = ising_prior(1)


class TestHamiltonian:
    def test_single_site_p2(self):
        m = MixedModel(1, {2: [0.7]})
        dis = sample_disorder(m, 1, seed=1)
        g = float(dis.couplings[2][0, 0])
        for s in (-1.0, 1.0):
            assert hamiltonian(m, [[s]], dis) == pytest.approx(0.7 * g * s * s, abs=1e-15)

    def test_zero_couplings(self):
        m = MixedModel(1, {2: [0.5]})
        dis = DisorderSample(0, 3, {2: np.zeros((3, 3))})
        assert hamiltonian(m, [[1.0], [-1.0], [1.0]], dis) == 0.0

    def test_batch_matches_single(self):
        rng = spawn_rng(2)
        m = MixedModel(2, {2: [0.4, 0.2], 4: [0.1, 0.3]})
        dis = sample_disorder(m, 4, seed=3)
        configs = rng.choice([-1.0, 1.0], size=(10, 4, 2))
        batch = hamiltonian_batch(m, configs, dis)
        for i in range(10):
            assert batch[i] == pytest.approx(hamiltonian(m, configs[i], dis), abs=1e-12)

    def test_covariance_against_formula(self):
        m = MixedModel(2, {2: [0.4, 0.25], 4: [0.15, 0.1]})
        rng = spawn_rng(4)
        a = rng.choice([-1.0, 1.0], size=(3, 2))
        b = rng.choice([-1.0, 1.0], size=(3, 2))
        emp, se = hamiltonian_covariance_mc(m, a, b, 30000, seed=5)
        exact = 3 * hamiltonian_covariance(m, overlap(a, b))
        assert abs(emp - exact) <= 3.0 * se

    def test_equal_spins_pair_covariance(self):
        m = MixedModel(1, {2: [0.5]})
        a = np.ones((2, 1))
        emp, se = hamiltonian_covariance_mc(m, a, a, 30000, seed=6)
        assert abs(emp - 0.5) <= 3.0 * se


class TestExactFreeEnergy:
    def test_free_model_zero(self):
        m0 = MixedModel(1, {})
        res = exact_free_energy(m0, PROB_ISING, 3, 5, seed=7)
        assert res.value == pytest.approx(0.0, abs=1e-14)
        assert res.std_error == pytest.approx(0.0, abs=1e-14)

    def test_single_site_mean_zero(self):
        m = MixedModel(1, {2: [0.4]})
        res = exact_free_energy(m, PROB_ISING, 1, 400, seed=8)
        assert abs(res.value) <= 3.0 * res.std_error

    def test_brute_force_per_draw(self):
        m = MixedModel(1, {2: [0.3]})
        res = exact_free_energy(m, PROB_ISING, 2, 5, seed=13)
        for draw in range(5):
            dis = sample_disorder(m, 2, int(spawn_rng(13, draw).integers(2**63)))
            g = dis.couplings[2]
            z = 0.0
            for s1 in (-1.0, 1.0):
                for s2 in (-1.0, 1.0):
                    s = (s1, s2)
                    h = 0.3 * 2 ** (-0.5) * sum(
                        g[i, j] * s[i] * s[j] for i in range(2) for j in range(2)
                    )
                    z += 0.25 * math.exp(h)
            assert res.per_draw[draw] == pytest.approx(math.log(z) / 2, abs=1e-12)

    def test_enumeration_budget(self):
        with pytest.raises(BudgetError):
            enumerate_configs(PROB_ISING, 30)

    def test_concentration_trend(self):
        # per-draw spread of the free energy shrinks with the system size
        m = MixedModel(1, {2: [0.3]})
        sds = []
        for n in (4, 6, 8):
            res = exact_free_energy(m, PROB_ISING, n, 300, seed=14)
            sds.append(res.per_draw.std(ddof=1))
        assert sds[0] > sds[1] > sds[2]


class TestConstrainedFreeEnergy:
    def test_ising_constraint_vacuous(self):
        m = MixedModel(1, {2: [0.3]})
        d = np.array([[1.0]])
        free = exact_free_energy(m, PROB_ISING, 4, 20, seed=15)
        constrained = constrained_free_energy(m, PROB_ISING, 4, d, 0.5, 20, seed=15)
        np.testing.assert_allclose(constrained.per_draw, free.per_draw, atol=1e-14)
        assert constrained.hit_fraction == pytest.approx(1.0, abs=1e-12)

    def test_empty_constraint_set(self):
        m = MixedModel(1, {2: [0.3]})
        with pytest.raises(InfeasibleError):
            constrained_free_energy(m, PROB_ISING, 4, np.array([[0.0]]), 0.5, 5, seed=1)

    def test_restriction_never_gains(self):
        m = MixedModel(2, {2: [0.3, 0.2]})
        prior = SpinPrior.from_atoms([([1.0, 0.0], 0.5), ([0.0, 1.0], 0.5)])
        d = np.diag([0.5, 0.5])
        free = exact_free_energy(m, prior, 4, 30, seed=16)
        constrained = constrained_free_energy(m, prior, 4, d, 0.3, 30, seed=16)
        assert constrained.hit_fraction < 1.0
        assert np.all(constrained.per_draw <= free.per_draw + 1e-12)


class TestPerturbation:
    def test_linear_field_case(self):
        term = PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.0]]))
        config = np.array([[1.0], [-1.0], [1.0]])
        g = sample_perturbation_disorder(term, 3, seed=17)
        got = perturbation_h_theta(term, config, g)
        want = 3 ** (-0.5) * float(g[0] - g[1] + g[2])
        assert got == pytest.approx(want, abs=1e-12)

    def test_zero_couplings(self):
        term = PerturbationTerm(p=2, ns=(1, 2), lambdas=np.array([[0.5], [1.0]]))
        config = np.array([[1.0], [-1.0]])
        assert perturbation_h_theta(term, config, np.zeros(2 ** (2 * 3))) == 0.0

    def test_covariance_against_product_formula(self):
        term = PerturbationTerm(p=2, ns=(1, 1), lambdas=np.array([[1.0, 0.5],
                                                                  [0.2, -0.4]]))
        rng = spawn_rng(18)
        a = rng.choice([-1.0, 1.0], size=(3, 2))
        b = rng.choice([-1.0, 1.0], size=(3, 2))
        emp, se = perturbation_covariance_mc(term, a, b, 30000, seed=19)
        exact = term.covariance(overlap(a, b))
        assert abs(emp - exact) <= 3.0 * se

    def test_empty_family_is_zero(self):
        spec = PerturbationSpec()
        assert perturbation_h(spec, PROB_ISING, np.ones((2, 1)), []) == 0.0

    def test_single_term_scaling(self):
        term = PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.0]]))
        spec = PerturbationSpec(terms=(term,), u=(1.5,))
        config = np.ones((2, 1))
        g = sample_perturbation_disorder(term, 2, seed=20)
        w = spec.term_weight(0, PROB_ISING.support_bound)
        want = w * perturbation_h_theta(term, config, g)
        assert perturbation_h(spec, PROB_ISING, config, [g]) == pytest.approx(want, abs=1e-15)
        # j(theta) = p + n + j0 + 22m = 1 + 1 + 1 + 22, b_p = kappa * c^p = 1
        assert w == pytest.approx(2.0**-25 * 1.5, abs=1e-18)

    def test_variance_bound_holds(self):
        term = PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.0]]))
        spec = PerturbationSpec(terms=(term,), u=(2.0,))
        var, se = perturbation_variance_check(spec, PROB_ISING, np.ones((3, 1)),
                                              200, seed=21)
        assert var <= 1.0

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValidationError):
            PerturbationTerm(p=0, ns=(1,), lambdas=np.array([[1.0]]))
        with pytest.raises(ValidationError):
            PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.5]]))
        term = PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.0]]))
        with pytest.raises(ValidationError):
            PerturbationSpec(terms=(term,), u=(0.5,))
        with pytest.raises(ValidationError):
            PerturbationSpec(terms=(term,), u=(1.5,), strength_exponent=0.6)


F_CONST = lambda rn: np.ones(rn.shape[:-4])
F_ENTRY = lambda rn: rn[..., 0, 1, 0, 0]
F_ENTRY_SQ = lambda rn: rn[..., 0, 1, 0, 0] ** 2
ODD_TERM = PerturbationTerm(p=1, ns=(1,), lambdas=np.array([[1.0]]))


class TestGGDiscrepancy:
    def test_constant_functional_is_structural_zero(self):
        m = MixedModel(1, {2: [0.3]})
        res = gg_discrepancy(m, COUNTING_ISING, PerturbationSpec(), 4,
                             np.array([[1.0]]), 0.5, 2, F_CONST, ODD_TERM,
                             20, seed=22)
        assert res.delta <= 1e-14

    def test_iid_spin_flip_symmetry_zero(self):
        # no couplings, no perturbation, even functional, odd-parity pattern:
        # every term vanishes by the sigma -> -sigma symmetry
        m0 = MixedModel(1, {})
        res = gg_discrepancy(m0, COUNTING_ISING, PerturbationSpec(), 4,
                             np.array([[1.0]]), 0.5, 2, F_ENTRY_SQ, ODD_TERM,
                             5, seed=23)
        assert res.delta <= 1e-14
        assert res.std_error <= 1e-14

    def test_iid_odd_functional_matches_direct_count(self):
        # for independent uniform spins the residual is (1/2) E[R12^2] = 1/(2N)
        m0 = MixedModel(1, {})
        n = 4
        res = gg_discrepancy(m0, COUNTING_ISING, PerturbationSpec(), n,
                             np.array([[1.0]]), 0.5, 2, F_ENTRY, ODD_TERM,
                             3, seed=24)
        assert res.delta == pytest.approx(1.0 / (2 * n), abs=1e-12)

    def test_three_replicas_run(self):
        m = MixedModel(1, {2: [0.3]})
        res = gg_discrepancy(m, COUNTING_ISING, PerturbationSpec(), 3,
                             np.array([[1.0]]), 0.5, 3, F_ENTRY, ODD_TERM,
                             10, seed=25)
        assert np.isfinite(res.delta)

    def test_rejects_single_replica(self):
        m = MixedModel(1, {2: [0.3]})
        with pytest.raises(ValidationError):
            gg_discrepancy(m, COUNTING_ISING, PerturbationSpec(), 3,
                           np.array([[1.0]]), 0.5, 1, F_ENTRY, ODD_TERM, 5, seed=1)

    def test_modified_configs_flow_through(self):
        # a two-atom kappa=1 prior with unequal radii exercises the modifier
        m = MixedModel(1, {2: [0.3]})
        prior = SpinPrior.from_atoms([([1.0], 1.0), ([0.6], 1.0)])
        d = np.array([[0.8]])
        res = gg_discrepancy(m, prior, PerturbationSpec(), 3, d, 0.9, 2,
                             F_ENTRY, ODD_TERM, 10, seed=26)
        assert np.isfinite(res.delta)
