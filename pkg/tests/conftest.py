"""Shared generators for randomized suites; everything is explicitly seeded."""
import numpy as np
import pytest

from vecspin import MixedModel, Path, SpinPrior
from vecspin.rng import spawn_rng


def random_model(rng, kappa, p_set=(2, 4)) -> MixedModel:
    coeffs = {p: rng.uniform(0.05, 0.5, size=kappa) for p in p_set}
    return MixedModel(kappa, coeffs)


def random_prior(rng, kappa, n_atoms=3, bound=1.0) -> SpinPrior:
    pts = rng.uniform(-bound, bound, size=(n_atoms, kappa))
    w = rng.uniform(0.2, 1.0, size=n_atoms)
    return SpinPrior(pts, w / w.sum())


def random_monotone_gammas(rng, kappa, r, scale=0.6):
    """r cumulative Gram matrices built from random rank-1 increments."""
    g = np.zeros((kappa, kappa))
    out = []
    for _ in range(r):
        v = rng.standard_normal((kappa, kappa)) * scale / np.sqrt(r)
        g = g + v @ v.T / kappa
        out.append(g.copy())
    return np.array(out)


def random_path(rng, kappa, r, x_lo=0.1, x_hi=0.9) -> Path:
    x = np.sort(rng.uniform(x_lo, x_hi, size=r))
    while np.any(np.diff(x) < 1e-3):
        x = np.sort(rng.uniform(x_lo, x_hi, size=r))
    return Path(x, random_monotone_gammas(rng, kappa, r))


def random_lambda(rng, kappa, scale=0.3):
    return rng.uniform(-scale, scale, size=kappa * (kappa + 1) // 2)


@pytest.fixture
def rng():
    return spawn_rng(20240815)
