import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kamres.errors import SmallDivisor, StepTooLarge
from kamres.normalform import (Ball, Box, Hamiltonian, Quadratic, StateFunction, averaging_step,
                               compose_transform, conjugation_defect, effective_profile,
                               fourier_operators, homological_residual, normal_form_iterate,
                               resonant_split, solve_homological, symplectic_defect,
                               weighted_norm)
from kamres.potential import AnalyticPotential, example_potential, genericity_threshold

H2 = Quadratic.identity(2)
E = math.exp
TEST_POTENTIAL = AnalyticPotential.from_modes(
    2, 1.0, {(0, 1): E(-1), (1, 0): 0.1 * E(-1), (1, 1): 0.1 * E(-2), (0, 2): 0.3 * E(-2)})
TEST_DOMAIN = Box([0.5, -0.01], [0.8, 0.01])


@pytest.fixture(scope="module")
def resonant_run():
    f = StateFunction.from_potential(H2, TEST_POTENTIAL, 1e-6)
    H = Hamiltonian(H2, f)
    return H, normal_form_iterate(H, (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)


@pytest.fixture(scope="module")
def nonresonant_run():
    D = Box([0.6, 0.2], [0.9, 0.35])
    f = StateFunction.from_cosines(H2, {(1, 0): 3e-7, (0, 1): 3e-7, (1, -1): 1e-7})
    H = Hamiltonian(H2, f)
    return H, normal_form_iterate(H, None, None, 2, D, 0.05, 1.0)


def same_terms(a, b):
    keys = set(a.terms) | set(b.terms)
    return all(abs(a.terms.get(k, 0) - b.terms.get(k, 0)) == 0 for k in keys)


# -- norms ------------------------------------------------------------------

@pytest.mark.parametrize("k, s", [((1, 0), 1.0), ((1, 2), 0.5)])
def test_norm_of_cosine(k, s):
    f = StateFunction.from_cosines(H2, {k: 1.0})
    nv = weighted_norm(f, TEST_DOMAIN, 0.1, s)
    assert nv.raw == pytest.approx(0.5 * E(sum(map(abs, k)) * s), rel=1e-15)
    assert nv.inflated >= nv.raw
    assert nv.majorant >= nv.raw * (1 - 1e-15)


def test_norm_of_linear_coefficient():
    # f_k(y) = y1 on the complex unit ball widened by 1/2: sup |y1| = 3/2
    f = StateFunction.from_polynomial_modes(H2, {(1, 0): {(1, 0): 1.0}})
    nv = weighted_norm(f, Ball([0.0, 0.0], 1.0), 0.5, 0.0)
    assert 1.5 * (1 - 1e-3) <= nv.raw <= 1.5 * (1 + 1e-12)
    assert nv.inflated >= 1.5
    assert nv.majorant >= 1.5 * (1 - 1e-12)


@given(st.integers(1, 5), st.floats(0.05, 0.5))
def test_high_mode_decay(N, sigma):
    s = 1.0
    modes = {(N + 1, 0): 1.0, (1, N): 0.5, (N, 2): 0.25j}
    f = StateFunction.from_modes(H2, {**modes, **{tuple(-v for v in k): np.conj(c)
                                                  for k, c in modes.items()}})
    assert fourier_operators(f, N=N)[0].is_zero()
    wide = weighted_norm(f, TEST_DOMAIN, 0.1, s).raw
    narrow = weighted_norm(f, TEST_DOMAIN, 0.1, s - sigma).raw
    assert narrow <= E(-N * sigma) * wide * (1 + 1e-14)


# -- operators --------------------------------------------------------------

def test_lattice_projection_operators():
    f = StateFunction.from_cosines(H2, {(1, 2): 1.0, (1, 0): 1.0, (2, 4): 0.5})
    P, Q = fourier_operators(f, (1, 2))
    assert set(P.modes()) == {(1, 2), (-1, -2), (2, 4), (-2, -4)}
    assert same_terms(P + Q, f)


def test_truncation_operators():
    f = StateFunction.from_modes(H2, {(5, 0): 1.0, (-5, 0): 1.0})
    T, Tp = fourier_operators(f, N=4)
    assert T.is_zero()
    assert same_terms(Tp, f)


def test_trivial_lattice_projection_of_zero_mean():
    f = StateFunction.from_potential(H2, TEST_POTENTIAL)
    P, Q = fourier_operators(f, None)
    assert P.is_zero() and same_terms(Q, f)


# -- homological equation -------------------------------------------------------

# with the trivial lattice every |m| <= K is a divisor, so D avoids y2 = 0 too
AWAY = Box([0.5, 0.3], [1.0, 0.6])


def test_homological_closed_form():
    D = AWAY
    f = StateFunction.from_cosines(H2, {(1, 0): 1.0})
    phi = solve_homological(H2, f, None, 1, D, 0.1)
    rng = np.random.default_rng(0)
    Y = rng.uniform([0.5, 0.3], [1.0, 0.6], (50, 2))
    X = rng.uniform(0, 2 * np.pi, (50, 2))
    # {h, phi} = -h'(y) . d_x phi, so phi = sin(x1) / y1 solves {h, phi} + cos x1 = 0
    assert np.allclose(phi.evaluate(Y, X), np.sin(X[:, 0]) / Y[:, 0], atol=1e-14)
    res, scale = homological_residual(H2, phi, f, D)
    assert res <= 1e-12 * scale


def test_homological_high_modes_only():
    f = StateFunction.from_cosines(H2, {(3, 1): 1.0})
    phi = solve_homological(H2, f, (0, 1), 2, TEST_DOMAIN, 0.05)
    assert phi.is_zero()


def test_small_divisor_detected():
    D = Box([-0.5, 0.2], [0.5, 0.4])
    f = StateFunction.from_cosines(H2, {(1, 0): 1.0})
    with pytest.raises(SmallDivisor) as exc:
        solve_homological(H2, f, None, 1, D, 0.05)
    assert exc.value.m is not None


@settings(max_examples=15)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_homological_residual_random(amps):
    f = StateFunction.from_cosines(H2, dict(zip([(1, 0), (1, 1), (2, -1), (0, 1)], amps)))
    flat, fK = resonant_split(f, (0, 1), 3)
    phi = solve_homological(H2, f, (0, 1), 3, TEST_DOMAIN, 0.1)
    res, scale = homological_residual(H2, phi, fK, TEST_DOMAIN)
    assert res <= 1e-12 * max(scale, 1e-300)


# -- averaging step ---------------------------------------------------------

def test_step_identity_when_nothing_to_remove():
    f = StateFunction.from_cosines(H2, {(0, 1): 1e-3})
    H = Hamiltonian(H2, f)
    Hn, rep, phi = averaging_step(H, (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)
    assert phi.is_zero() and rep.theta == 0.0
    assert same_terms(Hn.f, f)


def step_on_cosine(eps):
    f = StateFunction.from_cosines(H2, {(1, 0): eps})
    return averaging_step(Hamiltonian(H2, f), None, None, 1, AWAY, 0.1, 1.0)


def test_step_remainder_bound():
    _, rep, _ = step_on_cosine(1e-6)
    assert rep.fstar_norm.inflated <= 2 * rep.theta * rep.f_norm
    assert rep.holds


def test_step_theta_linear_in_size():
    a = step_on_cosine(1e-7)[1].theta
    b = step_on_cosine(2e-7)[1].theta
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_step_too_large_refused():
    with pytest.raises(StepTooLarge) as exc:
        step_on_cosine(1e-3)
    assert exc.value.theta > 1


# -- iteration ----------------------------------------------------------------

def test_identity_on_empty_low_modes():
    f = StateFunction.from_cosines(H2, {(0, 1): 1e-6, (0, 3): 1e-7})
    H = Hamiltonian(H2, f)
    rep = normal_form_iterate(H, (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)
    assert rep.f_star.is_zero()
    assert all(g.is_zero() for g in rep.generators)
    Y = np.array([[0.6, 0.0]])
    X = np.array([[0.4, 1.3]])
    Yp, Xp = compose_transform(rep.generators, Y, X)
    assert np.array_equal(Yp, Y) and np.array_equal(Xp, X)


def test_nonresonant_normal_form(nonresonant_run):
    H, rep = nonresonant_run
    assert rep.bounds_hold
    # g is angle independent and f_** has no mean
    assert all(not any(k) for k in rep.g.modes())
    assert all(any(k) for k in rep.f_starstar.modes())


def test_resonant_normal_form(resonant_run):
    H, rep = resonant_run
    assert rep.bounds_hold
    assert rep.norms["f_star"] <= 2 * rep.theta_star * rep.f_norm
    assert rep.norms["log_low_modes"] <= rep.norms["log_low_modes_bound"]
    # g depends on the angles only through k.x
    assert all(k[0] == 0 for k in rep.g.modes())


def test_single_step_matches_averaging_step():
    f = StateFunction.from_potential(H2, TEST_POTENTIAL, 1e-6)
    H = Hamiltonian(H2, f)
    rep = normal_form_iterate(H, (0, 1), None, 1, TEST_DOMAIN, 0.1, 1.0)
    Hn, srep, phi = averaging_step(H, (0, 1), rep.alpha, 1, TEST_DOMAIN, 0.1, 1.0,
                                   rho=0.1 / 4, sigma=0.5, ref=(0.1, 1.0))
    assert rep.steps == 1
    assert same_terms(rep.hamiltonian().f, Hn.f)


def test_lie_transform_symplectic_and_conjugating(resonant_run):
    H, rep = resonant_run
    rng = np.random.default_rng(4)
    Y = rng.uniform([0.55, -0.005], [0.75, 0.005], (6, 2))
    X = rng.uniform(0, 2 * np.pi, (6, 2))
    _, _, J = compose_transform(rep.generators, Y, X, variational=True)
    assert symplectic_defect(J) <= 1e-10
    assert conjugation_defect(H, rep, Y, X) <= 1e-15 + rep.norms["pruned_mass"] + 1e-12 * 1e-6


def test_refuses_large_theta():
    f = StateFunction.from_potential(H2, TEST_POTENTIAL, 1e-2)
    with pytest.raises(StepTooLarge):
        normal_form_iterate(Hamiltonian(H2, f), (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)


# -- effective profile ----------------------------------------------------------

def test_effective_profile_morse_branch(resonant_run):
    _, rep = resonant_run
    Ks = genericity_threshold(1.0, 0.1)
    cmp = effective_profile(rep, TEST_POTENTIAL, 1e-6, Ks)
    assert cmp.delta_k == 1.0
    assert cmp.G_minus_F <= cmp.G_minus_F_bound


def test_effective_profile_converges():
    devs = []
    for eps in (1e-6, 1e-7):
        f = StateFunction.from_potential(H2, TEST_POTENTIAL, eps)
        rep = normal_form_iterate(Hamiltonian(H2, f), (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)
        devs.append(effective_profile(rep, TEST_POTENTIAL, eps, 2.0).G_minus_F)
    assert devs[1] < devs[0] / 5


def test_effective_profile_cosine_branch():
    ft = example_potential(2, 1.0, 1.0, 7)
    Ks = genericity_threshold(1.0, 1.0)
    D = Box([1.9, -1.02], [2.1, -0.98])
    f = StateFunction.from_potential(H2, ft, 1e-6)
    rep = normal_form_iterate(Hamiltonian(H2, f), (1, 2), None, 2, D, 0.2, 1.0)
    cmp = effective_profile(rep, ft, 1e-6, Ks)
    assert cmp.delta_k == pytest.approx(2 * E(-3))
    assert cmp.passed, cmp.to_json()
