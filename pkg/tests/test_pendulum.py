import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamres.errors import ContinuationFailure, DomainError, InvalidInput
from kamres.pendulum import (ActionBranch, PendulumSystem, action_profile_rows,
                             canonical_pendulum_form, critical_windows, dPdE,
                             energy_of_action, separatrix_fit)
from kamres.potential import TrigSeries

F0 = TrigSeries.cos(-1.0)
SQ2 = math.sqrt(2)


@pytest.fixture(scope="module")
def cosine():
    return PendulumSystem(F0=F0, s0=0.5)


@pytest.fixture(scope="module")
def branches(cosine):
    return {i: ActionBranch(cosine, i) for i in range(3)}


@pytest.fixture(scope="module")
def double_well():
    F = TrigSeries.cos(-1.0, 2) + TrigSeries.cos(0.3, 1, phase=0.7)
    return PendulumSystem(F0=F, s0=0.5)


# ---- critical data -------------------------------------------------------------------

def test_cosine_critical_points(cosine):
    assert cosine.N == 1
    np.testing.assert_allclose(cosine.x0, [-math.pi, 0.0, math.pi], atol=1e-12)
    np.testing.assert_allclose(cosine.E0, [1.0, -1.0, 1.0], atol=1e-12)


def test_cosine_windows(branches):
    assert branches[1].kind == "oscillation"
    assert branches[2].kind == "rotation" and branches[0].kind == "rotation"
    assert branches[1].window() == pytest.approx((-1.0, 1.0))
    assert branches[2].window()[0] == pytest.approx(1.0)
    assert branches[2].window()[1] == math.inf


def test_perturbed_minimum_energy():
    # F = -cos psi + 0.01 cos psi at Jhat_1 = 1: minimum value -0.99
    S = PendulumSystem(F0=F0, s0=0.5, G=lambda Jh: TrigSeries.cos(0.01 * Jh[0]),
                       Jhat_ref=(1.0,))
    c = critical_windows(S, (1.0,))
    np.testing.assert_allclose(c.x, [-math.pi, 0.0, math.pi], atol=1e-10)
    np.testing.assert_allclose(c.E, [0.99, -0.99, 0.99], atol=1e-12)
    assert c.windows[1] == pytest.approx((-0.99, 0.99))
    assert c.separation_ok


def test_zero_perturbation_keeps_critical_data(cosine):
    S = PendulumSystem(F0=F0, s0=0.5, G=lambda Jh: TrigSeries({}), Jhat_ref=(0.0,))
    c = critical_windows(S, (0.3,))
    np.testing.assert_array_equal(c.x, cosine.x0)
    np.testing.assert_array_equal(c.E, cosine.E0)


def test_continuation_refuses_large_eta():
    S = PendulumSystem(F0=F0, s0=0.5, eta=0.2)
    assert S.threshold() == pytest.approx(0.125)
    with pytest.raises(ContinuationFailure):
        critical_windows(S)


def test_double_well_windows(double_well):
    D = double_well
    assert D.N == 2
    c = critical_windows(D)
    E = c.E
    w = c.windows
    # wells below each of the two saddles, and one well enclosing both
    assert w[1] == pytest.approx((E[1], min(E[0], E[2])))
    assert w[3] == pytest.approx((E[3], min(E[2], E[4])))
    assert w[2] == pytest.approx((E[2], min(E[0], E[4])))
    assert w[4][1] == math.inf and w[0] == w[4]
    kinds = [ActionBranch(D, i).kind for i in range(5)]
    assert kinds == ["rotation", "oscillation", "oscillation", "oscillation", "rotation"]


# ---- actions ------------------------------------------------------------------------

def test_closed_form_actions(branches):
    assert branches[2].action(1.0) == pytest.approx(2 * SQ2 / math.pi, abs=1e-12)
    assert branches[1].action(1.0) == pytest.approx(4 * SQ2 / math.pi, abs=1e-12)
    assert branches[1].action(-1.0) == pytest.approx(0.0, abs=1e-14)


def test_rotation_action_large_energy(branches):
    # P(E) = sqrt(E) (1 - 1/(16 E^2) + ...) for F = -cos
    assert branches[2].action(100.0) == pytest.approx(10 * (1 - 1 / 160000), rel=1e-8)
    assert energy_of_action(branches[2], 10.0) == pytest.approx(100.0, abs=0.2)


def test_rotation_branches_are_mirror_images(branches):
    for E in (1.0, 1.7, 30.0):
        assert branches[0].action(E) == pytest.approx(-branches[2].action(E), abs=1e-13)


def test_area_relation_at_separatrix(branches, double_well):
    # the oscillation area equals the area between the two rotation curves
    assert branches[1].action(1.0) == pytest.approx(
        branches[2].action(1.0) - branches[0].action(1.0), abs=1e-12)
    # in the double well the outer well is the union of the two inner ones
    lo, _ = ActionBranch(double_well, 2).window()
    inner = ActionBranch(double_well, 1).action(lo) + ActionBranch(double_well, 3).action(lo)
    assert ActionBranch(double_well, 2).action(lo) == pytest.approx(inner, abs=1e-10)


def test_oscillation_limit_by_extrapolation(branches):
    fit = separatrix_fit(branches[1], "+")
    assert fit.evaluate(1e-9) == pytest.approx(4 * SQ2 / math.pi, abs=1e-6)
    assert fit.phi_coeffs[0] == pytest.approx(4 * SQ2 / math.pi, abs=1e-6)


def test_action_outside_window(branches):
    with pytest.raises(DomainError):
        branches[1].action(1.5)
    with pytest.raises(DomainError):
        branches[2].action(0.5)


def test_zero_prefactor_path_matches_plain(cosine):
    S2 = PendulumSystem(F0=F0, s0=0.5,
                        b=lambda Jh, J, x: np.zeros(np.broadcast(np.asarray(J),
                                                                 np.asarray(x)).shape))
    for i, E in ((1, 0.3), (2, 2.3), (1, -0.9)):
        assert ActionBranch(S2, i).action(E) == ActionBranch(cosine, i).action(E)


@pytest.fixture(scope="module")
def dependent():
    return PendulumSystem(F0=F0, s0=0.5, G=lambda Jh: TrigSeries.cos(0.01 * Jh[0]),
                          Jhat_ref=(1.0,))


def test_round_trip_random(dependent):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        Jh = (float(rng.uniform(-1, 1)),)
        i = int(rng.integers(0, 3))
        br = ActionBranch(dependent, i)
        lo, hi = br.window(Jh)
        hi = min(hi, lo + 5.0)
        E = lo + (hi - lo) * float(rng.uniform(0.01, 0.99))
        E2 = energy_of_action(br, br.action(E, Jh), Jh)
        worst = max(worst, abs(E2 - E))
    assert worst <= 1e-10


def test_round_trip_at_edge(branches):
    assert energy_of_action(branches[1], branches[1].action(1.0)) == pytest.approx(1.0, abs=1e-10)


def test_energy_of_action_range(branches):
    with pytest.raises(DomainError):
        energy_of_action(branches[1], 5.0)
    with pytest.raises(DomainError):
        energy_of_action(branches[2], 0.1)


# ---- dP/dE --------------------------------------------------------------------------

def test_dpde_harmonic_limit(branches):
    # near the bottom F ~ -1 + x^2/2, so dP/dE -> 1/sqrt(2)
    assert dPdE(branches[1], -1 + 1e-6) == pytest.approx(1 / SQ2, abs=1e-4)


def test_dpde_oscillation_infimum(branches):
    E = np.concatenate([-1 + np.geomspace(1e-6, 1e-1, 10), np.linspace(-0.8, 1 - 1e-4, 20)])
    vals = np.array([dPdE(branches[1], float(e)) for e in E])
    assert vals.min() == pytest.approx(1 / SQ2, abs=1e-3)
    assert np.all(vals > 0)
    assert np.all(np.diff(vals) > 0)


def test_dpde_log_growth(branches):
    # dP/dE ~ -(sqrt 2 / (2 pi)) log(1 - E) near the separatrix
    z = np.array([1e-3, 1e-4, 1e-5, 1e-6])
    vals = np.array([dPdE(branches[1], 1 - t) for t in z])
    slopes = np.diff(vals) / np.diff(-np.log(z))
    np.testing.assert_allclose(slopes, SQ2 / (2 * math.pi), rtol=2e-3)


def test_dpde_rotation_bounds(branches):
    M = math.cosh(0.5)
    for E in (2 * M, 5.0, 10.0, 100.0):
        v = dPdE(branches[2], E)
        assert 1 / (8 * math.sqrt(E)) <= v <= 2 / math.sqrt(E)
    assert dPdE(branches[2], 10.0) == pytest.approx(0.5 / math.sqrt(10), rel=3e-3)


def test_period_derivative_matches_difference(branches):
    for i, E in ((1, 0.5), (2, 10.0), (1, -0.5)):
        assert branches[i].period_derivative(E) == pytest.approx(dPdE(branches[i], E), rel=1e-8)


@settings(max_examples=30)
@given(st.floats(-0.999, 0.999), st.floats(0.1, 1.0))
def test_action_monotone_in_energy(E, step):
    br = ActionBranch(PendulumSystem(F0=F0, s0=0.5), 1)
    E2 = min(E + step, 1.0)
    assert br.action(E2) > br.action(E)


# ---- separatrix asymptotics ---------------------------------------------------------

def test_separatrix_coefficient(branches):
    fit = separatrix_fit(branches[1], "+")
    assert abs(fit.chi0) == pytest.approx(SQ2 / (2 * math.pi), abs=5e-3)
    assert abs(fit.chi0) >= fit.chi0_bound
    assert fit.to_json()["bound_ok"]


def test_separatrix_elliptic_side_is_analytic(branches):
    fit = separatrix_fit(branches[1], "-")
    assert fit.chi0 == 0.0 and len(fit.chi_coeffs) == 0
    assert fit.phi_coeffs[1] == pytest.approx(1 / SQ2, abs=1e-6)


def test_separatrix_rotation_side_is_half(branches):
    osc = separatrix_fit(branches[1], "+")
    rot = separatrix_fit(branches[2], "-")
    assert rot.chi0 == pytest.approx(-osc.chi0 / 2, rel=1e-3)
    with pytest.raises(InvalidInput):
        separatrix_fit(branches[2], "+")


def test_separatrix_fit_stable_under_window(branches):
    a = separatrix_fit(branches[1], "+")
    b = separatrix_fit(branches[1], "+", window=(1e-6, 0.025))
    assert b.chi0 == pytest.approx(a.chi0, abs=1e-3)


# ---- canonical form -----------------------------------------------------------------

def test_canonical_form_linear_shift():
    eta = 0.01
    cf = canonical_pendulum_form(F0, lambda Y, y, x: eta * y + 0 * x, Yhat=(0.5,), r0=1.0,
                                 s0=0.5, eta_star=eta)
    # y^2 + eta y = (y + eta/2)^2 - eta^2/4
    assert cf.Jn_star == pytest.approx(-eta / 2, abs=1e-12)
    assert np.abs(cf.a_star).max() <= 1e-14
    assert cf.bounds["ok"]
    assert cf.reassembly_error <= 1e-12


def test_canonical_form_angle_only():
    cf = canonical_pendulum_form(F0, lambda Y, y, x: 0.001 * np.cos(2 * x) + 0 * y, Yhat=(0.0,),
                                 r0=1.0, s0=0.5, eta_star=0.001)
    assert cf.Jn_star == pytest.approx(0.0, abs=1e-14)
    assert np.abs(cf.b_star).max() <= 1e-14
    assert cf.bounds["ok"] and cf.reassembly_error <= 1e-12


def test_canonical_form_mixed():
    G2 = lambda Y, y, x: (0.0005 * (1 + Y[0]) * y ** 2 * np.cos(x) + 0.0006 * y * np.sin(x)
                          + 0.0004 * np.cos(2 * x))
    cf = canonical_pendulum_form(F0, G2, Yhat=(0.5,), r0=1.0, s0=0.5, eta_star=0.002)
    assert cf.bounds["ok"]
    assert cf.reassembly_error <= 1e-12
    br = ActionBranch(cf.system, 1)
    P = br.action(0.2, (0.5,))
    assert energy_of_action(br, P, (0.5,)) == pytest.approx(0.2, abs=1e-10)
    assert dPdE(br, 0.2, (0.5,)) > 0


# ---- profile rows -------------------------------------------------------------------

def test_action_profile_rows(cosine):
    rows = action_profile_rows(cosine, {1: [0.0, 0.5], 2: [2.0]})
    assert len(rows) >= 3
    assert all(r["P"] == r["P"] for r in rows)
