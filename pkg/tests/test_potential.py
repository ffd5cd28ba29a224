import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import symmetric_counterexample
from kamres.errors import DegenerateProfile, InvalidInput
from kamres.lattice import primitive_vectors
from kamres.potential import (AnalyticPotential, TrigSeries, check_genericity, critical_points,
                              derivative_floor, example_potential, genericity_threshold,
                              lattice_projection, morse_analyze, sup_fourier_norm)


def cos_mode(k, amp=1.0, s=1.0):
    return AnalyticPotential.from_modes(len(k), s, {tuple(k): 0.5 * amp})


# -- norms ------------------------------------------------------------------

def test_sup_norm_single_cosine():
    f = cos_mode((1, 2), s=0.7)
    assert sup_fourier_norm(f) == pytest.approx(0.5 * math.exp(3 * 0.7), rel=1e-15)


def test_sup_norm_example_potential_equals_delta():
    f = example_potential(2, 1.0, 0.3, 6)
    assert sup_fourier_norm(f) == pytest.approx(0.3, rel=1e-14)


def test_sup_norm_empty():
    assert sup_fourier_norm(AnalyticPotential(2, 1.0, {})) == 0.0


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_norm_monotone_in_width(a, b):
    f = example_potential(2, 1.0, 0.5, 5)
    lo, hi = sorted((a, b))
    assert sup_fourier_norm(f, lo) <= sup_fourier_norm(f, hi)


# -- construction -----------------------------------------------------------

def test_reality_enforced():
    with pytest.raises(InvalidInput):
        AnalyticPotential(1, 1.0, {(1,): 1.0, (-1,): 2.0})


def test_zero_mean_enforced():
    with pytest.raises(InvalidInput):
        AnalyticPotential.from_modes(2, 1.0, {(0, 0): 1.0})


def test_json_round_trip():
    f = example_potential(2, 1.0, 0.1, 4)
    g = AnalyticPotential.from_json(f.to_json())
    assert g.coeffs == f.coeffs and g.support_radius == f.support_radius


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.floats(-1, 1),
                          st.floats(-1, 1)), min_size=1, max_size=6),
       st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_real_valued(modes, x):
    data = {(a, b): complex(re, im) for a, b, re, im in modes if (a, b) != (0, 0)}
    clean = {}
    for k, c in data.items():
        if tuple(-v for v in k) not in clean:
            clean[k] = c
    if not clean:
        return
    f = AnalyticPotential.from_modes(2, 1.0, clean)
    xs = np.asarray(x)
    z = sum(c * np.exp(1j * (np.asarray(k) @ xs)) for k, c in f.coeffs.items())
    assert abs(z.imag) <= 1e-12 * max(1.0, sum(abs(c) for c in f.coeffs.values()))
    assert f.evaluate(xs) == pytest.approx(z.real, abs=1e-12)


# -- lattice projection ------------------------------------------------------

def test_projection_single_mode():
    prof = lattice_projection(cos_mode((1, 2)), (1, 2))
    t = np.linspace(-3, 3, 7)
    assert np.allclose(prof(t), np.cos(t), atol=1e-15)
    assert prof.phase_shift == pytest.approx(math.pi)
    assert np.allclose(prof.normalized()(t), -np.cos(t), atol=1e-15)


def test_projection_example_potential_axis():
    delta, s = 0.1, 1.0
    f = example_potential(2, s, delta, 6)
    prof = lattice_projection(f, (1, 0))
    t = np.linspace(-3, 3, 11)
    # (1, 0) is the only primitive vector on its lattice, so F(t) = 2 delta e^-s cos t
    assert np.allclose(prof(t), 2 * delta * math.exp(-s) * np.cos(t), atol=1e-15)


def test_projection_disjoint_lattice_is_empty():
    prof = lattice_projection(cos_mode((1, 1)), (1, 0))
    assert prof.series.is_empty()


def test_projection_rejects_non_primitive():
    with pytest.raises(InvalidInput):
        lattice_projection(cos_mode((2, 2)), (2, 2))


def test_projection_norm_bound():
    f = AnalyticPotential.from_modes(2, 1.0, {(1, 2): 0.3, (2, 4): 0.05j, (1, 0): 0.2})
    prof = lattice_projection(f, (1, 2))
    assert prof.series.fourier_norm(prof.width) <= sup_fourier_norm(f) * (1 + 1e-15)


def test_projection_partition():
    rng = np.random.default_rng(0)
    modes = {(1, 0): 0.3, (0, 1): 0.2 - 0.1j, (1, 1): 0.05, (2, 2): 0.01j, (1, -2): 0.02,
             (3, 0): 0.004}
    f = AnalyticPotential.from_modes(2, 1.0, modes)
    g = np.linspace(0, 2 * np.pi, 32, endpoint=False)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    total = np.zeros(len(X))
    for k in primitive_vectors(2, 6):
        prof = lattice_projection(f, k)
        if not prof.series.is_empty():
            total += prof(X @ np.asarray(k, dtype=float))
    assert np.abs(total - f.evaluate(X)).max() <= 1e-12
    assert rng is not None


# -- genericity -------------------------------------------------------------

@pytest.mark.parametrize("s, delta, expected", [(1.0, 1.0, 2.0), (1.0, math.exp(-3), 6.0),
                                                (0.5, 1.0, 4.0)])
def test_genericity_threshold_examples(s, delta, expected):
    assert genericity_threshold(s, delta, 2.0) == pytest.approx(expected, rel=1e-14)


def test_genericity_threshold_rejects_delta():
    with pytest.raises(InvalidInput):
        genericity_threshold(1.0, 1.5)


def test_example_potential_is_generic():
    delta, s = 0.1, 1.0
    K = genericity_threshold(s, delta)
    f = example_potential(2, s, delta, int(math.floor(K)) + 5)
    rep = check_genericity(f, delta)
    assert rep.passed, rep.to_json()


def test_missing_high_mode_fails_p1():
    delta, s = 0.1, 1.0
    K = genericity_threshold(s, delta)
    f = example_potential(2, s, delta, int(math.floor(K)) + 5)
    # drop the (3, 4) family, beyond K_s(delta) ~ 4.6 but inside the radius 9
    coeffs = {k: c for k, c in f.coeffs.items() if k not in ((3, 4), (-3, -4))}
    g = AnalyticPotential(2, s, coeffs, support_radius=f.support_radius)
    rep = check_genericity(g, delta)
    assert not rep.p1_pass
    assert rep.p1_witness == (3, 4)


def test_symmetric_profile_fails_p3():
    # the (1, 0) profile is c cos 2t: two maxima with the same energy
    rep = check_genericity(symmetric_counterexample(), 0.1)
    assert rep.p1_pass and rep.p2_pass
    assert not rep.p3_pass
    assert rep.p3_witness == (1, 0)
    assert not rep.passed


def test_empty_low_profile_fails_p2():
    # only the (1, 0) lattice is populated, so the (1, +-1) profiles vanish
    f = AnalyticPotential(2, 1.0, {(2, 0): 0.5, (-2, 0): 0.5}, support_radius=2)
    rep = check_genericity(f, 1.0)
    assert not rep.p2_pass


@pytest.mark.parametrize("a2, degenerate", [(0.25, True), (0.1, False)])
def test_p2_verdict_matches_dense_grid(a2, degenerate):
    # F = cos t + a2 cos 2t; for a2 = 1/4, F'(pi) = F''(pi) = 0
    F = TrigSeries.cos(1.0) + TrigSeries.cos(a2, 2)
    floor, _ = derivative_floor(F)
    t = np.linspace(-np.pi, np.pi, 200001)
    dense = np.min(np.abs(-np.sin(t) - 2 * a2 * np.sin(2 * t))
                   + np.abs(-np.cos(t) - 4 * a2 * np.cos(2 * t)))
    assert floor == pytest.approx(dense, abs=1e-8)
    assert (floor <= 1e-10) == degenerate
    f = AnalyticPotential.from_modes(1, 1.0, {(1,): 0.5, (2,): 0.5 * a2})
    assert check_genericity(f, 1.0).p2_pass != degenerate


# -- Morse analysis ---------------------------------------------------------

def test_morse_minus_cos():
    md = morse_analyze(TrigSeries.cos(-1.0), 1.0)
    assert md.N == 1
    assert md.critical_points[1] == pytest.approx(0.0, abs=1e-13)
    assert md.critical_points[2] == pytest.approx(math.pi, abs=1e-13)
    assert md.critical_energies[1:] == pytest.approx([-1.0, 1.0], abs=1e-14)
    assert md.beta == pytest.approx(1.0, abs=1e-10)
    assert md.M == pytest.approx(math.cosh(1.0), rel=1e-6)
    assert md.gamma == pytest.approx(0.0, abs=1e-15)
    assert md.cosine_like


def test_morse_perturbed_cosine():
    F = TrigSeries.cos(-1.0) + TrigSeries.cos(0.05, 2)
    md = morse_analyze(F, 0.5)
    assert md.N == 1
    assert len(critical_points(F)) == 2
    # gamma is the strip norm of 0.05 cos 2t on |Im t| <= 1/2
    assert md.gamma == pytest.approx(0.05 * math.cosh(1.0), rel=1e-6)


def test_degenerate_profile_raises():
    # F = cos t - cos(2t)/4: F'(0) = 0 and F''(0) = -1 + 1 = 0
    F = TrigSeries.cos(1.0) + TrigSeries.cos(-0.25, 2)
    with pytest.raises(DegenerateProfile) as exc:
        morse_analyze(F, 1.0)
    assert exc.value.witness is not None


@given(st.floats(-0.04, 0.04), st.floats(-0.04, 0.04), st.floats(-math.pi, math.pi),
       st.floats(0.5, 1.0))
def test_cosine_like_profiles_are_simple(a2, a3, phase, s0):
    F = (TrigSeries.cos(-1.0) + TrigSeries.cos(a2, 2, phase)
         + TrigSeries.cos(a3, 3, 2 * phase))
    md = morse_analyze(F, s0)
    if md.cosine_like:
        assert md.N == 1
        assert md.beta >= 0.25
        assert md.M <= md.gamma + math.cosh(s0) + 1e-9


@given(st.floats(-math.pi, math.pi))
def test_morse_translation_covariance(t0):
    F = TrigSeries.cos(-1.0) + TrigSeries.cos(0.2, 2, 0.3)
    a = morse_analyze(F, 0.5)
    b = morse_analyze(F.shifted(t0), 0.5)
    pa = np.sort(np.mod(a.critical_points[1:], 2 * np.pi))
    pb = np.sort(np.mod(b.critical_points[1:] + t0, 2 * np.pi))
    d = np.abs(np.angle(np.exp(1j * (pa - pb))))
    assert d.max() <= 1e-10
    assert b.beta == pytest.approx(a.beta, abs=1e-10)
    assert b.M == pytest.approx(a.M, abs=1e-10)
