"""Acceptance criteria 1-11, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is printed in the
"acceptance criteria" section of the pytest terminal summary.
"""

import functools
import inspect
import json
import math
import time
from fractions import Fraction
from math import gcd

import numpy as np

from helpers import random_test_function, symmetric_counterexample
from kamres.kamtwist import (brute_force_sublevel, estimate_xi, nontorus_budget,
                             sublevel_measure_bound, twist_baseline)
from kamres.lattice import (bezout_complete, build_frame, det_exact, is_primitive, norm_inf,
                            normalize_generator)
from kamres.normalform import (Box, Hamiltonian, Quadratic, StateFunction, compose_transform,
                               homological_residual, normal_form_iterate, resonant_split,
                               solve_homological)
from kamres.pendulum import ActionBranch, PendulumSystem, dPdE, separatrix_fit
from kamres.potential import (AnalyticPotential, TrigSeries, check_genericity, example_potential,
                              genericity_threshold, lattice_projection)
from kamres.structure import (IntegratedChart, action_grid, chart_jacobian, cippa_check,
                              effective_hamiltonian, hans_check, symplectic_defect,
                              verify_integrated)
from kamres.zones import covering_check, decoupled_params, omega2_measure

E = math.exp
SQ2 = math.sqrt(2)


def criterion(num, title):
    """Record a PASS/FAIL line for the wrapped test; details go in ``detail``."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(request, **kw):
            detail = {}
            try:
                fn(detail=detail, **kw)
            except BaseException as exc:
                msg = "; ".join(f"{k}={v}" for k, v in detail.items()) or \
                    str(exc).splitlines()[0][:160]
                request.config._acceptance[num] = f"criterion {num:2d} FAIL  {title}: {msg}"
                raise
            msg = "; ".join(f"{k}={v}" for k, v in detail.items())
            request.config._acceptance[num] = f"criterion {num:2d} PASS  {title}: {msg}"
        params = [p for name, p in inspect.signature(fn).parameters.items() if name != "detail"]
        wrapper.__signature__ = inspect.Signature(
            [inspect.Parameter("request", inspect.Parameter.POSITIONAL_OR_KEYWORD)] + params)
        return wrapper
    return deco


def fmt(v):
    return f"{v:.3g}"


# ---------------------------------------------------------------------------

@criterion(1, "lattice exactness")
def test_criterion_01_lattice(detail):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    failures = 0
    for n in (2, 3, 4, 5):
        done = 0
        while done < 1000:
            k = tuple(int(v) for v in rng.integers(-30, 31, n))
            if not any(k):
                continue
            done += 1
            A = bezout_complete(k).A
            g = 0
            for v in k:
                g = gcd(g, v)
            ok = (det_exact(A) == g and tuple(A[-1]) == k
                  and max(abs(v) for row in A for v in row) == norm_inf(k))
            kp = normalize_generator(k)[0]
            fr = build_frame(kp)
            J = [Fraction(int(v), int(d)) for v, d in zip(rng.integers(-50, 51, n),
                                                          rng.integers(1, 20, n))]
            y = fr.apply(J)
            ok = ok and det_exact(fr.L) == 1 and \
                sum(a * b for a, b in zip(y, kp)) == fr.kappa * J[-1]
            failures += not ok
    elapsed = time.perf_counter() - t0
    detail.update(vectors=4000, failures=failures, seconds=f"{elapsed:.2f}")
    assert failures == 0
    assert elapsed < 10


@criterion(2, "genericity")
def test_criterion_02_genericity(detail):
    delta, s = 0.1, 1.0
    K = genericity_threshold(s, delta)
    f = example_potential(2, s, delta, int(math.floor(K)) + 5)
    rep = check_genericity(f, delta)
    bad = check_genericity(symmetric_counterexample(delta, s), delta)
    detail.update(example=rep.passed, counterexample_p3=bad.p3_pass, witness=bad.p3_witness)
    assert rep.p1_pass and rep.p2_pass and rep.p3_pass
    assert bad.p1_pass and bad.p2_pass and not bad.p3_pass
    # independent check of the witness: two maxima of equal height on a fine grid
    prof = lattice_projection(symmetric_counterexample(delta, s), bad.p3_witness).series
    t = np.linspace(-np.pi, np.pi, 200000, endpoint=False)
    v = prof(t)
    peaks = v[(v > np.roll(v, 1)) & (v >= np.roll(v, -1))]
    assert len(peaks) >= 2 and abs(peaks.max() - np.sort(peaks)[-2]) <= 1e-10


@criterion(3, "pendulum closed forms")
def test_criterion_03_pendulum(detail):
    S = PendulumSystem(F0=TrigSeries.cos(-1.0), s0=0.5)
    rot, osc = ActionBranch(S, 2), ActionBranch(S, 1)
    e1 = abs(rot.action(1.0) - 2 * SQ2 / math.pi)
    fit = separatrix_fit(osc, "+")
    e2 = abs(fit.phi_coeffs[0] - 4 * SQ2 / math.pi)
    E_grid = np.concatenate([-1 + np.geomspace(1e-6, 1e-1, 12), np.linspace(-0.85, 1 - 1e-4, 40)])
    inf = min(dPdE(osc, float(x)) for x in E_grid)
    e4 = abs(rot.action(100.0) - 10.0)
    detail.update(rotation_E1=fmt(e1), separatrix_limit=fmt(e2), inf_dPdE=f"{inf:.6f}",
                  rotation_E100=fmt(e4))
    assert e1 <= 1e-8
    assert e2 <= 1e-6
    assert abs(inf - 1 / SQ2) <= 1e-3
    assert e4 <= 1e-3


@criterion(4, "separatrix expansion")
def test_criterion_04_separatrix(detail):
    S = PendulumSystem(F0=TrigSeries.cos(-1.0), s0=0.5)
    osc = ActionBranch(S, 1)
    fit = separatrix_fit(osc, "+", window=(1e-6, 0.05))
    ell = separatrix_fit(osc, "-", window=(1e-6, 0.05))
    detail.update(residual=fmt(fit.residual), chi0=f"{fit.chi0:.6f}",
                  lower_bound=f"{fit.chi0_bound:.4f}", elliptic_chi=len(ell.chi_coeffs))
    assert fit.residual <= 1e-5 and ell.residual <= 1e-5
    assert abs(abs(fit.chi0) - SQ2 / (2 * math.pi)) <= 5e-3
    assert ell.chi0 == 0.0 and len(ell.chi_coeffs) == 0
    assert abs(fit.chi0) >= fit.chi0_bound


@criterion(5, "twist baseline")
def test_criterion_05_twist(detail):
    rng = np.random.default_rng(505)
    done = mismatches = 0
    while done < 500:
        n = int(rng.integers(2, 5))
        k = tuple(int(v) for v in rng.integers(-20, 21, n))
        if not any(k) or not is_primitive(k):
            continue
        fr = build_frame(k)
        mismatches += twist_baseline(fr) != Fraction(2 ** n, fr.kappa ** n)
        done += 1
    detail.update(vectors=done, mismatches=mismatches)
    assert mismatches == 0


H2 = Quadratic.identity(2)
TEST_POTENTIAL = AnalyticPotential.from_modes(
    2, 1.0, {(0, 1): E(-1), (1, 0): 0.1 * E(-1), (1, 1): 0.1 * E(-2), (0, 2): 0.3 * E(-2)})
TEST_DOMAIN = Box([0.5, -0.01], [0.8, 0.01])


@criterion(6, "normal form")
def test_criterion_06_normal_form(detail):
    worst = 0.0
    for eps in (1e-6, 1e-7):
        f = StateFunction.from_potential(H2, TEST_POTENTIAL, eps)
        for K in (1, 2, 3):
            _, fK = resonant_split(f, (0, 1), K)
            phi = solve_homological(H2, f, (0, 1), K, TEST_DOMAIN, 0.1)
            res, _ = homological_residual(H2, phi, fK, TEST_DOMAIN)
            worst = max(worst, res)
    runs = bounds = 0
    for eps in (1e-6, 1e-7, 1e-8):
        f = StateFunction.from_potential(H2, TEST_POTENTIAL, eps)
        for K in (1, 2):
            rep = normal_form_iterate(Hamiltonian(H2, f), (0, 1), None, K, TEST_DOMAIN, 0.1, 1.0)
            runs += 1
            ok = (rep.norms["f_star"] <= 2 * rep.theta_star * rep.f_norm
                  and rep.norms["log_low_modes"] <= rep.norms["log_low_modes_bound"])
            bounds += ok and rep.bounds_hold
    # f^K = 0: nothing to remove, identity transform
    f0 = StateFunction.from_cosines(H2, {(0, 1): 1e-6, (0, 3): 1e-7})
    rep0 = normal_form_iterate(Hamiltonian(H2, f0), (0, 1), None, 2, TEST_DOMAIN, 0.1, 1.0)
    Y = np.array([[0.6, 0.0], [0.7, 0.005]])
    X = np.array([[0.4, 1.3], [2.0, -0.7]])
    Yp, Xp = compose_transform(rep0.generators, Y, X)
    identity = bool(np.array_equal(Yp, Y) and np.array_equal(Xp, X))
    detail.update(homological_residual=fmt(worst), bounds_hold=f"{bounds}/{runs}",
                  identity=identity)
    assert worst <= 1e-12
    assert bounds == runs
    assert identity


@criterion(7, "zone covering")
def test_criterion_07_covering(detail):
    p = decoupled_params(2, 5, 10, 0.02)
    rep = covering_check(p, 10 ** 5, seed=7, strict=False)
    neg = covering_check(p, 10 ** 5, seed=7, check_alpha=2 * p.alpha, strict=False)
    detail.update(uncovered=rep.uncovered,
                  nonresonance=rep.nonresonance0_violations + rep.nonresonance1_violations,
                  negative_control=neg.violations)
    assert rep.uncovered == 0
    assert rep.nonresonance0_violations == 0 and rep.nonresonance1_violations == 0
    assert neg.violations > 0


@criterion(8, "double resonance measure")
def test_criterion_08_omega2(detail):
    ratios = []
    for n, K, Kbig, alpha in ((2, 5, 10, 0.02), (2, 3, 6, 0.01), (3, 2, 4, 0.01)):
        est = omega2_measure(decoupled_params(n, K, Kbig, alpha), 10 ** 6, seed=8)
        ratios.append(est.ci_high / est.analytic_bound)
        assert est.estimate <= est.analytic_bound and est.ci_high <= est.analytic_bound
    # alpha^2 law in the unsaturated regime
    lo = omega2_measure(decoupled_params(2, 5, 10, 4e-4), 10 ** 6, seed=8)
    hi = omega2_measure(decoupled_params(2, 5, 10, 1.6e-3), 10 ** 6, seed=8)
    scaling = (hi.estimate / lo.estimate) / 16
    detail.update(max_ci_over_bound=fmt(max(ratios)), alpha_sweep_ratio=f"{scaling:.3f}")
    assert abs(scaling - 1) <= 0.2


@criterion(9, "sublevel lemma")
def test_criterion_09_sublevel(detail):
    rng = np.random.default_rng(909)
    tested = 0
    while tested < 50:
        f, iv = random_test_function(rng)
        m = int(rng.integers(1, 4))
        mu = float(10 ** rng.uniform(-4, -0.5))
        xi = estimate_xi(f, *iv, m)
        if not xi > 0:
            continue
        assert brute_force_sublevel(f, iv, mu) <= sublevel_measure_bound(f, iv, m, xi=xi, mu=mu)
        tested += 1
    lin = brute_force_sublevel(lambda x: x, (-1, 1), 0.01)
    quad = brute_force_sublevel(lambda x: x * x, (-1, 1), 1e-4)
    grid_err = 2 * 2 / 1e5
    detail.update(random_functions=tested, linear=f"{lin:.6f}", quadratic=f"{quad:.6f}")
    assert abs(lin - 0.02) <= grid_err
    assert abs(quad - 0.02) <= grid_err
    assert lin <= sublevel_measure_bound(lambda x: x, (-1, 1), 1, xi=1.0, M=0.0, mu=0.01)
    assert quad <= sublevel_measure_bound(lambda x: x * x, (-1, 1), 2, xi=1.0, M=1.0, mu=1e-4)


@criterion(10, "structure pipeline")
def test_criterion_10_structure(detail):
    # cosine-like potential: the (0, 1) profile is exactly -cos
    f = AnalyticPotential.from_modes(2, 1.0, {(0, 1): -0.5, (1, 0): 0.1 * E(-1),
                                              (1, 1): 0.1 * E(-2)})
    eff = effective_hamiltonian(f, (0, 1), 1e-6, 0.1, TEST_DOMAIN, 0.1, 1.0, 2)
    assert eff.gamma <= 1e-12
    rng = np.random.default_rng(10)
    worst_ratio = worst_sym = 0.0
    for i in range(3):
        ch = IntegratedChart(eff, i, theta=0.01)
        grid = action_grid(ch, 3, 7)
        assert len(grid) == 21
        rep = verify_integrated(ch, grid, n_angles=64, hessian=False)
        worst_ratio = max(worst_ratio, rep.spread_full / rep.budget, rep.spread / rep.budget)
        for _ in range(3):
            p = grid[rng.integers(len(grid))]
            worst_sym = max(worst_sym, symplectic_defect(
                chart_jacobian(ch, p, rng.uniform(0, 2 * np.pi, 2))))
    M = rng.normal(size=(2, 2))
    cippa = cippa_check(eff.L, lambda y: M + M.T + np.diag(np.sin(y)), rng.normal(size=2))
    hans = max(hans_check().values())
    detail.update(spread_over_budget=fmt(worst_ratio), symplectic=fmt(worst_sym),
                  cippa=fmt(cippa), hans=fmt(hans))
    assert worst_ratio <= 10
    assert worst_sym <= 1e-7
    assert cippa <= 1e-10 and hans <= 1e-10


@criterion(11, "non-torus budget")
def test_criterion_11_budget(detail):
    eps = (1e-40, 1e-60, 1e-80)
    reps = [nontorus_budget(e, strict=False) for e in eps]
    again = [nontorus_budget(e, strict=False) for e in eps]
    totals = [float(r.total) for r in reps]
    same = all(json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
               for a, b in zip(reps, again))
    detail.update(log_totals=" ".join(f"{t:.2f}" for t in totals),
                  exponent_a=" ".join(f"{float(r.exponent_a):.2f}" for r in reps),
                  identical=same)
    assert totals[0] > totals[1] > totals[2]
    assert all(math.isfinite(float(r.exponent_a)) for r in reps)
    assert same
