"""Integrable structure near a simple resonance.

The chain of maps realized here is

    (p, q) --linear--> (P, Q) --F*--> (J'', psi'') --Phi_lin--> (J', psi')
           --Phi1--> (I', phi'),

where ``F*`` is the action-angle map of the auxiliary one-degree-of-freedom
Hamiltonian ``H*(J'', psi_n'') = J_n''^2 + G(L J'', psi_n'')``. Energies come
from the pendulum module (through the canonical pendulum form of ``H*``) and
angles from the flow of ``H*``; the drift of the fast angles is corrected by
its orbit average so that the composite map is exactly symplectic.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import constants
from .errors import (AssumptionFailure, DegenerateProfile, DomainError, IntegrationFailure,
                     InvalidInput)
from .lattice import as_int_vector, build_frame, norm1
from .normalform import (Hamiltonian, Lattice, Quadratic, StateFunction, normal_form_iterate,
                         project_lattice)
from .pendulum import (ActionBranch, PendulumSystem, canonical_pendulum_form, dPdE, energy_of_action)
from .potential import TrigSeries, genericity_threshold, lattice_projection, morse_analyze

ODE_RTOL = 1e-12
ODE_ATOL = 1e-13
ORBIT_TOL = 1e-9
FD_STEP = 1e-3


# ---------------------------------------------------------------------------
# effective potentials

class ProfilePotential:
    """Action independent effective potential ``G(I, t) = F(t)``."""

    def __init__(self, n, F):
        self.n = n
        self.F = F

    def value(self, I, t):
        return self.F(np.asarray(t, dtype=float))

    def d_t(self, I, t):
        return self.F(np.asarray(t, dtype=float), 1)

    def grad_I(self, I, t):
        return np.zeros((np.size(t), self.n))

    def hess_I(self, I, t):
        return np.zeros((np.size(t), self.n, self.n))

    def slice(self, Phat, L, R):
        modes = np.array(sorted(self.F.coeffs), dtype=float)
        C = np.array([self.F.coeffs[j] for j in sorted(self.F.coeffs)], dtype=complex)
        data = np.zeros((self.n + 1, len(modes), 1), dtype=complex)
        data[0, :, 0] = C
        return _Slice(modes, data, R, 0.0)


class NormalFormPotential:
    """``G(I, t) = scale * g(lam I, (t + phase) k / kappa)`` for a resonant ``g``."""

    def __init__(self, g, k, lam, scale, phase=0.0):
        self.g = g
        self.n = g.n
        self.k = np.asarray(k, dtype=float)
        self.kappa = float(self.k @ self.k)
        self.lam = lam
        self.scale = scale
        self.phase = phase
        self.dg = [g.derivative(j) for j in range(self.n)]
        self.ddg = [[self.dg[i].derivative(j) for j in range(self.n)] for i in range(self.n)]
        self._units = [tuple(int(i == j) for i in range(self.n)) for j in range(self.n)]

    def _points(self, I, t):
        I = np.atleast_2d(np.asarray(I, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        I, t = np.broadcast_arrays(I, t[:, None])
        t = t[:, 0]
        return self.lam * I, np.outer(t + self.phase, self.k / self.kappa)

    def value(self, I, t):
        Y, X = self._points(I, t)
        return self.scale * self.g.evaluate(Y, X)

    def d_t(self, I, t):
        Y, X = self._points(I, t)
        out = np.zeros(len(Y))
        for j in range(self.n):
            if self.k[j]:
                out += self.k[j] / self.kappa * self.g.evaluate(Y, X, xderiv=self._units[j])
        return self.scale * out

    def grad_I(self, I, t):
        Y, X = self._points(I, t)
        return self.scale * self.lam * np.stack([d.evaluate(Y, X) for d in self.dg], axis=1)

    def mode_coefficients(self, I):
        """``{j: (c_j, grad_I c_j)}`` with ``G(I, t) = sum_j c_j(I) e^{ijt}``."""
        Y = self.lam * np.atleast_2d(np.asarray(I, dtype=float))
        vals = self.g.coefficient_values(Y)
        grads = [d.coefficient_values(Y) for d in self.dg]
        out = {}
        for m, v in vals.items():
            j = int(round(float(np.asarray(m, dtype=float) @ self.k) / self.kappa))
            ph = np.exp(1j * j * self.phase) * self.scale
            gr = np.stack([gd.get(m, np.zeros(len(Y))) for gd in grads], axis=1)
            c0, g0 = out.get(j, (0.0, 0.0))
            out[j] = (c0 + ph * v, g0 + ph * self.lam * gr)
        return out

    def slice(self, Phat, L, R, degree=48):
        """Chebyshev-in-``J_n`` representation of ``G(L (Phat, J_n), t)`` and of
        its ``J''`` gradient on ``|J_n| <= R``."""
        nodes = np.cos(np.pi * (np.arange(degree + 1) + 0.5) / (degree + 1))
        J = np.empty((degree + 1, self.n))
        J[:, :-1] = Phat
        J[:, -1] = R * nodes
        co = self.mode_coefficients(J @ L.T)
        modes = np.array(sorted(co), dtype=float)
        V = np.polynomial.chebyshev.chebvander(nodes, degree)
        data = np.empty((self.n + 1, len(modes), degree + 1), dtype=complex)
        for a, j in enumerate(sorted(co)):
            c, g = co[j]
            gJ = g @ L
            rows = [c] + [gJ[:, i] for i in range(self.n)]
            for f, row in enumerate(rows):
                data[f, a] = np.linalg.solve(V, row.real) + 1j * np.linalg.solve(V, row.imag)
        sl = _Slice(modes, data, R, 0.0)
        # accuracy against direct evaluation
        rng = np.random.default_rng(7)
        Jt = np.empty((16, self.n))
        Jt[:, :-1] = Phat
        Jt[:, -1] = rng.uniform(-R, R, 16)
        tt = rng.uniform(0, 2 * np.pi, 16)
        I = Jt @ L.T
        exact = np.column_stack([self.value(I, tt), self.grad_I(I, tt) @ L, self.d_t(I, tt)])
        approx = np.array([np.concatenate([[sl.value(a, b)], sl.grad(a, b), [sl.d_t(a, b)]])
                           for a, b in zip(Jt[:, -1], tt)])
        sl.error = float(np.abs(exact - approx).max())
        return sl

    def hess_I(self, I, t):
        Y, X = self._points(I, t)
        H = np.empty((len(Y), self.n, self.n))
        for i in range(self.n):
            for j in range(self.n):
                H[:, i, j] = self.ddg[i][j].evaluate(Y, X)
        return self.scale * self.lam ** 2 * H


class _Slice:
    """``G`` and its ``J''`` gradient at fixed ``J_hat`` as Chebyshev series in
    ``J_n`` (rows: value, then gradient components) times ``e^{ijt}``."""

    def __init__(self, modes, data, R, error):
        self.modes = modes
        self.data = data
        self.R = R
        self.error = error
        self.n = data.shape[0] - 1
        self._orders = np.arange(data.shape[2])

    def _amplitudes(self, Jn):
        deg = self.data.shape[2] - 1
        if deg == 0:
            return self.data[:, :, 0]
        x = Jn / self.R
        if abs(x) <= 1:
            T = np.cos(self._orders * math.acos(x))
        else:
            T = np.polynomial.chebyshev.chebvander(x, deg)[0]
        return self.data @ T

    def pieces(self, Jn, t):
        """``(G, dG/dJ'', dG/dt)`` at one point."""
        A = self._amplitudes(Jn)
        e = np.exp(1j * self.modes * t)
        vals = (A @ e).real
        dt = float((A[0] @ (1j * self.modes * e)).real)
        return float(vals[0]), vals[1:], dt

    def _rows(self, row, Jn, t, deriv=0):
        Jn = np.asarray(Jn, dtype=float)
        t = np.asarray(t, dtype=float)
        Jn, t = np.broadcast_arrays(Jn, t)
        C = self.data[row]
        deg = C.shape[1] - 1
        if deg == 0:
            A = np.repeat(C[:, :1] * (deriv == 0), Jn.size, axis=1)
        else:
            if deriv:
                C = np.polynomial.chebyshev.chebder(C, deriv, scl=1.0 / self.R, axis=1)
            A = C @ np.polynomial.chebyshev.chebvander(Jn.ravel() / self.R, C.shape[1] - 1).T
        return (A * np.exp(1j * np.outer(self.modes, t.ravel()))).sum(axis=0).real.reshape(Jn.shape)

    def values(self, Jn, t):
        """Vectorized ``G``."""
        return self._rows(0, Jn, t)

    def dJn(self, Jn, t):
        return self._rows(self.n, Jn, t)

    def d2Jn(self, Jn, t):
        return self._rows(self.n, Jn, t, deriv=1)

    def value(self, Jn, t):
        return self.pieces(Jn, t)[0]

    def grad(self, Jn, t):
        return self.pieces(Jn, t)[1]

    def d_t(self, Jn, t):
        return self.pieces(Jn, t)[2]


def _sup_bound(f, domain, r):
    """Rigorous bound of ``sup |f|`` over real angles and ``D_r``."""
    if f.is_zero():
        return 0.0
    _, b = f.term_bounds(domain, r)
    return float(b.sum())


# ---------------------------------------------------------------------------
# effective Hamiltonian

@dataclass
class EffectiveHamiltonian:
    """``H(I', phi') = |I'|^2 / kappa + G(I', k.phi')`` with bookkeeping."""

    frame: object
    potential: object
    F0: TrigSeries
    s0: float
    R0: float
    Jhat_box: tuple
    eta_star: float = 0.0
    remainder_norm: float = 0.0
    remainder: object = None
    lam: float = 1.0
    delta_k: float = 1.0
    epsilon: float = 0.0
    regime: str = "A2"
    gamma: float = math.nan
    K_threshold: float = math.nan
    report: object = field(default=None, repr=False)

    def __post_init__(self):
        self.k = self.frame.k
        self.n = len(self.k)
        self.kappa = self.frame.kappa
        self.L = self.frame.L_float()
        self.Linv = self.frame.L_inverse_float()
        self.U = np.array([[float(v) for v in row] for row in self.frame.U])
        self.Uinv = np.linalg.inv(self.U)
        self.kvec = np.asarray(self.k, dtype=float)

    # -- evaluation ----------------------------------------------------
    def H(self, I, phi, full=False):
        I = np.atleast_2d(np.asarray(I, dtype=float))
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        t = phi @ self.kvec
        out = (I * I).sum(axis=1) / self.kappa + self.potential.value(I, t)
        if full and self.remainder is not None:
            out = out + self.remainder(I, phi)
        return out

    def Fstar(self, J2, t):
        """``G(L J'', t)``."""
        return self.potential.value(np.atleast_2d(J2) @ self.L.T, t)

    def auxiliary(self, J2, t):
        """``H*(J'', t) = J_n''^2 + G(L J'', t)``."""
        J2 = np.atleast_2d(np.asarray(J2, dtype=float))
        return J2[:, -1] ** 2 + self.Fstar(J2, t)

    def hhat(self, Phat):
        return float(self.frame.hhat(tuple(float(v) for v in Phat)))

    def to_json(self):
        return {"k": list(self.k), "kappa": self.kappa, "lambda": self.lam,
                "delta_k": self.delta_k, "epsilon": self.epsilon, "regime": self.regime,
                "gamma": self.gamma, "K_threshold": self.K_threshold,
                "eta_star": self.eta_star, "remainder_norm": self.remainder_norm,
                "R0": self.R0, "s0": self.s0, "Jhat_box": [list(b) for b in self.Jhat_box],
                "F0": self.F0.to_json(),
                "normal_form": self.report.to_json() if self.report is not None else None}


def exact_pendulum(k, F0, Jhat_box, R0=8.0, s0=1.0):
    """Effective Hamiltonian with ``G(I, t) = F0(t)`` exactly."""
    frame = build_frame(as_int_vector(k))
    md = morse_analyze(F0, s0)
    return EffectiveHamiltonian(frame=frame, potential=ProfilePotential(len(frame.k), F0), F0=F0,
                                s0=s0, R0=R0, Jhat_box=tuple(tuple(b) for b in Jhat_box),
                                regime="A3" if md.cosine_like else "A2", gamma=md.gamma)


def effective_hamiltonian(f, k, epsilon, delta, domain, r, s, K, alpha=None,
                          c=constants.GENERICITY_C, eta_limit=None):
    """Normal form on ``Z k`` followed by the rescaling to the effective Hamiltonian.

    ``f`` is the normalized potential (``|f|_s <= 1``); ``domain`` a box in
    the original actions around the resonance. Returns an
    :class:`EffectiveHamiltonian` whose potential is ``(g/epsilon)/delta_k``
    evaluated at ``lambda I'``.
    """
    k = as_int_vector(k)
    frame = build_frame(k)
    n = len(k)
    h = Quadratic.identity(n)
    F = StateFunction.from_potential(h, f, epsilon)
    report = normal_form_iterate(Hamiltonian(h, F), k, alpha, K, domain, r, s)
    Ks = genericity_threshold(f.s, delta, c)
    fk = abs(f.coefficient(k))
    nk = norm1(k)
    delta_k = 1.0 if nk <= Ks else 2 * fk
    kap = frame.kappa
    lam = math.sqrt(2 * delta_k * epsilon / kap)
    prof = lattice_projection(f, k)
    phase = prof.phase_shift if nk > Ks else 0.0
    F0 = prof.series.shifted(phase).scaled(1.0 / delta_k)
    F0 = TrigSeries({j: c for j, c in F0.coeffs.items() if j != 0})
    scale = 1.0 / (delta_k * epsilon)
    pot = NormalFormPotential(report.g, k, lam, scale, phase)
    md = morse_analyze(F0, f.s)
    regime = "A3" if nk > Ks else "A2"
    if regime == "A3" and not md.cosine_like:
        raise AssumptionFailure("cosine-like regime selected but the profile is not cosine-like",
                                report={"gamma": md.gamma})
    # (A1): distance of the effective potential from F0 on the complex domain
    dev = project_lattice(report.f_star, Lattice(k))
    eta_star = (_strip_bound(dev, domain, report.r_star, k, f.s)
                + report.norms["pruned_mass"]) * scale
    limit = md.beta / 8 if eta_limit is None else eta_limit
    if eta_star > limit:
        raise AssumptionFailure(f"eta_* = {eta_star:.3e} exceeds {limit:.3e}",
                                report={"eta_star": eta_star, "limit": limit})
    fss = report.f_starstar
    rem_norm = _sup_bound(fss, domain, 0.0) * scale + report.norms["pruned_mass"] * scale

    def remainder(I, phi, _f=fss, _lam=lam, _sc=scale, _ph=phase, _k=np.asarray(k, float)):
        return _sc * _f.evaluate(_lam * np.atleast_2d(I), np.atleast_2d(phi) + _ph * _k / kap)

    lo, hi = domain.lo / lam, domain.hi / lam
    J_lo, J_hi = _box_image(frame.L_inverse_float(), lo, hi)
    R0 = float(min(abs(J_lo[-1]), abs(J_hi[-1])))
    Jhat_box = tuple((float(a), float(b)) for a, b in zip(J_lo[:-1], J_hi[:-1]))
    return EffectiveHamiltonian(frame=frame, potential=pot, F0=F0, s0=f.s, R0=R0,
                                Jhat_box=Jhat_box, eta_star=eta_star, remainder_norm=rem_norm,
                                remainder=remainder, lam=lam, delta_k=delta_k, epsilon=epsilon,
                                regime=regime, gamma=md.gamma, K_threshold=Ks, report=report)


def _strip_bound(f, domain, r, k, s0):
    """Rigorous bound of ``sup |f|`` over ``D_r`` and angles with ``|Im k.x| <= s0 kappa``.

    Each resonant mode ``m = j k`` contributes its term bound times ``e^{|j| s0}``.
    """
    if f.is_zero():
        return 0.0
    keys, b = f.term_bounds(domain, r)
    k = np.asarray(k, dtype=float)
    kap = float(k @ k)
    return float(sum(v * math.exp(abs(float(np.asarray(key[0]) @ k)) / kap * s0)
                     for key, v in zip(keys, b)))


def _box_image(M, lo, hi):
    corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij"))
    corners = corners.reshape(len(lo), -1).T @ M.T
    return corners.min(axis=0), corners.max(axis=0)


# ---------------------------------------------------------------------------
# integrating chart

@dataclass
class Orbit:
    Phat: tuple
    Pn: float
    E: float
    T: float
    sol: object
    delta_psi: float
    omega_hat: np.ndarray
    sign: int
    closure: float
    action_error: float = 0.0


class IntegratedChart:
    """Action-angle chart ``Psi^i`` of one branch."""

    def __init__(self, eff, index, theta=0.0, eta_star=None):
        self.eff = eff
        self.index = index
        self.theta = theta
        self.n = eff.n
        self._systems = {}
        self._orbits = {}
        self._slices = {}
        md = morse_analyze(eff.F0, eff.s0)
        self.N = md.N
        self._base = ActionBranch(PendulumSystem(F0=eff.F0, s0=eff.s0, R0=eff.R0, morse=md), index)
        if not 0 <= index <= 2 * self.N:
            raise InvalidInput(f"branch index {index} outside 0..{2 * self.N}")
        self.kind = "rotation" if index in (0, 2 * self.N) else "oscillation"
        self.eta_star = eff.eta_star if eta_star is None else eta_star
        sysref = self.branch(self.Phat_center())
        self.psi_ref = 0.0 if self.kind == "rotation" else float(sysref.system.x0[index])
        lo, hi = sysref.theta_window(self.Phat_center())
        if not lo < hi:
            raise DegenerateProfile(f"branch {index} window empty after the 2 theta exclusion",
                                    witness=(lo, hi))

    # -- pendulum pieces -----------------------------------------------
    def Phat_center(self):
        return tuple(0.5 * (a + b) for a, b in self.eff.Jhat_box)

    def branch(self, Phat):
        key = tuple(float(v) for v in Phat)
        if key not in self._systems:
            F0 = self.eff.F0
            sl = self.slice(key)

            def Gstar(Yhat, yn, x):
                return sl.values(yn, x) - F0(np.asarray(x, dtype=float))

            def dGstar(Yhat, yn, x):
                return sl.dJn(yn, x)

            def d2Gstar(Yhat, yn, x):
                return sl.d2Jn(yn, x)

            cf = canonical_pendulum_form(F0, Gstar, Yhat=key, r0=max(1.0, 6 * math.sqrt(
                max(self.eta_star, 0.0))), s0=self.eff.s0, eta_star=self.eta_star,
                dGstar=dGstar, d2Gstar=d2Gstar, R0=self.eff.R0)
            self._systems[key] = (cf, ActionBranch(cf.system, self.index, self.theta))
        return self._systems[key][1]

    def canonical_form(self, Phat):
        self.branch(Phat)
        return self._systems[tuple(float(v) for v in Phat)][0]

    def action_limits(self, Phat):
        """``(a_-, a_+)`` of the theta-window at ``Phat`` from orbit actions."""
        key = ("limits", tuple(float(v) for v in Phat))
        if key not in self._orbits:
            lo, hi = self.branch(Phat).theta_window(key[1])
            vals = []
            for E in (lo, hi):
                if self.kind == "oscillation" and self.index % 2 == 1 and E == lo:
                    vals.append(0.0)
                elif not math.isfinite(E):
                    vals.append(-math.inf if self.index == 0 else math.inf)
                else:
                    vals.append(self._integrate_orbit(key[1], E)[2])
            self._orbits[key] = (min(vals), max(vals))
        return self._orbits[key]

    def energy(self, P):
        """``E(P)`` from the orbit of ``H*`` with action ``P``."""
        return self.orbit(P).E

    def pendulum_energy(self, P):
        """``E(P)`` from the canonical pendulum form (quadrature and inversion)."""
        P = tuple(float(v) for v in P)
        return energy_of_action(self.branch(P[:-1]), P[-1], P[:-1])

    def h(self, p):
        """Integrated Hamiltonian ``h^(i)(p)``."""
        P = self._to_P(np.asarray(p, dtype=float))
        return self.energy(P) + self.eff.hhat(P[:-1])

    # -- coordinates ---------------------------------------------------
    def _to_P(self, p):
        return self.eff.Uinv @ p if self.kind == "rotation" else p

    def _to_Q(self, q):
        return q @ self.eff.U if self.kind == "rotation" else q

    # -- orbits --------------------------------------------------------
    def slice(self, Phat):
        key = tuple(float(v) for v in Phat)
        if key not in self._slices:
            self._slices[key] = self.eff.potential.slice(np.asarray(key), self.eff.L,
                                                             1.25 * self.eff.R0)
        return self._slices[key]

    def _rhs(self, Phat):
        sl = self.slice(Phat)
        n = self.n

        def rhs(t, z):
            _, g, dt = sl.pieces(z[0], z[1])
            out = np.empty(n + 1)
            out[0] = -dt
            out[1] = 2 * z[0] + g[-1]
            out[2:] = g[:-1]
            return out
        return rhs

    def _level(self, Phat, E, psi, sign):
        sl = self.slice(Phat)
        Fv = sl.value(0.0, psi)
        if E <= Fv:
            raise DomainError("energy below the potential at the reference angle")
        x = sign * math.sqrt(E - Fv)
        for _ in range(50):
            g, dg, _ = sl.pieces(x, psi)
            step = (x * x + g - E) / (2 * x + dg[-1])
            x -= step
            if abs(step) <= 1e-16 * max(1.0, abs(x)):
                break
        return x

    def _integrate_orbit(self, Phat, E):
        """One period of ``H*`` at energy ``E`` from the reference section.

        Returns ``(sol, T, action, J0)``; the action is the loop integral
        ``(1/2pi) oint J_n'' dpsi_n''``, the last component of the state.
        """
        direction = -1 if self.index == 0 else 1
        J0 = self._level(Phat, E, self.psi_ref, direction)
        delta = 0.0 if self.kind == "oscillation" else 2 * math.pi * direction
        base = self._base
        try:
            T_est = 2 * math.pi * abs(dPdE(base, E, ()))
        except (DomainError, AssumptionFailure):
            T_est = None
        rhs0 = self._rhs(Phat)
        n = self.n

        def rhs(t, z):
            out = np.empty(n + 2)
            out[:n + 1] = rhs0(t, z[:n + 1])
            out[n + 1] = z[0] * out[1]
            return out

        z0 = np.concatenate([[J0, self.psi_ref], np.zeros(n)])
        target = self.psi_ref + delta

        def crossing(t, z):
            return z[1] - target
        t_end = 1.2 * T_est if T_est else 1e3
        sol = solve_ivp(rhs, (0.0, t_end), z0, method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL,
                        dense_output=True)
        if not sol.success:
            raise IntegrationFailure(f"orbit integration failed: {sol.message}", worst=(Phat, E))
        psi = sol.y[1] - target
        if self.kind == "oscillation":
            # first upward crossing after the orbit has left the section
            idx = [j for j in range(1, len(psi)) if psi[j - 1] < 0 <= psi[j] and sol.t[j] > 0]
        else:
            idx = [j for j in range(1, len(psi)) if psi[j - 1] * psi[j] <= 0 and psi[j - 1] != 0]
        if not idx:
            raise IntegrationFailure("orbit did not close within the integration window",
                                     worst=(Phat, E))
        j = idx[0]
        T = brentq(lambda t: float(sol.sol(t)[1]) - target, sol.t[j - 1], sol.t[j],
                   xtol=1e-14, rtol=1e-15)
        area = float(sol.sol(T)[-1])
        action = area / (2 * math.pi) if self.kind == "oscillation" else area / delta
        return sol, T, action, J0, delta

    def orbit(self, P):
        """Orbit of ``H*`` with action ``P`` (Newton on the energy with
        ``dP/dE = +-T / 2pi``, started from the unperturbed pendulum)."""
        P = tuple(float(v) for v in P)
        if P in self._orbits:
            return self._orbits[P]
        Phat, Pn = P[:-1], P[-1]
        sign = -1 if self.index == 0 else 1
        E = energy_of_action(self._base, Pn, ())
        scale = max(1.0, abs(Pn))
        best = (math.inf, E)
        for _ in range(20):
            sol, T, act, J0, delta = self._integrate_orbit(Phat, E)
            best = min(best, (abs(act - Pn), E))
            if best[0] <= 1e-12 * scale:
                break
            step = (act - Pn) / (sign * T / (2 * math.pi))
            E -= step
            if abs(step) <= 1e-14 * max(1.0, abs(E)):
                break
        # the action is only known to the ODE tolerance: keep the best iterate
        if best[0] > 1e-10 * scale:
            raise IntegrationFailure("energy iteration for the orbit did not converge", worst=P)
        E = best[1]
        sol, T, act, J0, delta = self._integrate_orbit(Phat, E)
        end = sol.sol(T)
        orb = Orbit(Phat=Phat, Pn=Pn, E=E, T=T, sol=sol, delta_psi=delta,
                    omega_hat=end[2:self.n + 1] / T, sign=sign, closure=abs(end[0] - J0),
                    action_error=abs(act - Pn))
        if len(self._orbits) > 512:
            self._orbits.pop(next(iter(self._orbits)))
        self._orbits[P] = orb
        return orb

    # -- maps ----------------------------------------------------------
    def F_star(self, P, Q):
        """``(J'', psi'')`` for one action vector ``P`` and angles ``Q`` of shape ``(m, n)``."""
        orb = self.orbit(P)
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        t = orb.sign * Q[:, -1] * orb.T / (2 * math.pi)
        m = np.floor(t / orb.T)
        tau = t - m * orb.T
        Z = orb.sol.sol(tau)
        J2 = np.empty((len(Q), self.n))
        J2[:, :-1] = orb.Phat
        J2[:, -1] = Z[0]
        psi = np.empty((len(Q), self.n))
        psi[:, -1] = Z[1] + m * orb.delta_psi
        psi[:, :-1] = Q[:, :-1] + Z[2:self.n + 1].T - np.outer(tau, orb.omega_hat)
        return J2, psi

    def __call__(self, p, q):
        """``Psi^i(p, q) = (I', phi')`` for one ``p`` and angles ``q`` of shape ``(m, n)``."""
        p = np.asarray(p, dtype=float)
        q = np.atleast_2d(np.asarray(q, dtype=float))
        P = self._to_P(p)
        Q = self._to_Q(q)
        J2, psi = self.F_star(P, Q)
        return J2 @ self.eff.L.T, psi @ self.eff.Linv

    def inverse(self, I, phi):
        """``(p, q)`` with ``Psi^i(p, q) = (I', phi')`` for one point of the cell."""
        eff = self.eff
        J2 = eff.Linv @ np.asarray(I, dtype=float)
        psi2 = np.asarray(phi, dtype=float) @ eff.L
        Phat = tuple(float(v) for v in J2[:-1])
        sl = self.slice(Phat)
        E = J2[-1] ** 2 + sl.value(J2[-1], psi2[-1])
        Pn = self._integrate_orbit(Phat, E)[2]
        orb = self.orbit(Phat + (Pn,))
        T, sol = orb.T, orb.sol
        if self.kind == "rotation":
            d = orb.delta_psi
            off = math.remainder((psi2[-1] - self.psi_ref) * np.sign(d), 2 * math.pi) % (2 * math.pi)
            target = self.psi_ref + np.sign(d) * off
            tau = brentq(lambda t: float(sol.sol(t)[1]) - target, 0.0, T, xtol=1e-14)
            m = round((psi2[-1] - float(sol.sol(tau)[1])) / d)
        else:
            ts = np.linspace(0.0, T, 1025)
            Z = sol.sol(ts)
            dpsi = Z[1] - psi2[-1]
            roots = []
            for j in np.nonzero(dpsi[:-1] * dpsi[1:] <= 0)[0]:
                a, b = ts[j], ts[j + 1]
                r = a if dpsi[j] == 0 else brentq(lambda t: float(sol.sol(t)[1]) - psi2[-1], a, b,
                                                  xtol=1e-14)
                roots.append(r)
            if not roots:
                raise DomainError("point is not on an orbit of this branch")
            tau = min(roots, key=lambda t: abs(float(sol.sol(t)[0]) - J2[-1]))
            m = round((psi2[-1] - float(sol.sol(tau)[1])) / (2 * math.pi))
        Z = sol.sol(tau)
        t = tau + (m * T if self.kind == "rotation" else 0.0)
        Q = np.empty(self.n)
        Q[-1] = orb.sign * 2 * math.pi * t / T
        if self.kind == "oscillation":
            Q[-1] += 2 * math.pi * m
        Q[:-1] = psi2[:-1] - Z[2:self.n + 1] + orb.omega_hat * tau
        P = np.array(Phat + (Pn,))
        if self.kind == "rotation":
            return eff.U @ P, Q @ eff.Uinv
        return P, Q

    def contains_action(self, p, Phat_box=True):
        """Whether ``p`` lies in ``B^i(theta)``."""
        P = self._to_P(np.asarray(p, dtype=float))
        if Phat_box and any(not a <= v <= b for v, (a, b) in zip(P[:-1], self.eff.Jhat_box)):
            return False
        lo, hi = self.action_limits(tuple(P[:-1]))
        return bool(lo <= P[-1] <= hi)

    def to_json(self):
        return {"index": self.index, "kind": self.kind, "theta": self.theta,
                "psi_ref": self.psi_ref, "N": self.N}


def integrating_chart(eff, index, theta=0.0):
    return IntegratedChart(eff, index, theta)


# ---------------------------------------------------------------------------
# verification

def action_grid(chart, n_hat=3, n_act=7, margin=0.1):
    """``n_hat x n_act`` points of ``B^i(theta)`` (in ``p`` coordinates)."""
    eff = chart.eff
    pts = []
    hats = []
    for j in range(n_hat):
        frac = 0.5 if n_hat == 1 else margin + (1 - 2 * margin) * j / (n_hat - 1)
        hats.append(tuple(a + frac * (b - a) for a, b in eff.Jhat_box))
    for Phat in hats:
        a, b = chart.action_limits(Phat)
        if not math.isfinite(b):
            b = a + 4.0
        for Pn in np.linspace(a + margin * (b - a), b - margin * (b - a), n_act):
            P = np.array(list(Phat) + [Pn])
            pts.append(eff.U @ P if chart.kind == "rotation" else P)
    return np.array(pts)


@dataclass
class IntegrationReport:
    index: int
    spread: float
    spread_full: float
    h_mismatch: float
    budget: float
    numerical_budget: float
    remainder_norm: float
    worst: tuple
    closure: float
    hessian_norm: float = math.nan
    hessian_bound: float = math.nan

    @property
    def passed(self):
        return bool(self.spread <= 10 * self.budget and self.spread_full <= 10 * self.budget)

    def to_json(self):
        return {"index": self.index, "spread": self.spread, "spread_full": self.spread_full,
                "h_mismatch": self.h_mismatch, "budget": self.budget,
                "numerical_budget": self.numerical_budget,
                "remainder_norm": self.remainder_norm, "worst": list(self.worst),
                "closure": self.closure, "hessian_norm": self.hessian_norm,
                "hessian_bound": self.hessian_bound, "passed": self.passed}


def verify_integrated(chart, p_grid=None, n_angles=64, seed=0, strict=False, hessian=True):
    """Spread over ``q`` of ``H(Psi^i(p, q))`` on a ``p`` grid.

    The budget adds the orbit tolerance, the quadrature and inversion
    tolerances (scaled by the energy) and the remainder norm; the spread of
    the Hamiltonian including the remainder is reported as ``spread_full``.
    """
    eff = chart.eff
    if p_grid is None:
        p_grid = action_grid(chart)
    rng = np.random.default_rng(seed)
    Qn = 2 * np.pi * np.arange(n_angles) / n_angles
    spread = spread_full = mismatch = closure = 0.0
    worst = ()
    Escale = 1.0
    for p in p_grid:
        q = np.empty((n_angles, chart.n))
        q[:, :-1] = rng.uniform(0, 2 * np.pi, (1, chart.n - 1))
        q[:, -1] = Qn
        if chart.kind == "rotation":
            q = q @ np.linalg.inv(eff.U)
        I, phi = chart(p, q)
        Hv = eff.H(I, phi)
        Hf = eff.H(I, phi, full=True)
        hp = chart.h(p)
        sp = float(Hv.max() - Hv.min())
        spread_full = max(spread_full, float(Hf.max() - Hf.min()))
        mismatch = max(mismatch, float(np.abs(Hv - hp).max()))
        closure = max(closure, chart.orbit(tuple(chart._to_P(p))).closure)
        Escale = max(Escale, abs(hp))
        if sp >= spread:
            spread, worst = sp, tuple(float(v) for v in p)
    fit = max((sl.error for sl in chart._slices.values()), default=0.0)
    numerical = ORBIT_TOL + 1e-12 * Escale + 2 * fit
    budget = numerical + eff.remainder_norm
    rep = IntegrationReport(index=chart.index, spread=spread, spread_full=spread_full,
                            h_mismatch=mismatch, budget=budget, numerical_budget=numerical,
                            remainder_norm=eff.remainder_norm, worst=worst, closure=closure)
    if hessian and chart.theta > 0:
        rep.hessian_norm = hessian_norm(chart, p_grid[len(p_grid) // 2])
        rep.hessian_bound = constants.structure_constant(eff.regime) / chart.theta
    if strict and not rep.passed:
        raise IntegrationFailure(f"spread {spread:.3e} exceeds 10x budget {budget:.3e}",
                                 worst=worst)
    return rep


def _fd4(fun, x, j, h):
    e = np.zeros_like(x)
    e[j] = h
    return (-fun(x + 2 * e) + 8 * fun(x + e) - 8 * fun(x - e) + fun(x - 2 * e)) / (12 * h)


def hessian_norm(chart, p, h=FD_STEP):
    """Spectral norm of ``d^2 h^(i)`` at ``p`` by nested fourth order differences."""
    p = np.asarray(p, dtype=float)
    n = len(p)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = _fd4(lambda x: _fd4(chart.h, x, j, h), p, i, h)
    return float(np.linalg.norm(0.5 * (H + H.T), 2))


def chart_jacobian(chart, p, q, h=FD_STEP):
    """Jacobian of ``Psi^i`` at ``(p, q)`` by fourth order central differences."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(p)

    def F(z):
        I, phi = chart(z[:n], z[n:][None, :])
        return np.concatenate([I[0], phi[0]])
    z = np.concatenate([p, q])
    return np.stack([_fd4(F, z, j, h) for j in range(2 * n)], axis=1)


def projection_check(chart, samples=20, seed=0):
    """Two-sided sampling of ``c^i(theta) = Psi^i(B^i(theta) x T^n)``.

    Forward: images of ``B^i(theta)`` points have energies in the theta-window
    of the branch. Backward: points of the cell (energy in the window, on the
    side of the branch) pull back to ``B^i(theta)`` and ``Psi^i`` of the
    pull-back returns the point. Returns the failure counts and the largest
    round-trip error.
    """
    rng = np.random.default_rng(seed)
    eff = chart.eff
    n = chart.n
    fwd = bwd = 0
    err = 0.0
    grid = action_grid(chart, n_hat=2, n_act=max(2, samples // 2), margin=0.02)
    for p in grid:
        q = rng.uniform(0, 2 * np.pi, (1, n))
        I, phi = chart(p, q)
        J2 = eff.Linv @ I[0]
        E = eff.auxiliary(J2, np.array([phi[0] @ eff.kvec]))[0]
        lo, hi = chart.branch(tuple(J2[:-1])).theta_window(tuple(J2[:-1]))
        if not lo - 1e-9 <= E <= hi + 1e-9:
            fwd += 1
    Phat = chart.Phat_center()
    lo, hi = chart.branch(Phat).theta_window(Phat)
    if not math.isfinite(hi):
        hi = lo + 4.0
    direction = -1 if chart.index == 0 else 1
    for _ in range(samples):
        E = rng.uniform(lo, hi)
        psi_n = chart.psi_ref + (rng.uniform(-0.5, 0.5) if chart.kind == "oscillation"
                                 else rng.uniform(0, 2 * np.pi))
        try:
            Jn = chart._level(Phat, E, psi_n, direction * (1 if rng.random() < 0.5 or
                                                           chart.kind == "rotation" else -1))
        except DomainError:
            continue
        J2 = np.array(list(Phat) + [Jn])
        psi2 = np.concatenate([rng.uniform(0, 2 * np.pi, n - 1), [psi_n]])
        I, phi = eff.L @ J2, psi2 @ eff.Linv
        p, q = chart.inverse(I, phi)
        if not chart.contains_action(p, Phat_box=False):
            bwd += 1
        I2, phi2 = chart(p, q[None, :])
        dphi = np.remainder(phi2[0] - phi + np.pi, 2 * np.pi) - np.pi
        err = max(err, float(np.abs(I2[0] - I).max()), float(np.abs(dphi).max()))
    return {"forward_failures": fwd, "backward_failures": bwd, "roundtrip_error": err}


def symplectic_defect(J):
    n2 = J.shape[0]
    n = n2 // 2
    Om = np.zeros((n2, n2))
    Om[:n, n:] = np.eye(n)
    Om[n:, :n] = -np.eye(n)
    return float(np.abs(J.T @ Om @ J - Om).max())


def group_shape_defect(chart, P, Q, h=FD_STEP):
    """Deviation of ``F*`` from the group shape: ``J_hat = P_hat``, the slow
    pair independent of ``Q_hat`` and ``psi_hat - Q_hat`` independent of ``Q_hat``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = len(P)

    def F(z):
        J2, psi = chart.F_star(tuple(z[:n]), z[n:][None, :])
        return np.concatenate([J2[0], psi[0]])
    z = np.concatenate([P, Q])
    Jm = np.stack([_fd4(F, z, j, h) for j in range(2 * n)], axis=1)
    target = np.zeros((n - 1, 2 * n))
    target[:, :n - 1] = np.eye(n - 1)
    d1 = np.abs(Jm[:n - 1] - target).max()
    d2 = np.abs(Jm[[n - 1, 2 * n - 1]][:, n:2 * n - 1]).max()
    d3 = np.abs(Jm[n:2 * n - 1, n:2 * n - 1] - np.eye(n - 1)).max()
    return float(max(d1, d2, d3))


def lin_periodicity(eff, J2, psi2):
    """Shift of ``Phi1 o Phi_lin`` under ``psi_n'' -> psi_n'' + 2 pi`` and ``+ 2 pi kappa``,
    measured modulo ``2 pi`` on the torus."""
    def image(psi):
        return np.asarray(psi, dtype=float) @ eff.Linv

    base = image(psi2)
    out = []
    for shift in (2 * np.pi, 2 * np.pi * eff.kappa):
        p = np.array(psi2, dtype=float)
        p[-1] += shift
        d = image(p) - base
        out.append(float(np.abs(np.remainder(d + np.pi, 2 * np.pi) - np.pi).max()))
    return tuple(out)


# ---------------------------------------------------------------------------
# measures

@dataclass
class ZoneMeasure:
    theta: float
    mu: float
    uncovered: float
    uncovered_stderr: float
    uncovered_bound: float
    twist_excluded: float
    twist_bound: float
    samples: int

    def to_json(self):
        return {"theta": self.theta, "mu": self.mu, "uncovered": self.uncovered,
                "uncovered_stderr": self.uncovered_stderr, "uncovered_bound": self.uncovered_bound,
                "twist_excluded": self.twist_excluded, "twist_bound": self.twist_bound,
                "samples": self.samples,
                "uncovered_ok": self.uncovered <= self.uncovered_bound,
                "twist_ok": self.twist_excluded <= self.twist_bound}


def zone_partition(eff, theta, mu, samples=100000, seed=0, twist_points=24):
    """Monte Carlo measure of the set left uncovered by the charts, and the
    twist-excluded measure in action space.

    A point counts as uncovered when its pendulum energy lies within ``2 theta``
    of a saddle energy (a superset of the true uncovered set, so the estimate
    is conservative). The measure is per unit volume of ``D_hat``.
    """
    if theta < 0 or mu < 0:
        raise InvalidInput("theta and mu must be nonnegative")
    rng = np.random.default_rng(seed)
    n = eff.n
    Phat = tuple(0.5 * (a + b) for a, b in eff.Jhat_box)
    chart = IntegratedChart(eff, 2 * morse_analyze(eff.F0, eff.s0).N)
    sys = chart.branch(Phat).system
    crit = chart.branch(Phat).critical(Phat)
    saddles = np.asarray(crit.E)[2::2]
    Jn = rng.uniform(-eff.R0 / 2, eff.R0 / 2, samples)
    psi = rng.uniform(0, 2 * np.pi, samples)
    J2 = np.empty((samples, n))
    J2[:, :-1] = Phat
    J2[:, -1] = Jn
    E = eff.auxiliary(J2, psi)
    near = np.min(np.abs(E[:, None] - saddles[None, :]), axis=1) < 2 * theta
    frac = float(near.mean())
    area = eff.R0 * (2 * np.pi) ** n
    meas = frac * area
    err = math.sqrt(max(frac * (1 - frac), 1.0 / samples) / samples) * area
    c = constants.structure_constant(eff.regime)
    bound = c * theta * abs(math.log(theta)) if theta > 0 else 0.0
    twist, tb = 0.0, 0.0
    if mu > 0:
        twist = _twist_excluded(eff, sys, Phat, mu, twist_points)
        tb = c * eff.kappa ** (2 * n) * mu ** (1 / c)
    return ZoneMeasure(theta=theta, mu=mu, uncovered=meas, uncovered_stderr=err,
                       uncovered_bound=bound, twist_excluded=twist, twist_bound=tb,
                       samples=samples)


def _twist_excluded(eff, system, Phat, mu, points):
    """Action-space measure (per unit ``D_hat`` volume) where ``|det d^2 h| <= mu``.

    The Hessian is ``d^2 hhat`` plus ``d^2 E / dP_n^2`` in the last slot; the
    parameter dependence of ``E`` is of the size of ``eta`` and is neglected.
    """
    n = eff.n
    A = np.zeros((n, n))
    base = eff.hhat
    for i in range(n - 1):
        for j in range(n - 1):
            ei = np.eye(n - 1)[i]
            ej = np.eye(n - 1)[j]
            A[i, j] = base(ei + ej) - base(ei) - base(ej)
    total = 0.0
    for idx in range(2 * system.N + 1):
        br = ActionBranch(system, idx)
        lo, hi = br.window(Phat)
        if not math.isfinite(hi):
            hi = min(eff.R0 ** 2 - system.morse.M, lo + 10.0)
        Es = lo + (hi - lo) * (np.arange(points) + 0.5) / points
        P = np.array([br.action(E, Phat) for E in Es])
        d1 = np.array([dPdE(br, E, Phat) for E in Es])
        d2 = np.gradient(d1, Es)
        E2 = -d2 / d1 ** 3
        dets = []
        for e2 in E2:
            M = A.copy()
            M[-1, -1] = e2
            dets.append(np.linalg.det(M))
        dets = np.abs(np.array(dets))
        widths = np.abs(np.gradient(P))
        total += float(widths[dets <= mu].sum())
    return total


# ---------------------------------------------------------------------------
# identities

def cippa_check(L, hess, y):
    """``|det d^2(h o L) - det(L)^2 det(d^2 h)(L y)|`` with ``d^2(h o L) = L^T (d^2 h) L``,
    relative to ``max(1, |rhs|, |L^T (d^2 h) L|^n)``."""
    L = np.asarray(L, dtype=float)
    Hy = hess(L @ y)
    lhs = np.linalg.det(L.T @ Hy @ L)
    rhs = np.linalg.det(L) ** 2 * np.linalg.det(Hy)
    # relative to the scale of the computed determinant, not to its value:
    # det(L^T H L) cancels down from entries of size |L|^2 |H|
    return abs(lhs - rhs) / max(1.0, abs(rhs), np.linalg.norm(L.T @ Hy @ L, 2) ** len(y))


def hans_check(omega=1.3, c=2.5, t=1.7, z0=(0.4, -0.2)):
    """Time and action rescaling identities on ``H = omega (J^2 + psi^2) / 2``.

    Returns the largest deviation between the two sides of each identity,
    with flows integrated numerically.
    """
    def flow(a, b, time, z):
        # H = (a J^2 + b psi^2) / 2
        def rhs(_, w):
            return [-b * w[1], a * w[0]]
        sol = solve_ivp(rhs, (0, time), z, method="DOP853", rtol=1e-13, atol=1e-15)
        return sol.y[:, -1]

    z0 = np.asarray(z0, dtype=float)
    exact = np.array([z0[0] * math.cos(omega * t) - z0[1] * math.sin(omega * t),
                      z0[1] * math.cos(omega * t) + z0[0] * math.sin(omega * t)])
    d_exact = np.abs(flow(omega, omega, t, z0) - exact).max()
    # (i) Phi^t_H = Phi^{ct}_{H/c}
    d_time = np.abs(flow(omega, omega, t, z0) - flow(omega / c, omega / c, c * t, z0)).max()
    # (ii) Phi(J, psi) = (cJ, psi); Htilde = H o Phi = (omega c^2 J^2 + omega psi^2) / 2
    zt = np.array([z0[0] / c, z0[1]])
    lhs = flow(omega * c * c, omega, t / c, zt) * np.array([c, 1.0])
    rhs = flow(omega, omega, t, z0)
    d_action = np.abs(lhs - rhs).max()
    lhs2 = flow(omega * c, omega / c, t, zt) * np.array([c, 1.0])
    d_action2 = np.abs(lhs2 - rhs).max()
    return {"closed_form": float(d_exact), "time_rescaling": float(d_time),
            "action_rescaling": float(d_action), "conformal_rescaling": float(d_action2)}
