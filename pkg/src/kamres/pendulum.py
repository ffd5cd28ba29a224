"""Parameter-dependent one-degree-of-freedom pendula.

The systems have the form ``H = (1 + b(Jhat, J, x)) (J - J*(Jhat))^2 + F(Jhat, x)``
with ``F = F0 + G``. Branch ``i`` runs over the regions cut out by the critical
energies: odd ``i`` are the wells around minima, even ``0 < i < 2N`` the
regions above an intermediate maximum, and ``i in {0, 2N}`` the lower and
upper rotations.
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.optimize import brentq

from .errors import (ContinuationFailure, DomainError, FitFailure, InvalidInput,
                     PreconditionError)
from .potential import MorseData, TrigSeries, morse_analyze

QUAD_ABS = 1e-13
QUAD_REL = 1e-12
EDGE_TOL = 1e-14
FIT_WINDOW = (1e-6, 0.05)
FIT_RESIDUAL = 1e-5
FIT_NODES = 48
# Continuation threshold eta_0 = ETA_FRACTION * beta for the critical points.
ETA_FRACTION = 0.125


def _scalar_evaluator(series, deriv=0):
    js = np.array([j for j in series.coeffs], dtype=float)
    cs = np.array([c * (1j * j) ** deriv for j, c in series.coeffs.items()])
    if js.size == 0:
        return lambda x: 0.0

    def ev(x):
        return float(np.dot(cs, np.exp(1j * js * x)).real)
    return ev


def _reorder_global_max_last(morse):
    """Cyclically relabel so that ``x_{2N}`` is a global maximum."""
    xs = np.asarray(morse.critical_points, dtype=float)
    Es = np.asarray(morse.critical_energies, dtype=float)
    N = morse.N
    inner_x, inner_E = xs[1:], Es[1:]
    maxima = [2 * j - 1 for j in range(1, N + 1)]
    top = max(maxima, key=lambda i: inner_E[i])
    shift = (top + 1) % (2 * N)
    rolled_x = np.concatenate([inner_x[shift:], inner_x[:shift] + 2 * math.pi])
    rolled_E = np.concatenate([inner_E[shift:], inner_E[:shift]])
    x = np.concatenate([[rolled_x[-1] - 2 * math.pi], rolled_x])
    E = np.concatenate([[rolled_E[-1]], rolled_E])
    return x, E


@dataclass
class PendulumSystem:
    """A pendulum depending on the parameters ``Jhat``.

    ``G`` is either a :class:`TrigSeries` (parameter independent) or a
    callable ``Jhat -> TrigSeries``. ``b(Jhat, J, x)`` and ``Jn_star(Jhat)``
    default to zero. ``eta`` bounds the size of ``G``, ``b`` and ``Jn_star``;
    when omitted it is estimated from ``G`` on the strip of width ``s0`` at
    the reference parameter.
    """

    F0: TrigSeries
    s0: float = 1.0
    G: object = None
    b: object = None
    Jn_star: object = None
    eta: float = None
    r0: float = 1.0
    R0: float = None
    Jhat_ref: tuple = ()
    morse: MorseData = field(default=None, repr=False)

    def __post_init__(self):
        if self.morse is None:
            self.morse = morse_analyze(self.F0, self.s0)
        self.x0, self.E0 = _reorder_global_max_last(self.morse)
        if self.eta is None:
            self.eta = self.G_at(self.Jhat_ref).strip_norm(self.s0) if self.G is not None else 0.0
        self._cache = {}

    @property
    def N(self):
        return self.morse.N

    @property
    def unperturbed(self):
        return self.G is None and self.b is None and self.Jn_star is None

    def G_at(self, Jhat):
        if self.G is None:
            return TrigSeries()
        if isinstance(self.G, TrigSeries):
            return self.G
        return self.G(Jhat)

    def profile(self, Jhat=()):
        """``F(Jhat, .)`` as a trigonometric series."""
        key = tuple(np.atleast_1d(np.asarray(Jhat, dtype=float)).tolist())
        if key not in self._cache:
            self._cache[key] = self.F0 + self.G_at(Jhat)
        return self._cache[key]

    def center(self, Jhat=()):
        return 0.0 if self.Jn_star is None else float(self.Jn_star(Jhat))

    def prefactor(self, Jhat, J, x):
        if self.b is None:
            return np.zeros(np.broadcast(np.asarray(J), np.asarray(x)).shape)
        return np.asarray(self.b(Jhat, J, x), dtype=float)

    def hamiltonian(self, Jhat, J, x):
        Jc = self.center(Jhat)
        F = self.profile(Jhat)
        return (1 + self.prefactor(Jhat, J, x)) * (np.asarray(J) - Jc) ** 2 + F(np.asarray(x))

    def action_solve(self, Jhat, z, x, tol=1e-15, maxiter=100):
        """``J`` solving ``J = J* + z / sqrt(1 + b(J, x))``, vectorized.

        For real ``E`` above ``F(x)``, ``J(+-sqrt(E - F(x)), x)`` are the two
        solutions of ``H = E`` on the vertical through ``x``.
        """
        z = np.asarray(z, dtype=float)
        Jc = self.center(Jhat)
        if self.b is None:
            return Jc + z
        J = Jc + z
        for _ in range(maxiter):
            Jn = Jc + z / np.sqrt(1 + self.prefactor(Jhat, J, x))
            if np.max(np.abs(Jn - J)) <= tol * max(1.0, float(np.max(np.abs(Jn)))):
                return Jn
            J = Jn
        return J

    def threshold(self):
        return ETA_FRACTION * self.morse.beta

    def to_json(self):
        return {"F0": self.F0.to_json(), "s0": self.s0, "eta": self.eta, "r0": self.r0,
                "R0": self.R0, "N": self.N, "x0": self.x0.tolist(), "E0": self.E0.tolist()}


@dataclass
class CriticalData:
    """Continued critical points and energies at one parameter value."""

    Jhat: tuple
    x: np.ndarray
    E: np.ndarray
    windows: dict
    separation: float
    beta: float
    separation_ok: bool

    def to_json(self):
        return {"Jhat": list(self.Jhat), "x": self.x.tolist(), "E": self.E.tolist(),
                "windows": {str(i): list(w) for i, w in self.windows.items()},
                "separation": self.separation, "separation_ok": self.separation_ok}


def _newton_critical(F, x, maxiter=30, tol=1e-14):
    for _ in range(maxiter):
        d2 = F(x, 2)
        if d2 == 0:
            return None
        step = F(x, 1) / d2
        x -= step
        if abs(step) < tol:
            return float(x)
    return None


def _continue_point(F0, G, x0, reach):
    """Track a nondegenerate critical point along ``F0 + t G``, ``t: 0 -> 1``."""
    t, dt, x = 0.0, 1.0, float(x0)
    sign = np.sign(F0(x0, 2))
    rejects = 0
    while t < 1.0:
        dt = min(dt, 1.0 - t)
        Ft = F0 + G.scaled(t + dt)
        xn = _newton_critical(Ft, x)
        ok = (xn is not None and abs(xn - x) <= reach and np.sign(Ft(xn, 2)) == sign)
        if ok:
            t, x, rejects = t + dt, xn, 0
            dt *= 2
        else:
            rejects += 1
            if rejects > 2 or dt < 1e-6:
                return None
            dt /= 2
    return x


def critical_windows(system, Jhat=()):
    """Critical points ``x_j(Jhat)``, energies ``E_j(Jhat)`` and branch windows.

    Raises :class:`ContinuationFailure` when ``eta`` exceeds the continuation
    threshold or a Newton continuation leaves its basin.
    """
    if system.eta > system.threshold():
        raise ContinuationFailure(
            f"eta={system.eta:.3e} exceeds continuation threshold {system.threshold():.3e}",
            witness=tuple(np.atleast_1d(Jhat).tolist()))
    G = system.G_at(Jhat)
    x0, E0 = system.x0, system.E0
    N = system.N
    if G.is_empty():
        x, E = x0.copy(), E0.copy()
    else:
        F = system.profile(Jhat)
        gaps = np.diff(x0)
        x = np.empty_like(x0)
        for j in range(1, 2 * N + 1):
            reach = 0.5 * min(gaps[j - 1], gaps[j % (2 * N)] if j < 2 * N else gaps[0])
            xj = _continue_point(system.F0, G, x0[j], reach)
            if xj is None:
                raise ContinuationFailure(f"continuation of critical point {j} failed",
                                          witness=tuple(np.atleast_1d(Jhat).tolist()))
            x[j] = xj
        x[0] = x[2 * N] - 2 * math.pi
        E = F(x)
    windows = _windows(E, N, system)
    inner = E[1:]
    sep = math.inf
    if len(inner) > 1:
        d = np.abs(inner[:, None] - inner[None, :])
        sep = float(d[np.triu_indices(len(inner), 1)].min())
    beta = system.morse.beta
    return CriticalData(Jhat=tuple(np.atleast_1d(Jhat).tolist()), x=x, E=E, windows=windows,
                        separation=sep, beta=beta, separation_ok=sep >= beta / 2)


def _neighbours(E, N, j):
    """``(j_-, j_+)`` for the intermediate maximum ``2j``."""
    jm = max(i for i in range(0, j) if E[2 * i] > E[2 * j])
    jp = min(i for i in range(j + 1, N + 1) if E[2 * i] > E[2 * j])
    return jm, jp


def _windows(E, N, system):
    top = math.inf if system.R0 is None else system.R0 ** 2 - system.morse.M
    w = {}
    for j in range(1, N + 1):
        w[2 * j - 1] = (float(E[2 * j - 1]), float(min(E[2 * j - 2], E[2 * j])))
    for j in range(1, N):
        jm, jp = _neighbours(E, N, j)
        w[2 * j] = (float(E[2 * j]), float(min(E[2 * jm], E[2 * jp])))
    w[2 * N] = (float(E[2 * N]), top)
    w[0] = (float(E[2 * N]), top)
    return w


@dataclass
class ActionBranch:
    """Branch ``index`` of a pendulum system with exclusion parameter ``theta``."""

    system: PendulumSystem
    index: int
    theta: float = 0.0

    def __post_init__(self):
        if not 0 <= self.index <= 2 * self.system.N:
            raise InvalidInput(f"branch index {self.index} outside 0..{2 * self.system.N}")
        if self.theta < 0:
            raise InvalidInput("theta must be nonnegative")

    @property
    def kind(self):
        return "rotation" if self.index in (0, 2 * self.system.N) else "oscillation"

    @property
    def sign(self):
        """+1 where the action increases with energy, -1 on the lower rotation."""
        return -1 if self.index == 0 else 1

    def critical(self, Jhat=()):
        key = ("crit", tuple(np.atleast_1d(np.asarray(Jhat, dtype=float)).tolist()))
        cache = self.system._cache
        if key not in cache:
            cache[key] = critical_windows(self.system, Jhat)
        return cache[key]

    def window(self, Jhat=()):
        return self.critical(Jhat).windows[self.index]

    def theta_window(self, Jhat=()):
        lo, hi = self.window(Jhat)
        return lo + 2 * self.theta, hi - 2 * self.theta

    def action_limits(self, Jhat=()):
        """``(a_-, a_+)`` of the theta-window in action space."""
        lo, hi = self.theta_window(Jhat)
        if self.kind == "oscillation" and self.index % 2 == 1:
            a = (0.0, self.action(hi, Jhat))
        else:
            vals = [self.action(lo, Jhat), self.action(hi, Jhat) if math.isfinite(hi) else
                    self.sign * math.inf]
            a = (min(vals), max(vals))
        return a

    # ---- geometry -------------------------------------------------------
    def _segments(self, E, Jhat):
        """Integration pieces ``(a, b, turning_a, turning_b)`` covering the branch region."""
        crit = self.critical(Jhat)
        x, Ec = crit.x, crit.E
        F = self.system.profile(Jhat)
        N = self.system.N
        i = self.index
        if self.kind == "rotation":
            return [(x[m], x[m + 1], False, False) for m in range(2 * N)]
        if i % 2 == 1:
            lo_pt, hi_pt = i - 1, i + 1
        else:
            jm, jp = _neighbours(Ec, N, i // 2)
            lo_pt, hi_pt = 2 * jm, 2 * jp
        left = self._turning(F, E, x[lo_pt], x[lo_pt + 1], Ec[lo_pt])
        right = self._turning(F, E, x[hi_pt - 1], x[hi_pt], Ec[hi_pt])
        pts = [left] + [x[m] for m in range(lo_pt + 1, hi_pt)] + [right]
        segs = []
        for m in range(len(pts) - 1):
            segs.append((pts[m], pts[m + 1], m == 0, m == len(pts) - 2))
        return segs

    @staticmethod
    def _turning(F, E, a, b, Eedge):
        """Root of ``F = E`` on the monotone piece ``[a, b]``."""
        fa, fb = F(a) - E, F(b) - E
        if abs(E - Eedge) <= EDGE_TOL * max(1.0, abs(E)):
            return a if abs(fa) <= abs(fb) else b
        if fa * fb > 0:
            return a if abs(fa) < abs(fb) else b
        return brentq(lambda t: F(t) - E, a, b, xtol=1e-15, rtol=1e-15)

    def turning_points(self, E, Jhat=()):
        if self.kind == "rotation":
            return None
        segs = self._segments(E, Jhat)
        return segs[0][0], segs[-1][1]

    def _check(self, E, Jhat):
        lo, hi = self.window(Jhat)
        scale = EDGE_TOL * max(1.0, abs(E))
        if not (lo - scale <= E <= hi + scale):
            raise DomainError(f"energy {E!r} outside branch {self.index} window ({lo}, {hi})")
        return lo, hi

    # ---- integrals ------------------------------------------------------
    def _integrate(self, E, Jhat, kernel):
        F = self.system.profile(Jhat)
        Fs = _scalar_evaluator(F)
        total = 0.0
        for a, b, _, _ in self._segments(E, Jhat):
            if b <= a:
                continue
            mid, half = 0.5 * (a + b), 0.5 * (b - a)

            def integrand(th):
                xx = mid + half * math.sin(th)
                return kernel(max(E - Fs(xx), 0.0), xx) * half * math.cos(th)

            val, _ = quad(integrand, -math.pi / 2, math.pi / 2, epsabs=QUAD_ABS,
                          epsrel=QUAD_REL, limit=400)
            total += val
        return total

    def _harmonic_slope(self, Jhat):
        crit = self.critical(Jhat)
        xm = crit.x[self.index]
        d2 = self.system.profile(Jhat)(xm, 2)
        bm = float(self.system.prefactor(Jhat, self.system.center(Jhat), xm))
        return 1.0 / math.sqrt(2 * d2 * (1 + bm))

    def action(self, E, Jhat=()):
        """Action ``P_n^(i)(E, Jhat)`` by quadrature."""
        lo, hi = self._check(E, Jhat)
        if self.kind == "oscillation" and self.index % 2 == 1 and E - lo < 1e-12:
            return max(E - lo, 0.0) * self._harmonic_slope(Jhat)
        sys = self.system
        if sys.b is None:
            Jc = sys.center(Jhat)
            if self.kind == "oscillation":
                return self._integrate(E, Jhat, lambda w, x: math.sqrt(w)) / math.pi
            val = self._integrate(E, Jhat, lambda w, x: math.sqrt(w)) / (2 * math.pi)
            return Jc + self.sign * val

        def osc(w, x):
            z = math.sqrt(w)
            Jp = sys.action_solve(Jhat, z, x)
            Jm = sys.action_solve(Jhat, -z, x)
            return float(Jp - Jm)

        def rot(w, x):
            return float(sys.action_solve(Jhat, self.sign * math.sqrt(w), x))

        if self.kind == "oscillation":
            return self._integrate(E, Jhat, osc) / (2 * math.pi)
        return self._integrate(E, Jhat, rot) / (2 * math.pi)

    def period_derivative(self, E, Jhat=()):
        """``dP/dE`` as a half-period integral (used as an independent check).

        Well branches are integrated in the energy angle ``phi`` defined by
        ``F(x) = E_min + (E - E_min) sin(phi)^2`` on each monotone half, which
        keeps the integrand bounded at both the minimum and the turning point.
        """
        lo, hi = self._check(E, Jhat)
        if self.system.b is not None:
            return dPdE(self, E, Jhat)
        if self.kind == "rotation" or self.index % 2 == 0:
            factor = 1 / (2 * math.pi) if self.kind == "oscillation" else 1 / (4 * math.pi)
            val = self._integrate(E, Jhat, lambda w, x: 1.0 / math.sqrt(w) if w > 0 else 0.0)
            return self.sign * factor * val
        F = self.system.profile(Jhat)
        Fs, dFs = _scalar_evaluator(F), _scalar_evaluator(F, 1)
        crit = self.critical(Jhat)
        xm, Em = crit.x[self.index], crit.E[self.index]
        zeta = E - Em
        X_lo, X_hi = self.turning_points(E, Jhat)
        total = 0.0
        for edge in (X_lo, X_hi):
            a, b = (edge, xm) if edge < xm else (xm, edge)

            def integrand(phi, a=a, b=b):
                target = Em + zeta * math.sin(phi) ** 2
                if zeta * math.sin(phi) ** 2 < 1e-9 * max(1.0, abs(Em)):
                    return math.sqrt(2 / F(xm, 2))
                fa, fb = Fs(a) - target, Fs(b) - target
                if fa * fb > 0:
                    x = a if abs(fa) < abs(fb) else b
                else:
                    x = brentq(lambda t: Fs(t) - target, a, b, xtol=1e-15, rtol=1e-15)
                return 2 * math.sqrt(zeta) * math.sin(phi) / abs(dFs(x))

            # root-solve noise near the minimum trips quadpack's roundoff flag
            # at tiny zeta; the value still agrees with the difference quotient
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IntegrationWarning)
                val, _ = quad(integrand, 0.0, math.pi / 2, epsabs=1e-11, epsrel=1e-10,
                              limit=400)
            total += val
        return total / (2 * math.pi)


def action_of_energy(branch, E, Jhat=()):
    return branch.action(E, Jhat)


def dPdE(branch, E, Jhat=(), h=None):
    """``dP/dE`` by central differences with one Richardson extrapolation.

    The step is adapted to the distance from the window edges.
    """
    lo, hi = branch.window(Jhat)
    dist = min(E - lo, hi - E)
    if dist <= 0:
        raise DomainError("energy on the window edge")
    h = h or min(1e-3, dist / 4)

    def D(step):
        return (branch.action(E + step, Jhat) - branch.action(E - step, Jhat)) / (2 * step)

    return (4 * D(h / 2) - D(h)) / 3


def dPdE_profile(branch, energies, Jhat=()):
    return np.array([dPdE(branch, float(E), Jhat) for E in energies])


def energy_of_action(branch, P, Jhat=(), tol=1e-13, maxiter=100):
    """Invert ``P = P_n^(i)(E)`` by safeguarded Newton on a monotone bracket."""
    lo, hi = branch.window(Jhat)
    s = branch.sign
    g_lo = branch.action(lo, Jhat)
    if s * (P - g_lo) < -1e-12:
        raise DomainError(f"action {P!r} below branch range (edge {g_lo!r})")
    if abs(P - g_lo) <= 1e-15:
        return lo
    if math.isfinite(hi):
        g_hi = branch.action(hi, Jhat)
        if s * (P - g_hi) > 1e-12:
            raise DomainError(f"action {P!r} above branch range (edge {g_hi!r})")
        if abs(P - g_hi) <= 1e-15:
            return hi
    else:
        step = 1.0
        hi = lo + step
        while s * (branch.action(hi, Jhat) - P) < 0:
            step *= 2
            hi = lo + step
            if step > 1e12:
                raise DomainError("action beyond representable energies")
    a, b = lo, hi
    E = 0.5 * (a + b)
    for _ in range(maxiter):
        r = branch.action(E, Jhat) - P
        if abs(r) <= tol * max(1.0, abs(P)):
            return E
        if s * r > 0:
            b = E
        else:
            a = E
        try:
            slope = branch.period_derivative(E, Jhat) if branch.system.b is None else None
        except DomainError:
            slope = None
        En = E - r / slope if slope else None
        if En is None or not (a < En < b) or not math.isfinite(En):
            En = 0.5 * (a + b)
        if abs(En - E) <= 1e-16 * max(1.0, abs(E)) or b - a <= 4e-16 * max(1.0, abs(E)):
            return En
        E = En
    return E


@dataclass
class SeparatrixFit:
    """``P(E_edge -+ zeta) ~ phi(zeta) + zeta log(zeta) chi(zeta)``."""

    branch: int
    side: str
    phi_coeffs: np.ndarray
    chi_coeffs: np.ndarray
    fit_window: tuple
    residual: float
    chi0_bound: float = 0.0

    @property
    def chi0(self):
        return float(self.chi_coeffs[0]) if len(self.chi_coeffs) else 0.0

    def evaluate(self, zeta):
        zeta = np.asarray(zeta, dtype=float)
        phi = np.polyval(self.phi_coeffs[::-1], zeta)
        chi = np.polyval(self.chi_coeffs[::-1], zeta) if len(self.chi_coeffs) else 0.0
        return phi + zeta * np.log(zeta) * chi

    def to_json(self):
        return {"branch": self.branch, "side": self.side, "phi": self.phi_coeffs.tolist(),
                "chi": self.chi_coeffs.tolist(), "fit_window": list(self.fit_window),
                "residual": self.residual, "chi0": self.chi0, "chi0_bound": self.chi0_bound,
                "bound_ok": abs(self.chi0) >= self.chi0_bound or not len(self.chi_coeffs)}


def separatrix_fit(branch, side, Jhat=(), window=FIT_WINDOW, nodes=FIT_NODES,
                   max_residual=FIT_RESIDUAL):
    """Least-squares fit of the action near a window edge.

    ``side='+'`` uses ``E = E_+ - zeta``, ``side='-'`` uses ``E = E_- + zeta``.
    The lower side of a well adjoins a minimum, where the action is analytic
    and a pure polynomial is fitted.
    """
    lo, hi = branch.window(Jhat)
    if side == "+":
        if not math.isfinite(hi):
            raise InvalidInput("rotation branches have no upper separatrix")
        edge, sgn = hi, -1
    elif side == "-":
        edge, sgn = lo, 1
    else:
        raise InvalidInput("side must be '+' or '-'")
    elliptic = side == "-" and branch.index % 2 == 1 and branch.kind == "oscillation"
    z = np.geomspace(window[0], window[1], nodes)
    P = np.array([branch.action(edge + sgn * float(t), Jhat) for t in z])
    L = z * np.log(z)
    if elliptic:
        A = np.column_stack([z ** p for p in range(5)])
    else:
        A = np.column_stack([np.ones_like(z), z, z * z, L, z * L])
    scale = np.abs(A).max(axis=0)
    coef, *_ = np.linalg.lstsq(A / scale, P, rcond=None)
    coef = coef / scale
    resid = float(np.abs(A @ coef - P).max())
    if elliptic:
        phi, chi = coef, np.zeros(0)
    else:
        phi, chi = coef[:3], coef[3:]
    d2 = branch.system.profile(Jhat).scaled(1.0)
    d2norm = TrigSeries({j: c * (1j * j) ** 2 for j, c in d2.coeffs.items()}).strip_norm(
        branch.system.s0)
    bound = 1.0 / (4 * math.pi * math.sqrt(d2norm))
    fit = SeparatrixFit(branch=branch.index, side=side, phi_coeffs=phi, chi_coeffs=chi,
                        fit_window=tuple(window), residual=resid, chi0_bound=bound)
    if resid > max_residual:
        raise FitFailure(f"separatrix fit residual {resid:.3e} exceeds {max_residual:.1e}",
                         diagnostics=fit.to_json())
    return fit


# ---- canonical form of a pendulum with action-dependent potential --------------------

@dataclass
class CanonicalForm:
    """Output of :func:`canonical_pendulum_form` at one parameter value."""

    system: PendulumSystem
    y: np.ndarray
    X: np.ndarray
    Jn_star: float
    a_star: np.ndarray
    b_star: np.ndarray
    G: np.ndarray
    eta_star: float
    r0: float
    bounds: dict
    reassembly_error: float
    iterations: int

    def to_json(self):
        return {"Jn_star": self.Jn_star, "eta_star": self.eta_star, "r0": self.r0,
                "bounds": self.bounds, "reassembly_error": self.reassembly_error,
                "iterations": self.iterations}


def _complex_step(fun, h=1e-20):
    def d(Yhat, y, x):
        y = np.asarray(y, dtype=float)
        return np.imag(fun(Yhat, y + 1j * h, x)) / h
    return d


class _GstarParts:
    """``G*`` with first and second derivatives in ``y_n``."""

    def __init__(self, Gstar, dGstar=None, d2Gstar=None):
        self.G = Gstar
        self.dG = dGstar or _complex_step(Gstar)
        if d2Gstar is None:
            def d2(Yhat, y, x, h=1e-5):
                return (self.dG(Yhat, np.asarray(y) + h, x) - self.dG(Yhat, np.asarray(y) - h, x)) / (2 * h)
            d2Gstar = d2
        self.d2G = d2Gstar


def _solve_y(parts, Yhat, X, maxiter=200, tol=1e-13):
    y = np.zeros_like(np.asarray(X, dtype=float))
    for it in range(1, maxiter + 1):
        yn = -0.5 * np.asarray(parts.dG(Yhat, y, X), dtype=float)
        if np.max(np.abs(yn - y), initial=0.0) <= tol:
            return yn, it
        y = yn
    raise PreconditionError("fixed point iteration for the action shift did not converge")


def _prefactor(parts, Yhat, y, w, X, nodes=16):
    """``b`` from the Taylor remainder of ``G*`` about ``y``."""
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    w, y, X = np.broadcast_arrays(w, y, X)
    out = np.empty(w.shape)
    big = np.abs(w) >= 1e-2
    if big.any():
        wb, yb, Xb = w[big], y[big], X[big]
        out[big] = (parts.G(Yhat, yb + wb, Xb) - parts.G(Yhat, yb, Xb)
                    - parts.dG(Yhat, yb, Xb) * wb) / wb ** 2
    small = ~big
    if small.any():
        t, wt = np.polynomial.legendre.leggauss(nodes)
        t, wt = 0.5 * (t + 1), 0.5 * wt
        ws, ys, Xs = w[small], y[small], X[small]
        acc = np.zeros(ws.shape)
        for ti, wi in zip(t, wt):
            acc += wi * (1 - ti) * parts.d2G(Yhat, ys + ti * ws, Xs)
        out[small] = acc
    return out


def _antiderivative(values):
    """Zero-mean periodic antiderivative on a uniform grid over ``[0, 2pi)``."""
    m = len(values)
    c = np.fft.rfft(values)
    j = np.arange(len(c))
    out = np.zeros_like(c)
    out[1:] = c[1:] / (1j * j[1:])
    return np.fft.irfft(out, n=m)


def _series_from_samples(values, tol=1e-15):
    m = len(values)
    c = np.fft.rfft(values) / m
    scale = max(float(np.abs(c).max()), 1e-300)
    coeffs = {}
    for j in range(1, len(c) - (1 if m % 2 == 0 else 0)):
        if abs(c[j]) > tol * scale:
            coeffs[j] = c[j]
    mean = c[0].real
    if mean:
        coeffs[0] = mean
    return TrigSeries(coeffs, allow_mean=True)


def canonical_pendulum_form(F0, Gstar, Yhat=(), r0=1.0, s0=1.0, eta_star=None, npts=256,
                            dGstar=None, d2Gstar=None, fd_step=1e-5, R0=None):
    """Remove the ``y_n`` dependence from the potential of ``y_n^2 + F0 + G*``.

    ``Gstar(Yhat, y_n, x_n)`` is vectorized in ``y_n`` and ``x_n`` and, unless
    ``dGstar`` is supplied, accepts complex ``y_n`` (its ``y_n``-derivative is
    taken by complex step). ``eta_star`` bounds ``G*`` on the complex domain;
    it is an input because the sup cannot be certified here.

    Returns a :class:`CanonicalForm` whose ``system`` carries
    ``J_n^*``, ``b`` and ``G`` for this parameter value.
    """
    if eta_star is None:
        raise InvalidInput("eta_star must be supplied")
    if eta_star > r0 * r0 / 16:
        raise PreconditionError(f"eta_star={eta_star:.3e} exceeds r0^2/16={r0 * r0 / 16:.3e}")
    if 8 * eta_star / r0 > 0.25 * r0:
        raise PreconditionError("contraction estimate 8 eta_* / r0 <= r0 / 4 fails")
    parts = _GstarParts(Gstar, dGstar, d2Gstar)
    Yhat = tuple(np.atleast_1d(np.asarray(Yhat, dtype=float)).tolist()) if len(np.atleast_1d(Yhat)) else ()
    X = 2 * np.pi * np.arange(npts) / npts
    y, iters = _solve_y(parts, Yhat, X)
    Jstar = float(y.mean())
    a_star = y - Jstar
    b_star = np.zeros((len(Yhat), npts))
    for m in range(len(Yhat)):
        Yp, Ym = list(Yhat), list(Yhat)
        Yp[m] += fd_step
        Ym[m] -= fd_step
        yp, _ = _solve_y(parts, tuple(Yp), X)
        ym, _ = _solve_y(parts, tuple(Ym), X)
        b_star[m] = -(_antiderivative(yp - yp.mean()) - _antiderivative(ym - ym.mean())) / (2 * fd_step)
    Gvals = np.asarray(parts.G(Yhat, y, X), dtype=float) + y * y
    G_series = _series_from_samples(Gvals)
    G_series = TrigSeries({j: c for j, c in G_series.coeffs.items() if j != 0}) + \
        TrigSeries({0: G_series.mean()}, allow_mean=True)

    def b_fun(Jh, J, x, _parts=parts, _Y=Yhat):
        x = np.asarray(x, dtype=float)
        yy, _ = _solve_y(_parts, _Y, np.atleast_1d(x))
        w = np.asarray(J, dtype=float) - Jstar
        return _prefactor(_parts, _Y, yy.reshape(np.shape(x)) if np.ndim(x) else yy[0], w, x)

    system = PendulumSystem(F0=F0, s0=s0, G=G_series, b=None if _all_zero(parts, Yhat, y, X) else b_fun,
                            Jn_star=(lambda Jh, v=Jstar: v), eta=(4 + 48 / r0 ** 2) * eta_star,
                            r0=r0, R0=R0, Jhat_ref=Yhat)
    # reassembly: H*(y_n = Y_n + a_*, x) against (1 + b)(Y_n - J*)^2 + F0 + G
    Yn = np.linspace(-r0 / 2, r0 / 2, 9)[:, None] + Jstar
    Xg = X[None, :]
    yn = Yn + a_star[None, :]
    lhs = yn ** 2 + F0(Xg) + np.asarray(parts.G(Yhat, yn, np.broadcast_to(Xg, yn.shape)), dtype=float)
    w = Yn - Jstar
    bvals = _prefactor(parts, Yhat, np.broadcast_to(y[None, :], yn.shape),
                       np.broadcast_to(w, yn.shape), np.broadcast_to(Xg, yn.shape))
    rhs = (1 + bvals) * w ** 2 + F0(Xg) + Gvals[None, :]
    err = float(np.abs(lhs - rhs).max())
    bounds = {
        "Jn_star": abs(Jstar), "Jn_star_bound": 2 * eta_star / r0,
        "a_star": float(np.abs(a_star).max()), "a_star_bound": 4 * eta_star / r0,
        "b_star": float(np.abs(b_star).max()) if b_star.size else 0.0,
        "b_star_bound": (16 * math.pi + 8) * eta_star / r0 ** 2,
        "G": float(np.abs(Gvals).max()), "G_bound": (1 + 4 / r0 ** 2) * eta_star,
    }
    bounds["ok"] = bool(bounds["Jn_star"] <= bounds["Jn_star_bound"] * (1 + 1e-12)
                        and bounds["a_star"] <= bounds["a_star_bound"] * (1 + 1e-12)
                        and bounds["b_star"] <= bounds["b_star_bound"] * (1 + 1e-12)
                        and bounds["G"] <= bounds["G_bound"] * (1 + 1e-12))
    return CanonicalForm(system=system, y=y, X=X, Jn_star=Jstar, a_star=a_star, b_star=b_star,
                         G=Gvals, eta_star=eta_star, r0=r0, bounds=bounds,
                         reassembly_error=err, iterations=iters)


def _all_zero(parts, Yhat, y, X):
    probe = np.linspace(-0.25, 0.25, 5)[:, None]
    vals = parts.d2G(Yhat, y[None, :] + probe, np.broadcast_to(X, (5, len(X))))
    return bool(np.abs(vals).max() == 0.0)


def action_profile_rows(system, energies_per_branch, Jhat=()):
    """Rows ``(branch, E, P, dPdE, inside_theta_window)`` for CSV output."""
    rows = []
    for i, energies in energies_per_branch.items():
        br = system if isinstance(system, ActionBranch) else ActionBranch(system, i)
        lo, hi = br.theta_window(Jhat)
        for E in energies:
            P = br.action(E, Jhat)
            try:
                d = dPdE(br, E, Jhat)
            except DomainError:
                d = math.inf
            rows.append({"branch": i, "E": float(E), "P": P, "dPdE": d,
                         "in_window": bool(lo < E < hi)})
    return rows
