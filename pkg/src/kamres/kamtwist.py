"""Twist determinants, sublevel measures, the quantitative KAM threshold and
the measure budget of the non-torus set.

Budget arithmetic is carried out on natural logarithms held as ``mpmath``
numbers: quantities such as ``eps^{|log eps|^3}`` at ``eps = 1e-40`` are far
below the double range.
"""

from dataclasses import dataclass, field
from fractions import Fraction
import math

import mpmath
import numpy as np

from . import constants
from .errors import DomainError, InvalidInput, ThresholdFailure
from .lattice import det_exact, mat_mul, transpose

LOG_DPS = 50
REFERENCE_EPSILON = mpmath.mpf("1e-40")


# ---------------------------------------------------------------------------
# twist determinants

def hhat_hessian_exact(frame):
    """Exact Hessian ``(2/kappa) Ahat P_perp Ahat^T`` of ``hhat_k``."""
    k = [Fraction(v) for v in frame.k]
    kap = Fraction(frame.kappa)
    n = len(k)
    Ahat = [[Fraction(v) for v in row] for row in frame.Ahat]
    Pp = [[Fraction(int(i == j)) - k[i] * k[j] / kap for j in range(n)] for i in range(n)]
    M = mat_mul(mat_mul(Ahat, Pp), transpose(Ahat))
    return [[2 * v / kap for v in row] for row in M]


def twist_baseline(frame):
    """``det d^2(hhat_k(Phat) + P_n^2)`` in exact arithmetic (equals ``2^n kappa^-n``)."""
    H = hhat_hessian_exact(frame)
    n = len(frame.k)
    full = [row + [Fraction(0)] for row in H] + [[Fraction(0)] * (n - 1) + [Fraction(2)]]
    return det_exact(full)


def twist_determinant(frame, target, P, step=None):
    """``det d^2_PP (hhat_k + E^(i))`` at ``P``.

    ``target`` is either ``"quadratic"`` (the baseline ``E = P_n^2``, returned
    as an exact :class:`~fractions.Fraction`) or an integrating chart, whose
    integrated Hamiltonian is differentiated numerically with a step adapted
    to the distance from the window edges.
    """
    if isinstance(target, str):
        if target != "quadratic":
            raise InvalidInput(f"unknown twist target {target!r}")
        return twist_baseline(frame)
    chart = target
    P = np.asarray(P, dtype=float)
    Phat = tuple(P[:-1])
    lo, hi = chart.action_limits(Phat)
    if not lo <= P[-1] <= hi:
        raise DomainError(f"P_n = {P[-1]:.6g} outside the chart window [{lo:.6g}, {hi:.6g}]")
    dist = min(P[-1] - lo, hi - P[-1])
    h = step or min(1e-3, dist / 8) if dist > 0 else None
    if not h:
        raise DomainError("P on the window edge")
    p = chart.eff.U @ P if chart.kind == "rotation" else P
    from .structure import _fd4
    n = len(P)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = _fd4(lambda x: _fd4(chart.h, x, j, h), p, i, h)
    H = 0.5 * (H + H.T)
    if chart.kind == "rotation":
        U = chart.eff.U
        H = U.T @ H @ U
    return float(np.linalg.det(H))


def twist_split(frame, chart, P):
    """``det(d^2 hhat) * d^2 E / dP_n^2``, the far-from-separatrix form."""
    H = hhat_hessian_exact(frame)
    dh = float(det_exact(H)) if H else 1.0
    P = np.asarray(P, dtype=float)
    lo, hi = chart.action_limits(tuple(P[:-1]))
    h = min(1e-3, min(P[-1] - lo, hi - P[-1]) / 8)
    e = np.zeros(len(P))
    e[-1] = h
    E = chart.energy
    d2 = (-E(P + 2 * e) + 16 * E(P + e) - 30 * E(P) + 16 * E(P - e) - E(P - 2 * e)) / (12 * h * h)
    return dh * d2


# ---------------------------------------------------------------------------
# sublevel sets

def _derivatives(f, x, order, h=None):
    """Derivatives ``f^(d)(x)`` for ``d = 1..order`` by high order central
    differences on a common stencil (vectorized in ``x``)."""
    x = np.asarray(x, dtype=float)
    h = h or 1e-2
    half = order + 3
    offs = np.arange(-half, half + 1)
    vals = np.stack([f(x + o * h) for o in offs], axis=0)
    out = []
    for d in range(1, order + 1):
        w = _fd_weights(offs, d)
        out.append(np.tensordot(w, vals, axes=(0, 0)) / h ** d)
    return out


def _fd_weights(offs, d):
    """Finite difference weights for the ``d``-th derivative at 0 (Fornberg)."""
    m = len(offs)
    V = np.vander(offs.astype(float), m, increasing=True).T
    rhs = np.zeros(m)
    rhs[d] = math.factorial(d)
    return np.linalg.solve(V, rhs)


def estimate_xi(f, a, b, m, grid=4096):
    """``min_x max_{1<=d<=m} |f^(d)(x)| / d!`` on a uniform grid."""
    x = np.linspace(a, b, grid)
    ders = _derivatives(f, x, m)
    return float(np.max([np.abs(D) / math.factorial(d) for d, D in enumerate(ders, 1)],
                        axis=0).min())


def estimate_M(f, a, b, m, grid=4096):
    """``max_x max_{2<=d<=m+1} |f^(d)(x)| / d!`` on a uniform grid."""
    x = np.linspace(a, b, grid)
    ders = _derivatives(f, x, m + 1)
    vals = [np.abs(D).max() / math.factorial(d) for d, D in enumerate(ders, 1) if d >= 2]
    return float(max(vals)) if vals else 0.0


def sublevel_measure_bound(f, interval, m, xi=None, M=None, mu=None):
    """Upper bound of ``meas{x in [a, b] : |f(x)| <= mu}``:

    ``m (M+1) (b - a + 2 mu^{1/(m+1)}) mu^{1/(m(m+1))} / xi_m``.
    """
    a, b = map(float, interval)
    if mu is None or not 0 < mu < 1:
        raise InvalidInput("mu must lie in (0, 1)")
    if m < 1:
        raise InvalidInput("m must be at least 1")
    if xi is None:
        xi = estimate_xi(f, a, b, m)
    if M is None:
        M = estimate_M(f, a, b, m)
    if not xi > 0:
        raise InvalidInput("xi_m must be positive")
    return m * (M + 1) * (b - a + 2 * mu ** (1 / (m + 1))) * mu ** (1 / (m * (m + 1))) / xi


def brute_force_sublevel(f, interval, mu, grid_n=100000):
    """``meas{|f| <= mu}`` by grid counting with the crossings of ``|f| = mu``
    located by linear interpolation; error at most ``2 (b - a) / grid_n``."""
    if grid_n < 10 ** 4:
        raise InvalidInput("grid_n must be at least 1e4")
    a, b = map(float, interval)
    x = np.linspace(a, b, grid_n + 1)
    g = np.abs(np.asarray(f(x), dtype=float)) - mu
    inside = g <= 0
    total = 0.0
    h = (b - a) / grid_n
    g0, g1 = g[:-1], g[1:]
    both = inside[:-1] & inside[1:]
    total += both.sum() * h
    cross = inside[:-1] ^ inside[1:]
    if cross.any():
        t = g0[cross] / (g0[cross] - g1[cross])
        frac = np.where(inside[:-1][cross], t, 1 - t)
        total += float(frac.sum()) * h
    return float(total)


# ---------------------------------------------------------------------------
# KAM thresholds

@dataclass
class KamInputs:
    """Inputs of the quantitative KAM theorem.

    ``f_norm`` may be replaced by ``log_f_norm`` (natural log) when it is
    outside the double range; likewise ``log_M``, ``log_d`` and ``log_r0``.
    """

    n: int
    tau: float
    r0: float = None
    s: float = 1.0
    M: float = None
    d: float = None
    f_norm: float = None
    c: float = None
    diam: float = 1.0
    log_f_norm: object = None
    log_M: object = None
    log_d: object = None
    log_r0: object = None
    log_diam: object = None

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInput("the KAM theorem needs n >= 2")
        if not self.tau > self.n - 1:
            raise InvalidInput("tau must exceed n - 1")
        if not 0 < self.s <= 1:
            raise InvalidInput("s must lie in (0, 1]")
        if self.c is None:
            self.c = constants.KAM_C

    def logs(self):
        with mpmath.workdps(LOG_DPS):
            def lg(val, lv, name):
                if lv is not None:
                    return mpmath.mpf(lv)
                if val is None or not val > 0:
                    raise InvalidInput(f"{name} must be positive")
                return mpmath.log(mpmath.mpf(val))
            return {"M": lg(self.M, self.log_M, "M"), "d": lg(self.d, self.log_d, "d"),
                    "f": lg(self.f_norm, self.log_f_norm, "f_norm"),
                    "r0": lg(self.r0, self.log_r0, "r0"),
                    "diam": lg(self.diam, self.log_diam, "diam"),
                    "s": mpmath.log(mpmath.mpf(self.s)), "c": mpmath.log(mpmath.mpf(self.c))}


@dataclass
class KamReport:
    log_m: object
    log_epsilon: object
    log_threshold: object
    slack: object
    passed: bool
    log_alpha: object = None
    log_rhat: object = None
    log_r_eps: object = None
    log_C: object = None
    log_measure: object = None

    def value(self, name):
        v = getattr(self, "log_" + name)
        return None if v is None else float(mpmath.exp(v))

    def to_json(self):
        out = {"passed": self.passed, "slack": _f(self.slack)}
        for name in ("m", "epsilon", "threshold", "alpha", "rhat", "r_eps", "C", "measure"):
            v = getattr(self, "log_" + name)
            out["log_" + name] = _f(v)
        return out


def _f(v):
    return None if v is None else float(v)


def kam_thresholds(inputs, epsilon=None, strict=True):
    """Check ``eps = |f| / (M r0^2) <= c m^8 s^{4 tau + 4}`` and, when it holds,
    return ``alpha``, ``rhat``, ``r_eps`` and the measure bound ``C sqrt(eps)``.

    ``epsilon`` overrides the value computed from the inputs. All quantities
    are natural logarithms; ``slack = log threshold - log eps``.
    """
    n, tau = inputs.n, inputs.tau
    L = inputs.logs()
    with mpmath.workdps(LOG_DPS):
        log_m = L["d"] - n * L["M"]
        if log_m > 0:
            raise InvalidInput("m = d / M^n must not exceed 1")
        if epsilon is not None:
            log_eps = mpmath.log(mpmath.mpf(epsilon)) if not isinstance(epsilon, tuple) \
                else mpmath.mpf(epsilon[1])
        else:
            log_eps = L["f"] - L["M"] - 2 * L["r0"]
        log_thr = L["c"] + 8 * log_m + (4 * tau + 4) * L["s"]
        slack = log_thr - log_eps
        rep = KamReport(log_m=log_m, log_epsilon=log_eps, log_threshold=log_thr, slack=slack,
                        passed=bool(slack >= 0))
        if not rep.passed:
            if strict:
                raise ThresholdFailure("KAM smallness eps <= c m^8 s^(4 tau + 4) fails",
                                       condition="enza", slack=float(slack))
            return rep
        half = log_eps / 2
        rep.log_alpha = L["c"] - log_m - (3 * tau + 3) * L["s"] + L["M"] + L["r0"] + half
        rep.log_rhat = 2 * log_m + L["r0"]
        rep.log_r_eps = -L["c"] - log_m + half + L["r0"]
        big = max(2 * log_m + L["r0"], L["diam"])
        rep.log_C = n * big - L["c"] - (n + 5) * log_m - (3 * tau + 3) * L["s"]
        rep.log_measure = rep.log_C + half
    return rep


# ---------------------------------------------------------------------------
# non-torus budget

def _lse(*logs):
    m = max(logs)
    return m + mpmath.log(mpmath.fsum(mpmath.exp(v - m) for v in logs))


@dataclass
class BudgetReport:
    """Natural logarithms of the zone budgets and their total."""

    epsilon: float
    log_epsilon: object
    omega2_bound: object
    omega0_remainder: object
    omega1_sum: object
    omega1_terms: dict
    total: object
    exponent_a: object
    conditions: dict = field(default_factory=dict)
    claims: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c["ok"] for c in self.conditions.values())

    def to_json(self):
        return {"epsilon": self.epsilon, "log_epsilon": _f(self.log_epsilon),
                "log_omega2_bound": _f(self.omega2_bound),
                "log_omega0_remainder": _f(self.omega0_remainder),
                "log_omega1_sum": _f(self.omega1_sum),
                "log_omega1_terms": {k: _f(v) for k, v in self.omega1_terms.items()},
                "log_total": _f(self.total), "exponent_a": _f(self.exponent_a),
                "conditions": {k: {"ok": v["ok"], "slack": _f(v["slack"])}
                               for k, v in self.conditions.items()},
                "claims": {k: {"ok": bool(v >= 0), "slack": _f(v)} for k, v in self.claims.items()},
                "parameters": {k: _f(v) if not isinstance(v, (int, str)) else v
                               for k, v in self.parameters.items()},
                "constants_version": constants.VERSION}


def a1_slack(n, nu, s=1.0, delta=0.1, log_epsilon=None, c_str=None):
    """``log(1 / (c |K|^{2n})) - log eta_*`` with the effective-profile distance
    ``eta_* = coth(s/24) 2^10 n e^s / (delta s K^{(4 nu - n - 11)/2})``."""
    c_str = c_str or max(constants.STRUCTURE_C.values())
    with mpmath.workdps(LOG_DPS):
        le = mpmath.mpf(log_epsilon if log_epsilon is not None else mpmath.log(REFERENCE_EPSILON))
        lK = 2 * mpmath.log(-le)
        l_eta = (mpmath.log(1 / mpmath.tanh(mpmath.mpf(s) / 24)) + mpmath.log(2 ** 10 * n)
                 + s - mpmath.log(delta) - mpmath.log(s) - (4 * nu - n - 11) / mpmath.mpf(2) * lK)
        return -(l_eta + mpmath.log(c_str) + 2 * n * lK)


def default_budget_nu(n, s=1.0, delta=0.1):
    """Smallest integer ``nu >= n + 2`` for which the effective-profile
    assumption holds at the reference ``eps = 1e-40``."""
    nu = n + 2
    while a1_slack(n, nu, s, delta) < 0:
        nu += 1
    return float(nu)


def nontorus_budget(epsilon=None, n=2, s=1.0, nu=None, delta=1.0, calib=None, tau=None,
                    log_epsilon=None, strict=True):
    """Measure budget of the non-torus set, aggregated in log-space.

    Parameters follow the paper law ``K = log^2(1/eps)``, ``Kbig = K^2``,
    ``alpha = sqrt(eps) K^(nu+1)`` and ``mu = theta = eps^{|log eps|^2}``.
    ``calib`` overrides the constants (keys ``kam``, ``structure``,
    ``omega2``, ``generic``). Raises :class:`ThresholdFailure` naming the
    first failing smallness condition unless ``strict`` is false.
    """
    calib = dict(calib or {})
    c_kam = calib.get("kam", constants.KAM_C)
    c_str = calib.get("structure", max(constants.STRUCTURE_C.values()))
    c_om2 = calib.get("omega2", constants.omega2_constant(n))
    c_gen = calib.get("generic", 1.0)
    nu = default_budget_nu(n) if nu is None else nu
    tau = float(n) if tau is None else tau
    if not nu > n + 1:
        raise InvalidInput("nu must exceed n + 1")
    if not 0 < s <= 1:
        raise InvalidInput("s must lie in (0, 1]")
    if not delta > 0:
        raise InvalidInput("delta must be positive")
    with mpmath.workdps(LOG_DPS):
        if log_epsilon is None:
            if epsilon is None or not 0 < epsilon < math.exp(-1):
                raise InvalidInput("epsilon must lie in (0, 1/e)")
            le = mpmath.log(mpmath.mpf(epsilon))
        else:
            le = mpmath.mpf(log_epsilon)
            if not le < -1:
                raise InvalidInput("log(epsilon) must be below -1")
        Lg = -le                                     # |log eps|
        lK = 2 * mpmath.log(Lg)                      # log K
        K = mpmath.exp(lK)
        l_alpha = le / 2 + (nu + 1) * lK
        l_theta = le * Lg ** 2                       # log theta = log mu
        lc_str = mpmath.log(c_str)
        conds = {}
        claims = {}

        def cond(name, slack):
            conds[name] = {"ok": bool(slack >= 0), "slack": slack}

        # normal form smallness in the two regimes
        cond("normal_form_omega0", -(mpmath.log(2 ** 13 * n / s) - (2 * nu - 2) * lK))
        cond("normal_form_omega1", -(mpmath.log(2 ** 9 * n / s) - (2 * nu - 4) * lK))
        # (A1): eta_* <= 1 / (c |k|^{2n}) at the worst |k| = K
        cond("assumption_A1", a1_slack(n, nu, s, delta, le, c_str))

        # Omega^2
        om2 = (mpmath.log(c_om2) + 2 * l_alpha + (n * n - n - 1) * lK + (n + 2) * 2 * lK)

        # Omega^0: KAM on |I|^2/2 + eps f_** with |f_**| <= 2 eps^{(s/2)|log eps|}
        r00 = mpmath.log(0.25) + le / 2 + nu * lK
        kin0 = KamInputs(n=n, tau=tau, s=s / 2, c=c_kam, M=1.0, d=1.0, log_r0=r00 - mpmath.log(2),
                         log_f_norm=le + mpmath.log(2) + s / 2 * Lg * le, diam=2.0)
        rep0 = kam_thresholds(kin0, strict=False)
        cond("kam_omega0", rep0.slack)
        # without KAM the bound is the whole volume of the unit ball times the torus
        vol0 = mpmath.log(mpmath.pi) + n * mpmath.log(2 * mpmath.pi)
        om0 = min(rep0.log_measure, vol0) if rep0.passed else vol0
        claims["omega0"] = (s / 5) * Lg * le - om0

        # Omega^1 per branch: M <= c / theta, d >= mu, r0 = theta / (c K^{n-1}),
        # s' = 1 / (c K^{n-1}), |f| <= eps^{(s/5)|log eps|^3}
        lsig = -(lc_str + (n - 1) * lK)
        sig = mpmath.exp(lsig)
        l_lam = mpmath.log(2 * 2) / 2 + le / 2       # lambda <= sqrt(4 eps), delta_k <= 2
        l_diam = mpmath.log(c_gen) + (nu + 1) * lK - l_lam
        if not 0 < float(sig) <= 1:
            raise InvalidInput("s' = 1 / (c K^(n-1)) outside (0, 1]")
        kin1 = KamInputs(n=n, tau=tau, s=float(sig), c=c_kam, log_M=lc_str - l_theta,
                         log_d=l_theta, log_r0=l_theta + lsig,
                         log_f_norm=(s / 5) * Lg ** 3 * le, log_diam=l_diam)
        rep1 = kam_thresholds(kin1, strict=False)
        cond("kam_omega1", rep1.slack)
        # everything below is in the original actions: the primed measure
        # times lambda^n; D_hat' = D_hat / lambda with D_hat in the ball of radius K^n
        branches = mpmath.log(2 * K + 1)
        l_hat = (n - 1) * (mpmath.log(2) + n * lK)           # vol(D_hat) bound
        l_torus = n * mpmath.log(2 * mpmath.pi)
        vol_k = l_hat + mpmath.log(2) + le / 2 + (nu + 1) * lK + l_torus
        kam_branch = rep1.log_measure + n * l_lam if rep1.passed else vol_k
        kam_part = min(branches + kam_branch, vol_k)
        uncovered = lc_str + l_theta + mpmath.log(-l_theta) + l_hat + l_lam
        twist = lc_str + 2 * n * 2 * lK + l_theta / c_str + l_torus + l_hat + l_lam
        per_k = _lse(kam_part, uncovered, twist)
        count = n * mpmath.log(2 * K + 1)
        om1 = count + per_k
        claims["omega1"] = Lg * le - om1
        total = _lse(om2, om0, om1)
        a = (total - le) / mpmath.log(Lg)
        rep = BudgetReport(epsilon=float(mpmath.exp(le)), log_epsilon=le, omega2_bound=om2,
                           omega0_remainder=om0, omega1_sum=om1,
                           omega1_terms={"kam": count + kam_part,
                                         "uncovered": count + uncovered,
                                         "twist": count + twist},
                           total=total, exponent_a=a, conditions=conds, claims=claims,
                           parameters={"n": n, "s": s, "nu": nu, "tau": tau, "delta": delta,
                                       "log_K": lK, "log_alpha": l_alpha, "log_theta": l_theta,
                                       "log_mu": l_theta, "kam_c": c_kam, "structure_c": c_str,
                                       "omega2_c": c_om2})
    if strict:
        for name, c in conds.items():
            if not c["ok"]:
                raise ThresholdFailure(f"smallness condition {name} fails", condition=name,
                                       slack=float(c["slack"]))
    return rep


def twist_reference(n):
    """The documented twist-analysis constants ``m_n`` and ``a_n``."""
    return {"m_n": constants.twist_m(n), "a_n": constants.twist_a(n)}
