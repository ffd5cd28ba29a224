"""Fourier potentials on the torus, their one-dimensional lattice profiles,
genericity conditions and Morse data of 1D profiles.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import DegenerateProfile, InvalidInput
from .lattice import as_int_vector, is_primitive, is_sharp, norm1, primitive_vectors

GRID = 4096
NEWTON_TOL = 1e-13
DEGENERACY_TOL = 1e-8


class TrigSeries:
    """Finite real trigonometric series ``F(t) = sum_j c_j e^{ijt}`` in one angle.

    Only the coefficients with ``j != 0`` may be nonzero unless ``allow_mean``
    is set. Reality ``c_{-j} = conj(c_j)`` is enforced on construction.
    """

    def __init__(self, coeffs=None, allow_mean=False, tol=1e-14):
        data = {}
        for j, c in (coeffs or {}).items():
            j = int(j)
            c = complex(c)
            if c == 0:
                continue
            if j == 0 and not allow_mean:
                raise InvalidInput("zero-mean series cannot carry a constant term")
            data[j] = c
        for j, c in list(data.items()):
            cm = data.get(-j)
            if cm is None:
                data[-j] = c.conjugate()
            elif abs(cm - c.conjugate()) > tol * max(1.0, abs(c)):
                raise InvalidInput(f"coefficients at {j} and {-j} are not conjugate")
        if 0 in data:
            data[0] = complex(data[0].real, 0.0)
        self.coeffs = dict(sorted(data.items()))

    @classmethod
    def cos(cls, amplitude=1.0, j=1, phase=0.0):
        """``amplitude * cos(j t + phase)``."""
        c = 0.5 * amplitude * np.exp(1j * phase)
        return cls({j: c, -j: np.conj(c)})

    @property
    def max_mode(self):
        return max((abs(j) for j in self.coeffs), default=0)

    def is_empty(self):
        return not self.coeffs

    def __call__(self, t, deriv=0):
        return self.evaluate(t, deriv)

    def evaluate(self, t, deriv=0):
        """Value of the ``deriv``-th derivative at ``t`` (complex ``t`` allowed)."""
        t = np.asarray(t)
        out = np.zeros(t.shape, dtype=complex)
        for j, c in self.coeffs.items():
            out += c * (1j * j) ** deriv * np.exp(1j * j * t)
        if np.isrealobj(t):
            return out.real
        return out

    def shifted(self, t0):
        """Series ``t -> F(t + t0)``."""
        return TrigSeries({j: c * np.exp(1j * j * t0) for j, c in self.coeffs.items()},
                          allow_mean=True)

    def scaled(self, a):
        return TrigSeries({j: a * c for j, c in self.coeffs.items()}, allow_mean=True)

    def __add__(self, other):
        data = dict(self.coeffs)
        for j, c in other.coeffs.items():
            data[j] = data.get(j, 0) + c
        return TrigSeries(data, allow_mean=True)

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def mean(self):
        return self.coeffs.get(0, 0j).real

    def strip_norm(self, s0, npts=GRID):
        """Sup of ``|F|`` over the closed strip ``|Im t| <= s0``.

        The maximum of a trigonometric polynomial's modulus is attained on the
        boundary lines, which are sampled at ``npts`` points; the largest
        samples are then refined by a bounded scalar search.
        """
        if not self.coeffs:
            return 0.0
        npts = max(npts, 16 * self.max_mode)
        x = np.linspace(-np.pi, np.pi, npts, endpoint=False)
        h = x[1] - x[0]
        best = 0.0
        for y in ((s0, -s0) if s0 > 0 else (0.0,)):
            vals = np.abs(self.evaluate(x + 1j * y))
            best = max(best, float(vals.max()))
            for i in np.argsort(vals)[-4:]:
                res = minimize_scalar(lambda t: -abs(self.evaluate(t + 1j * y)),
                                      bounds=(x[i] - h, x[i] + h), method="bounded",
                                      options={"xatol": 1e-12})
                best = max(best, -float(res.fun))
        return best

    def fourier_norm(self, s):
        return max((abs(c) * math.exp(abs(j) * s) for j, c in self.coeffs.items()), default=0.0)

    def grid(self, npts=None):
        npts = npts or max(GRID, 8 * self.max_mode)
        return np.linspace(-np.pi, np.pi, npts, endpoint=False)

    def to_json(self):
        return {"modes": [{"j": j, "re": c.real, "im": c.imag}
                          for j, c in self.coeffs.items() if j > 0],
                "mean": self.mean()}


@dataclass
class AnalyticPotential:
    """Finite Fourier series ``f(x) = sum_k f_k e^{ik.x}`` on the n-torus.

    ``coeffs`` stores both members of every ``+-k`` pair; construct through
    :meth:`from_modes` to get reality filled in automatically.
    """

    n: int
    s: float
    coeffs: dict
    support_radius: int = 0

    def __post_init__(self):
        if self.s <= 0:
            raise InvalidInput("analyticity width must be positive")
        clean = {}
        for k, c in self.coeffs.items():
            k = as_int_vector(k)
            if len(k) != self.n:
                raise InvalidInput(f"mode {k} has wrong dimension")
            if not any(k):
                raise InvalidInput("potential must have zero mean")
            c = complex(c)
            if c != 0:
                clean[k] = c
        for k, c in clean.items():
            mk = tuple(-v for v in k)
            cm = clean.get(mk)
            if cm is None or abs(cm - c.conjugate()) > 1e-14 * max(1.0, abs(c)):
                raise InvalidInput(f"reality violated at mode {k}")
        self.coeffs = dict(sorted(clean.items()))
        if not self.support_radius:
            self.support_radius = max((norm1(k) for k in self.coeffs), default=0)

    @classmethod
    def from_modes(cls, n, s, modes, support_radius=0):
        """Build from one representative per ``+-k`` pair, ``modes = {k: f_k}``."""
        data = {}
        for k, c in modes.items():
            k = as_int_vector(k)
            c = complex(c)
            data[k] = c
            data[tuple(-v for v in k)] = c.conjugate()
        return cls(n=n, s=s, coeffs=data, support_radius=support_radius)

    def coefficient(self, k):
        return self.coeffs.get(tuple(k), 0j)

    def evaluate(self, x):
        """Evaluate at points ``x`` of shape ``(..., n)``; returns real values."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=complex)
        for k, c in self.coeffs.items():
            out += c * np.exp(1j * (x @ np.asarray(k, dtype=float)))
        return out.real

    def to_json(self):
        modes = [{"k": list(k), "re": c.real, "im": c.imag}
                 for k, c in self.coeffs.items() if is_sharp(k)]
        return {"n": self.n, "s": self.s, "support_radius": self.support_radius, "modes": modes}

    @classmethod
    def from_json(cls, data):
        if isinstance(data, str):
            data = json.loads(data)
        missing = [key for key in ("n", "s", "modes") if key not in data]
        if missing:
            raise InvalidInput(f"potential JSON missing fields: {', '.join(missing)}")
        modes = {}
        for m in data["modes"]:
            k = as_int_vector(m["k"])
            if k in modes or tuple(-v for v in k) in modes:
                raise InvalidInput(f"duplicate mode {k}")
            modes[k] = complex(m.get("re", 0.0), m.get("im", 0.0))
        return cls.from_modes(int(data["n"]), float(data["s"]), modes,
                              int(data.get("support_radius", 0)))


def example_potential(n, s, delta, radius):
    """Potential with ``f_k = delta e^{-|k|s}`` on every primitive ``+-k``, ``|k| <= radius``."""
    modes = {k: delta * math.exp(-norm1(k) * s) for k in primitive_vectors(n, radius)}
    return AnalyticPotential.from_modes(n, s, modes, support_radius=int(radius))


def sup_fourier_norm(f, s=None):
    """``sup_k |f_k| e^{|k|_1 s}`` over the finite support."""
    s = f.s if s is None else s
    if s < 0:
        raise InvalidInput("width must be nonnegative")
    return max((abs(c) * math.exp(norm1(k) * s) for k, c in f.coeffs.items()), default=0.0)


@dataclass
class LatticeProfile:
    """Restriction of a potential to the lattice generated by ``k``.

    ``series(t) = sum_j f_{jk} e^{ijt}`` so that the potential's ``k``-family
    equals ``series(k.x)``. ``phase_shift`` is the translation ``t0`` with
    ``T1 series(t + t0) = -2|f_k| cos t``.
    """

    k: tuple
    series: TrigSeries
    width: float
    phase_shift: float

    @property
    def coeffs(self):
        return self.series.coeffs

    def normalized(self):
        return self.series.shifted(self.phase_shift)

    def __call__(self, t, deriv=0):
        return self.series.evaluate(t, deriv)


def lattice_projection(f, k):
    k = as_int_vector(k)
    if not any(k) or not is_primitive(k):
        raise InvalidInput(f"lattice_projection needs a primitive vector, got {k}")
    if len(k) != f.n:
        raise InvalidInput("dimension mismatch")
    coeffs = {}
    for kk, c in f.coeffs.items():
        ratio = None
        for a, b in zip(kk, k):
            if b:
                ratio = a // b if a % b == 0 else None
                break
        if ratio and all(a == ratio * b for a, b in zip(kk, k)):
            coeffs[ratio] = c
    series = TrigSeries(coeffs)
    c1 = series.coeffs.get(1, 0j)
    t0 = math.pi - math.atan2(c1.imag, c1.real) if c1 != 0 else 0.0
    t0 = math.remainder(t0, 2 * math.pi)
    if t0 <= -math.pi:
        t0 += 2 * math.pi
    return LatticeProfile(k=k, series=series, width=norm1(k) * f.s, phase_shift=t0)


def genericity_threshold(s, delta, c=2.0):
    """``K_s(delta) = c max{1, 1/s, log(1/(s delta))/s}``."""
    if not (0 < delta <= 1):
        raise InvalidInput("delta must lie in (0, 1]")
    if s <= 0:
        raise InvalidInput("width must be positive")
    if c <= 1:
        raise InvalidInput("calibration constant must exceed 1")
    return c * max(1.0, 1.0 / s, math.log(1.0 / (s * delta)) / s)


def _series_of(F):
    if isinstance(F, TrigSeries):
        return F
    if isinstance(F, LatticeProfile):
        return F.series
    if isinstance(F, dict):
        return TrigSeries(F)
    raise InvalidInput("expected a TrigSeries, LatticeProfile or coefficient map")


def derivative_floor(F):
    """``min_t (|F'(t)| + |F''(t)|)`` with its minimizer (grid scan plus refinement)."""
    F = _series_of(F)
    if F.is_empty():
        return 0.0, 0.0
    t = F.grid()
    g = np.abs(F(t, 1)) + np.abs(F(t, 2))
    h = t[1] - t[0]
    best_val, best_t = float(g.min()), float(t[g.argmin()])
    order = np.argsort(g)[:8]

    def obj(x):
        return abs(F(x, 1)) + abs(F(x, 2))

    for i in order:
        res = minimize_scalar(obj, bounds=(t[i] - h, t[i] + h), method="bounded",
                              options={"xatol": 1e-14})
        if res.fun < best_val:
            best_val, best_t = float(res.fun), float(res.x)
    return best_val, best_t


def critical_points(F):
    """All critical points of ``F`` in ``(-pi, pi]`` with their second derivatives."""
    F = _series_of(F)
    t = F.grid()
    h = t[1] - t[0]
    # offset grid avoids landing exactly on symmetric roots; closed by periodicity
    t = np.append(t, t[0] + 2 * np.pi) + 0.37 * h
    d1 = F(t, 1)
    roots = []
    for i in range(len(t) - 1):
        a, b = d1[i], d1[i + 1]
        if a == 0.0:
            roots.append(t[i])
        elif a * b < 0:
            r = brentq(lambda x: F(x, 1), t[i], t[i + 1], xtol=NEWTON_TOL, rtol=1e-15)
            for _ in range(3):
                d2 = F(r, 2)
                if d2 == 0:
                    break
                step = F(r, 1) / d2
                if abs(step) > h:
                    break
                r -= step
            roots.append(float(r))
    pts = []
    for r in roots:
        r = math.remainder(r, 2 * math.pi)
        if r <= -math.pi:
            r += 2 * math.pi
        if not any(abs(math.remainder(r - p, 2 * math.pi)) < 1e-10 for p in pts):
            pts.append(r)
    pts.sort()
    return [(p, float(F(p, 2))) for p in pts]


@dataclass
class MorseData:
    """Critical structure of a 1D profile.

    ``critical_points[0] = critical_points[-1] - 2 pi``; minima sit at odd
    indices and maxima at even indices. The points span one period starting
    at the first minimum in ``(-pi, pi]``.
    """

    N: int
    critical_points: np.ndarray
    critical_energies: np.ndarray
    beta: float
    M: float
    gamma: float
    cosine_like: bool
    s0: float
    series: TrigSeries = field(repr=False)
    derivative_floor: float = 0.0
    energy_gap: float = math.inf

    @property
    def minima(self):
        return self.critical_points[1::2]

    @property
    def maxima(self):
        return self.critical_points[2::2]

    def to_json(self):
        return {"N": self.N, "critical_points": self.critical_points.tolist(),
                "critical_energies": self.critical_energies.tolist(),
                "beta": self.beta, "M": self.M, "gamma": self.gamma,
                "cosine_like": self.cosine_like, "s0": self.s0}


def cosine_like_threshold(s0):
    return 0.25 * min(1.0, s0 * s0)


def morse_analyze(F, s0):
    """Critical points, Morse constant, strip norm and cosine distance of ``F``."""
    F = _series_of(F)
    if F.is_empty() or all(j == 0 for j in F.coeffs):
        raise InvalidInput("profile is constant")
    pts = critical_points(F)
    for p, d2 in pts:
        if abs(d2) < DEGENERACY_TOL:
            raise DegenerateProfile(f"degenerate critical point at t={p:.15g}", witness=p)
    if len(pts) % 2:
        raise DegenerateProfile("odd number of critical points found", witness=pts)
    start = next(i for i, (_, d2) in enumerate(pts) if d2 > 0)
    ordered = pts[start:] + [(p + 2 * math.pi, d2) for p, d2 in pts[:start]]
    for i, (p, d2) in enumerate(ordered):
        if (d2 > 0) != (i % 2 == 0):
            raise DegenerateProfile("critical points do not alternate", witness=p)
    xs = np.array([ordered[-1][0] - 2 * math.pi] + [p for p, _ in ordered])
    Es = F(xs)
    floor, tmin = derivative_floor(F)
    inner = Es[1:]
    gap = math.inf
    if len(inner) > 1:
        diffs = np.abs(inner[:, None] - inner[None, :])
        gap = float(diffs[np.triu_indices(len(inner), 1)].min())
    beta = min(floor, gap)
    if beta < DEGENERACY_TOL:
        witness = tmin if floor <= gap else xs.tolist()
        raise DegenerateProfile(f"Morse constant {beta:.3e} below tolerance", witness=witness)
    M = F.strip_norm(s0)
    gamma = (F + TrigSeries.cos(1.0)).strip_norm(s0)
    cos_like = gamma <= cosine_like_threshold(s0)
    N = len(ordered) // 2
    if cos_like and N != 1:
        raise DegenerateProfile("cosine-like profile with more than one well", witness=xs.tolist())
    return MorseData(N=N, critical_points=xs, critical_energies=Es, beta=float(beta), M=M,
                     gamma=gamma, cosine_like=cos_like, s0=s0, series=F,
                     derivative_floor=floor, energy_gap=gap)


@dataclass
class GenericityReport:
    delta: float
    K_threshold: float
    checked_radius: int
    p1_pass: bool
    p2_pass: bool
    p3_pass: bool
    p1_witness: tuple = None
    p2_witness: tuple = None
    p3_witness: tuple = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.p1_pass and self.p2_pass and self.p3_pass

    def to_json(self):
        return {"delta": self.delta, "K_threshold": self.K_threshold,
                "checked_radius": self.checked_radius, "pass": self.passed,
                "p1_pass": self.p1_pass, "p2_pass": self.p2_pass, "p3_pass": self.p3_pass,
                "p1_witness": list(self.p1_witness) if self.p1_witness else None,
                "p2_witness": list(self.p2_witness) if self.p2_witness else None,
                "p3_witness": list(self.p3_witness) if self.p3_witness else None}


def check_genericity(f, delta, c=2.0, p2_tol=1e-10, p3_tol=1e-10):
    """Check the three genericity conditions on the declared support radius.

    P1 (decay from below) is tested for primitive ``k`` with
    ``K_s(delta) < |k| <= support_radius``; modes missing inside that radius
    count as failures. P2 (no degenerate critical points) and P3 (distinct
    critical values) are tested on the lattice profiles with
    ``|k| <= K_s(delta)``.
    """
    K = genericity_threshold(f.s, delta, c)
    R = f.support_radius
    rep = GenericityReport(delta=delta, K_threshold=K, checked_radius=R,
                           p1_pass=True, p2_pass=True, p3_pass=True)
    n = f.n
    for k in primitive_vectors(n, max(R, math.floor(K))):
        nk = norm1(k)
        if nk > K:
            if nk > R:
                continue
            bound = delta * nk ** (-(n + 3) / 2) * math.exp(-nk * f.s)
            if abs(f.coefficient(k)) < bound * (1 - 1e-12) and rep.p1_pass:
                rep.p1_pass, rep.p1_witness = False, k
            continue
        prof = lattice_projection(f, k)
        floor = derivative_floor(prof.series)[0] if not prof.series.is_empty() else 0.0
        rep.details[k] = {"derivative_floor": floor}
        if floor <= p2_tol:
            if rep.p2_pass:
                rep.p2_pass, rep.p2_witness = False, k
            continue
        pts = critical_points(prof.series)
        Es = np.array([prof.series(p) for p, _ in pts])
        gap = math.inf
        if len(Es) > 1:
            d = np.abs(Es[:, None] - Es[None, :])
            gap = float(d[np.triu_indices(len(Es), 1)].min())
        rep.details[k]["energy_gap"] = gap
        scale = max(1.0, float(np.abs(Es).max())) if len(Es) else 1.0
        if gap <= p3_tol * scale and rep.p3_pass:
            rep.p3_pass, rep.p3_witness = False, k
    return rep
