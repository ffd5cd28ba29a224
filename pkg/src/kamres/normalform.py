"""Weighted norms, Fourier operators, the homological equation and the
iterated averaging (normal form) lemma.

Functions on phase space are finite sums of terms

    c * y^a * prod_m omega_m(y)^(-p_m) * exp(i k.x),    omega_m(y) = h'(y).m,

for a quadratic integrable part ``h(y) = y.Q y / 2 + b.y``. Poisson brackets
and the homological equation stay inside this class, so every object built
by the averaging procedure has a closed form in ``y``. The modes ``m`` inside
denominators are sign normalized (first nonzero entry positive) with the
sign absorbed into ``c``.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DomainError, InvalidInput, SmallDivisor, StepTooLarge
from .lattice import as_int_vector, first_nonzero_sign, norm1, nonzero_vectors

SAFETY = 1.05
LIE_TOL = 1e-16
PRUNE_TOL = 1e-20
MAX_ORDER = 60


# ---------------------------------------------------------------------------
# integrable part and domains

class Quadratic:
    """``h(y) = y.Q y / 2 + b.y``."""

    def __init__(self, Q, b=None):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n = self.Q.shape[0]
        if self.Q.shape != (n, n) or not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-15):
            raise InvalidInput("Q must be a symmetric square matrix")
        self.b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
        self.n = n

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    def __call__(self, Y):
        Y = np.asarray(Y)
        return 0.5 * np.einsum("...i,ij,...j->...", Y, self.Q, Y) + Y @ self.b

    def frequency(self, Y):
        return np.asarray(Y) @ self.Q + self.b

    def direction(self, m):
        """Gradient ``Q m`` of ``omega_m``."""
        return self.Q @ np.asarray(m, dtype=float)

    def omega(self, m, Y):
        return self.frequency(Y) @ np.asarray(m, dtype=float)

    def to_json(self):
        return {"Q": self.Q.tolist(), "b": self.b.tolist()}


class Box:
    """Real box ``prod [lo_j, hi_j]``; its complex ``r``-neighbourhood is the
    union of Euclidean balls of radius ``r`` in ``C^n`` around its points."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise InvalidInput("box needs lo <= hi componentwise")
        self.n = len(self.lo)

    def max_abs(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def min_abs_affine(self, v, c=0.0):
        """``min |v.y + c|`` over the box, with a minimizer."""
        v = np.asarray(v, dtype=float)
        y_lo = np.where(v >= 0, self.lo, self.hi)
        y_hi = np.where(v >= 0, self.hi, self.lo)
        a, b = v @ y_lo + c, v @ y_hi + c
        if a <= 0 <= b:
            t = 0.0 if b == a else -a / (b - a)
            return 0.0, y_lo + t * (y_hi - y_lo)
        return (a, y_lo) if a > 0 else (-b, y_hi)

    def base_points(self, rng, interior=8):
        n = self.n
        corners = np.array(np.meshgrid(*[[lo, hi] for lo, hi in zip(self.lo, self.hi)],
                                       indexing="ij")).reshape(n, -1).T
        mids = []
        for j in range(n):
            p = 0.5 * (self.lo + self.hi)
            for v in (self.lo[j], self.hi[j]):
                q = p.copy()
                q[j] = v
                mids.append(q)
        inner = self.lo + (self.hi - self.lo) * rng.random((interior, n))
        return np.vstack([corners, np.array(mids)]), inner

    def grid(self, m):
        axes = [np.linspace(lo, hi, m) for lo, hi in zip(self.lo, self.hi)]
        return np.array(np.meshgrid(*axes, indexing="ij")).reshape(self.n, -1).T

    def to_json(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class Ball:
    """Real Euclidean ball ``{|y - center| <= radius}``."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.n = len(self.center)

    def max_abs(self):
        return np.abs(self.center) + self.radius

    def min_abs_affine(self, v, c=0.0):
        v = np.asarray(v, dtype=float)
        nv = float(np.linalg.norm(v))
        val = float(v @ self.center + c)
        if nv == 0:
            return abs(val), self.center.copy()
        u = v / nv
        if abs(val) <= self.radius * nv:
            return 0.0, self.center - (val / nv) * u
        return abs(val) - self.radius * nv, self.center - math.copysign(self.radius, val) * u

    def base_points(self, rng, interior=8, boundary=64):
        d = rng.standard_normal((boundary, self.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        axes = np.vstack([np.eye(self.n), -np.eye(self.n)])
        pts = self.center + self.radius * np.vstack([axes, d])
        g = rng.standard_normal((interior, self.n))
        g *= (rng.random((interior, 1)) ** (1 / self.n)) / np.linalg.norm(g, axis=1, keepdims=True)
        return pts, self.center + self.radius * g

    def grid(self, m):
        axes = [np.linspace(c - self.radius, c + self.radius, m) for c in self.center]
        pts = np.array(np.meshgrid(*axes, indexing="ij")).reshape(self.n, -1).T
        return pts[np.linalg.norm(pts - self.center, axis=1) <= self.radius]

    def to_json(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


def small_divisor_floor(h, domain, m, r):
    """Exact ``min |omega_m|`` over the complex ``r``-neighbourhood, with a witness.

    ``omega_m`` is affine, so over a complex ball of radius ``r`` its modulus
    drops by exactly ``r |Q m|`` from its value at the centre.
    """
    v = h.direction(m)
    base, y = domain.min_abs_affine(v, float(h.b @ np.asarray(m, dtype=float)))
    return max(0.0, base - r * float(np.linalg.norm(v))), y


# ---------------------------------------------------------------------------
# lattices

class Lattice:
    """Either the trivial lattice ``{0}`` (``generator=None``) or ``Z k``."""

    def __init__(self, generator=None):
        self.generator = None if generator is None else as_int_vector(generator)

    def contains(self, m):
        if self.generator is None:
            return not any(m)
        k = self.generator
        if not any(m):
            return True
        n = len(k)
        return all(m[i] * k[j] == m[j] * k[i] for i in range(n) for j in range(i + 1, n))

    def to_json(self):
        return {"generator": list(self.generator) if self.generator else None}


def _lattice(Lam):
    if isinstance(Lam, Lattice):
        return Lam
    if Lam is None or Lam == 0 or Lam == "0":
        return Lattice(None)
    return Lattice(Lam)


# ---------------------------------------------------------------------------
# term algebra

def _normalize_mode(m):
    s = first_nonzero_sign(m)
    return (m, 1) if s > 0 else (tuple(-v for v in m), -1)


def _merge_dens(d1, d2):
    if not d1:
        return d2
    if not d2:
        return d1
    out = dict(d1)
    for m, p in d2:
        out[m] = out.get(m, 0) + p
    return tuple(sorted(out.items()))


def _add_dens(dens, m, dp):
    out = dict(dens)
    out[m] = out.get(m, 0) + dp
    return tuple(sorted(out.items()))


class BoundContext:
    """Caches the small-divisor floors of a complex domain ``D_r`` for term bounds."""

    def __init__(self, h, domain, r):
        self.h = h
        self.domain = domain
        self.r = r
        self.ymax = [float(v) for v in domain.max_abs() + r]
        self.alpha = {}

    def floor(self, m):
        if m not in self.alpha:
            self.alpha[m] = small_divisor_floor(self.h, self.domain, m, self.r)[0]
        return self.alpha[m]

    def monomial(self, a, dens):
        """Bound of ``|y^a prod omega_m^-p|`` on the domain."""
        val = 1.0
        for y, e in zip(self.ymax, a):
            if e:
                val *= y ** e
        for m, p in dens:
            al = self.floor(m)
            if al == 0:
                return math.inf
            val /= al ** p
        return val

    def term_and_gradient(self, fun, key, c):
        """Bounds of ``|term|`` and of ``max_j |d_{y_j} term|``."""
        ac = abs(c)
        b = ac * self.monomial(key[1], key[2])
        g = 0.0
        for gv, a2, d2 in fun._grad_pieces(key):
            g += float(np.abs(gv).max()) * ac * self.monomial(a2, d2)
        return b, g


class StateFunction:
    """Finite sum of terms ``(k, a, dens) -> c``; see the module docstring.

    Instances are treated as immutable.
    """

    def __init__(self, h, terms=None, tol=0.0):
        self.h = h
        self.n = h.n
        self.terms = {}
        for key, c in (terms or {}).items():
            if c != 0 and abs(c) > tol:
                self.terms[key] = complex(c)
        self._compiled = None
        self._deriv = {}

    # -- construction --------------------------------------------------
    @classmethod
    def zero(cls, h):
        return cls(h)

    @classmethod
    def from_modes(cls, h, modes):
        """Constant-in-``y`` coefficients ``{k: f_k}`` (both members of each pair)."""
        n = h.n
        za = (0,) * n
        return cls(h, {(as_int_vector(k), za, ()): c for k, c in modes.items()})

    @classmethod
    def from_potential(cls, h, f, scale=1.0):
        return cls.from_modes(h, {k: scale * c for k, c in f.coeffs.items()})

    @classmethod
    def from_cosines(cls, h, amplitudes):
        """``sum_k A_k cos(k.x)``."""
        modes = {}
        for k, A in amplitudes.items():
            k = as_int_vector(k)
            mk = tuple(-v for v in k)
            modes[k] = modes.get(k, 0) + A / 2
            modes[mk] = modes.get(mk, 0) + A / 2
        return cls.from_modes(h, modes)

    @classmethod
    def from_polynomial_modes(cls, h, data):
        """``data = {k: {a: c}}`` with polynomial coefficient functions."""
        terms = {}
        for k, poly in data.items():
            for a, c in poly.items():
                terms[(as_int_vector(k), tuple(int(v) for v in a), ())] = c
        return cls(h, terms)

    def copy_with(self, terms):
        return StateFunction(self.h, terms)

    # -- structure -----------------------------------------------------
    def __len__(self):
        return len(self.terms)

    def modes(self):
        return sorted({k for k, _, _ in self.terms})

    def denominators(self):
        return sorted({m for _, _, d in self.terms for m, _ in d})

    def is_zero(self):
        return not self.terms

    def select(self, pred):
        return self.copy_with({key: c for key, c in self.terms.items() if pred(key[0])})

    def __add__(self, other):
        out = dict(self.terms)
        for key, c in other.terms.items():
            out[key] = out.get(key, 0) + c
        return self.copy_with({k: c for k, c in out.items() if c != 0})

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, a):
        return self.copy_with({k: a * c for k, c in self.terms.items()})

    def max_mode(self):
        return max((norm1(k) for k in self.modes()), default=0)

    # -- calculus ------------------------------------------------------
    def _grad_pieces(self, key):
        """Pieces ``(g, a', dens')`` with ``d_{y_j} term = sum g_j * piece``."""
        k, a, dens = key
        n = self.n
        out = []
        for j in range(n):
            if a[j]:
                g = np.zeros(n)
                g[j] = a[j]
                aj = list(a)
                aj[j] -= 1
                out.append((g, tuple(aj), dens))
        for m, p in dens:
            g = -p * self.h.direction(m)
            out.append((g, a, _add_dens(dens, m, 1)))
        return out

    def derivative(self, j):
        """``d/dy_j`` as a new function."""
        if j in self._deriv:
            return self._deriv[j]
        out = {}
        for key, c in self.terms.items():
            k = key[0]
            for g, a2, d2 in self._grad_pieces(key):
                if g[j]:
                    nk = (k, a2, d2)
                    out[nk] = out.get(nk, 0) + c * g[j]
        res = self.copy_with(out)
        self._deriv[j] = res
        return res

    def bracket(self, other, bounds=None, threshold=0.0, s=0.0):
        """``{self, other} = sum_i (self_{x_i} other_{y_i} - self_{y_i} other_{x_i})``.

        With a :class:`BoundContext` and a positive ``threshold``, pairs of
        terms whose bracket has weighted bound (width ``s``) below the
        threshold are skipped. Returns ``(result, skipped_mass)`` in that case.
        """
        out = {}
        skipped = 0.0
        filt = bounds is not None and threshold > 0
        opieces = [(key, c, np.asarray(key[0], dtype=float), other._grad_pieces(key))
                   for key, c in other.terms.items()]
        if filt:
            tab = np.array([bounds.term_and_gradient(other, key, c) for key, c, _, _ in opieces])
            tab = tab.reshape(len(opieces), 2)
            om = np.array([norm1(key[0]) for key, _, _, _ in opieces], dtype=float)
            oexp = np.exp(om * s)
        everything = range(len(opieces))
        for ukey, uc in self.terms.items():
            k, a, dens = ukey
            kv = np.asarray(k, dtype=float)
            upieces = self._grad_pieces(ukey)
            chosen = everything
            if filt:
                nk1 = norm1(k)
                bu, gu = bounds.term_and_gradient(self, ukey, uc)
                w = (bu * nk1 * tab[:, 1] + tab[:, 0] * om * gu) * oexp * math.exp(nk1 * s)
                keep = w >= threshold
                skipped += float(w[~keep].sum())
                chosen = np.flatnonzero(keep)
            for i in chosen:
                okey, oc, mv, ogp = opieces[i]
                m, b, dens_o = okey
                km = tuple(x + y for x, y in zip(k, m))
                # i u (k . grad phi)
                for g, b2, d2 in ogp:
                    t = kv @ g
                    if t:
                        nk = (km, tuple(x + y for x, y in zip(a, b2)), _merge_dens(dens, d2))
                        out[nk] = out.get(nk, 0) + 1j * uc * oc * t
                # - i phi (m . grad u)
                for g, a2, d2 in upieces:
                    t = mv @ g
                    if t:
                        nk = (km, tuple(x + y for x, y in zip(b, a2)), _merge_dens(dens_o, d2))
                        out[nk] = out.get(nk, 0) - 1j * uc * oc * t
        res = self.copy_with({k: c for k, c in out.items() if c != 0})
        return (res, skipped) if filt else res

    # -- bounds --------------------------------------------------------
    def term_bounds(self, domain, r):
        """Rigorous upper bounds of ``|term|`` over the complex domain, per term."""
        ctx = BoundContext(self.h, domain, r)
        keys = list(self.terms)
        out = np.array([ctx.monomial(key[1], key[2]) * abs(self.terms[key]) for key in keys])
        return keys, out

    def majorant_norm(self, domain, r, s):
        """``sup_k e^{|k|s} sum |term bound|``, an upper bound of the weighted norm."""
        if not self.terms:
            return 0.0
        keys, b = self.term_bounds(domain, r)
        acc = {}
        for key, v in zip(keys, b):
            acc[key[0]] = acc.get(key[0], 0.0) + v
        return max(v * math.exp(norm1(k) * s) for k, v in acc.items())

    def prune(self, domain, r, s, threshold):
        """Drop terms whose weighted bound is below ``threshold``.

        Returns the pruned function and the total dropped weighted mass.
        """
        if not self.terms or threshold <= 0:
            return self, 0.0
        keys, b = self.term_bounds(domain, r)
        keep, dropped = {}, 0.0
        for key, v in zip(keys, b):
            w = v * math.exp(norm1(key[0]) * s)
            if w < threshold:
                dropped += w
            else:
                keep[key] = self.terms[key]
        return self.copy_with(keep), dropped

    # -- evaluation ----------------------------------------------------
    def _compile(self):
        if self._compiled is None:
            keys = list(self.terms)
            dens_modes = self.denominators()
            idx = {m: i for i, m in enumerate(dens_modes)}
            nt, nd = len(keys), len(dens_modes)
            K = np.array([k for k, _, _ in keys], dtype=float).reshape(nt, self.n)
            A = np.array([a for _, a, _ in keys], dtype=float).reshape(nt, self.n)
            P = np.zeros((nt, nd))
            for i, (_, _, d) in enumerate(keys):
                for m, p in d:
                    P[i, idx[m]] = p
            M = np.array(dens_modes, dtype=float).reshape(nd, self.n)
            C = np.array([self.terms[key] for key in keys], dtype=complex)
            modes = sorted({key[0] for key in keys})
            midx = {k: i for i, k in enumerate(modes)}
            S = np.zeros((nt, len(modes)))
            for i, key in enumerate(keys):
                S[i, midx[key[0]]] = 1.0
            self._compiled = (K, A, P, M, C, modes, S)
        return self._compiled

    def _term_values(self, Y):
        """Coefficient part of each term at (possibly complex) ``Y``, shape ``(npts, nt)``."""
        K, A, P, M, C, modes, S = self._compile()
        Y = np.asarray(Y)
        vals = np.broadcast_to(C, (Y.shape[0], len(C))).astype(complex)
        for j in range(self.n):
            col = A[:, j]
            if np.any(col):
                vals = vals * Y[:, j:j + 1] ** col[None, :]
        if P.shape[1]:
            W = Y @ (self.h.Q @ M.T) + self.h.b @ M.T
            if np.any(W == 0):
                raise DomainError("evaluation on a resonance: small divisor vanishes")
            vals = vals * np.exp(-(np.log(W.astype(complex)) @ P.T))
        return vals

    def coefficient_values(self, Y):
        """``{k: f_k(Y)}`` for points ``Y`` of shape ``(npts, n)``."""
        if not self.terms:
            return {}
        K, A, P, M, C, modes, S = self._compile()
        V = self._term_values(Y) @ S
        return {k: V[:, i] for i, k in enumerate(modes)}

    def evaluate(self, Y, X, xderiv=None):
        """Real value at points ``(Y, X)`` (shape ``(npts, n)`` each).

        ``xderiv`` is a multi-index of angle derivatives.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.terms:
            return np.zeros(Y.shape[0])
        K = self._compile()[0]
        vals = self._term_values(Y) * np.exp(1j * (X @ K.T))
        if xderiv is not None:
            fac = np.ones(K.shape[0], dtype=complex)
            for j, d in enumerate(xderiv):
                if d:
                    fac = fac * (1j * K[:, j]) ** d
            vals = vals * fac[None, :]
        return vals.sum(axis=1).real

    def imag_residue(self, Y, X):
        """Largest imaginary part at real points (reality check)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.terms:
            return 0.0
        K = self._compile()[0]
        vals = (self._term_values(Y) * np.exp(1j * (X @ K.T))).sum(axis=1)
        return float(np.abs(vals.imag).max())

    def to_json(self):
        return {"terms": len(self.terms), "modes": [list(k) for k in self.modes()]}


# ---------------------------------------------------------------------------
# norms

@dataclass
class NormValue:
    raw: float
    inflated: float
    majorant: float

    def to_json(self):
        return {"raw": self.raw, "inflated": self.inflated, "majorant": self.majorant}


_SAMPLE_CACHE = {}


def _sample_points(domain, r, h, dens_modes, seed=0, boundary_dirs=64):
    """Complex sample points of ``D_r``: base points of ``D`` moved by ``r`` in
    random complex directions, coordinate directions and the directions that
    decrease each denominator fastest, plus interior points."""
    key = (id(domain), r, tuple(dens_modes), seed)
    if key in _SAMPLE_CACHE:
        return _SAMPLE_CACHE[key]
    rng = np.random.default_rng(seed)
    n = domain.n
    base, inner = domain.base_points(rng)
    dirs = rng.standard_normal((boundary_dirs, n)) + 1j * rng.standard_normal((boundary_dirs, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    eye = np.eye(n)
    dirs = np.vstack([dirs, eye, -eye, 1j * eye, -1j * eye])
    pts = [(base[:, None, :] + r * dirs[None, :, :]).reshape(-1, n), inner.astype(complex)]
    sign_dirs = np.where(base >= 0, 1.0, -1.0)
    pts.append(base + r * sign_dirs / math.sqrt(n))
    for m in dens_modes:
        v = h.direction(m)
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        _, y0 = domain.min_abs_affine(v, float(h.b @ np.asarray(m, dtype=float)))
        w = float(h.omega(m, y0[None, :])[0])
        step = -math.copysign(r, w) * v / nv if w != 0 else r * v / nv
        for t in (1.0, 0.999, 0.99, 0.9, 0.5):
            pts.append((y0 + t * step)[None, :].astype(complex))
    out = np.vstack(pts)
    _SAMPLE_CACHE[key] = out
    if len(_SAMPLE_CACHE) > 256:
        _SAMPLE_CACHE.pop(next(iter(_SAMPLE_CACHE)))
    return out


def weighted_norm(f, domain, r, s, seed=0):
    """Weighted sup norm ``sup_k e^{|k|s} sup_{D_r} |f_k|``.

    The inner sup is estimated by sampling; ``inflated`` multiplies by the
    safety factor and ``majorant`` is a rigorous term-wise upper bound.
    """
    if r < 0 or s < 0:
        raise InvalidInput("widths must be nonnegative")
    if f.is_zero():
        return NormValue(0.0, 0.0, 0.0)
    pts = _sample_points(domain, r, f.h, f.denominators(), seed)
    vals = f.coefficient_values(pts)
    raw = 0.0
    for k, v in vals.items():
        sup = float(np.abs(v).max())
        if not np.isfinite(sup):
            raise DomainError(f"coefficient of mode {k} is singular on the domain")
        raw = max(raw, sup * math.exp(norm1(k) * s))
    maj = f.majorant_norm(domain, r, s)
    return NormValue(float(raw), float(SAFETY * raw), float(maj))


def sup_norm(f, domain, r, s, seed=0, angle_points=16):
    """Plain sup of ``|f|`` over ``D_r x T^n_s`` by sampling (boundary in angles)."""
    if f.is_zero():
        return 0.0
    pts = _sample_points(domain, r, f.h, f.denominators(), seed)
    n = f.n
    K = np.array(f.modes(), dtype=float)
    vals = f.coefficient_values(pts)
    C = np.stack([vals[tuple(int(v) for v in k)] for k in K], axis=1)
    rng = np.random.default_rng(seed + 1)
    best = 0.0
    for _ in range(angle_points):
        x = rng.uniform(-np.pi, np.pi, n) + 1j * s * rng.choice([-1.0, 1.0], n)
        best = max(best, float(np.abs(C @ np.exp(1j * (K @ x))).max()))
    return best


def coth_bound(f_norm_wider, n, sigma):
    """``coth^n(sigma/2) |f|_{r,s+sigma}``, the sup-norm bound from the weighted norm."""
    return (1 / math.tanh(sigma / 2)) ** n * f_norm_wider


# ---------------------------------------------------------------------------
# Fourier operators

def project_lattice(f, Lam):
    L = _lattice(Lam)
    return f.select(L.contains)


def project_perp(f, Lam):
    L = _lattice(Lam)
    return f.select(lambda k: not L.contains(k))


def truncate(f, N):
    return f.select(lambda k: norm1(k) <= N)


def truncate_perp(f, N):
    return f.select(lambda k: norm1(k) > N)


def fourier_operators(f, Lam=None, N=None):
    """``(P_Lam f, P_Lam^perp f)`` or, with ``N``, ``(T_N f, T_N^perp f)``."""
    if N is not None:
        return truncate(f, N), truncate_perp(f, N)
    return project_lattice(f, Lam), project_perp(f, Lam)


def resonant_split(f, Lam, K):
    """``(f_flat, f_K)`` with ``f_K = T_K P_Lam^perp f``."""
    L = _lattice(Lam)
    fK = f.select(lambda k: not L.contains(k) and norm1(k) <= K)
    flat = f.select(lambda k: L.contains(k) or norm1(k) > K)
    return flat, fK


# ---------------------------------------------------------------------------
# homological equation

def nonresonance_floor(h, Lam, K, domain, r):
    """``min |omega_m|`` over ``D_r`` and ``m`` outside ``Lam`` with ``|m| <= K``."""
    L = _lattice(Lam)
    best, witness = math.inf, None
    for m in nonzero_vectors(h.n, int(math.floor(K))):
        if first_nonzero_sign(m) < 0 or L.contains(m):
            continue
        a, y = small_divisor_floor(h, domain, m, r)
        if a < best:
            best, witness = a, (y, m)
    return best, witness


def solve_homological(h, f, Lam, K, domain, r, alpha=None):
    """Solve ``{h, phi} + T_K P_Lam^perp f = 0``.

    ``phi_m = f_m / (i omega_m)``. The non-resonance condition
    ``|omega_m| >= alpha`` is checked exactly on ``D_r`` for all ``m`` outside
    the lattice with ``|m| <= K``.
    """
    floor, witness = nonresonance_floor(h, Lam, K, domain, r)
    need = 0.0 if alpha is None else alpha
    if floor < need or floor == 0:
        y, m = witness
        raise SmallDivisor(f"|h'(y).m| = {floor:.3e} < {need:.3e} at m={m}", y=y.tolist(), m=m)
    _, fK = resonant_split(f, Lam, K)
    out = {}
    for (k, a, dens), c in fK.terms.items():
        m, sgn = _normalize_mode(k)
        # 1 / omega_k = sgn / omega_m
        out[(k, a, _add_dens(dens, m, 1))] = -1j * sgn * c
    return StateFunction(h, out)


def homological_residual(h, phi, fK, domain, action_points=17, angle_points=32):
    """``max |{h, phi} + f^K|`` on an action grid times an angle grid, and ``max |f^K|``."""
    n = h.n
    m = max(angle_points, 4 * max(phi.max_mode(), fK.max_mode(), 1))
    Yg = domain.grid(action_points)
    ax = [np.linspace(0, 2 * np.pi, m, endpoint=False)] * n
    Xg = np.array(np.meshgrid(*ax, indexing="ij")).reshape(n, -1).T
    res, scale = 0.0, 0.0
    for start in range(0, len(Yg), 16):
        Yc = Yg[start:start + 16]
        Y = np.repeat(Yc, len(Xg), axis=0)
        X = np.tile(Xg, (len(Yc), 1))
        freq = h.frequency(Y)
        brk = np.zeros(len(Y))
        for j in range(n):
            e = [0] * n
            e[j] = 1
            brk -= freq[:, j] * phi.evaluate(Y, X, xderiv=e)
        fv = fK.evaluate(Y, X)
        res = max(res, float(np.abs(brk + fv).max()))
        scale = max(scale, float(np.abs(fv).max()))
    return res, scale


# ---------------------------------------------------------------------------
# averaging step and iteration

@dataclass
class StepReport:
    theta: float
    f_norm: float
    fK_norm: float
    fstar_norm: NormValue
    bound: float
    orders: int
    dropped: float
    tail: float
    alpha: float
    r: float
    s: float
    r_next: float
    s_next: float
    terms: int

    @property
    def holds(self):
        return bool(self.fstar_norm.inflated <= self.bound)

    def to_json(self):
        return {"theta": self.theta, "f_norm": self.f_norm, "fK_norm": self.fK_norm,
                "fstar_norm": self.fstar_norm.to_json(), "bound": self.bound,
                "holds": self.holds, "orders": self.orders, "dropped": self.dropped,
                "tail": self.tail, "alpha": self.alpha, "r": self.r, "s": self.s,
                "r_next": self.r_next, "s_next": self.s_next, "terms": self.terms}


@dataclass
class Hamiltonian:
    """``H = h(y) + f(y, x)``."""

    h: Quadratic
    f: StateFunction

    def evaluate(self, Y, X):
        return self.h(np.atleast_2d(Y)) + self.f.evaluate(Y, X)


def _lie_remainder(flat, fK, phi, domain, r, s, scale, theta, prune_tol=PRUNE_TOL,
                   lie_tol=LIE_TOL, max_order=MAX_ORDER):
    """``sum_{l>=1} [ad^l f_flat / l! + l ad^l f^K / (l+1)!]`` with pruning.

    Terms and bracket pairs below ``prune_tol * scale`` are discarded; their
    weighted bounds, carried by ``1/(1 - q)`` for the higher brackets they
    would have seeded, are returned as ``dropped``.
    Returns ``(f_star, orders, dropped, tail)``.
    """
    total = StateFunction(fK.h)
    C, B = flat, fK
    ctx = BoundContext(fK.h, domain, r)
    q = min(theta, 0.5)
    carry = 1.0 / (1 - q)
    dropped = 0.0
    thr = prune_tol * scale
    fact = 1.0
    for ell in range(1, max_order + 1):
        d = 0.0
        for name in ("C", "B"):
            u = C if name == "C" else B
            if u.is_zero():
                continue
            u, skip = u.bracket(phi, bounds=ctx, threshold=thr, s=s)
            u, cut = u.prune(domain, r, s, thr)
            d += skip + cut
            if name == "C":
                C = u
            else:
                B = u
        fact *= ell
        dropped += d * carry / fact
        term = C.scale(1.0 / fact) + B.scale(ell / (fact * (ell + 1)))
        total = total + term
        size = term.majorant_norm(domain, r, s)
        if ell >= 2 and size <= lie_tol * scale:
            return total, ell, dropped, size * q / (1 - q)
    raise StepTooLarge("Lie series did not reach the truncation tolerance", theta=theta)


def averaging_step(H, Lam, alpha, K, domain, r, s, rho=None, sigma=None, ref=None,
                   prune_tol=PRUNE_TOL):
    """One averaging step: ``H o X^1_phi = h + f_flat + f_*``.

    ``rho`` and ``sigma`` default to ``r/4K`` and ``s/2K^2``, so the new widths
    are ``r(1 - 1/2K)`` and ``s(1 - 1/K^2)``. ``ref = (r0, s0)`` fixes the
    widths entering the smallness parameter (the original ones inside the
    iteration).
    """
    h, f = H.h, H.f
    n = h.n
    rho = r / (4 * K) if rho is None else rho
    sigma = s / (2 * K * K) if sigma is None else sigma
    r_ref, s_ref = ref or (r, s)
    r_next, s_next = r - 2 * rho, s - 2 * sigma
    if alpha is None:
        alpha = nonresonance_floor(h, Lam, K, domain, r)[0]
    flat, fK = resonant_split(f, Lam, K)
    f_norm = weighted_norm(f, domain, r, s).inflated
    if fK.is_zero():
        rep = StepReport(theta=0.0, f_norm=f_norm, fK_norm=0.0, fstar_norm=NormValue(0, 0, 0),
                         bound=0.0, orders=0, dropped=0.0, tail=0.0, alpha=alpha, r=r, s=s,
                         r_next=r_next, s_next=s_next, terms=len(f))
        return Hamiltonian(h, f), rep, StateFunction(h)
    phi = solve_homological(h, f, Lam, K, domain, r, alpha)
    fK_norm = weighted_norm(fK, domain, r, s).inflated
    theta = 2 ** 5 * n * K ** 3 * fK_norm / (alpha * r_ref * s_ref)
    if theta > 1:
        raise StepTooLarge(f"step smallness {theta:.3e} exceeds 1", theta=theta)
    fstar, orders, dropped, tail = _lie_remainder(flat, fK, phi, domain, r, s, f_norm, theta,
                                                  prune_tol=prune_tol)
    fs = weighted_norm(fstar, domain, r_next, s_next)
    fs = NormValue(fs.raw, fs.inflated + dropped + tail, fs.majorant + dropped + tail)
    rep = StepReport(theta=theta, f_norm=f_norm, fK_norm=fK_norm, fstar_norm=fs,
                     bound=2 * theta * f_norm, orders=orders, dropped=dropped, tail=tail,
                     alpha=alpha, r=r, s=s, r_next=r_next, s_next=s_next,
                     terms=len(fstar) + len(flat))
    return Hamiltonian(h, flat + fstar), rep, phi


@dataclass
class NormalFormReport:
    """Result of the iterated normal form on ``D_{r/2} x T^n_{s(1-1/K)}``."""

    g: StateFunction
    f_star: StateFunction
    f_flat: StateFunction
    f_starstar: StateFunction
    theta_star: float
    f_norm: float
    norms: dict
    steps: int
    step_reports: list
    generators: list
    lattice: Lattice
    K: float
    r: float
    s: float
    alpha: float
    domain: object = field(repr=False, default=None)

    @property
    def r_star(self):
        return self.r / 2

    @property
    def s_star(self):
        return self.s * (1 - 1 / self.K)

    @property
    def theta(self):
        """Smallness of the run; at test scale ``theta_*`` stands in for the
        asymptotic law of the simple-resonance regime."""
        return self.theta_star

    @property
    def bounds_hold(self):
        return bool(self.norms["fstar_ok"] and self.norms["low_modes_ok"])

    def hamiltonian(self):
        return Hamiltonian(self.g.h, self.f_flat + self.f_star)

    def to_json(self):
        return {"theta_star": self.theta_star, "f_norm": self.f_norm, "steps": self.steps,
                "K": self.K, "r": self.r, "s": self.s, "alpha": self.alpha,
                "r_star": self.r_star, "s_star": self.s_star,
                "lattice": self.lattice.to_json(), "norms": self.norms,
                "bounds_hold": self.bounds_hold,
                "step_reports": [rp.to_json() for rp in self.step_reports]}


def normal_form_iterate(H, Lam, alpha, K, domain, r, s, prune_tol=PRUNE_TOL):
    """Compose ``ceil(K)`` averaging steps (Normal Form Lemma).

    Refuses with :class:`StepTooLarge` when ``theta_* >= 1``.
    """
    if K < 1:
        raise InvalidInput("cut-off K must be at least 1")
    L = _lattice(Lam)
    h, f = H.h, H.f
    n = h.n
    if alpha is None:
        alpha = nonresonance_floor(h, L, K, domain, r)[0]
    f_norm = weighted_norm(f, domain, r, s).inflated
    theta_star = 2 ** 9 * n * K ** 3 * f_norm / (alpha * r * s)
    if theta_star >= 1:
        raise StepTooLarge(f"theta_* = {theta_star:.3e} >= 1", theta=theta_star,
                           report={"theta_star": theta_star, "f_norm": f_norm,
                                   "alpha": alpha, "r": r, "s": s, "K": K})
    Kbar = math.ceil(K)
    rho, sigma = r / (4 * Kbar), s / (2 * K * Kbar)
    flat0, _ = resonant_split(f, L, K)
    cur = H
    reports, gens = [], []
    ri, si = r, s
    for _ in range(Kbar):
        cur, rep, phi = averaging_step(cur, L, alpha, K, domain, ri, si, rho=rho, sigma=sigma,
                                       ref=(r, s), prune_tol=prune_tol)
        reports.append(rep)
        gens.append(phi)
        ri, si = ri - 2 * rho, si - 2 * sigma
    r_star, s_star = r / 2, s * (1 - 1 / K)
    f_final = cur.f
    f_star = f_final - flat0
    pruned_mass = sum(rp.dropped + rp.tail for rp in reports)
    fs = weighted_norm(f_star, domain, r_star, s_star)
    _, low = resonant_split(f_star, L, K)
    low_norm = weighted_norm(low, domain, r_star, s_star)
    fs_val = fs.inflated + pruned_mass
    low_val = low_norm.inflated + pruned_mass
    log_low_bound = K * math.log(theta_star / 2) + math.log(f_norm)
    g = project_lattice(f, L) + project_lattice(f_star, L)
    fss = low + truncate_perp(project_perp(f_star + f, L), K)
    norms = {
        "f": f_norm,
        "f_star": fs_val, "f_star_raw": fs.raw, "f_star_majorant": fs.majorant + pruned_mass,
        "f_star_bound": 2 * theta_star * f_norm,
        "fstar_ok": bool(fs_val <= 2 * theta_star * f_norm),
        "low_modes": low_val,
        "log_low_modes": math.log(low_val) if low_val > 0 else -math.inf,
        "log_low_modes_bound": log_low_bound,
        "low_modes_ok": bool((math.log(low_val) if low_val > 0 else -math.inf) <= log_low_bound),
        "pruned_mass": pruned_mass,
    }
    g_dev = weighted_norm(project_lattice(f_star, L), domain, r_star, s_star).inflated + pruned_mass
    norms["g_deviation"] = g_dev
    norms["g_deviation_bound"] = 2 * theta_star * f_norm
    if theta_star <= math.exp(-s) / 2:
        fss_norm = weighted_norm(fss, domain, r_star, s / 2).inflated + pruned_mass
        norms["f_starstar"] = fss_norm
        norms["f_starstar_bound"] = 2 * math.exp(-K * s / 2) * f_norm
    return NormalFormReport(g=g, f_star=f_star, f_flat=flat0, f_starstar=fss,
                            theta_star=theta_star, f_norm=f_norm, norms=norms, steps=Kbar,
                            step_reports=reports, generators=gens, lattice=L, K=K, r=r, s=s,
                            alpha=alpha, domain=domain)


# ---------------------------------------------------------------------------
# Lie transforms as flows

def _flow_rhs(phi, n, npts, variational=False):
    dphi = [phi.derivative(j) for j in range(n)]
    d2 = [[dphi[i].derivative(j) for j in range(n)] for i in range(n)]
    unit = np.eye(n, dtype=int)

    def rhs(t, z):
        if variational:
            base = z[:2 * n * npts].reshape(npts, 2 * n)
            V = z[2 * n * npts:].reshape(npts, 2 * n, 2 * n)
        else:
            base = z.reshape(npts, 2 * n)
        Y, X = base[:, :n], base[:, n:]
        xdot = np.stack([dphi[j].evaluate(Y, X) for j in range(n)], axis=1)
        ydot = -np.stack([phi.evaluate(Y, X, xderiv=unit[j]) for j in range(n)], axis=1)
        out = np.concatenate([ydot, xdot], axis=1).ravel()
        if not variational:
            return out
        # Jacobian of the vector field (ydot, xdot) in (y, x)
        Jm = np.zeros((npts, 2 * n, 2 * n))
        for i in range(n):
            for j in range(n):
                Jm[:, i, j] = -dphi[j].evaluate(Y, X, xderiv=unit[i])
                Jm[:, i, n + j] = -phi.evaluate(Y, X, xderiv=unit[i] + unit[j])
                Jm[:, n + i, j] = d2[i][j].evaluate(Y, X)
                Jm[:, n + i, n + j] = dphi[i].evaluate(Y, X, xderiv=unit[j])
        dV = np.einsum("pij,pjk->pik", Jm, V)
        return np.concatenate([out, dV.ravel()])
    return rhs


def lie_flow(phi, Y, X, variational=False, rtol=1e-13, atol=1e-15):
    """Time-one map of the Hamiltonian flow of ``phi`` (``xdot = phi_y``, ``ydot = -phi_x``)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = Y.shape[1]
    npts = Y.shape[0]
    z0 = np.concatenate([Y, X], axis=1).ravel()
    if variational:
        z0 = np.concatenate([z0, np.tile(np.eye(2 * n), (npts, 1, 1)).ravel()])
    if phi.is_zero():
        sol_y = z0
    else:
        sol = solve_ivp(_flow_rhs(phi, n, npts, variational), (0.0, 1.0), z0, method="DOP853",
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise DomainError(f"Lie flow integration failed: {sol.message}")
        sol_y = sol.y[:, -1]
    base = sol_y[:2 * n * npts].reshape(npts, 2 * n)
    if variational:
        return base[:, :n], base[:, n:], sol_y[2 * n * npts:].reshape(npts, 2 * n, 2 * n)
    return base[:, :n], base[:, n:]


def compose_transform(generators, Y, X, variational=False):
    """``Psi = X^1_{phi_0} o ... o X^1_{phi_last}`` applied to ``(Y, X)``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = Y.shape[1]
    Jac = np.tile(np.eye(2 * n), (Y.shape[0], 1, 1))
    for phi in reversed(generators):
        if variational:
            Y, X, V = lie_flow(phi, Y, X, variational=True)
            Jac = np.einsum("pij,pjk->pik", V, Jac)
        else:
            Y, X = lie_flow(phi, Y, X)
    if variational:
        return Y, X, Jac
    return Y, X


def symplectic_defect(Jac):
    """``max |J^T Omega J - Omega|`` over a stack of Jacobians."""
    n2 = Jac.shape[1]
    n = n2 // 2
    Om = np.zeros((n2, n2))
    Om[:n, n:] = -np.eye(n)
    Om[n:, :n] = np.eye(n)
    D = np.einsum("pji,jk,pkl->pil", Jac, Om, Jac) - Om
    return float(np.abs(D).max())


def conjugation_defect(H, report, Y, X):
    """``max |H(Psi(Y, X)) - (h + f_flat + f_*)(Y, X)|`` at real points."""
    Yp, Xp = compose_transform(report.generators, Y, X)
    lhs = H.evaluate(Yp, Xp)
    rhs = report.hamiltonian().evaluate(Y, X)
    return float(np.abs(lhs - rhs).max())


# ---------------------------------------------------------------------------
# effective potential on a simple resonance

@dataclass
class EffectiveProfileComparison:
    k: tuple
    delta_k: float
    G_minus_F: float
    G_minus_F_bound: float
    cosine_residual: float
    cosine_residual_bound: float
    components: dict

    @property
    def passed(self):
        return (self.G_minus_F <= self.G_minus_F_bound
                and self.cosine_residual <= self.cosine_residual_bound)

    def to_json(self):
        return {"k": list(self.k), "delta_k": self.delta_k, "G_minus_F": self.G_minus_F,
                "G_minus_F_bound": self.G_minus_F_bound,
                "cosine_residual": self.cosine_residual,
                "cosine_residual_bound": self.cosine_residual_bound,
                "components": self.components, "passed": self.passed}


def effective_profile(report, f_tilde, epsilon, K_threshold):
    """Compare ``G^k = g / epsilon`` with ``F^k`` and with ``-cos`` on ``Z k``.

    ``f_tilde`` is the normalized potential (``|f_tilde|_s <= 1``) and
    ``epsilon`` its scale in the normal form input. ``K_threshold`` is
    ``K_s(delta)``. Returns the computed norms and their bounds: the
    deviation ``|G - F|`` against ``2 theta_*``, and the cosine residual
    ``R^k`` on the strip of width ``|k|s/3`` against the sum of the tail,
    normal-form and first-mode contributions.
    """
    L = report.lattice
    if L.generator is None:
        raise InvalidInput("effective profile needs a Z k normal form")
    k = L.generator
    nk = norm1(k)
    s = f_tilde.s
    domain = report.domain
    r_star, s_star = report.r_star, report.s_star
    theta = report.theta_star
    h = report.g.h
    dev = project_lattice(report.f_star, L).scale(1.0 / epsilon)
    dev_norm = weighted_norm(dev, domain, r_star, s_star).inflated + \
        report.norms["pruned_mass"] / epsilon
    fk = abs(f_tilde.coefficient(k))
    delta_k = 1.0 if nk <= K_threshold else 2 * fk
    components = {}
    if fk == 0:
        return EffectiveProfileComparison(k, delta_k, dev_norm, 2 * theta, math.inf, math.inf,
                                          components)
    # R^k = G^k / (2|f_k|) + cos(psi') in the translated angle psi' = k.x + t0
    c1 = f_tilde.coefficient(k)
    t0 = math.pi - math.atan2(c1.imag, c1.real)
    Gk = report.g.scale(1.0 / (2 * fk * epsilon))
    shift = {}
    for (mode, a, dens), c in Gk.terms.items():
        j = _multiple(mode, k)
        shift[(mode, a, dens)] = c * np.exp(-1j * j * t0)
    R = StateFunction(h, shift)
    cos_terms = StateFunction.from_cosines(h, {k: 1.0})
    R = R + cos_terms
    strip = nk * s / 3
    res = weighted_norm(R, domain, r_star, strip / nk).inflated
    res += report.norms["pruned_mass"] / (2 * fk * epsilon)
    # R^k = (F^k + 2|f_k| cos) / 2|f_k| + (G^k - F^k) / 2|f_k|; each piece is
    # bounded by the corresponding 1/|f_k| estimate on the |k|s/3 strip
    components["tail"] = math.exp(-4 * nk * s / 3) / fk
    components["high_modes"] = 2 * theta * math.exp(-2 * nk * (s_star - s / 3)) / fk
    components["first_mode"] = 2 * theta * math.exp(-nk * (s_star - s / 3)) / fk
    bound = sum(components.values())
    return EffectiveProfileComparison(k=k, delta_k=delta_k, G_minus_F=dev_norm,
                                      G_minus_F_bound=2 * theta, cosine_residual=res,
                                      cosine_residual_bound=bound, components=components)


def _multiple(mode, k):
    for a, b in zip(mode, k):
        if b:
            return a // b
    return 0
