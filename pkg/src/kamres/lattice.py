"""Exact integer and rational algebra for resonance lattices.

All identities here are exact: integer vectors are tuples of Python ints,
rational matrices are tuples of tuples of :class:`fractions.Fraction`.
Floating point is produced only by the explicit ``*_float`` accessors.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import product
from math import gcd, sqrt
import numbers

import numpy as np

from .errors import InvalidInput


def as_int_vector(k):
    """Return ``k`` as a tuple of Python ints, rejecting non-integers."""
    out = []
    for v in k:
        if isinstance(v, numbers.Integral):
            out.append(int(v))
        elif isinstance(v, (float, Fraction)) and v == int(v):
            out.append(int(v))
        else:
            raise InvalidInput(f"non-integer entry {v!r} in {k!r}")
    if not out:
        raise InvalidInput("empty integer vector")
    return tuple(out)


def vector_gcd(k):
    g = 0
    for v in k:
        g = gcd(g, v)
    return g


def is_primitive(k):
    return vector_gcd(k) == 1


def first_nonzero_sign(k):
    for v in k:
        if v:
            return 1 if v > 0 else -1
    return 0


def is_sharp(k):
    """True if the first nonzero entry of ``k`` is positive."""
    return first_nonzero_sign(k) > 0


def norm1(k):
    return sum(abs(v) for v in k)


def norm_inf(k):
    return max(abs(v) for v in k)


def kappa(k):
    """Squared Euclidean norm of an integer vector."""
    return sum(v * v for v in k)


def normalize_generator(k):
    """Split ``k`` as ``j * kstar`` with ``kstar`` primitive and sign-normalized.

    Parameters
    ----------
    k : sequence of int
        Nonzero integer vector.

    Returns
    -------
    kstar : tuple of int
        Primitive vector whose first nonzero entry is positive.
    j : int
        Nonzero integer with ``k == j * kstar``.
    """
    k = as_int_vector(k)
    g = vector_gcd(k)
    if g == 0:
        raise InvalidInput("zero vector has no generator")
    j = first_nonzero_sign(k) * g
    return tuple(v // j for v in k), j


def bezout_pair(a, b):
    """Bezout coefficients ``(x, y, d)`` with ``a*x + b*y = d = gcd(a, b)``.

    Among all solutions ``x`` is chosen with minimal ``|x|``; a tie between
    two minimizers is broken toward ``x >= 0``. When ``b == 0`` the family
    is fixed in ``x`` and ``y = 0`` is returned.
    """
    a, b = int(a), int(b)
    if a == 0 and b == 0:
        raise InvalidInput("bezout_pair(0, 0) is undefined")
    old_r, r = a, b
    old_s, s = 1, 0
    old_t, t = 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
        old_t, t = t, old_t - q * t
    if old_r < 0:
        old_r, old_s, old_t = -old_r, -old_s, -old_t
    d, x0, y0 = old_r, old_s, old_t
    if b == 0:
        return (1 if a > 0 else -1), 0, d
    step_x, step_y = b // d, a // d
    # x = x0 + t*step_x, y = y0 - t*step_y
    t0 = (-x0) // step_x
    best = None
    for t in (t0 - 1, t0, t0 + 1, t0 + 2):
        x = x0 + t * step_x
        key = (abs(x), 0 if x >= 0 else 1)
        if best is None or key < best[0]:
            best = (key, x, y0 - t * step_y)
    _, x, y = best
    assert a * x + b * y == d
    return x, y, d


def _det_int(M):
    """Exact determinant of an integer matrix (Bareiss elimination)."""
    M = [list(row) for row in M]
    n = len(M)
    sign, prev = 1, 1
    for i in range(n - 1):
        if M[i][i] == 0:
            for r in range(i + 1, n):
                if M[r][i]:
                    M[i], M[r] = M[r], M[i]
                    sign = -sign
                    break
            else:
                return 0
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                M[r][c] = (M[r][c] * M[i][i] - M[r][i] * M[i][c]) // prev
        prev = M[i][i]
    return sign * M[-1][-1]


def det_exact(M):
    """Exact determinant of an integer or rational square matrix."""
    if all(isinstance(v, numbers.Integral) for row in M for v in row):
        return _det_int(M)
    A = [[Fraction(v) for v in row] for row in M]
    n = len(A)
    det = Fraction(1)
    for i in range(n):
        piv = next((r for r in range(i, n) if A[r][i] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != i:
            A[i], A[piv] = A[piv], A[i]
            det = -det
        det *= A[i][i]
        inv = 1 / A[i][i]
        for r in range(i + 1, n):
            f = A[r][i] * inv
            if f:
                for c in range(i, n):
                    A[r][c] -= f * A[i][c]
    return det


def inverse_exact(M):
    """Exact inverse of a rational matrix by Gauss-Jordan elimination."""
    n = len(M)
    A = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)]
         for i, row in enumerate(M)]
    for i in range(n):
        piv = next((r for r in range(i, n) if A[r][i] != 0), None)
        if piv is None:
            raise InvalidInput("singular matrix")
        A[i], A[piv] = A[piv], A[i]
        inv = 1 / A[i][i]
        A[i] = [v * inv for v in A[i]]
        for r in range(n):
            if r != i and A[r][i]:
                f = A[r][i]
                A[r] = [vr - f * vi for vr, vi in zip(A[r], A[i])]
    return tuple(tuple(row[n:]) for row in A)


def mat_mul(A, B):
    Bt = list(zip(*B))
    return tuple(tuple(sum(a * b for a, b in zip(row, col)) for col in Bt) for row in A)


def mat_vec(A, v):
    return tuple(sum(a * b for a, b in zip(row, v)) for row in A)


def transpose(A):
    return tuple(tuple(col) for col in zip(*A))


@dataclass(frozen=True)
class UnimodularCompletion:
    """Integer matrix whose last row is ``k`` and whose determinant is gcd(k)."""

    A: tuple

    @property
    def n(self):
        return len(self.A)

    @property
    def khat_rows(self):
        return self.A[:-1]

    @property
    def k_row(self):
        return self.A[-1]

    @property
    def det(self):
        return det_exact(self.A)

    @property
    def norm_inf(self):
        return max(abs(v) for row in self.A for v in row)


def bezout_complete(k):
    """Complete ``k`` to an integer matrix with last row ``k``.

    Follows the inductive construction: for ``n = 2`` the first row is
    ``(y, -x)`` from the Bezout pair of ``(k1, k2)``; for ``n >= 3`` the
    completion of the first ``n - 1`` entries is bordered by one new row and
    column. The result satisfies ``det A = gcd(k)`` (for ``n = 1``,
    ``det A = k1``) and ``|A|_inf = |k|_inf``.
    """
    k = as_int_vector(k)
    if not any(k):
        raise InvalidInput("cannot complete the zero vector")
    return UnimodularCompletion(_complete(k))


def _complete(k):
    n = len(k)
    if n == 1:
        return ((k[0],),)
    kbar, kn = k[:-1], k[-1]
    if not any(kbar):
        # k = (0, ..., 0, kn): bordered identity with a sign fixing det = |kn|
        A = [[int(i == j) for j in range(n)] for i in range(n - 1)]
        if kn < 0:
            A[0][0] = -1
        A.append(list(k))
        return tuple(tuple(r) for r in A)
    if n == 2:
        x, y, _ = bezout_pair(k[0], k[1])
        return ((y, -x), k)
    Abar = _complete(kbar)
    dbar = vector_gcd(kbar)
    x, y, _ = bezout_pair(dbar, kn)
    sgn = -1 if n % 2 else 1
    ktilde = tuple(sgn * y * v // dbar for v in kbar)
    xtilde = -sgn * x
    rows = [ktilde + (xtilde,)]
    for i, row in enumerate(Abar):
        rows.append(tuple(row) + ((kn,) if i == n - 2 else (0,)))
    return tuple(rows)


def perp_project(k, y):
    """Orthogonal projection of ``y`` onto the hyperplane ``k``-perp.

    Works with exact rationals when ``y`` holds ints or Fractions, and with
    floats otherwise.
    """
    k = as_int_vector(k)
    kap = kappa(k)
    if kap == 0:
        raise InvalidInput("projection along the zero vector")
    if all(isinstance(v, (numbers.Integral, Fraction)) for v in y):
        c = Fraction(sum(a * b for a, b in zip(y, k)), kap)
        return tuple(Fraction(v) - c * kv for v, kv in zip(y, k))
    y = np.asarray(y, dtype=float)
    kv = np.asarray(k, dtype=float)
    return y - (y @ kv) / kap * kv


@dataclass(frozen=True)
class ResonanceFrame:
    """Linear frame adapted to a primitive resonance vector ``k``.

    ``L`` maps ``J = (Jhat, Jn)`` to ``Jn*k + P_perp(Ahat^T Jhat)`` and
    factors as ``L = A^T U`` with ``U`` unipotent lower triangular.
    """

    k: tuple
    kappa: int
    completion: UnimodularCompletion
    L: tuple
    U: tuple

    @property
    def n(self):
        return len(self.k)

    @property
    def A(self):
        return self.completion.A

    @property
    def Ahat(self):
        return self.completion.khat_rows

    def apply(self, J):
        return mat_vec(self.L, J)

    def L_inverse(self):
        return _frame_inverse(self)

    def L_float(self):
        return np.array([[float(v) for v in row] for row in self.L])

    def L_inverse_float(self):
        return np.array([[float(v) for v in row] for row in self.L_inverse()])

    def A_inverse_exact(self):
        return inverse_exact(self.A)

    def Ahat_k(self):
        """Integer vector ``Ahat k``."""
        return tuple(sum(a * b for a, b in zip(row, self.k)) for row in self.Ahat)

    def hhat(self, phat):
        """Quadratic form ``|P_perp Ahat^T phat|^2 / kappa`` (exact for rationals)."""
        v = mat_vec(transpose(self.Ahat), phat) if self.n > 1 else (0,)
        w = perp_project(self.k, v)
        if isinstance(w, np.ndarray):
            return float(w @ w) / self.kappa
        return sum(c * c for c in w) / Fraction(self.kappa)

    def to_json(self):
        return {
            "k": list(self.k),
            "kappa": self.kappa,
            "A": [list(r) for r in self.A],
            "L": [[str(v) for v in r] for r in self.L],
            "U": [[str(v) for v in r] for r in self.U],
        }


@lru_cache(maxsize=4096)
def _frame_inverse(frame):
    return inverse_exact(frame.L)


@lru_cache(maxsize=65536)
def build_frame(k):
    """Frame ``(A, U, L)`` for a primitive integer vector ``k``."""
    k = as_int_vector(k)
    if not any(k) or not is_primitive(k):
        raise InvalidInput(f"build_frame needs a primitive vector, got {k}")
    n = len(k)
    comp = bezout_complete(k)
    kap = kappa(k)
    Ahat = comp.khat_rows
    Ak = tuple(sum(a * b for a, b in zip(row, k)) for row in Ahat)
    U = [[Fraction(int(i == j)) for j in range(n)] for i in range(n)]
    for j in range(n - 1):
        U[n - 1][j] = Fraction(-Ak[j], kap)
    U = tuple(tuple(r) for r in U)
    L = mat_mul(transpose(comp.A), U)
    return ResonanceFrame(k=k, kappa=kap, completion=comp, L=L, U=U)


def frobenius_norm(M):
    return sqrt(sum(float(v) ** 2 for row in M for v in row))


def norm_constants(n):
    """Constants ``(cL, cLinv)`` with ``|L| <= cL |k|`` and ``|L^-1| <= cLinv |k|^(n-1)``.

    Both bounds hold for the Frobenius norm (hence the spectral norm):
    ``|A|_F <= n|k|``, ``|U|_F <= n``, and the adjugate of ``A`` has entries
    bounded by Hadamard's inequality ``((n-1)^(1/2) |k|_inf)^(n-1)``.
    """
    return float(n * n), float(n * n * (n - 1) ** ((n - 1) / 2))


@lru_cache(maxsize=64)
def primitive_vectors(n, K):
    """Sign-normalized primitive vectors with 1-norm at most ``K``, sorted."""
    K = int(np.floor(K + 1e-12))
    out = []
    for k in product(range(-K, K + 1), repeat=n):
        if 0 < norm1(k) <= K and is_sharp(k) and is_primitive(k):
            out.append(k)
    out.sort(key=lambda v: (norm1(v), v))
    return tuple(out)


@lru_cache(maxsize=64)
def nonzero_vectors(n, K):
    """All nonzero integer vectors with 1-norm at most ``K``."""
    K = int(np.floor(K + 1e-12))
    return tuple(k for k in product(range(-K, K + 1), repeat=n) if 0 < norm1(k) <= K)
