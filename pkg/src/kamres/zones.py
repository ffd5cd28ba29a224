"""Resonance zones covering the unit ball of actions.

A point ``y`` is in the non-resonant zone when ``|y.k| >= alpha/2`` for every
primitive ``k`` with ``|k|_1 <= K``. Otherwise it sits in the strip of some
``k`` and is sorted, through the frame coordinates ``J = L_k^{-1} y``, into
the simple-resonance zone (``Jhat`` far from every secondary resonance
``l``) or the double-resonance zone.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np
from scipy.special import gammaln
from scipy.stats import binomtest

from . import constants
from .errors import CoveringFailure, InfeasibleParameters, InvalidInput
from .lattice import build_frame, nonzero_vectors, primitive_vectors

TIE_TOL = 1e-14
ENUMERATION_LIMIT = 10 ** 8
CHUNK = 50_000


@dataclass(frozen=True)
class ZoneParams:
    """Cut-offs ``K``, ``Kbig`` and width ``alpha`` of the resonance covering.

    In ``"paper-law"`` mode the values derive from ``epsilon`` and ``nu``
    (``K = log^2(1/eps)``, ``Kbig = K^2``, ``alpha = sqrt(eps) K^(nu+1)``);
    ``log_alpha`` keeps the exact logarithm when ``alpha`` under/overflows.
    """

    n: int
    K: float
    Kbig: float
    alpha: float
    nu: float = None
    epsilon: float = None
    mode: str = "decoupled"
    log_epsilon: float = None
    log_alpha: float = None

    def __post_init__(self):
        if self.mode not in ("decoupled", "paper-law"):
            raise InvalidInput(f"unknown zone mode {self.mode!r}")
        if self.n < 1:
            raise InvalidInput("dimension must be positive")
        if self.mode == "decoupled":
            bad = []
            if not self.K >= 2:
                bad.append("K")
            if not self.Kbig >= self.K:
                bad.append("Kbig")
            if not self.alpha > 0:
                bad.append("alpha")
            if bad:
                raise InvalidInput(f"invalid zone parameters: {', '.join(bad)}")

    @property
    def enumeration_size(self):
        return (2 * math.floor(self.Kbig) + 1) ** self.n

    def with_alpha(self, alpha):
        return ZoneParams(self.n, self.K, self.Kbig, alpha, self.nu, None, "decoupled")

    def to_json(self):
        return {"n": self.n, "K": self.K, "Kbig": self.Kbig, "alpha": self.alpha,
                "nu": self.nu, "epsilon": self.epsilon, "mode": self.mode,
                "log_epsilon": self.log_epsilon, "log_alpha": self.log_alpha}


def params_from_epsilon(epsilon=None, nu=None, n=2, log_epsilon=None):
    """Cut-offs of the paper law, computed through logarithms.

    Either ``epsilon`` or ``log_epsilon`` (natural log) must be given;
    ``0 < epsilon < 1/e`` and ``nu > n + 1`` are required.
    """
    if log_epsilon is None:
        if epsilon is None or not (0 < epsilon < math.exp(-1)):
            raise InvalidInput("epsilon must lie in (0, 1/e)")
        log_epsilon = math.log(epsilon)
    elif not log_epsilon < -1:
        raise InvalidInput("log(epsilon) must be below -1")
    if nu is None or not nu > n + 1:
        raise InvalidInput("nu must exceed n + 1")
    logK = 2 * math.log(-log_epsilon)
    K = math.exp(logK)
    log_alpha = 0.5 * log_epsilon + (nu + 1) * logK
    alpha = math.exp(log_alpha) if log_alpha < 700 else math.inf
    eps = math.exp(log_epsilon) if log_epsilon > -745 else 0.0
    return ZoneParams(n=n, K=K, Kbig=K * K, alpha=alpha, nu=nu, epsilon=eps,
                      mode="paper-law", log_epsilon=log_epsilon, log_alpha=log_alpha)


def decoupled_params(n, K, Kbig, alpha, nu=None):
    return ZoneParams(n=n, K=K, Kbig=Kbig, alpha=alpha, nu=nu, mode="decoupled")


@dataclass
class _Resonance:
    k: tuple
    kvec: np.ndarray
    knorm: float
    kappa: int
    Linv_hat: np.ndarray      # first n-1 rows of L_k^{-1}
    W: np.ndarray             # rows Ahat_k v_{k,l}, exact integers
    T: np.ndarray             # 3 |l| |k| Kbig, multiplies alpha
    l_all: np.ndarray         # every nonzero l outside Zk with |l|_1 <= Kbig


class ZoneGeometry:
    """Precomputed lattice data for a fixed ``(n, K, Kbig)``."""

    def __init__(self, n, K, Kbig):
        if (2 * math.floor(Kbig) + 1) ** n > ENUMERATION_LIMIT:
            raise InfeasibleParameters(
                "Kbig too large to enumerate; use decoupled mode with smaller cut-offs")
        self.n, self.K, self.Kbig = n, K, Kbig
        self.ks = primitive_vectors(n, K)
        self.kmat = np.array(self.ks, dtype=float).reshape(-1, n)
        self.all_k = np.array(nonzero_vectors(n, K), dtype=float).reshape(-1, n)
        ls = primitive_vectors(n, Kbig)
        lall = nonzero_vectors(n, Kbig)
        self.res = []
        for k in self.ks:
            fr = build_frame(k)
            kap = fr.kappa
            Ahat = np.array(fr.Ahat, dtype=object).reshape(n - 1, n) if n > 1 else None
            rows, T = [], []
            for l in ls:
                if l == k:
                    continue
                lk = sum(a * b for a, b in zip(l, k))
                v = [kap * a - lk * b for a, b in zip(l, k)]
                w = [sum(int(Ahat[i, j]) * v[j] for j in range(n)) for i in range(n - 1)]
                rows.append(w)
                T.append(3.0 * math.sqrt(sum(a * a for a in l)) * math.sqrt(kap) * Kbig)
            outside = [l for l in lall if not _parallel(l, k)]
            self.res.append(_Resonance(
                k=k, kvec=np.array(k, dtype=float), knorm=math.sqrt(kap), kappa=kap,
                Linv_hat=fr.L_inverse_float()[: n - 1],
                W=np.array(rows, dtype=float).reshape(-1, n - 1),
                T=np.array(T), l_all=np.array(outside, dtype=float).reshape(-1, n)))

    def classify(self, Y, alpha, check_alpha=None):
        """Vectorized zone flags and non-resonance checks for points ``Y``.

        Returns a dict of arrays: ``in0, in1, in2, witness, minres`` and the
        violation masks ``bad_cover, bad0, bad1`` (the latter two evaluated
        with ``check_alpha``, default ``alpha``).
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        N, n = Y.shape
        ca = alpha if check_alpha is None else check_alpha
        Dn = self.K ** n
        out = {k: np.zeros(N, bool) for k in ("in0", "in1", "in2", "bad0", "bad1", "inLZ")}
        if N == 0 or not self.ks:
            out.update(witness=np.zeros(N, int), minres=np.full(N, np.inf),
                       bad_cover=np.zeros(N, bool))
            out["in0"][:] = True
            return out
        absd = np.abs(Y @ self.kmat.T)
        witness = absd.argmin(axis=1)
        minres = absd[np.arange(N), witness]
        in0 = minres >= alpha / 2 - TIE_TOL
        out["in0"] = in0
        if in0.any():
            d_all = np.abs(Y[in0] @ self.all_k.T)
            out["bad0"][np.flatnonzero(in0)] = (d_all < ca / 2 - TIE_TOL).any(axis=1)
        for j, r in enumerate(self.res):
            mask = absd[:, j] < alpha - TIE_TOL
            if not mask.any():
                continue
            idx = np.flatnonzero(mask)
            Yk = Y[idx]
            Jhat = Yk @ r.Linv_hat.T
            inD = np.sqrt((Jhat * Jhat).sum(axis=1)) < Dn
            if r.W.shape[0]:
                P = np.abs(Jhat @ r.W.T)
                zh = (P >= alpha * r.T - TIE_TOL).all(axis=1) & inD
            else:
                zh = inD
            narrow = absd[idx, j] < alpha / 2 - TIE_TOL
            out["in1"][idx[zh & narrow]] = True
            out["in2"][idx[~zh & inD]] = True
            if zh.any():
                sel = idx[zh]
                out["inLZ"][sel] = True
                if r.l_all.shape[0]:
                    dl = np.abs(Y[sel] @ r.l_all.T)
                    viol = (dl < 2 * ca * self.Kbig / r.knorm - TIE_TOL).any(axis=1)
                    out["bad1"][sel[viol]] = True
        out["witness"] = witness
        out["minres"] = minres
        out["bad_cover"] = ~(out["in0"] | out["in1"] | out["in2"])
        return out


def _parallel(l, k):
    n = len(k)
    return all(l[i] * k[j] == l[j] * k[i] for i in range(n) for j in range(i + 1, n))


@lru_cache(maxsize=16)
def zone_geometry(n, K, Kbig):
    return ZoneGeometry(n, K, Kbig)


def _geometry(params):
    if params.enumeration_size > ENUMERATION_LIMIT:
        raise InfeasibleParameters(
            f"enumeration of |l| <= {params.Kbig:g} in dimension {params.n} exceeds "
            f"{ENUMERATION_LIMIT:.0e}; switch to decoupled mode")
    return zone_geometry(params.n, float(params.K), float(params.Kbig))


@dataclass
class ZoneVerdict:
    y: tuple
    in_omega0: bool
    in_omega1: bool
    in_omega2: bool
    witness_k: tuple = None
    zhat_member: bool = None
    min_resonance_value: float = math.inf

    @property
    def zone(self):
        if self.in_omega0:
            return "omega0"
        if self.in_omega1:
            return "omega1"
        if self.in_omega2:
            return "omega2"
        return "none"


def classify_point(y, params):
    """Zone flags of a single point, evaluated directly from the definitions.

    The zones overlap, so every flag is evaluated; ``zone`` reports the
    first zone containing the point.

    This is a scalar reference path independent of the vectorized batch
    classifier; the Ẑ_k test uses the exact integer vectors ``Ahat_k v_{k,l}``.
    """
    geom = _geometry(params)
    y = np.asarray(y, dtype=float)
    if y.shape != (params.n,):
        raise InvalidInput("point has wrong dimension")
    alpha, n = params.alpha, params.n
    best_k, best = None, math.inf
    for k in geom.ks:
        d = abs(float(np.dot(y, k)))
        if d < best:
            best_k, best = k, d
    in0 = best >= alpha / 2 - TIE_TOL
    in1 = in2 = False
    zh_witness = None
    w1 = w2 = None
    for r in geom.res:
        d = abs(float(np.dot(y, r.k)))
        if not d < alpha - TIE_TOL:
            continue
        Jhat = r.Linv_hat @ y
        if not math.sqrt(float(Jhat @ Jhat)) < params.K ** n:
            continue
        member = True
        for w, t in zip(r.W, r.T):
            if abs(float(Jhat @ w)) < alpha * t - TIE_TOL:
                member = False
                break
        if r.k == best_k:
            zh_witness = member
        if member and d < alpha / 2 - TIE_TOL:
            in1 = True
            w1 = w1 or r.k
        if not member:
            in2 = True
            w2 = w2 or r.k
    if in0:
        # the zones overlap; Omega^0 points carry no witness
        return ZoneVerdict(tuple(y), True, in1, in2, None, zh_witness, best)
    witness = w1 if in1 else (w2 if in2 else best_k)
    return ZoneVerdict(tuple(y), False, in1, in2, witness, zh_witness, best)


def sample_ball(rng, N, n):
    g = rng.standard_normal((N, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(N) ** (1.0 / n)
    return g * r[:, None]


def ball_volume(n):
    return math.exp(0.5 * n * math.log(math.pi) - gammaln(0.5 * n + 1))


def _chunk_seeds(seed, count):
    nchunks = max(1, math.ceil(count / CHUNK))
    return np.random.SeedSequence(seed).spawn(nchunks)


def _run_chunk(args):
    params, seq, size, check_alpha = args
    rng = np.random.default_rng(seq)
    Y = sample_ball(rng, size, params.n)
    out = _geometry(params).classify(Y, params.alpha, check_alpha)
    return Y, out


def _iterate_chunks(params, count, seed, check_alpha, workers):
    seqs = _chunk_seeds(seed, count)
    sizes = [min(CHUNK, count - i * CHUNK) for i in range(len(seqs))]
    jobs = [(params, s, z, check_alpha) for s, z in zip(seqs, sizes) if z > 0]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            yield from ex.map(_run_chunk, jobs)
    else:
        for job in jobs:
            yield _run_chunk(job)


@dataclass
class CoveringReport:
    sample_count: int
    uncovered: int = 0
    nonresonance0_violations: int = 0
    nonresonance1_violations: int = 0
    counts: dict = field(default_factory=lambda: {"omega0": 0, "omega1": 0, "omega2": 0,
                                                  "union": 0})
    witness: tuple = None
    check_alpha: float = None

    @property
    def violations(self):
        return self.uncovered + self.nonresonance0_violations + self.nonresonance1_violations

    @property
    def fractions(self):
        N = max(self.sample_count, 1)
        return {k: v / N for k, v in self.counts.items()}

    def to_json(self):
        return {"sample_count": self.sample_count, "violations": self.violations,
                "uncovered": self.uncovered,
                "nonresonance0_violations": self.nonresonance0_violations,
                "nonresonance1_violations": self.nonresonance1_violations,
                "fractions": self.fractions, "check_alpha": self.check_alpha,
                "witness": list(self.witness) if self.witness is not None else None}


def covering_check(params, sample_count, seed=0, check_alpha=None, strict=True, workers=1):
    """Sample the unit ball and verify the covering and both non-resonance bounds.

    ``check_alpha`` replaces ``alpha`` in the verified inequalities only (the
    zones stay built with ``params.alpha``); doubling it is the negative
    control. With ``strict`` a nonzero violation count raises
    :class:`CoveringFailure` carrying the report.
    """
    rep = CoveringReport(sample_count=int(sample_count),
                         check_alpha=params.alpha if check_alpha is None else check_alpha)
    if sample_count <= 0:
        return rep
    _geometry(params)
    for Y, out in _iterate_chunks(params, int(sample_count), seed, check_alpha, workers):
        rep.uncovered += int(out["bad_cover"].sum())
        rep.nonresonance0_violations += int(out["bad0"].sum())
        rep.nonresonance1_violations += int(out["bad1"].sum())
        rep.counts["omega0"] += int(out["in0"].sum())
        rep.counts["omega1"] += int(out["in1"].sum())
        rep.counts["omega2"] += int(out["in2"].sum())
        rep.counts["union"] += int((out["in0"] | out["in1"] | out["in2"]).sum())
        if rep.witness is None:
            bad = out["bad_cover"] | out["bad0"] | out["bad1"]
            if bad.any():
                rep.witness = tuple(Y[np.flatnonzero(bad)[0]])
    if strict and rep.violations:
        raise CoveringFailure(f"{rep.violations} covering violations, first at {rep.witness}",
                              report=rep)
    return rep


def omega2_bound(params, c=None):
    """``c alpha^2 K^(n^2-n-1) Kbig^(n+2)`` with the calibrated ``c`` by default."""
    n = params.n
    if c is None:
        c = constants.omega2_constant(n)
    return c * params.alpha ** 2 * params.K ** (n * n - n - 1) * params.Kbig ** (n + 2)


@dataclass
class Omega2Estimate:
    estimate: float
    ci_low: float
    ci_high: float
    analytic_bound: float
    raw_bound: float
    hits: int
    sample_count: int

    @property
    def ci95(self):
        return max(self.estimate - self.ci_low, self.ci_high - self.estimate)

    @property
    def passed(self):
        return self.ci_low <= self.analytic_bound

    def to_json(self):
        return {"estimate": self.estimate, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "ci95": self.ci95, "analytic_bound": self.analytic_bound,
                "raw_bound": self.raw_bound, "hits": self.hits,
                "sample_count": self.sample_count, "passed": self.passed}


def omega2_measure(params, sample_count, seed=0, c=None, workers=1):
    """Monte Carlo volume of the double-resonance zone inside the unit ball.

    The interval is the exact (Clopper-Pearson) binomial 95% interval scaled
    by the ball volume.
    """
    hits = 0
    for _, out in _iterate_chunks(params, int(sample_count), seed, None, workers):
        hits += int(out["in2"].sum())
    vol = ball_volume(params.n)
    N = int(sample_count)
    if N == 0:
        return Omega2Estimate(0.0, 0.0, vol, omega2_bound(params, c), omega2_bound(params, 1.0),
                              0, 0)
    ci = binomtest(hits, N).proportion_ci(confidence_level=0.95, method="exact")
    return Omega2Estimate(estimate=vol * hits / N, ci_low=vol * ci.low, ci_high=vol * ci.high,
                          analytic_bound=omega2_bound(params, c),
                          raw_bound=omega2_bound(params, 1.0), hits=hits, sample_count=N)


def calibrate_omega2_constant(n, grids=((2, 4), (3, 6)), alphas=(2e-3, 4e-3),
                              sample_count=10 ** 6, seed=0, safety=2.0):
    """Re-run the calibration recipe behind ``constants.OMEGA2_C``."""
    worst = 0.0
    for K, Kbig in grids:
        for a in alphas:
            est = omega2_measure(decoupled_params(n, K, Kbig, a), sample_count, seed, c=1.0)
            worst = max(worst, est.ci_high / est.raw_bound)
    return safety * worst


def atlas_rows(params, sample_count, seed=0):
    """Per-point rows ``(y..., zone, witness_k, min_resonance_value)`` for reports."""
    geom = _geometry(params)
    rows = []
    for Y, out in _iterate_chunks(params, int(sample_count), seed, None, 1):
        for i in range(Y.shape[0]):
            if out["in0"][i]:
                zone = "omega0"
            elif out["in1"][i]:
                zone = "omega1"
            elif out["in2"][i]:
                zone = "omega2"
            else:
                zone = "none"
            kw = geom.ks[out["witness"][i]] if geom.ks else ()
            rows.append(list(Y[i]) + [zone, " ".join(map(str, kw)), float(out["minres"][i])])
    return rows


def paper_law_margin(params):
    """Check ``alpha/2 < 2 alpha Kbig / |k|`` for every primitive ``|k| <= K``.

    Evaluated on the worst ``k`` (largest Euclidean norm, at most ``K``).
    """
    worst = float(params.K)
    return 0.5 < 2 * params.Kbig / worst
