"""Calibrated stand-ins for constants that are only known to exist.

Every value below is frozen; changing one requires bumping ``VERSION`` and
re-running the calibration recipe noted next to it. Budgets and reports
record ``VERSION`` so results can be traced to the table that produced them.
"""

VERSION = "2026.10.1"

# Threshold multiplier in K_s(delta) = c max{1, 1/s, log(1/(s delta))/s}.
GENERICITY_C = 2.0

# Double-resonance volume: meas(Omega2) <= c alpha^2 K^(n^2-n-1) Kbig^(n+2).
# Recipe (zones.calibrate_omega2_constant): largest upper 95% Clopper-Pearson
# end of meas/(alpha^2 K^(n^2-n-1) Kbig^(n+2)) over (K, Kbig) in {(2, 4),
# (3, 6)} and alpha in {2e-3, 4e-3}, times a safety factor 2. The ratio
# decreases as the cut-offs grow, so the smallest grids dominate.
OMEGA2_C = {2: 2.0, 3: 0.6}

# Constant in the KAM smallness condition and related formulas.
KAM_C = 1.0e-3

# Structure constant in the uncovered-set, twist and Hessian bounds, per
# regime (cosine-like profiles or Morse profiles). Recipe: exact pendulum
# charts at k = (0, 1) for -cos t and for 2e^-1 cos t + 0.6e^-2 cos 2t;
# largest Monte Carlo ratio uncovered / (theta |ln theta|) over theta in
# {1e-3, 3e-3, 1e-2, 3e-2, 5e-2} (200k samples, 82.2 and 81.5), times a
# safety factor 2, rounded up. theta ||d^2 h|| stayed below 0.08 there.
STRUCTURE_C = {"A2": 170.0, "A3": 170.0}

# Constant in the cosine-likeness threshold c(s0) = c* min(1, s0^4).
COSINE_C = 0.25

# Documented reference constants from the twist analysis (reported only).
def twist_m(n):
    return 3 * n * n - 3 * n


def twist_a(n):
    return 1.0 / (27 * n ** 6)


def structure_constant(regime):
    return STRUCTURE_C[regime]


def omega2_constant(n):
    return OMEGA2_C.get(n, max(OMEGA2_C.values()))
