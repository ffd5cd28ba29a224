"""Numerical toolkit for simple-resonance analysis of nearly integrable Hamiltonians.

Submodules
----------
lattice     exact integer algebra for resonance lattices and frames
potential   Fourier potentials, lattice profiles, genericity and Morse data
zones       resonance covering of the unit ball and zone measures
normalform  weighted norms, homological equation and Lie-series averaging
pendulum    parameter dependent pendulums, action integrals, separatrix fits
structure   effective Hamiltonians and integrating charts at a resonance
kamtwist    twist determinants, sublevel bounds, KAM thresholds and budgets
cli         batch experiment driver
"""

__version__ = "0.1.0"
