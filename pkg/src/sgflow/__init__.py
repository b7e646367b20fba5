"""Stochastic gradient flow toolkit for the lattice sine-Gordon model.

Modules: ``lattice`` (torus geometry, cutoffs, snapshots), ``kernels``
(heat-kernel scale decomposition), ``flow`` (truncated Polchinski
coefficients), ``fbsde`` (forward/backward solver), ``sampling`` (Girsanov,
Gibbs oracle, law comparison), ``observables`` (physics diagnostics),
``variational`` (control costs, rate function, semiclassical sweep) and
``cli``.
"""
__version__ = "0.1.0"
