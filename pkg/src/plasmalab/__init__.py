"""Monte Carlo and variational laboratory for the two-dimensional
one-component Coulomb/Yukawa plasma.

Subpackages cover the pair kernels and their exact identities, equilibrium
measures, energy evaluation, Metropolis sampling, fluctuation observables,
and free-energy estimation by thermodynamic integration.
"""

__version__ = "0.1.0"
