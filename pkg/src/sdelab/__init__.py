"""sdelab: a numerical laboratory for SDE flows with Osgood/Sobolev drift.

Core modules: :mod:`sdelab.moduli` (Osgood moduli and the psi gauge),
:mod:`sdelab.fields` (coefficient fields and condition certificates),
:mod:`sdelab.mollify` (regularization ladders), :mod:`sdelab.flow`
(coupled ensemble integration), :mod:`sdelab.density` (pushforward
Radon-Nikodym estimation and bounds), :mod:`sdelab.fokker_planck`
(generator/adjoint solvers and duality), and :mod:`sdelab.lab`
(experiments, reports, CLI).
"""

__version__ = "0.1.0"
