"""Synthesis and verification of exponential-condition barrier certificates.

Pipeline: :mod:`~barrier_synth.system` (models) -> :mod:`~barrier_synth.sos`
(SOS program, Gram lifting) -> :mod:`~barrier_synth.sdp` (interior-point
solver) -> :mod:`~barrier_synth.check` (independent verification), driven by
:mod:`~barrier_synth.synthesis` and the ``barrier-synth`` command.
"""

__version__ = "0.1.0"

from .poly import Polynomial, lie_derivative, parse_polynomial
from .system import HybridSystem, SemialgebraicSet, load_system

__all__ = ["Polynomial", "lie_derivative", "parse_polynomial", "HybridSystem", "SemialgebraicSet", "load_system",
           "__version__"]
