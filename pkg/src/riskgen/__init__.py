"""Tail-risk-calibrated scenario generation.

Trains a generator of multi-asset price-increment scenarios whose benchmark
strategy PnLs match the Value-at-Risk and Expected Shortfall of the input
data, using the joint (VaR, ES) score as the adversarial loss.
"""

from riskgen.errors import CheckpointError, DomainError, NumericalError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "DomainError", "NumericalError", "__version__"]
