"""Environment-conditioned latent linear models with ISS certificates and MPPI tracking."""

from __future__ import annotations

__version__ = "0.1.0"
