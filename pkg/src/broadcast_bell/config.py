"""Central numerical tolerances.

Every PSD check, Hermiticity check and solver verdict in the package
threads through one instance of :class:`Tolerances`, so that acceptance
thresholds are quoted against a single configuration.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    hermiticity: float = 1e-10
    residual: float = 1e-10
    psd: float = 1e-10
    trace: float = 1e-10
    lp_feasibility: float = 1e-8
    sdp_feasibility: float = 1e-7
    seesaw_convergence: float = 1e-6
    visibility_bisection: float = 1e-4
    efficiency_bisection: float = 1e-6


DEFAULT_TOL = Tolerances()
