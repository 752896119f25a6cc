"""Propagators: reference integration, effective, fast and assembled QAT.

All routines accept plain matrices or spin-sector block stacks; the time
grid is in scaled time ``s``. Each output sample is an integration
checkpoint (no interpolation between adaptive steps).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import DOP853

from .fourier import FourierSeries
from .hilbert import dagger, expm_hermitian, unitarity_error
from .qat import QatExpansion

log = logging.getLogger(__name__)

UNITARITY_LIMIT = 1e-9


class IntegrationError(RuntimeError):
    pass


@dataclass
class PropagatorTrace:
    """Unitaries sampled on one shared grid, one array per channel."""

    s: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def index_of(self, s_value: float, atol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.s - s_value)))
        if abs(self.s[i] - s_value) > atol:
            raise KeyError(f"s = {s_value} is not on the trace grid")
        return i

    def at(self, name: str, s_value: float) -> np.ndarray:
        return self.channels[name][self.index_of(s_value)]

    def max_unitarity_error(self, name: str | None = None) -> float:
        names = [name] if name else list(self.channels)
        return max(
            max(unitarity_error(u) for u in self.channels[n]) for n in names
        )

    def merge(self, other: "PropagatorTrace") -> "PropagatorTrace":
        if self.s.shape != other.s.shape or not np.allclose(self.s, other.s, atol=1e-12):
            raise ValueError("traces use different time grids")
        return PropagatorTrace(self.s, {**self.channels, **other.channels}, {**self.stats, **other.stats})


def _as_callable(hamiltonian) -> Callable[[float], np.ndarray]:
    if isinstance(hamiltonian, FourierSeries):
        return hamiltonian.evaluate
    if callable(hamiltonian):
        return hamiltonian
    raise TypeError("hamiltonian must be a FourierSeries or a callable s -> operator")


def _polar(u: np.ndarray) -> np.ndarray:
    w, _, vh = np.linalg.svd(u)
    return w @ vh


def integrate_schrodinger(hamiltonian, s_grid, rel_tol: float = 1e-11, abs_tol: float | None = None,
                          u0: np.ndarray | None = None, name: str = "reference",
                          shape: tuple[int, ...] | None = None) -> PropagatorTrace:
    """Solve ``i dU/ds = H(s) U`` with ``U(s_grid[0]) = u0`` (identity by default).

    Adaptive 8th-order Dormand–Prince with local error control; every grid
    point is a step boundary. Unitarity is re-projected (polar factor) only
    when drift exceeds ``10 * rel_tol``; re-projections are counted in
    ``stats``. Drift beyond ``1e-6`` raises :class:`IntegrationError`.
    """
    if not 1e-13 <= rel_tol <= 1e-6:
        raise ValueError(f"rel_tol must lie in [1e-13, 1e-6], got {rel_tol}")
    s_grid = np.asarray(s_grid, dtype=float)
    if s_grid.ndim != 1 or len(s_grid) < 1 or np.any(np.diff(s_grid) <= 0):
        raise ValueError("s_grid must be a strictly increasing 1-d array")
    h = _as_callable(hamiltonian)
    if u0 is None:
        probe = np.asarray(h(float(s_grid[0])))
        shape = probe.shape if shape is None else shape
        u0 = np.broadcast_to(np.eye(shape[-1], dtype=complex), shape).copy()
    shape = u0.shape
    abs_tol = rel_tol if abs_tol is None else abs_tol

    def rhs(s, y):
        u = y.reshape(shape)
        return (-1j * (h(s) @ u)).reshape(-1)

    out = np.empty((len(s_grid),) + shape, dtype=complex)
    out[0] = u0
    y = u0.reshape(-1).astype(complex)
    nfev = nsteps = reprojections = 0
    step = None
    worst = 0.0
    t_start = time.perf_counter()
    for i in range(1, len(s_grid)):
        t0, t1 = s_grid[i - 1], s_grid[i]
        first = None if step is None else min(step, t1 - t0)
        solver = DOP853(rhs, t0, y, t1, rtol=rel_tol, atol=abs_tol, first_step=first)
        while solver.status == "running":
            msg = solver.step()
            nsteps += 1
            if solver.status == "failed":
                raise IntegrationError(f"integration failed near s={solver.t:.6g}: {msg}")
            if solver.step_size is not None and solver.t < t1:
                step = solver.step_size
        nfev += solver.nfev
        u = solver.y.reshape(shape)
        drift = unitarity_error(u)
        if drift > 1e-6:
            raise IntegrationError(f"unitarity drift {drift:.2e} at s={t1:.6g}")
        if drift > 10 * rel_tol:
            u = _polar(u)
            reprojections += 1
        worst = max(worst, drift)
        out[i] = u
        y = u.reshape(-1).copy()
    stats = {
        f"{name}_nfev": nfev,
        f"{name}_steps": nsteps,
        f"{name}_reprojections": reprojections,
        f"{name}_max_unitarity_drift": worst,
        f"{name}_rel_tol": rel_tol,
        f"{name}_seconds": time.perf_counter() - t_start,
    }
    log.debug("integrated %s: %s", name, stats)
    return PropagatorTrace(s_grid, {name: out}, stats)


def u_fast(expansion: QatExpansion, s, lam: float, upto: int | None = None) -> np.ndarray:
    """``exp(-i sum_{n<=upto} lam^n Phi^(n)(s))``, default ``upto = order - 1``."""
    phi = expansion.phi_total(lam, upto)
    return expm_hermitian(_hermitize(phi.evaluate(s)))


def _hermitize(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + dagger(x))


def u_eff(expansion: QatExpansion, lam: float, s_grid, rel_tol: float = 1e-11,
          parametrization: str = "s") -> PropagatorTrace:
    """Integrate the lam-weighted effective Hamiltonian.

    ``parametrization="tau"`` integrates ``i lam dU/dtau = H_eff(tau/lam) U``
    on the grid ``tau = lam * s`` instead; both give the same samples.
    """
    series = expansion.h_eff_total(lam)
    s_grid = np.asarray(s_grid, dtype=float)
    if parametrization == "s":
        trace = integrate_schrodinger(series, s_grid, rel_tol, name="eff")
    elif parametrization == "tau":
        trace = integrate_schrodinger(lambda tau: series.evaluate(tau / lam) / lam, lam * s_grid,
                                      rel_tol, name="eff")
        trace = PropagatorTrace(s_grid, trace.channels, trace.stats)
    else:
        raise ValueError(f"unknown parametrization {parametrization!r}")
    return trace


def assemble_qat(expansion: QatExpansion, lam: float, s_grid, rel_tol: float = 1e-11,
                 eff: PropagatorTrace | None = None) -> PropagatorTrace:
    """Channels ``eff``, ``fast`` and ``qat``.

    ``qat`` is the two-time propagator ``U(s) U(s0)^dag`` with
    ``U = U_fast^[N-1] U_eff^[N]`` and ``s0 = s_grid[0]``, directly
    comparable with a reference started from the identity at ``s0``.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if eff is None:
        eff = u_eff(expansion, lam, s_grid, rel_tol)
    elif eff.s.shape != s_grid.shape or not np.allclose(eff.s, s_grid):
        raise ValueError("effective trace grid does not match s_grid")
    fast = u_fast(expansion, s_grid, lam)
    u = fast @ eff["eff"]
    qat = u @ dagger(u[0])[None]
    channels = {"eff": eff["eff"], "fast": fast, "qat": qat}
    return PropagatorTrace(s_grid, channels, dict(eff.stats))
