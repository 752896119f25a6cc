"""Scenario workflows: build, expand, propagate, measure.

These functions return plain result objects; :mod:`qatgate.cli` turns them
into files and exit codes, and the acceptance tests call them directly.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from . import fidelity as fid
from . import msgate, propagate, qat
from .fourier import fast_part, partial_average, series_commutator
from .hilbert import coherent_state, commutator, op_norm

log = logging.getLogger(__name__)

QUBIT_LABELS = {"ee": 0, "eg": 1, "ge": 2, "gg": 3}
UNITARITY_LIMIT = 1e-9
STRUCTURE_LIMIT = 1e-10


class InvariantViolation(RuntimeError):
    """A runtime invariant failed; the message names module and invariant."""


@dataclass(frozen=True)
class RunSettings:
    rule: str = "base"
    cutoff: float = 0.5
    orders: tuple[int, ...] = (1, 2, 3, 4)
    samples: int = 2001
    span: float = 1.0
    rel_tol: float = 1e-11
    qubits: str = "gg"
    alpha: complex = 1j * math.sqrt(5)
    carrier_reference: bool = True
    n_max_check: int | None = None
    check_samples: int = 201
    seed: int = 0


@dataclass
class ScenarioResult:
    model: msgate.MsModel
    settings: RunSettings
    s_gate: float
    columns: dict[str, np.ndarray]
    scalars: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)
    expansion: qat.QatExpansion | None = None
    gate: fid.GateFidelity | None = None


# --------------------------------------------------------------------------
# helpers

def initial_state(n_max: int, qubits: str = "gg", alpha: complex = 1j * math.sqrt(5)):
    """``(|qubits> ⊗ |alpha>, |alpha>)`` on the truncated space."""
    if qubits not in QUBIT_LABELS:
        raise ValueError(f"qubit label must be one of {sorted(QUBIT_LABELS)}, got {qubits!r}")
    q = np.zeros(4, dtype=complex)
    q[QUBIT_LABELS[qubits]] = 1.0
    motion = coherent_state(n_max, alpha)
    return np.kron(q, motion), motion


def gate_time(model: msgate.MsModel) -> float:
    """Window period for shaped pulses, first-order ``theta = pi/2`` time otherwise."""
    return model.gate_time or msgate.ideal_gate_time(model)


def time_grid(s_gate: float, span: float, samples: int) -> np.ndarray:
    """Uniform grid on ``[0, span * s_gate]`` that contains ``s_gate``."""
    if samples < 2 or span <= 0:
        raise ValueError("need samples >= 2 and span > 0")
    grid = np.linspace(0.0, span * s_gate, samples)
    if span >= 1 and np.min(np.abs(grid - s_gate)) > 1e-9:
        grid = np.sort(np.append(grid, s_gate))
    return grid


def _check_unitary(name: str, stack: np.ndarray) -> float:
    flat = stack.reshape((-1,) + stack.shape[-3:]) if stack.ndim > 3 else stack[None]
    eye = np.eye(stack.shape[-1])
    err = np.sqrt(np.sum(np.abs(np.conj(np.swapaxes(flat, -1, -2)) @ flat - eye) ** 2, axis=(-3, -2, -1)))
    worst = float(err.max())
    if worst > UNITARITY_LIMIT:
        raise InvariantViolation(f"propagate: channel {name} violates unitarity ({worst:.2e} > {UNITARITY_LIMIT:.0e})")
    return worst


def expand(model: msgate.MsModel, settings: RunSettings,
           h: qat.PerturbativeSeries | None = None) -> qat.QatExpansion:
    h = msgate.build_interaction(model) if h is None else h
    order = max(settings.orders)
    try:
        return qat.run(h, order, settings.cutoff, settings.rule, seed=settings.seed, tol=STRUCTURE_LIMIT)
    except qat.QatError as exc:
        raise InvariantViolation(f"qat: {exc}") from exc


def structural_checks(model: msgate.MsModel, h: qat.PerturbativeSeries, expansion: qat.QatExpansion,
                      seed: int = 0, n_samples: int = 5) -> dict:
    """Carrier commutation, projector laws, series/matrix commutator agreement."""
    rng = np.random.default_rng(seed)
    s_values = rng.uniform(0.0, 100.0, size=n_samples)
    sectors = model.sectors
    exact = msgate.ExactHamiltonian(model, include_carrier=False)
    carrier = msgate.carrier_series(model)
    out = {}

    worst = 0.0
    for s in s_values:
        c = sectors.embed(carrier.evaluate(s))
        hs = sectors.embed(exact(s))
        worst = max(worst, op_norm(commutator(c, hs)) / max(1.0, op_norm(c) * op_norm(hs)))
    out["carrier_commutator"] = worst

    a, b = h[1], h[min(2, h.max_order)]
    series = series_commutator(a, b).evaluate(s_values)
    direct = commutator(a.evaluate(s_values), b.evaluate(s_values))
    out["series_commutator"] = op_norm(series - direct) / max(1.0, op_norm(direct))

    proj = 0.0
    for n in range(1, h.max_order + 1):
        x = h[n]
        avg = partial_average(x, expansion.cutoff, expansion.rule)
        fast = fast_part(x, expansion.cutoff, expansion.rule)
        scale = max(1.0, x.max_norm())
        proj = max(proj,
                   (partial_average(avg, expansion.cutoff, expansion.rule) - avg).max_norm() / scale,
                   (avg + fast - x).max_norm() / scale,
                   partial_average(fast, expansion.cutoff, expansion.rule).max_norm() / scale)
    out["projector_laws"] = proj
    out["homological_residual"] = max(
        d.get("homological_residual", 0.0) for d in expansion.metadata["orders"].values()
    )
    for key, value in out.items():
        if value > STRUCTURE_LIMIT:
            raise InvariantViolation(f"structure: {key} = {value:.2e} exceeds {STRUCTURE_LIMIT:.0e}")
    return out


# --------------------------------------------------------------------------
# time-resolved scenarios

def run_dynamics(model: msgate.MsModel, settings: RunSettings) -> ScenarioResult:
    """Reference and QAT channels on one grid plus gate-time scalars."""
    t0 = time.perf_counter()
    sectors = model.sectors
    h = msgate.build_interaction(model)
    ex = expand(model, settings, h)
    invariants = structural_checks(model, h, ex, settings.seed)
    stats = {"qat_seconds": time.perf_counter() - t0}

    s_gate = gate_time(model)
    grid = time_grid(s_gate, settings.span, settings.samples)
    i_gate = int(np.argmin(np.abs(grid - s_gate))) if settings.span >= 1 else len(grid) - 1
    psi0, motion = initial_state(model.n_max, settings.qubits, settings.alpha)

    ref = propagate.integrate_schrodinger(msgate.ExactHamiltonian(model), grid, settings.rel_tol)
    u_ref = ref["reference"]
    invariants["unitarity_reference"] = _check_unitary("reference", u_ref)
    stats.update(ref.stats)

    cols = {"s": grid, "bell_reference": fid.bell_population(fid.evolve(u_ref, psi0, sectors))}
    if settings.carrier_reference:
        u_car = msgate.apply_carrier(model, grid, u_ref)
        cols["bell_reference_carrier"] = fid.bell_population(fid.evolve(u_car, psi0, sectors))
        del u_car

    scalars = {"s_gate": s_gate}
    gate = None
    top = max(settings.orders)
    for n in sorted(settings.orders):
        trace = propagate.assemble_qat(ex.truncated(n), model.eta, grid, settings.rel_tol)
        for ch in ("eff", "fast", "qat"):
            invariants[f"unitarity_{ch}_{n}"] = _check_unitary(f"{ch}[{n}]", trace[ch])
        stats.update({f"order{n}_{k}": v for k, v in trace.stats.items()})
        cols[f"bell_eff_{n}"] = fid.bell_population(fid.evolve(trace["eff"], psi0, sectors))
        cols[f"bell_qat_{n}"] = fid.bell_population(fid.evolve(trace["qat"], psi0, sectors))
        cols[f"f_avg_{n}"] = fid.avg_process_fidelity(u_ref, trace["qat"], motion, sectors, check=False)
        cols[f"fast_deviation_{n}"] = fid.deviation_from_identity(trace["fast"], motion, sectors)
        scalars[f"f_avg_min_{n}"] = float(cols[f"f_avg_{n}"][: i_gate + 1].min())
        scalars[f"f_avg_gate_{n}"] = float(cols[f"f_avg_{n}"][i_gate])
        scalars[f"fast_deviation_gate_{n}"] = float(cols[f"fast_deviation_{n}"][i_gate])
        scalars[f"fast_deviation_gate_spectral_{n}"] = op_norm(trace["fast"][i_gate] - np.eye(model.n_max + 1),
                                                               "spectral")
        if n == top:
            gate = fid.gate_fidelity(ref, trace, psi0, grid[i_gate], sectors)
        del trace

    p_ref = cols["bell_reference"]
    k = int(np.argmax(p_ref))
    scalars.update({
        "bell_reference_gate": float(p_ref[i_gate]),
        "reference_peak_time": float(grid[k]),
        "reference_peak_bell": float(p_ref[k]),
        "grid_spacing": float(grid[1] - grid[0]),
    })
    if "bell_reference_carrier" in cols:
        scalars["bell_reference_carrier_gate"] = float(cols["bell_reference_carrier"][i_gate])
    if model.gate_time is None:
        scalars["first_order_gate_time"] = s_gate
    if gate is not None:
        scalars["gate_fidelity"] = gate.value
        scalars["gate_state_fidelity_qat"] = gate.approximation

    result = ScenarioResult(model=model, settings=settings, s_gate=s_gate, columns=cols, scalars=scalars,
                            stats=stats, invariants=invariants, expansion=ex, gate=gate)
    if settings.n_max_check:
        recheck(result)
    result.stats["total_seconds"] = time.perf_counter() - t0
    return result


def _gate_observables(model: msgate.MsModel, settings: RunSettings, rel_tol: float,
                      with_qat: bool) -> dict:
    s_gate = gate_time(model)
    grid = time_grid(s_gate, min(settings.span, 1.0), settings.check_samples)
    psi0, motion = initial_state(model.n_max, settings.qubits, settings.alpha)
    sectors = model.sectors
    ref = propagate.integrate_schrodinger(msgate.ExactHamiltonian(model), grid, rel_tol)
    out = {"bell_reference_gate": fid.bell_population(fid.evolve(ref["reference"][-1], psi0, sectors))}
    if with_qat:
        top = max(settings.orders)
        ex = expand(model, settings)
        trace = propagate.assemble_qat(ex, model.eta, grid, rel_tol)
        f_avg = fid.avg_process_fidelity(ref["reference"], trace["qat"], motion, sectors, check=False)
        out[f"f_avg_min_{top}"] = float(f_avg.min())
        out[f"fast_deviation_gate_{top}"] = fid.deviation_from_identity(trace["fast"][-1], motion, sectors)
    return out


def recheck(result: ScenarioResult) -> None:
    """Repeat gate-time observables at a larger ``n_max`` and a tighter tolerance.

    Updates the scalars with the drifts and the gate-fidelity uncertainty
    (root-sum-square of both drifts).
    """
    model, settings = result.model, result.settings
    nominal = _gate_observables(model, settings, settings.rel_tol, with_qat=False)
    bigger = _gate_observables(model.with_(n_max=settings.n_max_check), settings, settings.rel_tol, with_qat=True)
    tighter = _gate_observables(model, settings, max(settings.rel_tol / 10, 1e-13), with_qat=False)
    key = "bell_reference_gate"
    drifts = {
        "truncation": abs(bigger[key] - nominal[key]),
        "integrator": abs(tighter[key] - nominal[key]),
    }
    top = max(settings.orders)
    result.scalars.update({
        "n_max_check": settings.n_max_check,
        "truncation_drift": drifts["truncation"],
        "integrator_drift": drifts["integrator"],
        f"f_avg_min_{top}_n_max_check": bigger[f"f_avg_min_{top}"],
        f"fast_deviation_gate_{top}_n_max_check": bigger[f"fast_deviation_gate_{top}"],
        "gate_fidelity_n_max_check": bigger[key],
    })
    if result.gate is not None:
        result.gate.drifts = drifts
        result.gate.uncertainty = math.sqrt(sum(d**2 for d in drifts.values()))
        result.scalars["gate_fidelity_uncertainty"] = result.gate.uncertainty
        result.scalars["gate_fidelity_text"] = str(result.gate)


# --------------------------------------------------------------------------
# derived analyses

def envelope_metrics(s: np.ndarray, p_ref: np.ndarray, p_eff: np.ndarray, period: float = 2 * math.pi) -> dict:
    """Deviation of an effective curve from the reference and from its running mean.

    ``tracking`` is the correlation between ``p_eff`` and the reference
    averaged over ``period``; values near 1 mean the effective curve follows
    the envelope.
    """
    ds = float(s[1] - s[0])
    width = max(1, int(round(period / ds)))
    smooth = uniform_filter1d(p_ref, width, mode="nearest")
    return {
        "max_deviation": float(np.max(np.abs(p_eff - p_ref))),
        "max_deviation_smoothed": float(np.max(np.abs(p_eff - smooth))),
        "tracking": float(np.corrcoef(p_eff, smooth)[0, 1]),
    }


def fig2_metrics(result: ScenarioResult) -> dict:
    cols, sc = result.columns, result.scalars
    out = envelope_metrics(cols["s"], cols["bell_reference"], cols["bell_eff_1"])
    out["peak_shift"] = abs(sc["reference_peak_time"] - result.s_gate)
    out["peak_shift_tolerance"] = max(sc["grid_spacing"], result.settings.rel_tol)
    return out


@dataclass
class ConvergenceResult:
    rows: list[dict]
    slopes: dict[int, float]
    monotone: bool

    def errors(self, eta: float) -> dict[int, float]:
        return {r["order"]: r["error"] for r in self.rows if math.isclose(r["eta"], eta)}


def final_time_errors(model: msgate.MsModel, settings: RunSettings) -> dict[int, float]:
    """``sqrt(1 - F_avg)`` between QAT and reference at the first-order gate time."""
    s_f = gate_time(model)
    grid = np.array([0.0, s_f])
    _, motion = initial_state(model.n_max, settings.qubits, settings.alpha)
    ref = propagate.integrate_schrodinger(msgate.ExactHamiltonian(model), grid, settings.rel_tol)
    ex = expand(model, settings)
    out = {}
    for n in sorted(settings.orders):
        trace = propagate.assemble_qat(ex.truncated(n), model.eta, grid, settings.rel_tol)
        f = fid.avg_process_fidelity(ref["reference"][-1], trace["qat"][-1], motion, model.sectors)
        out[n] = math.sqrt(max(0.0, 1.0 - f))
    return out


def convergence(models: dict[float, msgate.MsModel], settings: RunSettings,
                monotone_orders=(1, 2, 4)) -> ConvergenceResult:
    """Error table over ``eta`` and ``N``; log-log slope per ``N``; monotonicity at the largest ``eta``."""
    rows = []
    for eta, model in sorted(models.items()):
        errs = final_time_errors(model, settings)
        rows.extend({"eta": eta, "order": n, "error": e} for n, e in errs.items())
        log.info("convergence eta=%s: %s", eta, errs)
    etas = np.array(sorted(models))
    slopes = {}
    for n in sorted(settings.orders):
        e = np.array([next(r["error"] for r in rows if r["eta"] == eta and r["order"] == n) for eta in etas])
        slopes[n] = float(np.polyfit(np.log(etas), np.log(e), 1)[0]) if len(etas) > 1 else float("nan")
    largest = [r for r in rows if r["eta"] == etas[-1] and r["order"] in monotone_orders]
    largest.sort(key=lambda r: r["order"])
    monotone = all(a["error"] > b["error"] for a, b in zip(largest, largest[1:]))
    return ConvergenceResult(rows=rows, slopes=slopes, monotone=monotone)


def average_gate_fidelity(model: msgate.MsModel, settings: RunSettings, span: float = 1.0,
                          samples: int = 2) -> dict:
    """Carrier-included reference against ``exp(i pi/2 J^2)`` at the gate time.

    Also reports the best value on a grid of ``samples`` points up to
    ``span`` gate times.
    """
    s_gate = gate_time(model)
    grid = time_grid(s_gate, span, samples)
    i_gate = int(np.argmin(np.abs(grid - s_gate)))
    _, motion = initial_state(model.n_max, settings.qubits, settings.alpha)
    ref = propagate.integrate_schrodinger(msgate.ExactHamiltonian(model), grid, settings.rel_tol)
    u = msgate.apply_carrier(model, grid, ref["reference"])
    target = np.broadcast_to(msgate.ideal_gate(model), u.shape)
    f = fid.avg_process_fidelity(u, target, motion, model.sectors, check=False)
    k = int(np.argmax(f))
    return {"s_gate": s_gate, "gate": float(f[i_gate]), "best": float(f[k]), "best_time": float(grid[k])}


def shaping_benefit(shaped: msgate.MsModel, unshaped: msgate.MsModel, settings: RunSettings) -> dict:
    """Average gate fidelity gain of the shaped over the unshaped gate (both with carrier)."""
    a = average_gate_fidelity(shaped, settings)
    b = average_gate_fidelity(unshaped, settings, span=1.5, samples=601)
    return {
        "shaped": a["gate"],
        "unshaped": b["gate"],
        "unshaped_best": b["best"],
        "unshaped_best_time": b["best_time"],
        "improvement": a["gate"] - b["gate"],
        "improvement_vs_best": a["gate"] - b["best"],
    }
