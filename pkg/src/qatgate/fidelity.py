"""Gate observables: Bell population, process fidelity, gate fidelity.

Composite states use the layout ``qubits ⊗ Fock`` (qubit index major) with
qubit basis ``0 = |e>``, ``1 = |g>`` per ion, so ``|ee>`` is index 0 and
``|gg>`` index 3. Unitaries may be dense matrices or spin-sector block
stacks (pass the matching :class:`~qatgate.hilbert.SpinSectors`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .hilbert import SpinSectors, dagger, unitarity_error

PHI_PLUS = np.array([1, 0, 0, 1], dtype=complex) / math.sqrt(2)
NORM_TOL = 1e-6


def _qubit_fock(state: np.ndarray, n_qubit_states: int = 4) -> np.ndarray:
    state = np.asarray(state)
    return state.reshape(state.shape[:-1] + (n_qubit_states, state.shape[-1] // n_qubit_states))


def bell_population(state: np.ndarray, target: np.ndarray = PHI_PLUS) -> np.ndarray | float:
    """``<target| Tr_motion |psi><psi| |target>``; batched over leading axes."""
    state = np.asarray(state)
    norms = np.linalg.norm(state, axis=-1)
    if np.any(np.abs(norms - 1) > NORM_TOL):
        raise ValueError(f"state is not normalized (norm {np.max(np.abs(norms - 1)) + 1:.8f})")
    psi = _qubit_fock(state, len(target))
    # <t|rho_q|t> = sum_fock |<t ⊗ k|psi>|^2
    amp = np.einsum("q,...qk->...k", np.conj(target), psi)
    out = np.sum(np.abs(amp) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def evolve(unitaries: np.ndarray, state: np.ndarray, sectors: SpinSectors | None = None) -> np.ndarray:
    """Apply a unitary (or a time stack of them) to one state."""
    unitaries = np.asarray(unitaries)
    if sectors is None:
        return unitaries @ state
    q = len(sectors.labels)
    f = unitaries.shape[-1]
    coeffs = np.conj(sectors.vectors).T @ state.reshape(q, f)
    blocks = unitaries[..., sectors.labels, :, :]
    out = np.einsum("...jab,jb->...ja", blocks, coeffs)
    out = np.einsum("qj,...ja->...qa", sectors.vectors, out)
    return out.reshape(out.shape[:-2] + (q * f,))


# --------------------------------------------------------------------------
# state designs

_H = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
_S = np.diag([1, 1j])


def _phase_key(v: np.ndarray) -> tuple:
    k = int(np.flatnonzero(np.abs(v) > 1e-9)[0])
    w = v * abs(v[k]) / v[k]
    return tuple(np.round(w, 9).view(float))


@lru_cache(maxsize=None)
def stabilizer_states() -> np.ndarray:
    """The 60 two-qubit stabilizer states (a complex-projective 3-design)."""
    gates = [np.kron(_H, np.eye(2)), np.kron(np.eye(2), _H), np.kron(_S, np.eye(2)), np.kron(np.eye(2), _S),
             np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)]
    start = np.array([1, 0, 0, 0], dtype=complex)
    seen = {_phase_key(start): start}
    frontier = [start]
    while frontier:
        nxt = []
        for v in frontier:
            for g in gates:
                w = g @ v
                key = _phase_key(w)
                if key not in seen:
                    seen[key] = w
                    nxt.append(w)
        frontier = nxt
    out = np.array(list(seen.values()))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def pauli_product_states() -> np.ndarray:
    """The 36 products of single-qubit Pauli eigenstates (not a 2-design on 4 dims)."""
    r = 1 / math.sqrt(2)
    single = [np.array(v, dtype=complex) for v in
              ([1, 0], [0, 1], [r, r], [r, -r], [r, 1j * r], [r, -1j * r])]
    out = np.array([np.kron(a, b) for a in single for b in single])
    out.setflags(write=False)
    return out


DESIGNS = {"stabilizer": stabilizer_states, "pauli-product": pauli_product_states}


def haar_closed_form(u: np.ndarray, v: np.ndarray) -> float:
    """``(|Tr U^dag V|^2 + d) / (d (d + 1))`` for unitaries on one factor."""
    d = u.shape[-1]
    return float((abs(np.trace(dagger(u) @ v)) ** 2 + d) / (d * (d + 1)))


def _qubit_block(w: np.ndarray, motional_ref: np.ndarray, sectors: SpinSectors | None) -> np.ndarray:
    """``(<m| W |m>)`` as a 4×4 qubit operator (batched)."""
    if sectors is None:
        f = motional_ref.shape[0]
        w4 = w.reshape(w.shape[:-2] + (4, f, 4, f))
        return np.einsum("i,...aibj,j->...ab", np.conj(motional_ref), w4, motional_ref)
    g = np.einsum("i,...sij,j->...s", np.conj(motional_ref), w, motional_ref)
    per = g[..., sectors.labels]
    return np.einsum("aj,...j,bj->...ab", sectors.vectors, per, np.conj(sectors.vectors))


def avg_process_fidelity(u: np.ndarray, v: np.ndarray, motional_ref: np.ndarray,
                         sectors: SpinSectors | None = None, design: str = "stabilizer",
                         check: bool = True) -> np.ndarray | float:
    """Mean of ``|<psi|U^dag V|psi>|^2`` over a qubit state design ⊗ ``motional_ref``.

    ``u`` and ``v`` may carry a leading time axis. Dense inputs act on
    ``qubits ⊗ Fock``; block stacks need ``sectors``.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    if abs(np.linalg.norm(motional_ref) - 1) > NORM_TOL:
        raise ValueError("motional reference state is not normalized")
    if check:
        err = max(unitarity_error(u), unitarity_error(v))
        if err > 1e-6:
            raise ValueError(f"inputs are not unitary (error {err:.2e})")
    states = DESIGNS[design]()
    q = _qubit_block(dagger(u) @ v, motional_ref, sectors)
    amp = np.einsum("ka,...ab,kb->...k", np.conj(states), q, states)
    out = np.mean(np.abs(amp) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# gate fidelity

def format_uncertainty(value: float, unc: float) -> str:
    """``0.99983, 0.00047 -> '0.9998(5)'``; one significant digit, rounded up."""
    if not unc > 0 or not math.isfinite(unc):
        return f"{value:.6f}"
    digits = max(0, -math.floor(math.log10(unc)))
    step = 10.0**-digits
    u = math.ceil(unc / step - 1e-9)
    if u >= 10:
        digits -= 1
        step *= 10
        u = math.ceil(unc / step - 1e-9)
    digits = max(digits, 0)
    return f"{value:.{digits}f}({u})"


@dataclass
class GateFidelity:
    value: float
    approximation: float
    uncertainty: float = 0.0
    drifts: dict = field(default_factory=dict)

    def __str__(self) -> str:
        return format_uncertainty(self.value, self.uncertainty)


def state_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.vdot(a, b)) ** 2)


def gate_fidelity(trace_ref, trace_qat, initial: np.ndarray, s_g: float,
                  sectors: SpinSectors | None = None, ref_channel: str = "reference",
                  qat_channel: str = "qat", alternatives=()) -> GateFidelity:
    """Bell population of the reference at ``s_g`` and QAT-vs-reference state fidelity.

    ``alternatives`` holds ``(label, trace, initial)`` recomputations of the
    reference (larger ``n_max``, tighter tolerance); the uncertainty is the
    root-sum-square of their deviations from the nominal value.
    """
    i_ref = trace_ref.index_of(s_g)
    i_qat = trace_qat.index_of(s_g)
    psi_ref = evolve(trace_ref[ref_channel][i_ref], initial, sectors)
    psi_qat = evolve(trace_qat[qat_channel][i_qat], initial, sectors)
    value = bell_population(psi_ref)
    drifts = {}
    for label, trace, init in alternatives:
        psi = evolve(trace[ref_channel][trace.index_of(s_g)], init, sectors)
        drifts[label] = abs(bell_population(psi) - value)
    unc = math.sqrt(sum(d**2 for d in drifts.values()))
    return GateFidelity(value=value, approximation=state_fidelity(psi_ref, psi_qat), uncertainty=unc,
                        drifts=drifts)


@dataclass
class FidelityReport:
    """Per-sample observables on a shared grid plus gate-time scalars."""

    s: np.ndarray
    bell: dict[str, np.ndarray]
    f_avg: dict[str, np.ndarray]
    fast_deviation: np.ndarray | None = None
    gate: GateFidelity | None = None
    scalars: dict = field(default_factory=dict)

    def check(self, tol: float = 1e-9) -> None:
        for name, arr in {**self.bell, **self.f_avg}.items():
            if np.any(arr < -tol) or np.any(arr > 1 + tol):
                raise ValueError(f"{name} leaves [0, 1]")

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"s": self.s}
        cols.update({f"bell_{k}": v for k, v in self.bell.items()})
        cols.update({f"f_avg_{k}": v for k, v in self.f_avg.items()})
        if self.fast_deviation is not None:
            cols["fast_deviation"] = self.fast_deviation
        return cols


def deviation_from_identity(u: np.ndarray, motional_ref: np.ndarray, sectors: SpinSectors | None = None,
                            design: str = "stabilizer") -> np.ndarray | float:
    """``max_psi ||(U - 1) psi||`` over the qubit design ⊗ ``motional_ref``.

    The operator norm of ``U - 1`` on the whole truncated space is dominated
    by the highest Fock levels; this measures it where the state lives.
    """
    u = np.asarray(u)
    states = DESIGNS[design]()
    if sectors is None:
        f = motional_ref.shape[0]
        full = np.kron(states, motional_ref)  # (k, 4F)
        diff = np.einsum("...ab,kb->...ka", u, full) - full
        out = np.sqrt(np.max(np.sum(np.abs(diff) ** 2, axis=-1), axis=-1))
    else:
        # ||(U-1) psi||^2 = sum_j |<w_j|q>|^2 ||(U_s(j) - 1) m||^2
        per = np.einsum("...sij,j->...si", u, motional_ref) - motional_ref
        g = np.sum(np.abs(per) ** 2, axis=-1)[..., sectors.labels]
        weights = np.abs(states @ np.conj(sectors.vectors)) ** 2  # (k, j)
        out = np.sqrt(np.max(np.einsum("kj,...j->...k", weights, g), axis=-1))
    return float(out) if np.ndim(out) == 0 else out
