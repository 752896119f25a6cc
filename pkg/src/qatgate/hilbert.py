"""Operators on the truncated qubits ⊗ Fock space.

The composite space is ordered qubit-major: ``kron(qubit_factor, fock_factor)``.
Single-qubit basis index 0 is the excited state ``|e>``, index 1 the ground
state ``|g>``, so ``sigma_+ = |e><g|`` is the upper-right matrix element.

Besides dense full-space operators this module provides :class:`SpinSectors`,
which block-diagonalises anything built from a single collective spin
operator and boson operators. The Fourier/QAT engine works on those block
stacks; the dense embedding is used for verification and observables.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
import scipy.linalg
from scipy.stats import poisson


class TruncationWarning(UserWarning):
    """A coherent state reaches into the top Fock levels."""


@dataclass(frozen=True)
class HilbertSpec:
    """Truncated space of ``n_qubits`` two-level systems and one boson mode."""

    n_qubits: int = 2
    n_max: int = 40

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError(f"n_qubits must be >= 1, got {self.n_qubits}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")

    @property
    def qubit_dim(self) -> int:
        return 2**self.n_qubits

    @property
    def fock_dim(self) -> int:
        return self.n_max + 1

    @property
    def dim(self) -> int:
        return self.qubit_dim * self.fock_dim


# --------------------------------------------------------------------------
# primitives

def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a @ b - b @ a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def op_norm(a: np.ndarray, kind: str = "fro") -> float:
    """Frobenius (default) or spectral norm.

    For a stack of blocks ``(..., d, d)`` this is the norm of the
    block-diagonal operator: root-sum-square of block Frobenius norms, or the
    largest block spectral norm.
    """
    a = np.asarray(a)
    if kind == "fro":
        return float(np.sqrt(np.sum(np.abs(a) ** 2)))
    if kind == "spectral":
        if a.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(a, ord=2, axis=(-2, -1))))
    raise ValueError(f"unknown norm kind {kind!r}")


def matrix_exp(a: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling and squaring), stack-aware."""
    a = np.asarray(a, dtype=complex)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"matrix_exp needs square input, got {a.shape}")
    return scipy.linalg.expm(a)


def expm_hermitian(h: np.ndarray, t: float = 1.0) -> np.ndarray:
    """``exp(-i t h)`` for Hermitian ``h`` via eigendecomposition.

    Unitary to roundoff regardless of ``t * ||h||``.
    """
    w, v = np.linalg.eigh(h)
    phase = np.exp(-1j * t * w)
    return (v * phase[..., None, :]) @ dagger(v)


def unitarity_error(u: np.ndarray) -> float:
    eye = np.eye(u.shape[-1])
    return op_norm(dagger(u) @ u - eye)


def hermiticity_error(a: np.ndarray) -> float:
    return op_norm(a - dagger(a))


# --------------------------------------------------------------------------
# qubit factor

_SIGMA = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}


def _site_op(single: np.ndarray, site: int, n_qubits: int) -> np.ndarray:
    factors = [np.eye(2)] * n_qubits
    factors[site] = single
    return reduce(np.kron, factors)


def collective(which: str, n_qubits: int = 2) -> np.ndarray:
    """Sum of ``sigma_which`` over all qubits, on the qubit factor only."""
    return sum(_site_op(_SIGMA[which], i, n_qubits) for i in range(n_qubits))


def j_phi_y_qubit(phi_plus: float, n_qubits: int = 2) -> np.ndarray:
    jx = 0.5 * collective("x", n_qubits)
    jy = 0.5 * collective("y", n_qubits)
    return math.sin(phi_plus) * jx + math.cos(phi_plus) * jy


@dataclass(frozen=True)
class SpinOps:
    J_x: np.ndarray
    J_y: np.ndarray
    J_z: np.ndarray
    J_plus: np.ndarray
    J_minus: np.ndarray
    J_phi_y: np.ndarray


def lift_qubit(spec: HilbertSpec, op: np.ndarray) -> np.ndarray:
    return np.kron(op, np.eye(spec.fock_dim))


def lift_fock(spec: HilbertSpec, op: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(spec.qubit_dim), op)


def build_spin_ops(spec: HilbertSpec, phi_plus: float) -> SpinOps:
    """Collective spin operators ``J_k = 1/2 sum_i sigma_k`` on the full space."""
    nq = spec.n_qubits
    return SpinOps(
        J_x=lift_qubit(spec, 0.5 * collective("x", nq)),
        J_y=lift_qubit(spec, 0.5 * collective("y", nq)),
        J_z=lift_qubit(spec, 0.5 * collective("z", nq)),
        J_plus=lift_qubit(spec, collective("+", nq)),
        J_minus=lift_qubit(spec, collective("-", nq)),
        J_phi_y=lift_qubit(spec, j_phi_y_qubit(phi_plus, nq)),
    )


# --------------------------------------------------------------------------
# Fock factor

def ladder(n_max: int) -> np.ndarray:
    """Truncated annihilation operator on ``n_max + 1`` Fock levels."""
    return np.diag(np.sqrt(np.arange(1, n_max + 1, dtype=float)), k=1).astype(complex)


@dataclass(frozen=True)
class BosonOps:
    a: np.ndarray
    a_dag: np.ndarray
    n_op: np.ndarray


def build_boson_ops(spec: HilbertSpec, fock_only: bool = False) -> BosonOps:
    a = ladder(spec.n_max)
    ad = dagger(a)
    n = ad @ a
    if not fock_only:
        a, ad, n = (lift_fock(spec, x) for x in (a, ad, n))
    return BosonOps(a=a, a_dag=ad, n_op=n)


def fock_state(n_max: int, n: int) -> np.ndarray:
    v = np.zeros(n_max + 1, dtype=complex)
    v[n] = 1.0
    return v


def check_coherent_truncation(n_max: int, alpha: complex, tol: float = 1e-10) -> float:
    """Population of ``|alpha>`` in the top 10% of Fock levels; warns above ``tol``."""
    n_levels = n_max + 1
    first_top = n_levels - max(1, int(math.ceil(0.1 * n_levels)))
    tail = float(poisson.sf(first_top - 1, abs(alpha) ** 2))
    if tail > tol:
        warnings.warn(
            f"coherent amplitude |alpha|^2={abs(alpha) ** 2:.3g} leaves {tail:.2e} "
            f"population in Fock levels >= {first_top} (n_max={n_max})",
            TruncationWarning,
            stacklevel=3,
        )
    return tail


def displacement_fock(n_max: int, alpha: complex) -> np.ndarray:
    a = ladder(n_max)
    return matrix_exp(alpha * dagger(a) - np.conj(alpha) * a)


def displacement(spec: HilbertSpec, alpha: complex, fock_only: bool = False) -> np.ndarray:
    """``D(alpha) = exp(alpha a^dag - alpha^* a)`` on the truncated space."""
    check_coherent_truncation(spec.n_max, alpha)
    d = displacement_fock(spec.n_max, alpha)
    return d if fock_only else lift_fock(spec, d)


def coherent_state(n_max: int, alpha: complex) -> np.ndarray:
    """``D(alpha)|0>`` normalised on the truncated space."""
    check_coherent_truncation(n_max, alpha)
    psi = displacement_fock(n_max, alpha)[:, 0]
    return psi / np.linalg.norm(psi)


def _normal_monomial(n_max: int, p: int, q: int) -> np.ndarray:
    """``a^dag^p a^q`` on the truncated Fock space (diagonal offset ``q - p``)."""
    n_levels = n_max + 1
    out = np.zeros((n_levels, n_levels), dtype=complex)
    # <m| a^dag^p a^q |k> nonzero for m = k - q + p, k >= q
    for k in range(q, n_levels):
        m = k - q + p
        if m >= n_levels:
            break
        out[m, k] = math.sqrt(math.factorial(k) / math.factorial(k - q)) * math.sqrt(
            math.factorial(m) / math.factorial(k - q)
        )
    return out


def normal_monomial(n_max: int, p: int, q: int) -> np.ndarray:
    return _normal_monomial(n_max, p, q)


def taylor_fock(n_max: int, n: int) -> list[tuple[int, np.ndarray]]:
    """Harmonics of the nth Taylor polynomial of the displacement operator.

    Returns ``[(n - 2k, a^dag^(n-k) a^k / ((n-k)! k!)) for k = 0..n]``; the
    polynomial at phase ``theta`` is the sum of ``coeff * exp(i h theta)``.
    """
    if n < 0:
        raise ValueError("Taylor order must be >= 0")
    return [
        (n - 2 * k, _normal_monomial(n_max, n - k, k) / (math.factorial(n - k) * math.factorial(k)))
        for k in range(n + 1)
    ]


def displacement_taylor(spec: HilbertSpec, n: int, theta: float, fock_only: bool = False) -> np.ndarray:
    """nth normal-ordered Taylor polynomial of ``D(eta; theta)`` in ``i eta``."""
    op = sum(c * np.exp(1j * h * theta) for h, c in taylor_fock(spec.n_max, n))
    return op if fock_only else lift_fock(spec, op)


def bessel_clifford_fock(n_max: int, k: int, eta: float) -> np.ndarray:
    n_levels = n_max + 1
    out = np.zeros((n_levels, n_levels), dtype=complex)
    for n in range(max(0, -k), n_levels):
        if n + k >= n_levels:
            break
        out += (
            (1j * eta) ** (2 * n + k)
            / (math.factorial(n + k) * math.factorial(n))
            * _normal_monomial(n_max, n + k, n)
        )
    return math.exp(-(eta**2) / 2) * out


def bessel_clifford(spec: HilbertSpec, k: int, eta: float, fock_only: bool = False) -> np.ndarray:
    """kth Fourier coefficient of ``D(i eta e^{i theta})`` in ``theta``."""
    op = bessel_clifford_fock(spec.n_max, k, eta)
    return op if fock_only else lift_fock(spec, op)


# --------------------------------------------------------------------------
# spin sectors

@dataclass(frozen=True)
class SpinSectors:
    """Eigen-sectors of a collective spin operator on the qubit factor.

    An operator ``sum_j f_j(J) ⊗ B_j`` is block diagonal in the eigenbasis of
    ``J``; it is stored as a stack ``(n_sectors, F, F)`` holding the Fock
    block for each distinct eigenvalue.
    """

    qubit_op: np.ndarray
    values: np.ndarray = field(init=False)
    vectors: np.ndarray = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        w, v = np.linalg.eigh(self.qubit_op)
        w = np.where(np.abs(w) < 1e-12, 0.0, w)
        values, labels = [], []
        for x in w:
            for i, y in enumerate(values):
                if abs(x - y) < 1e-9:
                    labels.append(i)
                    break
            else:
                values.append(float(np.round(x, 12)))
                labels.append(len(values) - 1)
        object.__setattr__(self, "values", np.array(values))
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", np.array(labels))

    @classmethod
    def for_phi(cls, phi_plus: float, n_qubits: int = 2) -> "SpinSectors":
        return cls(j_phi_y_qubit(phi_plus, n_qubits))

    @property
    def n_sectors(self) -> int:
        return len(self.values)

    def spin_power(self, k: int, fock_dim: int) -> np.ndarray:
        """Blocks of ``J^k ⊗ 1``."""
        return (self.values**k)[:, None, None] * np.eye(fock_dim)[None]

    def tensor(self, spin_fn, fock_op: np.ndarray) -> np.ndarray:
        """Blocks of ``spin_fn(J) ⊗ fock_op``; ``spin_fn`` maps eigenvalue arrays."""
        return np.asarray(spin_fn(self.values), dtype=complex)[:, None, None] * fock_op[None]

    def embed(self, blocks: np.ndarray) -> np.ndarray:
        """Dense full-space matrix of a block stack."""
        blocks = np.asarray(blocks)
        f = blocks.shape[-1]
        out = np.zeros((len(self.labels) * f,) * 2, dtype=complex)
        for j, lab in enumerate(self.labels):
            p = np.outer(self.vectors[:, j], np.conj(self.vectors[:, j]))
            out += np.kron(p, blocks[lab])
        return out

    def embed_state(self, qubit_amplitudes: np.ndarray, fock_states: np.ndarray) -> np.ndarray:
        """Full state ``sum_j c_j |w_j> ⊗ fock_states[label_j]``."""
        return sum(
            np.kron(self.vectors[:, j] * qubit_amplitudes[j], fock_states[lab])
            for j, lab in enumerate(self.labels)
        )

    def apply(self, blocks: np.ndarray, state: np.ndarray) -> np.ndarray:
        """Apply a block stack to a full-space state vector."""
        q = len(self.labels)
        f = blocks.shape[-1]
        psi = state.reshape(q, f)
        coeffs = np.conj(self.vectors).T @ psi  # eigen-basis components, (q, f)
        out = np.stack([blocks[lab] @ coeffs[j] for j, lab in enumerate(self.labels)])
        return (self.vectors @ out).reshape(-1)

    def project(self, full: np.ndarray) -> np.ndarray:
        """Blocks of a full-space operator assumed sector-diagonal."""
        q = len(self.labels)
        f = full.shape[-1] // q
        m = full.reshape(q, f, q, f)
        blocks = []
        for i in range(self.n_sectors):
            j = int(np.flatnonzero(self.labels == i)[0])
            w = self.vectors[:, j]
            blocks.append(np.einsum("a,aibj,b->ij", np.conj(w), m, w))
        return np.stack(blocks)
