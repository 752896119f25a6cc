"""Order-by-order quantum averaging.

Given a perturbative Hamiltonian ``H(s; lam) = sum_n lam^n H^(n)(s)`` as
Fourier series, each order ``n`` builds the auxiliary Hamiltonian

    A^(n) = H^(n) + sum_{k=1}^{n-1} B_k/k! ((-1)^k S_k^(n) - T_k^(n))

with ``S_k^(n) = sum_m [i Phi^(m), S_{k-1}^(n-m)]`` (``S_0 = H``, likewise
``T`` seeded by ``H_eff``) and Bernoulli numbers ``B_1 = -1/2``. Its slow
part is the effective Hamiltonian of that order; the antiderivative of its
fast part is the dynamical phase.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import factorial
from typing import Mapping

import numpy as np

from .fourier import (
    BaseFrequencySet,
    FourierSeries,
    antiderivative,
    canonicalize,
    fast_part,
    hermitian_pairing_error,
    is_slow,
    partial_average,
    series_commutator,
)


class QatError(RuntimeError):
    """An expansion invariant failed; the message names the order."""


@lru_cache(maxsize=None)
def bernoulli(k: int) -> Fraction:
    """Bernoulli number with the ``B_1 = -1/2`` convention."""
    if k < 0:
        raise ValueError("k must be >= 0")
    b = [Fraction(1)]
    for m in range(1, k + 1):
        acc = sum(Fraction(factorial(m + 1), factorial(j) * factorial(m + 1 - j)) * b[j] for j in range(m))
        b.append(-acc / (m + 1))
    return b[k]


@dataclass(frozen=True)
class PerturbativeSeries:
    """``{n: H^(n)}``; order ``n`` carries an implicit ``lam**n``."""

    orders: Mapping[int, FourierSeries]

    def __post_init__(self):
        if not self.orders:
            raise ValueError("perturbative series needs at least one order")
        first = next(iter(self.orders.values()))
        for n, h in self.orders.items():
            if n < 0:
                raise ValueError(f"negative order {n}")
            first._check(h)
        object.__setattr__(self, "orders", dict(sorted(self.orders.items())))

    @property
    def basis(self) -> BaseFrequencySet:
        return next(iter(self.orders.values())).basis

    @property
    def shape(self) -> tuple[int, ...]:
        return next(iter(self.orders.values())).shape

    @property
    def max_order(self) -> int:
        return max(self.orders)

    def __getitem__(self, n: int) -> FourierSeries:
        if n in self.orders:
            return self.orders[n]
        return FourierSeries.zero(self.basis, self.shape)

    def weighted(self, lam: float, orders=None) -> FourierSeries:
        """``sum_n lam^n H^(n)`` over ``orders`` (default: all ``n >= 1``)."""
        orders = [n for n in self.orders if n >= 1] if orders is None else orders
        total = FourierSeries.zero(self.basis, self.shape)
        for n in orders:
            total = total + lam**n * self[n]
        return total

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, series in self.orders.items():
            h.update(str(n).encode())
            for v, c in sorted(series.modes.items()):
                h.update(repr(v).encode())
                h.update(np.ascontiguousarray(np.round(c, 14)).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class QatExpansion:
    """Dynamical phase ``phi[n]`` and effective Hamiltonian ``h_eff[n]`` series."""

    order: int
    phi: Mapping[int, FourierSeries]
    h_eff: Mapping[int, FourierSeries]
    cutoff: float
    rule: str = "value"
    metadata: Mapping = field(default_factory=dict)

    @property
    def basis(self) -> BaseFrequencySet:
        return self.h_eff[1].basis

    @property
    def shape(self) -> tuple[int, ...]:
        return self.h_eff[1].shape

    def phi_total(self, lam: float, upto: int | None = None) -> FourierSeries:
        """``sum_{n<=upto} lam^n Phi^(n)``; default ``upto = order - 1``."""
        upto = self.order - 1 if upto is None else upto
        total = FourierSeries.zero(self.basis, self.shape)
        for n in range(1, upto + 1):
            total = total + lam**n * self.phi[n]
        return total

    def h_eff_total(self, lam: float, upto: int | None = None) -> FourierSeries:
        upto = self.order if upto is None else upto
        total = FourierSeries.zero(self.basis, self.shape)
        for n in range(1, upto + 1):
            total = total + lam**n * self.h_eff[n]
        return total

    def truncated(self, order: int) -> "QatExpansion":
        """The order-``order`` expansion contained in this one."""
        if not 1 <= order <= self.order:
            raise ValueError(f"order must lie in [1, {self.order}], got {order}")
        return QatExpansion(
            order=order,
            phi={n: s for n, s in self.phi.items() if n <= order},
            h_eff={n: s for n, s in self.h_eff.items() if n <= order},
            cutoff=self.cutoff,
            rule=self.rule,
            metadata=self.metadata,
        )

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "cutoff": self.cutoff,
            "rule": self.rule,
            "metadata": dict(self.metadata),
            "phi": {str(n): s.to_dict() for n, s in self.phi.items()},
            "h_eff": {str(n): s.to_dict() for n, s in self.h_eff.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "QatExpansion":
        return cls(
            order=int(data["order"]),
            phi={int(n): FourierSeries.from_dict(s) for n, s in data["phi"].items()},
            h_eff={int(n): FourierSeries.from_dict(s) for n, s in data["h_eff"].items()},
            cutoff=float(data["cutoff"]),
            rule=data.get("rule", "value"),
            metadata=data.get("metadata", {}),
        )

    def save(self, path) -> None:
        """JSON for small expansions, compressed ``.npz`` otherwise (by suffix)."""
        path = str(path)
        if not path.endswith(".npz"):
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh)
            return
        basis = self.basis
        header = {"order": self.order, "cutoff": self.cutoff, "rule": self.rule,
                  "metadata": dict(self.metadata), "shape": list(self.shape),
                  "basis": [[n, v] for n, v in zip(basis.names, basis.values)]}
        arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
        for kind, table in (("phi", self.phi), ("h_eff", self.h_eff)):
            for n, series in table.items():
                vecs = series.vectors()
                arrays[f"{kind}_{n}_vectors"] = np.array(vecs, dtype=np.int64).reshape(len(vecs), basis.size)
                arrays[f"{kind}_{n}_coeffs"] = (np.stack([series.coeff(v) for v in vecs]) if vecs
                                                else np.zeros((0,) + self.shape, complex))
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "QatExpansion":
        path = str(path)
        if not path.endswith(".npz"):
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            basis = BaseFrequencySet(*map(tuple, zip(*header["basis"])))
            shape = tuple(header["shape"])
            tables: dict[str, dict[int, FourierSeries]] = {"phi": {}, "h_eff": {}}
            for key in data.files:
                if not key.endswith("_vectors"):
                    continue
                kind, n = key[: -len("_vectors")].rsplit("_", 1)
                coeffs = data[f"{kind}_{n}_coeffs"]
                tables[kind][int(n)] = FourierSeries(basis, zip(map(tuple, data[key]), coeffs), shape)
        return cls(order=header["order"], phi=tables["phi"], h_eff=tables["h_eff"],
                   cutoff=header["cutoff"], rule=header["rule"], metadata=header["metadata"])


class _Recurrence:
    """Caches the nested commutators ``S_k^(n)`` and ``T_k^(n)``."""

    def __init__(self, h: PerturbativeSeries, phi: Mapping[int, FourierSeries],
                 h_eff: Mapping[int, FourierSeries]):
        self.h = h
        self.phi = phi
        self.h_eff = h_eff
        self._cache: dict[tuple[str, int, int], FourierSeries] = {}

    def term(self, which: str, k: int, n: int) -> FourierSeries:
        key = (which, k, n)
        if key in self._cache:
            return self._cache[key]
        if k == 0:
            if which == "S":
                out = self.h[n]
            else:
                if n not in self.h_eff:
                    raise QatError(f"effective Hamiltonian of order {n} is missing")
                out = self.h_eff[n]
        else:
            out = FourierSeries.zero(self.h.basis, self.h.shape)
            for m in range(1, n - k + 1):
                if m not in self.phi:
                    raise QatError(f"dynamical phase of order {m} is missing")
                out = out + series_commutator(1j * self.phi[m], self.term(which, k - 1, n - m))
        self._cache[key] = out
        return out

    def auxiliary(self, n: int) -> FourierSeries:
        aux = self.h[n]
        for k in range(1, n):
            coef = float(bernoulli(k)) / factorial(k)
            if coef == 0.0:
                continue
            aux = aux + coef * ((-1) ** k * self.term("S", k, n) - self.term("T", k, n))
        return canonicalize(aux)


def auxiliary_hamiltonian(n: int, h: PerturbativeSeries, phi: Mapping[int, FourierSeries],
                          h_eff: Mapping[int, FourierSeries]) -> FourierSeries:
    """Order-``n`` auxiliary Hamiltonian from the lower-order solution."""
    if n < 1:
        raise ValueError("order must be >= 1")
    missing = [m for m in range(1, n) if m not in phi or m not in h_eff]
    if missing:
        raise QatError(f"auxiliary Hamiltonian of order {n} needs orders {missing} solved first")
    return _Recurrence(h, phi, h_eff).auxiliary(n)


def solve_order(n: int, h: PerturbativeSeries, phi: Mapping[int, FourierSeries],
                h_eff: Mapping[int, FourierSeries], cutoff: float, rule: str = "value",
                aux: FourierSeries | None = None) -> tuple[FourierSeries, FourierSeries]:
    """``(Phi^(n), H_eff^(n))`` from the homological equation."""
    if aux is None:
        aux = auxiliary_hamiltonian(n, h, phi, h_eff)
    slow = canonicalize(partial_average(aux, cutoff, rule))
    phi_n = canonicalize(antiderivative(fast_part(aux, cutoff, rule)))
    return phi_n, slow


def homological_residual(phi_n: FourierSeries, h_eff_n: FourierSeries, aux: FourierSeries,
                         s_values) -> float:
    """``max_s ||dPhi/ds + H_eff - A||_F`` relative to ``max(1, ||A||)``."""
    resid = phi_n.derivative() + h_eff_n - aux
    vals = resid.evaluate(np.asarray(s_values))
    scale = max(1.0, aux.max_norm())
    return float(np.max(np.sqrt(np.sum(np.abs(vals) ** 2, axis=tuple(range(1, vals.ndim)))))) / scale


def run(h: PerturbativeSeries, order: int, cutoff: float = 0.5, rule: str = "value",
        include_last_phi: bool = True, check: bool = True, seed: int = 0,
        tol: float = 1e-10) -> QatExpansion:
    """Solve orders ``1..order`` and return the expansion.

    ``Phi^(order)`` is computed when ``include_last_phi`` but the propagator
    only ever uses ``Phi^(1..order-1)``. With ``check`` every order is
    verified (Hermitian pairing, slow-only ``H_eff``, constant-free ``Phi``,
    homological residual at 20 random times) and a :class:`QatError` names
    the first failing order.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    missing = [n for n in range(1, order + 1) if n not in h.orders]
    if missing:
        raise QatError(f"Hamiltonian orders {missing} are not populated")
    rng = np.random.default_rng(seed)
    phi: dict[int, FourierSeries] = {}
    h_eff: dict[int, FourierSeries] = {}
    rec = _Recurrence(h, phi, h_eff)
    diagnostics: dict[str, dict] = {}
    for n in range(1, order + 1):
        aux = rec.auxiliary(n)
        phi_n, h_eff_n = solve_order(n, h, phi, h_eff, cutoff, rule, aux=aux)
        h_eff[n] = h_eff_n
        if n < order or include_last_phi:
            phi[n] = phi_n
        fast_freqs = np.abs(phi_n.frequencies())
        diag = {
            "aux_modes": len(aux),
            "phi_modes": len(phi_n),
            "h_eff_modes": len(h_eff_n),
            "min_fast_frequency": float(fast_freqs.min()) if len(fast_freqs) else None,
        }
        if check:
            s_values = rng.uniform(-50.0, 50.0, size=20)
            diag["homological_residual"] = homological_residual(phi_n, h_eff_n, aux, s_values)
            _check_order(n, phi_n, h_eff_n, cutoff, rule, diag["homological_residual"], tol)
        diagnostics[str(n)] = diag
    meta = {"hamiltonian_digest": h.digest(), "tolerance": tol, "orders": diagnostics}
    return QatExpansion(order=order, phi=phi, h_eff=h_eff, cutoff=cutoff, rule=rule, metadata=meta)


def _check_order(n, phi_n, h_eff_n, cutoff, rule, residual, tol):
    scale = max(1.0, phi_n.max_norm(), h_eff_n.max_norm())
    for name, series in (("Phi", phi_n), ("H_eff", h_eff_n)):
        err = hermitian_pairing_error(series)
        if err > tol * scale:
            raise QatError(f"order {n}: {name} breaks Hermitian pairing (error {err:.2e})")
    basis = h_eff_n.basis
    for v in h_eff_n.vectors():
        if not is_slow(basis, v, cutoff, rule):
            raise QatError(f"order {n}: H_eff holds fast mode {basis.describe(v)}")
    for v in phi_n.vectors():
        if is_slow(basis, v, cutoff, rule):
            raise QatError(f"order {n}: Phi holds slow mode {basis.describe(v)} (nonzero average)")
    if residual > tol:
        raise QatError(f"order {n}: homological residual {residual:.2e} exceeds {tol:.0e}")
