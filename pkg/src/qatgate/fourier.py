"""Almost-periodic Fourier series with operator coefficients.

A :class:`FourierSeries` is a finite sum ``sum_k h_k exp(i Lambda_k s)`` where
each frequency ``Lambda_k`` is an exact integer combination of named base
frequencies (a tuple of ints over a :class:`BaseFrequencySet`). Mode merging
uses the integer vectors, so incommensurate bases never alias; slow/fast
classification uses either the numeric value or the bases involved.

Coefficients are numpy arrays of shape ``(..., d, d)``: plain matrices or
stacks of spin-sector blocks (see :class:`qatgate.hilbert.SpinSectors`).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

import numpy as np

from .hilbert import dagger

Vector = tuple  # tuple[int, ...], one integer per base frequency

RULES = ("value", "base")


class ClassificationWarning(UserWarning):
    """A mode frequency sits on the slow/fast boundary."""


class ResonanceError(ValueError):
    """A mode routed to the dynamical phase has (near-)zero frequency."""


@dataclass(frozen=True)
class BaseFrequencySet:
    """Named base frequencies, in units of the characteristic frequency."""

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate base frequency names: {self.names}")
        if not all(np.isfinite(v) for v in self.values):
            raise ValueError("base frequencies must be finite")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "BaseFrequencySet":
        return cls(tuple(mapping), tuple(mapping.values()))

    @property
    def size(self) -> int:
        return len(self.names)

    def zero(self) -> Vector:
        return (0,) * self.size

    def vector(self, coeffs: Mapping[str, int] | None = None, **kw: int) -> Vector:
        coeffs = dict(coeffs or {}, **kw)
        unknown = set(coeffs) - set(self.names)
        if unknown:
            raise KeyError(f"unknown base frequencies {sorted(unknown)}")
        return tuple(int(coeffs.get(n, 0)) for n in self.names)

    def value(self, vec: Vector) -> float:
        return float(sum(c * v for c, v in zip(vec, self.values)))

    def describe(self, vec: Vector) -> str:
        parts = []
        for c, n in zip(vec, self.names):
            if c:
                sign = "-" if c < 0 else "+"
                mag = "" if abs(c) == 1 else str(abs(c))
                parts.append(f"{sign}{mag}{n}")
        text = "".join(parts).lstrip("+")
        return text or "0"


def add_vec(a: Vector, b: Vector) -> Vector:
    return tuple(x + y for x, y in zip(a, b))


def neg_vec(a: Vector) -> Vector:
    return tuple(-x for x in a)


def is_slow(basis: BaseFrequencySet, vec: Vector, cutoff: float, rule: str = "value") -> bool:
    """Slow/constant classification of one frequency vector.

    ``"value"``: ``|Lambda| <= cutoff``. ``"base"``: every base frequency
    with a nonzero coefficient has ``|value| <= cutoff``, i.e. the mode is a
    beat of slow bases only, whatever its numeric size.
    """
    if rule == "value":
        return abs(basis.value(vec)) <= cutoff
    if rule == "base":
        return all(c == 0 or abs(v) <= cutoff for c, v in zip(vec, basis.values))
    raise ValueError(f"unknown classification rule {rule!r}; expected one of {RULES}")


class FourierSeries:
    """Immutable set of ``(frequency vector, coefficient)`` modes."""

    __slots__ = ("basis", "shape", "_modes", "_packed")

    def __init__(self, basis: BaseFrequencySet, modes: Mapping[Vector, np.ndarray] | Iterable = (),
                 shape: tuple[int, ...] | None = None):
        items = modes.items() if isinstance(modes, Mapping) else modes
        merged: dict[Vector, np.ndarray] = {}
        for vec, coeff in items:
            vec = tuple(int(c) for c in vec)
            if len(vec) != basis.size:
                raise ValueError(f"frequency vector {vec} does not match basis {basis.names}")
            coeff = np.asarray(coeff, dtype=complex)
            if vec in merged:
                merged[vec] = merged[vec] + coeff
            else:
                merged[vec] = coeff.copy()
        if shape is None:
            if not merged:
                raise ValueError("empty series needs an explicit operator shape")
            shape = next(iter(merged.values())).shape
        for vec, c in merged.items():
            if c.shape != tuple(shape):
                raise ValueError(f"mode {vec} has shape {c.shape}, expected {tuple(shape)}")
            c.flags.writeable = False
        self.basis = basis
        self.shape = tuple(shape)
        self._modes = merged
        self._packed = None

    # -- construction helpers
    @classmethod
    def zero(cls, basis: BaseFrequencySet, shape: tuple[int, ...]) -> "FourierSeries":
        return cls(basis, {}, shape)

    @classmethod
    def constant(cls, basis: BaseFrequencySet, op: np.ndarray) -> "FourierSeries":
        return cls(basis, {basis.zero(): op})

    # -- container protocol
    @property
    def modes(self) -> Mapping[Vector, np.ndarray]:
        return MappingProxyType(self._modes)

    def __len__(self) -> int:
        return len(self._modes)

    def __iter__(self) -> Iterator[tuple[Vector, np.ndarray]]:
        return iter(self._modes.items())

    def __contains__(self, vec) -> bool:
        return tuple(vec) in self._modes

    def coeff(self, vec: Vector) -> np.ndarray:
        return self._modes.get(tuple(vec), np.zeros(self.shape, dtype=complex))

    def vectors(self) -> list[Vector]:
        return list(self._modes)

    def frequencies(self) -> np.ndarray:
        return np.array([self.basis.value(v) for v in self._modes])

    def norms(self) -> dict[Vector, float]:
        return {v: float(np.sqrt(np.sum(np.abs(c) ** 2))) for v, c in self._modes.items()}

    def max_norm(self) -> float:
        return max(self.norms().values(), default=0.0)

    def __repr__(self) -> str:
        freqs = ", ".join(self.basis.describe(v) for v in list(self._modes)[:6])
        more = "..." if len(self) > 6 else ""
        return f"FourierSeries({len(self)} modes: {freqs}{more}; shape={self.shape})"

    # -- algebra
    def _check(self, other: "FourierSeries"):
        if other.basis != self.basis:
            raise ValueError("series use different base frequency sets")
        if other.shape != self.shape:
            raise ValueError(f"dimension mismatch: {self.shape} vs {other.shape}")

    def __add__(self, other: "FourierSeries") -> "FourierSeries":
        self._check(other)
        return FourierSeries(self.basis, list(self) + list(other), self.shape)

    def __neg__(self) -> "FourierSeries":
        return FourierSeries(self.basis, {v: -c for v, c in self}, self.shape)

    def __sub__(self, other: "FourierSeries") -> "FourierSeries":
        return self + (-other)

    def __mul__(self, scalar) -> "FourierSeries":
        return FourierSeries(self.basis, {v: scalar * c for v, c in self}, self.shape)

    __rmul__ = __mul__

    def dagger(self) -> "FourierSeries":
        return FourierSeries(self.basis, {neg_vec(v): dagger(c) for v, c in self}, self.shape)

    def derivative(self) -> "FourierSeries":
        out = {}
        for v, c in self:
            lam = self.basis.value(v)
            if v != self.basis.zero():
                out[v] = 1j * lam * c
        return FourierSeries(self.basis, out, self.shape)

    def map_coeffs(self, fn) -> "FourierSeries":
        """Apply ``fn`` to every coefficient (e.g. embedding sector blocks)."""
        modes = {v: fn(c) for v, c in self}
        shape = next(iter(modes.values())).shape if modes else fn(np.zeros(self.shape, complex)).shape
        return FourierSeries(self.basis, modes, shape)

    # -- evaluation
    def _pack(self):
        if self._packed is None:
            if self._modes:
                coeffs = np.stack(list(self._modes.values())).reshape(len(self), -1)
            else:
                coeffs = np.zeros((0, int(np.prod(self.shape))), dtype=complex)
            self._packed = (self.frequencies(), coeffs)
        return self._packed

    def evaluate(self, s) -> np.ndarray:
        """``sum_k h_k exp(i Lambda_k s)``; vectorised over an array of ``s``."""
        lam, coeffs = self._pack()
        s_arr = np.asarray(s, dtype=float)
        phases = np.exp(1j * np.multiply.outer(s_arr, lam))
        out = phases @ coeffs if len(lam) else np.zeros(s_arr.shape + (coeffs.shape[1],), complex)
        return out.reshape(s_arr.shape + self.shape)

    def __call__(self, s) -> np.ndarray:
        return self.evaluate(s)

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "basis": dict(zip(self.basis.names, self.basis.values)),
            "shape": list(self.shape),
            "modes": [
                {
                    "freq": {n: c for n, c in zip(self.basis.names, v) if c},
                    "value": self.basis.value(v),
                    "re": np.real(c).tolist(),
                    "im": np.imag(c).tolist(),
                }
                for v, c in sorted(self._modes.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FourierSeries":
        basis = BaseFrequencySet.from_mapping(data["basis"])
        modes = [
            (basis.vector(m["freq"]), np.asarray(m["re"]) + 1j * np.asarray(m["im"]))
            for m in data["modes"]
        ]
        return cls(basis, modes, tuple(data["shape"]))


# --------------------------------------------------------------------------
# mode algebra

def evaluate(a: FourierSeries, s) -> np.ndarray:
    return a.evaluate(s)


def _combine(a: FourierSeries, b: FourierSeries, commute: bool) -> FourierSeries:
    a._check(b)
    if not len(a) or not len(b):
        return FourierSeries.zero(a.basis, a.shape)
    va = np.array(a.vectors(), dtype=np.int64)
    vb = np.array(b.vectors(), dtype=np.int64)
    cb = np.stack([c for _, c in b])
    sums = (va[:, None, :] + vb[None, :, :]).reshape(-1, a.basis.size)
    keys, inverse = np.unique(sums, axis=0, return_inverse=True)
    inverse = inverse.reshape(len(va), len(vb))
    acc = np.zeros((len(keys),) + a.shape, dtype=complex)
    for i, (_, ca) in enumerate(a):
        prod = ca @ cb
        if commute:
            prod = prod - cb @ ca
        np.add.at(acc, inverse[i], prod)
    return FourierSeries(a.basis, zip(map(tuple, keys.tolist()), acc), a.shape)


def series_commutator(a: FourierSeries, b: FourierSeries) -> FourierSeries:
    """``[A, B]`` with frequencies adding modewise; canonicalised."""
    return canonicalize(_combine(a, b, commute=True))


def series_product(a: FourierSeries, b: FourierSeries) -> FourierSeries:
    return canonicalize(_combine(a, b, commute=False))


def canonicalize(a: FourierSeries, amp_tol: float | None = None) -> FourierSeries:
    """Drop numerical dust while keeping Hermitian partners together.

    ``amp_tol`` defaults to ``1e-14`` times the largest coefficient norm.
    A mode is pruned iff the larger of its own norm and its partner's norm
    (frequency ``-Lambda``) is below ``amp_tol``.
    """
    norms = a.norms()
    if amp_tol is None:
        amp_tol = 1e-14 * max(norms.values(), default=0.0)
    keep = {}
    for v, c in a:
        pair = max(norms[v], norms.get(neg_vec(v), 0.0))
        if pair > amp_tol:
            keep[v] = c
    return FourierSeries(a.basis, keep, a.shape)


def _split(a: FourierSeries, cutoff: float, rule: str):
    if not 0.0 < cutoff < 1.0:
        raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
    slow, fast = {}, {}
    for v, c in a:
        (slow if is_slow(a.basis, v, cutoff, rule) else fast)[v] = c
        lam = abs(a.basis.value(v))
        if rule == "value" and abs(lam - cutoff) < 1e-6:
            warnings.warn(
                f"mode {a.basis.describe(v)} at |Lambda|={lam:.9f} is within 1e-6 of cutoff {cutoff}",
                ClassificationWarning,
                stacklevel=3,
            )
    return (FourierSeries(a.basis, slow, a.shape), FourierSeries(a.basis, fast, a.shape))


def partial_average(a: FourierSeries, cutoff: float, rule: str = "value") -> FourierSeries:
    """Constant plus slow modes: an ideal low-pass filter."""
    return _split(a, cutoff, rule)[0]


def fast_part(a: FourierSeries, cutoff: float, rule: str = "value") -> FourierSeries:
    """Complement of :func:`partial_average`."""
    return _split(a, cutoff, rule)[1]


def antiderivative(a: FourierSeries, resonance_floor: float = 1e-9) -> FourierSeries:
    """Mean-free antiderivative: each mode ``h e^{i L s}`` becomes ``h/(iL) e^{i L s}``.

    No integration constant is added. Constant modes are rejected; so are
    modes whose numeric frequency is below ``resonance_floor``.
    """
    out = {}
    zero = a.basis.zero()
    for v, c in a:
        if v == zero:
            raise ValueError("antiderivative of a series with a constant mode")
        lam = a.basis.value(v)
        if abs(lam) < resonance_floor:
            raise ResonanceError(
                f"mode {a.basis.describe(v)} is resonant (Lambda={lam:.3e}); "
                "it cannot be integrated into the dynamical phase"
            )
        out[v] = c / (1j * lam)
    return FourierSeries(a.basis, out, a.shape)


def hermitian_pairing_error(a: FourierSeries) -> float:
    """Largest ``||h(-L) - h(L)^dag||`` over modes (0 for a Hermitian series)."""
    err = 0.0
    for v, c in a:
        partner = a.coeff(neg_vec(v))
        err = max(err, float(np.sqrt(np.sum(np.abs(partner - dagger(c)) ** 2))))
    return err
