"""Mølmer–Sørensen interaction Hamiltonian and closed-form reference results.

Scaled units: time ``s = nu t``, frequencies in units of the secular
frequency (base frequency ``"nu" = 1``). The lab-frame drive enters as

    H(s) = Lambda_Omega(s) J_phi ⊗ (f(s) D(alpha(s)) + h.c.),
    f(s) = i exp(i phi_minus) exp(-i Lambda_Delta s),  alpha(s) = i eta exp(i s),

and expanding ``D`` in normal order gives order ``n`` (weight ``eta**n``)

    H^(n) = Lambda' J_phi ⊗ (i^n f(s) D^(n)(s) + h.c.),  Lambda' = exp(-eta^2/2) Lambda_Omega.

Windows are folded into the mode frequencies: ``sin^4(omega s / 2)`` has
harmonics ``{0: 3/8, ±1: -1/4, ±2: 1/16}`` in units of the window base
frequency ``"omega"``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .fourier import BaseFrequencySet, FourierSeries, canonicalize
from .hilbert import (
    HilbertSpec,
    SpinSectors,
    build_boson_ops,
    dagger,
    j_phi_y_qubit,
    ladder,
    lift_fock,
    lift_qubit,
    matrix_exp,
    taylor_fock,
)
from .qat import PerturbativeSeries

SIN4_HARMONICS = ((0, 3 / 8), (1, -1 / 4), (-1, -1 / 4), (2, 1 / 16), (-2, 1 / 16))
WINDOWS = ("flat", "sin4")


class ConfigurationError(ValueError):
    """Model parameters that make the expansion ill-defined."""


@dataclass(frozen=True)
class DriveTone:
    """One symmetric red/blue tone pair.

    ``detuning`` is the symmetric detuning ``Lambda_Delta`` as an integer
    combination of the model's base frequencies, e.g. ``{"nu": 1, "delta": -1}``.
    """

    rabi: float
    detuning: Mapping[str, int]
    phi_plus: float = math.pi / 4
    phi_minus: float = 0.0
    window: str = "flat"
    sideband: int = 1

    def __post_init__(self):
        if not self.rabi > 0:
            raise ConfigurationError(f"Rabi coupling must be positive, got {self.rabi}")
        if self.window not in WINDOWS:
            raise ConfigurationError(f"unknown window {self.window!r}; expected one of {WINDOWS}")
        object.__setattr__(self, "detuning", dict(self.detuning))
        object.__setattr__(self, "phi_plus", math.remainder(self.phi_plus, 2 * math.pi))
        object.__setattr__(self, "phi_minus", math.remainder(self.phi_minus, 2 * math.pi))

    def harmonics(self) -> tuple[tuple[int, float], ...]:
        return ((0, 1.0),) if self.window == "flat" else SIN4_HARMONICS


def window_value(kind: str, omega: float, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if kind == "flat":
        return np.ones_like(s)
    return np.sin(omega * s / 2) ** 4


@dataclass(frozen=True)
class MsModel:
    eta: float
    tones: tuple[DriveTone, ...]
    bases: Mapping[str, float]
    n_max: int = 40
    order: int = 4
    include_carrier: bool = False
    window_base: str = "omega"

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ConfigurationError(f"eta must lie in [0, 1), got {self.eta}")
        if not self.tones:
            raise ConfigurationError("model needs at least one tone")
        if self.order < 1:
            raise ConfigurationError("expansion order must be >= 1")
        object.__setattr__(self, "tones", tuple(self.tones))
        object.__setattr__(self, "bases", dict(self.bases))
        if self.bases.get("nu") != 1.0:
            raise ConfigurationError("base frequencies must contain nu = 1")
        if any(t.window != "flat" for t in self.tones) and self.window_base not in self.bases:
            raise ConfigurationError(f"windowed tones need base frequency {self.window_base!r}")
        for t in self.tones:
            self.basis.vector(t.detuning)

    @property
    def lam(self) -> float:
        return self.eta

    @property
    def basis(self) -> BaseFrequencySet:
        return BaseFrequencySet.from_mapping(self.bases)

    @property
    def spec(self) -> HilbertSpec:
        return HilbertSpec(2, self.n_max)

    @property
    def phi_plus(self) -> float:
        values = {round(t.phi_plus, 12) for t in self.tones}
        if len(values) != 1:
            raise ConfigurationError("tones with different phi_plus have no common spin sectors")
        return self.tones[0].phi_plus

    @property
    def sectors(self) -> SpinSectors:
        return SpinSectors.for_phi(self.phi_plus)

    def detuning_value(self, tone: DriveTone) -> float:
        return self.basis.value(self.basis.vector(tone.detuning))

    def small_detuning(self, tone: DriveTone | None = None) -> float:
        """``Lambda_delta = k nu - Lambda_Delta`` for the tone's sideband ``k``."""
        tone = tone or self.tones[0]
        return tone.sideband - self.detuning_value(tone)

    @property
    def omega(self) -> float | None:
        return self.bases.get(self.window_base)

    @property
    def gate_time(self) -> float | None:
        """One window period ``2 pi / omega`` (``None`` for flat pulses)."""
        return 2 * math.pi / self.omega if self.omega else None

    def with_(self, **kw) -> "MsModel":
        return replace(self, **kw)

    def describe(self) -> dict:
        return {
            "eta": self.eta,
            "n_max": self.n_max,
            "order": self.order,
            "include_carrier": self.include_carrier,
            "bases": dict(self.bases),
            "tones": [
                {
                    "rabi": t.rabi,
                    "detuning": dict(t.detuning),
                    "detuning_value": self.detuning_value(t),
                    "phi_plus": t.phi_plus,
                    "phi_minus": t.phi_minus,
                    "window": t.window,
                    "sideband": t.sideband,
                }
                for t in self.tones
            ],
        }


# --------------------------------------------------------------------------
# scenarios

def flat_scenario(eta: float = 0.1, rabi: float = 1.0, delta: float = 0.383, phi_plus: float = math.pi / 4,
                  phi_minus: float = 0.0, n_max: int = 40, order: int = 4) -> MsModel:
    """Single flat tone detuned by ``delta`` below the first blue sideband."""
    tone = DriveTone(rabi=rabi, detuning={"nu": 1, "delta": -1}, phi_plus=phi_plus, phi_minus=phi_minus)
    return MsModel(eta=eta, tones=(tone,), bases={"nu": 1.0, "delta": delta}, n_max=n_max, order=order)


def fig2_scenario(**kw) -> MsModel:
    return flat_scenario(**{"eta": 0.1, "rabi": 1.0, "delta": 0.383, **kw})


RABI_RATIO_SHAPED = 0.7885


def shaped_scenario(eta: float = 0.1, rabi1: float = 1.0, delta2: float = 0.107,
                    rabi_ratio: float = RABI_RATIO_SHAPED, phi_plus: float = math.pi / 4,
                    phi_minus: float = 0.0, n_max: int = 40, order: int = 4,
                    second_sign: int = -1) -> MsModel:
    """Two sin^4-windowed tones near the first and second sidebands.

    Tone 1: ``Lambda_Delta1 = nu - delta1`` with ``delta1 = 3 delta2``.
    Tone 2: ``Lambda_Delta2 = 2 nu + second_sign * delta2``. The window
    frequency is ``omega = delta2 / 3`` and the gate time ``2 pi / omega``.

    With the default ``second_sign = -1`` both near-resonant beats
    (``k nu - Lambda_Delta``) are positive, which is the configuration that
    cancels the motional dependence of the geometric phase in this
    Hamiltonian convention; ``+1`` gives the opposite-sign second tone.
    """
    if second_sign not in (1, -1):
        raise ConfigurationError("second_sign must be +1 or -1")
    tone1 = DriveTone(rabi=rabi1, detuning={"nu": 1, "omega": -9}, phi_plus=phi_plus,
                      phi_minus=phi_minus, window="sin4", sideband=1)
    tone2 = DriveTone(rabi=rabi_ratio * rabi1, detuning={"nu": 2, "omega": 3 * second_sign},
                      phi_plus=phi_plus, phi_minus=phi_minus, window="sin4", sideband=2)
    return MsModel(eta=eta, tones=(tone1, tone2), bases={"nu": 1.0, "omega": delta2 / 3},
                   n_max=n_max, order=order)


def unshaped_scenario(eta: float = 0.1, rabi: float = 1.0, delta: float = 0.383, **kw) -> MsModel:
    """Flat single-tone gate of the same strength (shaping baseline)."""
    return flat_scenario(eta=eta, rabi=rabi, delta=delta, **kw)


# --------------------------------------------------------------------------
# Hamiltonian construction

def _lifter(model: MsModel, representation: str, tone: DriveTone):
    if representation == "sector":
        sectors = model.sectors
        return lambda fock: sectors.tensor(lambda m: m, fock)
    if representation == "dense":
        jq = j_phi_y_qubit(tone.phi_plus)
        return lambda fock: np.kron(jq, fock)
    raise ValueError(f"unknown representation {representation!r}")


def _op_shape(model: MsModel, representation: str) -> tuple[int, ...]:
    f = model.n_max + 1
    if representation == "sector":
        return (model.sectors.n_sectors, f, f)
    return (4 * f, 4 * f)


def tone_order(model: MsModel, tone: DriveTone, n: int, representation: str = "sector") -> FourierSeries:
    """``H^(n)`` contributed by one tone, window harmonics folded in."""
    basis = model.basis
    lift = _lifter(model, representation, tone)
    rabi_p = math.exp(-model.eta**2 / 2) * tone.rabi
    detuning = basis.vector(tone.detuning)
    nu = basis.vector(nu=1)
    win = basis.vector({model.window_base: 1}) if tone.window != "flat" else basis.zero()
    # f(s) = i e^{i phi_-} e^{-i Delta s}
    prefactor = (1j**n) * 1j * np.exp(1j * tone.phi_minus) * rabi_p
    modes = []
    for harmonic, fock in taylor_fock(model.n_max, n):
        coeff = lift(prefactor * fock)
        for w, weight in tone.harmonics():
            vec = tuple(harmonic * a - d + w * b for a, d, b in zip(nu, detuning, win))
            modes.append((vec, weight * coeff))
            modes.append((tuple(-x for x in vec), weight * dagger(coeff)))
    return FourierSeries(basis, modes, _op_shape(model, representation))


def build_interaction(model: MsModel, representation: str = "sector") -> PerturbativeSeries:
    """Orders ``1..model.order`` (plus the order-0 carrier if requested)."""
    orders = {}
    first = 0 if model.include_carrier else 1
    for n in range(first, model.order + 1):
        total = FourierSeries.zero(model.basis, _op_shape(model, representation))
        for tone in model.tones:
            total = total + tone_order(model, tone, n, representation)
        orders[n] = canonicalize(total, amp_tol=0.0)
    _check_collisions(model, orders)
    return PerturbativeSeries(orders)


def _check_collisions(model: MsModel, orders: Mapping[int, FourierSeries]) -> None:
    basis = model.basis
    for n, series in orders.items():
        for v in series.vectors():
            if v != basis.zero() and abs(basis.value(v)) < 1e-9:
                raise ConfigurationError(
                    f"order {n} mode {basis.describe(v)} is exactly resonant "
                    f"(window/detuning collision; value {basis.value(v):.2e})"
                )


def carrier_series(model: MsModel, representation: str = "sector") -> FourierSeries:
    total = FourierSeries.zero(model.basis, _op_shape(model, representation))
    for tone in model.tones:
        total = total + tone_order(model, tone, 0, representation)
    return canonicalize(total, amp_tol=0.0)


class ExactHamiltonian:
    """Unexpanded drive Hamiltonian with the truncated-space displacement.

    ``D(alpha(s)) = R(s) exp(i eta (a + a^dag)) R(s)^dag`` with
    ``R = exp(i s a^dag a)``, evaluated as an elementwise phase on a fixed
    matrix. The carrier (order-0) term is subtracted unless requested.
    """

    def __init__(self, model: MsModel, include_carrier: bool = False, representation: str = "sector"):
        self.model = model
        self.include_carrier = include_carrier
        self.representation = representation
        f = model.n_max + 1
        a = ladder(model.n_max)
        self._disp = matrix_exp(1j * model.eta * (a + dagger(a)))
        self._offsets = np.subtract.outer(np.arange(f), np.arange(f)).astype(float)
        self._eye = np.eye(f)
        self._lifts = [_lifter(model, representation, t) for t in model.tones]
        if representation == "sector":
            m = model.sectors.values
            self._spin = [m[:, None, None]] * len(model.tones)
        else:
            self._spin = [j_phi_y_qubit(t.phi_plus) for t in model.tones]
        self._detunings = [model.detuning_value(t) for t in model.tones]
        self.shape = _op_shape(model, representation)

    def fock_part(self, s: float, k: int) -> np.ndarray:
        tone = self.model.tones[k]
        w = window_value(tone.window, self.model.omega or 0.0, s)
        f = 1j * np.exp(1j * (tone.phi_minus - self._detunings[k] * s))
        d = self._disp * np.exp(1j * s * self._offsets)
        op = f * d
        op = op + dagger(op)
        if not self.include_carrier:
            rabi_p = math.exp(-self.model.eta**2 / 2)
            op = op - rabi_p * 2 * np.real(f) * self._eye
        return tone.rabi * w * op

    def __call__(self, s: float) -> np.ndarray:
        total = np.zeros(self.shape, dtype=complex)
        for k in range(len(self.model.tones)):
            fock = self.fock_part(s, k)
            if self.representation == "sector":
                total += self._spin[k] * fock[None]
            else:
                total += np.kron(self._spin[k], fock)
        return total


def carrier_angle(model: MsModel, s) -> np.ndarray:
    """``theta_c(s) = int_0^s c(s') ds'`` where the carrier is ``c(s) J_phi``.

    The carrier commutes with the rest of the Hamiltonian, so the full
    propagator is ``exp(-i theta_c J_phi) U_no_carrier``.
    """
    return _carrier_weighted(model, np.asarray(s, dtype=float))


def _carrier_weighted(model: MsModel, s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(np.asarray(s, dtype=float))
    rabi_scale = math.exp(-model.eta**2 / 2)
    for tone in model.tones:
        delta = model.detuning_value(tone)
        acc = np.zeros_like(out, dtype=complex)
        for h, weight in tone.harmonics():
            om = h * (model.omega or 0.0)
            for sign in (1, -1):
                lam = sign * delta + om
                amp = weight * sign * np.exp(-1j * sign * tone.phi_minus) / 2j
                if abs(lam) < 1e-15:
                    acc = acc + amp * s
                else:
                    acc = acc + amp * (np.exp(1j * lam * s) - 1) / (1j * lam)
        out = out + 2 * rabi_scale * tone.rabi * np.real(acc)
    return out


# --------------------------------------------------------------------------
# closed-form results (single flat first-sideband tone)

def _single_flat(model: MsModel) -> DriveTone:
    if len(model.tones) != 1 or model.tones[0].window != "flat" or model.tones[0].sideband != 1:
        raise ConfigurationError("closed forms need a single flat first-sideband tone")
    return model.tones[0]


@dataclass(frozen=True)
class FirstOrderSolution:
    alpha_ms: complex
    theta: float
    U: np.ndarray


def first_order_alpha_theta(model: MsModel, tau) -> tuple[np.ndarray, np.ndarray]:
    """``alpha_ms(tau) = i Lambda' int_0^tau G`` and the geometric phase
    ``theta(tau) = Lambda'^2 Im int_0^tau (int_0^t G^*) G(t) dt`` with
    ``G(tau) = exp(i eps tau + i phi_-)``, ``eps = delta / eta``.
    """
    tone = _single_flat(model)
    tau = np.asarray(tau, dtype=float)
    rabi_p = math.exp(-model.eta**2 / 2) * tone.rabi
    eps = model.small_detuning(tone) / model.eta
    alpha = rabi_p * np.exp(1j * tone.phi_minus) * (np.exp(1j * eps * tau) - 1) / eps
    theta = rabi_p**2 * (tau / eps - np.sin(eps * tau) / eps**2)
    return alpha, theta


def analytic_first_order(model: MsModel, tau: float) -> FirstOrderSolution:
    """First-order effective propagator ``D(J alpha_ms) exp(i theta J^2)`` (dense)."""
    alpha, theta = first_order_alpha_theta(model, tau)
    alpha, theta = complex(alpha), float(theta)
    sectors = model.sectors
    a = ladder(model.n_max)
    gen = alpha * dagger(a) - np.conj(alpha) * a
    blocks = np.stack([matrix_exp(m * gen) * np.exp(1j * theta * m**2) for m in sectors.values])
    return FirstOrderSolution(alpha_ms=alpha, theta=theta, U=sectors.embed(blocks))


def ideal_gate_time(model: MsModel) -> float:
    """Scaled time where the first-order geometric phase reaches pi/2."""
    from scipy.optimize import brentq

    eta = model.eta
    target = math.pi / 2

    def f(s):
        return float(first_order_alpha_theta(model, eta * s)[1]) - target

    hi = 1.0
    while f(hi) < 0:
        hi *= 1.5
    return brentq(f, 0.0, hi, xtol=1e-13)


def alpha_cr(model: MsModel, s) -> np.ndarray:
    """Counter-rotating displacement ``i eta int^s Lambda'(s') G^*(s') e^{2 i s'} ds'``.

    No integration constant; the first tone is used and its window (if any)
    is expanded into harmonics.
    """
    tone = model.tones[0]
    s = np.asarray(s, dtype=float)
    rabi_p = math.exp(-model.eta**2 / 2) * tone.rabi
    base = 1.0 + model.detuning_value(tone)  # G^* e^{2is} = e^{-i phi_-} e^{i(nu + Delta) s}
    out = np.zeros_like(s, dtype=complex)
    for h, weight in tone.harmonics():
        lam = base + h * (model.omega or 0.0)
        out = out + weight * np.exp(1j * lam * s) / lam
    return model.eta * rabi_p * np.exp(-1j * tone.phi_minus) * out


@dataclass(frozen=True)
class _Ops:
    J: np.ndarray
    a: np.ndarray
    ad: np.ndarray
    n: np.ndarray
    one: np.ndarray


def _dense_ops(model: MsModel) -> _Ops:
    spec = model.spec
    b = build_boson_ops(spec)
    j = lift_qubit(spec, j_phi_y_qubit(model.tones[0].phi_plus))
    return _Ops(J=j, a=b.a, ad=b.a_dag, n=b.n_op, one=np.eye(spec.dim))


def _hc(x: np.ndarray) -> np.ndarray:
    return x + dagger(x)


def analytic_supplement(model: MsModel, kind: str, n: int, s: float) -> np.ndarray:
    """Closed-form ``lam^n H_eff^(n)(s)`` (n = 1..4) or ``lam^n Phi^(n)(s)`` (n = 1..3).

    Dense full-space matrices for a single flat tone, built directly from
    spin and ladder operators; ``nu = 1``.
    """
    tone = _single_flat(model)
    limits = {"h_eff": 4, "phi": 3}
    if kind not in limits:
        raise ValueError(f"kind must be 'h_eff' or 'phi', got {kind!r}")
    if not 1 <= n <= limits[kind]:
        raise ValueError(f"{kind} closed form available for orders 1..{limits[kind]}, got {n}")
    o = _dense_ops(model)
    J, a, ad, num = o.J, o.a, o.ad, o.n
    J2 = J @ J
    eta = model.eta
    L = math.exp(-eta**2 / 2) * tone.rabi
    d = model.small_detuning(tone)
    ph = tone.phi_minus
    G = np.exp(1j * (d * s + ph))
    Gc = np.conj(G)
    e = lambda k: np.exp(1j * k * s)  # noqa: E731

    if kind == "h_eff":
        if n == 1:
            return -eta * L * J @ _hc(ad * G)
        if n == 2:
            return eta**2 * L**2 / (d - 2) * J2
        if n == 3:
            return 0.5 * eta**3 * L * J @ _hc(ad @ ad @ a * G)
        bracket = (
            -2 / (d - 2) * num
            + 4 / ((d - 3) * (d + 1)) * (num + 0.5 * o.one)
            + _hc((5 - 2 * d**2) * G**2 / ((d**2 - 1) * (d**2 - 4)) * ad @ ad)
        )
        return eta**4 * L**2 * J2 @ bracket

    if n == 1:
        return _hc(-1j * eta * L / (d - 2) * Gc * e(2) * J @ ad)
    if n == 2:
        x = (d - 1) * s + ph
        return (
            -2 * eta**2 * L / (d - 1) * np.cos(x) * J @ num
            - _hc(0.5 * eta**2 * L * (G * e(1) / (d + 1) + Gc * e(3) / (d - 3)) * J @ ad @ ad)
            + eta**2 * L**2 / ((d - 1) * (d - 2)) * np.sin(2 * x) * J2
        )
    inner = (
        1j * Gc * e(2) / (2 * (d - 2)) * J @ ad @ ad @ a
        + 1j * (Gc * e(4) / (6 * (d - 4)) - G * e(2) / (6 * (d + 2))) * J @ ad @ ad @ ad
        + L / 2 * (
            (2 * d**2 + d - 7) * G**2 * e(-1) / ((d - 2) * (d**2 - 1) * (2 * d - 1))
            + (2 * d**2 - 5 * d + 1) * Gc**2 * e(3) / ((2 * d - 3) * (d - 3) * (d - 2) * (d - 1))
            + 2 * (d - 7) * e(1) / ((d - 3) * (d**2 - 1))
        ) * J2 @ ad
    )
    return _hc(eta**3 * L * inner)


def ideal_gate(model: MsModel, theta: float = math.pi / 2) -> np.ndarray:
    """Sector blocks of ``exp(i theta J^2) ⊗ 1``."""
    v = model.sectors.values
    return np.exp(1j * theta * v**2)[:, None, None] * np.eye(model.n_max + 1)[None]


def apply_carrier(model: MsModel, s, unitaries: np.ndarray) -> np.ndarray:
    """``exp(-i theta_c(s) J) U(s)`` for sector block stacks sampled at ``s``."""
    theta = carrier_angle(model, s)
    phases = np.exp(-1j * np.multiply.outer(theta, model.sectors.values))
    return phases[..., None, None] * unitaries
