import math

import numpy as np
import pytest

from qatgate import msgate
from qatgate.hilbert import commutator, unitarity_error


def test_sin4_harmonics_reproduce_window():
    s = np.linspace(0, 40, 101)
    om = 0.3
    recon = sum(w * np.cos(h * om * s) for h, w in msgate.SIN4_HARMONICS)
    assert np.allclose(recon, msgate.window_value("sin4", om, s))
    # peak value and flat start: window and first three derivatives vanish at 0
    assert math.isclose(sum(w * (-1) ** h for h, w in msgate.SIN4_HARMONICS), 1.0)
    for k in range(4):
        deriv = sum(w * (h * om) ** k * np.real(1j**k) for h, w in msgate.SIN4_HARMONICS)
        assert abs(deriv) < 1e-15


def test_tone_and_model_validation():
    with pytest.raises(msgate.ConfigurationError):
        msgate.DriveTone(rabi=0.0, detuning={"nu": 1})
    with pytest.raises(msgate.ConfigurationError):
        msgate.DriveTone(rabi=1.0, detuning={"nu": 1}, window="gauss")
    tone = msgate.DriveTone(rabi=1.0, detuning={"nu": 1}, phi_minus=7.0)
    assert -math.pi <= tone.phi_minus <= math.pi
    with pytest.raises(msgate.ConfigurationError):
        msgate.MsModel(eta=1.2, tones=(tone,), bases={"nu": 1.0})
    with pytest.raises(msgate.ConfigurationError):
        msgate.MsModel(eta=0.1, tones=(tone,), bases={"nu": 2.0})
    windowed = msgate.DriveTone(rabi=1.0, detuning={"nu": 1}, window="sin4")
    with pytest.raises(msgate.ConfigurationError):
        msgate.MsModel(eta=0.1, tones=(windowed,), bases={"nu": 1.0})
    with pytest.raises(KeyError):
        msgate.MsModel(eta=0.1, tones=(msgate.DriveTone(1.0, {"mu": 1}),), bases={"nu": 1.0})


def test_exact_resonance_is_rejected():
    # nu - mu is a nonzero frequency vector with zero value
    tone = msgate.DriveTone(rabi=1.0, detuning={"mu": 1})
    model = msgate.MsModel(eta=0.1, tones=(tone,), bases={"nu": 1.0, "mu": 1.0}, order=2)
    with pytest.raises(msgate.ConfigurationError):
        msgate.build_interaction(model)


def test_scenario_parameters():
    f2 = msgate.fig2_scenario()
    assert f2.small_detuning() == pytest.approx(0.383)
    sh = msgate.shaped_scenario()
    assert sh.omega == pytest.approx(0.107 / 3)
    assert sh.gate_time == pytest.approx(2 * math.pi * 3 / 0.107)
    t1, t2 = sh.tones
    assert t2.rabi / t1.rabi == pytest.approx(0.7885)
    assert sh.small_detuning(t1) == pytest.approx(3 * 0.107)
    assert sh.small_detuning(t2) == pytest.approx(0.107)
    flipped = msgate.shaped_scenario(second_sign=1)
    assert flipped.small_detuning(flipped.tones[1]) == pytest.approx(-0.107)
    with pytest.raises(msgate.ConfigurationError):
        msgate.shaped_scenario(second_sign=0)


@pytest.mark.parametrize("scenario", ["flat", "shaped"])
def test_expansion_sums_to_exact_hamiltonian(scenario, small_flat, small_shaped):
    model = (small_flat if scenario == "flat" else small_shaped).with_(order=12)
    h = msgate.build_interaction(model)
    exact = msgate.ExactHamiltonian(model)
    k = model.n_max - 6
    for s in (0.0, 3.7, 55.1):
        series = h.weighted(model.eta).evaluate(s)
        assert np.allclose(series[:, :k, :k], exact(s)[:, :k, :k], atol=1e-12)


def test_sector_and_dense_representations_agree(small_flat):
    model = small_flat.with_(order=2)
    sec = msgate.build_interaction(model, "sector")
    dense = msgate.build_interaction(model, "dense")
    for n in (1, 2):
        for s in (0.4, 9.0):
            assert np.allclose(model.sectors.embed(sec[n].evaluate(s)), dense[n].evaluate(s), atol=1e-13)
    ex_s = msgate.ExactHamiltonian(model)
    ex_d = msgate.ExactHamiltonian(model, representation="dense")
    assert np.allclose(model.sectors.embed(ex_s(2.2)), ex_d(2.2), atol=1e-13)


def test_interaction_is_hermitian(small_shaped):
    h = msgate.build_interaction(small_shaped)
    for n, series in h.orders.items():
        x = series.evaluate(13.0)
        assert np.allclose(x, np.conj(np.swapaxes(x, -1, -2)))


def test_carrier_commutes_and_angle_integrates_coefficient(small_shaped):
    model = small_shaped
    carrier = msgate.carrier_series(model)
    exact = msgate.ExactHamiltonian(model)
    for s in (1.0, 20.0, 90.0):
        assert np.abs(commutator(carrier.evaluate(s), exact(s))).max() < 1e-12
    # carrier = c(s) J: the J = 1 block is c(s) times the identity
    c = lambda s: np.real(carrier.evaluate(s)[list(model.sectors.values).index(1.0), 0, 0])  # noqa: E731
    s, h = 17.0, 1e-5
    dtheta = (msgate.carrier_angle(model, s + h) - msgate.carrier_angle(model, s - h)) / (2 * h)
    assert dtheta == pytest.approx(c(s), abs=1e-8)
    assert msgate.carrier_angle(model, 0.0) == 0.0


def test_carrier_full_hamiltonian():
    model = msgate.fig2_scenario(n_max=10)
    with_c = msgate.ExactHamiltonian(model, include_carrier=True)
    without = msgate.ExactHamiltonian(model)
    carrier = msgate.carrier_series(model)
    assert np.allclose(with_c(4.0) - without(4.0), carrier.evaluate(4.0), atol=1e-13)


def test_first_order_closed_form(small_flat):
    m = small_flat
    s_g = msgate.ideal_gate_time(m)
    alpha, theta = msgate.first_order_alpha_theta(m, m.eta * s_g)
    assert float(theta) == pytest.approx(math.pi / 2, abs=1e-10)
    # a flat loop closes after 2 pi / eps in tau
    eps = m.small_detuning() / m.eta
    assert abs(msgate.first_order_alpha_theta(m, 2 * math.pi / eps)[0]) < 1e-12
    sol = msgate.analytic_first_order(m, 1.3)
    assert unitarity_error(sol.U) < 1e-10


def test_closed_forms_need_single_flat_tone(small_shaped):
    with pytest.raises(msgate.ConfigurationError):
        msgate.first_order_alpha_theta(small_shaped, 1.0)
    with pytest.raises(ValueError):
        msgate.analytic_supplement(msgate.fig2_scenario(n_max=4), "phi", 4, 0.0)
    with pytest.raises(ValueError):
        msgate.analytic_supplement(msgate.fig2_scenario(n_max=4), "psi", 1, 0.0)


def test_ideal_gate_and_carrier_application(small_flat):
    m = small_flat
    g = msgate.ideal_gate(m)
    assert np.allclose(g[list(m.sectors.values).index(0.0)], np.eye(m.n_max + 1))
    assert np.allclose(g[list(m.sectors.values).index(1.0)], 1j * np.eye(m.n_max + 1))
    s = np.array([0.0, 5.0])
    u = np.broadcast_to(np.eye(m.n_max + 1), (2, 3, m.n_max + 1, m.n_max + 1))
    out = msgate.apply_carrier(m, s, u)
    assert out.shape == u.shape
    assert np.allclose(out[0], u[0])
    theta = msgate.carrier_angle(m, 5.0)
    assert np.allclose(out[1, :, 0, 0], np.exp(-1j * theta * m.sectors.values))


def test_describe_round_trips_parameters(small_shaped):
    d = small_shaped.describe()
    assert d["eta"] == 0.1 and len(d["tones"]) == 2
    assert d["tones"][1]["window"] == "sin4"
