import math
from fractions import Fraction

import numpy as np
import pytest

from qatgate import msgate, propagate, qat
from qatgate.fourier import BaseFrequencySet, FourierSeries, is_slow


@pytest.fixture(scope="module")
def flat_expansion():
    m = msgate.fig2_scenario(n_max=24)
    return m, qat.run(msgate.build_interaction(m), 4, cutoff=0.5, rule="base")


def low_fock(model, drop=8):
    f = model.n_max + 1
    return np.concatenate([np.arange(k * f, k * f + f - drop) for k in range(4)])


def test_bernoulli_numbers():
    assert [qat.bernoulli(k) for k in range(7)] == [
        1, Fraction(-1, 2), Fraction(1, 6), 0, Fraction(-1, 30), 0, Fraction(1, 42)]
    with pytest.raises(ValueError):
        qat.bernoulli(-1)


@pytest.mark.parametrize("kind,order", [("h_eff", n) for n in range(1, 5)] + [("phi", n) for n in range(1, 4)])
def test_flat_orders_match_closed_forms(flat_expansion, kind, order):
    m, ex = flat_expansion
    keep = low_fock(m)
    table = ex.h_eff if kind == "h_eff" else ex.phi
    rng = np.random.default_rng(order)
    for s in rng.uniform(0, 60, size=4):
        engine = m.eta**order * m.sectors.embed(table[order].evaluate(s))
        oracle = msgate.analytic_supplement(m, kind, order, s)
        a, b = engine[np.ix_(keep, keep)], oracle[np.ix_(keep, keep)]
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10


def test_first_order_phase_is_counter_rotating_displacement(flat_expansion):
    # lam Phi^(1) = J (i alpha_cr a^dag + h.c.), no factor 1/2
    m, ex = flat_expansion
    a = msgate.ladder(m.n_max)
    for s in (0.3, 7.1, 41.0):
        al = complex(msgate.alpha_cr(m, s))
        gen = 1j * al * a.conj().T
        gen = gen + gen.conj().T
        expected = m.sectors.values[:, None, None] * gen[None]
        assert np.allclose(m.eta * ex.phi[1].evaluate(s), expected, atol=1e-13)


def test_second_order_shift_sign(flat_expansion):
    # lam^2 H_eff^(2) = -J^2 Im(alpha_cr^* d alpha_cr / ds)
    m, ex = flat_expansion
    s, h = 3.3, 1e-6
    al = complex(msgate.alpha_cr(m, s))
    dal = complex((msgate.alpha_cr(m, s + h) - msgate.alpha_cr(m, s - h)) / (2 * h))
    coeff = -np.imag(np.conj(al) * dal)
    expected = coeff * m.sectors.spin_power(2, m.n_max + 1)
    k = m.n_max - 4  # the top Fock levels carry truncation-edge terms
    assert np.allclose((m.eta**2 * ex.h_eff[2].evaluate(s))[:, :k, :k], expected[:, :k, :k], atol=1e-9)
    assert coeff < 0


def test_alpha_cr_amplitude():
    m = msgate.fig2_scenario(n_max=10)
    lp = math.exp(-m.eta**2 / 2)
    amp = np.abs(msgate.alpha_cr(m, np.linspace(0, 30, 7)))
    assert np.allclose(amp, m.eta * lp / abs(m.small_detuning() - 2))


def test_expansion_invariants(flat_expansion):
    _, ex = flat_expansion
    basis = ex.basis
    for n in range(1, 5):
        assert all(is_slow(basis, v, ex.cutoff, ex.rule) for v in ex.h_eff[n].vectors())
        assert all(not is_slow(basis, v, ex.cutoff, ex.rule) for v in ex.phi[n].vectors())
        assert ex.metadata["orders"][str(n)]["homological_residual"] < 1e-10


def test_missing_orders_raise():
    m = msgate.fig2_scenario(n_max=6)
    h = msgate.build_interaction(m)
    short = qat.PerturbativeSeries({1: h[1]})
    with pytest.raises(qat.QatError):
        qat.run(short, 2)
    with pytest.raises(qat.QatError):
        qat.auxiliary_hamiltonian(3, h, {}, {})


def test_truncated_and_serialization(tmp_path, flat_expansion):
    _, ex = flat_expansion
    t2 = ex.truncated(2)
    assert t2.order == 2 and set(t2.h_eff) == {1, 2}
    with pytest.raises(ValueError):
        ex.truncated(5)
    for name in ("ex.json", "ex.npz"):
        path = tmp_path / name
        t2.save(path)
        back = qat.QatExpansion.load(path)
        assert back.order == 2 and back.rule == t2.rule and back.cutoff == t2.cutoff
        for n in (1, 2):
            assert (back.h_eff[n] - t2.h_eff[n]).max_norm() == 0
            assert (back.phi[n] - t2.phi[n]).max_norm() == 0


def test_phi_total_excludes_last_order(flat_expansion):
    _, ex = flat_expansion
    lam = 0.1
    total = ex.truncated(3).phi_total(lam)
    expected = lam * ex.phi[1] + lam**2 * ex.phi[2]
    assert (total - expected).max_norm() < 1e-15


def test_generic_two_level_convergence():
    # Fast drive plus slow detuning on a qubit; error shrinks with the order.
    basis = BaseFrequencySet(("nu", "w"), (1.0, 0.2))
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sz = np.diag([1.0, -1.0]).astype(complex)
    h1 = FourierSeries(basis, [((1, 0), 0.5 * sx), ((-1, 0), 0.5 * sx), ((0, 0), 0.3 * sz)])
    h2 = FourierSeries(basis, [((0, 1), 0.25j * sx), ((0, -1), -0.25j * sx)])
    zero = FourierSeries.zero(basis, (2, 2))
    h = qat.PerturbativeSeries({1: h1, 2: h2, 3: zero, 4: zero})
    ex = qat.run(h, 4, cutoff=0.5, rule="value")
    lam = 0.15
    grid = np.array([0.0, 25.0])
    ref = propagate.integrate_schrodinger(h.weighted(lam), grid, 1e-12)["reference"][-1]
    errs = []
    for n in range(1, 5):
        u = propagate.assemble_qat(ex.truncated(n), lam, grid, 1e-12)["qat"][-1]
        errs.append(np.linalg.norm(u - ref, 2))
    assert errs[0] > errs[1] > errs[3]
    assert errs[3] < 1e-3


def test_auxiliary_first_order_is_hamiltonian(flat_expansion):
    m, ex = flat_expansion
    h = msgate.build_interaction(m)
    aux = qat.auxiliary_hamiltonian(1, h, {}, {})
    assert (aux - h[1]).max_norm() < 1e-14
    resid = qat.homological_residual(ex.phi[1], ex.h_eff[1], aux, np.linspace(-5, 5, 4))
    assert resid < 1e-12
