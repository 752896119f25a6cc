import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qatgate import fidelity as fid
from qatgate import propagate
from qatgate.hilbert import SpinSectors
from conftest import random_hermitian, random_unitary

SECTORS = SpinSectors.for_phi(math.pi / 4)


def test_stabilizer_states_form_a_3_design():
    st_ = fid.stabilizer_states()
    assert st_.shape == (60, 4)
    assert np.allclose(np.linalg.norm(st_, axis=1), 1)
    overlaps = np.abs(np.conj(st_) @ st_.T) ** 2
    assert np.all(overlaps[~np.eye(60, dtype=bool)] < 1 - 1e-9)  # distinct rays
    d = 4
    assert np.mean(overlaps**2) == pytest.approx(2 / (d * (d + 1)))
    assert np.mean(overlaps**3) == pytest.approx(6 / (d * (d + 1) * (d + 2)))


def test_pauli_products_are_not_a_2_design():
    p = fid.pauli_product_states()
    assert p.shape == (36, 4)
    overlaps = np.abs(np.conj(p) @ p.T) ** 2
    assert np.mean(overlaps**2) != pytest.approx(0.1, abs=1e-3)


@given(st.integers(0, 1000))
def test_design_average_equals_haar_closed_form(seed):
    rng = np.random.default_rng(seed)
    u, v = random_unitary(rng, 4), random_unitary(rng, 4)
    m = np.array([1.0 + 0j])
    got = fid.avg_process_fidelity(u, v, m, check=False)
    assert got == pytest.approx(fid.haar_closed_form(u, v), abs=1e-12)


def test_haar_closed_form_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    u, v = random_unitary(rng, 4), random_unitary(rng, 4)
    psi = rng.normal(size=(200_000, 4)) + 1j * rng.normal(size=(200_000, 4))
    psi /= np.linalg.norm(psi, axis=1, keepdims=True)
    w = np.conj(u).T @ v
    mc = np.mean(np.abs(np.einsum("ka,ab,kb->k", np.conj(psi), w, psi)) ** 2)
    assert mc == pytest.approx(fid.haar_closed_form(u, v), abs=1e-3)
    assert fid.avg_process_fidelity(u, v, np.array([1.0 + 0j])) == pytest.approx(mc, abs=1e-3)


def test_process_fidelity_dense_and_sector_agree(rng):
    f = 6
    blocks_u = np.stack([random_unitary(rng, f) for _ in range(3)])
    blocks_v = np.stack([random_unitary(rng, f) for _ in range(3)])
    m = np.array([0.6, 0.48j, 0.64, 0, 0, 0])
    a = fid.avg_process_fidelity(blocks_u, blocks_v, m, SECTORS)
    b = fid.avg_process_fidelity(SECTORS.embed(blocks_u), SECTORS.embed(blocks_v), m)
    assert a == pytest.approx(b, abs=1e-12)
    assert fid.avg_process_fidelity(blocks_u, blocks_u, m, SECTORS) == pytest.approx(1.0)
    batched = fid.avg_process_fidelity(np.stack([blocks_u] * 2), np.stack([blocks_v] * 2), m, SECTORS)
    assert batched.shape == (2,) and np.allclose(batched, a)


def test_process_fidelity_input_checks(rng):
    u = random_unitary(rng, 4)
    with pytest.raises(ValueError):
        fid.avg_process_fidelity(u, u[:2, :2], np.array([1.0]))
    with pytest.raises(ValueError):
        fid.avg_process_fidelity(u, 2 * u, np.array([1.0]))
    with pytest.raises(ValueError):
        fid.avg_process_fidelity(u, u, np.array([2.0]))


def test_bell_population():
    f = 3
    motion = np.zeros(f)
    motion[0] = 1
    ee, gg = np.eye(4)[0], np.eye(4)[3]
    assert fid.bell_population(np.kron(gg, motion)) == pytest.approx(0.5)
    assert fid.bell_population(np.kron(fid.PHI_PLUS, motion)) == pytest.approx(1.0)
    minus = (ee - gg) / math.sqrt(2)
    assert fid.bell_population(np.kron(minus, motion)) == pytest.approx(0.0)
    batch = np.stack([np.kron(gg, motion), np.kron(fid.PHI_PLUS, motion)])
    assert np.allclose(fid.bell_population(batch), [0.5, 1.0])
    # entangled with motion: reduced-state population
    mixed = (np.kron(ee, np.eye(f)[0]) + np.kron(gg, np.eye(f)[1])) / math.sqrt(2)
    assert fid.bell_population(mixed) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fid.bell_population(2 * np.kron(gg, motion))


def test_evolve_sector_matches_dense(rng):
    f = 5
    blocks = np.stack([random_unitary(rng, f) for _ in range(3)])
    psi = rng.normal(size=4 * f) + 1j * rng.normal(size=4 * f)
    assert np.allclose(fid.evolve(blocks, psi, SECTORS), SECTORS.embed(blocks) @ psi)
    stack = np.stack([blocks, blocks])
    assert fid.evolve(stack, psi, SECTORS).shape == (2, 4 * f)


@pytest.mark.parametrize("value,unc,text", [
    (0.99983, 0.00047, "0.9998(5)"),
    (0.9998, 0.0005, "0.9998(5)"),
    (0.5, 0.093, "0.5(1)"),
    (0.123456, 0.0, "0.123456"),
])
def test_format_uncertainty(value, unc, text):
    assert fid.format_uncertainty(value, unc) == text


def test_deviation_from_identity(rng):
    f = 6
    m = np.zeros(f, complex)
    m[0] = 1
    eye = np.broadcast_to(np.eye(f), (3, f, f))
    assert fid.deviation_from_identity(eye, m, SECTORS) == pytest.approx(0.0)
    blocks = np.stack([random_unitary(rng, f) for _ in range(3)])
    a = fid.deviation_from_identity(blocks, m, SECTORS)
    b = fid.deviation_from_identity(SECTORS.embed(blocks), m)
    assert a == pytest.approx(b, abs=1e-12)
    # bounded by the operator norm of U - 1
    assert a <= np.linalg.norm(SECTORS.embed(blocks) - np.eye(4 * f), 2) + 1e-12


def test_gate_fidelity_from_traces(rng):
    f = 4
    h = np.stack([random_hermitian(rng, f) for _ in range(3)])
    grid = np.linspace(0, 1, 3)
    ref = propagate.integrate_schrodinger(lambda s: h, grid, 1e-12)
    qat = propagate.PropagatorTrace(grid, {"qat": ref["reference"]})
    psi = np.kron(np.eye(4)[3], np.eye(f)[0])
    g = fid.gate_fidelity(ref, qat, psi, 1.0, SECTORS)
    assert g.approximation == pytest.approx(1.0)
    expected = fid.bell_population(fid.evolve(ref["reference"][-1], psi, SECTORS))
    assert g.value == pytest.approx(expected)
    g2 = fid.gate_fidelity(ref, qat, psi, 1.0, SECTORS, alternatives=[("same", ref, psi)])
    assert g2.uncertainty == 0.0 and g2.drifts == {"same": 0.0}
    assert str(g2) == f"{g2.value:.6f}"


def test_fidelity_report_columns():
    s = np.linspace(0, 1, 3)
    rep = fid.FidelityReport(s=s, bell={"reference": np.array([0.5, 0.7, 1.0])},
                             f_avg={"4": np.ones(3)})
    rep.check()
    assert set(rep.columns()) == {"s", "bell_reference", "f_avg_4"}
    bad = fid.FidelityReport(s=s, bell={"x": np.array([0.0, 1.2, 0.1])}, f_avg={})
    with pytest.raises(ValueError):
        bad.check()
