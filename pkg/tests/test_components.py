import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdcheck import rel_err
from podinn import autodiff as ad
from podinn.components import (ChainPotential, ChuaDiode, ComponentError, Constant, CubicResistor, Energy,
                               LinearDamper, LinearResistor, NeuralPotential, NeuralResistor, ObservationMap,
                               PendulumPotential, PlanarSpring, PolySpring, QuadraticStorage, Resistors,
                               SampledSeries, SignedPowerDamper, SumOfSines, TunnelDiodeCubic, energy,
                               evaluate_signals, grad_energy, resist, signal, signal_from_json)


def fd_energy_grad(term, p, u, aux=None, h=1e-5):
    g = np.zeros((u.shape[0], len(term.coords)))
    for j, c in enumerate(term.coords):
        up, dn = u.copy(), u.copy()
        up[:, c] += h
        dn[:, c] -= h
        g[:, j] = (np.asarray(term.energy(p, up, aux)) - np.asarray(term.energy(p, dn, aux))) / (2 * h)
    return g


def _terms():
    rng = np.random.default_rng(0)
    quad = QuadraticStorage([0, 1], ["m1", "m2"], init_log=np.log([2.0, 0.5]))
    neural = NeuralPotential("V", [[0, 1], [2, 3]], hidden=(16, 16))
    aux_pot = NeuralPotential("W", [[0, 1]], hidden=(8,), aux_cols=[0])
    return {
        "quadratic": (quad, quad.init_params(rng), None),
        "neural": (neural, neural.init_params(rng), None),
        "neural_aux": (aux_pot, aux_pot.init_params(rng), rng.normal(size=(100, 1))),
        "poly_spring": (PolySpring(2, 1.5, 0.4), {}, None),
        "pendulum": (PendulumPotential(1, 2.9), {}, None),
        "planar": (PlanarSpring([0, 1], [3.0, 0.5], 2.8, 1.2, 0.3), {}, None),
        "chain": (ChainPotential([0, 1, 2], [1.0, 0.5, 2.0], [0.1, 0.0, 0.3]), {}, None),
        "chain_aux": (ChainPotential([1, 3], [1.0, 0.7], [0.2, 0.2], aux_col=0), {}, rng.normal(size=(100, 1))),
    }


@pytest.mark.parametrize("name", sorted(_terms()))
def test_grad_energy_matches_fd(name):
    term, p, aux = _terms()[name]
    u = np.random.default_rng(1).uniform(-1.0, 1.0, size=(100, 4))
    g = np.asarray(grad_energy(term, p, u, aux))
    assert g.shape == (100, len(term.coords))
    assert rel_err(g, fd_energy_grad(term, p, u, aux)) < 1e-5


def test_quadratic_storage_example():
    term = QuadraticStorage(0, "m", init_log=np.log(2.0))
    p = term.init_params(None)
    u = np.array([[3.0]])
    assert np.allclose(energy(term, p, u), 9 / 4, rtol=1e-15)
    assert np.allclose(grad_energy(term, p, u), 1.5, rtol=1e-15)


def test_tank_energy_example():
    rho, g, area = 10.0, 1.0, 5.0
    term = QuadraticStorage(0, "tank", init_log=np.log(area / (rho * g)))
    assert np.allclose(energy(term, term.init_params(None), np.array([[5.0]])), 25.0, rtol=1e-14)


def test_pendulum_potential_example():
    term = PendulumPotential(0, 2.0 * 1.0 * 1.5)
    assert energy(term, {}, np.zeros((1, 1)))[0] == -3.0


def test_composite_energy_is_additive_and_gradients_concatenate():
    rng = np.random.default_rng(2)
    a = QuadraticStorage([2], ["m"], init_log=[0.3])
    b = PolySpring(0, 2.0, 0.5)
    c = PendulumPotential(1, 1.1)
    total = Energy([a, b, c], 3)
    p = total.init_params(rng)
    u = rng.normal(size=(7, 3))
    parts = sum(np.asarray(t.energy(p, u)) for t in (a, b, c))
    assert np.allclose(total.energy(p, u), parts, rtol=1e-14)
    g = np.asarray(total.grad(p, u))
    assert np.allclose(g[:, 0], b.grad(p, u)[:, 0])
    assert np.allclose(g[:, 1], c.grad(p, u)[:, 0])
    assert np.allclose(g[:, 2], np.asarray(a.grad(p, u))[:, 0])


def test_energy_coverage_errors():
    with pytest.raises(ComponentError):
        Energy([PolySpring(0, 1.0)], 2)
    with pytest.raises(ComponentError):
        Energy([PolySpring(0, 1.0), PolySpring(0, 1.0), PolySpring(1, 1.0)], 2)
    with pytest.raises(ComponentError):
        QuadraticStorage([0, 1], ["m"])
    pot = NeuralPotential("W", [[0]], hidden=(4,), aux_cols=[0])
    with pytest.raises(ComponentError):
        pot.energy(pot.init_params(np.random.default_rng(0)), np.zeros((2, 1)))


@given(st.floats(-20.0, 20.0), st.lists(st.floats(-5.0, 5.0), min_size=1, max_size=40))
def test_positive_parameters_stay_positive(log0, steps):
    term = QuadraticStorage(0, "m", init_log=[log0])
    p = term.init_params(None)
    for s in steps:
        p = {"m": p["m"] + s}
        inv = ad.value(term._inv_theta(p))
        assert np.all(inv > 0) and np.all(np.isfinite(inv))


def test_resistor_examples():
    chua = ChuaDiode(0, -8.0 / 7.0, -5.0 / 7.0)
    assert resist(chua, 0.0) == 0.0
    assert np.isclose(resist(chua, 2.0), -13.0 / 7.0, rtol=1e-15)
    # passive convention: the effort has the sign of the flow
    assert np.isclose(resist(SignedPowerDamper(0, 0.1), -8.0), -0.2, rtol=1e-14)
    assert resist(LinearDamper(0, 0.5), 2.0) == 1.0
    assert resist(LinearResistor(0, 0.8, offset=-0.7), 1.0) == pytest.approx(0.1)
    assert resist(CubicResistor(0, 2.0), -1.5) == pytest.approx(-6.75)
    assert resist(TunnelDiodeCubic(0), 3.0) == pytest.approx(6.0)


@given(st.floats(-50.0, 50.0))
def test_dissipators_are_passive_and_odd(f):
    for r in (SignedPowerDamper(0, 0.3), LinearDamper(0, 0.5), CubicResistor(0, 1.2)):
        e = resist(r, f)
        assert e * f >= 0
        assert resist(r, -f) == pytest.approx(-e, rel=1e-12, abs=1e-300)


def test_resistors_dispatch_ports():
    rng = np.random.default_rng(3)
    net = NeuralResistor("R", [0, 2], hidden=(8,))
    rs = Resistors([net, LinearDamper(1, 0.5)], 3)
    p = rs.init_params(rng)
    f = rng.normal(size=(5, 3))
    e = np.asarray(rs(p, f))
    assert np.allclose(e[:, 1], 0.5 * f[:, 1])
    solo = np.asarray(net(p, f[:, [0, 2]]))
    assert np.allclose(e[:, [0, 2]], solo)
    with pytest.raises(ComponentError):
        Resistors([LinearDamper(0, 1.0)], 2)


def test_neural_resistor_columns_are_independent():
    rng = np.random.default_rng(4)
    net = NeuralResistor("R", [0, 1], hidden=(8, 8))
    p = net.init_params(rng)
    f = rng.normal(size=(6, 2))
    g = f.copy()
    g[:, 1] += 1.0
    assert np.allclose(np.asarray(net(p, f))[:, 0], np.asarray(net(p, g))[:, 0])


def test_signal_examples():
    assert signal(SumOfSines([(1.0, 2.0, 0.0), (0.5, 3.0, 0.0)]), 0.0) == 0.0
    assert signal(SumOfSines([(1.0, np.pi, np.pi / 2)]), 0.0) == 1.0
    assert np.all(signal(Constant(0.5), np.array([0.0, 3.0, 1e6])) == 0.5)
    s = SumOfSines([(0.3, 1.7, 0.4)], derivative=True)
    t = 0.8
    assert s(t) == pytest.approx(0.3 * 1.7 * np.cos(1.7 * t + 0.4))


def test_sampled_series():
    s = SampledSeries([0.0, 1.0, 3.0], [0.0, 2.0, -2.0])
    assert s(0.5) == 1.0 and s(2.0) == 0.0
    with pytest.raises(ComponentError):
        s(3.5)
    with pytest.raises(ComponentError):
        SampledSeries([0.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(ComponentError):
        SampledSeries([0.0, 1.0], [0.0])


def test_signal_json_roundtrip_and_stack():
    sigs = [SumOfSines([(0.2, 0.5, 1.0)]), Constant(-1.0), SampledSeries([0.0, 2.0], [1.0, 3.0])]
    back = [signal_from_json(s.to_json()) for s in sigs]
    t = np.linspace(0.0, 2.0, 7)
    assert np.array_equal(evaluate_signals(sigs, t), evaluate_signals(back, t))
    assert evaluate_signals(sigs, t).shape == (7, 3)
    assert evaluate_signals([], t).shape == (7, 0)
    with pytest.raises(ComponentError):
        signal_from_json({"kind": "chirp"})


def test_observation_map_examples():
    om = ObservationMap(2, {1: "m"})
    p = {"m": np.array([np.log(2.0)])}
    u = np.asarray(om.to_state(p, np.array([[5.0, 3.0]])))
    assert u[0, 0] == 5.0 and u[0, 1] == pytest.approx(6.0, rel=1e-15)
    with pytest.raises(ComponentError):
        om.to_state(p, np.zeros((1, 3)))
    with pytest.raises(ComponentError):
        om.to_state({"m": np.array([-np.inf])}, np.ones((1, 2)))


@given(st.floats(-3.0, 3.0), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_observation_roundtrip(logm, x):
    om = ObservationMap(3, {0: "a", 2: "b"})
    p = {"a": np.array([logm]), "b": np.array([-logm])}
    obs = np.array([x])
    back = np.asarray(om.from_state(p, om.to_state(p, obs)))
    assert np.allclose(back, obs, rtol=4e-16, atol=0)
