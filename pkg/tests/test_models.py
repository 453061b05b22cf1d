import numpy as np
import pytest

from fdcheck import fd_grad, rel_err
from podinn import autodiff as ad
from podinn import models
from podinn.components import Energy, LinearDamper, NeuralPotential, ObservationMap, QuadraticStorage, Resistors
from podinn.geometry import Bivector, LayoutError, PortLayout, pairing, wedge_matrix
from podinn.models import BIVECTOR_PARAM, PoDiNNModel, build_node, build_podinn, ground_truth_model, rollout
from podinn.systems import generate, get_system


def oscillator(damper=None):
    """Unit mass on a unit spring, optionally with a linear damper on the mass."""
    res = [("R", "velocity")] if damper is not None else []
    lay = PortLayout([("q", "mech-potential"), ("p", "mech-kinetic")], res)
    wedges = [(1.0, 1, 0)]
    if damper is not None:
        wedges.append((1.0, 1, 2))
    biv = Bivector.from_matrix(wedge_matrix(lay.n, wedges))
    energy = Energy([QuadraticStorage([0, 1], ["c", "m"])], 2)
    maps = [LinearDamper(0, damper)] if damper is not None else []
    model = PoDiNNModel(lay, biv, energy, Resistors(maps, lay.n_r), ObservationMap(2, {1: "m"}))
    return model, model.init_params(np.random.default_rng(0))


def randomised(model, params, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    p = dict(params)
    p[BIVECTOR_PARAM] = rng.uniform(-scale, scale, size=params[BIVECTOR_PARAM].shape)
    return p


def test_conservative_oscillator_field():
    model, p = oscillator()
    assert np.allclose(model.field(p, np.array([[1.0, 0.0]])), [[0.0, -1.0]], rtol=0, atol=1e-15)


def test_damped_oscillator_field():
    model, p = oscillator(damper=0.5)
    assert np.allclose(model.field(p, np.array([[0.0, 2.0]])), [[2.0, -1.0]], rtol=0, atol=1e-15)
    lhs, rhs = model.power_balance(p, np.array([[0.0, 2.0]]))
    e, f = model.ports(p, np.array([[0.0, 2.0]]))
    # damper-only dissipation: dH/dt = -e^R f^R = -d v^2
    assert lhs[0] == pytest.approx(-2.0) and rhs[0] == pytest.approx(-(e[0, 2] * f[0, 2]))


def test_zero_efforts_give_zero_rate():
    model, p = oscillator(damper=0.5)
    assert np.all(model.field(p, np.zeros((3, 2))) == 0.0)


def test_resistive_coupling_rejected():
    lay = PortLayout([("q", "mech-potential")], [("R1", "velocity"), ("R2", "velocity")])
    biv = Bivector(3, [(1, 2)])
    with pytest.raises(LayoutError):
        PoDiNNModel(lay, biv, Energy([QuadraticStorage([0], ["c"])], 1),
                    Resistors([LinearDamper(0, 1.0), LinearDamper(1, 1.0)], 2), ObservationMap(1))


@pytest.mark.parametrize("sid", ["a", "b", "d", "e", "g", "toy2"])
def test_pairing_vanishes_at_random_init(sid):
    model, p = build_podinn(sid, hidden=(16, 16), seed=3)
    p = randomised(model, p, 5)
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(20, model.n_obs))
    ext = rng.normal(size=(20, get_system(sid).n_ext))
    e, f = model.ports(p, obs, ext)
    bound = np.linalg.norm(e, axis=1) * np.linalg.norm(f, axis=1)
    assert np.all(np.abs(pairing(e, f)) <= 1e-12 * bound + 1e-300)


@pytest.mark.parametrize("sid", ["a", "b", "f", "g"])
def test_power_balance_identity(sid):
    model, p = build_podinn(sid, hidden=(16, 16), seed=1)
    p = randomised(model, p, 2)
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(1000, model.n_obs))
    ext = rng.normal(size=(1000, len(model.effort_cols) + len(model.aux_cols)))
    lhs, rhs = model.power_balance(p, obs, ext)
    e, f = model.ports(p, obs, ext)
    scale = np.sum(np.abs(e * f), axis=-1) + 1e-300
    assert np.max(np.abs(lhs - rhs) / scale) < 1e-10


def test_power_balance_without_dissipation_or_inputs():
    model, p = oscillator()
    lhs, rhs = model.power_balance(p, np.random.default_rng(0).normal(size=(10, 2)))
    assert np.allclose(lhs, 0.0, atol=1e-15) and np.all(rhs == 0.0)


def test_ground_truth_model_reproduces_generator():
    ds = generate("a", 2, 200, seed=11)
    model, p = ground_truth_model("a")
    pred = rollout(model, p, ds.obs[:, 0], ds.times, [ds.signals(i) for i in range(2)], rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(pred.transpose(1, 0, 2) - ds.obs)) < 1e-6


@pytest.mark.parametrize("sid", ["b", "d", "e", "f", "g", "toy2"])
def test_ground_truth_field_matches_generator_rates(sid):
    ds = generate(sid, 1, 20, seed=2)
    model, p = ground_truth_model(sid)
    # central differences of densely sampled truth approximate the observation rate
    fine = generate(sid, 1, 2, dt=1e-4, seed=2)
    rate_fd = (fine.obs[0, 2] - fine.obs[0, 0]) / 2e-4
    rate = model.field(p, fine.obs[0, 1:2], fine.ext[0, 1:2])[0]
    assert np.allclose(rate, rate_fd, rtol=1e-5, atol=1e-6), sid
    assert ds.obs.shape[-1] == model.n_obs


def test_conservative_rollout_energy_drift():
    lay = PortLayout([("q", "mech-potential"), ("p", "mech-kinetic")])
    biv = Bivector.from_matrix(wedge_matrix(2, [(1.0, 1, 0)]))
    energy = Energy([NeuralPotential("U", [[0]], hidden=(8, 8)), QuadraticStorage([1], ["m"])], 2)
    model = PoDiNNModel(lay, biv, energy, Resistors([], 0), ObservationMap(2, {1: "m"}))
    p = model.init_params(np.random.default_rng(0))
    times = np.arange(1001) * 0.1
    traj = rollout(model, p, np.array([0.4, 0.3]), times, rtol=1e-10, atol=1e-12)
    h = model.hamiltonian(p, traj)
    assert np.max(np.abs(h - h[0])) / np.max(np.abs(h)) < 1e-6


def test_field_parameter_gradients_vs_fd():
    model, p = build_podinn("toy2", hidden=(8, 8), seed=0)
    p = randomised(model, p, 1)
    rng = np.random.default_rng(2)
    obs = rng.normal(size=(4, model.n_obs))

    def loss(q):
        return ad.sum(ad.square(model.field(q, obs)))

    tape = ad.Tape()
    leaves = tape.leaves(p)
    grads = ad.backward(tape, loss(leaves), leaves)
    for k, v in p.items():
        fd = fd_grad(lambda z, k=k: loss({**p, k: z}), v, h=1e-6)
        assert rel_err(grads[k], fd, floor=1e-6) < 1e-4, k


def test_node_shape_contract():
    model, p = build_node("a", hidden=(8, 8))
    ds = generate("a", 2, 5, seed=0)
    assert model.field(p, ds.obs[:, 0], ds.ext[:, 0]).shape == (2, 6)
    out = rollout(model, p, ds.obs[:, 0], ds.times, [ds.signals(i) for i in range(2)])
    assert out.shape == (6, 2, 6)
    single = rollout(model, p, ds.obs[0, 0], ds.times, ds.signals(0))
    assert single.shape == (6, 6)
    assert np.allclose(single, out[:, 0], atol=1e-6)


def test_zero_field_rollout_is_constant():
    model, p = build_podinn("toy2", hidden=(8,), seed=0)
    p = dict(p)
    p[BIVECTOR_PARAM] = np.zeros_like(p[BIVECTOR_PARAM])
    model.bivector.base[:] = 0.0
    obs0 = np.array([0.2, -0.1, 0.3, 0.05])
    traj = rollout(model, p, obs0, np.linspace(0.0, 5.0, 11))
    assert np.all(traj == obs0)


def test_rollout_signal_count_checked():
    model, p = build_node("a", hidden=(4,))
    with pytest.raises(models.ModelError):
        rollout(model, p, np.zeros((2, 6)), np.linspace(0.0, 1.0, 3), [[]])


def test_build_model_roundtrip():
    model, p = build_podinn("b", n_d=2, hidden=(8,), seed=4)
    again, q = models.build_model(model.build)
    assert again.layout.names == model.layout.names
    assert all(np.array_equal(p[k], q[k]) for k in p)
    with pytest.raises(models.ModelError):
        models.build_model({"kind": "transformer"})


def test_resistive_port_assumptions():
    st = models.structure("e")
    ports = models.resistive_ports(st, n_d=3, n_g=1)
    assert len(ports) == 3 and ports[0][1] != ports[1][1] == ports[2][1]
    with pytest.raises(models.ModelError):
        models.resistive_ports(st, n_d=2, n_g=3)
    with pytest.raises(models.ModelError):
        models.resistive_ports(models.structure("a"), n_d=2, n_g=1)
