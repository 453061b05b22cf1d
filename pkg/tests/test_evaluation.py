import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from podinn import evaluation as ev
from podinn.geometry import Bivector, PortLayout, wedge_matrix
from podinn.models import ground_truth_model, structure, true_bivector_matrix
from podinn.systems import generate

CHUA = PortLayout([("C1", "electric"), ("C2", "electric"), ("L", "magnetic")], [("R1", "voltage"), ("R2", "voltage")])


def chua_learned(scale=1.0):
    i = CHUA.index
    # -a dpsi^dQ2 + b xiR1^dQ2 - c1 xiR1^dQ1 + c2 xiR2^dQ1 with a = b = c1 = c2
    return wedge_matrix(CHUA.n, [(-scale, i("L"), i("C2")), (scale, i("R1"), i("C2")),
                                 (-scale, i("R1"), i("C1")), (scale, i("R2"), i("C1"))])


def test_mse_examples():
    truth = np.random.default_rng(0).normal(size=(11, 4))
    overall, series = ev.overall_mse(truth, truth)
    assert overall == 0.0 and series.shape == (11,)
    overall, _ = ev.overall_mse(truth + 0.3, truth)
    assert overall == pytest.approx(0.09)
    off = truth.copy()
    off[:, 2] += 0.3
    assert ev.overall_mse(off, truth)[0] == pytest.approx(0.09 / 4)
    with pytest.raises(ev.EvaluationError):
        ev.overall_mse(truth[:5], truth)


def test_vpt_examples():
    assert ev.vpt(np.full(10, 1e-6), 1e-4) == 1.0
    assert ev.vpt(np.full(10, 1e-3), 1e-4) == 0.0
    series = np.array([1e-5, 1e-5, 1e-3] + [1e-5] * 7)
    assert ev.vpt(series, 1e-4) == pytest.approx(0.2)
    assert ev.vpt(series, 1e-4) == _brute_force_vpt(series, 1e-4)
    with pytest.raises(ev.EvaluationError):
        ev.vpt(np.array([]), 1e-4)


def _brute_force_vpt(series, theta):
    n_f = 0
    for n in range(1, len(series) + 1):
        if all(s < theta for s in series[:n]):
            n_f = n
    return n_f / len(series)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0.0, 1.0)), st.floats(1e-3, 1.0))
def test_vpt_matches_definition(series, theta):
    assert ev.vpt(series, theta) == _brute_force_vpt(series, theta)


@given(arrays(np.float64, 20, elements=st.floats(0.0, 1.0)), st.floats(1e-3, 0.5), st.floats(1.0, 10.0))
def test_vpt_monotone_in_threshold(series, theta, k):
    assert ev.vpt(series, theta) <= ev.vpt(series, theta * k)


@given(arrays(np.float64, 12, elements=st.floats(0.0, 1.0)), st.floats(1e-3, 0.5),
       arrays(np.float64, 5, elements=st.floats(0.0, 1e-4)))
def test_vpt_ignores_tail_after_exceedance(series, theta, tail):
    series = series.copy()
    series[-1] = theta  # guarantee an exceedance
    n = len(series)
    base = ev.vpt(series, theta)
    assert ev.vpt(np.concatenate([series, tail]), theta) * (n + tail.size) == pytest.approx(base * n)


@given(arrays(np.float64, (6, 5), elements=st.floats(-10, 10)), arrays(np.float64, (6, 5), elements=st.floats(-10, 10)),
       st.permutations(range(5)))
def test_mse_permutation_invariant(a, b, perm):
    x, s = ev.overall_mse(a, b)
    y, t = ev.overall_mse(a[:, list(perm)], b[:, list(perm)])
    assert x == pytest.approx(y) and np.allclose(s, t)


def test_report_json_and_csv(tmp_path):
    truth = np.random.default_rng(1).normal(size=(2, 6, 3))
    pred = truth + np.linspace(0, 0.05, 6)[None, :, None]
    rep = ev.report_from_predictions(pred, truth, 1e-3, extra={"system": "a"})
    assert rep.vpts.shape == (2,) and 0.0 <= rep.mean_vpt <= 1.0
    rep.write(tmp_path)
    obj = json.load(open(tmp_path / "report.json"))
    assert obj["theta"] == 1e-3 and obj["system"] == "a"
    lines = open(tmp_path / "mse_traj0.csv").read().split()
    assert lines[0] == "step,mse" and len(lines) == 6


def test_evaluate_ground_truth_model():
    ds = generate("toy2", 2, 100, seed=3)
    model, p = ground_truth_model("toy2")
    rep = ev.evaluate(model, p, ds, theta=1e-4, rtol=1e-12, atol=1e-12)
    assert rep.overall < 1e-12 and rep.mean_vpt == 1.0


def test_coupling_report_example():
    lay = PortLayout([("q1", "mech-potential"), ("q2", "mech-potential"), ("p1", "mech-kinetic")])
    b = Bivector(3, [(0, 2), (1, 2), (0, 1)], values=[1.0, 0.0005, -0.9])
    rep = ev.coupling_report(b, lay)
    assert sorted(d["value"] for d in rep.detected) == [-0.9, 1.0]
    assert [d["value"] for d in rep.suppressed] == [0.0005]
    assert max(abs(d["normalized"]) for d in rep.detected) == 1.0
    assert "indeterminate" in rep.note or "scale" in rep.note
    assert len(rep.detected) + len(rep.suppressed) == 3


def test_coupling_report_canonical_full_rank():
    lay = PortLayout([("q", "mech-potential"), ("p", "mech-kinetic")])
    rep = ev.coupling_report(wedge_matrix(2, [(1.0, 1, 0)]), lay)
    assert rep.rank == 2 and rep.nullspace.shape[1] == 0
    assert rep.pattern() == {(0, 1): 1}


def test_coupling_report_constrained_bivector():
    lay = PortLayout([("q1", "mech-potential"), ("q2", "mech-potential"), ("p1", "mech-kinetic"),
                      ("p2", "mech-kinetic")])
    m = 0.5 * wedge_matrix(4, [(1.0, 2, 0), (1.0, 2, 1), (1.0, 3, 0), (1.0, 3, 1)])
    rep = ev.coupling_report(m, lay)
    assert rep.rank == 2
    v = np.array([1.0, -1.0, 0.0, 0.0])
    assert np.allclose(rep.nullspace @ (rep.nullspace.T @ v), v)


def test_all_zero_bivector_warns():
    lay = PortLayout([("q", "mech-potential"), ("p", "mech-kinetic")])
    with pytest.warns(UserWarning):
        rep = ev.coupling_report(np.zeros((2, 2)), lay)
    assert rep.detected == [] and rep.warning


@given(st.floats(1e-6, 1e6), st.integers(0, 2**32 - 1))
def test_coupling_report_scale_invariant(k, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=6) * 10.0 ** rng.integers(-5, 1, size=6)
    iu = list(zip(*np.triu_indices(4, 1)))
    lay = PortLayout([("a", "electric"), ("b", "electric"), ("c", "magnetic"), ("d", "magnetic")])
    mask = np.ones((4, 4), dtype=bool)
    base = ev.coupling_report(Bivector(4, iu, values=vals), lay, learnable_mask=mask)
    scaled = ev.coupling_report(Bivector(4, iu, values=vals * k), lay, learnable_mask=mask)
    assert base.pattern() == scaled.pattern()
    assert np.allclose([d["normalized"] for d in base.detected], [d["normalized"] for d in scaled.detected])


def test_kirchhoff_view_of_learned_chua_bivector():
    laws = ev.kirchhoff_view(chua_learned(3.7), CHUA)
    assert laws == ["I_C1 = -I_R1 + I_R2", "I_C2 = -I_L + I_R1", "V_L = V_C2", "V_R1 = V_C1 - V_C2",
                    "V_R2 = -V_C1"]
    rep = ev.coupling_report(chua_learned(3.7), CHUA)
    assert ev.kirchhoff_view(rep, CHUA) == laws


def test_kirchhoff_view_sign_flip_and_storage_only():
    m = chua_learned()
    i = CHUA.index
    m[i("C2"), i("L")] *= -1
    m[i("L"), i("C2")] *= -1
    laws = ev.kirchhoff_view(m, CHUA)
    assert laws[1] == "I_C2 = I_L + I_R1" and laws[2] == "V_L = -V_C2"
    lc = PortLayout([("C", "electric"), ("L", "magnetic")])
    assert ev.kirchhoff_view(wedge_matrix(2, [(1.0, 1, 0)]), lc) == ["I_C = I_L", "V_L = -V_C"]
    note = ev.kirchhoff_view(np.zeros((2, 2)), PortLayout([("q", "mech-potential"), ("p", "mech-kinetic")]))
    assert note[0].startswith("unsupported domain")


def test_chua_ground_truth_matches_learned_pattern_up_to_gauge():
    st_e = structure("e")
    lay = PortLayout(st_e.storage, st_e.resistive, st_e.external)
    truth = true_bivector_matrix(lay, st_e.wedges)
    # a "learned" copy with swapped resistive ports, learned port 0 mirrored
    learned = ev.gauge_fix(truth, lay, [1, 0], [True, False])
    # true port 0 is learned port 1 as is; true port 1 is learned port 0 flipped
    fixed = ev.gauge_fix(learned, lay, [1, 0], [False, True])
    assert np.array_equal(fixed, truth)
    ok, _ = ev.pattern_matches(fixed, truth, lay)
    assert ok
    assert not ev.pattern_matches(learned, truth, lay)[0]


def test_match_resistors_recovers_permutation_and_flip():
    grid = np.linspace(-2, 2, 41)
    truth = np.stack([0.3 * grid, np.cbrt(grid)])
    learned = np.stack([-np.cbrt(-grid) * 5.0, -(0.3 * -grid) * 2.0, grid ** 3])
    learned[1] = -learned[1][::-1]  # store the mirrored form of port 0
    perm, flips, cost = ev.match_resistors(learned, truth)
    assert list(perm) == [1, 0] and list(flips) == [True, False] and cost < 1e-12
    with pytest.raises(ev.EvaluationError):
        ev.match_resistors(learned[:1], truth)


def test_odd_curves():
    grid = np.linspace(-2, 2, 21)
    curves = np.stack([0.3 * grid, grid ** 3 - grid, 0.8 * grid - 0.7, np.zeros_like(grid)])
    assert list(ev.odd_curves(curves)) == [True, True, False, True]


def test_damper_coupling_sign_is_a_gauge():
    st_t = structure("toy2")
    model, p = ground_truth_model("toy2")
    truth = true_bivector_matrix(model.layout, st_t.wedges)
    grid = np.linspace(-1, 1, 21)
    curves = ev.resistor_curves(model, p, grid)
    # flipping the damper port of an odd characteristic gives the same dynamics
    flipped = ev.gauge_fix(truth, model.layout, [0], [True])
    obs = np.random.default_rng(0).normal(size=(5, 4))
    assert np.allclose(model.field({**p, "B": flipped[model.bivector.rows, model.bivector.cols]}, obs),
                       model.field({**p, "B": truth[model.bivector.rows, model.bivector.cols]}, obs))
    assert not ev.pattern_matches(flipped, truth, model.layout)[0]
    ok, _, perm, flips = ev.pattern_matches_up_to_gauge(flipped, truth, model.layout, curves, curves)
    assert ok and list(perm) == [0] and list(flips) == [True]
    assert not ev.pattern_matches_up_to_gauge(np.zeros_like(truth), truth, model.layout, curves, curves)[0]


def test_asymmetric_resistor_sign_is_not_a_gauge():
    st_d = structure("d")
    model, p = ground_truth_model("d")
    truth = true_bivector_matrix(model.layout, st_d.wedges)
    curves = ev.resistor_curves(model, p, np.linspace(-2, 2, 41))
    assert list(ev.odd_curves(curves)) == [True, False]
    # negating the resistor with the source offset alone is detected
    bad = ev.gauge_fix(truth, model.layout, [0, 1], [False, True])
    assert not ev.pattern_matches_up_to_gauge(bad, truth, model.layout, curves, curves)[0]
    assert ev.pattern_matches_up_to_gauge(truth, truth, model.layout, curves, curves)[0]
