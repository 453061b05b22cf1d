import csv
import json

import numpy as np
import pytest

from fdcheck import fd_grad, rel_err
from podinn import autodiff as ad
from podinn import training
from podinn.models import BIVECTOR_PARAM, build_node, build_podinn, ground_truth_model
from podinn.systems import generate
from podinn.training import (ConfigError, TrainConfig, TrainingError, adam_init, adam_step, cosine_lr,
                             load_checkpoint, one_step_loss, stage_inputs, train)

TOY_CONFIG = dict(lr=3e-3, substeps=1)


class Shift:
    """Stand-in model whose RK4 step moves every observation by ``shift``."""

    def __init__(self, shift, dt):
        self.rate = np.asarray(shift) / dt

    def field(self, p, obs, ext=None):
        return np.broadcast_to(self.rate, np.shape(obs)).copy()


def test_loss_normalisation_examples():
    u = np.random.default_rng(0).normal(size=(8, 3))
    std = np.array([0.5, 2.0, 3.0])
    stages = np.zeros((8, 3, 0))
    assert one_step_loss(Shift(std, 0.1), {}, u, stages, u + std, std, 0.1) == pytest.approx(0.0, abs=1e-24)
    assert one_step_loss(Shift(np.zeros(3), 0.1), {}, u, stages, u + std, std, 0.1) == pytest.approx(1.0)
    assert one_step_loss(Shift(np.zeros(3), 0.1), {}, u, stages, u, std, 0.1) == 0.0
    with pytest.raises(ConfigError):
        one_step_loss(Shift(np.zeros(3), 0.1), {}, u, stages, u, np.array([1.0, 0.0, 1.0]), 0.1)


def test_constant_dimension_named_in_error():
    ds = generate("toy1", 2, 5, seed=0)
    ds.obs[..., 1] = 0.25
    with pytest.raises(ConfigError, match="'v'"):
        training.observation_std(ds)


def test_perfect_model_loss_on_system_a():
    ds = generate("a", 20, 50, seed=0)
    model, p = ground_truth_model("a")
    std = training.observation_std(ds)
    stages = stage_inputs(ds, substeps=4)
    obs = ds.obs[:, :-1].reshape(-1, 6)
    target = ds.obs[:, 1:].reshape(-1, 6)
    sx = stages.reshape(-1, stages.shape[2], stages.shape[3])
    assert one_step_loss(model, p, obs, sx, target, std, 0.1, substeps=4) < 1e-10


def test_stage_inputs_match_signals():
    ds = generate("a", 2, 6, seed=1)
    st = stage_inputs(ds, substeps=2)
    assert st.shape == (2, 6, 5, 1)
    assert np.allclose(st[1, 3, 2, 0], ds.signals(1)[0](ds.times[3] + 0.05))
    ds.meta.pop("signals")
    approx = stage_inputs(ds, substeps=2)
    assert np.allclose(approx[:, :, ::2], st[:, :, ::2], atol=1e-12)
    assert np.max(np.abs(approx - st)) < 1e-4


def test_loss_gradient_every_parameter_class_vs_fd():
    ds = generate("toy2", 3, 4, seed=0)
    model, p = build_podinn("toy2", hidden=(8, 8), seed=0)
    rng = np.random.default_rng(1)
    p = dict(p)
    p[BIVECTOR_PARAM] = rng.uniform(-0.5, 0.5, size=p[BIVECTOR_PARAM].shape)
    p = {k: v + 0.1 * rng.normal(size=np.shape(v)) if k.startswith("m") else v for k, v in p.items()}
    std = training.observation_std(ds)
    obs, target = ds.obs[:, 0], ds.obs[:, 1]
    sx = stage_inputs(ds, 2)[:, 0]

    def loss(q):
        return one_step_loss(model, q, obs, sx, target, std, 0.1, substeps=2)

    value, grads = training.loss_and_grad(model, p, obs, sx, target, std, 0.1, substeps=2)
    assert value == pytest.approx(float(loss(p)))
    classes = set()
    for k, v in p.items():
        fd = fd_grad(lambda z, k=k: loss({**p, k: z}), v, h=1e-6)
        assert rel_err(grads[k], fd, floor=1e-7) < 1e-4, k
        classes.add("bivector" if k == BIVECTOR_PARAM else "network" if "." in k else "log-scale")
    assert classes == {"bivector", "network", "log-scale"}


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 99, 100) == 0.0
    lrs = [cosine_lr(1e-3, k, 100) for k in range(100)]
    assert all(a >= b >= 0 for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step_and_zero_grad():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -1e-3, 0.0])}
    state = adam_init(p)
    out = adam_step(p, g, state, 0.01)
    assert np.allclose(out["w"] - p["w"], [-0.01, 0.01, 0.0], rtol=2e-5, atol=0)
    state = adam_init(p)
    q = p
    for _ in range(50):
        q = adam_step(q, {"w": np.zeros(3)}, state, 0.01)
    assert np.array_equal(q["w"], p["w"])


def test_adam_three_step_sequence():
    p = {"x": np.array(1.0)}
    state = adam_init(p)
    expected = [0.900000002, 0.9366103542405654, 0.8946447927181046]
    for g, want in zip([0.5, -1.0, 2.0], expected):
        p = adam_step(p, {"x": np.array(g)}, state, 0.1)
        assert float(p["x"]) == pytest.approx(want, rel=1e-14)
    with pytest.raises(ConfigError):
        adam_step(p, {"x": np.zeros(2)}, state, 0.1)


def test_config_validation():
    for bad in (dict(iterations=0), dict(lr=0.0), dict(substeps=0), dict(betas=(0.9, 1.0)), dict(log_every=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_training_is_deterministic():
    ds = generate("toy1", 5, 10, seed=0)
    runs = []
    for _ in range(2):
        model, p = build_podinn("toy1", hidden=(8,), seed=2)
        q, _ = train(model, p, ds, TrainConfig(iterations=15, batch_size=16, **TOY_CONFIG, seed=5))
        runs.append(q)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_fixed_entries_untouched():
    ds = generate("a_abs", 3, 6, seed=0)
    model, p = build_podinn("a_abs", hidden=(8,), seed=0)
    before = model.bivector_matrix(p)
    q, _ = train(model, p, ds, TrainConfig(iterations=5, batch_size=8, **TOY_CONFIG))
    after = model.bivector_matrix(q)
    free = np.zeros(before.shape, dtype=bool)
    free[model.bivector.rows, model.bivector.cols] = True
    free |= free.T
    assert np.array_equal(before[~free], after[~free])
    assert np.any(before[free] != after[free])


def test_checkpoint_resume_matches_straight_run(tmp_path):
    ds = generate("toy1", 5, 10, seed=0)
    cfg = TrainConfig(iterations=10, batch_size=16, checkpoint_every=5, log_every=1, **TOY_CONFIG)
    model, p = build_podinn("toy1", hidden=(8,), seed=0)
    straight, hist = train(model, p, ds, cfg, out_dir=tmp_path / "a")
    assert hist.iteration == list(range(1, 11)) and hist.lr[-1] == 0.0

    model, p = build_podinn("toy1", hidden=(8,), seed=0)

    def stop(it, loss, lr):
        # interrupted during iteration 6, after the checkpoint at 5
        if it == 6:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(model, p, ds, cfg, out_dir=tmp_path / "b", callback=stop)
    model, q, info = load_checkpoint(tmp_path / "b" / "checkpoint.json")
    assert info["iteration"] == 5
    resumed, _ = train(model, q, ds, cfg, out_dir=tmp_path / "b", start_iteration=5,
                       adam=training.adam_from_checkpoint(info, q))
    assert all(np.array_equal(straight[k], resumed[k]) for k in straight)

    with open(tmp_path / "a" / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "loss", "lr", "wall_ms"] and len(rows) == 11
    obj = json.load(open(tmp_path / "a" / "checkpoint.json"))
    assert obj["iteration"] == 10 and obj["schema_version"] == training.CHECKPOINT_SCHEMA


def test_bad_checkpoint_rejected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_non_finite_loss_aborts_and_keeps_last_good(tmp_path, monkeypatch):
    ds = generate("toy1", 3, 5, seed=0)
    model, p = build_node("toy1", hidden=(4,))
    real = training.loss_and_grad
    count = {"n": 0}

    def flaky(*args, **kwargs):
        count["n"] += 1
        loss, grads = real(*args, **kwargs)
        return (np.nan if count["n"] == 4 else loss), grads

    monkeypatch.setattr(training, "loss_and_grad", flaky)
    with pytest.raises(TrainingError, match="iteration 3"):
        train(model, p, ds, TrainConfig(iterations=10, batch_size=4), out_dir=tmp_path)
    _, q, info = load_checkpoint(tmp_path / "last_good.json")
    assert info["iteration"] == 3 and all(np.all(np.isfinite(v)) for v in q.values())


def test_dataset_model_mismatch():
    with pytest.raises(ConfigError):
        train(*build_node("a", hidden=(4,)), generate("toy1", 2, 3), TrainConfig(iterations=1))


@pytest.mark.slow
def test_linear_toy_converges():
    spec_n, spec_t = 20, 10
    ds = generate("toy1", spec_n, spec_t, seed=0)
    model, p = build_podinn("toy1", hidden=(32, 32), seed=0)
    _, hist = train(model, p, ds, TrainConfig(iterations=2000, **TOY_CONFIG))
    assert hist.loss[-1] < 1e-4
