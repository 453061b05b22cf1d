"""One-step-prediction training: loss, Adam, cosine schedule, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .components import evaluate_signals
from .geometry import PortLayout
from .integrators import rk4_step
from .models import BIVECTOR_PARAM, PoDiNNModel, build_model
from .systems import Dataset

CHECKPOINT_SCHEMA = 1


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 100
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    substeps: int = 4
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.iterations < 1 or self.batch_size < 1 or self.substeps < 1:
            raise ConfigError("iterations, batch_size and substeps must be positive")
        if not (self.lr > 0 and self.eps > 0 and all(0 <= b < 1 for b in self.betas)):
            raise ConfigError("need lr > 0, eps > 0 and betas in [0, 1)")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("checkpoint_every must be >= 0 and log_every >= 1")


@dataclass
class TrainHistory:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, it, loss, lr, wall_ms):
        if self.iteration and it <= self.iteration[-1]:
            raise TrainingError("history iterations must increase")
        self.iteration.append(int(it))
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        self.wall_ms.append(float(wall_ms))

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr", "wall_ms"])
            for row in zip(self.iteration, self.loss, self.lr, self.wall_ms):
                w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}"])


# ---------------------------------------------------------------------------
# schedule and optimizer


def cosine_lr(lr0, k, total):
    """Cosine annealing from ``lr0`` at k=0 to exactly 0 at k=total-1."""
    if total <= 1:
        return 0.0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * k / (total - 1)))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam; returns new parameter dict, updates ``state`` in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# ---------------------------------------------------------------------------
# data preparation


def observation_std(ds: Dataset):
    """Per-dimension standard deviation over all training observations."""
    flat = ds.obs.reshape(-1, ds.obs.shape[-1])
    std = flat.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        names = [ds.meta["obs_names"][i] for i in bad]
        raise ConfigError(f"observation dimension(s) {names} are constant in the training data")
    return std


def _lagrange_window(times, values, t):
    """Cubic Lagrange interpolation through the 4 samples around ``t``."""
    n = len(times)
    dt = times[1] - times[0]
    k = int(np.clip(np.floor((t - times[0]) / dt), 0, n - 2))
    lo = int(np.clip(k - 1, 0, max(n - 4, 0)))
    idx = np.arange(lo, min(lo + 4, n))
    ts, vs = times[idx], values[idx]
    out = np.zeros(values.shape[1:])
    for a in range(len(idx)):
        w = 1.0
        for b in range(len(idx)):
            if a != b:
                w *= (t - ts[b]) / (ts[a] - ts[b])
        out = out + w * vs[a]
    return out


def stage_inputs(ds: Dataset, substeps=1):
    """External columns at every RK4 stage time: ``(n_traj, n_steps, 2*substeps+1, n_ext)``.

    Stage ``j`` sits at ``t_n + j * dt / (2 * substeps)``.  Exact signals from the
    dataset metadata are used when present, otherwise cubic interpolation of
    the recorded columns.
    """
    n_traj, n_t, n_ext = ds.ext.shape
    n_steps = n_t - 1
    offsets = np.arange(2 * substeps + 1) * (ds.meta["dt"] / (2 * substeps))
    out = np.zeros((n_traj, n_steps, offsets.size, n_ext))
    if n_ext == 0:
        return out
    t = ds.times[:-1, None] + offsets[None, :]
    if ds.meta.get("signals"):
        for i in range(n_traj):
            out[i] = evaluate_signals(ds.signals(i), t)
    else:
        for i in range(n_traj):
            for n in range(n_steps):
                for j, tt in enumerate(t[n]):
                    out[i, n, j] = _lagrange_window(ds.times, ds.ext[i], tt)
    return out


# ---------------------------------------------------------------------------
# loss


def predict_one_step(model, p, obs, stage_ext, dt, substeps=1):
    """RK4 prediction of the next observation; ``stage_ext`` is ``(B, 2S+1, n_ext)``."""
    half = dt / (2 * substeps)

    def f(t, u):
        j = int(round(t / half))
        return model.field(p, u, stage_ext[:, j, :])

    return rk4_step(f, 0.0, obs, dt, substeps)


def one_step_loss(model, p, obs, stage_ext, target, std, dt, substeps=1):
    """mean over batch and dimensions of ((prediction - target) / std)**2."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(~(std > 0)):
        raise ConfigError(f"standard deviations must be positive, got zero in dims {np.flatnonzero(~(std > 0))}")
    pred = predict_one_step(model, p, obs, stage_ext, dt, substeps)
    return ad.mean(ad.square(ad.div(ad.sub(pred, target), std)))


def loss_and_grad(model, params, obs, stage_ext, target, std, dt, substeps=1):
    tape = ad.Tape()
    leaves = tape.leaves(params)
    loss = one_step_loss(model, leaves, obs, stage_ext, target, std, dt, substeps)
    if not isinstance(loss, ad.Var):
        return float(loss), {k: np.zeros_like(v) for k, v in params.items()}
    grads = ad.backward(tape, loss, leaves)
    return float(loss.value), grads


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, model, params, iteration, std=None, adam: AdamState | None = None, extra=None):
    obj = {
        "schema_version": CHECKPOINT_SCHEMA,
        "build": model.build,
        "iteration": int(iteration),
        "params": {k: np.asarray(v).tolist() for k, v in params.items()},
        "shapes": {k: list(np.shape(v)) for k, v in params.items()},
    }
    if isinstance(model, PoDiNNModel):
        obj["layout"] = model.layout.to_json()
        obj["bivector"] = model.bivector.to_json(params[BIVECTOR_PARAM])
        obj["log_scales"] = {model.obs_map.scaled[i]: float(np.asarray(params[model.obs_map.scaled[i]]).ravel()[0])
                             for i in model.obs_map.scaled}
    if std is not None:
        obj["std"] = np.asarray(std).tolist()
    if adam is not None:
        obj["adam"] = {"step": adam.step,
                       "m": {k: v.tolist() for k, v in adam.m.items()},
                       "v": {k: v.tolist() for k, v in adam.v.items()}}
    if extra:
        obj.update(extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, params, info)``; ``info`` holds the raw JSON fields."""
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if obj.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {obj.get('schema_version')}")
    model, fresh = build_model(obj["build"])
    params = {}
    for k, v in fresh.items():
        if k not in obj["params"]:
            raise ConfigError(f"checkpoint lacks parameter {k}")
        arr = np.array(obj["params"][k], dtype=np.float64).reshape(obj["shapes"][k])
        if arr.shape != v.shape:
            raise ConfigError(f"parameter {k} has shape {arr.shape}, model expects {v.shape}")
        params[k] = arr
    if isinstance(model, PoDiNNModel) and "layout" in obj:
        if PortLayout.from_json(obj["layout"]).names != model.layout.names:
            raise ConfigError("checkpoint layout does not match the rebuilt model")
    return model, params, obj


def adam_from_checkpoint(info, params) -> AdamState | None:
    a = info.get("adam")
    if not a:
        return None
    return AdamState({k: np.array(a["m"][k]).reshape(params[k].shape) for k in params},
                     {k: np.array(a["v"][k]).reshape(params[k].shape) for k in params}, int(a["step"]))


# ---------------------------------------------------------------------------
# training loop


def _check_fixed(model, params):
    if isinstance(model, PoDiNNModel):
        m = model.bivector_matrix(params)
        mask = np.ones(m.shape, dtype=bool)
        mask[model.bivector.rows, model.bivector.cols] = False
        mask[model.bivector.cols, model.bivector.rows] = False
        if not np.array_equal(m[mask], model.bivector.base[mask]):
            raise TrainingError("a fixed bivector entry changed during training")


def train(model, params, ds: Dataset, config: TrainConfig, out_dir=None, start_iteration=0, adam=None,
          callback=None):
    """Adam on the one-step loss over random (trajectory, step) pairs.

    Deterministic given ``config.seed``: the batch at iteration ``k`` comes from
    ``default_rng([seed, k])``.  Returns ``(params, history)``.  A non-finite
    loss aborts with :class:`TrainingError`; when ``out_dir`` is given the last
    finite parameters are saved as ``last_good.json`` first.
    """
    if model.n_obs != ds.obs.shape[-1]:
        raise ConfigError(f"model expects {model.n_obs} observation dims, dataset has {ds.obs.shape[-1]}")
    std = observation_std(ds)
    stages = stage_inputs(ds, config.substeps)
    dt = float(ds.meta["dt"])
    n_traj, n_steps = ds.obs.shape[0], ds.obs.shape[1] - 1
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    adam = adam or adam_init(params)
    history = TrainHistory()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    t_start = time.perf_counter()
    total = config.iterations
    for k in range(start_iteration, total):
        rng = np.random.default_rng([config.seed, k])
        flat = rng.integers(0, n_traj * n_steps, config.batch_size)
        ti, si = np.divmod(flat, n_steps)
        obs, target, sx = ds.obs[ti, si], ds.obs[ti, si + 1], stages[ti, si]
        loss, grads = loss_and_grad(model, params, obs, sx, target, std, dt, config.substeps)
        lr = cosine_lr(config.lr, k, total)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "last_good.json"), model, params, k, std, adam)
            raise TrainingError(f"non-finite loss at iteration {k}")
        params = adam_step(params, grads, adam, lr, config.betas, config.eps)
        it = k + 1
        if it % config.log_every == 0 or it == total:
            history.append(it, loss, lr, 1000.0 * (time.perf_counter() - t_start))
            if callback:
                callback(it, loss, lr)
        if out_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
            _check_fixed(model, params)
            save_checkpoint(os.path.join(out_dir, "checkpoint.json"), model, params, it, std, adam)
    _check_fixed(model, params)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"), model, params, total, std, adam,
                        extra={"train_config": asdict(config)})
        history.write_csv(os.path.join(out_dir, "history.csv"))
    return params, history
