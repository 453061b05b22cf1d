"""Ground-truth benchmark systems, trajectory generation and dataset files.

Every system is integrated in its natural simulation state with an ``@njit``
right-hand side.  Signals enter the kernel as packed sum-of-sines parameters
so one compiled function serves all trajectories.  Observations are derived
from the simulation state afterwards (identity for most systems).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._accel import njit
from .components import Constant, SumOfSines, evaluate_signals, signal_from_json
from .integrators import IntegrationError, integrate

SCHEMA_VERSION = 1
# Tight defaults: at rtol=1e-9 / atol=1e-7 the generated data itself deviates
# from the exact solution by ~1e-3 over 1,000 steps for the damped systems.
GEN_RTOL = 1e-12
GEN_ATOL = 1e-12
ROLLOUT_RTOL = 1e-9
ROLLOUT_ATOL = 1e-7
N_WAVES = 3
_SIG_WIDTH = 3 * N_WAVES + 1  # waves + derivative flag


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernel helpers


@njit
def _spow(x, d):
    return d * np.sign(x) * np.abs(x) ** (1.0 / 3.0)


@njit
def _input(t, params, col, n_const):
    """Value of packed signal ``col`` at time ``t``."""
    off = n_const + col * 10
    acc = 0.0
    deriv = params[off + 9] != 0.0
    for k in range(3):
        a = params[off + 3 * k]
        w = params[off + 3 * k + 1]
        ph = params[off + 3 * k + 2]
        if deriv:
            acc += a * w * np.cos(w * t + ph)
        else:
            acc += a * np.sin(w * t + ph)
    return acc


def pack_signal(sig) -> np.ndarray:
    """Flatten a signal into the fixed-width kernel layout."""
    out = np.zeros(_SIG_WIDTH)
    if isinstance(sig, Constant):
        out[:3] = (sig.value, 0.0, np.pi / 2)  # sin(pi/2) is exactly 1.0
        return out
    if not isinstance(sig, SumOfSines) or sig.waves.shape[0] > N_WAVES:
        raise DatasetError(f"cannot pack signal {sig!r} for the compiled kernels")
    out[: sig.waves.size] = sig.waves.reshape(-1)
    out[-1] = 1.0 if sig.derivative else 0.0
    return out


# -- (a) three masses, fixed wall, dampers on springs 1 and 3, force on m3


@njit
def _phys_a(y, ext, c):
    m1, m2, m3, a1, a2, a3, cub, d1, d3 = c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]
    q1, q2, q3, v1, v2, v3 = y[0], y[1], y[2], y[3], y[4], y[5]
    k1 = a1 * q1 + cub * q1 ** 3
    k2 = a2 * q2 + cub * q2 ** 3
    k3 = a3 * q3 + cub * q3 ** 3
    r1 = _spow(v1, d1)
    r3 = _spow(v3 - v2, d3)
    out = np.empty(6)
    out[0] = v1
    out[1] = v2 - v1
    out[2] = v3 - v2
    out[3] = (-k1 + k2 - r1) / m1
    out[4] = (-k2 + k3 + r3) / m2
    out[5] = (-k3 - r3 + ext[0]) / m3
    return out


@njit
def _rhs_a(t, y, params):
    ext = np.empty(1)
    ext[0] = _input(t, params, 0, 9)
    return _phys_a(y, ext, params)


# -- (b) three masses chained from a moving wall, dampers on every spring


@njit
def _phys_b(y, ext, c):
    m1, m2, m3, a1, a2, a3, cub, d1, d2, d3 = c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8], c[9]
    q1, q2, q3, v1, v2, v3 = y[0], y[1], y[2], y[3], y[4], y[5]
    vb = ext[0]
    r1 = v1 - vb
    r2 = v2 - v1
    r3 = v3 - v2
    f1 = a1 * q1 + cub * q1 ** 3 + _spow(r1, d1)
    f2 = a2 * q2 + cub * q2 ** 3 + _spow(r2, d2)
    f3 = a3 * q3 + cub * q3 ** 3 + _spow(r3, d3)
    out = np.empty(6)
    out[0] = r1
    out[1] = r2
    out[2] = r3
    out[3] = (-f1 + f2) / m1
    out[4] = (-f2 + f3) / m2
    out[5] = -f3 / m3
    return out


@njit
def _rhs_b(t, y, params):
    ext = np.empty(1)
    ext[0] = _input(t, params, 0, 10)
    return _phys_b(y, ext, params)


# -- (c) two masses, five springs in the plane, conservative

C_ANCHORS = np.array([[0.0, 0.0], [4.0, 0.0]])
C_REST = np.array([[0.0, 3.0], [4.0, 3.0]])
# (end, start) per spring; nodes 0,1 are masses, 2,3 the anchors A1, A2.
C_SPRINGS = np.array([[0, 2], [1, 3], [1, 0], [1, 2], [0, 3]])
C_LENGTHS = np.array([3.0, 3.0, 4.0, 5.0, 5.0])
C_LINEAR = np.array([2.5, 3.0, 2.1, 3.5, 2.5])
C_CUBIC = np.array([3.4, 0.5, 4.1, 2.4, 1.6])
C_MASSES = np.array([5.0, 3.0])


@njit
def _c_nodes(y):
    nodes = np.empty((4, 2))
    nodes[0, 0], nodes[0, 1] = y[0], y[1]
    nodes[1, 0], nodes[1, 1] = y[2], y[3]
    nodes[2, 0], nodes[2, 1] = 0.0, 0.0
    nodes[3, 0], nodes[3, 1] = 4.0, 0.0
    return nodes


@njit
def _phys_c(y, ext, c):
    # c = masses(2), lengths(5), linear(5), cubic(5)
    nodes = _c_nodes(y)
    force = np.zeros((4, 2))
    for s in range(5):
        end, start = C_SPRINGS[s, 0], C_SPRINGS[s, 1]
        lx = nodes[end, 0] - nodes[start, 0]
        ly = nodes[end, 1] - nodes[start, 1]
        norm = np.sqrt(lx * lx + ly * ly)
        d = norm - c[2 + s]
        tension = c[7 + s] * d + c[12 + s] * d ** 3
        fx = tension * lx / norm
        fy = tension * ly / norm
        force[end, 0] -= fx
        force[end, 1] -= fy
        force[start, 0] += fx
        force[start, 1] += fy
    out = np.empty(8)
    out[0], out[1], out[2], out[3] = y[4], y[5], y[6], y[7]
    out[4] = force[0, 0] / c[0]
    out[5] = force[0, 1] / c[0]
    out[6] = force[1, 0] / c[1]
    out[7] = force[1, 1] / c[1]
    return out


@njit
def _rhs_c(t, y, params):
    return _phys_c(y, np.empty(0), params)


def c_energy(y):
    """Total energy of system (c) for simulation states ``(..., 8)``."""
    y = np.asarray(y, dtype=np.float64)
    pos = y[..., :4].reshape(y.shape[:-1] + (2, 2))
    vel = y[..., 4:].reshape(y.shape[:-1] + (2, 2))
    nodes = np.concatenate([pos, np.broadcast_to(C_ANCHORS, pos.shape)], axis=-2)
    ends, starts = nodes[..., C_SPRINGS[:, 0], :], nodes[..., C_SPRINGS[:, 1], :]
    d = np.linalg.norm(ends - starts, axis=-1) - C_LENGTHS
    pot = np.sum(0.5 * C_LINEAR * d ** 2 + 0.25 * C_CUBIC * d ** 4, axis=-1)
    kin = 0.5 * np.sum(C_MASSES[:, None] * vel ** 2, axis=(-1, -2))
    return pot + kin


def c_observe(y):
    """Spring end-to-end displacement from rest (5 x 2) then mass velocities."""
    y = np.asarray(y, dtype=np.float64)
    pos = y[..., :4].reshape(y.shape[:-1] + (2, 2))
    nodes = np.concatenate([pos, np.broadcast_to(C_ANCHORS, pos.shape)], axis=-2)
    rest_nodes = np.concatenate([C_REST, C_ANCHORS], axis=0)
    vec = nodes[..., C_SPRINGS[:, 0], :] - nodes[..., C_SPRINGS[:, 1], :]
    rest = rest_nodes[C_SPRINGS[:, 0]] - rest_nodes[C_SPRINGS[:, 1]]
    q = (vec - rest).reshape(y.shape[:-1] + (10,))
    return np.concatenate([q, y[..., 4:]], axis=-1)


def c_rest_vectors():
    rest_nodes = np.concatenate([C_REST, C_ANCHORS], axis=0)
    return rest_nodes[C_SPRINGS[:, 0]] - rest_nodes[C_SPRINGS[:, 1]]


# -- (d) FitzHugh-Nagumo neuron


@njit
def _phys_d(y, ext, c):
    v, w = y[0], y[1]
    out = np.empty(2)
    out[0] = v - v ** 3 / 3.0 - w + ext[0]
    out[1] = c[0] * (v + c[1] - c[2] * w)
    return out


@njit
def _rhs_d(t, y, params):
    ext = np.empty(1)
    ext[0] = _input(t, params, 0, 3)
    return _phys_d(y, ext, params)


# -- (e) Chua circuit


@njit
def _phys_e(y, ext, c):
    alpha, beta, m0, m1 = c[0], c[1], c[2], c[3]
    v1, v2, i = y[0], y[1], y[2]
    diode = m1 * v1 + 0.5 * (m0 - m1) * (np.abs(v1 + 1.0) - np.abs(v1 - 1.0))
    out = np.empty(3)
    out[0] = alpha * (v2 - v1 - diode)
    out[1] = v1 - v2 + i
    out[2] = -beta * v2
    return out


@njit
def _rhs_e(t, y, params):
    return _phys_e(y, np.empty(0), params)


# -- (f) DC motor driving a pendulum


@njit
def _phys_f(y, ext, c):
    ind, m, ln, g, k, dfr, rc = c[0], c[1], c[2], c[3], c[4], c[5], c[6]
    th, om, cur = y[0], y[1], y[2]
    out = np.empty(3)
    out[0] = om
    out[1] = (-m * g * ln * np.sin(th) + k * cur - _spow(om, dfr)) / (m * ln * ln)
    out[2] = (-om * k + ext[0] - rc * cur ** 3) / ind
    return out


@njit
def _rhs_f(t, y, params):
    ext = np.empty(1)
    ext[0] = _input(t, params, 0, 7)
    return _phys_f(y, ext, params)


# -- (g) hydraulic tank with two pistons


@njit
def _phys_g(y, ext, c):
    area, g, rho, a1, a2, m1, m2, lin, cub, d1, d2 = c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8], c[9], c[10]
    vol, q1, q2, v1, v2 = y[0], y[1], y[2], y[3], y[4]
    p = rho * g * vol / area
    out = np.empty(5)
    out[0] = a1 * v1 - a2 * v2
    out[1] = v1
    out[2] = v2
    out[3] = (-p * a1 - (lin * q1 + cub * q1 ** 3) - _spow(v1, d1)) / m1
    out[4] = (p * a2 - (lin * q2 + cub * q2 ** 3) - _spow(v2, d2) + ext[0]) / m2
    return out


@njit
def _rhs_g(t, y, params):
    ext = np.empty(1)
    ext[0] = _input(t, params, 0, 11)
    return _phys_g(y, ext, params)


# -- linear toys for structure-recovery experiments


@njit
def _phys_toy1(y, ext, c):
    m, k, d = c[0], c[1], c[2]
    out = np.empty(2)
    out[0] = y[1]
    out[1] = (-k * y[0] - d * y[1]) / m
    return out


@njit
def _rhs_toy1(t, y, params):
    return _phys_toy1(y, np.empty(0), params)


@njit
def _phys_toy2(y, ext, c):
    m1, m2, k1, k2, d = c[0], c[1], c[2], c[3], c[4]
    q1, q2, v1, v2 = y[0], y[1], y[2], y[3]
    out = np.empty(4)
    out[0] = v1
    out[1] = v2 - v1
    out[2] = (-k1 * q1 - d * v1 + k2 * q2) / m1
    out[3] = -k2 * q2 / m2
    return out


@njit
def _rhs_toy2(t, y, params):
    return _phys_toy2(y, np.empty(0), params)


# ---------------------------------------------------------------------------
# samplers: rng -> (initial simulation state, recorded signals)


def _sines(rng, amp, omega):
    waves = np.column_stack([
        rng.uniform(*amp, N_WAVES),
        rng.uniform(*omega, N_WAVES),
        rng.uniform(0.0, 2 * np.pi, N_WAVES),
    ])
    return waves


def _sample_a(rng, idx, n_traj):
    y0 = np.concatenate([rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.3, 0.3, 3)])
    return y0, [SumOfSines(_sines(rng, (0.2, 0.5), (0.1 * np.pi, 0.2 * np.pi)))]


def _sample_b(rng, idx, n_traj):
    y0 = np.concatenate([rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.3, 0.3, 3)])
    waves = _sines(rng, (0.2, 0.4), (0.05 * np.pi, 0.2 * np.pi))
    return y0, [SumOfSines(waves, derivative=True), SumOfSines(waves)]


def _sample_b_rel(rng, idx, n_traj):
    y0, sigs = _sample_b(rng, idx, n_traj)
    return y0, sigs[:1]


def _sample_c(rng, idx, n_traj):
    pos = C_REST + rng.uniform(-0.5, 0.5, (2, 2))
    vel = rng.uniform(-0.1, 0.1, (2, 2))
    return np.concatenate([pos.reshape(-1), vel.reshape(-1)]), []


def _sample_d(rng, idx, n_traj):
    y0 = rng.uniform(-3.0, 3.0, 2)
    levels = np.linspace(0.1, 1.5, n_traj) if n_traj > 1 else np.array([0.1])
    return y0, [Constant(levels[idx])]


def _sample_e(rng, idx, n_traj):
    return rng.uniform(-0.5, 0.5, 3), []


def _sample_f(rng, idx, n_traj):
    y0 = np.concatenate([rng.uniform(-np.pi / 2, np.pi / 2, 1), rng.uniform(-0.5, 0.5, 2)])
    return y0, [SumOfSines(_sines(rng, (0.2, 0.5), (0.1 * np.pi, 0.2 * np.pi)))]


def _sample_g(rng, idx, n_traj):
    y0 = np.array([
        rng.uniform(4.75, 5.25),
        rng.uniform(-10.3, -9.7),
        rng.uniform(5.7, 6.3),
        rng.uniform(-0.3, 0.3),
        rng.uniform(-0.3, 0.3),
    ])
    return y0, [SumOfSines(_sines(rng, (0.05, 0.2), (0.1 * np.pi, 0.3 * np.pi)))]


def _sample_toy1(rng, idx, n_traj):
    return np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3)]), []


def _sample_toy2(rng, idx, n_traj):
    return np.concatenate([rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.3, 0.3, 2)]), []


# observation transforms: (simulation states (T, n), recorded ext (T, k)) -> obs


def _identity(y, ext):
    return y


def _absolute_a(y, ext):
    return np.concatenate([np.cumsum(y[..., :3], axis=-1), y[..., 3:]], axis=-1)


def _absolute_b(y, ext):
    x = ext[..., 1:2] + np.cumsum(y[..., :3], axis=-1)
    return np.concatenate([x, y[..., 3:]], axis=-1)


def _observe_c(y, ext):
    return c_observe(y)


# ---------------------------------------------------------------------------
# specs


@dataclass
class SystemSpec:
    """One benchmark system: parameters, sampling, kernel and observation names.

    ``ext_names`` are the recorded external columns; ``effort_cols`` selects the
    ones that act as input efforts and ``aux_cols`` those only fed to networks
    (e.g. a moving boundary position).
    """

    id: str
    constants: dict
    dt: float
    theta: float
    obs_names: list
    ext_names: list = field(default_factory=list)
    effort_cols: list = field(default_factory=list)
    aux_cols: list = field(default_factory=list)
    mode: str = "relative"
    description: str = ""
    rhs: Callable = None
    phys: Callable = None
    sampler: Callable = None
    observe: Callable = _identity
    n_sim: int = 0
    train_size: tuple = (100, 200)
    test_size: tuple = (5, 2000)

    @property
    def n_obs(self):
        return len(self.obs_names)

    @property
    def n_ext(self):
        return len(self.ext_names)

    def const_vector(self) -> np.ndarray:
        return np.array([float(v) for v in self.constants.values()], dtype=np.float64)

    def kernel_params(self, signals) -> np.ndarray:
        """Constants followed by packed effort signals."""
        packed = [pack_signal(signals[c]) for c in self.effort_cols]
        return np.concatenate([self.const_vector()] + packed)


_A_CONST = {"m1": 1.0, "m2": 1.2, "m3": 1.4, "k1": 0.2, "k2": 0.3, "k3": 0.4, "k_cubic": 0.1, "d1": 0.08, "d3": 0.04}
_B_CONST = {"m1": 1.4, "m2": 1.2, "m3": 1.0, "k1": 0.5, "k2": 0.4, "k3": 0.3, "k_cubic": 0.1,
            "d1": 0.10, "d2": 0.05, "d3": 0.02}
_C_CONST = {"m1": 5.0, "m2": 3.0, "l1": 3.0, "l2": 3.0, "l3": 4.0, "l4": 5.0, "l5": 5.0,
            "k1_lin": 2.5, "k2_lin": 3.0, "k3_lin": 2.1, "k4_lin": 3.5, "k5_lin": 2.5,
            "k1_cub": 3.4, "k2_cub": 0.5, "k3_cub": 4.1, "k4_cub": 2.4, "k5_cub": 1.6}
_D_CONST = {"inv_L": 0.08, "E_offset": 0.7, "R2": 0.8}
_E_CONST = {"alpha": 15.6, "beta": 28.0, "m0": -8.0 / 7.0, "m1": -5.0 / 7.0}
_F_CONST = {"L": 2.5, "m": 2.0, "l": 1.5, "g": 1.0, "K": 0.5, "d": 0.02, "R": 0.05}
_G_CONST = {"A": 5.0, "g": 1.0, "rho": 10.0, "a1": 1.0, "a2": 0.3, "m1": 3.0, "m2": 1.0,
            "k_lin": 0.1, "k_cubic": 0.01, "d1": 0.06, "d2": 0.02}
_TOY1_CONST = {"m": 1.0, "k": 1.0, "d": 0.3}
_TOY2_CONST = {"m1": 1.0, "m2": 1.5, "k1": 1.0, "k2": 0.6, "d": 0.3}

_MECH3_REL = ["q1", "q2", "q3", "v1", "v2", "v3"]
_MECH3_ABS = ["x1", "x2", "x3", "v1", "v2", "v3"]
_C_OBS = [f"q{a}{i}" for i in range(1, 6) for a in "xy"] + ["vx1", "vy1", "vx2", "vy2"]

SYSTEMS: dict[str, SystemSpec] = {}


def _register(spec: SystemSpec):
    SYSTEMS[spec.id] = spec
    return spec


_register(SystemSpec("a", _A_CONST, 0.1, 1e-3, _MECH3_REL, ["F"], [0], [],
                     description="three masses from a fixed wall, dampers on springs 1 and 3, force on mass 3",
                     rhs=_rhs_a, phys=_phys_a, sampler=_sample_a, n_sim=6))
_register(SystemSpec("a_abs", _A_CONST, 0.1, 1e-3, _MECH3_ABS, ["F"], [0], [], mode="absolute",
                     description="system a observed through absolute mass positions",
                     rhs=_rhs_a, phys=_phys_a, sampler=_sample_a, observe=_absolute_a, n_sim=6))
_register(SystemSpec("b", _B_CONST, 0.1, 1e-4, _MECH3_REL, ["v_b"], [0], [],
                     description="three masses from a moving wall, a damper on every spring",
                     rhs=_rhs_b, phys=_phys_b, sampler=_sample_b_rel, n_sim=6))
_register(SystemSpec("b_abs", _B_CONST, 0.1, 1e-4, _MECH3_ABS, ["v_b", "q_b"], [0], [1], mode="absolute",
                     description="system b observed through absolute positions; wall position is an auxiliary input",
                     rhs=_rhs_b, phys=_phys_b, sampler=_sample_b, observe=_absolute_b, n_sim=6))
_register(SystemSpec("c", _C_CONST, 0.1, 1e-3, _C_OBS,
                     description="two masses and five springs in the plane; 14 observations, 8 degrees of freedom",
                     rhs=_rhs_c, phys=_phys_c, sampler=_sample_c, observe=_observe_c, n_sim=8))
_register(SystemSpec("d", _D_CONST, 0.1, 1e-3, ["V", "W"], ["J"], [0], [],
                     description="FitzHugh-Nagumo neuron with a constant input current per trajectory",
                     rhs=_rhs_d, phys=_phys_d, sampler=_sample_d, n_sim=2, train_size=(30, 200)))
_register(SystemSpec("e", _E_CONST, 0.01, 1e-3, ["V1", "V2", "I"],
                     description="Chua circuit",
                     rhs=_rhs_e, phys=_phys_e, sampler=_sample_e, n_sim=3))
_register(SystemSpec("f", _F_CONST, 0.1, 1e-4, ["theta", "omega", "I"], ["E"], [0], [],
                     description="DC motor driving a pendulum, voltage input",
                     rhs=_rhs_f, phys=_phys_f, sampler=_sample_f, n_sim=3))
_register(SystemSpec("g", _G_CONST, 0.1, 1e-4, ["V", "q1", "q2", "v1", "v2"], ["F"], [0], [],
                     description="hydraulic tank with two spring-loaded pistons, force on piston 2",
                     rhs=_rhs_g, phys=_phys_g, sampler=_sample_g, n_sim=5))
_register(SystemSpec("toy1", _TOY1_CONST, 0.1, 1e-4, ["q", "v"],
                     description="linear mass, spring and damper",
                     rhs=_rhs_toy1, phys=_phys_toy1, sampler=_sample_toy1, n_sim=2, train_size=(20, 10)))
_register(SystemSpec("toy2", _TOY2_CONST, 0.1, 1e-4, ["q1", "q2", "v1", "v2"],
                     description="linear chain of two masses and two springs, damper parallel to spring 1",
                     rhs=_rhs_toy2, phys=_phys_toy2, sampler=_sample_toy2, n_sim=4, train_size=(20, 100)))


def get_system(system_id: str) -> SystemSpec:
    try:
        return SYSTEMS[system_id]
    except KeyError:
        raise DatasetError(f"unknown system {system_id!r}; choose from {sorted(SYSTEMS)}") from None


def system_field(spec: SystemSpec, state, t, external=()):
    """Simulation-state rate with the external efforts given explicitly."""
    y = np.asarray(state, dtype=np.float64)
    if y.shape[-1] != spec.n_sim:
        raise DatasetError(f"state dimension {y.shape[-1]} != {spec.n_sim} for system {spec.id}")
    ext = np.atleast_1d(np.asarray(external, dtype=np.float64))
    return spec.phys(np.ascontiguousarray(y), ext, spec.const_vector())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Trajectories on a common grid: ``obs`` (n_traj, T, n_obs), ``ext`` (n_traj, T, n_ext)."""

    meta: dict
    times: np.ndarray
    obs: np.ndarray
    ext: np.ndarray

    @property
    def system(self) -> SystemSpec:
        return get_system(self.meta["system"])

    @property
    def n_traj(self):
        return self.obs.shape[0]

    @property
    def n_steps(self):
        return self.obs.shape[1] - 1

    def signals(self, i):
        """Continuous-time signals of trajectory ``i`` (one per ext column)."""
        sigs = self.meta.get("signals")
        if sigs:
            return [signal_from_json(s) for s in sigs[i]]
        from .components import SampledSeries
        return [SampledSeries(self.times, self.ext[i, :, k]) for k in range(self.ext.shape[2])]

    def subset(self, idx):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))
        meta = dict(self.meta)
        meta["n_traj"] = int(idx.size)
        if meta.get("signals"):
            meta["signals"] = [meta["signals"][i] for i in idx]
        return Dataset(meta, self.times, self.obs[idx], self.ext[idx])


def simulate(spec: SystemSpec, y0, signals, times, rtol=GEN_RTOL, atol=GEN_ATOL):
    """Integrate the ground truth from ``y0`` and return (obs, ext) on ``times``."""
    params = spec.kernel_params(signals)
    ys = integrate(spec.rhs, y0, times, params, rtol=rtol, atol=atol)
    ext = evaluate_signals(signals, times)
    return spec.observe(ys, ext), ext


def generate(spec: SystemSpec | str, n_traj, n_steps, dt=None, seed=0, rtol=GEN_RTOL, atol=GEN_ATOL) -> Dataset:
    """Sample and integrate ``n_traj`` trajectories of ``n_steps`` steps.

    Trajectory ``i`` draws from ``default_rng([seed, i])`` only, so it does not
    depend on the other trajectories (system d is the exception: its input
    level is ``linspace(0.1, 1.5, n_traj)[i]``).
    """
    spec = get_system(spec) if isinstance(spec, str) else spec
    dt = spec.dt if dt is None else float(dt)
    if n_traj < 1 or n_steps < 1 or not dt > 0:
        raise DatasetError("need n_traj >= 1, n_steps >= 1 and dt > 0")
    times = np.arange(n_steps + 1) * dt
    obs = np.empty((n_traj, n_steps + 1, spec.n_obs))
    ext = np.empty((n_traj, n_steps + 1, spec.n_ext))
    all_signals = []
    for i in range(n_traj):
        rng = np.random.default_rng([int(seed), i])
        y0, sigs = spec.sampler(rng, i, n_traj)
        try:
            o, e = simulate(spec, y0, sigs, times, rtol, atol)
        except IntegrationError as exc:
            raise IntegrationError(exc.status, exc.t, f"trajectory {i} of system {spec.id}") from exc
        if not np.all(np.isfinite(o)):
            raise DatasetError(f"non-finite observation in trajectory {i} of system {spec.id}")
        obs[i], ext[i] = o, e
        all_signals.append([s.to_json() for s in sigs])
    meta = {
        "schema_version": SCHEMA_VERSION,
        "system": spec.id,
        "dt": dt,
        "n_traj": int(n_traj),
        "n_steps": int(n_steps),
        "seed": int(seed),
        "theta": spec.theta,
        "obs_names": list(spec.obs_names),
        "ext_names": list(spec.ext_names),
        "signals": all_signals,
    }
    return Dataset(meta, times, obs, ext)


_META_KEYS = ("schema_version", "system", "dt", "n_traj", "n_steps", "seed", "theta", "obs_names", "ext_names")


def write_dataset(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.meta, fh, indent=1)
    header = ["traj_id", "step", "t"] + list(ds.meta["obs_names"]) + list(ds.meta["ext_names"])
    with open(os.path.join(path, "trajectories.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n_traj):
            for k in range(ds.obs.shape[1]):
                row = [i, k, repr(float(ds.times[k]))]
                row += [repr(float(x)) for x in ds.obs[i, k]]
                row += [repr(float(x)) for x in ds.ext[i, k]]
                w.writerow(row)


def read_dataset(path) -> Dataset:
    meta_path = os.path.join(path, "meta.json")
    csv_path = os.path.join(path, "trajectories.csv")
    if not os.path.isfile(meta_path):
        raise DatasetError(f"missing meta.json in {path}")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed meta.json: {exc}") from exc
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise DatasetError(f"meta.json lacks fields {missing}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"schema version {meta['schema_version']} != supported {SCHEMA_VERSION}")
    if not os.path.isfile(csv_path):
        raise DatasetError(f"missing trajectories.csv in {path}")
    n_obs, n_ext = len(meta["obs_names"]), len(meta["ext_names"])
    n_traj, n_t = int(meta["n_traj"]), int(meta["n_steps"]) + 1
    expected = ["traj_id", "step", "t"] + list(meta["obs_names"]) + list(meta["ext_names"])
    obs = np.full((n_traj, n_t, n_obs), np.nan)
    ext = np.full((n_traj, n_t, n_ext), np.nan)
    times = np.full(n_t, np.nan)
    seen = np.zeros((n_traj, n_t), dtype=bool)
    with open(csv_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DatasetError(f"csv header {header} does not match {expected}")
        for line, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetError(f"line {line}: expected {len(expected)} fields, got {len(row)}")
            try:
                i, k = int(row[0]), int(row[1])
                vals = [float(x) for x in row[2:]]
            except ValueError as exc:
                raise DatasetError(f"line {line}: {exc}") from exc
            if not (0 <= i < n_traj and 0 <= k < n_t):
                raise DatasetError(f"line {line}: index ({i}, {k}) out of range")
            times[k] = vals[0]
            obs[i, k] = vals[1:1 + n_obs]
            ext[i, k] = vals[1 + n_obs:]
            seen[i, k] = True
    if not seen.all():
        raise DatasetError("trajectories.csv is missing rows")
    return Dataset(meta, times, obs, ext)
