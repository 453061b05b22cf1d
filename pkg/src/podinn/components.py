"""Component models: energies, resistive characteristics, inputs, observations.

All state-like arrays are batched with shape ``(batch, dim)``.  Parameters are
looked up by name in a mapping ``p`` whose values are arrays or tape nodes;
positive physical constants are stored as logarithms.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import MLP


class ComponentError(ValueError):
    pass


def _cols(u, idx):
    return ad.take(u, idx, axis=-1)


# ---------------------------------------------------------------------------
# energy terms


class EnergyTerm:
    """Base class: ``coords`` lists the storage coordinates the term owns."""

    coords: list[int]

    def init_params(self, rng) -> dict:
        return {}

    def energy(self, p, u, aux=None):
        raise NotImplementedError

    def grad(self, p, u, aux=None):
        """dH/du for ``self.coords``, shape ``(batch, len(coords))``."""
        raise NotImplementedError


class QuadraticStorage(EnergyTerm):
    """``s**2 / (2 theta)`` per coordinate with ``theta = exp(p[name])``.

    Covers masses (theta = m), capacitors (C), inductors (L) and a prismatic
    tank (theta = A / (rho g)).
    """

    def __init__(self, coords, params, init_log=None):
        self.coords = [int(c) for c in np.atleast_1d(coords)]
        self.params = [params] if isinstance(params, str) else list(params)
        if len(self.params) != len(self.coords):
            raise ComponentError("one coefficient parameter per quadratic coordinate")
        self.init_log = np.zeros(len(self.coords)) if init_log is None else np.atleast_1d(init_log)

    def init_params(self, rng):
        return {name: np.array([v]) for name, v in zip(self.params, self.init_log)}

    def _inv_theta(self, p):
        logs = ad.concat([p[name] for name in self.params], axis=0)
        return ad.exp(ad.neg(logs))

    def energy(self, p, u, aux=None):
        s = _cols(u, self.coords)
        return ad.sum(ad.mul(ad.mul(ad.square(s), self._inv_theta(p)), 0.5), axis=-1)

    def grad(self, p, u, aux=None):
        return ad.mul(_cols(u, self.coords), self._inv_theta(p))


class NeuralPotential(EnergyTerm):
    """``K`` independent network potentials, each over ``k`` coordinates.

    ``coords`` has shape ``(K, k)``.  ``aux`` columns (e.g. a moving boundary
    position) are appended to every network input but receive no effort.
    """

    def __init__(self, name, coords, hidden=(200, 200), aux_cols=()):
        c = np.atleast_2d(np.asarray(coords, dtype=np.intp))
        self.coord_grid = c
        self.coords = [int(x) for x in c.reshape(-1)]
        self.aux_cols = [int(a) for a in aux_cols]
        self.net = MLP(name, c.shape[1] + len(self.aux_cols), 1, hidden, stack=c.shape[0])

    def init_params(self, rng):
        return self.net.init_params(rng)

    def _inputs(self, u, aux):
        k_stack, k_in = self.coord_grid.shape
        x = _cols(u, self.coords)
        batch = ad.value(x).shape[0]
        x = ad.transpose(ad.reshape(x, (batch, k_stack, k_in)), (1, 0, 2))
        if self.aux_cols:
            if aux is None:
                raise ComponentError("this potential needs auxiliary inputs")
            a = _cols(aux, self.aux_cols)
            a = np.broadcast_to(ad.value(a), (k_stack, batch, len(self.aux_cols)))
            x = ad.concat([x, np.ascontiguousarray(a)], axis=-1)
        return x

    def energy(self, p, u, aux=None):
        out = self.net.forward(p, self._inputs(u, aux))  # (K, B, 1)
        return ad.sum(ad.sum(out, axis=-1), axis=0)

    def grad(self, p, u, aux=None):
        k_stack, k_in = self.coord_grid.shape
        g = self.net.input_gradient(p, self._inputs(u, aux))  # (K, B, k_in + n_aux)
        if self.aux_cols:
            g = g[:, :, :k_in]
        batch = ad.value(g).shape[1]
        return ad.reshape(ad.transpose(g, (1, 0, 2)), (batch, k_stack * k_in))


class PolySpring(EnergyTerm):
    """Ground-truth spring with force ``a q + b q**3``."""

    def __init__(self, coord, a, b=0.0):
        self.coords = [int(coord)]
        self.a, self.b = float(a), float(b)

    def energy(self, p, u, aux=None):
        q = _cols(u, self.coords)
        q2 = ad.square(q)
        return ad.sum(ad.add(ad.mul(q2, 0.5 * self.a), ad.mul(ad.square(q2), 0.25 * self.b)), axis=-1)

    def grad(self, p, u, aux=None):
        q = _cols(u, self.coords)
        return ad.add(ad.mul(q, self.a), ad.mul(ad.mul(ad.square(q), q), self.b))


class PendulumPotential(EnergyTerm):
    """``-m g l cos(theta)``."""

    def __init__(self, coord, mgl):
        self.coords = [int(coord)]
        self.mgl = float(mgl)

    def energy(self, p, u, aux=None):
        return ad.sum(ad.mul(ad.cos(_cols(u, self.coords)), -self.mgl), axis=-1)

    def grad(self, p, u, aux=None):
        return ad.mul(ad.sin(_cols(u, self.coords)), self.mgl)


def _poly_force(d, a, b):
    return a * d + b * d ** 3


class PlanarSpring(EnergyTerm):
    """Spring in the plane observed through its end-to-end displacement.

    ``coords = (qx, qy)`` is the displacement of the end-to-end vector from its
    rest value ``rest``; the elongation is ``|rest + q| - length`` and the
    tension ``a d + b d**3``.  Ground truth only (numpy).
    """

    def __init__(self, coords, rest, length, a, b):
        self.coords = [int(c) for c in coords]
        self.rest = np.asarray(rest, dtype=np.float64)
        self.length, self.a, self.b = float(length), float(a), float(b)

    def energy(self, p, u, aux=None):
        r = ad.value(u)[:, self.coords] + self.rest
        d = np.linalg.norm(r, axis=-1) - self.length
        return 0.5 * self.a * d ** 2 + 0.25 * self.b * d ** 4

    def grad(self, p, u, aux=None):
        r = ad.value(u)[:, self.coords] + self.rest
        norm = np.linalg.norm(r, axis=-1, keepdims=True)
        return _poly_force(norm - self.length, self.a, self.b) * r / norm


class ChainPotential(EnergyTerm):
    """Springs in a chain over absolute positions (ground truth, absolute mode).

    Spring ``i`` stretches by ``x_i - x_{i-1}``; ``x_0`` is either fixed at zero
    or read from auxiliary column ``aux_col`` (moving boundary).
    """

    def __init__(self, coords, a, b, aux_col=None):
        self.coords = [int(c) for c in coords]
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.aux_col = aux_col

    def _stretch(self, u, aux):
        x = ad.value(u)[:, self.coords]
        x0 = np.zeros((x.shape[0], 1)) if self.aux_col is None else ad.value(aux)[:, [self.aux_col]]
        return np.diff(np.concatenate([x0, x], axis=1), axis=1)

    def energy(self, p, u, aux=None):
        d = self._stretch(u, aux)
        return np.sum(0.5 * self.a * d ** 2 + 0.25 * self.b * d ** 4, axis=-1)

    def grad(self, p, u, aux=None):
        force = _poly_force(self._stretch(u, aux), self.a, self.b)
        g = force.copy()
        g[:, :-1] -= force[:, 1:]
        return g


class Energy:
    """Sum of terms covering every storage coordinate exactly once."""

    def __init__(self, terms, n_s):
        self.terms = list(terms)
        self.n_s = int(n_s)
        owned = [c for t in self.terms for c in t.coords]
        if sorted(owned) != list(range(self.n_s)):
            raise ComponentError(
                f"energy terms must cover storage coordinates 0..{self.n_s - 1} exactly once, got {sorted(owned)}"
            )
        self._perm = np.argsort(np.asarray(owned, dtype=np.intp))

    def init_params(self, rng):
        out = {}
        for t in self.terms:
            out.update(t.init_params(rng))
        return out

    def energy(self, p, u, aux=None):
        total = None
        for t in self.terms:
            e = t.energy(p, u, aux)
            total = e if total is None else ad.add(total, e)
        return total

    def grad(self, p, u, aux=None):
        pieces = [t.grad(p, u, aux) for t in self.terms]
        return ad.take(ad.concat(pieces, axis=-1), self._perm, axis=-1)


def energy(term, p, u, aux=None):
    return term.energy(p, u, aux)


def grad_energy(term, p, u, aux=None):
    return term.grad(p, u, aux)


# ---------------------------------------------------------------------------
# resistive characteristics


class ResistiveMap:
    """Maps the flows of ``ports`` (indices into the R block) to efforts.

    Efforts follow the passive-port convention: a dissipating element has
    ``e * f >= 0``.  The bivector then routes ``-e`` back into the storage
    flows, so a damper with ``e = d(v)`` produces the force ``-d(v)``.
    """

    ports: list[int]

    def init_params(self, rng) -> dict:
        return {}

    def __call__(self, p, f):
        raise NotImplementedError


class ScalarResistor(ResistiveMap):
    def __init__(self, port):
        self.ports = [int(port)]

    def law(self, f):
        raise NotImplementedError

    def __call__(self, p, f):
        return self.law(f)


class SignedPowerDamper(ScalarResistor):
    """``e = d sgn(f) |f|**(1/3)``."""

    def __init__(self, port, d):
        super().__init__(port)
        self.d = float(d)

    def law(self, f):
        return ad.mul(ad.spow(f, 1.0 / 3.0), self.d)


class LinearDamper(ScalarResistor):
    def __init__(self, port, d):
        super().__init__(port)
        self.d = float(d)

    def law(self, f):
        return ad.mul(f, self.d)


class LinearResistor(ScalarResistor):
    """``e = r f + offset``; a constant source in series is absorbed in ``offset``."""

    def __init__(self, port, r, offset=0.0):
        super().__init__(port)
        self.r, self.offset = float(r), float(offset)

    def law(self, f):
        return ad.add(ad.mul(f, self.r), self.offset)


class CubicResistor(ScalarResistor):
    def __init__(self, port, c):
        super().__init__(port)
        self.c = float(c)

    def law(self, f):
        return ad.mul(ad.mul(ad.square(f), f), self.c)


class ChuaDiode(ScalarResistor):
    """Piecewise-linear ``m1 v + (m0 - m1)/2 (|v + 1| - |v - 1|)``."""

    def __init__(self, port, m0=-8.0 / 7.0, m1=-5.0 / 7.0):
        super().__init__(port)
        self.m0, self.m1 = float(m0), float(m1)

    def law(self, f):
        kink = ad.sub(ad.absolute(ad.add(f, 1.0)), ad.absolute(ad.sub(f, 1.0)))
        return ad.add(ad.mul(f, self.m1), ad.mul(kink, 0.5 * (self.m0 - self.m1)))


class TunnelDiodeCubic(ScalarResistor):
    """``e = f**3 / 3 - f`` (negative resistance near the origin)."""

    def law(self, f):
        return ad.sub(ad.mul(ad.mul(ad.square(f), f), 1.0 / 3.0), f)


class NeuralResistor(ResistiveMap):
    """One scalar network per port, evaluated as a stack."""

    def __init__(self, name, ports, hidden=(200, 200)):
        self.ports = [int(x) for x in ports]
        self.net = MLP(name, 1, 1, hidden, stack=len(self.ports))

    def init_params(self, rng):
        return self.net.init_params(rng)

    def __call__(self, p, f):
        k = len(self.ports)
        batch = ad.value(f).shape[0]
        x = ad.reshape(ad.transpose(f), (k, batch, 1))
        y = self.net.forward(p, x)
        return ad.transpose(ad.reshape(y, (k, batch)))


class Resistors:
    """All resistive maps of a model; each R port handled by exactly one map."""

    def __init__(self, maps, n_r):
        self.maps = list(maps)
        self.n_r = int(n_r)
        owned = [c for m in self.maps for c in m.ports]
        if sorted(owned) != list(range(self.n_r)):
            raise ComponentError(f"need exactly one resistive map per port 0..{self.n_r - 1}, got {sorted(owned)}")
        self._perm = np.argsort(np.asarray(owned, dtype=np.intp))

    def init_params(self, rng):
        out = {}
        for m in self.maps:
            out.update(m.init_params(rng))
        return out

    def __call__(self, p, f_r):
        pieces = [m(p, ad.take(f_r, m.ports, axis=-1)) for m in self.maps]
        return ad.take(ad.concat(pieces, axis=-1), self._perm, axis=-1)


def resist(rmap, f, p=None):
    """Scalar convenience: effort of a single-port map at flow ``f``."""
    arr = np.asarray(f, dtype=np.float64).reshape(-1, 1)
    out = rmap(p or {}, arr)
    return float(out[0, 0]) if np.ndim(f) == 0 else np.asarray(out)[:, 0]


# ---------------------------------------------------------------------------
# external inputs


class ExternalSignal:
    def __call__(self, t):
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


class SumOfSines(ExternalSignal):
    """``sum_k A_k sin(w_k t + phi_k)``, or its time derivative."""

    def __init__(self, waves, derivative=False):
        self.waves = np.atleast_2d(np.asarray(waves, dtype=np.float64))
        if self.waves.shape[1] != 3:
            raise ComponentError("waves must be rows of (amplitude, angular velocity, phase)")
        self.derivative = bool(derivative)

    def __call__(self, t):
        a, w, ph = self.waves.T
        arg = np.multiply.outer(np.asarray(t, dtype=np.float64), w) + ph
        if self.derivative:
            return np.sum(a * w * np.cos(arg), axis=-1)
        return np.sum(a * np.sin(arg), axis=-1)

    def to_json(self):
        return {"kind": "sum_of_sines", "waves": self.waves.tolist(), "derivative": self.derivative}


class Constant(ExternalSignal):
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, t):
        return np.full(np.shape(t), self.value)

    def to_json(self):
        return {"kind": "constant", "value": self.value}


class SampledSeries(ExternalSignal):
    """Piecewise-linear interpolation of recorded samples."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ComponentError("times and values must be 1-D of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ComponentError("sample times must be strictly increasing")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        span = self.times[-1] - self.times[0]
        slack = 1e-12 * max(1.0, abs(span))
        if np.any(t < self.times[0] - slack) or np.any(t > self.times[-1] + slack):
            raise ComponentError(f"time outside sampled range [{self.times[0]}, {self.times[-1]}]")
        return np.interp(t, self.times, self.values)

    def to_json(self):
        return {"kind": "sampled", "times": self.times.tolist(), "values": self.values.tolist()}


def signal_from_json(obj) -> ExternalSignal:
    kind = obj["kind"]
    if kind == "sum_of_sines":
        return SumOfSines(obj["waves"], obj.get("derivative", False))
    if kind == "constant":
        return Constant(obj["value"])
    if kind == "sampled":
        return SampledSeries(obj["times"], obj["values"])
    raise ComponentError(f"unknown signal kind {kind!r}")


def signal(s: ExternalSignal, t):
    return s(t)


def evaluate_signals(signals, t):
    """Stack a list of signals at time(s) ``t`` into ``(..., n_signals)``."""
    if not signals:
        return np.zeros(np.shape(t) + (0,))
    return np.stack([np.asarray(s(t), dtype=np.float64) for s in signals], axis=-1)


# ---------------------------------------------------------------------------
# observation maps


class ObservationMap:
    """Per-coordinate scaling between observations and states.

    ``scaled`` maps a storage coordinate to the name of a log-scale parameter,
    e.g. velocity -> momentum with ``p = m v``.  Unlisted coordinates are the
    identity.
    """

    def __init__(self, n, scaled=None):
        self.n = int(n)
        self.scaled = dict(scaled or {})
        self._idx = np.array(sorted(self.scaled), dtype=np.intp)
        self._names = [self.scaled[i] for i in self._idx]
        self._identity = np.ones(self.n)
        self._identity[self._idx] = 0.0

    def scales(self, p):
        if not self._names:
            return self._identity.copy()
        logs = ad.concat([ad.reshape(p[k], (1,)) for k in self._names], axis=0)
        s = ad.exp(logs)
        if np.any(~(ad.value(s) > 0)):
            raise ComponentError("observation scale must be strictly positive")
        return ad.add(ad.scatter(s, self._idx, (self.n,)), self._identity)

    def to_state(self, p, obs):
        if ad.value(obs).shape[-1] != self.n:
            raise ComponentError(f"observation dimension {ad.value(obs).shape[-1]} != {self.n}")
        return ad.mul(obs, self.scales(p))

    def from_state(self, p, u):
        if ad.value(u).shape[-1] != self.n:
            raise ComponentError(f"state dimension {ad.value(u).shape[-1]} != {self.n}")
        return ad.div(u, self.scales(p))


def to_state(obs_map: ObservationMap, p, obs):
    return obs_map.to_state(p, obs)


def from_state(obs_map: ObservationMap, p, u):
    return obs_map.from_state(p, u)
