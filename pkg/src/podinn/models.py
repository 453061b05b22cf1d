"""Trainable dynamics models: the port-based model and a Neural ODE baseline.

Both expose ``field(p, obs, ext)`` mapping batched observations ``(B, n_obs)``
and recorded external columns ``(B, n_ext)`` to observation rates.  ``p`` is a
name -> array mapping (or tape nodes when differentiating).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .components import (ChainPotential, ChuaDiode, CubicResistor, Energy, LinearDamper, LinearResistor,
                         NeuralPotential, NeuralResistor, ObservationMap, PendulumPotential, PlanarSpring, PolySpring,
                         QuadraticStorage, Resistors, SignedPowerDamper, TunnelDiodeCubic, evaluate_signals)
from .geometry import Bivector, LayoutError, PortLayout, wedge_matrix
from .integrators import integrate
from .nn import MLP
from .systems import SystemSpec, c_rest_vectors, get_system

BIVECTOR_PARAM = "B"


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# models


class PoDiNNModel:
    """Storage energies, a skew coupling bivector and resistive characteristics.

    The field is evaluated in explicit causal order: states, storage efforts,
    input efforts, resistive flows, resistive efforts, storage flows, and
    finally the observation rate.
    """

    kind = "podinn"

    def __init__(self, layout: PortLayout, bivector: Bivector, energy: Energy, resistors: Resistors,
                 obs_map: ObservationMap, effort_cols=(), aux_cols=(), mode="relative", build=None):
        self.layout = layout
        self.bivector = bivector
        self.energy = energy
        self.resistors = resistors
        self.obs_map = obs_map
        self.effort_cols = list(effort_cols)
        self.aux_cols = list(aux_cols)
        self.mode = mode
        self.build = dict(build or {})
        if bivector.n != layout.n:
            raise LayoutError(f"bivector dimension {bivector.n} != layout dimension {layout.n}")
        if energy.n_s != layout.n_s or obs_map.n != layout.n_s:
            raise LayoutError("energy / observation map do not match the storage dimension")
        if resistors.n_r != layout.n_r:
            raise LayoutError("one resistive map per resistive port is required")
        if len(self.effort_cols) != layout.n_i:
            raise LayoutError("one effort column per external port is required")
        s, r = layout.n_s, layout.n_s + layout.n_r
        if np.any(bivector.base[s:r, s:r] != 0.0) or np.any((bivector.rows >= s) & (bivector.rows < r)
                                                            & (bivector.cols >= s) & (bivector.cols < r)):
            raise LayoutError("resistive-resistive couplings must be fixed at zero")

    @property
    def n_obs(self):
        return self.layout.n_s

    def init_params(self, rng):
        p = {}
        p.update(self.energy.init_params(rng))
        p.update(self.resistors.init_params(rng))
        p[BIVECTOR_PARAM] = self.bivector.values.copy()
        return p

    def _split_ext(self, ext, batch):
        if ext is None:
            ext = np.zeros((batch, 0))
        ext = np.asarray(ext, dtype=np.float64)
        e_i = ext[:, self.effort_cols] if self.effort_cols else np.zeros((batch, 0))
        aux = ext[:, self.aux_cols] if self.aux_cols else None
        return e_i, aux

    def ports(self, p, obs, ext=None):
        """Full port vectors ``(e, f)``, each ``(B, n)`` in S, R, I order."""
        lay = self.layout
        batch = ad.value(obs).shape[0]
        e_i, aux = self._split_ext(ext, batch)
        u = self.obs_map.to_state(p, obs)
        e_s = self.energy.grad(p, u, aux)
        m = self.bivector.matrix(p[BIVECTOR_PARAM])
        mt = ad.swap_last(m)
        zeros_r = np.zeros((batch, lay.n_r))
        f_pre = ad.matmul(ad.concat([e_s, zeros_r, e_i], axis=-1), mt)
        f_r = ad.take(f_pre, lay.r_idx, axis=-1)
        e_r = self.resistors(p, f_r) if lay.n_r else zeros_r
        e = ad.concat([e_s, e_r, e_i], axis=-1)
        f = ad.matmul(e, mt)
        return e, f

    def field(self, p, obs, ext=None):
        lay = self.layout
        batch = ad.value(obs).shape[0]
        e_i, aux = self._split_ext(ext, batch)
        u = self.obs_map.to_state(p, obs)
        e_s = self.energy.grad(p, u, aux)
        m = self.bivector.matrix(p[BIVECTOR_PARAM])
        s, r = lay.n_s, lay.n_s + lay.n_r
        # transposed blocks so that rows of the batch multiply on the left
        if lay.n_r:
            f_r = ad.matmul(e_s, ad.swap_last(m[s:r, :s]))
            if lay.n_i:
                f_r = ad.add(f_r, ad.matmul(e_i, ad.swap_last(m[s:r, r:])))
            e_r = self.resistors(p, f_r)
        f_s = ad.matmul(e_s, ad.swap_last(m[:s, :s]))
        if lay.n_r:
            f_s = ad.add(f_s, ad.matmul(e_r, ad.swap_last(m[:s, s:r])))
        if lay.n_i:
            f_s = ad.add(f_s, ad.matmul(e_i, ad.swap_last(m[:s, r:])))
        return self.obs_map.from_state(p, f_s)

    def hamiltonian(self, p, obs, ext=None):
        batch = ad.value(obs).shape[0]
        _, aux = self._split_ext(ext, batch)
        return self.energy.energy(p, self.obs_map.to_state(p, obs), aux)

    def power_balance(self, p, obs, ext=None):
        """``(dH/dt, -(e^R.f^R + e^I.f^I))`` per batch item.

        ``f^I`` (reaction flows at the inputs) is only computed here; it never
        feeds back into the dynamics.
        """
        e, f = self.ports(p, obs, ext)
        e, f = ad.value(e), ad.value(f)
        s = self.layout.n_s
        lhs = np.sum(e[:, :s] * f[:, :s], axis=-1)
        rhs = -np.sum(e[:, s:] * f[:, s:], axis=-1)
        return lhs, rhs

    def reaction_flows(self, p, obs, ext=None):
        _, f = self.ports(p, obs, ext)
        return ad.value(f)[:, self.layout.n_s + self.layout.n_r:]

    def bivector_matrix(self, p):
        return np.asarray(ad.value(self.bivector.matrix(p[BIVECTOR_PARAM])))


class NeuralODEModel:
    """Unstructured baseline: a tanh network from (observation, inputs) to rates."""

    kind = "neural-ode"

    def __init__(self, n_obs, n_ext=0, hidden=(200, 200), build=None):
        self.n_obs_ = int(n_obs)
        self.n_ext = int(n_ext)
        self.net = MLPField("node", self.n_obs_ + self.n_ext, self.n_obs_, hidden)
        self.build = dict(build or {})

    @property
    def n_obs(self):
        return self.n_obs_

    def init_params(self, rng):
        return self.net.init_params(rng)

    def field(self, p, obs, ext=None):
        batch = ad.value(obs).shape[0]
        x = obs
        if self.n_ext:
            x = ad.concat([obs, np.asarray(ext, dtype=np.float64).reshape(batch, self.n_ext)], axis=-1)
        return self.net(p, x)


class MLPField:
    def __init__(self, prefix, n_in, n_out, hidden):
        self.mlp = MLP(prefix, n_in, n_out, hidden, stack=1)

    def init_params(self, rng):
        return self.mlp.init_params(rng)

    def __call__(self, p, x):
        batch = ad.value(x).shape[0]
        y = self.mlp.forward(p, ad.reshape(x, (1, batch, self.mlp.n_in)))
        return ad.reshape(y, (batch, self.mlp.n_out))


# ---------------------------------------------------------------------------
# per-system structure


@dataclass
class Structure:
    """Ground-truth port structure of a benchmark system.

    ``wedges`` lists ``(c, a, b)`` terms of the true bivector by port name.
    ``kinetic`` maps storage coordinates with a quadratic energy (and the
    matching observation scale) to ``(parameter name, true log value)``.
    ``potential_groups`` lists coordinate groups that get one network each
    in a learnable model.
    """

    storage: list
    resistive: list
    external: list
    wedges: list
    kinetic: dict
    potential_groups: list
    analytic_potentials: list
    analytic_resistors: list
    resistor_kinds: tuple = ("velocity",)
    canonical_pairs: list = field(default_factory=list)
    fixed_structure: dict = field(default_factory=dict)


def _mech3(spec: SystemSpec, absolute: bool, moving: bool) -> Structure:
    c = spec.constants
    qn = ["x1", "x2", "x3"] if absolute else ["q1", "q2", "q3"]
    storage = [(n, "mech-potential") for n in qn] + [(f"p{i}", "mech-kinetic") for i in (1, 2, 3)]
    kinetic = {3 + i: (f"log_m{i + 1}", np.log(c[f"m{i + 1}"])) for i in range(3)}
    lin = [c["k1"], c["k2"], c["k3"]]
    cub = c["k_cubic"]
    if moving:
        resistive = [("R1", "velocity"), ("R2", "velocity"), ("R3", "velocity")]
        external = [("v_b", "velocity")]
        wedges = []
        chain = [({"p1": 1.0, "v_b": -1.0}, qn[0], "R1"), ({"p2": 1.0, "p1": -1.0}, qn[1], "R2"),
                 ({"p3": 1.0, "p2": -1.0}, qn[2], "R3")]
        for left, q, rr in chain:
            for a, ca in left.items():
                if absolute:
                    wedges.append((ca, a, rr))
                else:
                    wedges += [(ca, a, q), (ca, a, rr)]
        if absolute:
            wedges += [(1.0, f"p{i}", qn[i - 1]) for i in (1, 2, 3)]
        dampers = [SignedPowerDamper(k, c[f"d{k + 1}"]) for k in range(3)]
    else:
        resistive = [("R1", "velocity"), ("R2", "velocity")]
        external = [("F", "force")]
        if absolute:
            wedges = [(1.0, f"p{i}", qn[i - 1]) for i in (1, 2, 3)]
        else:
            wedges = [(1.0, "p1", "q1"), (-1.0, "p1", "q2"), (1.0, "p2", "q2"), (-1.0, "p2", "q3"),
                      (1.0, "p3", "q3")]
        wedges += [(1.0, "p1", "R1"), (1.0, "p3", "R2"), (-1.0, "p2", "R2"), (1.0, "F", "p3")]
        dampers = [SignedPowerDamper(0, c["d1"]), SignedPowerDamper(1, c["d3"])]
    if absolute:
        pots = [ChainPotential([0, 1, 2], lin, [cub] * 3, aux_col=0 if moving else None)]
        groups = [[0, 1, 2]]
        canonical = [(f"p{i}", qn[i - 1]) for i in (1, 2, 3)]
    else:
        pots = [PolySpring(i, lin[i], cub) for i in range(3)]
        groups = [[0], [1], [2]]
        canonical = []
    return Structure(storage, resistive, external, wedges, kinetic, groups, pots, dampers,
                     canonical_pairs=canonical)


def _struct_c(spec):
    c = spec.constants
    storage = [(f"q{a}{i}", "mech-potential") for i in range(1, 6) for a in "xy"]
    storage += [("px1", "mech-kinetic"), ("py1", "mech-kinetic"), ("px2", "mech-kinetic"), ("py2", "mech-kinetic")]
    kinetic = {10: ("log_m1", np.log(c["m1"])), 11: ("log_m1", np.log(c["m1"])),
               12: ("log_m2", np.log(c["m2"])), 13: ("log_m2", np.log(c["m2"]))}
    # (end mass, start mass) per spring; None for an anchor
    ends = [(1, None), (2, None), (2, 1), (2, None), (1, None)]
    wedges = []
    for s, (end, start) in enumerate(ends, start=1):
        for a in "xy":
            wedges.append((1.0, f"p{a}{end}", f"q{a}{s}"))
            if start is not None:
                wedges.append((-1.0, f"p{a}{start}", f"q{a}{s}"))
    rest = c_rest_vectors()
    pots = [PlanarSpring([2 * s, 2 * s + 1], rest[s], c[f"l{s + 1}"], c[f"k{s + 1}_lin"], c[f"k{s + 1}_cub"])
            for s in range(5)]
    groups = [[2 * s, 2 * s + 1] for s in range(5)]
    return Structure(storage, [], [], wedges, kinetic, groups, pots, [])


def _struct_d(spec):
    c = spec.constants
    storage = [("Q", "electric"), ("phi", "magnetic")]
    kinetic = {0: ("log_C", 0.0), 1: ("log_L", np.log(1.0 / c["inv_L"]))}
    wedges = [(-1.0, "phi", "Q"), (-1.0, "R1", "Q"), (1.0, "J", "Q"), (-1.0, "R2", "phi")]
    res = [TunnelDiodeCubic(0), LinearResistor(1, c["R2"], -c["E_offset"])]
    return Structure(storage, [("R1", "voltage"), ("R2", "current")], [("J", "current")], wedges, kinetic, [], [],
                     res, resistor_kinds=("voltage", "current"))


def _struct_e(spec):
    c = spec.constants
    storage = [("Q1", "electric"), ("Q2", "electric"), ("phi", "magnetic")]
    kinetic = {0: ("log_C1", np.log(1.0 / c["alpha"])), 1: ("log_C2", 0.0), 2: ("log_L", np.log(1.0 / c["beta"]))}
    wedges = [(-1.0, "R1", "Q1"), (1.0, "R2", "Q1"), (1.0, "R1", "Q2"), (1.0, "phi", "Q2")]
    res = [LinearResistor(0, 1.0), ChuaDiode(1, c["m0"], c["m1"])]
    return Structure(storage, [("R1", "voltage"), ("R2", "voltage")], [], wedges, kinetic, [], [], res,
                     resistor_kinds=("voltage", "current"))


def _struct_f(spec):
    c = spec.constants
    storage = [("theta", "rot-potential"), ("p", "rot-kinetic"), ("phi", "magnetic")]
    kinetic = {1: ("log_J", np.log(c["m"] * c["l"] ** 2)), 2: ("log_L", np.log(c["L"]))}
    wedges = [(1.0, "p", "theta"), (c["K"], "phi", "p"), (-1.0, "d", "p"), (1.0, "E", "phi"), (-1.0, "R", "phi")]
    res = [SignedPowerDamper(0, c["d"]), CubicResistor(1, c["R"])]
    pots = [PendulumPotential(0, c["m"] * c["g"] * c["l"])]
    fixed = {"learnable": [("phi", "p")]}
    return Structure(storage, [("d", "angular-velocity"), ("R", "current")], [("E", "voltage")], wedges, kinetic,
                     [[0]], pots, res, resistor_kinds=("angular-velocity", "current"), fixed_structure=fixed)


def _struct_g(spec):
    c = spec.constants
    storage = [("V", "hydraulic"), ("q1", "mech-potential"), ("q2", "mech-potential"),
               ("p1", "mech-kinetic"), ("p2", "mech-kinetic")]
    kinetic = {3: ("log_m1", np.log(c["m1"])), 4: ("log_m2", np.log(c["m2"]))}
    wedges = [(c["a1"], "p1", "V"), (-c["a2"], "p2", "V"), (1.0, "p1", "q1"), (1.0, "p2", "q2"),
              (1.0, "p1", "R1"), (1.0, "p2", "R2"), (-1.0, "p2", "F")]
    tank = QuadraticStorage([0], ["log_tank"], init_log=[np.log(c["A"] / (c["rho"] * c["g"]))])
    pots = [tank, PolySpring(1, c["k_lin"], c["k_cubic"]), PolySpring(2, c["k_lin"], c["k_cubic"])]
    res = [SignedPowerDamper(0, c["d1"]), SignedPowerDamper(1, c["d2"])]
    return Structure(storage, [("R1", "velocity"), ("R2", "velocity")], [("F", "force")], wedges, kinetic,
                     [[0], [1], [2]], pots, res)


def _struct_toy1(spec):
    c = spec.constants
    storage = [("q", "mech-potential"), ("p", "mech-kinetic")]
    wedges = [(1.0, "p", "q"), (1.0, "p", "R1")]
    return Structure(storage, [("R1", "velocity")], [], wedges, {1: ("log_m", np.log(c["m"]))}, [[0]],
                     [PolySpring(0, c["k"])], [LinearDamper(0, c["d"])])


def _struct_toy2(spec):
    c = spec.constants
    storage = [("q1", "mech-potential"), ("q2", "mech-potential"), ("p1", "mech-kinetic"), ("p2", "mech-kinetic")]
    wedges = [(1.0, "p1", "q1"), (-1.0, "p1", "q2"), (1.0, "p2", "q2"), (1.0, "p1", "R1")]
    kinetic = {2: ("log_m1", np.log(c["m1"])), 3: ("log_m2", np.log(c["m2"]))}
    return Structure(storage, [("R1", "velocity")], [], wedges, kinetic, [[0], [1]],
                     [PolySpring(0, c["k1"]), PolySpring(1, c["k2"])], [LinearDamper(0, c["d"])])


_STRUCTURES = {
    "a": lambda s: _mech3(s, False, False),
    "a_abs": lambda s: _mech3(s, True, False),
    "b": lambda s: _mech3(s, False, True),
    "b_abs": lambda s: _mech3(s, True, True),
    "c": _struct_c,
    "d": _struct_d,
    "e": _struct_e,
    "f": _struct_f,
    "g": _struct_g,
    "toy1": _struct_toy1,
    "toy2": _struct_toy2,
}


def structure(system_id: str) -> Structure:
    spec = get_system(system_id)
    return _STRUCTURES[spec.id](spec)


def true_bivector_matrix(layout: PortLayout, wedges) -> np.ndarray:
    return wedge_matrix(layout.n, [(c, layout.index(a), layout.index(b)) for c, a, b in wedges])


def _kinetic_term(st: Structure, learnable: bool):
    coords = sorted(st.kinetic)
    names = [st.kinetic[k][0] for k in coords]
    init = [0.0 if learnable else st.kinetic[k][1] for k in coords]
    return QuadraticStorage(coords, names, init_log=init), ObservationMap(len(st.storage), {k: st.kinetic[k][0]
                                                                                            for k in coords})


# ---------------------------------------------------------------------------
# builders


def ground_truth_model(system_id: str):
    """Model with analytic components and the true bivector, plus its parameters."""
    spec = get_system(system_id)
    st = structure(spec.id)
    layout = PortLayout(st.storage, st.resistive, st.external)
    m = true_bivector_matrix(layout, st.wedges)
    mask = layout.compatibility_mask
    if np.any((m != 0) & ~mask):
        raise ModelError(f"true bivector of {spec.id} uses a coupling the layout forbids")
    biv = Bivector.from_matrix(m)
    kin, obs_map = _kinetic_term(st, learnable=False)
    terms = list(st.analytic_potentials) + ([kin] if st.kinetic else [])
    energy = Energy(terms, layout.n_s)
    res = Resistors(st.analytic_resistors, layout.n_r)
    model = PoDiNNModel(layout, biv, energy, res, obs_map, spec.effort_cols, spec.aux_cols, spec.mode,
                        build={"system": spec.id, "kind": "ground-truth"})
    params = model.init_params(np.random.default_rng(0))
    return model, params


def resistive_ports(st: Structure, n_d=None, n_g=None):
    """Assumed resistive ports: ``n_d`` ports, the first ``n_g`` with the first flow kind.

    Mechanical layouts have a single resistive flow kind (velocity).  For
    circuits the first kind is voltage, matching the ``n_g`` sweep convention.
    """
    if n_d is None and n_g is None:
        return list(st.resistive)
    n_d = len(st.resistive) if n_d is None else int(n_d)
    if n_d < 0:
        raise ModelError("n_d must be non-negative")
    kinds = st.resistor_kinds
    if len(kinds) == 1:
        if n_g not in (None, 0, n_d):
            raise ModelError("n_g only applies to layouts with two resistive flow kinds")
        return [(f"R{i + 1}", kinds[0]) for i in range(n_d)]
    if n_g is None:
        n_g = min(n_d, sum(1 for _, k in st.resistive if k == kinds[0]))
    if not 0 <= n_g <= n_d:
        raise ModelError("need 0 <= n_g <= n_d")
    return [(f"R{i + 1}", kinds[0] if i < n_g else kinds[1]) for i in range(n_d)]


def build_podinn(system_id: str, n_d=None, n_g=None, hidden=(200, 200), seed=0, fixed_structure=True):
    """Learnable model with the system's storage and input ports.

    Bivector entries allowed by the compatibility mask are learnable.  In
    absolute mode the storage block is fixed to the canonical position /
    momentum pairing; for systems with a known fixed pattern (the motor) only
    the listed entries are learnable when ``fixed_structure`` holds and the
    resistive ports match the truth.
    """
    spec = get_system(system_id)
    st = structure(spec.id)
    res_ports = resistive_ports(st, n_d, n_g)
    layout = PortLayout(st.storage, res_ports, st.external)
    rng = np.random.default_rng([int(seed), 1])
    n, s = layout.n, layout.n_s
    mask = layout.compatibility_mask
    learn, fixed = [], {}
    if st.fixed_structure and fixed_structure and res_ports == list(st.resistive):
        m = true_bivector_matrix(layout, st.wedges)
        learn_pairs = {tuple(sorted((layout.index(a), layout.index(b)))) for a, b in st.fixed_structure["learnable"]}
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in learn_pairs:
                    learn.append((i, j))
                elif m[i, j] != 0.0:
                    fixed[(i, j)] = m[i, j]
    else:
        canonical = {}
        for a, b in st.canonical_pairs:
            i, j = layout.index(a), layout.index(b)
            canonical[(min(i, j), max(i, j))] = wedge_matrix(n, [(1.0, i, j)])[min(i, j), max(i, j)]
        for i in range(n):
            for j in range(i + 1, n):
                if not mask[i, j]:
                    continue
                if st.canonical_pairs and i < s and j < s:
                    if (i, j) in canonical:
                        fixed[(i, j)] = canonical[(i, j)]
                    continue
                learn.append((i, j))
    values = np.array([rng.uniform(-0.1, 0.1) if (j >= s) else 0.0 for i, j in learn])
    biv = Bivector(n, learn, fixed, values)
    kin, obs_map = _kinetic_term(st, learnable=True)
    terms = []
    groups = st.potential_groups
    if groups:
        sizes = {len(g) for g in groups}
        if len(sizes) != 1:
            raise ModelError("potential groups must share one size to be stacked")
        aux = list(range(len(spec.aux_cols)))
        terms.append(NeuralPotential("U", groups, hidden, aux_cols=aux))
    if st.kinetic:
        terms.append(kin)
    energy = Energy(terms, layout.n_s)
    maps = [NeuralResistor("R", list(range(layout.n_r)), hidden)] if layout.n_r else []
    res = Resistors(maps, layout.n_r)
    build = {"system": spec.id, "kind": "podinn", "n_d": n_d, "n_g": n_g, "hidden": list(hidden),
             "seed": int(seed), "fixed_structure": bool(fixed_structure)}
    model = PoDiNNModel(layout, biv, energy, res, obs_map, spec.effort_cols, spec.aux_cols, spec.mode, build)
    params = model.init_params(np.random.default_rng([int(seed), 2]))
    return model, params


def build_node(system_id: str, hidden=(200, 200), seed=0):
    spec = get_system(system_id)
    model = NeuralODEModel(spec.n_obs, spec.n_ext, hidden,
                           build={"system": spec.id, "kind": "neural-ode", "hidden": list(hidden), "seed": int(seed)})
    return model, model.init_params(np.random.default_rng([int(seed), 2]))


def build_model(build: dict):
    """Rebuild a model (and fresh parameters) from its ``build`` record."""
    kind = build.get("kind")
    if kind == "podinn":
        return build_podinn(build["system"], build.get("n_d"), build.get("n_g"), tuple(build.get("hidden", (200, 200))),
                            build.get("seed", 0), build.get("fixed_structure", True))
    if kind == "neural-ode":
        return build_node(build["system"], tuple(build.get("hidden", (200, 200))), build.get("seed", 0))
    if kind == "ground-truth":
        return ground_truth_model(build["system"])
    raise ModelError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# rollouts


def rollout(model, params, obs0, times, signals=None, rtol=1e-9, atol=1e-7, max_steps=2_000_000):
    """Integrate the model field with dopri5 and sample at ``times``.

    ``obs0`` is ``(n_obs,)`` with ``signals`` a list of continuous-time signals
    (one per recorded external column), or ``(B, n_obs)`` with one such list
    per batch item.
    Returns ``(len(times), B, n_obs)`` (batch axis dropped for 1-D ``obs0``).
    """
    obs0 = np.asarray(obs0, dtype=np.float64)
    single = obs0.ndim == 1
    y0 = np.atleast_2d(obs0)
    batch, n_obs = y0.shape
    if signals is None:
        signals = [[] for _ in range(batch)]
    elif single:
        signals = [list(signals)]
    if len(signals) != batch:
        raise ModelError("one signal list per initial condition is required")

    def rhs(t, y, _params):
        ext = np.stack([evaluate_signals(sig, t) for sig in signals]) if signals[0] else np.zeros((batch, 0))
        rate = model.field(params, y.reshape(batch, n_obs), ext)
        return np.asarray(rate).reshape(-1)

    out = integrate(rhs, y0, times, rtol=rtol, atol=atol, max_steps=max_steps, nbatch=batch, compiled=False)
    return out[:, 0] if single else out
