"""Port layouts, the skew coupling bivector and its bundle map.

Conventions: the combined basis is ordered storage (S), resistive (R), external
(I).  A bivector is held as the skew matrix ``B`` of its bundle map, so flows
are ``f = B @ e``.  The wedge term ``c * d_a ^ d_b`` corresponds to
``B[b, a] = c`` and ``B[a, b] = -c``; e.g. the canonical ``d_p ^ d_q`` gives
``qdot = dH/dp`` and ``pdot = -dH/dq``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

# (flow, effort) carried by each storage domain tag.
STORAGE_KINDS = {
    "mech-potential": ("velocity", "force"),
    "mech-kinetic": ("force", "velocity"),
    "rot-potential": ("angular-velocity", "torque"),
    "rot-kinetic": ("torque", "angular-velocity"),
    "electric": ("current", "voltage"),
    "magnetic": ("voltage", "current"),
    "hydraulic": ("volume-rate", "pressure"),
}

DUAL = {
    "velocity": "force",
    "force": "velocity",
    "angular-velocity": "torque",
    "torque": "angular-velocity",
    "current": "voltage",
    "voltage": "current",
    "volume-rate": "pressure",
    "pressure": "volume-rate",
}

# Cross-domain storage pairs: gyrator (inductor <-> rotor) and transformer
# (piston momentum <-> tank volume).
DEFAULT_CROSS_COUPLINGS = (("magnetic", "rot-kinetic"), ("mech-kinetic", "hydraulic"))

CIRCUIT_TAGS = {"electric", "magnetic"}


class LayoutError(ValueError):
    pass


@dataclass
class PortLayout:
    """Typed storage / resistive / external ports and their admissible couplings."""

    storage: list[tuple[str, str]]
    resistive: list[tuple[str, str]] = field(default_factory=list)
    external: list[tuple[str, str]] = field(default_factory=list)
    cross_couplings: tuple = DEFAULT_CROSS_COUPLINGS

    def __post_init__(self):
        self.storage = [tuple(x) for x in self.storage]
        self.resistive = [tuple(x) for x in self.resistive]
        self.external = [tuple(x) for x in self.external]
        self.cross_couplings = tuple(tuple(x) for x in self.cross_couplings)
        for name, tag in self.storage:
            if tag not in STORAGE_KINDS:
                raise LayoutError(f"unknown storage tag {tag!r} for {name!r}")
        for name, kind in self.resistive:
            if kind not in DUAL:
                raise LayoutError(f"unknown flow kind {kind!r} for resistive port {name!r}")
        for name, kind in self.external:
            if kind not in DUAL:
                raise LayoutError(f"unknown effort kind {kind!r} for external port {name!r}")
        names = self.names
        if len(set(names)) != len(names):
            raise LayoutError("port names must be unique")

    @property
    def n_s(self):
        return len(self.storage)

    @property
    def n_r(self):
        return len(self.resistive)

    @property
    def n_i(self):
        return len(self.external)

    @property
    def n(self):
        return self.n_s + self.n_r + self.n_i

    @property
    def names(self):
        return [p[0] for p in self.storage + self.resistive + self.external]

    @property
    def s_idx(self):
        return np.arange(0, self.n_s)

    @property
    def r_idx(self):
        return np.arange(self.n_s, self.n_s + self.n_r)

    @property
    def i_idx(self):
        return np.arange(self.n_s + self.n_r, self.n)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LayoutError(f"no port named {name!r}") from None

    def group(self, i: int) -> str:
        if i < self.n_s:
            return "S"
        if i < self.n_s + self.n_r:
            return "R"
        return "I"

    def kinds(self, i: int) -> tuple[str, str]:
        """(flow kind, effort kind) of basis element ``i``."""
        g = self.group(i)
        if g == "S":
            return STORAGE_KINDS[self.storage[i][1]]
        if g == "R":
            k = self.resistive[i - self.n_s][1]
            return k, DUAL[k]
        k = self.external[i - self.n_s - self.n_r][1]
        return DUAL[k], k

    def tag(self, i: int) -> str:
        g = self.group(i)
        if g == "S":
            return self.storage[i][1]
        if g == "R":
            return self.resistive[i - self.n_s][1]
        return self.external[i - self.n_s - self.n_r][1]

    def compatible(self, i: int, j: int) -> bool:
        if i == j:
            return False
        gi, gj = self.group(i), self.group(j)
        if gi == gj and gi in ("R", "I"):
            return False
        fi, ei = self.kinds(i)
        fj, ej = self.kinds(j)
        if fi == ej and fj == ei:
            return True
        if gi == "S" and gj == "S":
            pair = (self.tag(i), self.tag(j))
            return pair in self.cross_couplings or pair[::-1] in self.cross_couplings
        return False

    @property
    def compatibility_mask(self) -> np.ndarray:
        n = self.n
        m = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = self.compatible(i, j)
        return m

    @property
    def is_circuit(self) -> bool:
        return bool(self.storage) and all(tag in CIRCUIT_TAGS for _, tag in self.storage)

    def to_json(self) -> dict:
        return {
            "storage": [list(p) for p in self.storage],
            "resistive": [list(p) for p in self.resistive],
            "external": [list(p) for p in self.external],
            "cross_couplings": [list(p) for p in self.cross_couplings],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PortLayout":
        return cls(
            storage=obj["storage"],
            resistive=obj.get("resistive", []),
            external=obj.get("external", []),
            cross_couplings=obj.get("cross_couplings", DEFAULT_CROSS_COUPLINGS),
        )


FIXED_ZERO, FIXED_VALUE, LEARNABLE = "fixed-zero", "fixed-value", "learnable"


class Bivector:
    """Skew coupling matrix with per-entry status.

    Only the strict upper triangle is parameterised.  Fixed entries live in a
    constant base matrix; learnable entries are a separate vector (a model
    parameter), scattered into the upper triangle and mirrored with a minus
    sign, so skewness holds by construction and fixed entries cannot move.
    """

    def __init__(self, n: int, learnable=(), fixed=None, values=None):
        self.n = int(n)
        fixed = dict(fixed or {})
        pairs = [tuple(sorted(map(int, p))) for p in learnable]
        for i, j in pairs + list(fixed):
            if not (0 <= i < self.n and 0 <= j < self.n) or i == j:
                raise LayoutError(f"invalid bivector entry ({i}, {j}) for n={self.n}")
        if len(set(pairs)) != len(pairs):
            raise LayoutError("duplicate learnable entries")
        self.rows = np.array([p[0] for p in pairs], dtype=np.intp)
        self.cols = np.array([p[1] for p in pairs], dtype=np.intp)
        base = np.zeros((self.n, self.n))
        self.fixed = {}
        for (i, j), v in fixed.items():
            if (min(i, j), max(i, j)) in pairs:
                raise LayoutError(f"entry ({i}, {j}) is both fixed and learnable")
            if i > j:
                i, j, v = j, i, -v
            base[i, j] += v
            base[j, i] -= v
            self.fixed[(i, j)] = float(base[i, j])
        self.base = base
        self.values = np.zeros(len(pairs)) if values is None else np.array(values, dtype=np.float64)
        if self.values.shape != (len(pairs),):
            raise LayoutError("values must match the number of learnable entries")

    @property
    def n_learnable(self):
        return len(self.rows)

    @property
    def flat_upper(self):
        return self.rows * self.n + self.cols

    @property
    def flat_lower(self):
        return self.cols * self.n + self.rows

    def status(self, i: int, j: int) -> str:
        i, j = min(i, j), max(i, j)
        if np.any((self.rows == i) & (self.cols == j)):
            return LEARNABLE
        if (i, j) in self.fixed and self.fixed[(i, j)] != 0.0:
            return FIXED_VALUE
        return FIXED_ZERO

    def matrix(self, values=None):
        """Full skew matrix; ``values`` may be a tape node for training."""
        vals = self.values if values is None else values
        if self.n_learnable == 0:
            return self.base.copy()
        upper = ad.scatter(vals, self.flat_upper, (self.n, self.n))
        return ad.add(self.base, ad.sub(upper, ad.swap_last(upper)))

    def with_values(self, values) -> "Bivector":
        out = Bivector.__new__(Bivector)
        out.__dict__.update(self.__dict__)
        out.values = np.array(values, dtype=np.float64)
        return out

    def to_json(self, values=None) -> dict:
        m = self.matrix(self.values if values is None else values)
        iu, ju = np.triu_indices(self.n, 1)
        return {
            "n": self.n,
            "upper": [float(m[i, j]) for i, j in zip(iu, ju)],
            "status": [self.status(i, j) for i, j in zip(iu, ju)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Bivector":
        n = int(obj["n"])
        iu, ju = np.triu_indices(n, 1)
        learn, vals, fixed = [], [], {}
        for i, j, v, st in zip(iu, ju, obj["upper"], obj["status"]):
            if st == LEARNABLE:
                learn.append((int(i), int(j)))
                vals.append(float(v))
            elif st == FIXED_VALUE:
                fixed[(int(i), int(j))] = float(v)
            elif st != FIXED_ZERO:
                raise LayoutError(f"unknown entry status {st!r}")
            elif float(v) != 0.0:
                raise LayoutError(f"fixed-zero entry ({i}, {j}) has value {v}")
        return cls(n, learn, fixed, vals)

    @classmethod
    def from_matrix(cls, m, learnable_mask=None) -> "Bivector":
        """Bivector whose non-zero entries are fixed (or learnable where masked)."""
        m = np.asarray(m, dtype=np.float64)
        check_skew(m)
        n = m.shape[0]
        learn, vals, fixed = [], [], {}
        for i in range(n):
            for j in range(i + 1, n):
                if learnable_mask is not None and learnable_mask[i, j]:
                    learn.append((i, j))
                    vals.append(m[i, j])
                elif m[i, j] != 0.0:
                    fixed[(i, j)] = m[i, j]
        return cls(n, learn, fixed, vals)


def check_skew(m, tol=0.0):
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LayoutError(f"bivector matrix must be square, got {m.shape}")
    if np.max(np.abs(m + m.T), initial=0.0) > tol:
        raise LayoutError("bivector matrix is not skew-symmetric")


def wedge_matrix(n: int, terms) -> np.ndarray:
    """Skew matrix of ``sum c * d_a ^ d_b`` over ``terms = [(c, a, b), ...]``."""
    m = np.zeros((n, n))
    for c, a, b in terms:
        m[b, a] += c
        m[a, b] -= c
    return m


def _as_matrix(b):
    return b.matrix() if isinstance(b, Bivector) else b


def bundle_map_apply(b, e):
    """Flows ``f = B e`` for efforts of shape (n,) or (batch, n)."""
    m = _as_matrix(b)
    n = ad.value(m).shape[0]
    ev = ad.value(e)
    if ev.shape[-1] != n:
        raise LayoutError(f"effort dimension {ev.shape[-1]} does not match bivector dimension {n}")
    if ev.ndim == 1:
        return ad.getitem(ad.matmul(ad.reshape(e, (1, n)), ad.swap_last(m)), 0)
    return ad.matmul(e, ad.swap_last(m))


def pairing(e, f):
    """Natural pairing ``sum_i e_i f_i`` over the last axis."""
    ev, fv = ad.value(e), ad.value(f)
    if ev.shape != fv.shape:
        raise LayoutError(f"pairing of mismatched shapes {ev.shape} and {fv.shape}")
    return ad.sum(ad.mul(e, f), axis=-1)


def degeneracy_rank(b, block=None, rel_tol: float = 1e-8):
    """Numerical rank and nullspace basis of ``B[block][:, block]``.

    Singular values below ``rel_tol * sigma_max`` count as zero.  The
    nullspace basis is returned as columns.
    """
    m = np.asarray(ad.value(_as_matrix(b)), dtype=np.float64)
    if block is not None:
        block = np.asarray(block, dtype=np.intp)
        m = m[np.ix_(block, block)]
    k = m.shape[0]
    if k == 0:
        return 0, np.zeros((0, 0))
    _, s, vt = np.linalg.svd(m)
    if s[0] == 0.0:
        return 0, np.eye(k)
    rank = int(np.sum(s > rel_tol * s[0]))
    return rank, vt[rank:].T.copy()


class CausalBlocks(NamedTuple):
    SS: np.ndarray
    SR: np.ndarray
    SI: np.ndarray
    RS: np.ndarray
    RI: np.ndarray


def causal_blocks(b, layout: PortLayout) -> CausalBlocks:
    """Blocks used by the explicit S -> R -> S evaluation order."""
    m = _as_matrix(b)
    mv = ad.value(m)
    if mv.shape != (layout.n, layout.n):
        raise LayoutError(f"bivector of shape {mv.shape} does not fit a layout with n={layout.n}")
    s, r, i = layout.n_s, layout.n_s + layout.n_r, layout.n
    if np.any(mv[s:r, s:r] != 0.0):
        raise LayoutError("resistive-resistive block must be zero for explicit causality")
    return CausalBlocks(m[:s, :s], m[:s, s:r], m[:s, r:i], m[s:r, :s], m[s:r, r:i])
