"""Rollout metrics, coupling extraction and degeneracy reports."""
from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Bivector, PortLayout, degeneracy_rank

SCALE_NOTE = ("detected entries are normalised so that the largest magnitude is 1; "
              "the overall scale of energy and couplings is not identifiable")


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def step_mse(pred, truth):
    """MSE over the last (dimension) axis; shapes must match exactly."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim == 0 or pred.shape[-1] == 0:
        raise EvaluationError("need at least one observation dimension")
    return np.mean((pred - truth) ** 2, axis=-1)


def overall_mse(pred, truth):
    """``(overall, series)``: per-step MSE over dimensions and its mean over steps.

    With a leading trajectory axis the series is ``(n_traj, n_steps)`` and the
    overall value is also averaged over trajectories.
    """
    series = step_mse(pred, truth)
    if series.size == 0:
        raise EvaluationError("empty trajectories")
    return float(np.mean(series)), series


def vpt(series, theta, n=None):
    """Fraction of steps before the MSE first reaches ``theta``.

    ``series[k]`` is the error of predicted step ``k + 1``; the initial
    condition is not part of it.  Returns ``n_f / N`` where ``n_f`` is the
    largest step with every earlier (and its own) error below ``theta``.
    """
    s = np.asarray(series, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EvaluationError("vpt of an empty series")
    if not theta > 0:
        raise EvaluationError("theta must be positive")
    n = s.size if n is None else int(n)
    if n != s.size:
        raise EvaluationError(f"series has {s.size} steps, expected {n}")
    bad = np.flatnonzero(~(s < theta))  # NaN counts as an exceedance
    return (int(bad[0]) if bad.size else n) / n


@dataclass
class EvalReport:
    series: np.ndarray  # (n_traj, n_steps), initial condition excluded
    overall: float
    vpts: np.ndarray
    theta: float
    extra: dict = field(default_factory=dict)

    @property
    def mean_vpt(self):
        return float(np.mean(self.vpts))

    def to_json(self):
        return {"overall_mse": self.overall, "vpt": [float(v) for v in self.vpts], "mean_vpt": self.mean_vpt,
                "theta": self.theta, "n_traj": int(self.series.shape[0]), "n_steps": int(self.series.shape[1]),
                **self.extra}

    def write(self, out_dir):
        """``report.json`` plus ``mse_traj{i}.csv`` with (step, mse) rows."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
        for i, s in enumerate(self.series):
            write_series_csv(os.path.join(out_dir, f"mse_traj{i}.csv"), s, header=("step", "mse"))


def write_series_csv(path, values, header=("step", "value"), start=1):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, v in enumerate(np.asarray(values).reshape(-1), start=start):
            w.writerow([k, repr(float(v))])


def report_from_predictions(pred, truth, theta, extra=None) -> EvalReport:
    """Metrics for predictions ``(n_traj, n_steps + 1, d)`` including the initial state."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 3:
        raise EvaluationError("expected (n_traj, n_samples, n_obs) arrays")
    overall, series = overall_mse(pred[:, 1:], truth[:, 1:])
    vpts = np.array([vpt(s, theta) for s in series])
    return EvalReport(series, overall, vpts, float(theta), dict(extra or {}))


def evaluate(model, params, ds, theta, rtol=1e-9, atol=1e-7, extra=None) -> EvalReport:
    """Roll the model out from every initial condition of ``ds`` and score it."""
    from .models import rollout

    signals = [ds.signals(i) for i in range(ds.obs.shape[0])]
    pred = rollout(model, params, ds.obs[:, 0], ds.times, signals, rtol=rtol, atol=atol)
    return report_from_predictions(np.swapaxes(pred, 0, 1), ds.obs, theta, extra)


# ---------------------------------------------------------------------------
# couplings


def wedge_label(layout: PortLayout, i, j, c):
    """Entry ``B[i, j] = c`` written as a wedge term ``c d_j ^ d_i``."""
    names = layout.names
    return f"{c:+.4g} d{names[j]}^d{names[i]}"


@dataclass
class CouplingReport:
    detected: list
    suppressed: list
    scale: float
    rank: int
    nullspace: np.ndarray
    storage_names: list
    note: str = SCALE_NOTE
    warning: str = ""

    def to_json(self):
        return {
            "detected": self.detected,
            "suppressed": self.suppressed,
            "scale": self.scale,
            "note": self.note,
            "storage_rank": self.rank,
            "storage_dim": len(self.storage_names),
            "nullspace": [dict(zip(self.storage_names, map(float, col))) for col in self.nullspace.T],
            "warning": self.warning,
        }

    def pattern(self):
        """``{(i, j): sign}`` of detected entries, ``i < j``."""
        return {(d["i"], d["j"]): int(np.sign(d["value"])) for d in self.detected}


def _entries(b, layout, learnable_mask):
    if isinstance(b, Bivector):
        m = b.matrix()
        pairs = list(zip(b.rows.tolist(), b.cols.tolist()))
    else:
        m = np.asarray(b, dtype=np.float64)
        mask = layout.compatibility_mask if learnable_mask is None else np.asarray(learnable_mask, dtype=bool)
        iu, ju = np.nonzero(np.triu(mask, 1))
        pairs = list(zip(iu.tolist(), ju.tolist()))
    if m.shape != (layout.n, layout.n):
        raise EvaluationError(f"bivector of shape {m.shape} does not fit a layout with n={layout.n}")
    return m, pairs


def coupling_report(b, layout: PortLayout, factor=1000.0, learnable_mask=None, rank_tol=None) -> CouplingReport:
    """Detected versus effectively-zero couplings under the ratio rule.

    An entry counts as detected when its magnitude exceeds the largest learnable
    magnitude divided by ``factor``.  ``b`` is a :class:`Bivector` (its
    learnable entries are judged) or a matrix (entries allowed by
    ``learnable_mask``, default the layout's compatibility mask).  The rank and
    nullspace of the storage block use singular values above
    ``rank_tol * sigma_max`` (default ``1 / factor``).
    """
    if not factor > 1:
        raise EvaluationError("factor must exceed 1")
    m, pairs = _entries(b, layout, learnable_mask)
    vals = np.array([m[i, j] for i, j in pairs])
    scale = float(np.max(np.abs(vals))) if vals.size else 0.0
    rank_tol = 1.0 / factor if rank_tol is None else rank_tol
    rank, null = degeneracy_rank(m, layout.s_idx, rel_tol=rank_tol)
    storage_names = [n for n, _ in layout.storage]
    if scale == 0.0:
        msg = "all learnable bivector entries are zero; nothing to report"
        warnings.warn(msg, stacklevel=2)
        return CouplingReport([], [], 0.0, rank, null, storage_names, warning=msg)
    detected, suppressed = [], []
    for (i, j), v in zip(pairs, vals):
        rec = {"i": int(i), "j": int(j), "ports": [layout.names[i], layout.names[j]], "value": float(v),
               "normalized": float(v / scale), "wedge": wedge_label(layout, i, j, v / scale)}
        (detected if abs(v) > scale / factor else suppressed).append(rec)
    return CouplingReport(detected, suppressed, scale, rank, null, storage_names)


def resistor_curves(model, params, grid):
    """Characteristic curves ``e = R_k(f)`` sampled on ``grid``: ``(n_r, len(grid))``."""
    grid = np.asarray(grid, dtype=np.float64)
    n_r = model.layout.n_r
    f = np.repeat(grid[:, None], n_r, axis=1)
    e = np.asarray(model.resistors(params, f))
    return e.T


def match_resistors(learned, truth, grid=None, allow_flip=True):
    """Minimum-cost assignment between learned and true characteristic curves.

    ``learned`` and ``truth`` are ``(n, len(grid))`` curves on a symmetric grid.
    With ``allow_flip`` a learned curve may also be matched in its mirrored
    form ``-R(-f)``, which describes the same dynamics when the sign of the
    port's couplings flips.  Returns ``(perm, flips, cost)`` with
    ``perm[k]`` the learned index assigned to true port ``k``.
    """
    learned = np.atleast_2d(np.asarray(learned, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if learned.shape[0] < truth.shape[0]:
        raise EvaluationError("fewer learned resistive ports than true ones")

    def norm(c):
        s = np.max(np.abs(c), axis=-1, keepdims=True)
        return c / np.where(s > 0, s, 1.0)

    lt, tt = norm(learned), norm(truth)
    direct = ((tt[:, None, :] - lt[None, :, :]) ** 2).mean(-1)
    if allow_flip:
        mirrored = ((tt[:, None, :] + lt[None, :, ::-1]) ** 2).mean(-1)
        cost = np.minimum(direct, mirrored)
        flip_choice = mirrored < direct
    else:
        cost, flip_choice = direct, np.zeros_like(direct, dtype=bool)
    rows, cols = linear_sum_assignment(cost)
    perm = cols[np.argsort(rows)]
    flips = flip_choice[np.arange(truth.shape[0]), perm]
    return perm, flips, float(cost[rows, cols].sum())


def gauge_fix(m, layout: PortLayout, perm=None, flips=None):
    """Apply a resistive-port permutation and sign flips to a learned matrix.

    Row/column ``s + k`` of the result is learned resistive port
    ``perm[k]``, negated when ``flips[k]``.  Extra learned ports are dropped.
    """
    m = np.asarray(m, dtype=np.float64)
    s, r = layout.n_s, layout.n_s + layout.n_r
    n_keep = layout.n_r if perm is None else len(perm)
    perm = np.arange(layout.n_r) if perm is None else np.asarray(perm, dtype=np.intp)
    flips = np.zeros(n_keep, dtype=bool) if flips is None else np.asarray(flips, dtype=bool)
    order = np.concatenate([np.arange(s), s + perm, np.arange(r, layout.n)])
    sign = np.ones(order.size)
    sign[s:s + n_keep][flips] = -1.0
    return m[np.ix_(order, order)] * np.outer(sign, sign)


def pattern_matches(learned, truth, layout: PortLayout, factor=1000.0, learnable_mask=None):
    """Whether detected entries of ``learned`` have exactly the true zero/nonzero/sign pattern.

    Both matrices live on the same layout (apply :func:`gauge_fix` first for
    resistive ports).  Returns ``(ok, report)``.
    """
    rep = coupling_report(learned, layout, factor, learnable_mask)
    t = np.asarray(truth, dtype=np.float64)
    _, pairs = _entries(learned, layout, learnable_mask)
    want = {(i, j): int(np.sign(t[i, j])) for i, j in pairs if t[i, j] != 0.0}
    return rep.pattern() == want, rep


def odd_curves(curves, tol=1e-6):
    """Which curves on a symmetric grid satisfy ``R(-f) = -R(f)``.

    Flipping the sign of a port with an odd characteristic leaves the dynamics
    unchanged, so the signs of its couplings are a free gauge.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    scale = np.max(np.abs(curves), axis=-1)
    return np.max(np.abs(curves + curves[:, ::-1]), axis=-1) <= tol * np.where(scale > 0, scale, 1.0)


def pattern_matches_up_to_gauge(learned, truth, layout: PortLayout, learned_curves, truth_curves, factor=1000.0,
                                learnable_mask=None):
    """:func:`pattern_matches` after aligning resistive ports with the truth.

    Ports are assigned by :func:`match_resistors`; a true port with an odd
    characteristic may additionally take either sign.  Returns
    ``(ok, report, perm, flips)`` for the first gauge that matches (or the
    assigned one when none does).
    """
    truth_curves = np.atleast_2d(np.asarray(truth_curves, dtype=np.float64))
    if layout.n_r == 0:
        ok, rep = pattern_matches(learned, truth, layout, factor, learnable_mask)
        return ok, rep, np.zeros(0, dtype=np.intp), np.zeros(0, dtype=bool)
    perm, flips, _ = match_resistors(learned_curves, truth_curves)
    free = np.flatnonzero(odd_curves(truth_curves))
    first = None
    for choice in range(2 ** free.size):
        trial = flips.copy()
        for bit, k in enumerate(free):
            trial[k] ^= bool((choice >> bit) & 1)
        fixed = gauge_fix(learned, layout, perm, trial)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ok, rep = pattern_matches(fixed, truth, layout, factor, learnable_mask)
        if ok:
            return True, rep, perm, trial
        if first is None:
            first = (rep, trial)
    return False, first[0], perm, first[1]


# ---------------------------------------------------------------------------
# circuit laws

_SYMBOL = {"current": "I", "voltage": "V"}


def _fmt_term(c, sym, first):
    mag = abs(c)
    coef = "" if np.isclose(mag, 1.0, rtol=1e-3) else f"{mag:.3g}*"
    if first:
        return ("-" if c < 0 else "") + coef + sym
    return (" - " if c < 0 else " + ") + coef + sym


def kirchhoff_view(report_or_matrix, layout: PortLayout, factor=1000.0):
    """Port flows as signed sums of efforts: one law per storage and resistive port.

    Storage rows are current laws at capacitors (voltage laws at inductors);
    resistive rows give the flow through each resistive element.
    Accepts a :class:`CouplingReport` (detected entries, normalised) or a
    matrix.  Only circuit layouts (capacitors and inductors) are rendered;
    other layouts return a one-line note.
    """
    if not layout.is_circuit:
        return ["unsupported domain: Kirchhoff listing needs an electric/magnetic storage layout"]
    n = layout.n
    if isinstance(report_or_matrix, CouplingReport):
        m = np.zeros((n, n))
        for d in report_or_matrix.detected:
            m[d["i"], d["j"]] = d["normalized"]
            m[d["j"], d["i"]] = -d["normalized"]
    else:
        m = np.asarray(report_or_matrix, dtype=np.float64)
        scale = np.max(np.abs(m), initial=0.0)
        if scale > 0:
            m = np.where(np.abs(m) > scale / factor, m / scale, 0.0)
    names = layout.names
    lines = []
    for i in np.concatenate([layout.s_idx, layout.r_idx]):
        flow, _ = layout.kinds(i)
        lhs = f"{_SYMBOL.get(flow, flow)}_{names[i]}"
        terms = []
        for j in range(n):
            if j == i or m[i, j] == 0.0:
                continue
            _, effort = layout.kinds(j)
            terms.append(_fmt_term(m[i, j], f"{_SYMBOL.get(effort, effort)}_{names[j]}", not terms))
        lines.append(f"{lhs} = {''.join(terms) if terms else '0'}")
    return lines
