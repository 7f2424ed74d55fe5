"""Factor graph container, normal equations, LM/GN solver and marginalization."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .. import manifold as mf
from ..errors import ContractViolation
from .factors import DensePrior, Factor, VisualFactor, huber_cost, huber_weight, visual_batch


class FactorGraph:
    """Variables (current assignment) plus the factors that constrain them."""

    def __init__(self):
        self.values: dict[Hashable, object] = {}
        self.factors: list[Factor] = []

    def add_variable(self, key, value) -> None:
        if key in self.values:
            raise ContractViolation(f"variable {key!r} already exists")
        self.values[key] = value

    def add_factor(self, factor: Factor) -> Factor:
        for k in factor.keys:
            if k not in self.values:
                raise ContractViolation(f"factor references unknown variable {k!r}")
        self.factors.append(factor)
        return factor

    def remove_factors(self, doomed: Iterable[Factor]) -> None:
        ids = {id(f) for f in doomed}
        self.factors = [f for f in self.factors if id(f) not in ids]

    def remove_variable(self, key) -> None:
        if any(key in f.keys for f in self.factors):
            raise ContractViolation(f"variable {key!r} still has factors")
        del self.values[key]

    def factors_of(self, key) -> list[Factor]:
        return [f for f in self.factors if key in f.keys]

    def factor_index(self) -> dict:
        """Map every variable key to the factors touching it."""
        idx: dict = defaultdict(list)
        for f in self.factors:
            for k in f.keys:
                idx[k].append(f)
        return idx

    def dim(self, key) -> int:
        return mf.tangent_dim(self.values[key])

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.values = dict(self.values)
        g.factors = list(self.factors)
        return g


def total_cost(graph: FactorGraph, values: dict | None = None, breakdown: bool = False):
    """Sum of squared whitened residuals; visual terms use their robust penalty."""
    values = graph.values if values is None else values
    per: dict[str, float] = defaultdict(float)
    for kind, c in _factor_costs(graph, values):
        per[kind] += c
    total = float(sum(per.values()))
    return (total, dict(per)) if breakdown else total


def _factor_costs(graph: FactorGraph, values: dict):
    visual: dict[Hashable, list[VisualFactor]] = defaultdict(list)
    for f in graph.factors:
        if isinstance(f, VisualFactor):
            visual[f.keys[0]].append(f)
        else:
            yield f.kind, f.cost(values)
    for xkey, fs in visual.items():
        r, _, _, _ = _visual_group(values, xkey, fs)
        norms = np.sqrt(np.einsum("ij,ij->i", r, r))
        yield "visual", float(np.sum(huber_cost_vec(norms, fs)))


def huber_cost_vec(norms: np.ndarray, fs: list[VisualFactor]) -> np.ndarray:
    ks = {f.huber for f in fs}
    if len(ks) == 1:
        return huber_cost(norms, ks.pop())
    return np.array([huber_cost(np.array([n]), f.huber)[0] for n, f in zip(norms, fs)])


def huber_weight_vec(norms: np.ndarray, fs: list[VisualFactor]) -> np.ndarray:
    ks = {f.huber for f in fs}
    if len(ks) == 1:
        return huber_weight(norms, ks.pop())
    return np.array([huber_weight(np.array([n]), f.huber)[0] for n, f in zip(norms, fs)])


def _visual_group(values, xkey, fs: list[VisualFactor]):
    f0 = fs[0]
    pts = np.array([values[f.keys[1]] for f in fs])
    pix = np.array([f.pixel for f in fs])
    if all(f.model is f0.model and f.sigma == f0.sigma for f in fs):
        return visual_batch(values[xkey], pts, pix, f0.model, f0.sigma)
    parts = [visual_batch(values[xkey], pts[i : i + 1], pix[i : i + 1], f.model, f.sigma) for i, f in enumerate(fs)]
    return tuple(np.concatenate(p) for p in zip(*parts))


@dataclass
class Layout:
    keys: list
    offsets: dict
    dims: dict
    n_keep: int
    landmarks: list

    @property
    def size(self) -> int:
        return self.n_keep + 3 * len(self.landmarks)


def eliminable_landmarks(graph: FactorGraph) -> set:
    """3-dim variables touched only by visual factors (block-diagonal in the Hessian)."""
    cand = {k for k, v in graph.values.items() if not hasattr(v, "boxplus") and np.size(v) == 3}
    for f in graph.factors:
        if not isinstance(f, VisualFactor):
            cand.difference_update(f.keys)
        elif f.keys[0] in cand:
            cand.discard(f.keys[0])
    return cand


def make_layout(graph: FactorGraph, keys: list | None = None, schur: bool = True) -> Layout:
    keys = list(graph.values) if keys is None else list(keys)
    elim = eliminable_landmarks(graph) if schur else set()
    keep = [k for k in keys if k not in elim]
    lms = [k for k in keys if k in elim]
    offsets, dims = {}, {}
    o = 0
    for k in keep + lms:
        d = graph.dim(k)
        offsets[k], dims[k] = o, d
        o += d
    return Layout(keep + lms, offsets, dims, sum(dims[k] for k in keep), lms)


def build_system(graph: FactorGraph, values: dict, layout: Layout, robust: bool = True, factors=None):
    """Gauss-Newton normal equations ``H = J^T J``, ``g = J^T r`` and the cost.

    Visual factors are reweighted (IRLS) by their Huber weights when ``robust``.
    """
    n = layout.size
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    visual: dict[Hashable, list[VisualFactor]] = defaultdict(list)
    off = layout.offsets
    for f in graph.factors if factors is None else factors:
        if isinstance(f, VisualFactor):
            visual[f.keys[0]].append(f)
            continue
        r, Js = f.linearize(values)
        cost += float(r @ r)
        idx = np.concatenate([np.arange(off[k], off[k] + layout.dims[k]) for k in f.keys])
        J = np.hstack(Js)
        g[idx] += J.T @ r
        H[np.ix_(idx, idx)] += J.T @ J
    for xkey, fs in visual.items():
        r, Jx, JL, _ = _visual_group(values, xkey, fs)
        norms = np.sqrt(np.einsum("ij,ij->i", r, r))
        cost += float(np.sum(huber_cost_vec(norms, fs)))
        if robust:
            w = huber_weight_vec(norms, fs)
            sw = np.sqrt(w)
            r = r * sw[:, None]
            Jx = Jx * sw[:, None, None]
            JL = JL * sw[:, None, None]
        ox = off[xkey]
        H[ox : ox + 15, ox : ox + 15] += np.einsum("kai,kaj->ij", Jx, Jx)
        g[ox : ox + 15] += np.einsum("kai,ka->i", Jx, r)
        ols = np.array([off[f.keys[1]] for f in fs])
        Hxl = np.einsum("kai,kaj->kij", Jx, JL)
        Hll = np.einsum("kai,kaj->kij", JL, JL)
        gl = np.einsum("kai,ka->ki", JL, r)
        a15 = np.arange(15)
        a3 = np.arange(3)
        cols = ols[:, None, None] + a3[None, None, :]
        H[ox + a15[None, :, None], cols] += Hxl
        H[cols.transpose(0, 2, 1), ox + a15[None, None, :]] += Hxl.transpose(0, 2, 1)
        rows = ols[:, None, None] + a3[None, :, None]
        H[rows, cols] += Hll
        g[ols[:, None] + a3[None, :]] += gl
    return H, g, cost


def solve_system(H: np.ndarray, g: np.ndarray, layout: Layout, damping: float = 0.0, schur: bool = True) -> np.ndarray:
    """Solve ``(H + damping * diag(H)) d = -g``, eliminating landmark blocks first."""
    A = H.copy()
    if damping > 0.0:
        d = np.diag(A).copy()
        A[np.diag_indices_from(A)] += damping * np.maximum(d, 1e-9)
    ns = layout.n_keep
    m = len(layout.landmarks)
    try:
        if not schur or m == 0:
            return _chol_solve(A, -g)
        Hss = A[:ns, :ns]
        Hsl = A[:ns, ns:]
        blocks = np.stack([A[ns + 3 * i : ns + 3 * i + 3, ns + 3 * i : ns + 3 * i + 3] for i in range(m)])
        inv = np.linalg.inv(blocks)
        gs, gl = g[:ns], g[ns:]
        W = np.einsum("smi,mij->smj", Hsl.reshape(ns, m, 3), inv).reshape(ns, 3 * m)
        dx = _chol_solve(Hss - W @ Hsl.T, -(gs - W @ gl)) if ns else np.zeros(0)
        rhs = (gl + Hsl.T @ dx).reshape(m, 3)
        dl = -np.einsum("mij,mj->mi", inv, rhs).reshape(-1)
        return np.concatenate([dx, dl])
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("normal equations are singular; is the gauge fixed?") from exc


def _chol_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    c = cho_factor(0.5 * (A + A.T), check_finite=False)
    if not np.all(np.diag(c[0]) > 0.0):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return cho_solve(c, b, check_finite=False)


def apply_step(values: dict, layout: Layout, step: np.ndarray) -> dict:
    out = dict(values)
    for k in layout.keys:
        o, d = layout.offsets[k], layout.dims[k]
        out[k] = mf.boxplus(values[k], step[o : o + d])
    return out


@dataclass
class OptimizeReport:
    method: str
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    step_norm: float = math.inf
    breakdown_initial: dict = field(default_factory=dict)
    breakdown_final: dict = field(default_factory=dict)
    system: tuple | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "diverged": self.diverged,
            "cost_breakdown_initial": self.breakdown_initial,
            "cost_breakdown_final": self.breakdown_final,
        }


def optimize(
    graph: FactorGraph,
    method: str = "levenberg_marquardt",
    max_iters: int = 15,
    tol: float = 1e-10,
    schur: bool = True,
    damping: float = 1e-4,
    rel_tol: float = 0.0,
    values: dict | None = None,
    breakdown: bool = False,
):
    """Nonlinear least squares on the manifold; returns ``(values, report)``.

    ``breakdown`` adds per-factor-kind costs to the report (extra evaluations).

    Levenberg-Marquardt only accepts steps that do not increase the cost.
    Gauss-Newton always steps and flags ``diverged`` if the cost went up.
    """
    if method in ("lm", "levenberg_marquardt"):
        method = "levenberg_marquardt"
    elif method in ("gn", "gauss_newton"):
        method = "gauss_newton"
    else:
        raise ContractViolation(f"unknown optimization method {method!r}")
    values = dict(graph.values if values is None else values)
    layout = make_layout(graph, schur=schur)
    rep = OptimizeReport(method)
    if breakdown:
        rep.breakdown_initial = total_cost(graph, values, breakdown=True)[1]
    lam = damping
    cost = math.nan
    if max_iters < 1:
        cost = rep.initial_cost = total_cost(graph, values)
        rep.costs.append(cost)
    for it in range(1, max_iters + 1):
        H, g, c = build_system(graph, values, layout)
        if it == 1:
            cost = rep.initial_cost = c
            rep.costs.append(c)
        rep.system = (H, layout)
        rep.iterations = it
        if method == "gauss_newton":
            step = solve_system(H, g, layout, 0.0, schur)
            if not np.all(np.isfinite(step)):
                raise ContractViolation("Gauss-Newton produced a non-finite step")
            values = apply_step(values, layout, step)
            new = total_cost(graph, values)
            # rises at the roundoff floor of the starting cost are not divergence
            if new > cost * (1.0 + 1e-12) + 1e-15 * rep.initial_cost + 1e-300:
                rep.diverged = True
        else:
            for _ in range(12):
                step = solve_system(H, g, layout, lam, schur)
                trial = apply_step(values, layout, step)
                new = total_cost(graph, trial)
                if np.isfinite(new) and new <= cost:
                    values = trial
                    lam = max(lam / 10.0, 1e-12)
                    break
                lam *= 10.0
            else:
                rep.converged = True
                break
        rep.step_norm = float(np.linalg.norm(step))
        improvement = cost - new
        cost = new
        rep.costs.append(cost)
        if rep.diverged:
            break
        if rep.step_norm < tol or (rel_tol > 0.0 and improvement <= rel_tol * max(cost, 1e-300)):
            rep.converged = True
            break
    rep.final_cost = cost
    if breakdown:
        rep.breakdown_final = total_cost(graph, values, breakdown=True)[1]
    return values, rep


def information_matrix(graph: FactorGraph, keys: list | None = None, values: dict | None = None) -> np.ndarray:
    """Full Gauss-Newton information matrix (no elimination) in ``keys`` order."""
    values = graph.values if values is None else values
    layout = make_layout(graph, keys, schur=False)
    return build_system(graph, values, layout)[0]


def marginal_covariance(graph: FactorGraph, key, values: dict | None = None, system=None) -> np.ndarray:
    """Covariance block of one variable from the Schur-reduced information.

    ``system`` may pass a prebuilt ``(H, layout)`` to skip relinearization.
    """
    if system is None:
        values = graph.values if values is None else values
        layout = make_layout(graph, schur=True)
        H = build_system(graph, values, layout)[0]
    else:
        H, layout = system
    ns = layout.n_keep
    m = len(layout.landmarks)
    Hss = H[:ns, :ns]
    if m:
        Hsl = H[:ns, ns:]
        blocks = np.stack([H[ns + 3 * i : ns + 3 * i + 3, ns + 3 * i : ns + 3 * i + 3] for i in range(m)])
        W = np.einsum("smi,mij->smj", Hsl.reshape(ns, m, 3), np.linalg.inv(blocks)).reshape(ns, 3 * m)
        Hss = Hss - W @ Hsl.T
    o, d = layout.offsets[key], layout.dims[key]
    E = np.zeros((ns, d))
    E[o : o + d] = np.eye(d)
    try:
        C = _chol_solve(Hss, E)[o : o + d]
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("information matrix is singular") from exc
    return 0.5 * (C + C.T)


def dense_prior_from_information(keys, dims, values: dict, H: np.ndarray, g: np.ndarray, rel_eps: float = 1e-14):
    """Factor ``H, g`` into a residual ``r0 + S δ`` with ``S^T S = H`` and ``S^T r0 = g``."""
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    top = float(lam[-1]) if len(lam) else 0.0
    if top <= 0.0:
        return None
    keep = lam > rel_eps * top
    sl = np.sqrt(lam[keep])
    S = sl[:, None] * V[:, keep].T
    r0 = (V[:, keep].T @ g) / sl
    return DensePrior(keys, values, r0, S, dims)


def marginalize(graph: FactorGraph, keys: Iterable, values: dict | None = None) -> FactorGraph:
    """Schur-complement the given variables out into a dense prior on their blanket.

    The system is linearized at ``values`` (default: the graph's assignment)
    and never relinearized.  Removing a landmark that still has visual factors
    to a remaining frame is refused.
    """
    values = graph.values if values is None else values
    M = list(dict.fromkeys(keys))
    mset = set(M)
    for k in M:
        if k not in graph.values:
            raise ContractViolation(f"cannot marginalize unknown variable {k!r}")
    for f in graph.factors:
        if isinstance(f, VisualFactor) and f.keys[1] in mset and f.keys[0] not in mset:
            raise ContractViolation(
                f"landmark {f.keys[1]!r} is still observed by remaining frame {f.keys[0]!r}"
            )
    touched = [f for f in graph.factors if mset.intersection(f.keys)]
    blanket = []
    for f in touched:
        for k in f.keys:
            if k not in mset and k not in blanket:
                blanket.append(k)
    blanket.sort(key=list(graph.values).index)

    out = graph.copy()
    out.remove_factors(touched)
    for k in M:
        del out.values[k]
    if not touched or not blanket:
        return out

    sub = FactorGraph()
    sub.values = {k: values[k] for k in M + blanket}
    sub.factors = touched
    layout = make_layout(sub, M + blanket, schur=False)
    H, g, _ = build_system(sub, sub.values, layout)
    nm = sum(layout.dims[k] for k in M)
    Hmm, Hmb, Hbb = H[:nm, :nm], H[:nm, nm:], H[nm:, nm:]
    gm, gb = g[:nm], g[nm:]
    # pseudo-inverse tolerates directions the removed variables leave unconstrained
    lam, V = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
    top = float(lam[-1]) if len(lam) else 0.0
    ok = lam > 1e-14 * max(top, 1e-300)
    Hinv = (V[:, ok] / lam[ok]) @ V[:, ok].T
    Hp = Hbb - Hmb.T @ Hinv @ Hmb
    gp = gb - Hmb.T @ Hinv @ gm
    prior = dense_prior_from_information(blanket, [layout.dims[k] for k in blanket], values, Hp, gp)
    if prior is not None:
        out.factors.append(prior)
    return out
