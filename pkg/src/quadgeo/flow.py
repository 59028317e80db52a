"""Objective generation and checking, normalized-gradient trajectories on M,
and the two empirical geodesic-diameter estimators.

The trajectory integrator follows the unit-norm constrained gradient with a
fixed nominal step (reproducibility over adaptivity); the step is only halved
when the objective would stop increasing, which happens in a small
neighborhood of a maximum.  Trajectories through saddles are not continued:
they terminate and report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .core import Polyline, Quadric, QuadgeoError, SceneSystem
from .manifold import (
    RetractionError,
    constraint_gradients,
    hessian_pencil,
    projected_gradient,
    retract,
    retract_batch,
    sample_points,
    _feasible_mask,
)
from .util import child_seed, orthonormal_complement

STALL_REL = 1e-7  # ||gradMP|| below this times the gradP scale counts as critical


class TrajectoryError(QuadgeoError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ComponentError(QuadgeoError):
    pass


@dataclass(frozen=True)
class Trajectory:
    polyline: Polyline
    terminal: str  # critical_point | max_steps | left_ball | stalled
    arc_length: float


@dataclass(frozen=True)
class CriticalPoint:
    x: np.ndarray
    value: float
    index: int
    nondegenerate: bool


@dataclass(frozen=True)
class MorseReport:
    critical_points: tuple
    distinct_values: bool
    nondegenerate: bool
    warnings: tuple = ()


@dataclass(frozen=True)
class ComponentDiameter:
    component: int
    size: int
    diameter: float
    pair: tuple  # (i, j) indices into the sample array


@dataclass(frozen=True)
class GraphDiameterReport:
    points: np.ndarray
    labels: np.ndarray
    components: tuple
    warnings: tuple

    @property
    def total(self) -> float:
        return float(sum(c.diameter for c in self.components))


def generate_morse(n: int, seed: int, magnitude: float = 1.0) -> Quadric:
    """Random quadric objective; degenerate for magnitude 0 (caller must reject)."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    H = magnitude * 0.5 * (A + A.T)
    L = magnitude * rng.standard_normal(n)
    return Quadric(H, L, 0.0)


# ----------------------------------------------------------------------------
# Critical points of the restricted objective

def _newton_critical(scene, P, x0, u0, tol=1e-11, max_iter=60):
    """Damped Newton on (gradP - sum u_i gradQ_i, Q) = 0 in (x, u)."""
    quads = scene.equalities
    n, k = scene.n, len(quads)

    def residual(x, u):
        J = constraint_gradients(scene, x)
        top = P.grad(x) - u @ J
        bot = np.array([q.eval(x) for q in quads])
        return np.concatenate([top, bot]), J

    x, u = x0.copy(), u0.copy()
    F, J = residual(x, u)
    for _ in range(max_iter):
        nf = np.linalg.norm(F)
        if nf <= tol:
            return x, u, True
        B = hessian_pencil(scene, u, P)
        Jac = np.zeros((n + k, n + k))
        Jac[:n, :n] = B
        Jac[:n, n:] = -J.T
        Jac[n:, :n] = J
        try:
            step = np.linalg.solve(Jac, -F)
        except np.linalg.LinAlgError:
            return x, u, False
        t = 1.0
        while t >= 2.0 ** -24:
            xn, un = x + t * step[:n], u + t * step[n:]
            Fn, Jn = residual(xn, un)
            if np.linalg.norm(Fn) <= (1 - 0.25 * t) * nf:
                x, u, F, J = xn, un, Fn, Jn
                break
            t *= 0.5
        else:
            return x, u, False
    return x, u, np.linalg.norm(F) <= tol


def morse_check(scene: SceneSystem, P: Optional[Quadric] = None, seed: int = 0,
                starts: int = 40, merge_radius: float = 1e-6,
                value_tol: float = 1e-8, eig_tol: float = 1e-8) -> MorseReport:
    """Multistart Newton search for critical points of P on M, with
    nondegeneracy and distinct-value verdicts.

    Heuristic by construction: a report, never a proof.
    """
    P = scene.require_morse(P)
    quads = scene.equalities
    warnings = []
    try:
        seeds = sample_points(scene, starts, child_seed(seed, "morse_seeds"))
    except QuadgeoError:
        seeds = np.zeros((0, scene.n))
        warnings.append("search incomplete: no points of M found")
    found = []
    for x0 in seeds:
        J = constraint_gradients(scene, x0)
        u0 = np.linalg.pinv(J @ J.T) @ (J @ P.grad(x0))
        x, u, ok = _newton_critical(scene, P, x0, u0)
        if not ok or np.linalg.norm(x) > scene.ball_radius * (1 + 1e-9):
            continue
        if any(np.linalg.norm(x - y[0]) <= merge_radius for y in found):
            continue
        found.append((x, u))
    if seeds.shape[0] and not found:
        warnings.append("search incomplete: no critical points found on nonempty M")
    crits = []
    for x, u in found:
        J = constraint_gradients(scene, x)
        T = orthonormal_complement(J, scene.n)
        B = hessian_pencil(scene, u, P)
        lam = np.linalg.eigvalsh(T.T @ B @ T) if T.shape[1] else np.zeros(0)
        index = int(np.sum(lam < -eig_tol))
        nondeg = bool(np.all(np.abs(lam) > eig_tol)) if lam.size else True
        crits.append(CriticalPoint(x=x, value=P.eval(x), index=index,
                                   nondegenerate=nondeg))
    values = sorted(c.value for c in crits)
    distinct = all(b - a > value_tol for a, b in zip(values, values[1:]))
    return MorseReport(
        critical_points=tuple(crits),
        distinct_values=bool(distinct),
        nondegenerate=bool(crits) and all(c.nondegenerate for c in crits),
        warnings=tuple(warnings),
    )


# ----------------------------------------------------------------------------
# Trajectories

def integrate_trajectory(scene: SceneSystem, P: Quadric, x0, direction: str = "ascent",
                         step: Optional[float] = None, max_len: Optional[float] = None,
                         tol: float = 1e-9, stall_rel: float = STALL_REL) -> Trajectory:
    """RK4 stepping of the normalized constrained gradient, retracting after
    every step."""
    if direction not in ("ascent", "descent"):
        raise ValueError("direction must be 'ascent' or 'descent'")
    sgn = 1.0 if direction == "ascent" else -1.0
    R = scene.ball_radius
    h0 = step if step is not None else 1e-3 * R
    cap = max_len if max_len is not None else 20.0 * R

    def field(y):
        td = projected_gradient(scene, y, P)
        nrm = np.linalg.norm(td.gradMP)
        if nrm < 1e-300:
            return np.zeros_like(y)
        return (sgn / nrm) * td.gradMP

    x = retract(scene, np.asarray(x0, dtype=float), tol=tol)
    verts = [x]
    arc = 0.0
    terminal = "max_steps"
    max_iters = int(cap / h0 * 4) + 64
    shrunk_iters = 0  # consecutive short-displacement steps: the endgame near a maximum
    for _ in range(max_iters):
        td = projected_gradient(scene, x, P)
        scale = max(np.linalg.norm(td.gradP), 1e-30)
        if np.linalg.norm(td.gradMP) <= stall_rel * scale:
            terminal = "critical_point"
            break
        if shrunk_iters > 200:
            small = np.linalg.norm(td.gradMP) <= np.sqrt(stall_rel) * scale
            terminal = "critical_point" if small else "stalled"
            break
        if arc >= cap:
            terminal = "max_steps"
            break
        px = P.eval(x)
        h = h0
        xn = None
        retraction_failed = False
        while h >= h0 * 2.0 ** -30:
            try:
                k1 = field(x)
                k2 = field(x + 0.5 * h * k1)
                k3 = field(x + 0.5 * h * k2)
                k4 = field(x + h * k3)
                cand = retract(scene, x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), tol=tol)
            except QuadgeoError:
                retraction_failed = True
                h *= 0.5
                continue
            retraction_failed = False
            gain = P.eval(cand) - px
            if (gain > 0 if sgn > 0 else gain < 0) and not np.array_equal(cand, x):
                xn = cand
                break
            h *= 0.5
        if xn is None:
            if retraction_failed:
                raise TrajectoryError(
                    "retraction failed mid-flow",
                    partial=Trajectory(Polyline(verts), "stalled", arc))
            terminal = "stalled"
            break
        if np.linalg.norm(xn) > R * (1 + 1e-9):
            terminal = "left_ball"
            break
        moved = float(np.linalg.norm(xn - x))
        shrunk_iters = shrunk_iters + 1 if moved < 0.5 * h0 else 0
        arc += moved
        verts.append(xn)
        x = xn
    return Trajectory(Polyline(verts), terminal, arc)


def _component_labels(scene, points, extra, seed, neighbor_count=8, tol=1e-9):
    """Connected-component ids for sample points plus extra query points."""
    allpts = np.vstack([points, np.asarray(extra, float).reshape(-1, scene.n)])
    _, labels, _ = _build_neighbor_graph(scene, allpts, neighbor_count, tol)
    return labels[: points.shape[0]], labels[points.shape[0]:]


def check_same_component(scene: SceneSystem, x, y, seed: int = 0,
                         sample_count: int = 300, tol: float = 1e-9) -> bool:
    pts = sample_points(scene, sample_count, child_seed(seed, "components"), tol)
    _, q = _component_labels(scene, pts, [x, y], seed, tol=tol)
    return bool(q[0] == q[1])


def trajectory_diameter_estimate(scene: SceneSystem, P: Quadric, x, y,
                                 gap_tol: Optional[float] = None,
                                 step: Optional[float] = None, seed: int = 0,
                                 check_components: bool = True,
                                 check_unique_max: bool = True) -> float:
    """Upper bound on the geodesic distance d(x, y): two ascents meeting at the
    unique maximum, plus the terminal gap."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    R = scene.ball_radius
    gap_cap = gap_tol if gap_tol is not None else 0.05 * R
    if check_components and not check_same_component(scene, x, y, seed):
        raise ComponentError("x and y are in different connected components")
    if check_unique_max:
        report = morse_check(scene, P, seed=child_seed(seed, "unique_max"))
        dim_m = scene.n - scene.k
        maxima = [c for c in report.critical_points if c.index == dim_m]
        if len(maxima) > 1:
            pts = sample_points(scene, 300, child_seed(seed, "components"))
            labels, q = _component_labels(scene, pts, [x] + [m.x for m in maxima], seed)
            in_comp = [m for m, lab in zip(maxima, q[1:]) if lab == q[0]]
            if len(in_comp) > 1:
                raise TrajectoryError("multiple maxima on the component of x")
    ta = integrate_trajectory(scene, P, x, "ascent", step=step)
    tb = integrate_trajectory(scene, P, y, "ascent", step=step)
    for t in (ta, tb):
        if t.terminal not in ("critical_point", "stalled"):
            raise TrajectoryError(f"ascent terminated with {t.terminal}", partial=t)
    pa = ta.polyline.vertices[-1]
    pb = tb.polyline.vertices[-1]
    gap = float(np.linalg.norm(pa - pb))
    if gap > gap_cap:
        raise TrajectoryError("trajectories did not meet -- multiple maxima?")
    return ta.arc_length + tb.arc_length + gap


# ----------------------------------------------------------------------------
# Graph-based geodesic diameter

def _build_neighbor_graph(scene, pts, neighbor_count, tol):
    """Chord-weighted kNN graph with midpoint validation; returns
    (sparse graph, component labels, edge lengths)."""
    m = pts.shape[0]
    kq = min(neighbor_count + 1, m)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=kq)
    idx = np.atleast_2d(idx)
    pairs = set()
    for i in range(m):
        for j in idx[i][1:]:
            if i != j:
                pairs.add((min(i, int(j)), max(i, int(j))))
    pairs = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
    if pairs.size == 0:
        labels = np.arange(m)
        return csr_matrix((m, m)), labels, np.zeros(0)
    mid = 0.5 * (pts[pairs[:, 0]] + pts[pairs[:, 1]])
    chord = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    if scene.equalities:
        mr, ok = retract_batch(scene, mid, tol=tol)
        moved = np.linalg.norm(mr - mid, axis=1)
        valid = ok & (moved <= 0.5 * chord + 1e-12)
        valid &= np.linalg.norm(mr, axis=1) <= scene.ball_radius * (1 + 1e-9)
        valid &= _feasible_mask(scene, mr, tol)
    else:
        valid = _feasible_mask(scene, mid, tol)
        valid &= np.linalg.norm(mid, axis=1) <= scene.ball_radius * (1 + 1e-9)
    pairs, chord = pairs[valid], chord[valid]
    graph = csr_matrix(
        (np.concatenate([chord, chord]),
         (np.concatenate([pairs[:, 0], pairs[:, 1]]),
          np.concatenate([pairs[:, 1], pairs[:, 0]]))),
        shape=(m, m))
    _, labels = connected_components(graph, directed=False)
    return graph, labels, chord


def graph_geodesic_diameter(scene: SceneSystem, sample_count: int,
                            neighbor_count: int = 12, seed: int = 0,
                            tol: float = 1e-9,
                            batch: int = 256) -> GraphDiameterReport:
    """Per-component max shortest-path distance over a chord-weighted kNN graph.

    A lower estimate of geodesic diameter that tightens as sampling densifies.
    """
    pts = sample_points(scene, sample_count, seed, tol)
    graph, labels, edge_lengths = _build_neighbor_graph(scene, pts, neighbor_count, tol)
    m = pts.shape[0]
    ncomp = int(labels.max()) + 1 if m else 0
    best = {c: (0.0, (int(np.flatnonzero(labels == c)[0]),) * 2) for c in range(ncomp)}
    for lo in range(0, m, batch):
        rows = np.arange(lo, min(lo + batch, m))
        D = dijkstra(graph, directed=False, indices=rows)
        D[~np.isfinite(D)] = -np.inf
        for r, i in enumerate(rows):
            j = int(np.argmax(D[r]))
            d = float(D[r, j])
            c = int(labels[i])
            if d > best[c][0]:
                best[c] = (d, (int(i), j))
    comps = tuple(
        ComponentDiameter(component=c, size=int(np.sum(labels == c)),
                          diameter=best[c][0], pair=best[c][1])
        for c in range(ncomp))
    warnings = []
    if ncomp > 1 and edge_lengths.size:
        med = float(np.median(edge_lengths))
        for a in range(ncomp):
            for b in range(a + 1, ncomp):
                gap = float(np.min(
                    np.linalg.norm(pts[labels == a][:, None, :]
                                   - pts[labels == b][None, :, :], axis=2)))
                if gap < 3.0 * med:
                    warnings.append(
                        f"components {a} and {b} are only {gap:.3g} apart; "
                        "the split may be a sampling artifact")
    return GraphDiameterReport(points=pts, labels=labels, components=comps,
                               warnings=tuple(warnings))


def farthest_pair(points: np.ndarray, labels=None, component=None):
    """Indices of the pair with maximal chord distance (optionally within a
    component)."""
    pts = points
    idx = np.arange(points.shape[0])
    if labels is not None and component is not None:
        idx = np.flatnonzero(labels == component)
        pts = points[idx]
    best = (-1.0, (0, 0))
    for i in range(pts.shape[0]):
        d = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
        if d.size:
            j = int(np.argmax(d))
            if d[j] > best[0]:
                best = (float(d[j]), (int(idx[i]), int(idx[i + 1 + j])))
    return best[1]


def refine_chord_pair(scene: SceneSystem, x, y, iters: int = 300,
                      rate: float = 0.25, tol: float = 1e-9):
    """Locally maximize the chord ||x - y|| over M x M by alternating projected
    ascent; anchors diameter pairs at the Euclidean-diameter realizer."""
    pair = [retract(scene, np.asarray(x, float), tol=tol),
            retract(scene, np.asarray(y, float), tol=tol)]
    R = scene.ball_radius

    def tangential(a, g):
        J = constraint_gradients(scene, a)
        if J.size == 0:
            return g
        return g - J.T @ (np.linalg.pinv(J @ J.T) @ (J @ g))

    for _ in range(iters):
        moved = 0.0
        for s in (0, 1):
            a, b = pair[s], pair[1 - s]
            cand = retract(scene, a + rate * tangential(a, 2.0 * (a - b)), tol=tol)
            if np.linalg.norm(cand) <= R * (1 + 1e-9) and \
                    np.linalg.norm(cand - b) >= np.linalg.norm(a - b):
                moved += float(np.linalg.norm(cand - a))
                pair[s] = cand
        if moved < 1e-12 * R:
            break
    return pair[0], pair[1]
