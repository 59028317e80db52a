"""Detection and tracing of the thalweg: the critical set of the constrained
gradient norm on level sets of the objective.

Membership is measured two independent ways: a Lagrange residual (projection
of the ambient gradient of ||gradMP||^2 away from the span of all gradients)
and an eigenvector residual (the tangential part of B*gradMP transverse to
gradMP, B the Hessian pencil).  Both vanish on exactly the same set; critical
points of the restricted objective are thalweg points by convention.

Tracing encodes the eigenvector condition as n-k-1 scalar equations through
an orthonormal tangent frame with the gradMP direction removed.  Frames are
continued smoothly along branches to avoid sign flips; within a finite
difference stencil the frame is frozen, and it is rebuilt from the current
point between corrector iterations, so a converged corrector lands on the
true zero set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Polyline, Quadric, QuadgeoError, SceneSystem
from .manifold import (
    constraint_gradients,
    grad_normsq_gradient,
    hessian_pencil,
    projected_gradient,
    regularity_check,
)
from .util import orthonormal_complement, point_polyline_distance

STALL_NORM = 1e-8  # ||gradMP|| below this counts as a critical point


class ThalwegError(QuadgeoError):
    pass


@dataclass(frozen=True)
class ThalwegCurve:
    branches: tuple
    max_residual: float
    seeds_used: int
    warnings: tuple = ()

    @property
    def total_length(self) -> float:
        return float(sum(b.length for b in self.branches))


@dataclass(frozen=True)
class Perturbation:
    Hpert: np.ndarray           # symmetric, objective only
    Lpert: tuple                # k+1 vectors: objective first, then constraints
    cpert: np.ndarray           # k constant shifts
    scale: float


@dataclass(frozen=True)
class AgreementReport:
    checked: int
    excluded: int
    violators: tuple  # indices into the sample


# ----------------------------------------------------------------------------
# Residuals

def lagrange_residual(scene: SceneSystem, P: Optional[Quadric], x) -> float:
    """Norm of the component of grad(||gradMP||^2) orthogonal to
    span{gradP, gradQ_1..gradQ_k}; zero exactly on the thalweg."""
    P = scene.require_morse(P)
    x = np.asarray(x, dtype=float)
    g = grad_normsq_gradient(scene, x, P)
    A = np.vstack([constraint_gradients(scene, x), P.grad(x)[None, :]])
    N = orthonormal_complement(A, scene.n)
    if N.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(N.T @ g))


def eigen_residual(scene: SceneSystem, P: Optional[Quadric], x,
                   stall_tol: float = STALL_NORM) -> float:
    """Deviation of the tangential image of gradMP under the Hessian pencil
    from the gradMP direction; zero exactly on the thalweg."""
    P = scene.require_morse(P)
    x = np.asarray(x, dtype=float)
    td = projected_gradient(scene, x, P)
    v = td.gradMP
    if np.linalg.norm(v) <= stall_tol:
        return 0.0
    B = hessian_pencil(scene, td.u, P)
    T = orthonormal_complement(td.gradQ, scene.n)
    w = T @ (T.T @ (B @ v))
    w = w - (w @ v) / (v @ v) * v
    return float(np.linalg.norm(w))


def residuals_agree(scene: SceneSystem, P: Optional[Quadric], sample,
                    tol: float = 1e-9, band: float = 10.0) -> AgreementReport:
    """Tolerance-banded double implication between the two residuals over a
    sample; points with either residual inside [tol, band*tol) are excluded."""
    P = scene.require_morse(P)
    sample = np.asarray(sample, dtype=float)
    violators = []
    excluded = 0
    for i, x in enumerate(sample):
        r1 = lagrange_residual(scene, P, x)
        r2 = eigen_residual(scene, P, x)
        if (tol <= r1 < band * tol) or (tol <= r2 < band * tol):
            excluded += 1
            continue
        if (r1 <= tol) != (r2 <= tol):
            violators.append(i)
    return AgreementReport(checked=sample.shape[0], excluded=excluded,
                           violators=tuple(violators))


# ----------------------------------------------------------------------------
# Perturbation

def draw_perturbation(n: int, k: int, scale: float,
                      rng: np.random.Generator) -> Perturbation:
    lower = np.tril(rng.uniform(-scale, scale, (n, n)))
    H = lower + np.tril(lower, -1).T
    Ls = tuple(rng.uniform(-scale, scale, n) for _ in range(k + 1))
    c = rng.uniform(-scale, scale, k)
    return Perturbation(Hpert=H, Lpert=Ls, cpert=c, scale=scale)


def apply_perturbation(scene: SceneSystem, P: Quadric, pert: Perturbation):
    """Quadratic perturbation of the objective, affine-only for constraints."""
    from .core import Constraint

    P2 = Quadric(P.H + pert.Hpert, P.L + pert.Lpert[0], P.c)
    cons = []
    i = 0
    for con in scene.constraints:
        if con.role == "eq":
            q = con.quadric
            cons.append(Constraint(
                Quadric(q.H, q.L + pert.Lpert[i + 1], q.c + pert.cpert[i]), "eq"))
            i += 1
        else:
            cons.append(con)
    scene2 = SceneSystem(scene.n, tuple(cons), P2, scene.ball_radius)
    return scene2, P2


def perturb(scene: SceneSystem, P: Optional[Quadric], scale: float, seed: int,
            max_tries: int = 10):
    """Seeded perturbation, redrawn until the perturbed scene stays regular."""
    P = scene.require_morse(P)
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = np.random.default_rng(seed)
    k = scene.k
    for _ in range(max_tries):
        pert = draw_perturbation(scene.n, k, scale, rng)
        scene2, P2 = apply_perturbation(scene, P, pert)
        if scale == 0:
            return scene2, P2
        if regularity_check(scene2, sample_count=120, seed=seed).verdict:
            return scene2, P2
    raise ThalwegError(f"no regular perturbation found in {max_tries} draws")


# ----------------------------------------------------------------------------
# Tracing

def _frame(scene, P, x, prev: Optional[np.ndarray], stall_tol=STALL_NORM):
    """(v, B, T): gradMP, Hessian pencil, and an orthonormal basis of
    tangent-minus-v, aligned with the previous frame when possible."""
    td = projected_gradient(scene, x, P)
    v = td.gradMP
    B = hessian_pencil(scene, td.u, P)
    if np.linalg.norm(v) <= stall_tol:
        return v, B, None
    A = np.vstack([td.gradQ, v[None, :]])
    T0 = orthonormal_complement(A, scene.n)
    if prev is not None and T0.shape[1] and prev.shape == T0.shape:
        W = T0.T @ prev
        q, r = np.linalg.qr(W)
        if np.min(np.abs(np.diag(r))) > 1e-8:
            q *= np.sign(np.diag(r))
            return v, B, T0 @ q
    return v, B, T0


def _residual_with_frame(scene, P, x, T):
    """Stacked (Q_i; frame-projected eigenvector condition) at x, frame frozen."""
    quads = scene.equalities
    r_eq = np.array([q.eval(x) for q in quads])
    if T is None or T.shape[1] == 0:
        return r_eq
    td = projected_gradient(scene, x, P)
    B = hessian_pencil(scene, td.u, P)
    return np.concatenate([r_eq, T.T @ (B @ td.gradMP)])


def _fd_jacobian(scene, P, x, T, h_rel=1e-6):
    n = x.shape[0]
    cols = []
    for i in range(n):
        h = h_rel * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        fp = _residual_with_frame(scene, P, x + e, T)
        fm = _residual_with_frame(scene, P, x - e, T)
        cols.append((fp - fm) / (2 * h))
    return np.column_stack(cols)


def _equilibrate(J, F):
    scale = np.linalg.norm(J, axis=1)
    floor = 1e-8 * max(np.max(scale), 1e-30)
    scale = np.maximum(scale, floor)
    return J / scale[:, None], F / scale


def _correct(scene, P, x0, T_prev, tol, max_iter=30, stall_tol=STALL_NORM):
    """Gauss-Newton corrector onto the thalweg; returns (x, T, status) with
    status in {ok, critical, fail}."""
    x = np.asarray(x0, dtype=float).copy()
    T = T_prev
    for _ in range(max_iter):
        try:
            v, B, T = _frame(scene, P, x, T, stall_tol)
        except QuadgeoError:
            return x, T, "fail"
        if T is None:
            return x, None, "critical"
        F = _residual_with_frame(scene, P, x, T)
        nf = np.linalg.norm(F, ord=np.inf)
        if nf <= tol:
            return x, T, "ok"
        J = _fd_jacobian(scene, P, x, T)
        Js, Fs = _equilibrate(J, F)
        step, *_ = np.linalg.lstsq(Js, -Fs, rcond=None)
        t = 1.0
        while t >= 2.0 ** -16:
            xn = x + t * step
            try:
                Fn = _residual_with_frame(scene, P, xn, T)
            except QuadgeoError:
                t *= 0.5
                continue
            if np.linalg.norm(Fn) <= (1 - 0.25 * t) * np.linalg.norm(F):
                x = xn
                break
            t *= 0.5
        else:
            return x, T, "fail"
    F = _residual_with_frame(scene, P, x, T)
    if np.linalg.norm(F, ord=np.inf) <= tol:
        return x, T, "ok"
    return x, T, "fail"


def _descend_to_zero_set(scene, P, x0, target, tol, max_iter=300,
                         stall_tol=STALL_NORM):
    """Projected gradient descent of the squared eigen residual over M.

    Globalizes seeding: the Gauss-Newton corrector has a narrow basin when
    the residual valley is shallow (small perturbations).
    """
    from .manifold import retract

    x = retract(scene, np.asarray(x0, float), tol=tol)
    n = scene.n
    for _ in range(max_iter):
        r = eigen_residual(scene, P, x, stall_tol)
        if r <= target:
            return x, True
        J = constraint_gradients(scene, x)
        Tt = orthonormal_complement(J, n)
        if Tt.shape[1] == 0:
            return x, False
        g = np.zeros(Tt.shape[1])
        for i in range(Tt.shape[1]):
            d = 1e-6 * max(1.0, float(np.linalg.norm(x)))
            rp = eigen_residual(scene, P, x + d * Tt[:, i], stall_tol)
            rm = eigen_residual(scene, P, x - d * Tt[:, i], stall_tol)
            g[i] = (rp * rp - rm * rm) / (2 * d)
        gn = float(np.linalg.norm(g))
        if gn < 1e-18:
            return x, r <= 10 * target
        u = -(Tt @ g) / gn
        t = r * r / gn
        improved = False
        while t > 1e-14:
            try:
                xn = retract(scene, x + t * u, tol=tol)
            except QuadgeoError:
                t *= 0.5
                continue
            rn = eigen_residual(scene, P, xn, stall_tol)
            if rn * rn <= r * r - 0.5 * t * gn:
                x = xn
                improved = True
                break
            t *= 0.5
        if not improved:
            return x, r <= 10 * target
    return x, eigen_residual(scene, P, x, stall_tol) <= 10 * target


def _seed_correct(scene, P, x0, tol, stall_tol=STALL_NORM):
    """Globalized corrector used for seeding: descend into the residual
    valley, then polish with Gauss-Newton."""
    x = np.asarray(x0, dtype=float)
    if scene.n - scene.k - 1 > 0:
        x, ok = _descend_to_zero_set(scene, P, x, max(100 * tol, 1e-7), tol,
                                     stall_tol=stall_tol)
        if not ok:
            return x, None, "fail"
    return _correct(scene, P, x, None, tol, stall_tol=stall_tol)


def _locally_two_dimensional(scene, P, x, tol, stall_tol=STALL_NORM):
    """Probe whether the eigen-residual zero set fills a neighborhood of x in
    M (kernel dimension >= 2, e.g. rotationally symmetric input).

    The traced system cannot see this: freezing the frame regularizes it.
    So probe the moving-frame residual along tangent directions; on a
    1-dimensional zero set at most one probe direction can be flat.
    """
    from .manifold import retract

    if scene.n - scene.k - 1 == 0:
        return False
    td = projected_gradient(scene, x, P)
    if np.linalg.norm(td.gradMP) <= stall_tol:
        return False
    B = hessian_pencil(scene, td.u, P)
    scale = float(np.linalg.norm(B, 2) * np.linalg.norm(td.gradMP))
    thresh = 1e-9 * scale + 1e-13
    Tt = orthonormal_complement(td.gradQ, scene.n)
    delta = 1e-3 * scene.ball_radius
    probes = [Tt[:, i] for i in range(Tt.shape[1])]
    if Tt.shape[1] >= 2:
        probes.append((Tt[:, 0] + Tt[:, 1]) / np.sqrt(2.0))
        probes.append((Tt[:, 0] - Tt[:, 1]) / np.sqrt(2.0))
    for w in probes:
        try:
            y = retract(scene, x + delta * w, tol=tol)
            if eigen_residual(scene, P, y, stall_tol) > thresh:
                return False
        except QuadgeoError:
            return False
    return True


def _kernel_direction(scene, P, x, T, kernel_tol=1e-5):
    """Unit tangent of the solution curve plus the numerical kernel dimension."""
    J = _fd_jacobian(scene, P, x, T)
    Js = J / np.maximum(np.linalg.norm(J, axis=1),
                        1e-8 * max(float(np.max(np.linalg.norm(J, axis=1))), 1e-30))[:, None]
    U, S, Vt = np.linalg.svd(Js)
    n = x.shape[0]
    smax = S[0] if S.size else 0.0
    extra = int(np.sum(S <= kernel_tol * max(smax, 1e-30))) if S.size else 0
    kernel_dim = n - Js.shape[0] + extra
    return Vt[-1], kernel_dim


def _trace_branch(scene, P, x0, T0, sign, step, tol, merge_radius, max_steps,
                  stall_tol):
    verts = [x0]
    x, T = x0, T0
    prev_dir = None
    closed = False
    warning = None
    R = scene.ball_radius
    for i in range(max_steps):
        t, kdim = _kernel_direction(scene, P, x, T)
        if kdim != 1:
            warning = (f"kernel dimension {kdim} != 1 at branch point; "
                       "branch terminated (degenerate input; consider perturbing)")
            break
        if prev_dir is not None:
            if float(t @ prev_dir) < 0:
                t = -t
        else:
            t = sign * t
        accepted = None
        h = step
        for _ in range(8):
            xn, Tn, status = _correct(scene, P, x + h * t, T, tol,
                                      stall_tol=stall_tol)
            if status == "ok":
                accepted = (xn, Tn)
                break
            if status == "critical":
                accepted = (xn, None)
                break
            h *= 0.5
        if accepted is None:
            warning = "corrector failed during continuation; branch terminated"
            break
        xn, Tn = accepted
        if np.linalg.norm(xn) > R * (1 + 1e-9):
            break
        if np.linalg.norm(xn - x) < 1e-14 * R:
            warning = "continuation stalled; branch terminated"
            break
        verts.append(xn)
        if Tn is None:
            break  # reached a critical point of the restricted objective
        d = xn - x
        prev_dir = d / np.linalg.norm(d)
        x, T = xn, Tn
        if i > 3 and np.linalg.norm(xn - verts[0]) < 0.75 * step:
            closed = True
            break
    if closed:
        verts = verts[:-1] if np.allclose(verts[-1], verts[0]) else verts
    return verts, closed, warning


def trace_thalweg(scene: SceneSystem, P: Optional[Quadric] = None,
                  seed_points: Optional[Sequence] = None, tol: float = 1e-9,
                  step: Optional[float] = None,
                  merge_radius: Optional[float] = None,
                  max_steps: int = 60_000,
                  stall_tol: float = STALL_NORM) -> ThalwegCurve:
    """Corrector + arc-length continuation from each seed, branch dedup by
    point-to-polyline Hausdorff distance."""
    P = scene.require_morse(P)
    if seed_points is None or len(seed_points) == 0:
        raise ValueError("seed_points must be a non-empty list of starting points")
    R = scene.ball_radius
    h = step if step is not None else 1e-3 * R
    merge = merge_radius if merge_radius is not None else 1e-4 * R
    branches = []
    warnings = []
    seeds_used = 0
    isolated = []  # critical points hit directly by the corrector
    degenerate_seen = False
    for s in seed_points:
        seeds_used += 1
        x0, T0, status = _seed_correct(scene, P, np.asarray(s, float), tol,
                                       stall_tol=stall_tol)
        if status == "fail" or np.linalg.norm(x0) > R * (1 + 1e-9):
            continue
        if status == "critical":
            isolated.append(x0)
            continue
        if any(point_polyline_distance(x0, b) <= merge for b in branches):
            continue
        if _locally_two_dimensional(scene, P, x0, tol, stall_tol):
            degenerate_seen = True
            warnings.append(
                "kernel dimension 2 at seed: the residual zero set is not a "
                "curve (degenerate input; consider perturbing)")
            break
        fwd, closed, warn = _trace_branch(scene, P, x0, T0, +1.0, h, tol, merge,
                                          max_steps, stall_tol)
        if warn:
            warnings.append(warn)
        if closed:
            verts = fwd
        else:
            bwd, _, warn2 = _trace_branch(scene, P, x0, T0, -1.0, h, tol, merge,
                                          max_steps, stall_tol)
            if warn2:
                warnings.append(warn2)
            verts = list(reversed(bwd[1:])) + list(fwd)
        if len(verts) < 2:
            continue
        branches.append(Polyline(np.asarray(verts), closed=closed))
    # deduplicate overlapping branches, longest first
    branches.sort(key=lambda b: -b.length)
    kept = []
    for b in branches:
        dup = any(
            max(point_polyline_distance(v, other) for v in b.vertices) <= merge
            for other in kept)
        if not dup:
            kept.append(b)
    if not kept and not isolated and not degenerate_seen:
        raise ThalwegError("no thalweg found from the given seeds")
    max_res = 0.0
    for b in kept:
        for v in b.vertices:
            max_res = max(max_res, eigen_residual(scene, P, v, stall_tol))
            if max(abs(q.eval(v)) for q in scene.equalities) > 10 * tol:
                raise ThalwegError("traced vertex drifted off the constraint set")
    return ThalwegCurve(branches=tuple(kept), max_residual=max_res,
                        seeds_used=seeds_used, warnings=tuple(dict.fromkeys(warnings)))


# ----------------------------------------------------------------------------
# Box-counting dimension of the residual zero set

def zero_set_points(scene: SceneSystem, P: Optional[Quadric], count: int,
                    seed: int, tol: float = 1e-8) -> np.ndarray:
    """Sampled M-points projected onto the eigen-residual zero set."""
    from .manifold import sample_points

    P = scene.require_morse(P)
    seeds = sample_points(scene, count, seed)
    out = []
    for s in seeds:
        x, _, status = _seed_correct(scene, P, s, tol)
        if status in ("ok", "critical") and \
                np.linalg.norm(x) <= scene.ball_radius * (1 + 1e-9):
            out.append(x)
    return np.asarray(out) if out else np.zeros((0, scene.n))


def dimension_check(scene: SceneSystem, P: Optional[Quadric] = None,
                    resolution: float = 0.24, seed: int = 0,
                    count: int = 4000, tol: float = 1e-8,
                    min_cells: int = 8) -> float:
    """Box-counting slope of the eigen-residual zero set over a dyadic ladder
    of grid resolutions; near 1 for curves, near 2 for surfaces."""
    if scene.n > 4:
        raise ValueError("dimension_check is grid-based; use n <= 4")
    pts = zero_set_points(scene, P, count, seed, tol)
    if pts.shape[0] < 4 * min_cells:
        raise ThalwegError(
            f"inconclusive: only {pts.shape[0]} zero-set points found")
    ladder = [resolution, resolution / 2.0, resolution / 4.0]
    counts = []
    for r in ladder:
        cells = {tuple(c) for c in np.floor(pts / r).astype(int)}
        counts.append(len(cells))
    if counts[0] < min_cells:
        raise ThalwegError(
            f"inconclusive: only {counts[0]} occupied cells at the coarsest rung")
    logs = np.log(np.asarray(counts, dtype=float))
    xs = np.log(1.0 / np.asarray(ladder))
    slope = float(np.polyfit(xs, logs, 1)[0])
    return slope
