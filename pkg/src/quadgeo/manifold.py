"""Pointwise geometry of M = {Q_1 = ... = Q_k = 0} within the closed ball.

Provides the Gram matrix of constraint gradients, the multipliers u(x) that
assemble the constrained gradient of the objective, the closed-form ambient
gradient of its squared norm, Gauss-Newton retraction onto M, rejection
sampling of M-points, and a sampled regularity certificate.

u(x) is defined wherever the Gram matrix is invertible, on or off M; several
downstream consumers (finite-difference validation, the parameterized linear
system) rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Quadric, QuadgeoError, SceneSystem

COND_LIMIT = 1e12
REGULARITY_THRESHOLD = 1e-6  # numerical stand-in for "smooth complete intersection"


class RankDeficiencyError(QuadgeoError):
    pass


class RetractionError(QuadgeoError):
    pass


class SamplingStarvedError(QuadgeoError):
    def __init__(self, message: str, attempts: int, accepted: int):
        super().__init__(f"{message} (accepted {accepted} of {attempts} draws)")
        self.attempts = attempts
        self.accepted = accepted


@dataclass(frozen=True)
class TangentData:
    """Everything the constrained gradient at x is made of."""

    x: np.ndarray
    gradQ: np.ndarray          # (k, n) rows are constraint gradients
    G: np.ndarray              # (k, k) Gram matrix
    u: np.ndarray              # multipliers solving G u = <gradQ, gradP>
    gradP: np.ndarray
    gradMP: np.ndarray         # gradP - sum u_i gradQ_i
    sigma_min: float           # smallest singular value of gradQ


@dataclass(frozen=True)
class RegularityReport:
    min_sigma_over_samples: float
    worst_point: Optional[np.ndarray]
    sample_count: int
    verdict: bool
    threshold: float


def constraint_gradients(scene: SceneSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([q.grad(x) for q in scene.equalities])


def gram(scene: SceneSystem, x) -> np.ndarray:
    J = constraint_gradients(scene, x)
    return J @ J.T


def projected_gradient(scene: SceneSystem, x, P: Optional[Quadric] = None) -> TangentData:
    P = scene.require_morse(P)
    x = np.asarray(x, dtype=float)
    J = constraint_gradients(scene, x)
    G = J @ J.T
    gradP = P.grad(x)
    rhs = J @ gradP
    if np.linalg.cond(G) > COND_LIMIT:
        raise RankDeficiencyError(f"rank-deficient constraint gradients at {x}")
    u = np.linalg.solve(G, rhs)
    u = u + np.linalg.solve(G, rhs - G @ u)  # one refinement step
    res = np.linalg.norm(G @ u - rhs)
    if res > 1e-10 * max(np.linalg.norm(rhs), 1e-300):
        raise RankDeficiencyError(
            f"multiplier system residual {res:g} too large at {x}")
    gradMP = gradP - u @ J
    sigma_min = float(np.linalg.svd(J, compute_uv=False)[-1])
    return TangentData(x=x, gradQ=J, G=G, u=u, gradP=gradP, gradMP=gradMP,
                       sigma_min=sigma_min)


def multipliers(scene: SceneSystem, x, P: Optional[Quadric] = None) -> np.ndarray:
    return projected_gradient(scene, x, P).u


def hessian_pencil(scene: SceneSystem, u: np.ndarray, P: Optional[Quadric] = None) -> np.ndarray:
    """He(P) - sum u_i He(Q_i); constant matrices for quadrics."""
    P = scene.require_morse(P)
    B = P.H.copy()
    for ui, q in zip(u, scene.equalities):
        B -= ui * q.H
    return B


def grad_normsq_gradient(scene: SceneSystem, x, P: Optional[Quadric] = None) -> np.ndarray:
    """Ambient gradient of ||gradMP||^2 at x, in closed form.

    The multiplier derivative terms cancel against the orthogonality
    <gradQ_i, gradMP> = 0, leaving 2 (He(P) - sum u_i He(Q_i)) gradMP.
    """
    td = projected_gradient(scene, x, P)
    B = hessian_pencil(scene, td.u, P)
    return 2.0 * (B @ td.gradMP)


# ----------------------------------------------------------------------------
# Retraction and sampling

def retract(scene: SceneSystem, x0, tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Gauss-Newton projection of x0 onto {Q_i = 0}."""
    quads = scene.equalities
    if not quads:
        return np.asarray(x0, dtype=float).copy()
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(max_iter):
        r = np.array([q.eval(x) for q in quads])
        if np.max(np.abs(r)) <= tol:
            return x
        J = np.stack([q.grad(x) for q in quads])
        JJt = J @ J.T
        if np.linalg.cond(JJt) > 1e14:
            raise RetractionError("rank-deficient constraint Jacobian during retraction")
        x = x - J.T @ np.linalg.solve(JJt, r)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e6 * scene.ball_radius:
            raise RetractionError("retraction diverged")
    r = np.array([q.eval(x) for q in quads])
    if np.max(np.abs(r)) <= tol:
        return x
    raise RetractionError(
        f"retraction diverged: residual {np.max(np.abs(r)):g} after {max_iter} iterations")


def retract_batch(scene: SceneSystem, X, tol: float = 1e-9, max_iter: int = 60):
    """Minimum-norm Gauss-Newton retraction of many points at once.

    Returns (points, converged_mask).  Rank-deficient rows take pseudo-inverse
    steps instead of erroring, which keeps degenerate scenes analyzable.
    """
    quads = scene.equalities
    X = np.array(X, dtype=float)
    m = X.shape[0]
    if not quads or m == 0:
        return X, np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    alive = np.ones(m, dtype=bool)
    for _ in range(max_iter):
        work = np.where(alive & ~converged)[0]
        if work.size == 0:
            break
        Xw = X[work]
        R = np.stack([q.eval_many(Xw) for q in quads], axis=1)
        hit = np.max(np.abs(R), axis=1) <= tol
        converged[work[hit]] = True
        work = work[~hit]
        if work.size == 0:
            continue
        Xw = X[work]
        R = R[~hit]
        J = np.stack([q.grad_many(Xw) for q in quads], axis=1)
        step = np.einsum("wnk,wk->wn", np.linalg.pinv(J), R)
        Xn = Xw - step
        bad = ~np.all(np.isfinite(Xn), axis=1)
        bad |= np.linalg.norm(np.where(np.isfinite(Xn), Xn, 0.0), axis=1) \
            > 1e6 * scene.ball_radius
        alive[work[bad]] = False
        X[work[~bad]] = Xn[~bad]
    return X, converged


def _feasible_mask(scene: SceneSystem, X: np.ndarray, tol: float) -> np.ndarray:
    mask = np.ones(X.shape[0], dtype=bool)
    for con in scene.inequality_constraints:
        vals = con.quadric.eval_many(X)
        mask &= vals >= -tol if con.role == "ge" else vals > tol
    return mask


def _sample_attempt(scene: SceneSystem, count: int, seed: int, tol: float,
                    batch: int = 1024):
    """Sampling worker; returns (points, attempts) without raising on starvation."""
    rng = np.random.default_rng(seed)
    R = scene.ball_radius
    has_eq = bool(scene.equalities)
    chunks = []
    accepted = 0
    attempts = 0
    min_attempts = max(20_000, 16 * count)
    while accepted < count:
        from .util import uniform_ball
        X = uniform_ball(rng, batch, scene.n, R)
        attempts += batch
        if has_eq:
            X, ok = retract_batch(scene, X, tol=tol)
            keep = ok & (np.linalg.norm(X, axis=1) <= R * (1 + 1e-12))
            X = X[keep]
        if X.shape[0]:
            X = X[_feasible_mask(scene, X, tol)]
        if X.shape[0]:
            chunks.append(X)
            accepted += X.shape[0]
        if attempts >= min_attempts and accepted < max(1, attempts * 1e-4):
            break
    pts = np.concatenate(chunks)[:count] if chunks else np.zeros((0, scene.n))
    return pts, attempts


def sample_points(scene: SceneSystem, count: int, seed: int,
                  tol: float = 1e-9) -> np.ndarray:
    """Points of M inside the ball: uniform ambient draws, retraction, rejection.

    Deterministic per seed; no claim of uniform surface measure.
    """
    pts, attempts = _sample_attempt(scene, count, seed, tol)
    if pts.shape[0] < count:
        raise SamplingStarvedError("sampling starved", attempts, pts.shape[0])
    return pts


def regularity_check(scene: SceneSystem, sample_count: int = 400, seed: int = 0,
                     threshold: float = REGULARITY_THRESHOLD,
                     tol: float = 1e-9) -> RegularityReport:
    """Minimum sampled sigma_min of the constraint Jacobian; verdict vs threshold.

    An empty sample (starved sampling) yields a vacuous verdict with
    sample_count 0.
    """
    pts, _ = _sample_attempt(scene, sample_count, seed, tol)
    if pts.shape[0] == 0:
        return RegularityReport(np.inf, None, 0, True, threshold)
    J = np.stack([q.grad_many(pts) for q in scene.equalities], axis=1)
    sig = np.linalg.svd(J, compute_uv=False)[:, -1]
    i = int(np.argmin(sig))
    return RegularityReport(
        min_sigma_over_samples=float(sig[i]),
        worst_point=pts[i],
        sample_count=int(pts.shape[0]),
        verdict=bool(sig[i] > threshold),
        threshold=threshold,
    )
