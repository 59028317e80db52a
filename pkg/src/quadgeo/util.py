"""Shared helpers: seeded substreams and point/polyline distances."""

from __future__ import annotations

import zlib

import numpy as np

from .core import Polyline


def child_seed(seed: int, label: str) -> int:
    """Derive a named substream seed so phases do not perturb each other."""
    key = zlib.crc32(label.encode())
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return int(ss.generate_state(1, np.uint64)[0])


def substream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, label))


def uniform_ball(rng: np.random.Generator, count: int, n: int, radius: float) -> np.ndarray:
    """Uniform draws in the closed ball of the given radius."""
    X = rng.standard_normal((count, n))
    nrm = np.linalg.norm(X, axis=1)
    nrm[nrm == 0] = 1.0
    r = radius * rng.random(count) ** (1.0 / n)
    return X * (r / nrm)[:, None]


def point_segment_distances(p: np.ndarray, P0: np.ndarray, P1: np.ndarray) -> np.ndarray:
    """Distance from one point to each segment (P0[i], P1[i])."""
    D = P1 - P0
    dd = np.einsum("mi,mi->m", D, D)
    dd[dd == 0] = 1.0
    t = np.clip(np.einsum("mi,mi->m", p[None, :] - P0, D) / dd, 0.0, 1.0)
    closest = P0 + t[:, None] * D
    return np.linalg.norm(closest - p[None, :], axis=1)


def point_polyline_distance(p: np.ndarray, poly: Polyline) -> float:
    if poly.m == 0:
        return np.inf
    if poly.m == 1:
        return float(np.linalg.norm(poly.vertices[0] - p))
    P0, P1 = poly.segment_endpoints()
    return float(np.min(point_segment_distances(np.asarray(p, float), P0, P1)))


def polyline_hausdorff(a: Polyline, b: Polyline) -> float:
    """Symmetric vertex-to-segment Hausdorff distance between two polylines."""
    def one_side(src: Polyline, dst: Polyline) -> float:
        if src.m == 0:
            return 0.0
        return max(point_polyline_distance(v, dst) for v in src.vertices)

    return max(one_side(a, b), one_side(b, a))


def orthonormal_complement(A: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis (columns) of the orthogonal complement of the rows of A."""
    if A.size == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    return Vt[rank:].T
