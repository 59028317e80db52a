"""Quadrics, constraint scenes, hyperplanes, polylines, and scene file I/O.

A quadric is stored as (H, L, c) with value(x) = x'Hx/2 + L'x + c.  Only the
lower triangle of H is authoritative; the full matrix is rebuilt by
reflection at construction time, so H is exactly symmetric no matter what
the caller passed in.  All objects are immutable after construction and safe
to share between workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

ROLES = ("eq", "ge", "gt")

# tolerance for "this float should be exactly zero" assertions
ZERO_TOL = 1e-10
# tolerance for derivative cross-checks against finite differences
DERIV_TOL = 1e-6


class QuadgeoError(Exception):
    """Base class for analysis failures (as opposed to usage errors)."""


class SceneFormatError(ValueError):
    """Malformed scene file; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Quadric:
    """Polynomial of degree <= 2 on R^n, encoded as (H, L, c)."""

    __slots__ = ("H", "L", "c")

    def __init__(self, H, L, c: float = 0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        L = np.atleast_1d(np.asarray(L, dtype=float))
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"H must be square, got shape {H.shape}")
        if L.shape != (H.shape[0],):
            raise ValueError(f"L has shape {L.shape}, expected ({H.shape[0]},)")
        lower = np.tril(H)
        self.H = _frozen(lower + np.tril(lower, -1).T)
        self.L = _frozen(L.copy())
        self.c = float(c)
        if not (np.all(np.isfinite(self.H)) and np.all(np.isfinite(self.L))
                and np.isfinite(self.c)):
            raise ValueError("quadric coefficients must be finite")

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def _point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"point has shape {x.shape}, expected ({self.n},)")
        return x

    def eval(self, x) -> float:
        x = self._point(x)
        return 0.5 * float(x @ (self.H @ x)) + float(self.L @ x) + self.c

    def grad(self, x) -> np.ndarray:
        x = self._point(x)
        return self.H @ x + self.L

    def hessian(self) -> np.ndarray:
        return self.H

    # batch variants used by the samplers; X has one point per row
    def eval_many(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return 0.5 * np.einsum("mi,ij,mj->m", X, self.H, X) + X @ self.L + self.c

    def grad_many(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.H + self.L

    def shift(self, delta_c: float) -> "Quadric":
        return Quadric(self.H, self.L, self.c + delta_c)

    def negate(self) -> "Quadric":
        return Quadric(-self.H, -self.L, -self.c)

    def __repr__(self) -> str:
        return f"Quadric(n={self.n}, c={self.c:g})"


@dataclass(frozen=True)
class Constraint:
    quadric: Quadric
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class SceneSystem:
    """Dimension, constrained quadrics, optional objective quadric, ball radius."""

    n: int
    constraints: tuple
    morse: Optional[Quadric] = None
    ball_radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.constraints:
            raise ValueError("scene needs at least one constraint")
        for i, con in enumerate(self.constraints):
            if not isinstance(con, Constraint):
                raise TypeError(f"constraints[{i}] is not a Constraint")
            if con.quadric.n != self.n:
                raise ValueError(
                    f"constraints[{i}] has dimension {con.quadric.n}, scene has {self.n}")
        if self.morse is not None and self.morse.n != self.n:
            raise ValueError(f"morse quadric has dimension {self.morse.n}, scene has {self.n}")
        if not (self.ball_radius > 0 and np.isfinite(self.ball_radius)):
            raise ValueError("ball_radius must be positive and finite")

    @property
    def equalities(self) -> tuple:
        return tuple(c.quadric for c in self.constraints if c.role == "eq")

    @property
    def inequality_constraints(self) -> tuple:
        return tuple(c for c in self.constraints if c.role != "eq")

    @property
    def k(self) -> int:
        """Number of equality constraints."""
        return len(self.equalities)

    def with_morse(self, P: Optional[Quadric]) -> "SceneSystem":
        return SceneSystem(self.n, self.constraints, P, self.ball_radius)

    def require_morse(self, P: Optional[Quadric] = None) -> Quadric:
        P = P if P is not None else self.morse
        if P is None:
            raise ValueError("scene has no objective (morse) quadric and none was passed")
        return P


class Hyperplane:
    """Affine hyperplane a.x = b with unit normal a."""

    __slots__ = ("a", "b")

    def __init__(self, a, b: float):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        nrm = float(np.linalg.norm(a))
        if not nrm > 0:
            raise ValueError("hyperplane normal must be nonzero")
        # renormalizing the pair keeps the same point set
        self.a = _frozen(a / nrm)
        self.b = float(b) / nrm

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def side(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"point has shape {x.shape}, expected ({self.n},)")
        return float(self.a @ x) - self.b

    def __repr__(self) -> str:
        return f"Hyperplane(n={self.n}, b={self.b:g})"


class Polyline:
    """Ordered vertex list; when closed, the wrap segment counts toward length."""

    __slots__ = ("vertices", "closed")

    def __init__(self, vertices, closed: bool = False):
        V = np.asarray(vertices, dtype=float)
        if V.size == 0:
            V = V.reshape(0, V.shape[1] if V.ndim == 2 else 0)
        if V.ndim != 2:
            raise ValueError("vertices must be an (m, n) array")
        if not np.all(np.isfinite(V)):
            raise ValueError("vertices must be finite")
        if V.shape[0] >= 2:
            gaps = np.linalg.norm(np.diff(V, axis=0), axis=1)
            if np.any(gaps == 0.0):
                raise ValueError("consecutive vertices must be distinct")
        if closed and V.shape[0] >= 2 and np.array_equal(V[0], V[-1]):
            raise ValueError("closed polyline must not repeat its first vertex")
        self.vertices = _frozen(V.copy())
        self.closed = bool(closed)

    @property
    def m(self) -> int:
        return self.vertices.shape[0]

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    def segment_endpoints(self):
        """(P0, P1) arrays of segment endpoints, including the wrap segment."""
        V = self.vertices
        if self.m < 2:
            empty = np.zeros((0, self.n))
            return empty, empty
        if self.closed:
            return V, np.roll(V, -1, axis=0)
        return V[:-1], V[1:]

    @property
    def length(self) -> float:
        P0, P1 = self.segment_endpoints()
        return float(np.sum(np.linalg.norm(P1 - P0, axis=1)))

    def cumulative_lengths(self) -> np.ndarray:
        V = self.vertices
        if self.m == 0:
            return np.zeros(0)
        steps = np.linalg.norm(np.diff(V, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def __repr__(self) -> str:
        return f"Polyline(m={self.m}, n={self.n}, closed={self.closed})"


# ----------------------------------------------------------------------------
# Scene file I/O.  Schema: {"n": int, "ball_radius": number,
#   "constraints": [{"role": "eq"|"ge"|"gt", "H": [[...]], "L": [...], "c": number}],
#   "morse": optional quadric object}

def _require(obj, key, path, types):
    if key not in obj:
        raise SceneFormatError(f"{path}.{key}", "missing required field")
    val = obj[key]
    if not isinstance(val, types):
        raise SceneFormatError(f"{path}.{key}", f"expected {types}, got {type(val).__name__}")
    return val


def _quadric_from_dict(d: dict, path: str, n: int) -> Quadric:
    if not isinstance(d, dict):
        raise SceneFormatError(path, "expected an object")
    H = _require(d, "H", path, list)
    L = _require(d, "L", path, list)
    c = _require(d, "c", path, (int, float))
    try:
        Ha = np.asarray(H, dtype=float)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{path}.H", "not a numeric array") from None
    if Ha.ndim != 2 or Ha.shape != (n, n):
        raise SceneFormatError(f"{path}.H", f"expected a {n}x{n} array, got shape {Ha.shape}")
    asym = np.abs(Ha - Ha.T)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(Ha))) if Ha.size else 1.0)
    if asym.size and float(np.max(asym)) > tol:
        i, j = np.unravel_index(int(np.argmax(asym)), asym.shape)
        raise SceneFormatError(f"{path}.H", f"not symmetric at ({i},{j})")
    try:
        La = np.asarray(L, dtype=float)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{path}.L", "not a numeric array") from None
    if La.shape != (n,):
        raise SceneFormatError(f"{path}.L", f"expected length {n}, got shape {La.shape}")
    return Quadric(Ha, La, float(c))


def scene_from_dict(obj: dict) -> SceneSystem:
    if not isinstance(obj, dict):
        raise SceneFormatError("$", "top level must be an object")
    n = _require(obj, "n", "$", int)
    if isinstance(n, bool) or n < 1:
        raise SceneFormatError("$.n", "must be a positive integer")
    radius = obj.get("ball_radius", 1.0)
    if not isinstance(radius, (int, float)) or isinstance(radius, bool) or not radius > 0:
        raise SceneFormatError("$.ball_radius", "must be a positive number")
    raw = _require(obj, "constraints", "$", list)
    if not raw:
        raise SceneFormatError("$.constraints", "must be non-empty")
    cons = []
    for i, item in enumerate(raw):
        path = f"$.constraints[{i}]"
        if not isinstance(item, dict):
            raise SceneFormatError(path, "expected an object")
        role = _require(item, "role", path, str)
        if role not in ROLES:
            raise SceneFormatError(f"{path}.role", f"must be one of {ROLES}")
        cons.append(Constraint(_quadric_from_dict(item, path, n), role))
    morse = None
    if obj.get("morse") is not None:
        morse = _quadric_from_dict(obj["morse"], "$.morse", n)
    return SceneSystem(n, tuple(cons), morse, float(radius))


def parse_scene(text: str) -> SceneSystem:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError("$", f"invalid JSON: {exc}") from None
    return scene_from_dict(obj)


def _quadric_to_dict(q: Quadric) -> dict:
    return {"H": q.H.tolist(), "L": q.L.tolist(), "c": q.c}


def scene_to_dict(scene: SceneSystem) -> dict:
    out = {
        "n": scene.n,
        "ball_radius": scene.ball_radius,
        "constraints": [dict(role=c.role, **_quadric_to_dict(c.quadric))
                        for c in scene.constraints],
    }
    if scene.morse is not None:
        out["morse"] = _quadric_to_dict(scene.morse)
    return out


def serialize_scene(scene: SceneSystem, indent: int = 2) -> str:
    return json.dumps(scene_to_dict(scene), indent=indent)


def canonical_scene_json(scene: SceneSystem) -> str:
    """Whitespace-normalized, key-sorted form; basis of the scene digest."""
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def scene_digest(scene: SceneSystem) -> str:
    return hashlib.sha256(canonical_scene_json(scene).encode()).hexdigest()
