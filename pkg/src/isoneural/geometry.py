"""Multi-patch models, the geometry file format and reference-cube faces.

Geometry files are UTF-8 JSON::

    {
      "name": "optional label",
      "description": "optional free text",
      "patches": [
        {"id": 1, "dim": 2, "degrees": [1, 1],
         "knots": [[0, 0, 1, 1], [0, 0, 1, 1]],
         "control_points": [[[0, 0], [0, 1]], [[1, 0], [1, 1]]],
         "weights": [[1, 1], [1, 1]],
         "material": "iron"}
      ],
      "boundaries": [
        {"patch_id": 1, "facet": "x1-", "type": "dirichlet", "value": 0.0}
      ]
    }

``control_points`` is nested row-major with the first parametric index
outermost, so ``control_points[i1][i2]`` is one point. Knots may be given on
any interval; they are rescaled to [-1, 1]. ``weights`` defaults to ones and
``material`` to none. A boundary ``value`` is a number, a list (vector data)
or the name of a registered expression (see :data:`EXPRESSIONS`). Unknown
keys anywhere are rejected.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .splinecore import Facet, GeometryError, KnotVector, Patch

Face = tuple[int, ...]

_TOP_KEYS = {"name", "description", "patches", "boundaries"}
_PATCH_KEYS = {"id", "dim", "degrees", "knots", "control_points", "weights", "material"}
_PATCH_REQUIRED = {"id", "dim", "degrees", "knots", "control_points"}
_BOUNDARY_KEYS = {"patch_id", "facet", "type", "value"}
_BOUNDARY_REQUIRED = {"patch_id", "facet", "type"}


# -- named boundary/source expressions -------------------------------------------

@dataclass(frozen=True)
class Expression:
    """A scalar field of physical coordinates with its gradient."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray], np.ndarray] | None = None


def _sine_value(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def _sine_grad(x):
    s0, s1 = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
    c0, c1 = np.cos(np.pi * x[:, 0]), np.cos(np.pi * x[:, 1])
    return np.pi * np.stack([c0 * s1, s0 * c1], axis=1)


def _sine_lap(x):
    return -2.0 * np.pi**2 * _sine_value(x)


def _x1_value(x):
    return x[:, 0].copy()


def _x1_grad(x):
    g = np.zeros_like(x)
    g[:, 0] = 1.0
    return g


EXPRESSIONS: dict[str, Expression] = {
    "sine_product": Expression(_sine_value, _sine_grad, _sine_lap),
    "x1": Expression(_x1_value, _x1_grad, lambda x: np.zeros(x.shape[0])),
}


def register_expression(name: str, expr: Expression) -> None:
    EXPRESSIONS[name] = expr


# -- boundary records and the model ------------------------------------------------

@dataclass(frozen=True)
class BoundaryRecord:
    patch_id: int
    facet: Facet
    kind: str
    value: float | tuple[float, ...] | str = 0.0

    def is_zero(self) -> bool:
        if isinstance(self.value, str):
            return False
        return bool(np.all(np.asarray(self.value, dtype=float) == 0.0))

    def evaluate(self, x: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
        """Data values ``(B, C)`` and physical gradients ``(B, C, m)`` at ``x``."""
        B, m = x.shape
        if isinstance(self.value, str):
            expr = EXPRESSIONS[self.value]
            v = np.asarray(expr.value(x), dtype=float).reshape(B, -1)
            g = np.asarray(expr.gradient(x), dtype=float).reshape(B, -1, m)
            if v.shape[1] == 1 and n_components > 1:
                v = np.repeat(v, n_components, axis=1)
                g = np.repeat(g, n_components, axis=1)
            return v, g
        c = np.broadcast_to(np.asarray(self.value, dtype=float).reshape(-1), (n_components,))
        return np.tile(c, (B, 1)), np.zeros((B, n_components, m))


@dataclass
class MultiPatchModel:
    """Patches plus boundary labels; materials are per-patch labels."""

    patches: dict[int, Patch]
    boundaries: list[BoundaryRecord] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        dims = {p.dim for p in self.patches.values()}
        if len(dims) > 1:
            raise GeometryError(f"mixed patch dimensions {sorted(dims)}")
        seen = set()
        for b in self.boundaries:
            if b.patch_id not in self.patches:
                raise GeometryError(f"boundary record refers to unknown patch {b.patch_id}")
            if b.facet.axis >= self.dim:
                raise GeometryError(f"facet {b.facet} invalid for a {self.dim}D patch")
            key = (b.patch_id, b.facet)
            if key in seen:
                raise GeometryError(f"duplicate boundary record for patch {b.patch_id} facet {b.facet}")
            seen.add(key)

    @property
    def dim(self) -> int:
        return next(iter(self.patches.values())).dim

    @property
    def phys_dim(self) -> int:
        return next(iter(self.patches.values())).phys_dim

    @property
    def patch_ids(self) -> list[int]:
        return sorted(self.patches)

    def dirichlet(self, pid: int) -> list[BoundaryRecord]:
        return [b for b in self.boundaries if b.patch_id == pid and b.kind == "dirichlet"]

    def neumann(self, pid: int) -> list[BoundaryRecord]:
        return [b for b in self.boundaries if b.patch_id == pid and b.kind == "neumann"]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(p.bounding_box() for p in self.patches.values()))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


# -- JSON I/O -----------------------------------------------------------------------

def _reject_unknown(obj: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise GeometryError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise GeometryError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise GeometryError(f"{where}: missing field(s) {sorted(missing)}")


def model_from_dict(data: dict) -> MultiPatchModel:
    _reject_unknown(data, _TOP_KEYS, {"patches"}, "geometry")
    patches: dict[int, Patch] = {}
    for k, rec in enumerate(data["patches"]):
        _reject_unknown(rec, _PATCH_KEYS, _PATCH_REQUIRED, f"patches[{k}]")
        pid = int(rec["id"])
        d = int(rec["dim"])
        if len(rec["degrees"]) != d or len(rec["knots"]) != d:
            raise GeometryError(f"patch {pid}: need {d} degrees and {d} knot vectors")
        kvs = tuple(KnotVector(np.asarray(kn, dtype=float), int(p)) for p, kn in zip(rec["degrees"], rec["knots"]))
        cp = np.asarray(rec["control_points"], dtype=float)
        w = np.asarray(rec["weights"], dtype=float) if "weights" in rec else np.ones(cp.shape[:-1])
        if pid in patches:
            raise GeometryError(f"duplicate patch id {pid}")
        patches[pid] = Patch(kvs, cp, w, patch_id=pid, material=rec.get("material"))
    if not patches:
        raise GeometryError("geometry has no patches")
    bounds = []
    for k, rec in enumerate(data.get("boundaries", [])):
        _reject_unknown(rec, _BOUNDARY_KEYS, _BOUNDARY_REQUIRED, f"boundaries[{k}]")
        kind = rec["type"]
        if kind not in ("dirichlet", "neumann"):
            raise GeometryError(f"boundaries[{k}]: type must be 'dirichlet' or 'neumann'")
        value = rec.get("value", 0.0)
        if isinstance(value, str):
            if value not in EXPRESSIONS:
                raise GeometryError(f"boundaries[{k}]: unknown expression {value!r}")
        elif isinstance(value, list):
            value = tuple(float(v) for v in value)
        else:
            value = float(value)
        bounds.append(BoundaryRecord(int(rec["patch_id"]), Facet.parse(rec["facet"]), kind, value))
    return MultiPatchModel(patches, bounds, name=data.get("name", ""))


def load_geometry(path: str | Path) -> MultiPatchModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def model_to_dict(model: MultiPatchModel) -> dict:
    out = {"name": model.name, "patches": [], "boundaries": []}
    for pid in model.patch_ids:
        p = model.patches[pid]
        rec = {
            "id": pid,
            "dim": p.dim,
            "degrees": list(p.degrees),
            "knots": [kv.values.tolist() for kv in p.knots],
            "control_points": p.control_points.tolist(),
            "weights": p.weights.tolist(),
        }
        if p.material is not None:
            rec["material"] = p.material
        out["patches"].append(rec)
    for b in model.boundaries:
        v = list(b.value) if isinstance(b.value, tuple) else b.value
        out["boundaries"].append({"patch_id": b.patch_id, "facet": b.facet.label, "type": b.kind, "value": v})
    return out


# -- faces of the reference cube ---------------------------------------------------------
# A face is a tuple with one entry per axis: -1 or +1 for a fixed coordinate,
# 0 for a free one. (0, ..., 0) is the cube itself.

def cube_faces(d: int, q: int | None = None) -> list[Face]:
    faces = [f for f in itertools.product((-1, 0, 1), repeat=d)]
    if q is not None:
        faces = [f for f in faces if face_dim(f) == q]
    return sorted(faces, key=lambda f: (face_dim(f), f))


def face_dim(face: Face) -> int:
    return sum(1 for c in face if c == 0)


def free_axes(face: Face) -> list[int]:
    return [k for k, c in enumerate(face) if c == 0]


def face_contains(outer: Face, inner: Face) -> bool:
    """True if ``inner`` is a subset of ``outer``."""
    return all(o == 0 or o == i for o, i in zip(outer, inner))


def facet_face(facet: Facet, d: int) -> Face:
    f = [0] * d
    f[facet.axis] = facet.side
    return tuple(f)


def face_vertices(face: Face) -> list[Face]:
    choices = [(-1, 1) if c == 0 else (c,) for c in face]
    return [tuple(v) for v in itertools.product(*choices)]


def face_label(face: Face) -> str:
    parts = [f"x{k + 1}{'+' if c > 0 else '-'}" for k, c in enumerate(face) if c != 0]
    return "&".join(parts) if parts else "interior"


def embed_face(face: Face, s: np.ndarray) -> np.ndarray:
    """Reference points on ``face`` for local free coordinates ``s`` ``(B, q)``."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    B = s.shape[0]
    X = np.tile(np.asarray(face, dtype=float), (B, 1))
    for j, k in enumerate(free_axes(face)):
        X[:, k] = s[:, j]
    return X


# -- piecewise-linear point location ------------------------------------------------------

def _simplices_of_cube(d: int) -> list[list[tuple[int, ...]]]:
    """Kuhn triangulation of the unit d-cube (vertex offsets)."""
    out = []
    for perm in itertools.permutations(range(d)):
        v = [0] * d
        simplex = [tuple(v)]
        for k in perm:
            v = list(v)
            v[k] = 1
            simplex.append(tuple(v))
        out.append(simplex)
    return out


class PatchSimplexMesh:
    """Structured simplex approximation of a patch for locating physical points.

    Used for overlap checks and for transferring fields between scattered
    physical points and patch grids; it never enters the training loss.
    """

    def __init__(self, patch: Patch, resolution: int = 16):
        from scipy.spatial import cKDTree

        d = patch.dim
        if patch.phys_dim != d:
            raise GeometryError("point location needs a volumetric patch")
        r = int(resolution)
        t = np.linspace(-1.0, 1.0, r + 1)
        grids = np.meshgrid(*([t] * d), indexing="ij")
        ref = np.stack([g.ravel() for g in grids], axis=1)
        phys = patch.eval(ref)
        strides = [(r + 1) ** (d - 1 - k) for k in range(d)]
        cells = list(itertools.product(range(r), repeat=d))
        simplices = []
        for cell in cells:
            for simplex in _simplices_of_cube(d):
                simplices.append([sum((cell[k] + off[k]) * strides[k] for k in range(d)) for off in simplex])
        self.patch = patch
        self.ref_nodes = ref
        self.nodes = phys
        self.simplices = np.asarray(simplices, dtype=int)
        V = phys[self.simplices]  # (S, d+1, d)
        T = np.transpose(V[:, 1:, :] - V[:, :1, :], (0, 2, 1))
        det = np.linalg.det(T)
        ok = np.abs(det) > 1e-300
        Tinv = np.zeros_like(T)
        Tinv[ok] = np.linalg.inv(T[ok])
        self._origin = V[:, 0, :]
        self._Tinv = Tinv
        self._ok = ok
        self._tree = cKDTree(V.mean(axis=1))
        self._size = float(np.max(np.linalg.norm(V - V.mean(axis=1, keepdims=True), axis=-1)))

    def locate(self, x: np.ndarray, tol: float = 1e-9, k: int = 16) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Simplex index (or -1), barycentric coordinates and containment score.

        The score is the smallest barycentric coordinate of the best candidate
        simplex: positive strictly inside, about zero on the boundary.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        k = min(k, len(self.simplices))
        _, cand = self._tree.query(x, k=k)
        cand = np.asarray(cand).reshape(n, k)
        idx = np.full(n, -1)
        bary = np.zeros((n, x.shape[1] + 1))
        best = np.full(n, -np.inf)
        for j in range(k):
            s = cand[:, j]
            lam = np.einsum("nij,nj->ni", self._Tinv[s], x - self._origin[s])
            full = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
            score = np.where(self._ok[s], full.min(axis=1), -np.inf)
            better = score > best
            best = np.where(better, score, best)
            idx = np.where(better, s, idx)
            bary[better] = full[better]
        idx = np.where(best >= -tol, idx, -1)
        return idx, bary, best

    def interpolate_reference(self, x: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        """Approximate reference coordinates of physical points (nan outside)."""
        idx, bary, _ = self.locate(x, tol=tol)
        out = np.full((len(idx), self.patch.dim), np.nan)
        inside = idx >= 0
        out[inside] = np.einsum("ni,nij->nj", bary[inside], self.ref_nodes[self.simplices[idx[inside]]])
        return np.clip(out, -1.0, 1.0), inside

    def interior_score(self, x: np.ndarray) -> np.ndarray:
        """Largest minimum barycentric coordinate; > 0 means strictly inside."""
        return self.locate(x, tol=np.inf)[2]


def iter_patches(model: MultiPatchModel) -> Iterable[tuple[int, Patch]]:
    for pid in model.patch_ids:
        yield pid, model.patches[pid]
