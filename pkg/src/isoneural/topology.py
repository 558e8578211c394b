"""Interface discovery on conforming multi-patch geometries.

Every face of every reference cube (vertices, edges, facets) is mapped to
physical space and grouped with the faces of other patches that describe the
same physical set. Groups shared by two or more patches become interface
entities; their member patches, dimension and per-patch localization are
what the ansatz needs to build continuous trial functions.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Face,
    MultiPatchModel,
    PatchSimplexMesh,
    cube_faces,
    embed_face,
    face_contains,
    face_dim,
    face_label,
    face_vertices,
    facet_face,
    free_axes,
)
from .splinecore import GeometryError

log = logging.getLogger(__name__)

# generic (non-symmetric) sample coordinates used to pin orientation maps
_PROBES = {
    0: np.zeros((1, 0)),
    1: np.array([[-0.71], [0.13], [0.87]]),
    2: np.array([[-0.71, 0.29], [0.13, -0.83], [0.87, 0.61]]),
}


class TopologyError(GeometryError):
    """Overlapping, non-conforming or periodic patch layouts."""


def signed_permutations(q: int) -> list[np.ndarray]:
    """All ``2^q q!`` signed permutation matrices, identity first."""
    out = []
    for perm in itertools.permutations(range(q)):
        for signs in itertools.product((1, -1), repeat=q):
            P = np.zeros((q, q))
            for a, b in enumerate(perm):
                P[a, b] = signs[a]
            out.append(P)
    return out


@dataclass(frozen=True)
class Localization:
    """Where an entity sits in one member patch.

    ``face`` is the reference face; ``orientation`` maps canonical entity
    coordinates ``s`` to the face's free coordinates: ``xhat_free = orientation @ s``.
    """

    patch_id: int
    face: Face
    orientation: np.ndarray

    def localize(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        return embed_face(self.face, s @ self.orientation.T)

    def to_canonical(self, xhat: np.ndarray) -> np.ndarray:
        """Canonical coordinates of reference points lying on (or projected to) the face."""
        xhat = np.atleast_2d(xhat)
        return xhat[:, free_axes(self.face)] @ self.orientation


@dataclass
class InterfaceEntity:
    multi_index: tuple[int, ...]
    q: int
    localizations: dict[int, Localization]
    on_dirichlet: bool
    anchor: np.ndarray
    index: int = 0

    @property
    def name(self) -> str:
        members = ",".join(str(i) for i in self.multi_index)
        return f"q{self.q}({members})#{self.index}"

    def localize(self, patch_id: int, s) -> np.ndarray:
        return self.localizations[patch_id].localize(s)

    @property
    def canonical_patch(self) -> int:
        return self.multi_index[0]


@dataclass(frozen=True)
class FaceInfo:
    """Sharing status of one reference face of one patch."""

    members: tuple[int, ...]
    on_dirichlet: bool
    entity: int | None = None


@dataclass
class PatchTopology:
    entities: list[InterfaceEntity]
    J: dict[int, list[tuple[int, ...]]]
    dirichlet_facets: dict[int, list]
    neumann_facets: dict[int, list]
    geo_tol: float = 0.0
    subentities: str = "all"
    face_info: dict[tuple[int, Face], FaceInfo] = field(default_factory=dict)

    def xi(self, q: int) -> list[InterfaceEntity]:
        """Entities of dimension ``q`` not contained in the Dirichlet boundary."""
        return [e for e in self.entities if e.q == q and not e.on_dirichlet]

    def active(self) -> list[InterfaceEntity]:
        return [e for e in self.entities if not e.on_dirichlet]

    def entities_of(self, pid: int) -> list[InterfaceEntity]:
        return [e for e in self.active() if pid in e.multi_index]

    def shared_faces(self, pid: int) -> list[Face]:
        """Reference faces of ``pid`` that another patch also owns."""
        return sorted(f for (p, f), info in self.face_info.items() if p == pid and len(info.members) > 1)


@dataclass
class ConformityReport:
    entity: str
    max_point_mismatch: float
    max_tangent_mismatch: float
    tol: float
    n_samples: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_point_mismatch < self.tol and self.max_tangent_mismatch < self.tol


# -- helpers ----------------------------------------------------------------------------

def _cluster(points: np.ndarray, tol: float) -> np.ndarray:
    """Greedy tolerance clustering; ids follow first appearance."""
    reps: list[np.ndarray] = []
    ids = np.empty(len(points), dtype=int)
    for k, p in enumerate(points):
        if reps:
            dist = np.linalg.norm(np.asarray(reps) - p, axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= tol:
                ids[k] = j
                continue
        reps.append(p)
        ids[k] = len(reps) - 1
    return ids


def _match_orientation(model: MultiPatchModel, ref_pid: int, ref_face: Face,
                       pid: int, face: Face) -> tuple[np.ndarray | None, float]:
    """Best signed permutation mapping ``ref_face`` coordinates onto ``face``."""
    q = face_dim(ref_face)
    s = _PROBES[q] if q in _PROBES else np.random.default_rng(0).uniform(-0.9, 0.9, (4, q))
    target = model.patches[ref_pid].eval(embed_face(ref_face, s))
    best, best_err = None, np.inf
    for P in signed_permutations(q):
        pts = model.patches[pid].eval(embed_face(face, s @ P.T))
        err = float(np.max(np.linalg.norm(pts - target, axis=1)))
        if err < best_err - 1e-300:
            best, best_err = P, err
    return best, best_err


def _on_dirichlet(model: MultiPatchModel, pid: int, face: Face) -> bool:
    d = model.dim
    return any(face_contains(facet_face(b.facet, d), face) for b in model.dirichlet(pid))


# -- public operations --------------------------------------------------------------------

def detect_interfaces(model: MultiPatchModel, geo_tol: float | None = None,
                      subentities: str = "all", check: bool = True) -> PatchTopology:
    """Find all interface entities of a conforming multi-patch model.

    Parameters
    ----------
    geo_tol
        Physical matching tolerance; defaults to ``1e-9`` times the model's
        bounding-box diameter.
    subentities
        ``"all"`` records every shared lower-dimensional face (for example the
        endpoints of a shared edge) as its own entity unless it lies in the
        Dirichlet boundary. ``"shared"`` records a lower-dimensional face only
        when strictly more patches share it than any shared face containing it.
    check
        Run the overlap and partial-contact checks.

    Raises
    ------
    TopologyError
        On overlapping interiors, non-conforming contact or a patch touching itself.
    """
    if subentities not in ("all", "shared"):
        raise ValueError("subentities must be 'all' or 'shared'")
    d = model.dim
    diam = model.diameter()
    tol = geo_tol if geo_tol is not None else 1e-9 * diam
    if tol <= 0:
        raise ValueError("geo_tol must be positive")

    # vertices
    corner_faces = cube_faces(d, 0)
    records = []
    for pid in model.patch_ids:
        pts = model.patches[pid].eval(np.asarray(corner_faces, dtype=float))
        for face, x in zip(corner_faces, pts):
            records.append((pid, face, x))
    vid = _cluster(np.asarray([r[2] for r in records]), tol)
    vertex_id = {(r[0], r[1]): int(v) for r, v in zip(records, vid)}

    # faces of every dimension below d, grouped by vertex set and center point
    groups: list[dict] = []
    for q in range(d):
        for pid in model.patch_ids:
            patch = model.patches[pid]
            for face in cube_faces(d, q):
                vids = frozenset(vertex_id[(pid, v)] for v in face_vertices(face))
                if len(vids) < 2**q:
                    continue  # collapsed face
                center = patch.eval(embed_face(face, np.zeros((1, q))))[0]
                for g in groups:
                    if g["q"] == q and g["vids"] == vids and np.linalg.norm(g["center"] - center) <= tol:
                        g["members"].append((pid, face))
                        break
                else:
                    groups.append({"q": q, "vids": vids, "center": center, "members": [(pid, face)]})

    candidates = []
    for g in groups:
        pids = [m[0] for m in g["members"]]
        if len(set(pids)) != len(pids):
            raise TopologyError(
                f"patch {pids[0]} touches itself at a {g['q']}-dimensional face; periodic layouts are not supported"
            )
        if len(pids) >= 2:
            candidates.append(g)

    if subentities == "shared":
        kept = []
        for g in candidates:
            members = sorted(m[0] for m in g["members"])
            pid0, face0 = min(g["members"])
            redundant = False
            for h in candidates:
                if h["q"] <= g["q"] or sorted(m[0] for m in h["members"]) != members:
                    continue
                hface = dict(h["members"])[pid0]
                if face_contains(hface, face0):
                    redundant = True
                    break
            if not redundant:
                kept.append(g)
        candidates = kept

    entities = []
    for g in candidates:
        members = sorted(g["members"])
        ref_pid, ref_face = members[0]
        locs = {ref_pid: Localization(ref_pid, ref_face, np.eye(g["q"]))}
        for pid, face in members[1:]:
            P, err = _match_orientation(model, ref_pid, ref_face, pid, face)
            if P is None or err > max(tol, 1e-9 * diam) * 10:
                raise TopologyError(
                    f"non-conforming interface between patches {ref_pid} ({face_label(ref_face)}) and "
                    f"{pid} ({face_label(face)}): best point mismatch {err:.3e}"
                )
            locs[pid] = Localization(pid, face, P)
        on_d = any(_on_dirichlet(model, pid, face) for pid, face in members)
        entities.append(InterfaceEntity(tuple(m[0] for m in members), g["q"], locs, on_d, g["center"]))
    entities.sort(key=lambda e: (e.q, e.multi_index, tuple(np.round(e.anchor / max(tol, 1e-300)))))
    for k, e in enumerate(entities):
        e.index = k

    if check:
        _check_overlap_and_contact(model, groups)

    face_info: dict[tuple[int, Face], FaceInfo] = {}
    entity_of = {(pid, loc.face): e.index for e in entities for pid, loc in e.localizations.items()}
    for g in groups:
        members = tuple(sorted(m[0] for m in g["members"]))
        on_d = any(_on_dirichlet(model, pid, face) for pid, face in g["members"])
        for key in g["members"]:
            face_info[key] = FaceInfo(members, on_d, entity_of.get(key))

    J = {}
    for pid in model.patch_ids:
        J[pid] = sorted({e.multi_index for e in entities if pid in e.multi_index and not e.on_dirichlet},
                        key=lambda m: (len(m), m))
    dir_f = {pid: [b.facet for b in model.dirichlet(pid)] for pid in model.patch_ids}
    neu_f = {pid: [b.facet for b in model.neumann(pid)] for pid in model.patch_ids}
    return PatchTopology(entities, J, dir_f, neu_f, geo_tol=tol, subentities=subentities, face_info=face_info)


def _check_overlap_and_contact(model: MultiPatchModel, groups: list[dict]) -> None:
    if model.phys_dim != model.dim:
        return
    d = model.dim
    meshes = {pid: PatchSimplexMesh(model.patches[pid], resolution=12) for pid in model.patch_ids}
    shared_with: dict[tuple[int, Face], set[int]] = {}
    for g in groups:
        pids = {m[0] for m in g["members"]}
        for m in g["members"]:
            shared_with.setdefault(m, set()).update(pids)

    t = np.linspace(-0.75, 0.75, 5)
    interior = np.stack([g.ravel() for g in np.meshgrid(*([t] * d), indexing="ij")], axis=1)
    for i in model.patch_ids:
        xi = model.patches[i].eval(interior)
        for j in model.patch_ids:
            if j == i:
                continue
            score = meshes[j].interior_score(xi)
            if np.any(score > 1e-6):
                raise TopologyError(f"interiors of patches {i} and {j} overlap")

    # a vertex or face center of patch i lying on patch j must belong to a face shared with j
    for i in model.patch_ids:
        pi = model.patches[i]
        for face in cube_faces(d):
            if face_dim(face) == d:
                continue
            x = pi.eval(embed_face(face, np.zeros((1, face_dim(face)))))
            for j in model.patch_ids:
                if j == i or j in shared_with.get((i, face), set()):
                    continue
                score = meshes[j].interior_score(x)[0]
                if score > -1e-3:
                    raise TopologyError(
                        f"non-conforming contact: face {face_label(face)} of patch {i} touches patch {j} "
                        f"without a matching face"
                    )


def facet_correspondence(entity: InterfaceEntity, patch_id: int) -> np.ndarray:
    """Signed permutation from canonical entity coordinates to the patch's face coordinates."""
    if patch_id not in entity.localizations:
        raise TopologyError(f"patch {patch_id} is not a member of entity {entity.name}")
    return entity.localizations[patch_id].orientation


def conformity_check(model: MultiPatchModel, entity: InterfaceEntity, n_samples: int = 64,
                     tol: float | None = None, seed: int = 0) -> ConformityReport:
    """Point and tangent agreement of all member parametrizations on an entity.

    Tangent mismatch is measured relative to the canonical patch's tangent length.
    """
    if tol is None:
        tol = 1e-8 * model.diameter()
    q = entity.q
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.0, 1.0, (n_samples, q)) if q else np.zeros((1, 0))
    ref = entity.localizations[entity.canonical_patch]
    ref_patch = model.patches[ref.patch_id]
    x_ref, J_ref = ref_patch.eval_with_jacobian(ref.localize(s))
    T_ref = J_ref[:, :, free_axes(ref.face)] @ ref.orientation  # d x/d s
    max_pt, max_tan = 0.0, 0.0
    for pid, loc in entity.localizations.items():
        if pid == ref.patch_id:
            continue
        x, J = model.patches[pid].eval_with_jacobian(loc.localize(s))
        max_pt = max(max_pt, float(np.max(np.linalg.norm(x - x_ref, axis=1))))
        if q:
            T = J[:, :, free_axes(loc.face)] @ loc.orientation
            scale = np.maximum(np.linalg.norm(T_ref, axis=1), 1e-300)
            rel = np.linalg.norm(T - T_ref, axis=1) / scale
            max_tan = max(max_tan, float(np.max(rel)))
    return ConformityReport(entity.name, max_pt, max_tan, tol, len(s))
