"""Energy densities evaluated at Monte Carlo samples in reference coordinates.

Every problem exposes per-sample contributions (density times measure
factor, not yet multiplied by the Monte Carlo weight) for volume samples of
each patch and for boundary samples on the facets it flags.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .ansatz import GlobalAnsatz
from .geometry import EXPRESSIONS, BoundaryRecord, Expression, MultiPatchModel
from .netdiff import DTYPE
from .splinecore import Facet, facet_measure_batch, metric_terms

log = logging.getLogger(__name__)

MU0 = 4e-7 * math.pi


class ProblemError(ValueError):
    pass


class _InversionCounter:
    """Counts contact samples whose deformation gradient has det F <= 0."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        if n and self.count == 0:
            log.warning("det F <= 0 at %d contact sample(s); the deformation is locally inverted", n)
        self.count += n

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


INVERSION_COUNTER = _InversionCounter()


@dataclass(frozen=True)
class GeometryCache:
    x: np.ndarray      # physical points
    Jinv: torch.Tensor
    detJ: torch.Tensor  # clamped |det J|
    K: torch.Tensor


def volume_geometry(model: MultiPatchModel, pid: int, X: np.ndarray) -> GeometryCache:
    x, J = model.patches[pid].eval_with_jacobian(X)
    Jinv, detJ, K, _ = metric_terms(J, clamp=True)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return GeometryCache(x, t(Jinv), t(np.abs(detJ)), t(K))


# -- scalar energies ------------------------------------------------------------------------

@dataclass
class ScalarEnergyProblem:
    """``∫ ½ ν |∇u|² - s u dx - ∫_N h u ds`` in reference coordinates.

    ``nu`` and ``source`` are per patch; a source is a constant or a callable
    of physical points. Neumann fluxes ``h`` come from the model's Neumann
    records: a constant, or a named expression whose gradient dotted with
    the outward normal is used.
    """

    model: MultiPatchModel
    nu: dict[int, float]
    source: dict[int, float | object] = field(default_factory=dict)
    exact: Expression | None = None
    kind: str = "scalar"
    n_components: int = 1
    n_phi: int = 0

    def __post_init__(self):
        for pid, v in self.nu.items():
            if not v > 0:
                raise ProblemError(f"patch {pid}: reluctivity must be positive")

    def boundary_facets(self) -> list[tuple[int, Facet]]:
        return [(b.patch_id, b.facet) for b in self.model.boundaries if b.kind == "neumann" and not b.is_zero()]

    def volume_density(self, ansatz: GlobalAnsatz, pid: int, X: np.ndarray, phi, theta) -> torch.Tensor:
        geo = volume_geometry(self.model, pid, X)
        u, g = ansatz.evaluate(pid, X, phi, theta)
        gh = g[:, 0, :]
        dens = 0.5 * self.nu[pid] * torch.einsum("bi,bij,bj->b", gh, geo.K, gh)
        src = self.source.get(pid, 0.0)
        if callable(src) or src != 0.0:
            s = src(geo.x) if callable(src) else np.full(len(X), float(src))
            dens = dens - torch.as_tensor(s, dtype=DTYPE) * u[:, 0] * geo.detJ
        return dens

    def gradient_term(self, ansatz: GlobalAnsatz, pid: int, X: np.ndarray, phi, theta) -> torch.Tensor:
        """``½ ν ∇̂uᵀ K ∇̂u`` alone (no source)."""
        geo = volume_geometry(self.model, pid, X)
        _, g = ansatz.evaluate(pid, X, phi, theta)
        gh = g[:, 0, :]
        return 0.5 * self.nu[pid] * torch.einsum("bi,bij,bj->b", gh, geo.K, gh)

    def boundary_density(self, ansatz: GlobalAnsatz, pid: int, facet: Facet, X: np.ndarray, phi, theta):
        patch = self.model.patches[pid]
        measure, normal, _ = facet_measure_batch(patch, facet, X)
        x = patch.eval(X)
        h = np.zeros(len(X))
        for rec in self.model.neumann(pid):
            if rec.facet != facet:
                continue
            if isinstance(rec.value, str):
                h += np.einsum("bi,bi->b", EXPRESSIONS[rec.value].gradient(x), normal)
            else:
                h += float(np.asarray(rec.value, dtype=float).reshape(-1)[0])
        u, _ = ansatz.evaluate(pid, X, phi, theta)
        return -torch.as_tensor(h * measure, dtype=DTYPE) * u[:, 0]


def magnetostatic_problem(model: MultiPatchModel, materials: dict[str, dict], mu0: float = MU0,
                          patch_materials: dict[int, str] | None = None) -> ScalarEnergyProblem:
    """Per-material ``mu_r`` (or ``nu``) and optional current density ``jz``."""
    nu, src = {}, {}
    for pid in model.patch_ids:
        label = (patch_materials or {}).get(pid) or model.patches[pid].material
        if label is None or label not in materials:
            raise ProblemError(f"patch {pid}: no material entry for {label!r}")
        mat = materials[label]
        unknown = set(mat) - {"mu_r", "nu", "jz"}
        if unknown:
            raise ProblemError(f"material {label!r}: unknown keys {sorted(unknown)}")
        if "nu" in mat:
            nu[pid] = float(mat["nu"])
        else:
            nu[pid] = 1.0 / (mu0 * float(mat.get("mu_r", 1.0)))
        if mat.get("jz"):
            src[pid] = float(mat["jz"])
    return ScalarEnergyProblem(model, nu, src, kind="magnetostatic2d")


MANUFACTURED_CASES = {"sine_product": "sine_product"}


def poisson_manufactured_problem(model: MultiPatchModel, case: str,
                                 topology=None) -> tuple[ScalarEnergyProblem, MultiPatchModel]:
    """Poisson problem whose exact solution is the registered expression ``case``.

    Returns the problem and a copy of the model whose Dirichlet records carry
    the exact solution (or zero where it vanishes on the facet) and whose
    Neumann records carry the exact flux. With ``topology`` given, every
    outer facet without a Dirichlet record gets a flux record too.
    """
    if case not in MANUFACTURED_CASES:
        raise ProblemError(f"unknown manufactured case {case!r}; known: {sorted(MANUFACTURED_CASES)}")
    expr = EXPRESSIONS[MANUFACTURED_CASES[case]]
    if expr.laplacian is None:
        raise ProblemError(f"case {case!r} has no Laplacian")
    probe = np.linspace(-1.0, 1.0, 33)
    records = []
    for b in model.boundaries:
        patch = model.patches[b.patch_id]
        if b.kind == "dirichlet":
            free = [k for k in range(model.dim) if k != b.facet.axis]
            grids = np.meshgrid(*([probe] * len(free)), indexing="ij")
            X = np.zeros((grids[0].size if free else 1, model.dim))
            for j, k in enumerate(free):
                X[:, k] = grids[j].ravel()
            X[:, b.facet.axis] = b.facet.side
            vanishes = np.max(np.abs(expr.value(patch.eval(X)))) < 1e-12
            records.append(BoundaryRecord(b.patch_id, b.facet, "dirichlet", 0.0 if vanishes else case))
        else:
            records.append(BoundaryRecord(b.patch_id, b.facet, "neumann", case))
    if topology is not None:
        from .geometry import facet_face

        labelled = {(b.patch_id, b.facet) for b in model.boundaries}
        for pid in model.patch_ids:
            shared = set(topology.shared_faces(pid))
            for k in range(model.dim):
                for side in (-1, 1):
                    f = Facet(k, side)
                    if (pid, f) not in labelled and facet_face(f, model.dim) not in shared:
                        records.append(BoundaryRecord(pid, f, "neumann", case))
    new_model = MultiPatchModel(dict(model.patches), records, model.name)
    src = {pid: (lambda x, e=expr: -e.laplacian(x)) for pid in model.patch_ids}
    prob = ScalarEnergyProblem(new_model, {pid: 1.0 for pid in model.patch_ids}, src, exact=expr,
                               kind="poisson_manufactured")
    return prob, new_model


# -- elasticity -------------------------------------------------------------------------

def lame_from_young(E: float, nu: float) -> tuple[float, float]:
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def green_strain(F: torch.Tensor) -> torch.Tensor:
    """``½(FᵀF - I)``; shares invariants with ``½(FFᵀ - I)``."""
    d = F.shape[-1]
    return 0.5 * (F.transpose(-1, -2) @ F - torch.eye(d, dtype=F.dtype))


def svk_density(E: torch.Tensor, lam: float, mu: float) -> torch.Tensor:
    tr = torch.diagonal(E, dim1=-2, dim2=-1).sum(-1)
    return 0.5 * lam * tr * tr + mu * (E * E).sum((-2, -1))


def cofactor(F: torch.Tensor) -> torch.Tensor:
    """``det(F) F^-T`` written without a division."""
    d = F.shape[-1]
    if d == 1:
        return torch.ones_like(F)
    if d == 2:
        a, b, c, e = F[..., 0, 0], F[..., 0, 1], F[..., 1, 0], F[..., 1, 1]
        return torch.stack([torch.stack([e, -c], -1), torch.stack([-b, a], -1)], -2)
    cols = [F[..., :, k] for k in range(3)]
    rows = [torch.linalg.cross(cols[1], cols[2]), torch.linalg.cross(cols[2], cols[0]),
            torch.linalg.cross(cols[0], cols[1])]
    return torch.stack(rows, -1)


@dataclass(frozen=True)
class ContactPlane:
    """Rigid half-space ``x_axis <= c(φ)`` (``side="below"``) or ``>=`` (``"above"``).

    ``c(φ) = offset + phi_coeffs · φ``. An optional extent restricts the body
    to ``x_extent_axis <= extent_max``.
    """

    axis: int
    side: str
    offset: float
    phi_coeffs: tuple[float, ...] = ()
    extent_axis: int | None = None
    extent_max: float | None = None

    def __post_init__(self):
        if self.side not in ("below", "above"):
            raise ProblemError("contact plane side must be 'below' or 'above'")

    def level(self, phi) -> float:
        ph = np.zeros(len(self.phi_coeffs)) if phi is None else np.asarray(phi, dtype=float).reshape(-1)
        return self.offset + float(np.dot(self.phi_coeffs, ph[:len(self.phi_coeffs)]))

    def depth(self, y: torch.Tensor, phi) -> torch.Tensor:
        """Distance from a penetrating point to the rigid body's boundary, 0 outside."""
        c = self.level(phi)
        delta = c - y[:, self.axis] if self.side == "below" else y[:, self.axis] - c
        if self.extent_axis is not None:
            delta = torch.minimum(delta, self.extent_max - y[:, self.extent_axis])
        return torch.clamp(delta, min=0.0)


@dataclass
class ElasticContactProblem:
    """Saint Venant-Kirchhoff energy with body force, tractions and a contact penalty.

    ``penalty_power`` 2 gives ``½ ε g²`` with ``g`` the squared depth
    (quartic in depth); 1 gives the usual quadratic penalty.
    """

    model: MultiPatchModel
    lam: float
    mu: float
    body_force: dict[int, np.ndarray] = field(default_factory=dict)
    planes: list[ContactPlane] = field(default_factory=list)
    contact_facets: list[tuple[int, Facet]] = field(default_factory=list)
    eps_n: float = 1e3
    penalty_power: int = 2
    n_phi: int = 0
    kind: str = "svk_contact"
    exact: Expression | None = None

    def __post_init__(self):
        if not self.mu > 0 or not self.lam > -2.0 * self.mu / 3.0:
            raise ProblemError("Lame coefficients need mu > 0 and lambda > -2 mu / 3")
        if not self.eps_n > 0:
            raise ProblemError("penalty constant must be positive")
        if self.penalty_power not in (1, 2):
            raise ProblemError("penalty_power must be 1 or 2")

    @property
    def n_components(self) -> int:
        return self.model.phys_dim

    def _tractions(self, pid: int, facet: Facet) -> np.ndarray | None:
        T = None
        for rec in self.model.neumann(pid):
            if rec.facet == facet and not rec.is_zero():
                v = np.broadcast_to(np.asarray(rec.value, dtype=float).reshape(-1), (self.n_components,))
                T = v.copy() if T is None else T + v
        return T

    def boundary_facets(self) -> list[tuple[int, Facet]]:
        out = list(self.contact_facets)
        for b in self.model.boundaries:
            if b.kind == "neumann" and not b.is_zero() and (b.patch_id, b.facet) not in out:
                out.append((b.patch_id, b.facet))
        return out

    def deformation_gradient(self, G: torch.Tensor, Jinv: torch.Tensor) -> torch.Tensor:
        d = G.shape[-1]
        return torch.eye(d, dtype=DTYPE) + G @ Jinv

    def volume_density(self, ansatz: GlobalAnsatz, pid: int, X: np.ndarray, phi, theta) -> torch.Tensor:
        geo = volume_geometry(self.model, pid, X)
        u, G = ansatz.evaluate(pid, X, phi, theta)
        F = self.deformation_gradient(G, geo.Jinv)
        dens = svk_density(green_strain(F), self.lam, self.mu)
        b = self.body_force.get(pid)
        if b is not None and np.any(b):
            dens = dens - u @ torch.as_tensor(b, dtype=DTYPE)
        return dens * geo.detJ

    def boundary_density(self, ansatz: GlobalAnsatz, pid: int, facet: Facet, X: np.ndarray, phi, theta):
        patch = self.model.patches[pid]
        measure, normal, _ = facet_measure_batch(patch, facet, X)
        u, G = ansatz.evaluate(pid, X, phi, theta)
        out = torch.zeros(len(X), dtype=DTYPE)
        T = self._tractions(pid, facet)
        if T is not None:
            out = out - (u @ torch.as_tensor(T, dtype=DTYPE)) * torch.as_tensor(measure, dtype=DTYPE)
        if (pid, facet) in self.contact_facets and self.planes:
            x, J = patch.eval_with_jacobian(X)
            Jinv, _, _, _ = metric_terms(J, clamp=False)
            F = self.deformation_gradient(G, torch.as_tensor(Jinv, dtype=DTYPE))
            y = torch.as_tensor(x, dtype=DTYPE) + u
            out = out + self.penalty_density(F, y, torch.as_tensor(normal, dtype=DTYPE), phi) \
                * torch.as_tensor(measure, dtype=DTYPE)
        return out

    def penalty_density(self, F: torch.Tensor, y: torch.Tensor, N: torch.Tensor, phi) -> torch.Tensor:
        """``½ ε g^p ‖cof(F) N‖`` per unit reference surface of the initial configuration."""
        gap = torch.zeros(y.shape[0], dtype=DTYPE)
        for plane in self.planes:
            gap = gap + plane.depth(y, phi) ** 2
        if not bool((gap > 0).any()):
            return gap
        with torch.no_grad():
            INVERSION_COUNTER.add(int((torch.linalg.det(F) <= 0).sum()))
        area = torch.linalg.norm(torch.einsum("bij,bj->bi", cofactor(F), N), dim=1)
        return 0.5 * self.eps_n * gap**self.penalty_power * area

    def max_penetration(self, ansatz: GlobalAnsatz, phi, theta=None, n: int = 201) -> float:
        """Largest penetration depth over a uniform grid on the contact facets."""
        worst = 0.0
        d = self.model.dim
        t = np.linspace(-1.0, 1.0, n if d == 2 else int(math.sqrt(n)) + 1)
        for pid, facet in self.contact_facets:
            free = [k for k in range(d) if k != facet.axis]
            grids = np.meshgrid(*([t] * len(free)), indexing="ij")
            X = np.zeros((grids[0].size, d))
            for j, k in enumerate(free):
                X[:, k] = grids[j].ravel()
            X[:, facet.axis] = facet.side
            x = self.model.patches[pid].eval(X)
            with torch.no_grad():
                u, _ = ansatz.evaluate(pid, X, phi, theta)
            y = torch.as_tensor(x, dtype=DTYPE) + u
            for plane in self.planes:
                worst = max(worst, float(plane.depth(y, phi).max()))
        return worst


# -- sums ------------------------------------------------------------------------------------

@dataclass
class EnergyBatch:
    """One batch of Monte Carlo samples sharing one load vector."""

    volume: dict[int, np.ndarray]
    boundary: list[tuple[int, Facet, np.ndarray]]
    phi: np.ndarray | None
    volume_weight: dict[int, float]
    boundary_weight: float

    def provenance(self, index: int) -> str:
        k = index
        for pid, X in self.volume.items():
            if k < len(X):
                return f"volume sample {k} of patch {pid} (xhat={X[k].tolist()})"
            k -= len(X)
        for pid, facet, X in self.boundary:
            if k < len(X):
                return f"boundary sample {k} on {facet} of patch {pid} (xhat={X[k].tolist()})"
            k -= len(X)
        return f"sample {index}"

    def split(self, n: int) -> list["EnergyBatch"]:
        """Deterministic shards with the original weights."""
        out = []
        for s in range(n):
            vol = {pid: X[s::n] for pid, X in self.volume.items()}
            bnd = [(pid, f, X[s::n]) for pid, f, X in self.boundary]
            out.append(EnergyBatch(vol, bnd, self.phi, self.volume_weight, self.boundary_weight))
        return out


def sample_contributions(problem, ansatz: GlobalAnsatz, batch: EnergyBatch, theta) -> torch.Tensor:
    """Weighted per-sample contributions, volume samples first."""
    parts = []
    for pid, X in batch.volume.items():
        if len(X):
            parts.append(problem.volume_density(ansatz, pid, X, batch.phi, theta) * batch.volume_weight[pid])
    for pid, facet, X in batch.boundary:
        if len(X):
            parts.append(problem.boundary_density(ansatz, pid, facet, X, batch.phi, theta) * batch.boundary_weight)
    if not parts:
        return torch.zeros(0, dtype=DTYPE)
    return torch.cat(parts)


def total_loss(problem, ansatz: GlobalAnsatz, batch: EnergyBatch, theta) -> torch.Tensor:
    """Monte Carlo estimate of the energy for one batch.

    Raises
    ------
    FloatingPointError
        If any contribution is not finite; the message names the sample.
    """
    c = sample_contributions(problem, ansatz, batch, theta)
    bad = ~torch.isfinite(c.detach())
    if bool(bad.any()):
        idx = int(torch.nonzero(bad)[0])
        raise FloatingPointError(f"non-finite energy at {batch.provenance(idx)}")
    return c.sum()
