"""Boundary- and interface-conforming trial functions on multi-patch models.

On patch ``i`` the trial function is

    u_i(x̂) = N_i(x̂, φ) p_i(x̂) + lift_i(x̂) + Σ_E  P_E(s_E(x̂), φ) p_{E,i}(x̂)

where ``N_i`` is the interior network, ``p_i`` a product of linear factors
vanishing on the Dirichlet facets and on every face shared with another
patch, and the sum runs over the interface entities ``E`` touching patch
``i``. Each entity owns exactly one payload ``P_E`` (a network of its
canonical coordinates ``s_E``, or constants for a corner) that every member
patch reads, so values agree on shared faces by construction.

The entity polynomial for a face with fixed coordinates ``x̂_m = c_m`` is

    p_{E,i} = Π_free (x̂_k - 1)(x̂_k + 1) · Π_fixed (x̂_m + c_m) / (2 c_m)

which equals ``P_E`` on the face after the free factors, vanishes on every
face that does not contain the entity, and is invariant under the signed
permutations relating member patches. A free factor drops a root at an end
of the face whose sub-face is shared by exactly the same patches without
being an entity itself (possible with ``subentities="shared"``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import BoundaryRecord, Face, MultiPatchModel, embed_face, face_contains, face_dim, facet_face, free_axes
from .netdiff import DTYPE, NetworkError, NetworkSpec, forward_with_input_grad, init_network
from .splinecore import Facet
from .topology import FaceInfo, InterfaceEntity, PatchTopology


class AnsatzError(ValueError):
    pass


# -- vanishing polynomials -----------------------------------------------------------------

@dataclass(frozen=True)
class VanishingSpec:
    """``scale * Π_k (x̂_k - 1)^alpha_k (x̂_k + 1)^beta_k``."""

    alpha: tuple[int, ...]
    beta: tuple[int, ...]
    scale: float = 1.0

    def __post_init__(self):
        if len(self.alpha) != len(self.beta):
            raise ValueError("alpha and beta must have equal length")
        if any(e not in (0, 1, 2) for e in self.alpha + self.beta):
            raise ValueError("vanishing exponents must be 0, 1 or 2")

    @classmethod
    def one(cls, d: int) -> "VanishingSpec":
        return cls((0,) * d, (0,) * d)

    @classmethod
    def from_facets(cls, facets, d: int) -> "VanishingSpec":
        alpha, beta = [0] * d, [0] * d
        for f in facets:
            if f.side > 0:
                alpha[f.axis] = 1
            else:
                beta[f.axis] = 1
        return cls(tuple(alpha), tuple(beta))

    @property
    def degree(self) -> int:
        return sum(self.alpha) + sum(self.beta)

    def zero_facets(self) -> list[Facet]:
        out = []
        for k, (a, b) in enumerate(zip(self.alpha, self.beta)):
            if b:
                out.append(Facet(k, -1))
            if a:
                out.append(Facet(k, 1))
        return out

    def evaluate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(B,)`` and gradients ``(B, d)``."""
        X = np.atleast_2d(X)
        B, d = X.shape
        f = np.ones((B, d))
        df = np.zeros((B, d))
        for k in range(d):
            a, b = self.alpha[k], self.beta[k]
            if a == 0 and b == 0:
                continue
            m, p = X[:, k] - 1.0, X[:, k] + 1.0
            f[:, k] = m**a * p**b
            df[:, k] = (a * m ** max(a - 1, 0) * p**b if a else 0.0) + (b * m**a * p ** max(b - 1, 0) if b else 0.0)
        val = self.scale * np.prod(f, axis=1)
        grad = np.empty((B, d))
        for k in range(d):
            others = np.prod(np.delete(f, k, axis=1), axis=1) if d > 1 else np.ones(B)
            grad[:, k] = self.scale * df[:, k] * others
        return val, grad

    def describe(self) -> str:
        parts = []
        for k, (a, b) in enumerate(zip(self.alpha, self.beta)):
            for e, sign in ((b, "+"), (a, "-")):
                if e:
                    parts.append(f"(x{k + 1}{sign}1)" + (f"^{e}" if e > 1 else ""))
        body = "".join(parts) or "1"
        return body if self.scale == 1.0 else f"{self.scale:g}*{body}"


# -- parameter registry ----------------------------------------------------------------

@dataclass(frozen=True)
class ParamBlock:
    name: str
    owner: str
    offset: int
    size: int
    spec: NetworkSpec | None = None  # None: plain constants

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass
class InterfaceTerm:
    entity: InterfaceEntity
    block: ParamBlock
    vanishing: dict[int, VanishingSpec]

    @property
    def multi_index(self) -> tuple[int, ...]:
        return self.entity.multi_index

    @property
    def q(self) -> int:
        return self.entity.q


@dataclass
class DirichletLift:
    record: BoundaryRecord
    facet: Facet


@dataclass
class PatchAnsatz:
    patch_id: int
    interior: ParamBlock
    vanishing: VanishingSpec
    lifts: list[DirichletLift] = field(default_factory=list)
    interface_terms: list[InterfaceTerm] = field(default_factory=list)


@dataclass(frozen=True)
class NetConfig:
    """Architecture template; input width is filled in per term."""

    width: int = 16
    hidden_layers: int = 2
    activation: str = "tanh"
    skip_connections: tuple = ()
    output_scale: float = 1.0

    def spec(self, n_in: int, n_out: int, n_phi: int) -> NetworkSpec:
        skips = tuple(s if isinstance(s, int) else tuple(s) for s in self.skip_connections)
        return NetworkSpec.mlp(n_in, self.width, self.hidden_layers, n_out,
                               activation=self.activation, skip_connections=skips, param_input_count=n_phi,
                               output_scale=self.output_scale)

    @classmethod
    def from_dict(cls, data: dict | None) -> "NetConfig":
        data = dict(data or {})
        unknown = set(data) - {"width", "hidden_layers", "activation", "skip_connections", "output_scale"}
        if unknown:
            raise AnsatzError(f"unknown network keys {sorted(unknown)}")
        if "skip_connections" in data:
            data["skip_connections"] = tuple(s if isinstance(s, int) else tuple(s) for s in data["skip_connections"])
        return cls(**data)


@dataclass
class GlobalAnsatz:
    model: MultiPatchModel
    topology: PatchTopology
    n_components: int
    n_phi: int
    patches: dict[int, PatchAnsatz]
    terms: list[InterfaceTerm]
    blocks: list[ParamBlock]
    theta0: np.ndarray

    @property
    def n_params(self) -> int:
        return int(self.theta0.size)

    def networks(self) -> list[ParamBlock]:
        return [b for b in self.blocks if b.spec is not None]

    def network_table(self) -> dict[str, tuple[NetworkSpec, int]]:
        return {b.name: (b.spec, b.offset) for b in self.blocks if b.spec is not None}

    # -- evaluation --------------------------------------------------------------------------
    def evaluate(self, patch_id: int, X, phi=None, theta=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Values ``(B, C)`` and reference gradients ``(B, C, d)`` on one patch.

        ``theta`` may be a torch tensor with ``requires_grad``; defaults to
        the initial parameters. ``phi`` is one load vector or one per point.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        B, d = X.shape
        if d != self.model.dim:
            raise AnsatzError(f"expected reference points of dimension {self.model.dim}")
        if np.any(np.abs(X) > 1.0 + 1e-12):
            raise AnsatzError("reference points must lie in [-1, 1]^d")
        if theta is None:
            theta = self.theta0
        if not isinstance(theta, torch.Tensor):
            theta = torch.as_tensor(np.asarray(theta, dtype=float), dtype=DTYPE)
        ph = self._phi_array(phi, B)
        pa = self.patches[patch_id]
        C = self.n_components

        Xt = torch.as_tensor(X, dtype=DTYPE)
        inp = torch.cat([Xt, ph], dim=1) if self.n_phi else Xt
        net = forward_with_input_grad(pa.interior.spec, theta[pa.interior.offset:pa.interior.stop], inp)
        pv, pg = self._poly(pa.vanishing, X)
        val = net.values * pv[:, None]
        grad = net.input_grads * pv[:, None, None] + net.values[:, :, None] * pg[:, None, :]

        for term in pa.interface_terms:
            tv, tg = self._term(term, patch_id, X, ph, theta)
            val = val + tv
            grad = grad + tg

        for lift in pa.lifts:
            lv, lg = self._lift(lift, patch_id, X, C)
            val = val + lv
            grad = grad + lg
        return val, grad

    def _phi_array(self, phi, B: int) -> torch.Tensor:
        if self.n_phi == 0:
            return torch.zeros((B, 0), dtype=DTYPE)
        if phi is None:
            raise AnsatzError(f"this ansatz needs {self.n_phi} load parameter(s)")
        ph = np.asarray(phi, dtype=float)
        if ph.ndim == 1:
            ph = np.broadcast_to(ph, (B, ph.size))
        if ph.shape != (B, self.n_phi):
            raise AnsatzError(f"load parameters must have {self.n_phi} entries")
        return torch.as_tensor(np.ascontiguousarray(ph), dtype=DTYPE)

    @staticmethod
    def _poly(spec: VanishingSpec, X: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        v, g = spec.evaluate(X)
        return torch.as_tensor(v, dtype=DTYPE), torch.as_tensor(g, dtype=DTYPE)

    def _term(self, term: InterfaceTerm, pid: int, X, ph, theta):
        B, d = X.shape
        C = self.n_components
        loc = term.entity.localizations[pid]
        pv, pg = self._poly(term.vanishing[pid], X)
        blk = term.block
        th = theta[blk.offset:blk.stop]
        if blk.spec is None:
            P = th.view(1, C).expand(B, C)
            dP = torch.zeros((B, C, d), dtype=DTYPE)
        else:
            s = torch.as_tensor(loc.to_canonical(X), dtype=DTYPE)
            out = forward_with_input_grad(blk.spec, th, torch.cat([s, ph], dim=1))
            P = out.values
            dP = torch.zeros((B, C, d), dtype=DTYPE)
            if term.q:
                fa = free_axes(loc.face)
                O = torch.as_tensor(loc.orientation, dtype=DTYPE)
                dP[:, :, fa] = out.input_grads @ O.T
        val = P * pv[:, None]
        grad = dP * pv[:, None, None] + P[:, :, None] * pg[:, None, :]
        return val, grad

    def _lift(self, lift: DirichletLift, pid: int, X, C: int):
        patch = self.model.patches[pid]
        f = lift.facet
        Xf = X.copy()
        Xf[:, f.axis] = f.side
        x, J = patch.eval_with_jacobian(Xf)
        g, dg = lift.record.evaluate(x, C)  # (B,C), (B,C,m)
        dg_ref = np.einsum("bcm,bmk->bck", dg, J)
        dg_ref[:, :, f.axis] = 0.0
        p = 0.5 * (1.0 + f.side * X[:, f.axis])
        val = g * p[:, None]
        grad = dg_ref * p[:, None, None]
        grad[:, :, f.axis] += g * 0.5 * f.side
        return torch.as_tensor(val, dtype=DTYPE), torch.as_tensor(grad, dtype=DTYPE)

    # -- physical fields ---------------------------------------------------------------------
    def pushforward_field(self, patch_id: int, X, phi=None, theta=None, gradients: bool = True):
        """Physical points, values and physical gradients ``(∂f)^-T ∇̂u``.

        Returns ``(x, values, grads, singular)``; gradients at singular
        points are NaN and flagged in ``singular``.
        """
        from .splinecore import metric_terms

        X = np.atleast_2d(np.asarray(X, dtype=float))
        with torch.no_grad():
            v, g = self.evaluate(patch_id, X, phi, theta)
        v, g = v.numpy(), g.numpy()
        patch = self.model.patches[patch_id]
        x, J = patch.eval_with_jacobian(X)
        if not gradients:
            return x, v, None, np.zeros(len(X), dtype=bool)
        if patch.phys_dim != patch.dim:
            raise AnsatzError("physical gradients need a volumetric patch")
        Jinv, _, _, singular = metric_terms(J, clamp=False)
        gx = np.einsum("bck,bkm->bcm", g, Jinv)
        gx[singular] = np.nan
        return x, v, gx, singular

    def describe(self) -> str:
        lines = [f"{'term':<28}{'patch':>6}  {'vanishing polynomial':<40}{'params':>8}"]
        for pid, pa in self.patches.items():
            lines.append(f"{'interior':<28}{pid:>6}  {pa.vanishing.describe():<40}{pa.interior.size:>8}")
            for lift in pa.lifts:
                f = lift.facet
                lines.append(f"{'dirichlet lift ' + f.label:<28}{pid:>6}  "
                             f"{'(1' + ('+' if f.side > 0 else '-') + f'x{f.axis + 1})/2':<40}{0:>8}")
        for t in self.terms:
            for k, pid in enumerate(t.multi_index):
                label = t.entity.name if k == 0 else ""
                size = t.block.size if k == 0 else 0
                kind = "" if k else (" const" if t.block.spec is None else " net")
                lines.append(f"{(label + kind):<28}{pid:>6}  {t.vanishing[pid].describe():<40}"
                             f"{(size if k == 0 else ''):>8}")
        nets = self.networks()
        lines.append(f"networks: {len(nets)}   trainable parameters: {self.n_params}")
        return "\n".join(lines)


# -- construction ----------------------------------------------------------------------

def _face_info(topo: PatchTopology, model: MultiPatchModel, pid: int, face: Face) -> FaceInfo:
    info = topo.face_info.get((pid, face))
    if info is not None:
        return info
    on_d = any(face_contains(facet_face(b.facet, model.dim), face) for b in model.dirichlet(pid))
    return FaceInfo((pid,), on_d, None)


def _entity_vanishing(model, topo: PatchTopology, ent: InterfaceEntity, pid: int) -> VanishingSpec:
    d = model.dim
    face = ent.localizations[pid].face
    alpha, beta = [0] * d, [0] * d
    scale = 1.0
    lower = [e.localizations[pid].face for e in topo.entities_of(pid) if e.q < ent.q]
    for k, c in enumerate(face):
        if c != 0:
            if c > 0:
                beta[k] = 1
            else:
                alpha[k] = 1
            scale /= 2.0 * c
            continue
        for end in (-1, 1):
            sub = list(face)
            sub[k] = end
            sub = tuple(sub)
            info = _face_info(topo, model, pid, sub)
            absorbed = (info.members == ent.multi_index and not info.on_dirichlet and info.entity is None
                        and not any(face_contains(sub, lf) for lf in lower))
            if not absorbed:
                if end > 0:
                    alpha[k] = 1
                else:
                    beta[k] = 1
        if alpha[k] == 0 and beta[k] == 0:
            continue
        if alpha[k] + beta[k] == 1:
            scale *= 0.5 if beta[k] else -0.5
    return VanishingSpec(tuple(alpha), tuple(beta), scale)


def _interior_vanishing(model: MultiPatchModel, topo: PatchTopology, pid: int) -> VanishingSpec:
    """Fewest facets whose union contains every Dirichlet facet and shared face."""
    d = model.dim
    required = [facet_face(b.facet, d) for b in model.dirichlet(pid)] + topo.shared_faces(pid)
    facets = [Facet(k, s) for k in range(d) for s in (-1, 1)]
    for r in range(len(facets) + 1):
        for combo in itertools.combinations(facets, r):
            ff = [facet_face(f, d) for f in combo]
            if all(any(face_contains(f, req) for f in ff) for req in required):
                return VanishingSpec.from_facets(combo, d)
    raise AnsatzError(f"patch {pid}: no facet cover")  # unreachable: all facets cover everything


def _lifts(model: MultiPatchModel, topo: PatchTopology, pid: int) -> list[DirichletLift]:
    out = []
    d = model.dim
    nonzero = [b for b in model.dirichlet(pid) if not b.is_zero()]
    if not nonzero:
        return out
    if len(nonzero) > 1 or len(model.dirichlet(pid)) > 1:
        raise AnsatzError(
            f"patch {pid}: nonzero Dirichlet data is supported on a single Dirichlet facet per patch only"
        )
    rec = nonzero[0]
    f = rec.facet
    opposite = facet_face(Facet(f.axis, -f.side), d)
    for face in topo.shared_faces(pid):
        if not face_contains(opposite, face):
            raise AnsatzError(
                f"patch {pid}: nonzero Dirichlet data on {f.label} is incompatible with interface face "
                f"{face}; interfaces must lie in the opposite facet"
            )
    out.append(DirichletLift(rec, f))
    return out


def _child_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1)[0])


def build_ansatz(model: MultiPatchModel, topology: PatchTopology, net_specs: dict | None = None,
                 seed: int = 0, n_components: int = 1, n_phi: int = 0) -> GlobalAnsatz:
    """Assemble interior and interface terms with their parameter registry.

    ``net_specs`` maps ``"interior"`` and ``"q0"``, ``"q1"``, ``"q2"`` (or
    ``"interface"`` as fallback for all q >= 1) to :class:`NetConfig`
    values or plain dicts. Corner payloads are constants unless load
    parameters are present, in which case they are networks of ``φ``.
    """
    net_specs = dict(net_specs or {})
    for key, val in list(net_specs.items()):
        if not isinstance(val, NetConfig):
            net_specs[key] = NetConfig.from_dict(val)
    unknown = set(net_specs) - {"interior", "interface", "q0", "q1", "q2"}
    if unknown:
        raise AnsatzError(f"unknown network groups {sorted(unknown)}")

    def cfg(key: str) -> NetConfig:
        if key in net_specs:
            return net_specs[key]
        if key.startswith("q") and key != "q0" and "interface" in net_specs:
            return net_specs["interface"]
        return net_specs.get("interior", NetConfig())

    d = model.dim
    C = n_components
    blocks: list[ParamBlock] = []
    parts: list[np.ndarray] = []
    offset = 0

    def add(name, owner, spec, size=None):
        nonlocal offset
        k = len(blocks)
        if spec is None:
            vec = np.zeros(size)
        else:
            vec = init_network(spec, _child_seed(seed, k)).flat
        blk = ParamBlock(name, owner, offset, vec.size, spec)
        blocks.append(blk)
        parts.append(vec)
        offset += vec.size
        return blk

    patches: dict[int, PatchAnsatz] = {}
    for pid in model.patch_ids:
        spec = cfg("interior").spec(d + n_phi, C, n_phi)
        blk = add(f"interior[{pid}]", f"patch {pid}", spec)
        patches[pid] = PatchAnsatz(pid, blk, _interior_vanishing(model, topology, pid), _lifts(model, topology, pid))

    terms: list[InterfaceTerm] = []
    for q in range(d):
        for ent in topology.xi(q):
            if q == 0 and n_phi == 0:
                blk = add(ent.name, "entity", None, size=C)
            else:
                n_in = q + n_phi
                try:
                    spec = cfg(f"q{q}").spec(n_in, C, n_phi)
                except NetworkError as exc:
                    raise AnsatzError(f"entity {ent.name}: {exc}") from exc
                blk = add(ent.name, "entity", spec)
            van = {pid: _entity_vanishing(model, topology, ent, pid) for pid in ent.multi_index}
            term = InterfaceTerm(ent, blk, van)
            terms.append(term)
            for pid in ent.multi_index:
                patches[pid].interface_terms.append(term)

    ans = GlobalAnsatz(model, topology, C, n_phi, patches, terms, blocks,
                       np.concatenate(parts) if parts else np.zeros(0))
    _verify_vanishing(ans)
    return ans


def _verify_vanishing(ans: GlobalAnsatz) -> None:
    """Every entity polynomial must vanish on Dirichlet facets and on other entities it does not contain."""
    model, topo = ans.model, ans.topology
    d = model.dim
    probe = np.array([-0.61, 0.37, 0.83])
    for term in ans.terms:
        for pid in term.multi_index:
            spec = term.vanishing[pid]
            own = term.entity.localizations[pid].face
            targets = [facet_face(b.facet, d) for b in model.dirichlet(pid)]
            targets += [e.localizations[pid].face for e in topo.entities_of(pid)
                        if e is not term.entity and not face_contains(e.localizations[pid].face, own)]
            for face in targets:
                q = face_dim(face)
                s = np.vstack([probe[None, :q], np.asarray(list(itertools.product((-1.0, 1.0), repeat=q)))])
                v, _ = spec.evaluate(embed_face(face, s.reshape(len(s), q)))
                if np.max(np.abs(v)) > 1e-14:
                    raise AnsatzError(
                        f"entity {term.entity.name} cannot be made to vanish on face {face} of patch {pid} "
                        "with the available exponents"
                    )
