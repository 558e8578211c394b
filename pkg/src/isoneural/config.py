"""Run configuration files (YAML) and assembly of a ready-to-train case.

Layout::

    name: poisson_lshape
    geometry: ../geometries/lshape_curved.json    # relative to this file
    topology: {subentities: all}                    # optional; also geo_tol
    problem:
      type: poisson_manufactured                    # | magnetostatic2d | svk_contact
      case: sine_product
    networks:
      interior: {width: 16, hidden_layers: 2, activation: tanh}
      interface: {width: 16, hidden_layers: 2}      # q >= 1 entities; q1/q2/q0 override
      # skip_connections: [3, 5]; output_scale: 1.0e-2 multiplies the last layer
    training:
      epochs: 2000
      samples_per_epoch: 3000
      batches_per_epoch: 1
      boundary_samples: 200                         # per flagged facet and batch
      optimizer: {kind: adam, lr: 1.0e-3, betas: [0.9, 0.999], eps: 1.0e-8}
      seed: 0
      phi_sampling: uniform                         # or a fixed list
      shards: 1
      eval_every: 10
    evaluation:
      mode: grid                                    # | reference
      n_points: 75000
      reference: ref.csv                            # scattered reference values
      phi: [-1, -1]

Problem blocks:

``magnetostatic2d``
    ``materials: {label: {mu_r | nu, jz}}``, optional ``mu0`` and
    ``patch_materials: {patch id: label}`` overriding geometry labels.
``poisson_manufactured``
    ``case``: a registered exact solution.
``svk_contact``
    ``material: {E, nu}`` or ``{lambda, mu}``; ``body_force``: a vector or
    ``{patch id: vector}``; ``n_phi``; ``contact: {planes, facets, eps_n,
    penalty_power}`` where a plane is ``{axis: x2, side: below|above, offset,
    phi_coeffs, extent: {axis: x1, max}}`` and facets are ``"pid:x2-"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ansatz import GlobalAnsatz, build_ansatz
from .geometry import MultiPatchModel, load_geometry
from .physics import (
    ContactPlane,
    ElasticContactProblem,
    ProblemError,
    lame_from_young,
    magnetostatic_problem,
    poisson_manufactured_problem,
)
from .splinecore import Facet
from .topology import PatchTopology, detect_interfaces
from .trainer import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


_TOP = {"name", "description", "geometry", "topology", "problem", "networks", "training", "evaluation"}
_TRAIN = {"epochs", "samples_per_epoch", "batches_per_epoch", "boundary_samples", "optimizer", "seed",
          "phi_sampling", "shards", "eval_every"}
_EVAL = {"mode", "n_points", "reference", "phi", "mesh_resolution"}


@dataclass
class RunConfig:
    name: str
    path: Path
    geometry: Path
    topology: dict
    problem: dict
    networks: dict
    training: TrainConfig
    evaluation: dict = field(default_factory=dict)

    def with_overrides(self, seed: int | None = None, epochs: int | None = None) -> "RunConfig":
        t = self.training
        kw = {k: getattr(t, k) for k in t.__dataclass_fields__}
        if seed is not None:
            kw["seed"] = seed
        if epochs is not None:
            kw["epochs"] = epochs
        return RunConfig(self.name, self.path, self.geometry, self.topology, self.problem, self.networks,
                         TrainConfig(**kw), self.evaluation)


def _axis(v) -> int:
    if isinstance(v, int):
        return v - 1
    s = str(v).strip().lower()
    if s.startswith("x") and s[1:].isdigit():
        return int(s[1:]) - 1
    raise ConfigError(f"bad axis {v!r}; use e.g. 'x2'")


def parse_training(data: dict) -> TrainConfig:
    unknown = set(data) - _TRAIN
    if unknown:
        raise ConfigError(f"training: unknown keys {sorted(unknown)}")
    kw = dict(data)
    if "optimizer" in kw:
        opt = dict(kw["optimizer"])
        bad = set(opt) - {"kind", "lr", "betas", "eps"}
        if bad:
            raise ConfigError(f"training.optimizer: unknown keys {sorted(bad)}")
        if "lr" in opt:
            opt["lr"] = float(opt["lr"])
        if "eps" in opt:
            opt["eps"] = float(opt["eps"])
        kw["optimizer"] = OptimizerConfig(**opt)
    return TrainConfig(**kw)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    unknown = set(data) - _TOP
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("geometry", "problem"):
        if key not in data:
            raise ConfigError(f"{path}: missing '{key}'")
    ev = dict(data.get("evaluation") or {})
    bad = set(ev) - _EVAL
    if bad:
        raise ConfigError(f"{path}: evaluation: unknown keys {sorted(bad)}")
    if "reference" in ev and ev["reference"] is not None:
        ev["reference"] = (path.parent / ev["reference"]).resolve()
    return RunConfig(
        name=str(data.get("name", path.stem)),
        path=path.resolve(),
        geometry=(path.parent / data["geometry"]).resolve(),
        topology=dict(data.get("topology") or {}),
        problem=dict(data["problem"]),
        networks=dict(data.get("networks") or {}),
        training=parse_training(dict(data.get("training") or {})),
        evaluation=ev,
    )


@dataclass
class Case:
    config: RunConfig
    model: MultiPatchModel
    topology: PatchTopology
    problem: object
    ansatz: GlobalAnsatz

    @property
    def exact(self):
        return getattr(self.problem, "exact", None)


def _topology(model: MultiPatchModel, opts: dict) -> PatchTopology:
    bad = set(opts) - {"subentities", "geo_tol"}
    if bad:
        raise ConfigError(f"topology: unknown keys {sorted(bad)}")
    return detect_interfaces(model, geo_tol=opts.get("geo_tol"), subentities=opts.get("subentities", "all"))


def build_problem(model: MultiPatchModel, topology: PatchTopology, block: dict):
    """Problem object and the (possibly rewritten) model it acts on."""
    block = dict(block)
    kind = block.pop("type", None)
    if kind == "magnetostatic2d":
        if model.dim != 2:
            raise ConfigError("magnetostatic2d needs a 2D model")
        bad = set(block) - {"materials", "mu0", "patch_materials"}
        if bad:
            raise ConfigError(f"problem: unknown keys {sorted(bad)}")
        pm = {int(k): v for k, v in (block.get("patch_materials") or {}).items()}
        kw = {"mu0": float(block["mu0"])} if "mu0" in block else {}
        return magnetostatic_problem(model, block.get("materials") or {}, patch_materials=pm, **kw), model
    if kind == "poisson_manufactured":
        bad = set(block) - {"case"}
        if bad:
            raise ConfigError(f"problem: unknown keys {sorted(bad)}")
        return poisson_manufactured_problem(model, block.get("case", "sine_product"), topology)
    if kind == "svk_contact":
        bad = set(block) - {"material", "body_force", "contact", "n_phi"}
        if bad:
            raise ConfigError(f"problem: unknown keys {sorted(bad)}")
        mat = dict(block.get("material") or {})
        if "E" in mat:
            lam, mu = lame_from_young(float(mat["E"]), float(mat["nu"]))
        elif "lambda" in mat and "mu" in mat:
            lam, mu = float(mat["lambda"]), float(mat["mu"])
        else:
            raise ConfigError("svk_contact material needs {E, nu} or {lambda, mu}")
        bf = block.get("body_force")
        body = {}
        if isinstance(bf, dict):
            body = {int(k): np.asarray(v, dtype=float) for k, v in bf.items()}
        elif bf is not None:
            body = {pid: np.asarray(bf, dtype=float) for pid in model.patch_ids}
        c = dict(block.get("contact") or {})
        badc = set(c) - {"planes", "facets", "eps_n", "penalty_power"}
        if badc:
            raise ConfigError(f"contact: unknown keys {sorted(badc)}")
        planes = []
        for p in c.get("planes") or []:
            ext = p.get("extent") or {}
            planes.append(ContactPlane(
                axis=_axis(p["axis"]), side=p["side"], offset=float(p.get("offset", 0.0)),
                phi_coeffs=tuple(float(v) for v in p.get("phi_coeffs", ())),
                extent_axis=_axis(ext["axis"]) if ext else None,
                extent_max=float(ext["max"]) if ext else None,
            ))
        facets = []
        for spec in c.get("facets") or []:
            pid, _, fac = str(spec).partition(":")
            facets.append((int(pid), Facet.parse(fac)))
        n_phi = int(block.get("n_phi", max((len(p.phi_coeffs) for p in planes), default=0)))
        prob = ElasticContactProblem(model, lam, mu, body, planes, facets, float(c.get("eps_n", 1e3)),
                                     int(c.get("penalty_power", 2)), n_phi=n_phi)
        return prob, model
    raise ProblemError(f"unknown problem type {kind!r}")


def build_case(cfg: RunConfig, seed: int | None = None) -> Case:
    model = load_geometry(cfg.geometry)
    topo = _topology(model, cfg.topology)
    problem, model2 = build_problem(model, topo, cfg.problem)
    if model2 is not model:
        topo = _topology(model2, cfg.topology)
    ansatz = build_ansatz(model2, topo, cfg.networks, seed=cfg.training.seed if seed is None else seed,
                          n_components=problem.n_components, n_phi=problem.n_phi)
    return Case(cfg, model2, topo, problem, ansatz)
