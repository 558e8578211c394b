"""Monte Carlo sampling, Adam updates, training loop and checkpoints.

Checkpoint directory layout::

    params.f64    flat parameter vector, raw little-endian float64
    adam_m.f64    first moments, same layout
    adam_v.f64    second moments
    state.json    epoch, step count, history, RNG state, network table

Every file is written deterministically, so identical runs produce
byte-identical checkpoint directories.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .ansatz import GlobalAnsatz
from .netdiff import DTYPE, NetworkSpec, NonFiniteLossError
from .physics import EnergyBatch, sample_contributions

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind != "adam":
            raise TrainingError(f"unsupported optimizer {self.kind!r}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass(frozen=True)
class TrainConfig:
    """``phi_sampling`` is ``"uniform"`` (over [-1, 1]^p per batch) or a fixed vector."""

    epochs: int = 100
    samples_per_epoch: int = 1000
    batches_per_epoch: int = 1
    boundary_samples: int | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    phi_sampling: str | tuple[float, ...] = "uniform"
    shards: int = 1
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")
        if self.samples_per_epoch <= 0 or self.batches_per_epoch <= 0:
            raise TrainingError("sample and batch counts must be positive")
        if self.samples_per_epoch % self.batches_per_epoch:
            raise TrainingError("samples_per_epoch must be divisible by batches_per_epoch")
        if self.shards < 1:
            raise TrainingError("shards must be positive")
        if not isinstance(self.phi_sampling, str):
            object.__setattr__(self, "phi_sampling", tuple(float(v) for v in self.phi_sampling))
        elif self.phi_sampling != "uniform":
            raise TrainingError("phi_sampling must be 'uniform' or a list of values")


@dataclass
class TrainState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None

    @classmethod
    def fresh(cls, theta0: np.ndarray) -> "TrainState":
        theta = np.array(theta0, dtype=np.float64)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta))


def adam_step(state: TrainState, grad: np.ndarray, config: OptimizerConfig) -> TrainState:
    """Bias-corrected Adam update, in place."""
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    b1, b2 = config.betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    state.theta = state.theta - config.lr * mhat / (np.sqrt(vhat) + config.eps)
    return state


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _split_counts(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if k < rem else 0) for k in range(parts)]


def sample_epoch(rng: np.random.Generator, model, problem, M: int, batches: int = 1,
                 boundary_samples: int | None = None, phi_sampling="uniform") -> list[EnergyBatch]:
    """Fresh uniform reference samples for one epoch.

    ``M`` volume samples are split into ``batches`` and, within a batch,
    across patches as evenly as possible. Each batch gets one load vector.
    ``boundary_samples`` counts samples per flagged facet per batch
    (defaults to the per-patch volume count of the batch).
    """
    if M <= 0:
        raise TrainingError("M must be positive")
    d = model.dim
    pids = model.patch_ids
    facets = problem.boundary_facets()
    n_phi = getattr(problem, "n_phi", 0)
    out = []
    for nb in _split_counts(M, batches):
        counts = _split_counts(nb, len(pids))
        vol = {pid: rng.uniform(-1.0, 1.0, (c, d)) for pid, c in zip(pids, counts)}
        wv = {pid: 2.0**d / c if c else 0.0 for pid, c in zip(pids, counts)}
        mb = boundary_samples if boundary_samples is not None else max(1, counts[0])
        bnd = []
        for pid, facet in facets:
            X = rng.uniform(-1.0, 1.0, (mb, d))
            X[:, facet.axis] = facet.side
            bnd.append((pid, facet, X))
        if n_phi == 0:
            phi = None
        elif isinstance(phi_sampling, str):
            phi = rng.uniform(-1.0, 1.0, n_phi)
        else:
            phi = np.asarray(phi_sampling, dtype=float)
            if phi.size != n_phi:
                raise TrainingError(f"fixed load vector needs {n_phi} entries")
        out.append(EnergyBatch(vol, bnd, phi, wv, 2.0 ** (d - 1) / mb))
    return out


def batch_loss_and_gradient(problem, ansatz: GlobalAnsatz, batch: EnergyBatch, theta: np.ndarray,
                            shards: int = 1, pool: ThreadPoolExecutor | None = None) -> tuple[float, np.ndarray]:
    """Loss and exact gradient, optionally summed over shards in fixed order."""
    parts = batch.split(shards) if shards > 1 else [batch]

    def run(b: EnergyBatch):
        t = torch.tensor(theta, dtype=DTYPE, requires_grad=True)
        c = sample_contributions(problem, ansatz, b, t)
        bad = ~torch.isfinite(c.detach())
        if bool(bad.any()):
            idx = int(torch.nonzero(bad)[0])
            raise NonFiniteLossError(f"non-finite energy at {b.provenance(idx)}", idx)
        loss = c.sum()
        (g,) = torch.autograd.grad(loss, t, allow_unused=True)
        return float(loss.detach()), (np.zeros_like(theta) if g is None else g.numpy())

    results = list(pool.map(run, parts)) if pool is not None and len(parts) > 1 else [run(b) for b in parts]
    loss = 0.0
    grad = np.zeros_like(theta)
    for lv, gv in results:
        loss += lv
        grad += gv
    return loss, grad


def train(model, topology, ansatz: GlobalAnsatz, problem, config: TrainConfig, state: TrainState | None = None,
          hook: Callable[[int, TrainState], float | None] | None = None,
          checkpoint_dir: str | Path | None = None, checkpoint_every: int = 0) -> TrainState:
    """Run ``config.epochs`` further epochs starting from ``state``.

    ``hook(epoch, state)`` may return an error value stored in the history
    (called every ``config.eval_every`` epochs and at the end). On a
    non-finite loss the last good state is checkpointed and the error
    re-raised.
    """
    if state is None:
        state = TrainState.fresh(ansatz.theta0)
    rng = make_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    pool = ThreadPoolExecutor(max_workers=config.shards) if config.shards > 1 else None
    last = state.epoch + config.epochs
    try:
        for _ in range(config.epochs):
            t0 = time.perf_counter()
            good = (state.theta.copy(), state.m.copy(), state.v.copy(), state.step, rng.bit_generator.state)
            batches = sample_epoch(rng, model, problem, config.samples_per_epoch, config.batches_per_epoch,
                                   config.boundary_samples, config.phi_sampling)
            losses = []
            try:
                for b in batches:
                    loss, grad = batch_loss_and_gradient(problem, ansatz, b, state.theta, config.shards, pool)
                    adam_step(state, grad, config.optimizer)
                    losses.append(loss)
            except (NonFiniteLossError, TrainingError, FloatingPointError) as exc:
                state.theta, state.m, state.v, state.step, state.rng_state = good
                if checkpoint_dir is not None:
                    save_checkpoint(checkpoint_dir, state, ansatz)
                raise TrainingError(f"epoch {state.epoch + 1}: {exc}") from exc
            state.epoch += 1
            rec = {"epoch": state.epoch, "loss": float(np.mean(losses))}
            if hook is not None and (state.epoch % max(config.eval_every, 1) == 0
                                     or state.epoch == last):
                err = hook(state.epoch, state)
                if err is not None:
                    rec["error"] = float(err)
            state.history.append(rec)
            state.rng_state = rng.bit_generator.state
            log.info("epoch %d loss %.6e (%.2fs)", state.epoch, rec["loss"], time.perf_counter() - t0)
            if checkpoint_dir is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(checkpoint_dir, state, ansatz)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, state, ansatz)
    return state


# -- checkpoints -----------------------------------------------------------------------------

def _jsonable_rng(state: dict) -> dict:
    return json.loads(json.dumps(state))


def save_checkpoint(path: str | Path, state: TrainState, ansatz: GlobalAnsatz | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, arr in (("params", state.theta), ("adam_m", state.m), ("adam_v", state.v)):
        (path / f"{name}.f64").write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {
        "length": int(state.theta.size),
        "step": state.step,
        "epoch": state.epoch,
        "history": state.history,
        "rng_state": _jsonable_rng(state.rng_state) if state.rng_state is not None else None,
        "networks": {} if ansatz is None else {
            b.name: {"offset": b.offset, "size": b.size, "spec": b.spec.to_dict() if b.spec else None}
            for b in ansatz.blocks
        },
    }
    (path / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path, ansatz: GlobalAnsatz | None = None) -> TrainState:
    path = Path(path)
    meta_file = path / "state.json"
    if not meta_file.is_file():
        raise TrainingError(f"no checkpoint at {path}")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    arrs = {}
    for name in ("params", "adam_m", "adam_v"):
        a = np.frombuffer((path / f"{name}.f64").read_bytes(), dtype="<f8").astype(np.float64)
        if a.size != meta["length"]:
            raise TrainingError(f"{name}.f64 has {a.size} values, expected {meta['length']}")
        arrs[name] = a
    if ansatz is not None:
        if meta["length"] != ansatz.n_params:
            raise TrainingError(f"checkpoint has {meta['length']} parameters, model needs {ansatz.n_params}")
        for b in ansatz.blocks:
            ent = meta.get("networks", {}).get(b.name)
            if ent is not None and (ent["offset"] != b.offset or ent["size"] != b.size):
                raise TrainingError(f"checkpoint layout of {b.name} does not match the model")
            if ent is not None and ent["spec"] is not None and b.spec is not None \
                    and NetworkSpec.from_dict(ent["spec"]) != b.spec:
                raise TrainingError(f"checkpoint architecture of {b.name} does not match the model")
    return TrainState(arrs["params"], arrs["adam_m"], arrs["adam_v"], int(meta["step"]), int(meta["epoch"]),
                      list(meta["history"]), meta.get("rng_state"))
