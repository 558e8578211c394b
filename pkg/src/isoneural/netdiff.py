"""Small residual MLPs with exact spatial input gradients.

Spatial derivatives are pushed forward layer by layer as tangents (one per
spatial input). The tangent arithmetic is ordinary torch code, so a single
reverse pass over a loss that mixes values and spatial gradients yields exact
parameter gradients, second-order terms included.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64
ACTIVATIONS = ("tanh", "squared_relu")


class NetworkError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Loss evaluated to NaN/Inf; ``sample_index`` points at the first bad sample."""

    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


@dataclass(frozen=True)
class NetworkSpec:
    """Fully connected network description.

    ``skip_connections`` holds ``(source, target)`` layer indices: the tensor
    entering layer ``source`` is added to the tensor entering layer ``target``.
    A bare integer ``t`` is shorthand for ``(previous target or 1, t)``, which
    turns ``[3, 5]`` into two consecutive two-layer residual blocks.
    The trailing ``param_input_count`` inputs are load parameters and receive
    no spatial gradient. ``output_scale`` is a fixed factor on the last layer,
    a unit change for the output that leaves the initialization untouched.
    """

    layer_dims: tuple[tuple[int, int], ...]
    activation: str = "tanh"
    skip_connections: tuple[tuple[int, int], ...] = ()
    param_input_count: int = 0
    output_scale: float = 1.0

    def __post_init__(self):
        dims = tuple((int(a), int(b)) for a, b in self.layer_dims)
        if not dims:
            raise NetworkError("network needs at least one layer")
        for (a0, b0), (a1, b1) in zip(dims, dims[1:]):
            if b0 != a1:
                raise NetworkError(f"layer widths do not chain: {b0} -> {a1}")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"activation must be one of {ACTIVATIONS}")
        skips = []
        prev = 1
        for s in self.skip_connections:
            if isinstance(s, (int, np.integer)):
                src, dst = prev, int(s)
            else:
                src, dst = int(s[0]), int(s[1])
            if not 0 <= src < dst <= len(dims):
                raise NetworkError(f"bad skip connection {s}")
            if self._width_in(dims, src) != self._width_in(dims, dst):
                raise NetworkError(f"skip connection {s} joins widths "
                                   f"{self._width_in(dims, src)} and {self._width_in(dims, dst)}")
            skips.append((src, dst))
            prev = dst
        if not 0 <= self.param_input_count <= dims[0][0]:
            raise NetworkError("param_input_count exceeds input width")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise NetworkError("output_scale must be positive and finite")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "skip_connections", tuple(skips))

    @staticmethod
    def _width_in(dims, layer: int) -> int:
        return dims[layer][0] if layer < len(dims) else dims[-1][1]

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0][0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1][1]

    @property
    def n_spatial(self) -> int:
        return self.n_inputs - self.param_input_count

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_dims)

    def layout(self) -> list[dict]:
        """Offsets of each weight matrix and bias vector in the flat vector."""
        out, off = [], 0
        for l, (a, b) in enumerate(self.layer_dims):
            out.append({"layer": l, "W": [off, off + a * b], "W_shape": [a, b], "b": [off + a * b, off + a * b + b]})
            off += a * b + b
        return out

    @classmethod
    def mlp(cls, n_in: int, width: int, n_hidden: int, n_out: int, **kw) -> "NetworkSpec":
        """``(n_in, w) -> n_hidden * (w, w) -> (w, n_out)``."""
        dims = [(n_in, width)] + [(width, width)] * n_hidden + [(width, n_out)]
        return cls(tuple(dims), **kw)

    def to_dict(self) -> dict:
        return {
            "layer_dims": [list(x) for x in self.layer_dims],
            "activation": self.activation,
            "skip_connections": [list(x) for x in self.skip_connections],
            "param_input_count": self.param_input_count,
            "output_scale": self.output_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        skips = tuple(s if isinstance(s, int) else tuple(s) for s in data.get("skip_connections", ()))
        return cls(tuple(tuple(x) for x in data["layer_dims"]), data.get("activation", "tanh"),
                   skips, int(data.get("param_input_count", 0)), float(data.get("output_scale", 1.0)))


@dataclass
class NetworkParams:
    spec: NetworkSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).ravel()
        if self.flat.size != self.spec.n_params:
            raise NetworkError(f"parameter vector has length {self.flat.size}, spec needs {self.spec.n_params}")

    def weights(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        ent = self.spec.layout()[layer]
        W = self.flat[ent["W"][0]:ent["W"][1]].reshape(ent["W_shape"])
        b = self.flat[ent["b"][0]:ent["b"][1]]
        return W, b


@dataclass
class DualBatch:
    values: torch.Tensor       # (B, n_out)
    input_grads: torch.Tensor  # (B, n_out, n_spatial)


def init_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    for a, b in spec.layer_dims:
        lim = math.sqrt(6.0 / (a + b))
        parts.append(rng.uniform(-lim, lim, size=(a, b)).ravel())
        parts.append(np.zeros(b))
    return NetworkParams(spec, np.concatenate(parts))


def _activate(z: torch.Tensor, kind: str) -> tuple[torch.Tensor, torch.Tensor]:
    if kind == "tanh":
        a = torch.tanh(z)
        return a, 1.0 - a * a
    r = torch.relu(z)
    return r * r, 2.0 * r


def forward_with_input_grad(spec: NetworkSpec, params, inputs) -> DualBatch:
    """Network outputs and exact gradients w.r.t. the spatial inputs.

    ``params`` may be a numpy vector, :class:`NetworkParams` or a torch tensor
    (gradients flow through it); ``inputs`` has shape ``(B, n_inputs)``.
    """
    if isinstance(params, NetworkParams):
        params = params.flat
    theta = params if isinstance(params, torch.Tensor) else torch.as_tensor(np.asarray(params), dtype=DTYPE)
    x = inputs if isinstance(inputs, torch.Tensor) else torch.as_tensor(np.asarray(inputs, dtype=float), dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise NetworkError(f"expected inputs of shape (B, {spec.n_inputs}), got {tuple(x.shape)}")
    if theta.numel() != spec.n_params:
        raise NetworkError(f"parameter vector has length {theta.numel()}, spec needs {spec.n_params}")
    ns = spec.n_spatial
    L = len(spec.layer_dims)
    saved: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    sources = {s for s, _ in spec.skip_connections}
    targets = {}
    for s, t in spec.skip_connections:
        targets.setdefault(t, []).append(s)

    h, T = x, None  # T: (B, width, ns) tangents of h
    off = 0
    for l, (a, b) in enumerate(spec.layer_dims):
        if l in targets:
            for s in targets[l]:
                hs, Ts = saved[s]
                h = h + hs
                T = T + Ts if T is not None else Ts
        if l in sources:
            saved[l] = (h, T if T is not None else _input_tangent(x, ns))
        W = theta[off:off + a * b].view(a, b)
        bias = theta[off + a * b:off + a * b + b]
        off += a * b + b
        z = h @ W + bias
        if T is None:
            Tz = W[:ns, :].T.unsqueeze(0).expand(x.shape[0], b, ns)
        else:
            Tz = torch.einsum("bin,io->bon", T, W)
        if l < L - 1:
            h, dsig = _activate(z, spec.activation)
            T = dsig.unsqueeze(-1) * Tz
        else:
            h, T = z, Tz
    if L in targets:
        for s in targets[L]:
            hs, Ts = saved[s]
            h = h + hs
            T = T + Ts
    if spec.output_scale != 1.0:
        h, T = spec.output_scale * h, spec.output_scale * T
    return DualBatch(h, T)


def _input_tangent(x: torch.Tensor, ns: int) -> torch.Tensor:
    B, n = x.shape
    T = torch.zeros(B, n, ns, dtype=x.dtype)
    T[:, :ns, :] = torch.eye(ns, dtype=x.dtype)
    return T


def loss_and_gradient(loss_evaluator: Callable[[torch.Tensor], torch.Tensor],
                      params_all) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient w.r.t. the flat parameter vector.

    ``loss_evaluator`` maps a torch parameter vector to either a scalar or a
    vector of per-sample contributions (summed here). A non-finite
    contribution raises :class:`NonFiniteLossError` naming the first offending
    sample.
    """
    theta = torch.tensor(np.asarray(params_all, dtype=np.float64), dtype=DTYPE, requires_grad=True)
    out = loss_evaluator(theta)
    if out.ndim > 0:
        bad = ~torch.isfinite(out.detach())
        if bool(bad.any()):
            idx = int(torch.nonzero(bad.reshape(-1))[0])
            raise NonFiniteLossError(f"non-finite loss contribution at sample {idx}", idx)
        out = out.sum()
    if not bool(torch.isfinite(out.detach())):
        raise NonFiniteLossError("non-finite loss")
    (grad,) = torch.autograd.grad(out, theta, allow_unused=True)
    g = np.zeros(theta.numel()) if grad is None else grad.detach().numpy().copy()
    return float(out.detach()), g


def loss_gradient(loss_evaluator: Callable[[torch.Tensor], torch.Tensor], params_all) -> np.ndarray:
    """Gradient of the loss w.r.t. every trainable parameter."""
    return loss_and_gradient(loss_evaluator, params_all)[1]


# -- checkpoint files ----------------------------------------------------------------------

def save_params(path: str | Path, flat: np.ndarray, networks: dict[str, tuple[NetworkSpec, int]] | None = None) -> None:
    """Write ``<path>.f64`` (raw little-endian float64) and ``<path>.json``.

    ``networks`` maps a network name to its spec and offset in ``flat``.
    """
    path = Path(path)
    flat = np.ascontiguousarray(flat, dtype="<f8")
    path.with_suffix(".f64").write_bytes(flat.tobytes())
    table = {
        "length": int(flat.size),
        "networks": {k: {"offset": off, "spec": spec.to_dict()} for k, (spec, off) in sorted((networks or {}).items())},
    }
    path.with_suffix(".json").write_text(json.dumps(table, indent=1, sort_keys=True), encoding="utf-8")


def load_params(path: str | Path, expected_length: int | None = None) -> tuple[np.ndarray, dict]:
    path = Path(path)
    flat = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8").astype(np.float64)
    table = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if flat.size != table["length"]:
        raise NetworkError(f"checkpoint {path}: {flat.size} values, table says {table['length']}")
    if expected_length is not None and flat.size != expected_length:
        raise NetworkError(f"checkpoint {path}: {flat.size} values, model needs {expected_length}")
    for name, ent in table["networks"].items():
        spec = NetworkSpec.from_dict(ent["spec"])
        if ent["offset"] + spec.n_params > flat.size:
            raise NetworkError(f"checkpoint {path}: network {name} runs past the parameter vector")
    return flat, table
