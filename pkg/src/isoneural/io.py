"""Reference fields, relative L2 errors and field export."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ansatz import GlobalAnsatz
from .geometry import Expression, MultiPatchModel, PatchSimplexMesh

log = logging.getLogger(__name__)


class ReferenceFormatError(ValueError):
    """Malformed reference data."""


@dataclass
class ReferenceField:
    points: np.ndarray   # (N, m)
    values: np.ndarray   # (N, C)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.points), -1)
        if len(self.points) != len(self.values):
            raise ReferenceFormatError("points and values differ in length")

    def check_bbox(self, model: MultiPatchModel, rel_tol: float = 1e-6) -> int:
        """Number of points outside the model's bounding box (a warning is logged)."""
        lo, hi = model.bounding_box()
        pad = rel_tol * model.diameter()
        outside = np.any((self.points < lo - pad) | (self.points > hi + pad), axis=1)
        n = int(outside.sum())
        if n:
            log.warning("%d reference point(s) lie outside the model bounding box", n)
        return n


def load_reference(path: str | Path, model: MultiPatchModel | None = None) -> ReferenceField:
    """Read ``x1,x2[,x3],v1[,v2,v3]`` CSV; extra columns are ignored."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ReferenceFormatError(f"{path}: empty file; expected header x1,x2[,x3],v1[,v2,v3]") from None
        xcols = [i for i, h in enumerate(header) if h in ("x1", "x2", "x3")]
        vcols = [i for i, h in enumerate(header) if h in ("v1", "v2", "v3")]
        xnames = [header[i] for i in xcols]
        vnames = [header[i] for i in vcols]
        if xnames not in (["x1", "x2"], ["x1", "x2", "x3"]) or vnames not in (["v1"], ["v1", "v2"],
                                                                                ["v1", "v2", "v3"]):
            raise ReferenceFormatError(
                f"{path}: header must contain columns x1,x2[,x3],v1[,v2,v3] in order; got {header}"
            )
        pts, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                pts.append([float(row[i]) for i in xcols])
                vals.append([float(row[i]) for i in vcols])
            except (ValueError, IndexError):
                raise ReferenceFormatError(f"{path}:{lineno}: malformed row {row}") from None
    if not pts:
        raise ReferenceFormatError(f"{path}: no data rows")
    ref = ReferenceField(np.asarray(pts), np.asarray(vals), {"source": str(path)})
    if model is not None:
        ref.check_bbox(model)
    return ref


def save_reference(path: str | Path, ref: ReferenceField) -> None:
    m, C = ref.points.shape[1], ref.values.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(m)] + [f"v{k + 1}" for k in range(C)])
        for p, v in zip(ref.points, ref.values):
            w.writerow([repr(float(a)) for a in p] + [repr(float(a)) for a in v])


def reference_grid(d: int, n_points: int, n_patches: int) -> np.ndarray:
    """Uniform tensor grid on [-1, 1]^d with about ``n_points / n_patches`` nodes."""
    n = max(2, int(round((n_points / n_patches) ** (1.0 / d))))
    t = np.linspace(-1.0, 1.0, n)
    return np.stack([g.ravel() for g in np.meshgrid(*([t] * d), indexing="ij")], axis=1)


def relative_l2(ansatz: GlobalAnsatz, reference: ReferenceField | Expression | None = None,
                region: int | None = None, phi=None, theta=None, mode: str = "grid",
                n_points: int = 75000, mesh_resolution: int = 64) -> float:
    """``‖u - u_ref‖ / ‖u_ref‖`` as plain point sums.

    ``mode="grid"`` evaluates both fields on a uniform reference grid of
    every patch (about ``n_points`` in total); a scattered reference field is
    interpolated linearly onto the grid points. ``mode="reference"``
    evaluates the trial function at the reference points, locating each one
    in a fine piecewise-linear image of the patches. ``region`` restricts to
    one patch.

    Raises
    ------
    ValueError
        If the reference vanishes on the region.
    """
    model = ansatz.model
    pids = model.patch_ids if region is None else [region]
    if region is not None and region not in model.patches:
        raise ValueError(f"unknown patch {region}")
    num = den = 0.0
    if mode == "grid":
        X = reference_grid(model.dim, n_points, len(model.patch_ids))
        interp = None
        for pid in pids:
            x, u, _, _ = ansatz.pushforward_field(pid, X, phi, theta, gradients=False)
            if isinstance(reference, Expression):
                r = np.asarray(reference.value(x), dtype=float).reshape(len(x), -1)
            elif isinstance(reference, ReferenceField):
                if interp is None:
                    interp = _scattered_interpolator(reference)
                r = interp(x)
            else:
                raise ValueError("grid mode needs an expression or a reference field")
            num += float(np.sum((u - r) ** 2))
            den += float(np.sum(r**2))
    elif mode == "reference":
        if not isinstance(reference, ReferenceField):
            raise ValueError("reference mode needs a reference field")
        found = np.zeros(len(reference.points), dtype=bool)
        for pid in model.patch_ids:
            mesh = PatchSimplexMesh(model.patches[pid], resolution=mesh_resolution)
            Xh, inside = mesh.interpolate_reference(reference.points, tol=1e-9)
            take = inside & ~found
            found |= inside
            if pid not in pids or not np.any(take):
                continue
            _, u, _, _ = ansatz.pushforward_field(pid, Xh[take], phi, theta, gradients=False)
            r = reference.values[take]
            num += float(np.sum((u - r) ** 2))
            den += float(np.sum(r**2))
        if region is None and not np.all(found):
            log.warning("%d reference point(s) not located in any patch; skipped", int((~found).sum()))
    else:
        raise ValueError("mode must be 'grid' or 'reference'")
    if den == 0.0:
        raise ValueError("reference field has zero norm on the region")
    return math.sqrt(num / den)


def _scattered_interpolator(ref: ReferenceField):
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

    lin = LinearNDInterpolator(ref.points, ref.values)
    near = NearestNDInterpolator(ref.points, ref.values)

    def f(x):
        v = np.asarray(lin(x), dtype=float).reshape(len(x), -1)
        bad = np.isnan(v).any(axis=1)
        if np.any(bad):
            v[bad] = np.asarray(near(x[bad]), dtype=float).reshape(int(bad.sum()), -1)
        return v

    return f


# -- export ----------------------------------------------------------------------------------

@dataclass
class FieldExport:
    directory: Path
    files: dict[int, Path]
    resolution: int
    n_rows: dict[int, int]


def export_field(ansatz: GlobalAnsatz, resolution: int, path: str | Path, phi=None, theta=None,
                 gradients: bool = True) -> FieldExport:
    """One CSV per patch plus ``manifest.json`` in directory ``path``.

    Columns: ``xh1..`` reference coordinates, ``x1..`` physical
    coordinates, ``v1..`` values and ``g{c}_{k}`` physical gradients
    (component ``c``, direction ``k``). Floats are written with full
    round-trip precision.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    model = ansatz.model
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    d, m, C = model.dim, model.phys_dim, ansatz.n_components
    t = np.linspace(-1.0, 1.0, resolution)
    X = np.stack([g.ravel() for g in np.meshgrid(*([t] * d), indexing="ij")], axis=1)
    files, rows = {}, {}
    for pid in model.patch_ids:
        x, v, g, singular = ansatz.pushforward_field(pid, X, phi, theta, gradients=gradients)
        header = [f"xh{k + 1}" for k in range(d)] + [f"x{k + 1}" for k in range(m)] + [f"v{c + 1}" for c in range(C)]
        cols = [X, x, v]
        if gradients:
            header += [f"g{c + 1}_{k + 1}" for c in range(C) for k in range(m)]
            cols.append(g.reshape(len(X), C * m))
        data = np.hstack(cols)
        f = out / f"patch_{pid}.csv"
        with f.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([repr(float(a)) for a in row])
        files[pid] = f
        rows[pid] = len(X)
        if np.any(singular):
            log.warning("patch %d: %d grid point(s) with singular Jacobian; gradients are NaN", pid,
                        int(singular.sum()))
    manifest = {
        "resolution": resolution,
        "dim": d,
        "components": C,
        "phi": None if phi is None else [float(a) for a in np.asarray(phi).reshape(-1)],
        "patches": {str(pid): files[pid].name for pid in model.patch_ids},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return FieldExport(out, files, resolution, rows)


def export_to_reference(export: FieldExport) -> ReferenceField:
    """Physical points and values of an export, as a reference field."""
    pts, vals = [], []
    for f in export.files.values():
        with f.open(newline="", encoding="utf-8") as fh:
            r = csv.reader(fh)
            header = next(r)
            xi = [i for i, h in enumerate(header) if h.startswith("x") and not h.startswith("xh")]
            vi = [i for i, h in enumerate(header) if h.startswith("v")]
            for row in r:
                pts.append([float(row[i]) for i in xi])
                vals.append([float(row[i]) for i in vi])
    return ReferenceField(np.asarray(pts), np.asarray(vals))
