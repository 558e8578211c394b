"""Regenerate the example geometry files in src/isoneural/cases/.

The quadrupole sector and the 3D holder are reconstructions chosen to
exercise the same topology (patch count, interface structure, materials)
as the published models; their exact CAD data is not available.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "isoneural" / "cases"


def bilinear(pid, corners, material=None):
    """corners in reference order (-1,-1), (1,-1), (1,1), (-1,1)."""
    a, b, c, d = corners
    p = {"id": pid, "dim": 2, "degrees": [1, 1], "knots": [[0, 0, 1, 1], [0, 0, 1, 1]],
         "control_points": [[list(a), list(d)], [list(b), list(c)]]}
    if material:
        p["material"] = material
    return p


def trilinear(pid, corners, z0=-0.5, z1=0.5):
    a, b, c, d = corners
    cp = [[[list(p) + [z0], list(p) + [z1]] for p in (a, d)], [[list(p) + [z0], list(p) + [z1]] for p in (b, c)]]
    return {"id": pid, "dim": 3, "degrees": [1, 1, 1], "knots": [[0, 0, 1, 1]] * 3, "control_points": cp}


def lshape():
    patches = [bilinear(1, [(0, 0), (1, 0), (1, 1), (0, 1)]),
               bilinear(2, [(0, -1), (1, -1), (1, 0), (0, 0)]),
               bilinear(3, [(1, -1), (2, -1), (2, 0), (1, 0)])]
    bnd = [{"patch_id": 1, "facet": "x1-", "type": "dirichlet", "value": 0.0},
           {"patch_id": 1, "facet": "x2+", "type": "dirichlet", "value": 0.0},
           {"patch_id": 2, "facet": "x1-", "type": "dirichlet", "value": 0.0},
           {"patch_id": 3, "facet": "x2-", "type": "dirichlet", "value": 0.0}]
    return {"name": "lshape", "description": "three-patch L-shaped domain, bilinear patches",
            "patches": patches, "boundaries": bnd}


def lshape_dirichlet():
    """Same domain with every outer facet clamped (sin(pi x) sin(pi y) vanishes on all of them)."""
    data = lshape()
    outer = [(1, "x1-"), (1, "x1+"), (1, "x2+"), (2, "x1-"), (2, "x2-"), (3, "x1+"), (3, "x2-"), (3, "x2+")]
    data["boundaries"] = [{"patch_id": p, "facet": f, "type": "dirichlet", "value": 0.0} for p, f in outer]
    data["name"] = "lshape_dirichlet"
    data["description"] = "three-patch L-shaped domain, homogeneous Dirichlet data on the whole boundary"
    return data


def lshape_curved():
    """Same domain, degree-2 patches with a moved interior control point (non-affine maps)."""
    data = lshape()
    for p in data["patches"]:
        (a, d), (b, c) = p["control_points"]
        grid = []
        for i, s in enumerate((0.0, 0.5, 1.0)):
            row = []
            for j, t in enumerate((0.0, 0.5, 1.0)):
                x = [(1 - s) * (1 - t) * a[k] + s * (1 - t) * b[k] + s * t * c[k] + (1 - s) * t * d[k] for k in range(2)]
                if i == 1 and j == 1:
                    x = [x[0] + 0.15, x[1] - 0.1]
                row.append(x)
            grid.append(row)
        p["degrees"] = [2, 2]
        p["knots"] = [[0, 0, 0, 1, 1, 1]] * 2
        p["control_points"] = grid
        p["weights"] = [[1.0, 1.0, 1.0], [1.0, 1.3, 1.0], [1.0, 1.0, 1.0]]
    data["name"] = "lshape_curved"
    data["description"] = "three-patch L-shaped domain with curved (rational, degree 2) parametrizations"
    return data


def arc_patch(pid, r0, r1, t0, t1, material):
    """Annular sector r in [r0, r1], angle in [t0, t1]: linear in r, exact quadratic arc in angle."""
    h = 0.5 * (t1 - t0)
    w = math.cos(h)
    cps = []
    for r in (r0, r1):
        row = []
        for t, scale in ((t0, 1.0), (t0 + h, 1.0 / w), (t1, 1.0)):
            row.append([r * scale * math.cos(t), r * scale * math.sin(t)])
        cps.append(row)
    return {"id": pid, "dim": 2, "degrees": [1, 2], "knots": [[0, 0, 1, 1], [0, 0, 0, 1, 1, 1]],
            "control_points": cps, "weights": [[1.0, w, 1.0], [1.0, w, 1.0]], "material": material}


def quarter_annulus():
    p = arc_patch(1, 1.0, 2.0, 0.0, math.pi / 2, None)
    del p["material"]
    return {"name": "quarter_annulus", "description": "single exact quarter annulus, 1 <= r <= 2",
            "patches": [p], "boundaries": []}


def quadrupole():
    a, b, c = 0.01, 0.03, 0.05
    mid = math.pi / 8
    patches = [arc_patch(1, a, b, 0.0, mid, "air"), arc_patch(2, a, b, mid, 2 * mid, "air"),
               arc_patch(3, b, c, 0.0, mid, "copper"), arc_patch(4, b, c, mid, 2 * mid, "iron")]
    bnd = [{"patch_id": 2, "facet": "x2+", "type": "dirichlet", "value": 0.0},
           {"patch_id": 4, "facet": "x2+", "type": "dirichlet", "value": 0.0},
           {"patch_id": 3, "facet": "x1+", "type": "dirichlet", "value": 0.0},
           {"patch_id": 4, "facet": "x1+", "type": "dirichlet", "value": 0.0}]
    return {"name": "quadrupole_sector",
            "description": "approximate 45-degree quadrupole sector (reconstruction): air bore, copper coil, "
                           "iron yoke; four patches meeting at one point",
            "patches": patches, "boundaries": bnd}


def holder():
    c = (1.0, 0.0)
    p1 = trilinear(1, [(0.0, 0.0), c, (1.2, 0.75), (0.0, 0.75)])
    p2 = trilinear(2, [(0.0, -0.75), (1.2, -0.75), c, (0.0, 0.0)])
    p3 = trilinear(3, [c, (1.2, -0.75), (2.0, 0.0), (1.2, 0.75)])
    p4 = trilinear(4, [(1.2, -0.75), (2.4, -0.75), (2.4, 0.0), (2.0, 0.0)])
    p5 = trilinear(5, [(2.4, -0.75), (2.75, -0.75), (2.75, 0.0), (2.4, 0.0)])
    bnd = [{"patch_id": 5, "facet": "x1+", "type": "dirichlet", "value": [0.0, 0.0, 0.0]}]
    return {"name": "holder_3d",
            "description": "approximate five-patch 3D holder (reconstruction, lengths in mm): two jaws, a "
                           "connector, an arm and a clamped foot",
            "patches": [p1, p2, p3, p4, p5], "boundaries": bnd}


def contact_square():
    p = bilinear(1, [(0, 0), (10, 0), (10, 10), (0, 10)])
    return {"name": "contact_square", "description": "10 mm square, clamped at the bottom",
            "patches": [p], "boundaries": [{"patch_id": 1, "facet": "x2-", "type": "dirichlet",
                                            "value": [0.0, 0.0]}]}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for fn in (lshape, lshape_dirichlet, lshape_curved, quarter_annulus, quadrupole, holder, contact_square):
        data = fn()
        (OUT / f"{data['name']}.json").write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
        print("wrote", data["name"])


if __name__ == "__main__":
    main()
