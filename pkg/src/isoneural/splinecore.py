"""B-spline bases and NURBS patch maps on the reference cube [-1, 1]^d.

All evaluation happens in reference coordinates. Knot vectors are stored
affinely rescaled to [-1, 1] so the parametric domain of every patch is the
same cube the neural ansatz lives on.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# |det J| below this fraction of the Hadamard bound counts as singular
SINGULAR_RTOL = 1e-12
# quadrature contributions are dropped below this fraction
CLAMP_RTOL = 1e-14
_DOMAIN_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a reference coordinate lies outside [-1, 1]."""


class GeometryError(ValueError):
    """Invalid patch data."""


@dataclass(frozen=True)
class Facet:
    """One facet of the reference cube: coordinate ``axis`` fixed to ``side``."""

    axis: int
    side: int

    def __post_init__(self):
        if self.side not in (-1, 1):
            raise ValueError(f"facet side must be -1 or +1, got {self.side}")

    @classmethod
    def parse(cls, text: str) -> "Facet":
        """Parse ``"x1-"``, ``"x2+"`` (1-based axis) into a facet."""
        s = text.strip().lower()
        if len(s) < 3 or s[0] != "x" or s[-1] not in "+-" or not s[1:-1].isdigit():
            raise ValueError(f"bad facet id {text!r}; expected e.g. 'x1-' or 'x2+'")
        axis = int(s[1:-1]) - 1
        if axis < 0:
            raise ValueError(f"bad facet id {text!r}")
        return cls(axis, 1 if s[-1] == "+" else -1)

    @property
    def label(self) -> str:
        return f"x{self.axis + 1}{'+' if self.side > 0 else '-'}"

    def normal(self, dim: int) -> np.ndarray:
        n = np.zeros(dim)
        n[self.axis] = self.side
        return n

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open (clamped) knot vector, stored rescaled to [-1, 1].

    Any input range ``[a, b]`` is mapped affinely onto [-1, 1] on construction,
    so knots given on [0, 1] in geometry files and knots already on [-1, 1]
    both end up in the same representation.
    """

    values: np.ndarray
    degree: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        p = int(self.degree)
        if p < 0:
            raise GeometryError("degree must be nonnegative")
        if v.size < 2 * (p + 1):
            raise GeometryError(
                f"knot vector of degree {p} needs at least {2 * (p + 1)} knots, got {v.size}"
            )
        if np.any(np.diff(v) < 0):
            raise GeometryError("knot vector must be nondecreasing")
        a, b = v[0], v[-1]
        if not b > a:
            raise GeometryError("knot vector has zero length")
        if np.any(v[: p + 1] != a) or np.any(v[-(p + 1):] != b):
            raise GeometryError(f"knot vector must be clamped (end knots repeated {p + 1} times)")
        v = 2.0 * (v - a) / (b - a) - 1.0
        v[: p + 1] = -1.0
        v[-(p + 1):] = 1.0
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "degree", p)

    @property
    def n_basis(self) -> int:
        return self.values.size - self.degree - 1

    def __repr__(self) -> str:
        return f"KnotVector(degree={self.degree}, values={self.values.tolist()})"


def _check_domain(t: np.ndarray, what: str = "t") -> None:
    if np.any(~np.isfinite(t)) or np.any(np.abs(t) > 1.0 + _DOMAIN_TOL):
        raise DomainError(f"{what} outside the reference interval [-1, 1]")


def find_spans(knots: KnotVector, t: np.ndarray) -> np.ndarray:
    """Knot span index ``i`` with ``U[i] <= t < U[i+1]`` (last span closed)."""
    U = knots.values
    p = knots.degree
    span = np.searchsorted(U, t, side="right") - 1
    return np.clip(span, p, knots.n_basis - 1)


def _cox_de_boor(U: np.ndarray, span: np.ndarray, t: np.ndarray, p: int) -> np.ndarray:
    """Nonzero basis functions of degree ``p`` on each span (triangular scheme)."""
    n = t.shape[0]
    N = np.zeros((n, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - U[span + 1 - j]
        right[:, j] = U[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(N[:, r], denom, out=np.zeros(n), where=denom != 0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return N


def basis_funs(knots: KnotVector, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`bspline_basis_all` over an array of parameters.

    Returns spans ``(n,)``, values ``(n, p+1)`` and first derivatives
    ``(n, p+1)`` with respect to the [-1, 1] coordinate.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _check_domain(t)
    t = np.clip(t, -1.0, 1.0)
    U = knots.values
    p = knots.degree
    span = find_spans(knots, t)
    N = _cox_de_boor(U, span, t, p)
    dN = np.zeros_like(N)
    if p > 0:
        Nm = _cox_de_boor(U, span, t, p - 1)
        for r in range(p + 1):
            i = span - p + r
            if r >= 1:
                den = U[i + p] - U[i]
                dN[:, r] += np.divide(p * Nm[:, r - 1], den, out=np.zeros_like(t), where=den != 0)
            if r <= p - 1:
                den = U[i + p + 1] - U[i + 1]
                dN[:, r] -= np.divide(p * Nm[:, r], den, out=np.zeros_like(t), where=den != 0)
    return span, N, dN


def bspline_basis_all(knots: KnotVector, t: float) -> tuple[int, np.ndarray, np.ndarray]:
    """Nonzero B-spline basis values and derivatives at a single parameter.

    Raises
    ------
    DomainError
        If ``t`` lies outside [-1, 1].
    """
    span, N, dN = basis_funs(knots, np.array([t], dtype=float))
    return int(span[0]), N[0], dN[0]


@dataclass(frozen=True)
class JacobianData:
    """Jacobian ``J = df/dxhat`` with its determinant and metric tensor.

    ``K = J^-1 J^-T |det J|`` is the matrix that turns reference gradients
    into the physical Dirichlet energy density times the volume factor.
    ``singular`` flags points where ``J`` could not be inverted; ``K`` is all
    zeros there.
    """

    J: np.ndarray
    detJ: float
    K: np.ndarray
    singular: bool = False


@dataclass(frozen=True, eq=False)
class Patch:
    """Tensor-product NURBS map from [-1, 1]^d into R^m."""

    knots: tuple[KnotVector, ...]
    control_points: np.ndarray
    weights: np.ndarray
    patch_id: int = 0
    material: str | None = None

    def __post_init__(self):
        knots = tuple(self.knots)
        d = len(knots)
        if d not in (1, 2, 3):
            raise GeometryError(f"patch dimension must be 1, 2 or 3, got {d}")
        shape = tuple(kv.n_basis for kv in knots)
        cp = np.asarray(self.control_points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if cp.ndim != d + 1 or cp.shape[:d] != shape:
            raise GeometryError(
                f"patch {self.patch_id}: control point tensor shape {cp.shape[:-1]} "
                f"does not match basis counts {shape}"
            )
        if cp.shape[-1] < d:
            raise GeometryError(f"patch {self.patch_id}: physical dimension below parametric dimension")
        if w.shape != shape:
            raise GeometryError(f"patch {self.patch_id}: weights shape {w.shape} != {shape}")
        if np.any(~(w > 0)):
            raise GeometryError(f"patch {self.patch_id}: weights must be strictly positive")
        cp.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return len(self.knots)

    @property
    def phys_dim(self) -> int:
        return self.control_points.shape[-1]

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(kv.degree for kv in self.knots)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.control_points.reshape(-1, self.phys_dim)
        return pts.min(axis=0), pts.max(axis=0)

    # -- batched evaluation ---------------------------------------------------

    def _evaluate(self, X, derivatives: bool):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = self.dim
        if X.shape[-1] != d:
            raise ValueError(f"expected reference points with {d} coordinates, got {X.shape[-1]}")
        _check_domain(X, "xhat")
        B = X.shape[0]
        per_axis = [basis_funs(kv, X[:, k]) for k, kv in enumerate(self.knots)]
        m = self.phys_dim
        W = np.zeros(B)
        P = np.zeros((B, m))
        if derivatives:
            dW = np.zeros((B, d))
            dP = np.zeros((B, m, d))
        cp = self.control_points
        w = self.weights
        for local in itertools.product(*(range(kv.degree + 1) for kv in self.knots)):
            idx = tuple(per_axis[k][0] - self.knots[k].degree + local[k] for k in range(d))
            wij = w[idx]
            vals = [per_axis[k][1][:, local[k]] for k in range(d)]
            prod = np.prod(vals, axis=0) * wij
            W += prod
            P += prod[:, None] * cp[idx]
            if derivatives:
                ders = [per_axis[k][2][:, local[k]] for k in range(d)]
                for a in range(d):
                    term = wij.copy()
                    for k in range(d):
                        term = term * (ders[k] if k == a else vals[k])
                    dW[:, a] += term
                    dP[:, :, a] += term[:, None] * cp[idx]
        f = P / W[:, None]
        if not derivatives:
            return f, None
        # quotient rule for (sum w p N) / (sum w N)
        J = (dP - f[:, :, None] * dW[:, None, :]) / W[:, None, None]
        return f, J

    def eval(self, X) -> np.ndarray:
        """Physical points for reference points ``X`` of shape ``(B, d)``."""
        return self._evaluate(X, derivatives=False)[0]

    def eval_with_jacobian(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Points ``(B, m)`` and Jacobians ``(B, m, d)``."""
        return self._evaluate(X, derivatives=True)

    def rational_basis(self, X) -> np.ndarray:
        """Dense rational basis values ``(B, n_1*...*n_d)``; diagnostics only."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _check_domain(X, "xhat")
        d = self.dim
        full = []
        for k, kv in enumerate(self.knots):
            span, N, _ = basis_funs(kv, X[:, k])
            D = np.zeros((X.shape[0], kv.n_basis))
            for r in range(kv.degree + 1):
                D[np.arange(X.shape[0]), span - kv.degree + r] = N[:, r]
            full.append(D)
        R = full[0]
        for k in range(1, d):
            R = np.einsum("bi,bj->bij", R, full[k]).reshape(X.shape[0], -1)
        R = R * self.weights.reshape(-1)[None, :]
        return R / R.sum(axis=1, keepdims=True)


def metric_terms(J: np.ndarray, clamp: bool = True):
    """Inverse Jacobian, determinant, metric tensor and singularity mask.

    ``J`` has shape ``(B, d, d)``. Returns ``(Jinv, detJ, K, singular)`` where
    ``K = Jinv Jinv^T |detJ|``. Singular points get zero ``Jinv`` and ``K``;
    with ``clamp`` the determinant there is also zeroed so quadrature sums
    stay finite.
    """
    detJ = np.linalg.det(J)
    scale = np.prod(np.linalg.norm(J, axis=1), axis=-1)
    singular = np.abs(detJ) < SINGULAR_RTOL * np.maximum(scale, np.finfo(float).tiny)
    Jsafe = np.where(singular[:, None, None], np.eye(J.shape[-1]), J)
    Jinv = np.linalg.inv(Jsafe)
    Jinv[singular] = 0.0
    K = np.einsum("bij,bkj->bik", Jinv, Jinv) * np.abs(detJ)[:, None, None]
    if clamp:
        dropped = np.abs(detJ) < CLAMP_RTOL * np.maximum(scale, np.finfo(float).tiny)
        if np.any(dropped | singular):
            SINGULARITY_COUNTER.add(int(np.count_nonzero(dropped | singular)))
        detJ = np.where(dropped | singular, 0.0, detJ)
    return Jinv, detJ, K, singular


class _Counter:
    """Counts quadrature points dropped for near-singular Jacobians."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        if n and self.count == 0:
            log.warning("near-singular Jacobian at %d sample(s); contributions clamped to zero", n)
        self.count += n

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


SINGULARITY_COUNTER = _Counter()


def nurbs_eval(patch: Patch, xhat) -> np.ndarray:
    """Physical image of a single reference point."""
    xhat = np.asarray(xhat, dtype=float).reshape(1, -1)
    return patch.eval(xhat)[0]


def nurbs_jacobian(patch: Patch, xhat) -> JacobianData:
    """Jacobian data of a volumetric patch at one reference point."""
    if patch.phys_dim != patch.dim:
        raise GeometryError("nurbs_jacobian needs a volumetric patch (d == m)")
    xhat = np.asarray(xhat, dtype=float).reshape(1, -1)
    _, J = patch.eval_with_jacobian(xhat)
    _, detJ, K, singular = metric_terms(J, clamp=False)
    return JacobianData(J=J[0], detJ=float(detJ[0]), K=K[0], singular=bool(singular[0]))


def facet_measure_batch(patch: Patch, facet: Facet, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Surface measure, outward unit normal and singular mask on a facet.

    Nanson: ``dA = |det J| * ||J^-T n_hat|| dA_hat``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if np.any(np.abs(X[:, facet.axis] - facet.side) > 1e-12):
        raise DomainError(f"points do not lie on facet {facet}")
    _, J = patch.eval_with_jacobian(X)
    Jinv, detJ, _, singular = metric_terms(J, clamp=False)
    nhat = facet.normal(patch.dim)
    v = np.einsum("bji,j->bi", Jinv, nhat)  # J^-T n_hat
    norm = np.linalg.norm(v, axis=1)
    measure = np.abs(detJ) * norm
    normal = np.divide(v, norm[:, None], out=np.zeros_like(v), where=norm[:, None] > 0)
    measure = np.where(singular, 0.0, measure)
    return measure, normal, singular


def facet_measure(patch: Patch, facet: Facet | str, xhat_on_facet) -> tuple[float, np.ndarray]:
    """Surface measure and physical outward normal at one facet point.

    Raises
    ------
    GeometryError
        If the Jacobian is singular at the point.
    """
    if isinstance(facet, str):
        facet = Facet.parse(facet)
    measure, normal, singular = facet_measure_batch(patch, facet, np.asarray(xhat_on_facet).reshape(1, -1))
    if singular[0]:
        raise GeometryError(f"singular Jacobian on facet {facet} of patch {patch.patch_id}")
    return float(measure[0]), normal[0]


def pullback(patch: Patch, u: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    """``uhat = u o f``: a physical field seen in reference coordinates."""

    def uhat(X):
        return u(patch.eval(X))

    return uhat


def pushforward(patch: Patch, uhat: Callable[[np.ndarray], np.ndarray], X) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``u = uhat o f^-1`` at the images of reference points ``X``.

    No inverse map is needed: the field is tabulated at ``f(X)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return patch.eval(X), uhat(X)


def make_patch(degrees: Sequence[int], knots: Sequence[Sequence[float]], control_points,
               weights=None, patch_id: int = 0, material: str | None = None) -> Patch:
    """Convenience constructor; unit weights when ``weights`` is omitted."""
    kvs = tuple(KnotVector(np.asarray(k, dtype=float), p) for p, k in zip(degrees, knots))
    cp = np.asarray(control_points, dtype=float)
    if weights is None:
        weights = np.ones(cp.shape[:-1])
    return Patch(kvs, cp, np.asarray(weights, dtype=float), patch_id=patch_id, material=material)
