"""Thin-plate spline fitting and evaluation.

The spline is anchored on a fixed set of source points (the rectified
frame's base points) and maps each of them onto a target point::

    f(p) = a0 + ax * x + ay * y + sum_j w_j U(|p - s_j|),   U(r) = r^2 ln r^2

Weights and affine part come from the usual bordered linear system. The
system depends on the sources only, so it is factorized once and the
coefficients are a linear function of the targets; :class:`TpsSystem`
exposes that linear map for gradient computations.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .imagebuf import pixel_centers
from .sampler import Grid

AUTO_LAMBDA = 1e-8
# Reciprocal condition below this triggers the automatic regularization.
_RCOND_MIN = 1e-13


class TpsSingularError(ArithmeticError):
    """The bordered TPS system could not be solved, even after regularization."""

    def __init__(self, message: str, cond: float):
        super().__init__(f"{message} (condition estimate {cond:.3e})")
        self.cond = cond


def kernel_u(r):
    """``r^2 ln(r^2)`` with U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    return kernel_u_sq(r * r)


def kernel_u_sq(d2):
    """The TPS kernel evaluated on squared distances."""
    d2 = np.asarray(d2, dtype=np.float64)
    pos = d2 > 0.0
    out = np.where(pos, d2 * np.log(np.where(pos, d2, 1.0)), 0.0)
    return out if out.ndim else float(out)


def _as_points(points) -> np.ndarray:
    pts = getattr(points, "points", points)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def kernel_features(points, sources) -> np.ndarray:
    """Rows ``[U(|p - s_1|) .. U(|p - s_n|), 1, x, y]`` for every point p."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = _as_points(sources)
    n = len(s)
    out = np.empty((len(p), n + 3))
    dx = p[:, 0:1] - s[None, :, 0]
    dy = p[:, 1:2] - s[None, :, 1]
    out[:, :n] = kernel_u_sq(dx * dx + dy * dy)
    out[:, n] = 1.0
    out[:, n + 1:] = p
    return out


@dataclass(frozen=True, eq=False)
class TpsCoeffs:
    kernel_weights: np.ndarray  # (n, 2)
    affine: np.ndarray  # (3, 2): constant, x row, y row
    source_base: np.ndarray  # (n, 2)
    lam: float = 0.0

    def stacked(self) -> np.ndarray:
        return np.vstack([self.kernel_weights, self.affine])


class TpsSystem:
    """LU-factorized bordered system for a fixed set of source points."""

    def __init__(self, sources, lam: float = 0.0, auto_regularize: bool = True):
        src = _as_points(sources)
        n = len(src)
        if n < 3:
            raise ValueError("need at least 3 source points")
        self.sources = src
        self.lam = float(lam)
        self.matrix = self._assemble(src, self.lam)
        lu, rcond = self._factor(self.matrix)
        if rcond < _RCOND_MIN and self.lam == 0.0 and auto_regularize:
            self.lam = AUTO_LAMBDA
            self.matrix = self._assemble(src, self.lam)
            lu, rcond = self._factor(self.matrix)
        if not np.isfinite(rcond) or rcond < np.finfo(float).eps:
            raise TpsSingularError("singular thin-plate spline system", 1.0 / rcond if rcond > 0 else np.inf)
        self._lu = lu
        self.cond = 1.0 / rcond

    @staticmethod
    def _assemble(src: np.ndarray, lam: float) -> np.ndarray:
        n = len(src)
        a = np.zeros((n + 3, n + 3))
        d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
        a[:n, :n] = kernel_u_sq(d2) + lam * np.eye(n)
        a[:n, n] = 1.0
        a[:n, n + 1:] = src
        a[n, :n] = 1.0
        a[n + 1:, :n] = src.T
        return a

    @staticmethod
    def _factor(a: np.ndarray):
        # 1-norm reciprocal condition from LAPACK's gecon on the LU factors.
        with np.errstate(all="ignore"):
            lu, piv, info = scipy.linalg.lapack.dgetrf(a)
            if info > 0:
                return (lu, piv), 0.0
            anorm = np.abs(a).sum(axis=0).max()
            rcond, _ = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
        return (lu, piv), float(rcond)

    @property
    def n(self) -> int:
        return len(self.sources)

    def solve(self, targets) -> TpsCoeffs:
        tgt = _as_points(targets)
        if len(tgt) != self.n:
            raise ValueError(f"expected {self.n} targets, got {len(tgt)}")
        rhs = np.vstack([tgt, np.zeros((3, 2))])
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        if not np.all(np.isfinite(sol)):
            raise TpsSingularError("non-finite TPS solution", self.cond)
        return TpsCoeffs(sol[:self.n], sol[self.n:], self.sources, self.lam)

    def target_map(self) -> np.ndarray:
        """(n+3, n) matrix taking targets to stacked coefficients (both coords alike).

        These are the first n columns of the inverse bordered matrix, i.e.
        the derivative of the coefficients with respect to the targets.
        """
        eye = np.vstack([np.eye(self.n), np.zeros((3, self.n))])
        return scipy.linalg.lu_solve(self._lu, eye)


def solve(base, targets, lam: float = 0.0) -> TpsCoeffs:
    """Fit the spline taking ``base`` points onto ``targets``."""
    base_pts, tgt = _as_points(base), _as_points(targets)
    if len(base_pts) != len(tgt):
        raise ValueError(f"base has {len(base_pts)} points but targets {len(tgt)}")
    if len(base_pts) < 4:
        raise ValueError("need at least 4 point pairs")
    return TpsSystem(base_pts, lam).solve(tgt)


def map_points(coeffs: TpsCoeffs, points) -> np.ndarray:
    feats = kernel_features(points, coeffs.source_base)
    return feats @ coeffs.stacked()


def map_point(coeffs: TpsCoeffs, p) -> tuple[float, float]:
    x, y = map_points(coeffs, np.asarray(p, dtype=np.float64)[None, :])[0]
    return float(x), float(y)


def jacobian_points(coeffs: TpsCoeffs, points) -> np.ndarray:
    """Spatial Jacobians d(map)/d(p), shaped (m, 2, 2) as [output, input]."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    src = coeffs.source_base
    dx = p[:, 0:1] - src[None, :, 0]
    dy = p[:, 1:2] - src[None, :, 1]
    d2 = dx * dx + dy * dy
    pos = d2 > 0.0
    # grad U(|p - s|) = 2 (ln d^2 + 1) (p - s), zero at the source itself
    scale = np.where(pos, 2.0 * (np.log(np.where(pos, d2, 1.0)) + 1.0), 0.0)
    jac = np.empty((len(p), 2, 2))
    jac[:, :, 0] = (scale * dx) @ coeffs.kernel_weights
    jac[:, :, 1] = (scale * dy) @ coeffs.kernel_weights
    jac += coeffs.affine[1:].T[None, :, :]
    return jac


def invert_points(coeffs: TpsCoeffs, targets, initial=None, iterations: int = 8,
                  tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Newton solve of ``map(p) = target`` for every target.

    Returns ``(points, converged)``; entries that did not converge keep the
    best iterate found.
    """
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    p = tgt.copy() if initial is None else np.array(initial, dtype=np.float64).reshape(-1, 2)
    resid = map_points(coeffs, p) - tgt
    err = np.linalg.norm(resid, axis=1)
    for _ in range(iterations):
        active = err > tol
        if not active.any():
            break
        jac = jacobian_points(coeffs, p[active])
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        ok = np.abs(det) > 1e-12
        step = np.zeros((int(active.sum()), 2))
        r = resid[active]
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        step[:, 0] = (jac[:, 1, 1] * r[:, 0] - jac[:, 0, 1] * r[:, 1]) * inv_det
        step[:, 1] = (-jac[:, 1, 0] * r[:, 0] + jac[:, 0, 0] * r[:, 1]) * inv_det
        cand = p[active] - step
        cand_resid = map_points(coeffs, cand) - tgt[active]
        cand_err = np.linalg.norm(cand_resid, axis=1)
        better = cand_err < err[active]
        idx = np.nonzero(active)[0][better]
        p[idx] = cand[better]
        resid[idx] = cand_resid[better]
        err[idx] = cand_err[better]
        if not better.any():
            break
    return p, err <= max(tol, 1e-9)


def map_grid(coeffs: TpsCoeffs, out_w: int, out_h: int) -> Grid:
    """Source coordinates for every pixel center of an ``out_w x out_h`` raster."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"grid size must be positive, got {out_w}x{out_h}")
    gx, gy = pixel_centers(out_w, out_h)
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return Grid(map_points(coeffs, lattice).reshape(out_h, out_w, 2))


@functools.lru_cache(maxsize=32)
def _grid_operator(base_key: bytes, n: int, out_w: int, out_h: int, lam: float) -> np.ndarray:
    sources = np.frombuffer(base_key, dtype=np.float64).reshape(n, 2)
    system = TpsSystem(sources, lam)
    gx, gy = pixel_centers(out_w, out_h)
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    op = kernel_features(lattice, sources) @ system.target_map()
    op.setflags(write=False)
    return op


def grid_operator(base, out_w: int, out_h: int, lam: float = 0.0) -> np.ndarray:
    """(out_h*out_w, n) matrix W with grid = W @ targets.

    Because the spline is linear in its targets, the whole sampling grid is
    a fixed linear image of the control points. Cached per geometry.
    """
    pts = np.ascontiguousarray(_as_points(base))
    return _grid_operator(pts.tobytes(), len(pts), int(out_w), int(out_h), float(lam))
