"""Dense linear algebra, isotropic Gaussians, and a splittable counter-based PRNG.

Everything operates on 64-bit float numpy arrays. The SVD is a one-sided
Jacobi iteration written out explicitly so its convergence can be capped and
fault-injected by the verification suite; all other routines build on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

Matrix = np.ndarray  # 2-d float64
Vector = np.ndarray  # 1-d float64

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

# Test hook: when True, svd() returns the iterate from before its last
# rotating Jacobi sweep, leaving results slightly unconverged.
_fault_skip_final_sweep = False


def as_vector(x, dim: int | None = None) -> Vector:
    """Validate and convert to a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected vector of dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NumericError("vector contains non-finite entries")
    return v


def as_matrix(a, shape: tuple[int, int] | None = None) -> Matrix:
    """Validate and convert to a finite 2-d float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-d matrix, got shape {m.shape}")
    if shape is not None and m.shape != shape:
        raise ShapeError(f"expected matrix of shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


# ---------------------------------------------------------------------------
# Splittable counter-based PRNG
# ---------------------------------------------------------------------------

def _mix64_int(x: int) -> int:
    """SplitMix64 finalizer on a Python int, 64-bit wraparound."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX_A)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX_B)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class RngStream:
    """Immutable PRNG state: output i is a pure function of (seed, stream, i).

    Draw methods return ``(values, advanced_stream)``; the original stream is
    untouched, so replaying from any saved state is bit-exact. ``split`` derives
    an independent child stream without consuming randomness, which lets every
    module own its own stream under one experiment seed.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def _base(self) -> int:
        return _mix64_int(_mix64_int(self.seed) ^ _mix64_int(self.stream ^ _GOLDEN))

    def _words(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + count, dtype=np.uint64)
        state = idx * np.uint64(_GOLDEN) + np.uint64(self._base())
        return _mix64_array(state)

    def _advanced(self, used: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.counter + used)

    def split(self, child: int) -> "RngStream":
        """Derive child stream ``child``; counter-based, so children never share states."""
        return RngStream(self.seed, _mix64_int(self.stream * 0x5851F42D4C957F2D + 2 * child + 1), 0)

    def uniforms(self, count: int) -> tuple[np.ndarray, "RngStream"]:
        """``count`` i.i.d. draws from U[0, 1)."""
        w = self._words(count)
        return (w >> np.uint64(11)).astype(np.float64) * (2.0 ** -53), self._advanced(count)

    def normals(self, count: int) -> tuple[np.ndarray, "RngStream"]:
        """``count`` i.i.d. draws from N(0, 1) via Box-Muller (2 uniforms per pair)."""
        npairs = (count + 1) // 2
        w = self._words(2 * npairs)
        # u1 in (0, 1] so the log is finite.
        u1 = ((w[:npairs] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (w[npairs:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return z, self._advanced(2 * npairs)

    def integers(self, low: int, high: int, count: int) -> tuple[np.ndarray, "RngStream"]:
        """``count`` draws from {low, ..., high-1}; modulo bias is negligible at desk scale."""
        if high <= low:
            raise ShapeError(f"empty integer range [{low}, {high})")
        w = self._words(count)
        return (w % np.uint64(high - low)).astype(np.int64) + low, self._advanced(count)


# ---------------------------------------------------------------------------
# Singular value decomposition and pseudo-inverse
# ---------------------------------------------------------------------------

def _complete_orthonormal(u: np.ndarray, start: int) -> None:
    """Fill u[:, start:] with columns orthonormal to the existing ones (in place)."""
    m = u.shape[0]
    col = start
    for cand in range(m):
        if col >= u.shape[1]:
            break
        v = np.zeros(m)
        v[cand] = 1.0
        v -= u[:, :col] @ (u[:, :col].T @ v)
        nrm = float(np.linalg.norm(v))
        if nrm > 0.5:
            u[:, col] = v / nrm
            col += 1
    if col < u.shape[1]:
        raise NumericError("failed to complete orthonormal basis")


def svd(a: Matrix, max_sweeps: int = 60) -> tuple[Matrix, Vector, Matrix]:
    """Thin SVD ``a = u @ diag(s) @ v.T`` by one-sided Jacobi rotations.

    Returns u (m, r), s (r,) non-negative non-increasing, v (n, r) with
    r = min(m, n); u and v have orthonormal columns. Raises NumericError
    carrying the matrix shape if the sweep cap is exhausted.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        v, s, u = svd(a.T, max_sweeps=max_sweeps)
        return u, s, v

    g = a.copy()
    v = np.eye(n)
    tol = 1e-15
    before_last_rotation = None
    converged = False
    for _ in range(max_sweeps):
        snapshot = (g.copy(), v.copy())
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                app = float(gp @ gp)
                aqq = float(gq @ gq)
                apq = float(gp @ gq)
                if abs(apq) <= tol * math.sqrt(app * aqq) or apq == 0.0:
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                gp_new = cs * gp - sn * gq
                gq_new = sn * gp + cs * gq
                g[:, p] = gp_new
                g[:, q] = gq_new
                vp = v[:, p].copy()
                v[:, p] = cs * vp - sn * v[:, q]
                v[:, q] = sn * vp + cs * v[:, q]
        if rotated:
            before_last_rotation = snapshot
        else:
            converged = True
            break
    if not converged:
        raise NumericError(f"svd did not converge within {max_sweeps} sweeps for shape {m}x{n}")
    if _fault_skip_final_sweep and before_last_rotation is not None:
        g, v = before_last_rotation

    s = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    v = v[:, order]

    u = np.zeros((m, n))
    smax = float(s[0]) if n > 0 else 0.0
    rank = 0
    for j in range(n):
        if s[j] > smax * 1e-14 and s[j] > 0.0:
            u[:, j] = g[:, j] / s[j]
            rank = j + 1
        else:
            s[j] = 0.0
    _complete_orthonormal(u, rank)
    return u, s, v


def pinv(a: Matrix, rcond: float = 1e-12) -> Matrix:
    """Moore-Penrose pseudo-inverse via SVD; singular values below rcond*s_max are dropped."""
    if not (0.0 < rcond < 1.0):
        raise ShapeError(f"rcond must lie in (0, 1), got {rcond}")
    u, s, v = svd(a)
    cutoff = rcond * (float(s[0]) if s.size else 0.0)
    sinv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (v * sinv) @ u.T


def smallest_singular_value(a: Matrix) -> float:
    _, s, _ = svd(a)
    return float(s[-1]) if s.size else 0.0


# ---------------------------------------------------------------------------
# Isotropic Gaussians
# ---------------------------------------------------------------------------

def gauss_logpdf(x: Vector, mean: Vector, sigma2: float) -> float:
    """Log-density of N(mean, sigma2 * I) at x."""
    x = as_vector(x)
    mean = as_vector(mean, dim=x.shape[0])
    if sigma2 <= 0.0:
        raise ShapeError(f"sigma2 must be positive, got {sigma2}")
    d = x.shape[0]
    diff = x - mean
    return -0.5 * d * math.log(2.0 * math.pi * sigma2) - float(diff @ diff) / (2.0 * sigma2)


def gauss_logpdf_rows(xs: np.ndarray, mean: Vector, sigma2: float) -> np.ndarray:
    """Row-wise gauss_logpdf for an (m, d) array; used on hot evaluation paths."""
    xs = np.asarray(xs, dtype=np.float64)
    d = xs.shape[1]
    diff = xs - mean[None, :]
    return -0.5 * d * math.log(2.0 * math.pi * sigma2) - np.sum(diff * diff, axis=1) / (2.0 * sigma2)


def sample_gaussian(rng: RngStream, mean: Vector, sigma2: float, count: int) -> tuple[np.ndarray, RngStream]:
    """Draw ``count`` i.i.d. vectors from N(mean, sigma2 * I) as a (count, d) array."""
    mean = as_vector(mean)
    if sigma2 <= 0.0:
        raise ShapeError(f"sigma2 must be positive, got {sigma2}")
    d = mean.shape[0]
    z, rng = rng.normals(count * d)
    draws = mean[None, :] + math.sqrt(sigma2) * z.reshape(count, d)
    return draws, rng
