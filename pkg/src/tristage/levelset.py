"""Gaussian-RBF level-set geometry: fit, projection, shift, slope control.

One Gaussian exp(-r^2) sits at every element centroid; the level-set value
is the weighted sum minus a global shift theta. Supports are truncated at
radius 3.5 element lengths (dropped tails are below exp(-3.5^2) ~ 4.8e-6),
which keeps the fit matrix and the point/weight coupling sparse with a
pattern that never changes.

Slope control: with |w_i| <= w_max the level-set magnitude and gradient are
bounded by lattice sums of the Gaussian (recomputed here, not hard-coded),
and the projection steepness kappa is chosen as the largest value that
keeps the projected-density derivative above a floor at the integration
point nearest a boundary.
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import ConfigError, FitError

SUPPORT_RADIUS = 3.5  # element lengths; "support diameter of 7 elements"
_ITERATIVE_FIT_SIZE = 50_000

_LATTICE_SUM_1D = None
_SLOPE_SUM_1D = None


def lattice_sums():
    """(peak sum, max slope sum) of unit-weight Gaussians on an integer lattice.

    Recomputed from truncated series each run; the truncation at |k| = 6 is
    far below double precision of the full theta-function values.
    """
    global _LATTICE_SUM_1D, _SLOPE_SUM_1D
    if _LATTICE_SUM_1D is None:
        k = np.arange(-6, 7, dtype=float)
        _LATTICE_SUM_1D = float(np.exp(-(k**2)).sum())
        m = np.arange(0, 7, dtype=float) + 0.5
        _SLOPE_SUM_1D = float(4.0 * (m * np.exp(-(m**2))).sum())
    return _LATTICE_SUM_1D, _SLOPE_SUM_1D


def rbf_value(x, center):
    """exp(-|x - center|^2), exactly zero beyond the support radius."""
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    r2 = ((x - center) ** 2).sum(axis=-1)
    out = np.exp(-r2)
    return np.where(r2 > SUPPORT_RADIUS**2, 0.0, out)


class RbfLevelSet:
    """Weights + shift + projection steepness on the centroid lattice."""

    def __init__(self, dims, weights, theta=0.0, kappa=1.0, w_max=np.inf,
                 h=1.0, support_radius=SUPPORT_RADIUS):
        self.dims = tuple(int(d) for d in dims)
        self.ndim = len(self.dims)
        self.h = float(h)
        self.weights = np.asarray(weights, dtype=float).copy()
        if self.weights.size != int(np.prod(self.dims)):
            raise ConfigError("weights", "weight count does not match dims")
        self.theta = float(theta)
        self.kappa = float(kappa)
        self.w_max = float(w_max)
        self.support_radius = float(support_radius)
        self._tree = None

    def centroids(self):
        axes = [(np.arange(d) + 0.5) * self.h for d in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel(order="F") for m in mesh])

    def _centroid_tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.centroids())
        return self._tree

    def basis_matrix(self, points):
        """Sparse N with N[k, i] = exp(-|x_k - c_i|^2) within the support.

        Rows are the evaluation points; this is both the evaluation operator
        and the point-value-to-weight derivative.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cents = self.centroids()
        radius = self.support_radius * self.h
        neigh = self._centroid_tree().query_ball_point(pts, radius)
        counts = np.fromiter((len(nb) for nb in neigh), dtype=np.int64,
                             count=len(neigh))
        indptr = np.concatenate([[0], np.cumsum(counts)])
        indices = np.concatenate([np.sort(nb) for nb in neigh]) if counts.sum() \
            else np.empty(0, dtype=np.int64)
        indices = indices.astype(np.int64)
        d2 = ((np.repeat(pts, counts, axis=0) - cents[indices]) ** 2).sum(axis=1)
        data = np.exp(-d2 / self.h**2)
        return sparse.csr_matrix((data, indices, indptr),
                                 shape=(pts.shape[0], cents.shape[0]))

    def eval(self, points):
        """phi at the given points."""
        return self.basis_matrix(points) @ self.weights - self.theta

    def __call__(self, points):
        return self.eval(points)

    def grad(self, points):
        """Spatial gradient of phi, shape (npts, D)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cents = self.centroids()
        N = self.basis_matrix(pts).tocoo()
        out = np.zeros_like(pts)
        diff = pts[N.row] - cents[N.col]  # (nnz, D)
        contrib = (-2.0 / self.h**2) * diff * (N.data * self.weights[N.col])[:, None]
        np.add.at(out, N.row, contrib)
        return out

    def copy_with(self, weights=None, theta=None, kappa=None):
        lsf = RbfLevelSet(self.dims, self.weights if weights is None else weights,
                          self.theta if theta is None else theta,
                          self.kappa if kappa is None else kappa,
                          self.w_max, self.h, self.support_radius)
        lsf._tree = self._tree
        return lsf


def pattern_basis_matrix(lsf: RbfLevelSet, element_ids, ref_points, dims=None):
    """Point-to-weight operator for points sharing one per-element pattern.

    Equivalent to basis_matrix on the stacked physical points (element-major
    rows) but exploits the lattice structure: every pattern point sees the
    same integer centroid offsets, so no neighbor search is needed. Pattern
    points must be strictly inside the element (Gauss points are).
    """
    dims = np.asarray(dims if dims is not None else lsf.dims)
    D = lsf.ndim
    elem_ids = np.asarray(element_ids, dtype=np.int64)
    local = (np.atleast_2d(ref_points) + 1.0) / 2.0  # [0, 1]^D
    m = local.shape[0]
    ne = elem_ids.size

    # per-axis element indices of each element
    eidx = np.empty((ne, D), dtype=np.int64)
    rem = elem_ids.copy()
    for a in range(D):
        eidx[:, a] = rem % dims[a]
        rem //= dims[a]

    span = np.arange(-3, 4)
    mesh = np.meshgrid(*([span] * D), indexing="ij")
    offsets = np.column_stack([g.ravel() for g in mesh])  # (K, D)

    strides = np.cumprod(np.concatenate([[1], dims[:-1]]))
    rows, cols, data = [], [], []
    for q in range(m):
        delta = offsets + 0.5 - local[q]  # centroid minus point, element units
        d2 = (delta**2).sum(axis=1)
        keep = d2 <= SUPPORT_RADIUS**2
        offs_q = offsets[keep]
        vals_q = np.exp(-d2[keep])
        nb = eidx[:, None, :] + offs_q[None, :, :]  # (ne, k, D)
        valid = np.all((nb >= 0) & (nb < dims), axis=2)
        col = (nb * strides).sum(axis=2)
        r, c = np.nonzero(valid)
        rows.append(r.astype(np.int64) * m + q)
        cols.append(col[r, c].astype(np.int64))
        data.append(vals_q[c])
    N = sparse.coo_matrix(
        (np.concatenate(data),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(ne * m, int(np.prod(dims))))
    return N.tocsr()


def fit_weights(density_values, dims, h=1.0):
    """Solve Phi w = rho so the level set interpolates the density field.

    Phi is the Gaussian collocation matrix on the centroid lattice with the
    same truncation as evaluation, symmetric positive definite. Direct
    factorization by default, CG fallback for large 3D lattices.
    """
    rho = np.asarray(density_values, dtype=float).ravel()
    lsf = RbfLevelSet(dims, np.zeros(rho.size), h=h)
    Phi = lsf.basis_matrix(lsf.centroids()).tocsc()
    n = rho.size
    if n <= _ITERATIVE_FIT_SIZE or len(dims) < 3:
        w = spla.spsolve(Phi, rho)
    else:
        M = sparse.diags(1.0 / Phi.diagonal())
        w, info = spla.cg(Phi.tocsr(), rho, rtol=1e-10, atol=0.0, M=M,
                          maxiter=20_000)
        if info != 0:
            res = np.abs(Phi @ w - rho).max()
            raise FitError(f"weight fit CG stalled, residual {res:.3e}")
    residual = np.abs(Phi @ w - rho).max()
    if residual > 1e-6:
        raise FitError(f"weight fit residual {residual:.3e} exceeds 1e-6")
    return w


def heaviside(phi, kappa):
    """Smooth unit step 1/(1 + exp(-kappa*phi)), overflow-safe."""
    return expit(kappa * np.asarray(phi, dtype=float))


def heaviside_derivative(phi, kappa):
    """d/dphi of the smooth step: kappa e^{-k phi} / (1 + e^{-k phi})^2."""
    H = heaviside(phi, kappa)
    return kappa * H * (1.0 - H)


def density_from_lsf(phi, kappa, rho0):
    """rho_hat = rho0 + (1 - rho0) H(phi), in (rho0, 1)."""
    return rho0 + (1.0 - rho0) * heaviside(phi, kappa)


def density_derivative_phi(phi, kappa, rho0):
    """d rho_hat / d phi."""
    return (1.0 - rho0) * heaviside_derivative(phi, kappa)


def find_threshold(phi0_at_points, weights, volume_fraction, kappa,
                   tol=1e-6, max_newton=50):
    """Shift theta with integral H(phi0 - theta) dV / V = volume_fraction.

    Newton-Raphson with the analytic derivative, started from the
    volume-weighted mean of phi0 and safeguarded by a monotone bracket;
    bisection fallback if Newton stalls.
    """
    phi0 = np.asarray(phi0_at_points, dtype=float).ravel()
    wts = np.asarray(weights, dtype=float).ravel()
    if not 0.0 < volume_fraction < 1.0:
        raise ConfigError("volume_fraction", "must be in (0, 1)")
    wtot = wts.sum()

    def residual(theta):
        return float(wts @ heaviside(phi0 - theta, kappa) / wtot - volume_fraction)

    lo, hi = float(phi0.min()) - 1.0, float(phi0.max()) + 1.0
    theta = float(wts @ phi0 / wtot)
    for _ in range(max_newton):
        r = residual(theta)
        if abs(r) <= tol:
            return theta
        # residual is decreasing in theta: maintain the bracket
        if r > 0:
            lo = max(lo, theta)
        else:
            hi = min(hi, theta)
        slope = float(-wts @ heaviside_derivative(phi0 - theta, kappa) / wtot)
        if slope < 0.0:
            step = theta - r / slope
        else:
            step = np.nan
        theta = step if lo < step < hi else 0.5 * (lo + hi)
    # bisection fallback on the maintained bracket
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        r = residual(theta)
        if abs(r) <= tol:
            return theta
        if r > 0:
            lo = theta
        else:
            hi = theta
    raise FitError(f"threshold solve did not reach |residual| <= {tol:g}; "
                   f"last residual {r:.3e}")


@dataclass(frozen=True)
class SlopeBounds:
    phi_max: float
    grad_max: float
    delta_x: float
    phi_ip: float
    dmin: float


def slope_constants(ndim, w_max, order, qt_levels, dmin=0.5):
    """Bounds on |phi| and |grad phi| for |w| <= w_max, and the worst-case
    level-set magnitude phi_ip at an integration point next to the boundary.

    The lattice sums are recomputed and checked against their known values;
    failure here would mean the truncated series lost the constants.
    """
    peak, slope = lattice_sums()
    if abs(peak - 1.7726) > 1e-3 or abs(slope - 2.2094) > 1e-3:
        raise FitError("lattice sum sanity check failed")
    phi_max = peak**ndim * w_max
    grad_max = (slope / peak) * peak**ndim * w_max
    delta_x = 2.0 ** (-qt_levels) / (order + 1)
    phi_ip = grad_max * delta_x / 2.0
    return SlopeBounds(phi_max=phi_max, grad_max=grad_max, delta_x=delta_x,
                       phi_ip=phi_ip, dmin=dmin)


def solve_kappa(bounds: SlopeBounds, rho0, rel_tol=1e-6):
    """Steepest kappa keeping d rho_hat / d phi >= dmin at distance phi_ip.

    (1-rho0) * kappa * e^{-k phi} / (1+e^{-k phi})^2 = dmin has two roots in
    kappa; the larger one (descending branch) is returned. For phi_ip -> 0
    the equation degenerates to (1-rho0) kappa / 4 = dmin.
    """
    phi_ip, dmin = bounds.phi_ip, bounds.dmin
    if dmin <= 0.0:
        raise ConfigError("dmin", "must be positive")
    if phi_ip <= 0.0:
        return 4.0 * dmin / (1.0 - rho0)

    def lhs(kappa):
        return (1.0 - rho0) * kappa * _sigmoid_deriv(kappa * phi_ip)

    # peak of z*sigma'(z) at z* solving z(2 sigma(z) - 1) = 1
    z = 1.5
    for _ in range(100):
        s = 1.0 / (1.0 + np.exp(-z))
        fz = 1.0 + z * (1.0 - 2.0 * s)
        dfz = (1.0 - 2.0 * s) - 2.0 * z * s * (1.0 - s)
        z_new = z - fz / dfz
        if abs(z_new - z) < 1e-14:
            z = z_new
            break
        z = z_new
    k_peak = z / phi_ip
    attainable = lhs(k_peak)
    if attainable < dmin:
        raise FitError(
            f"density-derivative floor {dmin:g} unreachable; maximum attainable "
            f"is {attainable:.6g} at kappa = {k_peak:.6g}")

    hi = k_peak
    while lhs(hi) > dmin:
        hi *= 2.0
    lo = k_peak
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if lhs(mid) > dmin:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid_deriv(z):
    s = 1.0 / (1.0 + np.exp(-abs(z)))
    return s * (1.0 - s)


# --- serialization ----------------------------------------------------------

_LSF_MAGIC = b"TSRBLS01"


def save_levelset(lsf: RbfLevelSet, path):
    """Binary form: magic, u32 D, u32 dims, f64 h/theta/kappa/w_max/support,
    then the flat weight array (f64), all little-endian, x index fastest."""
    with open(path, "wb") as fh:
        fh.write(_LSF_MAGIC)
        fh.write(struct.pack("<I", lsf.ndim))
        fh.write(struct.pack(f"<{lsf.ndim}I", *lsf.dims))
        # unbounded weights stored as 0.0 (w_max is strictly positive otherwise)
        wmax = lsf.w_max if np.isfinite(lsf.w_max) else 0.0
        fh.write(struct.pack("<5d", lsf.h, lsf.theta, lsf.kappa, wmax,
                             lsf.support_radius))
        fh.write(lsf.weights.astype("<f8").tobytes())


def load_levelset(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _LSF_MAGIC:
            raise ConfigError("levelset_file", f"bad magic {magic!r}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        h, theta, kappa, w_max, support = struct.unpack("<5d", fh.read(40))
        n = int(np.prod(dims))
        weights = np.frombuffer(fh.read(8 * n), dtype="<f8")
    return RbfLevelSet(dims, weights, theta, kappa,
                       w_max if w_max > 0 else np.inf, h, support)


def save_levelset_csv(lsf: RbfLevelSet, path):
    """Debug form: header comments then one weight per line."""
    with open(path, "w") as fh:
        fh.write(f"# dims: {' '.join(str(d) for d in lsf.dims)}\n")
        fh.write(f"# h: {lsf.h!r}\n# theta: {lsf.theta!r}\n")
        fh.write(f"# kappa: {lsf.kappa!r}\n# w_max: {lsf.w_max!r}\n")
        fh.write(f"# support_radius: {lsf.support_radius!r}\n")
        fh.write("weight\n")
        for w in lsf.weights:
            fh.write(f"{w!r}\n")
