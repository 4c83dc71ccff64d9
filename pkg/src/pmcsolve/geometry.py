"""Riemannian kernel: chart metrics, covariant operators, graph geometry.

Sign conventions (used everywhere, tested once):
  * the mean curvature of a graph is H = div(Du/omega), omega = sqrt(1+|Du|^2);
  * the mean curvature of a hypersurface is the covariant divergence of its
    outward unit normal;
  * the graph normal is nu = (-Du/omega, 1/omega), Theta = <nu, d/dr> = 1/omega.

Metrics are given on a coordinate chart by their components sigma_ij(x) and
first derivatives d_k sigma_ij(x).  All component callables are vectorized
over a leading point axis: pts has shape (m, n).
"""

import numpy as np

from .errors import (CollarTooThin, NonpositiveWarp, StencilOutOfDomain,
                     UnsupportedMetricKind)

GOLDEN = 0.6180339887498949


def _atleast_2d_points(pts, dim):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# warp profiles


class IdentityWarp:
    """h(r) = r; the Euclidean metric in polar form."""

    def h(self, r):
        return np.asarray(r, dtype=float)

    def dh(self, r):
        return np.ones_like(np.asarray(r, dtype=float))

    def h_over_r(self, r):
        return np.ones_like(np.asarray(r, dtype=float))


class HermiteQuintic:
    """Quintic matching value and two derivatives at both interval ends."""

    def __init__(self, a, b, left, right):
        self.a, self.b = float(a), float(b)
        w = self.b - self.a
        self.w = w
        v0, d0, s0 = left
        v1, d1, s1 = right
        mat = np.array([
            [1, 0, 0, 0, 0, 0],
            [0, 1, 0, 0, 0, 0],
            [0, 0, 2, 0, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [0, 1, 2, 3, 4, 5],
            [0, 0, 2, 6, 12, 20],
        ], dtype=float)
        rhs = np.array([v0, d0 * w, s0 * w * w, v1, d1 * w, s1 * w * w])
        self.coef = np.linalg.solve(mat, rhs)
        self.dcoef = np.polynomial.polynomial.polyder(self.coef)
        self.ddcoef = np.polynomial.polynomial.polyder(self.dcoef)

    def _s(self, r):
        return (np.asarray(r, dtype=float) - self.a) / self.w

    def value(self, r):
        return np.polynomial.polynomial.polyval(self._s(r), self.coef)

    def deriv(self, r):
        return np.polynomial.polynomial.polyval(self._s(r), self.dcoef) / self.w

    def deriv2(self, r):
        return np.polynomial.polynomial.polyval(self._s(r), self.ddcoef) / self.w**2


class PiecewiseLogWarp:
    """h(r) = r on [0, r0], exp(k*r) on [r1, inf), quintic bridge for log h.

    The bridge is built in log space so h stays positive; monotonicity of h
    is checked on a sample at construction.
    """

    def __init__(self, r0, r1, k):
        if not (0 < r0 < r1):
            raise ValueError("need 0 < r0 < r1")
        self.r0, self.r1, self.k = float(r0), float(r1), float(k)
        self.bridge = HermiteQuintic(
            r0, r1,
            left=(np.log(r0), 1.0 / r0, -1.0 / r0**2),
            right=(k * r1, k, 0.0),
        )
        rs = np.linspace(r0, r1, 512)
        if np.any(self.bridge.deriv(rs) <= 0.0):
            raise ValueError("log-space bridge is not monotone")

    def _log_h(self, r):
        r = np.asarray(r, dtype=float)
        out = np.empty_like(r)
        lo = r <= self.r0
        hi = r >= self.r1
        mid = ~(lo | hi)
        out[lo] = np.log(np.maximum(r[lo], 1e-300))
        out[hi] = self.k * r[hi]
        out[mid] = self.bridge.value(r[mid])
        return out

    def _dlog_h(self, r):
        r = np.asarray(r, dtype=float)
        out = np.empty_like(r)
        lo = r <= self.r0
        hi = r >= self.r1
        mid = ~(lo | hi)
        out[lo] = 1.0 / np.maximum(r[lo], 1e-300)
        out[hi] = self.k
        out[mid] = self.bridge.deriv(r[mid])
        return out

    def h(self, r):
        r = np.asarray(r, dtype=float)
        out = np.exp(self._log_h(r))
        return np.where(r <= self.r0, r, out)

    def dh(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= self.r0, 1.0, self._dlog_h(r) * self.h(r))

    def h_over_r(self, r):
        r = np.asarray(r, dtype=float)
        safe = np.maximum(r, 1e-300)
        return np.where(r <= self.r0, 1.0, self.h(r) / safe)

    def growth_rate(self, r):
        """h'/h, the logarithmic derivative."""
        return self._dlog_h(np.asarray(r, dtype=float))


# ---------------------------------------------------------------------------
# chart metrics


class ChartMetric:
    """Base interface: components sigma(pts) and derivatives dsigma(pts)."""

    kind = "abstract"

    def __init__(self, dim):
        self.dim = int(dim)
        if self.dim < 2:
            raise ValueError("dim must be >= 2")

    def sigma(self, pts):
        raise NotImplementedError

    def dsigma(self, pts):
        """d_k sigma_ij, shape (m, k, i, j)."""
        raise NotImplementedError

    # derived quantities -----------------------------------------------------

    def inverse(self, pts):
        return np.linalg.inv(self.sigma(pts))

    def det(self, pts):
        return np.linalg.det(self.sigma(pts))

    def sqrt_det(self, pts):
        det = self.det(pts)
        if np.any(det <= 0):
            raise ValueError("metric determinant not positive")
        return np.sqrt(det)

    def christoffel(self, pts):
        """Gamma^k_ij, shape (m, k, i, j)."""
        ds = self.dsigma(pts)
        inv = self.inverse(pts)
        # Gamma^k_ij = 1/2 sigma^{kl} (d_i sigma_lj + d_j sigma_li - d_l sigma_ij)
        bracket = (np.einsum("milj->mlij", ds)
                   + np.einsum("mjli->mlij", ds)
                   - ds)
        return 0.5 * np.einsum("mkl,mlij->mkij", inv, bracket)

    def norm(self, pts, vecs):
        sig = self.sigma(pts)
        return np.sqrt(np.einsum("mij,mi,mj->m", sig, vecs, vecs))


class EuclideanMetric(ChartMetric):
    kind = "euclidean"

    def sigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        m = pts.shape[0]
        return np.broadcast_to(np.eye(self.dim), (m, self.dim, self.dim)).copy()

    def dsigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        return np.zeros((pts.shape[0], self.dim, self.dim, self.dim))


class ConformalProductMetric(ChartMetric):
    """phi^2(r) (sigma_flat + dr^2) with r the last chart coordinate."""

    kind = "conformal_product"

    def __init__(self, dim, phi, dphi, r_interval=None):
        super().__init__(dim)
        self.phi = phi
        self.dphi = dphi
        self.r_interval = r_interval

    def _check_warp(self, r):
        p = np.asarray(self.phi(r), dtype=float)
        if np.any(p <= 0):
            raise NonpositiveWarp("conformal factor must be positive")
        return p

    def sigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        p = self._check_warp(pts[:, -1])
        eye = np.eye(self.dim)
        return p[:, None, None] ** 2 * eye[None, :, :]

    def dsigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        r = pts[:, -1]
        p = self._check_warp(r)
        dp = np.asarray(self.dphi(r), dtype=float)
        out = np.zeros((pts.shape[0], self.dim, self.dim, self.dim))
        out[:, -1, :, :] = (2.0 * p * dp)[:, None, None] * np.eye(self.dim)[None]
        return out


class SphericalWarpedMetric(ChartMetric):
    """h^2(r) sigma_{n-1} + dr^2 written in Cartesian chart coordinates.

    sigma_ij = a(r) delta_ij + b(r) x_i x_j with a = (h/r)^2, b = (1 - a)/r^2.
    Charts containing the pole require h(r) = r near r = 0 (all shipped warps
    satisfy this), so the components are smooth at the origin.
    """

    kind = "spherical_warped"

    def __init__(self, dim, warp):
        super().__init__(dim)
        self.warp = warp

    def _ab(self, r):
        hr = self.warp.h_over_r(r)
        a = hr * hr
        safe = np.maximum(r, 1e-14)
        b = (1.0 - a) / safe**2
        b = np.where(r < 1e-13, 0.0, b)
        return a, b

    def sigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        r = np.linalg.norm(pts, axis=1)
        if np.any(self.warp.h(np.maximum(r, 1e-300)) <= 0):
            raise NonpositiveWarp("warp h must be positive for r > 0")
        a, b = self._ab(r)
        eye = np.eye(self.dim)
        return (a[:, None, None] * eye[None]
                + b[:, None, None] * pts[:, :, None] * pts[:, None, :])

    def dsigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        r = np.linalg.norm(pts, axis=1)
        safe = np.maximum(r, 1e-14)
        h = self.warp.h(safe)
        dh = self.warp.dh(safe)
        a, b = self._ab(r)
        # a' = 2 h (h' r - h) / r^3, b' = -(a' + 2 b r)/r^2  (radial derivatives)
        da = 2.0 * h * (dh * safe - h) / safe**3
        db = -(da + 2.0 * b * safe) / safe**2
        da = np.where(r < 1e-13, 0.0, da)
        db = np.where(r < 1e-13, 0.0, db)
        unit = pts / safe[:, None]
        eye = np.eye(self.dim)
        m = pts.shape[0]
        out = np.zeros((m, self.dim, self.dim, self.dim))
        out += (da[:, None] * unit)[:, :, None, None] * eye[None, None]
        out += ((db[:, None] * unit)[:, :, None, None]
                * pts[:, None, :, None] * pts[:, None, None, :])
        bp = b[:, None, None, None] * eye[None, :, :, None] * pts[:, None, None, :]
        out += bp + np.einsum("mkij->mkji", bp)
        return out


class GridSampledMetric(ChartMetric):
    """Metric known only by nodal samples on a uniform lattice.

    Components at arbitrary points come from bilinear interpolation and
    derivatives from centered differences of the samples; second derivatives
    are too noisy for curvature, so Ricci is unsupported for this kind.
    """

    kind = "grid_sampled"

    def __init__(self, origin, h, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 4 or values.shape[2] != values.shape[3]:
            raise ValueError("values must have shape (ny, nx, n, n)")
        super().__init__(values.shape[2])
        self.origin = np.asarray(origin, dtype=float)
        self.h = float(h)
        self.values = values

    @classmethod
    def from_function(cls, fn, origin, h, ny, nx, dim=2):
        xs = origin[0] + h * np.arange(nx)
        ys = origin[1] + h * np.arange(ny)
        X, Y = np.meshgrid(xs, ys)
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = fn(pts).reshape(ny, nx, dim, dim)
        return cls(origin, h, vals)

    def _locate(self, pts):
        rel = (pts - self.origin) / self.h
        iy = np.clip(np.floor(rel[:, 1]).astype(int), 0, self.values.shape[0] - 2)
        ix = np.clip(np.floor(rel[:, 0]).astype(int), 0, self.values.shape[1] - 2)
        fy = rel[:, 1] - iy
        fx = rel[:, 0] - ix
        return ix, iy, fx, fy

    def sigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        ix, iy, fx, fy = self._locate(pts)
        v = self.values
        w00 = ((1 - fx) * (1 - fy))[:, None, None]
        w10 = (fx * (1 - fy))[:, None, None]
        w01 = ((1 - fx) * fy)[:, None, None]
        w11 = (fx * fy)[:, None, None]
        return (w00 * v[iy, ix] + w10 * v[iy, ix + 1]
                + w01 * v[iy + 1, ix] + w11 * v[iy + 1, ix + 1])

    def dsigma(self, pts):
        pts = _atleast_2d_points(pts, self.dim)
        ny, nx = self.values.shape[:2]
        dx = np.gradient(self.values, self.h, axis=1)
        dy = np.gradient(self.values, self.h, axis=0)
        ix, iy, _, _ = self._locate(pts)
        out = np.zeros((pts.shape[0], self.dim, self.dim, self.dim))
        out[:, 0] = dx[iy, ix]
        out[:, 1] = dy[iy, ix]
        return out

    def christoffel(self, pts):
        return super().christoffel(pts)


def euclidean(dim=2):
    return EuclideanMetric(dim)


def euclidean_polar(dim=2):
    """Euclidean space as the spherical warp h(r) = r."""
    return SphericalWarpedMetric(dim, IdentityWarp())


# ---------------------------------------------------------------------------
# pointwise finite differences on callables

_FIVE_POINT = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_FIVE_POINT_2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def fd_gradient(fn, x, step=1e-4):
    """Five-point gradient of scalar fn at x (vectorized over components)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    pts = np.repeat(x[None, :], 4 * n, axis=0)
    for i in range(n):
        for s, off in enumerate((-2, -1, 1, 2)):
            pts[4 * i + s, i] += off * step
    vals = np.asarray(fn(pts), dtype=float)
    grad = np.empty(n)
    for i in range(n):
        f = vals[4 * i:4 * i + 4]
        grad[i] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * step)
    return grad


def fd_jacobian_vec(fn, x, step=1e-4):
    """d_i W^j for a vector-valued callable, shape (i, j)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    pts = np.repeat(x[None, :], 4 * n, axis=0)
    for i in range(n):
        for s, off in enumerate((-2, -1, 1, 2)):
            pts[4 * i + s, i] += off * step
    vals = np.asarray(fn(pts), dtype=float)
    out = np.empty((n, vals.shape[1]))
    for i in range(n):
        f = vals[4 * i:4 * i + 4]
        out[i] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * step)
    return out


def fd_hessian(fn, x, step=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    hess = np.empty((n, n))
    f0 = float(np.asarray(fn(x[None, :]))[0])
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        stencil = np.stack([x - 2 * ei, x - ei, x, x + ei, x + 2 * ei])
        f = np.asarray(fn(stencil), dtype=float)
        hess[i, i] = np.dot(_FIVE_POINT_2, f) / step**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = step
            quad = np.stack([x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej])
            f = np.asarray(fn(quad), dtype=float)
            hess[i, j] = hess[j, i] = (f[0] - f[1] - f[2] + f[3]) / (4 * step**2)
    _ = f0
    return hess


# ---------------------------------------------------------------------------
# covariant operators (pointwise, callable fields)


def covariant_divergence(metric, W, x, step=1e-4):
    """(1/sqrt det) d_i (sqrt det W^i) at x for a callable vector field W.

    W maps (m, n) points to (m, n) contravariant components.
    """
    x = np.asarray(x, dtype=float)

    def flux(pts):
        return metric.sqrt_det(pts)[:, None] * np.asarray(W(pts), dtype=float)

    jac = fd_jacobian_vec(flux, x, step)
    sd = metric.sqrt_det(x[None, :])[0]
    return float(np.trace(jac)) / sd


class GraphGeometry:
    """Pointwise geometry of the graph of u in the product chart x R."""

    __slots__ = ("omega", "theta", "normal", "induced_metric",
                 "induced_inverse", "second_form_sq", "mean_curvature")

    def __init__(self, omega, theta, normal, induced_metric, induced_inverse,
                 second_form_sq, mean_curvature):
        self.omega = omega
        self.theta = theta
        self.normal = normal
        self.induced_metric = induced_metric
        self.induced_inverse = induced_inverse
        self.second_form_sq = second_form_sq
        self.mean_curvature = mean_curvature


def graph_algebra(sigma, sigma_inv, du, hess_cov):
    """Graph quantities from covariant data at one point or an array.

    du: (..., n) covariant gradient components u_i;
    hess_cov: (..., n, n) covariant Hessian u_{;ij}.
    Returns dict with omega, theta, X (= -Du/omega contravariant), g, g_inv,
    shape operator v^k_i = (1/omega) g^{kl} u_{l i}, A2 = v^k_i v^i_k and
    H = div(Du/omega) = trace of the shape operator times omega... computed
    as tr(v) (these coincide: H = g^{kl} u_{kl} / omega).
    """
    u_up = np.einsum("...ij,...j->...i", sigma_inv, du)
    grad_sq = np.einsum("...i,...i->...", u_up, du)
    omega = np.sqrt(1.0 + grad_sq)
    theta = 1.0 / omega
    g = sigma + du[..., :, None] * du[..., None, :]
    g_inv = (sigma_inv
             - u_up[..., :, None] * u_up[..., None, :] / omega[..., None, None] ** 2)
    v = np.einsum("...kl,...li->...ki", g_inv, hess_cov) / omega[..., None, None]
    a2 = np.einsum("...ki,...ik->...", v, v)
    h = np.einsum("...kk->...", v)
    return {"omega": omega, "theta": theta, "u_up": u_up, "g": g,
            "g_inv": g_inv, "shape": v, "A2": a2, "H": h}


def graph_geometry(metric, u, x, step=1e-4):
    """GraphGeometry of a callable scalar field u at point x."""
    x = np.asarray(x, dtype=float)
    du = fd_gradient(u, x, step)
    hess = fd_hessian(u, x, step)
    gamma = metric.christoffel(x[None, :])[0]
    hess_cov = hess - np.einsum("kij,k->ij", gamma, du)
    sig = metric.sigma(x[None, :])[0]
    inv = metric.inverse(x[None, :])[0]
    q = graph_algebra(sig, inv, du, hess_cov)

    # H assembled along the covariant_divergence path so the two agree exactly
    def flux_field(pts):
        m = pts.shape[0]
        out = np.empty((m, x.size))
        sinv = metric.inverse(pts)
        for k in range(m):
            duk = fd_gradient(u, pts[k], step)
            up = sinv[k] @ duk
            out[k] = up / np.sqrt(1.0 + up @ duk)
        return out

    h_div = covariant_divergence(metric, flux_field, x, step)
    normal = np.concatenate([-q["u_up"] / q["omega"], [q["theta"]]])
    return GraphGeometry(
        omega=float(q["omega"]), theta=float(q["theta"]), normal=normal,
        induced_metric=q["g"], induced_inverse=q["g_inv"],
        second_form_sq=float(q["A2"]), mean_curvature=h_div,
    )


def slice_mean_curvature(phi, dphi, n, t):
    """Mean curvature n phi'(t)/phi^2(t) of the slice N_t in phi^2(sigma+dr^2)."""
    p = float(phi(t))
    if p <= 0:
        raise NonpositiveWarp(f"phi({t}) = {p} <= 0")
    return n * float(dphi(t)) / p**2


def boundary_mean_curvature(domain, metric, y, step=1e-4, force_numeric=False):
    """div of the outward unit normal -Dd/|Dd| at boundary point y.

    Uses the domain's analytic boundary curvature when available unless
    force_numeric is set.
    """
    if not force_numeric and domain.H_boundary is not None:
        return float(domain.H_boundary(np.asarray(y, dtype=float)))
    y = np.asarray(y, dtype=float)
    if domain.collar_width is not None and domain.collar_width < 4 * step:
        raise CollarTooThin(
            f"stencil width {4 * step} exceeds collar {domain.collar_width}")

    def normal_field(pts):
        m = pts.shape[0]
        out = np.empty((m, y.size))
        sinv = metric.inverse(pts)
        sig = metric.sigma(pts)
        for k in range(m):
            dd = fd_gradient(domain.d, pts[k], step)
            up = sinv[k] @ dd
            nrm = np.sqrt(up @ sig[k] @ up)
            out[k] = -up / nrm
        return out

    return covariant_divergence(metric, normal_field, y, step)


# ---------------------------------------------------------------------------
# curvature sampling


def ricci_tensor(metric, x, step=1e-3):
    """Ric_ij at x via five-point differences of the analytic Christoffels."""
    if metric.kind == "grid_sampled":
        raise UnsupportedMetricKind("Ricci needs analytic metric components")
    x = np.asarray(x, dtype=float)
    n = x.size
    dgamma = np.empty((n, n, n, n))  # d_m Gamma^k_ij
    for mydx in range(n):
        e = np.zeros(n)
        e[mydx] = step
        stencil = np.stack([x - 2 * e, x - e, x + e, x + 2 * e])
        g = metric.christoffel(stencil)
        dgamma[mydx] = (g[0] - 8 * g[1] + 8 * g[2] - g[3]) / (12 * step)
    gamma = metric.christoffel(x[None, :])[0]
    # Ric_sn = d_m Gamma^m_ns - d_n Gamma^m_ms
    #          + Gamma^m_ml Gamma^l_ns - Gamma^m_nl Gamma^l_ms
    term1 = np.einsum("mmns->ns", dgamma)
    term2 = np.einsum("nmms->ns", dgamma)
    trace_gamma = np.einsum("mml->l", gamma)
    term3 = np.einsum("l,lns->ns", trace_gamma, gamma)
    term4 = np.einsum("mnl,lms->ns", gamma, gamma)
    return term1 - term2 + term3 - term4


def unit_directions(dim, count, seed=0):
    """Deterministic low-discrepancy directions on the Euclidean unit sphere."""
    j = np.arange(count) + 1 + seed * count
    if dim == 2:
        ang = 2.0 * np.pi * np.mod(j * GOLDEN, 1.0)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if dim == 3:
        z = 1.0 - 2.0 * (j - 0.5) / count
        ang = 2.0 * np.pi * np.mod(j * GOLDEN, 1.0)
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        return np.stack([rho * np.cos(ang), rho * np.sin(ang), z], axis=1)
    # van der Corput lattice, then normalize
    vals = np.stack([np.mod(j * (GOLDEN ** (k + 1)), 1.0) - 0.5
                     for k in range(dim)], axis=1)
    return vals / np.linalg.norm(vals, axis=1, keepdims=True)


def metric_unit_directions(metric, x, count, seed=0):
    """Directions with sigma(e, e) = 1 via the Gram factor of sigma(x)."""
    sig = metric.sigma(np.asarray(x, dtype=float)[None, :])[0]
    chol = np.linalg.cholesky(sig)
    dirs = unit_directions(metric.dim, count, seed)
    return np.linalg.solve(chol.T[None, :, :], dirs[:, :, None])[:, :, 0]


def ricci_min_estimate(metric, domain, samples=64, directions=16, seed=0,
                       step=1e-3):
    """min over sampled points and sigma-unit directions of Ric(e, e)."""
    if metric.kind == "grid_sampled":
        raise UnsupportedMetricKind("Ricci unsupported for grid_sampled metrics")
    if samples < 1:
        raise ValueError("samples >= 1 required")
    pts = domain.sample_points(samples, seed=seed)
    worst = np.inf
    for x in pts:
        ric = ricci_tensor(metric, x, step)
        dirs = metric_unit_directions(metric, x, directions, seed)
        vals = np.einsum("ij,mi,mj->m", ric, dirs, dirs)
        worst = min(worst, float(vals.min()))
    return worst
