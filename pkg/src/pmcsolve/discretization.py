"""Finite-difference assembly of the regularized PMC residual.

The divergence term is assembled in flux-conservative form: face fluxes
sqrt(det sigma) * sigma^{ij} u_j / omega are differenced across each node,
which is the centered second-order scheme for (1/sqrt det) d_i(sqrt det W^i)
and reduces exactly to the flux form (J u'/omega)' = J rhs on radial meshes.

Dirichlet data on embedded (cut-cell) boundaries enters through ghost nodes
set by first-order (linear) interpolation along grid lines through the
boundary crossing, so ghost values are affine in one interior unknown; the
dependency is part of the residual and therefore of the colored Jacobian.

omega is never clamped; non-finite values raise DivergedField so impending
blow-up stays observable.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DivergedField, NotRadial
from .quadrature import adaptive_simpson

THETA_FLOOR = 1e-3  # shortest admitted boundary-crossing fraction


# ---------------------------------------------------------------------------
# fields


@dataclass
class Field:
    """Scalar values on a structured layout plus Dirichlet boundary data."""

    layout: object
    values: np.ndarray
    boundary_values: np.ndarray  # psi at ghost interpolation points
    psi: object = None

    def copy(self):
        return Field(self.layout, self.values.copy(),
                     self.boundary_values, self.psi)

    def with_values(self, values):
        return Field(self.layout, values, self.boundary_values, self.psi)

    def packed(self):
        return self.layout.pack(self.values)

    def sup(self):
        return float(np.max(np.abs(self.packed())))

    def finite(self):
        return bool(np.all(np.isfinite(self.packed())))

    @property
    def diverged(self):
        return not self.finite()


def make_field(layout, psi=None):
    """Zero interior field with boundary data sampled from psi."""
    values = np.zeros(layout.shape)
    bvals = layout.psi_samples(psi)
    f = Field(layout, values, bvals, psi)
    layout.sync_ghosts(f.values, bvals)
    if psi is not None and layout.has_boundary:
        again = layout.psi_samples(psi)
        if not np.allclose(again, bvals, rtol=0, atol=0):
            raise ValueError("boundary values inconsistent with psi")
    return f


# ---------------------------------------------------------------------------
# 2d grids (Dirichlet cut-cell and periodic)


def _erode(mask, times=1):
    """Shrink a boolean mask by 8-neighborhood erosion."""
    m = mask.copy()
    for _ in range(times):
        inner = m.copy()
        inner[1:, :] &= m[:-1, :]
        inner[:-1, :] &= m[1:, :]
        inner[:, 1:] &= m[:, :-1]
        inner[:, :-1] &= m[:, 1:]
        inner[1:, 1:] &= m[:-1, :-1]
        inner[:-1, :-1] &= m[1:, 1:]
        inner[1:, :-1] &= m[:-1, 1:]
        inner[:-1, 1:] &= m[1:, :-1]
        inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
        m = inner
    return m


class Grid2D:
    """Cell-vertex grid embedding a Dirichlet chart domain in its box."""

    periodic = False
    has_boundary = True
    kind = "grid2d"

    def __init__(self, domain, h, pad=3):
        if domain.metric.dim != 2:
            raise ValueError("grid2d supports 2d charts")
        self.domain = domain
        self.metric = domain.metric
        self.h = float(h)
        lo, hi = domain.bounding_box()
        lo = np.asarray(lo, float) - pad * self.h
        self.nx = int(round((hi[0] - lo[0] + pad * self.h) / self.h)) + 1
        self.ny = int(round((hi[1] - lo[1] + pad * self.h) / self.h)) + 1
        self.origin = lo
        xs = lo[0] + self.h * np.arange(self.nx)
        ys = lo[1] + self.h * np.arange(self.ny)
        X, Y = np.meshgrid(xs, ys)
        self.pts = np.stack([X, Y], axis=-1)          # (ny, nx, 2)
        self.shape = (self.ny, self.nx)
        flat_pts = self.pts.reshape(-1, 2)
        self.interior = domain.inside(flat_pts).reshape(self.shape)
        if not self.interior.any():
            raise ValueError("no interior nodes; refine the grid")
        self._build_ghosts()
        self._build_metric_arrays()
        self._build_indexing()
        self._coloring = None

    # -- construction pieces -------------------------------------------------

    def _build_ghosts(self):
        inter = self.interior
        near = np.zeros_like(inter)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                shifted = np.zeros_like(inter)
                ys = slice(max(dy, 0), self.ny + min(dy, 0))
                yd = slice(max(-dy, 0), self.ny + min(-dy, 0))
                xs = slice(max(dx, 0), self.nx + min(dx, 0))
                xd = slice(max(-dx, 0), self.nx + min(-dx, 0))
                shifted[yd, xd] = inter[ys, xs]
                near |= shifted
        ghost_mask = near & ~inter
        self.ghost_mask = ghost_mask
        g_iy, g_ix = np.nonzero(ghost_mask)
        flats, partners, alphas, bpts = [], [], [], []
        for iy, ix in zip(g_iy, g_ix):
            x_g = self.pts[iy, ix]
            best = None
            for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                jy, jx = iy + dy, ix + dx
                if 0 <= jy < self.ny and 0 <= jx < self.nx \
                        and inter[jy, jx]:
                    x_i = self.pts[jy, jx]
                    x_b = self.domain.boundary_crossing(x_i, x_g)
                    theta = np.linalg.norm(x_b - x_i) / self.h
                    if best is None or theta > best[0]:
                        best = (theta, jy * self.nx + jx, x_b)
            flats.append(iy * self.nx + ix)
            if best is None:
                # diagonal-only ghost: nearest-boundary Dirichlet value
                x_b = self.domain.project_boundary(x_g[None, :])[0]
                partners.append(-1)
                alphas.append(0.0)
                bpts.append(x_b)
            else:
                theta = max(best[0], THETA_FLOOR)
                partners.append(best[1])
                alphas.append(1.0 - 1.0 / theta)
                bpts.append(best[2])
        self.ghost_flat = np.asarray(flats, dtype=int)
        self.ghost_partner = np.asarray(partners, dtype=int)
        self.ghost_alpha = np.asarray(alphas, dtype=float)
        self.ghost_bpts = (np.asarray(bpts, dtype=float)
                           if bpts else np.zeros((0, 2)))
        theta_arr = np.where(self.ghost_partner >= 0,
                             1.0 / np.maximum(1.0 - self.ghost_alpha, 1e-300),
                             1.0)
        self._ghost_theta = theta_arr

    def _build_metric_arrays(self):
        met = self.metric
        flat = self.pts.reshape(-1, 2)
        self.inv_node = met.inverse(flat).reshape(self.ny, self.nx, 2, 2)
        self.sqrtdet_node = met.sqrt_det(flat).reshape(self.shape)
        fx = self.pts[:, :-1, :] + np.array([self.h / 2, 0.0])
        fy = self.pts[:-1, :, :] + np.array([0.0, self.h / 2])
        fxf = fx.reshape(-1, 2)
        fyf = fy.reshape(-1, 2)
        self.inv_fx = met.inverse(fxf).reshape(self.ny, self.nx - 1, 2, 2)
        self.sd_fx = met.sqrt_det(fxf).reshape(self.ny, self.nx - 1)
        self.inv_fy = met.inverse(fyf).reshape(self.ny - 1, self.nx, 2, 2)
        self.sd_fy = met.sqrt_det(fyf).reshape(self.ny - 1, self.nx)
        if met.kind in ("euclidean",):
            self.gamma_node = None
        else:
            self.gamma_node = met.christoffel(flat).reshape(
                self.ny, self.nx, 2, 2, 2)

    def _build_indexing(self):
        self.unknown_flat = np.flatnonzero(self.interior.ravel())
        self.n_unknown = self.unknown_flat.size
        self.col_of_flat = -np.ones(self.ny * self.nx, dtype=int)
        self.col_of_flat[self.unknown_flat] = np.arange(self.n_unknown)
        # interior nodes sit strictly inside the padded box
        iy, ix = np.nonzero(self.interior)
        if (iy.min() < 2 or ix.min() < 2
                or iy.max() > self.ny - 3 or ix.max() > self.nx - 3):
            raise ValueError("padding too small for the stencil")
        self.interior_pts = self.pts.reshape(-1, 2)[self.unknown_flat]

    # -- ghost/boundary data -------------------------------------------------

    def psi_samples(self, psi):
        if psi is None:
            if self.ghost_flat.size:
                return np.zeros(self.ghost_flat.size)
            return np.zeros(0)
        return np.asarray(psi(self.ghost_bpts), float)

    def sync_ghosts(self, values, bvals):
        flat = values.ravel()
        theta = self._ghost_theta
        sw = self.ghost_partner >= 0
        beta = np.where(sw, bvals / theta, bvals)
        contrib = np.zeros_like(beta)
        contrib[sw] = self.ghost_alpha[sw] * flat[self.ghost_partner[sw]]
        flat[self.ghost_flat] = contrib + beta

    def pack(self, values):
        return values.ravel()[self.unknown_flat]

    def unpack(self, vec, bvals):
        values = np.zeros(self.ny * self.nx)
        values[self.unknown_flat] = vec
        values = values.reshape(self.shape)
        self.sync_ghosts(values, bvals)
        return values

    # -- differential operators ----------------------------------------------

    def gradients(self, values):
        """Centered first derivatives (ny, nx, 2); outer ring is garbage."""
        du = np.zeros(self.shape + (2,))
        du[:, 1:-1, 0] = (values[:, 2:] - values[:, :-2]) / (2 * self.h)
        du[1:-1, :, 1] = (values[2:, :] - values[:-2, :]) / (2 * self.h)
        return du

    def hessians(self, values):
        h = self.h
        dd = np.zeros(self.shape + (2, 2))
        dd[:, 1:-1, 0, 0] = (values[:, 2:] - 2 * values[:, 1:-1]
                             + values[:, :-2]) / h**2
        dd[1:-1, :, 1, 1] = (values[2:, :] - 2 * values[1:-1, :]
                             + values[:-2, :]) / h**2
        dd[1:-1, 1:-1, 0, 1] = (values[2:, 2:] - values[2:, :-2]
                                - values[:-2, 2:] + values[:-2, :-2]) / (4 * h**2)
        dd[:, :, 1, 0] = dd[:, :, 0, 1]
        return dd

    def covariant_divergence_of(self, W):
        """(1/sqrt det) d_i(sqrt det W^i) by centered differences at nodes."""
        flux = self.sqrtdet_node[..., None] * W
        div = np.zeros(self.shape)
        div[:, 1:-1] += (flux[:, 2:, 0] - flux[:, :-2, 0]) / (2 * self.h)
        div[1:-1, :] += (flux[2:, :, 1] - flux[:-2, :, 1]) / (2 * self.h)
        return div / self.sqrtdet_node

    def interior_eroded(self, depth):
        return _erode(self.interior, depth)

    def monitored_mask(self, frac=0.1):
        d = self.domain.d(self.pts.reshape(-1, 2)).reshape(self.shape)
        return self.interior & (d >= frac * self.domain.diam)

    def gradient_norms(self, values):
        du = self.gradients(values)
        sq = np.einsum("yxij,yxi,yxj->yx", self.inv_node, du, du)
        return np.sqrt(np.maximum(sq, 0.0))

    # -- residual ------------------------------------------------------------

    def residual_full(self, problem, values, bvals):
        u = values
        h = self.h
        if not np.all(np.isfinite(u.ravel()[self.unknown_flat])):
            raise DivergedField("field contains non-finite values")
        self.sync_ghosts(u, bvals)

        # x-faces: (ny, nx-1)
        dux = (u[:, 1:] - u[:, :-1]) / h
        duy = np.zeros_like(dux)
        duy[1:-1, :] = (u[2:, 1:] + u[2:, :-1] - u[:-2, 1:] - u[:-2, :-1]) \
            / (4 * h)
        wx = self.inv_fx[..., 0, 0] * dux + self.inv_fx[..., 0, 1] * duy
        wy = self.inv_fx[..., 1, 0] * dux + self.inv_fx[..., 1, 1] * duy
        omf = np.sqrt(1.0 + wx * dux + wy * duy)
        flux_x = self.sd_fx * wx / omf

        # y-faces: (ny-1, nx)
        duy2 = (u[1:, :] - u[:-1, :]) / h
        dux2 = np.zeros_like(duy2)
        dux2[:, 1:-1] = (u[1:, 2:] + u[:-1, 2:] - u[1:, :-2] - u[:-1, :-2]) \
            / (4 * h)
        wx2 = self.inv_fy[..., 0, 0] * dux2 + self.inv_fy[..., 0, 1] * duy2
        wy2 = self.inv_fy[..., 1, 0] * dux2 + self.inv_fy[..., 1, 1] * duy2
        omf2 = np.sqrt(1.0 + wx2 * dux2 + wy2 * duy2)
        flux_y = self.sd_fy * wy2 / omf2

        div = np.zeros(self.shape)
        div[:, 1:-1] = (flux_x[:, 1:] - flux_x[:, :-1]) / h
        div[1:-1, :] += (flux_y[1:, :] - flux_y[:-1, :]) / h
        div /= self.sqrtdet_node

        # node-centered data for the zeroth/first order terms
        du = self.gradients(u)
        flat = self.unknown_flat
        du_p = du.reshape(-1, 2)[flat]
        inv_p = self.inv_node.reshape(-1, 2, 2)[flat]
        up_p = np.einsum("mij,mj->mi", inv_p, du_p)
        om_p = np.sqrt(1.0 + np.einsum("mi,mi->m", up_p, du_p))
        X_p = -up_p / om_p[:, None]
        r_p = 1.0 / om_p
        u_p = u.ravel()[flat]
        pts_p = self.interior_pts
        Fv = np.asarray(problem.F(pts_p, X_p, r_p), float)
        phiv = np.asarray(problem.phi(pts_p, u_p, X_p, r_p), float)
        res_p = (-div.ravel()[flat] - Fv
                 + (phiv + problem.t * u_p) * r_p)
        if not np.all(np.isfinite(res_p)):
            raise DivergedField("residual contains non-finite values")
        out = np.zeros(self.shape)
        out.ravel()[flat] = res_p
        return out

    # -- coloring ------------------------------------------------------------

    def coloring(self):
        """Static (ix mod 5, iy mod 5) coloring: dependencies span <= 2."""
        if self._coloring is not None:
            return self._coloring
        iy, ix = np.unravel_index(self.unknown_flat, self.shape)
        color = (ix % 5) + 5 * (iy % 5)
        deps = self._dependency_lists()
        self._coloring = _group_columns(color, 25, deps, self.col_of_flat)
        return self._coloring

    def _dependency_lists(self):
        """For each unknown row, the unknown columns its residual touches."""
        partner_of = {int(g): int(p) for g, p in
                      zip(self.ghost_flat, self.ghost_partner) if p >= 0}
        deps = []
        for flat in self.unknown_flat:
            iy, ix = divmod(int(flat), self.nx)
            cols = set()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    nb = (iy + dy) * self.nx + (ix + dx)
                    c = self.col_of_flat[nb]
                    if c >= 0:
                        cols.add(int(c))
                    elif nb in partner_of:
                        cols.add(int(self.col_of_flat[partner_of[nb]]))
            deps.append(sorted(cols))
        return deps


class PeriodicGrid2D(Grid2D):
    """Flat-torus grid: every node is an unknown, neighbors wrap."""

    periodic = True
    has_boundary = False
    kind = "grid_periodic"

    def __init__(self, domain, n_nodes):
        if domain.shape != "box_periodic":
            raise ValueError("periodic grid requires box_periodic domain")
        self.domain = domain
        self.metric = domain.metric
        self.nx = self.ny = int(n_nodes)
        self.h = domain.length / self.nx
        self.origin = np.zeros(2)
        xs = self.h * np.arange(self.nx)
        X, Y = np.meshgrid(xs, xs)
        self.pts = np.stack([X, Y], axis=-1)
        self.shape = (self.ny, self.nx)
        self.interior = np.ones(self.shape, dtype=bool)
        self.ghost_flat = np.zeros(0, dtype=int)
        self.ghost_partner = np.zeros(0, dtype=int)
        self.ghost_alpha = np.zeros(0)
        self.ghost_bpts = np.zeros((0, 2))
        self._ghost_theta = np.zeros(0)
        self._build_metric_arrays()
        self.unknown_flat = np.arange(self.nx * self.ny)
        self.n_unknown = self.unknown_flat.size
        self.col_of_flat = np.arange(self.nx * self.ny)
        self.interior_pts = self.pts.reshape(-1, 2)
        self._coloring = None

    def psi_samples(self, psi):
        return np.zeros(0)

    def sync_ghosts(self, values, bvals):
        pass

    def unpack(self, vec, bvals):
        return vec.reshape(self.shape).copy()

    def _roll(self, a, dy, dx):
        return np.roll(np.roll(a, -dy, axis=0), -dx, axis=1)

    def gradients(self, values):
        du = np.empty(self.shape + (2,))
        du[..., 0] = (self._roll(values, 0, 1) - self._roll(values, 0, -1)) \
            / (2 * self.h)
        du[..., 1] = (self._roll(values, 1, 0) - self._roll(values, -1, 0)) \
            / (2 * self.h)
        return du

    def hessians(self, values):
        h = self.h
        dd = np.empty(self.shape + (2, 2))
        dd[..., 0, 0] = (self._roll(values, 0, 1) - 2 * values
                         + self._roll(values, 0, -1)) / h**2
        dd[..., 1, 1] = (self._roll(values, 1, 0) - 2 * values
                         + self._roll(values, -1, 0)) / h**2
        dd[..., 0, 1] = (self._roll(values, 1, 1) - self._roll(values, 1, -1)
                         - self._roll(values, -1, 1)
                         + self._roll(values, -1, -1)) / (4 * h**2)
        dd[..., 1, 0] = dd[..., 0, 1]
        return dd

    def covariant_divergence_of(self, W):
        flux = self.sqrtdet_node[..., None] * W
        div = (self._roll(flux[..., 0], 0, 1)
               - self._roll(flux[..., 0], 0, -1)
               + self._roll(flux[..., 1], 1, 0)
               - self._roll(flux[..., 1], -1, 0)) / (2 * self.h)
        return div / self.sqrtdet_node

    def interior_eroded(self, depth):
        return self.interior

    def monitored_mask(self, frac=0.1):
        return self.interior

    def _build_metric_arrays(self):
        met = self.metric
        flat = self.pts.reshape(-1, 2)
        self.inv_node = met.inverse(flat).reshape(self.ny, self.nx, 2, 2)
        self.sqrtdet_node = met.sqrt_det(flat).reshape(self.shape)
        fx = self.pts + np.array([self.h / 2, 0.0])
        fy = self.pts + np.array([0.0, self.h / 2])
        self.inv_fx = met.inverse(fx.reshape(-1, 2)).reshape(
            self.ny, self.nx, 2, 2)
        self.sd_fx = met.sqrt_det(fx.reshape(-1, 2)).reshape(self.shape)
        self.inv_fy = met.inverse(fy.reshape(-1, 2)).reshape(
            self.ny, self.nx, 2, 2)
        self.sd_fy = met.sqrt_det(fy.reshape(-1, 2)).reshape(self.shape)
        if met.kind in ("euclidean",):
            self.gamma_node = None
        else:
            self.gamma_node = met.christoffel(flat).reshape(
                self.ny, self.nx, 2, 2, 2)

    def residual_full(self, problem, values, bvals):
        u = values
        h = self.h
        if not np.all(np.isfinite(u)):
            raise DivergedField("field contains non-finite values")
        # x-faces between node and +x neighbor
        up1 = self._roll(u, 0, 1)
        dux = (up1 - u) / h
        duy = (self._roll(u, 1, 0) + self._roll(up1, 1, 0)
               - self._roll(u, -1, 0) - self._roll(up1, -1, 0)) / (4 * h)
        wx = self.inv_fx[..., 0, 0] * dux + self.inv_fx[..., 0, 1] * duy
        wy = self.inv_fx[..., 1, 0] * dux + self.inv_fx[..., 1, 1] * duy
        flux_x = self.sd_fx * wx / np.sqrt(1.0 + wx * dux + wy * duy)

        vp1 = self._roll(u, 1, 0)
        duy2 = (vp1 - u) / h
        dux2 = (self._roll(u, 0, 1) + self._roll(vp1, 0, 1)
                - self._roll(u, 0, -1) - self._roll(vp1, 0, -1)) / (4 * h)
        wx2 = self.inv_fy[..., 0, 0] * dux2 + self.inv_fy[..., 0, 1] * duy2
        wy2 = self.inv_fy[..., 1, 0] * dux2 + self.inv_fy[..., 1, 1] * duy2
        flux_y = self.sd_fy * wy2 / np.sqrt(1.0 + wx2 * dux2 + wy2 * duy2)

        div = ((flux_x - self._roll(flux_x, 0, -1))
               + (flux_y - self._roll(flux_y, -1, 0))) / h
        div /= self.sqrtdet_node

        du = self.gradients(u)
        up = np.einsum("yxij,yxj->yxi", self.inv_node, du)
        om = np.sqrt(1.0 + np.einsum("yxi,yxi->yx", up, du))
        X = (-up / om[..., None]).reshape(-1, 2)
        r = (1.0 / om).ravel()
        pts = self.interior_pts
        u_f = u.ravel()
        Fv = np.asarray(problem.F(pts, X, r), float)
        phiv = np.asarray(problem.phi(pts, u_f, X, r), float)
        res = -div.ravel() - Fv + (phiv + problem.t * u_f) * r
        if not np.all(np.isfinite(res)):
            raise DivergedField("residual contains non-finite values")
        return res.reshape(self.shape)

    def coloring(self):
        if self._coloring is not None:
            return self._coloring
        deps = self._dependency_lists()
        color = _greedy_coloring(self.n_unknown, deps)
        self._coloring = _group_columns(color, color.max() + 1, deps,
                                        self.col_of_flat)
        return self._coloring

    def _dependency_lists(self):
        deps = []
        for flat in range(self.n_unknown):
            iy, ix = divmod(flat, self.nx)
            cols = set()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    cols.add(((iy + dy) % self.ny) * self.nx
                             + ((ix + dx) % self.nx))
            deps.append(sorted(cols))
        return deps


class RadialGrid:
    """Cell-centered radial mesh on [0, r_max] for spherical warped charts.

    Nodes sit at (j+1/2) dr so the pole face carries zero area J(0) = 0 and
    needs no special casing; the outer Dirichlet value enters through a
    mirrored ghost cell.
    """

    periodic = False
    has_boundary = True
    kind = "radial"

    def __init__(self, domain, nr):
        if domain.shape != "polar_cap":
            raise ValueError("radial layout requires a polar_cap domain")
        self.domain = domain
        self.metric = domain.metric
        self.warp = domain.metric.warp
        self.n = domain.metric.dim
        self.nr = int(nr)
        self.r_max = domain.r_max
        self.dr = self.r_max / self.nr
        self.r = (np.arange(self.nr) + 0.5) * self.dr
        self.r_faces = np.arange(self.nr + 1) * self.dr
        self.J_faces = np.asarray(self.warp.h(self.r_faces), float) \
            ** (self.n - 1)
        self.J_nodes = np.asarray(self.warp.h(self.r), float) ** (self.n - 1)
        self.shape = (self.nr,)
        self.interior = np.ones(self.nr, dtype=bool)
        self.unknown_flat = np.arange(self.nr)
        self.n_unknown = self.nr
        self.col_of_flat = np.arange(self.nr)
        pts = np.zeros((self.nr, self.n))
        pts[:, 0] = self.r
        self.interior_pts = pts
        self._coloring = None

    def psi_samples(self, psi):
        if psi is None:
            return np.zeros(1)
        pt = np.zeros((1, self.n))
        pt[0, 0] = self.r_max
        return np.asarray(psi(pt), float)

    def sync_ghosts(self, values, bvals):
        pass

    def pack(self, values):
        return values

    def unpack(self, vec, bvals):
        return vec.copy()

    def _extended(self, u, bvals):
        # mirror at the pole, linear Dirichlet ghost at r_max
        return np.concatenate([[u[0]], u, [2.0 * bvals[0] - u[-1]]])

    def residual_full(self, problem, values, bvals):
        u = values
        if not np.all(np.isfinite(u)):
            raise DivergedField("field contains non-finite values")
        ext = self._extended(u, bvals)
        s = (ext[1:] - ext[:-1]) / self.dr            # faces 0..nr
        flux = self.J_faces * s / np.sqrt(1.0 + s * s)
        div = (flux[1:] - flux[:-1]) / (self.dr * self.J_nodes)
        du = (ext[2:] - ext[:-2]) / (2 * self.dr)
        om = np.sqrt(1.0 + du * du)
        X = np.zeros((self.nr, self.n))
        X[:, 0] = -du / om
        r_arg = 1.0 / om
        Fv = np.asarray(problem.F(self.interior_pts, X, r_arg), float)
        phiv = np.asarray(problem.phi(self.interior_pts, u, X, r_arg), float)
        res = -div - Fv + (phiv + problem.t * u) * r_arg
        if not np.all(np.isfinite(res)):
            raise DivergedField("residual contains non-finite values")
        return res

    def gradients(self, values):
        ext = self._extended(values, np.array([values[-1]]))
        du = (ext[2:] - ext[:-2]) / (2 * self.dr)
        # one-sided at the outer cell so steep walls register fully
        du[-1] = (values[-1] - values[-2]) / self.dr
        return du

    def gradient_norms(self, values):
        return np.abs(self.gradients(values))

    def interior_eroded(self, depth):
        m = self.interior.copy()
        if depth > 0:
            m[-depth:] = False
        return m

    def monitored_mask(self, frac=0.1):
        return self.r <= self.r_max * (1.0 - frac)

    def shape_A2(self, values):
        """|A|^2 of the rotationally symmetric graph: radial plus tangential
        principal curvatures (u'/omega)' ... computed as u''/omega^3 and
        (h'/h)(u'/omega)."""
        du = self.gradients(values)
        ext = self._extended(values, np.array([values[-1]]))
        ddu = (ext[2:] - 2.0 * ext[1:-1] + ext[:-2]) / self.dr**2
        om = np.sqrt(1.0 + du * du)
        kr = ddu / om**3
        growth = np.asarray(self.warp.dh(self.r), float) \
            / np.asarray(self.warp.h(self.r), float)
        kt = growth * du / om
        return kr * kr + (self.n - 1) * kt * kt

    def coloring(self):
        if self._coloring is not None:
            return self._coloring
        color = np.arange(self.nr) % 5
        deps = [sorted({max(j - 1, 0), j, min(j + 1, self.nr - 1)})
                for j in range(self.nr)]
        self._coloring = _group_columns(color, 5, deps, self.col_of_flat)
        return self._coloring


# ---------------------------------------------------------------------------
# column grouping and Jacobians


def _greedy_coloring(n_cols, deps):
    """Distance-2 greedy coloring from row dependency lists."""
    neighbors = [set() for _ in range(n_cols)]
    for cols in deps:
        for a in cols:
            neighbors[a].update(cols)
    color = -np.ones(n_cols, dtype=int)
    for j in range(n_cols):
        used = {color[k] for k in neighbors[j] if color[k] >= 0}
        c = 0
        while c in used:
            c += 1
        color[j] = c
    return color


def _group_columns(color, n_colors, deps, col_of_flat):
    """Per color: member columns plus the (row, col) pairs it determines."""
    groups = []
    row_lists = [[] for _ in range(n_colors)]
    col_lists = [[] for _ in range(n_colors)]
    for row, cols in enumerate(deps):
        for c in cols:
            k = color[c]
            row_lists[k].append(row)
            col_lists[k].append(c)
    for k in range(n_colors):
        members = np.flatnonzero(color == k)
        groups.append((members,
                       np.asarray(row_lists[k], dtype=int),
                       np.asarray(col_lists[k], dtype=int)))
    return groups


@dataclass
class ResidualSystem:
    """Residual, colored finite-difference Jacobian and monotony metadata."""

    residual: np.ndarray          # full layout shape, zero off-interior
    jacobian: sp.csr_matrix      # unknowns x unknowns
    n_colors: int
    zeroth_diag: np.ndarray       # d/du of (phi + t u)/omega, frozen gradient
    diag_monotone: bool


def assemble_residual(problem, fld):
    """Node-wise residual of the regularized equation; boundary rows zero."""
    return fld.layout.residual_full(problem, fld.values, fld.boundary_values)


def _zeroth_order_diag(problem, layout, values, bvals):
    u = values
    if layout.kind == "radial":
        ext = layout._extended(u, bvals)
        du = (ext[2:] - ext[:-2]) / (2 * layout.dr)
        om = np.sqrt(1.0 + du * du)
        X = np.zeros((layout.nr, layout.n))
        X[:, 0] = -du / om
        u_p = u
        pts = layout.interior_pts
        r_p = 1.0 / om
    else:
        du = layout.gradients(u)
        flat = layout.unknown_flat
        du_p = du.reshape(-1, 2)[flat]
        inv_p = layout.inv_node.reshape(-1, 2, 2)[flat]
        up_p = np.einsum("mij,mj->mi", inv_p, du_p)
        om = np.sqrt(1.0 + np.einsum("mi,mi->m", up_p, du_p))
        X = -up_p / om[:, None]
        u_p = u.ravel()[flat]
        pts = layout.interior_pts
        r_p = 1.0 / om
    eps = 1e-7 * (1.0 + np.abs(u_p))
    p0 = np.asarray(problem.phi(pts, u_p, X, r_p), float)
    p1 = np.asarray(problem.phi(pts, u_p + eps, X, r_p), float)
    return ((p1 - p0) / eps + problem.t) * r_p


def assemble_jacobian(problem, fld):
    """Jacobian by graph-colored finite differences of the residual."""
    layout = fld.layout
    bvals = fld.boundary_values
    u0 = fld.values.copy()
    layout.sync_ghosts(u0, bvals)
    r0 = layout.pack(layout.residual_full(problem, u0, bvals))
    base = layout.pack(u0)
    eps = 1e-7 * (1.0 + np.abs(base))
    rows_all, cols_all, vals_all = [], [], []
    groups = layout.coloring()
    for members, rows, cols in groups:
        if members.size == 0:
            continue
        pert = base.copy()
        pert[members] += eps[members]
        u1 = layout.unpack(pert, bvals)
        r1 = layout.pack(layout.residual_full(problem, u1, bvals))
        diff = r1 - r0
        rows_all.append(rows)
        cols_all.append(cols)
        vals_all.append(diff[rows] / eps[cols])
    jac = sp.coo_matrix(
        (np.concatenate(vals_all),
         (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(layout.n_unknown, layout.n_unknown)).tocsr()
    zdiag = _zeroth_order_diag(problem, layout, u0, bvals)
    gn = layout.gradient_norms(u0)
    gn_int = gn[layout.interior] if gn.ndim == 2 else gn
    om_min_inv = float(np.min(1.0 / np.sqrt(1.0 + gn_int**2)))
    monotone = bool(np.all(zdiag >= problem.t * om_min_inv - 1e-10))
    res_full = np.zeros(layout.shape)
    if res_full.ndim == 1:
        res_full[layout.unknown_flat] = r0
    else:
        res_full.ravel()[layout.unknown_flat] = r0
    return ResidualSystem(residual=res_full, jacobian=jac,
                          n_colors=len(groups), zeroth_diag=zdiag,
                          diag_monotone=monotone)


# ---------------------------------------------------------------------------
# exact radial reduction


@dataclass
class RadialODE:
    """Flux form (J u'/omega)' = J rhs of a rotationally symmetric problem.

    J(r) = h^{n-1}(r) is the area density; Phi is the cumulative flux
    integral_0^r J rhs, evaluated by adaptive Simpson quadrature.
    """

    J: object
    RHS: object
    r_max: float
    n: int
    quad_tol: float = 1e-10

    def Phi(self, r):
        return adaptive_simpson(
            lambda s: float(self.J(s)) * float(self.RHS(s)),
            0.0, float(r), self.quad_tol)

    def ratio(self, r):
        if r <= 0:
            return 0.0
        j = float(self.J(r))
        if j == 0.0:
            return 0.0
        return self.Phi(r) / j


def radial_reduce(problem, metric, domain, probe_tol=1e-12):
    """Exact 1d reduction for rotationally symmetric data.

    Requires a spherical warped metric, F depending on position only through
    the radius (and not on the gradient slots), and phi identically zero.
    """
    if metric.kind != "spherical_warped":
        raise NotRadial("radial reduction needs a spherical_warped metric")
    n = metric.dim
    warp = metric.warp
    r_max = domain.r_max if hasattr(domain, "r_max") else domain.diam / 2

    probe_r = np.linspace(0.1 * r_max, 0.95 * r_max, 7)
    for r in probe_r:
        base = np.zeros((1, n))
        base[0, 0] = r
        rot = np.zeros((1, n))
        rot[0, 1] = r
        x_dir = np.zeros((1, n))
        x_dir[0, 0] = 0.5
        f_base = float(problem.F(base, np.zeros((1, n)), np.zeros(1)))
        checks = [
            float(problem.F(rot, np.zeros((1, n)), np.zeros(1))),
            float(problem.F(base, x_dir, np.zeros(1))),
            float(problem.F(base, np.zeros((1, n)), np.full(1, 0.7))),
        ]
        if any(abs(c - f_base) > probe_tol for c in checks):
            raise NotRadial("problem data is not radially symmetric")
        if abs(float(problem.phi(base, np.zeros(1), np.zeros((1, n)),
                                 np.ones(1)))) > probe_tol:
            raise NotRadial("phi must vanish for the exact reduction")

    def J(r):
        return float(warp.h(r)) ** (n - 1)

    def RHS(r):
        pt = np.zeros((1, n))
        pt[0, 0] = r
        return -float(problem.F(pt, np.zeros((1, n)), np.zeros(1)))

    return RadialODE(J=J, RHS=RHS, r_max=float(r_max), n=n)
