"""Independent analytic and quadrature truths the solver is tested against.

The spherical cap is the workhorse closed-form solution; the radial flux
analysis certifies nonexistence by locating where the cumulative source flux
saturates the available area density, which forces |u'| -> infinity.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import discretization as disc
from . import geometry, solver
from .discretization import RadialODE  # re-export: radial reduction target
from .errors import HypothesisFailed, NotASolution
from .problems import serrin_condition_check
from .quadrature import adaptive_simpson, cumulative

__all__ = [
    "RadialODE", "spherical_cap_oracle", "flux_analysis", "barrier_kappa",
    "barrier_constants", "theta_identity_residual", "q_field",
]


# ---------------------------------------------------------------------------
# spherical cap


@dataclass
class CapOracle:
    """Lower spherical cap u = -sqrt(R^2 - |x|^2) over the disk of radius a.

    Solves div(Du/omega) = n/R on Euclidean charts: Du/omega = x/R exactly.
    """

    R: float
    a: float
    n: int

    @property
    def f(self):
        return self.n / self.R

    def u(self, pts):
        pts = np.atleast_2d(pts)
        return -np.sqrt(self.R**2 - np.sum(pts**2, axis=1))

    def du(self, pts):
        pts = np.atleast_2d(pts)
        root = np.sqrt(self.R**2 - np.sum(pts**2, axis=1))
        return pts / root[:, None]

    def flux(self, pts):
        """Du/omega = x/R."""
        return np.atleast_2d(pts) / self.R

    def psi(self, pts):
        return self.u(pts)

    def grad_norm(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        return r / np.sqrt(self.R**2 - r**2)


def spherical_cap_oracle(R, a, n=2):
    if not 0 < a < R:
        raise ValueError("need 0 < a < R")
    return CapOracle(R=float(R), a=float(a), n=int(n))


# ---------------------------------------------------------------------------
# flux analysis


@dataclass
class FluxReport:
    saturation_radius: float | None
    max_ratio: float
    ratio_grid: np.ndarray
    r_grid: np.ndarray
    solution: object = None


def flux_analysis(ode, grid_points=2048, saturation_tol=1e-12,
                  locate_tol=1e-6):
    """Locate the smallest radius where Phi/J reaches 1, if any.

    When the ratio stays at or below 0.9 the exact radial profile
    u(r) = integral of Phi / sqrt(J^2 - Phi^2) is returned as a callable
    (normalized to u(0) = 0).
    """
    rs = np.linspace(0.0, ode.r_max, grid_points + 1)
    phis = cumulative(lambda s: float(ode.J(s)) * float(ode.RHS(s)), rs,
                      tol=ode.quad_tol)
    js = np.array([float(ode.J(r)) for r in rs])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(js > 0, phis / np.where(js > 0, js, 1.0), 0.0)
    ratios[0] = 0.0
    target = 1.0 - saturation_tol
    sat = None
    hit = np.flatnonzero(ratios >= target)
    if hit.size:
        i = int(hit[0])
        if i == 0:
            sat = 0.0
        else:
            lo, hi = rs[i - 1], rs[i]
            phi_lo = phis[i - 1]
            r_lo = lo
            while hi - lo > locate_tol / 4:
                mid = 0.5 * (lo + hi)
                phi_mid = phi_lo + adaptive_simpson(
                    lambda s: float(ode.J(s)) * float(ode.RHS(s)), r_lo, mid,
                    ode.quad_tol)
                if phi_mid / float(ode.J(mid)) >= target:
                    hi = mid
                else:
                    lo, phi_lo, r_lo = mid, phi_mid, mid
            sat = 0.5 * (lo + hi)
    max_ratio = float(np.max(ratios))
    report = FluxReport(saturation_radius=sat, max_ratio=max_ratio,
                        ratio_grid=ratios, r_grid=rs)
    if sat is None and max_ratio <= 0.9:
        def slope(s):
            j = float(ode.J(s))
            if j <= 0.0:
                return 0.0
            ph = ode.Phi(s)
            return ph / math.sqrt(max(j * j - ph * ph, 1e-300))

        def solution(r):
            vals = np.atleast_1d(np.asarray(r, float))
            out = np.array([adaptive_simpson(slope, 0.0, float(v), 1e-11)
                            for v in vals])
            return out if np.ndim(r) else float(out[0])

        report.solution = solution
    return report


# ---------------------------------------------------------------------------
# boundary barrier constants


def barrier_kappa(C2, C3, C4, d0):
    """nu and kappa of the log barrier from the constants of the gradient
    bound chain; requires d0 C2 nu <= 1/2."""
    nu = max(1.0, C3)
    if d0 * C2 * nu > 0.5 + 1e-12:
        raise ValueError("d0 C2 nu must not exceed 1/2")
    kappa = max(C2 * nu / (1.0 - C2 * nu * d0),
                (math.exp(C4 * nu) - 1.0) / d0)
    return nu, kappa


@dataclass
class BarrierConstants:
    kappa: float
    nu: float
    d0: float
    C2: float
    C3: float
    C4: float
    mu: float


def _collar_lattice(domain, d0, count=64):
    pts = domain.sample_points(4 * count)
    d = domain.d(pts)
    sel = (d > 0) & (d <= d0)
    if not np.any(sel):
        # fall back to points pushed inward from boundary samples
        ys = domain.boundary_samples(count)
        gam = domain.gamma(ys)
        return ys - 0.5 * d0 * gam
    return pts[sel][:count]


def barrier_constants(c0, varphi, problem, domain, safety=10.0,
                      samples=48):
    """Estimate (kappa, nu, d0) making psi +/- log(1 + kappa d)/nu barriers.

    The chain constants are sampled suprema: mu bounds |F| + |phi + t z| on
    the compact argument box, C2 collects the second-order data of the
    boundary extension against 1/phi', C3 the distance-Laplacian drift and
    data Lipschitz quotients; a 10x safety factor keeps the envelope valid
    without attempting sharpness.
    """
    metric = domain.metric
    ser = serrin_condition_check(problem, domain, samples=max(128, samples))
    if ser.worst_margin < -1e-8:
        raise HypothesisFailed(
            f"boundary inequality fails by {ser.worst_margin:.3e}")
    collar_guess = min(domain.collar_width, 0.5 * domain.collar_width + 1e-9)
    pts = _collar_lattice(domain, collar_guess, samples)
    m = pts.shape[0]
    sup_phi = float(np.max(np.abs(np.asarray(varphi(pts), float))))
    zs = np.linspace(-c0, c0, 5)
    mu = 0.0
    lip = 0.0
    for x in pts:
        dirs = geometry.metric_unit_directions(metric, x, 8)
        for rho in (0.0, 0.5, 1.0):
            X = rho * dirs
            xs = np.repeat(x[None, :], X.shape[0], axis=0)
            for ra in (-1.0, 0.0, 1.0):
                rr = np.full(X.shape[0], ra)
                Fv = np.asarray(problem.F(xs, X, rr), float)
                for z in zs:
                    ph = np.asarray(problem.phi(
                        xs, np.full(X.shape[0], z), X, rr), float)
                    mu = max(mu, float(np.max(
                        np.abs(Fv) + np.abs(ph + problem.t * z))))
        # crude Lipschitz quotients of F in position and gradient slot
        e = 1e-3
        for k in range(metric.dim):
            dx = np.zeros(metric.dim)
            dx[k] = e
            f1 = float(problem.F((x + dx)[None, :],
                                 np.zeros((1, metric.dim)), np.zeros(1)))
            f0 = float(problem.F(x[None, :],
                                 np.zeros((1, metric.dim)), np.zeros(1)))
            lip = max(lip, abs(f1 - f0) / e)
            fX = float(problem.F(x[None, :], dx[None, :], np.zeros(1)))
            lip = max(lip, abs(fX - f0) / e)

    # second-order data of the boundary extension
    hess_sup = 0.0
    grad_sup = 0.0
    for x in pts[:min(m, 16)]:
        hess_sup = max(hess_sup, float(np.max(np.abs(
            geometry.fd_hessian(varphi, x)))))
        grad_sup = max(grad_sup, float(np.max(np.abs(
            geometry.fd_gradient(varphi, x)))))

    # drift of Delta d away from -H_boundary across the collar
    drift = 0.0
    inv_cache = {}

    def unit_inward(ptsq):
        out = np.empty_like(ptsq)
        sig = metric.sigma(ptsq)
        sinv = metric.inverse(ptsq)
        for i in range(ptsq.shape[0]):
            dd = geometry.fd_gradient(domain.d, ptsq[i])
            up = sinv[i] @ dd
            out[i] = up / math.sqrt(up @ sig[i] @ up)
        return out

    _ = inv_cache
    for x in pts[:min(m, 16)]:
        lap_d = geometry.covariant_divergence(metric, unit_inward, x,
                                              step=1e-3)
        y = domain.project_boundary(x[None, :])[0]
        h_b = float(np.asarray(domain.H_boundary(y[None, :]), float))
        dist = max(float(domain.d(x[None, :])[0]), 1e-6)
        drift = max(drift, abs(lap_d + h_b) / dist)

    n = metric.dim
    C2 = max(1.0, safety * (n * hess_sup + mu + 1.0))
    C3 = safety * (drift + lip + grad_sup + 1.0)
    C4 = c0 + sup_phi
    nu = max(1.0, C3)
    d0 = min(0.9 * domain.collar_width, 0.5 / (C2 * nu))
    nu, kappa = barrier_kappa(C2, C3, C4, d0)
    return BarrierConstants(kappa=kappa, nu=nu, d0=d0, C2=C2, C3=C3, C4=C4,
                            mu=mu)


# ---------------------------------------------------------------------------
# graph identity and Q-field diagnostics on solved grids


def _grid_graph_data(fld):
    layout = fld.layout
    u = fld.values
    du = layout.gradients(u)
    hess = layout.hessians(u)
    if layout.gamma_node is not None:
        hess = hess - np.einsum("yxkij,yxk->yxij", layout.gamma_node, du)
    sig = np.linalg.inv(layout.inv_node)
    q = geometry.graph_algebra(sig, layout.inv_node, du, hess)
    q["du"] = du
    q["sig"] = sig
    return q


def theta_identity_residual(fld, f_of_graph=None, ambient_ricci=None):
    """Residual of the graph identity for Theta = 1/omega.

    Delta_Sigma Theta + (|A|^2 + Ric(nu, nu)) Theta - <grad H, d/dr> should
    vanish on any graph; H is taken with respect to the upward normal.  For
    a flat product ambient Ric(nu, nu) = 0; for curved bases pass
    ambient_ricci(pts, X) evaluating Ric(X, X) of the base.

    Returns (residual array, validity mask); the mask erodes the interior by
    the nested stencil depth.
    """
    layout = fld.layout
    q = _grid_graph_data(fld)
    theta = q["theta"]
    # Laplace-Beltrami on the graph: (1/sqrt g) d_i(sqrt g g^{ij} theta_j)
    sqrt_g = layout.sqrtdet_node * q["omega"]
    dtheta = layout.gradients(theta)
    W = np.einsum("yxij,yxj->yxi", q["g_inv"], dtheta)
    flux = sqrt_g[..., None] * W
    div = np.zeros(layout.shape)
    if layout.periodic:
        div = (layout._roll(flux[..., 0], 0, 1)
               - layout._roll(flux[..., 0], 0, -1)
               + layout._roll(flux[..., 1], 1, 0)
               - layout._roll(flux[..., 1], -1, 0)) / (2 * layout.h)
    else:
        div[:, 1:-1] += (flux[:, 2:, 0] - flux[:, :-2, 0]) / (2 * layout.h)
        div[1:-1, :] += (flux[2:, :, 1] - flux[:-2, :, 1]) / (2 * layout.h)
    lap_theta = div / sqrt_g

    if f_of_graph is not None:
        pts = layout.pts.reshape(-1, 2)
        h_up = -np.asarray(f_of_graph(pts), float).reshape(layout.shape)
    else:
        h_up = -layout.covariant_divergence_of(
            q["u_up"] / q["omega"][..., None])
    dh = layout.gradients(h_up)
    # <grad_Sigma H, d/dr> = g^{ij} H_i u_j
    grad_h_r = np.einsum("yxij,yxi,yxj->yx", q["g_inv"], dh, q["du"])

    ric_term = np.zeros(layout.shape)
    if ambient_ricci is not None:
        pts = layout.pts.reshape(-1, 2)
        X = (q["u_up"] / q["omega"][..., None]).reshape(-1, 2)
        ric_term = np.asarray(ambient_ricci(pts, X), float).reshape(
            layout.shape)

    res = lap_theta + (q["A2"] + ric_term) * theta - grad_h_r
    depth = 2 if f_of_graph is not None else 3
    return res, layout.interior_eroded(depth)


@dataclass
class QFieldReport:
    Q: np.ndarray
    div_residual: np.ndarray
    valid: np.ndarray
    sup_norm: float
    margin: float


def q_field(fld, f, problem=None, tol_factor=10.0):
    """Q = Du/omega with div Q compared against the prescribed divergence f.

    f maps points to the target divergence (for CMC data, the constant c).
    When a problem is supplied the field must solve it at solver tolerance.
    """
    layout = fld.layout
    if problem is not None:
        tol = solver.newton_tolerance(problem, layout)
        r = float(np.max(np.abs(layout.pack(
            disc.assemble_residual(problem, fld)))))
        if r > tol_factor * tol:
            raise NotASolution(f"residual {r:.2e} exceeds {tol_factor*tol:.2e}")
    q = _grid_graph_data(fld)
    Q = q["u_up"] / q["omega"][..., None]
    divQ = layout.covariant_divergence_of(Q)
    pts = layout.pts.reshape(-1, 2)
    target = np.asarray(f(pts), float).reshape(layout.shape)
    res = divQ - target
    valid = layout.interior_eroded(2)
    qq = np.einsum("yxij,yxi,yxj->yx", q["sig"], Q, Q)
    sup_norm = float(np.max(qq[layout.interior])) if layout.interior.any() \
        else 0.0
    return QFieldReport(Q=Q, div_residual=res, valid=valid,
                        sup_norm=sup_norm, margin=1.0 - sup_norm)
