"""Problem data for prescribed-mean-curvature Dirichlet solves.

A problem is the triple (F, phi, psi) of the quasilinear equation

    -div(Du/omega) - F(x, -Du/omega, 1/omega)
        + (phi(x, u, -Du/omega, 1/omega) + t*u) / omega = 0,   u = psi on dOmega,

with regularization parameter t >= 0.  Families are constructed so the
equation they represent reads off the prescribed divergence directly:
make_cmc(c) produces graphs with div(Du/omega) = c.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .errors import NoBoundary
from .quadrature import adaptive_simpson

TOL_GEOM = 1e-8

# plastic-number lattice constants for deterministic interior sampling
_R2 = (0.7548776662466927, 0.5698402909980532)
_R3 = (0.8191725133961644, 0.6710436067037892, 0.5497004779019702)


def unit_sphere_area(n):
    """Area of the unit (n-1)-sphere in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


# ---------------------------------------------------------------------------
# chart domains


class DomainChart:
    """Coordinate region with boundary distance, normal and curvature.

    d(x) is the distance to the boundary (positive inside), gamma(y) the
    outward sigma-unit normal, H_boundary the analytic boundary mean
    curvature when the shape has one.
    """

    shape = "abstract"
    has_boundary = True

    def __init__(self, metric):
        self.metric = metric
        self.H_boundary = None
        self.collar_width = None

    # required per shape: inside(pts), d(pts), bounding_box(), diam
    def inside(self, pts):
        raise NotImplementedError

    def d(self, pts):
        raise NotImplementedError

    def gamma(self, pts):
        raise NotImplementedError

    def bounding_box(self):
        raise NotImplementedError

    def project_boundary(self, pts):
        raise NotImplementedError

    def boundary_samples(self, count):
        raise NotImplementedError

    def sample_points(self, count, seed=0):
        """Deterministic low-discrepancy interior points."""
        lo, hi = self.bounding_box()
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        dim = lo.size
        alphas = np.array(_R2 if dim == 2 else _R3[:dim])
        out = []
        j = 1 + seed * 7919
        while len(out) < count:
            m = 4 * count
            js = np.arange(j, j + m)[:, None]
            pts = lo + np.mod(js * alphas[None, :], 1.0) * (hi - lo)
            keep = pts[self.inside(pts)]
            out.extend(keep.tolist())
            j += m
        return np.asarray(out[:count])

    def boundary_crossing(self, x_in, x_out, iters=60):
        """Bisection point of the boundary on the segment [x_in, x_out]."""
        a = np.asarray(x_in, float).copy()
        b = np.asarray(x_out, float).copy()
        for _ in range(iters):
            mid = 0.5 * (a + b)
            if self.inside(mid[None, :])[0]:
                a = mid
            else:
                b = mid
        return 0.5 * (a + b)


class Disk(DomainChart):
    shape = "disk"

    def __init__(self, metric, radius, center=None):
        super().__init__(metric)
        self.radius = float(radius)
        self.center = (np.zeros(metric.dim) if center is None
                       else np.asarray(center, float))
        n = metric.dim
        self.H_boundary = lambda y: np.full(np.atleast_2d(y).shape[0],
                                            (n - 1) / self.radius).squeeze()
        self.collar_width = self.radius
        self.diam = 2.0 * self.radius

    def _r(self, pts):
        return np.linalg.norm(np.atleast_2d(pts) - self.center, axis=1)

    def inside(self, pts):
        return self._r(pts) < self.radius

    def d(self, pts):
        return self.radius - self._r(pts)

    def gamma(self, pts):
        pts = np.atleast_2d(pts) - self.center
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def project_boundary(self, pts):
        pts = np.atleast_2d(pts) - self.center
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        return self.center + self.radius * pts / np.maximum(r, 1e-300)

    def boundary_samples(self, count):
        ang = 2.0 * np.pi * (np.arange(count) + 0.5) / count
        circ = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        if self.metric.dim != 2:
            raise NotImplementedError("boundary sampling only for 2d charts")
        return self.center + self.radius * circ


class PolarCap(DomainChart):
    """{r < r_max} in the Cartesian chart of a spherical warped metric.

    Radial chart lines have unit speed, so d(x) = r_max - |x| is the metric
    distance to the boundary sphere.
    """

    shape = "polar_cap"

    def __init__(self, metric, r_max):
        super().__init__(metric)
        if metric.kind != "spherical_warped":
            raise ValueError("polar_cap requires a spherical_warped metric")
        self.r_max = float(r_max)
        warp = metric.warp
        n = metric.dim

        def h_bdry(y):
            r = np.linalg.norm(np.atleast_2d(y), axis=1)
            return ((n - 1) * warp.dh(r) / warp.h(r)).squeeze()

        self.H_boundary = h_bdry
        self.collar_width = self.r_max
        self.diam = 2.0 * self.r_max

    def inside(self, pts):
        return np.linalg.norm(np.atleast_2d(pts), axis=1) < self.r_max

    def d(self, pts):
        return self.r_max - np.linalg.norm(np.atleast_2d(pts), axis=1)

    def gamma(self, pts):
        pts = np.atleast_2d(pts)
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)

    def bounding_box(self):
        n = self.metric.dim
        return -self.r_max * np.ones(n), self.r_max * np.ones(n)

    def project_boundary(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        return self.r_max * pts / np.maximum(r, 1e-300)

    def boundary_samples(self, count):
        dirs = geometry.unit_directions(self.metric.dim, count)
        return self.r_max * dirs


class Annulus(DomainChart):
    shape = "annulus"

    def __init__(self, metric, a, b):
        super().__init__(metric)
        if not 0 < a < b:
            raise ValueError("need 0 < a < b")
        self.a, self.b = float(a), float(b)
        n = metric.dim

        def h_bdry(y):
            r = np.linalg.norm(np.atleast_2d(y), axis=1)
            outer = r > 0.5 * (self.a + self.b)
            return np.where(outer, (n - 1) / r, -(n - 1) / r).squeeze()

        self.H_boundary = h_bdry
        self.collar_width = 0.5 * (b - a)
        self.diam = 2.0 * self.b

    def inside(self, pts):
        r = np.linalg.norm(np.atleast_2d(pts), axis=1)
        return (r > self.a) & (r < self.b)

    def d(self, pts):
        r = np.linalg.norm(np.atleast_2d(pts), axis=1)
        return np.minimum(r - self.a, self.b - r)

    def gamma(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        outer = r[:, 0] > 0.5 * (self.a + self.b)
        return np.where(outer[:, None], pts / r, -pts / r)

    def bounding_box(self):
        n = self.metric.dim
        return -self.b * np.ones(n), self.b * np.ones(n)

    def project_boundary(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        target = np.where(r > 0.5 * (self.a + self.b), self.b, self.a)
        return target * pts / np.maximum(r, 1e-300)

    def boundary_samples(self, count):
        half = count // 2
        ang = 2.0 * np.pi * (np.arange(half) + 0.5) / half
        circ = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return np.concatenate([self.a * circ, self.b * circ])


class BoxPeriodic(DomainChart):
    """Flat torus [0, L)^n; a closed manifold, so no boundary accessors."""

    shape = "box_periodic"
    has_boundary = False

    def __init__(self, metric, length):
        super().__init__(metric)
        self.length = float(length)
        self.diam = self.length * math.sqrt(metric.dim) / 2.0

    def inside(self, pts):
        return np.ones(np.atleast_2d(pts).shape[0], dtype=bool)

    def d(self, pts):
        raise NoBoundary("box_periodic has empty boundary")

    def gamma(self, pts):
        raise NoBoundary("box_periodic has empty boundary")

    def project_boundary(self, pts):
        raise NoBoundary("box_periodic has empty boundary")

    def boundary_samples(self, count):
        raise NoBoundary("box_periodic has empty boundary")

    def bounding_box(self):
        n = self.metric.dim
        return np.zeros(n), self.length * np.ones(n)


class Slab(DomainChart):
    """{r_lo < r < r_hi} in a conformal product chart (r = last coordinate).

    Distance to a slice is the warped length of the vertical segment,
    d = |int phi dr|; pass the antiderivative of phi when it is known in
    closed form, otherwise it is integrated adaptively.
    """

    shape = "slab"

    def __init__(self, metric, r_lo, r_hi, base_halfwidth=1.0,
                 phi_antideriv=None):
        super().__init__(metric)
        if metric.kind != "conformal_product":
            raise ValueError("slab requires a conformal_product metric")
        self.r_lo, self.r_hi = float(r_lo), float(r_hi)
        self.base_halfwidth = float(base_halfwidth)
        if phi_antideriv is None:
            # reference point inside the slab: only differences matter
            self._anti = lambda r: adaptive_simpson(
                lambda s: float(metric.phi(s)), self.r_lo, float(r))
        else:
            self._anti = phi_antideriv
        n = metric.dim - 1

        def h_bdry(y):
            y = np.atleast_2d(y)
            r = y[:, -1]
            upper = r > 0.5 * (self.r_lo + self.r_hi)
            val = n * np.asarray(metric.dphi(r), float) \
                / np.asarray(metric.phi(r), float) ** 2
            return np.where(upper, val, -val).squeeze()

        self.H_boundary = h_bdry
        self.collar_width = 0.45 * abs(
            self._length(self.r_hi) - self._length(self.r_lo))
        self.diam = None

    def _length(self, r):
        if np.ndim(r) == 0:
            return float(self._anti(r))
        return np.array([float(self._anti(v)) for v in np.ravel(r)])

    def inside(self, pts):
        pts = np.atleast_2d(pts)
        r = pts[:, -1]
        base_ok = np.all(np.abs(pts[:, :-1]) < self.base_halfwidth, axis=1)
        return (r > self.r_lo) & (r < self.r_hi) & base_ok

    def d(self, pts):
        pts = np.atleast_2d(pts)
        lr = self._length(pts[:, -1])
        return np.minimum(self._length(self.r_hi) - lr,
                          lr - self._length(self.r_lo))

    def gamma(self, pts):
        pts = np.atleast_2d(pts)
        r = pts[:, -1]
        upper = r > 0.5 * (self.r_lo + self.r_hi)
        out = np.zeros_like(pts)
        out[:, -1] = np.where(upper, 1.0, -1.0) / np.asarray(
            self.metric.phi(r), float)
        return out

    def bounding_box(self):
        n = self.metric.dim
        lo = -self.base_halfwidth * np.ones(n)
        hi = self.base_halfwidth * np.ones(n)
        lo[-1], hi[-1] = self.r_lo, self.r_hi
        return lo, hi

    def project_boundary(self, pts):
        pts = np.atleast_2d(pts).copy()
        r = pts[:, -1]
        upper = r > 0.5 * (self.r_lo + self.r_hi)
        pts[:, -1] = np.where(upper, self.r_hi, self.r_lo)
        return pts

    def boundary_samples(self, count):
        half = count // 2
        xs = np.linspace(-0.8 * self.base_halfwidth,
                         0.8 * self.base_halfwidth, half)
        n = self.metric.dim
        up = np.zeros((half, n))
        up[:, 0] = xs
        up[:, -1] = self.r_hi
        lo = up.copy()
        lo[:, -1] = self.r_lo
        return np.concatenate([up, lo])


def disk(metric, radius, center=None):
    return Disk(metric, radius, center)


def annulus(metric, a, b):
    return Annulus(metric, a, b)


def box_periodic(metric, length):
    return BoxPeriodic(metric, length)


def polar_cap(metric, r_max):
    return PolarCap(metric, r_max)


def slab(metric, r_lo, r_hi, base_halfwidth=1.0, phi_antideriv=None):
    return Slab(metric, r_lo, r_hi, base_halfwidth, phi_antideriv)


# ---------------------------------------------------------------------------
# problem data


def _zero_phi(pts, z, X, r):
    return np.zeros(np.atleast_2d(pts).shape[0])


@dataclass(frozen=True)
class PMCProblem:
    """Data (F, phi, psi) of the regularized PMC Dirichlet problem."""

    F: object
    phi: object = _zero_phi
    dphi_dz_lower_bound: float = 0.0
    psi: object = None
    t: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def f(self, pts, X):
        """F(x, X, 0); the boundary-condition generator of the problem."""
        pts = np.atleast_2d(pts)
        return np.asarray(self.F(pts, np.atleast_2d(X),
                                  np.zeros(pts.shape[0])), float)

    @property
    def needs_continuation(self):
        return self.t == 0.0 and self.dphi_dz_lower_bound == 0.0

    def with_t(self, t):
        return replace(self, t=float(t))

    def with_psi(self, psi):
        return replace(self, psi=psi)


def constant_psi(value):
    v = float(value)
    return lambda pts: np.full(np.atleast_2d(pts).shape[0], v)


def make_cmc(c):
    """Graphs with div(Du/omega) = c.

    Stored as F = -c in the residual parameterization, which reproduces
    -div(Du/omega) + c = 0; the lower spherical cap of radius n/c solves the
    c > 0 problem on Euclidean disks.
    """
    c = float(c)

    def F(pts, X, r):
        return np.full(np.atleast_2d(pts).shape[0], -c)

    return PMCProblem(F=F, name="cmc", params={"c": c})


def make_jang(k_fn, metric):
    """Jang-type data F(x, X, r) = tr_sigma k(x) - k(X, X).

    k_fn maps (m, n) points to (m, n, n) symmetric tensors.  Solutions are
    the vertical reflection of graphs built with the opposite extrinsic-term
    sign convention; existence theory is identical.
    """

    def F(pts, X, r):
        pts = np.atleast_2d(pts)
        X = np.atleast_2d(X)
        k = np.asarray(k_fn(pts), float)
        inv = metric.inverse(pts)
        tr = np.einsum("mij,mij->m", inv, k)
        return tr - np.einsum("mij,mi,mj->m", k, X, X)

    return PMCProblem(F=F, name="jang", params={})


def make_conformal_minimal(dfx, dfr, dim, dphi_dz_lower_bound=0.0):
    """Minimal-graph data in a conformally product ambient exp(2 fconf).

    For a separable conformal factor fconf(x, r) = a(x) + b(r):
    dfx(pts) -> (m, n) partial derivatives of a, dfr(pts, z) -> (m,) b'(z).
    The assembled residual is
    -div(Du/omega) + n <Da, -Du/omega> + n b'(u) / omega = 0.
    """
    n = int(dim)

    def F(pts, X, r):
        pts = np.atleast_2d(pts)
        grads = np.asarray(dfx(pts), float)
        return -n * np.einsum("mi,mi->m", grads, np.atleast_2d(X))

    def phi(pts, z, X, r):
        pts = np.atleast_2d(pts)
        return n * np.asarray(dfr(pts, np.asarray(z, float)), float)

    return PMCProblem(F=F, phi=phi,
                      dphi_dz_lower_bound=float(dphi_dz_lower_bound),
                      name="conformal", params={"n": n})


# ---------------------------------------------------------------------------
# hypothesis checkers


@dataclass
class SerrinReport:
    holds: bool
    worst_margin: float
    worst_point: np.ndarray
    samples: int


def serrin_condition_check(problem, domain, samples=512):
    """Margins of H_dOmega >= max{f(y, gamma), -f(y, -gamma)} on samples."""
    if not domain.has_boundary:
        raise NoBoundary("serrin condition needs a boundary")
    ys = domain.boundary_samples(samples)
    gam = domain.gamma(ys)
    h = np.atleast_1d(np.asarray(domain.H_boundary(ys), float))
    fplus = problem.f(ys, gam)
    fminus = problem.f(ys, -gam)
    margins = h - np.maximum(fplus, -fminus)
    i = int(np.argmin(margins))
    return SerrinReport(holds=bool(margins[i] >= -TOL_GEOM),
                        worst_margin=float(margins[i]),
                        worst_point=ys[i], samples=samples)


@dataclass
class NcfReport:
    satisfied: bool
    branch: str
    mu: float
    ric_min: float
    h_min: float
    condition1: bool


def ncf_sufficient_check(problem, domain, samples=256, directions=32, seed=0):
    """Sufficient conditions for the obstruction-free (Nc-f) property.

    mu is the sampled sup of |f(x, nu)| over the sigma-unit ball; branch 2a
    needs H_boundary >= mu with Ricci strictly above -mu^2/(n-1), branch 2b
    the strict/non-strict swap.  Condition (1) asks that H_boundary is not
    identically f(., gamma) nor -f(., -gamma).
    """
    metric = domain.metric
    n = metric.dim
    pts = domain.sample_points(samples, seed=seed)
    mu = 0.0
    for x in pts:
        dirs = geometry.metric_unit_directions(metric, x, directions, seed)
        for rho in (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0):
            vals = problem.f(np.repeat(x[None, :], dirs.shape[0], 0),
                             rho * dirs)
            mu = max(mu, float(np.max(np.abs(vals))))

    ys = domain.boundary_samples(max(64, samples // 2))
    gam = domain.gamma(ys)
    h = np.atleast_1d(np.asarray(domain.H_boundary(ys), float))
    eq_plus = np.all(np.abs(h - problem.f(ys, gam)) <= TOL_GEOM)
    eq_minus = np.all(np.abs(h + problem.f(ys, -gam)) <= TOL_GEOM)
    condition1 = not (eq_plus or eq_minus)

    ric_min = geometry.ricci_min_estimate(metric, domain,
                                          samples=min(samples, 48),
                                          directions=directions, seed=seed)
    h_min = float(np.min(h))
    bar = -mu * mu / (n - 1)
    b2a = (h_min >= mu - TOL_GEOM) and (ric_min > bar + TOL_GEOM)
    b2b = (h_min > mu + TOL_GEOM) and (ric_min >= bar - TOL_GEOM)
    branch = "2a" if b2a else ("2b" if b2b else "none")
    return NcfReport(satisfied=bool(condition1 and (b2a or b2b)),
                     branch=branch if condition1 and (b2a or b2b) else
                     ("none" if not (b2a or b2b) else branch),
                     mu=mu, ric_min=ric_min, h_min=h_min,
                     condition1=bool(condition1))


# ---------------------------------------------------------------------------
# the nonexistence example


@dataclass
class Counterexample:
    """Warped manifold where the CMC-beta problem has no solution.

    h(r) = r up to the flux-saturation radius n/beta, bridged in log space to
    exponential growth e^{k r} reached at the boundary radius k.
    """

    beta: float
    n: int
    k: float
    metric: geometry.SphericalWarpedMetric
    domain: PolarCap
    problem: PMCProblem

    @property
    def warp(self):
        return self.metric.warp

    @property
    def blow_up_radius(self):
        return self.n / self.beta

    def sphere_H(self, r):
        """Mean curvature (n-1) h'/h of the sphere at radius r."""
        return (self.n - 1) * float(self.warp.growth_rate(r))

    def boundary_H(self):
        return self.sphere_H(self.k)

    def ball_volume(self, r):
        area = unit_sphere_area(self.n)
        return area * adaptive_simpson(
            lambda s: float(self.warp.h(s)) ** (self.n - 1), 0.0, float(r))

    def euclidean_ball_volume(self, r):
        return unit_sphere_area(self.n) * r ** self.n / self.n

    def sphere_area(self, r):
        return unit_sphere_area(self.n) * float(self.warp.h(r)) ** (self.n - 1)


def counterexample_problem(beta, n=2, k=None):
    """Metric, domain and CMC problem of the flux-obstruction example."""
    beta = float(beta)
    if beta <= 0:
        raise ValueError("beta must be positive")
    r0 = n / beta
    if k is None:
        k = max(beta, r0) + 0.5
    if k <= max(beta, r0):
        raise ValueError("k must exceed max(beta, n/beta)")
    warp = geometry.PiecewiseLogWarp(r0, k, k)
    metric = geometry.SphericalWarpedMetric(n, warp)
    dom = polar_cap(metric, k)
    prob = make_cmc(beta).with_psi(constant_psi(0.0))
    return Counterexample(beta=beta, n=n, k=k, metric=metric,
                          domain=dom, problem=prob)
