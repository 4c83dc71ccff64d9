"""Damped Newton solves, t -> 0 continuation and runtime diagnostics.

The continuation realizes the blow-up method: solve the monotone regularized
problem (extra + t u / omega term) down a geometric t schedule, warm-started,
watching the a-priori bound |t u_t| <= beta2.  Divergence concentrates on the
node sets where |u_t| reaches half the admissible ceiling beta2 / t at two
consecutive levels; those are reported as the blow-up masks.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import discretization as disc
from . import geometry
from .errors import (BallOutsideDomain, CollarEmpty, DivergedField,
                     InsufficientHistory, NewtonStall, NotSolutions,
                     SingularJacobian, ZeroBeta)

ARMIJO_FACTOR = 0.5
ARMIJO_SLOPE = 1e-4
MAX_BACKTRACKS = 30
BASE_TOL = 1e-10


def data_scale(problem, layout):
    """Magnitude of the problem data on the layout, for tolerance scaling."""
    pts = layout.interior_pts
    zeros = np.zeros((pts.shape[0], pts.shape[1]))
    ones = np.ones(pts.shape[0])
    scale = 1.0
    scale = max(scale, float(np.max(np.abs(problem.F(pts, zeros, ones)))))
    scale = max(scale, float(np.max(np.abs(
        problem.phi(pts, np.zeros(pts.shape[0]), zeros, ones)))))
    if problem.psi is not None and layout.has_boundary:
        bv = layout.psi_samples(problem.psi)
        if bv.size:
            scale = max(scale, float(np.max(np.abs(bv))))
    return scale


def newton_tolerance(problem, layout):
    return BASE_TOL * (1.0 + data_scale(problem, layout))


@dataclass
class NewtonStats:
    iterations: int
    final_residual: float
    backtracks: int


def newton_solve(problem, u_init, max_iter=80, tol=None):
    """Damped Newton iteration; returns (solution Field, NewtonStats).

    Armijo backtracking on the residual 2-norm (factor 0.5, sufficient
    decrease 1e-4, at most 30 halvings); convergence in the max norm at
    1e-10 * (1 + data scale).
    """
    layout = u_init.layout
    fld = u_init.copy()
    if tol is None:
        tol = newton_tolerance(problem, layout)
    total_backtracks = 0
    res = disc.assemble_residual(problem, fld)
    rvec = layout.pack(res)
    for it in range(max_iter + 1):
        rinf = float(np.max(np.abs(rvec))) if rvec.size else 0.0
        if rinf <= tol:
            return fld, NewtonStats(it, rinf, total_backtracks)
        if it == max_iter:
            raise NewtonStall(f"no convergence in {max_iter} iterations "
                              f"(residual {rinf:.3e})")
        system = disc.assemble_jacobian(problem, fld)
        try:
            lu = spla.splu(system.jacobian.tocsc())
            delta = lu.solve(-rvec)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(delta)):
            raise SingularJacobian("non-finite Newton step")
        base = layout.pack(fld.values)
        f0 = float(np.linalg.norm(rvec))
        alpha = 1.0
        accepted = False
        for bt in range(MAX_BACKTRACKS + 1):
            trial = layout.unpack(base + alpha * delta, fld.boundary_values)
            try:
                res_t = layout.residual_full(problem, trial,
                                             fld.boundary_values)
            except DivergedField:
                alpha *= ARMIJO_FACTOR
                total_backtracks += 1
                continue
            rvec_t = layout.pack(res_t)
            if float(np.linalg.norm(rvec_t)) <= (1.0 - ARMIJO_SLOPE * alpha) * f0:
                fld = fld.with_values(trial)
                rvec = rvec_t
                accepted = True
                break
            alpha *= ARMIJO_FACTOR
            total_backtracks += 1
        if not accepted:
            raise NewtonStall("Armijo found no acceptable step")
    raise NewtonStall("unreachable")


# ---------------------------------------------------------------------------
# a-priori bounds


@dataclass
class AprioriBounds:
    alpha1: float | None
    alpha2: float | None
    beta2: float

    def as_dict(self):
        return {"alpha1": self.alpha1, "alpha2": self.alpha2,
                "beta2": self.beta2}


def apriori_bounds(problem, domain, samples=128, directions=12, seed=0,
                   require_alphas=False):
    """Sampled suprema realizing the alpha1 / alpha2 / beta2 bounds.

    H1 = -F and H2 = phi + t z in the monotone-operator splitting; the
    effective monotonicity constant is dphi_dz_lower_bound + t.  beta2 bounds
    |t u_t| along the whole continuation.
    """
    metric = domain.metric
    pts = domain.sample_points(samples, seed=seed)
    if domain.has_boundary:
        pts = np.concatenate([pts, domain.boundary_samples(samples // 2)])
    m = pts.shape[0]
    psi_vals = (np.asarray(problem.psi(pts), float)
                if (problem.psi is not None and domain.has_boundary)
                else np.zeros(m))
    sup_psi = float(np.max(np.abs(psi_vals))) if psi_vals.size else 0.0

    radii = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    r_args = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    sup_h_psi = 0.0   # |H1| + |H2| at z = psi(x)
    sup_h_zero = 0.0  # |H1| + |H2| at z = 0
    sup_beta2 = 0.0   # |F + phi(x, psi(x), X, r)|
    for i in range(m):
        x = pts[i]
        dirs = geometry.metric_unit_directions(metric, x, directions, seed)
        for rho in radii:
            X = rho * dirs
            xs = np.repeat(x[None, :], X.shape[0], axis=0)
            for ra in r_args:
                rr = np.full(X.shape[0], ra)
                Fv = np.asarray(problem.F(xs, X, rr), float)
                ph_psi = np.asarray(problem.phi(
                    xs, np.full(X.shape[0], psi_vals[i]), X, rr), float)
                ph_zero = np.asarray(problem.phi(
                    xs, np.zeros(X.shape[0]), X, rr), float)
                h2_psi = ph_psi + problem.t * psi_vals[i]
                sup_h_psi = max(sup_h_psi,
                                float(np.max(np.abs(Fv) + np.abs(h2_psi))))
                sup_h_zero = max(sup_h_zero,
                                 float(np.max(np.abs(Fv) + np.abs(ph_zero))))
                sup_beta2 = max(sup_beta2,
                                float(np.max(np.abs(Fv + ph_psi))))
    beta_eff = problem.dphi_dz_lower_bound + problem.t
    if beta_eff > 0:
        alpha1 = sup_h_psi / beta_eff + sup_psi + 1.0
        alpha2 = sup_h_zero / beta_eff + 1.0
    else:
        if require_alphas:
            raise ZeroBeta("alpha bounds need dphi_dz_lower_bound + t > 0")
        alpha1 = alpha2 = None
    beta2 = max(sup_psi, sup_beta2)
    return AprioriBounds(alpha1=alpha1, alpha2=alpha2, beta2=beta2)


# ---------------------------------------------------------------------------
# diagnostics on fields


def shape_operator_sq(fld, metric):
    """|A|^2 array of the graph of the field (valid on the eroded interior)."""
    layout = fld.layout
    if layout.kind == "radial":
        return layout.shape_A2(fld.values), layout.interior_eroded(1)
    u = fld.values
    du = layout.gradients(u)
    hess = layout.hessians(u)
    if layout.gamma_node is not None:
        hess = hess - np.einsum("yxkij,yxk->yxij", layout.gamma_node, du)
    sig = np.linalg.inv(layout.inv_node)
    q = geometry.graph_algebra(sig, layout.inv_node, du, hess)
    return q["A2"], layout.interior_eroded(1)


def max_monitored_A2(fld, frac=0.1):
    layout = fld.layout
    a2, valid = shape_operator_sq(fld, layout.metric)
    mask = valid & layout.monitored_mask(frac)
    if not mask.any():
        return 0.0
    return float(np.max(a2[mask]))


def sup_gradient(fld):
    layout = fld.layout
    gn = layout.gradient_norms(fld.values)
    if gn.ndim == 2:
        return float(np.max(gn[layout.interior]))
    return float(np.max(gn))


def gradient_monitor(fld, center, radius):
    """Max |Du|_sigma over the chart ball around center."""
    layout = fld.layout
    if layout.kind == "radial":
        c = float(np.atleast_1d(np.asarray(center, float))[0])
        if c != 0.0 or radius > layout.r_max + 1e-12:
            raise BallOutsideDomain("radial monitor ball must be a pole ball "
                                    "inside the cap")
        sel = layout.r <= radius
        gn = layout.gradient_norms(fld.values)
        idx = int(np.argmax(np.where(sel, gn, -np.inf)))
        return {"max_grad": float(gn[idx]), "location": float(layout.r[idx])}
    center = np.asarray(center, float)
    pts = layout.pts.reshape(-1, 2)
    sel = np.linalg.norm(pts - center, axis=1) <= radius
    inside = layout.interior.ravel()
    if np.any(sel & ~inside):
        raise BallOutsideDomain("monitor ball leaves the domain")
    gn = layout.gradient_norms(fld.values).ravel()
    masked = np.where(sel & inside, gn, -np.inf)
    idx = int(np.argmax(masked))
    return {"max_grad": float(gn[idx]), "location": pts[idx]}


# ---------------------------------------------------------------------------
# continuation


@dataclass
class Schedule:
    t0: float = 0.1
    ratio: float = 0.5
    t_min: float = 1e-6
    stop_on_blow_up: bool = True
    max_insertions: int = 5
    diff_tol: float = 1e-6


@dataclass
class SolveReport:
    outcome: str                     # converged | blow_up | newton_failure
    records: list
    bound_checks: dict
    beta2: float
    u_final: object = None
    u_prev: object = None
    t_final: float = None
    t_prev: float = None
    omega_plus: object = None
    omega_minus: object = None
    failure: str = ""
    monitor: dict = field(default_factory=dict)

    @property
    def omega_plus_cells(self):
        return int(np.sum(self.omega_plus)) if self.omega_plus is not None else 0

    @property
    def omega_minus_cells(self):
        return int(np.sum(self.omega_minus)) if self.omega_minus is not None else 0

    def to_json_dict(self, config_echo=None):
        recs = [{"t": r["t"], "sup_u": r["sup_u"], "sup_grad": r["sup_grad"],
                 "max_A2": r["max_A2"], "newton_iters": r["newton_iters"],
                 "final_residual": r["final_residual"]} for r in self.records]
        return {
            "outcome": self.outcome,
            "records": recs,
            "bound_checks": self.bound_checks,
            "omega_plus_cells": self.omega_plus_cells,
            "omega_minus_cells": self.omega_minus_cells,
            "config_echo": config_echo or {},
        }


def _blow_masks(fld, t, beta2):
    thresh = 0.5 * beta2 / t
    layout = fld.layout
    vals = fld.values
    interior = layout.interior if hasattr(layout, "interior") else None
    plus = vals >= thresh
    minus = vals <= -thresh
    if interior is not None:
        plus = plus & interior
        minus = minus & interior
    return plus, minus


def continuation(problem, u_init, domain, schedule=None, monitor_ball=None,
                 bounds_samples=64):
    """Warm-started geometric t -> 0 continuation with blow-up detection.

    Convergence: consecutive solutions differ by at most diff_tol in the max
    norm with a stable sup.  Blow-up: |u_t| >= 0.5 beta2 / t on a common
    nonempty node set at two consecutive levels.  Newton stalls insert a
    geometric-midpoint t, up to max_insertions per run.
    """
    sched = schedule or Schedule()
    bounds = apriori_bounds(problem, domain, samples=bounds_samples)
    beta2 = bounds.beta2
    if beta2 <= 0:
        beta2 = 1.0  # zero-data problems: any positive ceiling works
    records = []
    tu_ok = True
    tu_worst = 0.0
    u_prev_f, t_prev = None, None
    u_cur = u_init
    t_cur = sched.t0
    t_solved = None
    insertions = 0
    masks_prev = None
    outcome = None
    failure = ""
    monitor = {}
    while True:
        trial_problem = problem.with_t(t_cur)
        try:
            u_new, stats = newton_solve(trial_problem, u_cur)
        except (NewtonStall, SingularJacobian, DivergedField) as exc:
            if insertions < sched.max_insertions and t_solved is not None:
                t_cur = float(np.sqrt(t_solved * t_cur))
                insertions += 1
                continue
            outcome = "newton_failure"
            failure = f"{type(exc).__name__}: {exc}"
            break
        sup_u = u_new.sup()
        rec = {
            "t": t_cur,
            "sup_u": sup_u,
            "sup_grad": sup_gradient(u_new),
            "max_A2": max_monitored_A2(u_new),
            "newton_iters": stats.iterations,
            "final_residual": stats.final_residual,
        }
        records.append(rec)
        tu = t_cur * sup_u
        tu_worst = max(tu_worst, tu)
        if tu > beta2 + 1e-8:
            tu_ok = False
        if monitor_ball is not None:
            monitor = gradient_monitor(u_new, *monitor_ball)
            rec["monitor_grad"] = monitor["max_grad"]

        plus, minus = _blow_masks(u_new, t_cur, beta2)
        if masks_prev is not None:
            pp = plus & masks_prev[0]
            mm = minus & masks_prev[1]
            if (pp.any() or mm.any()) and sched.stop_on_blow_up:
                u_prev_f, t_prev = u_cur, t_solved
                u_cur, t_solved = u_new, t_cur
                outcome = "blow_up"
                break
        masks_prev = (plus, minus)

        if t_solved is not None:
            diff = float(np.max(np.abs(u_new.packed() - u_cur.packed())))
            sup_prev = records[-2]["sup_u"] if len(records) >= 2 else sup_u
            if (diff <= sched.diff_tol
                    and abs(sup_u - sup_prev) <= sched.diff_tol * (1 + sup_u)):
                u_prev_f, t_prev = u_cur, t_solved
                u_cur, t_solved = u_new, t_cur
                outcome = "converged"
                break
        u_prev_f, t_prev = u_cur, t_solved
        u_cur, t_solved = u_new, t_cur
        t_next = t_cur * sched.ratio
        if t_next < sched.t_min * (1 - 1e-12):
            # schedule exhausted: classify from the final two levels
            if masks_prev is not None and u_prev_f is not None \
                    and t_prev is not None:
                p2, m2 = _blow_masks(u_prev_f, t_prev, beta2)
                if (masks_prev[0] & p2).any() or (masks_prev[1] & m2).any():
                    outcome = "blow_up"
                    break
            outcome = "newton_failure"
            failure = "schedule exhausted without convergence"
            break
        t_cur = t_next

    report = SolveReport(outcome=outcome, records=records,
                         bound_checks={}, beta2=beta2,
                         u_final=u_cur if records else None,
                         u_prev=u_prev_f, t_final=t_solved, t_prev=t_prev,
                         failure=failure, monitor=monitor)
    if outcome == "blow_up" and report.u_final is not None \
            and report.u_prev is not None:
        report.omega_plus, report.omega_minus = detect_blow_up_sets(report)
    alpha_ok = None
    sup_all = max((r["sup_u"] for r in records), default=0.0)
    if bounds.alpha1 is not None and domain.has_boundary:
        alpha_ok = bool(sup_all <= bounds.alpha1 + 1e-8)
    alpha2_ok = None
    if bounds.alpha2 is not None and not domain.has_boundary:
        alpha2_ok = bool(sup_all <= bounds.alpha2 + 1e-8)
    report.bound_checks = {
        "alpha1": ({"bound": bounds.alpha1, "sup_u": sup_all, "pass": alpha_ok}
                   if alpha_ok is not None else None),
        "alpha2": ({"bound": bounds.alpha2, "sup_u": sup_all, "pass": alpha2_ok}
                   if alpha2_ok is not None else None),
        "tu_beta2": {"bound": beta2, "worst_tu": tu_worst, "pass": bool(tu_ok)},
    }
    return report


def detect_blow_up_sets(report):
    """Omega+/- masks from the two smallest recorded t levels."""
    if len(report.records) < 2 or report.u_prev is None \
            or report.u_final is None:
        raise InsufficientHistory("need two recorded t levels")
    p1, m1 = _blow_masks(report.u_final, report.t_final, report.beta2)
    p2, m2 = _blow_masks(report.u_prev, report.t_prev, report.beta2)
    return p1 & p2, m1 & m2


# ---------------------------------------------------------------------------
# comparison and barrier checks


def comparison_check(problem, u1, u2, tol_factor=10.0):
    """Discrete comparison: ordered boundary data gives ordered solutions."""
    layout = u1.layout
    tol_newton = newton_tolerance(problem, layout)
    r1 = float(np.max(np.abs(layout.pack(disc.assemble_residual(problem, u1)))))
    r2 = float(np.max(np.abs(layout.pack(disc.assemble_residual(problem, u2)))))
    if max(r1, r2) > tol_factor * tol_newton:
        raise NotSolutions(f"residuals {r1:.2e}, {r2:.2e} exceed "
                           f"{tol_factor * tol_newton:.2e}")
    t_eff = problem.t + problem.dphi_dz_lower_bound
    tol_cmp = tol_factor * tol_newton / t_eff if t_eff > 0 \
        else tol_factor * tol_newton
    gap = u1.packed() - u2.packed()
    min_gap = float(np.min(gap))
    return {"ok": bool(min_gap >= -tol_cmp), "min_gap": min_gap,
            "tol_cmp": tol_cmp, "residuals": (r1, r2)}


def barrier_check(problem, fld, kappa, nu, d0, tol=1e-10):
    """Log-barrier envelope containment on the collar d <= d0."""
    layout = fld.layout
    if layout.kind == "radial":
        pts = layout.interior_pts
        d = layout.domain.d(pts)
        sel = (d > 0) & (d <= d0)
        u = fld.values
    else:
        pts = layout.pts.reshape(-1, 2)
        d = layout.domain.d(pts)
        sel = layout.interior.ravel() & (d > 0) & (d <= d0)
        u = fld.values.ravel()
    if not np.any(sel):
        raise CollarEmpty(f"no interior nodes with d <= {d0}")
    psi_ext = np.asarray(problem.psi(pts[sel]), float) if problem.psi \
        else np.zeros(int(np.sum(sel)))
    width = np.log1p(kappa * d[sel]) / nu
    over = u[sel] - (psi_ext + width)
    under = (psi_ext - width) - u[sel]
    worst = float(np.max(np.maximum(over, under)))
    return {"ok": bool(worst <= tol), "worst_violation": max(worst, 0.0),
            "n_collar": int(np.sum(sel))}
