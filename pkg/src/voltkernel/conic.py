"""Self-contained second-order cone programming solver.

Problems are given in the standard conic form

    minimize    c'x
    subject to  A x + s = b,   s in K,

where K is a product of zero (equality), nonnegative, and second-order
cone blocks partitioning the rows of A.

The default method runs two stages.  Stage one is operator splitting on
the homogeneous self-dual embedding (SCS-style) with safeguarded
Anderson acceleration; it is cheap per iteration and certifies primal or
dual infeasibility.  On problems with degenerate multiplier faces (the
group-sparse training programs are the motivating case) the splitting
tail is sublinear, so when it stalls short of tolerance a dense Mehrotra
predictor-corrector interior-point stage with Nesterov-Todd scaling
finishes the job.  Dense numpy linear algebra is used throughout; desk
scale problems stay in the low thousands of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

CONE_KINDS = ("zero", "nonneg", "soc")


class SolverFailure(RuntimeError):
    """A solve that was expected to reach optimality did not.

    Carries the ConeSolution (with residuals) as .solution when available.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITERS = 50000
_CHECK_EVERY = 25
_ALPHA = 1.5  # over-relaxation
_RUIZ_PASSES = 10
_AA_MEMORY = 10  # Anderson acceleration history


@dataclass
class ConeProgram:
    """Standard-form conic program.

    cones is an ordered list of (kind, length) pairs with kind in
    {"zero", "nonneg", "soc"}; the blocks partition the rows of A.  For a
    "soc" block of length L the slack satisfies ||s[1:]|| <= s[0]; a
    length-1 soc block degenerates to nonnegativity of that row.
    """

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cones: list[tuple[str, int]]
    var_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        self.A = np.asarray(self.A, dtype=float).reshape(len(self.b), len(self.c))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        total = sum(ln for _, ln in self.cones)
        if total != self.A.shape[0]:
            raise ValueError(
                f"cone lengths sum to {total}, expected {self.A.shape[0]} rows"
            )
        for kind, ln in self.cones:
            if kind not in CONE_KINDS:
                raise ValueError(f"unknown cone kind {kind!r}")
            if ln < 1:
                raise ValueError("cone blocks must have length >= 1")

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]


@dataclass
class ConeSolution:
    x: np.ndarray
    z: np.ndarray
    status: str  # optimal | max_iters | infeasible_detected
    primal_res: float
    dual_res: float
    gap: float
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def project_soc(x: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Euclidean projection of (x, t) onto {(u, s): ||u||_2 <= s}."""
    x = np.asarray(x, dtype=float)
    nx = float(np.linalg.norm(x))
    if nx <= t:
        return x.copy(), float(t)
    if nx <= -t:
        return np.zeros_like(x), 0.0
    a = 0.5 * (t + nx)
    return (a / nx) * x, a


def _project_cone(w: np.ndarray, cones, dual: bool) -> np.ndarray:
    """Project w onto K (dual=False) or onto the dual cone K* (dual=True).

    The dual of a zero block is free, nonnegative and second-order blocks
    are self-dual.
    """
    out = np.empty_like(w)
    i = 0
    for kind, ln in cones:
        blk = w[i : i + ln]
        if kind == "zero":
            out[i : i + ln] = blk if dual else 0.0
        elif kind == "nonneg":
            out[i : i + ln] = np.maximum(blk, 0.0)
        else:
            vec, t = project_soc(blk[1:], blk[0])
            out[i] = t
            out[i + 1 : i + ln] = vec
        i += ln
    return out


def _cone_distance(w: np.ndarray, cones, dual: bool) -> float:
    return float(np.linalg.norm(w - _project_cone(w, cones, dual)))


class _ConePlan:
    """Precomputed index structure for fast repeated dual-cone projection.

    Second-order blocks are grouped by length so each group projects as
    one batched operation instead of a Python loop per block.
    """

    def __init__(self, cones):
        zero_idx = []
        nonneg_idx = []
        soc_groups: dict[int, list[int]] = {}
        i = 0
        for kind, ln in cones:
            if kind == "zero":
                zero_idx.extend(range(i, i + ln))
            elif kind == "nonneg":
                nonneg_idx.extend(range(i, i + ln))
            elif ln == 1:
                nonneg_idx.append(i)
            else:
                soc_groups.setdefault(ln, []).append(i)
            i += ln
        self.zero_idx = np.array(zero_idx, dtype=int)
        self.nonneg_idx = np.array(nonneg_idx, dtype=int)
        self.soc = [(np.array(starts, dtype=int)[:, None] + np.arange(ln)[None, :])
                    for ln, starts in sorted(soc_groups.items())]

    def project_dual(self, w: np.ndarray) -> np.ndarray:
        """Project onto K*: zero rows free, nonneg and soc self-dual."""
        out = w.copy()
        if self.nonneg_idx.size:
            out[self.nonneg_idx] = np.maximum(w[self.nonneg_idx], 0.0)
        for idx in self.soc:
            blk = w[idx]                       # (B, L)
            t = blk[:, 0]
            x = blk[:, 1:]
            nx = np.linalg.norm(x, axis=1)
            inside = nx <= t
            polar = nx <= -t
            a = 0.5 * (t + nx)
            scale = np.where(nx > 0, a / np.where(nx > 0, nx, 1.0), 0.0)
            proj = np.empty_like(blk)
            proj[:, 0] = np.where(inside, t, np.where(polar, 0.0, a))
            proj[:, 1:] = np.where(inside[:, None], x,
                                   np.where(polar[:, None], 0.0,
                                            scale[:, None] * x))
            out[idx] = proj
        return out


def _soc_row_groups(cones):
    """Index blocks whose row scaling must stay uniform (soc blocks)."""
    groups = []
    i = 0
    for kind, ln in cones:
        if kind == "soc" and ln > 1:
            groups.append((i, i + ln))
        i += ln
    return groups


def _equilibrate(A: np.ndarray, cones):
    """Ruiz row/column equilibration with cone-uniform row scales."""
    m, n = A.shape
    d = np.ones(m)
    e = np.ones(n)
    groups = _soc_row_groups(cones)
    for _ in range(_RUIZ_PASSES):
        As = d[:, None] * A * e[None, :]
        rn = np.abs(As).max(axis=1) if n else np.zeros(m)
        for lo, hi in groups:
            rn[lo:hi] = rn[lo:hi].max()
        cn = np.abs(As).max(axis=0) if m else np.zeros(n)
        rn[rn < 1e-12] = 1.0
        cn[cn < 1e-12] = 1.0
        d /= np.sqrt(rn)
        e /= np.sqrt(cn)
    return d, e


def residuals(prog: ConeProgram, x: np.ndarray, z: np.ndarray):
    """Scaled KKT residuals (primal, dual, gap) for a candidate pair.

    The primal slack is completed as the projection of b - Ax onto K, so
    the primal residual is the cone distance of b - Ax; the dual residual
    combines stationarity ||A'z + c|| with the cone distance of z from
    K*.  Both are scaled by 1 + ||b|| and 1 + ||c|| respectively.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.shape != (prog.n_vars,) or z.shape != (prog.n_rows,):
        raise ValueError("residuals: dimension mismatch with program")
    if prog.n_rows == 0:
        nc = float(np.linalg.norm(prog.c))
        return 0.0, nc / (1.0 + nc), 0.0
    w = prog.b - prog.A @ x
    pres = _cone_distance(w, prog.cones, dual=False) / (1.0 + np.linalg.norm(prog.b))
    stat = np.linalg.norm(prog.A.T @ z + prog.c)
    memb = _cone_distance(z, prog.cones, dual=True)
    dres = (stat + memb) / (1.0 + np.linalg.norm(prog.c))
    ctx = float(prog.c @ x)
    bty = float(prog.b @ z)
    gap = abs(ctx + bty) / (1.0 + abs(ctx) + abs(bty))
    return float(pres), float(dres), float(gap)


def solve(prog: ConeProgram, tol: float = DEFAULT_TOL,
          max_iters: int = DEFAULT_MAX_ITERS, method: str = "hybrid") -> ConeSolution:
    """Solve a conic program; deterministic for identical inputs.

    method "hybrid" (default) runs the operator-splitting stage and, if
    it stalls or runs out of budget without certifying optimality or
    infeasibility, finishes with the interior-point stage.  "splitting"
    and "ipm" run a single stage.

    Returns a ConeSolution whose status is "optimal" when the unscaled
    primal/dual residuals and duality gap all fall below tol,
    "infeasible_detected" when a primal or dual infeasibility certificate
    of quality tol is found, and "max_iters" otherwise (the last iterate
    is still returned).
    """
    if prog.n_rows == 0:
        # unconstrained: only c = 0 is bounded; report x = 0 either way
        nc = float(np.linalg.norm(prog.c))
        status = "optimal" if nc == 0.0 else "infeasible_detected"
        return ConeSolution(np.zeros(prog.n_vars), np.zeros(0), status,
                            0.0, 0.0, 0.0, 0)
    if method == "ipm":
        return _solve_ipm(prog, tol, max_iters)
    first = _solve_splitting(prog, tol, max_iters,
                             stall_exit=(method == "hybrid"))
    if method == "splitting" or first.status != "max_iters":
        return first
    second = _solve_ipm(prog, tol, max_iters, base_iters=first.iterations)
    if second.status == "optimal":
        return second
    worst = lambda s: max(s.primal_res, s.dual_res, s.gap)
    return second if worst(second) < worst(first) else first


def _solve_splitting(prog: ConeProgram, tol: float, max_iters: int,
                     stall_exit: bool = False) -> ConeSolution:
    """Anderson-accelerated Douglas-Rachford on the self-dual embedding.

    With stall_exit, gives up early once the residual stops improving so
    the interior-point stage can take over.
    """
    m, n = prog.n_rows, prog.n_vars
    A, b, c = prog.A, prog.b, prog.c
    norm_b = float(np.linalg.norm(b))
    norm_c = float(np.linalg.norm(c))

    plan = _ConePlan(prog.cones)
    d, e = _equilibrate(A, prog.cones)
    Ah = d[:, None] * A * e[None, :]
    sigma = 1.0 / (1.0 + np.linalg.norm(d * b))
    rho = 1.0 / (1.0 + np.linalg.norm(e * c))
    bh = sigma * (d * b)
    ch = rho * (e * c)

    # factor I + Ah'Ah once; (I + Q) solves reduce to it
    G = np.eye(n) + Ah.T @ Ah
    chol = cho_factor(G, lower=True)

    def msolve(wx, wy):
        zx = cho_solve(chol, wx - Ah.T @ wy)
        return zx, wy + Ah @ zx

    gx, gy = msolve(ch, bh)
    denom = 1.0 + float(ch @ gx + bh @ gy)
    sl_y = slice(n, n + m)

    def pi_c(xi):
        """Project onto C = R^n x K* x R_+ (the u-cone of the embedding)."""
        u = xi.copy()
        u[sl_y] = plan.project_dual(xi[sl_y])
        u[-1] = max(xi[-1], 0.0)
        return u

    def dr_step(xi, u):
        """Relaxed Douglas-Rachford: xi + alpha * ((I+Q)^{-1}(2u - xi) - u)."""
        w = 2.0 * u - xi
        px, py = msolve(w[:n], w[sl_y])
        zt = (w[-1] + float(ch @ px + bh @ py)) / denom
        step = np.empty_like(xi)
        step[:n] = px - zt * gx
        step[sl_y] = py - zt * gy
        step[-1] = zt
        return xi + _ALPHA * (step - u)

    def fixed_point_residual(xi):
        u = pi_c(xi)
        return dr_step(xi, u) - xi, u

    xi = np.zeros(n + m + 1)
    xi[-1] = 1.0
    g, u = fixed_point_residual(xi)
    dxi_hist: list[np.ndarray] = []
    dg_hist: list[np.ndarray] = []

    status = "max_iters"
    iters = max_iters
    res_history: list[tuple[int, float]] = []

    for k in range(max_iters):
        accepted = False
        if dg_hist:
            # Anderson acceleration (type II), safeguarded by the
            # fixed-point residual so plain splitting is never worse
            G = np.column_stack(dg_hist)
            gamma, *_ = np.linalg.lstsq(G, g, rcond=None)
            cand = xi + g - (np.column_stack(dxi_hist) + G) @ gamma
            g_cand, u_cand = fixed_point_residual(cand)
            if np.linalg.norm(g_cand) < np.linalg.norm(g):
                dxi_hist.append(cand - xi)
                dg_hist.append(g_cand - g)
                xi, g, u = cand, g_cand, u_cand
                accepted = True
            else:
                dxi_hist.clear()
                dg_hist.clear()
        if not accepted:
            xi_new = xi + g
            g_new, u_new = fixed_point_residual(xi_new)
            dxi_hist.append(xi_new - xi)
            dg_hist.append(g_new - g)
            xi, g, u = xi_new, g_new, u_new
        if len(dg_hist) > _AA_MEMORY:
            dxi_hist.pop(0)
            dg_hist.pop(0)

        if (k + 1) % _CHECK_EVERY != 0 and k + 1 != max_iters:
            continue

        ux, uy, ut = u[:n], u[sl_y], u[-1]
        vy = uy - xi[sl_y]
        scale = max(1.0, abs(ut), float(np.abs(u).max(initial=0.0)))
        if ut > 1e-12 * scale:
            x = (e * ux) / (sigma * ut)
            y = (d * uy) / (rho * ut)
            s = (vy / d) / (sigma * ut)
            pr = np.linalg.norm(A @ x + s - b) / (1.0 + norm_b)
            dr = np.linalg.norm(A.T @ y + c) / (1.0 + norm_c)
            ctx = float(c @ x)
            bty = float(b @ y)
            gp = abs(ctx + bty) / (1.0 + abs(ctx) + abs(bty))
            if pr <= tol and dr <= tol and gp <= tol:
                status = "optimal"
                iters = k + 1
                break
            if stall_exit:
                # sublinear tail: <10% improvement over ~1000 iterations
                res_history.append((k + 1, max(pr, dr, gp)))
                ref = next((r for ki, r in res_history if ki >= k + 1 - 1000), None)
                if k + 1 >= 2000 and ref is not None and max(pr, dr, gp) > 0.9 * ref:
                    iters = k + 1
                    break
        # infeasibility certificates on the un-normalized iterate
        yc = (d * uy) / rho
        bty = float(b @ yc)
        if norm_b > 0 and bty < -1e-12:
            if np.linalg.norm(A.T @ yc) * norm_b <= -bty * tol * 1e3:
                status = "infeasible_detected"
                iters = k + 1
                break
        xc = (e * ux) / sigma
        ctx = float(c @ xc)
        if norm_c > 0 and ctx < -1e-12:
            sc = (vy / d) / sigma
            if np.linalg.norm(A @ xc + sc) * norm_c <= -ctx * tol * 1e3:
                status = "infeasible_detected"
                iters = k + 1
                break

    u = pi_c(xi)
    tau = u[-1] if u[-1] > 1e-12 else 1.0
    x = (e * u[:n]) / (sigma * tau)
    z = (d * u[sl_y]) / (rho * tau)
    pres, dres, gap = residuals(prog, x, z)
    return ConeSolution(x, z, status, pres, dres, gap, iters)


# ---------------------------------------------------------------------------
# interior-point stage

def _cone_rows(cones):
    """Row index arrays: (equality, nonnegative, soc blocks as (start, len))."""
    eq, nn, soc = [], [], []
    i = 0
    for kind, ln in cones:
        if kind == "zero":
            eq.extend(range(i, i + ln))
        elif kind == "nonneg" or ln == 1:
            nn.extend(range(i, i + ln))
        else:
            soc.append((i, ln))
        i += ln
    return np.array(eq, dtype=int), np.array(nn, dtype=int), soc


def _jdet(u):
    return u[0] ** 2 - float(u[1:] @ u[1:])


def _jprod(u, v):
    out = np.empty_like(u)
    out[0] = float(u @ v)
    out[1:] = u[0] * v[1:] + v[0] * u[1:]
    return out


def _jsolve(lam, d):
    """Solve lam o x = d in the second-order cone Jordan algebra."""
    det = _jdet(lam)
    x = np.empty_like(d)
    x[0] = (lam[0] * d[0] - float(lam[1:] @ d[1:])) / det
    x[1:] = (d[1:] - x[0] * lam[1:]) / lam[0]
    return x


def _soc_step_bound(s, ds):
    """Largest alpha with s + alpha*ds in the second-order cone."""
    a = _jdet(ds)
    b2 = s[0] * ds[0] - float(s[1:] @ ds[1:])
    c0 = _jdet(s)
    roots = []
    if abs(a) < 1e-300:
        if b2 < 0:
            roots.append(-c0 / (2.0 * b2))
    else:
        disc = b2 * b2 - a * c0
        if disc >= 0:
            sq = np.sqrt(disc)
            roots.extend([(-b2 - sq) / a, (-b2 + sq) / a])
    pos = [r for r in roots if r > 1e-14]
    return min(pos) if pos else np.inf


class _NTScaling:
    """Nesterov-Todd scaling of one iterate.

    For a second-order block the scaling is W = eta * H(wbar) with
    H(wbar)^2 = 2 wbar wbar' - R (R the reflection diag(1, -1, ..)), so
    W^2 v = eta^2 (2 wbar (wbar'v) - R v) and W^{-1} = H(R wbar) / eta.
    The defining property W z = W^{-1} s is exercised by the unit tests.
    """

    def __init__(self, cones, s, z):
        self.eq, self.nn, self.soc = cones
        self.w_nn = np.sqrt(s[self.nn] / z[self.nn]) if self.nn.size else np.zeros(0)
        self.soc_data = []
        if self.nn.size and not np.all(np.isfinite(self.w_nn) & (self.w_nn > 0)):
            raise FloatingPointError("iterate left the cone interior")
        for (i, ln) in self.soc:
            sb, zb = s[i:i + ln], z[i:i + ln]
            js, jz = _jdet(sb), _jdet(zb)
            if not (js > 1e-300 and jz > 1e-300 and sb[0] > 0 and zb[0] > 0):
                raise FloatingPointError("iterate left the cone interior")
            sbar = sb / np.sqrt(js)
            zbar = zb / np.sqrt(jz)
            gam = np.sqrt((1.0 + float(sbar @ zbar)) / 2.0)
            wbar = sbar.copy()
            wbar[0] += zbar[0]
            wbar[1:] -= zbar[1:]
            wbar /= 2.0 * gam
            eta = (js / jz) ** 0.25
            if not (np.all(np.isfinite(wbar)) and np.isfinite(eta) and eta > 0):
                raise FloatingPointError("scaling overflow")
            self.soc_data.append((i, ln, wbar, eta))

    @staticmethod
    def _apply_h(wbar, v, flip):
        """H(wbar) v, or H(R wbar) v when flip is set."""
        w1 = -wbar[1:] if flip else wbar[1:]
        dot = float(w1 @ v[1:])
        out = np.empty_like(v)
        out[0] = wbar[0] * v[0] + dot
        out[1:] = v[0] * w1 + v[1:] + (dot / (1.0 + wbar[0])) * w1
        return out

    def apply_w(self, v):
        out = v.copy()
        if self.nn.size:
            out[self.nn] = v[self.nn] * self.w_nn
        for (i, ln, wbar, eta) in self.soc_data:
            out[i:i + ln] = eta * self._apply_h(wbar, v[i:i + ln], flip=False)
        return out

    def apply_winv(self, v):
        out = v.copy()
        if self.nn.size:
            out[self.nn] = v[self.nn] / self.w_nn
        for (i, ln, wbar, eta) in self.soc_data:
            out[i:i + ln] = self._apply_h(wbar, v[i:i + ln], flip=True) / eta
        return out

    def winv2_apply(self, v):
        """W^{-2} v = (2 u (u'v) - R v) / eta^2 with u = R wbar."""
        out = v.copy()
        if self.nn.size:
            out[self.nn] = v[self.nn] / (self.w_nn ** 2)
        for (i, ln, wbar, eta) in self.soc_data:
            blk = v[i:i + ln]
            u = wbar.copy()
            u[1:] = -u[1:]
            rv = -blk.copy()
            rv[0] = blk[0]
            out[i:i + ln] = (2.0 * float(u @ blk) * u - rv) / (eta * eta)
        return out

    def winv2_matrix(self, A_scaled, cache):
        """H = A_C' W^{-2} A_C over the conic rows, using cached B'B blocks."""
        n = A_scaled.shape[1]
        H = np.zeros((n, n))
        if self.nn.size:
            dnn = 1.0 / (self.w_nn ** 2)
            B = A_scaled[self.nn]
            H += (B * dnn[:, None]).T @ B
        for (i, ln, wbar, eta) in self.soc_data:
            B = A_scaled[i:i + ln]
            u = wbar.copy()
            u[1:] = -u[1:]
            Bu = B.T @ u
            B0 = B[0]
            # B' R B = 2 B0 B0' - B'B
            blk = cache[i] - 2.0 * np.outer(B0, B0) + 2.0 * np.outer(Bu, Bu)
            H += blk / (eta * eta)
        return H


def _cone_unit(cones_rows, m):
    eq, nn, soc = cones_rows
    e = np.zeros(m)
    e[nn] = 1.0
    for (i, ln) in soc:
        e[i] = 1.0
    return e


def _solve_ipm(prog: ConeProgram, tol: float, max_iters: int,
               base_iters: int = 0) -> ConeSolution:
    """Dense Mehrotra predictor-corrector with Nesterov-Todd scaling."""
    m, n = prog.n_rows, prog.n_vars
    A, b, c = prog.A, prog.b, prog.c
    d, e = _equilibrate(A, prog.cones)
    Ah = d[:, None] * A * e[None, :]
    bh = d * b
    ch = e * c
    rows = _cone_rows(prog.cones)
    eq, nn, soc = rows
    p = eq.size
    nu = nn.size + len(soc)
    e_unit = _cone_unit(rows, m)
    conic_mask = np.ones(m, dtype=bool)
    conic_mask[eq] = False

    # cache B'B for the soc blocks; these never change across iterations
    cache = {i: Ah[i:i + ln].T @ Ah[i:i + ln] for (i, ln) in soc}

    if nu == 0:
        # pure equality problem: one least-squares KKT solve
        x = np.linalg.lstsq(Ah[eq], bh[eq], rcond=None)[0] if p else np.zeros(n)
        z = np.zeros(m)
        if p:
            z[eq] = np.linalg.lstsq(Ah[eq].T, -ch, rcond=None)[0]
        x = e * x
        zu = d * z
        pres, dres, gap = residuals(prog, x, zu)
        ok = max(pres, dres, gap) <= tol
        return ConeSolution(x, zu, "optimal" if ok else "max_iters",
                            pres, dres, gap, base_iters + 1)

    x = np.zeros(n)
    s = e_unit.copy()
    z = e_unit.copy()

    best = None
    best_res = np.inf
    no_progress = 0
    iters_used = 0

    for it in range(1, min(100, max(2, max_iters)) + 1):
        iters_used = it
        # unscaled residual check
        xu = e * x
        zu = d * z
        pres, dres, gap = residuals(prog, xu, zu)
        worst = max(pres, dres, gap)
        if worst < best_res:
            no_progress = 0
            best_res = worst
            best = (xu.copy(), zu.copy(), pres, dres, gap)
        else:
            no_progress += 1
        if worst <= tol:
            return ConeSolution(xu, zu, "optimal", pres, dres, gap,
                                base_iters + it)
        if no_progress >= 10:
            break

        rp = bh - Ah @ x - s
        rd = -ch - Ah.T @ z
        mu = float(s[conic_mask] @ z[conic_mask]) / nu

        try:
            W = _NTScaling(rows, s, z)
        except FloatingPointError:
            break
        lam = W.apply_w(z)

        H = W.winv2_matrix(Ah, cache)
        if not np.all(np.isfinite(H)):
            break
        reg = 1e-12 * max(1.0, float(np.trace(H)) / n)
        H[np.diag_indices(n)] += reg
        if p:
            KKT = np.zeros((n + p, n + p))
            KKT[:n, :n] = H
            KKT[:n, n:] = Ah[eq].T
            KKT[n:, :n] = Ah[eq]
            KKT[n:, n:] = -reg * np.eye(p)
            try:
                fac = lu_factor(KKT)
            except np.linalg.LinAlgError:
                break
            def kkt_solve(r1, r2):
                rhs = np.concatenate([r1, r2])
                sol = lu_solve(fac, rhs)
                sol += lu_solve(fac, rhs - KKT @ sol)  # one refinement pass
                return sol[:n], sol[n:]
        else:
            try:
                fac = cho_factor(H, lower=True)
            except np.linalg.LinAlgError:
                break
            def kkt_solve(r1, r2):
                sol = cho_solve(fac, r1)
                sol += cho_solve(fac, r1 - H @ sol)  # one refinement pass
                return sol, np.zeros(0)

        def direction(dtilde):
            """Newton direction for comp. target W dz + W^{-1} ds = dtilde."""
            rhs_c = rp.copy()
            rhs_c[conic_mask] -= W.apply_w(dtilde)[conic_mask]
            r1 = rd + Ah[conic_mask].T @ W.winv2_apply(
                np.where(conic_mask, rhs_c, 0.0))[conic_mask]
            dx, dz_eq = kkt_solve(r1, rp[eq] if p else np.zeros(0))
            dz = np.zeros(m)
            if p:
                dz[eq] = dz_eq
            t = Ah @ dx - rhs_c
            dz[conic_mask] = W.winv2_apply(np.where(conic_mask, t, 0.0))[conic_mask]
            ds = np.where(conic_mask, rp - Ah @ dx, 0.0)
            return dx, dz, ds

        def jordan_all(u, v):
            out = np.zeros(m)
            out[nn] = u[nn] * v[nn]
            for (i, ln) in soc:
                out[i:i + ln] = _jprod(u[i:i + ln], v[i:i + ln])
            return out

        def jordan_solve_all(lamv, dv):
            out = np.zeros(m)
            out[nn] = dv[nn] / lamv[nn]
            for (i, ln) in soc:
                out[i:i + ln] = _jsolve(lamv[i:i + ln], dv[i:i + ln])
            return out

        def step_bound(v, dv):
            alpha = np.inf
            neg = dv[nn] < 0
            if np.any(neg):
                alpha = float(np.min(-v[nn][neg] / dv[nn][neg]))
            for (i, ln) in soc:
                alpha = min(alpha, _soc_step_bound(v[i:i + ln], dv[i:i + ln]))
            return alpha

        # predictor: lam \ (-lam o lam) = -lam
        dx_a, dz_a, ds_a = direction(-lam)
        if not (np.all(np.isfinite(dx_a)) and np.all(np.isfinite(dz_a))
                and np.all(np.isfinite(ds_a))):
            break
        alpha_a = min(1.0, step_bound(s, ds_a), step_bound(z, dz_a))
        mu_aff = float((s + alpha_a * ds_a)[conic_mask]
                       @ (z + alpha_a * dz_a)[conic_mask]) / nu
        sig = min(1.0, max(0.0, mu_aff / mu)) ** 3

        # corrector with Mehrotra second-order term
        comp = -jordan_all(lam, lam) \
            - jordan_all(W.apply_winv(ds_a), W.apply_w(dz_a)) \
            + sig * mu * e_unit
        dtilde = jordan_solve_all(lam, comp)
        dx, dz, ds = direction(dtilde)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz))
                and np.all(np.isfinite(ds))):
            break
        alpha = min(1.0, 0.99 * step_bound(s, ds), 0.99 * step_bound(z, dz))
        if alpha <= 1e-13:
            break
        x += alpha * dx
        s += alpha * ds
        s[eq] = 0.0
        z += alpha * dz

    if best is None:
        xu, zu = e * x, d * z
        pres, dres, gap = residuals(prog, xu, zu)
        best = (xu, zu, pres, dres, gap)
    xu, zu, pres, dres, gap = best
    return ConeSolution(xu, zu, "max_iters", pres, dres, gap,
                        base_iters + iters_used)


def dump_program(prog: ConeProgram, path) -> None:
    """Write a program as plain text: cone lines then row/col/value triplets."""
    with open(path, "w") as fh:
        fh.write(f"dims {prog.n_rows} {prog.n_vars}\n")
        for kind, ln in prog.cones:
            fh.write(f"cone {kind} {ln}\n")
        for j, v in enumerate(prog.c):
            if v != 0.0:
                fh.write(f"c {j} {float(v)!r}\n")
        for i, v in enumerate(prog.b):
            if v != 0.0:
                fh.write(f"b {i} {float(v)!r}\n")
        rows, cols = np.nonzero(prog.A)
        for i, j in zip(rows, cols):
            fh.write(f"A {i} {j} {float(prog.A[i, j])!r}\n")


def load_program(path) -> ConeProgram:
    """Read a program written by dump_program."""
    cones: list[tuple[str, int]] = []
    m = n = None
    entries = {"c": [], "b": [], "A": []}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "dims":
                m, n = int(parts[1]), int(parts[2])
            elif tag == "cone":
                cones.append((parts[1], int(parts[2])))
            elif tag in entries:
                entries[tag].append(parts[1:])
            else:
                raise ValueError(f"unrecognized line in program dump: {line!r}")
    if m is None:
        raise ValueError("program dump missing dims line")
    c = np.zeros(n)
    b = np.zeros(m)
    A = np.zeros((m, n))
    for j, v in entries["c"]:
        c[int(j)] = float(v)
    for i, v in entries["b"]:
        b[int(i)] = float(v)
    for i, j, v in entries["A"]:
        A[int(i), int(j)] = float(v)
    return ConeProgram(c=c, A=A, b=b, cones=cones)
