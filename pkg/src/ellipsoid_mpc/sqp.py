"""SQP solver with a Gauss-Newton Hessian and an embedded interior-point QP.

The nonlinear program comes in as a :class:`~ellipsoid_mpc.ocp.StagewiseNLP`.
Each iteration linearizes the dynamics and collision rows at the current
iterate, condenses the state blocks onto the inputs (the initial state is
pinned, so states are affine in the input steps), regularizes the
gamma/eta Hessian blocks (zero under Gauss-Newton because the objective does
not depend on them), solves one convex QP with Mehrotra's predictor-corrector
method, and takes the full step. No line search: L1 slack penalties on the
collision rows keep the subproblems feasible, which matches real-time
iteration practice where the loop is cut after a fixed number of iterations.

``qp_solve`` is usable standalone on dense convex QPs

    min 1/2 w'Hw + g'w  s.t.  A w = b,  C w >= d,  lb <= w <= ub.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .ocp import StagewiseNLP

__all__ = [
    "SqpSettings",
    "SqpStatus",
    "SqpResult",
    "QpResult",
    "qp_solve",
    "regularize_hessian",
    "solve",
]

_EQ_FEAS_TOL = 1e-8


@dataclass(frozen=True)
class SqpSettings:
    """Iteration limits and tolerances for the SQP loop and the inner QP."""

    max_sqp_iters: int = 30
    kkt_tol: float = 1e-7
    gamma_block_reg: float = 1e-4
    qp_max_iters: int = 100
    qp_tol: float = 1e-9

    def __post_init__(self):
        if self.max_sqp_iters < 1 or self.qp_max_iters < 1:
            raise ValueError("iteration limits must be positive")
        if self.kkt_tol < 1e-12:
            raise ValueError("kkt_tol must be at least 1e-12")
        if self.gamma_block_reg <= 0.0 or self.qp_tol <= 0.0:
            raise ValueError("regularization and qp_tol must be positive")


class SqpStatus(enum.Enum):
    CONVERGED = "converged"
    ITER_LIMIT = "iter_limit"
    QP_FAILURE = "qp_failure"


@dataclass
class SqpResult:
    states: np.ndarray
    inputs: np.ndarray
    params: np.ndarray
    slacks: np.ndarray
    objective: float
    tracking_cost: float
    kkt_residual: float
    iterations: int
    qp_iterations: int
    status: SqpStatus
    message: str = ""

    @property
    def max_slack(self) -> float:
        return float(self.slacks.max()) if self.slacks.size else 0.0


def regularize_hessian(blocks: dict, reg: float) -> dict:
    """Add reg*I to the 'param' Hessian block, leaving the others untouched.

    Under Gauss-Newton the gamma/eta blocks are exactly zero, so without this
    term the QP would take unbounded steps in those directions.
    """
    out = {name: np.array(mat, dtype=float) for name, mat in blocks.items()}
    param = out.get("param")
    if param is not None and param.size:
        out["param"] = param + reg * np.eye(param.shape[0])
    return out


# ---------------------------------------------------------------------------
# dense convex QP: Mehrotra predictor-corrector interior point
# ---------------------------------------------------------------------------


@dataclass
class QpResult:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    lb_duals: np.ndarray
    ub_duals: np.ndarray
    iterations: int
    status: str
    residual: float
    gap: float


def _solve_kkt(K, A):
    """Factor [[K, A'], [A, 0]]; returns solver(r, q) for K dx - A' dy = r, A dx = -q."""
    n = K.shape[0]
    if A is None or A.shape[0] == 0:
        K.flat[:: n + 1] += 1e-12
        try:
            factor = cho_factor(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            K.flat[:: n + 1] += 1e-8
            factor = cho_factor(K, lower=True, check_finite=False)

        def solver(r, q):
            return cho_solve(factor, r, check_finite=False), np.zeros(0)

        return solver
    m = A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = K
    kkt.flat[: (n + m) * n : n + m + 1] += 1e-12
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    factor = lu_factor(kkt, check_finite=False)

    def solver(r, q):
        sol = lu_solve(factor, np.concatenate([r, -q]), check_finite=False)
        return sol[:n], -sol[n:]

    return solver


def _max_step(v, dv, cap=1.0):
    """Largest alpha <= cap with v + alpha dv >= 0 for positive v."""
    mask = dv < 0.0
    if not np.any(mask):
        return cap
    return min(cap, float(np.min(-v[mask] / dv[mask])))


def qp_solve(
    H,
    g,
    A=None,
    b=None,
    C=None,
    d=None,
    lb=None,
    ub=None,
    tol: float = 1e-9,
    max_iterations: int = 100,
    x0=None,
    ineq_duals0=None,
) -> QpResult:
    """Dense convex QP by a primal-dual interior-point method.

    Mehrotra predictor-corrector steps on the system with inequality slacks
    and strictly interior bound variables; the predictor factorization is
    reused for the corrector. Equality constraints enter the Newton KKT
    system directly. Variables whose bounds pin them (ub - lb below 1e-12)
    are eliminated up front.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).reshape(-1)
    n = g.size
    A = None if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = None if b is None else np.asarray(b, dtype=float).reshape(-1)
    C = None if C is None else np.asarray(C, dtype=float).reshape(-1, n)
    d = None if d is None else np.asarray(d, dtype=float).reshape(-1)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).reshape(-1)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).reshape(-1)

    fixed = ub - lb <= 1e-12
    if np.any(fixed):
        return _solve_with_fixed_vars(
            H, g, A, b, C, d, lb, ub, fixed, tol, max_iterations, x0, ineq_duals0
        )

    mi = 0 if C is None else C.shape[0]
    me = 0 if A is None else A.shape[0]
    lb_idx = np.where(np.isfinite(lb))[0]
    ub_idx = np.where(np.isfinite(ub))[0]
    nl, nu = lb_idx.size, ub_idx.size

    # no interior-point machinery needed without inequalities or bounds
    if mi == 0 and nl == 0 and nu == 0:
        solver = _solve_kkt(H, A)
        x, y = solver(-g, -b if me else np.zeros(0))
        resid = float(np.abs(H @ x + g - (A.T @ y if me else 0.0)).max())
        return QpResult(x, y, np.zeros(0), np.zeros(n), np.zeros(n), 1, "optimal", resid, 0.0)

    # strictly interior start
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    margin = 0.1
    x[lb_idx] = np.maximum(x[lb_idx], lb[lb_idx] + margin)
    x[ub_idx] = np.minimum(x[ub_idx], ub[ub_idx] - margin)
    both = np.isfinite(lb) & np.isfinite(ub)
    gap = ub[both] - lb[both]
    x[both] = np.clip(x[both], lb[both] + 0.1 * gap, ub[both] - 0.1 * gap)
    y = np.zeros(me)
    s = np.maximum(C @ x - d, 1.0) if mi else np.zeros(0)
    z = np.ones(mi)
    if ineq_duals0 is not None and mi:
        z = np.clip(np.asarray(ineq_duals0, dtype=float).reshape(-1), 1e-2, 1e6)
    pl = x[lb_idx] - lb[lb_idx]
    pu = ub[ub_idx] - x[ub_idx]
    zl = np.ones(nl)
    zu = np.ones(nu)

    scale_d = 1.0 + float(np.abs(g).max(initial=0.0))
    scale_p = 1.0 + max(
        float(np.abs(b).max(initial=0.0)) if me else 0.0,
        float(np.abs(d).max(initial=0.0)) if mi else 0.0,
    )
    n_comp = max(mi + nl + nu, 1)
    # reused buffers: fresh temporaries make BLAS markedly slower here
    gram_buf = np.empty_like(C) if mi else None
    k_buf = np.empty_like(H)
    status = "max_iterations"
    iterations = 0
    for it in range(max_iterations):
        iterations = it + 1
        rd = H @ x + g
        if me:
            rd -= A.T @ y
        if mi:
            rd -= C.T @ z
        rd_l = np.zeros(n)
        rd_l[lb_idx] = zl
        rd_u = np.zeros(n)
        rd_u[ub_idx] = zu
        rd = rd - rd_l + rd_u
        rp = (A @ x - b) if me else np.zeros(0)
        rc = (C @ x - s - d) if mi else np.zeros(0)
        mu = (float(s @ z) + float(pl @ zl) + float(pu @ zu)) / n_comp

        # complementarity held absolute: inactive-row duals must truly vanish
        # or they pollute downstream multiplier-based KKT checks
        if (
            float(np.abs(rd).max(initial=0.0)) <= tol * scale_d
            and float(np.abs(rp).max(initial=0.0)) <= tol * scale_p
            and float(np.abs(rc).max(initial=0.0)) <= tol * scale_p
            and mu <= tol
        ):
            status = "optimal"
            break

        if not np.isfinite(mu) or mu > 1e16:
            status = "failed"
            break

        W = z / s if mi else np.zeros(0)
        np.copyto(k_buf, H)
        K = k_buf
        if mi:
            np.multiply(W[:, None], C, out=gram_buf)
            K += C.T @ gram_buf
        diag = np.zeros(n)
        diag[lb_idx] += zl / pl
        diag[ub_idx] += zu / pu
        K.flat[:: n + 1] += diag
        try:
            solver = _solve_kkt(K, A)
        except np.linalg.LinAlgError:
            status = "failed"
            break

        def newton_rhs(rsz, rl, ru):
            rhs = -rd.copy()
            if mi:
                rhs -= C.T @ ((rsz + z * rc) / s)
            tmp_l = np.zeros(n)
            tmp_l[lb_idx] = rl / pl
            tmp_u = np.zeros(n)
            tmp_u[ub_idx] = ru / pu
            rhs = rhs - tmp_l + tmp_u
            return rhs

        def back_substitute(dx, rsz, rl, ru):
            ds = (C @ dx + rc) if mi else np.zeros(0)
            dz = -(rsz + z * ds) / s if mi else np.zeros(0)
            dzl = -(rl + zl * dx[lb_idx]) / pl
            dzu = -(ru - zu * dx[ub_idx]) / pu
            return ds, dz, dzl, dzu

        # predictor
        rsz = s * z
        rl = pl * zl
        ru = pu * zu
        dx_a, dy_a = solver(newton_rhs(rsz, rl, ru), rp)
        ds_a, dz_a, dzl_a, dzu_a = back_substitute(dx_a, rsz, rl, ru)
        alpha_p = min(
            _max_step(s, ds_a) if mi else 1.0,
            _max_step(pl, dx_a[lb_idx]) if nl else 1.0,
            _max_step(pu, -dx_a[ub_idx]) if nu else 1.0,
        )
        alpha_d = min(
            _max_step(z, dz_a) if mi else 1.0,
            _max_step(zl, dzl_a) if nl else 1.0,
            _max_step(zu, dzu_a) if nu else 1.0,
        )
        mu_aff = (
            float((s + alpha_p * ds_a) @ (z + alpha_d * dz_a)) if mi else 0.0
        )
        mu_aff += float((pl + alpha_p * dx_a[lb_idx]) @ (zl + alpha_d * dzl_a))
        mu_aff += float((pu - alpha_p * dx_a[ub_idx]) @ (zu + alpha_d * dzu_a))
        mu_aff /= n_comp
        sigma = min(max((mu_aff / mu) ** 3 if mu > 0 else 0.0, 1e-10), 1.0)

        # corrector reuses the factorization
        rsz_c = rsz + ds_a * dz_a - sigma * mu
        rl_c = rl + dx_a[lb_idx] * dzl_a - sigma * mu
        ru_c = ru + (-dx_a[ub_idx]) * dzu_a - sigma * mu
        dx, dy = solver(newton_rhs(rsz_c, rl_c, ru_c), rp)
        ds, dz, dzl, dzu = back_substitute(dx, rsz_c, rl_c, ru_c)

        tau = 0.995
        alpha_p = min(
            _max_step(s, ds, 1.0 / tau) if mi else 1.0 / tau,
            _max_step(pl, dx[lb_idx], 1.0 / tau) if nl else 1.0 / tau,
            _max_step(pu, -dx[ub_idx], 1.0 / tau) if nu else 1.0 / tau,
        )
        alpha_d = min(
            _max_step(z, dz, 1.0 / tau) if mi else 1.0 / tau,
            _max_step(zl, dzl, 1.0 / tau) if nl else 1.0 / tau,
            _max_step(zu, dzu, 1.0 / tau) if nu else 1.0 / tau,
        )
        alpha_p = min(tau * alpha_p, 1.0)
        alpha_d = min(tau * alpha_d, 1.0)

        x += alpha_p * dx
        if me:
            y += alpha_d * dy
        if mi:
            s += alpha_p * ds
            z += alpha_d * dz
        pl = x[lb_idx] - lb[lb_idx]
        pu = ub[ub_idx] - x[ub_idx]
        zl += alpha_d * dzl
        zu += alpha_d * dzu

        if not (np.all(np.isfinite(x)) and np.all(pl > 0.0) and np.all(pu > 0.0)):
            status = "failed"
            break

    lb_duals = np.zeros(n)
    ub_duals = np.zeros(n)
    lb_duals[lb_idx] = zl
    ub_duals[ub_idx] = zu
    rd_final = H @ x + g
    if me:
        rd_final -= A.T @ y
    if mi:
        rd_final -= C.T @ z
    rd_final = rd_final - lb_duals + ub_duals
    resid = float(np.abs(rd_final).max(initial=0.0))
    gap = (float(s @ z) + float(pl @ zl) + float(pu @ zu)) / n_comp
    return QpResult(x, y, z, lb_duals, ub_duals, iterations, status, resid, gap)


def _solve_with_fixed_vars(H, g, A, b, C, d, lb, ub, fixed, tol, max_iters, x0, z0):
    """Eliminate variables pinned by degenerate bounds, then solve."""
    free = ~fixed
    xf = 0.5 * (lb[fixed] + ub[fixed])
    Hf = H[np.ix_(free, free)]
    gf = g[free] + H[np.ix_(free, fixed)] @ xf
    Af = A[:, free] if A is not None else None
    bf = b - A[:, fixed] @ xf if A is not None else None
    Cf = C[:, free] if C is not None else None
    df = d - C[:, fixed] @ xf if C is not None else None
    sub = qp_solve(
        Hf, gf, Af, bf, Cf, df, lb[free], ub[free], tol, max_iters,
        None if x0 is None else np.asarray(x0, float)[free], z0,
    )
    n = g.size
    x = np.empty(n)
    x[free] = sub.x
    x[fixed] = xf
    lb_duals = np.zeros(n)
    ub_duals = np.zeros(n)
    lb_duals[free] = sub.lb_duals
    ub_duals[free] = sub.ub_duals
    # dual for a pinned variable absorbs its stationarity residual
    r = H @ x + g
    if A is not None and sub.eq_duals.size:
        r -= A.T @ sub.eq_duals
    if C is not None and sub.ineq_duals.size:
        r -= C.T @ sub.ineq_duals
    lb_duals[fixed] = np.maximum(r[fixed], 0.0)
    ub_duals[fixed] = np.maximum(-r[fixed], 0.0)
    return QpResult(
        x, sub.eq_duals, sub.ineq_duals, lb_duals, ub_duals,
        sub.iterations, sub.status, sub.residual, sub.gap,
    )


# ---------------------------------------------------------------------------
# SQP on the stagewise NLP
# ---------------------------------------------------------------------------


@dataclass
class _Linearization:
    A: np.ndarray        # (N, nx, nx)
    B: np.ndarray        # (N, nx, nu)
    defect: np.ndarray   # (N, nx): f(x_k, u_k) - x_{k+1}
    g: np.ndarray        # (N+1, n_ineq)
    Jx: np.ndarray       # (N+1, n_ineq, nx)
    Jp: np.ndarray       # (N+1, n_ineq, nparam)
    gx: np.ndarray       # (N+1, nx): tracking gradient
    gu: np.ndarray       # (N, nu)


@dataclass
class _Multipliers:
    mu: np.ndarray       # (N+1, n_ineq) stage-row duals
    zlx: np.ndarray      # (N+1, nx) state lower-box duals (rows)
    zux: np.ndarray
    zlu: np.ndarray      # (N, nu) input bound duals
    zuu: np.ndarray
    zlp: np.ndarray      # (N+1, nparam)
    zup: np.ndarray
    zls: np.ndarray      # (N+1, n_slack)


def _linearize(nlp: StagewiseNLP, X, U, P) -> _Linearization:
    N, nx, nu = nlp.n_stages, nlp.nx, nlp.nu
    A = np.empty((N, nx, nx))
    B = np.empty((N, nx, nu))
    defect = np.empty((N, nx))
    for k in range(N):
        x_next, A[k], B[k] = nlp.dynamics(X[k], U[k], k)
        defect[k] = x_next - X[k + 1]
    ni = nlp.n_ineq
    g = np.zeros((N + 1, ni))
    Jx = np.zeros((N + 1, ni, nx))
    Jp = np.zeros((N + 1, ni, nlp.nparam))
    if nlp.stage_ineq is not None and ni:
        for k in range(N + 1):
            g[k], Jx[k], Jp[k] = nlp.stage_ineq(k, X[k], P[k])
    gx = 2.0 * (X - nlp.x_ref)
    gx[:-1] *= nlp.w_stage_x
    gx[-1] *= nlp.w_term_x
    gu = 2.0 * nlp.w_input * (U - nlp.u_ref)
    return _Linearization(A, B, defect, g, Jx, Jp, gx, gu)


def _condense(lin: _Linearization, nlp: StagewiseNLP):
    """Affine map of state steps onto input steps: dx_k = E_k dU + e_k."""
    N, nx, nu = nlp.n_stages, nlp.nx, nlp.nu
    E = np.zeros((N + 1, nx, N * nu))
    e = np.zeros((N + 1, nx))
    for k in range(N):
        E[k + 1] = lin.A[k] @ E[k]
        E[k + 1][:, k * nu : (k + 1) * nu] += lin.B[k]
        e[k + 1] = lin.A[k] @ e[k] + lin.defect[k]
    return E, e


@dataclass
class _QpLayout:
    n_u: int
    n_p: int
    n_s: int
    slack_slots: np.ndarray      # indices of slacked rows within a stage
    box_rows: list               # (k, j, sign) after the stage rows
    E: np.ndarray
    e: np.ndarray

    @property
    def n_w(self) -> int:
        return self.n_u + self.n_p + self.n_s


def _build_qp(nlp: StagewiseNLP, lin: _Linearization, X, U, P, S, settings: SqpSettings):
    N, nx, nu, npar = nlp.n_stages, nlp.nx, nlp.nu, nlp.nparam
    ni, ns = nlp.n_ineq, nlp.n_slack
    slack_slots = np.where(nlp.slack_rows)[0]
    E, e = _condense(lin, nlp)
    n_u = N * nu
    n_p = (N + 1) * npar
    n_s = (N + 1) * ns
    nw = n_u + n_p + n_s

    # Gauss-Newton Hessian: exact for the quadratic tracking cost, zero for
    # the gamma/eta and slack blocks before regularization.
    blocks = regularize_hessian(
        {
            "state": np.diag(2.0 * nlp.w_stage_x),
            "input": np.diag(2.0 * nlp.w_input),
            "param": np.zeros((npar, npar)),
        },
        settings.gamma_block_reg,
    )
    H = np.zeros((nw, nw))
    hu = np.tile(np.diag(blocks["input"]), N)
    H[np.arange(n_u), np.arange(n_u)] = hu
    if npar:
        hp = np.tile(np.diag(blocks["param"]), N + 1)
        idx = n_u + np.arange(n_p)
        H[idx, idx] = hp
    if ns:
        idx = n_u + n_p + np.arange(n_s)
        H[idx, idx] = 1e-10

    gvec = np.zeros(nw)
    gvec[:n_u] = lin.gu.reshape(-1)
    hx_stage = 2.0 * nlp.w_stage_x
    hx_term = 2.0 * nlp.w_term_x
    for k in range(1, N + 1):
        hx = hx_term if k == N else hx_stage
        Ek = E[k]
        H[:n_u, :n_u] += Ek.T @ (hx[:, None] * Ek)
        gvec[:n_u] += Ek.T @ (lin.gx[k] + hx * e[k])
    if ns:
        gvec[n_u + n_p :] = nlp.slack_penalty

    rows = []
    rhs = []
    # stage inequality rows (collision and eta-norm)
    for k in range(N + 1):
        for i in range(ni):
            row = np.zeros(nw)
            row[:n_u] = lin.Jx[k, i] @ E[k]
            if npar:
                row[n_u + k * npar : n_u + (k + 1) * npar] = lin.Jp[k, i]
            base = lin.g[k, i] + float(lin.Jx[k, i] @ e[k])
            if nlp.slack_rows[i]:
                slot = int(np.searchsorted(slack_slots, i))
                row[n_u + n_p + k * ns + slot] = 1.0
                base += S[k, slot]
            rows.append(row)
            rhs.append(-base)
    # state box rows for k = 1..N-1 and terminal rows at k = N
    box_rows = []
    for k in range(1, N + 1):
        lo = nlp.xN_lb if k == N else nlp.x_lb
        hi = nlp.xN_ub if k == N else nlp.x_ub
        for j in range(nx):
            if np.isfinite(lo[j]):
                row = np.zeros(nw)
                row[:n_u] = E[k][j]
                rows.append(row)
                rhs.append(lo[j] - X[k, j] - e[k][j])
                box_rows.append((k, j, +1))
            if np.isfinite(hi[j]):
                row = np.zeros(nw)
                row[:n_u] = -E[k][j]
                rows.append(row)
                rhs.append(X[k, j] + e[k][j] - hi[j])
                box_rows.append((k, j, -1))

    C = np.array(rows) if rows else None
    d = np.array(rhs) if rows else None

    lb = np.empty(nw)
    ub = np.empty(nw)
    lb[:n_u] = (np.tile(nlp.u_lb, N) - U.reshape(-1))
    ub[:n_u] = (np.tile(nlp.u_ub, N) - U.reshape(-1))
    if npar:
        lb[n_u : n_u + n_p] = np.tile(nlp.p_lb, N + 1) - P.reshape(-1)
        ub[n_u : n_u + n_p] = np.tile(nlp.p_ub, N + 1) - P.reshape(-1)
    if ns:
        lb[n_u + n_p :] = -S.reshape(-1)
        ub[n_u + n_p :] = np.inf

    layout = _QpLayout(n_u, n_p, n_s, slack_slots, box_rows, E, e)
    return H, gvec, C, d, lb, ub, layout


def _extract_multipliers(nlp: StagewiseNLP, res: QpResult, layout: _QpLayout) -> _Multipliers:
    N, nx, nu, npar = nlp.n_stages, nlp.nx, nlp.nu, nlp.nparam
    ni, ns = nlp.n_ineq, nlp.n_slack
    n_stage_rows = (N + 1) * ni
    mu = res.ineq_duals[:n_stage_rows].reshape(N + 1, ni) if ni else np.zeros((N + 1, 0))
    zlx = np.zeros((N + 1, nx))
    zux = np.zeros((N + 1, nx))
    for offset, (k, j, sign) in enumerate(layout.box_rows):
        dual = res.ineq_duals[n_stage_rows + offset]
        if sign > 0:
            zlx[k, j] += dual
        else:
            zux[k, j] += dual
    zlu = res.lb_duals[: layout.n_u].reshape(N, nu)
    zuu = res.ub_duals[: layout.n_u].reshape(N, nu)
    if npar:
        zlp = res.lb_duals[layout.n_u : layout.n_u + layout.n_p].reshape(N + 1, npar)
        zup = res.ub_duals[layout.n_u : layout.n_u + layout.n_p].reshape(N + 1, npar)
    else:
        zlp = np.zeros((N + 1, 0))
        zup = np.zeros((N + 1, 0))
    zls = (
        res.lb_duals[layout.n_u + layout.n_p :].reshape(N + 1, ns)
        if ns
        else np.zeros((N + 1, 0))
    )
    return _Multipliers(mu, zlx, zux, zlu, zuu, zlp, zup, zls)


def _polish(nlp: StagewiseNLP, X, P):
    """Per-stage parameter re-centering (e.g. gamma to its 1-D residual max).

    The callback may only raise inequality rows at fixed states, so applying
    it after a full step cannot hurt feasibility; it restores stationarity in
    directions the Gauss-Newton model cannot see.
    """
    if nlp.polish_params is None:
        return P
    out = P.copy()
    for k in range(nlp.n_stages + 1):
        out[k] = nlp.polish_params(k, X[k], P[k])
    return out


def _natural_comp(duals: np.ndarray, slacks: np.ndarray) -> float:
    """Complementarity as |min(dual, slack)|: scale-balanced for penalties."""
    if duals.size == 0:
        return 0.0
    return float(np.abs(np.minimum(duals, slacks)).max(initial=0.0))


def _eval_kkt(nlp: StagewiseNLP, lin: _Linearization, X, U, P, S, mults: _Multipliers):
    """First-order NLP residual with the dynamics duals recovered by recursion.

    The stationarity part is scaled by the multiplier magnitude (the slack
    penalty puts duals at 1e4, where absolute 1e-7 stationarity is below
    attainable floating-point cancellation); feasibility and complementarity
    stay absolute. Returns (kkt_residual, equality_violation).
    """
    N, nx = nlp.n_stages, nlp.nx
    slack_slots = np.where(nlp.slack_rows)[0]
    dual_scale = 1.0
    for arr in (mults.mu, mults.zlu, mults.zuu, mults.zlp, mults.zup, mults.zls,
                mults.zlx, mults.zux):
        if arr.size:
            dual_scale = max(dual_scale, float(np.abs(arr).max()))

    # rows evaluated with their slacks added
    g_eff = lin.g.copy()
    if slack_slots.size:
        g_eff[:, slack_slots] += S

    row_term = np.einsum("kin,ki->kn", lin.Jx, mults.mu) if nlp.n_ineq else np.zeros((N + 1, nx))
    bound_term = mults.zlx - mults.zux

    lam = np.zeros((N, nx))
    lam[N - 1] = lin.gx[N] - row_term[N] - bound_term[N]
    for k in range(N - 1, 0, -1):
        lam[k - 1] = lin.gx[k] - row_term[k] - bound_term[k] + lin.A[k].T @ lam[k]

    stat = 0.0
    for k in range(N):
        res_u = lin.gu[k] + lin.B[k].T @ lam[k] - mults.zlu[k] + mults.zuu[k]
        stat = max(stat, float(np.abs(res_u).max()))
    if nlp.nparam:
        for k in range(N + 1):
            res_p = -(lin.Jp[k].T @ mults.mu[k]) - mults.zlp[k] + mults.zup[k]
            stat = max(stat, float(np.abs(res_p).max()))
    if nlp.n_slack:
        res_s = nlp.slack_penalty - mults.mu[:, slack_slots] - mults.zls
        stat = max(stat, float(np.abs(res_s).max(initial=0.0)))

    eq_viol = float(np.abs(lin.defect).max(initial=0.0))
    ineq_viol = float(np.maximum(-g_eff, 0.0).max(initial=0.0)) if nlp.n_ineq else 0.0
    bound_viol = 0.0
    for k in range(1, N + 1):
        lo = nlp.xN_lb if k == N else nlp.x_lb
        hi = nlp.xN_ub if k == N else nlp.x_ub
        finite_lo = np.isfinite(lo)
        finite_hi = np.isfinite(hi)
        if np.any(finite_lo):
            bound_viol = max(bound_viol, float(np.maximum(lo[finite_lo] - X[k, finite_lo], 0.0).max()))
        if np.any(finite_hi):
            bound_viol = max(bound_viol, float(np.maximum(X[k, finite_hi] - hi[finite_hi], 0.0).max()))

    comp = _natural_comp(mults.mu.reshape(-1), g_eff.reshape(-1)) if nlp.n_ineq else 0.0
    if nlp.n_slack:
        comp = max(comp, _natural_comp(mults.zls.reshape(-1), S.reshape(-1)))
    kkt = max(stat / dual_scale, eq_viol, ineq_viol, bound_viol, comp)
    return kkt, eq_viol


def solve(nlp: StagewiseNLP, settings: SqpSettings = SqpSettings()) -> SqpResult:
    """Run the SQP loop on a stagewise NLP.

    Full steps, Gauss-Newton Hessian, regularized parameter blocks. Stops
    when the KKT infinity-norm drops below ``kkt_tol`` (with dynamics defects
    below 1e-8) or when the iteration limit is reached; a failed QP aborts
    with status QP_FAILURE and the last iterate.
    """
    if nlp.requires_freeze():
        raise ValueError("fixed-parameter NLP: call freeze_parameters before solve")
    if nlp.stage_ineq is None and nlp.n_ineq:
        raise ValueError("NLP declares inequality rows but has no callback")

    N = nlp.n_stages
    X = nlp.warm.states.copy()
    X[0] = nlp.x0
    U = nlp.warm.inputs.copy()
    P = nlp.warm.params.copy()
    if nlp.nparam:
        P = np.clip(P, nlp.p_lb, nlp.p_ub)
        P = _polish(nlp, X, P)
    S = np.zeros((N + 1, nlp.n_slack))

    slack_slots = np.where(nlp.slack_rows)[0]
    mults = None
    kkt = math.inf
    status = SqpStatus.ITER_LIMIT
    message = ""
    n_solves = 0
    qp_iters = 0
    first = True

    for it in range(settings.max_sqp_iters + 1):
        lin = _linearize(nlp, X, U, P)
        if first and nlp.n_slack:
            S = np.maximum(0.0, -lin.g[:, slack_slots])
            first = False
        if mults is not None:
            kkt, eq_viol = _eval_kkt(nlp, lin, X, U, P, S, mults)
            if kkt <= settings.kkt_tol and eq_viol <= _EQ_FEAS_TOL:
                status = SqpStatus.CONVERGED
                break
        if it == settings.max_sqp_iters:
            status = SqpStatus.ITER_LIMIT
            break

        # cold-started QP: Mehrotra reacts badly to stale interior duals
        H, gvec, C, d, lb, ub, layout = _build_qp(nlp, lin, X, U, P, S, settings)
        res = qp_solve(
            H, gvec, None, None, C, d, lb, ub,
            tol=settings.qp_tol, max_iterations=settings.qp_max_iters,
        )
        if res.status == "failed" or not np.all(np.isfinite(res.x)):
            status = SqpStatus.QP_FAILURE
            message = f"QP solve failed at SQP iteration {it}"
            break
        n_solves += 1
        qp_iters += res.iterations

        dU = res.x[: layout.n_u].reshape(N, nlp.nu)
        dP = (
            res.x[layout.n_u : layout.n_u + layout.n_p].reshape(N + 1, nlp.nparam)
            if nlp.nparam
            else np.zeros((N + 1, 0))
        )
        dS = (
            res.x[layout.n_u + layout.n_p :].reshape(N + 1, nlp.n_slack)
            if nlp.n_slack
            else np.zeros((N + 1, 0))
        )
        dX = np.einsum("knm,m->kn", layout.E, res.x[: layout.n_u]) + layout.e
        X = X + dX
        U = U + dU
        if nlp.nparam:
            P = np.clip(P + dP, nlp.p_lb, nlp.p_ub)
            P = _polish(nlp, X, P)
        S = np.maximum(S + dS, 0.0)
        mults = _extract_multipliers(nlp, res, layout)

    objective = nlp.objective(X, U, S)
    tracking = nlp.tracking_cost(X, U)
    if status is not SqpStatus.QP_FAILURE and not math.isfinite(objective):
        status = SqpStatus.QP_FAILURE
        message = "non-finite objective"
    return SqpResult(
        states=X,
        inputs=U,
        params=P,
        slacks=S,
        objective=objective,
        tracking_cost=tracking,
        kkt_residual=kkt,
        iterations=n_solves,
        qp_iterations=qp_iters,
        status=status,
        message=message,
    )
