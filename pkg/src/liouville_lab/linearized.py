"""Linearization around a radial bubble, resolved frequency by frequency.

In polar coordinates centered at the bubble the linearized operator
preserves angular frequency, so each sector reduces to a radial system
in t = ln r:

    g_i'' - ell^2 g_i + r^2 sum_j a_ij e^{V_j} g_j = r^2 s_i.

The translation and dilation invariances of the bubble supply explicit
kernel fields: the frequency-0 profile Z_0 = r V' + 2 and the
frequency-1 profile Z_1 = V'.  The frequency-1 boundary value problem
is therefore nearly singular on large domains; solve_frequency detects
this through the smallest singular value and switches to a bordered
(projected) solve that pins the kernel component and reports the
defect multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.sparse import bmat, csc_matrix, csr_matrix
from scipy.sparse.linalg import splu, spsolve

from .radial_bubble import RadialBubble, series_coefficients
from .errors import (ConfigurationError, DegenerateProjectionError,
                     RequiresProjectionError, StiffnessError)

# A smallest singular value below NEAR_SINGULAR_RTOL times the matrix
# norm marks the sector as kernel-degenerate.
NEAR_SINGULAR_RTOL = 1e-8

# Inverse power iterations used to estimate the smallest singular pair.
POWER_ITERS = 40


def kernel_fields(bubble: RadialBubble, r):
    """The invariance kernels on a radius grid: Z_0 = r V' + 2, Z_1 = V'."""
    r = np.asarray(r, dtype=float)
    _, vp = bubble.eval_v(r, deriv=True)
    return {"z0": r[None, :] * vp + 2.0, "z1": vp}


@dataclass
class KernelReport:
    """Two-route kernel comparison plus discretization diagnostics."""

    route_gap_z0: float        # sup |IVP kernel - invariance profile|
    route_gap_z1: float
    fd_residual: float         # stencil residual of the analytic kernel
    asymptotic_gap: np.ndarray   # |Z_0(R) - (2 - m_i)|
    asymptotic_bound: float      # 5 R^{2 - m*}
    tol: float

    @property
    def routes_agree(self) -> bool:
        return max(self.route_gap_z0, self.route_gap_z1) <= 10.0 * self.tol

    @property
    def asymptotics_ok(self) -> bool:
        return bool(np.all(self.asymptotic_gap <= self.asymptotic_bound))


def kernel_check(bubble: RadialBubble, R: float | None = None,
                 tol: float = 1e-10, n_sample: int = 400) -> KernelReport:
    """Validate the invariance kernels by an independent linear solve.

    Integrates the nonlinear profile together with the frequency-0 and
    frequency-1 linearized systems from their origin expansions and
    compares against the invariance predictions Z_0 = w' + 2 and
    Z_1 = v' along the whole trajectory.  The frequency-1 sector is
    integrated in the scaled variable g/r, which is smooth at the
    origin and removes the linearly growing homogeneous mode, so its
    sup-norm gap is growth-free.  Also reports the centered
    second-difference residual of the analytic kernel (a pure
    discretization diagnostic) and the far-end dilation gap.
    """
    R = float(R if R is not None else bubble.R)
    a = bubble.coupling.entries
    n = bubble.n
    alpha = bubble.alpha
    r0 = bubble.r0
    c2, c4 = series_coefficients(bubble.coupling, alpha)
    t0, t1 = np.log(r0), np.log(R)

    y0 = np.concatenate([
        alpha + c2 * r0**2 + c4 * r0**4,
        2.0 * c2 * r0**2 + 4.0 * c4 * r0**4,
        2.0 + 2.0 * c2 * r0**2 + 4.0 * c4 * r0**4,
        4.0 * c2 * r0**2 + 16.0 * c4 * r0**4,
        2.0 * c2 + 4.0 * c4 * r0**2,
        8.0 * c4 * r0**2,
    ])

    def rhs(t, y):
        w, wd, p0, pd0, q1, qd1 = y.reshape(6, n)
        pot = np.exp(np.minimum(w + 2.0 * t, 700.0))
        return np.concatenate([
            wd, -(a @ pot),
            pd0, -(a @ (pot * p0)),
            qd1, -2.0 * qd1 - (a @ (pot * q1)),
        ])

    # one order tighter than the reported tolerance so that accumulated
    # global error stays within the comparison budget
    rtol = max(tol / 10.0, 3e-14)
    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853", rtol=rtol,
                    atol=rtol * 1e-3, dense_output=True)
    if sol.status != 0:
        raise StiffnessError(f"kernel comparison integration failed: {sol.message}")

    # compare on the bounded kernel fields themselves: Z_0 = w' + 2 and
    # Z_1 = r (g/r) = w' e^{-t}; both routes are well conditioned there
    t = np.linspace(t0, t1, n_sample)
    w, wd, p0, _, q1, _ = sol.sol(t).reshape(6, n, n_sample)
    gap0 = float(np.max(np.abs(p0 - (wd + 2.0))))
    gap1 = float(np.max(np.abs(q1 * np.exp(t)[None, :] - wd * np.exp(-t)[None, :])))

    # discretization residual of the analytic frequency-0 kernel
    tk = np.linspace(t0, t1, 1200)
    dt = tk[1] - tk[0]
    wk, wdk = sol.sol(tk).reshape(6, n, tk.size)[:2]
    z0 = wdk + 2.0
    pot = np.exp(wk + 2.0 * tk[None, :])
    res = (z0[:, :-2] - 2.0 * z0[:, 1:-1] + z0[:, 2:]) / dt**2 \
        + np.einsum("ij,jk->ik", a, pot * z0)[:, 1:-1]
    fd_residual = float(np.max(np.abs(res)))

    z0_end = wd[:, -1] + 2.0
    gap_end = np.abs(z0_end - (2.0 - bubble.m))
    bound = 5.0 * R ** (2.0 - bubble.m_star)
    return KernelReport(route_gap_z0=gap0, route_gap_z1=gap1,
                        fd_residual=fd_residual, asymptotic_gap=gap_end,
                        asymptotic_bound=float(bound), tol=tol)


@dataclass
class FrequencySolution:
    """Solution of one frequency sector on a uniform log-radius grid."""

    ell: int
    r: np.ndarray              # (K,)
    g: np.ndarray              # (n, K)
    sigma_min: float           # smallest singular value estimate of the matrix
    matrix_norm: float         # infinity norm of the matrix
    projected: bool            # True if the bordered solve was used
    multiplier: float | None   # defect multiplier of the bordered solve

    @property
    def gdot(self) -> np.ndarray:
        """dg/dt by centered differences (one-sided at the ends)."""
        return np.gradient(self.g, np.log(self.r), axis=1)


def _interior_coo(ell, pot, r, dt, n, K):
    """COO triples of the interior rows; row layout is set by the caller."""
    rows, cols, vals = [], [], []
    for i in range(n):
        for k in range(1, K - 1):
            row = i * K + k
            rows += [row, row, row]
            cols += [i * K + k - 1, i * K + k, i * K + k + 1]
            vals += [1.0 / dt**2, -2.0 / dt**2 - ell**2, 1.0 / dt**2]
            for j in range(n):
                rows.append(row)
                cols.append(j * K + k)
                vals.append(pot[i, j, k])
    return rows, cols, vals


def _singular_pair(lu, nn, seed=0):
    """Smallest singular value and vectors by inverse power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(nn)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(POWER_ITERS):
        y = lu.solve(v, trans="T")
        z = lu.solve(y)
        lam = np.linalg.norm(z)
        v = z / lam
    sigma = 1.0 / np.sqrt(lam)
    u = lu.solve(v, trans="T")
    u /= np.linalg.norm(u)
    return sigma, v, u


def _kernel_border(bubble, ell, r, n, K):
    """Border vectors built from the invariance kernel of the sector.

    The sector operator is symmetrizable with weight e^{V_i}, so its
    approximate left kernel on the interior rows is e^{V_i} Z_i; the
    boundary-row components are zeroed so the bordered solve keeps the
    boundary conditions exact.  The constraint vector carries the
    radial measure, making the pinned component the e^V-weighted
    kernel projection.
    """
    z = kernel_fields(bubble, r)["z0" if ell == 0 else "z1"]
    ev = np.exp(bubble.eval_v(r))
    u = ev * z
    u[:, 0] = 0.0
    u[:, K - 1] = 0.0
    v = ev * z * r[None, :] ** 2
    u = u.ravel()
    v = v.ravel()
    return u / np.linalg.norm(u), v / np.linalg.norm(v)


def solve_frequency(bubble: RadialBubble, ell: int, source=None,
                    R_out: float | None = None, n_grid: int = 1600,
                    projected: str = "auto") -> FrequencySolution:
    """Solve one frequency sector of the linearized system.

    Parameters
    ----------
    ell : int
        Angular frequency.  ell = 0 takes both boundary rows at the
        inner end (value and slope zero: the solution is normalized to
        vanish at the origin, which removes the dilation kernel).
        ell >= 1 takes the regularity row g' = ell g at the inner end
        and a Dirichlet row at R_out.
    source : callable r -> (n, len(r)) array, or None
        Right-hand side s of the sector equation; None means zero.
    projected : {"auto", "always", "never"}
        Bordered-solve policy when the sector matrix is nearly
        singular (the frequency-1 sector on large domains).
    """
    if ell < 0:
        raise ConfigurationError("ell must be a nonnegative integer")
    if projected not in ("auto", "always", "never"):
        raise ConfigurationError(f"unknown projection policy '{projected}'")
    R_out = float(R_out if R_out is not None else bubble.R)
    n = bubble.n
    a = bubble.coupling.entries
    t = np.linspace(np.log(bubble.r0), np.log(R_out), n_grid)
    dt = t[1] - t[0]
    r = np.exp(t)
    K = n_grid
    ev = np.exp(bubble.eval_v(r))                    # (n, K)
    pot = a[:, :, None] * ev[None, :, :] * (r**2)[None, None, :]

    rows, cols, vals = _interior_coo(ell, pot, r, dt, n, K)
    rhs = np.zeros(n * K)
    s = source(r) if source is not None else np.zeros((n, K))
    s = np.asarray(s, dtype=float).reshape(n, K)
    for i in range(n):
        rhs[i * K + 1:i * K + K - 1] = (r**2 * s[i])[1:K - 1]

    for i in range(n):
        if ell == 0:
            # value row at the inner end
            rows.append(i * K)
            cols.append(i * K)
            vals.append(1.0)
            # slope row, one-sided second order, placed at the outer slot
            row = i * K + K - 1
            rows += [row, row, row]
            cols += [i * K, i * K + 1, i * K + 2]
            vals += [-3.0 / (2 * dt), 4.0 / (2 * dt), -1.0 / (2 * dt)]
        else:
            row = i * K
            rows += [row, row, row, row]
            cols += [i * K, i * K + 1, i * K + 2, i * K]
            vals += [-3.0 / (2 * dt), 4.0 / (2 * dt), -1.0 / (2 * dt), -float(ell)]
            rows.append(i * K + K - 1)
            cols.append(i * K + K - 1)
            vals.append(1.0)

    M = csr_matrix((vals, (rows, cols)), shape=(n * K, n * K))
    norm_m = float(np.max(np.asarray(np.abs(M).sum(axis=1)).ravel()))
    lu = splu(csc_matrix(M))
    sigma_min, v_null, u_null = _singular_pair(lu, n * K)

    near_singular = sigma_min < NEAR_SINGULAR_RTOL * norm_m
    use_border = projected == "always" or (projected == "auto" and near_singular)
    if near_singular and projected == "never":
        raise RequiresProjectionError(
            f"frequency-{ell} sector is numerically singular "
            f"(sigma_min = {sigma_min:.3e}, matrix norm = {norm_m:.3e}); "
            "rerun with projection enabled")

    if not use_border:
        g = lu.solve(rhs).reshape(n, K)
        return FrequencySolution(ell=ell, r=r, g=g, sigma_min=sigma_min,
                                 matrix_norm=norm_m, projected=False, multiplier=None)

    if ell <= 1:
        u_b, v_b = _kernel_border(bubble, ell, r, n, K)
    else:
        # no invariance kernel to borrow; fall back to the computed
        # singular vectors with boundary rows suppressed
        u_b = u_null.copy().reshape(n, K)
        u_b[:, 0] = 0.0
        u_b[:, K - 1] = 0.0
        u_b = u_b.ravel()
        u_b /= np.linalg.norm(u_b)
        v_b = v_null
    Mb = bmat([[M, csr_matrix(u_b[:, None])],
               [csr_matrix(v_b[None, :]), None]], format="csc")
    sol = spsolve(Mb, np.concatenate([rhs, [0.0]]))
    g = sol[:n * K].reshape(n, K)
    mu = float(sol[n * K])
    lub = splu(Mb)
    sigma_b, _, _ = _singular_pair(lub, n * K + 1, seed=1)
    if sigma_b < NEAR_SINGULAR_RTOL * norm_m:
        raise DegenerateProjectionError(
            f"sector still singular after rank-1 bordering "
            f"(sigma_min = {sigma_b:.3e}); kernel multiplicity exceeds one")
    return FrequencySolution(ell=ell, r=r, g=g, sigma_min=sigma_min,
                             matrix_norm=norm_m, projected=True, multiplier=mu)


@dataclass
class ProjectionResult:
    coefficient: float
    numerator: float
    gram: float


def project_kernels(bubble: RadialBubble, ell: int, field, r) -> ProjectionResult:
    """e^V-weighted projection of a sector field onto the matching kernel.

    coefficient = sum_i <e^{V_i} Z_i, f_i> / sum_i <e^{V_i} Z_i, Z_i>
    with the frequency-0 kernel Z_0 for ell = 0 and the translation
    kernel Z_1 for ell >= 1; <.,.> carries the angular factor 2 pi for
    ell = 0 and pi otherwise.
    """
    r = np.asarray(r, dtype=float)
    field = np.asarray(field, dtype=float)
    z = kernel_fields(bubble, r)["z0" if ell == 0 else "z1"]
    ev = np.exp(bubble.eval_v(r))
    angular = 2.0 * np.pi if ell == 0 else np.pi
    num = angular * float(np.sum([np.trapezoid(ev[i] * z[i] * field[i] * r, r)
                                  for i in range(bubble.n)]))
    den = angular * float(np.sum([np.trapezoid(ev[i] * z[i] * z[i] * r, r)
                                  for i in range(bubble.n)]))
    return ProjectionResult(coefficient=num / den, numerator=num, gram=den)


def first_order_correctors(bubble: RadialBubble, grad_log,
                           R_out: float, n_grid: int = 1600,
                           projected: str = "auto"):
    """Frequency-1 correctors driven by the weight gradient, per unit eps.

    The inner expansion at first order solves the sector equation with
    source -sum_j a_ij e^{V_j} (d_1 L_j) r in the cosine sector and the
    d_2 component in the sine sector; the physical corrector is eps
    times the returned fields.
    """
    grad_log = np.asarray(grad_log, dtype=float).reshape(bubble.n, 2)
    a = bubble.coupling.entries

    def make_source(comp):
        def src(r):
            ev = np.exp(bubble.eval_v(r))
            return -(a * grad_log[None, :, comp]) @ ev * r[None, :]
        return src

    cos_sol = solve_frequency(bubble, 1, make_source(0), R_out=R_out,
                              n_grid=n_grid, projected=projected)
    sin_sol = solve_frequency(bubble, 1, make_source(1), R_out=R_out,
                              n_grid=n_grid, projected=projected)
    return cos_sol, sin_sol


@dataclass
class SecondOrderSources:
    """Right-hand sides of the order-eps^2 sector equations, per unit eps^2."""

    r: np.ndarray
    s0: np.ndarray         # frequency 0
    s2_cos: np.ndarray     # frequency 2, cosine sector
    s2_sin: np.ndarray     # frequency 2, sine sector


def second_order_sources(bubble: RadialBubble, cos_sol: FrequencySolution,
                         sin_sol: FrequencySolution, grad_log,
                         hess_log) -> SecondOrderSources:
    """Assemble the order-eps^2 sources from the first-order correctors.

    With P_j = g_{j,cos} + r d_1 L_j and Q_j = g_{j,sin} + r d_2 L_j the
    theta-expansion of e^{V + eps phi} h(q + eps y) produces

        s0    = -(1/4) sum_j a_ij e^{V_j} [r^2 lap L_j + P_j^2 + Q_j^2]
        s2cos = -(1/4) sum_j a_ij e^{V_j} [r^2 (L_11 - L_22)_j + P_j^2 - Q_j^2]
        s2sin = -(1/2) sum_j a_ij e^{V_j} [r^2 L_12_j + P_j Q_j]

    as right-hand sides for solve_frequency (per unit eps^2).  A weight
    with isotropic Hessian and vanishing gradient leaves the whole
    frequency-2 sector identically zero.
    """
    if cos_sol.r.shape != sin_sol.r.shape or np.max(np.abs(cos_sol.r - sin_sol.r)) > 0:
        raise ConfigurationError("corrector grids differ")
    r = cos_sol.r
    n = bubble.n
    grad_log = np.asarray(grad_log, dtype=float).reshape(n, 2)
    hess_log = np.asarray(hess_log, dtype=float).reshape(n, 2, 2)
    ev = np.exp(bubble.eval_v(r))
    a = bubble.coupling.entries

    P = cos_sol.g + r[None, :] * grad_log[:, 0:1]
    Q = sin_sol.g + r[None, :] * grad_log[:, 1:2]
    lap = (hess_log[:, 0, 0] + hess_log[:, 1, 1])[:, None]
    d11_22 = (hess_log[:, 0, 0] - hess_log[:, 1, 1])[:, None]
    d12 = hess_log[:, 0, 1][:, None]
    r2 = (r**2)[None, :]

    s0 = -0.25 * (a @ (ev * (r2 * lap + P**2 + Q**2)))
    s2c = -0.25 * (a @ (ev * (r2 * d11_22 + P**2 - Q**2)))
    s2s = -0.5 * (a @ (ev * (r2 * d12 + P * Q)))
    return SecondOrderSources(r=r, s0=s0, s2_cos=s2c, s2_sin=s2s)


def dilation_pairing(bubble: RadialBubble, R_out: float,
                     n_grid: int = 20000) -> np.ndarray:
    """J_j = 2 pi int_0^R e^{V_j} Z_{0,j} r^3 dr, the dilation pairing weight.

    Diverges logarithmically in R when m_j = 4: the integrand tail is
    (2 - m_j) e^{I_j} r^{3 - m_j}.
    """
    t = np.linspace(np.log(bubble.r0), np.log(R_out), n_grid)
    r = np.exp(t)
    ev = np.exp(bubble.eval_v(r))
    z0 = kernel_fields(bubble, r)["z0"]
    core = simpson(ev * z0 * np.exp(4.0 * t)[None, :], x=t, axis=1)
    inner = np.exp(bubble.alpha) * 2.0 * bubble.r0**4 / 4.0
    return 2.0 * np.pi * (core + inner)


def b_coefficient(bubble: RadialBubble, eps: float, curv,
                  tau: float = 3.0, h_center=None) -> np.ndarray:
    """Dilation-sector coefficient of the order-eps^2 reduction.

    b_i = -eps^2 sum_j a_ij m_j h0_j curv_j J_j(tau/eps) with
    curv_j = lap L_j + |grad L_j|^2 at the concentration point and
    J the dilation pairing.  h0 defaults to ones (weights normalized
    at the point).
    """
    curv = np.asarray(curv, dtype=float).reshape(bubble.n)
    h0 = np.ones(bubble.n) if h_center is None else np.asarray(h_center, dtype=float)
    J = dilation_pairing(bubble, tau / eps)
    return -eps**2 * (bubble.coupling.entries @ (bubble.m * h0 * curv * J))


def b_limit(bubble: RadialBubble, curv) -> np.ndarray:
    """Limit of b_i/(eps^2 ln(1/eps)) when every mass sits at 4.

    Each pairing tail contributes (2 - m_j) e^{I_j} ln R = -2 e^{I_j} ln R,
    so the limit is 16 pi sum_j a_ij e^{I_j} curv_j.
    """
    curv = np.asarray(curv, dtype=float).reshape(bubble.n)
    return 16.0 * np.pi * (bubble.coupling.entries @ (np.exp(bubble.I) * curv))
