"""Blowup criteria on the torus.

Given a candidate configuration q = (q_1, ..., q_N), weights h, and the
limit bubble at the matching masses, this module computes the three
coefficient families that control the blowup:

  H_it  combines the composite Green value at q_t with ln h_i(q_t);
  D_it  is a regularized integral of the bubble tail over a cell
        around q_t, with the tau^(2-m) core divergence subtracted and
        the limit recovered by fitting the known tau-powers;
  L_it  collects the curvature-type data (Laplacian and gradient of
        ln h plus the 8 pi N background) at q_t.

The regime classifier and the leading-order vanishing-rate predictions
combine these into the case table (A: m* < 4 driven by D; B: m* = 4
driven by L; C: m* = 4 with the L-sum cancelling).

Cells are torus Voronoi cells of the points.  Each D-quadrature splits
its cell into a polar annulus around q_t (log-radial Gauss-Legendre
times a uniform angular grid, so the angular averaging is spectrally
exact) and wedge fans over the polygon edges.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.spatial import Voronoi

from .errors import ConfigurationError, ConvergenceError
from .torus import HField, TorusGreen, _as_points, fold

# |m* - 4| below this uses the logarithmic extrapolation basis.
M4_TOL = 1e-9

# "nonzero" for the regime sums means exceeding this times the natural
# scale (the same sums with absolute values).
REGIME_RTOL = 1e-8

# relative spread above this marks a D extrapolation as unresolved
SPREAD_LIMIT = 1e-3

DEFAULT_QUAD = (256, 64, 32)        # angular, radial, wedge orders


##########################################################################
# pointwise coefficient families
##########################################################################

def _gstar_self(green, q, t):
    """G*(q_t; q_t) = gamma_0 + sum_{s != t} G(q_t - q_s)."""
    val = green.gamma0
    for s in range(q.shape[0]):
        if s != t:
            val += float(green.value(q[t] - q[s]))
    return val


def h_matrix(points, h: HField, m_star_vec, green=None):
    """H_it = 2 pi m_i* G*(q_t; q_t) + ln h_i(q_t), shape (n, N)."""
    q = _as_points(points)
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    if ms.size != h.n:
        raise ConfigurationError("m* vector and h must share the component count")
    green = TorusGreen() if green is None else green
    gs = np.array([_gstar_self(green, q, t) for t in range(q.shape[0])])
    lh = np.array([h.log_value(i, q) for i in range(h.n)])
    return 2.0 * np.pi * ms[:, None] * gs[None, :] + lh


def l_coefficients(points, h: HField, green=None):
    """L_it = lap ln h_i + 8 pi N + |grad ln h_i + 8 pi grad_1 G*|^2.

    The torus is flat, so no scalar-curvature term appears, and
    grad_1 gamma(q, q) = 0 leaves only the neighbor Green gradients in
    grad_1 G*(q_t; q_t).
    """
    q = _as_points(points)
    green = TorusGreen() if green is None else green
    N = q.shape[0]
    g1 = np.zeros((N, 2))
    for t in range(N):
        for s in range(N):
            if s != t:
                g1[t] += green.grad(q[t] - q[s])
    out = np.empty((h.n, N))
    for i in range(h.n):
        lap = h.log_lap(i, q)
        grad = h.log_grad(i, q) + 8.0 * np.pi * g1
        out[i] = lap + 8.0 * np.pi * N + np.sum(grad**2, axis=1)
    return out


##########################################################################
# torus Voronoi cells and the singular quadrature
##########################################################################

@dataclass
class CellPartition:
    """Voronoi cells of the points under the torus metric.

    Each polygon is stored with absolute coordinates around its own
    point (the center copy of the 3x3 unfolding), vertices in
    counterclockwise order.
    """
    points: np.ndarray
    polygons: list

    def areas(self):
        out = []
        for v in self.polygons:
            x, y = v[:, 0], v[:, 1]
            out.append(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        return np.array(out)

    def inradius(self, t):
        q = self.points[t]
        v = self.polygons[t]
        d = []
        for j in range(v.shape[0]):
            a, b = v[j], v[(j + 1) % v.shape[0]]
            e = b - a
            cross = e[0] * (q - a)[1] - e[1] * (q - a)[0]
            d.append(abs(cross) / np.linalg.norm(e))
        return float(np.min(d))


def build_partition(points) -> CellPartition:
    q = _as_points(points)
    N = q.shape[0]
    shifts = [np.array([dx, dy], dtype=float)
              for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    shifts.sort(key=lambda s: float(s @ s))          # center copies first
    allpts = np.concatenate([q + s for s in shifts], axis=0)
    vor = Voronoi(allpts)
    polys = []
    for t in range(N):
        region = vor.regions[vor.point_region[t]]
        if -1 in region or len(region) < 3:
            raise ConfigurationError("open Voronoi cell; configuration degenerate")
        verts = vor.vertices[region]
        ang = np.arctan2(verts[:, 1] - q[t, 1], verts[:, 0] - q[t, 0])
        polys.append(verts[np.argsort(ang)])
    part = CellPartition(points=q, polygons=polys)
    if abs(np.sum(part.areas()) - 1.0) > 1e-8:
        raise ConfigurationError("cells fail to tile the torus")
    return part


def _cell_nodes(partition: CellPartition, t, tau, quad=DEFAULT_QUAD):
    """Quadrature nodes/weights for Omega_t minus the ball of radius tau."""
    n_theta, n_r, n_w = quad
    q = partition.points[t]
    poly = partition.polygons[t]
    rin = partition.inradius(t)
    if not 0.0 < tau < rin:
        raise ConfigurationError(
            f"tau = {tau:.4g} outside (0, inradius = {rin:.4g})")
    xg, wg = leggauss(n_r)
    ta, tb = np.log(tau), np.log(rin)
    tt = 0.5 * (ta + tb) + 0.5 * (tb - ta) * xg
    wt = 0.5 * (tb - ta) * wg
    th = np.arange(n_theta) * (2.0 * np.pi / n_theta)
    r = np.exp(tt)
    ring = q + r[:, None, None] * np.stack(
        [np.cos(th), np.sin(th)], axis=-1)[None, :, :]
    ring_w = np.broadcast_to((wt * r**2)[:, None] * (2.0 * np.pi / n_theta),
                             (n_r, n_theta))
    nodes = [ring.reshape(-1, 2)]
    weights = [ring_w.ravel()]

    xw, ww = leggauss(n_w)
    M = poly.shape[0]
    for j in range(M):
        a, b = poly[j], poly[(j + 1) % M]
        tha = np.arctan2(a[1] - q[1], a[0] - q[0])
        thb = np.arctan2(b[1] - q[1], b[0] - q[0])
        if thb <= tha:
            thb += 2.0 * np.pi
        e = (b - a) / np.linalg.norm(b - a)
        foot = a + ((q - a) @ e) * e
        d = np.linalg.norm(q - foot)
        phi = np.arctan2(foot[1] - q[1], foot[0] - q[0])
        thn = 0.5 * (tha + thb) + 0.5 * (thb - tha) * xw
        wth = 0.5 * (thb - tha) * ww
        rmax = d / np.cos(thn - phi)
        rn = rin + 0.5 * (rmax[:, None] - rin) * (xw[None, :] + 1.0)
        wr = 0.5 * (rmax[:, None] - rin) * ww[None, :]
        pts = q + rn[:, :, None] * np.stack(
            [np.cos(thn), np.sin(thn)], axis=-1)[:, None, :]
        nodes.append(pts.reshape(-1, 2))
        weights.append((wth[:, None] * wr * rn).ravel())
    return np.concatenate(nodes, axis=0), np.concatenate(weights)


##########################################################################
# D coefficients with tau extrapolation
##########################################################################

@dataclass
class DTrace:
    """Extrapolation diagnostics for one (i, t) pair."""
    i: int
    t: int
    taus: np.ndarray
    values: np.ndarray
    exponents: tuple        # powers in the fit basis; 'log' marks ln(1/tau)
    estimate: float
    spread: float
    log_coefficient: float = 0.0


def _fit_basis(m):
    """Basis exponents for F(tau) around tau -> 0 at local mass m.

    The boundary term of dF/dtau only sees the angular averages of the
    smooth factor, so the expansion runs over tau^(4-m+2k), k >= 0; a
    power hitting zero turns logarithmic.  The fit carries every term
    up to tau^4 next to the constant; beyond that the residual sits
    under the quadrature floor for any admissible tau.  'log' marks
    ln(1/tau) and is listed last.
    """
    exps, has_log = [0.0], False
    k = 4.0 - m
    while k <= 4.0 + M4_TOL:
        e = float(round(k)) if abs(k - round(k)) < M4_TOL else k
        if e == 0.0:
            has_log = True
        else:
            exps.append(e)
        k += 2.0
    out = sorted(exps)
    if has_log:
        out.append("log")
    return tuple(out)


def _design(taus, basis):
    cols = []
    for e in basis:
        if e == "log":
            cols.append(np.log(1.0 / taus))
        else:
            cols.append(taus ** float(e))
    return np.stack(cols, axis=1)


def _extrapolate(taus, F, basis):
    A = _design(taus, basis)
    coef, *_ = np.linalg.lstsq(A, F, rcond=None)
    idx0 = [k for k, e in enumerate(basis) if e == 0.0][0]
    est = coef[idx0]
    # stability: refit without the coarsest tau
    coef2, *_ = np.linalg.lstsq(A[1:], F[1:], rcond=None)
    spread = abs(coef2[idx0] - est) / max(abs(est), 1e-12)
    logc = 0.0
    for k, e in enumerate(basis):
        if e == "log":
            logc = coef[k]
    return float(est), float(spread), float(logc)


def d_coefficients(points, h: HField, bubble_I, m_star_vec, taus,
                   green=None, quad=DEFAULT_QUAD, partition=None,
                   strict=True):
    """Regularized tail integrals D_it and their extrapolation traces.

    For each tau, F(tau) subtracts the core divergence analytically:

        F(tau) = -2 pi e^{I_i} / (m_i* - 2) tau^{2 - m_i*}
                 + e^{I_i} int_{Omega_t minus B_tau}
                   (h_i / h_i(q_t)) e^{2 pi m_i* [sum_l G(x, q_l)
                                                  - G*(q_t; q_t)]},

    and D_it is the constant term of the tau-power fit.  The exponent
    in the integrand carries the full Green function at the own point,
    so the integrand grows like |x - q_t|^{-m_i*} at the core and the
    subtraction cancels it exactly.  The tau sequence is extended
    geometrically downward when the basis for some component needs
    more values than supplied.  Components at or above mass 4 drop the
    coarsest tau from their fit window: their first untracked term is
    O(tau^4) and would otherwise dominate the residual there.
    """
    q = _as_points(points)
    I = np.asarray(bubble_I, dtype=float).ravel()
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    if not (I.size == ms.size == h.n):
        raise ConfigurationError("I, m*, and h must share the component count")
    if np.any(ms <= 2.0):
        raise ConfigurationError("every local mass must exceed 2")
    taus = np.sort(np.asarray(taus, dtype=float))[::-1]
    if taus.size < 3 or np.any(taus <= 0):
        raise ConfigurationError("need at least three positive tau values")
    green = TorusGreen() if green is None else green
    partition = build_partition(q) if partition is None else partition
    N = q.shape[0]

    bases = [_fit_basis(m) for m in ms]
    skips = [1 if m > 4.0 - M4_TOL else 0 for m in ms]
    need = max(len(b) + 1 + s for b, s in zip(bases, skips))
    full = list(taus)
    ratio = taus[1] / taus[0]
    while len(full) < need:
        full.append(full[-1] * ratio)
    full = np.array(full)

    D = np.empty((h.n, N))
    traces = []
    for t in range(N):
        const = _gstar_self(green, q, t)
        lh_qt = np.array([float(h.log_value(i, q[t])) for i in range(h.n)])
        F = np.empty((h.n, full.size))
        for k, tau in enumerate(full):
            nodes, w = _cell_nodes(partition, t, tau, quad)
            g = -const * np.ones(nodes.shape[0])
            for l in range(N):
                g += green.value(nodes - q[l])
            for i in range(h.n):
                core = -2.0 * np.pi * np.exp(I[i]) / (ms[i] - 2.0) \
                    * tau ** (2.0 - ms[i])
                dens = np.exp(I[i] + h.log_value(i, nodes) - lh_qt[i]
                              + 2.0 * np.pi * ms[i] * g)
                F[i, k] = core + float(w @ dens)
        for i in range(h.n):
            s0 = skips[i]
            est, spread, logc = _extrapolate(full[s0:], F[i, s0:], bases[i])
            D[i, t] = est
            traces.append(DTrace(i=i, t=t, taus=full.copy(), values=F[i].copy(),
                                 exponents=bases[i], estimate=est,
                                 spread=spread, log_coefficient=logc))
            if strict and spread > SPREAD_LIMIT:
                raise ConvergenceError(
                    f"D extrapolation unresolved for component {i}, cell {t}: "
                    f"relative spread {spread:.2e}")
    return D, traces


##########################################################################
# regime classification and vanishing-rate predictions
##########################################################################

def classify_regime(m_star, S_D, S_L, scale_D=None, scale_L=None) -> str:
    """Case table on (m*, S_D, S_L); ties broken by relative tolerance."""
    if m_star <= 2.0 + 1e-12:
        return "degenerate"
    tol_D = REGIME_RTOL * (abs(S_D) if scale_D is None else scale_D)
    tol_L = REGIME_RTOL * (abs(S_L) if scale_L is None else scale_L)
    at4 = abs(m_star - 4.0) < M4_TOL
    if not at4 and m_star < 4.0:
        return "A" if abs(S_D) > tol_D else "unclassified"
    if at4:
        if abs(S_L) > tol_L:
            return "B"
        if abs(S_D) > tol_D:
            return "C"
    return "unclassified"


def epsilon_ratios(H, m_star_vec, eps_1):
    """Scales eps_t from the first component's row of H.

    eps_t = eps_1 exp[(H_1t - H_11) / (m_1* - 2)].  When the rows give
    inconsistent answers beyond 1e-6 the configuration violates the
    cross-component compatibility and a warning is issued.
    """
    H = np.asarray(H, dtype=float)
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    c = (H - H[:, :1]) / (ms[:, None] - 2.0)
    if H.shape[0] > 1:
        dev = np.max(c.max(axis=0) - c.min(axis=0))
        if dev > 1e-6:
            warnings.warn(
                f"H rows give inconsistent scale ratios (spread {dev:.2e}); "
                "the configuration violates cross-component compatibility",
                stacklevel=2)
    return eps_1 * np.exp(c[0])


@dataclass
class CriteriaReport:
    points: np.ndarray
    m_star_vec: np.ndarray
    m_star: float
    H: np.ndarray
    D: np.ndarray
    L: np.ndarray
    S_D: float
    S_L: float
    scale_D: float
    scale_L: float
    regime: str
    d_traces: list = field(default_factory=list, repr=False)
    taus: np.ndarray = None

    @property
    def weights(self):
        """e^(H_it - H_i1), the per-component cell weights in the sums."""
        return np.exp(self.H - self.H[:, :1])


def build_report(points, h: HField, bubble, green=None, taus=None,
                 quad=DEFAULT_QUAD, strict=True) -> CriteriaReport:
    """Assemble the full criteria report for one configuration.

    The bubble supplies the local masses m_i* and the constants I_i of
    its far-field expansion; h and the points supply everything else.
    """
    q = _as_points(points)
    green = TorusGreen() if green is None else green
    part = build_partition(q)
    if taus is None:
        d_min = 2.0 * min(part.inradius(t) for t in range(q.shape[0]))
        taus = np.array([0.2, 0.1, 0.05]) * d_min
    taus = np.asarray(taus, dtype=float)
    ms = bubble.m
    H = h_matrix(q, h, ms, green)
    D, traces = d_coefficients(q, h, bubble.I, ms, taus, green=green,
                               quad=quad, partition=part, strict=strict)
    L = l_coefficients(q, h, green)
    wts = np.exp(H - H[:, :1])
    S_D = float(np.sum(D * wts))
    S_L = float(np.sum(L * wts))
    scale_D = float(np.sum(np.abs(D) * wts))
    scale_L = float(np.sum(np.abs(L) * wts))
    m_star = float(np.min(ms))
    regime = classify_regime(m_star, S_D, S_L, scale_D, scale_L)
    return CriteriaReport(points=q, m_star_vec=np.asarray(ms, float),
                          m_star=m_star, H=H, D=D, L=L, S_D=S_D, S_L=S_L,
                          scale_D=scale_D, scale_L=scale_L, regime=regime,
                          d_traces=traces, taus=taus)


def lambda_prediction(report: CriteriaReport, eps_1, regime=None,
                      form="sharp"):
    """Leading-order prediction of the parameter deficit at scale eps_1.

    Regime A admits two algebraically equivalent-at-leading-order
    forms: "sharp" restricts to the components achieving m* and uses
    the common power eps^(m*-2); "expansion" sums every component with
    its own power eps^(m_i*-2).  They coincide when all m_i* are equal.
    """
    regime = report.regime if regime is None else regime
    if regime not in ("A", "B", "C"):
        raise ConfigurationError(
            f"no prediction in regime '{regime}'; hypotheses not met")
    eps = np.asarray(eps_1, dtype=float)
    wts = report.weights
    N = report.points.shape[0]
    if regime == "A":
        if form == "expansion":
            out = sum((2.0 - report.m_star_vec[i]) / N
                      * np.sum(report.D[i] * wts[i])
                      * eps ** (report.m_star_vec[i] - 2.0)
                      for i in range(report.m_star_vec.size))
            return out
        hat = report.m_star_vec <= report.m_star + M4_TOL
        s = float(np.sum(report.D[hat] * wts[hat]))
        return (2.0 - report.m_star) / N * s * eps ** (report.m_star - 2.0)
    if regime == "B":
        return -2.0 / N * report.S_L * eps**2 * np.log(1.0 / eps)
    return -2.0 / N * report.S_D * eps**2
