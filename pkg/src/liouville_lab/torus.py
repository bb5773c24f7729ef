"""Green function of the Laplacian on the flat unit torus.

G solves -Delta G = delta_0 - 1 with zero mean, so near the origin

    G(z) = -(1/2 pi) ln|z| + gamma_0 + O(|z|^2),

and gamma_0 is the value of the regular part at coincidence.  The
primary evaluator is an Ewald split: a lattice sum of exponential
integrals (real space) plus a Gaussian-damped Fourier tail, with the
split scale eta a free parameter that must drop out of every value.

Two independent representations are kept alongside for cross-checks:
a product formula through the first Jacobi theta function, and a
row-summed Fourier series where the k_2 sums are closed in cosh/sinh
form and the remaining k_1 series converges geometrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import exp1, gamma as gamma_fn

from .errors import ConfigurationError, ConvergenceError

# Terms beyond e^{-TAIL_EXPONENT} relative size are dropped when the
# image radius and mode cutoff are chosen from eta.
TAIL_EXPONENT = 36.0

# Width of the fixed comparison kernel used by the mean() quadrature.
MEAN_ETA = 0.002


def fold(z):
    """Map points into the centered fundamental cell [-1/2, 1/2)^2."""
    z = np.asarray(z, dtype=float)
    return z - np.round(z)


def _f_reg(a):
    """E_1(a) + ln(a), the regular combination; -> -euler_gamma at 0."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = a < 1e-8
    out[small] = -np.euler_gamma + a[small] - 0.25 * a[small] ** 2
    with np.errstate(divide="ignore"):
        out[~small] = exp1(a[~small]) + np.log(a[~small])
    return out


def _g1(a):
    """(1 - e^{-a})/a, stable at 0."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = a < 1e-8
    out[small] = 1.0 - 0.5 * a[small] + a[small] ** 2 / 6.0
    out[~small] = -np.expm1(-a[~small]) / a[~small]
    return out


class TorusGreen:
    """Ewald evaluator for the torus Green function and its regular part.

    Parameters
    ----------
    eta : float
        Split scale.  Values in [5e-3, 0.3] keep both sums short; the
        result is eta-independent to machine precision by construction.
    """

    def __init__(self, eta: float = 0.05):
        if not (1e-4 <= eta <= 1.0):
            raise ConfigurationError(f"eta = {eta} outside the supported range [1e-4, 1]")
        self.eta = float(eta)
        m_max = int(np.ceil(0.71 + np.sqrt(TAIL_EXPONENT * 4.0 * eta)))
        k_max = int(np.ceil(np.sqrt(TAIL_EXPONENT / (4.0 * np.pi**2 * eta))))
        mm = np.arange(-m_max, m_max + 1)
        self._images = np.array([(i, j) for i in mm for j in mm], dtype=float)
        self._images_nz = self._images[np.any(self._images != 0, axis=1)]
        kk = np.arange(-k_max, k_max + 1)
        modes = np.array([(i, j) for i in kk for j in kk], dtype=float)
        modes = modes[np.any(modes != 0, axis=1)]
        k2 = np.sum(modes**2, axis=1)
        keep = 4.0 * np.pi**2 * k2 * eta <= TAIL_EXPONENT + 5.0
        self._modes = modes[keep]                    # (K, 2)
        self._k2 = k2[keep]
        self._mode_amp = np.exp(-4.0 * np.pi**2 * self._k2 * eta) / (4.0 * np.pi**2 * self._k2)

    # -- internal chunked kernels -------------------------------------------

    _CHUNK = 4096

    def _map_chunks(self, z, kernel, out_shape_tail):
        z = fold(z)
        flat = z.reshape(-1, 2)
        out = np.empty((flat.shape[0],) + out_shape_tail)
        for lo in range(0, flat.shape[0], self._CHUNK):
            out[lo:lo + self._CHUNK] = kernel(flat[lo:lo + self._CHUNK])
        return out.reshape(z.shape[:-1] + out_shape_tail)

    def _value_kernel(self, z, star):
        eta = self.eta
        if star:
            images = self._images_nz
        else:
            images = self._images
        d = z[:, None, :] - images[None, :, :]           # (P, M, 2)
        a = np.sum(d**2, axis=2) / (4.0 * eta)
        with np.errstate(divide="ignore"):
            val = np.sum(exp1(a), axis=1) / (4.0 * np.pi)   # +inf on the lattice
        if star:
            # (1/4 pi)(E_1(a_0) + ln a_0) + (1/4 pi) ln(4 eta) replaces the
            # m = 0 image once the (1/2 pi) ln|z| singularity is added back
            a0 = np.sum(z**2, axis=1) / (4.0 * eta)
            val += (_f_reg(a0) + np.log(4.0 * eta)) / (4.0 * np.pi)
        phase = np.cos(2.0 * np.pi * (z @ self._modes.T))
        val += phase @ self._mode_amp - eta
        return val

    def _grad_kernel(self, z, star):
        eta = self.eta
        d = z[:, None, :] - self._images_nz[None, :, :]
        s2 = np.sum(d**2, axis=2)
        g = -np.sum(np.exp(-s2 / (4.0 * eta))[:, :, None] * d / s2[:, :, None],
                    axis=1) / (2.0 * np.pi)
        s0 = np.sum(z**2, axis=1)
        if star:
            a0 = s0 / (4.0 * eta)
            g += _g1(a0)[:, None] * z / (8.0 * np.pi * eta)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                g0 = -np.exp(-s0 / (4.0 * eta))[:, None] * z / s0[:, None] / (2.0 * np.pi)
            g += np.where(s0[:, None] > 0, g0, np.nan)
        arg = 2.0 * np.pi * (z @ self._modes.T)
        amp = self._mode_amp * 2.0 * np.pi
        g -= (np.sin(arg) * amp[None, :]) @ self._modes
        return g

    def _hess_kernel(self, z, star):
        eta = self.eta
        eye = np.eye(2)
        d = z[:, None, :] - self._images_nz[None, :, :]
        s2 = np.sum(d**2, axis=2)
        e = np.exp(-s2 / (4.0 * eta))
        uu = d[:, :, :, None] * d[:, :, None, :]
        h = -np.sum(e[:, :, None, None]
                    * (eye[None, None] / s2[:, :, None, None]
                       - 2.0 * uu / s2[:, :, None, None] ** 2
                       - uu / (2.0 * eta * s2[:, :, None, None])),
                    axis=1) / (2.0 * np.pi)
        s0 = np.sum(z**2, axis=1)
        if star:
            a0 = s0 / (4.0 * eta)
            g1 = _g1(a0)
            uu0 = z[:, :, None] * z[:, None, :]
            iso = g1 / (8.0 * np.pi * eta)
            h += iso[:, None, None] * eye[None]
            coef = (np.exp(-a0) - g1) / (4.0 * np.pi * eta)
            with np.errstate(divide="ignore", invalid="ignore"):
                anis = coef[:, None, None] * uu0 / s0[:, None, None]
            h += np.where(s0[:, None, None] > 0, anis, 0.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                uu0 = z[:, :, None] * z[:, None, :]
                e0 = np.exp(-s0 / (4.0 * eta))
                h0 = -(e0[:, None, None]
                       * (eye[None] / s0[:, None, None]
                          - 2.0 * uu0 / s0[:, None, None] ** 2
                          - uu0 / (2.0 * eta * s0[:, None, None]))) / (2.0 * np.pi)
            h += np.where(s0[:, None, None] > 0, h0, np.nan)
        arg = 2.0 * np.pi * (z @ self._modes.T)                     # (P, K)
        kk = self._modes[:, :, None] * self._modes[:, None, :]      # (K, 2, 2)
        w = np.cos(arg) * (self._mode_amp * 4.0 * np.pi**2)[None, :]
        h -= np.einsum("pk,kij->pij", w, kk)
        return h

    # -- public surface ------------------------------------------------------

    def value(self, z):
        """G(z); +inf on the lattice."""
        return self._map_chunks(z, lambda c: self._value_kernel(c, star=False), ())

    def grad(self, z):
        return self._map_chunks(z, lambda c: self._grad_kernel(c, star=False), (2,))

    def hess(self, z):
        return self._map_chunks(z, lambda c: self._hess_kernel(c, star=False), (2, 2))

    def star_value(self, z):
        """Regular part G(z) + (1/2 pi) ln|fold z|; smooth through 0."""
        return self._map_chunks(z, lambda c: self._value_kernel(c, star=True), ())

    def star_grad(self, z):
        return self._map_chunks(z, lambda c: self._grad_kernel(c, star=True), (2,))

    def star_hess(self, z):
        return self._map_chunks(z, lambda c: self._hess_kernel(c, star=True), (2, 2))

    @property
    def gamma0(self) -> float:
        """Value of the regular part at coincidence."""
        return float(self.star_value(np.zeros(2)))

    def mean(self, n: int = 256) -> float:
        """Quadrature of G over the torus (should vanish).

        The log singularity is subtracted through a narrow exponential
        integral kernel whose exact torus integral is its split scale;
        the smooth remainder is integrated by the midpoint rule, which
        is spectrally accurate for it.
        """
        x = (np.arange(n) + 0.5) / n
        zz = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1)
        g = self.value(zz)
        a = np.sum(fold(zz) ** 2, axis=-1) / (4.0 * MEAN_ETA)
        sub = exp1(np.maximum(a, 1e-300)) / (4.0 * np.pi)
        return float(np.mean(g - sub) + MEAN_ETA)


##############################################################################
# independent representations

def dedekind_eta_i() -> float:
    """eta(i) = Gamma(1/4) / (2 pi^{3/4})."""
    return float(gamma_fn(0.25) / (2.0 * np.pi**0.75))


def theta_green(z):
    """G through the first Jacobi theta function at square modulus.

    G(z) = -(1/2 pi) ln|theta_1(pi(z_1 + i z_2), q=e^{-pi})|
           + z_2^2 / 2 + (1/2 pi) ln eta(i),

    valid after folding; the constant makes the mean vanish.
    """
    z = fold(z)
    u = np.pi * (z[..., 0] + 1j * z[..., 1])
    q = np.exp(-np.pi)
    th = np.zeros_like(u, dtype=complex)
    for k in range(8):
        th += (-1.0) ** k * q ** ((k + 0.5) ** 2) * np.sin((2 * k + 1) * u)
    th *= 2.0
    with np.errstate(divide="ignore"):
        val = -np.log(np.abs(th)) / (2.0 * np.pi)
    return val + z[..., 1] ** 2 / 2.0 + np.log(dedekind_eta_i()) / (2.0 * np.pi)


def rowsum_green(z, k_max: int = 18):
    """G by direct Fourier summation with the k_2 rows closed in cosh form.

    The k_1 = 0 row is a Bernoulli polynomial, each k_1 = k row sums to
    a cosh/sinh ratio, and the geometric large-k part of the rows is
    closed into a logarithm, leaving a remainder that decays like
    e^{-2 pi k (1 - |z_2|)}.
    """
    z = fold(z)
    z1 = z[..., 0]
    a = np.abs(z[..., 1])
    val = 0.5 * (a**2 - a + 1.0 / 6.0)
    w = np.exp(-2.0 * np.pi * a)
    with np.errstate(divide="ignore"):
        val -= np.log(1.0 - 2.0 * w * np.cos(2.0 * np.pi * z1) + w**2) / (4.0 * np.pi)
    for k in range(1, k_max + 1):
        pk = np.pi * k
        row = np.cosh(pk * (1.0 - 2.0 * a)) / np.sinh(pk) - np.exp(-2.0 * pk * a)
        val += np.cos(2.0 * np.pi * k * z1) * row / (2.0 * pk)
    return val


def gamma0_closed_form() -> float:
    """gamma_0 = -(1/2 pi) ln(2 pi) - (1/pi) ln eta(i).

    Follows from theta_green: near 0 the theta factor is
    pi |z| theta_1'(0) with theta_1'(0) = 2 eta(i)^3.
    """
    return float(-np.log(2.0 * np.pi) / (2.0 * np.pi) - np.log(dedekind_eta_i()) / np.pi)


##############################################################################
# weight fields

class HField:
    """Smooth positive weights h_i on the torus as exponentiated trig sums.

    ln h_i(x) = sum over modes k of a cos(2 pi k.x) + b sin(2 pi k.x),
    which keeps h positive and makes every derivative exact.  The
    constructor takes one mode table per component, each mapping an
    integer wavevector (k1, k2) to its (cos, sin) coefficient pair.
    """

    def __init__(self, tables):
        self.n = len(tables)
        if self.n == 0:
            raise ConfigurationError("need at least one component table")
        self._modes, self._cos, self._sin = [], [], []
        for tab in tables:
            ks, ac, bs = [], [], []
            for key, cc in tab.items():
                k = np.asarray(key, dtype=float)
                if k.shape != (2,) or not np.all(k == np.round(k)):
                    raise ConfigurationError(f"bad wavevector {key}")
                if np.all(k == 0):
                    raise ConfigurationError("constant offsets are not allowed; "
                                             "h is normalized through the ansatz instead")
                a, b = (float(cc[0]), float(cc[1]))
                ks.append(k)
                ac.append(a)
                bs.append(b)
            self._modes.append(np.array(ks, dtype=float).reshape(-1, 2))
            self._cos.append(np.array(ac, dtype=float))
            self._sin.append(np.array(bs, dtype=float))

    @classmethod
    def constant(cls, n: int) -> "HField":
        return cls([{} for _ in range(n)])

    @classmethod
    def from_config(cls, obj) -> "HField":
        """Build from the JSON shape [{"k1,k2": [cos, sin], ...}, ...]."""
        tables = []
        for tab in obj:
            parsed = {}
            for key, cc in tab.items():
                parts = key.split(",")
                if len(parts) != 2:
                    raise ConfigurationError(f"mode key '{key}' is not 'k1,k2'")
                parsed[(int(parts[0]), int(parts[1]))] = (float(cc[0]), float(cc[1]))
            tables.append(parsed)
        return cls(tables)

    def to_config(self):
        out = []
        for ks, ac, bs in zip(self._modes, self._cos, self._sin):
            out.append({f"{int(k[0])},{int(k[1])}": [float(a), float(b)]
                        for k, a, b in zip(ks, ac, bs)})
        return out

    def _parts(self, i, x):
        ks = self._modes[i]
        x = np.asarray(x, dtype=float)
        if ks.shape[0] == 0:
            return ks, np.zeros(x.shape[:-1] + (0,)), np.zeros(x.shape[:-1] + (0,))
        arg = 2.0 * np.pi * (x @ ks.T)
        return ks, np.cos(arg), np.sin(arg)

    def log_value(self, i, x):
        ks, c, s = self._parts(i, x)
        return c @ self._cos[i] + s @ self._sin[i]

    def log_grad(self, i, x):
        ks, c, s = self._parts(i, x)
        w = -s * self._cos[i] + c * self._sin[i]
        return 2.0 * np.pi * (w @ ks)

    def log_hess(self, i, x):
        ks, c, s = self._parts(i, x)
        w = -c * self._cos[i] - s * self._sin[i]
        kk = ks[:, :, None] * ks[:, None, :]
        return 4.0 * np.pi**2 * np.einsum("...m,mij->...ij", w, kk)

    def log_lap(self, i, x):
        ks, c, s = self._parts(i, x)
        w = -c * self._cos[i] - s * self._sin[i]
        return 4.0 * np.pi**2 * (w @ np.sum(ks**2, axis=1))

    def value(self, i, x):
        return np.exp(self.log_value(i, x))


##############################################################################
# the location functional

def _as_points(points, what="points"):
    q = np.asarray(points, dtype=float).reshape(-1, 2)
    if q.shape[0] == 0:
        raise ConfigurationError(f"{what} must contain at least one point")
    d = fold(q[:, None, :] - q[None, :, :])
    rr = np.sqrt(np.sum(d**2, axis=-1))
    np.fill_diagonal(rr, 1.0)
    if np.min(rr) < 1e-9:
        raise ConfigurationError("points must be pairwise distinct on the torus")
    return q


def f_functional(points, rho_star, m_star_vec, h: HField, green=None):
    """Location functional of a candidate blowup configuration.

    f(q) = sum_t sum_i rho_i [ln h_i(q_t) + pi m_i* gamma(q_t, q_t)
                              + sum_{s != t} pi m_i* G(q_t, q_s)],

    returned with its gradient (N, 2) and Hessian (2N, 2N), both from
    analytic derivatives of the lattice sums.  The gradient coincides
    with the per-point location condition: each pair term appears in
    two rows of the sum, and the diagonal gamma term differentiates to
    zero on a translation-invariant torus, which combine into
    sum_i rho_i [grad ln h_i(q_t) + 2 pi m_i* grad_1 G*(q_t; q_t)].
    """
    q = _as_points(points)
    rho = np.asarray(rho_star, dtype=float).ravel()
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    if not (rho.size == ms.size == h.n):
        raise ConfigurationError("rho, m*, and h must share the component count")
    green = TorusGreen() if green is None else green
    N = q.shape[0]
    w = np.pi * float(rho @ ms)        # shared coefficient of every pair term

    value = N * w * green.gamma0
    grad = np.zeros((N, 2))
    hess = np.zeros((N, 2, N, 2))
    for i in range(h.n):
        value += rho[i] * float(np.sum(h.log_value(i, q)))
        grad += rho[i] * h.log_grad(i, q)
        hb = rho[i] * h.log_hess(i, q)
        for t in range(N):
            hess[t, :, t, :] += hb[t]
    for t in range(N):
        for s in range(t + 1, N):
            z = q[t] - q[s]
            value += 2.0 * w * float(green.value(z))
            gz = 2.0 * w * green.grad(z)
            grad[t] += gz
            grad[s] -= gz
            hz = 2.0 * w * green.hess(z)
            hess[t, :, t, :] += hz
            hess[s, :, s, :] += hz
            hess[t, :, s, :] -= hz
            hess[s, :, t, :] -= hz
    return value, grad, hess.reshape(2 * N, 2 * N)


def location_residual(points, rho_star, m_star_vec, h: HField, green=None):
    """Per-point residual sum_i rho_i [grad ln h_i + 2 pi m_i* grad_1 G*].

    Assembled directly from the definition; agrees with the gradient of
    f_functional identically (both are computed in tests and reports).
    """
    q = _as_points(points)
    rho = np.asarray(rho_star, dtype=float).ravel()
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    green = TorusGreen() if green is None else green
    N = q.shape[0]
    res = np.zeros((N, 2))
    for i in range(h.n):
        res += rho[i] * h.log_grad(i, q)
    coef = 2.0 * np.pi * float(rho @ ms)
    for t in range(N):
        for s in range(N):
            if s != t:
                # grad_1 gamma(q, q) = 0 on the flat torus
                res[t] += coef * green.grad(q[t] - q[s])
    return res


@dataclass
class CriticalPoint:
    points: np.ndarray
    value: float
    grad_norm: float
    hess_eigs: np.ndarray
    nondegenerate: bool
    iterations: int


# Hessian eigenvalues below this fraction of the largest count as zero
# modes (translation invariance with constant h produces exact ones).
NONDEGENERATE_RTOL = 1e-8


def _newton_descend(q0, rho, ms, h, green, tol, max_iter):
    q = q0.copy()
    lam = 0.0
    _, g, hm = f_functional(q, rho, ms, h, green)
    gn = np.max(np.abs(g))
    for it in range(max_iter):
        if gn <= tol:
            return q, gn, hm, it
        for _ in range(24):
            try:
                step = np.linalg.solve(hm + lam * np.eye(hm.shape[0]),
                                       -g.ravel())
            except np.linalg.LinAlgError:
                lam = max(10.0 * lam, 1e-8 * np.max(np.abs(hm)))
                continue
            qn = fold(q + step.reshape(-1, 2))
            _, g2, hm2 = f_functional(qn, rho, ms, h, green)
            gn2 = np.max(np.abs(g2))
            if gn2 < gn:
                q, g, hm, gn = qn, g2, hm2, gn2
                lam *= 0.25
                break
            lam = max(10.0 * lam, 1e-10 * np.max(np.abs(hm)))
        else:
            break
    return q, gn, hm, max_iter


def find_critical(points_init, rho_star, m_star_vec, h: HField, green=None,
                  tol=1e-11, max_iter=80, n_seeds=0, seed=0,
                  jitter=0.05) -> CriticalPoint:
    """Damped Newton search for a critical point of f.

    Seeds at points_init plus n_seeds jittered copies; each descent
    regularizes the Hessian whenever the plain Newton step fails to
    shrink the gradient.  The flag marks whether every Hessian
    eigenvalue clears the zero-mode threshold; with constant h the
    torus translation symmetry forces two exact zero modes, so the
    flag is genuinely False there.
    """
    q0 = _as_points(points_init)
    rho = np.asarray(rho_star, dtype=float).ravel()
    ms = np.asarray(m_star_vec, dtype=float).ravel()
    green = TorusGreen() if green is None else green
    rng = np.random.default_rng(seed)
    seeds = [q0] + [fold(q0 + jitter * rng.standard_normal(q0.shape))
                    for _ in range(n_seeds)]
    best = None
    for s in seeds:
        try:
            q, gn, hm, it = _newton_descend(s, rho, ms, h, green, tol, max_iter)
        except ConfigurationError:    # jitter collided two points
            continue
        if best is None or gn < best[1]:
            best = (q, gn, hm, it)
        if gn <= tol:
            break
    if best is None or best[1] > tol:
        reached = "nothing converged" if best is None else f"|grad| = {best[1]:.3e}"
        raise ConvergenceError(
            f"no critical point within {max_iter} iterations ({reached})")
    q, gn, hm, it = best
    eigs = np.linalg.eigvalsh(0.5 * (hm + hm.T))
    scale = np.max(np.abs(eigs)) or 1.0
    val, _, _ = f_functional(q, rho, ms, h, green)
    return CriticalPoint(points=q, value=val, grad_norm=gn, hess_eigs=eigs,
                         nondegenerate=bool(np.min(np.abs(eigs))
                                            > NONDEGENERATE_RTOL * scale),
                         iterations=it)
