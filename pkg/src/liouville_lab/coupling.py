"""Coupling matrices and the parameter hypersurface.

The interaction between components is encoded by a symmetric matrix A
with nonnegative entries.  Everything downstream (bubble masses, blowup
criteria) is driven by two derived objects: the quadratic form

    Lambda_N(rho) = 4 sum_i rho_i/(2 pi N) - sum_ij a_ij rho_i rho_j/(2 pi N)^2

whose positive zero set is the critical hypersurface for N-point
concentration, and the normalized masses m_i = sum_j a_ij rho_j/(2 pi N).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InfeasibleRayError

# Relative determinant threshold: |det A| must exceed DET_RTOL times the
# Hadamard bound (product of row norms), otherwise A counts as singular.
DET_RTOL = 1e-12

# Entries with |a_ij| below this are treated as structural zeros when
# testing irreducibility.
ZERO_TOL = 1e-14

# Masses this close to the integrability boundary m = 2 are flagged.
MASS_BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class HypothesisReport:
    """Outcome of the structural checks on a coupling matrix.

    clauses maps a clause name to (passed, witness); witness is a short
    human-readable string locating the failure (or confirming the pass).
    """

    passed: bool
    clauses: dict
    scalar_exempt: bool = False

    def failures(self):
        return [k for k, (ok, _) in self.clauses.items() if not ok]


@dataclass(frozen=True)
class MassData:
    """Normalized local masses attached to a parameter point."""

    sigma: np.ndarray      # sigma_i = rho_i / (2 pi N)
    m: np.ndarray          # m_i = (A sigma)_i
    m_star: float          # min_i m_i
    boundary: bool         # m_star <= 2 (+tol): mass integrals diverge


class CouplingMatrix:
    """Symmetric nonnegative coupling matrix with a cached inverse.

    Parameters
    ----------
    entries : (n, n) array_like
        Matrix entries.  Must be square; symmetry and sign constraints
        are checked by :func:`check_hypotheses`, not here, so that the
        checker itself can be exercised on bad input.
    """

    def __init__(self, entries):
        a = np.asarray(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigurationError(f"coupling matrix must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ConfigurationError("coupling matrix has non-finite entries")
        self.entries = a
        self.entries.setflags(write=False)
        self._inverse = None

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        """Inverse entries; raises ConfigurationError if A is singular."""
        if self._inverse is None:
            a = self.entries
            det = np.linalg.det(a)
            row_norms = np.linalg.norm(a, axis=1)
            scale = float(np.prod(np.maximum(row_norms, 1e-300)))
            if abs(det) <= DET_RTOL * scale:
                raise ConfigurationError(
                    f"coupling matrix numerically singular: |det|={abs(det):.3e} "
                    f"<= {DET_RTOL:.0e} * {scale:.3e}")
            inv = np.linalg.inv(a)
            inv.setflags(write=False)
            self._inverse = inv
        return self._inverse

    def __repr__(self):
        return f"CouplingMatrix({self.entries.tolist()})"


@dataclass(frozen=True)
class ParamVector:
    """A positive parameter vector together with the concentration count N."""

    rho: np.ndarray
    N: int

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        object.__setattr__(self, "rho", rho)
        if rho.ndim != 1 or rho.size == 0:
            raise ConfigurationError("rho must be a nonempty vector")
        if not np.all(np.isfinite(rho)) or not np.all(rho > 0):
            raise ConfigurationError("rho must be finite and strictly positive")
        if self.N < 1:
            raise ConfigurationError("N must be a positive integer")


def _irreducible(a: np.ndarray) -> bool:
    """Connectivity of the support graph of |a| (off-diagonal edges)."""
    n = a.shape[0]
    if n == 1:
        return True
    adj = np.abs(a) > ZERO_TOL
    reach = np.zeros(n, dtype=bool)
    stack = [0]
    reach[0] = True
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i])[0]:
            if not reach[j]:
                reach[j] = True
                stack.append(j)
    return bool(reach.all())


def check_hypotheses(coupling: CouplingMatrix, scalar_exempt: bool = False) -> HypothesisReport:
    """Structural checks on the coupling matrix.

    First group: entries nonnegative, matrix symmetric, invertible,
    irreducible.  Second group, on the inverse B = A^{-1}: diagonal
    b_ii <= 0, off-diagonal b_ij >= 0, row sums sum_j b_ij >= 0.

    The scalar case n = 1 cannot satisfy the inverse sign pattern
    (b_11 = 1/a_11 > 0); pass scalar_exempt=True to waive the second
    group for n = 1, which is the convention used by the single-equation
    oracles throughout the test-suite.
    """
    a = coupling.entries
    n = coupling.n
    clauses = {}

    bad = np.argwhere(a < -ZERO_TOL)
    clauses["nonnegative"] = (bad.size == 0,
                              "all entries >= 0" if bad.size == 0 else
                              f"a[{bad[0][0]},{bad[0][1]}] = {a[tuple(bad[0])]:.3e} < 0")

    asym = np.max(np.abs(a - a.T)) if n > 1 else 0.0
    clauses["symmetric"] = (asym <= 1e-12 * max(1.0, np.max(np.abs(a))),
                            f"max |a_ij - a_ji| = {asym:.3e}")

    try:
        inv = coupling.inverse
        clauses["invertible"] = (True, "determinant above threshold")
    except ConfigurationError as exc:
        inv = None
        clauses["invertible"] = (False, str(exc))

    clauses["irreducible"] = (_irreducible(a),
                              "support graph connected" if _irreducible(a) else
                              "support graph disconnected")

    waive_inverse = scalar_exempt and n == 1
    if inv is not None and not waive_inverse:
        diag = np.diag(inv)
        off = inv - np.diag(diag)
        rows = inv.sum(axis=1)
        ok_d = bool(np.all(diag <= ZERO_TOL))
        ok_o = bool(np.all(off >= -ZERO_TOL))
        ok_r = bool(np.all(rows >= -ZERO_TOL))
        clauses["inverse_diagonal"] = (ok_d, f"max diag = {np.max(diag):.3e}")
        clauses["inverse_offdiagonal"] = (ok_o, f"min offdiag = {np.min(off + np.diag(np.full(n, np.inf))):.3e}"
                                          if n > 1 else "no offdiagonal entries")
        clauses["inverse_row_sums"] = (ok_r, f"min row sum = {np.min(rows):.3e}")
    elif waive_inverse:
        clauses["inverse_sign_pattern"] = (True, "waived for scalar case")

    passed = all(ok for ok, _ in clauses.values())
    return HypothesisReport(passed=passed, clauses=clauses, scalar_exempt=waive_inverse)


def lambda_in(coupling: CouplingMatrix, params: ParamVector) -> float:
    """The quadratic form whose zero set is the critical hypersurface.

    Lambda = 4 sum_i x_i - sum_ij a_ij x_i x_j  with x = rho/(2 pi N).
    """
    if params.rho.size != coupling.n:
        raise ConfigurationError("rho dimension does not match coupling size")
    x = params.rho / (2.0 * np.pi * params.N)
    return float(4.0 * x.sum() - x @ coupling.entries @ x)


def gamma_project(coupling: CouplingMatrix, rho0: Sequence[float], N: int) -> ParamVector:
    """Scale a positive direction onto the critical hypersurface.

    Returns rho = s* rho0 with s* > 0 and Lambda(rho) = 0.  Along a ray,
    Lambda(s rho0) = 4 s L - s^2 Q with L = sum x0_i and
    Q = x0^T A x0, so s* = 4 L / Q whenever Q > 0.
    """
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.ndim != 1 or rho0.size != coupling.n:
        raise ConfigurationError("rho0 dimension does not match coupling size")
    if not np.all(rho0 > 0):
        raise ConfigurationError("rho0 must be strictly positive")
    x0 = rho0 / (2.0 * np.pi * N)
    q = float(x0 @ coupling.entries @ x0)
    if q <= 0.0:
        raise InfeasibleRayError(
            f"quadratic form vanishes along the ray (x0^T A x0 = {q:.3e}); "
            "no positive intersection with the hypersurface")
    s = 4.0 * float(x0.sum()) / q
    return ParamVector(rho=s * rho0, N=N)


def m_star(coupling: CouplingMatrix, params: ParamVector) -> MassData:
    """Normalized masses m_i = sum_j a_ij rho_j/(2 pi N) and their minimum.

    sigma_i = rho_i/(2 pi N) is the local mass each component deposits
    at every concentration point; m is its image under the coupling.
    """
    if params.rho.size != coupling.n:
        raise ConfigurationError("rho dimension does not match coupling size")
    sigma = params.rho / (2.0 * np.pi * params.N)
    m = coupling.entries @ sigma
    ms = float(np.min(m))
    return MassData(sigma=sigma, m=m, m_star=ms,
                    boundary=bool(ms <= 2.0 + MASS_BOUNDARY_TOL))
