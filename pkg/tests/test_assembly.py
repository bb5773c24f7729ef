"""Glued fields: configuration, seams, residuals, balance identities."""

import numpy as np
import pytest

from liouville_lab.assembly import (assemble, constant_weights,
                                    corrector_fields, global_cancellation,
                                    location_check, make_config,
                                    pohozaev_balance, radial_fields, residual,
                                    tilted_weights)
from liouville_lab.coupling import CouplingMatrix, ParamVector
from liouville_lab.errors import ConfigurationError, ConvergenceError
from liouville_lab.linearized import first_order_correctors
from liouville_lab.torus import HField, TorusGreen, f_functional, fold

RHO_SCALAR = [8.0 * np.pi]          # scalar hypersurface point at one site
RHO_PAIR = [16.0 * np.pi] * 2       # off-diagonal pair, sigma = (4, 4)


@pytest.fixture(scope="module")
def green():
    return TorusGreen()


@pytest.fixture(scope="module")
def tilt_h():
    return HField([{(1, 0): (0.25, -0.10), (0, 1): (0.15, 0.05)}])


@pytest.fixture(scope="module")
def scalar_config(scalar_coupling, scalar_bubble, green):
    return make_config(scalar_coupling, RHO_SCALAR, [[0.3, 0.4]],
                       eps_1=0.02, green=green, bubble=scalar_bubble)


@pytest.fixture(scope="module")
def scalar_solution(scalar_config):
    return assemble(scalar_config, grid=256)


@pytest.fixture(scope="module")
def pair_config(offdiag_coupling, bubble_44, green):
    return make_config(offdiag_coupling, RHO_PAIR,
                       [[0.2, 0.3], [0.7, 0.8]],
                       eps_1=0.02, green=green, bubble=bubble_44)


@pytest.fixture(scope="module")
def pair_solution(pair_config):
    return assemble(pair_config, grid=256)


##########################################################################
# configuration
##########################################################################

def test_make_config_scalar_scales(scalar_config, scalar_bubble):
    cfg = scalar_config
    assert cfg.bubble is scalar_bubble
    assert abs(cfg.d_min - 1.0) < 1e-12
    assert cfg.eps.shape == (1,) and abs(cfg.eps[0] - 0.02) < 1e-15
    assert cfg.H.shape == (1, 1)
    assert abs(cfg.bubble.m[0] - 4.0) < 1e-9
    assert np.allclose(cfg.rho, RHO_SCALAR)


def test_make_config_rejects_off_surface(scalar_coupling):
    with pytest.raises(ConfigurationError, match="hypersurface"):
        make_config(scalar_coupling, [8.2 * np.pi], [[0.3, 0.4]], eps_1=0.02)


def test_make_config_rejects_large_scale(scalar_coupling, scalar_bubble):
    with pytest.raises(ConfigurationError, match="geometry"):
        make_config(scalar_coupling, RHO_SCALAR, [[0.3, 0.4]],
                    eps_1=0.2, bubble=scalar_bubble)


def test_make_config_rejects_mismatched_params(scalar_coupling,
                                               offdiag_coupling):
    two_site = ParamVector(rho=np.array(RHO_SCALAR), N=2)
    with pytest.raises(ConfigurationError, match="points"):
        make_config(scalar_coupling, two_site, [[0.3, 0.4]], eps_1=0.02)
    with pytest.raises(ConfigurationError, match="dimension"):
        make_config(offdiag_coupling, RHO_SCALAR, [[0.3, 0.4]], eps_1=0.02)


def test_make_config_rejects_wrong_bubble(offdiag_coupling, bubble_36):
    with pytest.raises(ConfigurationError, match="bubble"):
        make_config(offdiag_coupling, RHO_PAIR, [[0.2, 0.3], [0.7, 0.8]],
                    eps_1=0.02, bubble=bubble_36)


def test_make_config_scale_ratio_follows_h(scalar_coupling, scalar_bubble,
                                           tilt_h, green):
    # one component at two sites: eps_2/eps_1 = exp((H_12 - H_11)/(m - 2))
    cfg = make_config(scalar_coupling, [16.0 * np.pi],
                      [[0.2, 0.3], [0.7, 0.8]], h=tilt_h,
                      eps_1=0.01, green=green, bubble=scalar_bubble)
    want = 0.01 * np.exp((cfg.H[0, 1] - cfg.H[0, 0]) / (cfg.bubble.m[0] - 2.0))
    assert abs(cfg.eps[1] - want) < 1e-16
    # H itself recomposes from the Green diagonal and the weight
    gstar = green.gamma0 + green.value(fold(np.array([0.5, 0.5])))
    manual = 2.0 * np.pi * cfg.bubble.m[0] * gstar + tilt_h.log_value(0, [0.2, 0.3])
    assert abs(cfg.H[0, 0] - manual) < 1e-12


##########################################################################
# the glued field
##########################################################################

def test_assemble_symmetric_pair_components(pair_solution):
    # both components carry the same data, so the fields coincide
    sol = pair_solution
    assert np.max(np.abs(sol.u[0] - sol.u[1])) < 1e-9
    assert np.max(np.abs(sol.mismatch[:, 0] - sol.mismatch[:, 1])) < 1e-12


def test_assemble_masses_near_one(scalar_solution, pair_solution):
    assert abs(scalar_solution.masses[0] - 1.0) < 0.03
    assert np.max(np.abs(pair_solution.masses - 1.0)) < 0.03


def test_assemble_outer_matches_tail_form(scalar_solution, scalar_config):
    cfg, sol = scalar_config, scalar_solution
    g = sol.grid
    nodes = [(10, 200), (128, 30), (200, 128)]
    for jx, jy in nodes:
        x = np.array([jx / g, jy / g])
        z = fold(x - cfg.points[0])
        assert np.hypot(*z) > sol.tau
        want = sol.averages + 2.0 * np.pi * cfg.bubble.m * cfg.green.value(z)
        assert np.max(np.abs(sol.u[:, jx, jy] - want)) < 1e-10


def test_assemble_core_uses_profile(scalar_solution, scalar_config):
    cfg, sol = scalar_config, scalar_solution
    g = sol.grid
    # a node well inside the blend collar of the single disk
    jx, jy = int(0.3 * g) + 8, int(0.4 * g)
    z = fold(np.array([jx / g, jy / g]) - cfg.points[0])
    r = np.hypot(*z)
    assert r < 0.8 * sol.tau
    v = cfg.bubble.eval_v(np.array([r / cfg.eps[0]]))[0, 0]
    want = (v - 2.0 * np.log(cfg.eps[0]) - np.log(cfg.rho[0])
            + 2.0 * np.pi * cfg.bubble.m[0]
            * (cfg.green.star_value(z) - cfg.green.gamma0))
    assert abs(sol.u[0, jx, jy] - want) < 1e-10


def test_assemble_mismatch_rate(scalar_coupling, scalar_bubble, green):
    # seam gap is the far-field truncation: rate eps^(m-2) at fixed tau
    gaps = []
    for eps in (0.04, 0.02, 0.01):
        cfg = make_config(scalar_coupling, RHO_SCALAR, [[0.3, 0.4]],
                          eps_1=eps, green=green, bubble=scalar_bubble)
        gaps.append(assemble(cfg, grid=64).mismatch[0, 0])
    for a, b in zip(gaps, gaps[1:]):
        assert abs(np.log2(a / b) - 2.0) < 0.15


def test_assemble_guards(scalar_config):
    with pytest.raises(ConfigurationError, match="apart"):
        assemble(scalar_config, tau=0.3, grid=64)
    with pytest.raises(ConfigurationError, match="close"):
        assemble(scalar_config, tau=0.03, grid=64)


##########################################################################
# field equation residual
##########################################################################

def test_residual_decreases_with_scale(scalar_coupling, scalar_bubble, green):
    reports = []
    for eps in (0.08, 0.04, 0.02):
        cfg = make_config(scalar_coupling, RHO_SCALAR, [[0.3, 0.4]],
                          eps_1=eps, green=green, bubble=scalar_bubble)
        reports.append(residual(assemble(cfg, grid=256), cfg))
    l2 = [r.l2[0] for r in reports]
    l2_outer = [r.l2_outer[0] for r in reports]
    dm = [abs(r.masses[0] - 1.0) for r in reports]
    assert l2[0] > l2[1] > l2[2]
    assert l2_outer[0] > l2_outer[1] > l2_outer[2]
    assert dm[0] > dm[1] > dm[2]
    # the sup norm saturates at the O(1) core curvature plateau
    assert max(r.sup[0] for r in reports) < 1e3


def test_residual_grid_doubling(scalar_config, scalar_solution):
    r256 = residual(scalar_solution, scalar_config)
    r512 = residual(assemble(scalar_config, grid=512), scalar_config)
    assert abs(r256.l2[0] - r512.l2[0]) < 0.05 * r512.l2[0]
    assert abs(r256.l2_outer[0] - r512.l2_outer[0]) < 0.05 * r512.l2_outer[0]


def test_residual_rejects_coarse_grid(scalar_config):
    sol = assemble(scalar_config, grid=64)
    with pytest.raises(ConvergenceError, match="under-resolve"):
        residual(sol, scalar_config)


##########################################################################
# planar flux balance
##########################################################################

def test_pohozaev_exact_bubble(scalar_bubble, sym_bubble):
    for bub, c in ((scalar_bubble, [1.0]), (sym_bubble, [1.0, 1.0])):
        bal = pohozaev_balance(bub.coupling, radial_fields(bub),
                               constant_weights(c), R=6.0)
        assert abs(bal.volume) < 1e-10
        assert abs(bal.boundary_kinetic) < 1e-10
        assert abs(bal.boundary_weight) < 1e-10
        assert bal.imbalance < 1e-10


def test_pohozaev_tilted_weight_bounded(bubble_36):
    # tilts balanced against the deposited masses: 0.8*3 - 0.4*6 = 0
    tilts = np.array([[0.8, 0.0], [-0.4, 0.0]])
    cos_sol, sin_sol = first_order_correctors(bubble_36, tilts, R_out=40.0)
    assert not cos_sol.projected
    scaled = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        bal = pohozaev_balance(bubble_36.coupling,
                               corrector_fields(bubble_36, cos_sol, sin_sol, eps),
                               tilted_weights(tilts, eps), R=6.0)
        scaled.append(bal.imbalance / eps**2)
    assert max(scaled) < 5.0
    assert scaled[0] > scaled[1] > scaled[2]


def test_pohozaev_rotation_covariance(bubble_36):
    tilts = np.array([[0.8, 0.0], [-0.4, 0.0]])
    cos_sol, sin_sol = first_order_correctors(bubble_36, tilts, R_out=40.0)
    eps = 5e-3
    v0 = corrector_fields(bubble_36, cos_sol, sin_sol, eps)
    h0 = tilted_weights(tilts, eps)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])

    def rotate(funcs):
        def make(f):
            def g(pts):
                pts = np.asarray(pts, float).reshape(-1, 2)
                val, gr = f(pts @ rot)
                return val, gr @ rot.T
            return g
        return [make(f) for f in funcs]

    b0 = pohozaev_balance(bubble_36.coupling, v0, h0, R=6.0, axis=0)
    b1 = pohozaev_balance(bubble_36.coupling, rotate(v0), rotate(h0),
                          R=6.0, axis=1)
    assert abs(b0.volume - b1.volume) < 1e-12
    assert abs(b0.boundary_kinetic - b1.boundary_kinetic) < 1e-12
    assert abs(b0.boundary_weight - b1.boundary_weight) < 1e-12


def test_pohozaev_guards(scalar_bubble):
    fields = radial_fields(scalar_bubble)
    weights = constant_weights([1.0])
    with pytest.raises(ConfigurationError, match="axis"):
        pohozaev_balance(scalar_bubble.coupling, fields, weights, R=4.0, axis=2)
    with pytest.raises(ConfigurationError, match="radius"):
        pohozaev_balance(scalar_bubble.coupling, fields, weights, R=0.0)
    with pytest.raises(ConfigurationError, match="per component"):
        pohozaev_balance(scalar_bubble.coupling, fields, weights + weights, R=4.0)


##########################################################################
# stationarity and cancellation
##########################################################################

def test_location_check_critical_pair(pair_config):
    # constant h, half-period pair: both gradient terms vanish
    assert np.max(np.abs(location_check(pair_config))) < 1e-12


def test_location_check_matches_gradient(scalar_coupling, scalar_bubble,
                                         tilt_h, green):
    cfg = make_config(scalar_coupling, RHO_SCALAR, [[0.33, 0.71]], h=tilt_h,
                      eps_1=0.02, green=green, bubble=scalar_bubble)
    res = location_check(cfg)
    _, grad, _ = f_functional(cfg.points, cfg.rho, cfg.bubble.m, tilt_h, green)
    assert res.shape == (1, 2)
    assert np.max(np.abs(res - grad)) < 1e-12
    assert np.max(np.abs(res)) > 1e-2          # the point is not critical


def test_global_cancellation_constant_probe(pair_solution, pair_config):
    g = pair_solution.grid
    out = global_cancellation(np.ones((g, g)), pair_solution, pair_config)
    want = 2.0 * np.pi * pair_config.N * pair_config.bubble.m
    assert np.max(np.abs(out - want)) < 1e-10 * np.max(np.abs(want))
    assert np.max(np.abs(global_cancellation(
        np.zeros((g, g)), pair_solution, pair_config))) == 0.0


def test_global_cancellation_odd_probe(pair_solution, pair_config):
    # xi odd about the pair midpoint kills the symmetric density
    g = pair_solution.grid
    xs = np.arange(g) / g
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    c = 0.5 * (pair_config.points[0] + pair_config.points[1])
    xi = np.sin(2.0 * np.pi * ((X - c[0]) + (Y - c[1])))
    out = global_cancellation(xi, pair_solution, pair_config)
    scale = 2.0 * np.pi * pair_config.N * np.max(pair_config.bubble.m)
    assert np.max(np.abs(out)) < 1e-6 * scale


def test_global_cancellation_shape_guard(pair_solution, pair_config):
    with pytest.raises(ConfigurationError, match="shape"):
        global_cancellation(np.ones(7), pair_solution, pair_config)
