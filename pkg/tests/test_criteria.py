"""Blowup criteria: cell quadrature, coefficient oracles, case table."""

import warnings

import numpy as np
import pytest

from liouville_lab.criteria import (CriteriaReport, _cell_nodes, _fit_basis,
                                    build_partition, build_report,
                                    classify_regime, d_coefficients,
                                    epsilon_ratios, h_matrix, l_coefficients,
                                    lambda_prediction)
from liouville_lab.errors import ConfigurationError, ConvergenceError
from liouville_lab.torus import HField, TorusGreen, gamma0_closed_form


@pytest.fixture(scope="module")
def green():
    return TorusGreen()


@pytest.fixture(scope="module")
def generic_h():
    return HField([
        {(1, 0): (0.25, -0.10), (0, 1): (0.15, 0.05), (1, 1): (0.06, 0.00)},
        {(1, 0): (-0.20, 0.10), (2, 1): (0.04, -0.03)},
    ])


def shifted_h(h, v):
    """h'(x) = h(x - v), realized on the mode coefficients."""
    tables = []
    for tab in h.to_config():
        out = {}
        for key, (a, b) in tab.items():
            k1, k2 = (int(p) for p in key.split(","))
            phi = 2.0 * np.pi * (k1 * v[0] + k2 * v[1])
            out[(k1, k2)] = (a * np.cos(phi) - b * np.sin(phi),
                             a * np.sin(phi) + b * np.cos(phi))
        tables.append(out)
    return HField(tables)


def manual_report(points, ms, H, D, L):
    wts = np.exp(H - H[:, :1])
    S_D = float(np.sum(D * wts))
    S_L = float(np.sum(L * wts))
    scale_D = float(np.sum(np.abs(D) * wts))
    scale_L = float(np.sum(np.abs(L) * wts))
    m_star = float(np.min(ms))
    return CriteriaReport(points=np.asarray(points, float),
                          m_star_vec=np.asarray(ms, float), m_star=m_star,
                          H=H, D=D, L=L, S_D=S_D, S_L=S_L,
                          scale_D=scale_D, scale_L=scale_L,
                          regime=classify_regime(m_star, S_D, S_L,
                                                 scale_D, scale_L))


##########################################################################
# H and L coefficients
##########################################################################

def test_h_matrix_constant_h_single_point(green):
    h = HField.constant(2)
    H = h_matrix([[0.3, 0.4]], h, (3.0, 6.0), green)
    # one point, no neighbors: G*(q; q) is just the diagonal constant
    expect = 2.0 * np.pi * np.array([3.0, 6.0]) * gamma0_closed_form()
    assert H.shape == (2, 1)
    assert np.max(np.abs(H[:, 0] - expect)) < 1e-13


def test_h_matrix_symmetric_pair(green):
    h = HField.constant(1)
    H = h_matrix([[0.0, 0.0], [0.5, 0.5]], h, (4.0,), green)
    assert abs(H[0, 0] - H[0, 1]) < 1e-13


def test_h_matrix_recomposes_from_parts(green, generic_h):
    q = np.array([[0.12, 0.75], [0.58, 0.31], [0.9, 0.9]])
    ms = np.array([2.7, 5.2])
    H = h_matrix(q, generic_h, ms, green)
    for i in range(2):
        for t in range(3):
            gs = green.gamma0
            for s in range(3):
                if s != t:
                    gs += float(green.value(q[t] - q[s]))
            want = 2.0 * np.pi * ms[i] * gs + float(generic_h.log_value(i, q[t]))
            assert abs(H[i, t] - want) < 1e-12


def test_l_constant_h_single_point(green):
    L = l_coefficients([[0.2, 0.9]], HField.constant(1), green)
    assert L.shape == (1, 1)
    assert abs(L[0, 0] - 8.0 * np.pi) < 1e-12


def test_l_constant_h_half_period_pair(green):
    # the Green gradient at the half-period offset vanishes by symmetry,
    # so only the 8 pi N background survives
    L = l_coefficients([[0.0, 0.0], [0.5, 0.5]], HField.constant(2), green)
    assert np.max(np.abs(L - 16.0 * np.pi)) < 1e-10


def test_l_matches_finite_differences(green, generic_h):
    q = np.array([[0.22, 0.67], [0.71, 0.18]])
    L = l_coefficients(q, generic_h, green)

    def fd(f, x, s):
        g = np.zeros(2)
        lap = 0.0
        for d in range(2):
            e = np.zeros(2)
            e[d] = s
            g[d] = (f(x + e) - f(x - e)) / (2.0 * s)
            lap += (f(x + e) - 2.0 * f(x) + f(x - e)) / s**2
        return g, lap

    for i in range(2):
        for t in range(2):
            def lh(x):
                return float(generic_h.log_value(i, x))

            def gst(x):
                # neighbor part of G*(x; q_t), the only piece with a gradient
                out = 0.0
                for s in range(2):
                    if s != t:
                        out += float(green.value(x - q[s]))
                return out

            vals = []
            for step in (2e-3, 1e-3):
                gh, laph = fd(lh, q[t], step)
                gg, _ = fd(gst, q[t], step)
                grad = gh + 8.0 * np.pi * gg
                vals.append(laph + 16.0 * np.pi + grad @ grad)
            # one Richardson sweep of the O(s^2) central-difference error
            want = (4.0 * vals[1] - vals[0]) / 3.0
            assert abs(L[i, t] - want) < 1e-7 * max(1.0, abs(want))


##########################################################################
# cells and the singular quadrature
##########################################################################

def test_partition_tiles_the_torus():
    part = build_partition([[0.4, 0.8]])
    assert np.allclose(part.areas(), [1.0], atol=1e-12)
    assert abs(part.inradius(0) - 0.5) < 1e-12

    part = build_partition([[0.1, 0.1], [0.5, 0.6], [0.8, 0.25]])
    areas = part.areas()
    assert np.all(areas > 0)                 # counterclockwise polygons
    assert abs(np.sum(areas) - 1.0) < 1e-9
    for t in range(3):
        assert part.inradius(t) > 0.05


def test_cell_quadrature_area_and_green_integral(green):
    part = build_partition([[0.37, 0.61]])
    tau = 0.05
    nodes, w = _cell_nodes(part, 0, tau)
    assert abs(np.sum(w) - (1.0 - np.pi * tau**2)) < 1e-12
    # zero-mean Green function: the cell integral equals minus the ball
    # integral, whose expansion around the log core is known in closed form
    val = float(w @ green.value(nodes - part.points[0]))
    g0 = gamma0_closed_form()
    want = -(0.5 * tau**2 * np.log(1.0 / tau) + 0.25 * tau**2
             + g0 * np.pi * tau**2 + np.pi * tau**4 / 8.0)
    assert abs(val - want) < 1e-6


def test_cell_quadrature_tau_guard():
    part = build_partition([[0.5, 0.5]])
    with pytest.raises(ConfigurationError):
        _cell_nodes(part, 0, 0.6)
    with pytest.raises(ConfigurationError):
        _cell_nodes(part, 0, 0.0)


##########################################################################
# D coefficients
##########################################################################

def test_fit_basis_by_mass():
    assert _fit_basis(4.0) == (0.0, 2.0, 4.0, "log")
    assert _fit_basis(3.0) == (0.0, 1.0, 3.0)
    assert _fit_basis(2.5) == (0.0, 1.5, 3.5)
    assert _fit_basis(5.0) == (-1.0, 0.0, 1.0, 3.0)
    assert _fit_basis(6.0) == (-2.0, 0.0, 2.0, 4.0, "log")


def test_d_log_coefficient_matches_curvature(green, scalar_bubble):
    # at m = 4 the fitted ln(1/tau) coefficient must equal
    # (pi / 2) e^I L with L = 8 pi for constant h on one point
    h = HField.constant(1)
    q = [[0.25, 0.6]]
    D, traces = d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m,
                               [0.2, 0.1, 0.05], green=green)
    tr = traces[0]
    assert tr.exponents == (0.0, 2.0, 4.0, "log")
    assert tr.taus.size == 6 and np.all(np.diff(tr.taus) < 0)
    assert tr.spread < 1e-3
    want = 0.5 * np.pi * np.exp(float(scalar_bubble.I[0])) * 8.0 * np.pi
    assert abs(tr.log_coefficient - want) < 1e-6 * want
    # the estimate must be stable under a different quadrature resolution
    D2, _ = d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m,
                           [0.2, 0.1, 0.05], green=green, quad=(192, 48, 24))
    assert abs(D2[0, 0] - D[0, 0]) < 1e-6 * abs(D[0, 0])


def test_d_symmetric_pair(green, bubble_44):
    # two congruent cells, identical components: D must be flat
    h = HField.constant(2)
    D, _ = d_coefficients([[0.0, 0.0], [0.5, 0.5]], h, bubble_44.I,
                          bubble_44.m, [0.1, 0.05, 0.025], green=green)
    scale = np.max(np.abs(D))
    assert np.max(np.abs(D[:, 0] - D[:, 1])) < 1e-8 * scale
    assert np.max(np.abs(D[0] - D[1])) < 1e-8 * scale


def test_d_two_triples_consistent(green, bubble_36, generic_h):
    q = [[0.3, 0.7]]
    Da, _ = d_coefficients(q, generic_h, bubble_36.I, bubble_36.m,
                           [0.1, 0.05, 0.025], green=green)
    Db, _ = d_coefficients(q, generic_h, bubble_36.I, bubble_36.m,
                           [0.05, 0.025, 0.0125], green=green)
    rel = np.abs(Da - Db) / np.abs(Da)
    assert rel[1, 0] < 1e-5          # m = 3 component
    assert rel[0, 0] < 1e-3          # m = 6 carries divergent powers


def test_d_translation_invariance(green, scalar_bubble):
    h = HField([{(1, 0): (0.2, -0.05), (0, 1): (0.1, 0.15)}])
    v = np.array([0.37, -0.21])
    q = np.array([[0.3, 0.7]])
    taus = [0.2, 0.1, 0.05]
    D, _ = d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m,
                          taus, green=green)
    D2, _ = d_coefficients(q + v, shifted_h(h, v), scalar_bubble.I,
                           scalar_bubble.m, taus, green=green)
    assert np.max(np.abs(D2 - D)) < 1e-9 * np.max(np.abs(D))
    H = h_matrix(q, h, scalar_bubble.m, green)
    H2 = h_matrix(q + v, shifted_h(h, v), scalar_bubble.m, green)
    assert np.max(np.abs(H2 - H)) < 1e-12
    L = l_coefficients(q, h, green)
    L2 = l_coefficients(q + v, shifted_h(h, v), green)
    assert np.max(np.abs(L2 - L)) < 1e-9 * np.max(np.abs(L))


def test_d_input_guards(green, scalar_bubble):
    h = HField.constant(1)
    q = [[0.5, 0.5]]
    with pytest.raises(ConfigurationError):
        d_coefficients(q, h, scalar_bubble.I, [2.0], [0.1, 0.05, 0.025],
                       green=green)
    with pytest.raises(ConfigurationError):
        d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m, [0.1, 0.05],
                       green=green)
    with pytest.raises(ConfigurationError):
        # largest tau reaches past the cell inradius
        d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m,
                       [0.6, 0.3, 0.15], green=green)


def test_d_strict_rejects_degenerate_tau_ladder(green, scalar_bubble):
    # nearly equal taus cannot separate the basis functions; the fit is
    # unstable and the spread diagnostic must catch it
    h = HField.constant(1)
    q = [[0.5, 0.5]]
    taus = [0.30, 0.29, 0.28, 0.27]
    with pytest.raises(ConvergenceError):
        d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m, taus,
                       green=green, strict=True)
    D, traces = d_coefficients(q, h, scalar_bubble.I, scalar_bubble.m, taus,
                               green=green, strict=False)
    assert traces[0].spread > 1e-3


##########################################################################
# regimes, scales, predictions
##########################################################################

@pytest.mark.parametrize("m_star,S_D,S_L,scales,want", [
    (3.0, 1.0, 0.0, None, "A"),
    (3.0, 0.0, 5.0, None, "unclassified"),
    (3.0, 1e-12, 0.0, (1.0, 1.0), "unclassified"),
    (4.0, 2.0, 3.0, None, "B"),
    (4.0, 5.0, 0.0, (5.0, 1.0), "C"),
    (4.0, 1e-12, 1e-12, (1.0, 1.0), "unclassified"),
    (4.0 - 5e-13, 0.0, 1.0, None, "B"),
    (4.5, 1.0, 1.0, None, "unclassified"),
    (2.0, 1.0, 1.0, None, "degenerate"),
    (1.5, 1.0, 1.0, None, "degenerate"),
])
def test_classify_regime_table(m_star, S_D, S_L, scales, want):
    if scales is None:
        assert classify_regime(m_star, S_D, S_L) == want
    else:
        assert classify_regime(m_star, S_D, S_L, *scales) == want


def test_epsilon_ratios_consistent():
    ms = np.array([3.0, 6.0])
    c = 0.4
    H = np.array([[1.0, 1.0 + (3.0 - 2.0) * c],
                  [-0.5, -0.5 + (6.0 - 2.0) * c]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        eps = epsilon_ratios(H, ms, 1e-3)
    assert eps[0] == 1e-3
    assert abs(eps[1] - 1e-3 * np.exp(c)) < 1e-18
    # single point: nothing to scale
    assert np.allclose(epsilon_ratios(H[:, :1], ms, 1e-3), [1e-3])


def test_epsilon_ratios_warns_on_mismatch():
    ms = np.array([3.0, 6.0])
    H = np.array([[1.0, 1.4], [-0.5, -0.5 + 4.0 * 0.4 + 0.1]])
    with pytest.warns(UserWarning):
        epsilon_ratios(H, ms, 1e-3)


def test_lambda_prediction_equal_masses():
    pts = [[0.2, 0.2], [0.7, 0.6]]
    H = np.array([[0.0, 0.3], [0.0, 0.3]])
    D = np.array([[2.0, -1.0], [0.5, 3.0]])
    L = np.zeros((2, 2))
    rep = manual_report(pts, (3.0, 3.0), H, D, L)
    assert rep.regime == "A"
    eps = np.array([1e-2, 5e-3, 2.5e-3])
    sharp = lambda_prediction(rep, eps, form="sharp")
    expansion = lambda_prediction(rep, eps, form="expansion")
    assert np.max(np.abs(sharp - expansion)) < 1e-12 * np.max(np.abs(sharp))
    # pure monomial rate: each halving divides by 2^(m* - 2)
    assert abs(sharp[0] / sharp[1] - 2.0) < 1e-12
    wts = np.exp(H - H[:, :1])
    want = (2.0 - 3.0) / 2.0 * np.sum(D * wts) * eps ** 1.0
    assert np.allclose(sharp, want, rtol=1e-14)


def test_lambda_prediction_mixed_masses():
    pts = [[0.2, 0.2], [0.7, 0.6]]
    c = 0.2
    H = np.array([[0.0, 1.0 * c], [0.0, 4.0 * c]])
    D = np.array([[2.0, -1.0], [0.5, 3.0]])
    L = np.zeros((2, 2))
    rep = manual_report(pts, (3.0, 6.0), H, D, L)
    eps = 1e-3
    sharp = lambda_prediction(rep, eps, form="sharp")
    expansion = lambda_prediction(rep, eps, form="expansion")
    wts = np.exp(H - H[:, :1])
    tail = (2.0 - 6.0) / 2.0 * np.sum(D[1] * wts[1]) * eps ** 4.0
    assert abs(sharp - (2.0 - 3.0) / 2.0 * np.sum(D[0] * wts[0]) * eps) < \
        1e-14 * abs(sharp)
    assert abs(expansion - sharp - tail) < 1e-14 * abs(expansion)


def test_lambda_prediction_log_and_quadratic_regimes():
    pts = [[0.2, 0.2], [0.7, 0.6]]
    H = np.zeros((2, 2))
    L = np.array([[1.0, 2.0], [3.0, 4.0]])
    rep = manual_report(pts, (4.0, 4.0), H, np.zeros((2, 2)), L)
    assert rep.regime == "B"
    eps = np.array([1e-2, 1e-3])
    out = lambda_prediction(rep, eps)
    assert np.allclose(out, -10.0 * eps**2 * np.log(1.0 / eps), rtol=1e-14)

    D = np.array([[1.0, -0.5], [2.0, -2.0]])
    rep = manual_report(pts, (4.0, 4.0), H, D, np.zeros((2, 2)))
    assert rep.regime == "C"
    out = lambda_prediction(rep, 1e-2)
    assert abs(out - (-0.5 * 1e-4)) < 1e-18
    # regime override reuses the same report data
    out = lambda_prediction(rep, 1e-2, regime="C")
    assert abs(out - (-0.5 * 1e-4)) < 1e-18


def test_lambda_prediction_refuses_without_hypotheses():
    pts = [[0.2, 0.2]]
    rep = manual_report(pts, (4.5,), np.zeros((1, 1)), np.ones((1, 1)),
                        np.ones((1, 1)))
    assert rep.regime == "unclassified"
    with pytest.raises(ConfigurationError):
        lambda_prediction(rep, 1e-3)


##########################################################################
# end-to-end reports
##########################################################################

def test_build_report_scalar_is_log_driven(green, scalar_bubble):
    rep = build_report([[0.5, 0.5]], HField.constant(1), scalar_bubble,
                       green=green)
    assert rep.regime == "B"
    assert abs(rep.m_star - 4.0) < 1e-9
    assert abs(rep.S_L - 8.0 * np.pi) < 1e-9
    assert rep.H.shape == (1, 1) and rep.D.shape == (1, 1)
    assert np.allclose(rep.taus, [0.2, 0.1, 0.05])
    assert rep.weights[0, 0] == 1.0


def test_build_report_unbalanced_is_power_driven(green, bubble_36, generic_h):
    rep = build_report([[0.3, 0.7]], generic_h, bubble_36, green=green)
    assert abs(rep.m_star - 3.0) < 1e-9
    assert rep.regime == "A"
    assert abs(rep.S_D) > 1e-8 * rep.scale_D
    lam = lambda_prediction(rep, np.array([1e-3, 5e-4]))
    assert abs(lam[0] / lam[1] - 2.0 ** (rep.m_star - 2.0)) < 1e-12


def test_build_report_relabel_invariance(green, bubble_44):
    h = HField.constant(2)
    pts = np.array([[0.1, 0.2], [0.6, 0.45]])
    rep = build_report(pts, h, bubble_44, green=green, quad=(192, 48, 24))
    rep2 = build_report(np.roll(pts, 1, axis=0), h, bubble_44, green=green,
                        quad=(192, 48, 24))
    assert rep2.regime == rep.regime
    assert np.max(np.abs(rep2.D[:, ::-1] - rep.D)) < 1e-9 * np.max(np.abs(rep.D))
    # the weighted sums pick up the common factor from the new basepoint
    shift = np.exp(rep.H[0, 0] - rep.H[0, 1])
    assert abs(rep2.S_D - rep.S_D * shift) < 1e-9 * abs(rep.S_D) * shift
