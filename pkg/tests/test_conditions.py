from __future__ import annotations

import numpy as np
import pytest

from oracles import directional_spans
from qfbsde.conditions import (
    SamplePlan,
    bf_decompose,
    check_structural,
    draw_samples,
    positive_spanning,
    reevaluate,
)
from qfbsde.model import StructuralDecl, assemble_F, from_expressions, power_kappa


def test_symmetric_basis_spans_with_equal_weights():
    cert = positive_spanning([[1, 0], [-1, 0], [0, 1], [0, -1]])
    assert cert.spans and cert.rank == 2
    np.testing.assert_allclose(cert.positive_combination, [0.25] * 4, atol=1e-12)


def test_orthant_does_not_span():
    cert = positive_spanning([[1, 0], [0, 1]])
    assert not cert.spans
    assert cert.positive_combination is None
    w = np.asarray(cert.separating_direction)
    assert np.all(np.array([[1, 0], [0, 1]]) @ w < 0)


def test_simplex_spans_with_uniform_weights():
    cert = positive_spanning([[1, 0], [0, 1], [-1, -1]])
    assert cert.spans
    np.testing.assert_allclose(cert.positive_combination, [1 / 3] * 3, atol=1e-12)


def test_certificate_invariants():
    rng = np.random.default_rng(5)
    for _ in range(20):
        A = rng.standard_normal((6, 3))
        cert = positive_spanning(A)
        if cert.spans:
            lam = np.asarray(cert.positive_combination)
            assert np.linalg.norm(lam @ A) <= 1e-10 * lam.sum()
            assert lam.min() >= 1e-8 * lam.max()
            assert cert.rank == 3


def test_rank_deficient_set_does_not_span():
    cert = positive_spanning([[1, 1], [-1, -1], [2, 2]])
    assert not cert.spans and cert.rank == 1


def test_scaling_invariance():
    rng = np.random.default_rng(9)
    for _ in range(10):
        A = rng.standard_normal((5, 3))
        assert positive_spanning(A).spans == positive_spanning(7.5 * A).spans


def test_sound_against_brute_force_on_random_sets():
    # probing can only refute spanning, so check both directions of soundness
    rng = np.random.default_rng(2)
    for _ in range(60):
        n = int(rng.integers(1, 5))
        M = int(rng.integers(1, 9))
        A = rng.standard_normal((M, n))
        cert = positive_spanning(A)
        if cert.spans:
            assert directional_spans(A)
        elif cert.rank == n:
            w = np.asarray(cert.separating_direction)
            assert np.all(A @ w <= 0)
        if not directional_spans(A):
            assert not cert.spans


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        positive_spanning([[1, 0], [1]])


# ---------------------------------------------------------------------------


def _two_player(f1, f2):
    return from_expressions(2, 1, 1.0, ["0"], [["1"]], [f1, f2], ["0", "0"])


def test_hbf_violation_witness_on_second_ray():
    c = _two_player("z2_1^2", "0")
    reports = {r.condition: r for r in check_structural(c, StructuralDecl(CQ=1.0), SamplePlan.default(c))}
    hbf = reports["HBF"]
    assert hbf.status == "falsified"
    z = np.asarray(hbf.witness["z"]).ravel()
    assert z[0] == 0 and abs(z[1]) >= 100
    # slack grows quadratically along the ray
    for s in (1.0, 10.0, 100.0):
        plan = SamplePlan.default(c, points_per_axis=2, stress_count=0, extra_z=([[0.0], [s]],))
        r = check_structural(c, StructuralDecl(CQ=1.0), plan, ("HBF",))[0]
        assert r.worst_violation == pytest.approx(s**2 - 1.0, rel=1e-12)


def test_zero_driver_satisfies_hab():
    c = _two_player("0", "0")
    decl = StructuralDecl(rho=0.0, spanning_vectors=((1, 0), (0, 1), (-1, -1)))
    r = check_structural(c, decl, SamplePlan.default(c), ("HAB",))[0]
    assert r.worst_violation <= 0


def test_cole_hopf_quadratic_constant(cole_hopf_model):
    r = check_structural(cole_hopf_model, StructuralDecl(CQ=1.0), SamplePlan.default(cole_hopf_model), ("HQ",))[0]
    assert r.status == "consistent on samples"
    assert r.fitted_constant == pytest.approx(0.5, rel=1e-3)


def test_witness_reproduces_slack():
    c = from_expressions(2, 2, 1.0, ["x1 + z1_2", "tanh(y2)"], [["1", "0.1"], ["0", "2"]], ["sin(z1_1)*z2_2 + y1", "z1_2^2"], ["0", "0"])
    decl = StructuralDecl(C0=1.5, CQ=0.5, rho=0.1, spanning_vectors=((1, 0), (0, 1), (-1, -1)), kappa=power_kappa(0.5, 1.0))
    plan = SamplePlan.default(c, points_per_axis=3)
    for r in check_structural(c, decl, plan):
        assert abs(reevaluate(r, c, decl) - r.worst_violation) <= 1e-12


def test_samples_cover_box_corners_and_stress_rays():
    c = _two_player("0", "0")
    s = draw_samples(SamplePlan.default(c), 2, 1)
    assert s.z.min() == -1000 and s.z.max() == 1000
    assert np.any(np.all(s.x == -1.0, axis=1))


def test_large_sample_space_uses_quasi_random_fill():
    c = from_expressions(2, 2, 1.0, ["0", "0"], [["1", "0"], ["0", "1"]], ["0", "0"], ["0", "0"])
    plan = SamplePlan.default(c, max_grid_points=2000)
    s = draw_samples(plan, 2, 2)
    assert 2000 <= s.t.size <= 2000 + 2**9 + plan.stress_count + 6 * 8


# ---------------------------------------------------------------------------


def test_decomposition_identity_random_points():
    c = from_expressions(
        2, 2, 1.0,
        ["sin(x1) + z1_1", "y2 - z2_2"],
        [["1", "0.3"], ["0.2", "1.5"]],
        ["z1_1*z2_2 + cos(y1)", "z1_2^2 - x2"],
        ["0", "0"],
    )
    decl = StructuralDecl(kappa=power_kappa(0.7, 1.2), kappa_exponent=1.2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(size=(2, 2)) * 3
        dec = bf_decompose(c, decl, 0.4, rng.normal(size=2), rng.normal(size=2), z)
        assert dec.identity_residual <= 1e-12 * max(1.0, np.abs(assemble_F(c, 0.4, np.zeros(2), np.zeros(2), z)).max())


def test_decomposition_at_zero_gradient():
    c = from_expressions(1, 1, 1.0, ["x1"], [["1"]], ["y1 + 2"], ["0"])
    dec = bf_decompose(c, StructuralDecl(), 0.0, [0.5], [1.0], [[0.0]])
    assert dec.q[0] == pytest.approx(3.0)
    assert dec.s[0] == 0.0
    np.testing.assert_allclose(dec.l[0], [0.5])
    assert dec.identity_residual == 0.0


def test_decomposition_zero_driver():
    c = from_expressions(1, 1, 1.0, ["2"], [["4"]], ["0"], ["0"])
    dec = bf_decompose(c, StructuralDecl(), 0.0, [0.0], [0.0], [[3.0]])
    assert dec.q[0] == 0 and dec.s[0] == 0
    np.testing.assert_allclose(dec.l[0], [0.5])
    assert dec.identity_residual == 0.0
