"""Acceptance criteria, one test each, run at their stated tolerances.

Every test records a PASS/FAIL line; the lines are echoed in the pytest
terminal summary under "acceptance criteria".
"""

from __future__ import annotations

import json
import math
import random
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from oracles import cole_hopf_tanh, directional_spans, heat_tanh, lq_symmetric_closed_form, random_source, reference_eval
from qfbsde.cli import bundled_configs, main
from qfbsde.conditions import SamplePlan, check_structural, positive_spanning
from qfbsde.exprlang import DomainError, eval_expr, free_vars, parse_expr, to_source
from qfbsde.games import best_response_gap, default_battery, deviation_payoff_mc
from qfbsde.model import StructuralDecl, from_expressions
from qfbsde.pde import GridSpec, blowup_fit, sample_field, solve_backward
from qfbsde.simulate import bsde_residual, girsanov_check, simulate_paths, submartingale_check

# seeds fixed before any acceptance run
MC_SEED = 20240611
SPAN_SEED = 20240612


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _richardson_order(fine_mid_coarse: list[np.ndarray], ratio: float = 2.0) -> float:
    a, b, c = fine_mid_coarse
    return math.log(np.max(np.abs(c - b)) / np.max(np.abs(b - a))) / math.log(ratio)


# ---------------------------------------------------------------------------


def test_01_cole_hopf_benchmark(cole_hopf_model):
    oracle = cole_hopf_tanh([0.0], nodes=128)[0]
    self_gap = abs(oracle - cole_hopf_tanh([0.0], nodes=64)[0])
    start = time.perf_counter()
    fld = solve_backward(cole_hopf_model, GridSpec(((-8.0, 8.0),), 801), schedule=(2, 4, 8, 16, 32))
    elapsed = time.perf_counter() - start
    u0 = sample_field(fld, 0.0, [0.0])[0][0]
    err = abs(u0 - oracle)
    ok = err <= 1e-3 and self_gap <= 1e-10 and elapsed <= 30
    record(1, "Cole-Hopf value at (0,0)", ok, f"|u-oracle|={err:.2e} (<=1e-3), quadrature 64 vs 128 gap={self_gap:.1e} (<=1e-10), solve {elapsed:.1f}s (<=30s)")


def test_02_heat_sanity(heat_field, heat_model):
    mask = heat_field.grid.reporting_mask()
    x = heat_field.grid.nodes()[mask, 0]
    sup = float(np.max(np.abs(heat_field.u_values[0][mask, 0] - heat_tanh(x))))

    pts = np.arange(-6.0, 7.0)[:, None]
    by_dx = []
    for N in (321, 161, 81):
        f = solve_backward(heat_model, GridSpec(((-8.0, 8.0),), N))
        by_dx.append(np.array([sample_field(f, 0.0, p)[0][0] for p in pts]))
    order_dx = _richardson_order(by_dx)

    base = GridSpec(((-8.0, 8.0),), 201)
    dtmax = base.max_stable_dt(1.0)
    by_dt = [solve_backward(heat_model, GridSpec(((-8.0, 8.0),), 201, dt=dtmax / m)).u_values[0][:, 0] for m in (4, 2, 1)]
    order_dt = _richardson_order(by_dt)

    ok = sup <= 5e-4 and 1.0 <= order_dx <= 4.0 and 0.5 <= order_dt <= 2.0
    record(2, "heat sanity", ok, f"sup error={sup:.2e} (<=5e-4), order in dx={order_dx:.2f} (2 within x2), order in dt={order_dt:.2f} (1 within x2)")


def test_03_lq_game(lq_game, lq_coeffs):
    start = time.perf_counter()
    fld = solve_backward(lq_coeffs, GridSpec(((-6.0, 6.0),), 481))
    P, S = lq_symmetric_closed_form(0.2, 1.0)
    x = fld.grid.nodes()[:, 0]
    inner = np.abs(x) <= 2
    value_err = max(float(np.max(np.abs(fld.u_values[0][inner, i] + P * x[inner] ** 2 + S))) for i in range(2))
    gap = max(best_response_gap(lq_game, fld, i)["gap"] for i in range(2))
    bat = default_battery(lq_game, fld, 0)
    zero = deviation_payoff_mc(lq_game, fld, 0, bat["zero"], 0.0, [1.0], 20_000, MC_SEED)
    eq = deviation_payoff_mc(lq_game, fld, 0, bat["equilibrium"], 0.0, [1.0], 20_000, MC_SEED)
    elapsed = time.perf_counter() - start
    ok = (
        value_err <= 1e-2
        and gap <= 1e-2
        and zero["excess"] < -3 * zero["se"]
        and abs(eq["excess"]) <= 3 * eq["se"]
        and elapsed <= 120
    )
    record(
        3,
        "LQ two-player game",
        ok,
        f"value error={value_err:.1e} (<=1e-2), best-response gap={gap:.1e} (<=1e-2), "
        f"zero deviation z={zero['excess'] / zero['se']:.1f} (<-3), equilibrium z={eq['excess'] / eq['se']:.2f} (|z|<=3), {elapsed:.0f}s (<=120s)",
    )


def test_04_bsde_identity(heat_model, heat_field, cole_hopf_model, cole_hopf_field, lq_coeffs, lq_field):
    # the left-point residual carries an O(dt) bias whose z-score grows like
    # sqrt(P dt); the mean is checked at the finer step of the pair
    dts = (0.00125, 0.000625)
    x0 = {"heat": [0.0], "cole-hopf": [0.0], "lq": [1.0]}
    cases = {"heat": (heat_model, heat_field), "cole-hopf": (cole_hopf_model, cole_hopf_field), "lq": (lq_coeffs, lq_field)}
    ok = True
    parts = []
    for name, (coeffs, fld) in cases.items():
        res = [bsde_residual(simulate_paths(coeffs, fld, 0.0, x0[name], dt, 10_000, MC_SEED), fld, coeffs) for dt in dts]
        ratio = res[0]["rms"] / res[1]["rms"]
        worst = res[1]["max_abs_z"]
        ok &= worst <= 3 and 1.15 <= ratio <= 1.8
        parts.append(f"{name}: max|z|={worst:.2f}, rms ratio={ratio:.2f}")
    record(4, "BSDE identity along paths", ok, "; ".join(parts) + " (|z|<=3, ratio in [1.15,1.8])")


def test_05_girsanov():
    mu, T, x0 = 0.5, 1.0, 0.0
    c = from_expressions(1, 1, T, [str(mu)], [["1"]], ["0"], ["x1"])
    plain = simulate_paths(c, None, 0.0, [x0], 0.01, 10_000, MC_SEED, driftless=True)
    drifted = simulate_paths(c, None, 0.0, [x0], 0.01, 10_000, MC_SEED + 1, drift=lambda t, x: np.full_like(x, mu))
    out = girsanov_check(plain, c, reference=drifted)
    rw = out["reweighted"][0]
    wz = abs(out["weight_z"])
    exact_z = abs(rw["mean"] - (x0 + mu * T)) / rw["se"]
    ok = wz <= 3 and abs(rw["z"]) <= 3 and exact_z <= 3
    record(5, "Girsanov reweighting", ok, f"weight mean={out['weight_mean']:.4f} (z={wz:.2f}), reweighted vs drifted z={rw['z']:.2f}, vs x0+muT z={exact_z:.2f} (all |z|<=3)")


def test_06_submartingale(cole_hopf_model, cole_hopf_field, wide_grid):
    decl = StructuralDecl(rho=1.0, spanning_vectors=((1.0,), (-1.0,)))
    b = simulate_paths(cole_hopf_model, cole_hopf_field, 0.0, [0.0], 0.01, 10_000, MC_SEED, driftless=True)
    good = submartingale_check(b, decl)
    # a.f = 2 z^2 exceeds rho + |a.z|^2 / 2 for a = +1, rho = 0
    bad_model = from_expressions(1, 1, 1.0, ["0"], [["1"]], ["2*z1_1^2"], ["tanh(x1)"])
    bad_field = solve_backward(bad_model, wide_grid)
    bb = simulate_paths(bad_model, bad_field, 0.0, [0.0], 0.01, 10_000, MC_SEED, driftless=True)
    bad = submartingale_check(bb, StructuralDecl(rho=0.0, spanning_vectors=((1.0,), (-1.0,))))
    bad_z = bad["vectors"][0]["z"]
    ok = not good["violated"] and bad_z < -3
    record(6, "submartingale drift check", ok, f"Cole-Hopf worst z={good['worst_z']:.2f} (>=-3), violating model z={bad_z:.1f} (<-3)")


def test_07_spanning_certification():
    rng = np.random.default_rng(SPAN_SEED)
    checked = disagree = witnessed = 0
    k = 0
    while checked < 100:
        n = 1 + k % 4
        M = int(rng.integers(1, 9))
        k += 1
        A = rng.standard_normal((M, n))
        cert = positive_spanning(A)
        if not abs(cert.margin) > 1e-6:
            continue
        checked += 1
        if cert.spans != directional_spans(A):
            disagree += 1
            # informational: is the certificate's verdict backed by an explicit separating direction?
            w = cert.separating_direction
            witnessed += w is not None and bool(np.all(A @ np.asarray(w) < 0))
    hand = [
        positive_spanning([[1, 0], [-1, 0], [0, 1], [0, -1]]),
        positive_spanning([[1, 0], [0, 1]]),
        positive_spanning([[1, 0], [0, 1], [-1, -1]]),
    ]
    hand_ok = (
        hand[0].spans
        and np.allclose(hand[0].positive_combination, 0.25)
        and not hand[1].spans
        and hand[2].spans
        and np.allclose(hand[2].positive_combination, 1 / 3)
    )
    ok = disagree == 0 and hand_ok
    record(7, "positive spanning certificate", ok, f"{disagree} disagreements with the directional oracle on {checked} sets (need 0; {witnessed} of them backed by an explicit separating direction), hand cases {'as listed' if hand_ok else 'WRONG'}")


def test_08_hbf_falsification():
    c = from_expressions(2, 1, 1.0, ["0"], [["1"]], ["z2_1^2", "0"], ["0", "0"])
    rep = {r.condition: r for r in check_structural(c, StructuralDecl(CQ=1.0), SamplePlan.default(c))}["HBF"]
    z = np.asarray(rep.witness["z"]).ravel()
    on_ray = rep.status == "falsified" and z[0] == 0 and abs(z[1]) >= 100
    growth = []
    for s in (1.0, 10.0, 100.0):
        plan = SamplePlan.default(c, points_per_axis=2, stress_count=0, extra_z=([[0.0], [s]],))
        growth.append(check_structural(c, StructuralDecl(CQ=1.0), plan, ("HBF",))[0].worst_violation)
    quadratic = all(abs(g - (s**2 - 1)) <= 1e-9 * s**2 for g, s in zip(growth, (1.0, 10.0, 100.0)))

    lin = from_expressions(2, 1, 1.0, ["0"], [["1"]], ["z1_1*(z1_1 + z2_1)", "z2_1*(z1_1 + z2_1)"], ["0", "0"])
    r2 = check_structural(lin, StructuralDecl(CQ=100.0), SamplePlan.default(lin), ("HBF",))[0]
    fitted_ok = r2.status == "consistent on samples" and 0.9 <= r2.fitted_constant <= 1.3
    ok = on_ray and quadratic and fitted_ok
    record(
        8,
        "HBF falsification",
        ok,
        f"violation witness z={z.tolist()} slack growth s^2-1 {'yes' if quadratic else 'no'}; "
        f"quadratic-linear model {r2.status}, fitted constant={r2.fitted_constant:.3f} (need [0.9,1.3])",
    )


def test_09_blowup_diagnostic(heat_model, heat_field, wide_grid):
    lip = blowup_fit(heat_field)["exponent"]
    holder_model = from_expressions(1, 1, 1.0, ["0"], [["1"]], ["0"], ["min(1, sqrt(abs(x1)))"])
    hol = blowup_fit(solve_backward(holder_model, wide_grid))["exponent"]
    ok = abs(lip) <= 0.1 and hol <= 0.65
    record(9, "gradient blow-up exponent", ok, f"Lipschitz g slope={lip:.3f} (|.|<=0.1), Holder-1/2 g slope={hol:.3f} (<=0.65)")


def test_10_determinism(tmp_path):
    mismatched = []
    for name in sorted(bundled_configs()):
        raw = json.loads(bundled_configs()[name].read_text())
        texts = []
        for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = tmp_path / name / tag
            main([raw["mode"], "--config", name, "--out", str(out), "--threads", threads])
            texts.append((out / "report.json").read_bytes())
        if len(set(texts)) != 1:
            mismatched.append(name)
    ok = not mismatched
    record(10, "deterministic reports", ok, f"{len(bundled_configs())} bundled configs x (2 runs, threads 1 and 4): " + ("byte-identical" if ok else f"differ: {mismatched}"))


def test_11_exprlang():
    rng = random.Random(20240613)
    fix_fail = eval_fail = compared = 0
    for _ in range(1000):
        tree = parse_expr(random_source(rng, 6))
        printed = to_source(tree)
        if parse_expr(printed) != tree or to_source(parse_expr(printed)) != printed:
            fix_fail += 1
        env = {v: rng.uniform(-2, 2) for v in free_vars(tree)}
        try:
            ref = reference_eval(tree, env)
        except (ArithmeticError, ValueError):
            ref = None
        try:
            got = eval_expr(tree, env)
        except DomainError:
            got = None
        if isinstance(ref, complex):
            continue
        compared += 1
        same = (ref is None and got is None) or (
            ref is not None and got is not None and (got == ref or (math.isnan(got) and math.isnan(ref)))
        )
        eval_fail += not same
    examples = [
        eval_expr(parse_expr("1+2*3"), {}) == 7,
        eval_expr(parse_expr("2^3^2"), {}) == 512,
        free_vars(parse_expr("min(x1, 0) - tanh(z1_1)")) == {"x1", "z1_1"},
        eval_expr(parse_expr("clamp(p1, -1, 1)"), {"p1": 3.0}) == 1,
        eval_expr(parse_expr("exp(0)*x1"), {"x1": 2.5}) == 2.5,
    ]
    try:
        eval_expr(parse_expr("1/x1"), {"x1": 0.0})
        examples.append(False)
    except DomainError:
        examples.append(True)
    ok = fix_fail == 0 and eval_fail == 0 and all(examples)
    record(11, "expression language", ok, f"fixpoint failures {fix_fail}/1000, evaluator disagreements {eval_fail}/{compared}, grammar examples {sum(examples)}/{len(examples)}")
