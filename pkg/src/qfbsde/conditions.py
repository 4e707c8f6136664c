"""Structural-condition checks: positive spanning, sampled inequalities, l/q/s split.

Sampling can falsify an inequality but never prove it; every report says
which of the two outcomes it observed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm, qmc

from .model import CoefficientSet, StructuralDecl, frobenius, sigma_inverse

__all__ = [
    "SpanningCertificate",
    "ConditionReport",
    "SamplePlan",
    "positive_spanning",
    "probe_directions",
    "directional_oracle",
    "check_structural",
    "condition_slack",
    "bf_decompose",
]

SPAN_RESIDUAL_TOL = 1e-10
SPAN_POSITIVITY = 1e-8


@dataclass(frozen=True)
class SpanningCertificate:
    spans: bool
    rank: int
    positive_combination: tuple[float, ...] | None
    margin: float
    separating_direction: tuple[float, ...] | None = None

    def as_dict(self) -> dict:
        return {
            "spans": self.spans,
            "rank": self.rank,
            "positive_combination": list(self.positive_combination) if self.positive_combination else None,
            "margin": self.margin,
            "separating_direction": list(self.separating_direction) if self.separating_direction else None,
        }


def probe_directions(n: int, count: int = 10_000, seed: int = 0) -> np.ndarray:
    """Quasi-uniform unit directions in R^n (scrambled Halton through the normal quantile)."""
    if n == 1:
        return np.array([[-1.0], [1.0]])
    pts = qmc.Halton(d=n, scramble=True, seed=seed).random(count)
    pts = np.clip(pts, 1e-12, 1 - 1e-12)
    w = norm.ppf(pts)
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def directional_oracle(vectors, count: int = 10_000, seed: int = 0) -> bool:
    """Brute force: every probe direction w has some a_m with a_m . w > 0."""
    a = np.asarray(vectors, dtype=float)
    w = probe_directions(a.shape[1], count, seed)
    return bool(np.all(np.max(w @ a.T, axis=1) > 0.0))


def positive_spanning(vectors: Sequence[Sequence[float]], probes: int = 10_000) -> SpanningCertificate:
    """Decide whether ``vectors`` positively span R^n and store a certificate.

    Rank comes from column-pivoted QR.  Strict positivity of a null
    combination is decided by the LP ``max s  s.t.  A lam = 0, sum lam = 1,
    lam_m >= s``.
    """
    a = np.asarray(vectors, dtype=float)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("need a nonempty list of equal-length vectors")
    if not np.all(np.isfinite(a)):
        raise ValueError("vectors must be finite")
    M, n = a.shape
    A = a.T  # n x M

    _, r, _ = linalg.qr(A, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))

    lam = None
    s_opt = -np.inf
    if rank == n:
        # variables: lam_1..lam_M, s ; minimise -s
        c = np.zeros(M + 1)
        c[-1] = -1.0
        A_eq = np.zeros((n + 1, M + 1))
        A_eq[:n, :M] = A
        A_eq[n, :M] = 1.0
        b_eq = np.zeros(n + 1)
        b_eq[n] = 1.0
        A_ub = np.hstack([-np.eye(M), np.ones((M, 1))])
        b_ub = np.zeros(M)
        bounds = [(0, None)] * M + [(None, 1.0)]
        res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if res.status == 0:
            s_opt = float(res.x[-1])
            lam = np.maximum(res.x[:M], 0.0)

    spans = False
    if lam is not None and s_opt > 0:
        resid = np.linalg.norm(A @ lam)
        spans = bool(resid <= SPAN_RESIDUAL_TOL * lam.sum() and lam.min() >= SPAN_POSITIVITY * lam.max())

    # directional summary; for non-spanning sets add a separating direction
    w = probe_directions(n, probes)
    margin = float(np.min(np.max(w @ A, axis=1)))
    sep = None
    if not spans:
        sep = _separating_direction(A)
        if sep is not None:
            margin = min(margin, float(np.max(sep @ A)))
    return SpanningCertificate(
        spans=spans,
        rank=rank,
        positive_combination=tuple(float(v) for v in lam) if spans else None,
        margin=margin,
        separating_direction=tuple(float(v) for v in sep) if sep is not None else None,
    )


def _separating_direction(A: np.ndarray) -> np.ndarray | None:
    """Unit w minimising max_m a_m . w over the cube (then normalised)."""
    n, M = A.shape
    # variables w (n), t ; min t s.t. A^T w <= t, -1 <= w <= 1
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A.T, -np.ones((M, 1))])
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(M), bounds=[(-1, 1)] * n + [(None, None)], method="highs")
    if res.status != 0:
        return None
    w = res.x[:n]
    nw = np.linalg.norm(w)
    if nw < 1e-12:
        # rank-deficient case: any null direction of A^T separates weakly
        _, _, vt = np.linalg.svd(A.T)
        w = vt[-1]
        nw = np.linalg.norm(w)
        if np.max(np.abs(A.T @ w)) > 1e-9 * max(1.0, np.abs(A).max()):
            return None
    return w / nw


# ---------------------------------------------------------------------------
# sampled inequality checks


@dataclass(frozen=True)
class SamplePlan:
    t_range: tuple[float, float]
    x_box: tuple[tuple[float, float], ...]
    y_box: tuple[tuple[float, float], ...]
    z_range: tuple[float, float] = (-10.0, 10.0)
    points_per_axis: int = 5
    stress_count: int = 64
    stress_radii: tuple[float, ...] = (10.0, 100.0, 1000.0)
    max_grid_points: int = 100_000
    seed: int = 0
    extra_z: tuple = ()

    @classmethod
    def default(cls, coeffs: CoefficientSet, x_box=None, y_box=None, **kw) -> "SamplePlan":
        return cls(
            t_range=(0.0, coeffs.T),
            x_box=tuple(x_box or [(-1.0, 1.0)] * coeffs.d),
            y_box=tuple(y_box or [(-1.0, 1.0)] * coeffs.n),
            **kw,
        )


@dataclass
class Samples:
    t: np.ndarray  # (N,)
    x: np.ndarray  # (N, d)
    y: np.ndarray  # (N, n)
    z: np.ndarray  # (N, n, d)


def draw_samples(plan: SamplePlan, n: int, d: int) -> Samples:
    lows = [plan.t_range[0]] + [lo for lo, _ in plan.x_box] + [lo for lo, _ in plan.y_box] + [plan.z_range[0]] * (n * d)
    highs = [plan.t_range[1]] + [hi for _, hi in plan.x_box] + [hi for _, hi in plan.y_box] + [plan.z_range[1]] * (n * d)
    lows = np.asarray(lows, float)
    highs = np.asarray(highs, float)
    dim = lows.size
    k = plan.points_per_axis
    if k**dim <= plan.max_grid_points:
        axes = [np.linspace(lo, hi, k) for lo, hi in zip(lows, highs)]
        pts = np.array(list(itertools.product(*axes)), dtype=float)
    else:
        # tensor grid too large: Halton fill plus all box corners when affordable
        u = qmc.Halton(d=dim, scramble=False).random(plan.max_grid_points + 1)[1:]
        pts = lows + u * (highs - lows)
        if 2**dim <= plan.max_grid_points:
            corners = np.array(list(itertools.product(*zip(lows, highs))), dtype=float)
            pts = np.vstack([corners, pts])

    rng = np.random.default_rng(plan.seed)
    m = plan.stress_count
    if m:
        base = lows + rng.random((m, dim)) * (highs - lows)
        rays = rng.standard_normal((m, n * d))
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        radii = np.array([plan.stress_radii[i % len(plan.stress_radii)] for i in range(m)])
        base[:, 1 + d + n :] = rays * radii[:, None]
        pts = np.vstack([pts, base])
        # signed coordinate rays of z at every stress radius, from the box centre
        axis = np.concatenate([np.eye(n * d), -np.eye(n * d)])
        for r in plan.stress_radii:
            extra = np.tile((lows + highs) / 2.0, (axis.shape[0], 1))
            extra[:, 1 + d + n :] = r * axis
            pts = np.vstack([pts, extra])
    for zx in plan.extra_z:
        zx = np.asarray(zx, float).reshape(-1, n * d)
        extra = np.tile((lows + highs) / 2.0, (zx.shape[0], 1))
        extra[:, 1 + d + n :] = zx
        pts = np.vstack([pts, extra])
    return Samples(
        t=pts[:, 0].copy(),
        x=pts[:, 1 : 1 + d].copy(),
        y=pts[:, 1 + d : 1 + d + n].copy(),
        z=pts[:, 1 + d + n :].reshape(-1, n, d).copy(),
    )


@dataclass
class ConditionReport:
    condition: str  # H0 | HAB | HQ | HBF
    sample_count: int
    worst_violation: float
    witness: dict
    fitted_constant: float
    status: str = field(init=False)
    note: str = "sampling can falsify a condition but cannot prove it"

    def __post_init__(self):
        self.status = "falsified" if self.worst_violation > 0 else "consistent on samples"

    def as_dict(self) -> dict:
        return {
            "condition": self.condition,
            "sample_count": self.sample_count,
            "worst_violation": self.worst_violation,
            "witness": self.witness,
            "fitted_constant": self.fitted_constant,
            "status": self.status,
            "note": self.note,
        }


def _eval_by_time(fn, t: np.ndarray, *arrays):
    """Evaluate a batched coefficient callable, grouping samples by their t."""
    out = None
    for tv in np.unique(t):
        idx = np.nonzero(t == tv)[0]
        val = fn(float(tv), *(a[idx] for a in arrays))
        if out is None:
            out = np.empty((t.size,) + val.shape[1:])
        out[idx] = val
    return out


def condition_slack(cond: str, coeffs: CoefficientSet, decl: StructuralDecl, s: Samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (slack, ratio) for one condition; slack <= 0 means satisfied.

    ``ratio`` is the per-sample constant the inequality needs; its max is the
    fitted constant.
    """
    z = s.z
    zn = frobenius(z)
    if cond == "H0":
        b = _eval_by_time(coeffs.eval_b, s.t, s.x, s.y, s.z)
        sig = _eval_by_time(coeffs.eval_sigma, s.t, s.x)
        sv = np.linalg.svd(sig, compute_uv=False)
        smax2 = sv[:, 0] ** 2
        smin2 = sv[:, -1] ** 2
        bn = np.linalg.norm(b, axis=1)
        C0 = decl.C0
        slack = np.maximum.reduce([bn - C0 * (1 + zn), 1.0 / C0 - smin2, smax2 - C0])
        ratio = np.maximum.reduce([bn / (1 + zn), smax2, 1.0 / smin2])
        return slack, ratio
    f = _eval_by_time(coeffs.eval_f, s.t, s.x, s.y, s.z)
    if cond == "HAB":
        a = decl.vectors
        af = f @ a.T  # (N, M)
        az = np.einsum("mi,kid->kmd", a, z)
        q = 0.5 * np.sum(az**2, axis=2)
        need = af - q
        return np.max(need - decl.rho, axis=1), np.max(need, axis=1)
    if cond == "HQ":
        fa = np.abs(f)
        return np.max(fa - decl.CQ * (1 + zn**2)[:, None], axis=1), np.max(fa, axis=1) / (1 + zn**2)
    if cond == "HBF":
        rows = np.linalg.norm(z, axis=2)  # |z^i|
        lower = np.cumsum(rows**2, axis=1) - rows**2  # sum_{j<i} |z^j|^2
        denom = 1 + rows * zn[:, None] + lower + np.asarray(decl.kappa(zn))[:, None]
        fa = np.abs(f)
        return np.max(fa - decl.CQ * denom, axis=1), np.max(fa / denom, axis=1)
    raise ValueError(f"unknown condition {cond!r}")


def _witness(s: Samples, i: int) -> dict:
    return {"t": float(s.t[i]), "x": s.x[i].tolist(), "y": s.y[i].tolist(), "z": s.z[i].tolist()}


def _worst_index(slack: np.ndarray, s: Samples) -> int:
    # largest slack; ties broken by lexicographic order of the sample point
    cand = np.nonzero(slack == np.max(slack))[0]
    if cand.size == 1:
        return int(cand[0])
    keys = np.column_stack([s.t[cand], s.x[cand], s.y[cand], s.z[cand].reshape(cand.size, -1)])
    order = np.lexsort(keys.T[::-1])
    return int(cand[order[0]])


def check_structural(
    coeffs: CoefficientSet,
    decl: StructuralDecl,
    plan: SamplePlan,
    conditions: Sequence[str] = ("H0", "HAB", "HQ", "HBF"),
) -> list[ConditionReport]:
    """Sampled slack of each structural inequality, one report per condition."""
    s = draw_samples(plan, coeffs.n, coeffs.d)
    reports = []
    for cond in conditions:
        if cond == "HAB" and not decl.spanning_vectors:
            continue
        slack, ratio = condition_slack(cond, coeffs, decl, s)
        i = _worst_index(slack, s)
        reports.append(
            ConditionReport(
                condition=cond,
                sample_count=int(slack.size),
                worst_violation=float(slack[i]),
                witness=_witness(s, i),
                fitted_constant=float(np.max(ratio)),
            )
        )
    return reports


def reevaluate(report: ConditionReport, coeffs: CoefficientSet, decl: StructuralDecl) -> float:
    """Slack of ``report.condition`` at its stored witness."""
    w = report.witness
    s = Samples(
        t=np.array([w["t"]]),
        x=np.array([w["x"]], dtype=float),
        y=np.array([w["y"]], dtype=float),
        z=np.array([w["z"]], dtype=float),
    )
    return float(condition_slack(report.condition, coeffs, decl, s)[0][0])


# ---------------------------------------------------------------------------
# l / q / s decomposition


@dataclass(frozen=True)
class Decomposition:
    l: np.ndarray  # (n, d)
    q: np.ndarray  # (n,)
    s: np.ndarray  # (n,)
    identity_residual: float


def bf_decompose(coeffs: CoefficientSet, decl: StructuralDecl, t: float, x, y, z) -> Decomposition:
    """Split F^i into z^i . l^i + q^i + s^i and report the identity residual."""
    n, d = coeffs.n, coeffs.d
    x = np.asarray(x, float).reshape(1, d)
    y = np.asarray(y, float).reshape(1, n)
    z = np.asarray(z, float).reshape(1, n, d)
    sig = coeffs.eval_sigma(t, x)
    theta = (sigma_inverse(sig, t, x)[0] @ coeffs.eval_b(t, x, y, z)[0])
    f = coeffs.eval_f(t, x, y, z)[0]
    zz = z[0]
    zn = float(np.sqrt(np.sum(zz**2)))
    rows = np.linalg.norm(zz, axis=1)
    lower = np.cumsum(rows**2) - rows**2
    kap = float(np.asarray(decl.kappa(np.array([zn])))[0])
    D = 1.0 + rows * zn + lower + kap
    ratio = f / D
    l = np.tile(theta, (n, 1))
    nz = rows != 0
    l[nz] += (ratio[nz] * zn / rows[nz])[:, None] * zz[nz]
    q = ratio * (1.0 + lower)
    s = ratio * kap
    F = f + zz @ theta
    resid = float(np.max(np.abs(F - np.sum(zz * l, axis=1) - q - s)))
    return Decomposition(l=l, q=q, s=s, identity_residual=resid)
