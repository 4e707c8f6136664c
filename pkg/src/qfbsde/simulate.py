"""Forward Euler-Maruyama paths under a decoupling field, and the checks run on them.

Gaussian increments come from a counter-based stream: the value for
(seed, step, path, axis) is a fixed function of those four integers, so a
bundle is bit-identical however the paths are split across workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .model import CoefficientSet, StructuralDecl, frobenius, sigma_inverse
from .pde import DecouplingField

__all__ = [
    "PathBundle",
    "gaussian_increments",
    "simulate_paths",
    "bsde_residual",
    "bmo_estimate",
    "girsanov_check",
    "submartingale_check",
    "payoff_mc",
    "equal_count_bins",
    "write_paths_csv",
]

Drift = Callable[[float, np.ndarray], np.ndarray]


def gaussian_increments(seed: int, step: int, first_path: int, count: int, d: int) -> np.ndarray:
    """Standard normals for paths [first_path, first_path + count), shape (count, d).

    Philox keyed by (seed, step); entry (p, j) uses raw draws 2(pd+j) and
    2(pd+j)+1 through Box-Muller.
    """
    start = 2 * first_path * d
    total = 2 * count * d
    bg = np.random.Philox(key=(int(seed) << 64) | int(step))
    bg.advance(start // 4)
    raw = bg.random_raw(total + start % 4)[start % 4 :]
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return z.reshape(count, d)


@dataclass
class PathBundle:
    t0: float
    x0: np.ndarray
    dt: float
    times: np.ndarray  # (L+1,)
    X: np.ndarray  # (P, L+1, d)
    dW: np.ndarray  # (P, L, d)
    Y: np.ndarray | None  # (P, L+1, n)
    Z: np.ndarray | None  # (P, L+1, n, d)
    exited: np.ndarray  # (P,) bool
    exit_step: np.ndarray  # (P,) first step index outside the box, L+1 if never
    seed: int
    driftless: bool
    exit_threshold: float = 0.05

    @property
    def P(self) -> int:
        return self.X.shape[0]

    @property
    def L(self) -> int:
        return self.dW.shape[1]

    @property
    def exit_fraction(self) -> float:
        return float(np.mean(self.exited))

    @property
    def exit_warning(self) -> bool:
        return self.exit_fraction > self.exit_threshold

    def active_through(self, step: int) -> np.ndarray:
        """Paths still inside the box at ``step``."""
        return self.exit_step > step


def _check_dims(coeffs: CoefficientSet, fld: DecouplingField | None, x0: np.ndarray) -> None:
    if x0.shape != (coeffs.d,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({coeffs.d},)")
    if fld is not None and (fld.d != coeffs.d or fld.n != coeffs.n):
        raise ValueError("field and coefficient dimensions differ")


def _simulate_chunk(coeffs, fld, t0, x0, dt, L, first, count, seed, drift, driftless, box):
    d = coeffs.d
    X = np.empty((count, L + 1, d))
    dW = np.empty((count, L, d))
    record = fld is not None
    if record:
        Y = np.empty((count, L + 1, coeffs.n))
        Z = np.empty((count, L + 1, coeffs.n, d))
    else:
        Y = Z = None
    x = np.tile(x0, (count, 1))
    alive = np.ones(count, dtype=bool)
    exit_step = np.full(count, L + 1, dtype=np.int64)
    sqdt = math.sqrt(dt)
    for step in range(L + 1):
        t = t0 + step * dt
        X[:, step] = x
        if record:
            y, z = fld.interpolate(min(t, fld.T), x, check=False)
            Y[:, step] = y
            Z[:, step] = z
        if step == L:
            break
        inc = sqdt * gaussian_increments(seed, step, first, count, d)
        dW[:, step] = inc
        if driftless:
            bvec = 0.0
        elif drift is not None:
            bvec = drift(t, x)
        else:
            bvec = coeffs.eval_b(t, x, y, z)
        sig = coeffs.eval_sigma(t, x)
        x_new = x + bvec * dt + np.einsum("kab,kb->ka", sig, inc)
        if box is not None:
            out = np.zeros(count, dtype=bool)
            for j, (lo, hi) in enumerate(box):
                out |= (x_new[:, j] < lo) | (x_new[:, j] > hi)
            newly = out & alive
            exit_step[newly] = step + 1
            alive &= ~out
            # exited paths stay frozen at their exit state
            x = np.where((alive | newly)[:, None], x_new, x)
        else:
            x = x_new
    return X, dW, Y, Z, exit_step


def simulate_paths(
    coeffs: CoefficientSet,
    fld: DecouplingField | None,
    t0: float,
    x0,
    dt_sim: float,
    P: int,
    seed: int,
    drift: Drift | None = None,
    driftless: bool = False,
    box=None,
    threads: int = 1,
    exit_threshold: float = 0.05,
) -> PathBundle:
    """Euler-Maruyama paths of dX = b(s, X, u, v) ds + sigma dB from (t0, x0).

    ``drift`` overrides the coefficient drift (used for feedback policies);
    ``driftless`` simulates dX = sigma dB.  When a field is given, (Y, Z) =
    (u, v) along the paths are recorded and paths leaving the grid box are
    frozen and flagged.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    _check_dims(coeffs, fld, x0)
    horizon = coeffs.T - t0
    if horizon <= 0:
        raise ValueError("t0 must be before T")
    L = max(1, int(round(horizon / dt_sim)))
    dt = horizon / L
    if box is None and fld is not None:
        box = fld.grid.box
    if box is not None:
        for j, (lo, hi) in enumerate(box):
            if not lo <= x0[j] <= hi:
                raise ValueError("start point outside the grid box")
    if drift is None and not driftless and fld is None:
        raise ValueError("coefficient drift needs a decoupling field; pass drift= or driftless=True")

    threads = max(1, int(threads))
    size = -(-P // threads)
    size += size % 2
    chunks = [(a, min(size, P - a)) for a in range(0, P, size)]

    def run(chunk):
        first, count = chunk
        return _simulate_chunk(coeffs, fld, t0, x0, dt, L, first, count, seed, drift, driftless, box)

    if threads == 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, chunks))

    X = np.concatenate([p[0] for p in parts])
    dW = np.concatenate([p[1] for p in parts])
    Y = np.concatenate([p[2] for p in parts]) if fld is not None else None
    Z = np.concatenate([p[3] for p in parts]) if fld is not None else None
    exit_step = np.concatenate([p[4] for p in parts])
    times = t0 + dt * np.arange(L + 1)
    times[-1] = coeffs.T
    return PathBundle(
        t0=float(t0),
        x0=x0,
        dt=dt,
        times=times,
        X=X,
        dW=dW,
        Y=Y,
        Z=Z,
        exited=exit_step <= L,
        exit_step=exit_step,
        seed=int(seed),
        driftless=bool(driftless),
        exit_threshold=exit_threshold,
    )


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    v = np.ascontiguousarray(v, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return mean, se


def bsde_residual(bundle: PathBundle, fld: DecouplingField, coeffs: CoefficientSet) -> dict:
    """Per-path residual of the backward equation from t0 to T.

    residual = Y_t0 - g(X_T) - sum f dt + sum Z . dW, using the recorded
    (Y, Z) = (u, v) along each path and the increments that drove it.
    """
    if bundle.Y is None or fld.n != coeffs.n:
        raise ValueError("bundle was not simulated under this field")
    keep = ~bundle.exited
    X, Y, Z, dW = bundle.X[keep], bundle.Y[keep], bundle.Z[keep], bundle.dW[keep]
    dt = bundle.dt
    fsum = np.zeros((X.shape[0], coeffs.n))
    stoch = np.zeros((X.shape[0], coeffs.n))
    for step in range(bundle.L):
        t = float(bundle.times[step])
        fsum += coeffs.eval_f(t, X[:, step], Y[:, step], Z[:, step]) * dt
        stoch += np.einsum("kid,kd->ki", Z[:, step], dW[:, step])
    res = Y[:, 0] - coeffs.eval_g(X[:, -1]) - fsum + stoch
    comps = []
    for i in range(coeffs.n):
        m, se = _mean_se(res[:, i])
        comps.append({"mean": m, "se": se, "rms": float(np.sqrt(np.mean(res[:, i] ** 2))), "z": m / se if se > 0 else 0.0})
    return {
        "components": comps,
        "rms": float(np.sqrt(np.mean(np.sum(res**2, axis=1)))),
        "max_abs_z": float(max(abs(c["z"]) for c in comps)),
        "paths_used": int(keep.sum()),
        "dt": dt,
    }


def equal_count_bins(x: np.ndarray, per_axis: int) -> np.ndarray:
    """Recursive equal-count partition: split on axis 0, then within each part on axis 1, ...

    Ties are broken by row order, so no bin is ever empty.
    """
    n, d = x.shape
    labels = np.zeros(n, dtype=np.int64)
    groups = [np.arange(n)]
    for j in range(d):
        new_groups = []
        for g in groups:
            order = g[np.argsort(x[g, j], kind="stable")]
            parts = [p for p in np.array_split(order, per_axis) if p.size]
            new_groups.extend(parts)
        groups = new_groups
    for b, g in enumerate(groups):
        labels[g] = b
    return labels


def _default_bins(d: int) -> int:
    return 8 if d == 1 else 4


def bmo_estimate(bundle: PathBundle, per_axis: int | None = None, time_stride: int = 1, min_bin: int = 2) -> dict:
    """Max over grid times and state bins of E[int_t^T |Z|^2 ds | bin].

    Deterministic times form a subset of all stopping times, so this is a
    lower-bound style estimate of the bmo norm (no square root taken).
    """
    if bundle.Z is None:
        raise ValueError("bundle has no Z record")
    keep = ~bundle.exited
    Z = bundle.Z[keep]
    X = bundle.X[keep]
    sq = np.sum(Z[:, :-1] ** 2, axis=(2, 3)) * bundle.dt  # (P, L)
    tail = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]  # tail[:, l] = sum_{k>=l}
    per_axis = per_axis or _default_bins(bundle.X.shape[2])
    best = 0.0
    where = None
    for step in range(0, bundle.L, time_stride):
        labels = equal_count_bins(X[:, step], per_axis)
        for b in range(labels.max() + 1):
            sel = labels == b
            if sel.sum() < min_bin:
                continue
            val = float(np.mean(tail[sel, step]))
            if val > best:
                best = val
                where = {"step": step, "t": float(bundle.times[step]), "bin": b}
    return {"estimate": best, "argmax": where}


def girsanov_check(
    bundle: PathBundle,
    coeffs: CoefficientSet,
    drift: Drift | None = None,
    statistic: Callable[[np.ndarray], np.ndarray] | None = None,
    reference: PathBundle | None = None,
) -> dict:
    """Stochastic-exponential weights of sigma^{-1} b along driftless paths.

    Reports mean weight (should be 1) and the reweighted ``statistic`` of X_T
    (default: X_T itself), optionally against a directly drifted ``reference``
    bundle.
    """
    if not bundle.driftless:
        raise ValueError("girsanov_check needs a driftless bundle")
    P = bundle.P
    logw = np.zeros(P)
    for step in range(bundle.L):
        t = float(bundle.times[step])
        x = bundle.X[:, step]
        sig = coeffs.eval_sigma(t, x)
        inv = sigma_inverse(sig, t, x)
        if drift is not None:
            b = drift(t, x)
        elif bundle.Y is not None:
            b = coeffs.eval_b(t, x, bundle.Y[:, step], bundle.Z[:, step])
        else:
            b = coeffs.eval_b(t, x, np.zeros((P, coeffs.n)), np.zeros((P, coeffs.n, coeffs.d)))
        b = np.broadcast_to(b, (P, coeffs.d))
        theta = np.einsum("kab,kb->ka", inv, b)
        logw += np.sum(theta * bundle.dW[:, step], axis=1) - 0.5 * np.sum(theta**2, axis=1) * bundle.dt
    w = np.exp(logw)
    wm, wse = _mean_se(w)
    stat = statistic or (lambda xT: xT)
    s = np.asarray(stat(bundle.X[:, -1]), dtype=float).reshape(P, -1)
    out = {
        "weight_mean": wm,
        "weight_se": wse,
        "weight_z": (wm - 1.0) / wse if wse > 0 else 0.0,
        "max_log_weight": float(np.max(logw)),
        "reweighted": [],
    }
    for j in range(s.shape[1]):
        m, se = _mean_se(w * s[:, j])
        entry = {"mean": m, "se": se}
        if reference is not None:
            r = np.asarray(stat(reference.X[~reference.exited, -1]), dtype=float).reshape(-1, s.shape[1])[:, j]
            rm, rse = _mean_se(r)
            entry.update({"reference_mean": rm, "reference_se": rse, "z": (m - rm) / math.hypot(se, rse)})
        out["reweighted"].append(entry)
    return out


def submartingale_check(
    bundle: PathBundle,
    decl: StructuralDecl,
    lag: int | None = None,
    checks: int = 10,
    per_axis: int | None = None,
    threshold: float = 3.0,
) -> dict:
    """Binned conditional drift of R = exp(2 a_m . Y + 2 rho t) for each a_m.

    At each check step l, paths are binned by X_l and the mean of
    R_{l+lag} - R_l is computed per bin with its standard error.  A drift
    more than ``threshold`` standard errors below zero is a violation.
    """
    if bundle.Y is None:
        raise ValueError("bundle has no Y record")
    L = bundle.L
    lag = lag or max(1, L // 10)
    per_axis = per_axis or _default_bins(bundle.X.shape[2])
    starts = np.unique(np.linspace(0, L - lag, checks).round().astype(int))
    vectors = decl.vectors
    results = []
    worst_z = math.inf
    for a in vectors:
        R = np.exp(2.0 * bundle.Y @ a + 2.0 * decl.rho * bundle.times[None, :])
        entry = {"vector": a.tolist(), "min_drift": math.inf, "se": None, "z": math.inf, "step": None}
        for s in starts:
            keep = bundle.active_through(s + lag)
            idx = np.nonzero(keep)[0]
            labels = equal_count_bins(bundle.X[idx, s], per_axis)
            inc = R[idx, s + lag] - R[idx, s]
            for b in range(labels.max() + 1):
                v = inc[labels == b]
                if v.size < 2:
                    continue
                m, se = _mean_se(v)
                z = m / se if se > 0 else (0.0 if m == 0 else math.copysign(math.inf, m))
                if z < entry["z"]:
                    entry.update({"min_drift": m, "se": se, "z": z, "step": int(s)})
        worst_z = min(worst_z, entry["z"])
        results.append(entry)
    return {
        "lag": lag,
        "check_steps": starts.tolist(),
        "vectors": results,
        "worst_z": worst_z,
        "violated": bool(worst_z < -threshold),
    }


def payoff_mc(
    bundle: PathBundle,
    running: Callable[[float, np.ndarray], np.ndarray],
    terminal: Callable[[np.ndarray], np.ndarray],
) -> dict:
    """Mean and standard error of terminal(X_T) + sum running(t, X_t) dt."""
    keep = ~bundle.exited
    X = bundle.X[keep]
    total = np.asarray(terminal(X[:, -1]), dtype=float).reshape(-1).copy()
    for step in range(bundle.L):
        total += np.asarray(running(float(bundle.times[step]), X[:, step]), dtype=float).reshape(-1) * bundle.dt
    m, se = _mean_se(total)
    return {"mean": m, "se": se, "paths_used": int(keep.sum())}


def write_paths_csv(bundle: PathBundle, path: str | Path, max_paths: int = 100) -> Path:
    path = Path(path)
    P = min(bundle.P, max_paths)
    d = bundle.X.shape[2]
    n = bundle.Y.shape[2] if bundle.Y is not None else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "t"] + [f"x{j + 1}" for j in range(d)] + [f"y{i + 1}" for i in range(n)] + ["abs_z"])
        for p in range(P):
            for s in range(bundle.L + 1):
                row = [p, s, repr(float(bundle.times[s]))] + [repr(float(v)) for v in bundle.X[p, s]]
                if bundle.Y is not None:
                    row += [repr(float(v)) for v in bundle.Y[p, s]]
                    row.append(repr(float(frobenius(bundle.Z[p, s]))))
                else:
                    row.append("")
                w.writerow(row)
    return path
