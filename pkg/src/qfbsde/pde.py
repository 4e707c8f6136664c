"""Backward finite-difference solver for the coupled semilinear parabolic system.

The scheme is explicit Euler in time, marching from the terminal level, with
centred second differences (4-point cross stencil) for tr(a D^2 u) and
centred / one-sided second-order first differences for Du.  The artificial
boundary uses linearly extrapolated ghost nodes, i.e. a zero second normal
derivative.

Quadratic drivers are handled by truncation continuation: the system is
solved with z replaced by pi^k(z) for an increasing schedule of radii until
u(0, .) stops moving on the reporting subdomain.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import CoefficientSet, frobenius, sigma_inverse, truncate_z

__all__ = [
    "GridSpec",
    "DecouplingField",
    "SolverError",
    "CFLViolation",
    "NumericalBlowup",
    "ExtrapolationError",
    "InsufficientLevels",
    "solve_backward",
    "march_backward",
    "gradient_field",
    "sample_field",
    "pde_residual",
    "holder_seminorm",
    "blowup_fit",
    "write_field_csv",
]

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (2.0, 4.0, 8.0, 16.0, 32.0)


# |u| beyond this is treated as blow-up before drivers overflow
BLOWUP_CEILING = 1e100


class SolverError(RuntimeError):
    pass


class CFLViolation(SolverError):
    pass


class NumericalBlowup(SolverError):
    def __init__(self, level: int, node: int, t: float):
        super().__init__(f"non-finite value at time level {level} (t={t:.6g}), node {node}")
        self.level = level
        self.node = node
        self.t = t


class ExtrapolationError(ValueError):
    pass


class InsufficientLevels(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    box: tuple[tuple[float, float], ...]
    nodes_per_axis: int
    dt: float | None = None
    cfl_factor: float = 0.9
    band: float = 0.15

    def __post_init__(self):
        if self.nodes_per_axis < 8:
            raise ValueError("nodes_per_axis must be at least 8")
        if not 0 <= self.band < 0.5:
            raise ValueError("band must lie in [0, 0.5)")
        for lo, hi in self.box:
            if not hi > lo:
                raise ValueError("empty box axis")

    @property
    def d(self) -> int:
        return len(self.box)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_axis,) * self.d

    @property
    def node_count(self) -> int:
        return self.nodes_per_axis**self.d

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (self.nodes_per_axis - 1) for lo, hi in self.box])

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.nodes_per_axis) for lo, hi in self.box]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def reporting_box(self, band: float | None = None) -> tuple[tuple[float, float], ...]:
        band = self.band if band is None else band
        return tuple((lo + band * (hi - lo), hi - band * (hi - lo)) for lo, hi in self.box)

    def reporting_mask(self, band: float | None = None) -> np.ndarray:
        nodes = self.nodes()
        rb = self.reporting_box(band)
        eps = 1e-12
        mask = np.ones(nodes.shape[0], dtype=bool)
        for j, (lo, hi) in enumerate(rb):
            mask &= (nodes[:, j] >= lo - eps) & (nodes[:, j] <= hi + eps)
        return mask

    def max_stable_dt(self, C0: float) -> float:
        return self.cfl_factor * float(np.min(self.spacing)) ** 2 / (self.d * C0)

    def time_levels(self, T: float, C0: float) -> tuple[int, float]:
        """(number of steps, dt) covering [0, T]."""
        limit = self.max_stable_dt(C0)
        if self.dt is None:
            steps = max(1, math.ceil(T / limit - 1e-9))
        else:
            if self.dt > limit * (1 + 1e-12):
                raise CFLViolation(f"dt={self.dt:.3g} exceeds the explicit stability limit {limit:.3g}")
            steps = max(1, math.ceil(T / self.dt - 1e-9))
        return steps, T / steps

    def as_dict(self) -> dict:
        return {
            "box": [list(b) for b in self.box],
            "nodes_per_axis": self.nodes_per_axis,
            "dt": self.dt,
            "cfl_factor": self.cfl_factor,
            "band": self.band,
        }


@dataclass
class DecouplingField:
    """Grid-sampled (u, v) with v = Du sigma, one slab per time level."""

    grid: GridSpec
    T: float
    times: np.ndarray  # (L+1,)
    u_values: np.ndarray  # (L+1, N, n)
    v_values: np.ndarray  # (L+1, N, n, d)
    truncation_radius_used: float | None = None
    converged: bool = True
    history: list[dict] = field(default_factory=list)
    max_z_norm: float = 0.0

    @property
    def n(self) -> int:
        return self.u_values.shape[2]

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def levels(self) -> int:
        return self.times.size

    def u_grid(self, level: int) -> np.ndarray:
        return self.u_values[level].reshape(self.grid.shape + (self.n,))

    # -- interpolation ---------------------------------------------------
    def _space_weights(self, x: np.ndarray):
        g = self.grid
        N = g.nodes_per_axis
        lo = np.array([b[0] for b in g.box])
        h = g.spacing
        s = (x - lo) / h
        i0 = np.clip(np.floor(s).astype(np.int64), 0, N - 2)
        w = np.clip(s - i0, 0.0, 1.0)
        return i0, w

    def _interp_level(self, values: np.ndarray, level: int, i0: np.ndarray, w: np.ndarray) -> np.ndarray:
        d = self.d
        N = self.grid.nodes_per_axis
        out = None
        for corner in range(2**d):
            bits = [(corner >> j) & 1 for j in range(d)]
            idx = np.zeros(i0.shape[0], dtype=np.int64)
            weight = np.ones(i0.shape[0])
            for j in range(d):
                idx = idx * N + i0[:, j] + bits[j]
                weight = weight * (w[:, j] if bits[j] else 1.0 - w[:, j])
            term = values[level][idx] * weight.reshape((-1,) + (1,) * (values.ndim - 2))
            out = term if out is None else out + term
        return out

    def interpolate(self, t: float, x: np.ndarray, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Batched multilinear-in-x, linear-in-t interpolation of (u, v)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if check:
            self._check_inside(t, x)
        i0, w = self._space_weights(x)
        pos = (min(max(t, self.times[0]), self.times[-1]) - self.times[0]) / self.dt
        m0 = min(int(math.floor(pos)), self.levels - 2)
        lam = pos - m0
        u0 = self._interp_level(self.u_values, m0, i0, w)
        v0 = self._interp_level(self.v_values, m0, i0, w)
        if lam <= 1e-12:
            return u0, v0
        if lam >= 1 - 1e-12:
            return self._interp_level(self.u_values, m0 + 1, i0, w), self._interp_level(self.v_values, m0 + 1, i0, w)
        u1 = self._interp_level(self.u_values, m0 + 1, i0, w)
        v1 = self._interp_level(self.v_values, m0 + 1, i0, w)
        return (1 - lam) * u0 + lam * u1, (1 - lam) * v0 + lam * v1

    def _check_inside(self, t: float, x: np.ndarray) -> None:
        tol = 1e-12
        if t < self.times[0] - tol or t > self.times[-1] + tol:
            raise ExtrapolationError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        for j, (lo, hi) in enumerate(self.grid.box):
            if np.any(x[:, j] < lo - tol) or np.any(x[:, j] > hi + tol):
                raise ExtrapolationError(f"query outside the grid box on axis {j + 1}")

    def meta(self) -> dict:
        return {
            "grid": self.grid.as_dict(),
            "T": self.T,
            "levels": int(self.levels),
            "dt": self.dt,
            "truncation_radius_used": self.truncation_radius_used,
            "converged": self.converged,
            "history": self.history,
        }


def sample_field(fld: DecouplingField, t: float, x) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) at one point; raises ExtrapolationError outside the grid."""
    u, v = fld.interpolate(t, np.asarray(x, dtype=float).reshape(1, fld.d))
    return u[0], v[0]


# ---------------------------------------------------------------------------
# stencils


def gradient_field(u_values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Du at every node: centred inside, one-sided second order on faces.

    ``u_values`` is ``(N, n)`` over flattened nodes; returns ``(N, n, d)``.
    """
    n = u_values.shape[-1]
    ug = u_values.reshape(grid.shape + (n,))
    h = grid.spacing
    grads = [np.gradient(ug, h[j], axis=j, edge_order=2) for j in range(grid.d)]
    return np.stack(grads, axis=-1).reshape(-1, n, grid.d)


def _ghost_pad(ug: np.ndarray, d: int) -> np.ndarray:
    """Pad each spatial axis by one linearly extrapolated ghost layer."""
    out = ug
    for j in range(d):
        out = np.pad(out, [(1, 1) if a == j else (0, 0) for a in range(out.ndim)], mode="edge")
        lo = [slice(None)] * out.ndim
        hi = [slice(None)] * out.ndim
        s1 = [slice(None)] * out.ndim
        s2 = [slice(None)] * out.ndim
        e1 = [slice(None)] * out.ndim
        e2 = [slice(None)] * out.ndim
        lo[j], s1[j], s2[j] = 0, 1, 2
        hi[j], e1[j], e2[j] = -1, -2, -3
        out[tuple(lo)] = 2 * out[tuple(s1)] - out[tuple(s2)]
        out[tuple(hi)] = 2 * out[tuple(e1)] - out[tuple(e2)]
    return out


def hessian_field(u_values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Centred second differences, ``(N, n, d, d)``, with ghost-node boundary."""
    n = u_values.shape[-1]
    d = grid.d
    h = grid.spacing
    ug = u_values.reshape(grid.shape + (n,))
    p = _ghost_pad(ug, d)
    N = grid.nodes_per_axis
    core = tuple(slice(1, N + 1) for _ in range(d))

    def shifted(offsets):
        return p[tuple(slice(1 + o, N + 1 + o) for o in offsets)]

    H = np.empty(grid.shape + (n, d, d))
    centre = p[core]
    for a in range(d):
        ea = [0] * d
        ea[a] = 1
        em = [0] * d
        em[a] = -1
        H[..., a, a] = (shifted(ea) - 2 * centre + shifted(em)) / h[a] ** 2
        for b in range(a + 1, d):
            def off(sa, sb):
                o = [0] * d
                o[a] = sa
                o[b] = sb
                return o

            cross = (shifted(off(1, 1)) - shifted(off(1, -1)) - shifted(off(-1, 1)) + shifted(off(-1, -1))) / (4 * h[a] * h[b])
            H[..., a, b] = cross
            H[..., b, a] = cross
    return H.reshape(-1, n, d, d)


# ---------------------------------------------------------------------------
# marching


Source = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class _SigmaCache:
    """sigma and a = sigma sigma^T / 2 on the grid nodes, per time level."""

    sigma_fn: Callable[[float, np.ndarray], np.ndarray]
    nodes: np.ndarray
    constant: bool
    _cache: dict = field(default_factory=dict)

    def at(self, t: float):
        key = 0.0 if self.constant else t
        hit = self._cache.get(key)
        if hit is None:
            sig = np.array(self.sigma_fn(t, self.nodes), dtype=float)
            inv = sigma_inverse(sig, t, self.nodes)
            a = 0.5 * np.einsum("kab,kcb->kac", sig, sig)
            hit = (sig, inv, a)
            if self.constant:
                self._cache[key] = hit
        return hit


def estimate_C0(sigma_fn, nodes: np.ndarray, T: float) -> float:
    c = 0.0
    for t in (0.0, 0.5 * T, T):
        sv = np.linalg.svd(np.asarray(sigma_fn(t, nodes), dtype=float), compute_uv=False)
        c = max(c, float(np.max(sv[:, 0] ** 2)), float(np.max(1.0 / sv[:, -1] ** 2)))
    return c


def march_backward(
    grid: GridSpec,
    T: float,
    sigma_fn,
    sigma_constant: bool,
    terminal: np.ndarray,
    source: Source,
    C0: float | None = None,
    keep_levels: bool = True,
    steps: int | None = None,
):
    """Explicit backward march of  w_t + tr(a D^2 w) + source = 0,  w(T) = terminal.

    ``source(level, t, nodes, w, Dw)`` returns ``(N, n)``; it is evaluated at
    the already-known level ``level``.  Returns (times, w_levels, v_levels).
    """
    nodes = grid.nodes()
    if C0 is None:
        C0 = estimate_C0(sigma_fn, nodes, T)
    if steps is None:
        steps, dt = grid.time_levels(T, C0)
    else:
        dt = T / steps
        if dt > grid.max_stable_dt(C0) * (1 + 1e-12):
            raise CFLViolation(f"dt={dt:.3g} exceeds the explicit stability limit")
    times = np.linspace(0.0, T, steps + 1)
    times[-1] = T
    sc = _SigmaCache(sigma_fn, nodes, sigma_constant)
    n = terminal.shape[1]
    d = grid.d
    w = np.array(terminal, dtype=float)
    nlev = steps + 1 if keep_levels else 1
    W = np.empty((nlev, nodes.shape[0], n))
    V = np.empty((nlev, nodes.shape[0], n, d))
    for m in range(steps, -1, -1):
        t = float(times[m])
        sig, _, a = sc.at(t)
        Dw = gradient_field(w, grid)
        slot = m if keep_levels else 0
        W[slot] = w
        V[slot] = np.einsum("kia,kab->kib", Dw, sig)
        if m == 0:
            break
        H = hessian_field(w, grid)
        diff = np.einsum("kab,kiab->ki", a, H)
        rhs = diff + source(m, t, nodes, w, Dw)
        w_new = w + dt * rhs
        blown = ~np.isfinite(w_new) | (np.abs(w_new) > BLOWUP_CEILING)
        if np.any(blown):
            bad = np.argwhere(blown)[0]
            raise NumericalBlowup(m - 1, int(bad[0]), float(times[m - 1]))
        w = w_new
    return times, W, V


def coefficient_source(coeffs: CoefficientSet, k: float | None, sigma_cache_fn, stats: dict) -> Source:
    """f(t,x,u,pi^k(Du sigma)) + Du . b(t,x,u,pi^k(Du sigma))."""

    def source(m, t, nodes, u, Du):
        sig = sigma_cache_fn(t)
        z = np.einsum("kia,kab->kib", Du, sig)
        zmax = float(np.max(frobenius(z))) if z.size else 0.0
        stats["max_z_norm"] = max(stats.get("max_z_norm", 0.0), zmax)
        zk = truncate_z(z, k) if k is not None else z
        f = coeffs.eval_f(t, nodes, u, zk)
        b = coeffs.eval_b(t, nodes, u, zk)
        return f + np.einsum("kid,kd->ki", Du, b)

    return source


def solve_backward(
    coeffs: CoefficientSet,
    grid: GridSpec,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
    tol: float = 1e-4,
) -> DecouplingField:
    """Truncation-continuation solve; returns the first stabilised field.

    If the schedule is exhausted without two consecutive radii agreeing to
    ``tol`` on the reporting subdomain, the last field is returned with
    ``converged = False``.
    """
    schedule = [float(k) for k in schedule]
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])) or schedule[0] <= 0:
        raise ValueError("schedule must be a nonempty increasing list of positive radii")
    if grid.d != coeffs.d:
        raise ValueError("grid dimension does not match the coefficients")
    nodes = grid.nodes()
    # dry run on the box corners
    corners = np.array(np.meshgrid(*[[lo, hi] for lo, hi in grid.box], indexing="ij")).reshape(grid.d, -1).T
    zc = np.zeros((corners.shape[0], coeffs.n, coeffs.d))
    yc = np.zeros((corners.shape[0], coeffs.n))
    for t in (0.0, coeffs.T):
        sigma_inverse(coeffs.eval_sigma(t, corners), t, corners)
        coeffs.eval_b(t, corners, yc, zc)
        coeffs.eval_f(t, corners, yc, zc)
    terminal = np.array(coeffs.eval_g(nodes), dtype=float)
    C0 = estimate_C0(coeffs.eval_sigma, nodes, coeffs.T)
    mask = grid.reporting_mask()

    sig_cache = _SigmaCache(coeffs.eval_sigma, nodes, coeffs.sigma_constant)

    def sig_at(t):
        return sig_cache.at(t)[0]

    prev = None
    history: list[dict] = []
    fld = None
    for idx, k in enumerate(schedule):
        if fld is not None and fld.max_z_norm <= prev_k:
            # truncation never bound at the previous radius, so this solve
            # would reproduce it bit for bit
            history.append({"radius": k, "sup_change": 0.0, "truncation_active": False, "reused": True})
            fld.truncation_radius_used = k
            fld.history = history
            fld.converged = True
            return fld
        stats: dict = {}
        times, U, V = march_backward(
            grid, coeffs.T, coeffs.eval_sigma, coeffs.sigma_constant, terminal, coefficient_source(coeffs, k, sig_at, stats), C0=C0
        )
        fld = DecouplingField(grid=grid, T=coeffs.T, times=times, u_values=U, v_values=V, truncation_radius_used=k)
        fld.max_z_norm = stats.get("max_z_norm", 0.0)
        entry = {"radius": k, "sup_change": None, "truncation_active": bool(fld.max_z_norm > k), "reused": False}
        if prev is not None:
            change = float(np.max(np.abs(U[0][mask] - prev[mask])))
            entry["sup_change"] = change
            history.append(entry)
            log.info("radius %g: sup change %.3e", k, change)
            if change <= tol:
                fld.history = history
                fld.converged = True
                return fld
        else:
            history.append(entry)
        prev = U[0]
        prev_k = k
    fld.history = history
    fld.converged = False
    return fld


# ---------------------------------------------------------------------------
# diagnostics


def _d1_fourth(ug: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order centred first difference; NaN within two nodes of a face."""
    out = np.full(ug.shape, np.nan)
    sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(ug.ndim))
    N = ug.shape[axis]
    out[sl(2, N - 2)] = (-ug[sl(4, N)] + 8 * ug[sl(3, N - 1)] - 8 * ug[sl(1, N - 3)] + ug[sl(0, N - 4)]) / (12 * h)
    return out


def _d2_fourth(ug: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.full(ug.shape, np.nan)
    sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(ug.ndim))
    N = ug.shape[axis]
    out[sl(2, N - 2)] = (
        -ug[sl(4, N)] + 16 * ug[sl(3, N - 1)] - 30 * ug[sl(2, N - 2)] + 16 * ug[sl(1, N - 3)] - ug[sl(0, N - 4)]
    ) / (12 * h**2)
    return out


def pde_residual(
    fld: DecouplingField,
    coeffs: CoefficientSet,
    band: float | None = None,
    skip_final_levels: int = 0,
    level_stride: int = 1,
) -> dict:
    """Plug the discrete u into the PDE with fourth-order stencils.

    Time derivatives are centred across neighbouring levels, so the first
    and last levels are skipped.  Returns max and RMS over interior nodes of
    the reporting subdomain.
    """
    g = fld.grid
    d, n = g.d, fld.n
    h = g.spacing
    mask = g.reporting_mask(band)
    nodes = g.nodes()
    last = fld.levels - 1 - max(1, skip_final_levels)
    vals = []
    for m in range(1, last + 1, level_stride):
        t = float(fld.times[m])
        ug = fld.u_grid(m)
        Du = np.stack([_d1_fourth(ug, h[j], j) for j in range(d)], axis=-1).reshape(-1, n, d)
        H = np.empty(g.shape + (n, d, d))
        for a in range(d):
            H[..., a, a] = _d2_fourth(ug, h[a], a)
            for b in range(a + 1, d):
                cross = _d1_fourth(_d1_fourth(ug, h[a], a), h[b], b)
                H[..., a, b] = cross
                H[..., b, a] = cross
        H = H.reshape(-1, n, d, d)
        ok = mask & np.all(np.isfinite(Du), axis=(1, 2)) & np.all(np.isfinite(H), axis=(1, 2, 3))
        if not np.any(ok):
            continue
        x = nodes[ok]
        u = fld.u_values[m][ok]
        sig = coeffs.eval_sigma(t, x)
        a_mat = 0.5 * np.einsum("kab,kcb->kac", sig, sig)
        z = np.einsum("kia,kab->kib", Du[ok], sig)
        ut = (fld.u_values[m + 1][ok] - fld.u_values[m - 1][ok]) / (fld.times[m + 1] - fld.times[m - 1])
        r = (
            ut
            + np.einsum("kab,kiab->ki", a_mat, H[ok])
            + coeffs.eval_f(t, x, u, z)
            + np.einsum("kid,kd->ki", Du[ok], coeffs.eval_b(t, x, u, z))
        )
        vals.append(r.ravel())
    if not vals:
        return {"max": float("nan"), "rms": float("nan"), "count": 0}
    allr = np.concatenate(vals)
    return {"max": float(np.max(np.abs(allr))), "rms": float(np.sqrt(np.mean(allr**2))), "count": int(allr.size)}


def holder_seminorm(
    fld: DecouplingField,
    alpha: float,
    pairs: int = 4000,
    seed: int = 0,
    which: str = "u",
    band: float | None = None,
) -> float:
    """Largest parabolic Hoelder quotient over sampled (level, node) pairs.

    Always a lower bound for the true seminorm.  Besides random pairs the
    sample includes, at every tenth level, the two extreme nodes of each
    axis of the reporting subdomain.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    g = fld.grid
    vals = fld.u_values if which == "u" else fld.v_values.reshape(fld.levels, g.node_count, -1)
    idx = np.nonzero(g.reporting_mask(band))[0]
    nodes = g.nodes()
    rng = np.random.default_rng(seed)
    L = fld.levels
    m1 = rng.integers(0, L, pairs)
    m2 = rng.integers(0, L, pairs)
    k1 = idx[rng.integers(0, idx.size, pairs)]
    k2 = idx[rng.integers(0, idx.size, pairs)]
    sub = nodes[idx]
    ext1, ext2 = [], []
    for j in range(g.d):
        ext1.append(idx[np.argmin(sub[:, j] + 1e-9 * np.abs(sub).sum(axis=1))])
        ext2.append(idx[np.argmax(sub[:, j] - 1e-9 * np.abs(sub).sum(axis=1))])
    lev = np.arange(0, L, max(1, L // 10))
    m1 = np.concatenate([m1, np.repeat(lev, g.d)])
    m2 = np.concatenate([m2, np.repeat(lev, g.d)])
    k1 = np.concatenate([k1, np.tile(ext1, lev.size)])
    k2 = np.concatenate([k2, np.tile(ext2, lev.size)])
    num = np.linalg.norm(vals[m1, k1] - vals[m2, k2], axis=1)
    den = np.abs(fld.times[m1] - fld.times[m2]) ** (alpha / 2) + np.linalg.norm(nodes[k1] - nodes[k2], axis=1) ** alpha
    ok = den > 0
    return float(np.max(num[ok] / den[ok], initial=0.0))


def blowup_fit(fld: DecouplingField, band: float | None = None, exclude_final: int = 3) -> dict:
    """Fit the growth exponent of max_x |Du(t, .)| as t -> T.

    Uses the levels whose time-to-go lies in one decade [tau0, 10 tau0],
    tau0 being the time-to-go of the first level not excluded.
    """
    L = fld.levels
    if L < exclude_final + 4:
        raise InsufficientLevels("too few time levels for a blow-up fit")
    tau = fld.T - fld.times
    first = L - 1 - exclude_final
    tau0 = tau[first]
    sel = [m for m in range(first, -1, -1) if tau[m] <= 10 * tau0 * (1 + 1e-9)]
    if len(sel) < 3:
        raise InsufficientLevels("fewer than three levels in the fitting decade")
    mask = fld.grid.reporting_mask(band)
    G = np.array([np.max(frobenius(gradient_field(fld.u_values[m], fld.grid)[mask])) for m in sel])
    if np.all(G <= 1e-300):
        return {"exponent": 0.0, "levels": len(sel), "tau_range": [float(tau[sel[0]]), float(tau[sel[-1]])]}
    G = np.maximum(G, 1e-300)
    X = -np.log(tau[sel])
    slope, _ = np.polyfit(X, np.log(G), 1)
    return {"exponent": float(slope), "levels": len(sel), "tau_range": [float(tau[sel[0]]), float(tau[sel[-1]])]}


def write_field_csv(fld: DecouplingField, path: str | Path) -> Path:
    """Dump every (level, node) as one CSV row plus a JSON sidecar."""
    path = Path(path)
    g = fld.grid
    n, d = fld.n, g.d
    nodes = g.nodes()
    L, N = fld.levels, g.node_count
    cols = [np.repeat(fld.times, N)[:, None], np.tile(nodes, (L, 1)), fld.u_values.reshape(L * N, n), fld.v_values.reshape(L * N, n * d)]
    data = np.hstack(cols)
    header = ["t"] + [f"x{j + 1}" for j in range(d)] + [f"u{i + 1}" for i in range(n)]
    header += [f"v{i + 1}{j + 1}" for i in range(n) for j in range(d)]
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    path.with_suffix(".meta.json").write_text(json.dumps(fld.meta(), indent=2, sort_keys=True))
    return path
