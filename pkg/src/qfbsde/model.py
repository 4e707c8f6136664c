"""Coefficient sets, the transformed driver F and the z-truncation map.

All coefficient callables are *batched*: ``t`` is a float, ``x`` has shape
``(N, d)``, ``y`` has shape ``(N, n)`` and ``z`` has shape ``(N, n, d)`` with
row ``i`` of ``z[k]`` holding ``z^i``.  They return

* ``b``:     ``(N, d)``
* ``sigma``: ``(N, d, d)``
* ``f``:     ``(N, n)``
* ``g``:     ``(N, n)``  (called as ``g(x)``)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import exprlang

__all__ = [
    "CoefficientSet",
    "StructuralDecl",
    "NonconvertibleCoefficientError",
    "assemble_F",
    "assemble_F_batch",
    "truncate_z",
    "sigma_inverse",
    "frobenius",
    "from_expressions",
    "power_kappa",
]

DriftFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
SigmaFn = Callable[[float, np.ndarray], np.ndarray]
TerminalFn = Callable[[np.ndarray], np.ndarray]


class NonconvertibleCoefficientError(ArithmeticError):
    """sigma(t, x) could not be inverted."""

    def __init__(self, t: float, x: np.ndarray):
        super().__init__(f"sigma is singular at t={t!r}, x={np.asarray(x).tolist()!r}")
        self.t = t
        self.x = np.asarray(x)


@dataclass(frozen=True)
class CoefficientSet:
    n: int
    d: int
    T: float
    b: DriftFn
    sigma: SigmaFn
    f: DriftFn
    g: TerminalFn
    name: str = ""
    # set when sigma does not depend on (t, x); lets solvers factor once
    sigma_constant: bool = False

    def clamp_t(self, t: float) -> float:
        return min(max(float(t), 0.0), self.T)

    def eval_b(self, t, x, y, z) -> np.ndarray:
        return np.broadcast_to(self.b(self.clamp_t(t), x, y, z), (x.shape[0], self.d))

    def eval_sigma(self, t, x) -> np.ndarray:
        return np.broadcast_to(self.sigma(self.clamp_t(t), x), (x.shape[0], self.d, self.d))

    def eval_f(self, t, x, y, z) -> np.ndarray:
        return np.broadcast_to(self.f(self.clamp_t(t), x, y, z), (x.shape[0], self.n))

    def eval_g(self, x) -> np.ndarray:
        return np.broadcast_to(self.g(x), (x.shape[0], self.n))


def power_kappa(coefficient: float, exponent: float) -> Callable[[np.ndarray], np.ndarray]:
    """kappa(r) = coefficient * r**exponent."""

    def kappa(r):
        return coefficient * np.power(np.asarray(r, dtype=float), exponent)

    return kappa


@dataclass(frozen=True)
class StructuralDecl:
    """User-declared constants for the structural conditions."""

    C0: float = 1.0
    CQ: float = 1.0
    rho: float = 0.0
    spanning_vectors: tuple[tuple[float, ...], ...] = ()
    kappa: Callable[[np.ndarray], np.ndarray] = field(default_factory=lambda: power_kappa(0.0, 1.0))
    kappa_exponent: float = 1.0

    def __post_init__(self):
        if self.kappa_exponent >= 2.0:
            raise ValueError("kappa must be sub-quadratic (exponent < 2)")
        if self.spanning_vectors:
            dims = {len(v) for v in self.spanning_vectors}
            if len(dims) != 1:
                raise ValueError("spanning vectors have mismatched dimensions")
            n = dims.pop()
            if len(self.spanning_vectors) < n + 1:
                raise ValueError(f"a positively spanning set of R^{n} needs at least {n + 1} vectors")

    @property
    def vectors(self) -> np.ndarray:
        return np.asarray(self.spanning_vectors, dtype=float)

    def kappa_spot_check(self, radii: Sequence[float] = (0.0, 1.0, 10.0, 100.0, 1e3, 1e4), c: float | None = None) -> bool:
        """Check kappa(r) <= c r^e + c on sampled radii (c fitted from r <= 1 if omitted)."""
        r = np.asarray(radii, dtype=float)
        k = np.asarray(self.kappa(r), dtype=float)
        if c is None:
            c = max(1.0, float(np.max(k[r <= 1.0], initial=0.0)), float(np.max(k / (1.0 + r**self.kappa_exponent))))
        return bool(np.all(k <= c * r**self.kappa_exponent + c))


def frobenius(z: np.ndarray) -> np.ndarray:
    """|z| over the trailing (n, d) axes."""
    return np.sqrt(np.sum(np.square(z), axis=(-2, -1)))


def truncate_z(z: np.ndarray, k: float) -> np.ndarray:
    """Radial projection of z onto the Frobenius ball of radius k."""
    if not k > 0:
        raise ValueError("truncation radius must be positive")
    z = np.asarray(z, dtype=float)
    norm = frobenius(z)
    scale = np.where(norm > k, k / np.where(norm > k, norm, 1.0), 1.0)
    return z * scale[..., None, None]


def sigma_inverse(sig: np.ndarray, t: float, x: np.ndarray) -> np.ndarray:
    """Batched inverse of sigma with a singularity check per point."""
    sig = np.asarray(sig, dtype=float)
    if sig.shape[0] > 1 and np.all(sig == sig[:1]):
        # constant batch: factor once
        inv = sigma_inverse(sig[:1], t, x[:1])
        return np.broadcast_to(inv, sig.shape)
    if sig.shape[-1] == 1:
        s = sig[:, 0, 0]
        bad = ~np.isfinite(s) | (np.abs(s) < 1e-300)
        if np.any(bad):
            raise NonconvertibleCoefficientError(t, x[int(np.argmax(bad))])
        return 1.0 / sig
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(sig)
    bad = ~np.isfinite(cond) | (cond > 1e14)
    if np.any(bad):
        raise NonconvertibleCoefficientError(t, x[int(np.argmax(bad))])
    return np.linalg.inv(sig)


def assemble_F_batch(coeffs: CoefficientSet, t: float, x, y, z) -> np.ndarray:
    """F^i = f^i + z^i . sigma^{-1} b for a batch of points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sig = coeffs.eval_sigma(t, x)
    inv = sigma_inverse(sig, t, x)
    b = coeffs.eval_b(t, x, y, z)
    theta = np.einsum("kab,kb->ka", inv, b)
    return coeffs.eval_f(t, x, y, z) + np.einsum("kid,kd->ki", z, theta)


def assemble_F(coeffs: CoefficientSet, t: float, x, y, z) -> np.ndarray:
    """Single-point driver transform; returns an array of length n."""
    x = np.asarray(x, dtype=float).reshape(1, coeffs.d)
    y = np.asarray(y, dtype=float).reshape(1, coeffs.n)
    z = np.asarray(z, dtype=float).reshape(1, coeffs.n, coeffs.d)
    return assemble_F_batch(coeffs, t, x, y, z)[0]


# ---------------------------------------------------------------------------
# expression-backed coefficients


def slot_variables(slot: str, n: int, d: int, k: int = 0) -> frozenset[str]:
    """Variables an expression in ``slot`` may reference."""
    xs = {f"x{j + 1}" for j in range(d)}
    ys = {f"y{i + 1}" for i in range(n)}
    zs = {f"z{i + 1}_{j + 1}" for i in range(n) for j in range(d)}
    ps = {f"p{j + 1}" for j in range(d)}
    acts = {f"a{j + 1}" for j in range(k)}
    table = {
        "b": {"t"} | xs | ys | zs,
        "f": {"t"} | xs | ys | zs,
        "sigma": {"t"} | xs,
        "g": xs,
        "game_b": {"t"} | xs | acts,
        "game_r": {"t"} | xs | acts,
        "game_a_hat": {"t"} | xs | ps,
        "game_g": xs,
    }
    return frozenset(table[slot])


class SlotError(ValueError):
    def __init__(self, path: str, bad: set[str]):
        super().__init__(f"{path}: variables {sorted(bad)} are not allowed in this slot")
        self.path = path
        self.bad = bad


def parse_slot(source: str, slot: str, n: int, d: int, path: str, k: int = 0) -> exprlang.Expr:
    try:
        tree = exprlang.parse_expr(str(source))
    except exprlang.ExprError as exc:
        exc.path = path  # lets callers report the offending slot
        raise
    bad = set(exprlang.free_vars(tree)) - slot_variables(slot, n, d, k)
    if bad:
        raise SlotError(path, bad)
    return tree


def state_env(t: float, x: np.ndarray, y: np.ndarray | None = None, z: np.ndarray | None = None) -> dict[str, np.ndarray]:
    env: dict[str, np.ndarray] = {"t": np.float64(t)}
    for j in range(x.shape[1]):
        env[f"x{j + 1}"] = x[:, j]
    if y is not None:
        for i in range(y.shape[1]):
            env[f"y{i + 1}"] = y[:, i]
    if z is not None:
        for i in range(z.shape[1]):
            for j in range(z.shape[2]):
                env[f"z{i + 1}_{j + 1}"] = z[:, i, j]
    return env


def _vector_fn(trees, width: int, with_yz: bool):
    fns = [exprlang.compile_numpy(e) for e in trees]

    def fn(t, x, y=None, z=None):
        env = state_env(t, x, y if with_yz else None, z if with_yz else None)
        out = np.empty((x.shape[0], width))
        for c, g in enumerate(fns):
            out[:, c] = g(env)
        return out

    return fn


def from_expressions(
    n: int,
    d: int,
    T: float,
    b: Sequence[str],
    sigma: Sequence[Sequence[str]],
    f: Sequence[str],
    g: Sequence[str],
    name: str = "",
) -> CoefficientSet:
    """Build a CoefficientSet from expression strings (validated per slot)."""
    if len(b) != d or len(f) != n or len(g) != n or len(sigma) != d or any(len(r) != d for r in sigma):
        raise ValueError("expression list shapes do not match (n, d)")
    bt = [parse_slot(s, "b", n, d, f"model.b[{j}]") for j, s in enumerate(b)]
    ft = [parse_slot(s, "f", n, d, f"model.f[{i}]") for i, s in enumerate(f)]
    gt = [parse_slot(s, "g", n, d, f"model.g[{i}]") for i, s in enumerate(g)]
    st = [[parse_slot(s, "sigma", n, d, f"model.sigma[{r}][{c}]") for c, s in enumerate(row)] for r, row in enumerate(sigma)]
    flat_sigma = [e for row in st for e in row]
    sigma_constant = all(not exprlang.free_vars(e) for e in flat_sigma)

    bf = _vector_fn(bt, d, True)
    ff = _vector_fn(ft, n, True)
    gf_ = _vector_fn(gt, n, False)
    sf_ = _vector_fn(flat_sigma, d * d, False)

    def sigma_fn(t, x):
        return sf_(t, x).reshape(x.shape[0], d, d)

    return CoefficientSet(
        n=n,
        d=d,
        T=float(T),
        b=bf,
        sigma=sigma_fn,
        f=ff,
        g=lambda x: gf_(0.0, x),
        name=name,
        sigma_constant=sigma_constant,
    )
