"""Config-driven pipeline: check conditions, solve, simulate, certify, report.

Configs and reports are JSON.  A report never contains wall-clock data, so
re-running an identical config rewrites report.json byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, exprlang
from .conditions import SamplePlan, check_structural, positive_spanning
from .games import DiagonalGameSpec, assemble_game, certify_nash, game_from_expressions
from .model import CoefficientSet, SlotError, StructuralDecl, from_expressions, power_kappa
from .pde import GridSpec, blowup_fit, pde_residual, sample_field, solve_backward, write_field_csv
from .simulate import (
    bmo_estimate,
    bsde_residual,
    girsanov_check,
    simulate_paths,
    submartingale_check,
    write_paths_csv,
)

MODES = ("check-conditions", "solve", "simulate", "verify-nash", "full")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_CERTIFICATE = 4

CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    """Invalid config; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


# ---------------------------------------------------------------------------
# config sections


@dataclass(frozen=True)
class StructureSection:
    C0: float = 1.0
    CQ: float = 1.0
    rho: float = 0.0
    spanning_vectors: tuple[tuple[float, ...], ...] = ()
    kappa_coefficient: float = 0.0
    kappa_exponent: float = 1.0

    def decl(self) -> StructuralDecl:
        return StructuralDecl(
            C0=self.C0,
            CQ=self.CQ,
            rho=self.rho,
            spanning_vectors=self.spanning_vectors,
            kappa=power_kappa(self.kappa_coefficient, self.kappa_exponent),
            kappa_exponent=self.kappa_exponent,
        )


@dataclass(frozen=True)
class ModelSection:
    n: int
    d: int
    T: float
    b: tuple[str, ...]
    sigma: tuple[tuple[str, ...], ...]
    f: tuple[str, ...]
    g: tuple[str, ...]


@dataclass(frozen=True)
class PlayerSection:
    actions: int
    box: tuple[tuple[float, float], ...]
    b: tuple[str, ...]
    r: str
    a_hat: tuple[str, ...]
    g: str


@dataclass(frozen=True)
class GameSection:
    d: int
    T: float
    sigma: tuple[tuple[str, ...], ...]
    players: tuple[PlayerSection, ...]


@dataclass(frozen=True)
class GridSection:
    box: tuple[tuple[float, float], ...]
    nodes_per_axis: int
    dt: float | None = None
    cfl_factor: float = 0.9
    band: float = 0.15

    def spec(self) -> GridSpec:
        return GridSpec(self.box, self.nodes_per_axis, self.dt, self.cfl_factor, self.band)


@dataclass(frozen=True)
class ScheduleSection:
    radii: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    tol: float = 1e-4


@dataclass(frozen=True)
class MCSection:
    P: int
    dt_sim: float
    seed: int
    t0: float = 0.0
    x0: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ChecksSection:
    x_box: tuple[tuple[float, float], ...] | None = None
    y_box: tuple[tuple[float, float], ...] | None = None
    z_range: tuple[float, float] = (-10.0, 10.0)
    points_per_axis: int = 5
    stress_count: int = 64
    seed: int = 0


@dataclass(frozen=True)
class NashSection:
    tol_pde: float = 1e-2
    tol_mc: float = 0.0
    resolution: int = 101


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    dump_fields: bool = False
    dump_paths: bool = False


@dataclass(frozen=True)
class RunConfig:
    mode: str
    name: str = ""
    model: ModelSection | None = None
    game: GameSection | None = None
    structure: StructureSection | None = None
    grid: GridSection | None = None
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    mc: MCSection | None = None
    checks: ChecksSection = field(default_factory=ChecksSection)
    nash: NashSection = field(default_factory=NashSection)
    spanning: tuple[tuple[tuple[float, ...], ...], ...] = ()
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def n(self) -> int:
        return self.model.n if self.model is not None else len(self.game.players)

    @property
    def d(self) -> int:
        return self.model.d if self.model is not None else self.game.d

    def to_dict(self) -> dict:
        """Plain dict in the input schema; parse_config(to_dict()) == self."""
        out = _plain(dataclasses.asdict(self))
        st = out.get("structure")
        if st is not None:
            st["kappa"] = {"coefficient": st.pop("kappa_coefficient"), "exponent": st.pop("kappa_exponent")}
        return _drop_none(out)

    def echo(self) -> dict:
        """Config as echoed in reports: the output directory is left out."""
        out = self.to_dict()
        out["output"].pop("directory", None)
        return out

    def content_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing


def _take(raw: Any, path: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown field")
    missing = set(required) - set(raw)
    if missing:
        raise ConfigError(f"{path}.{sorted(missing)[0]}", "required field missing")
    return raw


def _num(v, path: str, positive: bool = False, integer: bool = False, minimum=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, "expected a number")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(path, "expected an integer")
        v = int(v)
    else:
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(path, "must be finite")
    if positive and not v > 0:
        raise ConfigError(path, "must be positive")
    if minimum is not None and v < minimum:
        raise ConfigError(path, f"must be at least {minimum}")
    return v


def _str(v, path: str) -> str:
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return repr(v)
    if not isinstance(v, str):
        raise ConfigError(path, "expected an expression string")
    return v


def _list(v, path: str, length: int | None = None) -> list:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(path, "expected a list")
    if length is not None and len(v) != length:
        raise ConfigError(path, f"expected {length} entries, got {len(v)}")
    return list(v)


def _strs(v, path: str, length: int) -> tuple[str, ...]:
    return tuple(_str(e, f"{path}[{k}]") for k, e in enumerate(_list(v, path, length)))


def _matrix(v, path: str, d: int) -> tuple[tuple[str, ...], ...]:
    return tuple(_strs(row, f"{path}[{r}]", d) for r, row in enumerate(_list(v, path, d)))


def _box(v, path: str, length: int | None = None) -> tuple[tuple[float, float], ...]:
    out = []
    for j, pair in enumerate(_list(v, path, length)):
        lo, hi = _list(pair, f"{path}[{j}]", 2)
        lo, hi = _num(lo, f"{path}[{j}][0]"), _num(hi, f"{path}[{j}][1]")
        if not hi > lo:
            raise ConfigError(f"{path}[{j}]", "upper bound must exceed lower bound")
        out.append((lo, hi))
    return tuple(out)


def _vector(v, path: str, length: int | None = None) -> tuple[float, ...]:
    return tuple(_num(e, f"{path}[{k}]") for k, e in enumerate(_list(v, path, length)))


def _check_slots(path: str, build):
    """Run an expression-backed constructor, mapping its errors to a field path."""
    try:
        return build()
    except SlotError as exc:
        raise ConfigError(exc.path, str(exc)) from exc
    except exprlang.ExprError as exc:
        raise ConfigError(getattr(exc, "path", path), f"expression error: {exc}") from exc


def _parse_model(raw, path="model") -> ModelSection:
    r = _take(raw, path, {"n", "d", "T", "b", "sigma", "f", "g"}, {"n", "d", "T", "b", "sigma", "f", "g"})
    n = _num(r["n"], f"{path}.n", integer=True, minimum=1)
    d = _num(r["d"], f"{path}.d", integer=True, minimum=1)
    m = ModelSection(
        n=n,
        d=d,
        T=_num(r["T"], f"{path}.T", positive=True),
        b=_strs(r["b"], f"{path}.b", d),
        sigma=_matrix(r["sigma"], f"{path}.sigma", d),
        f=_strs(r["f"], f"{path}.f", n),
        g=_strs(r["g"], f"{path}.g", n),
    )
    _check_slots(path, lambda: build_model(m))
    return m


def _parse_game(raw, path="game") -> GameSection:
    r = _take(raw, path, {"d", "T", "sigma", "players"}, {"d", "T", "sigma", "players"})
    d = _num(r["d"], f"{path}.d", integer=True, minimum=1)
    players = []
    for i, p in enumerate(_list(r["players"], f"{path}.players")):
        pp = f"{path}.players[{i}]"
        q = _take(p, pp, {"actions", "box", "b", "r", "a_hat", "g"}, {"actions", "box", "b", "r", "a_hat", "g"})
        k = _num(q["actions"], f"{pp}.actions", integer=True, minimum=1)
        players.append(
            PlayerSection(
                actions=k,
                box=_box(q["box"], f"{pp}.box", k),
                b=_strs(q["b"], f"{pp}.b", d),
                r=_str(q["r"], f"{pp}.r"),
                a_hat=_strs(q["a_hat"], f"{pp}.a_hat", k),
                g=_str(q["g"], f"{pp}.g"),
            )
        )
    if not players:
        raise ConfigError(f"{path}.players", "at least one player is required")
    gs = GameSection(d=d, T=_num(r["T"], f"{path}.T", positive=True), sigma=_matrix(r["sigma"], f"{path}.sigma", d), players=tuple(players))
    _check_slots(path, lambda: build_game(gs))
    return gs


def _parse_structure(raw, n: int, path="structure") -> StructureSection:
    keys = {"C0", "CQ", "rho", "spanning_vectors", "kappa"}
    r = _take(raw, path, keys)
    kappa = _take(r.get("kappa", {}), f"{path}.kappa", {"coefficient", "exponent"})
    vecs = tuple(_vector(v, f"{path}.spanning_vectors[{m}]", n) for m, v in enumerate(_list(r.get("spanning_vectors", []), f"{path}.spanning_vectors")))
    if vecs and len(vecs) < n + 1:
        raise ConfigError(f"{path}.spanning_vectors", f"need at least {n + 1} vectors in dimension {n}")
    exponent = _num(kappa.get("exponent", 1.0), f"{path}.kappa.exponent", minimum=0.0)
    if exponent >= 2:
        raise ConfigError(f"{path}.kappa.exponent", "kappa must be sub-quadratic (exponent < 2)")
    return StructureSection(
        C0=_num(r.get("C0", 1.0), f"{path}.C0", positive=True),
        CQ=_num(r.get("CQ", 1.0), f"{path}.CQ", positive=True),
        rho=_num(r.get("rho", 0.0), f"{path}.rho", minimum=0.0),
        spanning_vectors=vecs,
        kappa_coefficient=_num(kappa.get("coefficient", 0.0), f"{path}.kappa.coefficient", minimum=0.0),
        kappa_exponent=exponent,
    )


def parse_config(raw: Any) -> RunConfig:
    """Validate a JSON-like dict and build a RunConfig (raises ConfigError)."""
    top = {"mode", "name", "model", "game", "structure", "grid", "schedule", "mc", "checks", "nash", "spanning", "output"}
    r = _take(raw, "config", top, {"mode"})
    mode = r["mode"]
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {list(MODES)}")
    name = r.get("name", "")
    if not isinstance(name, str):
        raise ConfigError("name", "expected a string")

    model = _parse_model(r["model"]) if "model" in r else None
    game = _parse_game(r["game"]) if "game" in r else None
    if model is not None and game is not None:
        raise ConfigError("game", "give either model or game, not both")
    if mode == "verify-nash" and game is None:
        raise ConfigError("game", "verify-nash needs a game")
    if model is None and game is None and (mode != "check-conditions" or "spanning" not in r):
        raise ConfigError("model", "a model or game is required")
    n = model.n if model is not None else (len(game.players) if game is not None else 0)
    d = model.d if model is not None else (game.d if game is not None else 0)

    structure = None
    if "structure" in r:
        if not n:
            raise ConfigError("structure", "structure needs a model or game")
        structure = _parse_structure(r["structure"], n)

    grid = None
    if "grid" in r:
        g = _take(r["grid"], "grid", {"box", "nodes_per_axis", "dt", "cfl_factor", "band"}, {"box", "nodes_per_axis"})
        dt = g.get("dt")
        grid = GridSection(
            box=_box(g["box"], "grid.box", d),
            nodes_per_axis=_num(g["nodes_per_axis"], "grid.nodes_per_axis", integer=True, minimum=8),
            dt=None if dt is None else _num(dt, "grid.dt", positive=True),
            cfl_factor=_num(g.get("cfl_factor", 0.9), "grid.cfl_factor", positive=True),
            band=_num(g.get("band", 0.15), "grid.band", minimum=0.0),
        )
        if grid.band >= 0.5:
            raise ConfigError("grid.band", "must be below 0.5")
        if grid.cfl_factor > 1:
            raise ConfigError("grid.cfl_factor", "must not exceed 1")
    elif mode != "check-conditions":
        raise ConfigError("grid", f"mode {mode} needs a grid")

    schedule = ScheduleSection()
    if "schedule" in r:
        s = _take(r["schedule"], "schedule", {"radii", "tol"})
        radii = _vector(s.get("radii", list(schedule.radii)), "schedule.radii")
        if not radii or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError("schedule.radii", "must be a nonempty increasing list of positive radii")
        schedule = ScheduleSection(radii=radii, tol=_num(s.get("tol", schedule.tol), "schedule.tol", positive=True))

    mc = None
    if "mc" in r:
        m = _take(r["mc"], "mc", {"P", "dt_sim", "seed", "t0", "x0"}, {"P", "dt_sim", "seed"})
        x0 = m.get("x0")
        mc = MCSection(
            P=_num(m["P"], "mc.P", integer=True, minimum=2),
            dt_sim=_num(m["dt_sim"], "mc.dt_sim", positive=True),
            seed=_num(m["seed"], "mc.seed", integer=True, minimum=0),
            t0=_num(m.get("t0", 0.0), "mc.t0", minimum=0.0),
            x0=None if x0 is None else _vector(x0, "mc.x0", d),
        )
    elif mode in ("simulate", "verify-nash", "full"):
        raise ConfigError("mc", f"mode {mode} needs an mc section with a seed")

    checks = ChecksSection()
    if "checks" in r:
        c = _take(r["checks"], "checks", {"x_box", "y_box", "z_range", "points_per_axis", "stress_count", "seed"})
        zr = c.get("z_range")
        checks = ChecksSection(
            x_box=_box(c["x_box"], "checks.x_box", d) if "x_box" in c else None,
            y_box=_box(c["y_box"], "checks.y_box", n) if "y_box" in c else None,
            z_range=checks.z_range if zr is None else _box([zr], "checks.z_range")[0],
            points_per_axis=_num(c.get("points_per_axis", 5), "checks.points_per_axis", integer=True, minimum=2),
            stress_count=_num(c.get("stress_count", 64), "checks.stress_count", integer=True, minimum=0),
            seed=_num(c.get("seed", 0), "checks.seed", integer=True, minimum=0),
        )

    nash = NashSection()
    if "nash" in r:
        q = _take(r["nash"], "nash", {"tol_pde", "tol_mc", "resolution"})
        nash = NashSection(
            tol_pde=_num(q.get("tol_pde", nash.tol_pde), "nash.tol_pde", positive=True),
            tol_mc=_num(q.get("tol_mc", nash.tol_mc), "nash.tol_mc", minimum=0.0),
            resolution=_num(q.get("resolution", nash.resolution), "nash.resolution", integer=True, minimum=3),
        )

    spanning = ()
    if "spanning" in r:
        sets = []
        for s, vs in enumerate(_list(r["spanning"], "spanning")):
            vecs = tuple(_vector(v, f"spanning[{s}][{m}]") for m, v in enumerate(_list(vs, f"spanning[{s}]")))
            if not vecs or len({len(v) for v in vecs}) != 1 or not len(vecs[0]):
                raise ConfigError(f"spanning[{s}]", "vectors must be nonempty and share one dimension")
            sets.append(vecs)
        spanning = tuple(sets)

    output = OutputSection()
    if "output" in r:
        o = _take(r["output"], "output", {"directory", "dump_fields", "dump_paths"})
        for key in ("dump_fields", "dump_paths"):
            if key in o and not isinstance(o[key], bool):
                raise ConfigError(f"output.{key}", "expected true or false")
        directory = o.get("directory", output.directory)
        if not isinstance(directory, str):
            raise ConfigError("output.directory", "expected a string")
        output = OutputSection(directory, o.get("dump_fields", False), o.get("dump_paths", False))

    return RunConfig(
        mode=mode,
        name=name,
        model=model,
        game=game,
        structure=structure,
        grid=grid,
        schedule=schedule,
        mc=mc,
        checks=checks,
        nash=nash,
        spanning=spanning,
        output=output,
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return parse_config(raw)


def bundled_configs() -> dict[str, Path]:
    return {p.stem: p for p in sorted(CONFIG_DIR.glob("*.json"))}


def build_model(m: ModelSection) -> CoefficientSet:
    return from_expressions(m.n, m.d, m.T, m.b, m.sigma, m.f, m.g)


def build_game(gs: GameSection) -> DiagonalGameSpec:
    players = [dataclasses.asdict(p) for p in gs.players]
    return game_from_expressions(gs.d, gs.T, gs.sigma, players)


# ---------------------------------------------------------------------------
# pipeline


def _json_safe(obj):
    """Map numpy scalars/arrays to plain Python and non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


@dataclass
class RunReport:
    config: RunConfig
    stages: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    certificate_requested: bool = False
    certified: bool | None = None
    version: str = __version__
    fld: Any = None
    bundle: Any = None

    @property
    def exit_code(self) -> int:
        if self.failures:
            return EXIT_NUMERIC
        if self.certificate_requested and not self.certified:
            return EXIT_CERTIFICATE
        return EXIT_OK

    def as_dict(self) -> dict:
        status = {EXIT_OK: "ok", EXIT_NUMERIC: "stage failed", EXIT_CERTIFICATE: "certificate failed"}[self.exit_code]
        return _json_safe(
            {
                "version": self.version,
                "config": self.config.echo(),
                "config_hash": self.config.content_hash(),
                "stages": self.stages,
                "failures": self.failures,
                "certified": self.certified,
                "status": status,
                "exit_code": self.exit_code,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _run_stage(report: RunReport, stage: str, fn):
    try:
        out = fn()
    except Exception as exc:  # recorded; the pipeline continues where it can
        report.failures.append({"stage": stage, "error": type(exc).__name__, "message": str(exc)})
        report.stages[stage] = {"status": "failed"}
        return None
    report.stages[stage] = out
    return out


def _coefficients(config: RunConfig) -> tuple[CoefficientSet, DiagonalGameSpec | None]:
    if config.game is not None:
        game = build_game(config.game)
        return assemble_game(game), game
    return build_model(config.model), None


def _start_point(config: RunConfig) -> np.ndarray:
    if config.mc is not None and config.mc.x0 is not None:
        return np.asarray(config.mc.x0, float)
    return np.array([(lo + hi) / 2 for lo, hi in config.grid.box])


def _stage_check(config: RunConfig, coeffs, game) -> dict:
    out: dict = {}
    if config.spanning:
        out["spanning"] = [positive_spanning(vs).as_dict() for vs in config.spanning]
    if coeffs is None:
        return out
    structure = config.structure or StructureSection()
    decl = structure.decl()
    if decl.spanning_vectors:
        out["structure_spanning"] = positive_spanning(decl.spanning_vectors).as_dict()
    c = config.checks
    x_box = c.x_box or (config.grid.spec().reporting_box() if config.grid else None)
    plan = SamplePlan.default(
        coeffs,
        x_box=x_box,
        y_box=c.y_box,
        z_range=c.z_range,
        points_per_axis=c.points_per_axis,
        stress_count=c.stress_count,
        seed=c.seed,
    )
    out["conditions"] = [r.as_dict() for r in check_structural(coeffs, decl, plan)]
    out["kappa_spot_check"] = decl.kappa_spot_check()
    if game is not None:
        out["a_hat_in_box"] = game.check_a_hat(box=x_box)
    return out


def _stage_solve(config: RunConfig, coeffs) -> tuple[dict, Any]:
    grid = config.grid.spec()
    fld = solve_backward(coeffs, grid, config.schedule.radii, config.schedule.tol)
    stride = max(1, (fld.levels - 2) // 200)
    out = {
        "field": fld.meta(),
        "max_z_norm": fld.max_z_norm,
        "residual": pde_residual(fld, coeffs, level_stride=stride),
        "residual_level_stride": stride,
    }
    x0 = _start_point(config)
    t0 = config.mc.t0 if config.mc is not None else 0.0
    u, v = sample_field(fld, t0, x0)
    out["value_at_start"] = {"t": t0, "x": x0, "u": u, "v": v}
    try:
        out["blowup"] = blowup_fit(fld)
    except ValueError as exc:
        out["blowup"] = {"skipped": str(exc)}
    return out, fld


def _stage_simulate(config: RunConfig, coeffs, fld, threads: int) -> tuple[dict, Any]:
    mc = config.mc
    x0 = _start_point(config)
    bundle = simulate_paths(coeffs, fld, mc.t0, x0, mc.dt_sim, mc.P, mc.seed, threads=threads)
    fine = simulate_paths(coeffs, fld, mc.t0, x0, mc.dt_sim / 2, mc.P, mc.seed, threads=threads)
    coarse_res = bsde_residual(bundle, fld, coeffs)
    fine_res = bsde_residual(fine, fld, coeffs)
    out = {
        "paths": mc.P,
        "exit_fraction": bundle.exit_fraction,
        "exit_warning": bundle.exit_warning,
        "bsde_residual": coarse_res,
        "bsde_residual_half_dt": fine_res,
        "rms_ratio": coarse_res["rms"] / fine_res["rms"] if fine_res["rms"] > 0 else None,
        "bmo": bmo_estimate(bundle),
    }
    driftless = simulate_paths(coeffs, fld, mc.t0, x0, mc.dt_sim, mc.P, mc.seed + 1, driftless=True, threads=threads)
    out["girsanov"] = girsanov_check(driftless, coeffs, reference=bundle)
    decl = (config.structure or StructureSection()).decl()
    if decl.spanning_vectors:
        out["submartingale"] = submartingale_check(bundle, decl)
    return out, bundle


def _stage_nash(config: RunConfig, game, fld, threads: int) -> tuple[dict, bool]:
    mc = config.mc
    cert, details = certify_nash(
        game,
        fld,
        tol_pde=config.nash.tol_pde,
        tol_mc=config.nash.tol_mc,
        t0=mc.t0,
        x0=_start_point(config),
        P=mc.P,
        seed=mc.seed,
        dt_sim=mc.dt_sim,
        threads=threads,
        resolution=config.nash.resolution,
    )
    return {"certificate": cert.as_dict(), "details": details}, cert.certified


def run_config(config: RunConfig, threads: int = 1) -> RunReport:
    """Execute the mode's pipeline; stage errors are recorded, not raised."""
    report = RunReport(config=config)
    mode = config.mode
    built = _run_stage(report, "build", lambda: _coefficients(config)) if (config.model or config.game) else (None, None)
    if built is None:
        return report
    report.stages.pop("build", None)
    coeffs, game = built

    if mode in ("check-conditions", "full"):
        _run_stage(report, "check", lambda: _stage_check(config, coeffs, game))
    if mode == "check-conditions":
        return report

    solved = _run_stage(report, "solve", lambda: _stage_solve(config, coeffs))
    if solved is None:
        return report
    report.stages["solve"], report.fld = solved

    if mode in ("simulate", "full"):
        sim = _run_stage(report, "simulate", lambda: _stage_simulate(config, coeffs, report.fld, threads))
        if sim is not None:
            report.stages["simulate"], report.bundle = sim

    if game is not None and mode in ("verify-nash", "full"):
        report.certificate_requested = True
        res = _run_stage(report, "nash", lambda: _stage_nash(config, game, report.fld, threads))
        if res is not None:
            report.stages["nash"], report.certified = res
        else:
            report.certified = False
    return report


def write_report(report: RunReport, directory: str | Path) -> list[Path]:
    """Write report.json plus the requested dumps; returns the files written."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(report.to_json())
    written.append(path)
    if report.config.output.dump_fields and report.fld is not None:
        written.append(write_field_csv(report.fld, out / "fields.csv"))
    if report.config.output.dump_paths and report.bundle is not None:
        written.append(write_paths_csv(report.bundle, out / "paths.csv"))
    return written


# ---------------------------------------------------------------------------
# command line


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("FBSDE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfbsde", description="Solve, simulate and certify quadratic FBSDE models and games.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run the {mode} pipeline")
        p.add_argument("--config", required=True, help="config JSON path, or the name of a bundled config")
        p.add_argument("--out", help="output directory (default: config output.directory)")
        p.add_argument("--seed", type=int, help="override mc.seed")
        p.add_argument("--threads", type=int, help="Monte Carlo worker threads (env FBSDE_THREADS)")
        p.add_argument("--dump-fields", action="store_true", help="also write fields.csv")
        p.add_argument("--dump-paths", action="store_true", help="also write paths.csv")
    return parser


def _resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = bundled_configs()
    if name in bundled:
        return bundled[name]
    raise ConfigError("--config", f"no such file or bundled config: {name}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(_resolve_config_path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config", "expected an object")
        raw["mode"] = args.mode
        if args.seed is not None:
            if "mc" not in raw:
                raise ConfigError("--seed", "config has no mc section")
            raw["mc"]["seed"] = args.seed
        out_raw = raw.setdefault("output", {})
        if args.out:
            out_raw["directory"] = args.out
        if args.dump_fields:
            out_raw["dump_fields"] = True
        if args.dump_paths:
            out_raw["dump_paths"] = True
        config = parse_config(raw)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    report = run_config(config, threads=_threads(args.threads))
    try:
        files = write_report(report, config.output.directory)
    except OSError as exc:
        print(f"could not write report: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in report.failures:
        print(f"stage {f['stage']} failed: {f['error']}: {f['message']}", file=sys.stderr)
    if report.certificate_requested:
        print(f"nash certificate: {'certified' if report.certified else 'NOT certified'}")
    print(f"wrote {', '.join(str(p) for p in files)}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
