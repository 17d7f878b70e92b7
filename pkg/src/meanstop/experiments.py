"""Config-driven experiment runners producing tables, pass/fail checks, CSV and SVG files.

A config is an INI file. ``[experiment]`` holds ``kind``, ``seed`` and
``out``; ``[model]`` holds ``name`` plus parameter overrides;
``[discretization]`` and ``[regularization]`` hold the mesh and the
``theta``/``delta`` lists; a section named after the kind holds its options.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .envelopes import continuous_envelope, discrete_envelope, subsets
from .hierarchy import (
    CFLError,
    extract_policy,
    hierarchy_violations,
    holder_exponent,
    query_value,
    regularity_report,
    solve_hierarchy,
)
from .meanfield import (
    ControlField,
    MFMesh,
    adjoint_gradient,
    check_dpp,
    evaluate_J_theta_delta,
    ladder_differences,
    lipschitz_ladder,
    lipschitz_quotients,
    psi_monotonicity_check,
    regularization_ladder,
    solve_fp,
    solve_mfc,
)
from .models import DEFAULTS, make_model, validate
from .montecarlo import NullPolicy, SimConfig, simulate
from .phi import (
    h1_inner,
    pairing,
    phi_energy_inequality_check,
    phi_gradient_check,
    phi_lipschitz_check,
    phi_solve,
)
from .plotting import FigureSpec, save_svg
from .reference import single_particle_reference
from .torus import EmpiricalState, GridMeasure, TorusGrid, approximate_measure, random_measure

KINDS = ("validate-model", "envelope", "nparticle", "montecarlo", "meanfield", "ladder", "converge", "lipschitz", "phi")
DETERMINISTIC_KINDS = ("nparticle",)


class ConfigError(ValueError):
    """Malformed or incomplete experiment config."""


# ---------------------------------------------------------------- config


def _split(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


@dataclass
class ExperimentConfig:
    kind: str
    model: str
    model_params: dict[str, float]
    n_cells: int
    n_steps: int | None
    k_max: int
    big_n: list[int]
    thetas: list[float]
    deltas: list[float]
    seed: int | None
    out: Path | None
    t0: float = 0.0
    options: dict[str, str] = field(default_factory=dict)
    name: str = ""
    echo: str = ""

    def opt(self, key: str, default=None) -> str | None:
        return self.options.get(key, default)

    def opt_int(self, key: str, default: int) -> int:
        return _as(int, self.options.get(key), default, key)

    def opt_float(self, key: str, default: float) -> float:
        return _as(float, self.options.get(key), default, key)

    def opt_bool(self, key: str, default: bool) -> bool:
        raw = self.options.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"option {key!r} must be a boolean, got {raw!r}")

    def opt_floats(self, key: str, default: list[float]) -> list[float]:
        raw = self.options.get(key)
        if raw is None:
            return list(default)
        try:
            vals = [float(v) for v in _split(raw)]
        except ValueError as exc:
            raise ConfigError(f"option {key!r}: {exc}") from None
        if not vals:
            raise ConfigError(f"option {key!r} is an empty list")
        return vals

    def opt_list(self, key: str, default: list[str]) -> list[str]:
        raw = self.options.get(key)
        return list(default) if raw is None else _split(raw)

    @property
    def seed_value(self) -> int:
        return 0 if self.seed is None else self.seed

    def build_model(self):
        return make_model(self.model, **self.model_params)


def _as(kind, raw, default, key):
    if raw is None:
        return default
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"option {key!r} must be {kind.__name__}, got {raw!r}") from None


def parse_config(text: str, name: str = "") -> ExperimentConfig:
    """Parse INI text; every error becomes ``ConfigError``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    if not cp.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = cp["experiment"]
    kind = exp.get("kind", "").strip()
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")

    seed = exp.get("seed")
    if seed is None and kind not in DETERMINISTIC_KINDS:
        raise ConfigError(f"kind {kind!r} is stochastic and needs a seed")
    seed = _as(int, seed, None, "seed")
    out = exp.get("out")

    model_sec = dict(cp["model"]) if cp.has_section("model") else {}
    model_name = model_sec.pop("name", "congestion")
    if model_name not in DEFAULTS:
        raise ConfigError(f"unknown model {model_name!r}")
    params = {}
    for key, raw in model_sec.items():
        if key not in DEFAULTS[model_name]:
            raise ConfigError(f"unknown parameter {key!r} for model {model_name!r}")
        params[key] = _as(float, raw, None, key)

    disc = cp["discretization"] if cp.has_section("discretization") else {}
    n_cells = _as(int, disc.get("n_cells"), 32, "n_cells")
    steps_raw = disc.get("n_steps", "auto")
    n_steps = None if steps_raw == "auto" else _as(int, steps_raw, None, "n_steps")
    k_max = _as(int, disc.get("k_max"), 1, "k_max")
    t0 = _as(float, disc.get("t0"), 0.0, "t0")
    try:
        big_n = [int(v) for v in _split(disc.get("big_n", "2"))]
    except ValueError as exc:
        raise ConfigError(f"big_n: {exc}") from None

    reg = cp["regularization"] if cp.has_section("regularization") else {}
    try:
        thetas = [float(v) for v in _split(reg.get("theta", "0.05"))]
        deltas = [float(v) for v in _split(reg.get("delta", "0.01"))]
    except ValueError as exc:
        raise ConfigError(f"regularization: {exc}") from None

    for label, lst in (("big_n", big_n), ("theta", thetas), ("delta", deltas)):
        if not lst:
            raise ConfigError(f"{label} list is empty")
    if n_cells < 3:
        raise ConfigError("n_cells must be >= 3")
    if n_steps is not None and n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if any(n < 1 for n in big_n) or big_n != sorted(big_n):
        raise ConfigError("big_n must be positive and ascending")
    if not 0 <= k_max <= 3:
        raise ConfigError("k_max must be in 0..3")
    if any(t <= 0 for t in thetas) or any(d <= 0 for d in deltas):
        raise ConfigError("theta and delta values must be positive")

    options = dict(cp[kind]) if cp.has_section(kind) else {}
    buf = io.StringIO()
    cp.write(buf)
    return ExperimentConfig(
        kind=kind,
        model=model_name,
        model_params=params,
        n_cells=n_cells,
        n_steps=n_steps,
        k_max=k_max,
        big_n=big_n,
        thetas=thetas,
        deltas=deltas,
        seed=seed,
        out=Path(out) if out else None,
        t0=t0,
        options=options,
        name=name or kind,
        echo=buf.getvalue().strip() + "\n",
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, name=path.stem)


def shipped_configs() -> list[tuple[str, str]]:
    """``(name, text)`` of every bundled config, in suite order (model validation first)."""
    root = resources.files("meanstop") / "configs"
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".ini"))
    return [(n[:-4], (root / n).read_text()) for n in names]


def shipped_config(name: str) -> ExperimentConfig:
    for n, text in shipped_configs():
        if n == name:
            return parse_config(text, name=n)
    raise ConfigError(f"no shipped config named {name!r}")


# ---------------------------------------------------------------- report


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *row) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"table {self.name}: expected {len(self.columns)} cells, got {len(row)}")
        self.rows.append(tuple(row))

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue()


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


@dataclass
class RunReport:
    kind: str
    name: str
    config_echo: str
    tables: list[Table] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    figures: list[FigureSpec] = field(default_factory=list)
    artifacts: list[tuple[str, Callable[[Path], object]]] = field(default_factory=list, repr=False)
    wall_clock: float = 0.0
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed: bool, detail: str = "") -> Check:
        c = Check(name, bool(passed), detail)
        self.checks.append(c)
        return c

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def get_check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def text(self) -> str:
        lines = [
            f"# meanstop {self.version} {self.kind} ({self.name})",
            f"# wall-clock {self.wall_clock:.2f} s",
            "[config]",
            self.config_echo.rstrip(),
            "[checks]",
        ]
        lines += [c.line() for c in self.checks]
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, out) -> list[Path]:
        """Write ``<table>.csv``, ``<kind>_<key>.svg`` and ``report.txt`` into ``out``."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for t in self.tables:
            p = out / f"{t.name}.csv"
            p.write_text(t.to_csv())
            written.append(p)
        for fig in self.figures:
            written.append(save_svg(fig, out / f"{self.kind}_{fig.key}.svg"))
        for sub, saver in self.artifacts:
            saver(out / sub)
            written.append(out / sub)
        p = out / "report.txt"
        p.write_text(self.text())
        written.append(p)
        return written


# ---------------------------------------------------------------- helpers


def default_workers() -> int:
    raw = os.environ.get("MEANSTOP_WORKERS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def _pool_map(fn, items: list, workers: int) -> list:
    """Ordered map, through a bounded process pool when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def solve_auto(model, big_n: int, k_max: int, n_cells: int, n_steps: int | None, **kw):
    """Hierarchy solve; ``n_steps`` is raised to the CFL minimum when too small or ``None``."""
    try:
        return solve_hierarchy(model, big_n, k_max, n_cells, n_steps or 1, **kw)
    except CFLError as exc:
        return solve_hierarchy(model, big_n, k_max, n_cells, exc.suggested_steps, **kw)


def _smooth_density(grid: TorusGrid, rng: np.random.Generator, modes: int = 4, scale: float = 1.0) -> np.ndarray:
    x = grid.nodes
    out = scale * rng.normal() * np.ones_like(x)
    for k in range(1, modes + 1):
        out += scale * rng.normal() / k * np.cos(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    return out


def _initial_measure(cfg: ExperimentConfig, grid: TorusGrid, rng: np.random.Generator) -> GridMeasure:
    kind = cfg.opt("initial", "uniform")
    mass = cfg.opt_float("mass", 0.5)
    if kind == "uniform":
        return GridMeasure.uniform(grid, mass)
    if kind == "cosine":
        dens = 1.0 + 0.5 * np.cos(2 * np.pi * grid.nodes)
        return GridMeasure(grid, mass * dens / dens.sum())
    if kind == "random":
        return random_measure(grid, rng, total=mass)
    raise ConfigError(f"unknown initial measure {kind!r}")


def _node_measure(grid: TorusGrid, idx, big_n: int) -> GridMeasure:
    mass = np.zeros(grid.n_cells)
    np.add.at(mass, np.asarray(idx, dtype=int), 1.0 / big_n)
    return GridMeasure(grid, mass)


def _decreasing(vals, strict: bool = True) -> bool:
    return all((b < a) if strict else (b <= a) for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- runners


def run_validate_model(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    rep = _new(cfg)
    res = validate(cfg.build_model(), samples=cfg.opt_int("samples", 200), seed=cfg.seed_value)
    flags = Table("validate_flags", ["flag", "passed"])
    for k in sorted(res.flags):
        flags.add(k, res.flags[k])
        rep.check(f"assumption:{k}", res.flags[k])
    consts = Table("validate_constants", ["name", "value"])
    for k in sorted(res.constants):
        consts.add(k, res.constants[k])
    rep.tables += [flags, consts]
    return rep


def run_envelope(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Removal inequality for both envelopes, the per-cell linear-G rule and convergence in ``N``."""
    rep = _new(cfg)
    model = cfg.build_model()
    rng = np.random.default_rng(cfg.seed_value)
    grid = TorusGrid(cfg.n_cells)
    n_pairs = cfg.opt_int("pairs", 200)
    tol = cfg.opt_float("tol", 1e-10)
    N = cfg.big_n[-1]

    worst_d = -math.inf
    for _ in range(n_pairs):
        k = int(rng.integers(1, min(cfg.opt_int("max_k", 4), N) + 1))
        st = EmpiricalState(N, rng.random(k))
        s = subsets(k)[int(rng.integers(1, 2**k))]
        full = discrete_envelope(model, st).value
        rest = discrete_envelope(model, st.without(s)).value if len(s) < k else model.terminal_zero()
        pre = model.psi(st.points, st) / N
        worst_d = max(worst_d, full - rest - float(np.sum(pre[list(s)])))
    rep.check("discrete_removal_inequality", worst_d <= tol, f"max violation {worst_d:.3e}")

    worst_c = -math.inf
    for i in range(n_pairs):
        m = random_measure(grid, rng, total=float(rng.uniform(0.1, 1.0)))
        n = GridMeasure(grid, m.mass * rng.random(grid.n_cells))
        gm = continuous_envelope(model, m, seed=i).value
        gn = continuous_envelope(model, n, seed=i).value
        worst_c = max(worst_c, gm - gn - float(np.dot(model.psi(grid.nodes, m), m.mass - n.mass)))
    rep.check("continuous_removal_inequality", worst_c <= tol, f"max violation {worst_c:.3e}")

    if model.terminal_is_affine:
        worst_f = 0.0
        for _ in range(min(n_pairs, 50)):
            m = random_measure(grid, rng, total=float(rng.uniform(0.1, 1.0)))
            x = grid.nodes
            per_cell = np.minimum(model.terminal_density(x), model.psi(x, m))
            closed = model.terminal_offset + float(np.dot(per_cell, m.mass))
            worst_f = max(worst_f, abs(continuous_envelope(model, m).value - closed))
        rep.check("linear_closed_form", worst_f <= tol, f"max deviation {worst_f:.3e}")

    # convergence along empirical approximations of one fixed measure
    m = _initial_measure(cfg, grid, rng)
    g_m = continuous_envelope(model, m).value
    conv = Table("envelope_convergence", ["N", "K", "discrete", "continuous", "gap", "identity_gap"])
    gaps = []
    for big_n in cfg.big_n:
        st = approximate_measure(m, big_n)
        gd = discrete_envelope(model, st).value
        gap = abs(gd - g_m)
        # snapped to nodes, the state is also a grid measure; for linear G both envelopes use one per-atom rule
        snapped = EmpiricalState(big_n, grid.nodes[grid.nearest(st.positions)])
        ident = (
            abs(discrete_envelope(model, snapped).value - continuous_envelope(model, snapped.as_measure(grid)).value)
            if model.terminal_is_affine
            else float("nan")
        )
        conv.add(big_n, st.k, gd, g_m, gap, ident)
        gaps.append(gap)
    rep.tables.append(conv)
    if model.terminal_is_affine:
        worst_i = max(conv.column("identity_gap"))
        rep.check("empirical_identity", worst_i <= tol, f"max {worst_i:.3e}")
    rep.check("convergence_strictly_decreasing", _decreasing(gaps), "gaps " + ", ".join(f"{g:.4g}" for g in gaps))
    rep.figures.append(FigureSpec("convergence", "envelope gap", "N", "gap", {"gap": (cfg.big_n, gaps)}, logx=True, logy=True))
    return rep


def run_nparticle(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Invariants of solved hierarchies; with ``mode = reference`` a refinement study against Cole-Hopf."""
    rep = _new(cfg)
    model = cfg.build_model()
    if cfg.opt("mode", "invariants") == "reference":
        return _nparticle_reference(cfg, model, rep)
    tol = cfg.opt_float("tol", 1e-9)
    tab = Table("nparticle_invariants", ["N", "n_steps", "level0", "terminal", "psi_monotone", "obstacle"])
    sym = Table("nparticle_symmetry", ["N", "K", "max_asymmetry"])
    for N in cfg.big_n:
        H = solve_auto(model, N, min(cfg.k_max, N), cfg.n_cells, cfg.n_steps)
        v = hierarchy_violations(H, model)
        tab.add(N, H.n_steps, v["level0"], v["terminal"], v["psi_monotone"], v["obstacle"])
        rep.check(f"N={N}:psi_monotone", v["psi_monotone"] <= tol, f"{v['psi_monotone']:.3e}")
        rep.check(f"N={N}:obstacle", v["obstacle"] <= tol, f"{v['obstacle']:.3e}")
        rep.check(f"N={N}:terminal_envelope", v["terminal"] <= 1e-12, f"{v['terminal']:.3e}")
        rep.check(f"N={N}:level0_constant", v["level0"] <= 1e-12)
        for k in range(2, H.k_max + 1):
            t = H.tables[k]
            worst = max(float(np.max(np.abs(t - np.swapaxes(t, 1, 1 + i)))) for i in range(1, k))
            sym.add(N, k, worst)
            rep.check(f"N={N},K={k}:exchangeable", worst <= 1e-12, f"{worst:.3e}")
    rep.tables += [tab, sym]
    return rep


def _nparticle_reference(cfg: ExperimentConfig, model, rep: RunReport) -> RunReport:
    N = cfg.big_n[0]
    ref = single_particle_reference(model, mass=1.0 / N)
    meshes = []
    for item in cfg.opt_list("meshes", ["32:1600", "64:6400"]):
        try:
            n, s = (int(v) for v in item.split(":"))
        except ValueError:
            raise ConfigError(f"mesh entry {item!r} must be n_cells:n_steps") from None
        meshes.append((n, s))
    probe_times = cfg.opt_floats("probe_times", [0.0, 0.25, 0.5, 0.75])
    tab = Table("nparticle_reference", ["n_cells", "n_steps", "h", "dt", "max_error", "tolerance"])
    errs = []
    for n, s in meshes:
        H = solve_hierarchy(model, N, 1, n, s)
        x = H.grid.nodes
        err = 0.0
        for t in probe_times:
            j = int(round(t * model.horizon / H.dt))
            err = max(err, float(np.max(np.abs(H.tables[1][j] - ref.value(H.times[j], x) / N))))
        tol = 5 * (H.h**2 + H.dt)
        tab.add(n, s, H.h, H.dt, err, tol)
        rep.check(f"reference n={n},steps={s}", err <= tol, f"error {err:.3e} vs {tol:.3e}")
        errs.append(err)
    lo, hi = cfg.opt_floats("ratio_band", [2.5, 6.0])
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    for (n, _), r in zip(meshes[1:], ratios):
        rep.check(f"refinement_ratio to n={n}", lo <= r <= hi, f"ratio {r:.3f}")
    rep.tables.append(tab)
    hs = [1.0 / n for n, _ in meshes]
    rep.figures.append(FigureSpec("reference", "hierarchy vs Cole-Hopf", "h", "max error", {"error": (hs, errs)}, logx=True, logy=True))
    return rep


def run_montecarlo(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Monte Carlo cost of the extracted policy against the PDE value, and the heat-flow closed form."""
    rep = _new(cfg)
    model = cfg.build_model()
    seed = cfg.seed_value
    positions = cfg.opt_floats("positions", [0.1, 0.6])
    N = cfg.big_n[0]
    n_paths = cfg.opt_int("n_paths", 20000)
    sigmas = cfg.opt_float("sigmas", 3.0)
    tab = Table("montecarlo", ["experiment", "N", "K", "t0", "mean", "stderr", "n_paths", "seed", "reference"])

    H = solve_auto(model, N, len(positions), cfg.n_cells, cfg.n_steps)
    contact = cfg.opt("contact_tol")
    policy = extract_policy(H, model, None if contact is None else float(contact))
    state = EmpiricalState(N, positions)
    dt_sim = cfg.opt_float("dt_sim", H.dt)
    est = simulate(model, policy, SimConfig(n_paths, dt_sim, seed, cfg.t0, state))
    v = query_value(H, cfg.t0, state)
    tab.add("policy", N, state.k, cfg.t0, est.mean, est.std_error, n_paths, seed, v)
    z = (est.mean - v) / est.std_error if est.std_error > 0 else (0.0 if est.mean == v else math.inf)
    rep.check("policy_vs_pde", abs(z) <= sigmas, f"mean {est.mean:.6f} pde {v:.6f} z {z:+.2f}")
    for w in est.warnings:
        rep.check(f"warning:{w}", False)

    if cfg.opt_bool("heat_flow", True):
        heat = make_model("quadratic", g1=cfg.opt_float("heat_g1", 1.0))
        tau = cfg.opt_float("heat_tau", 0.05)
        t0 = heat.horizon - tau
        hpos = cfg.opt_floats("heat_positions", [0.1, 0.3])
        hstate = EmpiricalState(N, hpos)
        est_h = simulate(heat, NullPolicy(), SimConfig(n_paths, cfg.opt_float("heat_dt", tau / 50), seed + 1, t0, hstate))
        g1 = heat.params["g1"]
        closed = float(np.sum(g1 * np.cos(2 * np.pi * np.asarray(hpos)) * np.exp(-4 * np.pi**2 * tau)) / N)
        tab.add("heat_flow", N, hstate.k, t0, est_h.mean, est_h.std_error, n_paths, seed + 1, closed)
        zh = (est_h.mean - closed) / est_h.std_error
        rep.check("heat_flow_closed_form", abs(zh) <= sigmas, f"mean {est_h.mean:.6f} exact {closed:.6f} z {zh:+.2f}")
    rep.tables.append(tab)
    return rep


def run_meanfield(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Mass ledger, adjoint gradient, dynamic programming and (optionally) Psi-monotonicity."""
    rep = _new(cfg)
    model = cfg.build_model()
    rng = np.random.default_rng(cfg.seed_value)
    mesh = MFMesh(cfg.n_cells, cfg.n_steps or 10 * cfg.n_cells, cfg.t0, model.horizon)
    grid = mesh.grid
    theta, delta = cfg.thetas[0], cfg.deltas[0]
    m0 = _initial_measure(cfg, grid, rng)
    shape = (mesh.n_steps, mesh.n_cells)

    ctrl = ControlField(rng.uniform(-0.5, 0.5, shape), rng.uniform(0.0, 1.0, shape))
    path = solve_fp(model, ctrl, m0, mesh)
    ledger = float(np.max(np.abs(path.totals()[1:] + np.cumsum(path.killed) - m0.total)))
    rep.check("mass_ledger", ledger <= 1e-10, f"{ledger:.3e}")

    grad = adjoint_gradient(model, m0, ctrl, theta, delta, mesh)
    worst = 0.0
    step = cfg.opt_float("fd_step", 1e-6)
    for _ in range(cfg.opt_int("directions", 5)):
        da, db = rng.normal(size=shape), rng.normal(size=shape)
        fp = evaluate_J_theta_delta(model, m0, ControlField(ctrl.alpha + step * da, ctrl.beta + step * db), theta, delta, mesh)
        fm = evaluate_J_theta_delta(model, m0, ControlField(ctrl.alpha - step * da, ctrl.beta - step * db), theta, delta, mesh)
        fd = (fp - fm) / (2 * step)
        ad = float(np.sum(grad.alpha * da) + np.sum(grad.beta * db))
        worst = max(worst, abs(fd - ad) / max(abs(fd), 1e-12))
    rep.check("adjoint_gradient", worst <= 1e-4, f"relative error {worst:.3e}")

    sol = solve_mfc(model, m0, theta, delta, mesh)
    t1 = cfg.opt_int("dpp_index", mesh.n_steps // 2)
    dpp = check_dpp(model, m0, t1, theta, delta, mesh)
    dpp_tol = 5 * (mesh.h**2 + mesh.dt + 1e-6)
    rep.check("dynamic_programming", dpp <= dpp_tol, f"residual {dpp:.3e} vs {dpp_tol:.3e}")

    summary = Table("meanfield_summary", ["quantity", "value"])
    for key, val in (
        ("value", sol.value),
        ("iterations", sol.iterations),
        ("residual", sol.residual),
        ("converged", sol.converged),
        ("ledger_error", ledger),
        ("gradient_error", worst),
        ("dpp_residual", dpp),
    ):
        summary.add(key, val)
    rep.check("solver_converged", sol.converged, f"{sol.iterations} iterations, residual {sol.residual:.2e}")

    n_psi = cfg.opt_int("psi_pairs", 0)
    if n_psi:
        pmesh = MFMesh(cfg.opt_int("psi_n_cells", 64), cfg.opt_int("psi_n_steps", 1000), cfg.t0, model.horizon)
        pairs = []
        for _ in range(n_psi):
            m = random_measure(pmesh.grid, rng, total=float(rng.uniform(0.3, 0.9)))
            pairs.append((m, GridMeasure(pmesh.grid, m.mass * rng.random(pmesh.n_cells))))
        viol = _pool_map(_PsiPair(cfg.model, cfg.model_params, theta, delta, pmesh), pairs, workers)
        ptab = Table("meanfield_psi_monotone", ["pair", "violation"])
        for i, v in enumerate(viol):
            ptab.add(i, v)
        rep.tables.append(ptab)
        summary.add("psi_max_violation", max(viol))
        rep.check("psi_monotone", max(viol) <= 1e-3, f"max violation {max(viol):.3e} over {n_psi} pairs")

    rep.tables.append(summary)
    times = list(mesh.times)
    rep.figures.append(FigureSpec("mass", "surviving mass", "t", "mass", {"m(t)": (times, list(sol.path.totals()))}))
    if sol.history:
        its = list(range(1, len(sol.history) + 1))
        rep.figures.append(FigureSpec("iterations", "objective by iteration", "iteration", "J", {"J": (its, list(sol.history))}))
    rep.artifacts.append(("meanfield_solution", sol.save))
    return rep


@dataclass(frozen=True)
class _PsiPair:
    model_name: str
    params: dict
    theta: float
    delta: float
    mesh: MFMesh

    def __call__(self, pair) -> float:
        model = make_model(self.model_name, **self.params)
        return psi_monotonicity_check(model, [pair], self.theta, self.delta, self.mesh)


def run_ladder(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """The ``(theta, delta)`` ladder: Cauchy differences, penalty positivity, Lipschitz stability."""
    rep = _new(cfg)
    model = cfg.build_model()
    rng = np.random.default_rng(cfg.seed_value)
    mesh = MFMesh(cfg.n_cells, cfg.n_steps or 10 * cfg.n_cells, cfg.t0, model.horizon)
    checks = cfg.opt_list("checks", ["cauchy", "positivity", "lipschitz"])
    deltas = sorted(cfg.deltas, reverse=True)

    if "cauchy" in checks or "positivity" in checks:
        m0 = _initial_measure(cfg, mesh.grid, rng)
        cells = regularization_ladder(model, m0, cfg.thetas, deltas, mesh)
        tab = Table("ladder", ["theta", "delta", "value", "iterations", "residual"])
        pos = Table("ladder_positivity", ["theta", "delta", "value", "undelta_value", "gap"])
        for c in cells:
            tab.add(c.theta, c.delta, c.value, c.iterations, c.residual)
            pos.add(c.theta, c.delta, c.value, c.undelta_value, c.value - c.undelta_value)
        rep.tables += [tab, pos]
        diffs = Table("ladder_cauchy", ["theta", "delta", "difference"])
        series = {}
        for theta in cfg.thetas:
            row = [c for c in cells if c.theta == theta]
            d = [abs(a.value - b.value) for a, b in zip(row, row[1:])]
            for c, v in zip(row[1:], d):
                diffs.add(theta, c.delta, v)
            series[f"theta={theta:g}"] = ([c.delta for c in row[1:]], d)
            if "cauchy" in checks:
                rep.check(f"cauchy_decreasing theta={theta:g}", _decreasing(d), ", ".join(f"{v:.4g}" for v in d))
        rep.tables.append(diffs)
        rep.figures.append(FigureSpec("cauchy", "delta-Cauchy differences", "delta", "|U(delta) - U(delta/2)|", series, logx=True, logy=True))
        if "positivity" in checks:
            gap = min(c.value - c.undelta_value for c in cells)
            rep.check("penalty_positivity", gap >= -1e-12, f"min gap {gap:.3e}")
        for c in cells:
            if not c.converged:
                rep.check(f"converged theta={c.theta:g} delta={c.delta:g}", False, f"residual {c.residual:.2e}")
        _ = ladder_differences(cells)

    if "lipschitz" in checks:
        theta = cfg.thetas[0]
        pairs = []
        for _ in range(cfg.opt_int("lipschitz_pairs", 6)):
            m = random_measure(mesh.grid, rng, total=float(rng.uniform(0.3, 0.9)))
            pairs.append((m, random_measure(mesh.grid, rng, total=float(rng.uniform(0.3, 0.9)))))
        q = lipschitz_ladder(model, pairs, theta, deltas, mesh)
        consts = q.max(axis=1)
        lt = Table("ladder_lipschitz", ["theta", "delta", "constant"])
        for d, c in zip(deltas, consts):
            lt.add(theta, d, float(c))
        rep.tables.append(lt)
        factor = float(consts.max() / consts.min())
        rep.check("lipschitz_stable", factor <= cfg.opt_float("max_factor", 1.2), f"factor {factor:.4f}")
        rep.figures.append(FigureSpec("lipschitz", "Lipschitz quotient by delta", "delta", "max quotient", {"C": (deltas, list(consts))}, logx=True))
    return rep


@dataclass(frozen=True)
class _ConvergeCell:
    """One ``N`` of the convergence study; picklable for the worker pool."""

    cfg: ExperimentConfig

    def __call__(self, big_n: int) -> list[tuple]:
        cfg = self.cfg
        model = cfg.build_model()
        rng = np.random.default_rng([cfg.seed_value, big_n])
        grid = TorusGrid(cfg.n_cells)
        mesh = MFMesh(cfg.n_cells, cfg.opt_int("mf_steps", 10 * cfg.n_cells), cfg.t0, model.horizon)
        k_max = min(big_n, cfg.k_max)
        ks = [big_n] if cfg.opt("mode", "coupled") == "diagonal" else list(range(1, k_max + 1))
        rows = []
        try:
            H = solve_auto(model, big_n, max(ks), cfg.n_cells, cfg.n_steps)
        except Exception as exc:  # noqa: BLE001 - a failed cell is reported, not raised
            return [(big_n, k, math.nan, math.nan, math.nan, f"failed: {type(exc).__name__}") for k in ks]
        j0 = int(round((cfg.t0) / H.dt))
        for k in ks:
            err = cauchy = 0.0
            status = "ok"
            try:
                for _ in range(cfg.opt_int("probes", 3)):
                    idx = rng.integers(0, cfg.n_cells, size=k)
                    v = float(H.tables[k][(j0,) + tuple(idx)])
                    cells = regularization_ladder(model, _node_measure(grid, idx, big_n), cfg.thetas, sorted(cfg.deltas, reverse=True), mesh)
                    u = cells[-1].value
                    cauchy = max(cauchy, abs(cells[-1].value - cells[-2].value) if len(cells) > 1 else 0.0)
                    err = max(err, abs(v - u))
            except Exception as exc:  # noqa: BLE001
                err, status = math.nan, f"failed: {type(exc).__name__}"
            rows.append((big_n, k, H.dt, err, cauchy, status))
        return rows


def run_convergence(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """``e(N, K) = max |V^{N,K}(t0, x) - U_est(t0, m_x)|`` over node probes, for every ``N`` and ``K``."""
    rep = _new(cfg)
    if cfg.k_max > 3:
        raise ConfigError("converge needs k_max <= 3")
    rows = [r for cell in _pool_map(_ConvergeCell(cfg), list(cfg.big_n), workers) for r in cell]
    rows.sort(key=lambda r: (r[0], r[1]))
    tab = Table("converge", ["N", "K", "hier_dt", "error", "ladder_cauchy", "status"])
    for r in rows:
        tab.add(*r)
    rep.tables.append(tab)
    for r in rows:
        if r[5] != "ok":
            rep.check(f"cell N={r[0]},K={r[1]}", False, r[5])

    model = cfg.build_model()
    h = 1.0 / cfg.n_cells
    test = cfg.opt("test", "trend")
    if test == "tolerance":
        mf_dt = (model.horizon - cfg.t0) / cfg.opt_int("mf_steps", 10 * cfg.n_cells)
        # hierarchy steps vary with N through the CFL bound; the coarsest one sets the tolerance
        hier_dt = max((r[2] for r in rows if r[5] == "ok"), default=h)
        tol = 5 * (h**2 + hier_dt) + 2 * (h + mf_dt)
        worst = max((r[3] for r in rows), default=0.0)
        rep.check("decoupled_tolerance", worst <= tol, f"max error {worst:.3e} vs {tol:.3e}")
    else:
        band = cfg.opt_float("band", 0.2)
        for k in sorted({r[1] for r in rows}):
            errs = [r[3] for r in rows if r[1] == k]
            ok = all(b <= (1 + band) * a for a, b in zip(errs, errs[1:]))
            rep.check(f"nonincreasing K={k}", ok, ", ".join(f"{e:.4g}" for e in errs))
    series = {}
    for k in sorted({r[1] for r in rows}):
        sub = [r for r in rows if r[1] == k]
        series[f"K={k}"] = ([r[0] for r in sub], [r[3] for r in sub])
    rep.figures.append(FigureSpec("error", "hierarchy vs mean-field", "N", "e(N, K)", series, logx=True))
    return rep


@dataclass(frozen=True)
class _RegularityCell:
    cfg: ExperimentConfig

    def __call__(self, big_n: int):
        cfg = self.cfg
        model = cfg.build_model()
        H = solve_auto(model, big_n, min(cfg.k_max, big_n), cfg.n_cells, cfg.n_steps)
        return big_n, H.n_steps, regularity_report(H, n_pairs=cfg.opt_int("pairs", 400), seed=cfg.seed_value)


def run_lipschitz(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Regularity constants across ``N``, the time-Holder exponent and mean-field quotients."""
    rep = _new(cfg)
    results = _pool_map(_RegularityCell(cfg), list(cfg.big_n), workers)
    tab = Table("lipschitz_constants", ["N", "K", "n_steps", "spatial", "removal", "holder"])
    for big_n, steps, report in results:
        for k in sorted(report):
            r = report[k]
            tab.add(big_n, k, steps, r["spatial"], r["removal"], r["holder"])
    rep.tables.append(tab)
    limit = cfg.opt_float("max_factor", 1.25)
    stab = Table("lipschitz_stability", ["K", "constant", "factor"])
    k_common = min(cfg.k_max, cfg.big_n[0])
    series = {}
    for k in range(1, k_common + 1):
        for name in ("spatial", "removal", "holder"):
            vals = [rep_[k][name] for _, _, rep_ in results]
            base = vals[0]
            factor = max(vals) / base if base > 0 else (1.0 if max(vals) == 0 else math.inf)
            stab.add(k, name, factor)
            rep.check(f"stability K={k} {name}", factor <= limit, f"factor {factor:.4f}")
            series[f"{name} K={k}"] = (list(cfg.big_n), vals)
    rep.tables.append(stab)
    rep.figures.append(FigureSpec("constants", "regularity constants", "N", "constant", series))

    if cfg.opt_bool("holder", True):
        hm = make_model(cfg.opt("holder_model", "quadratic"), g1=0.0, g_kink=cfg.opt_float("holder_kink", 1.0))
        H = solve_hierarchy(hm, cfg.opt_int("holder_n", 2), 1, cfg.opt_int("holder_cells", 32), cfg.opt_int("holder_steps", 1000))
        expo = holder_exponent(H)
        ht = Table("lipschitz_holder", ["n_cells", "n_steps", "exponent"])
        ht.add(H.n_cells, H.n_steps, expo)
        rep.tables.append(ht)
        lo, hi = cfg.opt_floats("holder_band", [0.45, 0.55])
        rep.check("holder_exponent", lo <= expo <= hi, f"{expo:.4f}")

    n_mf = cfg.opt_int("mf_pairs", 0)
    if n_mf:
        model = cfg.build_model()
        rng = np.random.default_rng(cfg.seed_value)
        mesh = MFMesh(cfg.opt_int("mf_cells", 16), cfg.opt_int("mf_steps", 160), cfg.t0, model.horizon)
        pairs = [
            (random_measure(mesh.grid, rng, total=float(rng.uniform(0.3, 0.9))), random_measure(mesh.grid, rng, total=float(rng.uniform(0.3, 0.9))))
            for _ in range(n_mf)
        ]
        q = lipschitz_quotients(model, pairs, cfg.thetas[0], cfg.deltas[0], mesh)
        mt = Table("lipschitz_meanfield", ["pair", "quotient"])
        for i, v in enumerate(q):
            mt.add(i, float(v))
        rep.tables.append(mt)
        rep.check("meanfield_quotients_finite", bool(np.all(np.isfinite(q))), f"max {float(np.max(q)):.4f}")
    return rep


def run_phi(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    rep = _new(cfg)
    rng = np.random.default_rng(cfg.seed_value)
    grid = TorusGrid(cfg.n_cells)
    n = cfg.opt_int("samples", 50)
    tab = Table("phi_checks", ["check", "value", "threshold"])

    worst0 = 0.0
    for _ in range(10):
        mu = np.abs(_smooth_density(grid, rng))
        r = phi_solve(mu)
        worst0 = max(worst0, abs(r.value), float(np.max(np.abs(r.f_hat.values))))
    tab.add("nonnegative_zero", worst0, 0.0)
    rep.check("nonnegative_zero", worst0 == 0.0, f"{worst0:.3e}")

    worst_c = max(abs(phi_solve(np.full(grid.n_cells, -c)).value - 0.5 * c * c) for c in (0.25, 0.5, 1.0, 1.5, 2.0))
    tab.add("constant_closed_form", worst_c, 1e-8)
    rep.check("constant_closed_form", worst_c <= 1e-8, f"{worst_c:.3e}")

    grad = max(phi_gradient_check(_smooth_density(grid, rng), [_smooth_density(grid, rng)]) for _ in range(10))
    tab.add("gradient", grad, 1e-3)
    rep.check("gradient", grad <= 1e-3, f"relative error {grad:.3e}")

    lip = phi_lipschitz_check([(_smooth_density(grid, rng), _smooth_density(grid, rng)) for _ in range(n)])
    tab.add("lipschitz_ratio", lip, 1 + 1e-6)
    rep.check("lipschitz", lip <= 1 + 1e-6, f"ratio {lip:.12f}")

    slack = min(phi_energy_inequality_check(_smooth_density(grid, rng)) for _ in range(n))
    tab.add("energy_slack", slack, -1e-6)
    rep.check("energy_inequality", slack >= -1e-6, f"min slack {slack:.3e}")

    worst_v = -math.inf
    for _ in range(cfg.opt_int("variational", 20)):
        mu = _smooth_density(grid, rng)
        f = phi_solve(mu).f_hat.values
        for _ in range(5):
            h = -np.abs(_smooth_density(grid, rng))
            worst_v = max(worst_v, pairing(mu, h) - h1_inner(f, h))
    tab.add("variational_inequality", worst_v, 1e-8)
    rep.check("variational_inequality", worst_v <= 1e-8, f"{worst_v:.3e}")

    worst_m = -math.inf
    for _ in range(10):
        mu = _smooth_density(grid, rng)
        nu = mu + np.abs(_smooth_density(grid, rng))
        worst_m = max(worst_m, phi_solve(nu).value - phi_solve(mu).value)
    tab.add("order_reversing", worst_m, 1e-10)
    rep.check("order_reversing", worst_m <= 1e-10, f"{worst_m:.3e}")
    rep.tables.append(tab)

    cs = [0.25, 0.5, 1.0, 1.5, 2.0]
    rep.figures.append(
        FigureSpec("constant", "Phi at negative constants", "c", "Phi(-c)", {"Phi": (cs, [phi_solve(np.full(grid.n_cells, -c)).value for c in cs])})
    )
    return rep


RUNNERS: dict[str, Callable[[ExperimentConfig, int], RunReport]] = {
    "validate-model": run_validate_model,
    "envelope": run_envelope,
    "nparticle": run_nparticle,
    "montecarlo": run_montecarlo,
    "meanfield": run_meanfield,
    "ladder": run_ladder,
    "converge": run_convergence,
    "lipschitz": run_lipschitz,
    "phi": run_phi,
}


def _new(cfg: ExperimentConfig) -> RunReport:
    return RunReport(cfg.kind, cfg.name, cfg.echo)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    start = time.perf_counter()
    rep = RUNNERS[cfg.kind](cfg, workers)
    rep.wall_clock = time.perf_counter() - start
    return rep


@dataclass
class SuiteResult:
    reports: list[RunReport]
    skipped: list[str]

    @property
    def passed(self) -> bool:
        return not self.skipped and all(r.passed for r in self.reports)

    def manifest(self) -> list[str]:
        lines = [f"{r.name}: {c.line()}" for r in self.reports for c in r.checks if not c.passed]
        lines += [f"{s}: SKIPPED after model validation failed" for s in self.skipped]
        return lines


def run_all_checks(
    name_filter: str | None = None,
    workers: int = 1,
    out=None,
    model_override: str | None = None,
    configs: list[tuple[str, str]] | None = None,
) -> SuiteResult:
    """Run the shipped suites in order; model validation failing skips everything after it.

    ``model_override`` is INI text whose ``[model]`` section replaces the
    model of the validation suite (so a broken model is caught first).
    """
    configs = shipped_configs() if configs is None else configs
    reports, skipped = [], []
    gate_failed = False
    for name, text in configs:
        cfg = parse_config(text, name=name)
        if name_filter and name_filter not in name and name_filter != cfg.kind:
            continue
        if gate_failed:
            skipped.append(name)
            continue
        if cfg.kind == "validate-model" and model_override:
            cfg = _override_model(cfg, text, model_override, name)
        rep = run_experiment(cfg, workers)
        reports.append(rep)
        if out is not None:
            rep.write(Path(out) / name)
        if cfg.kind == "validate-model" and not rep.passed:
            gate_failed = True
    return SuiteResult(reports, skipped)


def _override_model(cfg: ExperimentConfig, text: str, override: str, name: str) -> ExperimentConfig:
    base = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    base.read_string(text)
    extra = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        extra.read_string(override)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    if extra.has_section("model"):
        if base.has_section("model"):
            base.remove_section("model")
        base.add_section("model")
        for k, v in extra["model"].items():
            base["model"][k] = v
    buf = io.StringIO()
    base.write(buf)
    return parse_config(buf.getvalue(), name=name)
