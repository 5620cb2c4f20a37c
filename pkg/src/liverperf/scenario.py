"""Scenario configuration (``scenario-v1``), the full pipeline, lesions and
baseline/lesion difference reports.

A scenario file is INI text::

    [scenario]
    format = scenario-v1
    output_dir = out/baseline

    [mesh]
    generator = ellipsoid          ; or: path = liver.mesh
    semi_axes = 0.1, 0.075, 0.05
    resolution = 12

    [portal_tree]                  ; same keys for [hepatic_tree]
    depth = 8                      ; or: path = portal.tree
    root_diameter = 8.4e-3
    diameter_ratio = 0.63, 0.63, 0.63, 0.63, 0.75, 0.8, 0.79
    root_position = -0.06, 0, -0.03
    seed = 1
    hs_threshold = 4

    [compartments]
    portal_range = 1e-4, 1.2e-3
    hepatic_range = 1e-4, 1.2e-3
    control_radius = 0.03

    [flow]
    v_in = 0.25
    p_out = 1000

    [transport]
    S_bar = 0.4
    T = 2
    t_end = 20
    snapshot_times = 1, 4, 8

    [probes]
    A = 0.02, -0.03, 0.01

    [lesion]                       ; optional
    center = 0.02, 0, 0
    radius = 0.02

Relative paths are resolved against the directory of the scenario file.
"""

from __future__ import annotations

import configparser
import contextlib
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .coupling import CouplingOptions, couple_steady, write_iteration_log
from .darcy import compartment_balance
from .errors import ConfigurationError, ContractError, PerfusionError
from .flow1d import MU_BLOOD, RHO_BLOOD, Fluid
from .geometry import CellField, NodeField, load_mesh, read_vtk_cell_data, read_vtk_geometry, save_mesh, write_vtk
from .meshgen import box_mesh, ellipsoid_mesh
from .transport import (
    BolusSpec,
    TransportOperator,
    compartment_flow_from_coupled,
    simulate_perfusion_test,
    write_probe_csv,
)
from .upscale import (
    DEFAULT_EPS,
    K_FILTRATION,
    PHI_FILTRATION,
    build_perfusion_params,
    three_compartment_specs,
)
from .vtree import Region, TreeSpec, build_synthetic_tree, load_tree, save_tree, split_hierarchy

log = logging.getLogger(__name__)

FORMAT = "scenario-v1"
LESION_FACTOR = 1e-6


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MeshConfig:
    path: Path | None = None
    generator: str = "ellipsoid"
    semi_axes: tuple = (0.1, 0.075, 0.05)
    center: tuple = (0.0, 0.0, 0.0)
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (1.0, 1.0, 1.0)
    resolution: int = 12


@dataclass(frozen=True)
class TreeConfig:
    path: Path | None = None
    spec: TreeSpec | None = None
    hs_threshold: int = 4


@dataclass(frozen=True)
class LesionSpec:
    center: tuple
    radius: float
    compartment: int = 2
    factor: float = LESION_FACTOR

    def __post_init__(self):
        if not self.factor > 0:
            raise ConfigurationError("lesion factor must be > 0 (never exactly zero)", "lesion.factor")
        if not self.radius > 0:
            raise ConfigurationError("lesion radius must be positive", "lesion.radius")


@dataclass(frozen=True)
class ScenarioConfig:
    output_dir: Path
    mesh: MeshConfig
    portal: TreeConfig
    hepatic: TreeConfig
    v_in: float
    p_out: float
    portal_range: tuple = (1e-4, 1.2e-3)
    hepatic_range: tuple = (1e-4, 1.2e-3)
    K_filtration: float = K_FILTRATION
    phi_filtration: float = PHI_FILTRATION
    eps: float = DEFAULT_EPS
    control_radius: float = 0.0
    max_piece: float | None = None
    fluid: Fluid = Fluid()
    coupling: CouplingOptions = CouplingOptions()
    bolus: BolusSpec = BolusSpec()
    t_end: float = 20.0
    dt: float | None = None
    record_every: int = 1
    snapshot_times: tuple = ()
    probes: dict = field(default_factory=dict)
    phi_floor: float = 1e-3
    lesion: LesionSpec | None = None
    source: Path | None = None


def _floats(text, key, n=None):
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigurationError(f"expected numbers, got {text!r}", key) from None
    if n is not None and len(vals) != n:
        raise ConfigurationError(f"expected {n} values, got {len(vals)}", key)
    return vals


class _Section:
    """Typed accessors that name the offending key on error and track unused keys."""

    def __init__(self, parser, name, required=True):
        self.name = name
        if not parser.has_section(name):
            if required:
                raise ConfigurationError("missing section", name)
            self.data = {}
        else:
            self.data = dict(parser.items(name))
        self.used = set()

    def __contains__(self, key):
        return key in self.data

    def key(self, k):
        return f"{self.name}.{k}" if self.name not in ("flow", "scenario") else k

    def raw(self, k, default=None, required=False):
        if k not in self.data:
            if required:
                raise ConfigurationError("required value missing", self.key(k))
            return default
        self.used.add(k)
        return self.data[k]

    def float(self, k, default=None, required=False):
        v = self.raw(k, None, required)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigurationError(f"expected a number, got {v!r}", self.key(k)) from None

    def int(self, k, default=None, required=False):
        v = self.raw(k, None, required)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigurationError(f"expected an integer, got {v!r}", self.key(k)) from None

    def vec(self, k, n=None, default=None, required=False):
        v = self.raw(k, None, required)
        return default if v is None else _floats(v, self.key(k), n)

    def check_unused(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigurationError(f"unknown key(s) {', '.join(extra)}", f"{self.name}.{extra[0]}")


def _tree_spec(sec, base, mesh_cfg):
    if "path" in sec:
        p = Path(sec.raw("path"))
        cfg = TreeConfig(path=p if p.is_absolute() else base / p, hs_threshold=sec.int("hs_threshold", 4))
        sec.check_unused()
        return cfg
    ratio = sec.vec("diameter_ratio", default=(2 ** (-1 / 3),))
    shape = sec.raw("region_shape", None)
    if shape is None:
        if mesh_cfg.generator == "box" and mesh_cfg.path is None:
            lo, hi = np.array(mesh_cfg.lo), np.array(mesh_cfg.hi)
            region = Region("box", tuple((lo + hi) / 2), tuple((hi - lo) / 2))
        else:
            region = Region("ellipsoid", mesh_cfg.center, mesh_cfg.semi_axes)
    else:
        region = Region(shape, sec.vec("region_center", 3, required=True), sec.vec("region_extents", 3, required=True))
    if region.shape not in ("box", "ellipsoid"):
        raise ConfigurationError(f"unknown region shape {region.shape!r}", sec.key("region_shape"))
    spec = TreeSpec(
        depth=sec.int("depth", required=True),
        root_diameter=sec.float("root_diameter", required=True),
        diameter_ratio=ratio[0] if len(ratio) == 1 else ratio,
        min_length_ratio=sec.float("min_length_ratio", 1.0),
        region=region,
        root_position=sec.vec("root_position", 3),
        seed=sec.int("seed", 0),
        tortuosity=sec.float("tortuosity", 1.2),
        jitter=sec.float("jitter", 0.15),
        points_per_leaf=sec.int("points_per_leaf", 16),
    )
    cfg = TreeConfig(spec=spec, hs_threshold=sec.int("hs_threshold", 4))
    sec.check_unused()
    return cfg


def parse_tree_spec(path):
    """Read a tree generator spec (``[tree]`` section, same keys as scenario tree sections)."""
    parser = _read_ini(path)
    sec = _Section(parser, "tree")
    cfg = _tree_spec(sec, Path(path).resolve().parent, MeshConfig())
    if cfg.spec is None:
        raise ConfigurationError("a generator spec needs depth/root_diameter, not a path", "tree.path")
    return cfg.spec


def _read_ini(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"file not found: {path}", "config") from None
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse: {exc}", "config") from None
    return parser


def load_config(path):
    """Parse and validate a ``scenario-v1`` file into :class:`ScenarioConfig`."""
    path = Path(path)
    base = path.resolve().parent
    parser = _read_ini(path)
    known = {"scenario", "mesh", "portal_tree", "hepatic_tree", "compartments", "fluid", "flow", "transport", "probes", "lesion"}
    extra = sorted(set(parser.sections()) - known)
    if extra:
        raise ConfigurationError(f"unknown section(s) {', '.join(extra)}", "config")

    sc = _Section(parser, "scenario")
    fmt = sc.raw("format", required=True)
    if fmt != FORMAT:
        raise ConfigurationError(f"unsupported format {fmt!r}; expected {FORMAT}", "format")
    out = Path(sc.raw("output_dir", "output"))
    out = out if out.is_absolute() else (base / out).resolve()
    sc.check_unused()

    ms = _Section(parser, "mesh")
    if "path" in ms:
        p = Path(ms.raw("path"))
        mesh_cfg = MeshConfig(path=p if p.is_absolute() else base / p)
    else:
        gen = ms.raw("generator", "ellipsoid")
        if gen == "ellipsoid":
            mesh_cfg = MeshConfig(
                generator=gen,
                semi_axes=ms.vec("semi_axes", 3, required=True),
                center=ms.vec("center", 3, (0.0, 0.0, 0.0)),
                resolution=ms.int("resolution", 12),
            )
        elif gen == "box":
            mesh_cfg = MeshConfig(
                generator=gen,
                lo=ms.vec("lo", 3, (0.0, 0.0, 0.0)),
                hi=ms.vec("hi", 3, (1.0, 1.0, 1.0)),
                resolution=ms.int("resolution", 4),
            )
        else:
            raise ConfigurationError(f"unknown mesh generator {gen!r}", "mesh.generator")
    ms.check_unused()

    portal = _tree_spec(_Section(parser, "portal_tree"), base, mesh_cfg)
    hepatic = _tree_spec(_Section(parser, "hepatic_tree"), base, mesh_cfg)

    cs = _Section(parser, "compartments", required=False)
    count = cs.int("count", 3)
    if count != 3:
        raise ConfigurationError("scenario-v1 supports exactly three compartments", "compartments.count")
    mp = cs.raw("max_piece", "auto")
    comp = dict(
        portal_range=cs.vec("portal_range", 2, (1e-4, 1.2e-3)),
        hepatic_range=cs.vec("hepatic_range", 2, (1e-4, 1.2e-3)),
        K_filtration=cs.float("K_filtration", K_FILTRATION),
        phi_filtration=cs.float("phi_filtration", PHI_FILTRATION),
        eps=cs.float("eps", DEFAULT_EPS),
        control_radius=cs.float("control_radius", 0.0),
        max_piece=None if mp == "auto" else _floats(mp, "compartments.max_piece", 1)[0],
    )
    cs.check_unused()

    fs = _Section(parser, "fluid", required=False)
    fluid = Fluid(fs.float("density", RHO_BLOOD), fs.float("viscosity", MU_BLOOD))
    fs.check_unused()
    if not fluid.viscosity > 0 or fluid.density < 0:
        raise ConfigurationError("viscosity must be > 0 and density >= 0", "fluid")

    fl = _Section(parser, "flow")
    v_in = fl.float("v_in", required=True)
    p_out = fl.float("p_out", required=True)
    opts = CouplingOptions(
        n_pseudo=fl.int("n_pseudo", 10),
        max_iter=fl.int("max_iter", 200),
        tol=fl.float("tol", 1e-6),
        update=fl.raw("update", "anderson"),
        omega=fl.float("omega", 0.5),
        beta=fl.float("beta", 1e-3),
        memory=fl.int("memory", 10),
        linear_solver=fl.raw("linear_solver", "cg"),
        linear_tol=fl.float("linear_tol", 1e-10),
    )
    fl.check_unused()
    if v_in < 0:
        raise ConfigurationError("must be >= 0", "v_in")

    ts = _Section(parser, "transport", required=False)
    dt = ts.raw("dt", "auto")
    tr = dict(
        bolus=BolusSpec(ts.float("S_bar", 0.4), ts.float("T", 2.0)),
        t_end=ts.float("t_end", 20.0),
        dt=None if dt == "auto" else _floats(dt, "transport.dt", 1)[0],
        record_every=ts.int("record_every", 1),
        snapshot_times=ts.vec("snapshot_times", default=()),
        phi_floor=ts.float("phi_floor", 1e-3),
    )
    ts.check_unused()
    if not tr["t_end"] > 0:
        raise ConfigurationError("must be positive", "transport.t_end")
    if tr["record_every"] < 1:
        raise ConfigurationError("must be >= 1", "transport.record_every")

    probes = {}
    if parser.has_section("probes"):
        for name, text in parser.items("probes"):
            probes[name] = _floats(text, f"probes.{name}", 3)

    lesion = None
    if parser.has_section("lesion"):
        ls = _Section(parser, "lesion")
        lesion = LesionSpec(
            center=ls.vec("center", 3, required=True),
            radius=ls.float("radius", required=True),
            compartment=ls.int("compartment", 2),
            factor=ls.float("factor", LESION_FACTOR),
        )
        ls.check_unused()

    return ScenarioConfig(
        output_dir=out,
        mesh=mesh_cfg,
        portal=portal,
        hepatic=hepatic,
        v_in=v_in,
        p_out=p_out,
        fluid=fluid,
        coupling=opts,
        probes=probes,
        lesion=lesion,
        source=path,
        **comp,
        **tr,
    )


def validate_config(cfg, mesh=None):
    """Checks that need the mesh: probe points inside its bounding box."""
    if mesh is None:
        mesh = build_mesh(cfg.mesh)
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    for name, p in cfg.probes.items():
        if np.any(np.asarray(p) < lo) or np.any(np.asarray(p) > hi):
            raise ConfigurationError(f"probe {p} lies outside the mesh bounding box", f"probes.{name}")
    if cfg.lesion is not None and cfg.lesion.compartment not in (1, 2, 3):
        raise ConfigurationError("target compartment must be 1, 2 or 3", "lesion.compartment")
    return mesh


# ---------------------------------------------------------------------------
# pipeline


def build_mesh(mc):
    if mc.path is not None:
        return load_mesh(mc.path)
    if mc.generator == "box":
        return box_mesh(mc.resolution, mc.lo, mc.hi)
    return ellipsoid_mesh(mc.semi_axes, mc.resolution, mc.center)


def build_tree(tc):
    return load_tree(tc.path) if tc.path is not None else build_synthetic_tree(tc.spec)


def apply_lesion(params, mesh, lesion):
    """Scale K of the target compartment by ``lesion.factor`` in cells whose barycenter is inside the sphere."""
    inside = np.linalg.norm(mesh.barycenters - np.asarray(lesion.center), axis=1) <= lesion.radius
    if not np.any(inside):
        log.warning("lesion sphere at %s (r=%g) contains no cell barycenter; parameters unchanged", lesion.center, lesion.radius)
        return params
    cid = lesion.compartment
    K = dict(params.K)
    vals = K[cid].values.copy()
    vals[inside] *= lesion.factor
    K[cid] = CellField(K[cid].name, vals, K[cid].compartment_id)
    out = params.replace(K=K)
    out.meta["lesion_cells"] = int(inside.sum())
    return out


def lesion_mask(mesh, lesion):
    return np.linalg.norm(mesh.barycenters - np.asarray(lesion.center), axis=1) <= lesion.radius


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    mesh: object
    portal: object
    hepatic: object
    portal_split: object
    hepatic_split: object
    params: object
    raw_K: dict
    coupled: object
    transport: object
    summary: dict
    flow: object = None


@contextlib.contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except PerfusionError as exc:
        exc.stage = name
        exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + tuple(exc.args[1:])
        raise
    finally:
        timings[name] = time.perf_counter() - t0


@dataclass
class SteadyStage:
    """Pipeline state after the steady coupled solve, before transport."""

    config: ScenarioConfig
    mesh: object
    portal: object
    hepatic: object
    portal_split: object
    hepatic_split: object
    params: object
    raw_K: dict
    coupled: object
    flow: object
    timings: dict

    def dt_max(self):
        return TransportOperator(self.flow).dt_max


def run_steady(config):
    """Trees -> upscale -> lesion -> steady coupling -> transport flow fields."""
    cfg = config if isinstance(config, ScenarioConfig) else load_config(config)
    timings = {}
    with _stage("mesh", timings):
        mesh = validate_config(cfg)
    with _stage("trees", timings):
        portal = build_tree(cfg.portal)
        hepatic = build_tree(cfg.hepatic)
        psplit = split_hierarchy(portal, cfg.portal.hs_threshold)
        hsplit = split_hierarchy(hepatic, cfg.hepatic.hs_threshold)
    with _stage("upscale", timings):
        max_piece = cfg.max_piece
        if max_piece is None:
            max_piece = 0.5 * float(np.cbrt(6 * mesh.volumes.mean()))
        specs = three_compartment_specs(cfg.portal_range, cfg.hepatic_range)
        params, raw = build_perfusion_params(
            mesh,
            portal,
            psplit,
            hepatic,
            hsplit,
            specs,
            cfg.fluid.viscosity,
            eps=cfg.eps,
            control_radius=cfg.control_radius,
            max_piece=max_piece,
            K_filtration=cfg.K_filtration,
            phi_filtration=cfg.phi_filtration,
        )
        if cfg.lesion is not None:
            params = apply_lesion(params, mesh, cfg.lesion)
    with _stage("coupling", timings):
        coupled = couple_steady(
            psplit.upper, hsplit.upper, mesh, params, cfg.v_in, cfg.p_out, cfg.coupling, cfg.fluid
        )
    with _stage("transport", timings):
        flow = compartment_flow_from_coupled(coupled, cfg.phi_floor)
    return SteadyStage(cfg, mesh, portal, hepatic, psplit, hsplit, params, raw, coupled, flow, timings)


def run_scenario(config, write=True, dt=None):
    """Run trees -> upscale -> couple -> transport; write outputs when ``write``.

    ``config`` may also be a :class:`SteadyStage`. ``dt`` overrides the
    configured transport step.
    """
    st = config if isinstance(config, SteadyStage) else run_steady(config)
    cfg, timings = st.config, dict(st.timings)
    with _stage("transport", timings):
        names = list(cfg.probes)
        tres = simulate_perfusion_test(
            st.coupled,
            cfg.bolus,
            cfg.t_end,
            [cfg.probes[n] for n in names],
            dt=dt if dt is not None else cfg.dt,
            record_every=cfg.record_every,
            snapshot_times=cfg.snapshot_times,
            flow=st.flow,
        )
    timings["transport"] += st.timings.get("transport", 0.0)
    summary = _summary(cfg, st.mesh, st.params, st.raw_K, st.coupled, tres, st.flow, timings)
    result = ScenarioResult(
        cfg, st.mesh, st.portal, st.hepatic, st.portal_split, st.hepatic_split, st.params, st.raw_K,
        st.coupled, tres, summary, st.flow,
    )
    if write:
        with _stage("output", timings):
            write_outputs(result)
    return result


def run_pair(baseline, lesion, write=True):
    """Run a baseline and a lesion scenario on one shared transport step.

    Automatic steps are replaced by the smaller stable step of the two runs
    so that their timelines coincide.
    """
    sb, sl = run_steady(baseline), run_steady(lesion)
    dts = [s.config.dt for s in (sb, sl)]
    if dts[0] is None and dts[1] is None:
        dt = min(sb.dt_max(), sl.dt_max())
    elif dts[0] is not None and dts[1] is not None:
        if dts[0] != dts[1]:
            raise ConfigurationError("baseline and lesion runs must use the same step", "transport.dt")
        dt = dts[0]
    else:
        dt = dts[0] if dts[0] is not None else dts[1]
    return run_scenario(sb, write, dt), run_scenario(sl, write, dt)


def _median_norm(K):
    n = np.linalg.eigvalsh(K.values)[:, -1]
    n = n[n > 0]
    return float(np.median(n)) if len(n) else 0.0


def _summary(cfg, mesh, params, raw, coupled, tres, flow, timings):
    closure = coupled.mass_closure()
    gap = coupled.closure_gap()
    bal = compartment_balance(coupled.darcy, mesh)
    q_ref = max(abs(v) for v in closure.values()) or 1.0
    bal_gap = max(abs(v) for v in bal.values()) / q_ref
    budget = float(tres.relative_budget_error().max())
    ext = tres.extremes
    checks = {
        "coupling_converged": {"value": bool(coupled.converged), "pass": bool(coupled.converged)},
        "mass_closure_gap": {"value": gap, "limit": 1e-6, "pass": gap <= 1e-6},
        "darcy_balance": {"value": bal_gap, "limit": 1e-6, "pass": bal_gap <= 1e-6},
        "tracer_budget": {"value": budget, "limit": 1e-8, "pass": budget <= 1e-8},
        "saturation_bounds": {
            "value": [min(ext["compartment_min"], ext["network_min"]), max(ext["compartment_max"], ext["network_max"])],
            "pass": min(ext["compartment_min"], ext["network_min"]) >= -1e-12
            and max(ext["compartment_max"], ext["network_max"]) <= 1 + 1e-12,
        },
    }
    return {
        "format": FORMAT,
        "mesh": {"nodes": mesh.n_nodes, "cells": mesh.n_cells},
        "interface": {"sources": int(np.sum(coupled.interface.tree == "P")), "sinks": int(np.sum(coupled.interface.tree == "H"))},
        "mass_closure": closure,
        "checks": checks,
        "all_checks_pass": all(c["pass"] for c in checks.values()),
        "upscaling": {
            "median_K_norm": {str(c): _median_norm(raw[c]) for c in raw},
            "median_phi": {str(c): float(np.median(params.phi[c].values)) for c in params.phi},
            "median_G": {f"{i}{j}": float(np.median(g.values)) for (i, j), g in params.G.items()},
        },
        "solver": {
            "outer_iterations": coupled.stats["outer_iterations"],
            "newton_iterations": coupled.stats["newton_iterations"],
            "linear_iterations": coupled.stats["linear_iterations"],
            "transport_steps": int(round(tres.times[-1] / tres.dt)),
            "dt": tres.dt,
            "kernel_backend": kernels.BACKEND,
        },
        "lesion": None if cfg.lesion is None else {**asdict(cfg.lesion), "cells": params.meta.get("lesion_cells", 0)},
        "probes": {n: list(p) for n, p in cfg.probes.items()},
        "snapshot_times": list(cfg.snapshot_times),
        "wall_time_s": timings,
    }


def _snapshot_name(t):
    return f"snapshot_t{t:09.4f}.vtk"


def write_outputs(result):
    cfg, mesh, coupled, tres = result.config, result.mesh, result.coupled, result.transport
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out / "mesh.txt")
    save_tree(result.portal, out / "portal.tree")
    save_tree(result.hepatic, out / "hepatic.tree")
    write_iteration_log(coupled.log, out / "iteration_log.csv")
    with open(out / "interface.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tree", "junction", "node", "compartment", "flux", "pressure"])
        for row in coupled.interface.rows():
            w.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5])])
    write_probe_csv(tres, out / "probes.csv", list(cfg.probes))
    sol, params = coupled.darcy, result.params
    fields = []
    for cid in sol.ids:
        fields += [sol.pressures[cid], CellField("w", sol.velocities[cid].values, cid)]
        fields += [params.K[cid], params.phi[cid]]
    for (i, j), g in params.G.items():
        fields.append(g)
    write_vtk(mesh, fields, out / "flow.vtk", "steady perfusion")
    phi = result.flow.phi
    for t, S in sorted(tres.snapshots.items()):
        C = sum(phi[a] * S[cid] for a, cid in enumerate(tres.ids))
        fs = [CellField("S", S[cid], cid) for cid in tres.ids] + [CellField("C", C)]
        write_vtk(mesh, fs, out / _snapshot_name(t), f"saturation t={t:g} s")
    summary = dict(result.summary)
    summary["snapshots"] = {repr(t): _snapshot_name(t) for t in sorted(tres.snapshots)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# difference report


@dataclass
class RunOutputs:
    """What a difference report needs from one run."""

    times: np.ndarray
    probe_names: list
    ids: tuple
    probe_S: np.ndarray  # (n_t, n_probes, n_comp)
    probe_C: np.ndarray
    snapshots: dict  # t -> {'S1':..., 'C':...}
    nodes: np.ndarray
    cells: np.ndarray
    phi: np.ndarray | None = None


def outputs_from_result(result):
    tres = result.transport
    snaps = {}
    for t, S in tres.snapshots.items():
        d = {f"S_{cid}": S[cid] for cid in tres.ids}
        d["C"] = sum(result.flow.phi[a] * S[cid] for a, cid in enumerate(tres.ids))
        snaps[float(t)] = d
    return RunOutputs(
        tres.times, list(result.config.probes), tres.ids, tres.probe_S, tres.probe_C, snaps,
        np.asarray(result.mesh.nodes), np.asarray(result.mesh.cells), result.flow.phi,
    )


def load_run_outputs(directory):
    """Read a run's probe CSV and VTK snapshots back from its output directory."""
    d = Path(directory)
    try:
        summary = json.loads((d / "summary.json").read_text())
        with open(d / "probes.csv", newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise ContractError(f"incomplete run output in {d}: {exc.filename}") from None
    head = rows[0]
    data = np.array(rows[1:], dtype=float)
    names = list(summary["probes"])
    cols = [h for h in head[1:] if h.endswith("_" + names[0])] if names else []
    ids = tuple(int(h[1:].split("_")[0]) for h in cols if h.startswith("S"))
    nc = len(ids) + 1
    body = data[:, 1:].reshape(len(data), len(names), nc) if names else np.zeros((len(data), 0, 4))
    snaps = {}
    nodes = cells = None
    for t, fname in summary.get("snapshots", {}).items():
        arrays = read_vtk_cell_data(d / fname)
        snaps[float(t)] = arrays
        if nodes is None:
            nodes, cells = read_vtk_geometry(d / fname)
    if nodes is None:
        nodes, cells = read_vtk_geometry(d / "flow.vtk")
    return RunOutputs(data[:, 0], names, ids or (1, 2, 3), body[:, :, :-1], body[:, :, -1], snaps, nodes, cells)


@dataclass
class DifferenceReport:
    """Baseline minus lesion run: probe curves and snapshot fields."""

    times: np.ndarray
    probe_names: list
    ids: tuple
    dS_probe: np.ndarray
    dC_probe: np.ndarray
    snapshots: dict  # t -> {'S_1': dS, ..., 'C': dC}

    def max_abs(self, name, mask=None):
        out = {}
        for t, d in self.snapshots.items():
            v = d[name] if mask is None else d[name][mask]
            out[t] = float(np.abs(v).max(initial=0.0))
        return out


def difference_report(baseline, lesion):
    """``Delta = baseline - lesion`` for probes and snapshots; mismatched runs raise :class:`ContractError`."""
    b = baseline if isinstance(baseline, RunOutputs) else outputs_from_result(baseline)
    p = lesion if isinstance(lesion, RunOutputs) else outputs_from_result(lesion)
    if b.nodes.shape != p.nodes.shape or not np.array_equal(b.nodes, p.nodes) or not np.array_equal(b.cells, p.cells):
        raise ContractError("runs use different meshes")
    if len(b.times) != len(p.times) or not np.array_equal(b.times, p.times):
        raise ContractError("runs have different output times")
    if b.probe_names != p.probe_names or b.ids != p.ids:
        raise ContractError("runs have different probes or compartments")
    if sorted(b.snapshots) != sorted(p.snapshots):
        raise ContractError("runs have different snapshot times")
    snaps = {}
    for t in sorted(b.snapshots):
        if sorted(b.snapshots[t]) != sorted(p.snapshots[t]):
            raise ContractError(f"snapshot at t={t} carries different fields")
        snaps[t] = {k: b.snapshots[t][k] - p.snapshots[t][k] for k in b.snapshots[t]}
    return DifferenceReport(b.times, b.probe_names, b.ids, b.probe_S - p.probe_S, b.probe_C - p.probe_C, snaps)


def write_difference(report, directory, mesh_nodes, mesh_cells, lesion=None):
    from .geometry import Mesh

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "difference_probes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["time"]
        for nm in report.probe_names:
            head += [f"dS{cid}_{nm}" for cid in report.ids] + [f"dC_{nm}"]
        w.writerow(head)
        for k, t in enumerate(report.times):
            row = [repr(float(t))]
            for q in range(len(report.probe_names)):
                row += [repr(float(v)) for v in report.dS_probe[k, q]] + [repr(float(report.dC_probe[k, q]))]
            w.writerow(row)
    mesh = Mesh(mesh_nodes, mesh_cells)
    info = {"snapshots": {}}
    mask = None if lesion is None else ~lesion_mask(mesh, lesion)
    for t, d in sorted(report.snapshots.items()):
        fs = [CellField("d" + k.replace("_", ""), v) for k, v in sorted(d.items())]
        name = "difference_" + _snapshot_name(t)
        write_vtk(mesh, fs, out / name, f"baseline minus lesion t={t:g} s")
        entry = {"file": name, "max_abs_dC": float(np.abs(d["C"]).max())}
        if mask is not None:
            entry["max_abs_dC_outside_lesion"] = float(np.abs(d["C"][mask]).max(initial=0.0))
        info["snapshots"][repr(t)] = entry
    (out / "difference_summary.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
