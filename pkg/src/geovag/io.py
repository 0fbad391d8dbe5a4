"""Run configuration, built-in scenarios, and simulation artifacts.

A scenario is a mesh recipe, homogeneous rock and fluid properties, a
set of wells, and an ordered list of stages, each with its own boundary
conditions, open wells, and time-step policy.  Scenario files are
INI-style text with SI units spelled out in the key names; no unit
inference is performed.

Artifacts written per stage:

* legacy-VTK snapshots of the reservoir cells (``fields_NNNN.vtk``) and,
  when the mesh is fractured, of the fracture faces
  (``fracture_NNNN.vtk``), holding pressure, temperature, and gas
  saturation;
* ``timeseries.csv`` — one row per accepted step with the reservoir gas
  volume and, per open well, the well-column gas volume, bottom-hole
  pressure, and total mass rate;
* ``well_<name>_profile_NNNN.csv`` — well-column snapshots of p, T, s^g
  versus depth, plus ``snapshot_times.csv`` indexing snapshot ordinals to
  simulation times;
* ``diagnostics.csv`` — the solver's per-step iteration counts;
* ``checkpoint.txt`` — a text dump of the full state and controller data,
  written at stage end and on abort, from which a run resumes exactly.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import Assembler, ReservoirState, make_uniform_state, \
    sync_secondary
from .mesh import DfmMesh, build_cartesian_mesh, build_well, load_dfm_mesh
from .solver import SimulationAbort, SolverConfig, TimeLoopResult, \
    WellMemory, fresh_well_memory, initial_well_pressures, time_loop, \
    write_diagnostics
from .thermo import EosCoefficients, FluidEOS, PhaseContext
from .vag import VagDiscretization, distribute_volumes
from .wells import Well, peaceman_index

SECONDS_PER_YEAR = 365.25 * 86400.0
SECONDS_PER_DAY = 86400.0


class ConfigError(ValueError):
    """Scenario configuration rejected; the message names the faulty key."""


# ----------------------------------------------------------------------
# scenario description
# ----------------------------------------------------------------------


@dataclass
class WellSpec:
    """One monitored well: geometry recipe plus control limits.

    The geometry comes either from a vertical node line (``line_x_m``,
    ``line_y_m``: all mesh nodes on that vertical, rooted at the top) or
    from a well carried by the mesh file (``mesh_well`` by name).
    """

    name: str
    kind: str
    bhp_limit_pa: float
    rate_limit_kg_per_s: float
    radius_m: float = 0.1
    line_x_m: float | None = None
    line_y_m: float | None = None
    mesh_well: str | None = None

    def __post_init__(self):
        if self.kind not in ("production", "injection"):
            raise ConfigError(
                f"[well.{self.name}] kind: expected 'production' or "
                f"'injection', got '{self.kind}'")
        has_line = self.line_x_m is not None and self.line_y_m is not None
        if has_line == (self.mesh_well is not None):
            raise ConfigError(
                f"[well.{self.name}]: give either line_x_m/line_y_m or "
                "mesh_well, not both or neither")
        if self.radius_m <= 0:
            raise ConfigError(f"[well.{self.name}] radius_m must be > 0")


@dataclass
class StageSpec:
    """One simulation stage: boundary conditions, wells, step policy.

    ``duration_s=None`` runs to stationarity instead of to a fixed time:
    the stage ends once the max relative state change per year falls
    below ``stationary_rel_per_year``, or at ``max_duration_s``.
    """

    name: str
    dirichlet: tuple = ()
    wells: tuple = ()
    duration_s: float | None = None
    stationary_rel_per_year: float = 1e-6
    max_duration_s: float = 1000.0 * SECONDS_PER_YEAR
    dt_init_s: float = 600.0
    dt_max_s: float = 21600.0
    output_every_s: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.duration_s is not None and self.duration_s <= 0:
            raise ConfigError(f"[stage.{self.name}] duration_s must be > 0")
        if self.duration_s is None and self.stationary_rel_per_year <= 0:
            raise ConfigError(
                f"[stage.{self.name}] stationary_rel_per_year must be > 0")
        for key in ("dt_init_s", "dt_max_s", "max_duration_s"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"[stage.{self.name}] {key} must be > 0")

    @property
    def horizon_s(self) -> float:
        return self.duration_s if self.duration_s is not None \
            else self.max_duration_s


@dataclass
class ScenarioConfig:
    """Complete run description; every quantity in SI units."""

    title: str = "scenario"
    # mesh: either a uniform Cartesian recipe or a mesh-file path
    mesh_cells: tuple | None = None          # (nx, ny, nz)
    mesh_box: tuple | None = None            # ((x0,x1),(y0,y1),(z0,z1))
    mesh_path: str | None = None
    # homogeneous rock
    permeability_m2: float = 1e-14
    porosity: float = 0.1
    thermal_conductivity_w_per_m_k: float = 2.0
    rock_heat_capacity_j_per_m3_k: float = 1.6e6
    # fracture network (used only when the mesh carries fracture faces)
    fracture_permeability_m2: float = 1e-11
    fracture_porosity: float = 0.35
    rel_perm_law: str = "quadratic"
    gravity_m_per_s2: float = 9.81
    eos: EosCoefficients = field(default_factory=EosCoefficients)
    # initial condition: subcooled liquid column, hydrostatic from the top
    initial_pressure_pa: float = 1e6
    initial_temperature_k: float = 300.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    wells: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def validate(self) -> None:
        if (self.mesh_path is None) == (self.mesh_cells is None):
            raise ConfigError(
                "[mesh]: give either a cartesian recipe or a file path")
        if self.mesh_cells is not None and self.mesh_box is None:
            raise ConfigError("[mesh]: cartesian recipe needs box bounds")
        for key in ("permeability_m2", "porosity",
                    "thermal_conductivity_w_per_m_k",
                    "rock_heat_capacity_j_per_m3_k",
                    "fracture_permeability_m2", "fracture_porosity"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"[rock/fracture] {key} must be > 0")
        if not self.stages:
            raise ConfigError("at least one [stage.*] section is required")
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate well names")
        for stage in self.stages:
            for wname in stage.wells:
                if wname not in names:
                    raise ConfigError(
                        f"[stage.{stage.name}] wells: unknown well "
                        f"'{wname}'")
        eos = FluidEOS(self.eos)
        if self.initial_temperature_k >= eos.t_sat(self.initial_pressure_pa):
            raise ConfigError(
                "[initial]: temperature_k must be below saturation at "
                "pressure_pa (runs start as subcooled liquid)")

    def well(self, name: str) -> WellSpec:
        for spec in self.wells:
            if spec.name == name:
                return spec
        raise KeyError(name)


# ----------------------------------------------------------------------
# built-in scenario: vertical producer in a homogeneous box
# ----------------------------------------------------------------------

CASE41_LEVELS = {1: (10, 10, 5), 2: (20, 20, 10),
                 3: (40, 40, 20), 4: (80, 80, 40)}


def builtin_case41(level: int) -> ScenarioConfig:
    """Two-stage vertical-producer convergence scenario.

    A homogeneous 2000 m x 2000 m x 200 m reservoir holding subcooled
    liquid water, equilibrated under gravity against a fixed-state top
    boundary (stage one, well closed), then produced for 30 days through
    a vertical well on the box axis at up to 200 t/h against frozen
    lateral boundaries (stage two, top and bottom closed).  ``level``
    selects the uniform Cartesian refinement, 1 (10x10x5 cells) to 4
    (80x80x40 cells).
    """
    if level not in CASE41_LEVELS:
        raise ConfigError(f"case41 level must be 1..4, got {level}")
    eos = FluidEOS(EosCoefficients())
    p_top = 4.0e6
    config = ScenarioConfig(
        title=f"case41_h{level}",
        mesh_cells=CASE41_LEVELS[level],
        mesh_box=((-1000.0, 1000.0), (-1000.0, 1000.0), (0.0, 200.0)),
        permeability_m2=5e-14,
        porosity=0.15,
        thermal_conductivity_w_per_m_k=2.0,
        rock_heat_capacity_j_per_m3_k=1.6e6,
        rel_perm_law="quadratic",
        gravity_m_per_s2=9.81,
        initial_pressure_pa=p_top,
        initial_temperature_k=eos.t_sat(p_top) - 1.0,
        wells=[WellSpec(name="producer", kind="production",
                        bhp_limit_pa=1.0e5,
                        rate_limit_kg_per_s=200e3 / 3600.0,
                        radius_m=0.1, line_x_m=0.0, line_y_m=0.0)],
        stages=[
            StageSpec(name="equilibration", dirichlet=("zmax",),
                      duration_s=None, stationary_rel_per_year=1e-6,
                      max_duration_s=1000.0 * SECONDS_PER_YEAR,
                      dt_init_s=1e5, dt_max_s=1e9),
            StageSpec(name="production",
                      dirichlet=("xmin", "xmax", "ymin", "ymax"),
                      wells=("producer",), duration_s=30 * SECONDS_PER_DAY,
                      dt_init_s=600.0, dt_max_s=21600.0,
                      output_every_s=5 * SECONDS_PER_DAY),
        ],
    )
    return config


# ----------------------------------------------------------------------
# scenario file round trip
# ----------------------------------------------------------------------

_EOS_FIELDS = {f.name for f in dataclasses.fields(EosCoefficients)}
_SOLVER_KEYS = {
    "newton_rtol": "newton_rtol", "gmres_rtol": "gmres_rtol",
    "max_newton": "max_newton", "max_gmres": "max_gmres",
    "gmres_restart": "gmres_restart", "dt_min_s": "dt_min",
    "max_saturation_move": "max_saturation_move",
    "max_pressure_move": "max_pressure_move",
    "max_context_switches": "max_context_switches",
    "pressure_column_scale": "pressure_column_scale",
    "cpr_inner_rtol": "cpr_inner_rtol",
    "cpr_inner_maxiter": "cpr_inner_maxiter",
    "ilu_drop_tol": "ilu_drop_tol",
    "ilu_fill_factor": "ilu_fill_factor",
}
_SOLVER_INT_KEYS = {"max_newton", "max_gmres", "gmres_restart",
                    "max_context_switches", "cpr_inner_maxiter"}


def _get(section, key, kind, where, *, default=_EOS_FIELDS):
    """Fetch and convert one option; errors carry '[section] key'."""
    if key not in section:
        if default is not _EOS_FIELDS:       # any sentinel would do
            return default
        raise ConfigError(f"{where}: missing key '{key}'")
    raw = section[key]
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"{where} {key}: cannot parse '{raw}' as {kind.__name__}") \
            from None


def _check_keys(section, allowed, where):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key '{key}'")


def load_scenario(path) -> ScenarioConfig:
    """Parse a scenario file; raise :class:`ConfigError` naming any fault."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed scenario file: {exc}") from None

    config = ScenarioConfig()
    known = {"scenario", "mesh", "rock", "fracture", "eos", "initial",
             "solver"}
    for name in parser.sections():
        if name not in known and not name.startswith(("well.", "stage.")):
            raise ConfigError(f"unknown section [{name}]")

    if parser.has_section("scenario"):
        sec = parser["scenario"]
        _check_keys(sec, {"title", "rel_perm_law", "gravity_m_per_s2"},
                    "[scenario]")
        config.title = _get(sec, "title", str, "[scenario]",
                            default=config.title)
        config.rel_perm_law = _get(sec, "rel_perm_law", str, "[scenario]",
                                   default=config.rel_perm_law)
        config.gravity_m_per_s2 = _get(sec, "gravity_m_per_s2", float,
                                       "[scenario]",
                                       default=config.gravity_m_per_s2)

    if not parser.has_section("mesh"):
        raise ConfigError("missing required section [mesh]")
    sec = parser["mesh"]
    kind = _get(sec, "kind", str, "[mesh]")
    if kind == "cartesian":
        _check_keys(sec, {"kind", "nx", "ny", "nz", "x_min_m", "x_max_m",
                          "y_min_m", "y_max_m", "z_min_m", "z_max_m"},
                    "[mesh]")
        config.mesh_cells = tuple(_get(sec, k, int, "[mesh]")
                                  for k in ("nx", "ny", "nz"))
        config.mesh_box = tuple(
            (_get(sec, f"{ax}_min_m", float, "[mesh]"),
             _get(sec, f"{ax}_max_m", float, "[mesh]"))
            for ax in "xyz")
    elif kind == "file":
        _check_keys(sec, {"kind", "path"}, "[mesh]")
        config.mesh_path = _get(sec, "path", str, "[mesh]")
    else:
        raise ConfigError(f"[mesh] kind: expected 'cartesian' or 'file', "
                          f"got '{kind}'")

    if not parser.has_section("rock"):
        raise ConfigError("missing required section [rock]")
    sec = parser["rock"]
    _check_keys(sec, {"permeability_m2", "porosity",
                      "thermal_conductivity_w_per_m_k",
                      "heat_capacity_j_per_m3_k"}, "[rock]")
    config.permeability_m2 = _get(sec, "permeability_m2", float, "[rock]")
    config.porosity = _get(sec, "porosity", float, "[rock]")
    config.thermal_conductivity_w_per_m_k = _get(
        sec, "thermal_conductivity_w_per_m_k", float, "[rock]")
    config.rock_heat_capacity_j_per_m3_k = _get(
        sec, "heat_capacity_j_per_m3_k", float, "[rock]")

    if parser.has_section("fracture"):
        sec = parser["fracture"]
        _check_keys(sec, {"permeability_m2", "porosity"}, "[fracture]")
        config.fracture_permeability_m2 = _get(
            sec, "permeability_m2", float, "[fracture]",
            default=config.fracture_permeability_m2)
        config.fracture_porosity = _get(
            sec, "porosity", float, "[fracture]",
            default=config.fracture_porosity)

    if parser.has_section("eos"):
        sec = parser["eos"]
        values = {}
        for key in sec:
            if key not in _EOS_FIELDS:
                raise ConfigError(f"[eos]: unknown coefficient '{key}'")
            values[key] = _get(sec, key, float, "[eos]")
        config.eos = EosCoefficients(**values)

    if not parser.has_section("initial"):
        raise ConfigError("missing required section [initial]")
    sec = parser["initial"]
    _check_keys(sec, {"pressure_pa", "temperature_k"}, "[initial]")
    config.initial_pressure_pa = _get(sec, "pressure_pa", float, "[initial]")
    config.initial_temperature_k = _get(sec, "temperature_k", float,
                                        "[initial]")

    if parser.has_section("solver"):
        sec = parser["solver"]
        _check_keys(sec, set(_SOLVER_KEYS), "[solver]")
        overrides = {}
        for key in sec:
            conv = int if key in _SOLVER_INT_KEYS else float
            overrides[_SOLVER_KEYS[key]] = _get(sec, key, conv, "[solver]")
        try:
            config.solver = dataclasses.replace(SolverConfig(), **overrides)
        except ValueError as exc:
            raise ConfigError(f"[solver]: {exc}") from None

    for name in parser.sections():
        if not name.startswith("well."):
            continue
        sec = parser[name]
        _check_keys(sec, {"kind", "radius_m", "bhp_limit_pa",
                          "rate_limit_kg_per_s", "line_x_m", "line_y_m",
                          "mesh_well"}, f"[{name}]")
        config.wells.append(WellSpec(
            name=name[len("well."):],
            kind=_get(sec, "kind", str, f"[{name}]"),
            radius_m=_get(sec, "radius_m", float, f"[{name}]", default=0.1),
            bhp_limit_pa=_get(sec, "bhp_limit_pa", float, f"[{name}]"),
            rate_limit_kg_per_s=_get(sec, "rate_limit_kg_per_s", float,
                                     f"[{name}]"),
            line_x_m=_get(sec, "line_x_m", float, f"[{name}]", default=None),
            line_y_m=_get(sec, "line_y_m", float, f"[{name}]", default=None),
            mesh_well=_get(sec, "mesh_well", str, f"[{name}]", default=None),
        ))

    for name in parser.sections():
        if not name.startswith("stage."):
            continue
        sec = parser[name]
        _check_keys(sec, {"duration_s", "run_to_stationarity",
                          "stationary_rel_per_year", "max_duration_s",
                          "dirichlet", "wells", "dt_init_s", "dt_max_s",
                          "output_every_s", "max_steps"}, f"[{name}]")
        stationary = _get(sec, "run_to_stationarity", bool, f"[{name}]",
                          default=False)
        duration = _get(sec, "duration_s", float, f"[{name}]", default=None)
        if stationary == (duration is not None):
            raise ConfigError(
                f"[{name}]: give exactly one of duration_s or "
                "run_to_stationarity = true")
        stage = StageSpec(
            name=name[len("stage."):],
            duration_s=duration,
            stationary_rel_per_year=_get(sec, "stationary_rel_per_year",
                                         float, f"[{name}]", default=1e-6),
            max_duration_s=_get(sec, "max_duration_s", float, f"[{name}]",
                                default=1000.0 * SECONDS_PER_YEAR),
            dirichlet=tuple(_get(sec, "dirichlet", str, f"[{name}]",
                                 default="").split()),
            wells=tuple(_get(sec, "wells", str, f"[{name}]",
                             default="").split()),
            dt_init_s=_get(sec, "dt_init_s", float, f"[{name}]",
                           default=600.0),
            dt_max_s=_get(sec, "dt_max_s", float, f"[{name}]",
                          default=21600.0),
            output_every_s=_get(sec, "output_every_s", float, f"[{name}]",
                                default=None),
            max_steps=_get(sec, "max_steps", int, f"[{name}]", default=None),
        )
        config.stages.append(stage)

    config.validate()
    return config


def save_scenario(config: ScenarioConfig, path) -> None:
    """Write a scenario file that :func:`load_scenario` parses back."""
    config.validate()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    parser["scenario"] = {
        "title": config.title,
        "rel_perm_law": config.rel_perm_law,
        "gravity_m_per_s2": repr(config.gravity_m_per_s2),
    }
    if config.mesh_path is not None:
        parser["mesh"] = {"kind": "file", "path": config.mesh_path}
    else:
        nx, ny, nz = config.mesh_cells
        parser["mesh"] = {"kind": "cartesian", "nx": nx, "ny": ny, "nz": nz}
        for ax, (lo, hi) in zip("xyz", config.mesh_box):
            parser["mesh"][f"{ax}_min_m"] = repr(lo)
            parser["mesh"][f"{ax}_max_m"] = repr(hi)
    parser["rock"] = {
        "permeability_m2": repr(config.permeability_m2),
        "porosity": repr(config.porosity),
        "thermal_conductivity_w_per_m_k":
            repr(config.thermal_conductivity_w_per_m_k),
        "heat_capacity_j_per_m3_k":
            repr(config.rock_heat_capacity_j_per_m3_k),
    }
    parser["fracture"] = {
        "permeability_m2": repr(config.fracture_permeability_m2),
        "porosity": repr(config.fracture_porosity),
    }
    default_eos = EosCoefficients()
    eos_items = {
        f.name: repr(getattr(config.eos, f.name))
        for f in dataclasses.fields(EosCoefficients)
        if getattr(config.eos, f.name) != getattr(default_eos, f.name)
    }
    if eos_items:
        parser["eos"] = eos_items
    parser["initial"] = {
        "pressure_pa": repr(config.initial_pressure_pa),
        "temperature_k": repr(config.initial_temperature_k),
    }
    default_solver = SolverConfig()
    solver_items = {}
    for key, attr in _SOLVER_KEYS.items():
        value = getattr(config.solver, attr)
        if value != getattr(default_solver, attr):
            solver_items[key] = repr(value)
    if solver_items:
        parser["solver"] = solver_items

    for spec in config.wells:
        items = {
            "kind": spec.kind,
            "radius_m": repr(spec.radius_m),
            "bhp_limit_pa": repr(spec.bhp_limit_pa),
            "rate_limit_kg_per_s": repr(spec.rate_limit_kg_per_s),
        }
        if spec.mesh_well is not None:
            items["mesh_well"] = spec.mesh_well
        else:
            items["line_x_m"] = repr(spec.line_x_m)
            items["line_y_m"] = repr(spec.line_y_m)
        parser[f"well.{spec.name}"] = items

    for stage in config.stages:
        items = {}
        if stage.duration_s is not None:
            items["duration_s"] = repr(stage.duration_s)
        else:
            items["run_to_stationarity"] = "true"
            items["stationary_rel_per_year"] = \
                repr(stage.stationary_rel_per_year)
            items["max_duration_s"] = repr(stage.max_duration_s)
        if stage.dirichlet:
            items["dirichlet"] = " ".join(stage.dirichlet)
        if stage.wells:
            items["wells"] = " ".join(stage.wells)
        items["dt_init_s"] = repr(stage.dt_init_s)
        items["dt_max_s"] = repr(stage.dt_max_s)
        if stage.output_every_s is not None:
            items["output_every_s"] = repr(stage.output_every_s)
        if stage.max_steps is not None:
            items["max_steps"] = stage.max_steps
        parser[f"stage.{stage.name}"] = items

    with open(path, "w") as fh:
        parser.write(fh)


# ----------------------------------------------------------------------
# building the discrete problem from a scenario
# ----------------------------------------------------------------------


def build_mesh(config: ScenarioConfig) -> DfmMesh:
    if config.mesh_path is not None:
        return load_dfm_mesh(config.mesh_path)
    nx, ny, nz = config.mesh_cells
    return build_cartesian_mesh(nx, ny, nz, config.mesh_box)


def _line_well_geometry(mesh: DfmMesh, spec: WellSpec):
    extent = np.ptp(mesh.nodes, axis=0).max()
    eps = 1e-6 * extent
    on_line = np.nonzero(
        (np.abs(mesh.nodes[:, 0] - spec.line_x_m) < eps)
        & (np.abs(mesh.nodes[:, 1] - spec.line_y_m) < eps))[0]
    if len(on_line) < 2:
        raise ConfigError(
            f"[well.{spec.name}]: no vertical node line at "
            f"x = {spec.line_x_m}, y = {spec.line_y_m}")
    order = on_line[np.argsort(-mesh.nodes[on_line, 2])]
    edges = [(int(order[i]), int(order[i + 1]))
             for i in range(len(order) - 1)]
    return build_well(mesh, edges, radius=spec.radius_m, name=spec.name)


def build_scenario_wells(config: ScenarioConfig, mesh: DfmMesh,
                         perm_cells) -> dict:
    """All wells of the scenario keyed by name (open or not)."""
    wells = {}
    for spec in config.wells:
        if spec.mesh_well is not None:
            matches = [g for g in mesh.wells if g.name == spec.mesh_well]
            if not matches:
                raise ConfigError(
                    f"[well.{spec.name}] mesh_well: the mesh carries no "
                    f"well named '{spec.mesh_well}'")
            geometry = matches[0]
        else:
            geometry = _line_well_geometry(mesh, spec)
        wi = peaceman_index(mesh, geometry, perm_cells,
                            radius=spec.radius_m)
        wells[spec.name] = Well(geometry, spec.kind,
                                bhp_limit=spec.bhp_limit_pa,
                                rate_limit=spec.rate_limit_kg_per_s,
                                well_index=wi)
    return wells


def dirichlet_nodes_for(mesh: DfmMesh, stage: StageSpec) -> np.ndarray:
    parts = []
    for tag in stage.dirichlet:
        try:
            parts.append(mesh.group(tag))
        except KeyError:
            raise ConfigError(
                f"[stage.{stage.name}] dirichlet: the mesh has no node "
                f"group '{tag}'") from None
    if not parts:
        return np.array([], dtype=int)
    return np.unique(np.concatenate(parts))


@dataclass
class DiscreteProblem:
    """Mesh-level objects shared by every stage of one scenario run."""

    config: ScenarioConfig
    mesh: DfmMesh
    disc: VagDiscretization
    eos: FluidEOS
    perm_cells: np.ndarray
    wells: dict

    @classmethod
    def build(cls, config: ScenarioConfig) -> "DiscreteProblem":
        config.validate()
        mesh = build_mesh(config)
        perm_cells = np.full(mesh.n_cells, config.permeability_m2)
        perm_frac = np.full(mesh.n_fracture_faces,
                            config.fracture_permeability_m2)
        disc = VagDiscretization(mesh, perm_cells, perm_fracture=perm_frac)
        eos = FluidEOS(config.eos)
        wells = build_scenario_wells(config, mesh, perm_cells)
        return cls(config=config, mesh=mesh, disc=disc, eos=eos,
                   perm_cells=perm_cells, wells=wells)

    def stage_assembler(self, stage: StageSpec) -> Assembler:
        config = self.config
        mesh = self.mesh
        dirichlet = dirichlet_nodes_for(mesh, stage)
        porosity_cells = np.full(mesh.n_cells, config.porosity)
        porosity_frac = np.full(mesh.n_fracture_faces,
                                config.fracture_porosity)
        volumes = distribute_volumes(mesh, porosity_cells,
                                     porosity_fracture=porosity_frac,
                                     dirichlet_nodes=dirichlet)
        open_wells = [self.wells[name] for name in stage.wells]
        return Assembler(
            self.disc, volumes, self.eos, wells=open_wells,
            dirichlet_nodes=dirichlet, gravity=config.gravity_m_per_s2,
            rel_perm_law=config.rel_perm_law,
            rock_heat_capacity=config.rock_heat_capacity_j_per_m3_k,
            rock_conductivity=config.thermal_conductivity_w_per_m_k,
            porosity_cells=porosity_cells,
            porosity_fracture=porosity_frac)

    def initial_state(self) -> ReservoirState:
        """Subcooled liquid column in hydrostatic balance from the top."""
        config = self.config
        n_dofs = self.disc.n_sites + self.mesh.n_cells
        state = make_uniform_state(self.eos, n_dofs, PhaseContext.LIQUID,
                                   config.initial_pressure_pa,
                                   config.initial_temperature_k)
        z = np.concatenate([self.disc.site_coords[:, 2],
                            self.mesh.cell_centers[:, 2]])
        z_top = self.mesh.nodes[:, 2].max()
        state.p[:] = hydrostatic_pressure(
            self.eos, config.initial_pressure_pa,
            config.initial_temperature_k, z_top, z,
            gravity=config.gravity_m_per_s2)
        sync_secondary(self.eos, state)
        return state


def hydrostatic_pressure(eos: FluidEOS, p_top: float, t: float,
                         z_top: float, z, *, gravity: float = 9.81,
                         n_sub: int = 64) -> np.ndarray:
    """Liquid-column pressure profile p(z) with dp/dz = -rho_l(p, T) g.

    Fourth-order Runge-Kutta integration downward from ``z_top`` on
    ``n_sub`` substeps to the deepest requested level, then evaluation at
    every entry of ``z`` by integrating between sorted levels.
    """
    z = np.asarray(z, dtype=float)
    levels = np.unique(np.concatenate([[z_top], z]))[::-1]   # descending
    pressures = {levels[0]: float(p_top)}
    p = float(p_top)
    for z_hi, z_lo in zip(levels[:-1], levels[1:]):
        h = (z_lo - z_hi) / n_sub                          # negative
        for _ in range(n_sub):
            k1 = -eos.rho_l(p, t) * gravity
            k2 = -eos.rho_l(p + 0.5 * h * k1, t) * gravity
            k3 = -eos.rho_l(p + 0.5 * h * k2, t) * gravity
            k4 = -eos.rho_l(p + h * k3, t) * gravity
            p += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        pressures[z_lo] = p
    return np.array([pressures[zv] for zv in z])


def stationarity_condition(threshold_per_year: float):
    """Stop condition: max relative state change per year < threshold."""

    def stop(old: ReservoirState, new: ReservoirState, dt: float) -> bool:
        rate = max(
            float(np.max(np.abs(new.p - old.p) / np.maximum(np.abs(new.p),
                                                            1.0))),
            float(np.max(np.abs(new.t - old.t) / np.maximum(np.abs(new.t),
                                                            1.0))),
            float(np.max(np.abs(new.s_g - old.s_g))),
        ) * (SECONDS_PER_YEAR / dt)
        return rate < threshold_per_year

    return stop


# ----------------------------------------------------------------------
# artifact writers
# ----------------------------------------------------------------------

_VTK_CELL_TYPES = {8: 12, 4: 10}       # hexahedron, tetrahedron


def write_vtk_cells(path, mesh: DfmMesh, fields: dict) -> None:
    """Legacy-VTK unstructured grid with per-cell scalar fields."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("reservoir cell fields\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        sizes = [len(cn) for cn in mesh.cell_nodes]
        fh.write(f"CELLS {mesh.n_cells} {mesh.n_cells + sum(sizes)}\n")
        for cn in mesh.cell_nodes:
            fh.write(" ".join([str(len(cn))] + [str(int(n)) for n in cn]))
            fh.write("\n")
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        for size in sizes:
            fh.write(f"{_VTK_CELL_TYPES[size]}\n")
        fh.write(f"CELL_DATA {mesh.n_cells}\n")
        for name, values in fields.items():
            if len(values) != mesh.n_cells:
                raise ValueError(
                    f"field '{name}': {len(values)} values for "
                    f"{mesh.n_cells} cells")
            fh.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for v in values:
                fh.write(f"{float(v)!r}\n")


def write_vtk_fracture(path, mesh: DfmMesh, fields: dict) -> None:
    """Legacy-VTK polygon grid of the fracture faces with scalar fields."""
    loops = [mesh.faces[f] for f in mesh.fracture_faces]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("fracture face fields\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        n = len(loops)
        total = sum(len(loop) for loop in loops)
        fh.write(f"CELLS {n} {n + total}\n")
        for loop in loops:
            fh.write(" ".join([str(len(loop))]
                              + [str(int(v)) for v in loop]))
            fh.write("\n")
        fh.write(f"CELL_TYPES {n}\n")
        for _ in loops:
            fh.write("7\n")                   # VTK_POLYGON
        fh.write(f"CELL_DATA {n}\n")
        for name, values in fields.items():
            if len(values) != n:
                raise ValueError(
                    f"field '{name}': {len(values)} values for {n} "
                    "fracture faces")
            fh.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for v in values:
                fh.write(f"{float(v)!r}\n")


def reservoir_gas_volume(pore_volumes, state: ReservoirState) -> float:
    """Total gas volume: sum of s^g times the porous control volumes."""
    return float(np.sum(state.s_g * np.asarray(pore_volumes)))


def well_node_lengths(mesh: DfmMesh, geometry) -> np.ndarray:
    """Half-sum of incident well-edge lengths per well node."""
    lengths = np.zeros(geometry.n_nodes)
    for i in range(1, geometry.n_nodes):
        a = int(geometry.nodes[geometry.parent[i]])
        b = int(geometry.nodes[i])
        edge = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        lengths[geometry.parent[i]] += 0.5 * edge
        lengths[i] += 0.5 * edge
    return lengths


def well_gas_volume(radius: float, node_lengths, trace) -> float:
    """Gas volume in the well column: s^g times the bore cross-section
    times the node-attached column length, summed over well nodes."""
    area = np.pi * radius**2
    return float(np.sum(trace.s_g * area * node_lengths))


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

_CHECKPOINT_MAGIC = "geovag-checkpoint 1"


@dataclass
class Checkpoint:
    """Resumable run position: stage, time, state, controller memory."""

    title: str
    stage_index: int
    complete: bool
    t: float
    dt_next: float
    state: ReservoirState
    p_wells: np.ndarray
    well_memory: WellMemory


def _write_array(fh, name, values, fmt=repr):
    fh.write(name + " " + " ".join(fmt(v) for v in values) + "\n")


def write_checkpoint(path, checkpoint: Checkpoint) -> None:
    state = checkpoint.state
    with open(path, "w") as fh:
        fh.write(_CHECKPOINT_MAGIC + "\n")
        fh.write(f"title {checkpoint.title}\n")
        fh.write(f"stage {checkpoint.stage_index}\n")
        fh.write(f"complete {int(checkpoint.complete)}\n")
        fh.write(f"t {checkpoint.t!r}\n")
        fh.write(f"dt_next {checkpoint.dt_next!r}\n")
        fh.write(f"n_dofs {state.n_dofs}\n")
        _write_array(fh, "context", state.context,
                     fmt=lambda v: str(int(v)))
        for name in ("p", "t", "s_l", "s_g", "c_l", "c_g"):
            _write_array(fh, name, getattr(state, name),
                         fmt=lambda v: repr(float(v)))
        memory = checkpoint.well_memory
        n_wells = len(checkpoint.p_wells)
        fh.write(f"n_wells {n_wells}\n")
        _write_array(fh, "p_wells", checkpoint.p_wells,
                     fmt=lambda v: repr(float(v)))
        for w in range(n_wells):
            trace_p = memory.trace_p[w]
            if trace_p is None:
                fh.write(f"well {w} trace_p none\n")
            else:
                _write_array(fh, f"well {w} trace_p", trace_p,
                             fmt=lambda v: repr(float(v)))
            mass, energy = memory.fluxes[w]
            _write_array(fh, f"well {w} flux_mass", mass,
                         fmt=lambda v: repr(float(v)))
            _write_array(fh, f"well {w} flux_energy", energy,
                         fmt=lambda v: repr(float(v)))


class CheckpointError(ValueError):
    """Checkpoint file rejected."""


def read_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 1

    def take(prefix):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix + " "):
            raise CheckpointError(
                f"{path}: expected '{prefix} ...' at line {pos + 1}")
        rest = lines[pos][len(prefix) + 1:]
        pos += 1
        return rest

    title = take("title")
    stage_index = int(take("stage"))
    complete = bool(int(take("complete")))
    t = float(take("t"))
    dt_next = float(take("dt_next"))
    n_dofs = int(take("n_dofs"))

    def floats(prefix, count):
        values = np.array([float(v) for v in take(prefix).split()])
        if len(values) != count:
            raise CheckpointError(
                f"{path}: '{prefix}' holds {len(values)} values, "
                f"expected {count}")
        return values

    context = np.array([int(v) for v in take("context").split()],
                       dtype=np.int8)
    if len(context) != n_dofs:
        raise CheckpointError(f"{path}: context length mismatch")
    arrays = {name: floats(name, n_dofs)
              for name in ("p", "t", "s_l", "s_g", "c_l", "c_g")}
    state = ReservoirState(context=context, p=arrays["p"], t=arrays["t"],
                           s_l=arrays["s_l"], s_g=arrays["s_g"],
                           c_l=arrays["c_l"], c_g=arrays["c_g"])
    n_wells = int(take("n_wells"))
    p_wells = floats("p_wells", n_wells)
    trace_p = []
    fluxes = []
    for w in range(n_wells):
        raw = take(f"well {w} trace_p")
        if raw.strip() == "none":
            trace_p.append(None)
            n_nodes = None
        else:
            trace_p.append(np.array([float(v) for v in raw.split()]))
            n_nodes = len(trace_p[-1])
        mass = np.array([float(v)
                         for v in take(f"well {w} flux_mass").split()])
        energy = np.array([float(v)
                           for v in take(f"well {w} flux_energy").split()])
        if n_nodes is not None and (len(mass) != n_nodes
                                    or len(energy) != n_nodes):
            raise CheckpointError(f"{path}: well {w} array length mismatch")
        fluxes.append((mass, energy))
    return Checkpoint(title=title, stage_index=stage_index,
                      complete=complete, t=t, dt_next=dt_next, state=state,
                      p_wells=p_wells,
                      well_memory=WellMemory(trace_p=trace_p, fluxes=fluxes))


# ----------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------


@dataclass
class StageArtifacts:
    """Per-stage observer: time series, field dumps, well profiles."""

    problem: DiscreteProblem
    stage: StageSpec
    assembler: Assembler
    outdir: Path
    snapshot_count: int = 0
    _next_dump_t: float = 0.0
    _rows: list = field(default_factory=list)
    _snapshot_times: list = field(default_factory=list)

    def __post_init__(self):
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.well_lengths = {
            name: well_node_lengths(self.problem.mesh,
                                    self.problem.wells[name].geometry)
            for name in self.stage.wells}
        if self.stage.output_every_s is not None:
            self._next_dump_t = self.stage.output_every_s

    # -- time series ---------------------------------------------------

    def record_initial(self, state: ReservoirState) -> None:
        p_wells = initial_well_pressures(self.assembler, state)
        row = [0.0, reservoir_gas_volume(self.assembler.pore, state)]
        for w, _name in enumerate(self.stage.wells):
            row += [0.0, float(p_wells[w]), 0.0]
        self._rows.append(row)
        self.dump_fields(state, ordinal=self.snapshot_count, t=0.0)
        self.snapshot_count += 1

    def on_step(self, t, state, record, traces) -> None:
        row = [t, reservoir_gas_volume(self.assembler.pore, state)]
        for w, name in enumerate(self.stage.wells):
            spec = self.problem.config.well(name)
            row += [
                well_gas_volume(spec.radius_m, self.well_lengths[name],
                                traces[w]),
                record.well_bhps[w],
                record.well_rates[w],
            ]
        self._rows.append(row)
        self._last = (state, traces)
        if (self.stage.output_every_s is not None
                and t >= self._next_dump_t - 1e-9):
            self.dump_fields(state, ordinal=self.snapshot_count, t=t,
                             traces=traces)
            self.snapshot_count += 1
            while self._next_dump_t <= t + 1e-9:
                self._next_dump_t += self.stage.output_every_s

    # -- artifacts -----------------------------------------------------

    def dump_fields(self, state, *, ordinal, t, traces=None) -> None:
        mesh = self.problem.mesh
        n_sites = self.problem.disc.n_sites
        cells = slice(n_sites, n_sites + mesh.n_cells)
        write_vtk_cells(
            self.outdir / f"fields_{ordinal:04d}.vtk", mesh,
            {"pressure_pa": state.p[cells],
             "temperature_k": state.t[cells],
             "gas_saturation": state.s_g[cells]})
        if mesh.n_fracture_faces:
            faces = slice(mesh.n_nodes, mesh.n_nodes
                          + mesh.n_fracture_faces)
            write_vtk_fracture(
                self.outdir / f"fracture_{ordinal:04d}.vtk", mesh,
                {"pressure_pa": state.p[faces],
                 "temperature_k": state.t[faces],
                 "gas_saturation": state.s_g[faces]})
        if traces is not None:
            for w, name in enumerate(self.stage.wells):
                self.write_profile(name, traces[w], ordinal)
        self._snapshot_times.append((ordinal, t))

    def write_profile(self, name, trace, ordinal) -> None:
        geometry = self.problem.wells[name].geometry
        path = self.outdir / f"well_{name}_profile_{ordinal:04d}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "z_m", "pressure_pa", "temperature_k",
                             "gas_saturation"])
            for i in range(geometry.n_nodes):
                writer.writerow([int(geometry.nodes[i]),
                                 repr(float(geometry.depth[i])),
                                 repr(float(trace.p[i])),
                                 repr(float(trace.t[i])),
                                 repr(float(trace.s_g[i]))])

    def finalize(self, result: TimeLoopResult, records) -> None:
        # final snapshot (skip if the cadence already dumped at final t)
        if not self._snapshot_times \
                or self._snapshot_times[-1][1] < result.t - 1e-9:
            traces = None
            if hasattr(self, "_last") and self._last[0] is result.state:
                traces = self._last[1]
            self.dump_fields(result.state, ordinal=self.snapshot_count,
                             t=result.t, traces=traces)
            self.snapshot_count += 1
        with open(self.outdir / "snapshot_times.csv", "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["snapshot", "t_s"])
            for ordinal, t in self._snapshot_times:
                writer.writerow([ordinal, repr(float(t))])
        header = ["t_s", "gas_volume_reservoir_m3"]
        for name in self.stage.wells:
            header += [f"gas_volume_well_m3[{name}]", f"bhp_pa[{name}]",
                       f"rate_kg_per_s[{name}]"]
        with open(self.outdir / "timeseries.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self._rows:
                writer.writerow([repr(float(v)) for v in row])
        write_diagnostics(self.outdir / "diagnostics.csv", records,
                          well_names=self.stage.wells)


@dataclass
class StageResult:
    name: str
    outdir: Path
    records: list
    state: ReservoirState
    p_wells: np.ndarray
    t: float
    stationary: bool


@dataclass
class RunSummary:
    title: str
    stages: list = field(default_factory=list)

    @property
    def final_state(self) -> ReservoirState:
        return self.stages[-1].state


def describe_problem(problem: DiscreteProblem) -> str:
    """Dry-run report: mesh and unknown counts per stage."""
    mesh, disc = problem.mesh, problem.disc
    n_dofs = disc.n_sites + mesh.n_cells
    lines = [
        f"scenario: {problem.config.title}",
        f"mesh: {mesh.n_cells} cells, {mesh.n_nodes} nodes, "
        f"{mesh.n_fracture_faces} fracture faces",
        f"dofs: {n_dofs} ({disc.n_sites} sites + {mesh.n_cells} cells), "
        f"{2 * n_dofs} reservoir unknowns",
    ]
    for i, stage in enumerate(problem.config.stages):
        dirichlet = dirichlet_nodes_for(mesh, stage)
        unknowns = 2 * n_dofs + len(stage.wells)
        lines.append(
            f"stage {i + 1} ({stage.name}): {len(dirichlet)} fixed-state "
            f"nodes, {len(stage.wells)} open wells, {unknowns} unknowns")
    return "\n".join(lines)


def run_scenario(config: ScenarioConfig, outdir, *, stage_limit=None,
                 checkpoint_from=None, progress=None,
                 observer=None) -> RunSummary:
    """Run every stage of a scenario, writing artifacts under ``outdir``.

    ``stage_limit`` stops after that many stages (1-based count);
    ``checkpoint_from`` resumes from a checkpoint file written by an
    earlier run of the same scenario.  ``observer``, if given, is called
    as ``observer(stage_index, t, state, record, traces)`` after every
    accepted step, alongside the artifact writers.  On abort, a
    checkpoint of the last accepted state is written to the current
    stage directory before the :class:`SimulationAbort` propagates.
    """
    problem = DiscreteProblem.build(config)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    say = progress if progress is not None else (lambda msg: None)

    start_stage = 0
    resume = None
    if checkpoint_from is not None:
        resume = read_checkpoint(checkpoint_from)
        if resume.title != config.title:
            raise CheckpointError(
                f"checkpoint belongs to scenario '{resume.title}', "
                f"not '{config.title}'")
        n_dofs = problem.disc.n_sites + problem.mesh.n_cells
        if resume.state.n_dofs != n_dofs:
            raise CheckpointError(
                f"checkpoint has {resume.state.n_dofs} dofs, the mesh "
                f"needs {n_dofs}")
        start_stage = resume.stage_index + (1 if resume.complete else 0)
        state = resume.state
    else:
        state = problem.initial_state()

    summary = RunSummary(title=config.title)
    n_stages = len(config.stages) if stage_limit is None \
        else min(stage_limit, len(config.stages))

    for index in range(start_stage, n_stages):
        stage = config.stages[index]
        stage_dir = outdir / f"stage{index + 1}"
        asm = problem.stage_assembler(stage)
        asm.set_dirichlet_values(state)
        artifacts = StageArtifacts(problem=problem, stage=stage,
                                   assembler=asm, outdir=stage_dir)
        solver_config = dataclasses.replace(
            config.solver, dt_init=stage.dt_init_s, dt_max=stage.dt_max_s)
        stop = None
        if stage.duration_s is None:
            stop = stationarity_condition(stage.stationary_rel_per_year)

        resuming_here = resume is not None and not resume.complete \
            and index == start_stage
        if resuming_here:
            t0, dt0 = resume.t, resume.dt_next
            p_wells, memory = resume.p_wells, resume.well_memory
        else:
            t0, dt0 = 0.0, None
            p_wells, memory = None, None
            artifacts.record_initial(state)

        say(f"stage {index + 1} ({stage.name}): t_end = "
            f"{stage.horizon_s:.6g} s")
        if observer is None:
            on_step = artifacts.on_step
        else:
            def on_step(t, st, record, traces, _index=index,
                        _artifacts=artifacts):
                _artifacts.on_step(t, st, record, traces)
                observer(_index, t, st, record, traces)
        try:
            result = time_loop(
                asm, state, solver_config, stage.horizon_s, t0=t0,
                p_wells=p_wells, dt0=dt0, well_memory=memory,
                stop_condition=stop, max_steps=stage.max_steps,
                on_step=on_step)
        except SimulationAbort as abort:
            artifacts.finalize(
                TimeLoopResult(state=abort.state, p_wells=abort.p_wells,
                               t=abort.t, records=abort.records),
                abort.records)
            write_checkpoint(stage_dir / "checkpoint.txt", Checkpoint(
                title=config.title, stage_index=index, complete=False,
                t=abort.t, dt_next=abort.dt_next, state=abort.state,
                p_wells=np.asarray(abort.p_wells, dtype=float),
                well_memory=abort.well_memory
                if abort.well_memory is not None
                else fresh_well_memory(asm.wells)))
            raise
        artifacts.finalize(result, result.records)
        write_checkpoint(stage_dir / "checkpoint.txt", Checkpoint(
            title=config.title, stage_index=index, complete=True,
            t=result.t, dt_next=result.dt_next, state=result.state,
            p_wells=np.asarray(result.p_wells, dtype=float),
            well_memory=result.well_memory))
        say(f"stage {index + 1} ({stage.name}): {len(result.records)} "
            f"steps to t = {result.t:.6g} s"
            + (" (stationary)" if result.stationary else ""))
        state = result.state
        summary.stages.append(StageResult(
            name=stage.name, outdir=stage_dir, records=result.records,
            state=result.state, p_wells=result.p_wells, t=result.t,
            stationary=result.stationary))
    return summary
