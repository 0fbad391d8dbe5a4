"""Configuration, artifact, and CLI tests.

Scenario files are checked by full save/load round trips and by
schema-violation probes whose error messages must name the offending
section and key.  The hydrostatic initial profile is compared against an
independent adaptive integrator (`scipy.integrate.solve_ivp`) and against
the constant-density closed form.  VTK output is validated by a
lightweight structural parser, checkpoints by bit-exact round trips, and
the resume path by comparing an interrupted-plus-resumed run against an
uninterrupted one.
"""

import dataclasses
import functools
import tempfile
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from geovag.assembly import make_uniform_state
from geovag.cli import main
from geovag.io import (CASE41_LEVELS, Checkpoint, CheckpointError,
                       ConfigError, DiscreteProblem, ScenarioConfig,
                       StageSpec, WellSpec, builtin_case41,
                       describe_problem, hydrostatic_pressure,
                       load_scenario, read_checkpoint, reservoir_gas_volume,
                       run_scenario, save_scenario, stationarity_condition,
                       well_gas_volume, well_node_lengths, write_checkpoint,
                       write_vtk_cells, write_vtk_fracture)
from geovag.mesh import DfmMesh, build_cartesian_mesh, write_dfm_mesh
from geovag.solver import SimulationAbort, WellMemory
from geovag.thermo import EosCoefficients, FluidEOS, PhaseContext
from geovag.vag import distribute_volumes

from test_thermo import TSAT_4MPA

EOS = FluidEOS(EosCoefficients())


# ----------------------------------------------------------------------
# shared scenarios
# ----------------------------------------------------------------------


def small_config(**overrides):
    """Two-stage drawdown scenario on a 4x4x4 box; runs in seconds."""
    config = ScenarioConfig(
        title="smallbox",
        mesh_cells=(4, 4, 4),
        mesh_box=((0.0, 200.0), (0.0, 200.0), (0.0, 100.0)),
        permeability_m2=5e-14,
        porosity=0.15,
        initial_pressure_pa=4e6,
        initial_temperature_k=540.0,
        wells=[WellSpec(name="prod", kind="production", bhp_limit_pa=1e5,
                        rate_limit_kg_per_s=4.0, radius_m=0.1,
                        line_x_m=100.0, line_y_m=100.0)],
        stages=[
            StageSpec(name="settle", dirichlet=("zmax",), duration_s=None,
                      stationary_rel_per_year=1e-6, max_duration_s=1e9,
                      dt_init_s=1e4, dt_max_s=1e8),
            StageSpec(name="draw", dirichlet=("xmin", "xmax"),
                      wells=("prod",), duration_s=10800.0,
                      dt_init_s=600.0, dt_max_s=3600.0,
                      output_every_s=7200.0),
        ])
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


@functools.lru_cache(maxsize=None)
def baseline_run():
    """One uninterrupted run of the small scenario, shared across tests."""
    outdir = Path(tempfile.mkdtemp(prefix="geovag_io_baseline_"))
    summary = run_scenario(small_config(), outdir)
    return outdir, summary


# ----------------------------------------------------------------------
# scenario files: round trip and schema validation
# ----------------------------------------------------------------------


def test_scenario_file_round_trip_is_exact(tmp_path):
    config = small_config(
        eos=EosCoefficients(liquid_compressibility_per_pa=4e-10),
        gravity_m_per_s2=9.80665)
    config.solver = dataclasses.replace(config.solver, newton_rtol=1e-9,
                                        max_newton=30)
    config.stages[1] = dataclasses.replace(config.stages[1], max_steps=77)
    path = tmp_path / "scenario.ini"
    save_scenario(config, path)
    loaded = load_scenario(path)
    assert loaded == config


def test_mesh_file_reference_round_trips(tmp_path):
    config = small_config(mesh_cells=None, mesh_box=None,
                          mesh_path="grid.dfm")
    path = tmp_path / "scenario.ini"
    save_scenario(config, path)
    loaded = load_scenario(path)
    assert loaded.mesh_path == "grid.dfm"
    assert loaded.mesh_cells is None


def test_builtin_scenario_round_trips(tmp_path):
    config = builtin_case41(2)
    path = tmp_path / "case.ini"
    save_scenario(config, path)
    assert load_scenario(path) == config


def rewrite_option(path, section, key, value):
    import configparser
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    parser[section][key] = value
    with open(path, "w") as fh:
        parser.write(fh)


@pytest.mark.parametrize("section,key,value,needle", [
    ("rock", "porosityy", "0.1", "[rock]: unknown key 'porosityy'"),
    ("rock", "porosity", "abc", "[rock] porosity"),
    ("stage.draw", "duration_s", "-5", "[stage.draw] duration_s"),
    ("well.prod", "kind", "extraction", "[well.prod] kind"),
])
def test_schema_violations_name_the_offending_key(tmp_path, section, key,
                                                  value, needle):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    rewrite_option(path, section, key, value)
    with pytest.raises(ConfigError) as excinfo:
        load_scenario(path)
    assert needle in str(excinfo.value)


def test_missing_required_section_is_rejected(tmp_path):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    text = "\n".join(line for line in path.read_text().splitlines()
                     if not (line.strip() == "[initial]"
                             or line.startswith(("pressure_pa",
                                                 "temperature_k"))))
    path.write_text(text)
    with pytest.raises(ConfigError, match=r"\[initial\]"):
        load_scenario(path)


def test_unknown_section_is_rejected(tmp_path):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    with open(path, "a") as fh:
        fh.write("\n[boundary]\nkind = closed\n")
    with pytest.raises(ConfigError, match=r"unknown section \[boundary\]"):
        load_scenario(path)


def test_unknown_eos_coefficient_is_rejected(tmp_path):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    with open(path, "a") as fh:
        fh.write("\n[eos]\nliquid_density = 1000\n")
    with pytest.raises(ConfigError,
                       match=r"\[eos\]: unknown coefficient"):
        load_scenario(path)


def test_stage_referencing_unknown_well_is_rejected():
    config = small_config()
    config.stages[1] = dataclasses.replace(config.stages[1],
                                           wells=("ghost",))
    with pytest.raises(ConfigError, match="unknown well 'ghost'"):
        config.validate()


def test_superheated_initial_state_is_rejected():
    config = small_config(initial_temperature_k=560.0)   # t_sat(4 MPa) ~ 544
    with pytest.raises(ConfigError, match=r"\[initial\]"):
        config.validate()


def test_well_spec_needs_exactly_one_geometry_source():
    with pytest.raises(ConfigError, match="not both or neither"):
        WellSpec(name="w", kind="production", bhp_limit_pa=1e5,
                 rate_limit_kg_per_s=1.0, line_x_m=0.0, line_y_m=0.0,
                 mesh_well="w0")
    with pytest.raises(ConfigError, match="not both or neither"):
        WellSpec(name="w", kind="production", bhp_limit_pa=1e5,
                 rate_limit_kg_per_s=1.0)


def test_unknown_dirichlet_tag_is_reported_with_stage():
    config = small_config()
    config.stages[0] = dataclasses.replace(config.stages[0],
                                           dirichlet=("north",))
    problem = DiscreteProblem.build(config)
    with pytest.raises(ConfigError,
                       match=r"\[stage.settle\].*no node group 'north'"):
        describe_problem(problem)


# ----------------------------------------------------------------------
# built-in convergence scenario
# ----------------------------------------------------------------------


def test_builtin_case_level_1_mesh_and_properties():
    config = builtin_case41(1)
    assert config.mesh_cells == (10, 10, 5)
    assert config.mesh_box == ((-1000.0, 1000.0), (-1000.0, 1000.0),
                               (0.0, 200.0))
    assert config.permeability_m2 == 5e-14
    assert config.porosity == 0.15
    assert config.thermal_conductivity_w_per_m_k == 2.0
    assert config.rock_heat_capacity_j_per_m3_k == 1.6e6
    assert config.gravity_m_per_s2 == 9.81
    assert config.rel_perm_law == "quadratic"
    assert config.initial_pressure_pa == 4e6


def test_builtin_case_all_levels_and_rejection():
    assert CASE41_LEVELS == {1: (10, 10, 5), 2: (20, 20, 10),
                             3: (40, 40, 20), 4: (80, 80, 40)}
    for level, cells in CASE41_LEVELS.items():
        assert builtin_case41(level).mesh_cells == cells
    with pytest.raises(ConfigError, match="level must be 1..4"):
        builtin_case41(5)


def test_builtin_case_well_limits():
    spec = builtin_case41(1).wells[0]
    assert spec.kind == "production"
    assert spec.radius_m == 0.1
    assert spec.line_x_m == 0.0 and spec.line_y_m == 0.0
    assert spec.bhp_limit_pa == 1.0e5
    # 200 metric tons per hour of produced mass
    assert spec.rate_limit_kg_per_s == pytest.approx(200.0 / 3.6,
                                                     rel=1e-15)


def test_builtin_case_top_temperature_one_kelvin_below_saturation():
    config = builtin_case41(1)
    assert config.initial_temperature_k == pytest.approx(TSAT_4MPA - 1.0,
                                                         abs=2e-9)


def test_builtin_case_stage_protocol():
    config = builtin_case41(1)
    settle, produce = config.stages
    assert settle.dirichlet == ("zmax",)
    assert settle.wells == ()
    assert settle.duration_s is None          # runs to stationarity
    assert settle.stationary_rel_per_year == 1e-6
    assert produce.dirichlet == ("xmin", "xmax", "ymin", "ymax")
    assert produce.wells == ("producer",)
    assert produce.duration_s == 30 * 86400.0
    assert produce.dt_init_s == 600.0
    assert produce.dt_max_s == 21600.0


# ----------------------------------------------------------------------
# hydrostatic initial profile
# ----------------------------------------------------------------------


def test_hydrostatic_profile_constant_density_closed_form():
    eos = FluidEOS(EosCoefficients(
        liquid_compressibility_per_pa=0.0,
        liquid_expansion_linear_per_k=0.0,
        liquid_expansion_quadratic_per_k2=0.0))
    rho = eos.rho_l(1e6, 300.0)
    z = np.linspace(0.0, 200.0, 11)
    p = hydrostatic_pressure(eos, 2e6, 300.0, 200.0, z, gravity=9.81)
    expected = 2e6 + rho * 9.81 * (200.0 - z)
    assert np.max(np.abs(p - expected) / expected) < 1e-13


def test_hydrostatic_profile_matches_adaptive_integrator():
    t = 540.0
    g = 9.81
    z = np.linspace(0.0, 200.0, 21)
    p = hydrostatic_pressure(EOS, 4e6, t, 200.0, z, gravity=g)
    sol = solve_ivp(lambda zz, pp: EOS.rho_l(pp[0], t) * g,
                    (0.0, 200.0), [4e6], t_eval=200.0 - z[::-1],
                    rtol=1e-12, atol=1e-3, method="RK45", max_step=5.0)
    expected = sol.y[0][::-1]
    assert np.max(np.abs(p - expected) / expected) < 1e-10


def test_initial_state_is_in_hydrostatic_balance():
    problem = DiscreteProblem.build(small_config())
    state = problem.initial_state()
    assert np.all(state.context == PhaseContext.LIQUID)
    # pressure increases monotonically downward along the cell centres
    z = problem.mesh.cell_centers[:, 2]
    n_sites = problem.disc.n_sites
    p_cells = state.p[n_sites:]
    order = np.argsort(z)
    top = p_cells[order[-1]]
    bottom = p_cells[order[0]]
    rho_range = (EOS.rho_l(4e6, 540.0), EOS.rho_l(6e6, 540.0))
    drop = 9.81 * (z[order[-1]] - z[order[0]])
    assert min(rho_range) * drop < bottom - top < max(rho_range) * drop


# ----------------------------------------------------------------------
# stationarity stopping rule
# ----------------------------------------------------------------------


def test_stationarity_condition_scales_rate_to_one_year():
    state_a = make_uniform_state(EOS, 10, PhaseContext.LIQUID, 1e6, 300.0)
    state_b = make_uniform_state(EOS, 10, PhaseContext.LIQUID, 1e6, 300.0)
    state_b.p[3] = 1e6 * (1 + 2e-6)
    year = 365.25 * 86400.0
    stop = stationarity_condition(1e-6)
    # relative change 2e-6 over one year -> rate 2e-6/yr: not stationary
    assert not stop(state_a, state_b, year)
    # the same change over four years -> rate 5e-7/yr: stationary
    assert stop(state_a, state_b, 4 * year)
    # identical states are always stationary
    assert stop(state_a, state_a, 1.0)


# ----------------------------------------------------------------------
# VTK structural checks
# ----------------------------------------------------------------------


def parse_vtk(path):
    """Minimal legacy-VTK reader: points, cells, types, cell fields."""
    tokens = Path(path).read_text().splitlines()
    assert tokens[0].startswith("# vtk DataFile")
    assert tokens[2] == "ASCII"
    assert tokens[3] == "DATASET UNSTRUCTURED_GRID"
    i = 4
    kind, n_points, dtype = tokens[i].split()
    assert kind == "POINTS" and dtype == "double"
    n_points = int(n_points)
    points = np.array([[float(v) for v in tokens[i + 1 + k].split()]
                       for k in range(n_points)])
    i += 1 + n_points
    kind, n_cells, total = tokens[i].split()
    assert kind == "CELLS"
    n_cells, total = int(n_cells), int(total)
    cells = []
    for k in range(n_cells):
        row = [int(v) for v in tokens[i + 1 + k].split()]
        assert row[0] == len(row) - 1
        cells.append(row[1:])
    assert sum(len(c) + 1 for c in cells) == total
    i += 1 + n_cells
    kind, n_types = tokens[i].split()
    assert kind == "CELL_TYPES" and int(n_types) == n_cells
    types = [int(tokens[i + 1 + k]) for k in range(n_cells)]
    i += 1 + n_cells
    kind, n_data = tokens[i].split()
    assert kind == "CELL_DATA" and int(n_data) == n_cells
    i += 1
    fields = {}
    while i < len(tokens) and tokens[i]:
        kind, name, dtype = tokens[i].split()
        assert kind == "SCALARS" and dtype == "double"
        assert tokens[i + 1] == "LOOKUP_TABLE default"
        values = [float(tokens[i + 2 + k]) for k in range(n_cells)]
        fields[name] = np.array(values)
        i += 2 + n_cells
    return points, cells, types, fields


def test_vtk_cell_file_structure(tmp_path):
    mesh = build_cartesian_mesh(2, 2, 2, ((0, 2), (0, 2), (0, 2)))
    values = {"pressure_pa": np.arange(8) * 1.5e6,
              "temperature_k": 300.0 + np.arange(8),
              "gas_saturation": np.linspace(0, 1, 8)}
    path = tmp_path / "fields.vtk"
    write_vtk_cells(path, mesh, values)
    points, cells, types, fields = parse_vtk(path)
    assert points.shape == (27, 3)
    assert np.array_equal(points, mesh.nodes)
    assert len(cells) == 8 and all(len(c) == 8 for c in cells)
    assert types == [12] * 8
    for name, expected in values.items():
        assert np.array_equal(fields[name], expected)


def test_vtk_cell_file_rejects_wrong_field_length(tmp_path):
    mesh = build_cartesian_mesh(2, 2, 2, ((0, 2), (0, 2), (0, 2)))
    with pytest.raises(ValueError, match="field 'pressure_pa'"):
        write_vtk_cells(tmp_path / "bad.vtk", mesh,
                        {"pressure_pa": np.zeros(5)})


def fractured_box():
    base = build_cartesian_mesh(2, 2, 2, ((0.0, 100.0), (0.0, 100.0),
                                          (0.0, 100.0)))
    plane = [loop for loop in base.faces
             if np.allclose(base.nodes[list(loop), 2], 50.0)]
    return DfmMesh(base.nodes, base.cell_nodes,
                   fracture=[(loop, 1e-3) for loop in plane],
                   node_groups={t: base.group(t)
                                for t in ("zmin", "zmax")})


def test_vtk_fracture_file_structure(tmp_path):
    mesh = fractured_box()
    assert mesh.n_fracture_faces == 4
    values = {"pressure_pa": np.arange(4) * 1e6,
              "temperature_k": np.full(4, 500.0),
              "gas_saturation": np.array([0.0, 0.25, 0.5, 1.0])}
    path = tmp_path / "fracture.vtk"
    write_vtk_fracture(path, mesh, values)
    points, cells, types, fields = parse_vtk(path)
    assert points.shape == (27, 3)
    assert len(cells) == 4 and all(len(c) == 4 for c in cells)
    assert types == [7] * 4                     # polygons
    for loop in cells:                          # all corners on the plane
        assert np.allclose(mesh.nodes[loop, 2], 50.0)
    for name, expected in values.items():
        assert np.array_equal(fields[name], expected)


# ----------------------------------------------------------------------
# gas-volume bookkeeping
# ----------------------------------------------------------------------


def test_reservoir_gas_volume_matches_control_volume_sum():
    problem = DiscreteProblem.build(small_config())
    stage = problem.config.stages[1]
    asm = problem.stage_assembler(stage)
    rng = np.random.default_rng(7)
    state = make_uniform_state(EOS, asm.n_dofs, PhaseContext.TWO_PHASE,
                               3e6, 0.0)
    state.s_g[:] = rng.uniform(0.0, 1.0, asm.n_dofs)
    # independent recomputation from a fresh volume distribution
    volumes = distribute_volumes(
        problem.mesh, np.full(problem.mesh.n_cells, 0.15),
        porosity_fracture=np.full(problem.mesh.n_fracture_faces, 0.35),
        dirichlet_nodes=np.unique(np.concatenate(
            [problem.mesh.group(t) for t in stage.dirichlet])))
    pore = np.concatenate([volumes.pore_sites, volumes.pore_cells])
    expected = float(np.sum(pore * state.s_g))
    assert reservoir_gas_volume(asm.pore, state) == pytest.approx(
        expected, rel=1e-14)


def test_well_gas_volume_quadrature():
    problem = DiscreteProblem.build(small_config())
    geometry = problem.wells["prod"].geometry
    lengths = well_node_lengths(problem.mesh, geometry)
    # vertical column of four 25 m edges: half-sums 12.5, 25, 25, 25, 12.5
    assert np.allclose(lengths, [12.5, 25.0, 25.0, 25.0, 12.5])
    assert lengths.sum() == pytest.approx(100.0)

    class Trace:
        s_g = np.array([1.0, 0.5, 0.0, 0.0, 0.0])

    expected = np.pi * 0.1**2 * (1.0 * 12.5 + 0.5 * 25.0)
    assert well_gas_volume(0.1, lengths, Trace()) == pytest.approx(
        expected, rel=1e-14)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def random_checkpoint(n_dofs=23, seed=3):
    rng = np.random.default_rng(seed)
    state = make_uniform_state(EOS, n_dofs, PhaseContext.LIQUID, 5e6, 500.0)
    state.context[:] = rng.integers(0, 3, n_dofs)
    for name in ("p", "t", "s_l", "s_g", "c_l", "c_g"):
        getattr(state, name)[:] = rng.uniform(0.1, 1.0, n_dofs) * 1e6
    memory = WellMemory(
        trace_p=[None, rng.uniform(1e6, 5e6, 4)],
        fluxes=[(rng.standard_normal(3), rng.standard_normal(3)),
                (rng.standard_normal(4), rng.standard_normal(4))])
    return Checkpoint(title="roundtrip", stage_index=1, complete=False,
                      t=rng.uniform(0, 1e7), dt_next=rng.uniform(1, 1e4),
                      state=state, p_wells=rng.uniform(1e5, 1e7, 2),
                      well_memory=memory)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    original = random_checkpoint()
    path = tmp_path / "checkpoint.txt"
    write_checkpoint(path, original)
    loaded = read_checkpoint(path)
    assert loaded.title == original.title
    assert loaded.stage_index == original.stage_index
    assert loaded.complete == original.complete
    assert loaded.t == original.t                      # exact
    assert loaded.dt_next == original.dt_next          # exact
    assert np.array_equal(loaded.state.context, original.state.context)
    for name in ("p", "t", "s_l", "s_g", "c_l", "c_g"):
        a = getattr(loaded.state, name)
        b = getattr(original.state, name)
        assert np.array_equal(a, b)                    # bitwise
    assert np.array_equal(loaded.p_wells, original.p_wells)
    assert loaded.well_memory.trace_p[0] is None
    assert np.array_equal(loaded.well_memory.trace_p[1],
                          original.well_memory.trace_p[1])
    for (ma, ea), (mb, eb) in zip(loaded.well_memory.fluxes,
                                  original.well_memory.fluxes):
        assert np.array_equal(ma, mb) and np.array_equal(ea, eb)


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    path = tmp_path / "not_a_checkpoint.txt"
    path.write_text("NODES 3\n0 0 0\n")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(path)
    good = tmp_path / "good.txt"
    write_checkpoint(good, random_checkpoint())
    truncated = tmp_path / "truncated.txt"
    truncated.write_text("\n".join(
        good.read_text().splitlines()[:5]) + "\n")
    with pytest.raises(CheckpointError):
        read_checkpoint(truncated)


# ----------------------------------------------------------------------
# orchestration on the small scenario
# ----------------------------------------------------------------------


def read_csv_rows(path):
    import csv as csvmod
    with open(path) as fh:
        rows = list(csvmod.reader(fh))
    return rows[0], rows[1:]


def test_two_stage_run_reaches_stationarity_then_produces():
    _, summary = baseline_run()
    settle, draw = summary.stages
    assert settle.stationary is True
    assert draw.stationary is False
    assert draw.t == pytest.approx(10800.0)
    # the producer holds its rate limit throughout the drawdown
    for record in draw.records:
        assert record.well_modes[0] == "rate"
        assert record.well_rates[0] == pytest.approx(4.0, rel=1e-6)
    # drawdown lowers interior pressure relative to the settled state
    assert float(np.min(draw.state.p - settle.state.p)) < -1e3


def test_timeseries_schema_and_identities():
    outdir, summary = baseline_run()
    header, rows = read_csv_rows(outdir / "stage2" / "timeseries.csv")
    assert header == ["t_s", "gas_volume_reservoir_m3",
                      "gas_volume_well_m3[prod]", "bhp_pa[prod]",
                      "rate_kg_per_s[prod]"]
    draw = summary.stages[1]
    assert len(rows) == len(draw.records) + 1      # initial row + steps
    assert float(rows[0][0]) == 0.0
    assert [float(r[0]) for r in rows[1:]] == [rec.t
                                               for rec in draw.records]
    # final-row gas volume equals the control-volume sum over the state
    problem = DiscreteProblem.build(small_config())
    asm = problem.stage_assembler(problem.config.stages[1])
    expected = reservoir_gas_volume(asm.pore, draw.state)
    assert float(rows[-1][1]) == pytest.approx(expected, rel=1e-14)
    # rates in the time series match the step records bit for bit
    assert [float(r[4]) for r in rows[1:]] == [rec.well_rates[0]
                                               for rec in draw.records]


def test_diagnostics_rows_equal_accepted_steps():
    outdir, summary = baseline_run()
    for stage_dir, stage in zip(("stage1", "stage2"), summary.stages):
        header, rows = read_csv_rows(outdir / stage_dir /
                                     "diagnostics.csv")
        assert header[:4] == ["t_s", "dt_s", "newton_iterations",
                              "gmres_iterations"]
        assert len(rows) == len(stage.records)


def test_field_snapshots_match_index():
    outdir, _ = baseline_run()
    for stage_dir in ("stage1", "stage2"):
        header, rows = read_csv_rows(outdir / stage_dir /
                                     "snapshot_times.csv")
        assert header == ["snapshot", "t_s"]
        for ordinal, _t in rows:
            vtk = outdir / stage_dir / f"fields_{int(ordinal):04d}.vtk"
            points, cells, types, fields = parse_vtk(vtk)
            assert len(cells) == 64                  # 4x4x4 cells
            assert set(types) == {12}
            assert set(fields) == {"pressure_pa", "temperature_k",
                                   "gas_saturation"}
    # cadence of 7200 s over 10800 s: initial, one interior, final
    _, rows = read_csv_rows(outdir / "stage2" / "snapshot_times.csv")
    times = [float(t) for _, t in rows]
    assert times[0] == 0.0
    assert times[-1] == pytest.approx(10800.0)
    assert any(7200.0 <= t < 10800.0 for t in times[1:-1])


def test_well_profiles_written_at_snapshots():
    outdir, _ = baseline_run()
    _, rows = read_csv_rows(outdir / "stage2" / "snapshot_times.csv")
    for ordinal, t in rows[1:]:                     # no traces at t = 0
        path = outdir / "stage2" / \
            f"well_prod_profile_{int(ordinal):04d}.csv"
        header, prows = read_csv_rows(path)
        assert header == ["node", "z_m", "pressure_pa", "temperature_k",
                          "gas_saturation"]
        assert len(prows) == 5                      # five column nodes
        z = [float(r[1]) for r in prows]
        assert z == sorted(z, reverse=True)         # root at the top
        p = [float(r[2]) for r in prows]
        assert p == sorted(p)                       # pressure grows down


def test_stage_checkpoints_mark_completion():
    outdir, summary = baseline_run()
    ck1 = read_checkpoint(outdir / "stage1" / "checkpoint.txt")
    assert ck1.stage_index == 0 and ck1.complete
    ck2 = read_checkpoint(outdir / "stage2" / "checkpoint.txt")
    assert ck2.stage_index == 1 and ck2.complete
    assert ck2.t == pytest.approx(10800.0)
    assert np.array_equal(ck2.state.p, summary.final_state.p)


def test_stage_limit_runs_prefix_only(tmp_path):
    summary = run_scenario(small_config(), tmp_path / "out", stage_limit=1)
    assert [s.name for s in summary.stages] == ["settle"]
    assert (tmp_path / "out" / "stage1").is_dir()
    assert not (tmp_path / "out" / "stage2").exists()


def test_abort_writes_resumable_checkpoint(tmp_path):
    config = small_config()
    config.stages[1] = dataclasses.replace(config.stages[1], max_steps=3)
    with pytest.raises(SimulationAbort, match="step budget"):
        run_scenario(config, tmp_path / "out")
    ck = read_checkpoint(tmp_path / "out" / "stage2" / "checkpoint.txt")
    assert ck.stage_index == 1 and not ck.complete
    assert 0.0 < ck.t < 10800.0
    assert ck.dt_next > 0.0


def test_resumed_run_matches_uninterrupted_run(tmp_path):
    _, summary = baseline_run()
    config = small_config()
    config.stages[1] = dataclasses.replace(config.stages[1], max_steps=3)
    with pytest.raises(SimulationAbort):
        run_scenario(config, tmp_path / "broken")
    resumed = run_scenario(
        small_config(), tmp_path / "resumed",
        checkpoint_from=tmp_path / "broken" / "stage2" / "checkpoint.txt")
    a, b = summary.final_state, resumed.final_state
    assert np.array_equal(a.context, b.context)
    for name in ("p", "t", "s_l", "s_g", "c_l", "c_g"):
        ua, ub = getattr(a, name), getattr(b, name)
        scale = max(1.0, float(np.max(np.abs(ua))))
        assert float(np.max(np.abs(ua - ub))) / scale < 1e-10
    assert np.allclose(summary.stages[-1].p_wells,
                       resumed.stages[-1].p_wells, rtol=1e-10)


def test_resume_after_completed_stage_runs_the_next(tmp_path):
    baseline_dir, summary = baseline_run()
    resumed = run_scenario(
        small_config(), tmp_path / "from_stage1",
        checkpoint_from=baseline_dir / "stage1" / "checkpoint.txt")
    assert [s.name for s in resumed.stages] == ["draw"]
    assert np.array_equal(resumed.final_state.p, summary.final_state.p)


def test_checkpoint_from_wrong_scenario_is_rejected(tmp_path):
    baseline_dir, _ = baseline_run()
    config = small_config(title="otherbox")
    with pytest.raises(CheckpointError, match="belongs to scenario"):
        run_scenario(config, tmp_path / "out",
                     checkpoint_from=baseline_dir / "stage1" /
                     "checkpoint.txt")


# ----------------------------------------------------------------------
# command-line interface
# ----------------------------------------------------------------------


def test_cli_case41_writes_loadable_scenario(tmp_path, capsys):
    assert main(["case41", "--level", "1", "--output",
                 str(tmp_path)]) == 0
    path = tmp_path / "case41_h1.ini"
    assert path.exists()
    assert str(path) in capsys.readouterr().out
    assert load_scenario(path) == builtin_case41(1)


def test_cli_dry_run_prints_problem_sizes(tmp_path, capsys):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    assert main(["simulate", "--config", str(path), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "64 cells" in out
    assert "unknowns" in out
    assert "stage 2 (draw)" in out


def test_cli_simulate_writes_artifacts(tmp_path):
    config = small_config()
    config.stages[1] = dataclasses.replace(config.stages[1],
                                           duration_s=3600.0)
    path = tmp_path / "scenario.ini"
    save_scenario(config, path)
    outdir = tmp_path / "results"
    assert main(["simulate", "--config", str(path), "--output",
                 str(outdir)]) == 0
    for stage_dir in ("stage1", "stage2"):
        assert (outdir / stage_dir / "timeseries.csv").exists()
        assert (outdir / stage_dir / "diagnostics.csv").exists()
        assert (outdir / stage_dir / "checkpoint.txt").exists()
    _, rows = read_csv_rows(outdir / "stage2" / "diagnostics.csv")
    _, ts_rows = read_csv_rows(outdir / "stage2" / "timeseries.csv")
    assert len(ts_rows) == len(rows) + 1


def test_cli_rejects_config_errors_with_exit_code_2(tmp_path, capsys):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    rewrite_option(path, "rock", "porosityy", "0.2")
    code = main(["simulate", "--config", str(path), "--dry-run"])
    err = capsys.readouterr().err
    assert code == 2
    assert "porosityy" in err


def test_cli_validates_stage_and_threads(tmp_path, capsys):
    path = tmp_path / "scenario.ini"
    save_scenario(small_config(), path)
    assert main(["simulate", "--config", str(path), "--stage", "5",
                 "--dry-run"]) == 2
    assert "--stage" in capsys.readouterr().err
    assert main(["simulate", "--config", str(path), "--threads", "0",
                 "--dry-run"]) == 2
    assert "--threads" in capsys.readouterr().err


def test_cli_abort_and_resume_round_trip(tmp_path, capsys):
    config = small_config()
    config.stages[1] = dataclasses.replace(config.stages[1], max_steps=3)
    broken = tmp_path / "broken.ini"
    save_scenario(config, broken)
    code = main(["simulate", "--config", str(broken), "--output",
                 str(tmp_path / "broken_out")])
    assert code == 1
    assert "checkpoint" in capsys.readouterr().err
    checkpoint = tmp_path / "broken_out" / "stage2" / "checkpoint.txt"
    assert checkpoint.exists()

    clean = tmp_path / "clean.ini"
    save_scenario(small_config(), clean)
    assert main(["simulate", "--config", str(clean), "--output",
                 str(tmp_path / "resumed_out"), "--checkpoint-from",
                 str(checkpoint)]) == 0
    assert (tmp_path / "resumed_out" / "stage2" /
            "checkpoint.txt").exists()


def test_cli_mesh_info_reports_counts(tmp_path, capsys):
    mesh = fractured_box()
    path = tmp_path / "box.dfm"
    write_dfm_mesh(mesh, path)
    assert main(["mesh-info", str(path)]) == 0
    out = capsys.readouterr().out
    assert "nodes: 27" in out
    assert "cells: 8" in out
    assert "fracture faces: 4" in out
    assert "node group 'zmax': 9 nodes" in out


def test_cli_mesh_info_rejects_missing_file(tmp_path, capsys):
    assert main(["mesh-info", str(tmp_path / "absent.dfm")]) == 2
    assert "error" in capsys.readouterr().err
