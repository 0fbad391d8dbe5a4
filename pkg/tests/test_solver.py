"""Solver tests: cell elimination, GMRES, Newton-min, time stepping.

The Schur elimination is checked against dense full-system solves (the
oracle is `numpy.linalg.solve` on the assembled matrix), the Newton loop
against problems with known iteration behaviour (affine residuals converge
in exactly one step; equilibrium states in zero), and the time-step
controller against scripted failure injection.
"""

import csv
from dataclasses import replace

import numpy as np
import pytest

from geovag import solver
from geovag.assembly import Assembler, make_uniform_state, sync_secondary
from geovag.mesh import build_cartesian_mesh
from geovag.solver import (EliminationError, LinearSolveError, NewtonReport,
                           SimulationAbort, SolverConfig,
                           build_cpr_preconditioner, gmres_solve,
                           initial_well_pressures, newton_solve,
                           pending_switches, schur_eliminate_cells, time_loop,
                           update_active_set, write_diagnostics)
from geovag.thermo import EosCoefficients, FluidEOS, PhaseContext
from geovag.vag import VagDiscretization, distribute_volumes
from geovag.wells import Well, production_pressure_drop

import scipy.sparse as sp

from test_assembly import (CONSTANT_DENSITY_EOS, EOS, fractured_well_setup,
                           mixed_context_state)

# An EOS whose residual is affine in (p, T): constant liquid density and
# viscosity, zero liquid heat capacity (so convected enthalpy vanishes and
# internal energy is linear in p), leaving only linear accumulation, Darcy,
# and Fourier terms in the single-phase liquid context.
LINEAR_EOS = FluidEOS(EosCoefficients(
    liquid_compressibility_per_pa=0.0,
    liquid_expansion_linear_per_k=0.0,
    liquid_expansion_quadratic_per_k2=0.0,
    liquid_heat_capacity_j_per_kg_k=0.0,
    liquid_viscosity_exponent_k=0.0,
))


def production_trace(asm, state, p_root):
    well = asm.wells[0]
    nodes = well.geometry.nodes
    n = len(nodes)
    return production_pressure_drop(
        asm.eos, well, p_root, state.p[nodes], np.zeros(n), np.zeros(n),
        fallback_density=np.full(n, 800.0), fallback_t=state.t[nodes],
        gravity=asm.gravity)


def column_scales(n, pressure_cols):
    col = np.ones(n)
    col[pressure_cols] = 1e6
    return col


def solve_split(system):
    """Dense full-system Newton update split into (site, cell, well).

    The full matrix is equilibrated with the assembly row scales and unit
    column scales before factorization; this changes nothing in exact
    arithmetic but keeps the dense oracle's own roundoff from dominating
    the comparison against the Schur path.
    """
    ns2 = 2 * system.n_sites
    nc2 = 2 * system.n_cells
    n = ns2 + nc2 + system.n_wells
    pressure_cols = np.concatenate([np.arange(0, ns2 + nc2, 2),
                                    np.arange(ns2 + nc2, n)])
    col = column_scales(n, pressure_cols)
    row = 1.0 / system.full_scale()
    jac = row[:, None] * system.full_matrix().toarray() * col[None, :]
    full = col * np.linalg.solve(jac, -row * system.full_residual())
    return (full[:ns2], full[ns2:ns2 + nc2].reshape(-1, 2),
            full[ns2 + nc2:])


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


class TestSolverConfig:
    def test_defaults_valid(self):
        cfg = SolverConfig()
        assert cfg.newton_rtol == 1e-8
        assert cfg.gmres_rtol == 1e-8

    @pytest.mark.parametrize("kwargs", [
        {"newton_rtol": 0.0},
        {"gmres_rtol": -1e-8},
        {"dt_growth": 1.0},
        {"dt_cut": 1.0},
        {"dt_cut": 0.0},
        {"max_newton": 0},
        {"dt_init": 0.0},
        {"max_saturation_move": 0.0},
        {"max_pressure_move": 1.0},
    ])
    def test_invalid_parameters_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


# ----------------------------------------------------------------------
# cell elimination
# ----------------------------------------------------------------------


class TestSchurElimination:
    def assert_matches_dense(self, asm, state, p_wells, traces):
        asm.set_dirichlet_values(state)
        system = asm.assemble(state, state.copy(), 3600.0, p_wells=p_wells,
                              traces=traces)
        ds_ref, dc_ref, dw_ref = solve_split(system)

        schur = schur_eliminate_cells(system)
        n_red = schur.matrix.shape[0]
        pressure_cols = np.concatenate([
            np.arange(0, 2 * system.n_sites, 2),
            np.arange(2 * system.n_sites, n_red)])
        col = column_scales(n_red, pressure_cols)
        row = 1.0 / system.scale_site
        reduced = row[:, None] * schur.matrix.toarray() * col[None, :]
        delta_site = col * np.linalg.solve(reduced, row * schur.rhs)
        delta_cell = schur.back_substitute(delta_site)

        ns2 = 2 * system.n_sites
        ref = np.max(np.abs(np.concatenate([ds_ref, dc_ref.ravel(), dw_ref])))
        assert np.max(np.abs(delta_site[:ns2] - ds_ref)) <= 1e-12 * ref
        assert np.max(np.abs(delta_cell - dc_ref)) <= 1e-12 * ref
        if system.n_wells:
            assert np.max(np.abs(delta_site[ns2:] - dw_ref)) <= 1e-12 * ref

    def test_single_cell_mesh_matches_dense_solve(self):
        mesh = build_cartesian_mesh(1, 1, 1, ((0, 100), (0, 100), (0, 50)))
        disc = VagDiscretization(mesh, perm_cells=np.full(1, 5e-14))
        vols = distribute_volumes(mesh, np.full(1, 0.15), (),
                                  dirichlet_nodes=mesh.group("zmax"))
        asm = Assembler(disc, vols, EOS, dirichlet_nodes=mesh.group("zmax"))
        state = mixed_context_state(asm, np.random.default_rng(5))
        self.assert_matches_dense(asm, state, [], [])

    def test_fractured_well_mesh_matches_dense_solve(self):
        _, _, _, asm = fractured_well_setup(with_well=True)
        state = mixed_context_state(asm, np.random.default_rng(11))
        trace = production_trace(asm, state, 4.0e6)
        self.assert_matches_dense(asm, state, [4.0e6], [trace])

    def test_identity_cell_blocks_reduce_to_manual_formula(self):
        _, _, _, asm = fractured_well_setup(with_well=False)
        state = mixed_context_state(asm, np.random.default_rng(2))
        asm.set_dirichlet_values(state)
        system = asm.assemble(state, state.copy(), 3600.0, p_wells=[],
                              traces=[])
        system.cell_diag[:] = np.eye(2)

        n_red = system.n_reduced
        manual = system.a_site.toarray().copy()
        rhs_corr = np.zeros(n_red)
        for sites, cells, b, c in zip(system.group_sites,
                                      system.group_cells,
                                      system.cell_site, system.site_cell):
            nc, m = sites.shape
            for k in range(nc):
                dofs = np.repeat(2 * sites[k], 2) + np.tile([0, 1], m)
                for i in range(m):
                    block = c[k, i] @ b[k]          # (2, 2m)
                    rows = 2 * sites[k, i] + np.arange(2)
                    manual[np.ix_(rows, dofs)] -= block
                    rhs_corr[rows] += c[k, i] @ system.r_cell[cells[k]]
        schur = schur_eliminate_cells(system)
        assert np.allclose(schur.matrix.toarray(), manual,
                           rtol=1e-13, atol=1e-13)
        assert np.allclose(schur.rhs, -(system.r_site - rhs_corr),
                           rtol=1e-13, atol=1e-13)

    def test_singular_cell_block_names_the_cell(self):
        _, _, _, asm = fractured_well_setup(with_well=False)
        state = mixed_context_state(asm, np.random.default_rng(3))
        asm.set_dirichlet_values(state)
        system = asm.assemble(state, state.copy(), 3600.0, p_wells=[],
                              traces=[])
        system.cell_diag[3] = 0.0
        with pytest.raises(EliminationError, match="cell 3"):
            schur_eliminate_cells(system)


# ----------------------------------------------------------------------
# linear solver
# ----------------------------------------------------------------------


def vag_diffusion_matrix(nx, tol_pin=True):
    """SPD two-level diffusion stiffness on an nx^3 mesh, Dirichlet-pinned."""
    mesh = build_cartesian_mesh(nx, nx, nx, ((0, 100), (0, 100), (0, 100)))
    disc = VagDiscretization(mesh, perm_cells=np.full(mesh.n_cells, 1e-13))
    n = disc.n_sites + mesh.n_cells
    rows, cols, vals = [], [], []
    for g in disc.cell_groups:
        nc, m = g.sites.shape
        t = g.trans
        cells = disc.n_sites + g.cells
        rs = t.sum(axis=2)
        rows += [np.broadcast_to(g.sites[:, :, None], (nc, m, m)).ravel(),
                 g.sites.ravel(), np.repeat(cells, m), cells]
        cols += [np.broadcast_to(g.sites[:, None, :], (nc, m, m)).ravel(),
                 np.repeat(cells, m), g.sites.ravel(), cells]
        vals += [t.ravel(), -rs.ravel(), -rs.ravel(), rs.sum(axis=1)]
    a = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    free = np.ones(n, dtype=bool)
    free[mesh.group("zmax")] = False
    return a[free][:, free].tocsr()


class TestGmres:
    def test_identity_converges_in_one_iteration(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal(12)
        x, n_it = gmres_solve(sp.eye(12).tocsr(), b, None, 1e-8, 30, 100)
        assert n_it == 1
        assert np.allclose(x, b, rtol=1e-12)

    def test_zero_rhs_short_circuits(self):
        x, n_it = gmres_solve(sp.eye(5).tocsr(), np.zeros(5), None,
                              1e-8, 30, 100)
        assert n_it == 0
        assert np.array_equal(x, np.zeros(5))

    def test_diffusion_iterations_grow_with_mesh_size(self):
        rng = np.random.default_rng(1)
        counts = []
        for nx in (3, 6):
            a = vag_diffusion_matrix(nx)
            b = rng.standard_normal(a.shape[0])
            x, n_it = gmres_solve(a, b, None, 1e-8, 60, 2000)
            assert np.linalg.norm(b - a @ x) <= 1e-8 * np.linalg.norm(b)
            counts.append(n_it)
        assert counts[1] > counts[0]

    def test_budget_exhaustion_raises(self):
        a = vag_diffusion_matrix(6)
        b = np.random.default_rng(2).standard_normal(a.shape[0])
        with pytest.raises(LinearSolveError, match="gmres"):
            gmres_solve(a, b, None, 1e-12, 5, 5)

    def test_cpr_beats_unpreconditioned_on_well_jacobian(self):
        """Two-stage preconditioner strictly reduces iterations on a
        drawdown-type Jacobian (producer active, mixed contexts)."""
        _, _, _, asm = fractured_well_setup(with_well=True)
        state = mixed_context_state(asm, np.random.default_rng(7))
        asm.set_dirichlet_values(state)
        trace = production_trace(asm, state, 4.0e6)
        system = asm.assemble(state, state.copy(), 600.0, p_wells=[4.0e6],
                              traces=[trace])
        schur = schur_eliminate_cells(system)
        row = 1.0 / system.scale_site
        col = np.ones(schur.matrix.shape[0])
        col[0:2 * system.n_sites:2] = 1e6
        col[2 * system.n_sites:] = 1e6
        scaled = (sp.diags(row) @ schur.matrix @ sp.diags(col)).tocsr()
        rhs = schur.rhs * row

        cpr = build_cpr_preconditioner(scaled, system.n_sites,
                                       system.n_wells)
        _, with_cpr = gmres_solve(scaled, rhs, cpr, 1e-8, 50, 400)
        _, without = gmres_solve(scaled, rhs, None, 1e-8, 50, 4000)
        assert with_cpr < without


# ----------------------------------------------------------------------
# active sets
# ----------------------------------------------------------------------


class TestActiveSet:
    def make_state(self, context, p, y2):
        _, _, _, asm = fractured_well_setup(with_well=False)
        state = make_uniform_state(EOS, asm.n_dofs, context, p, y2)
        return state

    def test_liquid_on_saturation_boundary_opens_gas(self):
        p_tie = float(EOS.p_sat(540.0))
        state = self.make_state(PhaseContext.LIQUID, p_tie, 540.0)
        assert np.all(pending_switches(EOS, state))
        switched = update_active_set(EOS, state)
        assert np.all(switched)
        assert np.all(state.context == PhaseContext.TWO_PHASE)
        assert np.all(state.s_g == 0.0)
        assert np.allclose(state.t, 540.0, atol=1e-6)

    def test_gas_on_saturation_boundary_opens_liquid(self):
        p_tie = float(EOS.p_sat(570.0))
        state = self.make_state(PhaseContext.GAS, p_tie, 570.0)
        switched = update_active_set(EOS, state)
        assert np.all(switched)
        assert np.all(state.context == PhaseContext.TWO_PHASE)
        assert np.all(state.s_g == 1.0)

    def test_two_phase_saturation_bounds_are_stable(self):
        for s_g in (0.0, 1.0, 0.4):
            state = self.make_state(PhaseContext.TWO_PHASE, 4e6, s_g)
            assert not np.any(pending_switches(EOS, state))
            assert not np.any(update_active_set(EOS, state))
            assert np.all(state.context == PhaseContext.TWO_PHASE)

    def test_negative_gas_saturation_drops_gas_phase(self):
        state = self.make_state(PhaseContext.TWO_PHASE, 4e6, 0.5)
        state.s_g[:] = -0.25
        update_active_set(EOS, state)
        assert np.all(state.context == PhaseContext.LIQUID)
        assert np.all(state.s_g == 0.0)
        assert np.all(state.s_l == 1.0)
        assert np.allclose(state.t, EOS.t_sat(4e6), rtol=1e-12)

    def test_oversaturated_gas_drops_liquid_phase(self):
        state = self.make_state(PhaseContext.TWO_PHASE, 4e6, 0.5)
        state.s_g[:] = 1.25
        update_active_set(EOS, state)
        assert np.all(state.context == PhaseContext.GAS)
        assert np.all(state.s_g == 1.0)
        assert np.allclose(state.t, EOS.t_sat(4e6), rtol=1e-12)

    def test_subcooled_liquid_stays_liquid(self):
        state = self.make_state(PhaseContext.LIQUID, 5e6, 500.0)
        assert not np.any(pending_switches(EOS, state))


# ----------------------------------------------------------------------
# Newton
# ----------------------------------------------------------------------


def linear_problem():
    mesh = build_cartesian_mesh(2, 2, 2, ((0, 200), (0, 200), (0, 100)))
    disc = VagDiscretization(mesh, perm_cells=np.full(mesh.n_cells, 5e-14))
    vols = distribute_volumes(mesh, np.full(mesh.n_cells, 0.15), (),
                              dirichlet_nodes=mesh.group("zmax"))
    asm = Assembler(disc, vols, LINEAR_EOS,
                    dirichlet_nodes=mesh.group("zmax"))
    state = make_uniform_state(LINEAR_EOS, asm.n_dofs, PhaseContext.LIQUID,
                               1.0e7, 500.0)
    asm.set_dirichlet_values(state)
    return asm, state


def equilibrium_problem():
    """Closed hydrostatic column of constant-density liquid: residual 0."""
    mesh = build_cartesian_mesh(2, 2, 2, ((0, 200), (0, 200), (0, 100)))
    disc = VagDiscretization(mesh, perm_cells=np.full(mesh.n_cells, 5e-14))
    vols = distribute_volumes(mesh, np.full(mesh.n_cells, 0.15), ())
    asm = Assembler(disc, vols, CONSTANT_DENSITY_EOS)
    state = make_uniform_state(CONSTANT_DENSITY_EOS, asm.n_dofs,
                               PhaseContext.LIQUID, 5e6, 500.0)
    state.p = 5e6 + 1000.0 * asm.gravity_potential
    sync_secondary(CONSTANT_DENSITY_EOS, state)
    return asm, state


def drawdown_problem(rate_limit=2.0, bhp_limit=1e5):
    mesh, disc, vols, asm = fractured_well_setup(with_well=True)
    well = asm.wells[0]
    asm.wells[0] = Well(well.geometry, "production", bhp_limit=bhp_limit,
                        rate_limit=rate_limit, well_index=well.well_index)
    state = make_uniform_state(EOS, asm.n_dofs, PhaseContext.LIQUID,
                               5e6, 540.0)
    asm.set_dirichlet_values(state)
    return asm, state


class TestNewton:
    def test_affine_residual_converges_in_one_iteration(self):
        asm, state = linear_problem()
        config = SolverConfig(gmres_rtol=1e-12, max_gmres=2000)
        result = newton_solve(asm, state, state.copy(), 3600.0, [], [],
                              config)
        assert result.report.converged
        assert result.report.iterations == 1
        assert result.report.residual_norm <= 1e-8 * result.report.reference_norm

    def test_equilibrium_needs_no_iterations(self):
        asm, state = equilibrium_problem()
        result = newton_solve(asm, state, state.copy(), 3600.0, [], [],
                              SolverConfig())
        assert result.report.converged
        assert result.report.iterations == 0

    def test_switch_cap_reports_cycling_failure(self):
        asm, state = equilibrium_problem()
        # a state that must switch context at least once: saturated liquid
        state.p[:] = 0.999 * EOS.p_sat(500.0)
        sync_secondary(CONSTANT_DENSITY_EOS, state)
        config = SolverConfig(max_context_switches=0)
        result = newton_solve(asm, state, state.copy(), 3600.0, [], [],
                              config)
        assert not result.report.converged
        assert "active-set cycling" in result.report.failure_reason

    def test_drawdown_step_converges_with_complementarity(self):
        asm, state = drawdown_problem()
        config = SolverConfig()
        # Seeding the producer exactly at reservoir pressure would leave
        # every coupling flux on the inactive side of its positive-part
        # kink (a zero well row); start from the standard small drawdown.
        p_w0 = initial_well_pressures(asm, state)
        trace = production_trace(asm, state, p_w0[0])
        result = newton_solve(asm, state, state.copy(), 600.0, p_w0,
                              [trace], config)
        assert result.report.converged
        final = result.state
        # thermodynamic complementarity: min(s_alpha, 1 - c_alpha) = 0
        gap_l = np.abs(np.minimum(final.s_l, 1.0 - final.c_l))
        gap_g = np.abs(np.minimum(final.s_g, 1.0 - final.c_g))
        assert gap_l.max() <= 1e-8
        assert gap_g.max() <= 1e-8
        # well complementarity in the scaled sense
        well = asm.wells[0]
        q = result.report.well_rates[0]
        p_w = result.p_wells[0]
        rate_arg = (well.rate_limit - q) / max(well.rate_limit, 1e-10)
        bhp_arg = (p_w - well.bhp_limit) / max(well.bhp_limit, 1e5)
        assert min(rate_arg, bhp_arg) == pytest.approx(0.0, abs=1e-7)
        assert rate_arg >= -1e-7 and bhp_arg >= -1e-7

    def test_initial_well_pressure_seeds_drawdown_within_limits(self):
        asm, state = drawdown_problem()
        p_root = state.p[asm.wells[0].geometry.nodes[0]]
        assert initial_well_pressures(asm, state)[0] == pytest.approx(
            0.98 * p_root)
        # a producer whose pressure bound lies above the seeded drawdown
        # starts at that bound instead
        asm_tight, state_tight = drawdown_problem(bhp_limit=0.999 * 5e6)
        assert initial_well_pressures(asm_tight, state_tight)[0] == (
            pytest.approx(0.999 * 5e6))

    def test_unreachable_rate_switches_well_to_bhp_control(self):
        asm, state = drawdown_problem(rate_limit=1e4)
        config = SolverConfig()
        p_w0 = initial_well_pressures(asm, state)
        trace = production_trace(asm, state, p_w0[0])
        result = newton_solve(asm, state, state.copy(), 600.0, p_w0,
                              [trace], config)
        assert result.report.converged
        assert result.report.well_modes == ["bhp"]
        assert result.p_wells[0] == pytest.approx(1e5, rel=1e-7)
        assert result.report.well_rates[0] < 1e4


# ----------------------------------------------------------------------
# time loop
# ----------------------------------------------------------------------


class TestTimeLoop:
    def test_equilibrium_run_grows_dt_to_cap(self):
        asm, state = equilibrium_problem()
        config = SolverConfig(dt_init=600.0, dt_max=2000.0)
        result = time_loop(asm, state, config, t_end=20000.0)
        assert result.t == pytest.approx(20000.0)
        assert all(r.newton_iterations <= 1 for r in result.records)
        assert result.records[-2].dt == pytest.approx(2000.0)

    def test_forced_failures_cut_dt_then_recover(self, monkeypatch):
        asm, state = equilibrium_problem()
        real = solver.newton_solve

        def flaky(asm_, state_, prev, dt, p_wells, traces, config):
            result = real(asm_, state_, prev, dt, p_wells, traces, config)
            if dt > 200.0:
                result.report.converged = False
                result.report.failure_reason = "forced failure"
            return result

        monkeypatch.setattr(solver, "newton_solve", flaky)
        config = SolverConfig(dt_init=600.0, dt_max=2000.0, dt_min=1.0)
        result = time_loop(asm, state, config, t_end=500.0)
        # the attempted step is clipped to the 500 s horizon before the
        # cuts: 500 -> 250 -> 125 accepted, then 125 * 1.2 = 150 accepted
        assert result.records[0].dt == pytest.approx(125.0)
        assert result.records[1].dt == pytest.approx(150.0)

    def test_dt_floor_aborts_with_state_attached(self, monkeypatch):
        asm, state = equilibrium_problem()

        def always_fails(asm_, state_, prev, dt, p_wells, traces, config):
            return solver.NewtonResult(state_.copy(), np.zeros(0), NewtonReport(
                converged=False, iterations=config.max_newton,
                gmres_iterations=0, residual_norm=np.inf,
                reference_norm=1.0, context_switches=0,
                well_rates=np.zeros(0), well_modes=[],
                failure_reason="scripted"))

        monkeypatch.setattr(solver, "newton_solve", always_fails)
        config = SolverConfig(dt_init=600.0, dt_min=100.0)
        with pytest.raises(SimulationAbort, match="below the floor") as exc:
            time_loop(asm, state, config, t_end=1000.0)
        assert exc.value.t == 0.0
        assert exc.value.records == []
        assert np.array_equal(exc.value.state.p, state.p)

    def test_drawdown_run_is_deterministic(self):
        runs = []
        for _ in range(2):
            asm, state = drawdown_problem()
            config = SolverConfig(dt_init=60.0, dt_max=600.0)
            result = time_loop(asm, state, config, t_end=1200.0)
            runs.append(result)
        a, b = runs
        assert a.records == b.records
        assert np.array_equal(a.state.p, b.state.p)
        assert np.array_equal(a.state.s_g, b.state.s_g)
        assert np.array_equal(a.p_wells, b.p_wells)
        assert all(r.well_modes == ("rate",) for r in a.records)

    def test_stop_condition_ends_run_early(self):
        asm, state = equilibrium_problem()
        config = SolverConfig(dt_init=600.0)
        result = time_loop(asm, state, config, t_end=1e9,
                           stop_condition=lambda old, new, dt: True)
        assert result.stationary
        assert len(result.records) == 1

    def test_step_budget_aborts(self):
        asm, state = equilibrium_problem()
        config = SolverConfig(dt_init=600.0, dt_max=600.0)
        with pytest.raises(SimulationAbort, match="step budget"):
            time_loop(asm, state, config, t_end=1e9, max_steps=3)

    def test_diagnostics_csv_round_trip(self, tmp_path):
        asm, state = drawdown_problem()
        config = SolverConfig(dt_init=60.0, dt_max=600.0)
        result = time_loop(asm, state, config, t_end=600.0)
        path = tmp_path / "diag.csv"
        write_diagnostics(path, result.records, ["probe"])
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t_s", "dt_s", "newton_iterations",
                           "gmres_iterations", "rate_kg_per_s[probe]",
                           "bhp_pa[probe]", "mode[probe]"]
        assert len(rows) == 1 + len(result.records)
        first = rows[1]
        assert float(first[0]) == result.records[0].t
        assert float(first[1]) == result.records[0].dt
        assert int(first[2]) == result.records[0].newton_iterations
        assert float(first[4]) == result.records[0].well_rates[0]
        assert first[6] == result.records[0].well_modes[0]
