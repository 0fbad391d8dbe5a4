"""Newton-min active-set solver with cell elimination and implicit stepping.

The nonlinear system produced by :mod:`geovag.assembly` is solved fully
implicitly.  Each Newton-min iteration

1. eliminates the cell unknowns by a block Schur complement — cells couple
   only to their own sites, so the elimination adds no entries outside the
   site stencil the flux terms already populate;
2. solves the reduced (node + fracture-face + well) system with GMRES,
   preconditioned by a two-stage scheme: an approximate pressure-block
   solve (rows: mass and well equations; columns: pressure and well
   unknowns) combined multiplicatively with an incomplete LU of the full
   reduced matrix;
3. back-substitutes the cell updates;
4. damps the update so saturations move at most ``max_saturation_move``
   and pressures at most ``max_pressure_move`` of their current value (a
   single global factor, preserving the Newton direction);
5. updates the active sets: a single-phase control volume opens the
   missing phase when its pressure crosses the saturation pressure, a
   two-phase one drops a phase when the saturation update crosses 0,
   and each well switches between rate and pressure control when the
   inactive branch of its min-form constraint becomes the smaller one.

Convergence is measured in the scaled global max norm: every equation row
is divided by its reference magnitude (see ``Assembler._row_scales``) and
the iteration stops once that norm falls below ``newton_rtol`` times
``max(1, initial scaled norm)``.  The floor of 1 keeps steps that start at
(or very near) equilibrium from chasing roundoff.

Tie-breaks are deterministic: a single-phase state sitting exactly at
``p = p_sat`` switches to the two-phase context (with the appearing
saturation at 0 or 1), and a two-phase state with a saturation exactly on
a bound keeps the two-phase context.

Time stepping is implicit Euler with a multiplicative controller: a failed
step retries with ``dt_cut * dt``; an accepted one grows the step by
``dt_growth`` up to ``dt_max``.  Falling below ``dt_min`` aborts the
simulation with the last accepted state attached for checkpointing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (AssemblyError, Assembler, ResidualSystem,
                       ReservoirState, sync_secondary)
from .thermo import PhaseContext
from .wells import (coupling_fluxes, injection_pressure_drop,
                    production_pressure_drop)

__all__ = [
    "SolverConfig", "SolverError", "EliminationError", "LinearSolveError",
    "SimulationAbort", "SchurSystem", "schur_eliminate_cells",
    "build_cpr_preconditioner", "gmres_solve", "NewtonReport",
    "NewtonResult", "newton_min_step", "newton_solve", "update_active_set",
    "pending_switches", "StepRecord", "TimeLoopResult", "time_loop",
    "write_diagnostics",
]


class SolverError(RuntimeError):
    """Base class for solver failures."""


class EliminationError(SolverError):
    """A cell diagonal block could not be inverted."""


class LinearSolveError(SolverError):
    """GMRES failed to reach the requested relative residual."""


class SimulationAbort(SolverError):
    """Aborted run; carries the last accepted state and controller data."""

    def __init__(self, message, state, p_wells, t, records, *,
                 dt_next=0.0, well_memory=None):
        super().__init__(message)
        self.state = state
        self.p_wells = p_wells
        self.t = t
        self.records = records
        self.dt_next = dt_next
        self.well_memory = well_memory


@dataclass
class SolverConfig:
    """Tolerances, iteration caps, damping, and time-step controller.

    ``newton_rtol`` and ``gmres_rtol`` are relative residual tolerances;
    Newton uses the scaled max norm documented in the module docstring,
    GMRES the Euclidean norm of the reduced system.  ``dt_*`` drive the
    implicit-Euler controller.  ``max_context_switches`` caps how often a
    single control volume may change phase context within one Newton solve
    before the step is declared failed (active-set cycling guard).
    ``pressure_column_scale`` equilibrates pressure against saturation /
    temperature columns before factoring the preconditioner.
    ``ilu_drop_tol``/``ilu_fill_factor`` bound the second-stage incomplete
    factorization: measured against the library defaults they cut its
    cost several-fold for a handful of extra GMRES iterations, which is
    the right trade once factorization dominates the step cost.
    """

    newton_rtol: float = 1e-8
    gmres_rtol: float = 1e-8
    max_newton: int = 25
    max_gmres: int = 400
    gmres_restart: int = 50
    dt_init: float = 600.0
    dt_growth: float = 1.2
    dt_cut: float = 0.5
    dt_max: float = 21600.0
    dt_min: float = 1e-2
    max_saturation_move: float = 0.5
    max_pressure_move: float = 0.5
    max_context_switches: int = 8
    pressure_column_scale: float = 1e6
    cpr_inner_rtol: float = 0.1
    cpr_inner_maxiter: int = 10
    ilu_drop_tol: float = 5e-3
    ilu_fill_factor: float = 4.0

    def __post_init__(self):
        if self.newton_rtol <= 0 or self.gmres_rtol <= 0:
            raise ValueError("tolerances must be positive")
        if not self.dt_growth > 1.0:
            raise ValueError("dt_growth must exceed 1")
        if not 0.0 < self.dt_cut < 1.0:
            raise ValueError("dt_cut must lie strictly between 0 and 1")
        if self.max_newton < 1 or self.max_gmres < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.dt_init <= 0 or self.dt_max <= 0 or self.dt_min <= 0:
            raise ValueError("time-step parameters must be positive")
        if not (0 < self.max_saturation_move <= 1.0):
            raise ValueError("max_saturation_move must lie in (0, 1]")
        if not (0 < self.max_pressure_move < 1.0):
            raise ValueError("max_pressure_move must lie in (0, 1)")
        if self.ilu_drop_tol < 0:
            raise ValueError("ilu_drop_tol must be non-negative")
        if self.ilu_fill_factor < 1.0:
            raise ValueError("ilu_fill_factor must be at least 1")


# ----------------------------------------------------------------------
# cell elimination
# ----------------------------------------------------------------------


@dataclass
class SchurSystem:
    """Reduced site/well system plus the data to recover cell updates.

    Solving ``matrix @ delta_site = rhs`` yields the Newton update of the
    site and well unknowns (``rhs`` already carries the ``-residual`` sign
    and the elimination correction); :meth:`back_substitute` then returns
    the matching cell updates, shape ``(n_cells, 2)``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_sites: int
    n_wells: int
    group_sites: list
    group_cells: list
    cell_site: list
    cell_dinv: list
    r_cell: np.ndarray

    def back_substitute(self, delta_site: np.ndarray) -> np.ndarray:
        n_cells = self.r_cell.shape[0]
        delta_cell = np.zeros((n_cells, 2))
        for sites, cells, b, dinv in zip(self.group_sites, self.group_cells,
                                         self.cell_site, self.cell_dinv):
            nc, m = sites.shape
            loc = delta_site[(2 * sites[:, :, None]
                              + np.arange(2)[None, None, :])]
            rhs = self.r_cell[cells] + np.einsum(
                "ckjl,cjl->ck", b.reshape(nc, 2, m, 2), loc)
            delta_cell[cells] = -np.einsum("ckb,cb->ck", dinv, rhs)
        return delta_cell


def schur_eliminate_cells(system: ResidualSystem) -> SchurSystem:
    """Eliminate the cell unknowns from a Newton linear system.

    Cells couple only to their own sites, so their 2x2 diagonal blocks can
    be inverted cell by cell and folded into the site stencil; the fill
    produced (site x site couplings within one cell) is already present in
    the assembled site block.  Raises :class:`EliminationError` naming the
    cell if a diagonal block is singular.
    """
    n_red = system.n_reduced
    reduced = system.a_site.copy()
    rhs_corr = np.zeros(n_red)
    dinvs = []
    for sites, cells, b, c in zip(system.group_sites, system.group_cells,
                                  system.cell_site, system.site_cell):
        nc, m = sites.shape
        d = system.cell_diag[cells]
        det = d[:, 0, 0] * d[:, 1, 1] - d[:, 0, 1] * d[:, 1, 0]
        floor = 1e-14 * np.maximum(np.abs(d[:, 0, 0] * d[:, 1, 1]),
                                   np.abs(d[:, 0, 1] * d[:, 1, 0]))
        bad = ~np.isfinite(det) | (np.abs(det) <= floor)
        if np.any(bad):
            cell = int(cells[np.argmax(bad)])
            raise EliminationError(f"singular cell block in cell {cell}")
        dinv = np.empty_like(d)
        dinv[:, 0, 0] = d[:, 1, 1] / det
        dinv[:, 1, 1] = d[:, 0, 0] / det
        dinv[:, 0, 1] = -d[:, 0, 1] / det
        dinv[:, 1, 0] = -d[:, 1, 0] / det
        dinvs.append(dinv)

        cdinv = np.einsum("ciab,cbk->ciak", c, dinv)
        fill = np.einsum("ciak,ckjl->ciajl", cdinv, b.reshape(nc, 2, m, 2))
        rows = (2 * sites[:, :, None, None, None]
                + np.arange(2)[None, None, :, None, None])
        cols = (2 * sites[:, None, None, :, None]
                + np.arange(2)[None, None, None, None, :])
        rows, cols = np.broadcast_arrays(rows, cols)
        reduced -= sp.coo_matrix(
            (fill.ravel(), (rows.ravel(), cols.ravel())),
            shape=(n_red, n_red)).tocsr()

        corr = np.einsum("ciak,ck->cia", cdinv, system.r_cell[cells])
        np.add.at(rhs_corr,
                  2 * sites[:, :, None] + np.arange(2)[None, None, :], corr)

    return SchurSystem(
        matrix=reduced.tocsr(), rhs=-(system.r_site - rhs_corr),
        n_sites=system.n_sites, n_wells=system.n_wells,
        group_sites=system.group_sites, group_cells=system.group_cells,
        cell_site=system.cell_site, cell_dinv=dinvs, r_cell=system.r_cell)


# ----------------------------------------------------------------------
# linear solver
# ----------------------------------------------------------------------


def build_cpr_preconditioner(matrix: sp.csr_matrix, n_sites: int,
                             n_wells: int, inner_rtol: float = 0.1,
                             inner_maxiter: int = 10,
                             drop_tol: float = 5e-3,
                             fill_factor: float = 4.0):
    """Two-stage pressure-first preconditioner for the reduced system.

    Stage one restricts the residual to the pressure subsystem — rows are
    the mass-conservation and well equations, columns the site and well
    pressure unknowns — and solves it approximately with a few GMRES
    iterations preconditioned by an incomplete LU of that block: the
    pressure block carries the long-range elliptic coupling and deserves
    an accurate solve.  Stage two corrects the remaining residual with a
    thresholded incomplete LU of the full matrix (``drop_tol``,
    ``fill_factor``), which captures the stiff local saturation /
    temperature coupling the pressure stage ignores.  The full-matrix
    factorization is kept deliberately sparse: it exists to damp local
    modes, and loosening it well below the library defaults cuts its
    cost several-fold while adding only a handful of outer iterations.
    """
    n = matrix.shape[0]
    idx_p = np.concatenate([np.arange(0, 2 * n_sites, 2),
                            np.arange(2 * n_sites, 2 * n_sites + n_wells)])
    a_pp = matrix[idx_p][:, idx_p].tocsc()
    try:
        ilu_p = spla.spilu(a_pp)
        ilu_full = spla.spilu(matrix.tocsc(), drop_tol=drop_tol,
                              fill_factor=fill_factor)
    except RuntimeError as exc:   # singular factor
        raise LinearSolveError(f"incomplete factorization failed: {exc}")
    m_p = spla.LinearOperator(a_pp.shape, ilu_p.solve)

    def apply(r):
        x = np.zeros(n)
        dp, info = spla.gmres(a_pp, r[idx_p], M=m_p, rtol=inner_rtol,
                              atol=0.0, restart=inner_maxiter,
                              maxiter=1)
        if info != 0:
            dp = ilu_p.solve(r[idx_p])
        x[idx_p] = dp
        x += ilu_full.solve(r - matrix @ x)
        return x

    return spla.LinearOperator((n, n), apply)


def gmres_solve(matrix, rhs, preconditioner, rtol, restart, maxiter):
    """GMRES to a true relative residual ``rtol``; returns (x, iterations).

    The library's stopping test is applied to the preconditioned residual,
    so the result is verified against the unpreconditioned one and the
    iteration continued once if needed.  Raises :class:`LinearSolveError`
    when the iteration budget is exhausted first.
    """
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0
    count = [0]

    def cb(_):
        count[0] += 1

    cycles = max(1, int(np.ceil(maxiter / restart)))
    x, info = spla.gmres(matrix, rhs, M=preconditioner, rtol=rtol, atol=0.0,
                         restart=restart, maxiter=cycles, callback=cb,
                         callback_type="pr_norm")
    true_rel = np.linalg.norm(rhs - matrix @ x) / norm_b
    if true_rel > rtol:
        x, info = spla.gmres(matrix, rhs, x0=x, M=preconditioner, rtol=rtol,
                             atol=0.0, restart=restart, maxiter=cycles,
                             callback=cb, callback_type="pr_norm")
        true_rel = np.linalg.norm(rhs - matrix @ x) / norm_b
    if info != 0 or not np.isfinite(true_rel) or true_rel > rtol:
        raise LinearSolveError(
            f"gmres stalled at relative residual {true_rel:.3e} "
            f"after {count[0]} iterations (target {rtol:.1e})")
    return x, count[0]


# ----------------------------------------------------------------------
# active sets
# ----------------------------------------------------------------------


def _switch_masks(eos, state: ReservoirState):
    ctx = state.context
    liq = ctx == PhaseContext.LIQUID
    gas = ctx == PhaseContext.GAS
    two = ctx == PhaseContext.TWO_PHASE
    open_gas = np.zeros(state.n_dofs, dtype=bool)
    open_liq = np.zeros(state.n_dofs, dtype=bool)
    if np.any(liq):
        open_gas[liq] = state.p[liq] <= eos.p_sat(state.t[liq])
    if np.any(gas):
        open_liq[gas] = state.p[gas] >= eos.p_sat(state.t[gas])
    drop_gas = two & (state.s_g < 0.0)
    drop_liq = two & (state.s_g > 1.0)
    return open_gas, open_liq, drop_gas, drop_liq


def pending_switches(eos, state: ReservoirState) -> np.ndarray:
    """Boolean mask of dofs whose phase context must change."""
    open_gas, open_liq, drop_gas, drop_liq = _switch_masks(eos, state)
    return open_gas | open_liq | drop_gas | drop_liq


def update_active_set(eos, state: ReservoirState) -> np.ndarray:
    """Apply the Newton-min context switches in place.

    A liquid dof with ``p <= p_sat(T)`` opens the gas phase (two-phase
    context, ``s_g = 0``); a gas dof with ``p >= p_sat(T)`` opens the
    liquid phase (``s_g = 1``); a two-phase dof whose gas saturation
    crossed below 0 (above 1) drops the gas (liquid) phase and continues
    as single-phase with ``T = T_sat(p)``.  Ties select the two-phase
    context.  Returns the mask of switched dofs; all secondary variables
    are refreshed.
    """
    open_gas, open_liq, drop_gas, drop_liq = _switch_masks(eos, state)
    if np.any(open_gas):
        state.context[open_gas] = PhaseContext.TWO_PHASE
        state.s_g[open_gas] = 0.0
    if np.any(open_liq):
        state.context[open_liq] = PhaseContext.TWO_PHASE
        state.s_g[open_liq] = 1.0
    if np.any(drop_gas):
        state.context[drop_gas] = PhaseContext.LIQUID
        state.t[drop_gas] = eos.t_sat(state.p[drop_gas])
    if np.any(drop_liq):
        state.context[drop_liq] = PhaseContext.GAS
        state.t[drop_liq] = eos.t_sat(state.p[drop_liq])
    sync_secondary(eos, state)
    return open_gas | open_liq | drop_gas | drop_liq


# ----------------------------------------------------------------------
# Newton-min
# ----------------------------------------------------------------------


@dataclass
class NewtonReport:
    """Outcome of one Newton solve (one attempted time step)."""

    converged: bool
    iterations: int
    gmres_iterations: int
    residual_norm: float
    reference_norm: float
    context_switches: int
    well_rates: np.ndarray
    well_modes: list
    failure_reason: str | None = None


@dataclass
class NewtonResult:
    state: ReservoirState
    p_wells: np.ndarray
    report: NewtonReport


def _damping_factor(state, p_wells, delta_p, delta_y2, delta_w, config):
    """Largest step fraction honoring the saturation and pressure caps."""
    alpha = 1.0
    two = state.context == PhaseContext.TWO_PHASE
    if np.any(two):
        move = np.abs(delta_y2[two])
        biggest = move.max()
        if biggest > config.max_saturation_move:
            alpha = min(alpha, config.max_saturation_move / biggest)
    dp = np.abs(np.concatenate([delta_p, delta_w]))
    pv = np.abs(np.concatenate([state.p, p_wells]))
    nz = dp > 0
    if np.any(nz):
        limit = np.min(config.max_pressure_move * pv[nz] / dp[nz])
        alpha = min(alpha, limit)
    return alpha


def newton_min_step(asm: Assembler, system: ResidualSystem,
                    state: ReservoirState, p_wells: np.ndarray,
                    config: SolverConfig, precond=None):
    """One Newton-min iteration: solve, damp, update, switch contexts.

    Mutates ``state`` and ``p_wells`` in place and returns
    ``(switched_mask, gmres_iterations, preconditioner)``.  Passing the
    returned preconditioner back in reuses its factorizations for the
    next iteration of the same step: the Jacobian drifts slowly between
    Newton iterations, so a slightly stale preconditioner costs a few
    extra GMRES iterations and saves the dominant factorization cost.
    If a reused preconditioner lets GMRES stall, a fresh one is built
    and the solve retried once before the stall is reported.
    """
    n_sites = asm.n_sites
    schur = schur_eliminate_cells(system)

    row = 1.0 / system.scale_site
    col = np.ones(schur.matrix.shape[0])
    col[0:2 * n_sites:2] = config.pressure_column_scale
    col[2 * n_sites:] = config.pressure_column_scale
    scaled = (sp.diags(row) @ schur.matrix @ sp.diags(col)).tocsr()
    rhs = schur.rhs * row

    def fresh_precond():
        return build_cpr_preconditioner(
            scaled, n_sites, system.n_wells,
            inner_rtol=config.cpr_inner_rtol,
            inner_maxiter=config.cpr_inner_maxiter,
            drop_tol=config.ilu_drop_tol,
            fill_factor=config.ilu_fill_factor)

    reused = precond is not None
    if precond is None:
        precond = fresh_precond()
    try:
        y, n_gmres = gmres_solve(scaled, rhs, precond, config.gmres_rtol,
                                 config.gmres_restart, config.max_gmres)
    except LinearSolveError:
        if not reused:
            raise
        precond = fresh_precond()
        y, n_gmres = gmres_solve(scaled, rhs, precond, config.gmres_rtol,
                                 config.gmres_restart, config.max_gmres)
        n_gmres += config.max_gmres   # count the stalled attempt too
    delta_site = col * y
    delta_cell = schur.back_substitute(delta_site)

    delta_p = np.concatenate([delta_site[0:2 * n_sites:2], delta_cell[:, 0]])
    delta_y2 = np.concatenate([delta_site[1:2 * n_sites:2], delta_cell[:, 1]])
    delta_w = delta_site[2 * n_sites:]
    alpha = _damping_factor(state, p_wells, delta_p, delta_y2, delta_w,
                            config)

    state.p += alpha * delta_p
    two = state.context == PhaseContext.TWO_PHASE
    state.s_g[two] += alpha * delta_y2[two]
    state.t[~two] += alpha * delta_y2[~two]
    p_wells += alpha * delta_w
    sync_secondary(asm.eos, state)
    switched = update_active_set(asm.eos, state)
    return switched, n_gmres, precond


def newton_solve(asm: Assembler, state: ReservoirState,
                 prev_state: ReservoirState, dt: float, p_wells, traces,
                 config: SolverConfig) -> NewtonResult:
    """Newton-min loop for one time step of size ``dt``.

    Returns a :class:`NewtonResult` whose report says whether the scaled
    residual norm fell below ``newton_rtol * max(1, initial norm)`` with a
    consistent active set.  Never raises on a step failure — the caller's
    time-step controller decides what to do — but the failure reason is
    recorded.
    """
    state = state.copy()
    p_wells = np.array(p_wells, dtype=float)
    switch_count = np.zeros(state.n_dofs, dtype=int)
    gmres_total = 0

    def failed(reason, it, system=None):
        rates = system.well_rates if system is not None else np.zeros(
            asm.n_wells)
        modes = system.well_modes if system is not None else []
        norm = system.scaled_norm() if system is not None else np.inf
        return NewtonResult(state, p_wells, NewtonReport(
            converged=False, iterations=it, gmres_iterations=gmres_total,
            residual_norm=norm, reference_norm=ref, context_switches=int(
                switch_count.sum()), well_rates=rates, well_modes=modes,
            failure_reason=reason))

    ref = 1.0
    try:
        system = asm.assemble(state, prev_state, dt, p_wells, traces)
    except AssemblyError as exc:
        return failed(f"assembly failed: {exc}", 0)
    ref = max(1.0, system.scaled_norm())

    precond = None
    for it in range(config.max_newton + 1):
        norm = system.scaled_norm()
        if (norm <= config.newton_rtol * ref
                and not np.any(pending_switches(asm.eos, state))):
            return NewtonResult(state, p_wells, NewtonReport(
                converged=True, iterations=it, gmres_iterations=gmres_total,
                residual_norm=norm, reference_norm=ref,
                context_switches=int(switch_count.sum()),
                well_rates=system.well_rates, well_modes=system.well_modes))
        if it == config.max_newton:
            return failed(f"no convergence in {config.max_newton} "
                          f"iterations (scaled norm {norm:.3e})", it, system)
        try:
            switched, n_gmres, precond = newton_min_step(
                asm, system, state, p_wells, config, precond)
        except (LinearSolveError, EliminationError) as exc:
            return failed(str(exc), it, system)
        gmres_total += n_gmres
        switch_count[switched] += 1
        if switch_count.max() > config.max_context_switches:
            dof = int(np.argmax(switch_count))
            return failed(
                f"active-set cycling: dof {dof} switched context "
                f"{switch_count[dof]} times", it + 1, system)
        try:
            system = asm.assemble(state, prev_state, dt, p_wells, traces)
        except AssemblyError as exc:
            return failed(f"assembly failed: {exc}", it + 1)
    raise AssertionError("unreachable")


# ----------------------------------------------------------------------
# time loop
# ----------------------------------------------------------------------


@dataclass
class StepRecord:
    """Diagnostics for one accepted implicit Euler step."""

    t: float
    dt: float
    newton_iterations: int
    gmres_iterations: int
    well_rates: tuple
    well_bhps: tuple
    well_modes: tuple


@dataclass
class WellMemory:
    """Cross-step explicit well data, one entry per well.

    ``trace_p`` holds the previous step's well-column pressures (``None``
    for a well that has not flowed yet); ``fluxes`` the previous converged
    coupling fluxes as ``(mass, energy)`` nodal arrays.  Plain arrays so a
    checkpointed run can resume with the exact controller state.
    """

    trace_p: list
    fluxes: list


def fresh_well_memory(wells) -> WellMemory:
    return WellMemory(
        trace_p=[None] * len(wells),
        fluxes=[(np.zeros(w.geometry.n_nodes), np.zeros(w.geometry.n_nodes))
                for w in wells])


@dataclass
class TimeLoopResult:
    state: ReservoirState
    p_wells: np.ndarray
    t: float
    records: list = field(default_factory=list)
    stationary: bool = False
    dt_next: float = 0.0
    well_memory: WellMemory | None = None


def initial_well_pressures(asm, state) -> np.ndarray:
    """Starting bottom-hole pressures for freshly opened wells.

    A producer whose entire column sits exactly at reservoir pressure has
    an identically zero coupling row (every node flux rests on the
    inactive side of its positive-part kink), which is singular.  Seeding
    a small drawdown — 2% of the root-node pressure, limited by the
    pressure bound — makes the well exchange mass from the first
    iteration; injectors get the mirrored overpressure.
    """
    out = []
    for well in asm.wells:
        p_root = float(state.p[well.geometry.nodes[0]])
        if well.kind == "production":
            out.append(max(well.bhp_limit, 0.98 * p_root))
        else:
            out.append(min(well.bhp_limit, 1.02 * p_root))
    return np.array(out)


def _well_traces(asm, state, p_wells, memory: WellMemory):
    """Per-step explicit well columns from previous-step data."""
    eos = asm.eos
    traces = []
    for w, well in enumerate(asm.wells):
        p_root = float(p_wells[w])
        if well.kind == "injection":
            traces.append(injection_pressure_drop(eos, well, p_root,
                                                  gravity=asm.gravity))
            continue
        nodes = well.geometry.nodes
        q_m, q_e = memory.fluxes[w]
        p_prev = (memory.trace_p[w] if memory.trace_p[w] is not None
                  else np.full(len(nodes), p_root))
        rho_mix = (state.s_l[nodes] * eos.rho_l(state.p[nodes], state.t[nodes])
                   + state.s_g[nodes] * eos.rho_g(state.p[nodes],
                                                  state.t[nodes]))
        traces.append(production_pressure_drop(
            eos, well, p_root, p_prev, q_m, q_e,
            fallback_density=rho_mix, fallback_t=state.t[nodes],
            fallback_s_l=state.s_l[nodes], fallback_s_g=state.s_g[nodes],
            gravity=asm.gravity))
    return traces


def _converged_fluxes(asm, state, p_wells, traces):
    """Per-well nodal coupling fluxes at a converged state."""
    out = []
    for w, well in enumerate(asm.wells):
        nodes = well.geometry.nodes
        cf = coupling_fluxes(asm.eos, well, traces[w], float(p_wells[w]),
                             p=state.p[nodes], t=state.t[nodes],
                             s_l=state.s_l[nodes], s_g=state.s_g[nodes],
                             c_l=state.c_l[nodes], c_g=state.c_g[nodes],
                             rel_perm_law=asm.rel_perm_law)
        out.append((cf.mass.copy(), cf.energy.copy()))
    return out


def time_loop(asm: Assembler, state: ReservoirState, config: SolverConfig,
              t_end: float, *, t0: float = 0.0, p_wells=None, dt0=None,
              well_memory: WellMemory | None = None, stop_condition=None,
              max_steps=None, on_step=None) -> TimeLoopResult:
    """Implicit Euler integration from ``t0`` to ``t_end``.

    ``stop_condition(old_state, new_state, dt)`` may end the run early
    (used for run-to-stationarity stages); ``on_step(t, state, record,
    traces)`` observes each accepted step together with the explicit well
    columns it used.  ``dt0`` and ``well_memory`` override the initial
    controller state so a checkpointed run resumes exactly.  Raises
    :class:`SimulationAbort` with the last accepted state attached when
    the step size falls below ``config.dt_min`` or ``max_steps`` accepted
    steps did not reach ``t_end``.
    """
    state = state.copy()
    if p_wells is None:
        p_wells = initial_well_pressures(asm, state)
    else:
        p_wells = np.array(p_wells, dtype=float)
    memory = well_memory if well_memory is not None \
        else fresh_well_memory(asm.wells)

    t = t0
    dt = min(config.dt_init if dt0 is None else dt0, config.dt_max)
    records = []
    stationary = False

    while t < t_end - 1e-12 * max(abs(t_end), 1.0):
        if max_steps is not None and len(records) >= max_steps:
            raise SimulationAbort(
                f"step budget of {max_steps} exhausted at t = {t:.6e} s",
                state, p_wells, t, records, dt_next=dt, well_memory=memory)
        dt_step = min(dt, t_end - t)
        traces = _well_traces(asm, state, p_wells, memory)
        result = newton_solve(asm, state, state, dt_step, p_wells, traces,
                              config)
        if not result.report.converged:
            dt = dt_step * config.dt_cut
            if dt < config.dt_min:
                raise SimulationAbort(
                    f"time step {dt:.3e} s fell below the floor "
                    f"{config.dt_min:.3e} s at t = {t:.6e} s "
                    f"({result.report.failure_reason})",
                    state, p_wells, t, records, dt_next=dt,
                    well_memory=memory)
            continue

        old_state = state
        state = result.state
        p_wells = result.p_wells
        t += dt_step
        report = result.report
        record = StepRecord(
            t=t, dt=dt_step, newton_iterations=report.iterations,
            gmres_iterations=report.gmres_iterations,
            well_rates=tuple(float(r) for r in report.well_rates),
            well_bhps=tuple(float(p) for p in p_wells),
            well_modes=tuple(report.well_modes))
        records.append(record)
        if on_step is not None:
            on_step(t, state, record, traces)
        memory = WellMemory(
            trace_p=[tr.p.copy() for tr in traces],
            fluxes=_converged_fluxes(asm, state, p_wells, traces))
        dt = min(dt_step * config.dt_growth, config.dt_max)
        if stop_condition is not None and stop_condition(old_state, state,
                                                         dt_step):
            stationary = True
            break
    return TimeLoopResult(state=state, p_wells=p_wells, t=t,
                          records=records, stationary=stationary,
                          dt_next=dt, well_memory=memory)


def write_diagnostics(path, records, well_names=()) -> None:
    """One CSV row per accepted step: t, dt, iteration counts, well data."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["t_s", "dt_s", "newton_iterations", "gmres_iterations"]
        for name in well_names:
            header += [f"rate_kg_per_s[{name}]", f"bhp_pa[{name}]",
                       f"mode[{name}]"]
        writer.writerow(header)
        for rec in records:
            row = [repr(rec.t), repr(rec.dt), rec.newton_iterations,
                   rec.gmres_iterations]
            for w in range(len(well_names)):
                row += [repr(rec.well_rates[w]), repr(rec.well_bhps[w]),
                        rec.well_modes[w]]
            writer.writerow(row)
