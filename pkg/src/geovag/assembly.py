"""Fully implicit residual and Jacobian assembly.

Unknown layout
--------------
Every control volume (mesh node, fracture face, cell — in that order) is a
*dof* carrying one phase context and two primary unknowns: ``Y1 = p`` always,
``Y2 = s_g`` in the two-phase context and ``Y2 = T`` in the single-phase
contexts.  All remaining state variables (``T`` or ``s_g``, saturations,
water fractions in each phase) are secondary: they are eliminated locally
per context, and every derivative in the Jacobian is chained through that
elimination in one central place (`sync_state` / `StateTables`), so the
residual and the Jacobian cannot disagree about it.

Each dof contributes a mass and an energy equation; each well appends one
bottom-hole pressure unknown and one min-form constraint row.  The global
vector is ``[site dofs (2 each), cell dofs (2 each), wells (1 each)]`` with
sites = nodes then fracture faces, matching the discretization's site
numbering.

The Jacobian is returned in pieces suited to eliminating the cell unknowns
(cells couple only to their own sites, never to each other): a site/well
sparse block, per-cell dense 2x2 diagonal blocks, and the rectangular
couplings per cell group.  `ResidualSystem.full_matrix` reassembles the
complete sparse matrix (used by the finite-difference validation and small
runs).

Assembly is fully vectorized over stencil groups and performs no
order-dependent parallel reductions, so results are bitwise independent of
thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .thermo import FluidEOS, PhaseContext, rel_perm_d
from .vag import VagDiscretization, VolumeDistribution, effective_thermal_conductivity
from .wells import Well, WellTrace, coupling_fluxes, well_residual

__all__ = [
    "AssemblyError",
    "ReservoirState",
    "ResidualSystem",
    "Assembler",
    "make_uniform_state",
]


class AssemblyError(RuntimeError):
    """The assembled system is invalid (non-finite entries, bad contexts)."""


@dataclass
class ReservoirState:
    """Complete thermodynamic state of every dof (sites first, cells after).

    ``context`` drives the primary-unknown meaning; the secondary fields are
    kept consistent with the primaries by `sync_secondary`.
    """

    context: np.ndarray
    p: np.ndarray
    t: np.ndarray
    s_l: np.ndarray
    s_g: np.ndarray
    c_l: np.ndarray
    c_g: np.ndarray

    def copy(self) -> "ReservoirState":
        return ReservoirState(*(getattr(self, f).copy() for f in (
            "context", "p", "t", "s_l", "s_g", "c_l", "c_g")))

    @property
    def n_dofs(self) -> int:
        return len(self.p)

    def y2(self) -> np.ndarray:
        """Second primary unknown: gas saturation or temperature by context."""
        return np.where(self.context == PhaseContext.TWO_PHASE, self.s_g, self.t)


def sync_secondary(eos: FluidEOS, state: ReservoirState) -> None:
    """Fill all secondary fields from ``(context, p, Y2)`` in place.

    Two-phase: ``T = T_sat(p)``, ``s_l = 1 - s_g``, ``c_l = c_g = 1``.
    Liquid: ``s_l = 1``, ``c_l = 1``, ``c_g = p_sat(T)/p``.
    Gas: ``s_g = 1``, ``c_g = 1``, ``c_l = p/p_sat(T)``.
    """
    ctx = state.context
    two = ctx == PhaseContext.TWO_PHASE
    liq = ctx == PhaseContext.LIQUID
    gas = ctx == PhaseContext.GAS
    if np.any(two):
        state.t[two] = eos.t_sat(state.p[two])
        state.s_l[two] = 1.0 - state.s_g[two]
        state.c_l[two] = 1.0
        state.c_g[two] = 1.0
    if np.any(liq):
        state.s_l[liq] = 1.0
        state.s_g[liq] = 0.0
        state.c_l[liq] = 1.0
        state.c_g[liq] = eos.p_sat(state.t[liq]) / state.p[liq]
    if np.any(gas):
        state.s_l[gas] = 0.0
        state.s_g[gas] = 1.0
        state.c_g[gas] = 1.0
        state.c_l[gas] = state.p[gas] / eos.p_sat(state.t[gas])


def make_uniform_state(eos: FluidEOS, n_dofs: int, context: PhaseContext,
                       p: float, y2: float) -> ReservoirState:
    """Uniform state helper: every dof at the same context and primaries."""
    state = ReservoirState(
        context=np.full(n_dofs, int(context), dtype=np.int8),
        p=np.full(n_dofs, float(p)),
        t=np.zeros(n_dofs),
        s_l=np.zeros(n_dofs),
        s_g=np.zeros(n_dofs),
        c_l=np.zeros(n_dofs),
        c_g=np.zeros(n_dofs),
    )
    if context == PhaseContext.TWO_PHASE:
        state.s_g[:] = y2
    else:
        state.t[:] = y2
    sync_secondary(eos, state)
    return state


class StateTables:
    """Per-dof property values and their derivatives w.r.t. (Y1, Y2).

    Everything downstream differentiates against the primary unknowns
    through the chain-rule arrays built here:
    ``df/dY = df/dp + df/dT * dT/dY`` plus the saturation and
    water-fraction chains of the active context.
    """

    def __init__(self, eos: FluidEOS, state: ReservoirState,
                 rel_perm_law: str = "quadratic"):
        ctx = state.context
        two = ctx == PhaseContext.TWO_PHASE
        liq = ctx == PhaseContext.LIQUID
        gas = ctx == PhaseContext.GAS
        n = state.n_dofs
        p, t = state.p, state.t

        # chain of the secondary variables w.r.t. (Y1, Y2)
        self.dt_d1 = np.zeros(n)
        self.dt_d2 = np.where(two, 0.0, 1.0)
        if np.any(two):
            self.dt_d1[two] = eos.t_sat_d(p[two])[1]
        self.ds_g_d2 = np.where(two, 1.0, 0.0)
        self.ds_l_d2 = -self.ds_g_d2
        self.dc_l_d1 = np.zeros(n)
        self.dc_l_d2 = np.zeros(n)
        self.dc_g_d1 = np.zeros(n)
        self.dc_g_d2 = np.zeros(n)
        if np.any(liq):
            psat = eos.p_sat(t[liq])
            dpsat = eos.dp_sat_dt(t[liq])
            self.dc_g_d1[liq] = -psat / p[liq] ** 2
            self.dc_g_d2[liq] = dpsat / p[liq]
        if np.any(gas):
            psat = eos.p_sat(t[gas])
            dpsat = eos.dp_sat_dt(t[gas])
            self.dc_l_d1[gas] = 1.0 / psat
            self.dc_l_d2[gas] = -p[gas] * dpsat / psat ** 2

        def chain(value_dp_dt):
            v, dp_, dt_ = value_dp_dt
            return (np.asarray(v, dtype=float),
                    dp_ + dt_ * self.dt_d1, dt_ * self.dt_d2)

        self.rho_l, self.rho_l_d1, self.rho_l_d2 = chain(eos.rho_l_d(p, t))
        self.rho_g, self.rho_g_d1, self.rho_g_d2 = chain(eos.rho_g_d(p, t))
        mu_l, mu_l_d1, mu_l_d2 = chain(eos.mu_l_d(p, t))
        mu_g, mu_g_d1, mu_g_d2 = chain(eos.mu_g_d(p, t))
        self.h_l, self.h_l_d1, self.h_l_d2 = chain(eos.h_l_d(p, t))
        self.h_g, self.h_g_d1, self.h_g_d2 = chain(eos.h_g_d(p, t))
        e_l, e_l_d1, e_l_d2 = chain(eos.e_l_d(p, t))
        e_g, e_g_d1, e_g_d2 = chain(eos.e_g_d(p, t))

        kr_l, dkr_l = rel_perm_d(state.s_l, rel_perm_law)
        kr_g, dkr_g = rel_perm_d(state.s_g, rel_perm_law)

        # phase mass mobilities a = c * (rho/mu) * kr
        m_l = self.rho_l / mu_l
        m_g = self.rho_g / mu_g
        m_l_d1 = (self.rho_l_d1 - m_l * mu_l_d1) / mu_l
        m_l_d2 = (self.rho_l_d2 - m_l * mu_l_d2) / mu_l
        m_g_d1 = (self.rho_g_d1 - m_g * mu_g_d1) / mu_g
        m_g_d2 = (self.rho_g_d2 - m_g * mu_g_d2) / mu_g
        c_l, c_g = state.c_l, state.c_g
        self.a_l = c_l * m_l * kr_l
        self.a_g = c_g * m_g * kr_g
        self.a_l_d1 = self.dc_l_d1 * m_l * kr_l + c_l * m_l_d1 * kr_l
        self.a_g_d1 = self.dc_g_d1 * m_g * kr_g + c_g * m_g_d1 * kr_g
        self.a_l_d2 = (self.dc_l_d2 * m_l * kr_l + c_l * m_l_d2 * kr_l
                       + c_l * m_l * dkr_l * self.ds_l_d2)
        self.a_g_d2 = (self.dc_g_d2 * m_g * kr_g + c_g * m_g_d2 * kr_g
                       + c_g * m_g * dkr_g * self.ds_g_d2)

        # energy mobilities h * a
        self.ha_l = self.h_l * self.a_l
        self.ha_g = self.h_g * self.a_g
        self.ha_l_d1 = self.h_l_d1 * self.a_l + self.h_l * self.a_l_d1
        self.ha_l_d2 = self.h_l_d2 * self.a_l + self.h_l * self.a_l_d2
        self.ha_g_d1 = self.h_g_d1 * self.a_g + self.h_g * self.a_g_d1
        self.ha_g_d2 = self.h_g_d2 * self.a_g + self.h_g * self.a_g_d2

        # saturation-fraction weights for the accumulations
        w_l = state.s_l * c_l
        w_g = state.s_g * c_g
        w_l_d1 = state.s_l * self.dc_l_d1
        w_g_d1 = state.s_g * self.dc_g_d1
        w_l_d2 = self.ds_l_d2 * c_l + state.s_l * self.dc_l_d2
        w_g_d2 = self.ds_g_d2 * c_g + state.s_g * self.dc_g_d2
        self.mass_density = self.rho_l * w_l + self.rho_g * w_g
        self.mass_density_d1 = (self.rho_l_d1 * w_l + self.rho_l * w_l_d1
                                + self.rho_g_d1 * w_g + self.rho_g * w_g_d1)
        self.mass_density_d2 = (self.rho_l_d2 * w_l + self.rho_l * w_l_d2
                                + self.rho_g_d2 * w_g + self.rho_g * w_g_d2)
        erl = e_l * self.rho_l
        erg = e_g * self.rho_g
        erl_d1 = e_l_d1 * self.rho_l + e_l * self.rho_l_d1
        erl_d2 = e_l_d2 * self.rho_l + e_l * self.rho_l_d2
        erg_d1 = e_g_d1 * self.rho_g + e_g * self.rho_g_d1
        erg_d2 = e_g_d2 * self.rho_g + e_g * self.rho_g_d2
        self.energy_density = erl * w_l + erg * w_g
        self.energy_density_d1 = (erl_d1 * w_l + erl * w_l_d1
                                  + erg_d1 * w_g + erg * w_g_d1)
        self.energy_density_d2 = (erl_d2 * w_l + erl * w_l_d2
                                  + erg_d2 * w_g + erg * w_g_d2)
        self.t = t


@dataclass
class ResidualSystem:
    """Residual vector, Jacobian pieces, and diagnostics for one iterate.

    ``r_site`` stacks the site equations (2 per site) followed by one row
    per well; ``r_cell`` holds the cell equations (n_cells, 2).  ``a_site``
    is the sparse site/well block.  Per cell group ``g``:
    ``cell_diag[g.cells]`` are the 2x2 cell blocks, ``cell_site[gi]`` the
    (nc, 2, 2m) cell-equation x site-unknown couplings and
    ``site_cell[gi]`` the (nc, m, 2, 2) site-equation x cell-unknown
    couplings.  ``scale_site`` / ``scale_cell`` hold the row scalings used
    by the convergence norm.
    """

    n_sites: int
    n_cells: int
    n_wells: int
    r_site: np.ndarray
    r_cell: np.ndarray
    a_site: sp.csr_matrix
    cell_diag: np.ndarray
    group_cells: list
    group_sites: list
    cell_site: list
    site_cell: list
    scale_site: np.ndarray
    scale_cell: np.ndarray
    well_rates: np.ndarray
    well_modes: list

    @property
    def n_reduced(self) -> int:
        return 2 * self.n_sites + self.n_wells

    def scaled_norm(self) -> float:
        parts = [np.abs(self.r_site) / self.scale_site]
        if self.n_cells:
            parts.append(
                (np.abs(self.r_cell) / self.scale_cell).reshape(-1)
            )
        return float(max(p.max() if len(p) else 0.0 for p in parts))

    def full_residual(self) -> np.ndarray:
        """[site eqs, cell eqs, well rows] as one vector."""
        return np.concatenate([
            self.r_site[: 2 * self.n_sites],
            self.r_cell.reshape(-1),
            self.r_site[2 * self.n_sites:],
        ])

    def full_matrix(self) -> sp.csr_matrix:
        """Complete Jacobian in the full (sites, cells, wells) ordering."""
        ns2 = 2 * self.n_sites
        n_full = ns2 + 2 * self.n_cells + self.n_wells
        rows, cols, vals = [], [], []

        a = self.a_site.tocoo()
        r = a.row.astype(np.int64)
        c = a.col.astype(np.int64)
        r = np.where(r >= ns2, r + 2 * self.n_cells, r)
        c = np.where(c >= ns2, c + 2 * self.n_cells, c)
        rows.append(r)
        cols.append(c)
        vals.append(a.data)

        for cells, sites, cs, sc in zip(self.group_cells, self.group_sites,
                                        self.cell_site, self.site_cell):
            nc, m = sites.shape
            site_cols = np.empty((nc, 2 * m), dtype=np.int64)
            site_cols[:, 0::2] = 2 * sites
            site_cols[:, 1::2] = 2 * sites + 1
            cell_rows = ns2 + 2 * cells
            # cell equations vs site unknowns
            rr = np.repeat(cell_rows[:, None], 2 * m, axis=1)
            for e in range(2):
                rows.append((rr + e).reshape(-1))
                cols.append(site_cols.reshape(-1))
                vals.append(cs[:, e, :].reshape(-1))
            # site equations vs cell unknowns
            site_rows = np.empty((nc, 2 * m), dtype=np.int64)
            site_rows[:, 0::2] = 2 * sites
            site_rows[:, 1::2] = 2 * sites + 1
            for e in range(2):
                for u in range(2):
                    rows.append((2 * sites + e).reshape(-1))
                    cols.append(np.repeat(cell_rows + u, m))
                    vals.append(sc[:, :, e, u].reshape(-1))
        # cell diagonal blocks
        cell_rows = ns2 + 2 * np.arange(self.n_cells, dtype=np.int64)
        for e in range(2):
            for u in range(2):
                rows.append(cell_rows + e)
                cols.append(cell_rows + u)
                vals.append(self.cell_diag[:, e, u])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.coo_matrix((vals, (rows, cols)),
                             shape=(n_full, n_full)).tocsr()

    def full_scale(self) -> np.ndarray:
        return np.concatenate([
            self.scale_site[: 2 * self.n_sites],
            self.scale_cell.reshape(-1),
            self.scale_site[2 * self.n_sites:],
        ])


class Assembler:
    """Bind one discretization, volume distribution, EOS and well set.

    ``dirichlet_nodes`` freeze their dofs: their two rows become identity
    equations ``Y - Y_fixed`` and they receive no control volume (enforced
    upstream in the volume distribution).
    """

    def __init__(self, disc: VagDiscretization, volumes: VolumeDistribution,
                 eos: FluidEOS, wells=(), dirichlet_nodes=(),
                 gravity=9.81, rel_perm_law="quadratic",
                 rock_heat_capacity=None, rock_conductivity=2.0,
                 porosity_cells=None, porosity_fracture=None,
                 lambda_liquid=None, lambda_gas=None,
                 reference_density=1000.0, reference_energy=1.0e6,
                 reference_temperature=400.0):
        self.disc = disc
        self.eos = eos
        self.wells = list(wells)
        self.gravity = float(gravity)
        self.rel_perm_law = rel_perm_law
        self.rock_heat_capacity = (
            eos.c.rock_heat_capacity_j_per_m3_k
            if rock_heat_capacity is None else float(rock_heat_capacity)
        )
        self.rock_conductivity = rock_conductivity
        self.lambda_liquid = lambda_liquid
        self.lambda_gas = lambda_gas
        mesh = disc.mesh
        self.n_sites = disc.n_sites
        self.n_cells = mesh.n_cells
        self.n_dofs = self.n_sites + self.n_cells
        self.n_wells = len(self.wells)
        self.porosity_cells = (
            np.broadcast_to(np.asarray(porosity_cells, dtype=float),
                            (self.n_cells,))
            if porosity_cells is not None else None
        )
        self.porosity_fracture = (
            np.broadcast_to(np.asarray(porosity_fracture, dtype=float),
                            (mesh.n_fracture_faces,))
            if porosity_fracture is not None else None
        )

        self.pore = np.concatenate([volumes.pore_sites, volumes.pore_cells])
        self.rock = np.concatenate([volumes.rock_sites, volumes.rock_cells])

        self.dirichlet_sites = np.zeros(self.n_sites, dtype=bool)
        dirichlet_nodes = np.asarray(list(dirichlet_nodes), dtype=np.int64)
        self.dirichlet_sites[dirichlet_nodes] = True
        self._dirichlet_p = None
        self._dirichlet_y2 = None

        # gravity potential g . x per dof (z component only)
        coords_z = np.concatenate([
            disc.site_coords[:, 2], mesh.cell_centers[:, 2],
        ])
        self.gravity_potential = -self.gravity * coords_z

        # constant-in-time flux of the gravity potential per group
        self._f_g_cell = []
        for g in disc.cell_groups:
            g_cell = self.gravity_potential[self.n_sites + g.cells][:, None]
            g_site = self.gravity_potential[g.sites]
            self._f_g_cell.append(
                np.einsum("nij,nj->ni", g.trans, g_cell - g_site)
            )
        self._f_g_frac = []
        for g in disc.fracture_groups:
            g_face = self.gravity_potential[g.face_sites][:, None]
            g_site = self.gravity_potential[g.sites]
            self._f_g_frac.append(
                np.einsum("nij,nj->ni", g.trans, g_face - g_site)
            )

        self.reference_density = reference_density
        self.reference_energy = reference_energy
        self.reference_temperature = reference_temperature

        for well in self.wells:
            if np.any(well.geometry.nodes >= mesh.n_nodes):
                raise AssemblyError(
                    f"well '{well.geometry.name}' references unknown nodes"
                )

    # ------------------------------------------------------------------

    def set_dirichlet_values(self, state: ReservoirState) -> None:
        """Freeze the values the Dirichlet rows pin their dofs to."""
        self._dirichlet_p = state.p[: self.n_sites].copy()
        self._dirichlet_y2 = state.y2()[: self.n_sites].copy()

    def accumulation(self, state: ReservoirState):
        """Mass (kg) and energy (J) content of every dof."""
        tab = StateTables(self.eos, state, self.rel_perm_law)
        acc_m = self.pore * tab.mass_density
        acc_e = (self.pore * tab.energy_density
                 + self.rock * self.rock_heat_capacity * state.t)
        return acc_m, acc_e

    def phase_velocities(self, state: ReservoirState):
        """Darcy flux of each phase per stencil, for inspection and tests.

        Returns a list over cell groups then fracture groups of
        ``(v_liquid, v_gas)`` arrays of shape (n, m), positive from the
        stencil center (cell, or fracture face) toward the site.
        """
        out = []
        stencils = [
            (self.n_sites + g.cells, g.sites, g.trans, f_g)
            for g, f_g in zip(self.disc.cell_groups, self._f_g_cell)
        ] + [
            (g.face_sites, g.sites, g.trans, f_g)
            for g, f_g in zip(self.disc.fracture_groups, self._f_g_frac)
        ]
        rho_l = self.eos.rho_l(state.p, state.t)
        rho_g = self.eos.rho_g(state.p, state.t)
        for center, sites, trans, f_g in stencils:
            p_c = state.p[center][:, None]
            f_p = np.einsum("nij,nj->ni", trans, p_c - state.p[sites])
            pair = []
            for rho in (rho_l, rho_g):
                avg = 0.5 * (rho[center][:, None] + rho[sites])
                pair.append(f_p - avg * f_g)
            out.append(tuple(pair))
        return out

    def thermal_conductivities(self, state: ReservoirState):
        """Per-cell and per-fracture-face effective conductivities."""
        lam_rock = self.rock_conductivity
        if self.porosity_cells is None or (
            self.lambda_liquid is None and self.lambda_gas is None
        ):
            lam_cells = np.full(self.n_cells, lam_rock, dtype=float)
        else:
            sl = state.s_l[self.n_sites:]
            sg = state.s_g[self.n_sites:]
            lam_cells = effective_thermal_conductivity(
                lam_rock, self.porosity_cells, sl, sg,
                self.lambda_liquid, self.lambda_gas,
            )
        n_frac = self.disc.n_fracture
        if n_frac == 0:
            return lam_cells, np.zeros(0)
        if self.porosity_fracture is None or (
            self.lambda_liquid is None and self.lambda_gas is None
        ):
            lam_frac = np.full(n_frac, lam_rock, dtype=float)
        else:
            n_nodes = self.disc.n_nodes
            sl = state.s_l[n_nodes:self.n_sites]
            sg = state.s_g[n_nodes:self.n_sites]
            lam_frac = effective_thermal_conductivity(
                lam_rock, self.porosity_fracture, sl, sg,
                self.lambda_liquid, self.lambda_gas,
            )
        return lam_cells, lam_frac

    # ------------------------------------------------------------------
    # vector mapping
    # ------------------------------------------------------------------

    def state_to_vector(self, state: ReservoirState, p_wells=()) -> np.ndarray:
        y = np.empty(2 * self.n_dofs + self.n_wells)
        y[0:2 * self.n_dofs:2] = state.p
        y[1:2 * self.n_dofs:2] = state.y2()
        y[2 * self.n_dofs:] = np.asarray(p_wells, dtype=float)
        return y

    def vector_to_state(self, y, template: ReservoirState):
        """Rebuild a consistent state from primaries at frozen contexts."""
        state = template.copy()
        state.p = y[0:2 * self.n_dofs:2].copy()
        y2 = y[1:2 * self.n_dofs:2]
        two = state.context == PhaseContext.TWO_PHASE
        state.s_g = np.where(two, y2, state.s_g)
        state.t = np.where(two, state.t, y2)
        sync_secondary(self.eos, state)
        p_wells = y[2 * self.n_dofs:].copy()
        return state, p_wells

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------

    def assemble(self, state: ReservoirState, prev_state: ReservoirState,
                 dt: float, p_wells=(), traces=(),
                 conduction_state: ReservoirState | None = None
                 ) -> ResidualSystem:
        """Residual and Jacobian at ``state`` for one time step of size ``dt``.

        ``traces`` aligns with the assembler's wells.  ``conduction_state``
        (default: ``prev_state``) supplies the saturations entering the
        effective thermal conductivity, which is rebuilt once per time step.
        Dirichlet rows pin their dofs to the values frozen by
        `set_dirichlet_values`.
        """
        eos = self.eos
        n_sites, n_cells, n_wells = self.n_sites, self.n_cells, self.n_wells
        ns2 = 2 * n_sites
        if len(p_wells) != n_wells or len(traces) != n_wells:
            raise AssemblyError("one bottom-hole pressure and trace per well required")
        self._check_state_finite(state)

        tab = StateTables(eos, state, self.rel_perm_law)
        acc_m, acc_e = self.accumulation(state)
        prev_m, prev_e = self.accumulation(prev_state)
        lam_cells, lam_frac = self.thermal_conductivities(
            prev_state if conduction_state is None else conduction_state
        )

        r_site = np.zeros(ns2 + n_wells)
        r_cell = np.zeros((n_cells, 2))
        rows: list = []
        cols: list = []
        vals: list = []

        # accumulation terms
        inv_dt = 1.0 / dt
        diff_m = (acc_m - prev_m) * inv_dt
        diff_e = (acc_e - prev_e) * inv_dt
        r_site[0:ns2:2] += diff_m[:n_sites]
        r_site[1:ns2:2] += diff_e[:n_sites]
        r_cell[:, 0] += diff_m[n_sites:]
        r_cell[:, 1] += diff_e[n_sites:]

        dacc = np.empty((self.n_dofs, 2, 2))
        dacc[:, 0, 0] = self.pore * tab.mass_density_d1 * inv_dt
        dacc[:, 0, 1] = self.pore * tab.mass_density_d2 * inv_dt
        dacc[:, 1, 0] = (self.pore * tab.energy_density_d1
                         + self.rock * self.rock_heat_capacity * tab.dt_d1) * inv_dt
        dacc[:, 1, 1] = (self.pore * tab.energy_density_d2
                         + self.rock * self.rock_heat_capacity * tab.dt_d2) * inv_dt
        site_idx = np.arange(n_sites, dtype=np.int64)
        for e in range(2):
            for u in range(2):
                rows.append(2 * site_idx + e)
                cols.append(2 * site_idx + u)
                vals.append(dacc[:n_sites, e, u])
        cell_diag = dacc[n_sites:].copy()

        # Darcy + Fourier fluxes, cell groups
        group_cells, group_sites, cell_site, site_cell = [], [], [], []
        for gi, g in enumerate(self.disc.cell_groups):
            q_m, q_e, dq_m, dq_e = self._center_fluxes(
                tab, state,
                center_dofs=self.n_sites + g.cells,
                site_dofs=g.sites,
                trans=g.trans,
                trans_unit=g.trans_unit,
                f_g=self._f_g_cell[gi],
                lam=lam_cells[g.cells],
            )
            nc, m = g.sites.shape
            r_cell[g.cells, 0] += q_m.sum(axis=1)
            r_cell[g.cells, 1] += q_e.sum(axis=1)
            np.add.at(r_site, 2 * g.sites, -q_m)
            np.add.at(r_site, 2 * g.sites + 1, -q_e)

            cell_diag[g.cells, 0, :] += dq_m[:, :, 2 * m:].sum(axis=1)
            cell_diag[g.cells, 1, :] += dq_e[:, :, 2 * m:].sum(axis=1)
            cs = np.stack([dq_m[:, :, :2 * m].sum(axis=1),
                           dq_e[:, :, :2 * m].sum(axis=1)], axis=1)
            sc = -np.stack([dq_m[:, :, 2 * m:], dq_e[:, :, 2 * m:]], axis=2)
            group_cells.append(g.cells)
            group_sites.append(g.sites)
            cell_site.append(cs)
            site_cell.append(sc)

            site_cols = np.empty((nc, 2 * m), dtype=np.int64)
            site_cols[:, 0::2] = 2 * g.sites
            site_cols[:, 1::2] = 2 * g.sites + 1
            for e, dq in enumerate((dq_m, dq_e)):
                r = np.broadcast_to((2 * g.sites + e)[:, :, None],
                                    (nc, m, 2 * m))
                c = np.broadcast_to(site_cols[:, None, :], (nc, m, 2 * m))
                rows.append(r.reshape(-1))
                cols.append(c.reshape(-1))
                vals.append(-dq[:, :, :2 * m].reshape(-1))

        # Darcy + Fourier fluxes, fracture groups (the face is a site)
        for gi, g in enumerate(self.disc.fracture_groups):
            q_m, q_e, dq_m, dq_e = self._center_fluxes(
                tab, state,
                center_dofs=g.face_sites,
                site_dofs=g.sites,
                trans=g.trans,
                trans_unit=g.trans_unit * (
                    self.disc.mesh.fracture_width[g.faces][:, None, None]
                ),
                f_g=self._f_g_frac[gi],
                lam=lam_frac[g.faces],
            )
            nf, m = g.sites.shape
            np.add.at(r_site, 2 * g.face_sites, q_m.sum(axis=1))
            np.add.at(r_site, 2 * g.face_sites + 1, q_e.sum(axis=1))
            np.add.at(r_site, 2 * g.sites, -q_m)
            np.add.at(r_site, 2 * g.sites + 1, -q_e)

            all_cols = np.empty((nf, 2 * m + 2), dtype=np.int64)
            all_cols[:, 0:2 * m:2] = 2 * g.sites
            all_cols[:, 1:2 * m:2] = 2 * g.sites + 1
            all_cols[:, 2 * m] = 2 * g.face_sites
            all_cols[:, 2 * m + 1] = 2 * g.face_sites + 1
            for e, dq in enumerate((dq_m, dq_e)):
                # face (center) equation rows
                r = np.broadcast_to((2 * g.face_sites + e)[:, None, None],
                                    (nf, m, 2 * m + 2))
                c = np.broadcast_to(all_cols[:, None, :], (nf, m, 2 * m + 2))
                rows.append(r.reshape(-1))
                cols.append(c.reshape(-1))
                vals.append(dq.reshape(-1))
                # node equation rows
                r = np.broadcast_to((2 * g.sites + e)[:, :, None],
                                    (nf, m, 2 * m + 2))
                rows.append(r.reshape(-1))
                cols.append(c.reshape(-1))
                vals.append(-dq.reshape(-1))

        # wells
        well_rates = np.zeros(n_wells)
        well_modes = []
        for w, (well, trace) in enumerate(zip(self.wells, traces)):
            nodes = well.geometry.nodes
            p_w = float(p_wells[w])
            out = coupling_fluxes(
                eos, well, trace, p_w,
                p=state.p[nodes], t=state.t[nodes],
                s_l=state.s_l[nodes], s_g=state.s_g[nodes],
                c_l=state.c_l[nodes], c_g=state.c_g[nodes],
                rel_perm_law=self.rel_perm_law,
            )
            r_site[2 * nodes] += out.mass
            r_site[2 * nodes + 1] += out.energy
            # chain the node-state partials into (Y1, Y2) derivatives
            dy = {}
            for tag, d in (("m", out.d_mass), ("e", out.d_energy)):
                dy[tag + "1"] = (d["p"]
                                 + d["t"] * tab.dt_d1[nodes]
                                 + d["c_l"] * tab.dc_l_d1[nodes]
                                 + d["c_g"] * tab.dc_g_d1[nodes])
                dy[tag + "2"] = (d["t"] * tab.dt_d2[nodes]
                                 + d["s_l"] * tab.ds_l_d2[nodes]
                                 + d["s_g"] * tab.ds_g_d2[nodes]
                                 + d["c_l"] * tab.dc_l_d2[nodes]
                                 + d["c_g"] * tab.dc_g_d2[nodes])
            w_col = np.full(len(nodes), ns2 + w, dtype=np.int64)
            for e, tag in enumerate(("m", "e")):
                rows.append(2 * nodes + e)
                cols.append(2 * nodes)
                vals.append(dy[tag + "1"])
                rows.append(2 * nodes + e)
                cols.append(2 * nodes + 1)
                vals.append(dy[tag + "2"])
                rows.append(2 * nodes + e)
                cols.append(w_col)
                vals.append((out.d_mass if tag == "m" else out.d_energy)["p_w"])

            total = float(out.mass.sum())
            well_rates[w] = total
            # the rate row is dead iff no coupling kink is active: every
            # per-node flux then has a zero p_w-derivative (and zero state
            # derivatives with it)
            alive = bool(np.any(out.d_mass["p_w"] != 0.0))
            residual, mode = well_residual(well, total, p_w,
                                           rate_branch_solvable=alive)
            well.mode = mode
            well_modes.append(mode)
            r_site[ns2 + w] = residual
            if mode == "rate":
                sign = -1.0  # d(-(sum q - qbar)) and d(qbar - sum q)
                rows.append(np.full(len(nodes), ns2 + w, dtype=np.int64))
                cols.append(2 * nodes)
                vals.append(sign * dy["m1"])
                rows.append(np.full(len(nodes), ns2 + w, dtype=np.int64))
                cols.append(2 * nodes + 1)
                vals.append(sign * dy["m2"])
                rows.append(np.array([ns2 + w]))
                cols.append(np.array([ns2 + w]))
                vals.append(np.array([sign * float(out.d_mass["p_w"].sum())]))
            else:
                rows.append(np.array([ns2 + w]))
                cols.append(np.array([ns2 + w]))
                vals.append(np.array([1.0]))

        # Dirichlet rows: drop assembled entries, set identity equations
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate([np.asarray(v, dtype=float).reshape(-1)
                               for v in vals])
        if np.any(self.dirichlet_sites):
            if self._dirichlet_p is None:
                raise AssemblyError(
                    "Dirichlet nodes present but no fixed values were set; "
                    "call set_dirichlet_values first"
                )
            fixed = np.nonzero(self.dirichlet_sites)[0]
            row_fixed = np.zeros(ns2 + n_wells, dtype=bool)
            row_fixed[2 * fixed] = True
            row_fixed[2 * fixed + 1] = True
            keep = ~row_fixed[rows]
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
            rows = np.concatenate([rows, 2 * fixed, 2 * fixed + 1])
            cols = np.concatenate([cols, 2 * fixed, 2 * fixed + 1])
            vals = np.concatenate([vals, np.ones(2 * len(fixed))])
            y2 = state.y2()
            r_site[2 * fixed] = state.p[fixed] - self._dirichlet_p[fixed]
            r_site[2 * fixed + 1] = y2[fixed] - self._dirichlet_y2[fixed]
            for sc, sites in zip(site_cell, group_sites):
                sc *= (~self.dirichlet_sites[sites])[:, :, None, None]

        a_site = sp.coo_matrix(
            (vals, (rows, cols)), shape=(ns2 + n_wells, ns2 + n_wells)
        ).tocsr()

        # row scalings for the convergence norm
        scale_site, scale_cell = self._row_scales(dt, well_modes)

        system = ResidualSystem(
            n_sites=n_sites, n_cells=n_cells, n_wells=n_wells,
            r_site=r_site, r_cell=r_cell, a_site=a_site,
            cell_diag=cell_diag, group_cells=group_cells,
            group_sites=group_sites, cell_site=cell_site,
            site_cell=site_cell, scale_site=scale_site,
            scale_cell=scale_cell, well_rates=well_rates,
            well_modes=well_modes,
        )
        self._check_finite(system)
        return system

    # ------------------------------------------------------------------

    def _center_fluxes(self, tab, state, center_dofs, site_dofs, trans,
                       trans_unit, f_g, lam):
        """Mass/energy fluxes and local Jacobians for one stencil group.

        The center (a cell, or a fracture face acting as the center of its
        plane patch) exchanges with ``m`` sites.  Returns per-flux values
        ``(n, m)`` and derivative tensors ``(n, m, 2m+2)`` whose last two
        columns belong to the center's unknowns.
        """
        n, m = site_dofs.shape
        p_center = state.p[center_dofs][:, None]
        p_sites = state.p[site_dofs]
        f_p = np.einsum("nij,nj->ni", trans, p_center - p_sites)
        row_sum = trans.sum(axis=2)
        ar = np.arange(m)

        q_m = np.zeros((n, m))
        q_e = np.zeros((n, m))
        dq_m = np.zeros((n, m, 2 * m + 2))
        dq_e = np.zeros((n, m, 2 * m + 2))

        for phase in ("l", "g"):
            rho = getattr(tab, f"rho_{phase}")
            rho_d1 = getattr(tab, f"rho_{phase}_d1")
            rho_d2 = getattr(tab, f"rho_{phase}_d2")
            a = getattr(tab, f"a_{phase}")
            a_d1 = getattr(tab, f"a_{phase}_d1")
            a_d2 = getattr(tab, f"a_{phase}_d2")
            ha = getattr(tab, f"ha_{phase}")
            ha_d1 = getattr(tab, f"ha_{phase}_d1")
            ha_d2 = getattr(tab, f"ha_{phase}_d2")

            rho_c = rho[center_dofs][:, None]
            rho_s = rho[site_dofs]
            rho_avg = 0.5 * (rho_c + rho_s)
            v = f_p - rho_avg * f_g
            up = v >= 0.0

            # dV tensor
            dv = np.zeros((n, m, 2 * m + 2))
            dv[:, :, 0:2 * m:2] = -trans
            dv[:, :, 2 * m] = row_sum
            dv[:, :, 2 * m] -= f_g * 0.5 * rho_d1[center_dofs][:, None]
            dv[:, :, 2 * m + 1] -= f_g * 0.5 * rho_d2[center_dofs][:, None]
            dv[:, ar, 2 * ar] -= f_g * 0.5 * rho_d1[site_dofs]
            dv[:, ar, 2 * ar + 1] -= f_g * 0.5 * rho_d2[site_dofs]

            for weight, w_d1, w_d2, q, dq in (
                (a, a_d1, a_d2, q_m, dq_m),
                (ha, ha_d1, ha_d2, q_e, dq_e),
            ):
                w_up = np.where(up, weight[center_dofs][:, None],
                                weight[site_dofs])
                q += w_up * v
                dq += w_up[:, :, None] * dv
                # upwind weight derivatives at the upwind dof's columns
                dq[:, :, 2 * m] += np.where(
                    up, v * w_d1[center_dofs][:, None], 0.0
                )
                dq[:, :, 2 * m + 1] += np.where(
                    up, v * w_d2[center_dofs][:, None], 0.0
                )
                dq[:, ar, 2 * ar] += np.where(~up, v * w_d1[site_dofs], 0.0)
                dq[:, ar, 2 * ar + 1] += np.where(~up, v * w_d2[site_dofs], 0.0)

        # Fourier conduction on the temperature field
        t_center = tab.t[center_dofs][:, None]
        t_sites = tab.t[site_dofs]
        tu = trans_unit * lam[:, None, None]
        f_t = np.einsum("nij,nj->ni", tu, t_center - t_sites)
        q_e += f_t
        tu_row = tu.sum(axis=2)
        dq_e[:, :, 2 * m] += tu_row * tab.dt_d1[center_dofs][:, None]
        dq_e[:, :, 2 * m + 1] += tu_row * tab.dt_d2[center_dofs][:, None]
        dq_e[:, :, 0:2 * m:2] -= tu * tab.dt_d1[site_dofs][:, None, :]
        dq_e[:, :, 1:2 * m:2] -= tu * tab.dt_d2[site_dofs][:, None, :]
        return q_m, q_e, dq_m, dq_e

    def _row_scales(self, dt, well_modes):
        rho_ref = self.reference_density
        e_ref = self.reference_energy
        t_ref = self.reference_temperature
        mass = rho_ref * self.pore / dt
        energy = (rho_ref * e_ref * self.pore
                  + self.rock_heat_capacity * t_ref * self.rock) / dt
        floor = max(mass[mass > 0].min() if np.any(mass > 0) else 1.0, 1e-30)
        mass = np.maximum(mass, 1e-6 * floor)
        energy = np.maximum(energy, 1e-6 * floor * e_ref)

        scale_site = np.ones(2 * self.n_sites + self.n_wells)
        scale_site[0:2 * self.n_sites:2] = mass[:self.n_sites]
        scale_site[1:2 * self.n_sites:2] = energy[:self.n_sites]
        if np.any(self.dirichlet_sites):
            fixed = np.nonzero(self.dirichlet_sites)[0]
            scale_site[2 * fixed] = 1.0
            scale_site[2 * fixed + 1] = 1.0
        for w, (well, mode) in enumerate(zip(self.wells, well_modes)):
            if mode == "rate":
                scale_site[2 * self.n_sites + w] = max(abs(well.rate_limit), 1e-10)
            else:
                scale_site[2 * self.n_sites + w] = max(abs(well.bhp_limit), 1e5)
        scale_cell = np.stack([mass[self.n_sites:], energy[self.n_sites:]],
                              axis=1)
        return scale_site, scale_cell

    def _describe_dof(self, dof: int) -> str:
        if dof >= self.n_sites:
            return f"cell {dof - self.n_sites}"
        if dof >= self.disc.n_nodes:
            return f"fracture face {dof - self.disc.n_nodes}"
        return f"node {dof}"

    def _check_state_finite(self, state: ReservoirState):
        for field in ("p", "t", "s_l", "s_g", "c_l", "c_g"):
            values = getattr(state, field)
            if not np.all(np.isfinite(values)):
                dof = int(np.nonzero(~np.isfinite(values))[0][0])
                raise AssemblyError(
                    f"non-finite {field} at {self._describe_dof(dof)}"
                )

    def _check_finite(self, system: ResidualSystem):
        r = system.r_site
        if not np.all(np.isfinite(r)):
            bad = int(np.nonzero(~np.isfinite(r))[0][0])
            if bad >= 2 * self.n_sites:
                what = f"well {bad - 2 * self.n_sites}"
            else:
                dof, eq = divmod(bad, 2)
                kind = ("node" if dof < self.disc.n_nodes
                        else "fracture face")
                ident = dof if dof < self.disc.n_nodes else dof - self.disc.n_nodes
                what = f"{kind} {ident} ({'mass' if eq == 0 else 'energy'} equation)"
            raise AssemblyError(f"non-finite residual entry at {what}")
        if not np.all(np.isfinite(system.r_cell)):
            bad = np.argwhere(~np.isfinite(system.r_cell))[0]
            raise AssemblyError(
                f"non-finite residual entry at cell {bad[0]} "
                f"({'mass' if bad[1] == 0 else 'energy'} equation)"
            )
        if not np.all(np.isfinite(system.a_site.data)):
            raise AssemblyError("non-finite Jacobian entry in the site block")
