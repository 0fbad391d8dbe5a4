"""Multi-branch well models: indices, traces, coupling fluxes, residuals.

A well is a rooted tree of mesh edges with one primary unknown, the
bottom-hole (root) pressure ``p_w``.  Everything else along the well is
explicit: a *trace* computed once per time step from previous-step data
assigns each well node a pressure offset ``delta_p`` (hydrostatic column
from the root), a temperature, and saturations.  During a Newton solve the
per-node well pressure is ``p_w + delta_p`` with ``delta_p`` frozen, so well
properties never feed back into the Jacobian except through ``p_w`` itself.

Reservoir and well exchange mass and energy through node-based coupling
fluxes driven by ``WI_s * (p_s - p^w_s)`` with phase mobilities upwinded
between the reservoir side (outflow) and the well side (inflow).  Each well
adds a single min-form residual that switches between its rate target and
its bottom-hole pressure limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import DfmMesh, WellGeometry
from .thermo import FluidEOS, PhaseContext, flash_p_qm_qe, rel_perm_d

__all__ = [
    "Well",
    "WellTrace",
    "WellModelError",
    "CouplingFluxes",
    "peaceman_index",
    "coupling_fluxes",
    "injection_pressure_drop",
    "production_pressure_drop",
    "well_residual",
    "STANDARD_GRAVITY",
]

STANDARD_GRAVITY = 9.81


class WellModelError(RuntimeError):
    """A well computation left its supported regime."""


@dataclass
class Well:
    """One well: geometry, role, limits, and node productivity indices.

    ``kind`` is "injection" or "production".  ``rate_limit`` is the signed
    total mass-rate target (reservoir-to-well positive, so <= 0 for
    injection, >= 0 for production); ``bhp_limit`` the pressure bound
    (upper bound for injectors, lower bound for producers).  Injection
    wells carry the specific enthalpy of the injected liquid.  ``mode``
    records which constraint was active after the last solve.
    """

    geometry: WellGeometry
    kind: str
    bhp_limit: float
    rate_limit: float
    well_index: np.ndarray
    injection_enthalpy: float | None = None
    mode: str = "rate"

    def __post_init__(self):
        if self.kind not in ("injection", "production"):
            raise ValueError(f"unknown well kind '{self.kind}'")
        if self.kind == "injection":
            if self.rate_limit > 0:
                raise ValueError("injection rate target must be <= 0 "
                                 "(reservoir-to-well sign convention)")
            if self.injection_enthalpy is None:
                raise ValueError("injection wells need an injection enthalpy")
        elif self.rate_limit < 0:
            raise ValueError("production rate target must be >= 0")
        self.well_index = np.asarray(self.well_index, dtype=float)
        if len(self.well_index) != self.geometry.n_nodes:
            raise ValueError("one well index per well node required")
        if np.any(self.well_index < 0):
            raise ValueError("well indices must be non-negative")

    @property
    def name(self) -> str:
        return self.geometry.name


@dataclass(frozen=True)
class WellTrace:
    """Frozen per-node well column state for one time step.

    ``delta_p[i]`` is the pressure offset of well node ``i`` relative to the
    root (0 at the root); ``p = p_root + delta_p`` are the node pressures at
    the root pressure the trace was built with.  ``q_h2o``/``q_e`` hold the
    subtree mass/energy flow entering the well at or below each node (the
    flow carried by the edge above it), with the liquid/gas split
    ``q_liquid``/``q_gas``.
    """

    p_root: float
    delta_p: np.ndarray
    p: np.ndarray
    t: np.ndarray
    s_l: np.ndarray
    s_g: np.ndarray
    q_h2o: np.ndarray
    q_e: np.ndarray
    q_liquid: np.ndarray
    q_gas: np.ndarray


# ----------------------------------------------------------------------
# Peaceman indices
# ----------------------------------------------------------------------


def peaceman_index(mesh: DfmMesh, geometry: WellGeometry, perm_cells,
                   radius: float | None = None) -> np.ndarray:
    """Node productivity indices WI_s (m^3) from edge-based Peaceman values.

    Each well edge gets ``WI_a = 2 pi k L_a / ln(r_eq / r_w)`` with
    ``r_eq = 0.14 sqrt(dx^2 + dy^2)`` built from the transverse extents of
    the host cells (averaged when the edge borders several cells), and each
    node receives half of every incident edge index.
    """
    r_w = geometry.radius if radius is None else radius
    perm_cells = np.asarray(perm_cells, dtype=float)
    wi_nodes = np.zeros(geometry.n_nodes)
    for i in range(1, geometry.n_nodes):
        a = int(geometry.nodes[geometry.parent[i]])
        b = int(geometry.nodes[i])
        xa, xb = mesh.nodes[a], mesh.nodes[b]
        length = float(np.linalg.norm(xb - xa))
        host = np.intersect1d(mesh.node_cells[a], mesh.node_cells[b])
        if len(host) == 0:
            raise WellModelError(f"well edge ({a}, {b}) has no host cell")
        axis = int(np.argmax(np.abs(xb - xa)))
        transverse = [d for d in range(3) if d != axis]
        d1 = d2 = 0.0
        k_iso = 0.0
        for c in host:
            span = mesh.nodes[mesh.cell_nodes[c]]
            ext = span.max(axis=0) - span.min(axis=0)
            d1 += ext[transverse[0]]
            d2 += ext[transverse[1]]
            if perm_cells.ndim == 1:
                k_iso += perm_cells[c]
            else:
                k_iso += math.sqrt(
                    perm_cells[c, transverse[0], transverse[0]]
                    * perm_cells[c, transverse[1], transverse[1]]
                )
        d1 /= len(host)
        d2 /= len(host)
        k_iso /= len(host)
        r_eq = 0.14 * math.hypot(d1, d2)
        if r_eq <= r_w:
            raise WellModelError(
                f"well radius {r_w} m is not small compared to the cell "
                f"sizes (equivalent radius {r_eq:.6g} m)"
            )
        wi_edge = 2.0 * math.pi * k_iso * length / math.log(r_eq / r_w)
        wi_nodes[geometry.parent[i]] += 0.5 * wi_edge
        wi_nodes[i] += 0.5 * wi_edge
    return wi_nodes


# ----------------------------------------------------------------------
# hydrostatic traces
# ----------------------------------------------------------------------


def _edge_pressure_gain(density_of_p, p_top, dz, gravity, iterate,
                        rel_tol=1e-8, max_iter=60):
    """Pressure increase over one edge of signed height drop ``dz``.

    Evaluates the density at the top pressure, then corrects it once at the
    midpoint pressure (or iterates the midpoint rule to ``rel_tol`` when
    ``iterate`` is set).
    """
    if dz == 0.0:
        return 0.0
    gain = density_of_p(p_top) * gravity * dz
    steps = max_iter if iterate else 1
    for _ in range(steps):
        new = density_of_p(p_top + 0.5 * gain) * gravity * dz
        done = abs(new - gain) <= rel_tol * max(abs(new), 1.0)
        gain = new
        if iterate and done:
            break
    return gain


def injection_pressure_drop(eos: FluidEOS, well: Well, p_root: float, *,
                            gravity: float = STANDARD_GRAVITY,
                            iterate: bool = False) -> WellTrace:
    """Liquid hydrostatic column at fixed specific enthalpy.

    Marches from the root toward the leaves; on every edge the density is
    the liquid density at the local pressure and the temperature that keeps
    ``h_l(p, T)`` equal to the well's injection enthalpy.
    """
    if well.kind != "injection":
        raise WellModelError("injection trace requested for a non-injection well")
    h_target = well.injection_enthalpy
    geo = well.geometry
    n = geo.n_nodes

    def density(p):
        t = eos.temperature_from_enthalpy("l", p, h_target)
        return float(eos.rho_l(p, t))

    delta_p = np.zeros(n)
    for i in range(1, n):
        par = int(geo.parent[i])
        dz = float(geo.depth[par] - geo.depth[i])
        p_top = p_root + delta_p[par]
        delta_p[i] = delta_p[par] + _edge_pressure_gain(
            density, p_top, dz, gravity, iterate
        )
    p = p_root + delta_p
    t = np.array([
        eos.temperature_from_enthalpy("l", float(pi), h_target) for pi in p
    ])
    zeros = np.zeros(n)
    return WellTrace(
        p_root=float(p_root), delta_p=delta_p, p=p, t=t,
        s_l=np.ones(n), s_g=zeros.copy(),
        q_h2o=zeros.copy(), q_e=zeros.copy(),
        q_liquid=zeros.copy(), q_gas=zeros.copy(),
    )


def _mixture_density(eos, p, q_h2o, q_e):
    flash = flash_p_qm_qe(eos, p, q_h2o, q_e)
    if flash.context == PhaseContext.TWO_PHASE:
        return (
            flash.s_l * eos.rho_l(p, flash.t) + flash.s_g * eos.rho_g(p, flash.t)
        )
    if flash.context == PhaseContext.LIQUID:
        return eos.rho_l(p, flash.t)
    return eos.rho_g(p, flash.t)


def production_pressure_drop(eos: FluidEOS, well: Well, p_root: float,
                             p_prev_nodes, q_mass_prev, q_energy_prev,
                             fallback_density, fallback_t,
                             fallback_s_l=None, fallback_s_g=None, *,
                             gravity: float = STANDARD_GRAVITY,
                             iterate: bool = False) -> WellTrace:
    """Mixture hydrostatic column from previous-step production fluxes.

    1. A leaf-to-root sweep accumulates per-node subtree mass and energy
       inflows from the previous step's coupling fluxes.
    2. Nodes with positive subtree flow are flashed at their previous well
       pressure to get temperature, saturations and the phase split.
    3. A root-to-leaf sweep integrates the hydrostatic relation; on each
       edge the density comes from re-flashing the subtree composition at
       the local pressure (falling back to the supplied reservoir-side
       densities on no-flow branches, e.g. a freshly opened well).

    A strictly negative subtree flow means fluid leaving the well into the
    reservoir somewhere along a producing well, which this model does not
    support.
    """
    if well.kind != "production":
        raise WellModelError("production trace requested for a non-production well")
    geo = well.geometry
    n = geo.n_nodes
    q_mass_prev = np.asarray(q_mass_prev, dtype=float)
    q_energy_prev = np.asarray(q_energy_prev, dtype=float)
    p_prev_nodes = np.asarray(p_prev_nodes, dtype=float)
    fallback_density = np.asarray(fallback_density, dtype=float)
    fallback_t = np.asarray(fallback_t, dtype=float)
    fallback_s_l = (np.ones(n) if fallback_s_l is None
                    else np.asarray(fallback_s_l, dtype=float))
    fallback_s_g = (np.zeros(n) if fallback_s_g is None
                    else np.asarray(fallback_s_g, dtype=float))

    # leaf-to-root subtree sums (nodes are in topological order)
    q_h2o = q_mass_prev.copy()
    q_e = q_energy_prev.copy()
    for i in range(n - 1, 0, -1):
        q_h2o[geo.parent[i]] += q_h2o[i]
        q_e[geo.parent[i]] += q_e[i]
    tiny = 1e-30
    if np.any(q_h2o < -tiny):
        bad = int(np.nonzero(q_h2o < -tiny)[0][0])
        raise WellModelError(
            "cross-flow unsupported: net flow leaves the production well "
            f"at node {int(geo.nodes[bad])} (subtree rate {q_h2o[bad]:.6g} kg/s)"
        )

    t = fallback_t.copy()
    s_l = fallback_s_l.copy()
    s_g = fallback_s_g.copy()
    q_liquid = np.zeros(n)
    q_gas = np.zeros(n)
    flowing = q_h2o > tiny
    for i in range(n):
        if not flowing[i]:
            continue
        flash = flash_p_qm_qe(eos, float(p_prev_nodes[i]),
                              float(q_h2o[i]), float(q_e[i]))
        t[i] = flash.t
        s_l[i] = flash.s_l
        s_g[i] = flash.s_g
        if flash.context == PhaseContext.TWO_PHASE:
            liquid_fraction = flash.c_l
        else:
            liquid_fraction = 1.0 if flash.context == PhaseContext.LIQUID else 0.0
        q_liquid[i] = liquid_fraction * q_h2o[i]
        q_gas[i] = (1.0 - liquid_fraction) * q_h2o[i]

    delta_p = np.zeros(n)
    for i in range(1, n):
        par = int(geo.parent[i])
        dz = float(geo.depth[par] - geo.depth[i])
        p_top = p_root + delta_p[par]
        if flowing[i]:
            qm, qe = float(q_h2o[i]), float(q_e[i])

            def density(p, qm=qm, qe=qe):
                return float(_mixture_density(eos, p, qm, qe))
        else:
            rho = float(fallback_density[i])

            def density(p, rho=rho):
                return rho
        delta_p[i] = delta_p[par] + _edge_pressure_gain(
            density, p_top, dz, gravity, iterate
        )
    return WellTrace(
        p_root=float(p_root), delta_p=delta_p, p=p_root + delta_p, t=t,
        s_l=s_l, s_g=s_g, q_h2o=q_h2o, q_e=q_e,
        q_liquid=q_liquid, q_gas=q_gas,
    )


# ----------------------------------------------------------------------
# coupling fluxes
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingFluxes:
    """Per-node reservoir-to-well fluxes and their partial derivatives.

    Derivative keys: reservoir-side ``p``, ``t``, ``s_l``, ``s_g``, ``c_l``,
    ``c_g``, and the well unknown ``p_w``.
    """

    mass: np.ndarray
    energy: np.ndarray
    d_mass: dict
    d_energy: dict


def coupling_fluxes(eos: FluidEOS, well: Well, trace: WellTrace,
                    p_w: float, p, t, s_l, s_g, c_l, c_g,
                    rel_perm_law: str = "quadratic") -> CouplingFluxes:
    """Node mass/energy exchange, positive from reservoir into the well.

    The driving force is ``WI_s (p_s - (p_w + delta_p_s))``.  Production
    wells keep only its positive part, weighted by reservoir-side
    mobilities; injection wells only the negative part, weighted by frozen
    well-side liquid mobility at the trace state.  Energy carries the
    enthalpy of the same side.
    """
    wi = well.well_index
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    s_l = np.asarray(s_l, dtype=float)
    s_g = np.asarray(s_g, dtype=float)
    c_l = np.asarray(c_l, dtype=float)
    c_g = np.asarray(c_g, dtype=float)

    v = wi * (p - (p_w + trace.delta_p))
    pos = v > 0.0
    neg = v < 0.0
    v_pos = np.where(pos, v, 0.0)
    v_neg = np.where(neg, v, 0.0)
    dv_dp = wi
    n = len(v)
    zeros = np.zeros(n)
    mass = np.zeros(n)
    energy = np.zeros(n)
    d_mass = {k: zeros.copy() for k in ("p", "t", "s_l", "s_g", "c_l", "c_g", "p_w")}
    d_energy = {k: zeros.copy() for k in ("p", "t", "s_l", "s_g", "c_l", "c_g", "p_w")}

    if well.kind == "production":
        rho_l, drho_l_dp, drho_l_dt = eos.rho_l_d(p, t)
        mu_l, dmu_l_dp, dmu_l_dt = eos.mu_l_d(p, t)
        h_l, dh_l_dp, dh_l_dt = eos.h_l_d(p, t)
        rho_g, drho_g_dp, drho_g_dt = eos.rho_g_d(p, t)
        mu_g, dmu_g_dp, dmu_g_dt = eos.mu_g_d(p, t)
        h_g, dh_g_dp, dh_g_dt = eos.h_g_d(p, t)
        kr_l, dkr_l = rel_perm_d(s_l, rel_perm_law)
        kr_g, dkr_g = rel_perm_d(s_g, rel_perm_law)

        m_l = rho_l / mu_l
        m_g = rho_g / mu_g
        dm_l_dp = (drho_l_dp - rho_l * dmu_l_dp / mu_l) / mu_l
        dm_l_dt = (drho_l_dt - rho_l * dmu_l_dt / mu_l) / mu_l
        dm_g_dp = (drho_g_dp - rho_g * dmu_g_dp / mu_g) / mu_g
        dm_g_dt = (drho_g_dt - rho_g * dmu_g_dt / mu_g) / mu_g

        a_l = c_l * m_l * kr_l          # mass mobility, liquid
        a_g = c_g * m_g * kr_g
        mass = (a_l + a_g) * v_pos
        energy = (h_l * a_l + h_g * a_g) * v_pos

        dpos = np.where(pos, 1.0, 0.0)
        d_mass["p"] = (c_l * dm_l_dp * kr_l + c_g * dm_g_dp * kr_g) * v_pos \
            + (a_l + a_g) * dv_dp * dpos
        d_mass["t"] = (c_l * dm_l_dt * kr_l + c_g * dm_g_dt * kr_g) * v_pos
        d_mass["s_l"] = c_l * m_l * dkr_l * v_pos
        d_mass["s_g"] = c_g * m_g * dkr_g * v_pos
        d_mass["c_l"] = m_l * kr_l * v_pos
        d_mass["c_g"] = m_g * kr_g * v_pos
        d_mass["p_w"] = -(a_l + a_g) * dv_dp * dpos

        d_energy["p"] = (
            (dh_l_dp * a_l + h_l * c_l * dm_l_dp * kr_l
             + dh_g_dp * a_g + h_g * c_g * dm_g_dp * kr_g) * v_pos
            + (h_l * a_l + h_g * a_g) * dv_dp * dpos
        )
        d_energy["t"] = (dh_l_dt * a_l + h_l * c_l * dm_l_dt * kr_l
                         + dh_g_dt * a_g + h_g * c_g * dm_g_dt * kr_g) * v_pos
        d_energy["s_l"] = h_l * c_l * m_l * dkr_l * v_pos
        d_energy["s_g"] = h_g * c_g * m_g * dkr_g * v_pos
        d_energy["c_l"] = h_l * m_l * kr_l * v_pos
        d_energy["c_g"] = h_g * m_g * kr_g * v_pos
        d_energy["p_w"] = -(h_l * a_l + h_g * a_g) * dv_dp * dpos
    else:
        # frozen well-side liquid mobility at the trace state
        rho_w = eos.rho_l(trace.p, trace.t)
        mu_w = eos.mu_l(trace.p, trace.t)
        h_w = eos.h_l(trace.p, trace.t)
        m_w = rho_w / mu_w
        mass = m_w * v_neg
        energy = h_w * m_w * v_neg
        dneg = np.where(neg, 1.0, 0.0)
        d_mass["p"] = m_w * dv_dp * dneg
        d_mass["p_w"] = -m_w * dv_dp * dneg
        d_energy["p"] = h_w * m_w * dv_dp * dneg
        d_energy["p_w"] = -h_w * m_w * dv_dp * dneg

    return CouplingFluxes(mass=mass, energy=energy,
                          d_mass=d_mass, d_energy=d_energy)


# ----------------------------------------------------------------------
# well residuals
# ----------------------------------------------------------------------


def well_residual(well: Well, total_rate: float, p_w: float,
                  rate_branch_solvable: bool = True):
    """Min-form constraint residual and the active branch.

    Injection: ``-min(sum(q) - q_target, p_max - p_w)``;
    production: ``min(q_target - sum(q), p_w - p_min)``.
    Returns ``(residual, mode)`` with mode "rate" when the rate argument is
    the minimizer (ties included) and "bhp" otherwise.

    ``rate_branch_solvable=False`` declares that the rate equation has an
    identically zero gradient at the current iterate — every coupling flux
    sits on the inactive side of its kink, so no unknown can move the
    delivered rate.  Selecting that branch would hand Newton an exactly
    singular row (a nonzero residual no step can reduce), so the bhp
    branch is used instead: driving the well pressure to its bound is the
    one move that can re-open the flow kinks, and if nothing opens, the
    well converges shut-in at the bound, which satisfies the same
    complementarity conditions.
    """
    if well.kind == "injection":
        rate_arg = total_rate - well.rate_limit
        bhp_arg = well.bhp_limit - p_w
        if rate_arg <= bhp_arg and rate_branch_solvable:
            return -rate_arg, "rate"
        return -bhp_arg, "bhp"
    rate_arg = well.rate_limit - total_rate
    bhp_arg = p_w - well.bhp_limit
    if rate_arg <= bhp_arg and rate_branch_solvable:
        return rate_arg, "rate"
    return bhp_arg, "bhp"
