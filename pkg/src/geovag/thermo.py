"""Water/steam property laws and local phase equilibrium.

This module provides

* a self-contained analytic equation of state for liquid water and steam:
  densities, viscosities, enthalpies and internal energies, all with
  analytic pressure/temperature derivatives,
* the saturation curve ``p_sat(T)`` and its inverse ``t_sat(p)``,
* relative-permeability laws,
* the phase-equilibrium closure residuals in complementarity (min) form,
* the pressure/mass/energy flash used by the production-well model.

Property functions are vectorized: they accept floats or numpy arrays and
return matching shapes.  Methods with the ``_d`` suffix return
``(value, d/dp, d/dT)`` so assembly code can chain analytic derivatives
instead of finite differences.

The liquid law is weakly compressible (linear in p, quadratic in T around a
reference state), the gas law is ideal with a linear deviation-factor
correction, enthalpies are affine in T, and the latent heat is anchored to
the Clausius-Clapeyron relation at a reference boiling point so that the
enthalpy jump across the saturation curve is consistent with the curve
itself.  Internal energies are defined as ``e = h - p/rho`` by construction.
All coefficients live in a single :class:`EosCoefficients` block so the EOS
can be swapped without touching solver code.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EosCoefficients",
    "FluidEOS",
    "PhaseContext",
    "DofState",
    "FlashResult",
    "PropertyRangeError",
    "FlashError",
    "closure_residuals",
    "flash_p_qm_qe",
    "rel_perm",
    "rel_perm_d",
    "REL_PERM_LAWS",
]

LN10 = np.log(10.0)


class PropertyRangeError(ValueError):
    """Raised when a property law is evaluated outside its supported range."""


class FlashError(ValueError):
    """Raised when the flash cannot find an admissible state."""


class PhaseContext(enum.IntEnum):
    """Set of phases present at a degree of freedom."""

    LIQUID = 0
    GAS = 1
    TWO_PHASE = 2


@dataclass(frozen=True)
class EosCoefficients:
    """Coefficient block of the analytic water/steam EOS.

    All values are SI.  Defaults give water-like behaviour over the
    supported temperature window and are the documented defaults of the
    run-configuration ``[eos]`` section.
    """

    # saturation curve: p_sat = scale * exp(a - b/T - c*ln T)
    saturation_scale_pa: float = 100.0
    saturation_coeff_a: float = 46.784
    saturation_coeff_b: float = 6435.0
    saturation_coeff_c: float = 3.868
    temperature_min_k: float = 274.0
    temperature_max_k: float = 647.0

    # liquid density: rho_ref * (1 + comp*(p-p_ref)) * (1 - e1*dT - e2*dT^2)
    reference_pressure_pa: float = 1.0e5
    reference_temperature_k: float = 293.15
    liquid_reference_density: float = 1000.0
    liquid_compressibility_per_pa: float = 5.0e-10
    liquid_expansion_linear_per_k: float = 3.0e-4
    liquid_expansion_quadratic_per_k2: float = 2.5e-6

    # enthalpies, affine in T
    liquid_heat_capacity_j_per_kg_k: float = 4200.0
    gas_heat_capacity_j_per_kg_k: float = 2100.0
    enthalpy_reference_temperature_k: float = 273.15
    latent_anchor_temperature_k: float = 373.15

    # gas density: p*M/(R*T*Z), Z = 1 - slope*p
    molar_mass_kg_per_mol: float = 0.018015
    gas_constant_j_per_mol_k: float = 8.314462618
    gas_deviation_slope_per_pa: float = 6.0e-9

    # viscosities: liquid scale*10^(k/(T-offset)); gas affine in T
    liquid_viscosity_scale_pa_s: float = 2.414e-5
    liquid_viscosity_exponent_k: float = 247.8
    liquid_viscosity_offset_k: float = 140.0
    gas_viscosity_intercept_pa_s: float = 3.8e-6
    gas_viscosity_slope_pa_s_per_k: float = 2.2e-8

    # rock internal energy per bulk volume: E_r = C_r * T
    rock_heat_capacity_j_per_m3_k: float = 1.6e6


class FluidEOS:
    """Analytic liquid/gas water property set.

    Parameters
    ----------
    coefficients : EosCoefficients, optional
        Coefficient block; defaults are water-like.

    Notes
    -----
    The gas enthalpy offset is derived at construction time from the
    Clausius-Clapeyron relation at the anchor temperature, so that
    ``h_g - h_l`` on the saturation curve equals
    ``T * (1/rho_g - 1/rho_l) * dp_sat/dT`` there.  This keeps the latent
    heat positive and consistent with the saturation curve over the whole
    supported window.
    """

    def __init__(self, coefficients: EosCoefficients | None = None):
        self.c = coefficients or EosCoefficients()
        c = self.c
        t_star = c.latent_anchor_temperature_k
        p_star = self.p_sat(t_star)
        dp_star = self.dp_sat_dt(t_star)
        rho_l = self.rho_l(p_star, t_star)
        rho_g = self.rho_g(p_star, t_star)
        latent = t_star * (1.0 / rho_g - 1.0 / rho_l) * dp_star
        if latent <= 0.0:
            raise ValueError("EOS coefficients give non-positive latent heat")
        # gas enthalpy at the anchor = liquid enthalpy there + latent heat
        self.latent_heat_anchor = latent
        self._h_gas_anchor = (
            c.liquid_heat_capacity_j_per_kg_k
            * (t_star - c.enthalpy_reference_temperature_k)
            + latent
        )

    # ------------------------------------------------------------------
    # saturation curve
    # ------------------------------------------------------------------

    def _check_t(self, t):
        c = self.c
        if np.any(t < c.temperature_min_k) or np.any(t > c.temperature_max_k):
            raise PropertyRangeError(
                "temperature outside supported range "
                f"[{c.temperature_min_k}, {c.temperature_max_k}] K"
            )

    def p_sat(self, t):
        """Saturation pressure (Pa) at temperature ``t`` (K)."""
        c = self.c
        self._check_t(t)
        t = np.asarray(t, dtype=float)
        out = c.saturation_scale_pa * np.exp(
            c.saturation_coeff_a
            - c.saturation_coeff_b / t
            - c.saturation_coeff_c * np.log(t)
        )
        return out if out.ndim else float(out)

    def dp_sat_dt(self, t):
        """Derivative of the saturation pressure with respect to T."""
        c = self.c
        t = np.asarray(t, dtype=float)
        p = self.p_sat(t)
        out = p * (c.saturation_coeff_b / t**2 - c.saturation_coeff_c / t)
        return out if np.ndim(out) else float(out)

    def saturation_pressure_range(self):
        """(min, max) saturation pressure over the supported T window."""
        c = self.c
        return self.p_sat(c.temperature_min_k), self.p_sat(c.temperature_max_k)

    def t_sat(self, p):
        """Saturation temperature (K) at pressure ``p`` (Pa).

        Bracketed bisection on the log of the saturation curve followed by
        two Newton polish steps; accurate to better than 1e-12 relative.
        """
        c = self.c
        p_arr = np.asarray(p, dtype=float)
        p_lo, p_hi = self.saturation_pressure_range()
        if np.any(p_arr < p_lo) or np.any(p_arr > p_hi):
            raise PropertyRangeError(
                f"pressure outside saturation-curve range [{p_lo:.6g}, {p_hi:.6g}] Pa"
            )
        target = np.log(p_arr / c.saturation_scale_pa)

        def logcurve(t):
            return (
                c.saturation_coeff_a
                - c.saturation_coeff_b / t
                - c.saturation_coeff_c * np.log(t)
            )

        lo = np.full_like(p_arr, c.temperature_min_k, dtype=float)
        hi = np.full_like(p_arr, c.temperature_max_k, dtype=float)
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            below = logcurve(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        t = 0.5 * (lo + hi)
        for _ in range(2):  # Newton polish on the log form
            g = logcurve(t) - target
            dg = c.saturation_coeff_b / t**2 - c.saturation_coeff_c / t
            t = t - g / dg
        t = np.clip(t, c.temperature_min_k, c.temperature_max_k)
        return t if t.ndim else float(t)

    def t_sat_d(self, p):
        """Saturation temperature and its derivative dT/dp."""
        t = self.t_sat(p)
        return t, 1.0 / self.dp_sat_dt(t)

    # ------------------------------------------------------------------
    # liquid properties
    # ------------------------------------------------------------------

    def rho_l_d(self, p, t):
        c = self.c
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        dt = t - c.reference_temperature_k
        thermal = (
            1.0
            - c.liquid_expansion_linear_per_k * dt
            - c.liquid_expansion_quadratic_per_k2 * dt**2
        )
        dthermal = (
            -c.liquid_expansion_linear_per_k
            - 2.0 * c.liquid_expansion_quadratic_per_k2 * dt
        )
        mech = 1.0 + c.liquid_compressibility_per_pa * (p - c.reference_pressure_pa)
        rho = c.liquid_reference_density * mech * thermal
        drho_dp = c.liquid_reference_density * c.liquid_compressibility_per_pa * thermal
        drho_dt = c.liquid_reference_density * mech * dthermal
        return rho, drho_dp, drho_dt

    def rho_l(self, p, t):
        """Liquid density (kg/m3)."""
        return self.rho_l_d(p, t)[0]

    def mu_l_d(self, p, t):
        c = self.c
        t = np.asarray(t, dtype=float)
        span = t - c.liquid_viscosity_offset_k
        mu = c.liquid_viscosity_scale_pa_s * 10.0 ** (
            c.liquid_viscosity_exponent_k / span
        )
        dmu_dt = mu * LN10 * (-c.liquid_viscosity_exponent_k / span**2)
        return mu, np.zeros_like(mu), dmu_dt

    def mu_l(self, p, t):
        """Liquid dynamic viscosity (Pa s)."""
        return self.mu_l_d(p, t)[0]

    def h_l_d(self, p, t):
        c = self.c
        t = np.asarray(t, dtype=float)
        h = c.liquid_heat_capacity_j_per_kg_k * (
            t - c.enthalpy_reference_temperature_k
        )
        return (
            h,
            np.zeros_like(h),
            np.full_like(h, c.liquid_heat_capacity_j_per_kg_k),
        )

    def h_l(self, p, t):
        """Liquid specific enthalpy (J/kg)."""
        return self.h_l_d(p, t)[0]

    def e_l_d(self, p, t):
        return self._internal_energy(self.h_l_d, self.rho_l_d, p, t)

    def e_l(self, p, t):
        """Liquid specific internal energy, ``h - p/rho`` (J/kg)."""
        return self.e_l_d(p, t)[0]

    # ------------------------------------------------------------------
    # gas properties
    # ------------------------------------------------------------------

    def _deviation(self, p):
        return 1.0 - self.c.gas_deviation_slope_per_pa * np.asarray(p, dtype=float)

    def rho_g_d(self, p, t):
        c = self.c
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        z = self._deviation(p)
        if np.any(z <= 0.25):
            raise PropertyRangeError("gas deviation factor out of range (pressure too high)")
        specific = c.molar_mass_kg_per_mol / c.gas_constant_j_per_mol_k
        rho = specific * p / (t * z)
        drho_dp = specific / (t * z**2)
        drho_dt = -rho / t
        return rho, drho_dp, drho_dt

    def rho_g(self, p, t):
        """Gas density (kg/m3)."""
        return self.rho_g_d(p, t)[0]

    def mu_g_d(self, p, t):
        c = self.c
        t = np.asarray(t, dtype=float)
        mu = c.gas_viscosity_intercept_pa_s + c.gas_viscosity_slope_pa_s_per_k * t
        return (
            mu,
            np.zeros_like(mu),
            np.full_like(mu, c.gas_viscosity_slope_pa_s_per_k),
        )

    def mu_g(self, p, t):
        """Gas dynamic viscosity (Pa s)."""
        return self.mu_g_d(p, t)[0]

    def h_g_d(self, p, t):
        c = self.c
        t = np.asarray(t, dtype=float)
        h = self._h_gas_anchor + c.gas_heat_capacity_j_per_kg_k * (
            t - c.latent_anchor_temperature_k
        )
        return (
            h,
            np.zeros_like(h),
            np.full_like(h, c.gas_heat_capacity_j_per_kg_k),
        )

    def h_g(self, p, t):
        """Gas specific enthalpy (J/kg)."""
        return self.h_g_d(p, t)[0]

    def e_g_d(self, p, t):
        return self._internal_energy(self.h_g_d, self.rho_g_d, p, t)

    def e_g(self, p, t):
        """Gas specific internal energy, ``h - p/rho`` (J/kg)."""
        return self.e_g_d(p, t)[0]

    @staticmethod
    def _internal_energy(h_d, rho_d, p, t):
        p = np.asarray(p, dtype=float)
        h, dh_dp, dh_dt = h_d(p, t)
        rho, drho_dp, drho_dt = rho_d(p, t)
        e = h - p / rho
        de_dp = dh_dp - 1.0 / rho + p * drho_dp / rho**2
        de_dt = dh_dt + p * drho_dt / rho**2
        return e, de_dp, de_dt

    # ------------------------------------------------------------------
    # rock energy
    # ------------------------------------------------------------------

    def rock_energy_d(self, t):
        """Rock internal energy per bulk volume (J/m3) and its T-derivative."""
        t = np.asarray(t, dtype=float)
        cr = self.c.rock_heat_capacity_j_per_m3_k
        return cr * t, np.full_like(t, cr)

    def rock_energy(self, t):
        return self.rock_energy_d(t)[0]

    # ------------------------------------------------------------------
    # enthalpy inversions
    # ------------------------------------------------------------------

    def temperature_from_enthalpy(self, phase: str, p: float, h_target: float) -> float:
        """Solve ``h_phase(p, T) = h_target`` for T.

        Safeguarded bisection + Newton on the supported temperature window,
        converged to 1e-10 relative.  Raises :class:`FlashError` when the
        target enthalpy is not reachable within the window.
        """
        c = self.c
        h_d = self.h_l_d if phase == "l" else self.h_g_d
        ta, tb = c.temperature_min_k, c.temperature_max_k
        fa = float(h_d(p, ta)[0]) - h_target
        fb = float(h_d(p, tb)[0]) - h_target
        if fa > 0.0 or fb < 0.0:
            raise FlashError(
                f"enthalpy {h_target:.6g} J/kg outside the reachable range of "
                f"phase '{phase}' on [{ta}, {tb}] K"
            )
        t = 0.5 * (ta + tb)
        for _ in range(100):
            h, _, dh_dt = h_d(p, t)
            f = float(h) - h_target
            if abs(f) <= 1e-12 * max(abs(h_target), float(dh_dt) * t):
                return float(t)
            if f > 0.0:
                tb = t
            else:
                ta = t
            t_new = t - f / float(dh_dt)
            if not (ta <= t_new <= tb):  # Newton left the bracket: bisect
                t_new = 0.5 * (ta + tb)
            if abs(t_new - t) <= 1e-12 * t:
                return float(t_new)
            t = t_new
        return float(t)


# ----------------------------------------------------------------------
# per-dof state and closure residuals
# ----------------------------------------------------------------------


@dataclass
class DofState:
    """Full unknown set at one degree of freedom."""

    p: float
    t: float
    s_l: float
    s_g: float
    c_l: float
    c_g: float
    context: PhaseContext = PhaseContext.TWO_PHASE


def closure_residuals(eos: FluidEOS, state):
    """Phase-equilibrium closure residuals in complementarity form.

    Takes any object with fields ``p, t, s_l, s_g, c_l, c_g`` (scalars or
    arrays) and returns the tuple

    * equilibrium of the water component between phases:
      ``c_g * p - p_sat(T) * c_l``,
    * liquid complementarity ``min(s_l, 1 - c_l)``,
    * gas complementarity ``min(s_g, 1 - c_g)``,
    * saturation sum ``s_l + s_g - 1``.

    All four vanish at an admissible state.
    """
    psat = eos.p_sat(state.t)
    r1 = state.c_g * state.p - psat * state.c_l
    r2 = np.minimum(state.s_l, 1.0 - state.c_l)
    r3 = np.minimum(state.s_g, 1.0 - state.c_g)
    r4 = state.s_l + state.s_g - 1.0
    return r1, r2, r3, r4


# ----------------------------------------------------------------------
# pressure / mass / energy flash
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FlashResult:
    """Equilibrium state at fixed pressure, mass flow and energy flow."""

    t: float
    s_l: float
    s_g: float
    c_l: float
    c_g: float
    context: PhaseContext


def flash_p_qm_qe(eos: FluidEOS, p: float, q_h2o: float, q_e: float) -> FlashResult:
    """Equilibrium flash at fixed pressure, water mass flow and energy flow.

    Computes the thermodynamic state of a mixture of specific enthalpy
    ``q_e / q_h2o`` held at pressure ``p``:

    1. evaluate the trial liquid mass fraction
       ``c_l = (h_g(p, T_sat) - q_e/q_h2o) / (h_g - h_l)`` at saturation;
    2. ``0 < c_l < 1`` confirms the two-phase state: ``T = T_sat(p)`` and the
       zero-slip saturation ``s_l = (c_l/rho_l) / (c_l/rho_l + (1-c_l)/rho_g)``;
    3. ``c_l >= 1`` selects the liquid branch, solving ``h_l(p,T) = q_e/q_h2o``;
       ``c_l <= 0`` the gas branch, solving ``h_g(p,T) = q_e/q_h2o``.

    Parameters
    ----------
    p : float
        Pressure (Pa); must lie inside the saturation-curve range.
    q_h2o : float
        Water mass flow (kg/s), strictly positive.
    q_e : float
        Energy flow (W).

    Raises
    ------
    FlashError
        If ``q_h2o <= 0`` or the single-phase enthalpy equation has no root
        in the supported temperature window.
    """
    if q_h2o <= 0.0:
        raise FlashError("flash requires a positive water mass flow")
    h_spec = q_e / q_h2o
    t_sat = eos.t_sat(p)
    h_l_sat = eos.h_l(p, t_sat)
    h_g_sat = eos.h_g(p, t_sat)
    c_l = (h_g_sat - h_spec) / (h_g_sat - h_l_sat)

    if 0.0 < c_l < 1.0:
        rho_l = eos.rho_l(p, t_sat)
        rho_g = eos.rho_g(p, t_sat)
        vol_l = c_l / rho_l
        vol_g = (1.0 - c_l) / rho_g
        s_l = vol_l / (vol_l + vol_g)
        return FlashResult(
            t=float(t_sat),
            s_l=float(s_l),
            s_g=float(1.0 - s_l),
            c_l=float(c_l),
            c_g=float(1.0 - c_l),
            context=PhaseContext.TWO_PHASE,
        )
    if c_l >= 1.0:
        t = eos.temperature_from_enthalpy("l", p, h_spec)
        c_g = eos.p_sat(t) / p if p > 0 else 1.0
        return FlashResult(
            t=t, s_l=1.0, s_g=0.0, c_l=1.0, c_g=float(min(c_g, 1.0)),
            context=PhaseContext.LIQUID,
        )
    t = eos.temperature_from_enthalpy("g", p, h_spec)
    c_l_sub = p / eos.p_sat(t)
    return FlashResult(
        t=t, s_l=0.0, s_g=1.0, c_l=float(min(c_l_sub, 1.0)), c_g=1.0,
        context=PhaseContext.GAS,
    )


# ----------------------------------------------------------------------
# relative permeabilities
# ----------------------------------------------------------------------

REL_PERM_LAWS = ("quadratic", "linear")


def rel_perm(s, law: str = "quadratic"):
    """Relative permeability of a phase at saturation ``s``.

    ``s`` is clamped into [0, 1]; a debug assertion flags genuine
    out-of-range inputs (beyond rounding).
    """
    return rel_perm_d(s, law)[0]


def rel_perm_d(s, law: str = "quadratic"):
    """Relative permeability and its saturation derivative."""
    s = np.asarray(s, dtype=float)
    assert np.all((s > -1e-9) & (s < 1.0 + 1e-9)), "saturation outside [0, 1]"
    s = np.clip(s, 0.0, 1.0)
    if law == "quadratic":
        k, dk = s**2, 2.0 * s
    elif law == "linear":
        k, dk = s, np.ones_like(s)
    else:
        raise ValueError(f"unknown relative-permeability law '{law}'")
    if k.ndim:
        return k, dk
    return float(k), float(dk)
