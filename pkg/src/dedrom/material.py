"""Temperature-dependent material model for the deposited alloy.

Tabulated properties (specific heat, density, emissivity, Young's modulus,
initial yield stress, mean thermal expansion) are interpolated with a natural
cubic spline through the table breakpoints and extended with constant values
outside the tabulated range.  Thermal conductivity is a quadratic polynomial

    k(T) = k0 + k1*T + k2*T^2   [W/(m K)]

multiplied by a stirring factor above the melt temperature, a standard proxy
for Marangoni convection in the pool.  Phase change enters through an
effective specific heat

    cp*(T) = cp(T) + L_m / (sqrt(pi) * dT) * exp(-((T - T_m)/dT)^2)

whose Gaussian bump integrates to the latent heat of melting L_m; dT is the
solidus-to-liquidus range.  The melt temperature defaults to the midpoint
(T_s + T_l)/2; ``melt_rule='half_range'`` switches to the alternative reading
(T_l - T_s)/2 kept for comparison runs.
"""

import math
import re
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import MaterialDataError

# Stefan-Boltzmann constant [W/(m^2 K^4)], CODATA 2018.
STEFAN_BOLTZMANN = 5.670374419e-8

_REQUIRED_TABLES = (
    "cp",
    "rho",
    "emissivity",
    "youngs_modulus",
    "yield_stress",
    "thermal_expansion",
)

_REQUIRED_SCALARS = (
    "marangoni_factor",
    "latent_heat",
    "t_solidus",
    "t_liquidus",
    "poisson_ratio",
    "hardening_modulus",
)


class PropertyTable:
    """One tabulated property: natural cubic spline with constant tails.

    Breakpoints must be strictly increasing.  Inside the tabulated range the
    value is the natural cubic spline through the rows (exact at every
    breakpoint); outside, the nearest endpoint value is held constant, so the
    curve is continuous on the whole real line.
    """

    def __init__(self, name, temperatures, values):
        temperatures = np.asarray(temperatures, dtype=float)
        values = np.asarray(values, dtype=float)
        if temperatures.size == 0:
            raise MaterialDataError(f"property table '{name}' is empty")
        if temperatures.shape != values.shape or temperatures.ndim != 1:
            raise MaterialDataError(
                f"property table '{name}' needs matching 1-D breakpoint and "
                f"value arrays, got {temperatures.shape} and {values.shape}"
            )
        if temperatures.size > 1 and not np.all(np.diff(temperatures) > 0):
            raise MaterialDataError(
                f"property table '{name}' breakpoints must be strictly increasing"
            )
        self.name = name
        self.temperatures = temperatures
        self.values = values
        if temperatures.size == 1:
            self._spline = None
        else:
            self._spline = CubicSpline(temperatures, values, bc_type="natural")

    def __call__(self, T):
        """Evaluate the property at temperature(s) ``T`` in kelvin."""
        T = np.asarray(T, dtype=float)
        if self._spline is None:
            out = np.full(T.shape, self.values[0])
        else:
            # Clamping to the breakpoint range implements the constant tails.
            out = self._spline(np.clip(T, self.temperatures[0], self.temperatures[-1]))
        return out if out.ndim else float(out)

    def __repr__(self):
        lo, hi = self.temperatures[0], self.temperatures[-1]
        return f"PropertyTable({self.name!r}, {self.temperatures.size} rows, {lo:g}-{hi:g} K)"


class MaterialModel:
    """Bundle of property tables and scalar constants for one alloy.

    Parameters
    ----------
    tables : dict[str, PropertyTable]
        Must contain cp [J/(kg K)], rho [kg/m^3], emissivity [-],
        youngs_modulus [Pa], yield_stress [Pa], thermal_expansion [1/K].
    conductivity_poly : sequence of float
        Coefficients (k0, k1, k2) of k(T) = k0 + k1*T + k2*T^2 in W/(m K).
    marangoni_factor : float
        Conductivity multiplier applied strictly above the melt temperature.
    latent_heat : float
        Latent heat of melting L_m [J/kg].
    t_solidus, t_liquidus : float
        Solidus and liquidus temperatures [K], t_liquidus > t_solidus.
    poisson_ratio : float
        Elastic Poisson ratio, in (0, 0.5).
    hardening_modulus : float
        Linear isotropic hardening modulus H [Pa], >= 0.
    melt_rule : str
        'midpoint' (default) sets T_m = (T_s + T_l)/2; 'half_range' sets
        T_m = (T_l - T_s)/2.
    """

    def __init__(self, tables, conductivity_poly, marangoni_factor, latent_heat,
                 t_solidus, t_liquidus, poisson_ratio, hardening_modulus,
                 melt_rule="midpoint", name="material"):
        for key in _REQUIRED_TABLES:
            if key not in tables:
                raise MaterialDataError(f"missing property table '{key}'")
        poly = tuple(float(c) for c in conductivity_poly)
        if len(poly) != 3:
            raise MaterialDataError("conductivity_poly needs exactly 3 coefficients")
        if not t_liquidus > t_solidus:
            raise MaterialDataError("t_liquidus must exceed t_solidus")
        if latent_heat <= 0:
            raise MaterialDataError("latent_heat must be positive")
        if not 0.0 < poisson_ratio < 0.5:
            raise MaterialDataError("poisson_ratio must lie in (0, 0.5)")
        if hardening_modulus < 0:
            raise MaterialDataError("hardening_modulus must be non-negative")
        if marangoni_factor < 1.0:
            raise MaterialDataError("marangoni_factor must be >= 1")
        if melt_rule not in ("midpoint", "half_range"):
            raise MaterialDataError(f"unknown melt_rule '{melt_rule}'")

        self.name = name
        self.tables = dict(tables)
        self.conductivity_poly = poly
        self.marangoni_factor = float(marangoni_factor)
        self.latent_heat = float(latent_heat)
        self.t_solidus = float(t_solidus)
        self.t_liquidus = float(t_liquidus)
        self.poisson_ratio = float(poisson_ratio)
        self.hardening_modulus = float(hardening_modulus)
        self.melt_rule = melt_rule

        emiss = self.tables["emissivity"].values
        if np.any(emiss < 0) or np.any(emiss > 1):
            raise MaterialDataError("emissivity values must lie in [0, 1]")
        for key in ("cp", "rho", "youngs_modulus", "yield_stress"):
            if np.any(self.tables[key].values <= 0):
                raise MaterialDataError(f"table '{key}' values must be positive")

    # Convenience accessors for the individual tables.
    @property
    def cp(self):
        return self.tables["cp"]

    @property
    def rho(self):
        return self.tables["rho"]

    @property
    def emissivity(self):
        return self.tables["emissivity"]

    @property
    def youngs_modulus(self):
        return self.tables["youngs_modulus"]

    @property
    def yield_stress(self):
        return self.tables["yield_stress"]

    @property
    def thermal_expansion(self):
        return self.tables["thermal_expansion"]

    @property
    def melt_temperature(self):
        """Melt temperature T_m [K] per the configured rule."""
        if self.melt_rule == "midpoint":
            return 0.5 * (self.t_solidus + self.t_liquidus)
        return 0.5 * (self.t_liquidus - self.t_solidus)

    @property
    def mushy_range(self):
        """Solidus-to-liquidus width dT = T_l - T_s [K]."""
        return self.t_liquidus - self.t_solidus

    def conductivity(self, T):
        """Thermal conductivity k(T) [W/(m K)], pool-stirring enhanced.

        Evaluates the quadratic polynomial and multiplies by the Marangoni
        factor where T exceeds the melt temperature.
        """
        T = np.asarray(T, dtype=float)
        k0, k1, k2 = self.conductivity_poly
        k = k0 + k1 * T + k2 * T * T
        k = np.where(T > self.melt_temperature, self.marangoni_factor * k, k)
        return k if k.ndim else float(k)

    def effective_heat_capacity(self, T):
        """Effective specific heat cp*(T) [J/(kg K)] with the latent bump.

        The Gaussian term L_m/(sqrt(pi)*dT) * exp(-((T-T_m)/dT)^2) integrates
        to L_m over temperature, spreading the latent heat of melting across
        the mushy range.
        """
        T = np.asarray(T, dtype=float)
        dT = self.mushy_range
        bump = (self.latent_heat / (math.sqrt(math.pi) * dT)
                * np.exp(-((T - self.melt_temperature) / dT) ** 2))
        out = self.cp(T) + bump
        return out if out.ndim else float(out)

    def volumetric_heat_capacity(self, T):
        """rho(T) * cp*(T) [J/(m^3 K)]."""
        out = np.asarray(self.rho(T)) * np.asarray(self.effective_heat_capacity(T))
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"MaterialModel({self.name!r}, melt_rule={self.melt_rule!r})"


_TABLE_HEADER = re.compile(r"^table\s+(\w+)(?:\s+scale\s*=\s*(\S+))?\s*$")


def parse_material_text(text, name="material", melt_rule="midpoint"):
    """Parse a material definition from its plain-text form.

    The format is line based: '#' starts a comment, scalars are
    "name = value" or "name = v0, v1, ..." lines, and each property table is
    a "table <name> scale=<factor>" header followed by "T, value" rows up to
    the next blank line.
    """
    scalars = {}
    tables = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].split("#", 1)[0].strip()
        i += 1
        if not line:
            continue
        header = _TABLE_HEADER.match(line)
        if header:
            tname = header.group(1)
            scale = float(header.group(2)) if header.group(2) else 1.0
            rows = []
            while i < len(lines):
                row = lines[i].split("#", 1)[0].strip()
                if not row:
                    break
                i += 1
                if _TABLE_HEADER.match(row):
                    i -= 1
                    break
                parts = row.split(",")
                if len(parts) != 2:
                    raise MaterialDataError(
                        f"table '{tname}': expected 'T, value', got {row!r}")
                try:
                    rows.append((float(parts[0]), float(parts[1]) * scale))
                except ValueError as exc:
                    raise MaterialDataError(
                        f"table '{tname}': non-numeric row {row!r}") from exc
            if not rows:
                raise MaterialDataError(f"table '{tname}' has no rows")
            temps, vals = zip(*rows)
            tables[tname] = PropertyTable(tname, temps, vals)
            continue
        if "=" in line:
            key, _, raw = line.partition("=")
            key = key.strip()
            parts = [p for p in raw.split(",") if p.strip()]
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise MaterialDataError(f"bad scalar line {line!r}") from exc
            if not vals:
                raise MaterialDataError(f"scalar '{key}' has no value")
            scalars[key] = vals[0] if len(vals) == 1 else tuple(vals)
            continue
        raise MaterialDataError(f"unparseable material line {line!r}")

    missing = [k for k in _REQUIRED_SCALARS if k not in scalars]
    if "conductivity_poly" not in scalars:
        missing.append("conductivity_poly")
    if missing:
        raise MaterialDataError(f"missing scalar entries: {', '.join(missing)}")
    poly = scalars["conductivity_poly"]
    if not isinstance(poly, tuple):
        poly = (poly,)
    return MaterialModel(
        tables,
        conductivity_poly=poly,
        marangoni_factor=scalars["marangoni_factor"],
        latent_heat=scalars["latent_heat"],
        t_solidus=scalars["t_solidus"],
        t_liquidus=scalars["t_liquidus"],
        poisson_ratio=scalars["poisson_ratio"],
        hardening_modulus=scalars["hardening_modulus"],
        melt_rule=melt_rule,
        name=name,
    )


def load_material_file(path, melt_rule="midpoint"):
    """Load a material definition file; see :func:`parse_material_text`."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_material_text(text, name=str(path), melt_rule=melt_rule)


@lru_cache(maxsize=None)
def inconel718(melt_rule="midpoint"):
    """The packaged Inconel 718 definition used by the default scenario."""
    text = resources.files("dedrom.data").joinpath("inconel718.mat").read_text()
    return parse_material_text(text, name="inconel718", melt_rule=melt_rule)
