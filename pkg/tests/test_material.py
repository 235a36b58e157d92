"""Material model tests: tabulated properties, conductivity, latent bump."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dedrom.errors import MaterialDataError
from dedrom.material import (MaterialModel, PropertyTable, inconel718,
                             parse_material_text)

from conftest import make_constant_material


# Handbook rows stored in the bundled definition; splines are exact at
# their breakpoints, so these equalities are tight.
TABLE_POINTS = [
    ("cp", 298.0, 435.0),
    ("cp", 773.0, 427.0),
    ("cp", 1609.0, 720.0),
    ("rho", 298.0, 8190.0),
    ("rho", 1873.0, 7160.0),
    ("emissivity", 1609.0, 0.329),
    ("youngs_modulus", 298.0, 200.0e9),
    ("youngs_modulus", 1609.0, 1.0e9),
    ("yield_stress", 873.0, 965.0e6),
    ("yield_stress", 1609.0, 1.0e6),
    ("thermal_expansion", 298.0, 12.2e-6),
]


@pytest.mark.parametrize("table,temp,value", TABLE_POINTS)
def test_tabulated_breakpoints_exact(inconel, table, temp, value):
    assert inconel.tables[table](temp) == pytest.approx(value, rel=1e-12)


def test_constant_tails(inconel):
    cp = inconel.cp
    assert cp(100.0) == pytest.approx(cp(298.0), rel=1e-12)
    assert cp(2500.0) == pytest.approx(cp(1609.0), rel=1e-12)


def test_single_row_table_is_constant():
    table = PropertyTable("x", [300.0], [7.5])
    for t in (0.0, 300.0, 5000.0):
        assert table(t) == 7.5


def test_conductivity_polynomial(inconel):
    # Independent evaluation of k = 0.56 + 2.9e-2 T - 7e-6 T^2.
    for temp in (298.0, 800.0, 1400.0):
        expect = 0.56 + 2.9e-2 * temp - 7.0e-6 * temp * temp
        assert inconel.conductivity(temp) == pytest.approx(expect, rel=1e-12)


def test_conductivity_marangoni_boost(inconel):
    # Above the melt temperature the polynomial is multiplied by 2.5.
    t_m = inconel.melt_temperature
    below = inconel.conductivity(t_m)
    poly = 0.56 + 2.9e-2 * 1700.0 - 7.0e-6 * 1700.0 ** 2
    assert inconel.conductivity(1700.0) == pytest.approx(2.5 * poly, rel=1e-12)
    assert inconel.conductivity(1700.0) == pytest.approx(74.075, rel=1e-6)
    assert below == pytest.approx(0.56 + 2.9e-2 * t_m - 7.0e-6 * t_m ** 2,
                                  rel=1e-12)


def test_melt_temperature_rules():
    mid = inconel718(melt_rule="midpoint")
    half = inconel718(melt_rule="half_range")
    assert mid.melt_temperature == pytest.approx(0.5 * (1533.0 + 1609.0))
    assert half.melt_temperature == pytest.approx(0.5 * (1609.0 - 1533.0))
    assert mid.mushy_range == pytest.approx(76.0)


def test_latent_heat_bump_peak(inconel):
    # Gaussian bump peak: L_m / (sqrt(pi) * dT) above the plain cp value.
    t_m = inconel.melt_temperature
    bump = inconel.effective_heat_capacity(t_m) - inconel.cp(t_m)
    expect = 230.0e3 / (math.sqrt(math.pi) * 76.0)
    assert bump == pytest.approx(expect, rel=1e-12)
    assert bump == pytest.approx(1707.4158, abs=1e-3)


def test_latent_heat_bump_integrates_to_latent_heat(inconel):
    # Integrating cp* - cp over temperature recovers L_m.
    temps = np.linspace(800.0, 2400.0, 20001)
    bump = inconel.effective_heat_capacity(temps) - inconel.cp(temps)
    integral = np.trapezoid(bump, temps)
    assert integral == pytest.approx(230.0e3, rel=1e-6)


def test_volumetric_heat_capacity(inconel):
    got = inconel.volumetric_heat_capacity(298.0)
    bump = inconel.effective_heat_capacity(298.0) - inconel.cp(298.0)
    assert bump < 1e-12  # far from the mushy zone
    assert got == pytest.approx(8190.0 * 435.0, rel=1e-9)


def test_all_tables_positive_over_working_range(inconel):
    # Natural splines can overshoot between rows; the working range must
    # stay physical for every property the solvers evaluate.
    temps = np.linspace(250.0, 2000.0, 4001)
    for name in ("cp", "rho", "youngs_modulus", "yield_stress"):
        values = inconel.tables[name](temps)
        assert np.all(values > 0), f"{name} dips non-positive"
    emis = inconel.emissivity(temps)
    assert np.all((emis >= 0.0) & (emis <= 1.0))
    assert np.all(inconel.conductivity(temps) > 0)


def test_property_table_rejects_bad_shapes():
    with pytest.raises(MaterialDataError):
        PropertyTable("x", [], [])
    with pytest.raises(MaterialDataError):
        PropertyTable("x", [300.0, 300.0], [1.0, 2.0])
    with pytest.raises(MaterialDataError):
        PropertyTable("x", [300.0, 200.0], [1.0, 2.0])
    with pytest.raises(MaterialDataError):
        PropertyTable("x", [[300.0]], [[1.0]])


def test_material_validation_errors():
    with pytest.raises(MaterialDataError):
        make_constant_material(t_solidus=1600.0, t_liquidus=1500.0)
    with pytest.raises(MaterialDataError):
        make_constant_material(nu=0.5)
    with pytest.raises(MaterialDataError):
        make_constant_material(emissivity=1.5)
    with pytest.raises(MaterialDataError):
        make_constant_material(cp=-1.0)
    with pytest.raises(MaterialDataError):
        make_constant_material(latent=-5.0)


def test_missing_table_rejected():
    tables = {"cp": PropertyTable("cp", [300.0], [500.0])}
    with pytest.raises(MaterialDataError):
        MaterialModel(tables, (10.0, 0.0, 0.0), 1.0, 1.0e3, 5000.0, 5100.0,
                      0.3, 1.0e9)


def test_parse_material_text_scalars_tables_and_scale():
    text = """
# comment line
conductivity_poly = 1.0, 2.0e-2, -3.0e-6
marangoni_factor = 2.0
latent_heat = 1.0e4
t_solidus = 1000
t_liquidus = 1100
poisson_ratio = 0.3
hardening_modulus = 1e9

table cp scale=1.0
300, 400
600, 500

table rho scale=1.0
300, 8000

table emissivity scale=1.0
300, 0.5

table youngs_modulus scale=1.0e9
300, 200

table yield_stress scale=1.0e6
300, 1000

table thermal_expansion scale=1.0e-6
300, 12
"""
    mat = parse_material_text(text)
    assert mat.cp(300.0) == 400.0
    assert mat.cp(600.0) == 500.0
    assert mat.youngs_modulus(300.0) == 200.0e9  # scale applied
    assert mat.yield_stress(300.0) == 1.0e9
    assert mat.thermal_expansion(300.0) == pytest.approx(12.0e-6)
    assert mat.marangoni_factor == 2.0
    assert mat.melt_temperature == pytest.approx(1050.0)


def test_parse_material_text_rejects_garbage():
    with pytest.raises(MaterialDataError):
        parse_material_text("not a material at all")


@given(st.floats(min_value=-200.0, max_value=3000.0,
                 allow_nan=False, allow_infinity=False))
@settings(max_examples=60, deadline=None)
def test_tails_bound_spline_range_for_cp(temp):
    # Outside the table the value equals an endpoint; inside it is finite.
    inconel = inconel718()
    value = inconel.cp(temp)
    assert np.isfinite(value)
    if temp <= 298.0:
        assert value == pytest.approx(435.0, rel=1e-12)
    if temp >= 1609.0:
        assert value == pytest.approx(720.0, rel=1e-12)


@given(st.lists(st.integers(min_value=1, max_value=1000), min_size=2,
                max_size=8, unique=True),
       st.lists(st.floats(min_value=0.1, max_value=10.0), min_size=8,
                max_size=8))
@settings(max_examples=40, deadline=None)
def test_spline_exact_at_breakpoints(temps, values):
    temps = sorted(float(t) for t in temps)
    values = values[:len(temps)]
    table = PropertyTable("x", temps, values)
    for t, v in zip(temps, values):
        assert table(t) == pytest.approx(v, rel=1e-9, abs=1e-12)
