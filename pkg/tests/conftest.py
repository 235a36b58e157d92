"""Shared fixtures: materials, grids, and the cached desk-scale dataset.

The desk-scale simulation and surrogate training are expensive (roughly a
minute and several minutes respectively), so the fixtures that need them
are session-scoped.  Set DEDROM_TEST_CACHE to a directory to persist those
artifacts between test sessions; without it everything is computed fresh.
"""

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from dedrom.grid import StructuredGrid
from dedrom.material import MaterialModel, PropertyTable, inconel718


DESK_GRID = dict(nx=50, ny=10, nz=10, lx=0.05, ly=0.01, lz=0.01)
READOUT_COUNTS = (17, 6, 3)


@pytest.fixture(scope="session")
def inconel():
    return inconel718()


@pytest.fixture
def desk_grid():
    return StructuredGrid(**DESK_GRID)


def make_constant_material(k=20.0, rho=8000.0, cp=500.0, emissivity=0.0,
                           E=2.0e11, nu=0.3, sigma_y=1.0e9, alpha=1.0e-5,
                           H=1.0e9, t_solidus=5000.0, t_liquidus=5100.0,
                           latent=1.0e3, marangoni=1.0):
    """Material with constant properties (melting far above the test range)."""
    tables = {
        "cp": PropertyTable("cp", [300.0], [cp]),
        "rho": PropertyTable("rho", [300.0], [rho]),
        "emissivity": PropertyTable("emissivity", [300.0], [emissivity]),
        "youngs_modulus": PropertyTable("youngs_modulus", [300.0], [E]),
        "yield_stress": PropertyTable("yield_stress", [300.0], [sigma_y]),
        "thermal_expansion": PropertyTable("thermal_expansion", [300.0], [alpha]),
    }
    return MaterialModel(tables, (k, 0.0, 0.0), marangoni, latent,
                         t_solidus, t_liquidus, nu, H,
                         name="constant-test")


@pytest.fixture
def constant_material():
    return make_constant_material()


def _cache_dir():
    root = os.environ.get("DEDROM_TEST_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cached(key, builder):
    """Load an .npz bundle of arrays from the cache or build and store it."""
    cache = _cache_dir()
    if cache is not None:
        path = cache / f"{key}.npz"
        if path.exists():
            with np.load(path) as data:
                return {name: data[name] for name in data.files}
    result = builder()
    if cache is not None:
        np.savez_compressed(cache / f"{key}.npz", **result)
    return result


def build_desk_dataset():
    """Simulate the desk scenario plus a no-laser run and sample the lattice."""
    from dedrom.mech import MechConfig, run_mechanical
    from dedrom.thermal import ThermalConfig, goldak_flux, simulate_thermal

    mat = inconel718()
    grid = StructuredGrid(**DESK_GRID)
    cfg = ThermalConfig()
    traj_t = simulate_thermal(cfg, mat, grid)
    xg, yg, zg = grid.cell_centers()
    q = np.stack([goldak_flux(xg, yg, zg, t, cfg, grid.lx).ravel()
                  for t in traj_t.times])
    traj_s, _ = run_mechanical(traj_t, mat, MechConfig())

    cfg0 = cfg.with_power(0.0)
    traj_t0 = simulate_thermal(cfg0, mat, grid)
    traj_s0, _ = run_mechanical(traj_t0, mat, MechConfig())

    idx, coords = grid.readout_lattice(READOUT_COUNTS)
    return {
        "times": traj_t.times,
        "points": idx,
        "coords": coords,
        "Q_laser": q[:, idx],
        "T_laser": traj_t.data[:, :, 0][:, idx],
        "S_laser": traj_s.component("s11")[:, idx],
        "Q_quiet": np.zeros((traj_t.times.size, idx.size)),
        "T_quiet": traj_t0.data[:, :, 0][:, idx],
        "S_quiet": traj_s0.component("s11")[:, idx],
        "T_full": traj_t.data[:, :, 0],
        "S_full": traj_s.component("s11"),
    }


@pytest.fixture(scope="session")
def desk_dataset():
    """Sampled desk-scale trajectories for surrogate training and checks."""
    return _cached("desk_dataset", build_desk_dataset)


def desk_samples(dataset):
    """(temperature samples, stress samples) FieldSample lists."""
    from dedrom.surrogate import FieldSample

    times, pts = dataset["times"], dataset["points"]
    samples_t = [FieldSample(times, pts, dataset["Q_laser"], dataset["T_laser"]),
                 FieldSample(times, pts, dataset["Q_quiet"], dataset["T_quiet"])]
    samples_s = [FieldSample(times, pts, dataset["T_laser"], dataset["S_laser"]),
                 FieldSample(times, pts, dataset["T_quiet"], dataset["S_quiet"])]
    return samples_t, samples_s


def train_cached(key, dataset_builder, cfg, return_elapsed=False):
    """Train a surrogate or reload it from the artifact cache.

    With ``return_elapsed`` the training wall time in seconds comes back
    too (recorded beside the bundle, so cache hits still report the time
    the original training run took).
    """
    import json
    import time

    from dedrom.surrogate import load_bundle, save_bundle, train

    cache = _cache_dir()
    tag = hashlib.sha256(repr(cfg).encode()).hexdigest()[:16]
    meta = None if cache is None else cache / f"{key}-{tag}.json"
    if cache is not None:
        path = cache / f"{key}-{tag}.bundle"
        if path.exists():
            model = load_bundle(path)
            if not return_elapsed:
                return model
            elapsed = None
            if meta is not None and meta.exists():
                elapsed = json.loads(meta.read_text()).get("elapsed_s")
            return model, elapsed
    started = time.perf_counter()
    model = train(dataset_builder(), cfg)
    elapsed = time.perf_counter() - started
    if cache is not None:
        save_bundle(model, cache / f"{key}-{tag}.bundle")
        meta.write_text(json.dumps({"elapsed_s": elapsed}))
    return (model, elapsed) if return_elapsed else model
