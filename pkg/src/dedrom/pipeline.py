"""Stage-oriented pipeline: parse a config, run stages, track artifacts.

The filesystem is the data bus.  Every stage reads the artifacts of earlier
stages from the output directory and writes its own, and a JSON manifest
records a config hash plus the SHA-256 of every file a stage produced.
Re-running a completed stage with the same effective config is a no-op;
with a changed config it refuses until forced, so artifacts from different
configurations never mix silently.

Config files are flat ``section.key = value`` lines (no nesting).  Every
key has a default; the desk-scale scenario runs with an empty config.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from .errors import (ArtifactError, ConfigError, DependencyError,
                     StaleArtifactError)
from .grid import StructuredGrid
from .material import inconel718, load_material_file
from .mech import MechConfig, run_mechanical
from .metrics import (benchmark_inference, latent_sweep, nrmse_per_time,
                      nrmse_total, sweep_to_csv, sweep_to_svg)
from .surrogate import (FieldSample, TrainConfig, chain_predict, load_bundle,
                        save_bundle, train)
from .thermal import ThermalConfig, goldak_flux, simulate_thermal
from .trajectory import FieldTrajectory

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"

# Every config key with its parser and default.  Booleans accept
# true/false/on/off/1/0; "none" maps to None where a default is None.
_SCHEMA = {
    "material.file": (str, "inconel718"),
    "grid.nx": (int, 50),
    "grid.ny": (int, 10),
    "grid.nz": (int, 10),
    "grid.lx": (float, 0.05),
    "grid.ly": (float, 0.01),
    "grid.lz": (float, 0.01),
    "grid.grading_y": (float, 1.0),
    "grid.grading_z": (float, 1.0),
    "thermal.power": (float, 1000.0),
    "thermal.efficiency": (float, 0.4),
    "thermal.speed": (float, 0.015),
    "thermal.a_f": (float, 0.003),
    "thermal.a_r": (float, 0.008),
    "thermal.b": (float, 0.003),
    "thermal.c": (float, 0.003),
    "thermal.f_f": (float, 0.67),
    "thermal.f_r": (float, 1.33),
    "thermal.h_conv": (float, 10.0),
    "thermal.t_ambient": (float, 293.15),
    "thermal.t_end": (float, 20.0),
    "thermal.dt_readout": (float, 0.1),
    "thermal.dt_solver": (float, 0.02),
    "thermal.picard_tol": (float, 1.0e-3),
    "thermal.picard_max_iters": (int, 50),
    "thermal.cg_rtol": (float, 1.0e-9),
    "thermal.x_start": (float, 0.0),
    "thermal.y_center": (float, 0.0),
    "thermal.track_length": (float, None),
    "thermal.symmetry_plane": (bool, True),
    "mech.t_reference": (float, 293.15),
    "mech.newton_tol": (float, 1.0e-8),
    "mech.newton_max_iters": (int, 30),
    "mech.yield_floor": (float, 1.0e6),
    "mech.roller_face": (str, "bottom"),
    "mech.constraint_mode": (str, "fixture"),
    "sample.nx": (int, 17),
    "sample.ny": (int, 6),
    "sample.nz": (int, 3),
    "train.n_l": (int, 4),
    "train.epochs": (int, 1500),
    "train.lr": (float, 1.0e-3),
    "train.lr_min": (float, 1.0e-4),
    "train.warmup_epochs": (int, 50),
    "train.clip_factor": (float, 0.01),
    "train.recon_weight": (float, 1.0),
    "train.seed": (int, 0),
    "train.hidden": (str, "1024,128"),
    "train.node_hidden": (str, "16,16"),
    "train.v_mode": (str, "linear"),
    "train.substeps": (int, 1),
    "evaluate.holdout_power": (float, 1100.0),
    "report.probe_x": (float, 0.025),
    "report.probe_y": (float, 0.0),
    "report.probe_z": (float, 0.0),
    "report.sweep": (bool, False),
    "report.sweep_max_latent": (int, 10),
    "report.sweep_epochs": (int, 600),
    "bench.repeats": (int, 5),
}

# The full-scale preset refines the grid and widens the read-out lattice to
# the 17 x 12 x 9 = 1836 points of the reference study.  Expect hours, not
# minutes.
FULL_SCALE_PRESET = {
    "grid.nx": 100,
    "grid.ny": 20,
    "grid.nz": 20,
    "thermal.dt_solver": 0.01,
    "sample.ny": 12,
    "sample.nz": 9,
}


_NULLABLE = {"thermal.track_length", "evaluate.holdout_power"}


def _parse_value(key, text):
    kind, default = _SCHEMA[key]
    text = text.strip()
    if text.lower() == "none":
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key} does not accept 'none'")
    if kind is bool:
        low = text.lower()
        if low in ("true", "on", "1", "yes"):
            return True
        if low in ("false", "off", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key} expects {kind.__name__}, got {text!r}")


def parse_config_text(text):
    """Flat ``key = value`` lines into a validated dict of overrides."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, "
                              f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def _int_tuple(text, key):
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key} expects comma-separated integers")


class RunConfig:
    """Resolved configuration: defaults, optional preset, file, overrides."""

    def __init__(self, values):
        self.values = dict(values)

    @classmethod
    def build(cls, config_path=None, overrides=None, full_scale=False):
        values = {key: default for key, (_, default) in _SCHEMA.items()}
        if full_scale:
            values.update(FULL_SCALE_PRESET)
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            values.update(parse_config_text(path.read_text()))
        for key, value in (overrides or {}).items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        # constructing the model objects runs their own validators
        self.grid()
        self.thermal_config()
        self.mech_config()
        self.train_config()
        counts = self.sample_counts()
        shape = (self.values["grid.nx"], self.values["grid.ny"],
                 self.values["grid.nz"])
        for count, n in zip(counts, shape):
            if not 1 <= count <= n:
                raise ConfigError(
                    f"sample counts {counts} exceed grid shape {shape}")

    def section_hash(self, prefixes):
        lines = sorted(f"{k}={self.values[k]!r}" for k in self.values
                       if k.split(".", 1)[0] in prefixes)
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def _section(self, prefix):
        skip = len(prefix) + 1
        return {k[skip:]: v for k, v in self.values.items()
                if k.startswith(prefix + ".")}

    def material(self):
        name = self.values["material.file"]
        if name == "inconel718":
            return inconel718()
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"material file not found: {path}")
        return load_material_file(path)

    def grid(self):
        return StructuredGrid(**self._section("grid"))

    def thermal_config(self, power=None):
        kw = self._section("thermal")
        if power is not None:
            kw["power"] = power
        return ThermalConfig(**kw)

    def mech_config(self):
        return MechConfig(**self._section("mech"))

    def sample_counts(self):
        sec = self._section("sample")
        return (sec["nx"], sec["ny"], sec["nz"])

    def train_config(self, n_l=None, epochs=None):
        sec = self._section("train")
        sec["hidden"] = _int_tuple(sec["hidden"], "train.hidden")
        sec["node_hidden"] = _int_tuple(sec["node_hidden"],
                                        "train.node_hidden")
        if n_l is not None:
            sec["n_l"] = n_l
        if epochs is not None:
            sec["epochs"] = epochs
        return TrainConfig(**sec)

    def track_length(self):
        configured = self.values["thermal.track_length"]
        return self.values["grid.lx"] if configured is None else configured


# -- manifest and locking ---------------------------------------------------

def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_manifest(out_dir):
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return {"version": 1, "stages": {}}
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt manifest {path}: {exc}")
    if manifest.get("version") != 1:
        raise ArtifactError(f"unsupported manifest version in {path}")
    return manifest


def save_manifest(out_dir, manifest):
    path = Path(out_dir) / MANIFEST_NAME
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class output_lock:
    """One pipeline per output directory, enforced with an O_EXCL file."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DependencyError(
                f"output directory is locked by another run ({self.path}); "
                "remove the file if that run is dead")
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# -- stage implementations ---------------------------------------------------

def _thermal_pair(cfg, progress):
    material = cfg.material()
    grid = cfg.grid()
    thermal_cfg = cfg.thermal_config()
    laser = simulate_thermal(thermal_cfg, material, grid, progress=progress)
    quiet = simulate_thermal(thermal_cfg.with_power(0.0), material, grid)
    return laser, quiet


def _stage_simulate(cfg, out, progress):
    laser, quiet = _thermal_pair(cfg, progress)
    laser.save(out / "thermal.dtrj")
    quiet.save(out / "thermal_quiet.dtrj")
    return ["thermal.dtrj", "thermal_quiet.dtrj"]


def _load_trajectory(out, name, needed_by):
    path = out / name
    if not path.is_file():
        raise DependencyError(
            f"{needed_by} needs {name}; run its producing stage first")
    return FieldTrajectory.load(path)


def _stage_mechanics(cfg, out, progress):
    material = cfg.material()
    mech_cfg = cfg.mech_config()
    for src, dst in (("thermal.dtrj", "stress.dtrj"),
                     ("thermal_quiet.dtrj", "stress_quiet.dtrj")):
        thermal = _load_trajectory(out, src, "mechanics")
        stress, _ = run_mechanical(thermal, material, mech_cfg,
                                   progress=progress)
        stress.save(out / dst)
    return ["stress.dtrj", "stress_quiet.dtrj"]


def _stage_sample(cfg, out, progress):
    grid = cfg.grid()
    thermal_cfg = cfg.thermal_config()
    track = cfg.track_length()
    points, coords = grid.readout_lattice(cfg.sample_counts())

    fields = {}
    for src, key in (("thermal.dtrj", "t_laser"),
                     ("thermal_quiet.dtrj", "t_quiet"),
                     ("stress.dtrj", "s_laser"),
                     ("stress_quiet.dtrj", "s_quiet")):
        traj = _load_trajectory(out, src, "sample")
        component = "T" if key.startswith("t") else "s11"
        fields[key] = traj.component(component)[:, points]
        times = traj.times
    q_laser = np.stack([
        goldak_flux(coords[:, 0], coords[:, 1], coords[:, 2], t,
                    thermal_cfg, track)
        for t in times])
    np.savez_compressed(
        out / "samples.npz", times=times, points=points, coords=coords,
        q_laser=q_laser, q_quiet=np.zeros_like(q_laser), **fields)
    return ["samples.npz"]


def load_samples(out, needed_by):
    path = Path(out) / "samples.npz"
    if not path.is_file():
        raise DependencyError(f"{needed_by} needs samples.npz; "
                              "run the sample stage first")
    with np.load(path) as data:
        return {name: data[name] for name in data.files}


def build_field_samples(samples):
    """(temperature dataset, stress dataset) from the sample arrays."""
    times, points = samples["times"], samples["points"]
    dataset_t = [
        FieldSample(times, points, samples["q_laser"], samples["t_laser"]),
        FieldSample(times, points, samples["q_quiet"], samples["t_quiet"]),
    ]
    dataset_s = [
        FieldSample(times, points, samples["t_laser"], samples["s_laser"]),
        FieldSample(times, points, samples["t_quiet"], samples["s_quiet"]),
    ]
    return dataset_t, dataset_s


def _stage_train(cfg, out, progress):
    samples = load_samples(out, "train")
    dataset_t, dataset_s = build_field_samples(samples)
    train_cfg = cfg.train_config()
    model_t = train(dataset_t, train_cfg)
    save_bundle(model_t, out / "model_t.bundle")
    model_s = train(dataset_s, train_cfg)
    save_bundle(model_s, out / "model_s.bundle")
    return ["model_t.bundle", "model_s.bundle"]


def _load_models(out, needed_by):
    models = []
    for name in ("model_t.bundle", "model_s.bundle"):
        path = out / name
        if not path.is_file():
            raise DependencyError(f"{needed_by} needs {name}; "
                                  "run the train stage first")
        models.append(load_bundle(path))
    return models


def _chain(models, samples):
    model_t, model_s = models
    return chain_predict(model_t, model_s, samples["q_laser"],
                         samples["t_laser"][0], samples["times"],
                         point_indices=samples["points"])


def _stage_predict(cfg, out, progress):
    samples = load_samples(out, "predict")
    models = _load_models(out, "predict")
    pred_t, pred_s_chain = _chain(models, samples)
    pred_s_direct = models[1].predict(
        samples["s_laser"][0], samples["t_laser"], samples["times"],
        point_indices=samples["points"])
    np.savez_compressed(out / "predictions.npz", times=samples["times"],
                        points=samples["points"], pred_t=pred_t,
                        pred_s_chain=pred_s_chain,
                        pred_s_direct=pred_s_direct)
    return ["predictions.npz"]


def write_key_value(path, rows):
    with open(path, "w") as fh:
        for key, value in rows:
            fh.write(f"{key} = {value}\n")


def read_key_value(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _holdout_metrics(cfg, models, progress):
    """Generalization check at a different laser power (no threshold)."""
    power = cfg.values["evaluate.holdout_power"]
    material = cfg.material()
    grid = cfg.grid()
    thermal_cfg = cfg.thermal_config(power=power)
    thermal = simulate_thermal(thermal_cfg, material, grid,
                               progress=progress)
    stress, _ = run_mechanical(thermal, material, cfg.mech_config())
    points, coords = grid.readout_lattice(cfg.sample_counts())
    truth_t = thermal.component("T")[:, points]
    truth_s = stress.component("s11")[:, points]
    q = np.stack([goldak_flux(coords[:, 0], coords[:, 1], coords[:, 2], t,
                              thermal_cfg, cfg.track_length())
                  for t in thermal.times])
    pred_t, pred_s = chain_predict(models[0], models[1], q, truth_t[0],
                                   thermal.times, point_indices=points)
    return [
        ("holdout_power_w", power),
        ("holdout_note", "generalization metric, no pass/fail threshold"),
        ("holdout_nrmse_qt_total", f"{nrmse_total(pred_t, truth_t):.6e}"),
        ("holdout_nrmse_qs_total", f"{nrmse_total(pred_s, truth_s):.6e}"),
    ]


def _stage_evaluate(cfg, out, progress):
    samples = load_samples(out, "evaluate")
    models = _load_models(out, "evaluate")
    model_t, model_s = models
    pred_t = model_t.predict(samples["t_laser"][0], samples["q_laser"],
                             samples["times"],
                             point_indices=samples["points"])
    pred_s_direct = model_s.predict(samples["s_laser"][0],
                                    samples["t_laser"], samples["times"],
                                    point_indices=samples["points"])
    _, pred_s_chain = _chain(models, samples)

    per_time_t = nrmse_per_time(pred_t, samples["t_laser"])
    per_time_chain = nrmse_per_time(pred_s_chain, samples["s_laser"])
    rows = [
        ("nrmse_qt_total", f"{nrmse_total(pred_t, samples['t_laser']):.6e}"),
        ("nrmse_qt_per_time_max", f"{per_time_t.max():.6e}"),
        ("nrmse_ts_total",
         f"{nrmse_total(pred_s_direct, samples['s_laser']):.6e}"),
        ("nrmse_qs_total",
         f"{nrmse_total(pred_s_chain, samples['s_laser']):.6e}"),
        ("nrmse_qs_per_time_max", f"{per_time_chain.max():.6e}"),
        ("train_loss_best_t", f"{model_t.loss_history.min():.6e}"),
        ("train_loss_best_s", f"{model_s.loss_history.min():.6e}"),
        ("n_readout_points", samples["points"].size),
        ("n_readout_times", samples["times"].size),
        ("latent_dimensions", model_t.n_l),
    ]
    if cfg.values["evaluate.holdout_power"] is not None:
        rows.extend(_holdout_metrics(cfg, models, progress))
    write_key_value(out / "evaluation.txt", rows)
    return ["evaluation.txt"]


# -- exports -----------------------------------------------------------------

def export_snapshot_csv(trajectory, selector, dest):
    """CSV of one component over all cells at one read-out time."""
    if not {"time", "component"} <= set(selector):
        raise ConfigError("snapshot export needs 'time' and 'component'")
    times = trajectory.times
    k = int(np.argmin(np.abs(times - float(selector["time"]))))
    values = trajectory.component(str(selector["component"]))[k]
    xg, yg, zg = trajectory.grid.cell_centers()
    coords = np.column_stack([xg.ravel(), yg.ravel(), zg.ravel()])
    with open(dest, "w") as fh:
        fh.write(f"x,y,z,{selector['component']}\n")
        for row, value in zip(coords, values):
            fh.write(f"{row[0]:.6g},{row[1]:.6g},{row[2]:.6g},{value:.9e}\n")
    return dest


def export_probe_csv(trajectory, selector, dest):
    """Two-column CSV: time and one component traced at a probe point."""
    if "point" not in selector or "component" not in selector:
        raise ConfigError("probe export needs 'point' and 'component'")
    point = np.asarray(selector["point"], dtype=float)
    label = str(selector["component"])
    field = trajectory.component(label)
    trace = [trajectory.grid.interpolate_cell_field(field[k], point[None, :])[0]
             for k in range(trajectory.n_times)]
    with open(dest, "w") as fh:
        fh.write(f"time,{label}\n")
        for t, value in zip(trajectory.times, trace):
            fh.write(f"{t:.6g},{value:.9e}\n")
    return dest


def export_artifact(trajectory, kind, selector, dest):
    """Dispatcher for trajectory exports; ``kind`` selects the layout."""
    if kind == "snapshot-csv":
        return export_snapshot_csv(trajectory, selector, dest)
    if kind == "probe-csv":
        return export_probe_csv(trajectory, selector, dest)
    raise ConfigError(f"unknown export kind {kind!r}")


def _stage_report(cfg, out, progress):
    samples = load_samples(out, "report")
    models = _load_models(out, "report")
    model_t, model_s = models
    pred_t, pred_s_chain = _chain(models, samples)
    written = []

    probe = np.array([cfg.values["report.probe_x"],
                      cfg.values["report.probe_y"],
                      cfg.values["report.probe_z"]])
    near = int(np.argmin(np.sum((samples["coords"] - probe) ** 2, axis=1)))
    with open(out / "probe_trace.csv", "w") as fh:
        fh.write("time,temperature,temperature_pred,s11,s11_pred\n")
        for k, t in enumerate(samples["times"]):
            fh.write(f"{t:.6g},{samples['t_laser'][k, near]:.9e},"
                     f"{pred_t[k, near]:.9e},"
                     f"{samples['s_laser'][k, near]:.9e},"
                     f"{pred_s_chain[k, near]:.9e}\n")
    written.append("probe_trace.csv")

    with open(out / "s11_final.csv", "w") as fh:
        fh.write("x,y,z,s11,s11_pred\n")
        for j in range(samples["points"].size):
            x, y, z = samples["coords"][j]
            fh.write(f"{x:.6g},{y:.6g},{z:.6g},"
                     f"{samples['s_laser'][-1, j]:.9e},"
                     f"{pred_s_chain[-1, j]:.9e}\n")
    written.append("s11_final.csv")

    with open(out / "loss_history.csv", "w") as fh:
        fh.write("epoch,loss_t,loss_s\n")
        for epoch, (lt, ls) in enumerate(zip(model_t.loss_history,
                                             model_s.loss_history)):
            fh.write(f"{epoch},{lt:.9e},{ls:.9e}\n")
    written.append("loss_history.csv")

    if cfg.values["report.sweep"]:
        dataset_t, dataset_s = build_field_samples(samples)
        base = cfg.train_config(epochs=cfg.values["report.sweep_epochs"])
        n_l_values = range(1, cfg.values["report.sweep_max_latent"] + 1)
        rows = latent_sweep(dataset_t, dataset_s, n_l_values, base,
                            progress=progress)
        sweep_to_csv(rows, out / "sweep.csv")
        sweep_to_svg(rows, out / "sweep.svg")
        written.extend(["sweep.csv", "sweep.svg"])
    return written


def _stage_bench(cfg, out, progress):
    samples = load_samples(out, "bench")
    models = _load_models(out, "bench")
    material = cfg.material()
    grid = cfg.grid()
    thermal_cfg = cfg.thermal_config()
    mech_cfg = cfg.mech_config()

    def surrogate_run():
        _chain(models, samples)

    def simulator_run():
        thermal = simulate_thermal(thermal_cfg, material, grid)
        run_mechanical(thermal, material, mech_cfg)

    result = benchmark_inference(surrogate_run, simulator_run,
                                 repeats=cfg.values["bench.repeats"])
    write_key_value(out / "timing.txt", [
        ("surrogate_mean_s", f"{result['surrogate_mean']:.6e}"),
        ("surrogate_std_s", f"{result['surrogate_std']:.6e}"),
        ("surrogate_repeats", result["surrogate_repeats"]),
        ("simulator_mean_s", f"{result['simulator_mean']:.6e}"),
        ("simulator_std_s", f"{result['simulator_std']:.6e}"),
        ("simulator_repeats", result["simulator_repeats"]),
        ("speedup", f"{result['speedup']:.2f}"),
    ])
    return ["timing.txt"]


# Stage registry: config sections feeding the stage, prerequisite stages,
# and the implementation.  A stage's sections always include those of its
# prerequisites so configuration changes cascade to every affected stage.
_BASE_SECTIONS = ("material", "grid", "thermal")
STAGES = {
    "simulate": (_BASE_SECTIONS, (), _stage_simulate),
    "mechanics": (_BASE_SECTIONS + ("mech",), ("simulate",),
                  _stage_mechanics),
    "sample": (_BASE_SECTIONS + ("mech", "sample"),
               ("simulate", "mechanics"), _stage_sample),
    "train": (_BASE_SECTIONS + ("mech", "sample", "train"), ("sample",),
              _stage_train),
    "predict": (_BASE_SECTIONS + ("mech", "sample", "train"),
                ("sample", "train"), _stage_predict),
    "evaluate": (_BASE_SECTIONS + ("mech", "sample", "train", "evaluate"),
                 ("sample", "train"), _stage_evaluate),
    "report": (_BASE_SECTIONS + ("mech", "sample", "train", "report"),
               ("sample", "train"), _stage_report),
    "bench": (_BASE_SECTIONS + ("mech", "sample", "train", "bench"),
              ("sample", "train"), _stage_bench),
}
STAGE_ORDER = tuple(STAGES)


def _stage_is_current(entry, out_dir):
    return all((Path(out_dir) / name).is_file()
               and sha256_file(Path(out_dir) / name) == digest
               for name, digest in entry["artifacts"].items())


def run_stage(name, cfg, out_dir, force=False, progress=None):
    """Run one stage; returns 'done' or 'skipped' (already current)."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    sections, requires, fn = STAGES[name]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(out)
    config_hash = cfg.section_hash(sections)

    for dep in requires:
        if dep not in manifest["stages"]:
            raise DependencyError(
                f"stage {name!r} needs {dep!r}; run {dep!r} first")

    entry = manifest["stages"].get(name)
    if entry is not None and not force:
        if entry["config_hash"] != config_hash:
            raise StaleArtifactError(
                f"artifacts of stage {name!r} were built with a different "
                "configuration; rerun with force to replace them")
        if _stage_is_current(entry, out):
            return "skipped"

    started = time.time()
    names = fn(cfg, out, progress)
    manifest = load_manifest(out)  # the stage may have taken a while
    manifest["stages"][name] = {
        "config_hash": config_hash,
        "artifacts": {n: sha256_file(out / n) for n in names},
        "elapsed_s": round(time.time() - started, 3),
    }
    save_manifest(out, manifest)
    return "done"


def run_pipeline(cfg, stages, out_dir, force=False, progress=None):
    """Run the requested stages in canonical order under the output lock."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages: {', '.join(unknown)}")
    ordered = [s for s in STAGE_ORDER if s in set(stages)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    with output_lock(out):
        for name in ordered:
            results[name] = run_stage(name, cfg, out, force=force,
                                      progress=progress)
    return results


def verify_artifacts(out_dir, stage=None):
    """Recompute artifact hashes against the manifest.

    Returns {stage: {artifact: 'ok'}} and raises if anything is missing
    or does not match its recorded hash.
    """
    out = Path(out_dir)
    manifest = load_manifest(out)
    if not manifest["stages"]:
        raise DependencyError(f"no manifest found under {out}")
    if stage is not None and stage not in manifest["stages"]:
        raise DependencyError(f"stage {stage!r} has no manifest entry")
    wanted = [stage] if stage is not None else list(manifest["stages"])
    report = {}
    problems = []
    for name in wanted:
        report[name] = {}
        for artifact, digest in manifest["stages"][name]["artifacts"].items():
            path = out / artifact
            if not path.is_file():
                problems.append(f"{name}: {artifact} is missing")
                report[name][artifact] = "missing"
            elif sha256_file(path) != digest:
                problems.append(f"{name}: {artifact} does not match its "
                                "recorded hash")
                report[name][artifact] = "corrupt"
            else:
                report[name][artifact] = "ok"
    if problems:
        raise ArtifactError("; ".join(problems))
    return report
