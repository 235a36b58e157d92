"""Error metrics, the latent-dimension study, and timing reports.

NRMSE here is the root-mean-square prediction error normalized by the
standard deviation of the whole ground-truth trajectory, either per
read-out time or totalled over all times and points.  Also provides
Richardson extrapolation for mesh-convergence reporting and a wall-clock
benchmark comparing chained surrogate inference with the simulator.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceRegimeError, DegenerateDataError


def _variance_denominator(truth):
    truth = np.asarray(truth, dtype=float)
    dev = truth - truth.mean()
    total = float(np.sum(dev * dev))
    if total <= 0.0:
        raise DegenerateDataError("ground truth has zero variance")
    return total


def _check_shapes(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ConfigError(
            f"prediction {pred.shape} and truth {truth.shape} must be "
            "equal 2-D shapes")
    return pred, truth


def nrmse_at_time(pred, truth, k):
    """Per-time NRMSE at read-out index k (rows are times)."""
    pred, truth = _check_shapes(pred, truth)
    n_t = truth.shape[0]
    if not 0 <= k < n_t:
        raise ConfigError(f"time index {k} outside 0..{n_t - 1}")
    denom = _variance_denominator(truth) / n_t
    diff = pred[k] - truth[k]
    return float(np.sqrt(np.sum(diff * diff) / denom))


def nrmse_per_time(pred, truth):
    """Vector of per-time NRMSE values for every read-out index."""
    pred, truth = _check_shapes(pred, truth)
    n_t = truth.shape[0]
    denom = _variance_denominator(truth) / n_t
    diff = pred - truth
    return np.sqrt(np.sum(diff * diff, axis=1) / denom)


def nrmse_total(pred, truth):
    """Total NRMSE over all times and points."""
    pred, truth = _check_shapes(pred, truth)
    denom = _variance_denominator(truth)
    diff = pred - truth
    return float(np.sqrt(np.sum(diff * diff) / denom))


def richardson_error(coarse, medium, fine, r):
    """Observed order and extrapolated limit from a refinement triplet.

    The three observables come from meshes refined by the constant factor
    ``r`` (coarse -> medium -> fine).  Returns (order, extrapolated,
    relative error of the fine value).  Raises ConvergenceRegimeError when
    the triplet is not monotonically converging.
    """
    if r <= 1:
        raise ConfigError("refinement factor must exceed 1")
    d1 = float(medium) - float(coarse)
    d2 = float(fine) - float(medium)
    if d1 == 0.0 and d2 == 0.0:
        raise ConvergenceRegimeError(
            "identical observables on all three meshes; order undefined")
    if d1 * d2 <= 0.0:
        raise ConvergenceRegimeError(
            f"triplet is not monotone (deltas {d1:+.3e}, {d2:+.3e})")
    ratio = d1 / d2
    if ratio <= 1.0:
        raise ConvergenceRegimeError(
            f"differences are not contracting (ratio {ratio:.3f} <= 1)")
    order = float(np.log(ratio) / np.log(r))
    extrapolated = float(fine) + d2 / (r ** order - 1.0)
    scale = max(abs(extrapolated), np.finfo(float).tiny)
    rel_error = abs(float(fine) - extrapolated) / scale
    return order, extrapolated, rel_error


@dataclass
class EvalReport:
    """Container for everything the report stage writes out."""

    nrmse_per_time: dict = field(default_factory=dict)
    nrmse_total: dict = field(default_factory=dict)
    probe_traces: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    sweep_table: list = field(default_factory=list)


def latent_sweep(dataset_t, dataset_s, n_l_values, base_cfg, eval_index=0,
                 progress=None):
    """Train the two-model chain per latent dimension and score it.

    Returns a list of row dicts with keys n_l, nrmse_qt, nrmse_ts,
    nrmse_qs (or an ``error`` string when a cell failed); evaluation uses
    the trajectory at ``eval_index``.  Training failures are recorded and
    the sweep continues.
    """
    from dataclasses import replace

    from .surrogate import chain_predict, train

    rows = []
    sample_t = dataset_t[eval_index]
    sample_s = dataset_s[eval_index]
    for n_l in n_l_values:
        if n_l < 1:
            raise ConfigError("latent dimensions must be >= 1")
        row = {"n_l": int(n_l)}
        try:
            cfg = replace(base_cfg, n_l=int(n_l))
            model_t = train(dataset_t, cfg)
            model_s = train(dataset_s, cfg)
            pred_t = model_t.predict(sample_t.y[0], sample_t.u,
                                     sample_t.times)
            pred_s = model_s.predict(sample_s.y[0], sample_s.u,
                                     sample_s.times)
            _, chain_s = chain_predict(model_t, model_s, sample_t.u,
                                       sample_t.y[0], sample_t.times)
            row["nrmse_qt"] = nrmse_total(pred_t, sample_t.y)
            row["nrmse_ts"] = nrmse_total(pred_s, sample_s.y)
            row["nrmse_qs"] = nrmse_total(chain_s, sample_s.y)
        except Exception as exc:  # record and continue with the next cell
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def sweep_to_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("n_l,nrmse_qt,nrmse_ts,nrmse_qs,error\n")
        for row in rows:
            fh.write("{},{},{},{},{}\n".format(
                row["n_l"],
                row.get("nrmse_qt", ""),
                row.get("nrmse_ts", ""),
                row.get("nrmse_qs", ""),
                row.get("error", "")))


def sweep_to_svg(rows, path):
    """Log-scale NRMSE-vs-latent-dimension line plot."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if "error" not in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label, marker in (("nrmse_qt", "Q to T", "o"),
                               ("nrmse_ts", "T to stress", "s"),
                               ("nrmse_qs", "full chain", "^")):
        ax.semilogy([r["n_l"] for r in ok], [r[key] for r in ok],
                    marker=marker, label=label)
    ax.set_xlabel("latent dimensions")
    ax.set_ylabel("total NRMSE")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def benchmark_inference(surrogate_fn, simulator_fn, repeats=5,
                        sim_repeats=None):
    """Wall-clock comparison of chained inference against the simulator.

    ``surrogate_fn`` and ``simulator_fn`` are zero-argument callables that
    run one full scenario each.  The simulator may use fewer repeats (it
    is orders of magnitude slower); both must run at least once.  Returns
    a dict with means, standard deviations, and the speedup factor.
    """
    if repeats < 5:
        raise ConfigError("timing needs at least 5 surrogate repeats")
    if sim_repeats is None:
        sim_repeats = max(1, repeats // 5)
    sur = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        surrogate_fn()
        sur[i] = time.perf_counter() - t0
    sim = np.empty(sim_repeats)
    for i in range(sim_repeats):
        t0 = time.perf_counter()
        simulator_fn()
        sim[i] = time.perf_counter() - t0
    return {
        "surrogate_mean": float(sur.mean()),
        "surrogate_std": float(sur.std()),
        "surrogate_repeats": int(repeats),
        "simulator_mean": float(sim.mean()),
        "simulator_std": float(sim.std()),
        "simulator_repeats": int(sim_repeats),
        "speedup": float(sim.mean() / sur.mean()),
    }
