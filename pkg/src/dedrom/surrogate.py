"""Latent-dynamics surrogate: autoencoders plus a neural ODE.

A trained model compresses an n_s-point field snapshot into an n_l-vector
with the encoder phi_y, compresses the driving input series the same way
with psi_u, integrates dz/dt = f([z; v(t)]) in the latent space, and maps
the latent trajectory back through the decoder.  Temperature is predicted
from the heat-source field, and the 11-stress component is predicted from
temperature, so chaining the two models turns a laser schedule into a
stress history without touching the simulator.

Training backpropagates through a fixed-step RK4 unroll on the read-out
grid (exact gradients of the discrete loss); inference defaults to the
adaptive Dormand-Prince integrator with the input series linearly
interpolated in time.
"""

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactError, ConfigError, DegenerateDataError, StepFailureError
from .neural import (AdaBelief, Mlp, clip_gradients, dopri5, rk4_rollout,
                     rk4_rollout_vjp)

BUNDLE_MAGIC = b"DSUR"
BUNDLE_VERSION = 1


class Normalizer:
    """Global affine standardization for one field."""

    def __init__(self, mean, std):
        if not np.isfinite(mean) or not np.isfinite(std) or std <= 0:
            raise DegenerateDataError(
                f"normalizer needs finite mean and positive std, got "
                f"mean={mean}, std={std}")
        self.mean = float(mean)
        self.std = float(std)

    @classmethod
    def from_data(cls, values):
        arr = np.asarray(values, dtype=float)
        return cls(arr.mean(), arr.std())

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean


@dataclass
class FieldSample:
    """One trajectory pair on the shared read-out lattice.

    ``u`` drives the dynamics, ``y`` is the target field; both are sampled
    at the same times and points.
    """

    times: np.ndarray
    point_indices: np.ndarray
    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        n_t, n_s = self.times.size, self.point_indices.size
        if self.u.shape != (n_t, n_s) or self.y.shape != (n_t, n_s):
            raise ConfigError(
                f"sample arrays {self.u.shape}/{self.y.shape} do not match "
                f"{n_t} times x {n_s} points")
        if n_t < 2 or np.any(np.diff(self.times) <= 0):
            raise ConfigError("times must be strictly increasing, length >= 2")

    @property
    def n_t(self):
        return self.times.size

    @property
    def n_s(self):
        return self.point_indices.size


def point_set_hash(point_indices):
    """Content hash identifying a read-out point set."""
    arr = np.ascontiguousarray(point_indices, dtype="<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass
class TrainConfig:
    n_l: int = 4
    epochs: int = 1500
    lr: float = 1.0e-3
    lr_min: float = 1.0e-4
    warmup_epochs: int = 50
    clip_factor: float = 0.01
    recon_weight: float = 1.0
    seed: int = 0
    hidden: tuple = (1024, 128)
    node_hidden: tuple = (16, 16)
    # Stage-time input interpolation during the training unroll.  "linear"
    # matches how the adaptive inference integrator reconstructs v(t), so
    # the trained dynamics and the deployed integrator see the same drive;
    # "zoh" holds v constant per interval.
    v_mode: str = "linear"
    # RK4 steps per read-out interval during the unroll; more substeps fit
    # dynamics closer to the continuous flow at proportional rollout cost.
    substeps: int = 1

    def __post_init__(self):
        if self.n_l < 1:
            raise ConfigError("latent dimension must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or self.lr_min <= 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 < lr_min <= lr")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.clip_factor <= 0:
            raise ConfigError("clip factor must be positive")
        if self.recon_weight < 0:
            raise ConfigError("reconstruction weight must be >= 0")
        if self.v_mode not in ("zoh", "linear"):
            raise ConfigError("v_mode must be 'zoh' or 'linear'")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    def learning_rate(self, epoch):
        """Linear warmup into a cosine decay from lr to lr_min."""
        if epoch < self.warmup_epochs:
            return self.lr * (epoch + 1) / self.warmup_epochs
        span = max(self.epochs - self.warmup_epochs - 1, 1)
        frac = (epoch - self.warmup_epochs) / span
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (
            1.0 + np.cos(np.pi * min(frac, 1.0)))


class SurrogateModel:
    """Encoder pair, decoder, and latent dynamics net with normalizers."""

    def __init__(self, n_s, n_l, rng, norm_u, norm_y, hidden=(1024, 128),
                 node_hidden=(16, 16)):
        widths = [int(n_s), *[int(h) for h in hidden], int(n_l)]
        self.phi_y = Mlp(widths, rng=rng)
        self.psi_u = Mlp(widths, rng=rng)
        self.decoder = Mlp(widths[::-1], rng=rng)
        self.node_f = Mlp([2 * int(n_l), *[int(h) for h in node_hidden],
                           int(n_l)], rng=rng, zero_output=True)
        self.norm_u = norm_u
        self.norm_y = norm_y
        self.n_s = int(n_s)
        self.n_l = int(n_l)
        self.point_hash = None
        self.loss_history = np.zeros(0)

    def nets(self):
        return [self.phi_y, self.psi_u, self.decoder, self.node_f]

    def param_blocks(self):
        out = []
        for net in self.nets():
            out.extend(net.param_blocks())
        return out

    def require_point_set(self, point_indices):
        """Refuse to run against a lattice the model was not trained on."""
        if self.point_hash is None:
            return
        got = point_set_hash(point_indices)
        if got != self.point_hash:
            raise ArtifactError(
                "read-out point set does not match the trained model "
                f"(model {self.point_hash[:12]}..., data {got[:12]}...)")

    def encode_state(self, y0):
        y0 = np.asarray(y0, dtype=float)
        if y0.shape != (self.n_s,):
            raise ConfigError(f"state length {y0.shape} != ({self.n_s},)")
        return self.phi_y.forward(self.norm_y.normalize(y0))

    def encode_input(self, u_series):
        u = np.atleast_2d(np.asarray(u_series, dtype=float))
        if u.shape[1] != self.n_s:
            raise ConfigError(f"input width {u.shape[1]} != {self.n_s}")
        return self.psi_u.forward(self.norm_u.normalize(u))

    def decode(self, z_series):
        z = np.atleast_2d(np.asarray(z_series, dtype=float))
        if z.shape[1] != self.n_l:
            raise ConfigError(f"latent width {z.shape[1]} != {self.n_l}")
        return self.norm_y.denormalize(self.decoder.forward(z))

    def predict(self, y0, u_series, times, integrator="dopri5",
                rtol=1.0e-6, atol=1.0e-8, point_indices=None):
        """Roll the latent ODE forward and decode at every read-out time."""
        if point_indices is not None:
            self.require_point_set(point_indices)
        times = np.asarray(times, dtype=float)
        u = np.asarray(u_series, dtype=float)
        if u.shape[0] != times.size:
            raise ConfigError("u_series rows must match times")
        z0 = self.encode_state(y0)
        v = self.encode_input(u)
        if integrator == "dopri5":
            fun = _LatentFlow(self.node_f, times, v)
            z_series, _ = dopri5(fun, z0, times[0], times[-1], times,
                                 rtol=rtol, atol=atol)
        elif integrator == "rk4":
            dt = float(times[1] - times[0])
            z_series = rk4_rollout(self.node_f, z0[None], v[None], dt)[0]
        else:
            raise ConfigError(f"unknown integrator {integrator!r}")
        if not np.all(np.isfinite(z_series)):
            raise StepFailureError("latent trajectory diverged")
        return self.decode(z_series)


class _LatentFlow:
    """dz/dt callable with the encoded input linearly interpolated in time."""

    def __init__(self, node_f, times, v_series):
        self.net = node_f
        self.times = times
        self.v = v_series

    def __call__(self, t, z):
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), self.times.size - 2)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        w = min(max(w, 0.0), 1.0)
        v = (1.0 - w) * self.v[k] + w * self.v[k + 1]
        return self.net.forward(np.concatenate([z, v]))


def _stack_dataset(dataset):
    if not dataset:
        raise ConfigError("training needs at least one trajectory")
    base = dataset[0]
    for s in dataset[1:]:
        if (s.n_t != base.n_t or s.n_s != base.n_s
                or not np.array_equal(s.times, base.times)
                or not np.array_equal(s.point_indices, base.point_indices)):
            raise ConfigError("all trajectories must share times and points")
    dt_all = np.diff(base.times)
    if not np.allclose(dt_all, dt_all[0], rtol=1e-9, atol=0.0):
        raise ConfigError("training requires a uniform read-out grid")
    u = np.stack([s.u for s in dataset])
    y = np.stack([s.y for s in dataset])
    return u, y, base.times, base.point_indices


def training_loss(model, un, yn, dt, recon_weight=1.0, need_grads=True,
                  v_mode="linear", substeps=1):
    """Normalized-space loss over stacked trajectories, with gradients.

    ``un``/``yn`` are (n_traj, n_t, n_s) already-normalized tensors.  The
    loss is the prediction MSE of the RK4-unrolled latent flow plus
    ``recon_weight`` times the autoencoder reconstruction MSE.  Gradients
    are exact reverse-mode and align with ``model.param_blocks()``.
    ``substeps`` refines the unroll below the read-out interval so the
    fitted discrete dynamics stay close to the continuous flow that the
    adaptive inference integrator sees.
    """
    n_traj, n_t, n_s = yn.shape
    n_l = model.n_l
    un_flat = un.reshape(n_traj * n_t, n_s)
    yn_flat = yn.reshape(n_traj * n_t, n_s)

    v_flat, c_psi = model.psi_u.forward(un_flat, need_cache=True)
    v = v_flat.reshape(n_traj, n_t, n_l)
    z0, c_phi0 = model.phi_y.forward(yn[:, 0], need_cache=True)
    z, c_roll = rk4_rollout(model.node_f, z0, v, dt, need_cache=True,
                            v_mode=v_mode, substeps=substeps)
    yhat, c_dec = model.decoder.forward(
        z.reshape(n_traj * n_t, n_l), need_cache=True)
    r_pred = yhat - yn_flat
    # Reconstruction branch shares the encoder and decoder weights.
    zy, c_phi = model.phi_y.forward(yn_flat, need_cache=True)
    yrec, c_dec2 = model.decoder.forward(zy, need_cache=True)
    r_rec = yrec - yn_flat
    loss = (float(np.mean(r_pred ** 2))
            + recon_weight * float(np.mean(r_rec ** 2)))
    if not need_grads:
        return loss, None

    n_pred = r_pred.size
    z_bar_flat, g_dec = model.decoder.vjp(c_dec, (2.0 / n_pred) * r_pred)
    z0_bar, v_bar, g_node = rk4_rollout_vjp(
        model.node_f, c_roll, z_bar_flat.reshape(n_traj, n_t, n_l), dt,
        v_mode=v_mode, substeps=substeps)
    _, g_phi0 = model.phi_y.vjp(c_phi0, z0_bar)
    _, g_psi = model.psi_u.vjp(c_psi, v_bar.reshape(n_traj * n_t, n_l))
    zy_bar, g_dec2 = model.decoder.vjp(
        c_dec2, (2.0 * recon_weight / n_pred) * r_rec)
    _, g_phi = model.phi_y.vjp(c_phi, zy_bar)

    grads = []
    for a, b in zip(g_phi0, g_phi):
        grads.extend((a[0] + b[0], a[1] + b[1]))
    for a in g_psi:
        grads.extend(a)
    for a, b in zip(g_dec, g_dec2):
        grads.extend((a[0] + b[0], a[1] + b[1]))
    for a in g_node:
        grads.extend(a)
    return loss, grads


def train(dataset, cfg):
    """Fit a surrogate to one or more trajectory pairs.

    Full-batch training: every epoch rolls out all trajectories, scores the
    normalized prediction MSE plus the autoencoder reconstruction MSE, and
    takes one clipped AdaBelief step.  The learning rate anneals on a
    cosine from lr to lr_min.  Returns the model holding the best-loss
    parameters, with the per-epoch loss history attached.
    """
    if not isinstance(cfg, TrainConfig):
        raise ConfigError("cfg must be a TrainConfig")
    u_all, y_all, times, points = _stack_dataset(dataset)
    n_traj, n_t, n_s = y_all.shape
    dt = float(times[1] - times[0])

    rng = np.random.default_rng(cfg.seed)
    norm_u = Normalizer.from_data(u_all)
    norm_y = Normalizer.from_data(y_all)
    model = SurrogateModel(n_s, cfg.n_l, rng, norm_u, norm_y,
                           hidden=cfg.hidden, node_hidden=cfg.node_hidden)
    model.point_hash = point_set_hash(points)

    un = norm_u.normalize(u_all)
    yn = norm_y.normalize(y_all)
    blocks = model.param_blocks()
    opt = AdaBelief(blocks, lr=cfg.lr)
    history = np.empty(cfg.epochs)
    best_loss = np.inf
    best = None

    for epoch in range(cfg.epochs):
        loss, grads = training_loss(model, un, yn, dt,
                                    recon_weight=cfg.recon_weight,
                                    v_mode=cfg.v_mode,
                                    substeps=cfg.substeps)
        if not np.isfinite(loss):
            raise StepFailureError("training loss diverged",
                                   diagnostics={"epoch": epoch})
        history[epoch] = loss
        if loss < best_loss:
            best_loss = loss
            best = [b.copy() for b in blocks]
        clip_gradients(grads, blocks, factor=cfg.clip_factor)
        opt.step(blocks, grads, lr=cfg.learning_rate(epoch))

    if best is not None:
        for dst, src in zip(blocks, best):
            dst[...] = src
    model.loss_history = history
    return model


def chain_predict(model_t, model_s, q_series, t0_field, times,
                  integrator="dopri5", point_indices=None):
    """Heat source -> temperature -> 11-stress, all in latent space.

    The stress model starts from the encoded zero field and is driven by
    the temperature prediction, so no simulator output is needed.
    """
    if model_t.point_hash != model_s.point_hash:
        raise ArtifactError("chained models were trained on different "
                            "read-out point sets")
    t_series = model_t.predict(t0_field, q_series, times,
                               integrator=integrator,
                               point_indices=point_indices)
    s_series = model_s.predict(np.zeros(model_s.n_s), t_series, times,
                               integrator=integrator,
                               point_indices=point_indices)
    return t_series, s_series


def save_bundle(model, path):
    """Serialize a trained model: four DMLP blocks + stats + point hash."""
    if model.point_hash is None:
        raise ArtifactError("refusing to save a model without a point hash")
    payloads = []
    for net in model.nets():
        buf = io.BytesIO()
        net.save(buf)
        payloads.append(buf.getvalue())
    hist = np.asarray(model.loss_history, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", BUNDLE_MAGIC, BUNDLE_VERSION,
                             model.n_s, model.n_l))
        fh.write(bytes.fromhex(model.point_hash))
        fh.write(struct.pack("<dddd", model.norm_u.mean, model.norm_u.std,
                             model.norm_y.mean, model.norm_y.std))
        fh.write(struct.pack("<I", hist.size))
        fh.write(hist.tobytes())
        for payload in payloads:
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_bundle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sIII")
    if len(raw) < head + 32 + 32 + 4:
        raise ArtifactError("truncated model bundle")
    magic, version, n_s, n_l = struct.unpack_from("<4sIII", raw, 0)
    if magic != BUNDLE_MAGIC:
        raise ArtifactError(f"bad bundle magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise ArtifactError(f"bundle version {version} unsupported")
    off = head
    point_hash = raw[off:off + 32].hex()
    off += 32
    u_mean, u_std, y_mean, y_std = struct.unpack_from("<dddd", raw, off)
    off += 32
    (n_hist,) = struct.unpack_from("<I", raw, off)
    off += 4
    hist = np.frombuffer(raw, dtype="<f8", count=n_hist, offset=off).copy()
    off += 8 * n_hist
    nets = []
    for _ in range(4):
        if off + 8 > len(raw):
            raise ArtifactError("truncated model bundle")
        (length,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if off + length > len(raw):
            raise ArtifactError("truncated model bundle")
        nets.append(Mlp.load(io.BytesIO(raw[off:off + length])))
        off += length
    if off != len(raw):
        raise ArtifactError("trailing bytes in model bundle")
    model = SurrogateModel.__new__(SurrogateModel)
    model.phi_y, model.psi_u, model.decoder, model.node_f = nets
    model.norm_u = Normalizer(u_mean, u_std)
    model.norm_y = Normalizer(y_mean, y_std)
    model.n_s = n_s
    model.n_l = n_l
    model.point_hash = point_hash
    model.loss_history = hist
    if (model.phi_y.n_in != n_s or model.phi_y.n_out != n_l
            or model.decoder.sizes != model.phi_y.sizes[::-1]
            or model.node_f.n_in != 2 * n_l or model.node_f.n_out != n_l):
        raise ArtifactError("bundle network shapes are inconsistent")
    return model
