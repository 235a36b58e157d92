"""Self-contained reverse-mode substrate for the latent surrogate.

Everything here is plain float64 numpy: dense multilayer perceptrons with
softplus hidden units and linear output, explicit vector-Jacobian products,
a fixed-step RK4 rollout that is differentiated by backpropagating through
the unrolled stages, an adaptive Dormand-Prince 5(4) integrator with PI step
control and dense output for inference, the AdaBelief optimizer, and
block-norm adaptive gradient clipping.  Keeping the whole training path in
one small module makes the finite-difference gradient checks in the test
suite meaningful end to end.

Network weights serialize to a little-endian "DMLP" container:

    bytes 0:4   magic "DMLP"
    uint32      format version (1)
    uint32      layer-size count (depth + 1)
    uint32[]    layer sizes
    float64[]   per layer: W (fan_in x fan_out, row-major) then bias
"""

import math
import struct

import numpy as np

from .errors import ArtifactError, StepFailureError

DMLP_MAGIC = b"DMLP"
DMLP_VERSION = 1


def softplus(x):
    """log(1 + exp(x)) evaluated stably for large |x|."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Dense net with softplus hidden layers and identity output.

    Weights are He-style fan-in initialized; ``zero_output=True`` zeroes the
    final layer so the function starts out identically zero (used for the
    latent dynamics so the initial flow is the identity map).
    """

    def __init__(self, sizes, rng=None, zero_output=False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ArtifactError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        if rng is None:
            rng = np.random.default_rng()
        self.layers = []
        last = len(sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
            if zero_output and i == last:
                w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
            self.layers.append([w, b])

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def param_blocks(self):
        """Flat list of parameter arrays (W0, b0, W1, b1, ...), live views."""
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def set_param_blocks(self, blocks):
        expect = 2 * len(self.layers)
        if len(blocks) != expect:
            raise ArtifactError(f"expected {expect} blocks, got {len(blocks)}")
        for i, layer in enumerate(self.layers):
            layer[0] = np.asarray(blocks[2 * i], dtype=float)
            layer[1] = np.asarray(blocks[2 * i + 1], dtype=float)

    def forward(self, x, need_cache=False):
        """Evaluate the net; x is (n_in,) or (batch, n_in).

        With ``need_cache`` returns (y, cache) for a later ``vjp`` call.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.n_in:
            raise ArtifactError(
                f"input width {h.shape[1]} != expected {self.n_in}")
        acts = [h] if need_cache else None
        gates = [] if need_cache else None
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = h @ w + b
            if i == last:
                h = z
            else:
                h = softplus(z)
                if need_cache:
                    gates.append(sigmoid(z))
            if need_cache and i != last:
                acts.append(h)
        y = h[0] if single else h
        if need_cache:
            return y, (acts, gates, single)
        return y

    def vjp(self, cache, y_bar):
        """Backpropagate cotangent y_bar through a cached forward pass.

        Returns (x_bar, grads) where grads is a list of (dW, db) matching
        the layers; batched cotangents are summed into the parameter grads.
        """
        acts, gates, single = cache
        delta = np.atleast_2d(np.asarray(y_bar, dtype=float))
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            a_in = acts[i]
            grads[i] = (a_in.T @ delta, delta.sum(axis=0))
            delta = delta @ w.T
            if i > 0:
                delta = delta * gates[i - 1]
        x_bar = delta[0] if single else delta
        return x_bar, grads

    def zero_grads(self):
        return [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers]

    def save(self, path_or_fh):
        fh = path_or_fh if hasattr(path_or_fh, "write") else open(path_or_fh, "wb")
        try:
            fh.write(struct.pack("<4sII", DMLP_MAGIC, DMLP_VERSION,
                                 len(self.sizes)))
            fh.write(np.asarray(self.sizes, dtype="<u4").tobytes())
            for w, b in self.layers:
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        finally:
            if fh is not path_or_fh:
                fh.close()

    @classmethod
    def load(cls, path_or_fh):
        fh = path_or_fh if hasattr(path_or_fh, "read") else open(path_or_fh, "rb")
        try:
            head = fh.read(struct.calcsize("<4sII"))
            if len(head) < struct.calcsize("<4sII"):
                raise ArtifactError("truncated DMLP header")
            magic, version, n_sizes = struct.unpack("<4sII", head)
            if magic != DMLP_MAGIC:
                raise ArtifactError(f"bad DMLP magic {magic!r}")
            if version != DMLP_VERSION:
                raise ArtifactError(f"DMLP version {version} unsupported")
            if not 2 <= n_sizes <= 64:
                raise ArtifactError(f"implausible DMLP depth {n_sizes}")
            sizes = np.frombuffer(fh.read(4 * n_sizes), dtype="<u4")
            if sizes.size != n_sizes or np.any(sizes < 1):
                raise ArtifactError("bad DMLP layer sizes")
            net = cls.__new__(cls)
            net.sizes = [int(s) for s in sizes]
            net.layers = []
            for n_in, n_out in zip(net.sizes[:-1], net.sizes[1:]):
                w = np.frombuffer(fh.read(8 * n_in * n_out), dtype="<f8")
                b = np.frombuffer(fh.read(8 * n_out), dtype="<f8")
                if w.size != n_in * n_out or b.size != n_out:
                    raise ArtifactError("truncated DMLP payload")
                net.layers.append([w.reshape(n_in, n_out).astype(float),
                                   b.astype(float)])
            return net
        finally:
            if fh is not path_or_fh:
                fh.close()


class AdaBelief:
    """AdaBelief optimizer over a flat list of parameter arrays.

    m tracks the gradient mean; s tracks the squared prediction error of
    that mean ("belief"), accumulated with the same eps as the denominator:

        m <- b1 m + (1 - b1) g
        s <- b2 s + (1 - b2) (g - m)^2 + eps
        p -= lr * mhat / (sqrt(shat) + eps)
    """

    def __init__(self, blocks, lr=1.0e-3, beta1=0.9, beta2=0.999, eps=1.0e-16):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(b) for b in blocks]
        self.s = [np.zeros_like(b) for b in blocks]

    def step(self, blocks, grads, lr=None):
        """Apply one update in place; ``lr`` overrides the stored rate."""
        if len(blocks) != len(self.m) or len(grads) != len(self.m):
            raise ArtifactError("optimizer state does not match block count")
        rate = self.lr if lr is None else float(lr)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, s in zip(blocks, grads, self.m, self.s):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            diff = g - m
            s *= self.beta2
            s += (1.0 - self.beta2) * diff * diff + self.eps
            p -= rate * (m / c1) / (np.sqrt(s / c2) + self.eps)


def clip_gradients(grads, params, factor=0.01, floor=1.0e-3):
    """Adaptive per-block gradient clipping, in place.

    Each gradient array is rescaled so its norm does not exceed
    factor * max(parameter norm, floor).  The floor keeps zero-initialized
    blocks trainable.  Returns the list for convenience.
    """
    if factor <= 0:
        raise ArtifactError("clip factor must be positive")
    for g, p in zip(grads, params):
        g_norm = float(np.linalg.norm(g))
        limit = factor * max(float(np.linalg.norm(p)), floor)
        if g_norm > limit and g_norm > 0.0:
            g *= limit / g_norm
    return grads


# ---------------------------------------------------------------------------
# Fixed-step rollout of dz/dt = f([z; v]) on the read-out grid.

_RK4_STAGE = (0.0, 0.5, 0.5, 1.0)
_RK4_TIME = (0.0, 0.5, 0.5, 1.0)
_RK4_WEIGHT = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)


def rk4_rollout(net, z0, v_series, dt, need_cache=False, v_mode="zoh",
                substeps=1):
    """Integrate the latent ODE with classical RK4 between read-out times.

    ``z0`` is (B, n_l), ``v_series`` is (B, n_t, n_v).  With the default
    zero-order hold the input sample v_k is constant across each interval;
    ``v_mode="linear"`` instead interpolates v at the stage times, which
    matches how the adaptive inference integrator reads the input series.
    ``substeps`` splits every interval into that many RK4 steps of size
    dt/substeps, driving the discrete map toward the exact flow while the
    output grid stays at the read-out times.  Returns z_series
    (B, n_t, n_l), plus a stage cache when requested for the reverse pass.
    """
    if v_mode not in ("zoh", "linear"):
        raise ArtifactError(f"unknown v_mode {v_mode!r}")
    if substeps < 1:
        raise ArtifactError("substeps must be >= 1")
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    v = np.asarray(v_series, dtype=float)
    if v.ndim == 2:
        v = v[None]
    batch, n_t, _ = v.shape
    if z0.shape[0] != batch:
        raise ArtifactError("z0 batch does not match v_series batch")
    h = dt / substeps
    z_series = np.empty((batch, n_t, z0.shape[1]))
    z_series[:, 0] = z0
    caches = [] if need_cache else None
    z = z0
    for k in range(n_t - 1):
        step_cache = []
        for j in range(substeps):
            stages = []
            for c in range(4):
                zs = z if c == 0 else z + (h * _RK4_STAGE[c]) * stages[c - 1]
                if v_mode == "zoh":
                    vs = v[:, k]
                else:
                    w = (j + _RK4_TIME[c]) / substeps
                    vs = (1.0 - w) * v[:, k] + w * v[:, k + 1]
                out = net.forward(np.concatenate([zs, vs], axis=1),
                                  need_cache=need_cache)
                if need_cache:
                    out, cache = out
                    step_cache.append(cache)
                stages.append(out)
            z = z + h * (_RK4_WEIGHT[0] * stages[0]
                         + _RK4_WEIGHT[1] * stages[1]
                         + _RK4_WEIGHT[2] * stages[2]
                         + _RK4_WEIGHT[3] * stages[3])
        if not np.all(np.isfinite(z)):
            raise StepFailureError("latent state diverged during rollout",
                                   diagnostics={"step": k + 1})
        z_series[:, k + 1] = z
        if need_cache:
            caches.append(step_cache)
    if need_cache:
        return z_series, caches
    return z_series


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with PI step control and quartic dense output.

_DP_C = np.array([0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0])
_DP_A = (
    np.array([]),
    np.array([1.0 / 5.0]),
    np.array([3.0 / 40.0, 9.0 / 40.0]),
    np.array([44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0]),
    np.array([19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0,
              -212.0 / 729.0]),
    np.array([9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
              -5103.0 / 18656.0]),
    np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0,
              -2187.0 / 6784.0, 11.0 / 84.0]),
)
_DP_B5 = np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0,
                   -2187.0 / 6784.0, 11.0 / 84.0, 0.0])
_DP_ERR = _DP_B5 - np.array([5179.0 / 57600.0, 0.0, 7571.0 / 16695.0,
                             393.0 / 640.0, -92097.0 / 339200.0,
                             187.0 / 2100.0, 1.0 / 40.0])
_DP_DENSE = np.array([
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
])


def _dp5_stages(fun, t, y, h, k1):
    """Evaluate the seven Dormand-Prince stages; k1 may be reused (FSAL)."""
    k = np.empty((7, y.size))
    k[0] = fun(t, y) if k1 is None else k1
    for i in range(1, 7):
        k[i] = fun(t + _DP_C[i] * h, y + h * (_DP_A[i] @ k[:i]))
    return k


def dopri5(fun, y0, t0, t1, t_eval, rtol=1.0e-6, atol=1.0e-9, h0=None,
           max_steps=100000):
    """Adaptive Dormand-Prince 5(4) integration of dy/dt = fun(t, y).

    Solution values are read off at the sorted times ``t_eval`` using the
    integrator's quartic dense output, so accepted steps are independent of
    the read-out grid.  Step size follows a PI controller on the embedded
    error estimate.  Raises StepFailureError on step-size underflow or when
    the step budget is exhausted.  Returns (y_eval, stats).
    """
    y = np.array(y0, dtype=float).ravel()
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.size and (t_eval[0] < t0 - 1e-12 or t_eval[-1] > t1 + 1e-12):
        raise ArtifactError("t_eval outside integration span")
    span = t1 - t0
    if span <= 0:
        raise ArtifactError("require t1 > t0")
    y_out = np.empty((t_eval.size, y.size))
    j = 0
    while j < t_eval.size and t_eval[j] <= t0 + 1e-14 * max(1.0, abs(t0)):
        y_out[j] = y
        j += 1

    f0 = np.asarray(fun(t0, y), dtype=float)
    scale = atol + rtol * np.abs(y)
    if h0 is None:
        # Standard starting-step heuristic from the order-5 error model.
        d0 = float(np.linalg.norm(y / scale)) / math.sqrt(y.size)
        d1 = float(np.linalg.norm(f0 / scale)) / math.sqrt(y.size)
        h_a = 1.0e-6 * span if min(d0, d1) < 1e-10 else 0.01 * d0 / d1
        y_b = y + h_a * f0
        f_b = np.asarray(fun(t0 + h_a, y_b), dtype=float)
        d2 = float(np.linalg.norm((f_b - f0) / scale)) / math.sqrt(y.size) / h_a
        if max(d1, d2) <= 1e-15:
            # Nothing is moving; cover the span at once and let the error
            # estimator reject if dynamics appear later.
            h = span
        else:
            h_b = (0.01 / max(d1, d2)) ** 0.2
            h = min(100.0 * h_a, h_b, span)
        n_eval = 2
    else:
        h = min(float(h0), span)
        n_eval = 1

    h_min = 1e-13 * span
    safety, fac_min, fac_max = 0.9, 0.2, 10.0
    alpha, beta = 0.17, 0.04
    fac_old = 1.0e-4
    t = t0
    k1 = f0
    n_acc = n_rej = 0
    rejected = False
    for _ in range(max_steps):
        if t >= t1 - 1e-14 * max(1.0, abs(t1)):
            break
        h = min(h, t1 - t)
        if h < h_min:
            raise StepFailureError(
                "adaptive step size underflow",
                diagnostics={"time": t, "step": h, "floor": h_min})
        k = _dp5_stages(fun, t, y, h, k1)
        n_eval += 6
        y_new = y + h * (_DP_B5 @ k)
        err_vec = h * (_DP_ERR @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.linalg.norm(err_vec / scale)) / math.sqrt(y.size)
        fac11 = max(err, 1e-10) ** alpha
        if err <= 1.0:
            t_new = t + h
            if j < t_eval.size and t_eval[j] <= t_new + 1e-14 * max(1.0, abs(t_new)):
                y_diff = y_new - y
                bspl = h * k[0] - y_diff
                r4 = y_diff - h * k[6] - bspl
                r5 = h * (_DP_DENSE @ k)
                while j < t_eval.size and t_eval[j] <= t_new + 1e-14 * max(1.0, abs(t_new)):
                    th = (t_eval[j] - t) / h
                    y_out[j] = y + th * (y_diff + (1.0 - th) * (
                        bspl + th * (r4 + (1.0 - th) * r5)))
                    j += 1
            limit = 1.0 if rejected else fac_max
            fac = fac11 / fac_old ** beta
            h = h / max(1.0 / limit, min(1.0 / fac_min, fac / safety))
            fac_old = max(err, 1.0e-4)
            t, y, k1 = t_new, y_new, k[6]
            rejected = False
            n_acc += 1
        else:
            h = h / min(1.0 / fac_min, fac11 / safety)
            rejected = True
            n_rej += 1
    else:
        raise StepFailureError(
            "adaptive integrator exceeded its step budget",
            diagnostics={"time": t, "max_steps": max_steps})
    if j < t_eval.size:
        # Mop up read-out times that coincide with t1 to round-off.
        while j < t_eval.size and t_eval[j] <= t1 + 1e-9 * max(1.0, abs(t1)):
            y_out[j] = y
            j += 1
        if j < t_eval.size:
            raise StepFailureError(
                "integration finished before emitting all read-out times",
                diagnostics={"emitted": j, "requested": int(t_eval.size)})
    stats = {"n_accepted": n_acc, "n_rejected": n_rej, "n_eval": n_eval}
    return y_out, stats


def dopri5_fixed(fun, y0, t0, t1, n_steps):
    """Fixed-step integration using the fifth-order Dormand-Prince row.

    Used by convergence studies; shares the tableau with :func:`dopri5` so
    a transcription error would show up as a wrong observed order.
    """
    y = np.array(y0, dtype=float).ravel()
    h = (t1 - t0) / n_steps
    t = t0
    for _ in range(n_steps):
        k = _dp5_stages(fun, t, y, h, None)
        y = y + h * (_DP_B5 @ k)
        t += h
    return y


def rk4_rollout_vjp(net, caches, z_bar_series, dt, v_mode="zoh", substeps=1):
    """Reverse pass for :func:`rk4_rollout` (same ``v_mode``/``substeps``).

    ``z_bar_series`` is (B, n_t, n_l) cotangents for every output row.
    Returns (z0_bar, v_bar_series, net_grads); parameter gradients are
    summed over steps, stages, and batch.
    """
    if v_mode not in ("zoh", "linear"):
        raise ArtifactError(f"unknown v_mode {v_mode!r}")
    if substeps < 1:
        raise ArtifactError("substeps must be >= 1")
    z_bar = np.asarray(z_bar_series, dtype=float)
    if z_bar.ndim == 2:
        z_bar = z_bar[None]
    batch, n_t, n_l = z_bar.shape
    h = dt / substeps
    grads = net.zero_grads()
    v_bar = np.zeros((batch, n_t, net.n_in - n_l))
    lam = z_bar[:, -1].copy()
    for k in range(n_t - 2, -1, -1):
        step_cache = caches[k]
        for j in range(substeps - 1, -1, -1):
            # Cotangents of the four stage outputs of substep j.
            s_bar = [None] * 4
            s_bar[3] = h * _RK4_WEIGHT[3] * lam
            lam_z = lam.copy()
            for c in (3, 2, 1, 0):
                x_bar, g = net.vjp(step_cache[4 * j + c], s_bar[c])
                for gi, (dw, db) in enumerate(g):
                    grads[gi] = (grads[gi][0] + dw, grads[gi][1] + db)
                dz = x_bar[:, :n_l]
                dv = x_bar[:, n_l:]
                if v_mode == "zoh":
                    v_bar[:, k] += dv
                else:
                    w = (j + _RK4_TIME[c]) / substeps
                    v_bar[:, k] += (1.0 - w) * dv
                    v_bar[:, k + 1] += w * dv
                lam_z += dz
                if c > 0:
                    s_bar[c - 1] = (h * _RK4_WEIGHT[c - 1] * lam
                                    + (h * _RK4_STAGE[c]) * dz)
            lam = lam_z
        lam += z_bar[:, k]
    return lam, v_bar, grads
