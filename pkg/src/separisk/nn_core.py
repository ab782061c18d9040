"""Small numpy neural-network kernel with hand-written backward passes.

Every layer keeps its parameters in ``params`` and the matching gradients in
``grads`` (same keys, same shapes).  ``forward`` caches what ``backward``
needs; ``backward`` fills ``grads`` and returns the gradient with respect to
the layer input.  All arithmetic is float64.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12


def _glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    """Base class: parameter bookkeeping shared by all layers."""

    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    #: running statistics that are saved with the layer but never trained
    state: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.state = {}

    @property
    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def n_non_trainable(self) -> int:
        return int(sum(s.size for s in self.state.values()))

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero 'same' padding.

    Input is ``[B, C_in, H, W]`` (a single ``[C_in, H, W]`` image is also
    accepted); weights are ``[C_out, C_in, 3, 3]``.
    """

    kernel = 3

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        k = self.kernel
        if rng is None:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = _glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        self.params = {"weight": w, "bias": np.zeros(c_out)}
        self.zero_grad()
        self._cache = None

    @staticmethod
    def param_count(c_in: int, c_out: int) -> int:
        return (3 * 3 * c_in + 1) * c_out

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(
                f"conv2d expects {self.c_in} input channels, got input of shape {x.shape}"
            )
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B,C,H,W,3,3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
        wmat = self.params["weight"].reshape(self.c_out, c * 9)
        out = cols @ wmat.T + self.params["bias"]
        out = out.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2)
        self._cache = (cols, x.shape, squeeze)
        return out[0] if squeeze else out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, (b, c, h, w), squeeze = self._cache
        if squeeze:
            dout = dout[None]
        dflat = dout.transpose(0, 2, 3, 1).reshape(b * h * w, self.c_out)
        self.grads["weight"] = (dflat.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] = dflat.sum(axis=0)
        wmat = self.params["weight"].reshape(self.c_out, c * 9)
        dcols = (dflat @ wmat).reshape(b, h, w, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
        return dx[0] if squeeze else dx


class ReLU(Layer):
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0.0)


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis except axis 1.

    Train mode normalises with batch statistics and folds them into the
    running estimates with an exponential moving average; infer mode uses
    the running estimates.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.zero_grad()

    @staticmethod
    def param_count(channels: int) -> tuple[int, int]:
        return 2 * channels, 2 * channels

    def _shape(self, x):
        shape = [1] * x.ndim
        shape[1] = self.channels
        return shape

    def forward(self, x: np.ndarray, training: bool = False, update_stats: bool = True) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ValueError(f"batch_norm expects {self.channels} channels, got {x.shape}")
        axes = tuple(i for i in range(x.ndim) if i != 1)
        shp = self._shape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.last_batch_stats = (mean, var, x.size // self.channels)
            if update_stats:
                m = self.momentum
                self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mean
                self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
        else:
            mean = self.state["running_mean"]
            var = self.state["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shp)) * inv_std.reshape(shp)
        self._cache = (xhat, inv_std, axes, shp, training)
        return self.params["gamma"].reshape(shp) * xhat + self.params["beta"].reshape(shp)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, axes, shp, training = self._cache
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(shp)
        if not training:
            return dxhat * inv_std.reshape(shp)
        n = dout.size // self.channels
        s1 = dxhat.sum(axis=axes).reshape(shp)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(shp)
        return inv_std.reshape(shp) / n * (n * dxhat - s1 - xhat * s2)


class MaxPool(Layer):
    """3x3 max pooling with stride 3; ragged edge windows are kept.

    Gradient goes to the first maximum of each window in row-major order.
    """

    size = 3

    @staticmethod
    def output_hw(h: int, w: int) -> tuple[int, int]:
        return -(-h // 3), -(-w // 3)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        b, c, h, w = x.shape
        ho, wo = self.output_hw(h, w)
        xp = np.full((b, c, ho * 3, wo * 3), -np.inf)
        xp[:, :, :h, :w] = x
        win = xp.reshape(b, c, ho, 3, wo, 3).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 9)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape, squeeze)
        return out[0] if squeeze else out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        idx, (b, c, h, w), squeeze = self._cache
        if squeeze:
            dout = dout[None]
        ho, wo = idx.shape[2], idx.shape[3]
        dwin = np.zeros((b, c, ho, wo, 9))
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dxp = dwin.reshape(b, c, ho, wo, 3, 3).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * 3, wo * 3)
        dx = dxp[:, :, :h, :w]
        return dx[0] if squeeze else dx


class LSTM(Layer):
    """Single LSTM layer over ``[N, T, D]`` sequences, zero initial state.

    Gate order in the fused kernels is input, forget, candidate, output.
    ``forward`` returns the full hidden sequence ``[N, T, H]``.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.d_in = d_in
        self.hidden = hidden
        hsz = hidden
        if rng is None:
            kernel = np.zeros((d_in, 4 * hsz))
            recurrent = np.zeros((hsz, 4 * hsz))
            bias = np.zeros(4 * hsz)
        else:
            kernel = _glorot_uniform(rng, (d_in, 4 * hsz), d_in, 4 * hsz)
            recurrent = np.concatenate([_orthogonal(rng, hsz, hsz) for _ in range(4)], axis=1)
            bias = np.zeros(4 * hsz)
            bias[hsz : 2 * hsz] = 1.0
        self.params = {"kernel": kernel, "recurrent": recurrent, "bias": bias}
        self.zero_grad()

    @staticmethod
    def param_count(d_in: int, hidden: int) -> int:
        return 4 * ((d_in + hidden) * hidden + hidden)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        n, t_len, d = x.shape
        if t_len == 0:
            raise ValueError("lstm_layer needs a sequence of length >= 1")
        if d != self.d_in:
            raise ValueError(f"lstm_layer expects input dim {self.d_in}, got {d}")
        hsz = self.hidden
        k, u, bias = self.params["kernel"], self.params["recurrent"], self.params["bias"]
        xk = x @ k + bias  # [N,T,4H]
        h = np.zeros((n, hsz))
        c = np.zeros((n, hsz))
        hs = np.zeros((n, t_len, hsz))
        cache = []
        for t in range(t_len):
            z = xk[:, t] + h @ u
            i = sigmoid(z[:, :hsz])
            f = sigmoid(z[:, hsz : 2 * hsz])
            g = np.tanh(z[:, 2 * hsz : 3 * hsz])
            o = sigmoid(z[:, 3 * hsz :])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            cache.append((i, f, g, o, c_prev, h_prev, tc))
        self._cache = (x, cache, squeeze)
        self.final_state = (h, c)
        return hs[0] if squeeze else hs

    def backward(self, dhs: np.ndarray) -> np.ndarray:
        x, cache, squeeze = self._cache
        if squeeze:
            dhs = dhs[None]
        n, t_len, _ = x.shape
        hsz = self.hidden
        u = self.params["recurrent"]
        dk = np.zeros_like(self.params["kernel"])
        du = np.zeros_like(u)
        db = np.zeros_like(self.params["bias"])
        dx = np.zeros_like(x)
        dh_next = np.zeros((n, hsz))
        dc_next = np.zeros((n, hsz))
        for t in reversed(range(t_len)):
            i, f, g, o, c_prev, h_prev, tc = cache[t]
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1 - tc**2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=1
            )
            dk += x[:, t].T @ dz
            du += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ self.params["kernel"].T
            dh_next = dz @ u.T
            dc_next = dc * f
        self.grads = {"kernel": dk, "recurrent": du, "bias": db}
        return dx[0] if squeeze else dx


class Dense(Layer):
    """Fully connected layer ``x @ W + b`` with optional relu/sigmoid."""

    def __init__(self, d_in: int, units: int, activation: str = "none", rng: np.random.Generator | None = None):
        super().__init__()
        if activation not in ("relu", "sigmoid", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.d_in = d_in
        self.units = units
        self.activation = activation
        w = np.zeros((d_in, units)) if rng is None else _glorot_uniform(rng, (d_in, units), d_in, units)
        self.params = {"weight": w, "bias": np.zeros(units)}
        self.zero_grad()

    @staticmethod
    def param_count(d_in: int, units: int) -> int:
        return (d_in + 1) * units

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"dense expects input dim {self.d_in}, got {x.shape}")
        self._x = x
        z = x @ self.params["weight"] + self.params["bias"]
        if self.activation == "relu":
            out = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            out = sigmoid(z)
        else:
            out = z
        self._z, self._out = z, out
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            dz = np.where(self._z > 0, dout, 0.0)
        elif self.activation == "sigmoid":
            dz = dout * self._out * (1 - self._out)
        else:
            dz = dout
        x2 = self._x.reshape(-1, self.d_in)
        dz2 = dz.reshape(-1, self.units)
        self.grads["weight"] = x2.T @ dz2
        self.grads["bias"] = dz2.sum(axis=0)
        return dz @ self.params["weight"].T


def balanced_class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights so each class carries half the total weight."""
    y = np.asarray(labels)
    n = y.size
    n1 = int((y == 1).sum())
    n0 = n - n1
    w0 = n / (2.0 * n0) if n0 else 0.0
    w1 = n / (2.0 * n1) if n1 else 0.0
    return w0, w1


def weighted_bce(predictions, labels, class_weights: tuple[float, float] | None = None) -> float:
    """Class-weighted mean binary cross-entropy.

    ``class_weights`` is ``(w_negative, w_positive)``; when omitted it is the
    balanced inverse-frequency weighting of ``labels``.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("weighted_bce on empty input")
    if class_weights is None:
        class_weights = balanced_class_weights(y)
    sw = np.where(y == 1, class_weights[1], class_weights[0])
    ll = y * np.log(np.maximum(p, LOG_CLAMP)) + (1 - y) * np.log(np.maximum(1 - p, LOG_CLAMP))
    return float(-(sw * ll).sum() / sw.sum())


def weighted_bce_logits(logits, labels, class_weights: tuple[float, float] | None = None):
    """Weighted BCE evaluated through the sigmoid; returns (loss, d loss / d logit)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.size == 0:
        raise ValueError("weighted_bce on empty input")
    if class_weights is None:
        class_weights = balanced_class_weights(y)
    sw = np.where(y == 1, class_weights[1], class_weights[0])
    p = sigmoid(z)
    loss = weighted_bce(p, y, class_weights)
    grad = sw * (p - y) / sw.sum()
    return loss, grad


class RMSProp:
    """RMSProp with one squared-gradient accumulator per parameter array."""

    def __init__(self, learning_rate: float = 0.001, decay: float = 0.9, epsilon: float = 1e-7):
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.accumulators: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name, p in params.items():
            g = grads[name]
            if np.shape(g) != np.shape(p):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name!r}")
            s = self.accumulators.get(name)
            if s is None:
                s = np.zeros_like(p)
            s = self.decay * s + (1 - self.decay) * g * g
            self.accumulators[name] = s
            p -= self.learning_rate * g / (np.sqrt(s) + self.epsilon)


def rmsprop_step(params, grads, state: RMSProp | None = None):
    """Functional wrapper: copies ``params`` and returns ``(new_params, state)``."""
    state = RMSProp() if state is None else state
    new = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    state.step(new, grads)
    return new, state


def grad_check(
    loss_fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_per_array: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``loss_fn`` must re-run the forward pass reading ``arrays`` in place.
    With ``max_per_array`` only a random subset of coordinates is probed.
    """
    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = rng.choice(flat.size, size=max_per_array, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            ana = grad[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
