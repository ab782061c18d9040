"""CNN+LSTM clip scorer, clip preprocessing, SVID files and feature-map export."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .additive_model import TrainConfig, TrainHistory
from .cohort import atomic_write_bytes, atomic_write_text
from .nn_core import LSTM, BatchNorm, Conv2D, Dense, MaxPool, ReLU, RMSProp, balanced_class_weights, \
    sigmoid, weighted_bce_logits

FORMAT_VERSION = "separisk-videonet/1"
SVID_MAGIC = b"SVID"
LAYERS = ("L1", "L2", "L3", "L4")


@dataclass
class VideoNetConfig:
    frames: int = 60
    height: int = 109
    width: int = 150
    channels: tuple = ((4, 4), (8, 8), (8, 8), (8, 8))
    lstm_hidden: tuple = (8, 4)
    dense_units: int = 4
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    def __post_init__(self):
        self.channels = tuple(tuple(int(c) for c in pair) for pair in self.channels)
        self.lstm_hidden = tuple(int(h) for h in self.lstm_hidden)
        if min(self.frames, self.height, self.width) < 1:
            raise ValueError("clip dimensions must be positive")
        if len(self.channels) != 4 or any(len(p) != 2 for p in self.channels):
            raise ValueError("need four blocks of two convolution channel counts")

    def spatial_dims(self) -> list[tuple[int, int]]:
        dims = [(self.height, self.width)]
        for _ in range(4):
            dims.append(MaxPool.output_hw(*dims[-1]))
        return dims


DESK_CONFIG = VideoNetConfig(frames=12, height=28, width=38)


@dataclass
class VideoClip:
    frames: np.ndarray
    frame_rate: float = 30.0
    study: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("clip frames must be [T>=1, H, W]")


class _Block:
    """conv+ReLU, conv+ReLU, batch norm, 3x3 max pool."""

    def __init__(self, c_in, c_mid, c_out, cfg: VideoNetConfig, rng):
        self.conv1 = Conv2D(c_in, c_mid, rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2D(c_mid, c_out, rng)
        self.relu2 = ReLU()
        self.bn = BatchNorm(c_out, cfg.bn_momentum, cfg.bn_eps)
        self.pool = MaxPool()

    def layers(self):
        return {"conv1": self.conv1, "conv2": self.conv2, "bn": self.bn}

    def forward(self, x, training, update_stats=True, keep=None):
        a1 = self.relu1.forward(self.conv1.forward(x))
        a2 = self.relu2.forward(self.conv2.forward(a1))
        b = self.bn.forward(a2, training=training, update_stats=update_stats)
        out = self.pool.forward(b)
        if keep is not None:
            keep.update(conv1=a1, conv2=a2, bn=b, pool=out)
        return out

    def backward(self, d):
        d = self.pool.backward(d)
        d = self.bn.backward(d)
        d = self.conv2.backward(self.relu2.backward(d))
        return self.conv1.backward(self.relu1.backward(d))


class VideoNet:
    """Per-frame CNN (shared weights) -> spatial mean -> LSTM -> LSTM -> dense -> scalar."""

    def __init__(self, config: VideoNetConfig | None = None, seed: int | None = 0):
        self.config = cfg = config or VideoNetConfig()
        rng = None if seed is None else np.random.default_rng(seed)
        self.blocks = []
        c_in = 1
        for c_mid, c_out in cfg.channels:
            self.blocks.append(_Block(c_in, c_mid, c_out, cfg, rng))
            c_in = c_out
        h1, h2 = cfg.lstm_hidden
        self.lstm1 = LSTM(c_in, h1, rng)
        self.lstm2 = LSTM(h1, h2, rng)
        self.dense = Dense(h2, cfg.dense_units, "relu", rng)
        self.out = Dense(cfg.dense_units, 1, "none", rng)

    # -- bookkeeping -------------------------------------------------------

    def layers(self) -> dict:
        out = {}
        for name, blk in zip(LAYERS, self.blocks):
            for k, layer in blk.layers().items():
                out[f"{name}.{k}"] = layer
        out.update({"lstm1": self.lstm1, "lstm2": self.lstm2, "dense": self.dense, "output": self.out})
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers().items() for pn, p in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.layers().items() for pn in layer.params}

    def state(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{sn}": s for ln, layer in self.layers().items() for sn, s in layer.state.items()}

    def param_table(self) -> list[tuple[str, int, int]]:
        """(layer, trainable, non-trainable) rows in network order."""
        return [(name, layer.n_trainable, layer.n_non_trainable) for name, layer in self.layers().items()]

    def param_count(self) -> dict[str, int]:
        rows = self.param_table()
        return {"trainable": sum(r[1] for r in rows), "non_trainable": sum(r[2] for r in rows)}

    def snapshot(self):
        return ({k: v.copy() for k, v in self.params().items()}, {k: v.copy() for k, v in self.state().items()})

    def restore(self, snap):
        params, state = snap
        for ln, layer in self.layers().items():
            for pn in layer.params:
                layer.params[pn] = params[f"{ln}.{pn}"].copy()
            for sn in layer.state:
                layer.state[sn] = state[f"{ln}.{sn}"].copy()

    # -- computation -------------------------------------------------------

    def _check(self, clips):
        clips = np.asarray(clips, dtype=np.float64)
        if clips.ndim == 3:
            clips = clips[None]
        cfg = self.config
        if clips.shape[1:] != (cfg.frames, cfg.height, cfg.width):
            raise ValueError(
                f"clip shape {clips.shape[1:]} does not match network input "
                f"{(cfg.frames, cfg.height, cfg.width)}"
            )
        return clips

    def frame_features(self, clips, training=False, update_stats=True):
        """Per-frame CNN output averaged over space: ``[N, T, C]``."""
        clips = self._check(clips)
        n, t_len, h, w = clips.shape
        x = clips.reshape(n * t_len, 1, h, w)
        for blk in self.blocks:
            x = blk.forward(x, training, update_stats)
        self._pool_shape = x.shape
        return x.mean(axis=(2, 3)).reshape(n, t_len, -1)

    def forward(self, clips, training: bool = False, update_stats: bool = True) -> np.ndarray:
        """Pre-sigmoid scores, one per clip."""
        feats = self.frame_features(clips, training, update_stats)
        self._n, self._t = feats.shape[:2]
        h1 = self.lstm1.forward(feats)
        h2 = self.lstm2.forward(h1)
        d = self.dense.forward(h2[:, -1])
        return self.out.forward(d)[:, 0]

    def backward(self, dz) -> None:
        n, t_len = self._n, self._t
        dd = self.out.backward(np.asarray(dz, dtype=np.float64).reshape(n, 1))
        dh2_last = self.dense.backward(dd)
        dh2 = np.zeros((n, t_len, self.lstm2.hidden))
        dh2[:, -1] = dh2_last
        dh1 = self.lstm2.backward(dh2)
        dfeat = self.lstm1.backward(dh1)
        b, c, hh, ww = self._pool_shape
        dx = np.broadcast_to(dfeat.reshape(b, c, 1, 1) / (hh * ww), self._pool_shape).copy()
        for blk in reversed(self.blocks):
            dx = blk.backward(dx)

    def score(self, clips, batch_size: int = 64) -> dict[str, np.ndarray]:
        """Inference-mode pre-activation and probability per clip."""
        clips = self._check(clips)
        z = np.concatenate([self.forward(clips[i : i + batch_size]) for i in range(0, len(clips), batch_size)]) \
            if len(clips) else np.zeros(0)
        return {"pre_activation": z, "probability": sigmoid(z)}

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        params, state = self.snapshot()
        return {
            "format": FORMAT_VERSION,
            "config": asdict(self.config),
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in params.items()},
            "state": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in state.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "VideoNet":
        from .additive_model import ModelFileError

        try:
            if d.get("format") != FORMAT_VERSION:
                raise ModelFileError(f"unsupported video model format {d.get('format')!r}")
            net = cls(VideoNetConfig(**d["config"]), seed=None)
            arr = lambda e: np.array(e["data"], dtype=np.float64).reshape(e["shape"])  # noqa: E731
            params = {k: arr(v) for k, v in d["params"].items()}
            state = {k: arr(v) for k, v in d["state"].items()}
            if set(params) != set(net.params()) or set(state) != set(net.state()):
                raise ModelFileError("video model parameter names do not match its config")
            for k, v in net.params().items():
                if params[k].shape != v.shape:
                    raise ModelFileError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")
            net.restore((params, state))
            return net
        except ModelFileError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFileError(f"malformed video model document: {exc!r}") from exc

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "VideoNet":
        from .additive_model import ModelFileError

        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ModelFileError(f"{path}: not a valid video model file ({exc})") from exc


def build_video_net(config: VideoNetConfig | None = None, seed: int | None = 0) -> VideoNet:
    return VideoNet(config, seed)


def param_count(net: VideoNet) -> dict[str, int]:
    return net.param_count()


def video_score(net: VideoNet, clip) -> dict[str, float]:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    s = net.score(np.asarray(frames)[None])
    return {"pre_activation": float(s["pre_activation"][0]), "probability": float(s["probability"][0])}


def video_loss_and_grads(net: VideoNet, clips, labels, class_weights=None, training=True, update_stats=False):
    z = net.forward(clips, training=training, update_stats=update_stats)
    loss, dz = weighted_bce_logits(z, labels, class_weights)
    net.backward(dz)
    return loss, net.grads()


def activation_pattern(net: VideoNet) -> bytes:
    """Digest of every ReLU on/off state and max-pool choice from the last forward pass."""
    h = hashlib.sha256()
    for blk in net.blocks:
        h.update(np.packbits(blk.relu1._mask).tobytes())
        h.update(np.packbits(blk.relu2._mask).tobytes())
        h.update(np.ascontiguousarray(blk.pool._cache[0]).tobytes())
    h.update(np.packbits(net.dense._z > 0).tobytes())
    return h.digest()


def network_grad_check(net: VideoNet, clips, labels, probes: int = 2, rng=None,
                       step: float = 1e-5, min_step: float = 1e-10, arrays=None):
    """Central-difference check of :func:`video_loss_and_grads` on sampled coordinates.

    The loss is piecewise smooth (ReLU and max-pool switch points).  A
    difference is accepted only when both ``+h`` and ``-h`` keep the
    activation pattern of the unperturbed pass; otherwise ``h`` is halved.
    ``arrays`` restricts probing to the named parameter arrays.
    Returns ``(max relative error, [(name, index, analytic, numeric, h), ...])``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = video_loss_and_grads(net, clips, labels)
    grads = {k: g.copy() for k, g in grads.items()}
    base = activation_pattern(net)
    records = []
    worst = 0.0
    for name, arr in net.params().items():
        if arrays is not None and name not in arrays:
            continue
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            orig = flat[i]
            h = step
            while True:
                flat[i] = orig + h
                fp = video_loss_and_grads(net, clips, labels)[0]
                same = activation_pattern(net) == base
                flat[i] = orig - h
                fm = video_loss_and_grads(net, clips, labels)[0]
                same = same and activation_pattern(net) == base
                flat[i] = orig
                if same or h / 2 < min_step:
                    break
                h /= 2
            num = (fp - fm) / (2 * h)
            a = float(grads[name].reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
            records.append((name, int(i), a, float(num), h))
    video_loss_and_grads(net, clips, labels)
    return worst, records


def refresh_bn_stats(net: VideoNet, clips, batch_size: int = 64) -> None:
    """Set every batch-norm running mean/var to pooled statistics over ``clips``.

    Each chunk runs in train mode; per-chunk moments are pooled exactly.
    """
    bns = [blk.bn for blk in net.blocks]
    acc = [[0.0, 0.0, 0] for _ in bns]
    for i in range(0, len(clips), batch_size):
        net.frame_features(clips[i : i + batch_size], training=True, update_stats=False)
        for a, bn in zip(acc, bns):
            mean, var, n = bn.last_batch_stats
            a[0] = a[0] + mean * n
            a[1] = a[1] + (var + mean**2) * n
            a[2] += n
    for (s1, s2, n), bn in zip(acc, bns):
        mean = s1 / n
        bn.state["running_mean"] = mean
        bn.state["running_var"] = np.maximum(s2 / n - mean**2, 0.0)


def train_video(net: VideoNet, train_clips, train_labels, val_clips, val_labels,
                config: TrainConfig) -> tuple[VideoNet, TrainHistory]:
    """Class-weighted BCE + RMSProp with validation early stopping.

    Batch-norm layers use batch statistics during the update steps.  Before
    the validation loss is measured their running estimates are refreshed
    from the training clips (see :func:`refresh_bn_stats`).
    """
    train_labels = np.asarray(train_labels)
    if np.unique(train_labels).size < 2:
        raise ValueError("video training labels contain a single class")
    rng = np.random.default_rng(config.seed)
    cw = balanced_class_weights(train_labels)
    cw_val = balanced_class_weights(val_labels)
    opt = RMSProp(learning_rate=config.learning_rate)
    hist = TrainHistory()
    best_snap = net.snapshot()
    best_val = np.inf
    wait = 0
    n = len(train_labels)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            z = net.forward(train_clips[idx], training=True, update_stats=True)
            loss, dz = weighted_bce_logits(z, train_labels[idx], cw)
            net.backward(dz)
            opt.step(net.params(), net.grads())
            losses.append(loss * len(idx))
            hist.steps += 1
        hist.train_loss.append(float(sum(losses) / n))
        refresh_bn_stats(net, train_clips)
        zv = net.score(val_clips)["pre_activation"]
        val_loss, _ = weighted_bce_logits(zv, val_labels, cw_val)
        hist.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = net.snapshot()
            hist.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    net.restore(best_snap)
    return net, hist


# -- preprocessing -----------------------------------------------------------


def _rescale(frames: np.ndarray) -> np.ndarray:
    if np.issubdtype(frames.dtype, np.integer):
        return np.clip(frames.astype(np.float64) / 255.0, 0.0, 1.0)
    x = frames.astype(np.float64)
    lo, hi = x.min(), x.max()
    if lo >= 0.0 and hi <= 1.0:
        return x
    if lo >= 0.0 and hi <= 255.0:
        return x / 255.0
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def resample_frames(frames: np.ndarray, frame_rate: float, target_fps: float = 30.0) -> np.ndarray:
    """Linear interpolation in time onto a ``1/target_fps`` grid starting at frame 0."""
    if frame_rate <= 0:
        raise ValueError("frame rate must be positive")
    t_len = frames.shape[0]
    if frame_rate == target_fps:
        return frames.copy()
    duration = (t_len - 1) / frame_rate
    n_out = int(np.floor(duration * target_fps + 1e-9)) + 1
    pos = np.arange(n_out) * (frame_rate / target_fps)
    lo = np.minimum(np.floor(pos).astype(int), t_len - 1)
    hi = np.minimum(lo + 1, t_len - 1)
    frac = (pos - lo)[:, None, None]
    return (1 - frac) * frames[lo] + frac * frames[hi]


def preprocess_video(frames, frame_rate: float, n_frames: int = 60, target_fps: float = 30.0,
                     size: tuple[int, int] | None = None) -> VideoClip:
    """Resample to ``target_fps``, crop or pad (repeating the last frame) to
    ``n_frames``, optionally resize, and rescale pixels into [0, 1]."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError("empty clip")
    x = _rescale(frames)
    x = resample_frames(x, frame_rate, target_fps)
    if x.shape[0] >= n_frames:
        x = x[:n_frames]
    else:
        x = np.concatenate([x, np.repeat(x[-1:], n_frames - x.shape[0], axis=0)])
    if size is not None and tuple(size) != x.shape[1:]:
        from scipy.ndimage import zoom

        x = zoom(x, (1, size[0] / x.shape[1], size[1] / x.shape[2]), order=1)
        x = np.clip(x, 0.0, 1.0)
    return VideoClip(x, target_fps)


# -- files -------------------------------------------------------------------


def write_svid(path, clips) -> None:
    """``SVID`` + uint32 LE (n, T, H, W) + float32 LE pixels, clip-major."""
    clips = np.asarray(clips)
    if clips.ndim != 4:
        raise ValueError("clips must be [n, T, H, W]")
    if clips.size and (clips.min() < 0 or clips.max() > 1):
        raise ValueError("SVID pixel values must lie in [0, 1]")
    header = SVID_MAGIC + struct.pack("<4I", *clips.shape)
    atomic_write_bytes(path, header + clips.astype("<f4").tobytes(order="C"))


def read_svid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != SVID_MAGIC:
        raise ValueError(f"{path}: not an SVID file")
    n, t_len, h, w = struct.unpack("<4I", data[4:20])
    expected = 20 + 4 * n * t_len * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(n, t_len, h, w).astype(np.float64)


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM from an image with values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_feature_maps(net: VideoNet, clip, layer: str = "L1", frame: int = 0, stage: str = "conv1",
                        out_dir=None) -> np.ndarray:
    """Feature maps of one frame at ``layer``/``stage``, each scaled to [0, 1].

    ``stage`` is one of conv1, conv2, bn, pool inside the block.  With
    ``out_dir`` every map is also written as ``<layer>_<stage>_f<frame>_m<k>.pgm``.
    """
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")
    if stage not in ("conv1", "conv2", "bn", "pool"):
        raise ValueError(f"unknown stage {stage!r}")
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float64)
    if not 0 <= frame < frames.shape[0]:
        raise ValueError(f"frame index {frame} out of range for {frames.shape[0]} frames")
    x = frames[frame][None, None]
    keep: dict = {}
    for name, blk in zip(LAYERS, net.blocks):
        x = blk.forward(x, training=False, keep=keep)
        if name == layer:
            break
    maps = keep[stage][0]
    out = np.empty_like(maps)
    for k, m in enumerate(maps):
        lo, hi = m.min(), m.max()
        out[k] = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    if out_dir is not None:
        for k, m in enumerate(out):
            write_pgm(Path(out_dir) / f"{layer}_{stage}_f{frame}_m{k}.pgm", m)
    return out
