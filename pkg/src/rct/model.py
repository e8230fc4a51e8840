"""CRNN with hand-written reverse-mode gradients, plus the EMA teacher.

Architecture: pooled 3x3 conv blocks, each followed by per-clip channel
normalisation and a context gate, a mean over the remaining frequency axis, a stack of bidirectional GRU layers, and
two dense heads. The strong head gives per-frame sigmoid probabilities; the
attention head gives per-class softmax-over-time weights that pool the strong
probabilities into clip-level (weak) probabilities.

Each conv block computes ``avgpool(conv3x3(x))`` directly at the pooled
positions: averaging the zero-padded input over the pooling window first and
then applying the 3x3 kernel with stride equal to the pool size gives the
same result at a fraction of the cost.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ShapeError, StateError


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 4
    n_mels: int = 128
    n_frames: int = 624
    channels: tuple[int, ...] = (16, 32, 64)
    time_pools: tuple[int, ...] = (2, 2, 1)
    freq_pools: tuple[int, ...] = (8, 4, 2)
    gru_hidden: int = 32
    gru_layers: int = 1
    block_norm: bool = True

    def __post_init__(self):
        if not len(self.channels) == len(self.time_pools) == len(self.freq_pools):
            raise ShapeError("channels, time_pools and freq_pools must have equal length")
        if self.n_frames % self.pool_factor:
            raise ShapeError(f"n_frames {self.n_frames} not divisible by pool factor {self.pool_factor}")
        if self.n_mels % int(np.prod(self.freq_pools)):
            raise ShapeError(f"n_mels {self.n_mels} not divisible by frequency pooling")

    @property
    def pool_factor(self) -> int:
        return int(np.prod(self.time_pools))

    @property
    def out_frames(self) -> int:
        return self.n_frames // self.pool_factor

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for k in ("channels", "time_pools", "freq_pools"):
            d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class Predictions:
    """Model outputs; arrays may carry a leading batch axis."""

    strong: np.ndarray
    weak: np.ndarray
    strong_logits: np.ndarray | None = None
    att_logits: np.ndarray | None = None

    def __getitem__(self, i):
        pick = lambda a: None if a is None else a[i]  # noqa: E731
        return Predictions(self.strong[i], self.weak[i], pick(self.strong_logits), pick(self.att_logits))


@dataclass
class Cache:
    config_digest: bytes
    dtype: np.dtype
    blocks: list = field(default_factory=list)
    freq_in: tuple = ()
    grus: list = field(default_factory=list)
    head_in: np.ndarray | None = None
    strong: np.ndarray | None = None
    att: np.ndarray | None = None


# ---------------------------------------------------------------- primitives

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def context_gate(x, w, b):
    """x * sigmoid(x @ w + b) over the trailing (channel) axis."""
    s = sigmoid(x @ w + b)
    return x * s, (x, s)


def context_gate_backward(dy, w, cache):
    x, s = cache
    da = dy * x * s * (1.0 - s)
    lead = x.reshape(-1, x.shape[-1])
    dw = lead.T @ da.reshape(-1, da.shape[-1])
    db = da.reshape(-1, da.shape[-1]).sum(axis=0)
    dx = dy * s + da @ w.T
    return dx, dw, db


NORM_EPS = 1e-5


def channel_norm(z, g, b, eps=NORM_EPS):
    """Normalise each channel of each clip over its (time, frequency) plane, then scale and shift."""
    mu = z.mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(z.var(axis=(1, 2), keepdims=True) + eps)
    zh = (z - mu) * inv
    return zh * g + b, (zh, inv)


def channel_norm_backward(dy, g, cache):
    zh, inv = cache
    dg = (dy * zh).sum(axis=(0, 1, 2))
    db = dy.sum(axis=(0, 1, 2))
    dzh = dy * g
    dz = inv * (dzh - dzh.mean(axis=(1, 2), keepdims=True)
                - zh * (dzh * zh).mean(axis=(1, 2), keepdims=True))
    return dz, dg, db


def _window_mean(x, size, axis):
    if size == 1:
        return x
    m = x.shape[axis] - size + 1
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(0, m)
    out = x[tuple(idx)].copy()
    for a in range(1, size):
        idx[axis] = slice(a, a + m)
        out += x[tuple(idx)]
    out *= 1.0 / size
    return out


def _window_mean_adjoint(dy, size, axis, n):
    if size == 1:
        return dy
    shape = list(dy.shape)
    shape[axis] = n
    dx = np.zeros(shape, dtype=dy.dtype)
    m = dy.shape[axis]
    for a in range(size):
        idx = [slice(None)] * dy.ndim
        idx[axis] = slice(a, a + m)
        dx[tuple(idx)] += dy
    return dx / size


def pooled_conv(x, w, b, tp, fp):
    """avgpool_{tp x fp}(conv3x3_same(x) + b) for x of shape (B, T, F, Cin)."""
    bsz, t, f, cin = x.shape
    t_out, f_out = t // tp, f // fp
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    box = _window_mean(_window_mean(xp, tp, 1), fp, 2)
    taps = [box[:, i:i + tp * (t_out - 1) + 1:tp, j:j + fp * (f_out - 1) + 1:fp, :]
            for i in range(3) for j in range(3)]
    cols = np.stack(taps, axis=3).reshape(bsz * t_out * f_out, 9 * cin)
    z = cols @ w.reshape(9 * cin, -1) + b
    return z.reshape(bsz, t_out, f_out, -1), (x.shape, box.shape, cols)


def pooled_conv_backward(dz, w, cache, tp, fp, need_dx=True):
    x_shape, box_shape, cols = cache
    bsz, t, f, cin = x_shape
    t_out, f_out = t // tp, f // fp
    cout = w.shape[-1]
    dz2 = dz.reshape(-1, cout)
    dw = (cols.T @ dz2).reshape(w.shape)
    db = dz2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dz2 @ w.reshape(9 * cin, cout).T).reshape(bsz, t_out, f_out, 9, cin)
    dbox = np.zeros(box_shape, dtype=dz.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dbox[:, i:i + tp * (t_out - 1) + 1:tp, j:j + fp * (f_out - 1) + 1:fp, :] += dcols[:, :, :, k]
            k += 1
    dxp = _window_mean_adjoint(_window_mean_adjoint(dbox, fp, 2, f + 2), tp, 1, t + 2)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def gru_cell(x_t, h_prev, params):
    """One GRU step; ``params`` holds ``wx`` (D, 3H), ``wh`` (H, 3H), ``b`` (3H) in z, r, n order."""
    h_t, _ = _gru_step(x_t @ params["wx"] + params["b"], h_prev, params["wh"])
    return h_t


def _gru_step(xw_t, h_prev, wh):
    hdim = h_prev.shape[-1]
    hz = h_prev @ wh[:, :2 * hdim]
    z = sigmoid(xw_t[:, :hdim] + hz[:, :hdim])
    r = sigmoid(xw_t[:, hdim:2 * hdim] + hz[:, hdim:])
    rh = r * h_prev
    n = np.tanh(xw_t[:, 2 * hdim:] + rh @ wh[:, 2 * hdim:])
    h = (1.0 - z) * n + z * h_prev
    return h, (h_prev, z, r, rh, n)


def gru_sequence(x, wx, wh, b, reverse=False):
    """Run a GRU over (B, T, D) from a zero state; returns (B, T, H) and a cache."""
    bsz, t, _ = x.shape
    hdim = wh.shape[0]
    xw = x @ wx + b
    h = np.zeros((bsz, hdim), dtype=x.dtype)
    out = np.empty((bsz, t, hdim), dtype=x.dtype)
    steps = []
    order = range(t - 1, -1, -1) if reverse else range(t)
    for s in order:
        h, c = _gru_step(xw[:, s], h, wh)
        out[:, s] = h
        steps.append(c)
    return out, (x, steps, reverse)


def gru_sequence_backward(dout, wx, wh, cache):
    x, steps, reverse = cache
    bsz, t, _ = x.shape
    hdim = wh.shape[0]
    dxw = np.empty((bsz, t, 3 * hdim), dtype=dout.dtype)
    dwh = np.zeros_like(wh)
    dh = np.zeros((bsz, hdim), dtype=dout.dtype)
    order = list(range(t - 1, -1, -1) if reverse else range(t))
    for s, (h_prev, z, r, rh, n) in zip(reversed(order), reversed(steps)):
        dh = dh + dout[:, s]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        drh = dan @ wh[:, 2 * hdim:].T
        dr = drh * h_prev
        dh_prev += drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dzr = np.concatenate([daz, dar], axis=1)
        dh_prev += dzr @ wh[:, :2 * hdim].T
        dwh[:, :2 * hdim] += h_prev.T @ dzr
        dwh[:, 2 * hdim:] += rh.T @ dan
        dxw[:, s, :2 * hdim] = dzr
        dxw[:, s, 2 * hdim:] = dan
        dh = dh_prev
    flat = dxw.reshape(-1, 3 * hdim)
    dwx = x.reshape(-1, x.shape[-1]).T @ flat
    db = flat.sum(axis=0)
    dx = dxw @ wx.T
    return dx, dwx, dwh, db


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    cin = 1
    for i, cout in enumerate(cfg.channels):
        shapes[f"conv{i}.w"] = (3, 3, cin, cout)
        shapes[f"conv{i}.b"] = (cout,)
        if cfg.block_norm:
            shapes[f"norm{i}.g"] = (cout,)
            shapes[f"norm{i}.b"] = (cout,)
        shapes[f"gate{i}.w"] = (cout, cout)
        shapes[f"gate{i}.b"] = (cout,)
        cin = cout
    h = cfg.gru_hidden
    d = cin
    for layer in range(cfg.gru_layers):
        for direction in ("fwd", "bwd"):
            p = f"gru{layer}.{direction}"
            shapes[f"{p}.wx"] = (d, 3 * h)
            shapes[f"{p}.wh"] = (h, 3 * h)
            shapes[f"{p}.b"] = (3 * h,)
        d = 2 * h
    shapes["strong.w"] = (d, cfg.n_classes)
    shapes["strong.b"] = (cfg.n_classes,)
    shapes["att.w"] = (d, cfg.n_classes)
    shapes["att.b"] = (cfg.n_classes,)
    return shapes


def glorot_limit(shape) -> float:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, seed, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases and unit norm gains, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            lim = glorot_limit(shape)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return params


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def ema_update(teacher, student, decay: float):
    """teacher <- decay * teacher + (1 - decay) * student, returned as a new dict."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    if teacher.keys() != student.keys():
        raise ShapeError("teacher and student have different parameter names")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ShapeError(f"{k}: teacher {t.shape} vs student {s.shape}")
        out[k] = decay * t + (1.0 - decay) * s
    return out


# ---------------------------------------------------------------- forward / backward

def _check(x, layer, name):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite activation in {name}", layer=layer)


def forward(params, x, cfg: ModelConfig):
    """Run the CRNN on a batch of (T, K) feature matrices.

    Inputs longer than ``cfg.n_frames`` are cropped at the end. Returns a
    batched Predictions and the cache needed by ``backward``.
    """
    dtype = params["strong.w"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < cfg.n_frames or x.shape[2] != cfg.n_mels:
        raise ShapeError(f"expected (B, >={cfg.n_frames}, {cfg.n_mels}) input, got {x.shape}")
    h = x[:, :cfg.n_frames, :, None]
    cache = Cache(cfg.digest(), dtype)
    layer = 0
    for i, (tp, fp) in enumerate(zip(cfg.time_pools, cfg.freq_pools)):
        z, conv_cache = pooled_conv(h, params[f"conv{i}.w"], params[f"conv{i}.b"], tp, fp)
        _check(z, layer, f"conv{i}")
        norm_cache = None
        if cfg.block_norm:
            z, norm_cache = channel_norm(z, params[f"norm{i}.g"], params[f"norm{i}.b"])
        h, gate_cache = context_gate(z, params[f"gate{i}.w"], params[f"gate{i}.b"])
        _check(h, layer + 1, f"gate{i}")
        cache.blocks.append((conv_cache, norm_cache, gate_cache))
        layer += 2
    cache.freq_in = h.shape
    h = h.mean(axis=2)
    for lyr in range(cfg.gru_layers):
        outs = []
        caches = []
        for direction in ("fwd", "bwd"):
            p = f"gru{lyr}.{direction}"
            o, c = gru_sequence(h, params[f"{p}.wx"], params[f"{p}.wh"], params[f"{p}.b"],
                                reverse=direction == "bwd")
            outs.append(o)
            caches.append(c)
        h = np.concatenate(outs, axis=-1)
        _check(h, layer, f"gru{lyr}")
        cache.grus.append(caches)
        layer += 1
    cache.head_in = h
    strong_logits = h @ params["strong.w"] + params["strong.b"]
    att_logits = h @ params["att.w"] + params["att.b"]
    _check(strong_logits, layer, "strong head")
    _check(att_logits, layer, "attention head")
    strong, weak, att = heads_from_logits(strong_logits, att_logits)
    cache.strong, cache.att = strong, att
    return Predictions(strong, weak, strong_logits, att_logits), cache


def heads_from_logits(strong_logits, att_logits):
    """Strong probabilities, attention-pooled weak probabilities and attention weights."""
    strong = sigmoid(strong_logits)
    a = att_logits - att_logits.max(axis=-2, keepdims=True)
    a = np.exp(a)
    a /= a.sum(axis=-2, keepdims=True)
    weak = (a * strong).sum(axis=-2)
    return strong, weak, a


def backward(params, cache: Cache, d_strong, d_weak, cfg: ModelConfig):
    """Parameter gradients given loss gradients w.r.t. strong (B, T', C) and weak (B, C) outputs."""
    if cache.config_digest != cfg.digest() or cache.head_in is None:
        raise StateError("cache does not come from a forward pass with this configuration")
    if params["strong.w"].shape[0] != cache.head_in.shape[-1]:
        raise StateError("cache does not match parameter shapes")
    grads = {}
    strong, att, h = cache.strong, cache.att, cache.head_in
    d_strong = np.asarray(d_strong, dtype=cache.dtype)
    d_weak = np.asarray(d_weak, dtype=cache.dtype)
    if d_strong.shape != strong.shape or d_weak.shape != (strong.shape[0], strong.shape[2]):
        raise ShapeError(f"output gradient shapes {d_strong.shape}, {d_weak.shape} do not match outputs")
    ds = d_strong + att * d_weak[:, None, :]
    da = strong * d_weak[:, None, :]
    d_att_logits = att * (da - (att * da).sum(axis=1, keepdims=True))
    d_strong_logits = ds * strong * (1.0 - strong)
    flat_h = h.reshape(-1, h.shape[-1])
    for name, dl in (("strong", d_strong_logits), ("att", d_att_logits)):
        dl2 = dl.reshape(-1, dl.shape[-1])
        grads[f"{name}.w"] = flat_h.T @ dl2
        grads[f"{name}.b"] = dl2.sum(axis=0)
    dh = d_strong_logits @ params["strong.w"].T + d_att_logits @ params["att.w"].T
    hdim = cfg.gru_hidden
    for lyr in reversed(range(cfg.gru_layers)):
        dx_total = None
        for k, direction in enumerate(("fwd", "bwd")):
            p = f"gru{lyr}.{direction}"
            dx, dwx, dwh, db = gru_sequence_backward(
                dh[..., k * hdim:(k + 1) * hdim], params[f"{p}.wx"], params[f"{p}.wh"], cache.grus[lyr][k])
            grads[f"{p}.wx"], grads[f"{p}.wh"], grads[f"{p}.b"] = dwx, dwh, db
            dx_total = dx if dx_total is None else dx_total + dx
        dh = dx_total
    bsz, t_out, f_out, c = cache.freq_in
    dh = np.broadcast_to(dh[:, :, None, :] / f_out, cache.freq_in)
    for i in reversed(range(len(cfg.channels))):
        conv_cache, norm_cache, gate_cache = cache.blocks[i]
        dz, grads[f"gate{i}.w"], grads[f"gate{i}.b"] = context_gate_backward(dh, params[f"gate{i}.w"], gate_cache)
        if norm_cache is not None:
            dz, grads[f"norm{i}.g"], grads[f"norm{i}.b"] = channel_norm_backward(dz, params[f"norm{i}.g"], norm_cache)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = pooled_conv_backward(
            dz, params[f"conv{i}.w"], conv_cache, cfg.time_pools[i], cfg.freq_pools[i], need_dx=i > 0)
    return {k: grads[k] for k in params}


def predict(params, x, cfg: ModelConfig, batch_size: int = 32) -> Predictions:
    """Forward pass in chunks without keeping caches."""
    parts = [forward(params, x[i:i + batch_size], cfg)[0] for i in range(0, len(x), batch_size)]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return Predictions(cat("strong"), cat("weak"), cat("strong_logits"), cat("att_logits"))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"RCTC"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, student, teacher, meta: dict | None = None) -> None:
    """Binary checkpoint: header, model config, then a named f32 tensor table."""
    cfg_json = cfg.to_json().encode()
    meta_json = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), cfg.digest(),
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(meta_json)), meta_json]
    tensors = [(f"student/{k}", v) for k, v in student.items()] + [(f"teacher/{k}", v) for k, v in teacher.items()]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return (config, student, teacher, meta). Raises StateError on a config hash mismatch."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = data[off:off + 32]
    off += 32
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg = ModelConfig.from_json(data[off:off + n].decode())
    off += n
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + n].decode())
    off += n
    if cfg.digest() != digest:
        raise StateError(f"{path}: stored config does not match its hash")
    if expect is not None and expect.digest() != digest:
        raise StateError(f"{path}: checkpoint was trained with a different model configuration")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    student, teacher = {}, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
        owner, key = name.split("/", 1)
        (student if owner == "student" else teacher)[key] = arr
    return cfg, student, teacher, meta
