"""Encoder / ConvLSTM / decoder pressure predictor, its losses and training.

Tensors follow the (batch, channel, depth, height, width) layout internally;
public helpers also accept a single (channel, depth, height, width) volume.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import NonFiniteLossError, ShapeError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MPMW"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 3
    enc_channels: tuple = (16, 32, 64)
    enc_strides: tuple = (2, 2, 1)
    dec_channels: tuple = (32, 16, 16)
    hidden: int = 64
    window: int = 4
    slope: float = 0.1
    forget_bias: float = 1.0

    @property
    def latent(self):
        return self.enc_channels[-1]


class SurrogateModel:
    """Parameter container; the forward passes are module-level functions."""

    def __init__(self, config: ModelConfig | None = None, seed=0, dtype=np.float32):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.params = {}

        def uniform(name, shape, fan_in, gain):
            bound = np.sqrt(gain / fan_in)
            self.params[name] = ag.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name)

        def zeros(name, n, value=0.0):
            self.params[name] = ag.parameter(np.full(n, value, dtype=dtype), name)

        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.enc_channels):
            uniform(f"enc{i}.w", (c, c_prev, 3, 3, 3), c_prev * 27, 6.0)
            zeros(f"enc{i}.b", c)
            c_prev = c
        d0, d1, d2 = cfg.dec_channels
        uniform("dec0.w", (cfg.latent, d0, 2, 2, 2), cfg.latent, 6.0)
        zeros("dec0.b", d0)
        uniform("dec1.w", (d0, d1, 2, 2, 2), d0, 6.0)
        zeros("dec1.b", d1)
        uniform("dec2.w", (d2, d1, 3, 3, 3), d1 * 27, 6.0)
        zeros("dec2.b", d2)
        uniform("dec3.w", (cfg.in_channels, d2, 3, 3, 3), d2 * 27, 3.0)
        zeros("dec3.b", cfg.in_channels)
        hc = cfg.hidden
        # gate order: input, forget, output, candidate
        uniform("lstm.wx", (4 * hc, cfg.latent, 3, 3, 3), (cfg.latent + hc) * 27, 3.0)
        uniform("lstm.wh", (4 * hc, hc, 3, 3, 3), (cfg.latent + hc) * 27, 3.0)
        gate_bias = np.zeros(4 * hc, dtype=dtype)
        gate_bias[hc: 2 * hc] = cfg.forget_bias
        self.params["lstm.b"] = ag.parameter(gate_bias, "lstm.b")
        uniform("out.w", (cfg.latent, hc, 3, 3, 3), hc * 27, 3.0)
        zeros("out.b", cfg.latent)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if self.params[k].data.shape != v.shape:
                raise ShapeError(f"{k}: expected {self.params[k].data.shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)

    def astype(self, dtype):
        other = SurrogateModel.__new__(SurrogateModel)
        other.config = self.config
        other.params = {k: ag.parameter(v.data.astype(dtype), k) for k, v in self.params.items()}
        return other

    @property
    def dtype(self):
        return self.params["enc0.w"].data.dtype

    def latent_shape(self, spatial):
        dims = tuple(spatial)
        for s in self.config.enc_strides:
            dims = tuple(ag.conv_out_size(n, s) for n in dims)
        return (self.config.latent, *dims)


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, ag.Tensor):
        return x
    return ag.Tensor(np.ascontiguousarray(np.asarray(x, dtype=dtype)))


def _batched(x, channels, what, dtype=np.float32):
    """Promote (C, D, H, W) to (1, C, D, H, W); returns (tensor, squeeze)."""
    t = _as_tensor(x, dtype)
    if t.data.ndim == 4:
        return ag.reshape(t, (1, *t.shape)), True
    if t.data.ndim != 5:
        raise ShapeError(f"{what}: expected a 4D or 5D array, got shape {t.shape}")
    if t.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {t.shape[1]}")
    return t, False


def _unbatch(t, squeeze):
    return ag.reshape(t, t.shape[1:]) if squeeze else t


def encode(x, model: SurrogateModel):
    cfg = model.config
    t, squeeze = _batched(x, cfg.in_channels, "encode", model.dtype)
    if t.shape[1] != cfg.in_channels:
        raise ShapeError(f"encode: expected {cfg.in_channels} channels, got {t.shape[1]}")
    for i, s in enumerate(cfg.enc_strides):
        t = ag.leaky_relu(ag.conv3d(t, model[f"enc{i}.w"], model[f"enc{i}.b"], stride=s), cfg.slope)
    return _unbatch(t, squeeze)


def decode(c, model: SurrogateModel):
    cfg = model.config
    t, squeeze = _batched(c, cfg.latent, "decode", model.dtype)
    t = ag.leaky_relu(ag.conv_transpose3d(t, model["dec0.w"], model["dec0.b"]), cfg.slope)
    t = ag.leaky_relu(ag.conv_transpose3d(t, model["dec1.w"], model["dec1.b"]), cfg.slope)
    t = ag.leaky_relu(ag.conv3d(t, model["dec2.w"], model["dec2.b"]), cfg.slope)
    t = ag.conv3d(t, model["dec3.w"], model["dec3.b"])
    return _unbatch(t, squeeze)


def predict_next(latents, model: SurrogateModel):
    """Run the ConvLSTM over a window of latents and emit the next latent.

    ``latents`` is a sequence of n tensors, each (L, d, h, w) or (B, L, d, h, w).
    """
    cfg = model.config
    if len(latents) != cfg.window:
        raise ShapeError(f"predict_next: window is {cfg.window}, got {len(latents)} latents")
    seq = [_batched(c, cfg.latent, "predict_next", model.dtype) for c in latents]
    shapes = {s[0].shape for s in seq}
    if len(shapes) != 1:
        raise ShapeError(f"predict_next: latents differ in shape {sorted(shapes)}")
    squeeze = seq[0][1]
    hc = cfg.hidden
    h = c = None
    for x, _ in seq:
        gates = ag.conv3d(x, model["lstm.wx"], model["lstm.b"])
        if h is not None:
            gates = ag.add(gates, ag.conv3d(h, model["lstm.wh"]))
        i = ag.sigmoid(gates[:, 0:hc])
        f = ag.sigmoid(gates[:, hc: 2 * hc])
        o = ag.sigmoid(gates[:, 2 * hc: 3 * hc])
        g = ag.tanh(gates[:, 3 * hc:])
        c = ag.mul(i, g) if c is None else ag.add(ag.mul(f, c), ag.mul(i, g))
        h = ag.mul(o, ag.tanh(c))
    out = ag.conv3d(h, model["out.w"], model["out.b"])
    return _unbatch(out, squeeze)


def rollout(latents, model, steps):
    """Autoregressive prediction: feed each predicted latent back into the window."""
    window = list(latents)[-model.config.window:]
    preds = []
    for _ in range(steps):
        nxt = predict_next(window, model)
        preds.append(nxt)
        window = window[1:] + [nxt]
    return preds


def huber(x, x_hat, delta=1.0):
    """Mean elementwise Huber loss between ground truth ``x`` and ``x_hat``."""
    x_hat = _as_tensor(x_hat, np.asarray(getattr(x_hat, "data", x_hat)).dtype)
    target = x.data if isinstance(x, ag.Tensor) else np.asarray(x)
    if target.shape != x_hat.shape:
        raise ShapeError(f"huber: shape mismatch {target.shape} vs {x_hat.shape}")
    return ag.huber(x_hat, target, delta)


def _field_loss(truth, pred, delta, kind):
    """Channel-summed pointwise loss plus the same on forward spatial differences."""
    channels = truth.shape[1]
    total = ag.pointwise_loss(pred, truth, kind, delta) * channels
    for axis in (2, 3, 4):
        gt = ag.spatial_diff(ag.Tensor(truth), axis).data
        # each axis contributes a third so a channel's gradient term is one mean
        term = ag.pointwise_loss(ag.spatial_diff(pred, axis), gt, kind, delta)
        total = total + term * (channels / 3.0)
    return total


def loss_total(batch, model: SurrogateModel, delta=1.0, kind="huber", parts=False, frame_ids=None):
    """Prediction loss plus autoencoder loss for a batch of windows.

    ``batch``: array (B, n + 1, C, D, H, W); the first n frames form the input
    window and the last one is the prediction target. ``frame_ids`` (B, n + 1)
    marks frames shared between overlapping windows so each distinct frame is
    encoded and reconstructed once.
    """
    batch = np.asarray(batch)
    cfg = model.config
    if batch.ndim != 6 or batch.shape[1] != cfg.window + 1 or batch.shape[2] != cfg.in_channels:
        raise ShapeError(f"loss_total: expected (B, {cfg.window + 1}, {cfg.in_channels}, D, H, W), got {batch.shape}")
    batch = batch.astype(model.dtype, copy=False)
    b, t = batch.shape[:2]
    if frame_ids is None:
        frame_ids = np.arange(b * t).reshape(b, t)
    frame_ids = np.asarray(frame_ids)
    if frame_ids.shape != (b, t):
        raise ShapeError(f"frame_ids must have shape {(b, t)}")
    uniq, first, inverse = np.unique(frame_ids.ravel(), return_index=True, return_inverse=True)
    frames = batch.reshape(b * t, *batch.shape[2:])[first]
    lat = encode(frames, model)
    recon = decode(lat, model)
    l_ae = _field_loss(frames, recon, delta, kind)
    inverse = inverse.reshape(b, t)
    window = [lat[inverse[:, k]] for k in range(cfg.window)]
    pred = decode(predict_next(window, model), model)
    l_pre = _field_loss(batch[:, -1], pred, delta, kind)
    total = ag.add(l_pre, l_ae)
    if parts:
        return total, float(l_pre.data), float(l_ae.data)
    return total


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-3
    max_iterations: int = 1000
    window: int = 4
    huber_delta: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "huber"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_every: int = 50
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.loss not in ("huber", "mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale settings: batch 8, lr 1e-4, 100000 iterations, window 4."""
        base = dict(batch_size=8, learning_rate=1e-4, max_iterations=100_000, window=4)
        base.update(overrides)
        return cls(**base)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainConfig keys: {sorted(extra)}")
        return cls(**d)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def make_windows(sequences, window):
    """All (sequence, start) pairs with window + 1 consecutive frames."""
    out = []
    for si, seq in enumerate(sequences):
        for start in range(len(seq) - window):
            out.append((si, start))
    return out


@dataclass
class TrainResult:
    model: SurrogateModel
    losses: list
    iterations: int

    def write_curve(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, f"{v:.9g}"])


def train(sequences, config: TrainConfig, model: SurrogateModel | None = None, callback=None) -> TrainResult:
    """Fit the model on normalized frame sequences, each shaped (T, C, D, H, W).

    ``callback(it, loss, model)`` runs after every update; a truthy return stops training.
    """
    sequences = [np.asarray(s, dtype=np.float32) for s in sequences]
    windows = make_windows(sequences, config.window)
    if not windows:
        raise ValueError(f"dataset has no sequence with at least {config.window + 1} frames")
    if model is None:
        mcfg = ModelConfig(window=config.window, **config.model)
        model = SurrogateModel(mcfg, seed=config.seed)
    if model.config.window != config.window:
        raise ShapeError("model window differs from training window")
    offsets = np.concatenate([[0], np.cumsum([len(q) for q in sequences])])
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    losses = []
    last_good = model.state()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    last_ckpt = None
    for it in range(config.max_iterations):
        if len(windows) <= config.batch_size:
            pick = np.arange(len(windows))
        else:
            pick = np.sort(rng.choice(len(windows), size=config.batch_size, replace=False))
        batch = np.stack([sequences[windows[k][0]][windows[k][1]: windows[k][1] + config.window + 1]
                          for k in pick])
        ids = np.array([[offsets[windows[k][0]] + windows[k][1] + j for j in range(config.window + 1)]
                        for k in pick])
        model.zero_grad()
        loss = loss_total(batch, model, config.huber_delta, config.loss, frame_ids=ids)
        value = float(loss.data)
        if not np.isfinite(value):
            model.load_state(last_good)
            raise NonFiniteLossError(it, model, last_ckpt)
        loss.backward()
        if not all(np.all(np.isfinite(p.grad)) for p in model.parameters() if p.grad is not None):
            model.load_state(last_good)
            raise NonFiniteLossError(it, model, last_ckpt)
        last_good = model.state()
        opt.step()
        losses.append(value)
        if config.log_every and it % config.log_every == 0:
            log.info("iter %d loss %.6g", it, value)
        stop = callback is not None and callback(it, value, model)
        if ckpt_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            last_ckpt = ckpt_dir / f"model_{it + 1:07d}.mpmw"
            save_model(model, last_ckpt)
        if stop:
            break
    return TrainResult(model, losses, len(losses))


# ---------------------------------------------------------------- checkpoints

def save_model(model: SurrogateModel, path):
    """Write "MPMW" | u32 version | u32 manifest length | JSON manifest | f32 blobs."""
    blobs, entries, offset = [], [], 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    cfg = asdict(model.config)
    manifest = json.dumps({"config": cfg, "params": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_model(path) -> SurrogateModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[12: 12 + mlen])
    cfg = manifest["config"]
    for k in ("enc_channels", "enc_strides", "dec_channels"):
        cfg[k] = tuple(cfg[k])
    model = SurrogateModel(ModelConfig(**cfg))
    base = 12 + mlen
    state = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"]))
        state[e["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=base + e["offset"]).reshape(e["shape"])
    if set(state) != set(model.params):
        raise ValueError(f"{path}: parameter set does not match the model layout")
    model.load_state(state)
    return model
