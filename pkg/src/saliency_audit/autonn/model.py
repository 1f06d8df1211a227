"""Small convolutional classifier over spectrogram-shaped inputs.

Layout of a forward pass::

    [waveform] -> |STFT|^2 -> feature (log-mel or magnitude) -> standardise
      -> (conv -> relu -> maxpool) * n -> global mean -> dense -> relu -> dense

The STFT stage is present only when ``ModelConfig.waveform_input`` is set; it
is written with autodiff ops so input gradients reach the waveform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import dsp
from ..io import canonical_json, decode_tensor, encode_tensor, FormatError
from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SAMC"
RELU_MODES = ("standard", "guided")


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ModelConfig:
    input_kind: str = "magnitude"
    waveform_input: bool = True
    conv: tuple = (ConvSpec(16, stride=2), ConvSpec(32))
    pool: int = 2
    hidden: int = 64
    n_classes: int = 2
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    mel: dsp.MelConfig = field(default_factory=dsp.MelConfig)

    def __post_init__(self):
        conv = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv)
        object.__setattr__(self, "conv", conv)
        if self.input_kind not in ("log_mel", "magnitude"):
            raise ValueError(f"unknown input_kind {self.input_kind!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not conv:
            raise ValueError("at least one conv layer is required")
        if self.input_kind == "log_mel":
            self.mel.validate(self.stft.sample_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [asdict(c) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "stft" in d:
            d["stft"] = dsp.StftConfig(**d["stft"])
        if "mel" in d:
            d["mel"] = dsp.MelConfig(**d["mel"])
        if "conv" in d:
            d["conv"] = tuple(ConvSpec(**c) for c in d["conv"])
        return cls(**d)


class Classifier:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        in_ch = 1
        for i, spec in enumerate(self.cfg.conv):
            fan_in = in_ch * spec.kernel * spec.kernel
            self._init(f"conv{i}.w", (spec.channels, in_ch, spec.kernel, spec.kernel), fan_in, rng)
            self._init(f"conv{i}.b", (spec.channels,), fan_in, rng)
            in_ch = spec.channels
        self._init("fc1.w", (in_ch, self.cfg.hidden), in_ch, rng)
        self._init("fc1.b", (self.cfg.hidden,), in_ch, rng)
        self._init("fc2.w", (self.cfg.hidden, self.cfg.n_classes), self.cfg.hidden, rng)
        self._init("fc2.b", (self.cfg.n_classes,), self.cfg.hidden, rng)
        # feature standardisation (mean, std); not trained
        self.norm = np.array([0.0, 1.0])

    def _init(self, name, shape, fan_in, rng):
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True)

    def astype(self, dtype) -> Classifier:
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def conv_layers(self) -> list[int]:
        return list(range(len(self.cfg.conv)))

    @property
    def sample_ndim(self) -> int:
        return 1 if self.cfg.waveform_input else 2

    # front end

    def _dft_basis(self):
        cfg = self.cfg.stft
        key = (self.dtype.str, cfg)
        cache = getattr(self, "_basis_cache", None)
        if cache is None or cache[0] != key:
            n = np.arange(cfg.win_length)[:, None]
            k = np.arange(cfg.n_bins)[None, :]
            ang = 2.0 * np.pi * n * k / cfg.n_fft
            w = cfg.window_array()[:, None]
            basis = ((w * np.cos(ang)).astype(self.dtype), (-w * np.sin(ang)).astype(self.dtype))
            self._basis_cache = (key, basis)
        return self._basis_cache[1]

    def _power_from_waveform(self, x: Tensor) -> Tensor:
        cfg = self.cfg.stft
        xp = T.pad(x, [(0, 0), (cfg.pad, cfg.pad)])
        fr = T.frames(xp, cfg.win_length, cfg.hop_length)
        cos_b, sin_b = self._dft_basis()
        re = fr @ cos_b
        im = fr @ sin_b
        return re * re + im * im

    def features(self, x) -> Tensor:
        """Standardised feature map ``[B, 1, frames, width]`` for a batch of inputs."""
        x = T.as_tensor(x)
        if self.cfg.input_kind == "log_mel":
            power = self._power_from_waveform(x) if self.cfg.waveform_input else x * x
            fb = dsp.mel_filterbank(self.cfg.stft, self.cfg.mel).T.astype(self.dtype)
            feat = T.log(power @ fb + self.dtype.type(self.cfg.mel.log_floor))
        elif self.cfg.waveform_input:
            feat = T.sqrt(self._power_from_waveform(x) + self.dtype.type(1e-20))
        else:
            feat = x
        mu, sd = self.norm
        feat = (feat - self.dtype.type(mu)) * self.dtype.type(1.0 / sd)
        return T.reshape(feat, (feat.shape[0], 1) + feat.shape[1:])

    def calibrate(self, inputs, batch: int = 64) -> Classifier:
        """Fit the scalar feature standardisation on ``inputs``."""
        self.norm = np.array([0.0, 1.0])
        total = total_sq = 0.0
        count = 0
        for i in range(0, len(inputs), batch):
            f = self.features(self._cast(inputs[i : i + batch])).data.astype(np.float64)
            total += f.sum()
            total_sq += (f**2).sum()
            count += f.size
        mu = total / count
        sd = np.sqrt(max(total_sq / count - mu**2, 1e-12))
        self.norm = np.array([mu, sd])
        return self

    # network body

    def body(self, feats, relu_mode: str = "standard", capture: dict | None = None,
             replace: dict | None = None) -> Tensor:
        if relu_mode not in RELU_MODES:
            raise ValueError(f"unknown relu mode {relu_mode!r}")
        guided = relu_mode == "guided"
        h = T.as_tensor(feats)
        for i, spec in enumerate(self.cfg.conv):
            pad = spec.kernel // 2
            h = T.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"],
                         stride=(spec.stride, spec.stride), padding=(pad, pad))
            if replace and i in replace:
                h = Tensor(np.asarray(replace[i], dtype=self.dtype), requires_grad=True)
            if capture is not None:
                capture[i] = h
            h = T.relu(h, guided)
            if self.cfg.pool > 1 and min(h.shape[2:]) >= self.cfg.pool:
                h = T.maxpool2d(h, self.cfg.pool)
        h = T.global_mean_pool(h)
        h = T.relu(h @ self.params["fc1.w"] + self.params["fc1.b"], guided)
        return h @ self.params["fc2.w"] + self.params["fc2.b"]

    def _cast(self, x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def forward(self, x, relu_mode: str = "standard", capture=None, replace=None) -> Tensor:
        """Logits ``[B, n_classes]`` for a batch (or a single sample, given without batch axis)."""
        x = self._cast(x)
        if x.ndim == self.sample_ndim:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != self.sample_ndim + 1:
            raise ValueError(f"expected input of rank {self.sample_ndim} (+batch), got {x.shape}")
        if (not self.cfg.waveform_input and self.cfg.input_kind == "log_mel"
                and x.shape[-1] != self.cfg.stft.n_bins):
            raise ValueError(f"expected {self.cfg.stft.n_bins} frequency bins, got {x.shape[-1]}")
        return self.body(self.features(x), relu_mode, capture, replace)

    __call__ = forward

    def logits(self, x, batch: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == self.sample_ndim
        if single:
            x = x[None]
        out = np.concatenate([self.forward(x[i : i + batch]).data for i in range(0, len(x), batch)])
        return out[0] if single else out

    def predict_proba(self, x, batch: int = 64) -> np.ndarray:
        return T.softmax(self.logits(x, batch).astype(np.float64))

    def predict(self, x, batch: int = 64) -> np.ndarray:
        return self.logits(x, batch).argmax(axis=-1)

    # checkpoints

    def to_bytes(self) -> bytes:
        header = canonical_json({"model": self.cfg.to_dict(), "params": list(self.params)}).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
        parts += [encode_tensor(p.data) for p in self.params.values()]
        parts.append(encode_tensor(self.norm))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Classifier:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (n,) = struct.unpack_from("<I", buf, 4)
        meta = json.loads(buf[8 : 8 + n].decode())
        model = cls(ModelConfig.from_dict(meta["model"]))
        if list(model.params) != meta["params"]:
            raise FormatError("checkpoint parameter list does not match the config")
        pos = 8 + n
        for name in meta["params"]:
            arr, pos = decode_tensor(buf, pos)
            if arr.shape != model.params[name].shape:
                raise FormatError(f"shape mismatch for {name}")
            model.params[name].data = arr.astype(model.dtype)
        norm, pos = decode_tensor(buf, pos)
        model.norm = norm.astype(np.float64)
        return model

    def save(self, path) -> None:
        from ..io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> Classifier:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _select(logits: Tensor, class_index) -> Tensor:
    n, k = logits.shape
    idx = np.broadcast_to(np.asarray(class_index), (n,))
    if np.any(idx < 0) or np.any(idx >= k):
        raise ValueError(f"class index {class_index} out of range for {k} classes")
    return T.getitem(logits, (np.arange(n), idx)).sum()


def grad_input(model: Classifier, x, class_index, mode: str = "standard") -> np.ndarray:
    """Gradient of the class logit w.r.t. the model input, per sample."""
    x = np.asarray(x, dtype=model.dtype)
    single = x.ndim == model.sample_ndim
    xt = Tensor(x[None] if single else x, requires_grad=True)
    out = _select(model.forward(xt, relu_mode=mode), class_index)
    out.backward()
    for p in model.params.values():
        p.grad = None
    g = xt.grad
    return g[0] if single else g


def layer_capture(model: Classifier, x, layer_id: int, class_index, mode: str = "standard"):
    """Conv-layer output activations and the class-logit gradient w.r.t. them."""
    if layer_id not in model.conv_layers():
        raise ValueError(f"invalid conv layer id {layer_id}")
    x = np.asarray(x, dtype=model.dtype)
    single = x.ndim == model.sample_ndim
    xt = Tensor(x[None] if single else x, requires_grad=True)
    captured: dict = {}
    out = _select(model.forward(xt, relu_mode=mode, capture=captured), class_index)
    act = captured[layer_id]
    out.backward()
    for p in model.params.values():
        p.grad = None
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    if single:
        return act.data[0], grad[0]
    return act.data, grad
