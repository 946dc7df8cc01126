"""Spectrogram encoder: conv stack -> bidirectional GRU -> FC1 (PReLU) -> FC2.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take
the same dict with values wrapped as :class:`~emocenter.autodiff.Tensor` so the
pass can be recorded on a tape.

GRU step (gates stacked as ``[reset, update, candidate]`` in ``wx`` and ``b``)::

    r = sigmoid(x W_r + h U_r + b_r)
    u = sigmoid(x W_u + h U_u + b_u)
    n = tanh(x W_n + (r * h) U_n + b_n)
    h' = u * h + (1 - u) * n

Padded time steps hold the hidden state, so the forward direction ends on the
last valid step and the backward direction starts from zeros at it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EncoderError(ValueError):
    pass


class ReceptiveFieldError(EncoderError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pool: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        if self.pool is not None:
            object.__setattr__(self, "pool", _pair(self.pool))
        if self.channels < 1 or min(self.kernel) < 1 or min(self.stride) < 1:
            raise EncoderError(f"invalid conv layer {self}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


DEFAULT_CONV_STACK = (
    ConvLayer(16, (7, 7), (2, 2)),
    ConvLayer(32, (3, 3), (1, 1), pool=(2, 2)),
    ConvLayer(32, (3, 3), (1, 1), pool=(2, 2)),
)


@dataclass(frozen=True)
class EncoderConfig:
    n_bins: int = 128
    conv_stack: tuple[ConvLayer, ...] = DEFAULT_CONV_STACK
    rnn_width: int = 128
    feature_dim: int = 64
    n_classes: int = 4

    def __post_init__(self):
        stack = tuple(c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.conv_stack)
        object.__setattr__(self, "conv_stack", stack)
        if not stack:
            raise EncoderError("conv stack must be nonempty")
        first = stack[0].kernel
        for layer in stack[1:]:
            if layer.kernel[0] > first[0] or layer.kernel[1] > first[1]:
                raise EncoderError("first conv kernel must be at least as large as later ones")
        if self.feature_dim < 1 or self.n_classes < 2 or self.rnn_width < 1:
            raise EncoderError("need feature_dim >= 1, n_classes >= 2, rnn_width >= 1")
        if self.freq_out() < 1:
            raise ReceptiveFieldError(f"{self.n_bins} frequency bins too few for the conv stack")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_stack"] = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in layer.items()}
            for layer in d["conv_stack"]
        ]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        d["conv_stack"] = tuple(ConvLayer(**layer) for layer in d.get("conv_stack", ()))
        return cls(**d)

    def time_out(self, lengths):
        """Valid sequence length after the conv stack, per utterance."""
        return _out_lengths(np.asarray(lengths), self.conv_stack, axis=0)

    def freq_out(self) -> int:
        return int(_out_lengths(np.asarray([self.n_bins]), self.conv_stack, axis=1)[0])

    @property
    def rnn_input_dim(self) -> int:
        return self.freq_out() * self.conv_stack[-1].channels


def desk_config(n_bins: int = 128, n_classes: int = 4) -> EncoderConfig:
    """Narrow variant of the default stack for single-CPU experiments."""
    stack = (
        ConvLayer(8, (7, 7), (2, 2)),
        ConvLayer(8, (3, 3), (1, 1), pool=(2, 2)),
        ConvLayer(8, (3, 3), (1, 1), pool=(2, 2)),
    )
    return EncoderConfig(n_bins=n_bins, conv_stack=stack, rnn_width=32, feature_dim=64, n_classes=n_classes)


def _out_lengths(lengths: np.ndarray, stack, axis: int) -> np.ndarray:
    out = lengths.astype(np.int64)
    for layer in stack:
        k, s = layer.kernel[axis], layer.stride[axis]
        out = np.where(out >= k, (out - k) // s + 1, 0)
        if layer.pool is not None:
            out = out // layer.pool[axis]
    return out


def simulate_shapes(cfg: EncoderConfig, batch: int, n_frames: int) -> list[tuple[int, ...]]:
    """Layer-by-layer activation shapes, stepping one output index at a time."""
    shapes = [(batch, n_frames, cfg.n_bins, 1)]
    h, w = n_frames, cfg.n_bins
    for layer in cfg.conv_stack:
        kh, kw = layer.kernel
        sh, sw = layer.stride
        h = len(range(0, h - kh + 1, sh))
        w = len(range(0, w - kw + 1, sw))
        shapes.append((batch, h, w, layer.channels))
        if layer.pool is not None:
            h = len(range(0, h - layer.pool[0] + 1, layer.pool[0]))
            w = len(range(0, w - layer.pool[1] + 1, layer.pool[1]))
            shapes.append((batch, h, w, layer.channels))
    shapes.append((batch, h, w * cfg.conv_stack[-1].channels))
    shapes.append((batch, 2 * cfg.rnn_width))
    shapes.append((batch, cfg.feature_dim))
    shapes.append((batch, cfg.n_classes))
    return shapes


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for i, layer in enumerate(cfg.conv_stack):
        shapes[f"conv{i}.w"] = (layer.channels, cin, *layer.kernel)
        shapes[f"conv{i}.b"] = (layer.channels,)
        shapes[f"conv{i}.slope"] = ()
        cin = layer.channels
    h = cfg.rnn_width
    for d in ("gru_fwd", "gru_bwd"):
        shapes[f"{d}.wx"] = (cfg.rnn_input_dim, 3 * h)
        shapes[f"{d}.u_ru"] = (h, 2 * h)
        shapes[f"{d}.u_n"] = (h, h)
        shapes[f"{d}.b"] = (3 * h,)
    shapes["fc1.w"] = (2 * h, cfg.feature_dim)
    shapes["fc1.b"] = (cfg.feature_dim,)
    shapes["fc1.slope"] = ()
    shapes["fc2.w"] = (cfg.feature_dim, cfg.n_classes)
    shapes["fc2.b"] = (cfg.n_classes,)
    return shapes


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv"):
        return int(np.prod(shape[1:]))
    return shape[0]


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-uniform weights (variance 2 / fan_in), zero biases, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "b":
            params[name] = np.zeros(shape)
        elif kind == "slope":
            params[name] = np.full(shape, 0.25)
        else:
            limit = np.sqrt(6.0 / fan_in(name, shape))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def check_params(params: Mapping[str, np.ndarray], cfg: EncoderConfig) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise EncoderError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for k, s in expected.items():
        if np.shape(params[k]) != s:
            raise EncoderError(f"{k}: expected shape {s}, got {np.shape(params[k])}")


def pad_batch(specs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad (L_T, L_F) arrays to a common length; returns (B, T, F) and lengths."""
    if not specs:
        raise EncoderError("empty batch")
    lengths = np.array([s.shape[0] for s in specs])
    n_bins = {s.shape[1] for s in specs}
    if len(n_bins) != 1:
        raise EncoderError(f"mixed frequency sizes in batch: {sorted(n_bins)}")
    out = np.zeros((len(specs), lengths.max(), n_bins.pop()))
    for i, s in enumerate(specs):
        out[i, : s.shape[0]] = s
    return out, lengths


def mask_from_lengths(lengths, n_steps: int) -> np.ndarray:
    return (np.arange(n_steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def cnn_encode(x, lengths, params: Mapping[str, Tensor], cfg: EncoderConfig):
    """(B, T, F) padded spectrograms -> (B, T', F' * C) sequence and valid lengths T'."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != cfg.n_bins:
        raise EncoderError(f"expected (B, T, {cfg.n_bins}) input, got {x.shape}")
    lengths = np.asarray(lengths)
    out_lengths = cfg.time_out(lengths)
    if np.any(out_lengths < 1):
        short = int(lengths[out_lengths < 1].min())
        raise ReceptiveFieldError(f"utterance of {short} frames is shorter than the conv stack's receptive field")
    h = ad.reshape(x, (*x.shape, 1))
    for i, layer in enumerate(cfg.conv_stack):
        h = ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], layer.stride)
        h = ad.prelu(h, params[f"conv{i}.slope"])
        if layer.pool is not None:
            h = ad.maxpool2d(h, layer.pool)
    b, t, f, c = h.shape
    return ad.reshape(h, (b, t, f * c)), out_lengths


def _gru_direction(xproj: Tensor, mask: np.ndarray, u_ru: Tensor, u_n: Tensor, steps) -> Tensor:
    bsz, _, three_h = xproj.shape
    hid = three_h // 3
    h = Tensor(np.zeros((bsz, hid)))
    for t in steps:
        m = mask[:, t : t + 1]
        if not m.any():
            continue
        xt = xproj[:, t]
        hu = h @ u_ru
        r = ad.sigmoid(xt[:, :hid] + hu[:, :hid])
        u = ad.sigmoid(xt[:, hid : 2 * hid] + hu[:, hid:])
        n = ad.tanh(xt[:, 2 * hid :] + (r * h) @ u_n)
        h_new = n + u * (h - n)
        h = h_new if m.all() else h + m * (h_new - h)
    return h


def bi_rnn_compress(seq, lengths, params: Mapping[str, Tensor]) -> Tensor:
    """Concatenate the forward GRU's last valid output and the backward GRU's output at step 1."""
    seq = ad.as_tensor(seq)
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise EncoderError(f"expected nonempty (B, T, D) sequence, got {seq.shape}")
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise EncoderError("empty sequence in batch")
    mask = mask_from_lengths(lengths, seq.shape[1])
    outs = []
    for d, steps in (("gru_fwd", range(seq.shape[1])), ("gru_bwd", range(seq.shape[1] - 1, -1, -1))):
        xproj = ad.add_bias(seq @ params[f"{d}.wx"], params[f"{d}.b"])
        outs.append(_gru_direction(xproj, mask, params[f"{d}.u_ru"], params[f"{d}.u_n"], steps))
    return ad.concat(outs, axis=1)


def project(h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return ad.prelu(ad.add_bias(h @ params["fc1.w"], params["fc1.b"]), params["fc1.slope"])


def encode(x, lengths, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Deep features z, shape (B, feature_dim)."""
    seq, seq_len = cnn_encode(x, lengths, params, cfg)
    return project(bi_rnn_compress(seq, seq_len, params), params)


def classify(z, params: Mapping[str, Tensor]) -> Tensor:
    """Logits z W + b from the FC2 layer."""
    z = ad.as_tensor(z)
    w = params["fc2.w"]
    if z.ndim != 2 or z.shape[1] != w.shape[0]:
        raise EncoderError(f"feature dim {z.shape} does not match FC2 weight {w.shape}")
    return ad.add_bias(z @ w, params["fc2.b"])


def forward(x, lengths, params: Mapping[str, Tensor], cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    z = encode(x, lengths, params, cfg)
    return z, classify(z, params)


@dataclass
class Standardizer:
    """Per-frequency-bin input standardization fitted on training frames."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, specs: Sequence[np.ndarray], min_std: float = 1e-6) -> "Standardizer":
        frames = np.concatenate(list(specs), axis=0)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), min_std))

    def __call__(self, spec: np.ndarray) -> np.ndarray:
        if self.mean.size == 0:
            return spec
        return (spec - self.mean) / self.std


def features(specs: Sequence[np.ndarray], params: Mapping[str, np.ndarray], cfg: EncoderConfig,
             batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Inference over a list of (already standardized) spectrograms -> (z, logits)."""
    tensors = as_tensors(params)
    zs, logits = [], []
    for start in range(0, len(specs), batch_size):
        x, lengths = pad_batch(specs[start:start + batch_size])
        z, lg = forward(x, lengths, tensors, cfg)
        zs.append(z.value)
        logits.append(lg.value)
    if not zs:
        return np.zeros((0, cfg.feature_dim)), np.zeros((0, cfg.n_classes))
    return np.concatenate(zs), np.concatenate(logits)
