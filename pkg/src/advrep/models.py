"""Convolutional auto-encoder and the auxiliary classifier heads."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ops
from .numerics.optim import ParamSet
from .numerics.tensor import ShapeError, Tensor

INPUT_SHAPE = (126, 125)


@dataclass(frozen=True)
class EncoderSpec:
    maps: tuple[int, ...] = (16, 32, 64, 128)
    fc_hidden: int = 256
    bottleneck: int = 128
    input_shape: tuple[int, int] = INPUT_SHAPE

    def ladder(self) -> list[tuple[int, int]]:
        """Spatial size entering each conv stage, followed by the final pooled size."""
        sizes = [tuple(self.input_shape)]
        for _ in self.maps:
            h, w = sizes[-1]
            sizes.append((h // 2, w // 2))
        return sizes

    @property
    def flat_dim(self) -> int:
        h, w = self.ladder()[-1]
        return self.maps[-1] * h * w


@dataclass(frozen=True)
class HeadSpec:
    outputs: int
    hidden: int = 64
    inputs: int = 128
    dropout: float = 0.2


def param_count(spec) -> dict[str, int]:
    """Trainable-parameter count per group, derived from the spec alone."""
    if spec is None:
        return {}
    if isinstance(spec, HeadSpec):
        return {"head": (spec.inputs * spec.hidden + spec.hidden) + (spec.hidden * spec.outputs + spec.outputs)}
    if isinstance(spec, EncoderSpec):
        conv = 0
        bn = 0
        c_in = 1
        for m in spec.maps:
            conv += m * c_in * 9 + m
            bn += 2 * m
            c_in = m
        fc = spec.flat_dim * spec.fc_hidden + spec.fc_hidden + spec.fc_hidden * spec.bottleneck + spec.bottleneck
        enc = conv + bn + fc
        # decoder: mirrored FC pair, transposed convs, batch-norm on all but the last stage
        dfc = spec.bottleneck * spec.fc_hidden + spec.fc_hidden + spec.fc_hidden * spec.flat_dim + spec.flat_dim
        dconv = 0
        dbn = 0
        outs = (1,) + tuple(spec.maps[:-1])
        for m_in, m_out in zip(spec.maps, outs):
            dconv += m_in * m_out * 9 + m_out
            if m_out != 1:
                dbn += 2 * m_out
        return {"theta_e": enc, "theta_d": dfc + dconv + dbn}
    raise TypeError(f"no parameter count for {type(spec).__name__}")


def _kaiming_uniform(rng, shape, fan_in, slope, dtype):
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype))


class Encoder:
    """Four conv stages (conv -> max-pool -> batch-norm -> leaky ReLU), then FC 256 -> FC 128."""

    def __init__(self, rng: np.random.Generator, spec: EncoderSpec = EncoderSpec(),
                 slope: float = ops.DEFAULT_SLOPE, dtype=np.float32):
        self.spec = spec
        self.slope = slope
        self.params = ParamSet("theta_e")
        p = self.params
        c_in = 1
        for i, m in enumerate(spec.maps):
            p.add(f"conv{i}.weight", _kaiming_uniform(rng, (m, c_in, 3, 3), c_in * 9, slope, dtype))
            p.add(f"conv{i}.bias", _zeros(m, dtype))
            p.add(f"bn{i}.gamma", Tensor(np.ones(m, dtype=dtype)))
            p.add(f"bn{i}.beta", _zeros(m, dtype))
            p.add_buffer(f"bn{i}.running_mean", np.zeros(m, dtype=dtype))
            p.add_buffer(f"bn{i}.running_var", np.ones(m, dtype=dtype))
            c_in = m
        p.add("fc0.weight", _kaiming_uniform(rng, (spec.fc_hidden, spec.flat_dim), spec.flat_dim, slope, dtype))
        p.add("fc0.bias", _zeros(spec.fc_hidden, dtype))
        p.add("fc1.weight", _kaiming_uniform(rng, (spec.bottleneck, spec.fc_hidden), spec.fc_hidden, slope, dtype))
        p.add("fc1.bias", _zeros(spec.bottleneck, dtype))

    def __call__(self, x: Tensor, training: bool, track_stats: bool = True) -> Tensor:
        """Bottleneck codes (N, 128).

        With ``track_stats=False`` training-mode batch-norm still uses batch
        statistics but leaves the running buffers untouched.
        """
        if x.data.ndim == 3:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.data.ndim != 4 or x.shape[1:] != (1,) + tuple(self.spec.input_shape):
            raise ShapeError(f"encoder expects (N, 1, {self.spec.input_shape}), got {x.shape}")
        p, b = self.params.params, self.params.buffers
        momentum = ops.BN_MOMENTUM if track_stats else 0.0
        h = x
        for i in range(len(self.spec.maps)):
            h = ops.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            h, _ = ops.maxpool2d(h)
            h = ops.batchnorm2d(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                b[f"bn{i}.running_mean"], b[f"bn{i}.running_var"], training,
                                momentum=momentum)
            h = ops.leaky_relu(h, self.slope)
        h = ops.flatten(h)
        h = ops.leaky_relu(ops.linear(h, p["fc0.weight"], p["fc0.bias"]), self.slope)
        return ops.linear(h, p["fc1.weight"], p["fc1.bias"])


class Decoder:
    """Mirror of :class:`Encoder`: FC pair, then interpolate -> transposed conv stages."""

    def __init__(self, rng: np.random.Generator, spec: EncoderSpec = EncoderSpec(),
                 slope: float = ops.DEFAULT_SLOPE, dtype=np.float32):
        self.spec = spec
        self.slope = slope
        self.params = ParamSet("theta_d")
        p = self.params
        p.add("fc0.weight", _kaiming_uniform(rng, (spec.fc_hidden, spec.bottleneck), spec.bottleneck, slope, dtype))
        p.add("fc0.bias", _zeros(spec.fc_hidden, dtype))
        p.add("fc1.weight", _kaiming_uniform(rng, (spec.flat_dim, spec.fc_hidden), spec.fc_hidden, slope, dtype))
        p.add("fc1.bias", _zeros(spec.flat_dim, dtype))
        outs = (1,) + tuple(spec.maps[:-1])
        # stage k undoes encoder stage k; run from the deepest stage outwards
        for k in reversed(range(len(spec.maps))):
            c_in, c_out = spec.maps[k], outs[k]
            p.add(f"deconv{k}.weight", _kaiming_uniform(rng, (c_in, c_out, 3, 3), c_in * 9, slope, dtype))
            p.add(f"deconv{k}.bias", _zeros(c_out, dtype))
            if k > 0:
                p.add(f"bn{k}.gamma", Tensor(np.ones(c_out, dtype=dtype)))
                p.add(f"bn{k}.beta", _zeros(c_out, dtype))
                p.add_buffer(f"bn{k}.running_mean", np.zeros(c_out, dtype=dtype))
                p.add_buffer(f"bn{k}.running_var", np.ones(c_out, dtype=dtype))
        ladder = spec.ladder()
        self.targets = [ladder[k] for k in reversed(range(len(spec.maps)))]
        if self.targets[-1] != tuple(spec.input_shape):
            raise ShapeError("decoder output would not match the encoder input shape")

    def __call__(self, z: Tensor, training: bool) -> Tensor:
        p, b = self.params.params, self.params.buffers
        h = ops.leaky_relu(ops.linear(z, p["fc0.weight"], p["fc0.bias"]), self.slope)
        h = ops.linear(h, p["fc1.weight"], p["fc1.bias"])
        hh, ww = self.spec.ladder()[-1]
        h = ops.reshape(h, (z.shape[0], self.spec.maps[-1], hh, ww))
        for k, target in zip(reversed(range(len(self.spec.maps))), self.targets):
            h = ops.interpolate_nearest(h, target)
            h = ops.conv_transpose2d(h, p[f"deconv{k}.weight"], p[f"deconv{k}.bias"])
            if k > 0:
                h = ops.batchnorm2d(h, p[f"bn{k}.gamma"], p[f"bn{k}.beta"],
                                    b[f"bn{k}.running_mean"], b[f"bn{k}.running_var"], training)
                h = ops.leaky_relu(h, self.slope)
        return h


class Head:
    """dropout -> FC hidden -> leaky ReLU -> FC outputs (logits)."""

    def __init__(self, rng: np.random.Generator, spec: HeadSpec, group: str,
                 slope: float = ops.DEFAULT_SLOPE, dtype=np.float32):
        self.spec = spec
        self.slope = slope
        self.params = ParamSet(group)
        p = self.params
        p.add("fc0.weight", _kaiming_uniform(rng, (spec.hidden, spec.inputs), spec.inputs, slope, dtype))
        p.add("fc0.bias", _zeros(spec.hidden, dtype))
        p.add("fc1.weight", _kaiming_uniform(rng, (spec.outputs, spec.hidden), spec.hidden, slope, dtype))
        p.add("fc1.bias", _zeros(spec.outputs, dtype))

    def __call__(self, z: Tensor, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        p = self.params.params
        h = ops.dropout(z, self.spec.dropout, training, rng)
        h = ops.leaky_relu(ops.linear(h, p["fc0.weight"], p["fc0.bias"]), self.slope)
        return ops.linear(h, p["fc1.weight"], p["fc1.bias"])

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        from .numerics.tensor import no_grad

        with no_grad():
            logits = self(Tensor(z), training=False)
        return ops.softmax(logits.data.astype(np.float64))


@dataclass
class AutoEncoder:
    """Encoder/decoder pair plus whichever auxiliary heads a regime needs."""

    encoder: Encoder
    decoder: Decoder
    id_head: Head | None = None
    pc_head: Head | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, rng: np.random.Generator, n_speakers: int = 0, with_pc: bool = False,
              spec: EncoderSpec = EncoderSpec(), slope: float = ops.DEFAULT_SLOPE, dtype=np.float32):
        enc = Encoder(rng, spec, slope, dtype)
        dec = Decoder(rng, spec, slope, dtype)
        id_head = Head(rng, HeadSpec(n_speakers, inputs=spec.bottleneck), "theta_id", slope, dtype) if n_speakers else None
        pc_head = Head(rng, HeadSpec(2, inputs=spec.bottleneck), "theta_pc", slope, dtype) if with_pc else None
        return cls(enc, dec, id_head, pc_head)

    def paramsets(self) -> list[ParamSet]:
        out = [self.encoder.params, self.decoder.params]
        if self.id_head is not None:
            out.append(self.id_head.params)
        if self.pc_head is not None:
            out.append(self.pc_head.params)
        return out

    def encode(self, x, training: bool = False, track_stats: bool = True) -> Tensor:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(x), training, track_stats)

    def decode(self, z: Tensor, training: bool = False) -> Tensor:
        return self.decoder(z, training)


def architecture_summary(spec: EncoderSpec = EncoderSpec(), heads: tuple[HeadSpec, ...] = ()) -> list[dict]:
    """Layer table (name, input shape, output shape, parameter count)."""
    rows = []
    ladder = spec.ladder()
    c_in = 1
    for i, m in enumerate(spec.maps):
        h, w = ladder[i]
        h2, w2 = ladder[i + 1]
        rows.append({"layer": f"enc.conv{i}", "in": [c_in, h, w], "out": [m, h, w], "params": m * c_in * 9 + m})
        rows.append({"layer": f"enc.pool{i}", "in": [m, h, w], "out": [m, h2, w2], "params": 0})
        rows.append({"layer": f"enc.bn{i}", "in": [m, h2, w2], "out": [m, h2, w2], "params": 2 * m})
        c_in = m
    rows.append({"layer": "enc.fc0", "in": [spec.flat_dim], "out": [spec.fc_hidden],
                 "params": spec.flat_dim * spec.fc_hidden + spec.fc_hidden})
    rows.append({"layer": "enc.fc1", "in": [spec.fc_hidden], "out": [spec.bottleneck],
                 "params": spec.fc_hidden * spec.bottleneck + spec.bottleneck})
    rows.append({"layer": "dec.fc0", "in": [spec.bottleneck], "out": [spec.fc_hidden],
                 "params": spec.bottleneck * spec.fc_hidden + spec.fc_hidden})
    rows.append({"layer": "dec.fc1", "in": [spec.fc_hidden], "out": [spec.flat_dim],
                 "params": spec.fc_hidden * spec.flat_dim + spec.flat_dim})
    outs = (1,) + tuple(spec.maps[:-1])
    for k in reversed(range(len(spec.maps))):
        h, w = ladder[k + 1]
        H, W = ladder[k]
        m_in, m_out = spec.maps[k], outs[k]
        rows.append({"layer": f"dec.interp{k}", "in": [m_in, h, w], "out": [m_in, H, W], "params": 0})
        rows.append({"layer": f"dec.deconv{k}", "in": [m_in, H, W], "out": [m_out, H, W],
                     "params": m_in * m_out * 9 + m_out})
        if k > 0:
            rows.append({"layer": f"dec.bn{k}", "in": [m_out, H, W], "out": [m_out, H, W], "params": 2 * m_out})
    for j, hs in enumerate(heads):
        rows.append({"layer": f"head{j}.fc0", "in": [hs.inputs], "out": [hs.hidden],
                     "params": hs.inputs * hs.hidden + hs.hidden})
        rows.append({"layer": f"head{j}.fc1", "in": [hs.hidden], "out": [hs.outputs],
                     "params": hs.hidden * hs.outputs + hs.outputs})
    return rows


def summary_text(rows: list[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"
