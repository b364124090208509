"""Residual conv backbone, projection head and the momentum (EMA) update.

The backbone has no normalisation layers. Each residual block computes
``relu((shortcut(x) + conv2(relu(conv1(x)))) / sqrt(2))`` so activations keep
roughly unit scale without batch statistics.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

_RES_SCALE = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class EncoderDescriptor:
    """Architecture of one encoder; parameter names/shapes derive from it."""

    input_size: int = 56
    in_channels: int = 3
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    head_hidden: int = 128
    out_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        widths = [self.in_channels, self.stem_width, *self.stage_widths, self.head_hidden, self.out_dim]
        if not self.stage_widths or min(widths) < 1 or self.blocks_per_stage < 1:
            raise ConfigError(f"zero-width or empty layer in {self}")
        # stem /4, then /2 per later stage
        if self.input_size < 4 * 2 ** (len(self.stage_widths) - 1):
            raise ConfigError(f"input_size={self.input_size} too small for {len(self.stage_widths)} stages")

    @property
    def backbone_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderDescriptor:
        return cls(**d)


def parameter_shapes(desc: EncoderDescriptor) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"stem.w": (desc.stem_width, desc.in_channels, 3, 3)}
    c_in = desc.stem_width
    for s, c_out in enumerate(desc.stage_widths):
        for b in range(desc.blocks_per_stage):
            p = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            shapes[f"{p}.conv1.w"] = (c_out, c_in, 3, 3)
            shapes[f"{p}.conv2.w"] = (c_out, c_out, 3, 3)
            if stride != 1 or c_in != c_out:
                shapes[f"{p}.proj.w"] = (c_out, c_in, 1, 1)
            c_in = c_out
    dims = [desc.backbone_dim, desc.head_hidden, desc.head_hidden, desc.out_dim]
    for i in range(3):
        shapes[f"head.fc{i + 1}.w"] = (dims[i + 1], dims[i])
        shapes[f"head.fc{i + 1}.b"] = (dims[i + 1],)
    return shapes


@dataclass
class EncoderParams:
    descriptor: EncoderDescriptor
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def clone(self, requires_grad: bool | None = None) -> EncoderParams:
        out = {}
        for k, t in self.tensors.items():
            out[k] = Tensor(t.data, requires_grad=t.requires_grad if requires_grad is None else requires_grad)
        return EncoderParams(self.descriptor, out)

    def astype(self, dtype) -> EncoderParams:
        return EncoderParams(
            self.descriptor, {k: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for k, t in self.items()}
        )


@dataclass
class EncoderOutput:
    backbone_feature: Tensor
    projected: Tensor


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(shapes: dict[str, tuple[int, ...]], seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases; drawn in name order."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = _uniform_fan_in(rng, shape, dtype)
        out[name] = Tensor(data, requires_grad=True)
    return out


def init_encoder(descriptor: EncoderDescriptor, seed: int, dtype=np.float32) -> EncoderParams:
    return EncoderParams(descriptor, init_params(parameter_shapes(descriptor), seed, dtype))


def backbone(params: EncoderParams, batch: Tensor) -> Tensor:
    """``[B,C,H,W] -> [B, backbone_dim]``."""
    desc = params.descriptor
    if batch.ndim != 4 or batch.shape[1] != desc.in_channels or batch.shape[2:] != (desc.input_size,) * 2:
        raise DimensionError(
            f"encoder expects [B,{desc.in_channels},{desc.input_size},{desc.input_size}], got {batch.shape}"
        )
    x = T.relu(T.conv2d(batch, params["stem.w"], stride=2, padding=1))
    x = T.max_pool2d(x, 2)
    for s in range(len(desc.stage_widths)):
        for b in range(desc.blocks_per_stage):
            p = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            h = T.relu(T.conv2d(x, params[f"{p}.conv1.w"], stride=stride, padding=1))
            h = T.conv2d(h, params[f"{p}.conv2.w"], stride=1, padding=1)
            proj = params.tensors.get(f"{p}.proj.w")
            short = x if proj is None else T.conv2d(x, proj, stride=stride, padding=0)
            x = T.relu(T.scale(T.add(short, h), _RES_SCALE))
    return T.global_avg_pool(x)


def project(params: EncoderParams, feature: Tensor) -> Tensor:
    """Two hidden relu layers, linear output, then L2 normalisation."""
    h = T.relu(T.linear(feature, params["head.fc1.w"], params["head.fc1.b"]))
    h = T.relu(T.linear(h, params["head.fc2.w"], params["head.fc2.b"]))
    return T.l2_normalize(T.linear(h, params["head.fc3.w"], params["head.fc3.b"]))


def forward(params: EncoderParams, batch: Tensor) -> EncoderOutput:
    feat = backbone(params, batch)
    return EncoderOutput(feat, project(params, feat))


def momentum_update(theta_k: EncoderParams, theta_q: EncoderParams, m: float) -> None:
    """In place: ``theta_k <- m * theta_k + (1 - m) * theta_q`` for every parameter."""
    if not 0.0 <= m < 1.0:
        raise ConfigError(f"momentum m={m} outside [0, 1)")
    if theta_k.descriptor != theta_q.descriptor or theta_k.tensors.keys() != theta_q.tensors.keys():
        raise ContractError("momentum_update: encoders were built from different descriptors")
    for name, k in theta_k.items():
        q = theta_q[name].data
        if m == 0.0:
            k.data[...] = q
        else:
            # k + (1-m)(q-k): same map, but exactly a no-op when q == k
            k.data += k.dtype.type(1.0 - m) * (q - k.data)


# autoencoder decoder ----------------------------------------------------------


def decoder_shapes(desc: EncoderDescriptor, latent_dim: int = 128) -> dict[str, tuple[int, ...]]:
    """Encoder-side latent layer plus a 3-stage upsampling decoder.

    The decoder starts from ``input_size/8`` squares with ``backbone_dim/4``
    channels and doubles resolution three times (nearest upsample + 3x3 conv).
    """
    if desc.input_size % 8:
        raise ConfigError(f"autoencoder needs input_size divisible by 8, got {desc.input_size}")
    base = desc.input_size // 8
    width = max(desc.backbone_dim // 4, 1)
    return {
        "latent.w": (latent_dim, desc.backbone_dim),
        "latent.b": (latent_dim,),
        "dec.fc.w": (width * base * base, latent_dim),
        "dec.fc.b": (width * base * base,),
        "dec.up0.w": (width, width, 3, 3),
        "dec.up1.w": (width, width, 3, 3),
        "dec.up2.w": (desc.in_channels, width, 3, 3),
    }


def decode(params: dict[str, Tensor], feature: Tensor, desc: EncoderDescriptor) -> Tensor:
    """Backbone feature -> latent -> reconstruction ``[B,C,H,W]``."""
    z = T.linear(feature, params["latent.w"], params["latent.b"])
    h = T.relu(T.linear(z, params["dec.fc.w"], params["dec.fc.b"]))
    base = desc.input_size // 8
    width = params["dec.up0.w"].shape[0]
    h = T.reshape(h, (feature.shape[0], width, base, base))
    h = T.relu(T.conv2d(T.upsample_nearest(h, 2), params["dec.up0.w"], padding=1))
    h = T.relu(T.conv2d(T.upsample_nearest(h, 2), params["dec.up1.w"], padding=1))
    return T.conv2d(T.upsample_nearest(h, 2), params["dec.up2.w"], padding=1)
