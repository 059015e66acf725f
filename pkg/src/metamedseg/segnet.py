"""Compact U-Net with instance normalisation over a flat parameter vector."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, FormatError, IncompatibleCheckpointError

CKPT_MAGIC = b"MMSG"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchDescriptor:
    input_channels: int = 1
    base_width: int = 8
    depth: int = 3
    output_channels: int = 1

    def __post_init__(self):
        if min(self.input_channels, self.base_width, self.output_channels) < 1 or self.depth < 0:
            raise ConfigurationError(f"invalid architecture {self}")

    def as_tuple(self):
        return (self.input_channels, self.base_width, self.depth, self.output_channels)

    def layer_table(self):
        """Ordered ``(name, shape)`` pairs; the flat layout of a ParamVector."""
        table = []

        def block(name, cin, cout):
            table.extend([
                (f"{name}.conv1.weight", (cout, cin, 3, 3)), (f"{name}.conv1.bias", (cout,)),
                (f"{name}.norm1.gain", (cout,)), (f"{name}.norm1.shift", (cout,)),
                (f"{name}.conv2.weight", (cout, cout, 3, 3)), (f"{name}.conv2.bias", (cout,)),
                (f"{name}.norm2.gain", (cout,)), (f"{name}.norm2.shift", (cout,)),
            ])

        widths = [self.base_width * 2 ** i for i in range(self.depth + 1)]
        cin = self.input_channels
        for i in range(self.depth):
            block(f"down{i}", cin, widths[i])
            cin = widths[i]
        block("bottom", cin, widths[self.depth])
        for i in reversed(range(self.depth)):
            block(f"up{i}", widths[i + 1] + widths[i], widths[i])
        table.append(("head.weight", (self.output_channels, widths[0], 1, 1)))
        table.append(("head.bias", (self.output_channels,)))
        return table

    @property
    def n_params(self):
        return sum(int(np.prod(shape)) for _, shape in self.layer_table())


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat model parameters tied to the architecture that interprets them."""

    values: np.ndarray
    arch: ArchDescriptor

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size != self.arch.n_params:
            raise DimensionError(
                f"{self.values.size} values do not fit {self.arch} ({self.arch.n_params} parameters)")

    def __len__(self):
        return self.values.size

    def copy(self):
        return ParamVector(self.values.copy(), self.arch)

    def replace(self, values):
        return ParamVector(np.asarray(values, dtype=self.values.dtype), self.arch)

    def unflatten(self):
        """Name -> array views into ``values`` (no copies)."""
        out, offset = {}, 0
        for name, shape in self.arch.layer_table():
            n = int(np.prod(shape))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out


def flatten(arrays, arch, dtype=None):
    parts = [np.asarray(arrays[name]).reshape(-1) for name, _ in arch.layer_table()]
    values = np.concatenate(parts)
    return ParamVector(values.astype(dtype or values.dtype, copy=False), arch)


def build(arch, seed, dtype=np.float32):
    """Fresh parameters: fan-in scaled uniform kernels, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in arch.layer_table():
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("gain"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return flatten(arrays, arch, dtype=dtype)


def _check_input(arch, batch):
    if batch.ndim != 4 or batch.shape[1] != arch.input_channels:
        raise DimensionError(f"expected input [N,{arch.input_channels},H,W], got {batch.shape}")
    k = 2 ** arch.depth
    if batch.shape[2] % k or batch.shape[3] % k:
        raise DimensionError(f"spatial size {batch.shape[2:]} not divisible by {k}")


def _double_conv(t, p, name):
    t = ad.conv2d(t, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1)
    t = ad.relu(ad.instance_norm(t, p[f"{name}.norm1.gain"], p[f"{name}.norm1.shift"]))
    t = ad.conv2d(t, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1)
    return ad.relu(ad.instance_norm(t, p[f"{name}.norm2.gain"], p[f"{name}.norm2.shift"]))


def forward_tensors(arch, tensors, batch):
    """U-Net forward on named parameter Tensors; returns probabilities."""
    x = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
    _check_input(arch, x.data)
    skips = []
    for i in range(arch.depth):
        x = _double_conv(x, tensors, f"down{i}")
        skips.append(x)
        x = ad.maxpool2(x)
    x = _double_conv(x, tensors, "bottom")
    for i in reversed(range(arch.depth)):
        x = ad.concat_channels(ad.upsample2(x), skips[i])
        x = _double_conv(x, tensors, f"up{i}")
    logits = ad.conv2d(x, tensors["head.weight"], tensors["head.bias"])
    return ad.sigmoid(logits)


def first_norm_activations(params, batch):
    """Output of the first instance-norm layer (before its ReLU)."""
    p = {k: ad.Tensor(v) for k, v in params.unflatten().items()}
    x = ad.Tensor(np.asarray(batch, dtype=params.values.dtype))
    _check_input(params.arch, x.data)
    t = ad.conv2d(x, p["down0.conv1.weight"], p["down0.conv1.bias"], padding=1)
    return ad.instance_norm(t, p["down0.norm1.gain"], p["down0.norm1.shift"]).data


def forward(params, batch):
    """Inference: probabilities of shape [N, out, H, W] as an ndarray."""
    batch = np.asarray(batch, dtype=params.values.dtype)
    tensors = {k: ad.Tensor(v) for k, v in params.unflatten().items()}
    return forward_tensors(params.arch, tensors, batch).data


def loss_and_grad(params, batch, target, loss_fn):
    """Scalar loss and its gradient w.r.t. every parameter, as a flat array."""
    dtype = params.values.dtype
    leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.unflatten().items()}
    with ad.Tape() as tape:
        pred = forward_tensors(params.arch, leaves, np.asarray(batch, dtype=dtype))
        loss = loss_fn(pred, ad.Tensor(np.asarray(target, dtype=dtype)))
    tape.backward(loss)
    grad = np.concatenate([
        (leaves[name].grad if leaves[name].grad is not None else np.zeros(shape, dtype)).reshape(-1)
        for name, shape in params.arch.layer_table()
    ])
    return float(loss.data), grad.astype(dtype, copy=False)


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(params):
    arch = params.arch
    header = CKPT_MAGIC + struct.pack("<I4IQ", CKPT_VERSION, *arch.as_tuple(), len(params))
    return header + params.values.astype("<f4").tobytes()


def save_checkpoint(params, path):
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(blob, dtype=np.float32):
    head = 4 + struct.calcsize("<I4IQ")
    if len(blob) < head or blob[:4] != CKPT_MAGIC:
        raise FormatError("not an MMSG checkpoint")
    version, c_in, base, depth, c_out, count = struct.unpack("<I4IQ", blob[4:head])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    arch = ArchDescriptor(c_in, base, depth, c_out)
    if len(blob) != head + 4 * count:
        raise FormatError("checkpoint payload length does not match parameter count")
    values = np.frombuffer(blob, dtype="<f4", offset=head, count=count).astype(dtype)
    return ParamVector(values, arch)


def load_checkpoint(path, expected_arch=None, dtype=np.float32):
    params = parse_checkpoint(Path(path).read_bytes(), dtype=dtype)
    if expected_arch is not None and params.arch != expected_arch:
        raise IncompatibleCheckpointError(
            f"checkpoint architecture {params.arch} does not match configured {expected_arch}")
    return params
