"""Asymmetric residual 3D encoder-decoder.

Encoder levels hold residual blocks of two 3x3x3 convolutions, decoder levels
residual blocks of a single convolution, which puts roughly three quarters
of the weights in the encoder.  Downsampling concatenates a max pooling of
the features with a strided convolution; upsampling uses transposed
convolutions whose output is added to the matching encoder features.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

WEIGHT_MAGIC = b"LSNW"
WEIGHT_VERSION = 1


class WeightFileError(Exception):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 8
    num_classes: int = 2
    base_filters: int = 32
    resolution_steps: int = 4
    dropout_rate: float = 0.2
    upsample_kernel: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("in_channels must be >= 1 and num_classes >= 2")
        if self.base_filters < 1 or self.resolution_steps < 1:
            raise ValueError("base_filters and resolution_steps must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.upsample_kernel not in (2, 3):
            raise ValueError("upsample_kernel must be 2 or 3")

    def channels(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def divisor(self) -> int:
        return 2 ** (self.resolution_steps - 1)

    def check_spatial(self, shape) -> None:
        for axis, n in enumerate(shape):
            if n % self.divisor:
                raise ValueError(
                    f"spatial dimension {axis} has size {n}, which is not divisible by {self.divisor}"
                )


class EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.act1 = nn.PReLU(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.act2 = nn.PReLU(c_out)
        self.shortcut = nn.Identity() if c_in == c_out else nn.Conv3d(c_in, c_out, 1)

    def forward(self, x):
        return self.act2(self.conv2(self.act1(self.conv1(x)))) + self.shortcut(x)


class DecoderBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)
        self.act = nn.PReLU(channels)

    def forward(self, x):
        return self.act(self.conv(x)) + x


class Downsample(nn.Module):
    """Max pooling concatenated with a stride-2 convolution."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        if c_out <= c_in:
            raise ValueError("downsampling must increase the channel count")
        self.pool = nn.MaxPool3d(2)
        self.conv = nn.Conv3d(c_in, c_out - c_in, 3, stride=2, padding=1)

    def forward(self, x):
        return torch.cat([self.pool(x), self.conv(x)], dim=1)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        # kernel 3 needs output_padding to land exactly on twice the size
        pad = (kernel - 2 + 1) // 2
        self.conv = nn.ConvTranspose3d(c_in, c_out, kernel, stride=2, padding=pad,
                                       output_padding=2 * pad + 2 - kernel)

    def forward(self, x):
        return self.conv(x)


class LesionNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        levels = config.resolution_steps
        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = config.in_channels
        for level in range(levels):
            c = config.channels(level)
            block_in = c_prev if level == 0 else c
            self.encoder.append(EncoderBlock(block_in, c))
            if level < levels - 1:
                self.down.append(Downsample(c, config.channels(level + 1)))
            c_prev = c
        self.dropout = nn.Dropout3d(config.dropout_rate)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(levels - 1)):
            self.up.append(Upsample(config.channels(level + 1), config.channels(level), config.upsample_kernel))
            self.decoder.append(DecoderBlock(config.channels(level)))
        self.head = nn.Conv3d(config.channels(0), config.num_classes, 1)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for level, block in enumerate(self.encoder):
            x = self.dropout(block(x))
            if level < len(self.down):
                skips.append(x)
                x = self.down[level](x)
        for up, block in zip(self.up, self.decoder):
            x = block(up(x) + skips.pop())
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def _init_weights(net: LesionNet, generator: torch.Generator) -> None:
    for module in net.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            w = module.weight
            # He init on the fan-in; transposed convs store (in, out, k...)
            fan_in = w[0].numel() if isinstance(module, nn.Conv3d) else w.shape[0] * w[0, 0].numel()
            with torch.no_grad():
                w.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
                module.bias.zero_()
        elif isinstance(module, nn.PReLU):
            with torch.no_grad():
                module.weight.fill_(0.25)


def build_network(config: NetworkConfig, seed: int = 0) -> LesionNet:
    net = LesionNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    _init_weights(net, gen)
    return net


def forward(network: nn.Module, batch, mode: str = "eval") -> torch.Tensor:
    """Per-voxel class probabilities for a (B, I, X, Y, Z) batch."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = torch.as_tensor(batch)
    if x.dtype != torch.float64:
        x = x.float()
    if x.ndim != 5:
        raise ValueError(f"expected a (B, I, X, Y, Z) batch, got {x.ndim} dimensions")
    config = getattr(network, "config", None)
    if config is not None:
        if x.shape[1] != config.in_channels:
            raise ValueError(f"channel dimension has size {x.shape[1]}, network expects {config.in_channels}")
        if isinstance(config, NetworkConfig):
            config.check_spatial(x.shape[2:])
    network.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return network(x)
    return network(x)


def parameter_counts(network: LesionNet) -> tuple[int, int, int]:
    """(encoder, decoder, head) parameter counts.

    Downsampling layers count as encoder, transposed convolutions as decoder.
    """
    def count(modules):
        return sum(p.numel() for m in modules for p in m.parameters())

    enc = count(network.encoder) + count(network.down)
    dec = count(network.up) + count(network.decoder)
    head = count([network.head])
    return enc, dec, head


def encoder_fraction(network: LesionNet) -> float:
    enc, dec, _ = parameter_counts(network)
    return enc / (enc + dec)


# --------------------------------------------------------------------------
# Weight file: magic "LSNW", uint32 version, uint64 header length (all
# little-endian), a UTF-8 JSON header, then raw little-endian float32 tensors
# in manifest order.  The header carries the NetworkConfig, the manifest
# (name, shape, offset, nbytes) and a SHA-256 of the payload.

def save_weights(network: LesionNet, path, extra: dict | None = None) -> None:
    state = network.state_dict()
    layers, chunks, offset = [], [], 0
    for name, tensor in state.items():
        buf = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        layers.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "config": asdict(network.config),
        "layers": layers,
        "endianness": "little",
        "dtype": "float32",
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(WEIGHT_MAGIC + struct.pack("<IQ", WEIGHT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def read_weight_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported weight file version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupted header") from exc
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise WeightFileError(f"{path}: payload checksum mismatch")
    return header, payload


def load_weights(path, expected: NetworkConfig | None = None) -> LesionNet:
    header, payload = read_weight_header(path)
    try:
        config = NetworkConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise WeightFileError(f"{path}: invalid network config ({exc})") from exc
    if expected is not None and expected != config:
        diffs = {k: (v, getattr(config, k)) for k, v in asdict(expected).items() if getattr(config, k) != v}
        raise WeightFileError(f"{path}: network config mismatch (expected, found): {diffs}")
    net = LesionNet(config)
    state = {}
    for layer in header["layers"]:
        buf = payload[layer["offset"]:layer["offset"] + layer["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(layer["shape"]).copy()
        state[layer["name"]] = torch.from_numpy(arr)
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise WeightFileError(f"{path}: layer manifest does not match the network ({exc})") from exc
    return net
