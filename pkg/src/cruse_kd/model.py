"""CRUSE: convolutional recurrent U-Net producing a sigmoid mel mask.

Four strided causal conv encoder blocks, a grouped-GRU bottleneck and four
transposed-conv decoder blocks. Encoder outputs reach the decoder through
1x1 convolutions summed into the decoder inputs. Nine activations are
exposed as taps for feature distillation and CKA analysis.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import dsp
from . import functional as CF
from .errors import ConfigurationError, DataError, ShapeError

TAP_NAMES = ("enc1", "enc2", "enc3", "enc4", "bottleneck", "dec1", "dec2", "dec3", "dec4")
KERNEL = (2, 3)
STRIDE = (1, 2)


@dataclass(frozen=True)
class ModelConfig:
    enc_channels: tuple[int, int, int, int] = (32, 64, 128, 192)
    gru_units: int = 960
    gru_groups: int = 4
    n_mels: int = 80
    leaky_slope: float = 0.2
    gru_shuffle: bool = False

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        self.validate()

    @property
    def bottleneck_bins(self) -> int:
        return self.n_mels // 2 ** len(self.enc_channels)

    def validate(self) -> None:
        if len(self.enc_channels) != 4 or min(self.enc_channels) < 1:
            raise ConfigurationError(f"enc_channels must be four positive counts, got {self.enc_channels}")
        if self.n_mels % 16:
            raise ConfigurationError(f"n_mels must be divisible by 16, got {self.n_mels}")
        expected = self.enc_channels[-1] * self.bottleneck_bins
        if self.gru_units != expected:
            raise ConfigurationError(
                f"gru_units must equal enc_channels[3] * {self.bottleneck_bins} = {expected}, got {self.gru_units}"
            )
        if self.gru_groups < 1 or self.gru_units % self.gru_groups:
            raise ConfigurationError(f"gru_units {self.gru_units} not divisible by gru_groups {self.gru_groups}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d


TEACHER = ModelConfig()
STUDENT = ModelConfig(enc_channels=(8, 16, 32, 32), gru_units=160)


def _uniform_(t: Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)


class CausalConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel=KERNEL, stride=STRIDE):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_out, c_in, *kernel))
        self.bias = nn.Parameter(torch.empty(c_out))

    def fan_in(self) -> int:
        return self.weight[0].numel()

    def forward(self, x: Tensor) -> Tensor:
        return CF.causal_conv2d(x, self.weight, self.bias, self.stride)


class CausalConvTranspose(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel=KERNEL, stride=STRIDE):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_in, c_out, *kernel))
        self.bias = nn.Parameter(torch.empty(c_out))

    def fan_in(self) -> int:
        return self.weight.shape[0] * self.weight.shape[2] * self.weight.shape[3]

    def forward(self, x: Tensor, out_freq: int | None = None) -> Tensor:
        return CF.causal_transpose_conv2d(x, self.weight, self.bias, self.stride, out_freq)


class PointwiseConv(nn.Module):
    """1x1 convolution used on the skip paths."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(channels, channels))
        self.bias = nn.Parameter(torch.empty(channels))

    def fan_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return torch.einsum("oc,bctf->botf", self.weight, x) + self.bias.view(1, -1, 1, 1)


class CumulativeLayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return CF.cumulative_layer_norm(x, self.gain, self.bias, self.eps)


class GroupedGRU(nn.Module):
    def __init__(self, units: int, groups: int, shuffle: bool = False):
        super().__init__()
        h = units // groups
        self.shuffle = shuffle
        self.w_ih = nn.Parameter(torch.empty(groups, 3 * h, h))
        self.w_hh = nn.Parameter(torch.empty(groups, 3 * h, h))
        self.b_ih = nn.Parameter(torch.empty(groups, 3 * h))
        self.b_hh = nn.Parameter(torch.empty(groups, 3 * h))

    def fan_in(self) -> int:
        return self.w_hh.shape[-1]

    def forward(self, x: Tensor) -> Tensor:
        return CF.gru_sequence(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh, self.shuffle)


class CruseModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.enc_channels
        ins = (1,) + c[:-1]
        self.enc_convs = nn.ModuleList(CausalConv(i, o) for i, o in zip(ins, c))
        self.enc_norms = nn.ModuleList(CumulativeLayerNorm(o) for o in c)
        self.gru = GroupedGRU(cfg.gru_units, cfg.gru_groups, cfg.gru_shuffle)
        dec_in = tuple(reversed(c))
        dec_out = tuple(reversed(ins))
        self.skips = nn.ModuleList(PointwiseConv(ch) for ch in dec_in)
        self.dec_convs = nn.ModuleList(CausalConvTranspose(i, o) for i, o in zip(dec_in, dec_out))
        self.dec_norms = nn.ModuleList(CumulativeLayerNorm(o) for o in dec_out[:-1])
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-a, a) with a = sqrt(1 / fan_in); norms start at identity."""
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, CumulativeLayerNorm):
                nn.init.ones_(module.gain)
                nn.init.zeros_(module.bias)
            elif hasattr(module, "fan_in"):
                fan = module.fan_in()
                for p in module.parameters(recurse=False):
                    _uniform_(p, fan, gen)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_taps(x)[0]

    def forward_with_taps(self, x: Tensor) -> tuple[Tensor, "OrderedDict[str, Tensor]"]:
        """Return the ``[b, 1, t, n_mels]`` mask and the nine ordered taps."""
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-1] != self.cfg.n_mels:
            raise ShapeError(f"expected input [b, 1, t, {self.cfg.n_mels}], got {tuple(x.shape)}")
        taps: OrderedDict[str, Tensor] = OrderedDict()
        skips = []
        h = x
        for k, (conv, norm) in enumerate(zip(self.enc_convs, self.enc_norms), start=1):
            h = self.act(norm(conv(h)))
            taps[f"enc{k}"] = h
            skips.append(h)

        b, c, t, f = h.shape
        seq = h.permute(0, 2, 1, 3).reshape(b, t, c * f)
        h = self.gru(seq).reshape(b, t, c, f).permute(0, 2, 1, 3)
        taps["bottleneck"] = h

        n_blocks = len(self.dec_convs)
        for k in range(n_blocks):
            enc = skips[n_blocks - 1 - k]
            h = h + self.skips[k](enc)
            target = 2 * enc.shape[-1] if k < n_blocks - 1 else self.cfg.n_mels
            h = self.dec_convs[k](h, out_freq=target)
            if k < n_blocks - 1:
                h = self.act(self.dec_norms[k](h))
            else:
                h = torch.sigmoid(h)
            taps[f"dec{k + 1}"] = h
        return h, taps

    def freeze(self) -> "CruseModel":
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self.eval()


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> CruseModel:
    model = CruseModel(cfg)
    model.reset_parameters(seed)
    return model.to(dtype)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    cfg.validate()
    kt, kf = KERNEL
    c = cfg.enc_channels
    ins = (1,) + c[:-1]
    total = 0
    for i, o in zip(ins, c):
        total += i * o * kt * kf + o + 2 * o  # conv + bias + cLN
    total += CF.grouped_gru_param_count(cfg.gru_units, cfg.gru_units, cfg.gru_groups)
    for k, (i, o) in enumerate(zip(reversed(c), reversed(ins))):
        total += i * i + i  # skip
        total += i * o * kt * kf + o
        if k < len(c) - 1:
            total += 2 * o  # cLN; the mask head has none
    return total


# Op costs per element for the counting convention in count_mops_per_frame.
_CLN_OPS = 7
_LEAKY_OPS = 2
_SIGMOID_OPS = 4
_GRU_ELEMENTWISE_OPS = 26


def _frontend_ops(n_mels: int) -> int:
    fft = int(2.5 * dsp.FRAME * math.log2(dsp.FRAME))
    window = dsp.FRAME
    magnitude = 4 * dsp.N_BINS
    mel = 2 * n_mels * dsp.N_BINS
    compress = 2 * n_mels
    expand = 2 * n_mels * dsp.N_BINS
    apply = 2 * dsp.N_BINS
    overlap_add = dsp.HOP
    return 2 * fft + 2 * window + magnitude + mel + compress + expand + apply + overlap_add


def count_mops_per_frame(cfg: ModelConfig, include_frontend: bool = True) -> float:
    """Arithmetic operations (millions) to process one STFT frame.

    One multiply-accumulate counts as two ops. Transposed convolutions are
    costed as a dense convolution over the zero-stuffed input, i.e. every
    output element pays ``c_in * kt * kf`` MACs. Normalisation, activations
    and GRU gate arithmetic use the fixed per-element costs above; with
    ``include_frontend`` the STFT, mel projection, mask expansion and
    inverse STFT are added.
    """
    cfg.validate()
    kt, kf = KERNEL
    c = cfg.enc_channels
    ins = (1,) + c[:-1]
    ops = 0
    f = cfg.n_mels
    extents = []
    for i, o in zip(ins, c):
        f //= 2
        ops += 2 * f * o * i * kt * kf + f * o
        ops += (_CLN_OPS + _LEAKY_OPS) * f * o
        extents.append((f, o))

    g = cfg.gru_groups
    h = cfg.gru_units // g
    ops += g * (2 * 3 * h * (h + h) + _GRU_ELEMENTWISE_OPS * h)

    for k, ((f_in, ch), o) in enumerate(zip(reversed(extents), reversed(ins))):
        ops += 2 * f_in * ch * ch + 2 * f_in * ch  # skip conv, bias, sum
        f_out = 2 * f_in
        ops += 2 * f_out * o * ch * kt * kf + f_out * o
        ops += (_CLN_OPS + _LEAKY_OPS) * f_out * o if k < len(c) - 1 else _SIGMOID_OPS * f_out
    if include_frontend:
        ops += _frontend_ops(cfg.n_mels)
    return ops / 1e6


# Checkpoint layout: magic, u32 version, u32 config length, config JSON,
# u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
# u32 dims, little-endian float32 data.
MAGIC = b"CRUSEKD\x00"
VERSION = 1


def checkpoint_bytes(model: CruseModel) -> bytes:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        raw = name.encode()
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model: CruseModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> CruseModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a CRUSE checkpoint")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", blob, pos)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    cfg = ModelConfig(**json.loads(blob[pos:pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = OrderedDict()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.copy())
    model = CruseModel(cfg)
    model.load_state_dict(state)
    return model
