"""Central-difference convolution and small encoder-decoder networks.

One builder covers the surrogate segmenter, the two perturbation
generators and the exploiter models; they differ only in ``NetSpec``.
All return raw logits / pre-activation fields at the input resolution.

A CDC layer carries two 3x3 kernels: a vanilla one (``w_v``) and a
central-difference one (``w_c``) that aggregates differences between
each neighbor and the window center. The layer is evaluated in its
collapsed algebraic form

    out = conv(f, w_v + w_c) - conv_1x1(f, sum_window(w_c))

with replicate padding, so a spatially constant input contributes
nothing through the difference path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RngSeed
from .errors import ConfigurationError, DimensionError

ARCHS = ("unet", "unet_cdc_encoder", "unet_attn_lite", "unet_nested_lite")


@dataclass(frozen=True)
class NetSpec:
    """Architecture selector plus width/depth/channel counts.

    ``depth`` counts encoder levels including the bottleneck, so the
    input spatial size must be divisible by ``2**(depth - 1)``.
    For ``unet_cdc_encoder`` every encoder convolution (bottleneck
    included) is a CDC layer; the decoder stays vanilla.
    """

    arch: str = "unet"
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ConfigurationError("channel counts must be >= 1")


class CdcConv2d(nn.Module):
    """3x3 convolution with a parallel central-difference path."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.w_v = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.w_c = nn.Parameter(torch.zeros(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        if x.shape[-1] < 3 or x.shape[-2] < 3:
            raise DimensionError(f"CDC input must be at least 3x3, got {tuple(x.shape)}")
        return cdc_conv2d(x, self.w_v, self.w_c, self.bias)


def cdc_conv2d(f_in, w_v, w_c, bias=None):
    """Vanilla + central-difference convolution, stride 1, same size.

    Differentiable in ``f_in``, ``w_v`` and ``w_c``. Replicate padding
    keeps the difference path exactly zero on flat inputs.
    """
    if f_in.shape[1] != w_v.shape[1]:
        raise DimensionError(
            f"input has {f_in.shape[1]} channels, kernels expect {w_v.shape[1]}"
        )
    if w_v.shape != w_c.shape:
        raise DimensionError(f"kernel shapes differ: {tuple(w_v.shape)} vs {tuple(w_c.shape)}")
    padded = F.pad(f_in, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, w_v + w_c, bias=bias)
    center = F.conv2d(f_in, w_c.sum(dim=(2, 3), keepdim=True))
    return out - center


def _conv3x3(cin, cout, cdc=False):
    if cdc:
        return CdcConv2d(cin, cout)
    return nn.Conv2d(cin, cout, 3, padding=1)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, cdc=False):
        super().__init__()
        self.net = nn.Sequential(
            _conv3x3(cin, cout, cdc), nn.ReLU(inplace=True),
            _conv3x3(cout, cout, cdc), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class AttentionGate(nn.Module):
    """Additive attention on a skip connection, gated by the decoder."""

    def __init__(self, channels):
        super().__init__()
        inter = max(channels // 2, 1)
        self.w_gate = nn.Conv2d(channels, inter, 1)
        self.w_skip = nn.Conv2d(channels, inter, 1)
        self.psi = nn.Conv2d(inter, 1, 1)

    def forward(self, gate, skip):
        a = torch.sigmoid(self.psi(F.relu(self.w_gate(gate) + self.w_skip(skip))))
        return skip * a


class _UNetBase(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.chs = [spec.base_channels * 2**i for i in range(spec.depth)]
        cdc = spec.arch == "unet_cdc_encoder"
        self.enc = nn.ModuleList()
        cin = spec.in_channels
        for ch in self.chs:
            self.enc.append(ConvBlock(cin, ch, cdc=cdc))
            cin = ch
        self.head = nn.Conv2d(self.chs[0], spec.out_channels, 1)

    def _check_input(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )
        factor = 2 ** (self.spec.depth - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise DimensionError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}"
            )

    def _encode(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        return x, skips


class UNet(_UNetBase):
    """Plain U-Net; also hosts the CDC-encoder and attention variants."""

    def __init__(self, spec: NetSpec):
        super().__init__(spec)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.gates = nn.ModuleList() if spec.arch == "unet_attn_lite" else None
        for i in range(spec.depth - 2, -1, -1):
            self.up.append(nn.ConvTranspose2d(self.chs[i + 1], self.chs[i], 2, stride=2))
            self.dec.append(ConvBlock(2 * self.chs[i], self.chs[i]))
            if self.gates is not None:
                self.gates.append(AttentionGate(self.chs[i]))

    def forward(self, x):
        self._check_input(x)
        x, skips = self._encode(x)
        for j, (up, dec) in enumerate(zip(self.up, self.dec)):
            g = up(x)
            skip = skips[-(j + 1)]
            if self.gates is not None:
                skip = self.gates[j](g, skip)
            x = dec(torch.cat([g, skip], dim=1))
        return self.head(x)


class NestedUNet(_UNetBase):
    """U-Net with one level of nested dense skips."""

    def __init__(self, spec: NetSpec):
        super().__init__(spec)
        self.nest_up = nn.ModuleList()
        self.nest = nn.ModuleList()
        for i in range(spec.depth - 1):
            self.nest_up.append(nn.ConvTranspose2d(self.chs[i + 1], self.chs[i], 2, stride=2))
            self.nest.append(ConvBlock(2 * self.chs[i], self.chs[i]))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(spec.depth - 2, -1, -1):
            self.up.append(nn.ConvTranspose2d(self.chs[i + 1], self.chs[i], 2, stride=2))
            self.dec.append(ConvBlock(3 * self.chs[i], self.chs[i]))

    def forward(self, x):
        self._check_input(x)
        feats = []
        for i, block in enumerate(self.enc):
            x = block(x)
            feats.append(x)
            if i < len(self.enc) - 1:
                x = F.max_pool2d(x, 2)
        nested = [
            self.nest[i](torch.cat([feats[i], self.nest_up[i](feats[i + 1])], dim=1))
            for i in range(self.spec.depth - 1)
        ]
        x = feats[-1]
        for j, (up, dec) in enumerate(zip(self.up, self.dec)):
            i = self.spec.depth - 2 - j
            x = dec(torch.cat([up(x), feats[i], nested[i]], dim=1))
        return self.head(x)


def build_model(spec: NetSpec, seed: RngSeed) -> nn.Module:
    """Construct and deterministically initialize a network."""
    if spec.arch == "unet_nested_lite":
        model = NestedUNet(spec)
    else:
        model = UNet(spec)
    init_params(model, seed)
    return model


def init_params(model: nn.Module, seed: RngSeed) -> nn.Module:
    """Fan-in-scaled uniform init; CDC difference kernels start at zero.

    Walks modules in definition order drawing from one generator, so a
    given seed always produces the same parameter values.
    """
    gen = torch.Generator().manual_seed(int(seed.seed) % 2**63)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            bound = 1.0 / float(fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, CdcConv2d):
            fan_in = m.w_v.shape[1] * 9
            bound = 1.0 / float(fan_in) ** 0.5
            with torch.no_grad():
                m.w_v.uniform_(-bound, bound, generator=gen)
                m.w_c.zero_()
                m.bias.uniform_(-bound, bound, generator=gen)
    return model


def zero_output_layer(model: nn.Module) -> nn.Module:
    """Zero the final 1x1 head so the network output starts identically 0."""
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def net_forward(model: nn.Module, images: np.ndarray) -> np.ndarray:
    """Run a NHWC float batch through a frozen model, return NHWC output."""
    if images.ndim != 4:
        raise DimensionError(f"expected NHWC batch, got shape {images.shape}")
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    x = x.to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    if was_training:
        model.train()
    return out.numpy().transpose(0, 2, 3, 1)


def _write_npz_deterministic(path, arrays: dict) -> None:
    """npz writer with a frozen zip timestamp, so reruns are hash-equal."""
    import io
    import zipfile

    from numpy.lib import format as npformat

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            npformat.write_array(buf, np.asanyarray(arr))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, model: nn.Module, spec: NetSpec) -> None:
    """Write named float32 little-endian arrays plus the spec as JSON.

    The container is an ``.npz`` archive: one ``.npy`` entry per named
    parameter/buffer and a ``__spec__`` entry holding the JSON-encoded
    ``NetSpec``. Round-trips are bit-exact for float32 parameters.
    """
    arrays = {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    arrays["__spec__"] = np.frombuffer(
        json.dumps(asdict(spec)).encode("utf-8"), dtype=np.uint8
    )
    _write_npz_deterministic(path, arrays)


def load_checkpoint(path) -> tuple[nn.Module, NetSpec]:
    """Rebuild a model from :func:`save_checkpoint` output."""
    import os

    from .errors import IngestionError

    if not os.path.exists(path):
        raise IngestionError(f"missing checkpoint file {path}")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__spec__"]).decode("utf-8"))
        spec = NetSpec(**meta)
        model = build_model(spec, RngSeed(0))
        state = {
            name: torch.from_numpy(data[name].copy())
            for name in data.files
            if name != "__spec__"
        }
    model.load_state_dict(state)
    return model, spec
