"""Pyramid / attention-gated / progressively deep-supervised U-Net family.

Eight ablation variants are switched by three flags:

=========== ======= ========= ===========
variant     pyramid attention progressive
=========== ======= ========= ===========
U-Net
PU-Net      x
ProgU-Net                     x
AU-Net              x
PAU-Net     x       x
ProgAU-Net          x         x
PPU-Net     x                 x
PPAU-Net    x       x         x
=========== ======= ========= ===========

Progressive side outputs always come with deep supervision.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

VARIANTS = {
    # name: (pyramid_inputs, attention_gates, progressive_side_outputs)
    "U-Net": (False, False, False),
    "PU-Net": (True, False, False),
    "ProgU-Net": (False, False, True),
    "AU-Net": (False, True, False),
    "PAU-Net": (True, True, False),
    "ProgAU-Net": (False, True, True),
    "PPU-Net": (True, False, True),
    "PPAU-Net": (True, True, True),
}

ALIASES = {
    "UNET": "U-Net",
    "ATTENTION U-NET": "AU-Net",
    "ATTNU-NET": "AU-Net",
    "APPAU-NET": "PPAU-Net",
}

N_STAGES = 4


@dataclass(frozen=True)
class SegmentorConfig:
    input_size: int = 128
    base_channels: int = 32
    stages: int = N_STAGES
    pyramid_inputs: bool = True
    attention_gates: bool = True
    progressive_side_outputs: bool = True
    deep_supervision: bool = True
    in_channels: int = 1

    def __post_init__(self):
        if self.stages != N_STAGES:
            raise ValueError(f"only {N_STAGES} stages are supported, got {self.stages}")
        if self.input_size <= 0 or self.input_size % 2**N_STAGES:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.progressive_side_outputs and not self.deep_supervision:
            raise ValueError("progressive side outputs require deep supervision")

    @property
    def channels(self) -> tuple:
        return tuple(self.base_channels * 2**k for k in range(N_STAGES + 1))

    @property
    def variant(self) -> str:
        flags = (self.pyramid_inputs, self.attention_gates, self.progressive_side_outputs)
        for name, v in VARIANTS.items():
            if v == flags:
                return name
        raise AssertionError(flags)


def canonical_variant(name: str) -> str:
    for v in VARIANTS:
        if v.upper() == name.upper():
            return v
    if name.upper() in ALIASES:
        return ALIASES[name.upper()]
    raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


def make_variant(name: str, **overrides) -> SegmentorConfig:
    pyramid, attention, progressive = VARIANTS[canonical_variant(name)]
    kw = dict(
        pyramid_inputs=pyramid,
        attention_gates=attention,
        progressive_side_outputs=progressive,
        deep_supervision=progressive,
    )
    kw.update(overrides)
    return SegmentorConfig(**kw)


class SegmentorOutput(NamedTuple):
    final: Tensor
    sides: tuple   # 4 maps at m/8, m/4, m/2, m; sides[3] is final


def attention_gate(x: Tensor, g: Tensor, w_x: Tensor, w_g: Tensor, b_g: Tensor, psi: Tensor, b_psi: Tensor):
    """Soft attention gate. Returns ``(alpha * x, alpha)``.

    ``x`` (skip features, resolution r) is projected with a stride-2 1x1
    convolution to the gating resolution r/2, summed with the projected
    gating signal ``g``, passed through ReLU, reduced to one channel by
    ``psi`` and squashed with a sigmoid. The coefficients are bilinearly
    upsampled back to r.
    """
    if x.shape[-2] != 2 * g.shape[-2] or x.shape[-1] != 2 * g.shape[-1]:
        raise ValueError(f"gating signal {tuple(g.shape[-2:])} must be half the resolution of {tuple(x.shape[-2:])}")
    if x.shape[1] != w_x.shape[1] or g.shape[1] != w_g.shape[1]:
        raise ValueError("channel counts do not match attention gate parameters")
    q = F.conv2d(x, w_x, stride=2) + F.conv2d(g, w_g, b_g)
    a = torch.sigmoid(F.conv2d(F.relu(q), psi, b_psi))
    alpha = F.interpolate(a, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return alpha * x, alpha


class AttentionGate(nn.Module):
    def __init__(self, x_channels: int, g_channels: int, inner_channels: int):
        super().__init__()
        self.w_x = nn.Conv2d(x_channels, inner_channels, 1, stride=2, bias=False)
        self.w_g = nn.Conv2d(g_channels, inner_channels, 1)
        self.psi = nn.Conv2d(inner_channels, 1, 1)

    def forward(self, x, g):
        out, _ = attention_gate(x, g, self.w_x.weight, self.w_g.weight, self.w_g.bias, self.psi.weight, self.psi.bias)
        return out


def conv_bn_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(*conv_bn_relu(cin, cout), *conv_bn_relu(cout, cout))


class PyramidInput(nn.Module):
    """Image average-pooled to a stage's resolution, then a 3x3 conv-BN-ReLU."""

    def __init__(self, factor: int, in_channels: int, out_channels: int):
        super().__init__()
        self.factor = factor
        self.conv = nn.Sequential(*conv_bn_relu(in_channels, out_channels))

    def forward(self, image):
        return self.conv(F.avg_pool2d(image, self.factor))


class Segmentor(nn.Module):
    def __init__(self, cfg: SegmentorConfig = SegmentorConfig(), seed=None):
        super().__init__()
        # default layer construction draws from the global RNG; keep a seeded build off it
        with torch.random.fork_rng() if seed is not None else contextlib.nullcontext():
            self.cfg = cfg
            ch = cfg.channels
            self.encoders = nn.ModuleList()
            self.pyramid = nn.ModuleList()
            for k in range(N_STAGES):
                cin = cfg.in_channels if k == 0 else ch[k - 1]
                if k > 0 and cfg.pyramid_inputs:
                    self.pyramid.append(PyramidInput(2**k, cfg.in_channels, ch[k - 1]))
                    cin += ch[k - 1]
                self.encoders.append(ConvBlock(cin, ch[k]))
            self.bottleneck = ConvBlock(ch[N_STAGES - 1], ch[N_STAGES])

            self.gates = nn.ModuleList()
            self.decoders = nn.ModuleList()
            self.heads = nn.ModuleList()
            # decoder stage j works at m / 2**(3 - j) with skip from encoder stage 3 - j
            for j in range(N_STAGES):
                skip_c, gate_c = ch[N_STAGES - 1 - j], ch[N_STAGES - j]
                if cfg.attention_gates:
                    self.gates.append(AttentionGate(skip_c, gate_c, max(skip_c // 2, 1)))
                self.decoders.append(ConvBlock(gate_c + skip_c, skip_c))
                if cfg.deep_supervision or j == N_STAGES - 1:
                    self.heads.append(nn.Conv2d(skip_c, 1, 1))
        self.reset_parameters(seed)

    def reset_parameters(self, seed=None):
        ctx = torch.random.fork_rng() if seed is not None else contextlib.nullcontext()
        with ctx:
            if seed is not None:
                torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                    if m.bias is not None:
                        nn.init.zeros_(m.bias)
                elif isinstance(m, nn.BatchNorm2d):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)

    def forward(self, x: Tensor) -> SegmentorOutput:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[-1] != cfg.input_size or x.shape[-2] != cfg.input_size:
            raise ValueError(
                f"expected input of shape (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {tuple(x.shape)}"
            )
        skips = []
        h = x
        for k, enc in enumerate(self.encoders):
            if k > 0:
                h = F.max_pool2d(h, 2)
                if cfg.pyramid_inputs:
                    h = torch.cat([h, self.pyramid[k - 1](x)], dim=1)
            h = enc(h)
            skips.append(h)
        d = self.bottleneck(F.max_pool2d(h, 2))

        logits = []
        for j, dec in enumerate(self.decoders):
            skip = skips[N_STAGES - 1 - j]
            if cfg.attention_gates:
                skip = self.gates[j](skip, d)
            up = F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
            d = dec(torch.cat([up, skip], dim=1))
            if cfg.deep_supervision:
                logits.append(self.heads[j](d))
        if not cfg.deep_supervision:
            final = torch.sigmoid(self.heads[0](d))
            sides = tuple(F.avg_pool2d(final, 2 ** (3 - i)) if i < 3 else final for i in range(4))
            return SegmentorOutput(final, sides)

        if cfg.progressive_side_outputs:
            acc = [logits[0]]
            for lg in logits[1:]:
                acc.append(lg + F.interpolate(acc[-1], scale_factor=2, mode="bilinear", align_corners=False))
            logits = acc
        sides = tuple(torch.sigmoid(lg) for lg in logits)
        return SegmentorOutput(sides[-1], sides)


def build_segmentor(cfg: SegmentorConfig, seed: int = 0) -> Segmentor:
    return Segmentor(cfg, seed=seed)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
