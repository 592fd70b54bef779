"""(n+1)-class discriminator over image/mask pairs.

Classes ``0..n-1`` are the real disease classes; the last logit is the
"predicted segmentation" class. With no disease labels ``n`` is 1 and the
network reduces to an ordinary real/fake discriminator.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_real_classes: int = 2
    input_size: int = 128
    base_channels: int = 32
    n_blocks: int = 5
    dropout_rate: float = 0.4

    def __post_init__(self):
        if self.n_real_classes < 1:
            raise ValueError("n_real_classes must be at least 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.input_size % 2**self.n_blocks:
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.n_blocks}")


class DiscriminatorOutput:
    def __init__(self, logits: Tensor):
        self.logits = logits

    @property
    def probs(self) -> Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def n_real_classes(self) -> int:
        return self.logits.shape[-1] - 1


def prob_predicted(out: DiscriminatorOutput) -> Tensor:
    """p(z = n+1 | pair) for each sample."""
    return torch.softmax(out.logits, dim=-1)[..., -1]


def prob_real_class(out: DiscriminatorOutput, i: int) -> Tensor:
    """p(z = i | pair) for real class ``i`` (0-based)."""
    if not 0 <= i < out.n_real_classes:
        raise ValueError(f"class {i} is not a real class (0..{out.n_real_classes - 1})")
    return torch.softmax(out.logits, dim=-1)[..., i]


def predict_class(out: DiscriminatorOutput) -> Tensor:
    """Most likely real class, ignoring the predicted-segmentation logit."""
    return out.logits[..., :-1].argmax(dim=-1)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), seed=None):
        super().__init__()
        # default layer construction draws from the global RNG; keep a seeded build off it
        with torch.random.fork_rng() if seed is not None else contextlib.nullcontext():
            self.cfg = cfg
            layers = []
            cin = 2
            for k in range(cfg.n_blocks):
                cout = cfg.base_channels * 2**k
                layers += [
                    nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(cout),
                    nn.LeakyReLU(0.2, inplace=True),
                ]
                cin = cout
            self.features = nn.Sequential(*layers)
            self.dropout = nn.Dropout(cfg.dropout_rate)
            self.head = nn.Linear(cin, cfg.n_real_classes + 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed=None):
        ctx = torch.random.fork_rng() if seed is not None else contextlib.nullcontext()
        with ctx:
            if seed is not None:
                torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
                    if m.bias is not None:
                        nn.init.zeros_(m.bias)
                elif isinstance(m, nn.BatchNorm2d):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)

    def forward(self, x: Tensor, mask: Tensor) -> DiscriminatorOutput:
        m = self.cfg.input_size
        if x.shape != mask.shape or x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (m, m):
            raise ValueError(
                f"image {tuple(x.shape)} and mask {tuple(mask.shape)} must both be (B, 1, {m}, {m})"
            )
        h = self.features(torch.cat([x, mask], dim=1))
        h = self.dropout(h).mean(dim=(2, 3))
        return DiscriminatorOutput(self.head(h))
