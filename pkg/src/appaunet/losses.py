"""Segmentation and adversarial training objectives.

Every loss takes probability maps (not logits) and returns a scalar tensor.
Maps may be shaped ``(N, H, W)`` or ``(N, 1, H, W)``; pixel sums run over the
whole minibatch. Gradients come from autograd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import torch
from torch import Tensor

from .data import downsample_mask

# clamp applied before any log in the cross-entropy and adversarial terms
PROB_CLAMP = 1e-7

LOSS_NAMES = ("XE", "DICE", "TV", "XETV", "KLTV")


@dataclass(frozen=True)
class LossConfig:
    a: float = 1.0          # KL (or XE) weight
    b: float = 1.0          # Tversky weight
    c: float = 0.1          # adversarial weight
    alpha: float = 0.3      # false-positive weight
    beta: float = 0.7       # false-negative weight
    epsilon: float = 1e-6
    kappa: float = 1e-4     # KL clamp: maps are clipped to [kappa, 1 - kappa]
    side_weights: tuple = (0.125, 0.25, 0.5, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "side_weights", tuple(float(w) for w in self.side_weights))
        for name in ("a", "b", "c", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 < self.epsilon < 1e-2:
            raise ValueError(f"epsilon must be small and positive, got {self.epsilon}")
        if not 0 < self.kappa < 0.5:
            raise ValueError(f"kappa must lie in (0, 0.5), got {self.kappa}")
        w = self.side_weights
        if len(w) != 4 or any(x < 0 for x in w):
            raise ValueError(f"side_weights must be 4 nonnegative values, got {w}")


DEFAULT_CONFIG = LossConfig()


def _check_pair(y: Tensor, yhat: Tensor) -> None:
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: target {tuple(y.shape)} vs prediction {tuple(yhat.shape)}")
    if not (torch.isfinite(y).all() and torch.isfinite(yhat).all()):
        raise ValueError("non-finite values in loss input")


def tversky_loss(y: Tensor, yhat: Tensor, cfg: LossConfig = DEFAULT_CONFIG) -> Tensor:
    _check_pair(y, yhat)
    tp = (y * yhat).sum()
    fp = ((1 - y) * yhat).sum()
    fn = (y * (1 - yhat)).sum()
    eps = cfg.epsilon
    return 1 - (tp + eps) / (tp + cfg.alpha * fp + cfg.beta * fn + eps)


def abs_kl_loss(y: Tensor, yhat: Tensor, cfg: LossConfig = DEFAULT_CONFIG) -> Tensor:
    """Pixel sum of ``|(y - yhat) * log(y / yhat)|`` on maps clamped to [kappa, 1-kappa].

    The clamp is what keeps binary ground truth finite.
    """
    _check_pair(y, yhat)
    k = cfg.kappa
    yc = y.clamp(k, 1 - k)
    pc = yhat.clamp(k, 1 - k)
    return ((yc - pc) * (torch.log(yc) - torch.log(pc))).abs().sum()


def kltv_loss(y: Tensor, yhat: Tensor, cfg: LossConfig = DEFAULT_CONFIG) -> Tensor:
    return cfg.a * abs_kl_loss(y, yhat, cfg) + cfg.b * tversky_loss(y, yhat, cfg)


def xe_loss(y: Tensor, yhat: Tensor, cfg: LossConfig = DEFAULT_CONFIG) -> Tensor:
    _check_pair(y, yhat)
    p = yhat.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def dice_loss(y: Tensor, yhat: Tensor, eps: Union[float, LossConfig] = 1e-6) -> Tensor:
    # smoothing enters as 2*eps so that Tversky with alpha = beta = 0.5 coincides exactly
    if isinstance(eps, LossConfig):
        eps = eps.epsilon
    _check_pair(y, yhat)
    inter = (y * yhat).sum()
    return 1 - (2 * inter + 2 * eps) / (y.sum() + yhat.sum() + 2 * eps)


def xetv_loss(y: Tensor, yhat: Tensor, cfg: LossConfig = DEFAULT_CONFIG) -> Tensor:
    return cfg.a * xe_loss(y, yhat, cfg) + cfg.b * tversky_loss(y, yhat, cfg)


LossFn = Callable[[Tensor, Tensor, LossConfig], Tensor]

_LOSSES: dict[str, LossFn] = {
    "XE": xe_loss,
    "DICE": dice_loss,
    "TV": tversky_loss,
    "XETV": xetv_loss,
    "KLTV": kltv_loss,
}


def get_loss(name: str) -> LossFn:
    try:
        return _LOSSES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}") from None


def side_output_loss(
    y: Tensor,
    sides: Sequence[Tensor],
    cfg: LossConfig = DEFAULT_CONFIG,
    base_loss: Union[str, LossFn] = "KLTV",
) -> Tensor:
    """Weighted sum of per-scale losses over the four side outputs.

    ``sides`` runs low to high resolution (m/8, m/4, m/2, m); the full
    resolution target ``y`` is reduced to each scale with
    :func:`appaunet.data.downsample_mask`.
    """
    fn = get_loss(base_loss) if isinstance(base_loss, str) else base_loss
    if len(sides) != 4:
        raise ValueError(f"expected 4 side outputs, got {len(sides)}")
    m = y.shape[-1]
    total = y.new_zeros(())
    for i, (w, side) in enumerate(zip(cfg.side_weights, sides)):
        res = m // 2 ** (3 - i)
        if side.shape[-1] != res or side.shape[-2] != res or m % 8:
            raise ValueError(
                f"side output {i} has resolution {tuple(side.shape[-2:])}, expected {res}x{res}"
            )
        target = y if res == m else downsample_mask(y, m // res)
        total = total + w * fn(target, side, cfg)
    return total


def segmentor_adv_loss(p_fake: Tensor) -> Tensor:
    """Mean of ``-log(1 - p)`` where p is the probability of the "predicted" class."""
    p = p_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -torch.log1p(-p).mean()


def discriminator_sup_loss(probs: Tensor, labels: Tensor) -> Tensor:
    """Negative log-likelihood of the true real class.

    ``probs`` has n+1 columns, the last being the "predicted segmentation"
    class, which is not a valid label.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device)
    n_real = probs.shape[1] - 1
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_real):
        raise ValueError(f"labels must index real classes 0..{n_real - 1}")
    p = probs.gather(1, labels[:, None]).squeeze(1).clamp(PROB_CLAMP, 1.0)
    return -torch.log(p).mean()


def discriminator_unsup_loss(p_fake_on_real: Tensor, p_fake_on_pred: Tensor) -> Tensor:
    real = p_fake_on_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    pred = p_fake_on_pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -torch.log1p(-real).mean() - torch.log(pred).mean()
