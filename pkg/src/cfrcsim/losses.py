"""Training losses.

The stress stage couples a pixelwise MSE with an equilibrium residual: the
divergence of the predicted plane-stress field, evaluated in physical units
with finite differences (central in the interior, one-sided at the edges,
unit pixel spacing), should vanish. The damage stage uses binary
cross-entropy; the scalar stages use plain MSE on the increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

BCE_CLAMP = 1e-7


@dataclass
class LossValue:
    """Total loss plus named parts, all scalar tensors on the graph."""

    total: torch.Tensor
    parts: dict[str, torch.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def part(self, name: str) -> float:
        return float(self.parts[name].detach()) if name in self.parts else 0.0


def mse_stress(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels of all stress components."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def _ddx(a: torch.Tensor) -> torch.Tensor:
    # d/dx along columns (last axis), unit spacing
    out = torch.empty_like(a)
    out[..., :, 1:-1] = (a[..., :, 2:] - a[..., :, :-2]) / 2.0
    out[..., :, 0] = a[..., :, 1] - a[..., :, 0]
    out[..., :, -1] = a[..., :, -1] - a[..., :, -2]
    return out


def _ddy(a: torch.Tensor) -> torch.Tensor:
    # d/dy along rows (second-to-last axis), unit spacing
    out = torch.empty_like(a)
    out[..., 1:-1, :] = (a[..., 2:, :] - a[..., :-2, :]) / 2.0
    out[..., 0, :] = a[..., 1, :] - a[..., 0, :]
    out[..., -1, :] = a[..., -1, :] - a[..., -2, :]
    return out


def divergence_components(stress: torch.Tensor
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Plane-stress equilibrium residuals of a (..., 3, H, W) field ordered
    (s11, s22, s12): returns (ds11/dx + ds12/dy, ds12/dx + ds22/dy)."""
    if stress.shape[-3] != 3:
        raise ValueError(f"expected 3 stress channels, got {stress.shape[-3]}")
    s11 = stress[..., 0, :, :]
    s22 = stress[..., 1, :, :]
    s12 = stress[..., 2, :, :]
    return _ddx(s11) + _ddy(s12), _ddx(s12) + _ddy(s22)


def physics_residual(stress: torch.Tensor) -> torch.Tensor:
    """Mean squared equilibrium violation of a physical-unit stress field."""
    r1, r2 = divergence_components(stress)
    return torch.mean(r1 ** 2 + r2 ** 2)


def hybrid_total(mse: torch.Tensor, physics: torch.Tensor,
                 physics_scale: float = 1.0) -> torch.Tensor:
    """Equal-weight blend of the data term and the scaled physics term."""
    return 0.5 * mse + 0.5 * physics_scale * physics


def hybrid_stress_loss(pred_norm: torch.Tensor, target_norm: torch.Tensor,
                       channel_std: torch.Tensor, channel_mean: torch.Tensor,
                       physics_scale: float) -> LossValue:
    """Stress-stage loss on normalized tensors.

    The MSE part compares normalized fields; the physics part is evaluated
    after undoing the normalization so the residual lives in stress units.
    ``channel_std`` / ``channel_mean`` have shape (3,) ordered like the
    channel axis.
    """
    mse = mse_stress(pred_norm, target_norm)
    std = channel_std.view(1, 3, 1, 1).to(pred_norm)
    mean = channel_mean.view(1, 3, 1, 1).to(pred_norm)
    physics = physics_residual(pred_norm * std + mean)
    total = hybrid_total(mse, physics, physics_scale)
    return LossValue(total=total, parts={"mse": mse, "physics": physics})


def bce_damage(pred: torch.Tensor, target: torch.Tensor,
               clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Binary cross-entropy with probability clamping for stability."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    p = torch.clamp(pred, clamp, 1.0 - clamp)
    return torch.mean(-(target * torch.log(p)
                        + (1.0 - target) * torch.log(1.0 - p)))


def mse_increments(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the two scalar outputs of the curve stages."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    if pred.shape[-1] != 2:
        raise ValueError(f"expected 2 output features, got {pred.shape[-1]}")
    return torch.mean((pred - target) ** 2)
