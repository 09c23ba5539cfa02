"""Autograd wrappers around the hand-derived loss gradients.

The numpy loss cores return both the value and the gradient with respect
to the prediction (or posterior parameters). These Functions feed that
gradient straight into backpropagation, so training uses exactly the
formulas that the finite-difference suite verifies.
"""

from __future__ import annotations

import torch

from .losses import kl_std_normal_array, masked_dice_array, vw_dice_array


class _VwDice(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p, target, weights, eps):
        loss, grad = vw_dice_array(
            p.detach().cpu().numpy(),
            target.detach().cpu().numpy(),
            weights.detach().cpu().numpy(),
            eps,
        )
        ctx.save_for_backward(torch.from_numpy(grad).to(p.dtype))
        return p.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None, None


class _MaskedDice(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p, target, mask, eps):
        loss, grad = masked_dice_array(
            p.detach().cpu().numpy(),
            target.detach().cpu().numpy(),
            mask.detach().cpu().numpy(),
            eps,
        )
        ctx.save_for_backward(torch.from_numpy(grad).to(p.dtype))
        return p.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None, None


class _KlStdNormal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, sigma):
        kl, grad_mu, grad_sigma = kl_std_normal_array(
            mu.detach().cpu().numpy(), sigma.detach().cpu().numpy()
        )
        ctx.save_for_backward(
            torch.from_numpy(grad_mu).to(mu.dtype),
            torch.from_numpy(grad_sigma).to(sigma.dtype),
        )
        return mu.new_tensor(kl)

    @staticmethod
    def backward(ctx, grad_output):
        grad_mu, grad_sigma = ctx.saved_tensors
        return grad_output * grad_mu, grad_output * grad_sigma


def vw_dice(p: torch.Tensor, target: torch.Tensor, weights: torch.Tensor, eps: float):
    """Weighted Dice complement against ``target`` (= remainder + segment)."""
    return _VwDice.apply(p, target, weights, eps)


def masked_dice(p: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, eps: float):
    """Dice complement of the mask-restricted prediction against the
    removed segment."""
    return _MaskedDice.apply(p, target, mask, eps)


def kl_std_normal(mu: torch.Tensor, sigma: torch.Tensor):
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over latent dimensions."""
    return _KlStdNormal.apply(mu, sigma)
