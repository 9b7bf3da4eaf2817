"""Training objectives for both codec variants.

The vanilla objective averages plain MSE over every intermediate
reconstruction. The masked objective averages a mask-weighted
reconstruction term plus an exponential distinctness term that pushes each
step's mask away from the accumulated previous ones. A reconstruction-level
distinctness term is kept behind a flag for ablations; it is not part of
the default masked objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .core import ContractViolation, ReconstructionTrace, mse


@dataclass
class LossBreakdown:
    """Scalar objective plus its per-step terms.

    per_step holds (n, rec_term, mask_term) with mask_term None for the
    vanilla objective. total keeps the autograd graph; the per-step entries
    are detached floats for logging.
    """

    total: Tensor
    per_step: list[tuple[int, float, float | None]]
    n_max_used: int


def vanilla_loss(trace: ReconstructionTrace, target: Tensor) -> LossBreakdown:
    """(1/n_max) * sum_n MSE(target, cumulative reconstruction at n)."""
    if len(trace) == 0:
        raise ContractViolation("trace has no steps")
    terms = [mse(target, xhat) for xhat in trace.cumulative]
    total = torch.stack(terms).mean()
    per_step = [(n + 1, float(t.detach()), None) for n, t in enumerate(terms)]
    return LossBreakdown(total=total, per_step=per_step, n_max_used=len(terms))


def distinctness_loss(current: Tensor, cumulative_previous: Tensor) -> Tensor:
    """exp(-MSE(current, previous sum)); in (0,1], equals 1 iff inputs match."""
    return torch.exp(-mse(current, cumulative_previous))


def mask_distinctness_loss(mask_n: Tensor, cumulative_mask_prev: Tensor) -> Tensor:
    """Distinctness applied to the step mask against the cumulative mask.

    The cumulative mask is an unnormalized running sum and may exceed 1;
    the comparison is deliberately asymmetric.
    """
    return distinctness_loss(mask_n, cumulative_mask_prev)


def masked_rec_loss(mask_n: Tensor, target: Tensor, recon_n: Tensor) -> Tensor:
    """Mask-weighted squared error, averaged over all image elements.

    The single-channel mask multiplies every channel identically; the
    normalizer stays the full C*H*W element count per image regardless of
    mask coverage.
    """
    if target.shape != recon_n.shape:
        raise ContractViolation(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon_n.shape)}")
    if mask_n.dim() != target.dim() or mask_n.shape[1] != 1:
        raise ContractViolation("mask must be single-channel and broadcastable over channels")
    return ((mask_n * (target - recon_n)) ** 2).mean()


def combined_loss(
    trace: ReconstructionTrace,
    target: Tensor,
    lambda_mask: float = 1.0,
    recon_distinctness: bool = False,
) -> LossBreakdown:
    """Masked objective: mean over steps of rec term + lambda * mask term.

    lambda_mask=1.0 reproduces the unweighted sum; recon_distinctness adds
    the ablation-only term on decoder outputs.
    """
    if len(trace) == 0:
        raise ContractViolation("trace has no steps")
    if not trace.masked:
        raise ContractViolation("combined_loss requires a masked trace")

    step_totals = []
    per_step: list[tuple[int, float, float | None]] = []
    for i in range(len(trace)):
        n = i + 1
        rec = masked_rec_loss(trace.masks[i], target, trace.cumulative[i])
        dist = mask_distinctness_loss(trace.masks[i], trace.cumulative_mask(n - 1))
        term = rec + lambda_mask * dist
        if recon_distinctness:
            term = term + distinctness_loss(trace.outputs[i], trace.reconstruction(n - 1))
        step_totals.append(term)
        per_step.append((n, float(rec.detach()), float(dist.detach())))
    total = torch.stack(step_totals).mean()
    return LossBreakdown(total=total, per_step=per_step, n_max_used=len(trace))
