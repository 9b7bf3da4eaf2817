"""Shared tensor contracts and the reconstruction-trace container.

Everything downstream (losses, the autoregressive loop, metrics) builds on
the two primitives here: a strict mean-squared-error and an append-only
trace that accumulates per-step decoder outputs into cumulative
reconstructions (and, for the masked variant, per-step masks into a
cumulative mask).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

DOWNSAMPLE_FACTOR = 8  # spatial stride of the default codec
COMPRESSION_RATIO = 64  # image elements per token element under defaults


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, variant)."""


class NumericError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def validate_image_batch(x: Tensor, stride: int = DOWNSAMPLE_FACTOR) -> Tensor:
    """Validate an image batch: rank 4, values in [0,1], divisible spatial dims."""
    if x.dim() != 4:
        raise ContractViolation(f"image batch must be rank 4 (B,C,H,W), got rank {x.dim()}")
    b, _, h, w = x.shape
    if b < 1:
        raise ContractViolation("image batch must contain at least one image")
    if h % stride or w % stride:
        raise ContractViolation(f"spatial dims ({h},{w}) must be divisible by {stride}")
    _check_finite(x, "image batch")
    if x.min() < 0 or x.max() > 1:
        raise ContractViolation("image values must lie in [0,1]")
    return x


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements.

    Equals the per-image mean averaged over the batch, so the value is
    batch-size invariant for equally shaped inputs.
    """
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_finite(a, "mse input a")
    _check_finite(b, "mse input b")
    return ((a - b) ** 2).mean()


@dataclass
class ReconstructionTrace:
    """Ordered per-step record of one autoregressive run.

    ``cumulative[n-1]`` is the exact left-to-right running sum of
    ``outputs[:n]`` (and likewise ``cumulative_masks`` for ``masks``), so
    additivity can be asserted bitwise.
    """

    masked: bool = False
    tokens: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)
    cumulative: list[Tensor] = field(default_factory=list)
    transformed: list[Tensor] = field(default_factory=list)
    masks: list[Tensor] = field(default_factory=list)
    cumulative_masks: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outputs)

    @property
    def n_steps(self) -> int:
        return len(self.outputs)

    def reconstruction(self, n: int) -> Tensor:
        """Cumulative reconstruction after n steps; n=0 gives zeros."""
        if n == 0:
            return torch.zeros_like(self.outputs[0])
        return self.cumulative[n - 1]

    def cumulative_mask(self, n: int) -> Tensor:
        if not self.masked:
            raise ContractViolation("trace has no masks")
        if n == 0:
            return torch.zeros_like(self.masks[0])
        return self.cumulative_masks[n - 1]


def accumulate(
    trace: ReconstructionTrace,
    decoder_output: Tensor,
    token: Tensor | None = None,
    mask: Tensor | None = None,
    transformed: Tensor | None = None,
) -> ReconstructionTrace:
    """Append one step to a trace, updating the running sums in step order."""
    if trace.outputs and decoder_output.shape != trace.outputs[0].shape:
        raise ContractViolation("decoder output shape differs from earlier steps")
    if mask is not None and not trace.masked and trace.outputs:
        raise ContractViolation("mask supplied for a vanilla trace")
    if mask is None and trace.masked:
        raise ContractViolation("masked trace requires a mask every step")

    if mask is not None:
        trace.masked = True

    trace.outputs.append(decoder_output)
    if trace.cumulative:
        trace.cumulative.append(trace.cumulative[-1] + decoder_output)
    else:
        trace.cumulative.append(decoder_output)

    if token is not None:
        trace.tokens.append(token)
    if transformed is not None:
        trace.transformed.append(transformed)
    if mask is not None:
        trace.masks.append(mask)
        if trace.cumulative_masks:
            trace.cumulative_masks.append(trace.cumulative_masks[-1] + mask)
        else:
            trace.cumulative_masks.append(mask)
    return trace
