"""The two autoregressive engines producing reconstruction traces.

Each step encodes the current residual (vanilla) or the precursor's
mask-conditioned transform of it (masked), decodes one token, and adds the
decoder output to the running reconstruction. Steps share one computation
graph; set detach_steps to cut gradients between steps for ablations.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .codec import condition
from .core import ContractViolation, ReconstructionTrace, accumulate, mse


def run_vanilla(codec, x: Tensor, n_tokens: int, detach_steps: bool = False) -> ReconstructionTrace:
    """Residual-encoding loop; n_tokens=1 degenerates to a plain autoencoder pass."""
    if n_tokens < 1:
        raise ContractViolation("n_tokens must be >= 1")
    trace = ReconstructionTrace(masked=False)
    xhat = torch.zeros_like(x)
    for _ in range(n_tokens):
        if detach_steps:
            xhat = xhat.detach()
        z = codec.encode(x - xhat)
        out = codec.decode(z)
        accumulate(trace, out, token=z)
        xhat = trace.cumulative[-1]
    return trace


def run_masked(codec, x: Tensor, n_tokens: int, detach_steps: bool = False) -> ReconstructionTrace:
    """Mask-guided loop: precursor picks a region, encoder sees the conditioned input."""
    if n_tokens < 1:
        raise ContractViolation("n_tokens must be >= 1")
    if not codec.mask_enabled:
        raise ContractViolation("masked loop requires a mask-enabled codec")
    trace = ReconstructionTrace(masked=True)
    xhat = torch.zeros_like(x)
    state = codec.zero_memory(x)
    for _ in range(n_tokens):
        if detach_steps:
            xhat = xhat.detach()
            state = type(state)(hidden=state.hidden.detach(), cell=state.cell.detach())
        transformed, mask, state = codec.precursor(x - xhat, state)
        z = codec.encode(condition(transformed, mask))
        out = codec.decode(z)
        accumulate(trace, out, token=z, mask=mask, transformed=transformed)
        xhat = trace.cumulative[-1]
    return trace


def run(codec, x: Tensor, n_tokens: int, detach_steps: bool = False) -> ReconstructionTrace:
    """Dispatch on the codec's variant."""
    if codec.mask_enabled:
        return run_masked(codec, x, n_tokens, detach_steps)
    return run_vanilla(codec, x, n_tokens, detach_steps)


def run_to_threshold(codec, x: Tensor, tau: float, n_cap: int) -> tuple[int | None, ReconstructionTrace]:
    """Smallest n with MSE(x, reconstruction_n) <= tau, or None within n_cap.

    The full n_cap trace is returned either way (prefix consistency makes
    the early steps identical to a shorter run).
    """
    if tau < 0:
        raise ContractViolation("tau must be nonnegative")
    if n_cap < 1:
        raise ContractViolation("n_cap must be >= 1")
    with torch.no_grad():
        trace = run(codec, x, n_cap)
        for n in range(1, n_cap + 1):
            if float(mse(x, trace.cumulative[n - 1])) <= tau:
                return n, trace
    return None, trace
