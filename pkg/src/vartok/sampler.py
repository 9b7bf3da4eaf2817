"""Token-count curriculum: folded-normal draws with a linearly rising mean.

Early in training the sampled token counts are small; by the end the mean
has moved to its final value. Draws are |Normal(mu_t, sigma)| rounded half
up and clamped into [n_min, n_cap].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ContractViolation


@dataclass
class SamplerState:
    step: int
    total_steps: int
    mu_start: float
    mu_end: float
    sigma: float
    n_min: int
    n_cap: int
    generator: torch.Generator

    def __post_init__(self) -> None:
        if self.n_min > self.n_cap:
            raise ContractViolation("n_min must not exceed n_cap")
        if self.mu_start > self.mu_end:
            raise ContractViolation("mu_start must not exceed mu_end")
        if self.sigma < 0:
            raise ContractViolation("sigma must be nonnegative")

    @property
    def mu(self) -> float:
        """Linear schedule from mu_start (step 0) to mu_end (final step)."""
        if self.total_steps <= 0:
            return self.mu_start
        frac = min(max(self.step / self.total_steps, 0.0), 1.0)
        return self.mu_start + (self.mu_end - self.mu_start) * frac


def sample_token_count(state: SamplerState) -> int:
    """One curriculum draw; advances the rng stream, not the step counter."""
    g = torch.randn(1, generator=state.generator, dtype=torch.float64).item()
    g = g * state.sigma + state.mu
    k = int(math.floor(abs(g) + 0.5))  # round half up, symmetric for |g|
    return min(max(k, state.n_min), state.n_cap)
