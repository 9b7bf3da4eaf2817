import math

import pytest
import torch

from vartok.core import ContractViolation, ReconstructionTrace, accumulate
from vartok.losses import (combined_loss, distinctness_loss,
                           mask_distinctness_loss, masked_rec_loss, vanilla_loss)
from oracles import loop_combined_loss, loop_vanilla_loss


def _trace_from_outputs(outputs, masks=None):
    trace = ReconstructionTrace(masked=masks is not None)
    for i, o in enumerate(outputs):
        accumulate(trace, o, mask=None if masks is None else masks[i])
    return trace


class TestVanillaLoss:
    def test_perfect_reconstructions(self):
        x = torch.rand(1, 3, 8, 8)
        trace = _trace_from_outputs([x, torch.zeros_like(x), torch.zeros_like(x)])
        assert float(vanilla_loss(trace, x).total) == 0.0

    def test_single_step_equals_mse(self):
        x = torch.rand(1, 3, 8, 8)
        o = torch.rand(1, 3, 8, 8)
        trace = _trace_from_outputs([o])
        lb = vanilla_loss(trace, x)
        assert float(lb.total) == pytest.approx(float(((x - o) ** 2).mean()))
        assert lb.n_max_used == 1

    def test_two_term_average(self):
        # hand-built 2x2 tensors with mse terms 0.4 and 0.2
        x = torch.zeros(1, 1, 2, 2)
        o1 = torch.full((1, 1, 2, 2), math.sqrt(0.4))  # mse(x, o1) = 0.4
        o2 = torch.full((1, 1, 2, 2), math.sqrt(0.2)) - o1  # cumulative ms 0.2
        trace = _trace_from_outputs([o1, o2])
        assert float(vanilla_loss(trace, x).total) == pytest.approx(0.3, rel=1e-6)

    def test_empty_trace(self):
        with pytest.raises(ContractViolation):
            vanilla_loss(ReconstructionTrace(), torch.zeros(1, 3, 8, 8))

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(11)
        x = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
        outs = [torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(4)]
        trace = _trace_from_outputs(outs)
        expected = loop_vanilla_loss([c.numpy() for c in trace.cumulative], x.numpy())
        assert float(vanilla_loss(trace, x).total) == pytest.approx(expected, rel=1e-9)


class TestDistinctness:
    def test_identical_inputs_give_one(self):
        t = torch.rand(1, 3, 4, 4)
        assert float(distinctness_loss(t, t.clone())) == 1.0

    def test_exp_minus_one(self):
        a = torch.zeros(4)
        b = torch.ones(4)
        assert float(distinctness_loss(a, b)) == pytest.approx(math.exp(-1.0), rel=1e-6)

    def test_limit_small(self):
        a = torch.zeros(4)
        b = torch.full((4,), 100.0)
        assert float(distinctness_loss(a, b)) < 1e-6

    def test_bounds_and_monotonicity(self):
        g = torch.Generator().manual_seed(2)
        prev = None
        for scale in [0.1, 0.5, 1.0, 2.0]:
            a = torch.zeros(8)
            b = torch.full((8,), scale)
            v = float(distinctness_loss(a, b))
            assert 0 < v <= 1
            if prev is not None:
                assert v < prev
            prev = v
        for _ in range(50):
            a = torch.randn(6, generator=g)
            b = torch.randn(6, generator=g)
            assert 0 < float(distinctness_loss(a, b)) <= 1


class TestMaskDistinctness:
    def test_identical(self):
        m = torch.rand(1, 1, 4, 4)
        assert float(mask_distinctness_loss(m, m.clone())) == 1.0

    def test_first_step_against_zero(self):
        m = torch.full((1, 1, 4, 4), 0.5)
        v = float(mask_distinctness_loss(m, torch.zeros_like(m)))
        assert v == pytest.approx(math.exp(-0.25), rel=1e-6)

    def test_constant_offsets(self):
        m = torch.full((1, 1, 4, 4), 0.9)
        prev = torch.full((1, 1, 4, 4), 0.1)
        assert float(mask_distinctness_loss(m, prev)) == pytest.approx(math.exp(-0.64), rel=1e-6)


class TestMaskedRecLoss:
    def test_zero_mask_annihilates(self):
        x = torch.rand(1, 3, 4, 4)
        r = torch.rand(1, 3, 4, 4)
        assert float(masked_rec_loss(torch.zeros(1, 1, 4, 4), x, r)) == 0.0

    def test_full_mask_is_plain_mse(self):
        x = torch.rand(2, 3, 4, 4)
        r = torch.rand(2, 3, 4, 4)
        got = float(masked_rec_loss(torch.ones(2, 1, 4, 4), x, r))
        assert got == float(((x - r) ** 2).mean())

    def test_half_mask(self):
        x = torch.full((1, 3, 4, 4), 0.2)
        r = torch.zeros(1, 3, 4, 4)
        mask = torch.zeros(1, 1, 4, 4)
        mask[..., :2] = 1.0  # left half
        assert float(masked_rec_loss(mask, x, r)) == pytest.approx(0.02, rel=1e-6)

    def test_rejects_multichannel_mask(self):
        with pytest.raises(ContractViolation):
            masked_rec_loss(torch.ones(1, 3, 4, 4), torch.zeros(1, 3, 4, 4),
                            torch.zeros(1, 3, 4, 4))


class TestCombinedLoss:
    def test_extremes(self):
        x = torch.rand(1, 3, 4, 4)
        m = torch.full((1, 1, 4, 4), 0.5)
        # each step reconstructs perfectly; every mask identical
        trace = ReconstructionTrace(masked=True)
        accumulate(trace, x, mask=m)
        accumulate(trace, torch.zeros_like(x), mask=m)
        # step 1: rec=0, dist=exp(-mean(0.5^2)); step 2: rec=0, dist=exp(-mse(m, m))=1
        lb = combined_loss(trace, x)
        expected = (math.exp(-0.25) + 1.0) / 2
        assert float(lb.total) == pytest.approx(expected, rel=1e-6)

    def test_scalar_composition(self):
        # per-step terms (0.1, 0.8) and (0.3, 0.6) average to 0.9
        assert ((0.1 + 0.8) + (0.3 + 0.6)) / 2 == pytest.approx(0.9)
        g = torch.Generator().manual_seed(13)
        x = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
        outs = [torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
        masks = [torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
        trace = _trace_from_outputs(outs, masks)
        lb = combined_loss(trace, x)
        total_from_parts = sum(rec + dist for _, rec, dist in lb.per_step) / lb.n_max_used
        assert float(lb.total) == pytest.approx(total_from_parts, rel=1e-9)

    def test_single_step_full_mask_perfect_recon(self):
        x = torch.rand(1, 3, 4, 4)
        trace = ReconstructionTrace(masked=True)
        accumulate(trace, x, mask=torch.ones(1, 1, 4, 4))
        lb = combined_loss(trace, x)
        assert float(lb.total) == pytest.approx(math.exp(-1.0), rel=1e-6)

    def test_requires_masks(self):
        x = torch.rand(1, 3, 4, 4)
        trace = _trace_from_outputs([x])
        with pytest.raises(ContractViolation):
            combined_loss(trace, x)

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(17)
        x = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
        outs = [torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
        masks = [torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
        trace = _trace_from_outputs(outs, masks)
        expected = loop_combined_loss([m.numpy() for m in masks],
                                      [c.numpy() for c in trace.cumulative_masks],
                                      [c.numpy() for c in trace.cumulative],
                                      x.numpy())
        assert float(combined_loss(trace, x).total) == pytest.approx(expected, rel=1e-9)

    def test_lambda_weighting(self):
        g = torch.Generator().manual_seed(19)
        x = torch.rand(1, 3, 4, 4, generator=g)
        outs = [torch.randn(1, 3, 4, 4, generator=g) for _ in range(2)]
        masks = [torch.rand(1, 1, 4, 4, generator=g) for _ in range(2)]
        trace = _trace_from_outputs(outs, masks)
        lb0 = combined_loss(trace, x, lambda_mask=0.0)
        lb1 = combined_loss(trace, x, lambda_mask=1.0)
        rec_only = sum(rec for _, rec, _ in lb1.per_step) / lb1.n_max_used
        assert float(lb0.total) == pytest.approx(rec_only, rel=1e-6)


class TestFiniteDifferenceGradients:
    """Analytic gradients of the loss surfaces vs central differences."""

    @staticmethod
    def _check(fn, tensors, rel_tol, eps):
        inputs = [t.clone().requires_grad_(True) for t in tensors]
        loss = fn(*inputs)
        loss.backward()
        g = torch.Generator().manual_seed(23)
        for t in inputs:
            flat = t.detach().reshape(-1)
            grad = t.grad.reshape(-1)
            for idx in torch.randint(flat.numel(), (10,), generator=g):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(fn(*[u.detach() for u in inputs]))
                flat[idx] = orig - eps
                down = float(fn(*[u.detach() for u in inputs]))
                flat[idx] = orig
                fd = (up - down) / (2 * eps)
                an = float(grad[idx])
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < rel_tol, (fd, an)

    def test_vanilla_loss_gradient(self):
        g = torch.Generator().manual_seed(29)
        x = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)

        def fn(o1, o2):
            trace = _trace_from_outputs([o1, o2])
            return vanilla_loss(trace, x).total

        outs = [torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
        self._check(fn, outs, rel_tol=1e-5, eps=1e-6)

    def test_combined_loss_gradient(self):
        g = torch.Generator().manual_seed(31)
        x = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)

        def fn(o1, o2, m1, m2):
            trace = _trace_from_outputs([o1, o2], [m1, m2])
            return combined_loss(trace, x).total

        tensors = [torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
        tensors += [torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) for _ in range(2)]
        self._check(fn, tensors, rel_tol=1e-5, eps=1e-6)
