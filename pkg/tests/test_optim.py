import math

import pytest
import torch

from lightlm.errors import ConfigError, NumericError
from lightlm.optim import Lamb
from lightlm.schedule import (
    ScheduleConsistencyWarning,
    TrainingSchedule,
    load_schedule,
    lr_at,
    save_schedule,
    schedule_from_text,
    schedule_to_text,
)


def reference_adamw_steps(w0, grads, lr, betas, eps, weight_decay):
    """Independent bias-corrected Adam with decoupled weight decay (float64)."""
    b1, b2 = betas
    w = w0.clone()
    m = torch.zeros_like(w)
    v = torch.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = w - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w)
    return w


class TestLamb:
    def test_scalar_worked_example(self):
        # w=1.0, g=0.1, b1=.9, b2=.999, eps=1e-6, wd=0, lr=0.1:
        # m_hat=0.1, v_hat=0.01, u=0.99999..., r=1/u, so w' = 1 - 0.1 = 0.9
        w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = Lamb([w], lr=0.1, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.0)
        w.grad = torch.tensor([0.1], dtype=torch.float64)
        opt.step()
        assert abs(w.item() - 0.9) < 1e-5
        assert opt.state[w]["step"] == 1

    def test_zero_gradient_leaves_params_untouched(self):
        w = torch.nn.Parameter(torch.arange(4.0, dtype=torch.float64))
        opt = Lamb([w], lr=0.5, weight_decay=0.0)
        w.grad = torch.zeros_like(w)
        opt.step()
        assert torch.equal(w.detach(), torch.arange(4.0, dtype=torch.float64))
        assert opt.state[w]["step"] == 1

    def test_trust_ratio_one_reduces_to_reference_adamw(self):
        g = torch.Generator().manual_seed(2)
        w0 = torch.randn(5, 3, generator=g, dtype=torch.float64)
        grads = [torch.randn(5, 3, generator=g, dtype=torch.float64) for _ in range(7)]
        for wd in (0.0, 0.01):
            w = torch.nn.Parameter(w0.clone())
            opt = Lamb([w], lr=3e-3, betas=(0.9, 0.999), eps=1e-6,
                       weight_decay=wd, use_trust_ratio=False)
            for grad in grads:
                w.grad = grad.clone()
                opt.step()
            expected = reference_adamw_steps(w0, grads, 3e-3, (0.9, 0.999), 1e-6, wd)
            assert (w.detach() - expected).abs().max().item() < 1e-12

    def test_relative_update_is_scale_invariant(self):
        g = torch.Generator().manual_seed(5)
        w0 = torch.randn(6, 4, generator=g, dtype=torch.float64)
        grad = torch.randn(6, 4, generator=g, dtype=torch.float64)
        rel = {}
        for scale in (1.0, 100.0):
            w = torch.nn.Parameter(w0 * scale)
            opt = Lamb([w], lr=0.01, weight_decay=0.0)
            w.grad = grad * scale
            before = w.detach().clone()
            opt.step()
            rel[scale] = (
                torch.linalg.vector_norm(w.detach() - before)
                / torch.linalg.vector_norm(before)
            ).item()
        # ||dw||/||w|| equals lr exactly whenever the trust ratio engages
        assert abs(rel[1.0] - 0.01) < 1e-12
        assert abs(rel[1.0] - rel[100.0]) < 1e-12

    def test_trust_ratio_is_per_tensor(self):
        a = torch.nn.Parameter(torch.tensor([10.0], dtype=torch.float64))
        b = torch.nn.Parameter(torch.tensor([0.1], dtype=torch.float64))
        opt = Lamb([a, b], lr=0.01, weight_decay=0.0)
        a.grad = torch.tensor([1.0], dtype=torch.float64)
        b.grad = torch.tensor([1.0], dtype=torch.float64)
        opt.step()
        # both move by lr * ||w|| in magnitude: 0.1 and 0.001
        assert abs(abs(a.item() - 10.0) - 0.1) < 1e-9
        assert abs(abs(b.item() - 0.1) - 0.001) < 1e-9

    def test_non_finite_gradient_rejected_before_mutation(self):
        a = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
        b = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
        opt = Lamb([a, b], lr=0.1)
        a.grad = torch.tensor([0.1, 0.1], dtype=torch.float64)
        b.grad = torch.tensor([float("nan")], dtype=torch.float64)
        with pytest.raises(NumericError):
            opt.step()
        assert torch.equal(a.detach(), torch.tensor([1.0, 2.0], dtype=torch.float64))
        assert torch.equal(b.detach(), torch.tensor([3.0], dtype=torch.float64))


SCHED = TrainingSchedule(
    peak_lr=6.25e-4, batch_size=512, warmup_ratio=12500 / 1450000,
    warmup_steps=12500, total_steps=1450000,
)


class TestLrAt:
    def test_zero_at_start(self):
        assert lr_at(0, SCHED) == 0.0

    def test_peak_exactly_at_warmup(self):
        assert lr_at(12500, SCHED) == 6.25e-4

    def test_zero_at_end(self):
        assert lr_at(SCHED.total_steps, SCHED) == 0.0

    def test_piecewise_linear_and_continuous(self):
        for step in range(61234, SCHED.total_steps - 1, 61234):
            lo, hi = step - 1, step + 1
            if SCHED.warmup_steps in (lo, step, hi):
                continue
            mid = (lr_at(lo, SCHED) + lr_at(hi, SCHED)) / 2
            assert math.isclose(lr_at(step, SCHED), mid, rel_tol=1e-9, abs_tol=1e-15)
        peak = max(lr_at(s, SCHED) for s in range(0, SCHED.total_steps, 500))
        assert peak <= SCHED.peak_lr
        assert lr_at(SCHED.warmup_steps, SCHED) == SCHED.peak_lr

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, SCHED)
        with pytest.raises(ValueError):
            lr_at(SCHED.total_steps + 1, SCHED)

    def test_preset_peaks(self):
        from lightlm.presets import SCHEDULE_PRESETS, schedule_preset

        expected = {
            "albeto-tiny": (1.25e-3, 125000, 8300000),
            "albeto-base": (8.83e-4, 53333, 3650000),
            "albeto-large": (6.25e-4, 12500, 1450000),
            "albeto-xlarge": (3.12e-4, 6250, 2775000),
            "albeto-xxlarge": (3.12e-4, 3125, 1650000),
        }
        assert set(expected) == set(SCHEDULE_PRESETS)
        for name, (peak, warmup, total) in expected.items():
            with pytest.warns(ScheduleConsistencyWarning):
                sched = schedule_preset(name)
            assert sched.warmup_steps == warmup and sched.total_steps == total
            assert lr_at(warmup, sched) == peak
            assert lr_at(total, sched) == 0.0

    def test_albeto_tiny_examples(self):
        import warnings

        from lightlm.presets import schedule_preset

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ScheduleConsistencyWarning)
            sched = schedule_preset("albeto-tiny")
        assert lr_at(125000, sched) == 1.25e-3
        assert lr_at(8300000, sched) == 0.0


class TestScheduleIO:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "sched.cfg"
        save_schedule(SCHED, path)
        assert load_schedule(path) == SCHED

    def test_text_round_trip_preserves_preset_values(self):
        import warnings

        from lightlm.presets import SCHEDULE_PRESETS, schedule_preset

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ScheduleConsistencyWarning)
            for name in SCHEDULE_PRESETS:
                sched = schedule_preset(name)
                assert schedule_from_text(schedule_to_text(sched)) == sched

    def test_inconsistent_warmup_warns_not_errors(self):
        text = "peak_lr = 1e-3\nbatch_size = 8\nwarmup_ratio = 0.5\nwarmup_steps = 10\ntotal_steps = 100\n"
        with pytest.warns(ScheduleConsistencyWarning):
            sched = schedule_from_text(text)
        assert sched.warmup_steps == 10

    def test_warmup_beyond_total_rejected(self):
        with pytest.raises(ConfigError):
            TrainingSchedule(1e-3, 8, 0.5, 200, 100).validate()

    def test_missing_key_rejected(self):
        with pytest.raises(ConfigError):
            schedule_from_text("peak_lr = 1e-3\n")
