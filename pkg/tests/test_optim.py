"""Optimizers: schedule shape, Adam/LAMB steps vs scalar oracles, 8-bit state, tiers."""

import math

import numpy as np
import pytest

from swarmdesk import codec, optim
from swarmdesk.codec import TensorBuf
from swarmdesk.errors import NonFiniteGradient, ShapeMismatch, StepOutOfRange
from swarmdesk.optim import (
    Algorithm,
    OptimConfig,
    OptimState,
    ScheduleConfig,
    Tier,
    adam_step,
    init_state,
    lamb_step,
    lr_at,
    pack_state,
    tier_transfer,
    trust_ratio,
    unpack_state,
)


def scalar_adam(w, g_fn, steps, lr_fn, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar-loop Adam in float64, used as the trajectory oracle."""
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    w = list(w)
    for t in range(1, steps + 1):
        g = g_fn(w)
        lr = lr_fn(t - 1)
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            w[i] = w[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return w


class TestSchedule:
    def test_paper_shape(self):
        s = ScheduleConfig()
        assert s.warmup_steps == 3125
        assert lr_at(0, s) == 0.0
        assert lr_at(3125, s) == 2.5e-3
        assert lr_at(31250, s) == 0.0

    def test_interpolated_point(self):
        s = ScheduleConfig()
        assert lr_at(17188, s) == pytest.approx(1.24996e-3, rel=1e-4)

    def test_out_of_range(self):
        s = ScheduleConfig(total_steps=10)
        with pytest.raises(StepOutOfRange):
            lr_at(-1, s)
        with pytest.raises(StepOutOfRange):
            lr_at(11, s)

    def test_piecewise_linear_closed_form(self):
        s = ScheduleConfig(total_steps=1000, warmup_fraction=0.2, peak_lr=0.01,
                           end_lr=0.001)
        w = 200
        rng = np.random.default_rng(0)
        for step in rng.integers(0, 1001, size=100):
            step = int(step)
            if step <= w:
                want = 0.01 * step / w
            else:
                t = (step - w) / (1000 - w)
                want = 0.01 * (1 - t) + 0.001 * t
            got = lr_at(step, s)
            assert got == pytest.approx(want, abs=1e-18, rel=1e-15)

    def test_peak_attained_exactly_once(self):
        s = ScheduleConfig(total_steps=100, warmup_fraction=0.3, peak_lr=0.123)
        hits = [step for step in range(101) if lr_at(step, s) == 0.123]
        assert hits == [30]

    def test_continuity(self):
        s = ScheduleConfig(total_steps=500, warmup_fraction=0.1, peak_lr=1.0)
        lrs = [lr_at(k, s) for k in range(501)]
        jumps = np.abs(np.diff(lrs))
        steepest = max(1.0 / 50, 1.0 / 450)  # warmup slope dominates here
        assert jumps.max() <= steepest + 1e-12


class TestAdam:
    def test_first_step_hand_arithmetic(self):
        w = TensorBuf.from_array([0.0])
        g = TensorBuf.from_array([1.0])
        cfg = OptimConfig.adam()
        st = init_state(1, cfg)
        new_w, new_st = adam_step(w, g, st, cfg, lr=0.1)
        assert new_w.data[0] == pytest.approx(-0.0999999999, abs=1e-8)
        assert new_st.step == 1

    def test_zero_gradient_no_move(self):
        cfg = OptimConfig.adam()
        w = TensorBuf.from_array([1.0, -2.0, 3.0])
        st = init_state(3, cfg)
        new_w, _ = adam_step(w, TensorBuf.from_array([0.0, 0.0, 0.0]), st, cfg, 0.1)
        np.testing.assert_array_equal(new_w.data, w.data)

    def test_converges_on_quadratic_vs_scalar_oracle(self):
        rng = np.random.default_rng(42)
        w_star = rng.standard_normal(8)
        w0 = rng.standard_normal(8)
        sched = ScheduleConfig(total_steps=500, warmup_fraction=0.1, peak_lr=0.3)

        oracle = scalar_adam(
            w0, lambda w: [wi - ti for wi, ti in zip(w, w_star)], 500,
            lambda k: lr_at(k, sched),
        )
        assert math.sqrt(sum((a - b) ** 2 for a, b in zip(oracle, w_star))) < 1e-3

        cfg = OptimConfig.adam()
        w = TensorBuf(w0.astype(np.float32))
        st = init_state(8, cfg)
        for k in range(500):
            g = TensorBuf((w.data - w_star.astype(np.float32)).astype(np.float32))
            w, st = adam_step(w, g, st, cfg, lr_at(k, sched))
        assert np.linalg.norm(w.data - w_star) < 1e-3
        np.testing.assert_allclose(w.data, oracle, atol=2e-4)

    def test_shape_mismatch(self):
        cfg = OptimConfig.adam()
        st = init_state(2, cfg)
        with pytest.raises(ShapeMismatch):
            adam_step(TensorBuf.from_array([1.0, 2.0]),
                      TensorBuf.from_array([1.0]), st, cfg, 0.1)

    def test_nonfinite_gradient(self):
        cfg = OptimConfig.adam()
        st = init_state(1, cfg)
        with pytest.raises(NonFiniteGradient):
            adam_step(TensorBuf.from_array([0.0]),
                      TensorBuf.from_array([np.nan]), st, cfg, 0.1)

    def test_deterministic(self):
        cfg = OptimConfig.adam(weight_decay=0.01)
        rng = np.random.default_rng(5)
        w0 = rng.standard_normal(64).astype(np.float32)
        g = TensorBuf(rng.standard_normal(64).astype(np.float32))
        outs = []
        for _ in range(2):
            w, st = TensorBuf(w0.copy()), init_state(64, cfg)
            for _ in range(10):
                w, st = adam_step(w, g, st, cfg, 0.01)
            outs.append(w.data.tobytes())
        assert outs[0] == outs[1]


class TestLamb:
    def test_zero_norm_ratio_convention(self):
        assert trust_ratio(0.0, 5.0, (0.0, 10.0)) == 1.0
        assert trust_ratio(5.0, 0.0, (0.0, 10.0)) == 1.0

    def test_single_scalar_hand_arithmetic(self):
        cfg = OptimConfig.lamb(beta1=0.0, beta2=0.0)
        st = init_state(1, cfg)
        w, _ = lamb_step(TensorBuf.from_array([1.0]), TensorBuf.from_array([1.0]),
                         st, cfg, lr=0.1)
        assert w.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_unit_trust_clip_matches_adam_direction(self):
        rng = np.random.default_rng(17)
        w0 = rng.standard_normal(32).astype(np.float32)
        g = TensorBuf(rng.standard_normal(32).astype(np.float32))
        adam_cfg = OptimConfig.adam(weight_decay=0.02)
        lamb_cfg = OptimConfig.lamb(beta2=0.999, weight_decay=0.02,
                                    trust_clip=(1.0, 1.0))
        wa, _ = adam_step(TensorBuf(w0.copy()), g, init_state(32, adam_cfg),
                          adam_cfg, 0.05)
        wl, _ = lamb_step(TensorBuf(w0.copy()), g, init_state(32, lamb_cfg),
                          lamb_cfg, 0.05)
        np.testing.assert_allclose(wa.data, wl.data, atol=1e-6)

    def test_trust_ratio_scales_with_weight_norm(self):
        # power-of-two factor keeps the fp division exact
        base = trust_ratio(3.0, 7.0, (0.0, 1e9))
        assert trust_ratio(12.0, 7.0, (0.0, 1e9)) == 4.0 * base

    def test_per_layer_ratios_differ(self):
        cfg = OptimConfig.lamb()
        w = TensorBuf.from_array([10.0, 10.0, 0.01, 0.01])
        g = TensorBuf.from_array([1.0, 1.0, 1.0, 1.0])
        layers = (("big", 0, 2), ("small", 2, 4))
        st = init_state(4, cfg)
        out, _ = lamb_step(w, g, st, cfg, 0.1, layers=layers)
        step_big = 10.0 - out.data[0]
        step_small = 0.01 - out.data[2]
        assert step_big > step_small * 10

    def test_monotone_loss_on_quadratic(self):
        rng = np.random.default_rng(23)
        w_star = rng.standard_normal(16).astype(np.float32)
        for cfg in (OptimConfig.adam(), OptimConfig.lamb()):
            w = TensorBuf(np.zeros(16, np.float32))
            st = init_state(16, cfg)
            losses = []
            for _ in range(200):
                diff = w.data - w_star
                losses.append(0.5 * float(diff @ diff))
                g = TensorBuf(diff)
                w, st = optim.optimizer_step(w, g, st, cfg, 0.01)
            assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))


class TestPackedState:
    def test_fresh_zero_state(self):
        cfg = OptimConfig.adam(state_bits=8)
        st = init_state(100, cfg)
        assert st.packed
        assert np.all(st.m.scales == 0.0)
        un = unpack_state(st)
        np.testing.assert_array_equal(un.m.data, np.zeros(100))
        np.testing.assert_array_equal(un.v.data, np.zeros(100))

    def test_roundtrip_within_codec_bound(self):
        rng = np.random.default_rng(31)
        m = rng.standard_normal(5000).astype(np.float32)
        v = (rng.standard_normal(5000).astype(np.float32)) ** 2
        st = OptimState(m=TensorBuf(m), v=TensorBuf(v), step=3)
        packed = pack_state(st, 8, block_size=256)
        un = unpack_state(packed)
        assert np.all(np.abs(m - un.m.data) <= codec.roundtrip_error_bound(packed.m))
        root_err = np.abs(np.sqrt(v) - np.sqrt(un.v.data))
        assert np.all(root_err <= codec.roundtrip_error_bound(packed.v) + 1e-7)
        assert np.all(un.v.data >= 0.0)

    def test_pack_unpack_idempotent_bytes(self):
        rng = np.random.default_rng(37)
        m = rng.standard_normal(2048).astype(np.float32)
        v = (rng.standard_normal(2048) ** 2).astype(np.float32)
        st = OptimState(m=TensorBuf(m), v=TensorBuf(v))
        p1 = pack_state(st, 8)
        p2 = pack_state(unpack_state(p1), 8)
        assert codec.chunk_to_bytes(p1.m) == codec.chunk_to_bytes(p2.m)
        assert codec.chunk_to_bytes(p1.v) == codec.chunk_to_bytes(p2.v)

    def test_v_stays_nonnegative_through_cycles(self):
        rng = np.random.default_rng(41)
        v = np.abs(rng.standard_normal(1000)).astype(np.float32) * 1e-4
        st = OptimState(m=TensorBuf(np.zeros(1000, np.float32)), v=TensorBuf(v))
        for _ in range(3):
            st = unpack_state(pack_state(st, 8))
            assert np.all(st.v.data >= 0.0)

    def test_8bit_lamb_tracks_fp32_on_quadratic(self):
        rng = np.random.default_rng(43)
        w_star = rng.standard_normal(100).astype(np.float32)
        sched = ScheduleConfig(total_steps=500, warmup_fraction=0.1, peak_lr=0.25)
        finals = {}
        for bits in (32, 8):
            cfg = OptimConfig.lamb(state_bits=bits)
            w = TensorBuf(np.zeros(100, np.float32))
            st = init_state(100, cfg)
            for k in range(500):
                g = TensorBuf(w.data - w_star)
                w, st = lamb_step(w, g, st, cfg, lr_at(k, sched))
            finals[bits] = w.data
        rel = np.linalg.norm(finals[8] - finals[32]) / np.linalg.norm(finals[32])
        assert rel <= 1e-2
        for bits in (32, 8):
            assert np.linalg.norm(finals[bits] - w_star) / np.linalg.norm(w_star) <= 1e-3


class TestTierTransfer:
    def test_fp32_bytes(self):
        st = init_state(1000, OptimConfig.adam())
        moved = tier_transfer(st, Tier.OFFLOADED)
        assert moved.tier == Tier.OFFLOADED
        assert moved.transfer_bytes_accumulated == 8000

    def test_8bit_bytes(self):
        st = init_state(1000, OptimConfig.adam(state_bits=8))
        moved = tier_transfer(st, Tier.OFFLOADED)
        # two buffers: 1000 code bytes + one 4-byte scale each
        assert moved.transfer_bytes_accumulated == 2 * (1000 + 4)

    def test_values_unchanged_after_two_transfers(self):
        rng = np.random.default_rng(47)
        m = rng.standard_normal(256).astype(np.float32)
        v = (rng.standard_normal(256) ** 2).astype(np.float32)
        st = OptimState(m=TensorBuf(m), v=TensorBuf(v))
        back = tier_transfer(tier_transfer(st, Tier.OFFLOADED), Tier.COMPUTE)
        assert back.tier == Tier.COMPUTE
        assert back.m.data.tobytes() == m.tobytes()
        assert back.v.data.tobytes() == v.tobytes()
        assert back.transfer_bytes_accumulated == 2 * 2048


class TestCheckpoint:
    def test_roundtrip_fp32(self, tmp_path):
        rng = np.random.default_rng(53)
        cfg = OptimConfig.lamb(weight_decay=0.01)
        w = TensorBuf(rng.standard_normal(128).astype(np.float32))
        st = OptimState(
            m=TensorBuf(rng.standard_normal(128).astype(np.float32)),
            v=TensorBuf((rng.standard_normal(128) ** 2).astype(np.float32)),
            step=17,
        )
        path = tmp_path / "opt.topt"
        optim.save_checkpoint(path, cfg, st, w)
        cfg2, st2, w2 = optim.load_checkpoint(path)
        assert cfg2 == cfg
        assert st2.step == 17
        np.testing.assert_array_equal(w2.data, w.data)
        np.testing.assert_array_equal(st2.m.data, st.m.data)
        np.testing.assert_array_equal(st2.v.data, st.v.data)

    def test_roundtrip_8bit_resumes_identically(self, tmp_path):
        rng = np.random.default_rng(59)
        cfg = OptimConfig.adam(state_bits=8)
        w = TensorBuf(rng.standard_normal(512).astype(np.float32))
        st = init_state(512, cfg)
        g = TensorBuf(rng.standard_normal(512).astype(np.float32))
        w, st = adam_step(w, g, st, cfg, 0.01)
        path = tmp_path / "opt8.topt"
        optim.save_checkpoint(path, cfg, st, w)
        _, st2, w2 = optim.load_checkpoint(path)
        wa, sta = adam_step(w, g, st, cfg, 0.01)
        wb, stb = adam_step(w2, g, st2, cfg, 0.01)
        assert wa.data.tobytes() == wb.data.tobytes()
        assert codec.chunk_to_bytes(sta.m) == codec.chunk_to_bytes(stb.m)

    def test_magic_check(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(Exception):
            optim.load_checkpoint(path)
