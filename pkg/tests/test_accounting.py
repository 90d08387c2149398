import numpy as np
import pytest

from rct import accounting as A
from rct import nn
from rct.controller import BitwidthHistory
from rct.exceptions import DomainError


class TestGemmEnergy:
    @pytest.mark.parametrize("k,factor", [(32, 1.0), (16, 0.25), (8, 0.0625)])
    def test_square_widths(self, k, factor):
        assert A.gemm_energy(1000, k, k) == 1000 * factor

    def test_mixed_and_zero(self):
        assert A.gemm_energy(1024, 8, 32) == 256.0
        assert A.gemm_energy(0, 8, 8) == 0.0

    @pytest.mark.parametrize("args", [(-1, 8, 8), (10, 1, 8), (10, 8, 33)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            A.gemm_energy(*args)

    def test_anchor_any_macs(self):
        for m in (1, 7, 12345, 10 ** 9):
            assert A.gemm_energy(m, 16, 16) / A.gemm_energy(m, 32, 32) == 0.25


class TestMovement:
    def test_fp32_model_once(self):
        assert A.movement_energy(32 * 500, 500) == 1.0

    def test_8bit_model_once(self):
        assert A.movement_energy(8 * 500, 500) == 0.25

    def test_domain(self):
        with pytest.raises(DomainError):
            A.movement_energy(-1, 10)
        with pytest.raises(DomainError):
            A.movement_energy(10, 0)

    def test_qat_vs_single_copy_trace(self):
        # arrows of a two-copy step: read master, read quantized, read master, write master
        n = 1000
        qat = A.trace_bits(A.qat_step_trace(32, 8), n)
        rct = A.trace_bits(A.single_copy_step_trace(8), n)
        assert qat == (32 + 8 + 32 + 32) * n
        assert rct == (8 + 8) * n
        assert A.movement_energy(qat, n) / A.movement_energy(rct, n) == pytest.approx(104 / 16)


class TestMemory:
    def test_uniform(self):
        rep = A.memory_report([(100, 8), (50, 8)])
        assert rep.weighted_avg_bitwidth == 8.0
        assert rep.normalized_vs_fp32 == 0.25

    def test_weighted(self):
        rep = A.memory_report([(100, 10), (300, 14)])
        assert rep.weighted_avg_bitwidth == 13.0
        assert rep.total_param_bits == 5200

    def test_linearity(self):
        pairs = [(17, 5), (40, 12), (3, 31)]
        a = A.memory_report(pairs)
        b = A.memory_report([(2 * n, k) for n, k in pairs])
        assert b.total_param_bits == 2 * a.total_param_bits
        assert b.weighted_avg_bitwidth == a.weighted_avg_bitwidth

    def test_empty(self):
        with pytest.raises(DomainError):
            A.memory_report([])

    def test_param_memory_of_model(self):
        m = nn.build_model([{"type": "dense", "units": 4}], (3,), {"dense0.weight": 10, "dense0.bias": 6}, 0)
        rep = A.param_memory(m)
        assert rep.total_param_bits == 12 * 10 + 4 * 6
        assert rep.to_dict() == {"total_bits": 144, "weighted_avg_bitwidth": 9.0,
                                 "normalized_vs_fp32": 9.0 / 32}


class TestLedger:
    def test_per_layer_sums_to_totals(self):
        led = A.EnergyLedger(act_bits=8)
        rng = np.random.default_rng(0)
        for _ in range(200):
            led.add_compute(f"l{rng.integers(3)}", int(rng.integers(1, 10_000)), int(rng.integers(2, 33)))
        per = led.per_layer.values()
        assert sum(r.forward + r.backward for r in per) == pytest.approx(led.gemm, rel=1e-9)
        assert sum(r.forward for r in per) == pytest.approx(led.forward_gemm, rel=1e-9)
        assert 3 * sum(r.macs for r in per) == led.macs

    def test_fp32_ledger_ratio_is_one(self):
        led = A.EnergyLedger(act_bits=None, grad_bits=32)
        led.add_compute("a", 100, 32)
        assert led.gemm == 300.0
        assert led.gemm_ratio_vs_fp32 == 1.0

    def test_backward_costing(self):
        led = A.EnergyLedger(act_bits=8, grad_bits=32)
        led.add_compute("a", 1024, 16)
        # forward 8x16, backward 8x16 + 8x32
        assert led.forward_gemm == 128.0
        assert led.gemm == 128.0 + 128.0 + 256.0
        assert "backward" in led.to_dict()["backward_costing"]

    def test_monotone(self):
        led = A.EnergyLedger()
        seen = []
        for k in (2, 8, 32, 4):
            led.add_compute("x", 50, k)
            led.add_movement(1000 * k, 1000)
            seen.append((led.gemm, led.movement))
        assert seen == sorted(seen)
        assert led.steps == 4

    def test_empty_ledger(self):
        d = A.EnergyLedger().to_dict()
        assert d["gemm_fp32_mac_equiv"] == 0.0
        assert d["movement_fp32_param_equiv"] == 0.0
        assert d["gemm_ratio_vs_fp32"] == 0.0


def test_replay_matches_live_bookkeeping():
    m = nn.build_model([{"type": "dense", "units": 5, "name": "a"}, {"type": "relu"},
                        {"type": "dense", "units": 2, "name": "b"}], (3,), 8, 0)
    live = A.EnergyLedger()
    hist = BitwidthHistory()
    bits = m.bitwidths()
    initial = dict(bits)
    batches = [4, 4, 4, 2, 4, 4, 4, 2]
    for step, batch in enumerate(batches):
        for layer, macs in m.layer_macs(batch).items():
            live.add_compute(layer, macs, bits[f"{layer}.weight"])
        if step % 3 == 0:
            bits = {n: min(k + 1, 32) if n.startswith("a") else k for n, k in bits.items()}
            for n, k in bits.items():
                hist.append(step, n, k, 0.5)
        sizes = {n: qt.size for n, qt in m.tensors().items()}
        moved = sum(2 * bits[n] * s for n, s in sizes.items())
        live.add_movement(moved, sum(sizes.values()))
    replay = A.replay_energy(hist, initial, batches, m.layer_macs(1),
                             {n: qt.size for n, qt in m.tensors().items()})
    assert replay.gemm == live.gemm
    assert replay.movement == live.movement
    assert replay.to_dict() == live.to_dict()
