"""Energy and memory cost models normalised to a 32-bit baseline.

GEMM energy is counted in fp32-MAC equivalents: a MAC between a ``k_a``-bit
and a ``k_b``-bit operand costs ``k_a * k_b / 32**2``, so two 16-bit operands
cost a quarter of a 32-bit MAC.  Parameter movement is counted in
fp32-model equivalents: moving every parameter once at 32 bits is 1.0.
The two units are never added together.

Backward GEMMs are priced as two GEMMs per layer, each with as many MACs as
the forward one: the input gradient at ``act_bits x weight_bits`` and the
weight gradient at ``act_bits x grad_bits``.  Accumulator additions are not
priced.
"""

from dataclasses import dataclass, field

from .exceptions import DomainError
from .validation import check_bitwidth

FP32 = 32

BACKWARD_NOTE = ("backward GEMMs priced at act_bits x weight_bits (input gradient) and "
                 "act_bits x grad_bits (weight gradient); accumulator additions not priced")


def gemm_energy(macs, k_a, k_b):
    """Energy of ``macs`` multiply-accumulates between ``k_a``- and ``k_b``-bit operands."""
    if macs < 0:
        raise DomainError(f"macs must be >= 0, got {macs}")
    k_a = check_bitwidth(k_a, "k_a")
    k_b = check_bitwidth(k_b, "k_b")
    return macs * (k_a * k_b) / (FP32 * FP32)


def movement_energy(bits_moved, total_param_count):
    """Traffic of ``bits_moved`` bits relative to one transfer of the fp32 model."""
    if bits_moved < 0:
        raise DomainError(f"bits_moved must be >= 0, got {bits_moved}")
    if total_param_count < 1:
        raise DomainError("total_param_count must be >= 1")
    return bits_moved / (FP32 * total_param_count)


def movement_ratio(bits_per_param_a, bits_per_param_b):
    """Movement energy of a method storing ``a`` bits/param relative to one storing ``b``.

    Movement energy is linear in parameter memory, so e.g. a fp32 master plus
    an 8-bit copy against a 12.8-bit single copy gives ``(32 + 8) / 12.8``.
    """
    n = 1_000_000
    return movement_energy(bits_per_param_a * n, n) / movement_energy(bits_per_param_b * n, n)


# Movement traces: one training step as (operation, bits-per-parameter) events.
# A QAT-style step reads the fp32 master to quantize it, reads the quantized
# copy for the forward/backward pass, reads the master again for the update
# and writes it back.  A single-copy step only reads and writes its codes.

def qat_step_trace(master_bits=32, quant_bits=8):
    return [("read", master_bits), ("read", quant_bits), ("read", master_bits), ("write", master_bits)]


def single_copy_step_trace(bits):
    return [("read", bits), ("write", bits)]


def trace_bits(trace, n_params):
    return sum(bits for _, bits in trace) * n_params


@dataclass(frozen=True)
class MemoryReport:
    total_param_bits: int
    n_params: int
    weighted_avg_bitwidth: float

    @property
    def normalized_vs_fp32(self):
        return self.weighted_avg_bitwidth / FP32

    def to_dict(self):
        return {"total_bits": self.total_param_bits,
                "weighted_avg_bitwidth": self.weighted_avg_bitwidth,
                "normalized_vs_fp32": self.normalized_vs_fp32}


def memory_report(sizes_and_bits):
    """Memory of ``(n_params, bitwidth)`` pairs."""
    pairs = list(sizes_and_bits)
    if not pairs:
        raise DomainError("need at least one parameter tensor")
    total_bits = sum(int(n) * int(k) for n, k in pairs)
    n = sum(int(n) for n, _ in pairs)
    return MemoryReport(total_bits, n, total_bits / n)


def param_memory(model):
    """Parameter memory of ``model`` at its current per-tensor bitwidths."""
    return memory_report((qt.size, qt.bitwidth) for qt in model.tensors().values())


@dataclass
class LayerEnergy:
    macs: int = 0
    forward: float = 0.0
    backward: float = 0.0


@dataclass
class EnergyLedger:
    """Running totals of GEMM and parameter-movement energy over a run.

    Events must be recorded in step order; totals are plain sums in that
    order, so a replay that visits the same events reproduces them exactly.
    ``act_bits=None`` means activations are not quantized (priced at 32).
    """

    act_bits: int = 8
    grad_bits: int = FP32
    gemm: float = 0.0
    forward_gemm: float = 0.0
    movement: float = 0.0
    macs: int = 0
    forward_macs: int = 0
    steps: int = 0
    per_layer: dict = field(default_factory=dict)

    @property
    def _act(self):
        return FP32 if self.act_bits is None else self.act_bits

    def add_compute(self, layer, macs, weight_bits):
        fwd = gemm_energy(macs, self._act, weight_bits)
        bwd = fwd + gemm_energy(macs, self._act, self.grad_bits)
        rec = self.per_layer.setdefault(layer, LayerEnergy())
        rec.macs += macs
        rec.forward += fwd
        rec.backward += bwd
        self.forward_gemm += fwd
        self.gemm += fwd + bwd
        self.forward_macs += macs
        self.macs += 3 * macs

    def add_movement(self, bits, n_params):
        self.movement += movement_energy(bits, n_params)
        self.steps += 1

    def record_compute(self, model, batch):
        """Price one forward+backward pass of ``model`` on ``batch`` samples."""
        for layer, macs in model.layer_macs(batch).items():
            self.add_compute(layer, macs, model.get_tensor(f"{layer}.weight").bitwidth)

    def record_movement(self, model):
        """Price one read and one write of every stored parameter."""
        tensors = list(model.tensors().values())
        bits = sum(trace_bits(single_copy_step_trace(qt.bitwidth), qt.size) for qt in tensors)
        self.add_movement(bits, sum(qt.size for qt in tensors))

    @property
    def gemm_ratio_vs_fp32(self):
        return self.gemm / self.macs if self.macs else 0.0

    @property
    def forward_ratio_vs_fp32(self):
        return self.forward_gemm / self.forward_macs if self.forward_macs else 0.0

    @property
    def movement_ratio_vs_fp32(self):
        # an fp32 single-copy step reads and writes the model once: 2.0 units
        return self.movement / (2 * self.steps) if self.steps else 0.0

    def to_dict(self):
        return {
            "gemm_fp32_mac_equiv": self.gemm,
            "movement_fp32_param_equiv": self.movement,
            "forward_only_gemm": self.forward_gemm,
            "total_macs": self.macs,
            "forward_macs": self.forward_macs,
            "gemm_ratio_vs_fp32": self.gemm_ratio_vs_fp32,
            "forward_ratio_vs_fp32": self.forward_ratio_vs_fp32,
            "movement_ratio_vs_fp32": self.movement_ratio_vs_fp32,
            "steps": self.steps,
            "act_bits": self._act,
            "grad_bits": self.grad_bits,
            "backward_costing": BACKWARD_NOTE,
            "per_layer": {name: {"macs": r.macs, "forward": r.forward, "backward": r.backward}
                          for name, r in self.per_layer.items()},
        }


def replay_energy(history, initial_bitwidths, step_batches, layer_macs, tensor_sizes,
                  act_bits=8, grad_bits=FP32):
    """Rebuild a run's :class:`EnergyLedger` from its bitwidth history.

    ``step_batches`` lists the batch size of every step; ``layer_macs`` maps
    each parameterized layer to its per-sample forward MACs and
    ``tensor_sizes`` maps tensor names to element counts (in model order).
    A tick logged at step ``s`` takes effect after that step's
    forward/backward pass and before its update.
    """
    bits = dict(initial_bitwidths)
    by_step = {}
    for step, layer, k, _ in history:
        by_step.setdefault(step, []).append((layer, k))
    ledger = EnergyLedger(act_bits=act_bits, grad_bits=grad_bits)
    n_params = sum(tensor_sizes.values())
    for step, batch in enumerate(step_batches):
        for layer, per_sample in layer_macs.items():
            ledger.add_compute(layer, per_sample * batch, bits[f"{layer}.weight"])
        for layer, k in by_step.get(step, ()):
            bits[layer] = k
        moved = sum(trace_bits(single_copy_step_trace(bits[name]), size)
                    for name, size in tensor_sizes.items())
        ledger.add_movement(moved, n_params)
    return ledger
