"""Bit-exact functional model of one 32kb CIM core: 32 partitions, each
with two 512-bit banks holding nibble-split int8 weights (signed MSB nibble,
unsigned LSB nibble), a 64-lane adder tree, and shift-accumulate over 8
bit-serial input cycles.

The model introduces zero arithmetic error: matvec and tiled matmul results
equal the wide-integer dot product exactly.  All approximation in the
simulator lives in quantization and the softmax tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fxp import AccTensor

PARTITIONS = 32
LANES = 64
BANKS_PER_PARTITION = 2
ACC_DEPTH = 64
WRITE_PORT_BITS = 128
INPUT_PORT_BITS = 64
WRITE_BEATS_PER_ROW = LANES * 8 // WRITE_PORT_BITS  # 512b row / 128b port
MAC_CYCLES = 8
MAX_DOT_LENGTH = 1 << 15  # keeps worst-case 128*128*length inside 32 bits


class CimError(RuntimeError):
    """Violation of the CIM core's operating contract."""


class EventLog:
    """Structured trace: one `cycle,partition,bank,op,lane_count` record per event."""

    def __init__(self):
        self.records = []

    def record(self, cycle, partition, bank, op, lane_count):
        self.records.append((cycle, partition, bank, op, lane_count))

    def lines(self):
        return [f"{c},{p},{b},{op},{n}" for c, p, b, op, n in self.records]

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()))
            if self.records:
                fh.write("\n")


class WeightBank:
    """One 512-bit SRAM block: 64 weights stored as nibble pairs."""

    def __init__(self):
        self.msb_nibbles = np.zeros(LANES, dtype=np.int8)   # signed -8..7
        self.lsb_nibbles = np.zeros(LANES, dtype=np.uint8)  # unsigned 0..15
        self.loaded = False

    def store(self, weights):
        w = np.asarray(weights, dtype=np.int64)
        if w.shape != (LANES,):
            raise CimError(f"bank row must have {LANES} weights, got {w.shape}")
        if w.min() < -128 or w.max() > 127:
            raise CimError("weights outside int8 range")
        self.msb_nibbles = (w >> 4).astype(np.int8)
        self.lsb_nibbles = (w & 0xF).astype(np.uint8)
        self.loaded = True

    def weights(self):
        """Reconstruct w = msb*16 + lsb, exact for all int8 values."""
        return (self.msb_nibbles.astype(np.int64) * 16
                + self.lsb_nibbles.astype(np.int64))


class Partition:
    def __init__(self):
        self.banks = [WeightBank() for _ in range(BANKS_PER_PARTITION)]
        self.accumulators = np.zeros(ACC_DEPTH, dtype=np.int64)
        self.acc_count = 0
        self.active_bank = None
        self.cycle_phase = 0
        self.current_acc = 0
        self.matvec_done = False


class CimMacro:
    """32 partitions plus the global cycle counter and optional event log."""

    def __init__(self, event_log=None):
        self.partitions = [Partition() for _ in range(PARTITIONS)]
        self.cycle = 0
        self.event_log = event_log

    def _log(self, partition, bank, op, lane_count):
        if self.event_log is not None:
            self.event_log.record(self.cycle, partition, bank, op, lane_count)


def write_weights(macro, partition_idx, bank_idx, weights):
    """Store a 64-weight row nibble-split into one bank.

    Writing the bank currently being read mid-matvec is rejected; the other
    bank of the same partition may be written concurrently.
    """
    part = _partition(macro, partition_idx)
    if bank_idx not in (0, 1):
        raise CimError(f"bank index {bank_idx} out of range")
    if part.active_bank == bank_idx:
        raise CimError(
            f"write to active bank {bank_idx} of partition {partition_idx} mid-matvec"
        )
    part.banks[bank_idx].store(weights)
    for _ in range(WRITE_BEATS_PER_ROW):
        macro._log(partition_idx, bank_idx, "write_beat", LANES // WRITE_BEATS_PER_ROW)
        macro.cycle += 1


def select_bank(macro, partition_idx, bank_idx):
    """Point the OAI selector at one bank; the other becomes writable."""
    part = _partition(macro, partition_idx)
    if bank_idx not in (0, 1):
        raise CimError(f"bank index {bank_idx} out of range")
    if not part.banks[bank_idx].loaded:
        raise CimError(f"partition {partition_idx} bank {bank_idx} has no weights")
    part.active_bank = bank_idx
    part.cycle_phase = 0


def mac_cycle(macro, partition_idx, input_bits, bit_index):
    """One bit-serial cycle: add the adder-tree sum of active lanes, shifted
    by the bit position (subtracted for the two's-complement sign bit)."""
    part = _partition(macro, partition_idx)
    if part.active_bank is None:
        raise CimError("no active bank selected")
    if bit_index != part.cycle_phase:
        raise CimError(
            f"bit index {bit_index} out of lockstep (expected {part.cycle_phase})"
        )
    bits = np.asarray(input_bits, dtype=np.int64)
    if bits.shape != (LANES,) or np.any((bits != 0) & (bits != 1)):
        raise CimError(f"input bits must be {LANES} values in {{0,1}}")
    bank = part.banks[part.active_bank]
    partials = bank.weights() * bits
    tree_sum = int(np.sum(partials))
    if bit_index == 7:
        part.current_acc -= tree_sum << 7
    else:
        part.current_acc += tree_sum << bit_index
    macro._log(partition_idx, part.active_bank, "mac", int(np.sum(bits)))
    macro.cycle += 1
    part.cycle_phase += 1
    if part.cycle_phase == MAC_CYCLES:
        part.cycle_phase = 0
        if part.acc_count >= ACC_DEPTH:
            raise CimError("accumulator file full (64 output columns per bank)")
        part.accumulators[part.acc_count] = part.current_acc
        part.acc_count += 1
        part.matvec_done = True
        part.active_bank = None


def matvec_int8(macro, partition_idx, bank_idx, activations):
    """Dot product of the bank's 64 weights with 64 int8 activations,
    orchestrated as 8 bit-serial mac cycles; exact as a signed 32-bit value."""
    part = _partition(macro, partition_idx)
    if bank_idx not in (0, 1):
        raise CimError(f"bank index {bank_idx} out of range")
    if not part.banks[bank_idx].loaded:
        raise CimError(f"partition {partition_idx} bank {bank_idx} has no weights")
    acts = np.asarray(activations, dtype=np.int64)
    if acts.shape != (LANES,):
        raise CimError(f"activation vector must have {LANES} lanes")
    if acts.min() < -128 or acts.max() > 127:
        raise CimError("activations outside int8 range")
    select_bank(macro, partition_idx, bank_idx)
    part.current_acc = 0  # accumulator cleared at matvec start
    unsigned = acts.astype(np.uint8).astype(np.int64)
    for bit in range(MAC_CYCLES):
        mac_cycle(macro, partition_idx, (unsigned >> bit) & 1, bit)
    return int(part.accumulators[part.acc_count - 1])


def cycle_output(macro, partition_idx):
    """Drain the partition's 64-entry accumulator file in lane order 0..63."""
    part = _partition(macro, partition_idx)
    if not part.matvec_done:
        raise CimError("output read before any matvec completed")
    out = part.accumulators.astype(np.int32).copy()
    part.accumulators[:] = 0
    part.acc_count = 0
    part.matvec_done = False
    return out


def tiled_matmul(macro, plan, stored, streamed):
    """Exact integer matmul of the stored operand (M x L) with the streamed
    operand (L x P), tiled over 64-lane dot chunks with cross-tile
    accumulation in the intermediate accumulator.  Output scale is the
    product of the input scales.
    """
    a = stored.codes.astype(np.int64)
    b = streamed.codes.astype(np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise CimError(f"shape mismatch: stored {a.shape} x streamed {b.shape}")
    rows, depth = a.shape
    cols = b.shape[1]
    if depth > MAX_DOT_LENGTH:
        raise CimError(f"dot length {depth} exceeds {MAX_DOT_LENGTH}")
    n_chunks = -(-depth // LANES)
    schedule = plan.tile_schedule
    seen = {}
    for part_idx, bank_idx, (row, chunk) in schedule:
        key = (row, chunk)
        if key in seen:
            raise CimError(f"tile {key} scheduled twice")
        seen[key] = True
    if len(seen) != rows * n_chunks:
        raise CimError(
            f"schedule covers {len(seen)} tiles, workload needs {rows * n_chunks}"
        )

    out = np.zeros((rows, cols), dtype=np.int64)
    for part_idx, bank_idx, (row, chunk) in schedule:
        lo = chunk * LANES
        hi = min(lo + LANES, depth)
        w_row = np.zeros(LANES, dtype=np.int64)
        w_row[: hi - lo] = a[row, lo:hi]
        write_weights(macro, part_idx, bank_idx, w_row)
        part = _partition(macro, part_idx)
        bank = part.banks[bank_idx]
        for col0 in range(0, cols, ACC_DEPTH):
            col1 = min(col0 + ACC_DEPTH, cols)
            x = np.zeros((LANES, col1 - col0), dtype=np.int64)
            x[: hi - lo, :] = b[lo:hi, col0:col1]
            sums = _bit_serial_dot_batch(bank, x)
            if macro.event_log is not None:
                for _ in range(col1 - col0):
                    for _bit in range(MAC_CYCLES):
                        macro._log(part_idx, bank_idx, "mac", hi - lo)
                        macro.cycle += 1
            out[row, col0:col1] += sums
    return AccTensor(out, stored.scale * streamed.scale)


def _bit_serial_dot_batch(bank, activations):
    """Vectorized bit-serial dot products: same arithmetic as 8 mac_cycles
    per column, batched over columns.  activations is (64, C) int64."""
    weights = bank.weights()
    unsigned = activations.astype(np.uint8).astype(np.int64)
    total = np.zeros(activations.shape[1], dtype=np.int64)
    for bit in range(MAC_CYCLES):
        bits = (unsigned >> bit) & 1
        tree = weights @ bits
        if bit == 7:
            total -= tree << 7
        else:
            total += tree << bit
    return total


def _partition(macro, idx):
    if not 0 <= idx < PARTITIONS:
        raise CimError(f"partition index {idx} out of range")
    return macro.partitions[idx]
