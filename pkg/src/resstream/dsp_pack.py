"""Bit-exact emulation of double-MAC operand packing on a 27x18-bit multiplier.

Two signed 8-bit activations (a, d) share one signed 8-bit parameter b per
multiplier: the 27-bit port carries (a << 18) + d, the 18-bit port carries b,
and the 36-bit product accumulates down a chain of at most 7 stages into a
48-bit word.  A restore stage then splits the two lanes, compensating the
carry that a negative low field leaks into the high field.  Longer tap counts
are split into multiple chains whose restored lane sums are added.

All emulation uses host integers masked/asserted to the DSP widths so width
violations raise instead of silently wrapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_CHAIN = 7           # packed accumulations before the low lane can alias
LANE_BITS = 18          # 16-bit product + 2 padding bits
LANE_MOD = 1 << LANE_BITS
LANE_HALF = 1 << (LANE_BITS - 1)
WORD27_MIN, WORD27_MAX = -(1 << 26), (1 << 26) - 1
ACC48_MIN, ACC48_MAX = -(1 << 47), (1 << 47) - 1
_INT8 = range(-128, 128)


@dataclass(frozen=True)
class PackedOperand:
    """One multiplier input pair: packed activations and sign-extended weight."""

    word27: int
    word18: int


@dataclass(frozen=True)
class ChainState:
    """Partial accumulation flowing down the DSP cascade."""

    p: int = 0
    taps_done: int = 0


def pack_activations(a: int, d: int) -> int:
    """(a << 18) + d; d's sign borrows from a's field, restored later."""
    if a not in _INT8 or d not in _INT8:
        raise ValueError(f"activations must be signed 8-bit, got ({a}, {d})")
    word = (a << LANE_BITS) + d
    assert WORD27_MIN <= word <= WORD27_MAX
    return word


def pack_operand(a: int, d: int, b: int) -> PackedOperand:
    if b not in _INT8:
        raise ValueError(f"parameter must be signed 8-bit, got {b}")
    return PackedOperand(pack_activations(a, d), b)


def packed_mac(packed: PackedOperand, p_prev: ChainState) -> ChainState:
    """One cascade stage: add the 36-bit product to the incoming accumulation."""
    if p_prev.taps_done >= MAX_CHAIN:
        raise ValueError(f"chain length limit is {MAX_CHAIN} packed taps")
    p = p_prev.p + packed.word27 * packed.word18
    assert ACC48_MIN <= p <= ACC48_MAX, "48-bit accumulator overflow"
    return ChainState(p=p, taps_done=p_prev.taps_done + 1)


def restore(final: ChainState, taps: int | None = None) -> tuple[int, int]:
    """Split the 48-bit chain result into the two exact lane sums.

    The low 18 bits hold sum(d*b) in two's complement; when its sign bit is
    set, one carry has leaked into the high field and must be paid back.
    """
    p = final.p
    low = p & (LANE_MOD - 1)
    acc_d = low - LANE_MOD if low >= LANE_HALF else low
    acc_a = (p - acc_d) >> LANE_BITS
    return acc_a, acc_d


def split_chain(n_taps: int) -> list[int]:
    """Balanced chain lengths, each within the 7-tap limit."""
    if n_taps <= 0:
        return []
    parts = -(-n_taps // MAX_CHAIN)
    base, extra = divmod(n_taps, parts)
    return [base + 1] * extra + [base] * (parts - extra)


def packed_dot(a_row, d_row, b_row, init: int = 0) -> tuple[int, int]:
    """Two dot products on one set of packed chains, plus a shared init value.

    Returns (sum(a*b) + init, sum(d*b) + init), exactly.
    """
    if not (len(a_row) == len(d_row) == len(b_row)):
        raise ValueError("operand rows must have equal length")
    dot_a, dot_d = init, init
    pos = 0
    for length in split_chain(len(a_row)):
        state = ChainState()
        for j in range(pos, pos + length):
            state = packed_mac(pack_operand(a_row[j], d_row[j], b_row[j]), state)
        sub_a, sub_d = restore(state)
        dot_a += sub_a
        dot_d += sub_d
        pos += length
    return dot_a, dot_d


# ---------------------------------------------------------------------------
# Vectorized twins used by the dataflow simulator's compute tasks.  Same
# arithmetic, expressed over numpy int64 arrays; cross-checked against the
# scalar path in the test suite.
# ---------------------------------------------------------------------------

def pack_words27(a: np.ndarray, d: np.ndarray) -> np.ndarray:
    return (a.astype(np.int64) << LANE_BITS) + d.astype(np.int64)


def restore_array(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    low = p & (LANE_MOD - 1)
    acc_d = np.where(low >= LANE_HALF, low - LANE_MOD, low)
    acc_a = (p - acc_d) >> LANE_BITS
    return acc_a, acc_d


def packed_dot_array(a: np.ndarray, d: np.ndarray, b: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Lane sums over the trailing axis, chained exactly like the hardware.

    a, d: activation taps (..., k); b: parameters broadcastable to the same
    shape.  Taps are split into <=7-long chains and each chain is restored
    independently before the lane sums are combined.
    """
    prods = pack_words27(a, d) * b.astype(np.int64)
    k = prods.shape[-1]
    dot_a = np.zeros(prods.shape[:-1], dtype=np.int64)
    dot_d = np.zeros(prods.shape[:-1], dtype=np.int64)
    pos = 0
    for length in split_chain(k):
        p = prods[..., pos:pos + length].sum(axis=-1)
        assert p.size == 0 or (p.min() >= ACC48_MIN and p.max() <= ACC48_MAX)
        sub_a, sub_d = restore_array(p)
        dot_a += sub_a
        dot_d += sub_d
        pos += length
    return dot_a, dot_d
