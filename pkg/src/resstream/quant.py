"""Fixed-point arithmetic rules shared by the planner, the reference
interpreter, and the dataflow simulator.

All scales are powers of two and all zero points are zero, so quantization,
requantization, and operand alignment reduce to rounding shifts.  Rounding is
half-away-from-zero everywhere; the interpreter and the simulator must agree
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_ir import LayerGeom, QuantSpec

ACC_WIDTH = 32
ACC_MIN = -(1 << (ACC_WIDTH - 1))
ACC_MAX = (1 << (ACC_WIDTH - 1)) - 1


class PlanningError(ValueError):
    """Configuration that no legal fixed-point pipeline can realize."""


@dataclass(frozen=True)
class AccSpec:
    """Accumulator sizing for one convolution."""

    width: int          # physical register width, fixed at 32
    n_acc: int          # layer-wide accumulation count och*ich*fh*fw
    bw_acc_required: int
    n_phys: int         # per-output accumulation count ich*fh*fw
    bw_phys_required: int


def quantize(b: float, spec: QuantSpec) -> int:
    """Real value -> integer code, saturating at the spec range."""
    scaled = b * (2.0 ** spec.frac)
    code = math.floor(scaled + 0.5) if scaled >= 0 else math.ceil(scaled - 0.5)
    return max(spec.q_min, min(spec.q_max, code))


def dequantize(code: int, spec: QuantSpec) -> float:
    if not spec.q_min <= code <= spec.q_max:
        raise PlanningError(f"code {code} outside {spec.bw}-bit range")
    return code * (2.0 ** -spec.frac)


def bias_spec(x: QuantSpec, w: QuantSpec) -> QuantSpec:
    """Bias format: 16-bit signed at the accumulator scale frac_x + frac_w."""
    return QuantSpec(16, x.frac + w.frac, True)


def round_shift(value: int, shift: int) -> int:
    """Half-away-from-zero rounding right shift (the hardware requantizer)."""
    if shift == 0:
        return int(value)
    half = 1 << (shift - 1)
    v = int(value)
    return (v + half) >> shift if v >= 0 else -((-v + half) >> shift)


def round_shift_array(values: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return values.astype(np.int64)
    v = values.astype(np.int64)
    half = 1 << (shift - 1)
    return np.where(v >= 0, (v + half) >> shift, -((-v + half) >> shift))


def requantize(acc: int, in_frac: int, out: QuantSpec, relu: bool = False) -> int:
    """32-bit accumulator -> output code via rounding shift, clamp, and ReLU."""
    shift = in_frac - out.frac
    if shift < 0:
        raise PlanningError(
            f"requantize needs in_frac >= out.frac, got {in_frac} < {out.frac}")
    lo = max(out.q_min, 0) if relu else out.q_min
    return max(lo, min(out.q_max, round_shift(acc, shift)))


def requantize_array(acc: np.ndarray, in_frac: int, out: QuantSpec,
                     relu: bool = False) -> np.ndarray:
    shift = in_frac - out.frac
    if shift < 0:
        raise PlanningError(
            f"requantize needs in_frac >= out.frac, got {in_frac} < {out.frac}")
    lo = max(out.q_min, 0) if relu else out.q_min
    return np.clip(round_shift_array(acc, shift), lo, out.q_max)


def check_acc_range(acc: np.ndarray, where: str = "") -> None:
    """Overflow monitor: every running accumulator must fit in 32 bits."""
    if acc.size == 0:
        return
    lo, hi = int(acc.min()), int(acc.max())
    if lo < ACC_MIN or hi > ACC_MAX:
        raise PlanningError(
            f"accumulator overflow{' in ' + where if where else ''}: "
            f"range [{lo}, {hi}] exceeds signed 32-bit")


def accumulator_requirements(geom: LayerGeom, bw: int) -> AccSpec:
    """Accumulation counts and register width demanded by one convolution."""
    def ceil_log2(n):
        return (n - 1).bit_length() if n > 1 else 0

    n_acc = geom.och * geom.ich * geom.fh * geom.fw
    bw_acc = ceil_log2(n_acc) + 2 * bw
    n_phys = geom.ich * geom.fh * geom.fw
    bw_phys = ceil_log2(n_phys) + 2 * bw
    if bw_acc > ACC_WIDTH:
        raise PlanningError(
            f"accumulator overflow risk: layer needs {bw_acc} bits > {ACC_WIDTH}")
    return AccSpec(width=ACC_WIDTH, n_acc=n_acc, bw_acc_required=bw_acc,
                   n_phys=n_phys, bw_phys_required=bw_phys)
