"""Golden integer-only interpreter.

Executes a Graph node by node with plain integer tensor math (no dataflow
machinery) to produce the bit-exact expected value of every activation.  The
dataflow simulator and the graph optimizer are both checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_ir import Graph, LayerNode, QuantSpec
from . import quant


@dataclass
class Tensor:
    """Integer activation tensor in depth-first order (channel innermost)."""

    dims: tuple          # (channels, height, width) or (features,)
    codes: np.ndarray    # flat int64, length = prod(dims)
    spec: QuantSpec

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1)
        n = int(np.prod(self.dims))
        if self.codes.size != n:
            raise ValueError(f"{self.codes.size} codes for dims {self.dims}")
        if not self.spec.contains(self.codes):
            raise ValueError("tensor codes outside quantization range")

    def chw(self) -> np.ndarray:
        """View as (C, H, W)."""
        if len(self.dims) == 1:
            return self.codes.reshape(self.dims[0], 1, 1)
        c, h, w = self.dims
        return self.codes.reshape(h, w, c).transpose(2, 0, 1)

    @classmethod
    def from_chw(cls, arr: np.ndarray, spec: QuantSpec) -> "Tensor":
        c, h, w = arr.shape
        return cls((c, h, w), arr.transpose(1, 2, 0).reshape(-1), spec)


def random_tensor(rng, node: LayerNode) -> Tensor:
    """Frame of uniform random in-range codes shaped like a node's output."""
    g = node.geom
    spec = node.y_spec or node.x_spec
    codes = rng.integers(spec.q_min, spec.q_max + 1, size=g.och * g.oh * g.ow)
    return Tensor((g.och, g.oh, g.ow), codes, spec)


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _conv_acc(node: LayerNode, x: Tensor, weights, biases) -> np.ndarray:
    """Raw 32-bit accumulator plane (och, oh, ow): bias plus the MAC sums."""
    g = node.geom
    xp = _padded(x.chw(), g.pad)
    w = np.asarray(weights).reshape(g.och, g.ich * g.fh * g.fw).astype(np.int64)
    # im2col: one row of taps per output position, ordered (c, fy, fx) to
    # match the och-major weight layout
    patches = np.lib.stride_tricks.sliding_window_view(xp, (g.fh, g.fw), axis=(1, 2))
    sub = patches[:, ::g.stride, ::g.stride][:, :g.oh, :g.ow]  # (ich,oh,ow,fh,fw)
    cols = sub.transpose(1, 2, 0, 3, 4).reshape(g.oh * g.ow, -1)
    acc = cols @ w.T  # (oh*ow, och)

    b = np.asarray(biases, dtype=np.int64)
    b_shift = (node.x_spec.frac + node.w_spec.frac) - node.b_spec.frac
    if b_shift < 0:
        raise quant.PlanningError(
            f"node {node.id!r}: bias frac {node.b_spec.frac} finer than the "
            f"accumulator scale {node.x_spec.frac + node.w_spec.frac}")
    acc = acc + (b << b_shift)
    quant.check_acc_range(acc, node.id)
    return acc.T.reshape(g.och, g.oh, g.ow)


def run_layer(node: LayerNode, inputs: list[Tensor], weights=None, biases=None
              ) -> Tensor:
    """Execute one node; conv-like nodes take weight/bias code arrays."""
    g = node.geom
    x = inputs[0]
    if node.kind not in ("input", "output", "linear") and \
            tuple(x.dims) != (g.ich, g.ih, g.iw):
        raise ValueError(f"node {node.id!r}: input dims {x.dims} do not match "
                         f"geometry {(g.ich, g.ih, g.iw)}")

    if node.kind in ("input", "output"):
        return x

    if node.is_conv:
        acc = _conv_acc(node, _as_chw_tensor(x, g), weights, biases)
        out = quant.requantize_array(
            acc, node.x_spec.frac + node.w_spec.frac, node.y_spec, node.relu)
        return Tensor.from_chw(out, node.y_spec)

    if node.kind in ("maxpool", "avgpool"):
        xp = _padded(x.chw(), g.pad)
        patches = np.lib.stride_tricks.sliding_window_view(
            xp, (g.fh, g.fw), axis=(1, 2))[:, ::g.stride, ::g.stride][:, :g.oh, :g.ow]
        if node.kind == "maxpool":
            acc = patches.max(axis=(3, 4)).astype(np.int64)
            in_frac = x.spec.frac
        else:
            area = g.fh * g.fw
            if area & (area - 1):
                raise quant.PlanningError(
                    f"node {node.id!r}: pooling area {area} is not a power of two")
            acc = patches.sum(axis=(3, 4), dtype=np.int64)
            in_frac = x.spec.frac + (area.bit_length() - 1)  # mean via shift
        out = quant.requantize_array(acc, in_frac, node.y_spec, node.relu)
        return Tensor.from_chw(out, node.y_spec)

    if node.kind == "add":
        a, b = inputs
        # align the finer operand down to the coarser scale with the same
        # rounding shift the hardware requantizer uses, then saturate once
        coarse = min(a.spec.frac, b.spec.frac)
        av = quant.round_shift_array(a.codes, a.spec.frac - coarse)
        bv = quant.round_shift_array(b.codes, b.spec.frac - coarse)
        out = quant.requantize_array(av + bv, coarse, node.y_spec, node.relu)
        return Tensor((g.och, g.oh, g.ow), out, node.y_spec)

    raise ValueError(f"node {node.id!r}: cannot execute kind {node.kind!r}")


def _as_chw_tensor(x: Tensor, g) -> Tensor:
    if len(x.dims) == 1:  # feature vector feeding a linear layer
        return Tensor((g.ich, g.ih, g.iw), x.codes, x.spec)
    return x


def _conv_with_skip(node: LayerNode, x: Tensor, skip: Tensor, weights, biases,
                    out_spec: QuantSpec, out_relu: bool) -> Tensor:
    """Folded residual tail: accumulator starts from the aligned skip value."""
    g = node.geom
    acc = _conv_acc(node, x, weights, biases)
    acc_frac = node.x_spec.frac + node.w_spec.frac
    shift = acc_frac - skip.spec.frac
    if shift < 0:
        raise quant.PlanningError(
            f"node {node.id!r}: skip operand finer than the accumulator scale")
    acc = acc + (skip.chw().astype(np.int64) << shift)
    quant.check_acc_range(acc, node.id)
    out = quant.requantize_array(acc, acc_frac, out_spec, out_relu)
    return Tensor.from_chw(out, out_spec)


def run_graph(g: Graph, frame: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Topological execution; returns the logits and every activation.

    Works on both raw graphs and optimizer output: skip edges resolve to the
    forwarded block input (temporal reuse) or to the merged node's second
    output (loop merge), and skip-sink convolutions fold the residual value
    into their accumulator.
    """
    acts: dict[str, Tensor] = {}
    ds_acts: dict[str, Tensor] = {}

    for nid in g.topo_order():
        node = g.nodes[nid]
        if node.kind == "input":
            if tuple(frame.dims) != (node.geom.och, node.geom.oh, node.geom.ow):
                raise ValueError(f"input frame dims {frame.dims} do not match model")
            acts[nid] = frame
            continue

        main_inputs, skip_input = [], None
        for e in g.producers(nid):
            if e.kind == "skip_forward":
                # values travel through the producer's window buffer: they are
                # the producer's own *input* tensor
                src_in = next(p.src for p in g.producers(e.src) if p.kind == "data")
                skip_input = acts[src_in]
            elif e.kind == "skip_merged":
                skip_input = ds_acts[e.src]
            else:
                main_inputs.append(acts[e.src])

        if skip_input is not None:
            out_spec = node.y_spec
            acts[nid] = _conv_with_skip(node, main_inputs[0], skip_input,
                                        g.weights[nid], g.biases[nid],
                                        out_spec, node.relu)
        else:
            acts[nid] = run_layer(node, main_inputs,
                                  g.weights.get(nid), g.biases.get(nid))

        if node.skip_role == "merged_downsample":
            # second output stream: the downsample result, computed by the
            # same task from the same input
            ann = next(a for a in g.skip_annotations if a.source == nid)
            ds_acts[nid] = run_layer(ann.downsample_node, main_inputs,
                                     g.weights[ann.downsample_id],
                                     g.biases[ann.downsample_id])

    logits = acts[g.nodes[g.output_id].predecessors[0]]
    if len(logits.dims) == 3 and logits.dims[1] == logits.dims[2] == 1:
        logits = Tensor((logits.dims[0],), logits.codes, logits.spec)
    acts[g.output_id] = logits
    return logits, acts
