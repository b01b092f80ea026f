"""Unroll-factor allocation and static sizing.

The throughput model: a convolution with cp = k * och_par * ow_par parallel
MACs finishes a frame in c / cp cycles, so the pipeline runs at the worst
cp_i / c_i.  The allocator balances that ratio across layers, spending a DSP
budget in which one multiplier provides ow_par packed MACs (so a layer's DSP
cost is k * och_par).  The single free variable is och_par of the costliest
layer, searched over the divisors of its output-channel count; every other
layer is rounded up to the nearest feasible parallelism and the budget is
re-checked.

Also houses the window-buffer partitioning math and the stream-depth rules
the simulator elaborates from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .model_ir import Graph, LayerGeom, LayerNode, layer_macs
from .quant import PlanningError, accumulator_requirements

PIPELINE_FILL_CYCLES = 8  # intra-task pipeline refill between frame loops

BOARDS = {
    "ultra96": {"n_par": 360, "freq_mhz": 214.0},
    "kv260": {"n_par": 1248, "freq_mhz": 274.0},
}


@dataclass(frozen=True)
class WindowPlan:
    """Line-buffer sizing and partitioning for one windowed task."""

    buffer_codes: int        # codes retained between the oldest and newest tap
    elements: int            # tap registers the slices feed
    slice_sizes: list[int]   # inter-tap FIFO capacities, oldest side first
    slice_count: int
    rewire_step: int         # slice feeding distance: 1 plain, 2 when packed
    padding_enabled: bool
    s1: int                  # same-row tap distance
    s2: int                  # row-crossing tap distance


@dataclass(frozen=True)
class LayerAlloc:
    node_id: str
    kind: str
    k: int
    och_par: int
    ow_par: int
    cp: int             # parallel MACs: k * och_par * ow_par
    dsp: int            # multipliers: k * och_par
    c: int              # MACs per frame
    r: Fraction         # c / c_max
    cw: int             # weight codes consumed per cycle
    och_groups: int

    @property
    def th(self) -> Fraction:
        return Fraction(self.cp, self.c)


@dataclass
class AllocationPlan:
    layers: dict[str, LayerAlloc]
    n_par: int
    i_max: str
    cp_tot: int                      # DSP-equivalents, constrained by n_par
    cp_tot_macs: int
    window_plans: dict[str, WindowPlan] = field(default_factory=dict)
    streams: dict = field(default_factory=dict)

    @property
    def th(self) -> Fraction:
        return min(a.th for a in self.layers.values())

    @property
    def bottleneck(self) -> str:
        return min(self.layers.values(), key=lambda a: a.th).node_id

    @property
    def interval_cycles(self) -> Fraction:
        return 1 / self.th


@dataclass(frozen=True)
class StreamDepth:
    kind: str          # act | param | skip | dma_in | dma_out
    token_codes: int
    depth_tokens: int
    channels: int = 1

    @property
    def capacity_codes(self) -> int:
        return self.token_codes * self.depth_tokens


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def ow_par_for(node: LayerNode, bw: int) -> int:
    """Width unroll is a function of the activation width: 2 when the 8-bit
    double-MAC packing applies, 1 otherwise (and never wider than the row)."""
    if not node.is_conv:
        return 1
    return 2 if (bw == 8 and node.geom.ow >= 2) else 1


def _alloc_rows(g: Graph) -> list[LayerNode]:
    rows = [n for nid, n in g.nodes.items() if n.is_conv]
    for ann in g.skip_annotations:
        if ann.kind == "merged_output":
            rows.append(ann.downsample_node)
    return rows


def solve_allocation(g: Graph, n_par: int, bw: int = 8) -> AllocationPlan:
    """Balanced unroll assignment maximizing the bottleneck throughput."""
    rows = _alloc_rows(g)
    if not rows:
        raise PlanningError("graph has no convolution layers to allocate")
    for node in rows:
        accumulator_requirements(node.geom, bw)  # fails fast on width risk

    costs = {n.id: layer_macs(n.geom) for n in rows}
    ow_par = {n.id: ow_par_for(n, bw) for n in rows}
    ks = {n.id: n.geom.fh * n.geom.fw for n in rows}

    i_max = max(rows, key=lambda n: costs[n.id]).id
    c_max = costs[i_max]
    node_max = next(n for n in rows if n.id == i_max)

    min_dsp = sum(ks.values())
    if min_dsp > n_par:
        raise PlanningError(
            f"budget infeasible: even one output lane per layer needs "
            f"{min_dsp} multipliers, budget is {n_par}")

    for d in reversed(_divisors(node_max.geom.och)):
        target = Fraction(ks[i_max] * d * ow_par[i_max], c_max)
        chosen: dict[str, int] = {}
        total_dsp = 0
        for node in rows:
            nid = node.id
            need = target * costs[nid] / (ks[nid] * ow_par[nid])
            par = next((dv for dv in _divisors(node.geom.och) if dv >= need),
                       node.geom.och)
            chosen[nid] = par
            total_dsp += ks[nid] * par
        if total_dsp <= n_par:
            break
    else:
        raise PlanningError(
            f"budget infeasible: no unroll of {i_max!r} fits {n_par} multipliers")

    layers = {}
    for node in rows:
        nid = node.id
        par = chosen[nid]
        layers[nid] = LayerAlloc(
            node_id=nid, kind=node.kind, k=ks[nid], och_par=par,
            ow_par=ow_par[nid], cp=ks[nid] * par * ow_par[nid],
            dsp=ks[nid] * par, c=costs[nid], r=Fraction(costs[nid], c_max),
            cw=parameter_bandwidth(node.geom, par),
            och_groups=node.geom.och // par)

    plan = AllocationPlan(
        layers=layers, n_par=n_par, i_max=i_max,
        cp_tot=sum(a.dsp for a in layers.values()),
        cp_tot_macs=sum(a.cp for a in layers.values()))
    for nid, node in g.nodes.items():
        if node.is_conv:
            plan.window_plans[nid] = window_buffer_plan(node.geom, ow_par[nid])
        elif node.kind in ("maxpool", "avgpool"):
            gm = node.geom
            if (gm.fh, gm.fw) != (gm.ih, gm.iw):  # global pools stream directly
                plan.window_plans[nid] = window_buffer_plan(gm, 1)
    plan.streams = stream_depths(g, plan)
    return plan


def window_buffer_plan(geom: LayerGeom, ow_par: int) -> WindowPlan:
    """Line-buffer retention and FIFO partitioning for one sliding window."""
    if geom.fw > geom.iw:
        raise PlanningError(f"filter width {geom.fw} exceeds row width {geom.iw}")
    span = geom.fw + geom.stride * (ow_par - 1)
    buffer_codes = ((geom.fh - 1) * geom.iw + span - 1) * geom.ich
    elements = span * geom.fh
    s1 = geom.ich
    s2 = geom.ich * (geom.iw - span + 1)
    if elements == 1:
        slice_sizes: list[int] = []
    else:
        row = [s1] * (span - 1)
        slice_sizes = list(row)
        for _ in range(geom.fh - 1):
            slice_sizes.append(s2)
            slice_sizes.extend(row)
    assert sum(slice_sizes) == buffer_codes
    return WindowPlan(
        buffer_codes=buffer_codes, elements=elements, slice_sizes=slice_sizes,
        slice_count=elements if buffer_codes else 0, rewire_step=ow_par,
        padding_enabled=geom.pad > 0, s1=s1, s2=s2)


def parameter_bandwidth(geom: LayerGeom, och_par: int) -> int:
    """Weight codes the parameter task must deliver per clock cycle.

    The width unroll reuses each weight across its packed lanes, so only the
    filter size and the channel unroll contribute.
    """
    return och_par * geom.fh * geom.fw


def skip_stream_capacity_codes(buffer_codes: int, sink_och: int) -> int:
    """Forward-FIFO capacity: the optimized skip buffering plus the one
    position in flight between the producer's intake and the sink's
    window-fill lookahead."""
    return buffer_codes + sink_och


def stream_depths(g: Graph, plan: AllocationPlan) -> dict:
    """Token sizes and depths for every stream the network elaborates."""
    depths: dict = {}
    for alloc in plan.layers.values():
        if alloc.node_id in g.nodes:  # merged downsamples share conv0's task
            depths[("param", alloc.node_id)] = StreamDepth(
                kind="param", token_codes=alloc.cw, depth_tokens=2)

    for e in g.edges:
        src = g.nodes[e.src]
        if e.kind in ("skip_forward", "skip_merged"):
            ann = next(a for a in g.skip_annotations if a.conv1 == e.dst)
            sink = plan.layers[e.dst]
            cap = skip_stream_capacity_codes(ann.buffer_codes, g.nodes[e.dst].geom.och)
            depth = -(-cap // sink.och_par)
            ann.fifo_depth = depth
            depths[(e.src, e.dst, e.kind)] = StreamDepth(
                kind="skip", token_codes=sink.och_par, depth_tokens=depth)
        elif src.kind == "input":
            depths[(e.src, e.dst, e.kind)] = StreamDepth(
                kind="dma_in", token_codes=src.geom.och, depth_tokens=4)
        elif src.is_conv:
            a = plan.layers[e.src]
            depths[(e.src, e.dst, e.kind)] = StreamDepth(
                kind="act", token_codes=a.och_par, depth_tokens=a.och_groups,
                channels=a.ow_par)
        else:  # pooling producers emit whole positions
            depths[(e.src, e.dst, e.kind)] = StreamDepth(
                kind="act", token_codes=src.geom.och, depth_tokens=2)
    return depths


def predict(plan: AllocationPlan, freq_mhz: float) -> dict:
    """Analytic throughput/latency figures for a plan at a clock frequency."""
    th = plan.th
    fps = freq_mhz * 1e6 * float(th)
    total_macs = sum(a.c for a in plan.layers.values())
    gops = 2.0 * total_macs * fps * 1e-9
    fill = PIPELINE_FILL_CYCLES * len(plan.layers)
    latency_cycles = fill + math.ceil(1 / th)
    return {
        "fps": fps,
        "gops": gops,
        "latency_estimate_cycles": latency_cycles,
        "interval_cycles": float(1 / th),
        "bottleneck": plan.bottleneck,
    }


def plan_to_dict(plan: AllocationPlan, freq_mhz: float) -> dict:
    layers = {}
    for nid, a in plan.layers.items():
        entry = {
            "kind": a.kind, "och_par": a.och_par, "ow_par": a.ow_par,
            "k": a.k, "cp": a.cp, "dsp": a.dsp, "c": a.c, "cw": a.cw,
            "och_groups": a.och_groups, "th": float(a.th),
        }
        wp = plan.window_plans.get(nid)
        if wp is not None:
            entry["window"] = {
                "buffer_codes": wp.buffer_codes, "elements": wp.elements,
                "slices": wp.slice_sizes, "slice_count": wp.slice_count,
                "rewire_step": wp.rewire_step, "padding": wp.padding_enabled,
            }
        layers[nid] = entry
    streams = {
        "/".join(str(p) for p in key): {
            "kind": s.kind, "token_codes": s.token_codes,
            "depth_tokens": s.depth_tokens, "channels": s.channels,
        }
        for key, s in plan.streams.items()
    }
    totals = dict(predict(plan, freq_mhz))
    totals.update({"cp_tot": plan.cp_tot, "cp_tot_macs": plan.cp_tot_macs,
                   "n_par": plan.n_par, "i_max": plan.i_max,
                   "freq_mhz": freq_mhz})
    return {"layers": layers, "streams": streams, "totals": totals}
