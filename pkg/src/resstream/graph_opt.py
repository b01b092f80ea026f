"""Residual-block rewrites that shrink skip-connection buffering.

Three cooperating transforms per block:

* temporal reuse - when the short branch has no convolution, the skip stream
  is re-sourced from the first long-branch convolution's window buffer, which
  already holds the tensor; a second output stream forwards the values.
* loop merge - when the short branch is a pointwise downsample, its loop is
  merged into the first long-branch convolution, which then drives a second
  output stream with the downsample result.
* add fold - the elementwise add disappears; the second convolution's
  accumulator register starts from the aligned skip value instead.

The rewrites are annotation-level: the reference interpreter resolves the
annotated edges to the same integer values, so optimized graphs stay
bit-identical to their sources.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model_ir import Edge, Graph, LayerGeom, LayerNode, clone_graph


class GraphOptError(ValueError):
    """Residual topology this optimizer does not support."""


@dataclass(frozen=True)
class ResidualBlock:
    conv0: str
    conv1: str
    downsample: str | None
    merge: str

    @property
    def has_downsample(self) -> bool:
        return self.downsample is not None


@dataclass
class SkipAnnotation:
    kind: str                 # forwarded_window | merged_output
    conv1: str                # skip sink (accumulator-initialized conv)
    source: str               # node whose task drives the skip stream
    buffer_codes: int         # skip buffering after optimization
    fifo_depth: int | None = None   # tokens; sized by the allocator
    downsample_id: str | None = None
    downsample_node: LayerNode | None = None


def detect_blocks(g: Graph) -> list[ResidualBlock]:
    """Assign every add node to one residual block or reject the topology."""
    blocks = []
    for node in g.nodes.values():
        if node.kind != "add":
            continue
        block = None
        p1, p2 = node.predecessors
        for long_id, short_id in ((p1, p2), (p2, p1)):
            long_node = g.nodes.get(long_id)
            if long_node is None or not long_node.is_conv:
                continue
            data_preds = [e.src for e in g.producers(long_id) if e.kind == "data"]
            if len(data_preds) != 1:
                continue
            conv0 = g.nodes.get(data_preds[0])
            if conv0 is None or not conv0.is_conv:
                continue
            origin = [e.src for e in g.producers(conv0.id) if e.kind == "data"]
            if len(origin) != 1:
                continue
            origin = origin[0]
            if short_id == origin:
                block = ResidualBlock(conv0.id, long_id, None, node.id)
                break
            short_node = g.nodes.get(short_id)
            if short_node is not None and short_node.is_conv:
                short_pred = [e.src for e in g.producers(short_id) if e.kind == "data"]
                if short_pred == [origin]:
                    block = ResidualBlock(conv0.id, long_id, short_id, node.id)
                    break
        if block is None:
            raise GraphOptError(
                f"add node {node.id!r}: branches do not reconverge as a "
                "(skip, conv0->conv1) residual block")
        blocks.append(block)
    return blocks


def receptive_field(conv0: LayerGeom, conv1: LayerGeom) -> tuple[int, int, int]:
    """Extent of conv0 input influencing one conv1 window (conv1 stride 1)."""
    if conv1.stride != 1:
        raise GraphOptError("receptive-field sizing assumes the second "
                            "convolution has stride 1")
    rh0 = conv1.fh + conv0.fh - 1
    rw0 = conv1.fw + conv0.fw - 1
    return rh0, rw0, rh0 * rw0


def skip_buffer_naive(g: Graph, b: ResidualBlock) -> int:
    """Codes a dedicated skip buffer holds while the long branch warms up."""
    g0 = g.nodes[b.conv0].geom
    g1 = g.nodes[b.conv1].geom
    rh0, rw0, _ = receptive_field(g0, g1)
    return (g0.iw * (rh0 - 1) + rw0) * g0.ich


def skip_buffer_optimized(g: Graph, b: ResidualBlock) -> int:
    """Skip buffering after the rewrites: the conv1 window-buffer size."""
    g1 = g.nodes[b.conv1].geom
    return ((g1.fh - 1) * g1.iw + g1.fw - 1) * g1.ich


def _already_rewritten(g: Graph, b: ResidualBlock) -> bool:
    return any(a.conv1 == b.conv1 for a in g.skip_annotations)


def apply_temporal_reuse(g: Graph, b: ResidualBlock) -> Graph:
    """Re-source the skip edge from conv0's window buffer (no-downsample)."""
    if b.has_downsample:
        raise GraphOptError(f"block at {b.merge!r} has a downsample branch; "
                            "temporal reuse applies to identity skips only")
    if _already_rewritten(g, b):
        return g
    g = clone_graph(g)
    origin = next(e.src for e in g.producers(b.conv0) if e.kind == "data")
    g.edges = [e for e in g.edges if not (e.src == origin and e.dst == b.merge)]
    g.edges.append(Edge(b.conv0, b.merge, kind="skip_forward", src_port=1))
    merge = g.nodes[b.merge]
    merge.predecessors = [b.conv1, b.conv0]
    g.nodes[b.conv0].skip_role = "skip_source"
    g.skip_annotations.append(SkipAnnotation(
        kind="forwarded_window", conv1=b.conv1, source=b.conv0,
        buffer_codes=skip_buffer_optimized(g, b)))
    return g


def apply_loop_merge(g: Graph, b: ResidualBlock) -> Graph:
    """Fuse the pointwise downsample into conv0's task (second output)."""
    if not b.has_downsample:
        raise GraphOptError(f"block at {b.merge!r} has no downsample branch; "
                            "loop merge needs one")
    if _already_rewritten(g, b):
        return g
    g = clone_graph(g)
    ds = g.nodes.pop(b.downsample)
    g.edges = [e for e in g.edges if b.downsample not in (e.src, e.dst)]
    g.edges.append(Edge(b.conv0, b.merge, kind="skip_merged", src_port=1))
    merge = g.nodes[b.merge]
    merge.predecessors = [b.conv1, b.conv0]
    g.nodes[b.conv0].skip_role = "merged_downsample"
    g.skip_annotations.append(SkipAnnotation(
        kind="merged_output", conv1=b.conv1, source=b.conv0,
        buffer_codes=skip_buffer_optimized(g, b),
        downsample_id=ds.id, downsample_node=ds))
    return g


def fold_add_into_accumulator(g: Graph, b: ResidualBlock) -> Graph:
    """Delete the add; conv1's accumulator starts from the skip value."""
    merge = g.nodes.get(b.merge)
    if merge is None:  # already folded
        return g
    skip_edges = [e for e in g.producers(b.merge) if e.kind.startswith("skip")]
    if not skip_edges:
        raise GraphOptError(f"block at {b.merge!r}: fold requires a prior "
                            "temporal-reuse or loop-merge rewrite")
    data_preds = [e.src for e in g.producers(b.merge) if e.kind == "data"]
    if data_preds != [b.conv1]:
        raise GraphOptError(
            f"add node {b.merge!r} must consume exactly the long-branch "
            f"convolution {b.conv1!r}, found {data_preds}")

    g = clone_graph(g)
    skip = skip_edges[0]
    conv1 = g.nodes[b.conv1]
    # the sink inherits the merge's output quantization and activation
    conv1.y_spec = merge.y_spec
    conv1.relu = merge.relu
    conv1.skip_role = "skip_sink"

    new_edges = []
    for e in g.edges:
        if e.dst == b.merge:
            if e.kind.startswith("skip"):
                new_edges.append(Edge(e.src, b.conv1, e.kind, e.src_port))
            continue  # drop the data edge into the add
        if e.src == b.merge:
            new_edges.append(Edge(b.conv1, e.dst, e.kind, e.src_port))
            continue
        new_edges.append(e)
    g.edges = new_edges
    for node in g.nodes.values():
        node.predecessors = [b.conv1 if p == b.merge else p
                             for p in node.predecessors]
    del g.nodes[b.merge]
    return g


def optimize(g: Graph) -> Graph:
    """Detect and rewrite every residual block; idempotent."""
    while True:
        blocks = [b for b in detect_blocks(g) if not _already_rewritten(g, b)]
        if not blocks:
            return g
        b = blocks[0]
        g = apply_loop_merge(g, b) if b.has_downsample else apply_temporal_reuse(g, b)
        g = fold_add_into_accumulator(g, b)
