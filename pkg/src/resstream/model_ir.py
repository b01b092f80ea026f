"""Quantized-network intermediate representation.

Holds the graph types (geometry, quantization specs, nodes, edges, weight
tensors), the on-disk manifest/blob format, structural validation, and the
CIFAR-10 benchmark topology generators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

CONV_KINDS = ("conv", "pointwise_conv", "linear")
POOL_KINDS = ("maxpool", "avgpool")
NODE_KINDS = CONV_KINDS + POOL_KINDS + ("add", "input", "output")

MANIFEST_VERSION = 1


class ModelError(ValueError):
    """Malformed manifest, blob, or graph data."""


@dataclass(frozen=True)
class QuantSpec:
    """Fixed-point format: integer code times 2**(-frac), optionally signed."""

    bw: int
    frac: int
    signed: bool = True

    def __post_init__(self):
        if self.bw not in (8, 16, 32):
            raise ModelError(f"unsupported bit-width {self.bw}")

    @property
    def q_min(self) -> int:
        return -(1 << (self.bw - 1)) if self.signed else 0

    @property
    def q_max(self) -> int:
        return (1 << (self.bw - 1)) - 1 if self.signed else (1 << self.bw) - 1

    def contains(self, codes) -> bool:
        codes = np.asarray(codes)
        return codes.size == 0 or (
            int(codes.min()) >= self.q_min and int(codes.max()) <= self.q_max
        )


@dataclass(frozen=True)
class LayerGeom:
    """Per-layer tensor and filter dimensions."""

    ich: int
    ih: int
    iw: int
    och: int
    oh: int
    ow: int
    fh: int = 1
    fw: int = 1
    stride: int = 1
    pad: int = 0

    def expected_out(self) -> tuple[int, int]:
        oh = (self.ih + 2 * self.pad - self.fh) // self.stride + 1
        ow = (self.iw + 2 * self.pad - self.fw) // self.stride + 1
        return oh, ow


@dataclass
class LayerNode:
    id: str
    kind: str
    geom: LayerGeom
    x_spec: QuantSpec
    w_spec: QuantSpec | None = None
    b_spec: QuantSpec | None = None
    y_spec: QuantSpec | None = None
    relu: bool = False
    predecessors: list[str] = field(default_factory=list)
    skip_role: str = "none"  # none | skip_source | skip_sink | merged_downsample

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    def weight_count(self) -> int:
        g = self.geom
        return g.och * g.ich * g.fh * g.fw


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str = "data"  # data | skip_forward | skip_merged
    src_port: int = 0


@dataclass
class Graph:
    """Validated network graph plus its integer weight/bias tensors."""

    nodes: dict[str, LayerNode]
    edges: list[Edge]
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)
    skip_annotations: list = field(default_factory=list)

    def node(self, node_id: str) -> LayerNode:
        return self.nodes[node_id]

    def consumers(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node_id]

    def producers(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.dst == node_id]

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes.values() if n.kind == "input")

    @property
    def output_id(self) -> str:
        return next(n.id for n in self.nodes.values() if n.kind == "output")

    def topo_order(self) -> list[str]:
        indeg = {nid: len(self.nodes[nid].predecessors) for nid in self.nodes}
        ready = [nid for nid, d in indeg.items() if d == 0]
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for e in self.consumers(nid):
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        if len(order) != len(self.nodes):
            raise ModelError("graph contains a cycle")
        return order


@dataclass(frozen=True)
class Violation:
    node: str
    rule: str
    detail: str

    def __str__(self):
        return f"{self.node}: [{self.rule}] {self.detail}"


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def layer_macs(geom: LayerGeom) -> int:
    """MAC count of a conv-like layer: oh*ow*och*ich*fh*fw."""
    return geom.oh * geom.ow * geom.och * geom.ich * geom.fh * geom.fw


def validate_graph(g: Graph) -> list[Violation]:
    """Check every structural invariant; returns an empty list when valid."""
    out: list[Violation] = []

    def bad(node, rule, detail):
        out.append(Violation(node, rule, detail))

    inputs = [n for n in g.nodes.values() if n.kind == "input"]
    outputs = [n for n in g.nodes.values() if n.kind == "output"]
    if len(inputs) != 1:
        bad("<graph>", "io", f"expected 1 input node, found {len(inputs)}")
    if len(outputs) != 1:
        bad("<graph>", "io", f"expected 1 output node, found {len(outputs)}")

    try:
        g.topo_order()
    except ModelError:
        bad("<graph>", "acyclic", "graph contains a cycle")

    edge_pairs = {(e.src, e.dst) for e in g.edges}
    for node in g.nodes.values():
        gm = node.geom
        if node.kind not in NODE_KINDS:
            bad(node.id, "kind", f"unknown kind {node.kind!r}")
            continue
        positive = [gm.ich, gm.ih, gm.iw, gm.och, gm.oh, gm.ow, gm.fh, gm.fw, gm.stride]
        if min(positive) < 1 or gm.pad < 0:
            bad(node.id, "geometry", "dimension fields must be >= 1 (pad >= 0)")
            continue
        if node.kind in CONV_KINDS + POOL_KINDS:
            eoh, eow = gm.expected_out()
            if (gm.oh, gm.ow) != (eoh, eow):
                bad(node.id, "geometry",
                    f"oh/ow = {(gm.oh, gm.ow)} but stride formula gives {(eoh, eow)}")
        if node.kind == "pointwise_conv" and (gm.fh, gm.fw) != (1, 1):
            bad(node.id, "geometry", "pointwise convolution must have 1x1 filter")

        for pid in node.predecessors:
            if pid not in g.nodes:
                bad(node.id, "edges", f"dangling predecessor {pid!r}")
            elif (pid, node.id) not in edge_pairs:
                bad(node.id, "edges", f"predecessor {pid!r} missing from edge list")

        if node.is_conv:
            w = g.weights.get(node.id)
            b = g.biases.get(node.id)
            if w is None or w.size != node.weight_count():
                got = None if w is None else w.size
                bad(node.id, "weights",
                    f"expected {node.weight_count()} weight codes, got {got}")
            elif node.w_spec is not None and not node.w_spec.contains(w):
                bad(node.id, "weights", "weight code outside its quantization range")
            if b is None or b.size != gm.och:
                got = None if b is None else b.size
                bad(node.id, "weights", f"expected {gm.och} bias codes, got {got}")
            elif node.b_spec is not None and not node.b_spec.contains(b):
                bad(node.id, "weights", "bias code outside its quantization range")

        if node.kind == "add":
            if len(node.predecessors) != 2:
                bad(node.id, "add-arity",
                    f"add node needs exactly 2 predecessors, has {len(node.predecessors)}")
            else:
                geoms = []
                for pid in node.predecessors:
                    if pid in g.nodes:
                        pg = g.nodes[pid].geom
                        geoms.append((pg.och, pg.oh, pg.ow))
                if len(set(geoms)) > 1:
                    bad(node.id, "add-arity", f"operand geometries differ: {geoms}")

    for e in g.edges:
        if e.src not in g.nodes or e.dst not in g.nodes:
            bad(e.src, "edges", f"edge ({e.src} -> {e.dst}) references unknown node")
            continue
        if e.kind != "data":
            continue  # skip streams carry re-routed tensors, checked by the optimizer
        src, dst = g.nodes[e.src], g.nodes[e.dst]
        if dst.kind in ("add", "output"):
            continue
        produced = (src.geom.och, src.geom.oh, src.geom.ow)
        consumed = (dst.geom.ich, dst.geom.ih, dst.geom.iw)
        if produced != consumed:
            bad(e.dst, "edge-geometry",
                f"producer {e.src} emits {produced}, consumer expects {consumed}")
    return out


# ---------------------------------------------------------------------------
# Manifest / blob serialization
# ---------------------------------------------------------------------------

_CODE_BYTES = {8: 1, 16: 2, 32: 4}
_CODE_DTYPE = {8: "<i1", 16: "<i2", 32: "<i4"}


def _spec_to_json(s: QuantSpec | None):
    return None if s is None else {"bw": s.bw, "frac": s.frac, "signed": s.signed}


def _spec_from_json(d, node_id, name) -> QuantSpec | None:
    if d is None:
        return None
    try:
        return QuantSpec(int(d["bw"]), int(d["frac"]), bool(d["signed"]))
    except (KeyError, TypeError, ModelError) as exc:
        raise ModelError(f"node {node_id!r}: bad spec {name!r}: {exc}") from exc


def _read_codes(blob: bytes, ref, spec: QuantSpec, node_id: str, name: str) -> np.ndarray:
    offset, length = int(ref["offset"]), int(ref["len"])
    if offset < 0 or offset + length > len(blob):
        raise ModelError(
            f"node {node_id!r}: {name} blob range [{offset}, {offset + length}) "
            f"exceeds blob of {len(blob)} bytes")
    step = _CODE_BYTES[spec.bw]
    if length % step:
        raise ModelError(f"node {node_id!r}: {name} byte length {length} not a "
                         f"multiple of the {spec.bw}-bit code size")
    codes = np.frombuffer(blob, dtype=_CODE_DTYPE[spec.bw], count=length // step,
                          offset=offset).astype(np.int64)
    if not spec.contains(codes):
        raise ModelError(f"node {node_id!r}: {name} tensor has a code outside "
                         f"[{spec.q_min}, {spec.q_max}]")
    return codes


def parse_model(manifest_text: str, weight_blob: bytes) -> Graph:
    """Parse and fully validate a manifest + weight blob into a Graph."""
    try:
        doc = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"manifest is not valid JSON: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ModelError(f"unsupported manifest version {doc.get('version')!r}")

    nodes: dict[str, LayerNode] = {}
    weights, biases = {}, {}
    for nd in doc.get("nodes", []):
        nid = nd.get("id")
        if not isinstance(nid, str) or not nid:
            raise ModelError("node without a string 'id' field")
        if nid in nodes:
            raise ModelError(f"node {nid!r}: duplicate id")
        kind = nd.get("kind")
        if kind not in NODE_KINDS:
            raise ModelError(f"node {nid!r}: unknown kind {kind!r}")
        try:
            geom = LayerGeom(**{k: int(v) for k, v in nd["geom"].items()})
        except (KeyError, TypeError) as exc:
            raise ModelError(f"node {nid!r}: bad geom: {exc}") from exc
        specs = nd.get("specs", {})
        node = LayerNode(
            id=nid, kind=kind, geom=geom,
            x_spec=_spec_from_json(specs.get("x"), nid, "x"),
            w_spec=_spec_from_json(specs.get("w"), nid, "w"),
            b_spec=_spec_from_json(specs.get("b"), nid, "b"),
            y_spec=_spec_from_json(specs.get("y"), nid, "y"),
            relu=bool(nd.get("relu", False)),
            predecessors=list(nd.get("preds", [])),
            skip_role=nd.get("skip_role", "none"),
        )
        if node.x_spec is None:
            raise ModelError(f"node {nid!r}: missing spec 'x'")
        if kind in CONV_KINDS:
            if node.w_spec is None or node.b_spec is None:
                raise ModelError(f"node {nid!r}: conv node missing 'w' or 'b' spec")
            if "weight_ref" not in nd or "bias_ref" not in nd:
                raise ModelError(f"node {nid!r}: conv node missing weight_ref/bias_ref")
            weights[nid] = _read_codes(weight_blob, nd["weight_ref"], node.w_spec, nid, "weight")
            biases[nid] = _read_codes(weight_blob, nd["bias_ref"], node.b_spec, nid, "bias")
            if weights[nid].size != node.weight_count():
                raise ModelError(
                    f"node {nid!r}: weight tensor has {weights[nid].size} codes, "
                    f"expected och*ich*fh*fw = {node.weight_count()}")
            if biases[nid].size != geom.och:
                raise ModelError(f"node {nid!r}: bias tensor has {biases[nid].size} "
                                 f"codes, expected och = {geom.och}")
        nodes[nid] = node

    edges = []
    for pair in doc.get("edges", []):
        if isinstance(pair, dict):
            edges.append(Edge(pair["src"], pair["dst"], pair.get("kind", "data"),
                              int(pair.get("src_port", 0))))
        else:
            edges.append(Edge(pair[0], pair[1]))
    g = Graph(nodes=nodes, edges=edges, weights=weights, biases=biases)

    violations = validate_graph(g)
    if violations:
        raise ModelError("invalid model: " + "; ".join(str(v) for v in violations))
    return g


def serialize_model(g: Graph) -> tuple[str, bytes]:
    """Inverse of parse_model; weight blob is repacked densely."""
    blob = bytearray()
    refs = {}
    for nid in g.nodes:
        node = g.nodes[nid]
        if not node.is_conv:
            continue
        wb = np.asarray(g.weights[nid]).astype(_CODE_DTYPE[node.w_spec.bw]).tobytes()
        bb = np.asarray(g.biases[nid]).astype(_CODE_DTYPE[node.b_spec.bw]).tobytes()
        refs[nid] = ({"offset": len(blob), "len": len(wb)},
                     {"offset": len(blob) + len(wb), "len": len(bb)})
        blob.extend(wb)
        blob.extend(bb)

    nodes_json = []
    for node in g.nodes.values():
        nd = {
            "id": node.id,
            "kind": node.kind,
            "geom": {k: getattr(node.geom, k) for k in
                     ("ich", "ih", "iw", "och", "oh", "ow", "fh", "fw", "stride", "pad")},
            "specs": {"x": _spec_to_json(node.x_spec), "w": _spec_to_json(node.w_spec),
                      "b": _spec_to_json(node.b_spec), "y": _spec_to_json(node.y_spec)},
            "relu": node.relu,
            "preds": list(node.predecessors),
            "skip_role": node.skip_role,
        }
        if node.id in refs:
            nd["weight_ref"], nd["bias_ref"] = refs[node.id]
        nodes_json.append(nd)
    edges_json = [
        {"src": e.src, "dst": e.dst, "kind": e.kind, "src_port": e.src_port}
        if (e.kind != "data" or e.src_port != 0) else [e.src, e.dst]
        for e in g.edges
    ]
    text = json.dumps({"version": MANIFEST_VERSION, "nodes": nodes_json,
                       "edges": edges_json}, indent=1)
    return text, bytes(blob)


# ---------------------------------------------------------------------------
# Benchmark topology generators
# ---------------------------------------------------------------------------

# Fixed fixed-point layout for the generated nets: 8-bit activations and
# weights, 16-bit biases at frac_x + frac_w.  The second convolution of every
# residual block keeps its raw 32-bit accumulator as the "output" so that the
# following add is a plain saturating merge; the optimizer folds that add into
# the accumulator without changing a single bit.
_X_IN = QuantSpec(8, 7, True)      # network input
_X_ACT = QuantSpec(8, 5, True)     # inter-layer activations
_W = QuantSpec(8, 7, True)
_B = QuantSpec(16, 12, True)       # frac_x + frac_w for _X_ACT inputs
_B_IN = QuantSpec(16, 14, True)    # stem bias: frac_x(7) + frac_w(7)
_ACC_WIDE = QuantSpec(32, 12, True)
_FC_OUT = QuantSpec(8, 2, True)


def _rand_weights(rng, count, lim=64):
    return rng.integers(-lim, lim, size=count, dtype=np.int64)


def _rand_biases(rng, count, lim=2048):
    return rng.integers(-lim, lim, size=count, dtype=np.int64)


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.nodes: dict[str, LayerNode] = {}
        self.edges: list[Edge] = []
        self.weights, self.biases = {}, {}

    def add(self, node: LayerNode, fill=True):
        self.nodes[node.id] = node
        for pid in node.predecessors:
            self.edges.append(Edge(pid, node.id))
        if node.is_conv and fill:
            self.weights[node.id] = _rand_weights(self.rng, node.weight_count())
            self.biases[node.id] = _rand_biases(self.rng, node.geom.och)
        return node.id

    def conv(self, nid, pred, ich, hw, och, ohw, fh=3, stride=1, pad=1, *,
             x_spec=_X_ACT, y_spec=_X_ACT, b_spec=_B, relu=True, kind="conv"):
        geom = LayerGeom(ich=ich, ih=hw, iw=hw, och=och, oh=ohw, ow=ohw,
                         fh=fh, fw=fh, stride=stride, pad=pad)
        return self.add(LayerNode(nid, kind, geom, x_spec, _W, b_spec, y_spec,
                                  relu=relu, predecessors=[pred]))

    def graph(self):
        return Graph(nodes=self.nodes, edges=self.edges,
                     weights=self.weights, biases=self.biases)


def _build_resnet(seed: int, blocks_per_stage: int) -> Graph:
    b = _Builder(seed)
    hw = 32
    b.add(LayerNode("input", "input",
                    LayerGeom(ich=3, ih=hw, iw=hw, och=3, oh=hw, ow=hw),
                    x_spec=_X_IN, y_spec=_X_IN))
    prev = b.conv("stem", "input", 3, hw, 16, hw, x_spec=_X_IN, b_spec=_B_IN)

    ich = 16
    for stage, och in enumerate((16, 32, 64)):
        for blk in range(blocks_per_stage):
            name = f"s{stage}b{blk}"
            entry = blk == 0 and och != ich
            stride = 2 if entry else 1
            out_hw = hw // stride
            block_in = prev
            c0 = b.conv(f"{name}_conv0", block_in, ich, hw, och, out_hw, stride=stride)
            c1 = b.conv(f"{name}_conv1", c0, och, out_hw, och, out_hw,
                        y_spec=_ACC_WIDE, relu=False)
            if entry:
                skip = b.conv(f"{name}_down", block_in, ich, hw, och, out_hw,
                              fh=1, stride=stride, pad=0, relu=False,
                              kind="pointwise_conv")
            else:
                skip = block_in
            add_geom = LayerGeom(ich=och, ih=out_hw, iw=out_hw,
                                 och=och, oh=out_hw, ow=out_hw)
            prev = b.add(LayerNode(f"{name}_add", "add", add_geom,
                                   x_spec=_X_ACT, y_spec=_X_ACT, relu=True,
                                   predecessors=[c1, skip]))
            hw, ich = out_hw, och

    pool_geom = LayerGeom(ich=64, ih=hw, iw=hw, och=64, oh=1, ow=1, fh=hw, fw=hw)
    prev = b.add(LayerNode("avgpool", "avgpool", pool_geom,
                           x_spec=_X_ACT, y_spec=_X_ACT, predecessors=[prev]))
    prev = b.conv("fc", prev, 64, 1, 10, 1, fh=1, pad=0, relu=False,
                  kind="linear", y_spec=_FC_OUT)
    b.add(LayerNode("output", "output",
                    LayerGeom(ich=10, ih=1, iw=1, och=10, oh=1, ow=1),
                    x_spec=_FC_OUT, y_spec=_FC_OUT, predecessors=[prev]))
    g = b.graph()
    violations = validate_graph(g)
    assert not violations, violations
    return g


def build_resnet8(seed: int) -> Graph:
    """CIFAR-10 ResNet8: stem + one residual block per 16/32/64 stage."""
    return _build_resnet(seed, blocks_per_stage=1)


def build_resnet20(seed: int) -> Graph:
    """CIFAR-10 ResNet20: stem + three residual blocks per 16/32/64 stage."""
    return _build_resnet(seed, blocks_per_stage=3)


def clone_graph(g: Graph) -> Graph:
    """Deep-enough copy: nodes and edge list are fresh, code arrays shared."""
    return Graph(
        nodes={nid: replace(n, predecessors=list(n.predecessors))
               for nid, n in g.nodes.items()},
        edges=list(g.edges),
        weights=dict(g.weights),
        biases=dict(g.biases),
        skip_annotations=list(g.skip_annotations),
    )
