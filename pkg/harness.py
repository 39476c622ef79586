"""
Synthetic transformer-style graph pairs: baseline builders, parallelization
plans, bug injection and the injected-bug corpus used by the test-suite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from loguru import logger

from ir import (
    Annotation, AnnotationKind, AnnotationSet, DType, Graph, GraphBuilder, GraphKind, OpKind, OpName,
    ReplicaGroup, SourceLoc, TensorNode, serialize_annotations, serialize_graph, validate_graph,
)
from oracle import UnsupportedOp, oracle_execute

SOURCE_FILES = {GraphKind.BASELINE: "baseline_model.py", GraphKind.DISTRIBUTED: "distributed_model.py"}
ORACLE_SEEDS = tuple(range(10))


class ModelKind(str, Enum):
    MLP = "mlp"
    ATTENTION = "attention"
    MOE = "moe"


class Strategy(str, Enum):
    TP = "tp"
    SP = "sp"
    EP = "ep"


class IndivisibleDim(ValueError):
    def __init__(self, what: str, extent: int, degree: int):
        super().__init__(f"{what} extent {extent} is not divisible by degree {degree}")
        self.what = what
        self.extent = extent
        self.degree = degree


class InapplicableSite(ValueError):
    def __init__(self, site: str, reason: str):
        super().__init__(f"{site}: {reason}")
        self.site = site
        self.reason = reason


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.MLP
    layers: int = 1
    hidden: int = 8
    heads: int = 2
    seqlen: int = 4
    batch: int = 1
    experts: int = 4
    ffn: Optional[int] = None

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "seqlen", "batch", "experts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")

    @property
    def tokens(self) -> int:
        return self.batch * self.seqlen

    @property
    def ffn_dim(self) -> int:
        return self.ffn or 2 * self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass(frozen=True)
class ParallelPlan:
    strategy: Strategy = Strategy.TP
    degree: int = 2
    unrolled: bool = True

    @property
    def group(self) -> ReplicaGroup:
        return ReplicaGroup.of(self.degree)


SUPPORTED_PLANS = {
    ModelKind.MLP: (Strategy.TP, Strategy.SP),
    ModelKind.ATTENTION: (Strategy.TP,),
    ModelKind.MOE: (Strategy.EP,),
}


def default_plan(kind: ModelKind, degree: int = 2) -> ParallelPlan:
    return ParallelPlan(SUPPORTED_PLANS[kind][0], degree)


def _split(what: str, extent: int, degree: int) -> int:
    if extent % degree:
        raise IndivisibleDim(what, extent, degree)
    return extent // degree


# -------------------------
# Model writers
# -------------------------
class _ModelWriter:
    """Emits one graph of a pair; `plan` is None for the baseline."""

    def __init__(self, spec: ModelSpec, plan: Optional[ParallelPlan]):
        self.spec = spec
        self.plan = plan
        kind = GraphKind.BASELINE if plan is None else GraphKind.DISTRIBUTED
        self.b = GraphBuilder(kind, file=SOURCE_FILES[kind])
        self.annotations: List[Annotation] = []

    @property
    def degree(self) -> int:
        return 1 if self.plan is None else self.plan.degree

    def strategy(self, s: Strategy) -> bool:
        return self.plan is not None and self.plan.strategy == s

    def leaf(self, node_id: str, shape: Sequence[int], shard_dim: Optional[int] = None) -> str:
        shape = list(shape)
        if self.plan is not None:
            group = self.plan.group
            if shard_dim is None:
                self.annotations.append(Annotation(node_id, (node_id,) * group.size, AnnotationKind.REPLICATE, group))
            else:
                shape[shard_dim] = _split(node_id, shape[shard_dim], self.degree)
                self.annotations.append(
                    Annotation(node_id, (node_id,) * group.size, AnnotationKind.SHARD, group, shard_dim))
        return self.b.add(node_id, OpKind.of(OpName.INPUT), shape=shape, expr=f"{node_id} = load({node_id!r})")

    def op(self, node_id: str, name: OpName, inputs: Sequence[str], **attrs) -> str:
        kind = OpKind.of(name, **attrs)
        return self.b.add(node_id, kind, inputs, expr=f"{node_id} = {kind}({', '.join(inputs)})")

    def collective(self, node_id: str, name: OpName, src: str, **attrs) -> str:
        return self.op(node_id, name, [src], group=self.plan.group.ranks, **attrs)

    # -------------------------
    # Layers
    # -------------------------
    def mlp(self, p: str, u: str) -> str:
        h, f = self.spec.hidden, self.spec.ffn_dim
        w1 = self.leaf(p + "W1", (h, f), shard_dim=1 if self.plan else None)
        w2 = self.leaf(p + "W2", (f, h), shard_dim=0 if self.plan else None)
        if self.strategy(Strategy.SP):
            u = self.collective(p + "ag", OpName.ALL_GATHER, u, dim=0)
        h1 = self.op(p + "h1", OpName.DOT, [u, w1])
        a = self.op(p + "a", OpName.ELEM, [h1], fn="relu")
        y = self.op(p + "y", OpName.DOT, [a, w2])
        if self.strategy(Strategy.TP):
            return self.collective(p + "ar", OpName.ALL_REDUCE, y, combiner="add")
        if self.strategy(Strategy.SP):
            return self.collective(p + "rs", OpName.REDUCE_SCATTER, y, dim=0, combiner="add")
        return y

    def _heads(self, p: str, u: str, name: str, local: int) -> str:
        s, h, hd = self.spec.tokens, self.spec.hidden, self.spec.head_dim
        w = self.leaf(p + "W" + name, (h, h), shard_dim=1 if self.plan else None)
        x = self.op(p + name, OpName.DOT, [u, w])
        x3 = self.op(p + name + "3", OpName.RESHAPE, [x], shape=(s, local, hd))
        return self.op(p + name + "h", OpName.TRANSPOSE, [x3], perm=(1, 0, 2))

    def attention(self, p: str, u: str) -> str:
        s, h, hd = self.spec.tokens, self.spec.hidden, self.spec.head_dim
        local = _split("heads", self.spec.heads, self.degree)
        qh = self._heads(p, u, "q", local)
        kh = self._heads(p, u, "k", local)
        vh = self._heads(p, u, "v", local)
        wo = self.leaf(p + "Wo", (h, h), shard_dim=0 if self.plan else None)
        kt = self.op(p + "kt", OpName.TRANSPOSE, [kh], perm=(0, 2, 1))
        sc = self.op(p + "sc", OpName.DOT, [qh, kt])
        m = self.op(p + "m", OpName.MAX_REDUCE, [sc], dim=2)
        c = self.op(p + "c", OpName.ELEM, [sc, m], fn="sub")
        e = self.op(p + "e", OpName.ELEM, [c], fn="poly")
        den = self.op(p + "den", OpName.SUM_REDUCE, [e], dim=2)
        pr = self.op(p + "p", OpName.ELEM, [e, den], fn="div")
        o = self.op(p + "o", OpName.DOT, [pr, vh])
        ot = self.op(p + "ot", OpName.TRANSPOSE, [o], perm=(1, 0, 2))
        o2 = self.op(p + "o2", OpName.RESHAPE, [ot], shape=(s, local * hd))
        y = self.op(p + "y", OpName.DOT, [o2, wo])
        if self.plan is not None:
            return self.collective(p + "ar", OpName.ALL_REDUCE, y, combiner="add")
        return y

    def moe(self, p: str, u: str) -> str:
        s, h, f = self.spec.tokens, self.spec.hidden, self.spec.ffn_dim
        local = _split("experts", self.spec.experts, self.degree)
        e = self.spec.experts
        gate = self.leaf(p + "G", (e, 1, 1), shard_dim=0 if self.plan else None)
        w1 = self.leaf(p + "W1", (e, h, f), shard_dim=0 if self.plan else None)
        w2 = self.leaf(p + "W2", (e, f, h), shard_dim=0 if self.plan else None)
        u3 = self.op(p + "u3", OpName.RESHAPE, [u], shape=(1, s, h))
        xe = self.op(p + "xe", OpName.ELEM, [u3, gate], fn="mul")
        hid = self.op(p + "H", OpName.DOT, [xe, w1])
        act = self.op(p + "A", OpName.ELEM, [hid], fn="relu")
        y = self.op(p + "Y", OpName.DOT, [act, w2])
        if self.plan is None or self.plan.unrolled:
            acc = self.op(p + "S0", OpName.SLICE, [y], dim=0, start=0, length=1)
            for j in range(1, local):
                sj = self.op(p + f"S{j}", OpName.SLICE, [y], dim=0, start=j, length=1)
                acc = self.op(p + f"acc{j}", OpName.ELEM, [acc, sj], fn="add")
        else:
            acc = self.op(p + "sum", OpName.SUM_REDUCE, [y], dim=0)
        if self.plan is not None:
            acc = self.collective(p + "ar", OpName.ALL_REDUCE, acc, combiner="add")
        return self.op(p + "out", OpName.RESHAPE, [acc], shape=(s, h))

    # -------------------------
    # Whole model
    # -------------------------
    def build(self) -> Graph:
        spec = self.spec
        if self.plan is not None and self.plan.strategy not in SUPPORTED_PLANS[spec.kind]:
            raise ValueError(f"{self.plan.strategy.value} does not apply to {spec.kind.value} models")
        layer = {ModelKind.MLP: self.mlp, ModelKind.ATTENTION: self.attention, ModelKind.MOE: self.moe}[spec.kind]
        self.b.layer = 0
        u = self.leaf("x", (spec.tokens, spec.hidden), shard_dim=0 if self.strategy(Strategy.SP) else None)
        for k in range(spec.layers):
            self.b.layer = k
            u = layer(f"l{k}.", u)
        if self.strategy(Strategy.SP):
            u = self.collective("out", OpName.ALL_GATHER, u, dim=0)
        g = self.b.build([u])
        logger.debug("Built {} {} graph with {} nodes", g.kind.value, spec.kind.value, len(g.nodes))
        return g


def build_baseline(spec: ModelSpec) -> Graph:
    """Build the single-device graph of `spec` with layer tags and source locations."""
    return _ModelWriter(spec, None).build()


def spec_of(g: Graph) -> ModelSpec:
    """Recover the model parameters of a graph produced by `build_baseline`."""
    if "x" not in g or ("l0.W1" not in g and "l0.Wq" not in g):
        raise ValueError("graph was not built by the model writers")
    tokens, hidden = g["x"].shape
    layers = len(g.layers)
    if "l0.G" in g:
        experts, _, ffn = g["l0.W1"].shape
        return ModelSpec(ModelKind.MOE, layers, hidden, heads=1, seqlen=tokens, experts=experts, ffn=ffn)
    if "l0.Wq" in g:
        heads = g["l0.q3"].shape[1]
        return ModelSpec(ModelKind.ATTENTION, layers, hidden, heads=heads, seqlen=tokens)
    return ModelSpec(ModelKind.MLP, layers, hidden, heads=1, seqlen=tokens, ffn=g["l0.W1"].shape[1])


def parallelize(g: Graph, plan: ParallelPlan) -> Tuple[Graph, AnnotationSet]:
    """
    Build the distributed counterpart of a baseline model graph.

    Args:
        g (Graph): A graph from `build_baseline`.
        plan (ParallelPlan): Strategy and degree.

    Returns:
        Tuple[Graph, AnnotationSet]: The per-rank graph and how its inputs relate to the baseline's.

    Raises:
        IndivisibleDim: If the degree does not divide a split extent.
    """
    writer = _ModelWriter(spec_of(g), plan)
    g_m = writer.build()
    return g_m, AnnotationSet(tuple(writer.annotations))


def build_pair(spec: ModelSpec, plan: Optional[ParallelPlan] = None) -> Tuple[Graph, Graph, AnnotationSet]:
    plan = plan or default_plan(spec.kind)
    g_s = build_baseline(spec)
    g_m, ann = parallelize(g_s, plan)
    return g_s, g_m, ann


# -------------------------
# Bug injection
# -------------------------
class Variant(str, Enum):
    DELETE = "delete"
    DUPLICATE = "duplicate"
    SWAP = "swap"
    SHRINK = "shrink"
    ROTATE = "rotate"
    CONVERT = "convert"
    SPLIT = "split"
    BSH = "bsh"


CATEGORY = {
    Variant.DELETE: 1, Variant.DUPLICATE: 1, Variant.SWAP: 1,
    Variant.SHRINK: 2, Variant.ROTATE: 2,
    Variant.CONVERT: 3,
    Variant.SPLIT: 4,
    Variant.BSH: 5,
}

DESCRIPTIONS = {
    Variant.DELETE: "collective removed",
    Variant.DUPLICATE: "collective applied twice",
    Variant.SWAP: "collective combiner swapped",
    Variant.SHRINK: "replica group shrunk",
    Variant.ROTATE: "replica group rotated",
    Variant.CONVERT: "precision lowered by an inserted convert",
    Variant.SPLIT: "head split boundary moved",
    Variant.BSH: "reshape used in place of reshape and transpose",
}


@dataclass(frozen=True)
class BugInjection:
    variant: Variant
    site: str

    @property
    def category(self) -> int:
        return CATEGORY[self.variant]

    @property
    def description(self) -> str:
        return DESCRIPTIONS[self.variant]


def _rewire(nodes: Dict[str, TensorNode], outputs: Sequence[str], old: str, new: str,
            skip: str = "") -> Tuple[str, ...]:
    for node_id, node in list(nodes.items()):
        if node_id != skip and old in node.inputs:
            nodes[node_id] = replace(node, inputs=tuple(new if i == old else i for i in node.inputs))
    return tuple(new if o == old else o for o in outputs)


def _with_attrs(op: OpKind, **changes) -> OpKind:
    attrs = dict(op.attrs)
    attrs.update(changes)
    return OpKind.of(op.name, **attrs)


def _head_split(g: Graph, site: str) -> Tuple[TensorNode, TensorNode]:
    """The rank-3 reshape at `site` and its sole transpose(1,0,2) consumer."""
    node = g[site]
    users = g.consumers.get(site, [])
    if node.op.name != OpName.RESHAPE or len(node.shape) != 3 or len(users) != 1:
        raise InapplicableSite(site, "not a head-splitting reshape")
    user = g[users[0]]
    if user.op.name != OpName.TRANSPOSE or tuple(user.op.get("perm")) != (1, 0, 2):
        raise InapplicableSite(site, "reshape is not followed by transpose(1,0,2)")
    return node, user


def _inserted(node: TensorNode, node_id: str, op: OpKind, dtype: DType) -> TensorNode:
    loc = node.loc
    if loc is not None:
        loc = SourceLoc(loc.file, loc.line, f"{node_id} = {op}({node.id})")
    return TensorNode(node_id, op, (node.id,), node.shape, dtype, node.rank, loc, node.layer)


def inject(g: Graph, bug: BugInjection) -> Graph:
    """
    Apply one semantic bug to a distributed graph.

    Raises:
        InapplicableSite: If the site cannot take this kind of bug.
    """
    if bug.site not in g:
        raise InapplicableSite(bug.site, "no such node")
    nodes = dict(g.nodes)
    outputs = tuple(g.outputs)
    node = g[bug.site]
    v = bug.variant
    if v in (Variant.DELETE, Variant.DUPLICATE, Variant.SWAP, Variant.SHRINK, Variant.ROTATE):
        if not node.op.is_collective:
            raise InapplicableSite(bug.site, "not a collective")
    if v == Variant.DELETE:
        if node.op.name != OpName.ALL_REDUCE:
            raise InapplicableSite(bug.site, "only all_reduce keeps shapes when deleted")
        del nodes[bug.site]
        outputs = _rewire(nodes, outputs, bug.site, node.inputs[0])
    elif v == Variant.DUPLICATE:
        if node.op.name != OpName.ALL_REDUCE:
            raise InapplicableSite(bug.site, "only all_reduce keeps shapes when repeated")
        new_id = bug.site + ".dup"
        outputs = _rewire(nodes, outputs, bug.site, new_id)
        nodes[new_id] = _inserted(node, new_id, node.op, node.dtype)
    elif v == Variant.SWAP:
        combiner = node.op.get("combiner")
        if combiner is None:
            raise InapplicableSite(bug.site, "collective has no combiner")
        nodes[bug.site] = replace(node, op=_with_attrs(node.op, combiner="max" if combiner == "add" else "add"))
    elif v == Variant.SHRINK:
        ranks = tuple(node.op.get("group"))
        if node.op.name != OpName.ALL_REDUCE or len(ranks) < 2:
            raise InapplicableSite(bug.site, "only an all_reduce over several ranks can shrink")
        nodes[bug.site] = replace(node, op=_with_attrs(node.op, group=ranks[:len(ranks) // 2]))
    elif v == Variant.ROTATE:
        ranks = tuple(node.op.get("group"))
        if node.op.name == OpName.ALL_REDUCE or len(ranks) < 2:
            raise InapplicableSite(bug.site, "rotation only matters for gather and scatter")
        nodes[bug.site] = replace(node, op=_with_attrs(node.op, group=ranks[1:] + ranks[:1]))
    elif v == Variant.CONVERT:
        if node.op.name in (OpName.INPUT, OpName.CONSTANT) or node.op.is_collective:
            raise InapplicableSite(bug.site, "converts are inserted after computations")
        new_id = bug.site + ".cvt"
        outputs = _rewire(nodes, outputs, bug.site, new_id)
        nodes[new_id] = _inserted(node, new_id, OpKind.of(OpName.CONVERT, dtype=DType.BF16), DType.BF16)
    elif v == Variant.SPLIT:
        reshape, transpose = _head_split(g, bug.site)
        a, b, c = reshape.shape
        nodes[bug.site] = replace(reshape, op=_with_attrs(reshape.op, shape=(a, c, b)), shape=(a, c, b))
        nodes[transpose.id] = replace(transpose, op=_with_attrs(transpose.op, perm=(2, 0, 1)))
    elif v == Variant.BSH:
        reshape, transpose = _head_split(g, bug.site)
        a, b, c = reshape.shape
        nodes[bug.site] = replace(reshape, op=_with_attrs(reshape.op, shape=(b, a, c)), shape=(b, a, c))
        del nodes[transpose.id]
        outputs = _rewire(nodes, outputs, transpose.id, bug.site)
    mutated = Graph(g.kind, nodes, outputs)
    errors = validate_graph(mutated)
    if errors:
        raise InapplicableSite(bug.site, f"mutation leaves an invalid graph: {errors[0]}")
    return mutated


def injected_site(g: Graph, bug: BugInjection) -> str:
    """The node of the mutated graph a localizer is expected to point at."""
    if bug.variant == Variant.DELETE:
        return g[bug.site].inputs[0]
    if bug.variant == Variant.DUPLICATE:
        return bug.site + ".dup"
    if bug.variant == Variant.CONVERT:
        return bug.site + ".cvt"
    return bug.site


# -------------------------
# Corpus
# -------------------------
@dataclass
class CorpusCase:
    name: str
    spec: ModelSpec
    plan: ParallelPlan
    baseline: Graph
    distributed: Graph
    annotations: AnnotationSet
    bug: Optional[BugInjection] = None
    site: Optional[str] = None
    witness: Optional[str] = None

    @property
    def category(self) -> Optional[int]:
        return self.bug.category if self.bug else None


_MLP = ModelSpec(ModelKind.MLP, hidden=8)
_MLP2 = ModelSpec(ModelKind.MLP, layers=2, hidden=8)
_ATTN = ModelSpec(ModelKind.ATTENTION, hidden=16, heads=4, seqlen=6)
_MOE = ModelSpec(ModelKind.MOE, hidden=4, seqlen=3, experts=4)

_TP2 = ParallelPlan(Strategy.TP, 2)
_TP4 = ParallelPlan(Strategy.TP, 4)
_SP2 = ParallelPlan(Strategy.SP, 2)
_EP2 = ParallelPlan(Strategy.EP, 2)

CANDIDATES: Tuple[Tuple[ModelSpec, ParallelPlan, Variant, str], ...] = (
    (_MLP, _TP2, Variant.DELETE, "l0.ar"),
    (_MLP, _TP2, Variant.DUPLICATE, "l0.ar"),
    (_MLP, _TP2, Variant.SWAP, "l0.ar"),
    (_MLP, _TP2, Variant.SHRINK, "l0.ar"),
    (_MLP, _TP2, Variant.CONVERT, "l0.a"),
    (_MLP, _TP2, Variant.CONVERT, "l0.h1"),
    (_MLP2, _TP4, Variant.DELETE, "l0.ar"),
    (_MLP2, _TP4, Variant.SWAP, "l1.ar"),
    (_MLP2, _TP4, Variant.SHRINK, "l0.ar"),
    (_MLP2, _TP4, Variant.CONVERT, "l1.a"),
    (_MLP, _SP2, Variant.ROTATE, "l0.ag"),
    (_MLP, _SP2, Variant.ROTATE, "l0.rs"),
    (_MLP, _SP2, Variant.ROTATE, "out"),
    (_MLP, _SP2, Variant.SWAP, "l0.rs"),
    (_ATTN, _TP2, Variant.SWAP, "l0.ar"),
    (_ATTN, _TP2, Variant.DUPLICATE, "l0.ar"),
    (_ATTN, _TP2, Variant.CONVERT, "l0.p"),
    (_ATTN, _TP2, Variant.CONVERT, "l0.e"),
    (_ATTN, _TP2, Variant.SPLIT, "l0.q3"),
    (_ATTN, _TP2, Variant.SPLIT, "l0.k3"),
    (_ATTN, _TP2, Variant.SPLIT, "l0.v3"),
    (_ATTN, _TP2, Variant.BSH, "l0.q3"),
    (_ATTN, _TP2, Variant.BSH, "l0.k3"),
    (_ATTN, _TP2, Variant.BSH, "l0.v3"),
    (_MOE, _EP2, Variant.DELETE, "l0.ar"),
    (_MOE, _EP2, Variant.SWAP, "l0.ar"),
    (_MOE, _EP2, Variant.CONVERT, "l0.A"),
)


def manifests(g_s: Graph, g_m: Graph, ann: AnnotationSet, seeds: Sequence[int] = ORACLE_SEEDS) -> Optional[str]:
    """The first oracle witness of a difference, or None when every seed agrees."""
    for seed in seeds:
        result = oracle_execute(g_s, g_m, ann, seed)
        if not result.equal:
            return result.witness
    return None


def correct_cases(pairs: Optional[Sequence[Tuple[ModelSpec, ParallelPlan]]] = None) -> List[CorpusCase]:
    """Unmodified pairs, by default one per model and plan used by the candidates."""
    if pairs is None:
        pairs = list(dict.fromkeys((spec, plan) for spec, plan, _, _ in CANDIDATES))
    cases = []
    for spec, plan in pairs:
        g_s, g_m, ann = build_pair(spec, plan)
        name = f"{spec.kind.value}-{plan.strategy.value}{plan.degree}-l{spec.layers}-correct"
        cases.append(CorpusCase(name, spec, plan, g_s, g_m, ann))
    return cases


def generate_corpus(candidates: Sequence[Tuple[ModelSpec, ParallelPlan, Variant, str]] = CANDIDATES,
                    seeds: Sequence[int] = ORACLE_SEEDS) -> List[CorpusCase]:
    """
    Inject every candidate bug and keep the ones the oracle can observe.

    Candidates whose mutation is inapplicable or numerically invisible are
    dropped with a log line.
    """
    cases: List[CorpusCase] = []
    pairs: Dict[Tuple[ModelSpec, ParallelPlan], Tuple[Graph, Graph, AnnotationSet]] = {}
    for spec, plan, variant, site in candidates:
        if (spec, plan) not in pairs:
            pairs[(spec, plan)] = build_pair(spec, plan)
        g_s, g_m, ann = pairs[(spec, plan)]
        bug = BugInjection(variant, site)
        name = f"{spec.kind.value}-{plan.strategy.value}{plan.degree}-l{spec.layers}-{variant.value}-{site}"
        try:
            mutated = inject(g_m, bug)
            witness = manifests(g_s, mutated, ann, seeds)
        except (InapplicableSite, UnsupportedOp) as e:
            logger.warning("Skipping {}: {}", name, e)
            continue
        if witness is None:
            logger.info("Skipping {}: no observable difference", name)
            continue
        cases.append(CorpusCase(name, spec, plan, g_s, mutated, ann, bug, injected_site(g_m, bug), witness))
    logger.info("Generated {} injected cases", len(cases))
    return cases


def write_corpus(cases: Sequence[CorpusCase], out_dir: Path) -> Path:
    """Write each case as three JSON files plus a corpus.manifest index."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in cases:
        case_dir = out_dir / case.name
        case_dir.mkdir(exist_ok=True)
        (case_dir / "baseline.json").write_text(serialize_graph(case.baseline))
        (case_dir / "distributed.json").write_text(serialize_graph(case.distributed))
        (case_dir / "annotations.json").write_text(serialize_annotations(case.annotations))
        entry = {"name": case.name, "model": case.spec.kind.value, "strategy": case.plan.strategy.value,
                 "degree": case.plan.degree, "layers": case.spec.layers}
        if case.bug is not None:
            entry.update(category=case.category, variant=case.bug.variant.value, site=case.site,
                         description=case.bug.description, witness=case.witness)
        manifest.append(entry)
    path = out_dir / "corpus.manifest"
    path.write_text(json.dumps(manifest, indent=2))
    return path
