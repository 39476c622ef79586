"""
Layer-by-layer verification of a baseline/distributed graph pair.

Each layer pair gets its own e-graph. Boundary tensors enter as leaves
carrying the relations proven for them by earlier layers; nodes are added
stage by stage with a fixpoint run after each stage; the layer passes when
its boundary outputs are related across the two graphs.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from itertools import zip_longest
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from loguru import logger

from database import load_summary, save_summary
from egraph import Budget, BudgetExceeded, EClassId, EGraph, SaturationResult
from ir import AnnotationKind, AnnotationSet, Graph, OpKind, OpName, topo_stages
from relations import (
    Duplicate, Group, Layout, LayoutTerm, Relation, Reshape, Sharded, Side, Transpose, layout_from_primitives,
)
from rules import RuleCatalog

Template = Tuple[Any, ...]
NodeKey = Tuple[Side, str]


class LayerMismatch(Exception):
    def __init__(self, count_s: int, count_m: int, message: str = ""):
        super().__init__(message or f"baseline has {count_s} layers, distributed has {count_m}")
        self.count_s = count_s
        self.count_m = count_m


class UntaggedNode(Exception):
    def __init__(self, node_id: str):
        super().__init__(f"node {node_id} has no layer tag")
        self.node_id = node_id


class Verdict(str, Enum):
    VERIFIED = "verified"
    UNVERIFIED = "unverified"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class VerifyOptions:
    jobs: int = 1
    parallel: bool = True
    memo: bool = True
    keep_going: bool = False
    partition: bool = True
    budget: Budget = Budget()

    @property
    def workers(self) -> int:
        return max(1, self.jobs) if self.parallel else 1


@dataclass(frozen=True)
class LayerPair:
    index: int
    baseline: Tuple[str, ...]
    distributed: Tuple[str, ...]
    inputs_s: Tuple[str, ...]
    inputs_m: Tuple[str, ...]
    outputs_s: Tuple[str, ...]
    outputs_m: Tuple[str, ...]


@dataclass
class LayerResult:
    pair: LayerPair
    verified: bool
    memo_hit: bool = False
    egraph: Optional[EGraph] = None
    class_of: Dict[NodeKey, EClassId] = field(default_factory=dict)
    saturation: Optional[SaturationResult] = None
    failing: List[Tuple[str, str]] = field(default_factory=list)
    summary: List[Template] = field(default_factory=list)
    budget_message: Optional[str] = None


@dataclass
class Stats:
    iterations: int = 0
    facts: int = 0
    layers: int = 0
    memo_hits: int = 0
    rewrites: int = 0
    firings: Dict[str, int] = field(default_factory=dict)


@dataclass
class VerificationOutcome:
    verdict: Verdict
    layers: List[LayerResult]
    stats: Stats
    elapsed: float = 0.0

    @property
    def failed_layer(self) -> Optional[LayerResult]:
        for layer in self.layers:
            if not layer.verified:
                return layer
        return None

    def dump_facts(self) -> List[str]:
        lines = []
        for layer in self.layers:
            if layer.memo_hit:
                lines.append(f"# layer {layer.pair.index} (memoized)")
                lines.extend(f"summary {render_template(t)}" for t in layer.summary)
            elif layer.egraph is not None:
                lines.append(f"# layer {layer.pair.index}")
                lines.extend(layer.egraph.facts.dump())
        return lines


# -------------------------
# Partitioning
# -------------------------
def _tags(g: Graph) -> Dict[int, List[str]]:
    by_tag: Dict[int, List[str]] = {}
    for node in g.nodes.values():
        if node.layer is None:
            raise UntaggedNode(node.id)
        by_tag.setdefault(node.layer, []).append(node.id)
    return by_tag


def _pair_of(g_s: Graph, g_m: Graph, index: int, ids_s: Sequence[str], ids_m: Sequence[str]) -> LayerPair:
    def boundary(g: Graph, ids: Sequence[str]):
        members = set(ids)
        inputs = sorted({i for n in ids for i in g[n].inputs if i not in members})
        outputs = sorted(n for n in ids if n in g.outputs or any(u not in members for u in g.consumers[n]))
        return tuple(inputs), tuple(outputs)

    in_s, out_s = boundary(g_s, ids_s)
    in_m, out_m = boundary(g_m, ids_m)
    return LayerPair(index, tuple(sorted(ids_s)), tuple(sorted(ids_m)), in_s, in_m, out_s, out_m)


def partition_layers(g_s: Graph, g_m: Graph) -> List[LayerPair]:
    """
    Split both graphs into layer pairs by their layer tags.

    Returns:
        list: One LayerPair per tag in ascending order.
    """
    tags_s, tags_m = _tags(g_s), _tags(g_m)
    if len(tags_s) != len(tags_m):
        raise LayerMismatch(len(tags_s), len(tags_m))
    for tags in (tags_s, tags_m):
        if sorted(tags) != list(range(len(tags))):
            raise LayerMismatch(len(tags_s), len(tags_m), f"layer tags {sorted(tags)} are not contiguous from 0")
    return [_pair_of(g_s, g_m, k, tags_s[k], tags_m[k]) for k in range(len(tags_s))]


def whole_graph_pair(g_s: Graph, g_m: Graph) -> LayerPair:
    return _pair_of(g_s, g_m, 0, list(g_s.nodes), list(g_m.nodes))


# -------------------------
# Relation templates
# -------------------------
def _encode_term(term: LayoutTerm) -> List[Any]:
    return [["transpose", list(p.perm)] if isinstance(p, Transpose) else ["reshape", list(p.shape)]
            for p in term.primitives()]


def _decode_term(raw: Sequence[Any]) -> LayoutTerm:
    return layout_from_primitives([Transpose(tuple(a)) if k == "transpose" else Reshape(tuple(a)) for k, a in raw])


DUPLICATE: Template = ("duplicate", 1)


def _encode_group(group: Group) -> str:
    return ",".join(str(r) for r in group)


def _decode_group(raw: str) -> Group:
    return tuple(int(r) for r in raw.split(","))


def template_of(fact: Relation) -> Optional[Template]:
    if isinstance(fact, Duplicate):
        return DUPLICATE
    if isinstance(fact, Sharded):
        return ("sharded", fact.dim, fact.cores, _encode_group(fact.group))
    if isinstance(fact, Layout):
        return ("layout", json.dumps(_encode_term(fact.term)), fact.cores, _encode_group(fact.group))
    return None


def instantiate(template: Template, t: EClassId, t2: EClassId) -> Relation:
    kind = template[0]
    if kind == "duplicate":
        return Duplicate(t, t2, template[1])
    if kind == "sharded":
        return Sharded(t, t2, template[1], template[2], _decode_group(template[3]))
    return Layout(t, t2, _decode_term(json.loads(template[1])), template[2], _decode_group(template[3]))


def render_template(entry: Template) -> str:
    return " ".join(str(part) for part in entry)


def _boundary_relations(eg: EGraph, cs: EClassId, cm: EClassId) -> List[Template]:
    cs, cm = eg.find(cs), eg.find(cm)
    found = set()
    for fact in eg.facts.involving(cs):
        if getattr(fact, "t", None) == cs and getattr(fact, "t2", None) == cm:
            template = template_of(fact)
            if template is not None:
                found.add(template)
    if cs == cm:
        found.add(DUPLICATE)
    return sorted(found)


# -------------------------
# Fingerprints
# -------------------------
def _entries(g: Graph, pair_ids: Sequence[str], inputs: Sequence[str]) -> List[str]:
    """Leaf inputs and boundary inputs of one side, ordered by first use."""
    members = set(pair_ids)
    candidates = set(inputs) | {n for n in pair_ids if g[n].op.name == OpName.INPUT}
    order: List[str] = []
    for node_id in _interior_order(g, pair_ids):
        for src in g[node_id].inputs:
            if src in candidates and src not in order:
                order.append(src)
    order.extend(sorted(c for c in candidates if c not in order and c in members))
    return order


def _interior_order(g: Graph, pair_ids: Sequence[str]) -> List[str]:
    interior = [n for n in pair_ids if g[n].op.name != OpName.INPUT]
    return [n for stage in topo_stages(g, interior) for group in stage for n in group]


def fingerprint(pair: LayerPair, g_s: Graph, g_m: Graph, entry_relations: Sequence[Template],
                groups: Sequence[Group] = ()) -> str:
    """Digest of the layer structure and annotation replica groups, with node ids and source locations erased."""
    doc: Dict[str, Any] = {"relations": sorted(json.dumps(r) for r in entry_relations),
                           "groups": sorted(list(g) for g in groups)}
    for key, g, ids, inputs, outputs in (("s", g_s, pair.baseline, pair.inputs_s, pair.outputs_s),
                                         ("m", g_m, pair.distributed, pair.inputs_m, pair.outputs_m)):
        entries = _entries(g, ids, inputs)
        interior = _interior_order(g, ids)
        ref = {n: ["e", i] for i, n in enumerate(entries)}
        ref.update({n: ["n", i] for i, n in enumerate(interior)})
        doc[key] = {
            "entries": [[list(g[n].shape), g[n].dtype.value] for n in entries],
            "nodes": [[str(g[n].op), [ref[i] for i in g[n].inputs], list(g[n].shape), g[n].dtype.value, g[n].rank]
                      for n in interior],
            "outputs": [ref[o] for o in outputs],
        }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# -------------------------
# Memo
# -------------------------
class LayerMemo:
    """Boundary summaries of verified layers keyed by fingerprint, optionally backed by the database."""

    def __init__(self, persistent: bool = False):
        self.persistent = persistent
        self._cache: Dict[str, List[Template]] = {}

    def lookup(self, fp: str) -> Optional[List[Template]]:
        if fp in self._cache:
            return self._cache[fp]
        if self.persistent:
            raw = load_summary(fp)
            if raw is not None:
                summary = [tuple(entry) for entry in json.loads(raw)]
                self._cache[fp] = summary
                return summary
        return None

    def store(self, fp: str, summary: List[Template]):
        self._cache[fp] = summary
        if self.persistent:
            save_summary(fp, json.dumps([list(t) for t in summary]))

    def __len__(self) -> int:
        return len(self._cache)


# -------------------------
# Per-layer rewriting
# -------------------------
class LayerRunner:
    def __init__(self, g_s: Graph, g_m: Graph, ann: AnnotationSet, catalog: RuleCatalog, opts: VerifyOptions,
                 carried: Dict[Tuple[str, str], Set[Template]], stats: Stats):
        self.g_s, self.g_m, self.ann, self.catalog, self.opts = g_s, g_m, ann, catalog, opts
        self.carried = carried
        self.stats = stats

    def _graph(self, side: Side) -> Graph:
        return self.g_s if side == Side.BASELINE else self.g_m

    def entry_relations(self, pair: LayerPair) -> List[Template]:
        """Known relations between entry tensors, in entry-index terms."""
        entries_s = _entries(self.g_s, pair.baseline, pair.inputs_s)
        entries_m = _entries(self.g_m, pair.distributed, pair.inputs_m)
        index_m = {n: j for j, n in enumerate(entries_m)}
        out = []
        by_baseline = self.ann.by_baseline()
        for i, s in enumerate(entries_s):
            a = by_baseline.get(s)
            if a is not None and a.distributed_id in index_m:
                kind = (DUPLICATE if a.relation == AnnotationKind.REPLICATE
                        else ("sharded", a.dim, a.group.size, _encode_group(a.group.ranks)))
                out.append(("entry", i, index_m[a.distributed_id]) + kind)
            for m, j in index_m.items():
                for template in sorted(self.carried.get((s, m), ())):
                    out.append(("entry", i, j) + template)
        return out

    def finals(self, pair: LayerPair) -> List[Tuple[int, int]]:
        pos_s = {n: i for i, n in enumerate(pair.outputs_s)}
        pos_m = {n: i for i, n in enumerate(pair.outputs_m)}
        return [(pos_s[a], pos_m[b]) for a, b in zip(self.g_s.outputs, self.g_m.outputs)
                if a in pos_s and b in pos_m]

    def rewrite(self, pair: LayerPair) -> LayerResult:
        eg = EGraph()
        class_of: Dict[NodeKey, EClassId] = {}
        result = LayerResult(pair, False, egraph=eg, class_of=class_of)
        firings = self.stats.firings

        entries = {Side.BASELINE: _entries(self.g_s, pair.baseline, pair.inputs_s),
                   Side.DISTRIBUTED: _entries(self.g_m, pair.distributed, pair.inputs_m)}
        for side, ids in entries.items():
            g = self._graph(side)
            for node_id in ids:
                kind = "input" if node_id in set(pair.baseline) | set(pair.distributed) else "boundary"
                node = g[node_id]
                class_of[(side, node_id)] = eg.add_node(OpKind.of(OpName.INPUT), (), node.shape,
                                                        origin=(side, node_id), leaf=(kind, side.value, node_id),
                                                        rank=node.rank)
        seeds = []
        for (s, m), templates in sorted(self.carried.items()):
            cs, cm = class_of.get((Side.BASELINE, s)), class_of.get((Side.DISTRIBUTED, m))
            if cs is not None and cm is not None:
                seeds.extend(("boundary", instantiate(t, cs, cm)) for t in sorted(templates))
        registered: Set[str] = set()
        seeds.extend(self._annotations(class_of, registered))
        eg.commit(seeds, {})
        eg.rebuild()

        stages_s = topo_stages(self.g_s, [n for n in pair.baseline if n not in entries[Side.BASELINE]])
        stages_m = topo_stages(self.g_m, [n for n in pair.distributed if n not in entries[Side.DISTRIBUTED]])
        saturation = SaturationResult(True, 0, len(eg.facts), firings)
        iterations = 0
        try:
            for stage_s, stage_m in zip_longest(stages_s, stages_m, fillvalue=[]):
                for side, stage in ((Side.BASELINE, stage_s), (Side.DISTRIBUTED, stage_m)):
                    g = self._graph(side)
                    for group in stage:
                        for node_id in group:
                            self._add(eg, g, side, node_id, class_of)
                extra = self._annotations(class_of, registered)
                if extra:
                    eg.commit(extra, {})
                saturation = eg.run_to_fixpoint(self.catalog, self.opts.budget, self.opts.workers, firings)
                iterations += saturation.iterations
        except BudgetExceeded as e:
            logger.warning("Layer {} stopped: {}", pair.index, e)
            result.budget_message = str(e)
            saturation = e.result
            iterations += e.result.iterations
        result.saturation = SaturationResult(saturation.saturated, iterations, len(eg.facts), firings)
        self.stats.iterations += iterations
        self.stats.facts += len(eg.facts)
        self.stats.rewrites += 1
        return result

    def _add(self, eg: EGraph, g: Graph, side: Side, node_id: str, class_of: Dict[NodeKey, EClassId]):
        node = g[node_id]
        leaf = None
        if node.op.name == OpName.CONSTANT:
            leaf = ("constant", node.shape, node.dtype.value)
        children = [class_of[(side, i)] for i in node.inputs]
        class_of[(side, node_id)] = eg.add_node(node.op, children, node.shape, origin=(side, node_id), leaf=leaf,
                                                rank=node.rank)

    def _annotations(self, class_of: Dict[NodeKey, EClassId], registered: Set[str]) -> List[Tuple[str, Relation]]:
        out = []
        for a in self.ann.entries:
            if a.baseline_id in registered:
                continue
            cs = class_of.get((Side.BASELINE, a.baseline_id))
            cm = class_of.get((Side.DISTRIBUTED, a.distributed_id))
            if cs is None or cm is None:
                continue
            registered.add(a.baseline_id)
            if a.relation == AnnotationKind.REPLICATE:
                out.append(("annotation", Duplicate(cs, cm, a.group.size, a.group.ranks)))
            else:
                out.append(("annotation", Sharded(cs, cm, a.dim, a.group.size, a.group.ranks)))
        return out


def _counterpart(eg: EGraph, cs: EClassId, pair: LayerPair, result: LayerResult) -> str:
    """The distributed boundary output sharing any fact with `cs`, e.g. an undischarged partial."""
    linked = {c for f in eg.facts.involving(eg.find(cs)) for c in f.classes()}
    for o_m in pair.outputs_m:
        if eg.find(result.class_of[(Side.DISTRIBUTED, o_m)]) in linked:
            return o_m
    return ""


def check_outputs(pair: LayerPair, result: LayerResult, g_s: Graph, g_m: Graph) -> bool:
    """
    Decide whether a rewritten layer may pass its outputs on.

    Graph outputs must be paired positionally and end in one e-class;
    other boundary outputs of the baseline need a duplicate, sharded or
    layout relation with some distributed boundary output.
    """
    eg = result.egraph
    failing: List[Tuple[str, str]] = []
    finals = set()
    if len(g_s.outputs) != len(g_m.outputs):
        failing.extend((o, "") for o in g_s.outputs[len(g_m.outputs):] if o in pair.outputs_s)
    for o_s, o_m in zip(g_s.outputs, g_m.outputs):
        in_s, in_m = o_s in pair.outputs_s, o_m in pair.outputs_m
        if not (in_s or in_m):
            continue
        finals.add(o_s)
        cs = result.class_of.get((Side.BASELINE, o_s))
        cm = result.class_of.get((Side.DISTRIBUTED, o_m))
        if cs is None or cm is None or not eg.equiv(cs, cm):
            failing.append((o_s, o_m))
    summary: List[Template] = []
    for i, o_s in enumerate(pair.outputs_s):
        cs = result.class_of[(Side.BASELINE, o_s)]
        related = False
        for j, o_m in enumerate(pair.outputs_m):
            for template in _boundary_relations(eg, cs, result.class_of[(Side.DISTRIBUTED, o_m)]):
                summary.append(("out", i, j) + template)
                related = True
        if not related and o_s not in finals:
            failing.append((o_s, _counterpart(eg, cs, pair, result)))
    result.failing = failing
    result.summary = sorted(set(summary))
    return not failing


# -------------------------
# Top-level loop
# -------------------------
def verify_pair(g_s: Graph, g_m: Graph, ann: AnnotationSet, catalog: RuleCatalog,
                opts: VerifyOptions = VerifyOptions(), memo: Optional[LayerMemo] = None) -> VerificationOutcome:
    """
    Verify that `g_m` computes the same outputs as `g_s`.

    Args:
        g_s (Graph): Baseline graph.
        g_m (Graph): Distributed graph.
        ann (AnnotationSet): Input relations between the two graphs.
        catalog (RuleCatalog): Rules to saturate with.
        opts (VerifyOptions): Scheduling, memoization and budget settings.
        memo (LayerMemo): Shared memo; a fresh in-memory one is used if omitted.

    Returns:
        VerificationOutcome: Verdict, per-layer results and statistics.
    """
    started = time.perf_counter()
    pairs = partition_layers(g_s, g_m) if opts.partition else [whole_graph_pair(g_s, g_m)]
    memo = memo if memo is not None else LayerMemo()
    stats = Stats()
    carried: Dict[Tuple[str, str], Set[Template]] = {}
    runner = LayerRunner(g_s, g_m, ann, catalog, opts, carried, stats)
    groups = [g.ranks for g in ann.groups()]
    results: List[LayerResult] = []
    verdict = Verdict.VERIFIED

    for pair in pairs:
        stats.layers += 1
        fp = fingerprint(pair, g_s, g_m, runner.entry_relations(pair), groups)
        cached = memo.lookup(fp) if opts.memo else None
        if cached is not None and not all(("out", i, j) + DUPLICATE in cached for i, j in runner.finals(pair)):
            cached = None
        if cached is not None:
            logger.info("Layer {} reused memoized summary {}", pair.index, fp[:12])
            stats.memo_hits += 1
            result = LayerResult(pair, True, memo_hit=True, summary=list(cached))
        else:
            logger.info("Layer {}: {} baseline and {} distributed nodes", pair.index, len(pair.baseline),
                        len(pair.distributed))
            result = runner.rewrite(pair)
            if result.budget_message is not None:
                results.append(result)
                verdict = Verdict.INCONCLUSIVE
                break
            result.verified = check_outputs(pair, result, g_s, g_m)
            if result.verified and opts.memo:
                memo.store(fp, result.summary)
        results.append(result)
        for entry in result.summary:
            _, i, j, *template = entry
            carried.setdefault((pair.outputs_s[i], pair.outputs_m[j]), set()).add(tuple(template))
        if not result.verified:
            logger.info("Layer {} failed its output check: {}", pair.index, result.failing)
            verdict = Verdict.UNVERIFIED
            if not opts.keep_going:
                break
            logger.warning("Continuing past layer {}; later layer results are best effort", pair.index)

    elapsed = time.perf_counter() - started
    logger.info("Verdict {} after {} layers ({} memo hits) in {:.3f}s", verdict.value, stats.layers,
                stats.memo_hits, elapsed)
    return VerificationOutcome(verdict, results, stats, elapsed)
