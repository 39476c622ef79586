"""
Discrepancy localization: classify nodes of a failed layer, find the
unverified nodes whose inputs are all verified and render the report.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from loguru import logger

from driver import LayerResult, Verdict, VerificationOutcome
from ir import Graph, OpName
from relations import Side
from rules import firing_summary

CONSUMER_DEPTH = 3
FACTS_PER_INPUT = 4


class Status(str, Enum):
    VERIFIED = "verified"
    UNVERIFIED = "unverified"


@dataclass
class NodeStatus:
    baseline: Dict[str, Status] = field(default_factory=dict)
    distributed: Dict[str, Status] = field(default_factory=dict)

    def of(self, side: Side) -> Dict[str, Status]:
        return self.baseline if side == Side.BASELINE else self.distributed


@dataclass
class FrontierEntry:
    id: str
    side: Side
    op: str
    file: Optional[str]
    line: Optional[int]
    expr: Optional[str]
    input_facts: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "op": self.op, "file": self.file, "line": self.line, "expr": self.expr,
                "input_facts": self.input_facts}


@dataclass
class DiscrepancyReport:
    verdict: Verdict
    frontier: List[FrontierEntry] = field(default_factory=list)
    consumers: List[str] = field(default_factory=list)
    dangling: List[Tuple[str, str]] = field(default_factory=list)
    stats: Dict[str, Any] = field(default_factory=dict)
    message: str = ""

    @property
    def frontier_ids(self) -> List[str]:
        return [f.id for f in self.frontier]


def classify(layer: LayerResult, g_s: Graph, g_m: Graph) -> NodeStatus:
    """
    Mark every node of a rewritten layer as verified or unverified.

    Entry tensors count as verified; any other node is verified when its
    e-class appears in a relation fact or holds nodes of both graphs.
    """
    status = NodeStatus()
    eg = layer.egraph
    related = eg.facts.classes() if eg is not None else set()
    members = {Side.BASELINE: set(layer.pair.baseline), Side.DISTRIBUTED: set(layer.pair.distributed)}
    for (side, node_id), cid in sorted(layer.class_of.items()):
        if node_id not in members[side]:
            continue
        cid = eg.find(cid)
        both = {s for s, _ in eg.origins(cid)} == {Side.BASELINE, Side.DISTRIBUTED}
        g = g_s if side == Side.BASELINE else g_m
        leaf = g[node_id].op.name == OpName.INPUT
        verified = leaf or cid in related or both
        status.of(side)[node_id] = Status.VERIFIED if verified else Status.UNVERIFIED
    return status


def _is_verified(status: Dict[str, Status], node_id: str) -> bool:
    # Nodes outside the layer were proven by earlier layers.
    return status.get(node_id, Status.VERIFIED) == Status.VERIFIED


def frontier(status: Dict[str, Status], g: Graph) -> List[str]:
    order = {n: i for i, n in enumerate(g.topo_order)}
    hits = [n for n, s in status.items()
            if s == Status.UNVERIFIED and all(_is_verified(status, i) for i in g[n].inputs)]
    return sorted(hits, key=lambda n: (order[n], n))


def consumers(status: Dict[str, Status], g: Graph, roots: List[str], depth: int = CONSUMER_DEPTH) -> List[str]:
    seen = set(roots)
    found: List[str] = []
    level = list(roots)
    for _ in range(depth):
        nxt = []
        for n in level:
            for user in g.consumers.get(n, []):
                if user not in seen and status.get(user) == Status.UNVERIFIED:
                    seen.add(user)
                    found.append(user)
                    nxt.append(user)
        level = nxt
    order = {n: i for i, n in enumerate(g.topo_order)}
    return sorted(found, key=lambda n: (order[n], n))


def _entry(layer: LayerResult, g: Graph, side: Side, node_id: str) -> FrontierEntry:
    node = g[node_id]
    facts = []
    eg = layer.egraph
    for src in node.inputs:
        cid = layer.class_of.get((side, src))
        if cid is None or eg is None:
            continue
        rendered = [str(f) for f in eg.facts.involving(eg.find(cid))][:FACTS_PER_INPUT]
        facts.extend(f"{src}: {r}" for r in rendered)
    loc = node.loc
    return FrontierEntry(node_id, side, str(node.op), loc.file if loc else None, loc.line if loc else None,
                         loc.expr if loc else None, facts)


def _layer_report(layer: LayerResult, g_s: Graph, g_m: Graph) -> Tuple[List[FrontierEntry], List[str]]:
    status = classify(layer, g_s, g_m)
    for side, g in ((Side.DISTRIBUTED, g_m), (Side.BASELINE, g_s)):
        ids = frontier(status.of(side), g)
        if ids:
            return [_entry(layer, g, side, n) for n in ids], consumers(status.of(side), g, ids)
    # Nothing is stuck inside the layer: the outputs themselves failed the check.
    entries = []
    for o_s, o_m in layer.failing:
        if o_m:
            entries.append(_entry(layer, g_m, Side.DISTRIBUTED, o_m))
        elif o_s:
            entries.append(_entry(layer, g_s, Side.BASELINE, o_s))
    return entries, []


def stats_of(outcome: VerificationOutcome) -> Dict[str, Any]:
    s = outcome.stats
    return {"iterations": s.iterations, "facts": s.facts, "layers": s.layers, "memo_hits": s.memo_hits,
            "rules": firing_summary(s.firings)}


def build_report(outcome: VerificationOutcome, g_s: Graph, g_m: Graph) -> DiscrepancyReport:
    report = DiscrepancyReport(outcome.verdict, stats=stats_of(outcome))
    if outcome.verdict == Verdict.INCONCLUSIVE:
        last = outcome.layers[-1]
        report.message = f"layer {last.pair.index}: {last.budget_message}"
        return report
    for layer in outcome.layers:
        if layer.verified or layer.memo_hit:
            continue
        entries, downstream = _layer_report(layer, g_s, g_m)
        report.frontier.extend(entries)
        report.consumers.extend(downstream)
        report.dangling.extend(layer.failing)
        if not report.message:
            report.message = f"layer {layer.pair.index} failed its output check"
    logger.info("Report: {} with {} frontier nodes", report.verdict.value, len(report.frontier))
    return report


def _location(entry: FrontierEntry) -> str:
    if entry.file is None:
        return ""
    return f"{entry.file}:{entry.line}"


def render_report(report: DiscrepancyReport, fmt: str = "text") -> str:
    """
    Render a report as stable text or JSON.

    Args:
        report (DiscrepancyReport): The report.
        fmt (str): "text" or "json".

    Returns:
        str: The rendered report, newline terminated.
    """
    if fmt == "json":
        doc = {
            "verdict": report.verdict.value,
            "frontier": [f.as_dict() for f in report.frontier],
            "consumers": report.consumers,
            "dangling": [{"baseline": a, "distributed": b} for a, b in report.dangling],
            "stats": report.stats,
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    lines = [report.verdict.value]
    if report.message:
        lines.append(report.message)
    if report.frontier:
        lines.append("frontier:")
        for f in report.frontier:
            where = _location(f)
            head = f"  {f.id}  {f.op}" + (f"  {where}" if where else "") + (f"  {f.expr}" if f.expr else "")
            lines.append(head)
            lines.extend(f"    {fact}" for fact in f.input_facts)
    if report.consumers:
        lines.append("consumers: " + ", ".join(report.consumers))
    if report.dangling:
        lines.append("dangling outputs: " + ", ".join(f"{a or '-'} / {b or '-'}" for a, b in report.dangling))
    s = report.stats
    if s:
        lines.append(f"layers: {s['layers']}  memo hits: {s['memo_hits']}  iterations: {s['iterations']}  "
                     f"facts: {s['facts']}")
    return "\n".join(lines) + "\n"
