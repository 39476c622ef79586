"""
Minimal e-graph with a relation fact database.

Hashconsed e-nodes, a union-find over e-classes with deferred congruence
repair, and semi-naive saturation of a rule catalog. Matching may run on
a thread pool; every derived fact and merge is committed at one point per
iteration in a sorted order, so the schedule never changes the result.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import (TYPE_CHECKING, Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Set,
                    Tuple, Union)

from loguru import logger

from ir import OpKind, Shape
from relations import Duplicate, RelKind, Relation, Side, check_relation

if TYPE_CHECKING:
    from rules import RuleCatalog

EClassId = int
Origin = Tuple[Side, str]


@dataclass(frozen=True, slots=True)
class ENode:
    """`leaf` identifies inputs, boundaries and constants; `rank` pins a node to one device."""
    op: OpKind
    children: Tuple[EClassId, ...] = ()
    leaf: Optional[Tuple[Any, ...]] = None
    rank: Optional[int] = None


@dataclass(frozen=True, slots=True)
class Equate:
    a: EClassId
    b: EClassId

    def __str__(self) -> str:
        return f"equate(e{self.a}, e{self.b})"


Derived = Union[Relation, Equate]


@dataclass
class EClass:
    id: EClassId
    shape: Shape
    nodes: List[ENode] = field(default_factory=list)
    parents: List[Tuple[ENode, EClassId]] = field(default_factory=list)
    origins: Set[Origin] = field(default_factory=set)


@dataclass(frozen=True)
class Budget:
    max_iterations: int = 1000
    max_facts: int = 10 ** 6


@dataclass
class SaturationResult:
    saturated: bool
    iterations: int
    fact_count: int
    firings: Dict[str, int] = field(default_factory=dict)


class BudgetExceeded(Exception):
    def __init__(self, result: SaturationResult, reason: str):
        super().__init__(reason)
        self.result = result


# -------------------------
# Fact database
# -------------------------
class FactDB:
    """Monotone set of relation facts indexed by kind and by e-class."""

    def __init__(self):
        self._facts: Set[Relation] = set()
        self._by_kind: Dict[RelKind, Set[Relation]] = {}
        self._by_class: Dict[EClassId, Set[Relation]] = {}
        self.generation = 0

    def __len__(self) -> int:
        return len(self._facts)

    def __iter__(self) -> Iterator[Relation]:
        return iter(sorted(self._facts, key=Relation.sort_key))

    def __contains__(self, fact: Relation) -> bool:
        return fact in self._facts

    def add(self, fact: Relation) -> bool:
        if fact in self._facts:
            return False
        self._facts.add(fact)
        self._by_kind.setdefault(fact.kind, set()).add(fact)
        for cid in set(fact.classes()):
            self._by_class.setdefault(cid, set()).add(fact)
        self.generation += 1
        return True

    def of_kind(self, kind: RelKind) -> List[Relation]:
        return sorted(self._by_kind.get(kind, ()), key=Relation.sort_key)

    def involving(self, cid: EClassId) -> List[Relation]:
        return sorted(self._by_class.get(cid, ()), key=Relation.sort_key)

    def query(self, kind: RelKind, **fields: Any) -> List[Relation]:
        """Facts of `kind` whose named fields equal the given values."""
        ids = [v for k, v in fields.items() if k in ("t", "t2", "base")]
        pool = self._by_class.get(ids[0], set()) if ids else self._by_kind.get(kind, set())
        hits = [f for f in pool if f.kind == kind and all(getattr(f, k) == v for k, v in fields.items())]
        return sorted(hits, key=Relation.sort_key)

    def snapshot(self) -> frozenset:
        return frozenset(self._facts)

    def classes(self) -> Set[EClassId]:
        return {cid for cid, facts in self._by_class.items() if facts}

    def canonicalize(self, find: Callable[[EClassId], EClassId]) -> List[Relation]:
        """Rewrite every fact onto canonical ids; returns the facts whose canonical form is new."""
        old = self._facts
        self._facts, self._by_kind, self._by_class = set(), {}, {}
        changed = []
        for fact in old:
            canon = fact.remap(find)
            self.add(canon)
            if canon not in old:
                changed.append(canon)
        return sorted(set(changed), key=Relation.sort_key)

    def dump(self) -> List[str]:
        return [str(f) for f in self]


# -------------------------
# E-graph
# -------------------------
class EGraph:
    def __init__(self):
        self._parent: List[EClassId] = []
        self.classes: Dict[EClassId, EClass] = {}
        self.hashcons: Dict[ENode, EClassId] = {}
        self.facts = FactDB()
        self.merges = 0
        self._pending: List[EClassId] = []
        self._touched: Set[EClassId] = set()

    def find(self, a: EClassId) -> EClassId:
        root = a
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[a] != root:
            self._parent[a], a = root, self._parent[a]
        return root

    def canonical(self, node: ENode) -> ENode:
        return ENode(node.op, tuple(self.find(c) for c in node.children), node.leaf, node.rank)

    def add_node(self, op: OpKind, children: Sequence[EClassId], shape: Shape,
                 origin: Optional[Origin] = None, leaf: Optional[Tuple[Any, ...]] = None,
                 rank: Optional[int] = None) -> EClassId:
        node = self.canonical(ENode(op, tuple(children), leaf, rank))
        cid = self.hashcons.get(node)
        if cid is None:
            cid = len(self._parent)
            self._parent.append(cid)
            self.classes[cid] = EClass(cid, tuple(shape), [node])
            self.hashcons[node] = cid
            for child in set(node.children):
                self.classes[child].parents.append((node, cid))
        cid = self.find(cid)
        if origin is not None:
            self.classes[cid].origins.add(origin)
        return cid

    def merge(self, a: EClassId, b: EClassId) -> EClassId:
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        root, child = min(a, b), max(a, b)
        kept, gone = self.classes[root], self.classes.pop(child)
        if kept.shape != gone.shape:
            logger.warning("Merging e{} {} with e{} {}", root, list(kept.shape), child, list(gone.shape))
        self._parent[child] = root
        kept.nodes.extend(gone.nodes)
        kept.parents.extend(gone.parents)
        kept.origins |= gone.origins
        self._pending.append(root)
        self._touched.update((root, child))
        self.merges += 1
        return root

    def rebuild(self) -> List[Relation]:
        """Restore congruence and canonical facts; returns facts whose canonical form changed."""
        while self._pending:
            todo = sorted({self.find(c) for c in self._pending})
            self._pending = []
            for cid in todo:
                self._repair(self.find(cid))
        for cls in self.classes.values():
            cls.nodes = list(dict.fromkeys(self.canonical(n) for n in cls.nodes))
        changed = self.facts.canonicalize(self.find)
        touched = {self.find(c) for c in self._touched}
        self._touched = set()
        extra = [f for cid in sorted(touched) for f in self.facts.involving(cid)]
        return sorted(set(changed) | set(extra), key=Relation.sort_key)

    def _repair(self, cid: EClassId):
        cls = self.classes[cid]
        seen: Dict[ENode, EClassId] = {}
        original = len(cls.parents)
        for node, owner in cls.parents[:original]:
            self.hashcons.pop(node, None)
            node = self.canonical(node)
            owner = self.find(owner)
            if node in seen and self.find(seen[node]) != owner:
                owner = self.merge(seen[node], owner)
            seen[node] = owner
            self.hashcons[node] = owner
        root = self.find(cid)
        repaired = [(n, self.find(o)) for n, o in seen.items()]
        if root == cid:
            cls.parents = repaired + cls.parents[original:]
        else:
            self.classes[root].parents.extend(repaired)

    # -------------------------
    # Read-only queries used by rule matchers
    # -------------------------
    def shape(self, cid: EClassId) -> Shape:
        return self.classes[self.find(cid)].shape

    def nodes(self, cid: EClassId) -> List[ENode]:
        return [self.canonical(n) for n in self.classes[self.find(cid)].nodes]

    def uses(self, cid: EClassId, name: Optional[str] = None) -> List[Tuple[ENode, EClassId]]:
        """E-nodes that take `cid` as an operand, optionally restricted to one op name."""
        out = {}
        for node, owner in self.classes[self.find(cid)].parents:
            node = self.canonical(node)
            if name is None or node.op.name == name:
                out[node] = self.find(owner)
        return sorted(out.items(), key=lambda item: (item[1], str(item[0].op)))

    def origins(self, cid: EClassId) -> Set[Origin]:
        return self.classes[self.find(cid)].origins

    def equiv(self, a: EClassId, b: EClassId) -> bool:
        return self.find(a) == self.find(b)

    # -------------------------
    # Saturation
    # -------------------------
    def commit(self, derived: Iterable[Tuple[str, Derived]], firings: Dict[str, int]) -> int:
        """Apply derivations in sorted order; returns the number of new facts and merges."""
        changes = 0
        for rule_id, item in sorted(derived, key=lambda d: (str(d[1]), d[0])):
            if isinstance(item, Equate):
                if not self.equiv(item.a, item.b):
                    self.merge(item.a, item.b)
                    firings[rule_id] = firings.get(rule_id, 0) + 1
                    changes += 1
                continue
            fact = item.remap(self.find)
            if fact in self.facts:
                continue
            reason = check_relation(fact, self.shape)
            if reason is not None:
                logger.debug("Rule {} derived an ill-shaped fact, dropped: {}", rule_id, reason)
                continue
            self.facts.add(fact)
            firings[rule_id] = firings.get(rule_id, 0) + 1
            changes += 1
            logger.debug("{} => {}", rule_id, fact)
            if isinstance(fact, Duplicate) and not self.equiv(fact.t, fact.t2):
                self.merge(fact.t, fact.t2)
        return changes

    def _match(self, catalog: "RuleCatalog", delta: Sequence[Relation], jobs: int) -> List[Tuple[str, Derived]]:
        tasks = []
        for rule in catalog:
            relevant = [f for f in delta if f.kind in rule.triggers]
            if relevant:
                tasks.append((rule, relevant))

        def run(task) -> List[Tuple[str, Derived]]:
            rule, facts = task
            return [(rule.id, item) for fact in facts for item in rule.match(self, fact)]

        if jobs <= 1 or len(tasks) <= 1:
            return [d for task in tasks for d in run(task)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return [d for chunk in pool.map(run, tasks) for d in chunk]

    def run_to_fixpoint(self, catalog: "RuleCatalog", budget: Budget = Budget(), jobs: int = 1,
                        firings: Optional[Dict[str, int]] = None) -> SaturationResult:
        """
        Apply the catalog until no new facts or merges appear.

        The first iteration matches against every fact; later iterations only
        against facts that are new or whose classes changed.

        Args:
            catalog (RuleCatalog): Rules to apply.
            budget (Budget): Iteration and fact limits.
            jobs (int): Worker threads used for matching.
            firings (dict): Per-rule counters updated in place.

        Returns:
            SaturationResult: Saturation status and counters.
        """
        firings = {} if firings is None else firings
        self.rebuild()
        delta = list(self.facts)
        iterations = 0
        while True:
            iterations += 1
            result = SaturationResult(False, iterations, len(self.facts), firings)
            if iterations > budget.max_iterations:
                raise BudgetExceeded(result, f"iteration budget {budget.max_iterations} exhausted")
            before = self.facts.snapshot()
            changes = self.commit(self._match(catalog, delta, jobs), firings)
            changed = self.rebuild()
            if len(self.facts) > budget.max_facts:
                result.fact_count = len(self.facts)
                raise BudgetExceeded(result, f"fact budget {budget.max_facts} exhausted")
            if changes == 0:
                logger.debug("Saturated after {} iterations with {} facts", iterations, len(self.facts))
                return SaturationResult(True, iterations, len(self.facts), firings)
            delta = sorted(set(changed) | (self.facts.snapshot() - before), key=Relation.sort_key)
