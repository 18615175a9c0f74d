"""Rule graphs: extraction from quantized circuits, rewriting, and export.

A rule graph is a DAG of feature predicates (threshold comparisons in
original units, one-hot equality checks, constants), two-input gate nodes,
and per-class aggregation maps with integer wire multiplicities.  The
rewriter applies, to a fixpoint: constant folding over the full operator
table, pass-through and negation collapse (negations push into leaves or
flip a child gate to its complement), idempotence and complement rules under
an identical-subtree check, structural deduplication, and dead-node
elimination.  Every step preserves class scores for all consistent leaf
assignments and never increases the node count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import logic
from .data import PreprocessState
from .discrete import DiscreteNetwork

RULES_FORMAT = "dln-rules"
RULES_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Leaf:
    kind: str  # "threshold" | "category" | "const"
    feature: str = ""
    op: str = ""  # ">=" | "<" | "==" | "!="
    value: object = None  # cutoff (float), category (str), or bool for consts

    def label(self) -> str:
        if self.kind == "const":
            return "TRUE" if self.value else "FALSE"
        if self.kind == "threshold":
            return f"{self.feature} {self.op} {self.value:g}"
        return f"{self.feature} {self.op} {self.value}"


@dataclass(frozen=True)
class Gate:
    gate: int
    a: int
    b: int


TRUE_LEAF = Leaf(kind="const", value=True)
FALSE_LEAF = Leaf(kind="const", value=False)

_FLIP = {">=": "<", "<": ">=", "==": "!=", "!=": "=="}


@dataclass
class RuleGraph:
    nodes: list  # Leaf | Gate; gate children always have smaller indices
    classes: list  # per class: dict[node index -> multiplicity]
    class_names: list

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def leaf_atom(leaf: Leaf):
    """Identity of the boolean variable underlying a (non-const) leaf."""
    if leaf.kind == "const":
        return None
    return (leaf.kind, leaf.feature, leaf.value)


def leaf_positive(leaf: Leaf) -> bool:
    return leaf.op in (">=", "==")


def graph_atoms(graph: RuleGraph) -> list:
    atoms = []
    seen = set()
    for node in graph.nodes:
        if isinstance(node, Leaf) and node.kind != "const":
            a = leaf_atom(node)
            if a not in seen:
                seen.add(a)
                atoms.append(a)
    return atoms


def evaluate_graph(graph: RuleGraph, atom_values: dict) -> np.ndarray:
    """Class scores for assignments of the underlying atoms.

    ``atom_values`` maps each atom to a scalar or an array of 0/1 values;
    leaves with negative polarity see the complement, so pairs like
    ``x >= c`` / ``x < c`` stay consistent.  Returns ``[n_assign, n_classes]``.
    """
    n = 1
    for v in atom_values.values():
        v = np.asarray(v)
        if v.ndim:
            n = max(n, len(v))
    vals = []
    for node in graph.nodes:
        if isinstance(node, Leaf):
            if node.kind == "const":
                v = np.full(n, 1 if node.value else 0, dtype=np.int64)
            else:
                base = np.broadcast_to(
                    np.asarray(atom_values[leaf_atom(node)], dtype=np.int64), (n,)
                )
                v = base if leaf_positive(node) else 1 - base
        else:
            v = logic.hard_logic_many(node.gate, vals[node.a], vals[node.b])
        vals.append(v)
    scores = np.zeros((n, len(graph.classes)), dtype=np.int64)
    for c, wires in enumerate(graph.classes):
        for idx, mult in wires.items():
            scores[:, c] += mult * vals[idx]
    return scores


def extract(net: DiscreteNetwork, state: PreprocessState) -> RuleGraph:
    """One graph node per live circuit element, thresholds in original units.

    Negative-slope comparisons render as ``<`` predicates; biases outside the
    [0, 1] input domain fold to constant leaves.
    """
    nodes: list = []

    def add(node) -> int:
        nodes.append(node)
        return len(nodes) - 1

    def threshold_leaf(feat: int, bias: float, sign: int) -> int:
        lo, hi = float(state.cont_min[feat]), float(state.cont_max[feat])
        name = state.cont_names[feat]
        if hi <= lo:  # constant feature: scaled value is always 0
            value = (0.0 - bias) * sign >= 0
            return add(TRUE_LEAF if value else FALSE_LEAF)
        if sign >= 0:
            if bias <= 0.0:
                return add(TRUE_LEAF)
            if bias > 1.0:
                return add(FALSE_LEAF)
            return add(Leaf("threshold", name, ">=", bias * (hi - lo) + lo))
        if bias >= 1.0:
            return add(TRUE_LEAF)
        if bias < 0.0:
            return add(FALSE_LEAF)
        return add(Leaf("threshold", name, "<", bias * (hi - lo) + lo))

    block_nodes = []
    for blk in net.threshold_blocks:
        block_nodes.append(
            [threshold_leaf(int(f), float(b), int(s))
             for f, b, s in zip(blk.feature, blk.bias, blk.sign)]
        )
    onehot_nodes = []
    for name, cats, sl in state.onehot_groups():
        for cat in cats:
            onehot_nodes.append(add(Leaf("category", name, "==", cat)))

    inputs = block_nodes[0] + onehot_nodes
    for layer, circ in enumerate(net.layers):
        if layer > 0:
            block = net.layer_concat[layer]
            if block is not None:
                inputs = inputs + block_nodes[block]
        inputs = [
            add(Gate(int(g), inputs[int(a)], inputs[int(b)]))
            for g, a, b in zip(circ.gate, circ.a, circ.b)
        ]
    classes = []
    for c in range(net.n_classes):
        wires = {}
        for j in np.flatnonzero(net.wiring[:, c]):
            node = inputs[int(j)]
            wires[node] = wires.get(node, 0) + int(net.wiring[int(j), c])
        classes.append(wires)
    return RuleGraph(nodes=nodes, classes=classes, class_names=list(state.label_categories))


def _const_val(node):
    if isinstance(node, Leaf) and node.kind == "const":
        return 1 if node.value else 0
    return None


def _unary(outputs, child_idx, emit, negate):
    """Rewrite a gate that reduces to a function of one child."""
    if outputs == (0, 0):
        return emit(FALSE_LEAF)
    if outputs == (1, 1):
        return emit(TRUE_LEAF)
    if outputs == (0, 1):
        return child_idx
    return negate(child_idx)


def _rewrite_pass(graph: RuleGraph) -> RuleGraph:
    """One bottom-up pass of folding/collapse/dedup, then dead-node removal."""
    new_nodes: list = []
    index: dict = {}
    remap: dict = {}

    def emit(node) -> int:
        key = node
        found = index.get(key)
        if found is not None:
            return found
        new_nodes.append(node)
        index[key] = len(new_nodes) - 1
        return len(new_nodes) - 1

    def negate(idx: int) -> int:
        node = new_nodes[idx]
        if isinstance(node, Leaf):
            if node.kind == "const":
                return emit(FALSE_LEAF if node.value else TRUE_LEAF)
            return emit(replace(node, op=_FLIP[node.op]))
        return emit(Gate(logic.complement_gate(node.gate), node.a, node.b))

    def complementary(i: int, j: int) -> bool:
        x, y = new_nodes[i], new_nodes[j]
        if isinstance(x, Leaf) and isinstance(y, Leaf):
            return (
                x.kind != "const"
                and y.kind == x.kind
                and leaf_atom(x) == leaf_atom(y)
                and leaf_positive(x) != leaf_positive(y)
            )
        if isinstance(x, Gate) and isinstance(y, Gate):
            return x.gate + y.gate == 15 and x.a == y.a and x.b == y.b
        return False

    for old_idx, node in enumerate(graph.nodes):
        if isinstance(node, Leaf):
            remap[old_idx] = emit(node)
            continue
        a, b = remap[node.a], remap[node.b]
        table = logic.truth_table(node.gate)
        ca, cb = _const_val(new_nodes[a]), _const_val(new_nodes[b])
        if ca is not None and cb is not None:
            remap[old_idx] = emit(TRUE_LEAF if table[2 * ca + cb] else FALSE_LEAF)
        elif cb is not None:
            remap[old_idx] = _unary((table[cb], table[2 + cb]), a, emit, negate)
        elif ca is not None:
            remap[old_idx] = _unary((table[2 * ca], table[2 * ca + 1]), b, emit, negate)
        elif a == b:
            remap[old_idx] = _unary((table[0], table[3]), a, emit, negate)
        elif complementary(a, b):
            remap[old_idx] = _unary((table[1], table[2]), a, emit, negate)
        elif node.gate == 0:
            remap[old_idx] = emit(FALSE_LEAF)
        elif node.gate == 15:
            remap[old_idx] = emit(TRUE_LEAF)
        elif node.gate == 3:
            remap[old_idx] = a
        elif node.gate == 5:
            remap[old_idx] = b
        elif node.gate == 12:
            remap[old_idx] = negate(a)
        elif node.gate == 10:
            remap[old_idx] = negate(b)
        else:
            remap[old_idx] = emit(Gate(node.gate, a, b))

    classes = []
    for wires in graph.classes:
        merged: dict = {}
        for idx, mult in wires.items():
            ni = remap[idx]
            merged[ni] = merged.get(ni, 0) + mult
        classes.append(merged)

    # Dead-node elimination: keep only what class nodes reach.
    live = set()
    stack = [idx for wires in classes for idx in wires]
    while stack:
        i = stack.pop()
        if i in live:
            continue
        live.add(i)
        node = new_nodes[i]
        if isinstance(node, Gate):
            stack.extend((node.a, node.b))
    order = sorted(live)
    compact = {old: new for new, old in enumerate(order)}
    final_nodes = []
    for old in order:
        node = new_nodes[old]
        if isinstance(node, Gate):
            node = Gate(node.gate, compact[node.a], compact[node.b])
        final_nodes.append(node)
    final_classes = [
        {compact[i]: m for i, m in wires.items()} for wires in classes
    ]
    return RuleGraph(nodes=final_nodes, classes=final_classes,
                     class_names=list(graph.class_names))


def simplify(graph: RuleGraph, max_passes: int = 100) -> RuleGraph:
    """Apply the rewrite system to a fixpoint; node count never increases."""
    current = graph
    for _ in range(max_passes):
        nxt = _rewrite_pass(current)
        if nxt.nodes == current.nodes and nxt.classes == current.classes:
            return nxt
        current = nxt
    raise RuntimeError("rewriting did not reach a fixpoint")


def selected_features(graph: RuleGraph) -> list:
    """Sorted feature names still referenced by the graph."""
    return sorted(
        {n.feature for n in graph.nodes if isinstance(n, Leaf) and n.kind != "const"}
    )


def export_dot(graph: RuleGraph) -> str:
    """Deterministic DOT text: feature boxes, operator diamonds, class nodes."""
    lines = [
        "digraph rules {",
        "  rankdir=LR;",
        '  node [fontname="Helvetica"];',
    ]
    for i, node in enumerate(graph.nodes):
        if isinstance(node, Leaf):
            lines.append(
                f'  n{i} [shape=box, style=filled, fillcolor=lightyellow, '
                f'label="{node.label()}"];'
            )
        else:
            lines.append(f'  n{i} [shape=diamond, label="{logic.GATE_NAMES[node.gate]}"];')
    for c, name in enumerate(graph.class_names):
        lines.append(
            f'  class{c} [shape=ellipse, style=filled, fillcolor=lightblue, '
            f'label="Class_{c}: {name}"];'
        )
    for i, node in enumerate(graph.nodes):
        if isinstance(node, Gate):
            lines.append(f"  n{node.a} -> n{i};")
            lines.append(f"  n{node.b} -> n{i};")
    for c, wires in enumerate(graph.classes):
        for idx in sorted(wires):
            mult = wires[idx]
            suffix = f' [label="*{mult}"]' if mult > 1 else ""
            lines.append(f"  n{idx} -> class{c}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_to_json(graph: RuleGraph, manifest_hash: str | None = None) -> dict:
    nodes = []
    for node in graph.nodes:
        if isinstance(node, Leaf):
            nodes.append(
                {"type": "leaf", "kind": node.kind, "feature": node.feature,
                 "op": node.op, "value": node.value}
            )
        else:
            nodes.append(
                {"type": "gate", "gate": int(node.gate),
                 "name": logic.GATE_NAMES[node.gate], "a": int(node.a), "b": int(node.b)}
            )
    return {
        "format": RULES_FORMAT,
        "format_version": RULES_FORMAT_VERSION,
        "manifest_hash": manifest_hash,
        "nodes": nodes,
        "classes": [
            {"name": name, "wires": [{"node": int(i), "multiplicity": int(m)}
                                     for i, m in sorted(wires.items())]}
            for name, wires in zip(graph.class_names, graph.classes)
        ],
        "selected_features": selected_features(graph),
    }


def graph_from_json(doc: dict) -> RuleGraph:
    if doc.get("format") != RULES_FORMAT:
        raise ValueError(f"not a {RULES_FORMAT} document")
    nodes = []
    for n in doc["nodes"]:
        if n["type"] == "leaf":
            nodes.append(Leaf(kind=n["kind"], feature=n["feature"], op=n["op"], value=n["value"]))
        else:
            nodes.append(Gate(gate=int(n["gate"]), a=int(n["a"]), b=int(n["b"])))
    classes = [
        {int(w["node"]): int(w["multiplicity"]) for w in c["wires"]} for c in doc["classes"]
    ]
    return RuleGraph(nodes=nodes, classes=classes,
                     class_names=[c["name"] for c in doc["classes"]])


def dump_rules(path, graph, manifest_hash=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_json(graph, manifest_hash), fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")


def load_rules(path) -> RuleGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_json(json.load(fh))
