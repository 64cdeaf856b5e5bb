"""Geometry knowledge graph, its two-layer GCN embedding, and formula-argument binding."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .optree import FormulaRegistry, default_registry

SHAPES = ("square", "cubic", "circle", "triangle", "rectangle", "cuboid")
NULL = "null"

# formulas whose shape is not their name prefix
_SHAPE_OVERRIDES = {"circumference_r": "circle", "circumference_d": "circle"}


def shape_of(formula: str) -> str:
    return _SHAPE_OVERRIDES.get(formula, formula.split("_")[0])


@dataclass(frozen=True)
class KGraph:
    nodes: tuple[tuple[str, str], ...]          # (name, kind) with kind in shape|quantity|null
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if sum(kind == "null" for _, kind in self.nodes) != 1:
            raise ValueError("graph needs exactly one null node")
        for a, b in self.edges:
            if a == b:
                raise ValueError("self-edges are added during normalization, not stored")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.nodes]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def null_index(self) -> int:
        return next(i for i, (_, k) in enumerate(self.nodes) if k == "null")

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((len(self.nodes), len(self.nodes)))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())


ArgBinding = dict  # (formula name, argument index) -> node index


def build_default_kg(reg: FormulaRegistry | None = None) -> tuple[KGraph, ArgBinding]:
    """Shape nodes, per-shape quantity nodes from formula argument labels, one null node.

    Each shape and its quantities form a clique.
    """
    reg = default_registry() if reg is None else reg
    shapes = list(SHAPES)
    for d in reg:
        if shape_of(d.name) not in shapes:
            shapes.append(shape_of(d.name))
    quantities: dict[str, list[str]] = {s: [] for s in shapes}
    for d in reg:
        q = quantities[shape_of(d.name)]
        for label in d.arg_labels:
            if label not in q:
                q.append(label)

    nodes: list[tuple[str, str]] = []
    edges: list[tuple[int, int]] = []
    for s in shapes:
        members = [len(nodes)]
        nodes.append((s, "shape"))
        for label in quantities[s]:
            members.append(len(nodes))
            nodes.append((f"{s}.{label}", "quantity"))
        edges.extend((a, b) for k, a in enumerate(members) for b in members[k + 1:])
    nodes.append((NULL, "null"))
    kg = KGraph(tuple(nodes), tuple(edges))

    names = kg.names
    binding = {(d.name, i): names.index(f"{shape_of(d.name)}.{label}")
               for d in reg for i, label in enumerate(d.arg_labels)}
    return kg, binding


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = np.asarray(a, dtype=np.float64) + np.eye(len(a))
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d[:, None] * d[None, :]


@dataclass
class GcnParams:
    x: nd.Tensor
    w0: nd.Tensor
    w1: nd.Tensor


def gcn_embed(params: GcnParams, a_norm) -> nd.Tensor:
    """Z = A relu(A X W0) W1."""
    a = a_norm if isinstance(a_norm, nd.Tensor) else nd.constant(a_norm)
    if a.shape[0] != params.x.shape[0]:
        raise nd.ShapeMismatch(f"adjacency {a.shape} vs features {params.x.shape}")
    h = nd.relu(a @ (params.x @ params.w0))
    return a @ (h @ params.w1)


def z_index(kg: KGraph, binding: ArgBinding, parent: str | None, child: int) -> int:
    """Node whose embedding guides child ``child`` of ``parent``; null unless the parent is a formula."""
    if parent is not None and (parent, child) in binding:
        return binding[(parent, child)]
    return kg.null_index


def z_for_child(z: nd.Tensor, kg: KGraph, binding: ArgBinding, parent: str | None, child: int) -> nd.Tensor:
    return nd.gather_rows(z, [z_index(kg, binding, parent, child)])


def dump_kg(kg: KGraph, binding: ArgBinding, path) -> None:
    data = {"nodes": [{"name": n, "kind": k} for n, k in kg.nodes],
            "edges": [list(e) for e in kg.edges],
            "binding": [{"formula": f, "arg": i, "node": kg.nodes[n][0]}
                        for (f, i), n in binding.items()]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


def load_kg(path, reg: FormulaRegistry | None = None) -> tuple[KGraph, ArgBinding]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    kg = KGraph(tuple((n["name"], n["kind"]) for n in data["nodes"]),
                tuple((int(a), int(b)) for a, b in data["edges"]))
    names = kg.names
    binding = {(b["formula"], int(b["arg"])): names.index(b["node"]) for b in data["binding"]}
    if reg is not None:
        missing = [(d.name, i) for d in reg for i in range(d.arity) if (d.name, i) not in binding]
        if missing:
            raise ValueError(f"binding does not cover {missing[:3]}")
    return kg, binding
