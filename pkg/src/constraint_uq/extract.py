"""Constraint mining from a knowledge graph of scientific records.

Rule templates describe small typed motifs (slots plus required edges). Every
injective slot assignment that reproduces the motif and whose embeddings are
close enough to the slot anchors is instantiated into a :class:`Constraint`
and kept if it holds on enough of the verification data.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConstraintError, DataError
from .expr import Bounds, Conservation, Constraint, LinearInequality, Provenance, same_rule

log = logging.getLogger(__name__)

VERTEX_KINDS = ("quantity", "material", "relation-node")
TEMPLATE_KINDS = ("conservation", "bounds", "linear-relation")
DEFAULT_SIM_THRESHOLD = 0.85


@dataclass(frozen=True)
class Vertex:
    id: str
    label: str
    kind: str
    emb: np.ndarray = field(compare=False)
    output: int | None = None  # index of the model output this quantity maps to


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    rel: str
    payload: float | None = None


@dataclass
class KnowledgeGraph:
    vertices: dict[str, Vertex] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self):
        self._index: dict[tuple[str, str, str], Edge] = {}
        dims = {len(v.emb) for v in self.vertices.values()}
        if len(dims) > 1:
            raise DataError(f"embedding dimensions differ: {sorted(dims)}")
        for e in self.edges:
            self._add_edge(e)

    def _add_edge(self, e: Edge) -> None:
        for end in (e.src, e.dst):
            if end not in self.vertices:
                raise DataError(f"edge {e.src}->{e.dst} ({e.rel}) references unknown vertex {end!r}")
        key = (e.src, e.dst, e.rel)
        if key in self._index:
            raise DataError(f"duplicate edge {e.src}->{e.dst} ({e.rel})")
        self._index[key] = e

    def edge(self, src: str, dst: str, rel: str) -> Edge | None:
        return self._index.get((src, dst, rel))

    @property
    def emb_dim(self) -> int | None:
        for v in self.vertices.values():
            return len(v.emb)
        return None


def _parse_vertex(rec: dict, where: str) -> Vertex:
    try:
        vid, label, kind, emb = rec["id"], rec.get("label", rec["id"]), rec["kind"], rec["emb"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{where}: vertex record missing field {exc}") from None
    if kind not in VERTEX_KINDS:
        raise DataError(f"{where}: unknown vertex kind {kind!r}")
    emb = np.asarray(emb, dtype=float)
    if emb.ndim != 1 or len(emb) == 0 or not np.all(np.isfinite(emb)):
        raise DataError(f"{where}: embedding must be a nonempty finite vector")
    out = rec.get("output")
    if out is not None and (not isinstance(out, int) or out < 0):
        raise DataError(f"{where}: output index must be a nonnegative integer")
    return Vertex(str(vid), str(label), kind, emb, out)


def _parse_edge(rec: dict, where: str) -> Edge:
    try:
        src, dst, rel = rec["src"], rec["dst"], rec["rel"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{where}: edge record missing field {exc}") from None
    payload = rec.get("payload")
    if payload is not None:
        if isinstance(payload, bool) or not isinstance(payload, (int, float)) or not np.isfinite(payload):
            raise DataError(f"{where}: payload must be a finite number")
        payload = float(payload)
    return Edge(str(src), str(dst), str(rel), payload)


def parse_graph(text: str, name: str = "<graph>") -> KnowledgeGraph:
    """Read one JSON record per line (blank lines ignored)."""
    vertices: dict[str, Vertex] = {}
    edges: list[Edge] = []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{name}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed record ({exc.msg})") from None
        if not isinstance(rec, dict) or len(rec) != 1 or not ({"vertex", "edge"} & rec.keys()):
            raise DataError(f"{where}: record must be {{\"vertex\": ...}} or {{\"edge\": ...}}")
        if "vertex" in rec:
            v = _parse_vertex(rec["vertex"], where)
            if v.id in vertices:
                raise DataError(f"{where}: duplicate vertex id {v.id!r}")
            if dim is not None and len(v.emb) != dim:
                raise DataError(f"{where}: embedding dimension {len(v.emb)} != {dim}")
            dim = len(v.emb)
            vertices[v.id] = v
        else:
            edges.append(_parse_edge(rec["edge"], where))
    try:
        return KnowledgeGraph(vertices, edges)
    except DataError as exc:
        raise DataError(f"{name}: {exc}") from None


def load_graph(path: str | Path) -> KnowledgeGraph:
    path = Path(path)
    return parse_graph(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    name: str
    kind: str
    anchor: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class EdgePattern:
    name: str
    src: str
    dst: str
    rel: str


@dataclass(frozen=True)
class RuleTemplate:
    id: str
    kind: str
    slots: tuple[Slot, ...]
    edges: tuple[EdgePattern, ...]
    recipe: dict[str, Any] = field(compare=False)

    def __post_init__(self):
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise DataError(f"template {self.id}: duplicate slot names")
        if self.kind not in TEMPLATE_KINDS:
            raise DataError(f"template {self.id}: unknown kind {self.kind!r}")
        enames = [e.name for e in self.edges]
        if len(set(enames)) != len(enames):
            raise DataError(f"template {self.id}: duplicate edge names")
        for e in self.edges:
            if e.src not in names or e.dst not in names:
                raise DataError(f"template {self.id}: edge {e.name} uses an undeclared slot")
        for slot in _recipe_slots(self.recipe):
            if slot not in names:
                raise DataError(f"template {self.id}: recipe references undeclared slot {slot!r}")
        for en in _recipe_edges(self.recipe):
            if en not in enames:
                raise DataError(f"template {self.id}: recipe references undeclared edge {en!r}")


def _recipe_slots(r: dict) -> list[str]:
    out = [t["slot"] for t in r.get("terms", [])]
    if "slot" in r:
        out.append(r["slot"])
    return out


def _recipe_edges(r: dict) -> list[str]:
    out = [t["coef_edge"] for t in r.get("terms", []) if "coef_edge" in t]
    for k in ("total_edge", "upper_edge", "lower_edge", "bound_edge"):
        if k in r:
            out.append(r[k])
    return out


def parse_templates(data: dict | list, emb_dim: int | None = None) -> list[RuleTemplate]:
    items = data.get("templates", []) if isinstance(data, dict) else data
    out = []
    for k, t in enumerate(items):
        try:
            slots = tuple(Slot(s["name"], s["kind"], np.asarray(s["anchor"], dtype=float)) for s in t["slots"])
            edges = tuple(EdgePattern(e.get("name", f"e{j}"), e["src"], e["dst"], e["rel"]) for j, e in enumerate(t.get("edges", [])))
            tpl = RuleTemplate(str(t["id"]), t["kind"], slots, edges, dict(t.get("recipe", {})))
        except (KeyError, TypeError) as exc:
            raise DataError(f"template #{k}: missing field {exc}") from None
        for s in tpl.slots:
            if s.kind not in VERTEX_KINDS:
                raise DataError(f"template {tpl.id}: unknown slot kind {s.kind!r}")
            if emb_dim is not None and len(s.anchor) != emb_dim:
                raise DataError(f"template {tpl.id}: anchor of slot {s.name} has dimension {len(s.anchor)} != {emb_dim}")
        out.append(tpl)
    ids = [t.id for t in out]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate template ids")
    return out


def load_templates(path: str | Path, emb_dim: int | None = None) -> list[RuleTemplate]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed template file ({exc})") from None
    return parse_templates(data, emb_dim)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemplateMatch:
    template_id: str
    assignment: tuple[tuple[str, str], ...]  # (slot name, vertex id) in slot order
    similarity: float

    @property
    def mapping(self) -> dict[str, str]:
        return dict(self.assignment)

    @property
    def key(self) -> str:
        return ".".join(re.sub(r"[^A-Za-z0-9_\-]", "_", v) for _, v in self.assignment)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


def similarity(t: RuleTemplate, g: KnowledgeGraph, assignment: Sequence[str]) -> float:
    """Mean cosine similarity between slot anchors and assigned embeddings, clipped to [0, 1]."""
    if not t.slots:
        return 1.0
    s = sum(cosine(slot.anchor, g.vertices[v].emb) for slot, v in zip(t.slots, assignment))
    return min(1.0, max(0.0, s / len(t.slots)))


def _structural_matches(t: RuleTemplate, g: KnowledgeGraph):
    """Injective typed assignments satisfying every required edge (depth-first)."""
    names = [s.name for s in t.slots]
    pos = {n: k for k, n in enumerate(names)}
    cands = [sorted(v.id for v in g.vertices.values() if v.kind == s.kind) for s in t.slots]
    # edges become checkable once both endpoints are assigned
    ready: list[list[EdgePattern]] = [[] for _ in names]
    for e in t.edges:
        ready[max(pos[e.src], pos[e.dst])].append(e)
    chosen: list[str] = []

    def rec(k):
        if k == len(names):
            yield tuple(chosen)
            return
        for v in cands[k]:
            if v in chosen:
                continue
            chosen.append(v)
            if all(g.edge(chosen[pos[e.src]], chosen[pos[e.dst]], e.rel) is not None for e in ready[k]):
                yield from rec(k + 1)
            chosen.pop()

    yield from rec(0)


def match_templates(
    g: KnowledgeGraph, templates: Sequence[RuleTemplate], sim_threshold: float = DEFAULT_SIM_THRESHOLD
) -> list[TemplateMatch]:
    """All structurally valid assignments with similarity >= ``sim_threshold``.

    Sorted by descending similarity, then template id, then assignment.
    """
    if not 0.0 <= sim_threshold <= 1.0:
        raise ValueError("sim_threshold must lie in [0, 1]")
    out = []
    for t in templates:
        for assign in _structural_matches(t, g):
            sim = similarity(t, g, assign)
            if sim >= sim_threshold:
                out.append(TemplateMatch(t.id, tuple(zip((s.name for s in t.slots), assign)), sim))
    out.sort(key=lambda m: (-round(m.similarity, 12), m.template_id, tuple(v for _, v in m.assignment)))
    return out


# ---------------------------------------------------------------------------
# Instantiation and scoring
# ---------------------------------------------------------------------------


def _payload(t: RuleTemplate, m: TemplateMatch, g: KnowledgeGraph, edge_name: str) -> float:
    ep = next(e for e in t.edges if e.name == edge_name)
    mp = m.mapping
    e = g.edge(mp[ep.src], mp[ep.dst], ep.rel)
    if e is None:
        raise ConstraintError(f"template {t.id}: matched graph lacks edge {edge_name}")
    if e.payload is None:
        raise ConstraintError(f"template {t.id}: edge {e.src}->{e.dst} ({e.rel}) has no numeric payload")
    return e.payload


def _output(t: RuleTemplate, m: TemplateMatch, g: KnowledgeGraph, slot: str) -> int:
    v = g.vertices[m.mapping[slot]]
    if v.output is None:
        raise ConstraintError(f"template {t.id}: vertex {v.id!r} is not mapped to a model output")
    return v.output


def _coef(t, m, g, term) -> float:
    if "coef_edge" in term:
        return _payload(t, m, g, term["coef_edge"])
    if "coef" in term:
        return float(term["coef"])
    raise ConstraintError(f"template {t.id}: term for slot {term['slot']} has no coefficient")


def instantiate(t: RuleTemplate, m: TemplateMatch, g: KnowledgeGraph, d_y: int, d_x: int = 0) -> Constraint:
    """Build the constraint described by ``t``'s recipe from the matched payloads."""
    if m.template_id != t.id:
        raise ConstraintError(f"match belongs to template {m.template_id}, not {t.id}")
    r = t.recipe
    hard = bool(r.get("hard", True))
    weight = None if hard else float(r.get("weight", 1.0))
    if t.kind == "conservation":
        terms = tuple((_output(t, m, g, term["slot"]), _coef(t, m, g, term)) for term in r["terms"])
        total = _payload(t, m, g, r["total_edge"]) if "total_edge" in r else float(r["total"])
        body = Conservation(terms, total, float(r.get("tol", 1e-6)))
    elif t.kind == "bounds":
        idx = _output(t, m, g, r["slot"])
        upper = _payload(t, m, g, r["upper_edge"]) if "upper_edge" in r else r.get("upper")
        lower = _payload(t, m, g, r["lower_edge"]) if "lower_edge" in r else r.get("lower")
        body = Bounds(idx, None if lower is None else float(lower), None if upper is None else float(upper))
    else:
        row = np.zeros(d_y)
        for term in r["terms"]:
            row[_output(t, m, g, term["slot"])] += _coef(t, m, g, term)
        bound = _payload(t, m, g, r["bound_edge"]) if "bound_edge" in r else float(r["bound"])
        sign = -1.0 if r.get("sense", "<=") == ">=" else 1.0
        body = LinearInequality(tuple(sign * row), sign * bound)
    cid = f"{t.id}:{m.key}"
    prov = Provenance("extracted", t.id, m.key)
    return Constraint(cid, body, d_y, d_x, hard, weight, provenance=prov)


def score_constraint(c: Constraint, Y, X=None, weights=None) -> float:
    """``(1/N) sum_i w_i * 1{c holds on (y_i, x_i)}``; not normalized by the weights."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = len(Y)
    if n == 0:
        raise DataError("verification dataset is empty")
    if Y.shape[1] != c.d_y:
        raise DataError(f"{c.id}: targets have {Y.shape[1]} columns, constraint expects {c.d_y}")
    X = np.zeros((n, 0)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] < c.d_x or len(X) != n:
        raise DataError(f"{c.id}: feature matrix shape {X.shape} does not match")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise DataError("weights must be a nonnegative vector with one entry per sample")
    hits = np.array([c.satisfied(y, x) for y, x in zip(Y, X)], dtype=float)
    return float(np.sum(hits * w) / n)


def candidates(
    g: KnowledgeGraph,
    templates: Sequence[RuleTemplate],
    d_y: int,
    d_x: int = 0,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> list[Constraint]:
    """Instantiated matches with structurally identical rules collapsed to the best match."""
    by_id = {t.id: t for t in templates}
    out: list[Constraint] = []
    for m in match_templates(g, templates, sim_threshold):
        c = instantiate(by_id[m.template_id], m, g, d_y, d_x)
        if not any(c.structurally_equal(o, 1e-9) for o in out):
            out.append(c)
    return out


def extract(
    g: KnowledgeGraph,
    templates: Sequence[RuleTemplate],
    Y,
    X=None,
    weights=None,
    tau_score: float = 0.9,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> list[Constraint]:
    """Candidates whose score reaches ``tau_score``, sorted by (-score, id).

    Returned constraints carry their score.
    """
    if not 0.0 <= tau_score <= 1.0:
        raise ValueError("tau_score must lie in [0, 1]")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    d_x = 0 if X is None else np.atleast_2d(np.asarray(X)).shape[1]
    kept = []
    for c in candidates(g, templates, Y.shape[1], d_x, sim_threshold):
        s = score_constraint(c, Y, X, weights)
        if s >= tau_score:
            kept.append(replace(c, score=s))
        else:
            log.debug("rejected %s with score %.4f", c.id, s)
    kept.sort(key=lambda c: (-c.score, c.id))
    return kept


@dataclass(frozen=True)
class ExtractionMetrics:
    precision: float
    recall: float
    f1: float
    n_extracted: int
    n_gold: int
    n_correct: int


def extraction_metrics(extracted: Iterable[Constraint], gold: Iterable[Constraint], tol: float = 1e-9) -> ExtractionMetrics:
    """Precision/recall/F1 with rules compared structurally; empty precision reads 0."""
    ext = list(extracted)
    gold = list(gold)
    used = [False] * len(gold)
    correct = 0
    for c in ext:
        for k, gc in enumerate(gold):
            if not used[k] and same_rule(c, gc, tol):
                used[k] = True
                correct += 1
                break
    p = correct / len(ext) if ext else 0.0
    r = correct / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ExtractionMetrics(p, r, f, len(ext), len(gold), correct)
