"""Plain-language explanations for predictions moved by the projection.

Templates map a constraint kind to a pattern such as
``"{entity} was adjusted from {original:3} to {projected:3}"``; ``:N`` fixes
the number of decimals of a numeric placeholder.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .expr import Bounds, Conservation, Constraint, LinearEquality, LinearInequality

KINDS = ("bounds", "conservation", "linear", "nonlinear")
PLACEHOLDERS = ("entity", "original", "projected", "threshold", "unit", "constraint", "relation")
NUMERIC = ("original", "projected", "threshold")
DEFAULT_PRECISION = 3
_FIELD = re.compile(r"\{([A-Za-z_]+)(?::(\d+))?\}")


@dataclass(frozen=True)
class ExplanationTemplate:
    kind: str
    pattern: str

    def __post_init__(self):
        for name, _ in _FIELD.findall(self.pattern):
            if name not in PLACEHOLDERS:
                raise DataError(f"template for {self.kind!r} uses unknown placeholder {{{name}}}")

    def render(self, ctx: Mapping[str, object]) -> str:
        def sub(m):
            name, prec = m.group(1), m.group(2)
            if name not in ctx:
                raise DataError(f"placeholder {{{name}}} is not bound for kind {self.kind!r}")
            v = ctx[name]
            if name in NUMERIC:
                return format_values(v, DEFAULT_PRECISION if prec is None else int(prec))
            return str(v)

        return _FIELD.sub(sub, self.pattern)


@dataclass(frozen=True)
class Explanation:
    constraint_id: str
    kind: str
    text: str
    original: tuple[float, ...]
    projected: tuple[float, ...]
    magnitude: float


def format_values(v, precision: int) -> str:
    vals = np.atleast_1d(np.asarray(v, dtype=float))
    s = ", ".join(f"{float(x):.{precision}f}" for x in vals)
    return s if len(vals) == 1 else f"({s})"


def parse_templates(data: Mapping[str, str]) -> dict[str, ExplanationTemplate]:
    if not isinstance(data, Mapping):
        raise DataError("explanation templates must map constraint kinds to patterns")
    out = {}
    for kind, pattern in data.items():
        if kind not in KINDS:
            raise DataError(f"unknown constraint kind {kind!r} in explanation templates")
        out[kind] = ExplanationTemplate(kind, str(pattern))
    return out


def load_templates(path: str | Path | None = None) -> dict[str, ExplanationTemplate]:
    """Templates from a JSON file; the packaged defaults when ``path`` is None."""
    if path is None:
        text = resources.files("constraint_uq").joinpath("data/explanation_templates.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        return parse_templates(json.loads(text))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed explanation templates ({exc})") from None


def involved_outputs(c: Constraint) -> list[int]:
    b = c.body
    if isinstance(b, Bounds):
        return [b.index]
    if isinstance(b, Conservation):
        return [i for i, a in b.terms if a != 0.0]
    if isinstance(b, (LinearInequality, LinearEquality)):
        return [i for i, a in enumerate(b.coef_y) if a != 0.0]
    idx: set[int] = set()
    stack = [b.expr]
    while stack:
        e = stack.pop()
        if type(e).__name__ == "OutVar":
            idx.add(e.index)
        stack.extend(e.children)
    return sorted(idx)


def _context(c: Constraint, y_hat, y_proj, names, units) -> dict[str, object]:
    idx = involved_outputs(c) or list(range(c.d_y))
    b = c.body
    relation = "within"
    if isinstance(b, Bounds):
        if b.upper is not None and (b.lower is None or y_proj[b.index] <= y_hat[b.index]):
            threshold, relation = b.upper, "below"
        else:
            threshold, relation = b.lower, "above"
    elif isinstance(b, Conservation):
        threshold = b.value
    elif isinstance(b, LinearInequality):
        threshold, relation = b.bound, "below"
    elif isinstance(b, LinearEquality):
        threshold = b.value
    else:
        threshold, relation = 0.0, "below"
    unit = ""
    if units is not None:
        us = {units[i] for i in idx if units[i]}
        unit = " " + us.pop() if len(us) == 1 else ""
    return {
        "entity": ", ".join(names[i] for i in idx),
        "original": [y_hat[i] for i in idx],
        "projected": [y_proj[i] for i in idx],
        "threshold": threshold,
        "unit": unit,
        "constraint": c.id,
        "relation": relation,
        "_idx": idx,
    }


def generate(
    y_hat,
    y_proj,
    contributions: Mapping[str, float],
    constraints: Sequence[Constraint],
    templates: Mapping[str, ExplanationTemplate],
    delta: float | None = None,
    names: Sequence[str] | None = None,
    units: Sequence[str] | None = None,
) -> list[Explanation]:
    """One explanation per active constraint whose share of the displacement exceeds ``delta``.

    ``contributions`` maps constraint ids to their share ``||mu_k a_k||`` of
    the displacement. With ``delta=None`` every constraint with a positive
    share is explained. Output is ordered by decreasing share, then id.
    """
    if delta is not None and delta < 0:
        raise ValueError("delta must be >= 0")
    y_hat = np.asarray(y_hat, dtype=float)
    y_proj = np.asarray(y_proj, dtype=float)
    if names is None:
        names = [f"y[{i}]" for i in range(len(y_hat))]
    by_id = {c.id: c for c in constraints}
    thr = 0.0 if delta is None else delta
    picked = sorted(((m, cid) for cid, m in contributions.items() if m > thr), key=lambda t: (-t[0], t[1]))
    out = []
    for mag, cid in picked:
        if cid not in by_id:
            raise DataError(f"active constraint {cid!r} is not in the constraint list")
        c = by_id[cid]
        if c.kind not in templates:
            raise DataError(f"no explanation template for constraint kind {c.kind!r}")
        ctx = _context(c, y_hat, y_proj, names, units)
        idx = ctx.pop("_idx")
        text = templates[c.kind].render(ctx)
        out.append(Explanation(cid, c.kind, text, tuple(float(y_hat[i]) for i in idx),
                               tuple(float(y_proj[i]) for i in idx), float(mag)))
    return out


def significant(y_hat, y_proj, delta: float | None = None) -> np.ndarray:
    """Rows whose displacement exceeds ``delta`` (default ``0.01 * ||y_hat||``)."""
    Y = np.atleast_2d(np.asarray(y_hat, dtype=float))
    P = np.atleast_2d(np.asarray(y_proj, dtype=float))
    disp = np.linalg.norm(P - Y, axis=1)
    thr = 0.01 * np.linalg.norm(Y, axis=1) if delta is None else np.full(len(Y), float(delta))
    return (disp > thr) & (disp > 0.0)


def coverage_metric(explanations: Sequence[Sequence[Explanation]], y_hat, y_proj, delta: float | None = None) -> float:
    """Share of significantly modified predictions that received an explanation.

    ``explanations[i]`` lists the explanations of prediction ``i``. With no
    significant modification at all the coverage is 1 by convention.
    """
    sig = significant(y_hat, y_proj, delta)
    if len(explanations) != len(sig):
        raise ValueError("one explanation list per prediction is required")
    n = int(sig.sum())
    if n == 0:
        return 1.0
    return sum(1 for i in np.flatnonzero(sig) if explanations[i]) / n


def template_accuracy(explanations: Sequence[Explanation], gold: Mapping[str, str] | Sequence[str]) -> float:
    """Share of explanations rendered with the gold kind of their constraint.

    ``gold`` is a mapping from constraint id to kind, or a list aligned with
    ``explanations``. Empty input scores 0.
    """
    if not explanations:
        return 0.0
    if isinstance(gold, Mapping):
        labels = [gold.get(e.constraint_id) for e in explanations]
    else:
        if len(gold) != len(explanations):
            raise ValueError("gold labels must align with explanations")
        labels = list(gold)
    return sum(e.kind == g for e, g in zip(explanations, labels)) / len(explanations)
