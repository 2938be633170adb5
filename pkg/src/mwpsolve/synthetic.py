"""Templated synthetic word-problem corpora.

Generates small English problems whose gold equations are depth-1 or depth-2
arithmetic over the numbers in the text (plus an optional distractor number
that the equation never uses). Answers come from evaluating the gold
equation, so every instance is solvable from its own operand slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Problem
from .equation import evaluate_tree, parse_equation

NAMES = ("ravi", "meera", "tom", "sara", "anil", "lucy", "dev", "nina")


@dataclass(frozen=True)
class Template:
    qtype: str
    depth: int
    text: str      # placeholders {name} {a} {b} {c}
    equation: str  # placeholders {a} {b} {c}; X= prefix added by the builder


TEMPLATES: tuple[Template, ...] = (
    Template("sum", 1,
             "{name} has {a} marbles and finds {b} more . how many marbles does {name} have now ?",
             "({a}+{b})"),
    Template("difference", 1,
             "{name} baked {a} cookies and ate {b} of them . how many cookies are left ?",
             "({a}-{b})"),
    Template("product", 1,
             "each box holds {a} pens . how many pens are there in {b} boxes ?",
             "({a}*{b})"),
    Template("quotient", 1,
             "{name} shares {a} sweets equally among {b} friends . how many sweets does each friend get ?",
             "({a}/{b})"),
    Template("product-sum", 2,
             "{name} has {a} bags with {b} apples each and {c} loose apples . how many apples in all ?",
             "(({a}*{b})+{c})"),
    Template("product-difference", 2,
             "{name} bought {a} packs of {b} stickers and gave away {c} stickers . how many stickers remain ?",
             "(({a}*{b})-{c})"),
    Template("sum-product", 2,
             "a ticket costs {a} rupees and a snack costs {b} rupees . what do one ticket and {c} snacks cost ?",
             "({a}+({b}*{c}))"),
    Template("sum-difference", 2,
             "{name} read {a} pages in the morning and {b} pages at night but skipped {c} pages . how many pages count ?",
             "(({a}+{b})-{c})"),
)

_DISTRACTOR = "there are also {d} birds on the fence ."


def _pick_numbers(rng: np.random.Generator, template: Template,
                  lo: int, hi: int) -> dict[str, int]:
    a = int(rng.integers(lo, hi + 1))
    b = int(rng.integers(lo, hi + 1))
    c = int(rng.integers(lo, hi + 1))
    if template.qtype == "difference":
        a, b = max(a, b), min(a, b)
        if a == b:
            a = min(a + 1, hi)
    if template.qtype == "quotient":
        b = int(rng.integers(2, min(10, hi) + 1))
        q = int(rng.integers(1, max(2, hi // b) + 1))
        a = b * q
    if template.qtype == "product-difference":
        c = int(rng.integers(lo, min(hi, max(lo, a * b)) + 1))
    if template.qtype == "sum-difference":
        c = int(rng.integers(lo, min(hi, a + b) + 1))
    return {"a": a, "b": b, "c": c}


def make_problem(rng: np.random.Generator, problem_id: str, template: Template,
                 lo: int = 1, hi: int = 20,
                 distractor_prob: float = 0.0) -> Problem:
    values = _pick_numbers(rng, template, lo, hi)
    name = NAMES[int(rng.integers(len(NAMES)))]
    fmt = {k: f"{v}.0" for k, v in values.items()}
    text = template.text.format(name=name, **fmt)
    if rng.random() < distractor_prob:
        d = int(rng.integers(lo, hi + 1))
        head, _, tail = text.partition(" . ")
        text = f"{head} . " + _DISTRACTOR.format(d=f"{d}.0") + f" {tail}"
    equation = "X=" + template.equation.format(**fmt)
    answer = evaluate_tree(parse_equation(equation))
    return Problem(id=problem_id, text=text, answer=answer, equation=equation,
                   qtype=template.qtype,
                   difficulty="easy" if template.depth == 1 else "medium")


def make_corpus(n: int, seed: int, *, lo: int = 1, hi: int = 20,
                depth2_fraction: float = 0.6, distractor_prob: float = 0.0,
                id_prefix: str = "syn") -> list[Problem]:
    """n templated problems; depth2_fraction controls the share of two-step
    equations, distractor_prob the chance of an unused number in the text."""
    rng = np.random.default_rng(seed)
    depth1 = [t for t in TEMPLATES if t.depth == 1]
    depth2 = [t for t in TEMPLATES if t.depth == 2]
    problems = []
    for i in range(n):
        group = depth2 if rng.random() < depth2_fraction else depth1
        template = group[int(rng.integers(len(group)))]
        problems.append(make_problem(rng, f"{id_prefix}-{i:04d}", template,
                                     lo, hi, distractor_prob))
    return problems
