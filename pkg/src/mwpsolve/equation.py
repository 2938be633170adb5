"""Expression trees, safe arithmetic, the growable operand dictionary, and
conversions between infix equation strings and bottom-up triplet sequences.

Equation strings use the external format `X=(5.0/10.0)`: optional `X=` prefix,
infix + - * / with standard precedence and left associativity, parentheses,
unsigned numeric literals.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

OPERATORS: tuple[str, ...] = ("+", "-", "*", "/")

DEFAULT_CAPACITY = 64  # initial slots + a full decode budget of intermediates


class InvalidStepError(ValueError):
    """An arithmetic step produced no usable value (division by zero,
    overflow to non-finite, or a non-finite operand)."""


class CapacityError(ValueError):
    """Operand dictionary ran out of slots."""


class NoResultError(ValueError):
    """An empty triplet sequence has no value."""


class EquationSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnresolvableLeafError(ValueError):
    """A gold-equation leaf matches no operand slot; the instance cannot be
    used for supervised loss."""


@dataclass(frozen=True)
class OperatorVocab:
    """Ordered operator symbols; index = model output id."""

    symbols: tuple[str, ...] = OPERATORS

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("operator vocabulary must be non-empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate operator symbols")

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)


def apply_op(op: str, left: float, right: float) -> float:
    """Exact IEEE arithmetic; raises InvalidStepError when the result would
    be non-finite (so NaN/inf never enters an operand dictionary)."""
    if not (math.isfinite(left) and math.isfinite(right)):
        raise InvalidStepError(f"non-finite operand: {left!r} {op} {right!r}")
    if op == "+":
        result = left + right
    elif op == "-":
        result = left - right
    elif op == "*":
        result = left * right
    elif op == "/":
        if right == 0.0:
            raise InvalidStepError(f"division by zero: {left!r} / {right!r}")
        result = left / right
    else:
        raise ValueError(f"unknown operator {op!r}")
    if not math.isfinite(result):
        raise InvalidStepError(f"non-finite result: {left!r} {op} {right!r}")
    return result


def values_close(pred: float, target: float, eps: float = 1e-4) -> bool:
    """Float-safe value equality: |pred - target| <= max(eps, eps*|target|)."""
    return abs(pred - target) <= max(eps, eps * abs(target))


@dataclass(frozen=True)
class TripletStep:
    """One decoding action: operator applied to two slots, and its value."""

    op: str
    left: int
    right: int
    result: float


@dataclass(frozen=True)
class Slot:
    value: float
    provenance: str  # "number" | "constant" | "intermediate"
    born_at_step: int


class OperandDict:
    """Ordered, append-only list of operand slots with a hard capacity.

    Slot indices are stable: anything valid at step t stays valid forever,
    which is what lets later triplets reference earlier intermediates.
    """

    __slots__ = ("slots", "capacity", "n_initial")

    def __init__(self, slots: list[Slot], capacity: int = DEFAULT_CAPACITY):
        if len(slots) > capacity:
            raise CapacityError(f"{len(slots)} initial slots exceed capacity {capacity}")
        self.slots = slots
        self.capacity = capacity
        self.n_initial = len(slots)

    @classmethod
    def initial(cls, numbers, constants, capacity: int = DEFAULT_CAPACITY) -> "OperandDict":
        """Problem numbers in textual order, then constants in config order."""
        slots = [Slot(float(v), "number", 0) for v in numbers]
        slots += [Slot(float(c), "constant", 0) for c in constants]
        return cls(slots, capacity)

    @property
    def size(self) -> int:
        return len(self.slots)

    def __len__(self):
        return len(self.slots)

    def value(self, index: int) -> float:
        return self.slots[index].value

    def values(self) -> list[float]:
        return [s.value for s in self.slots]

    def push(self, value: float, step: int) -> int:
        if not math.isfinite(value):
            raise InvalidStepError(f"refusing to store non-finite value {value!r}")
        if len(self.slots) >= self.capacity:
            raise CapacityError(f"operand dictionary full (capacity {self.capacity})")
        self.slots.append(Slot(float(value), "intermediate", step))
        return len(self.slots) - 1

    def clone(self) -> "OperandDict":
        c = OperandDict(list(self.slots), self.capacity)
        c.n_initial = self.n_initial
        return c


# -- expression trees ---------------------------------------------------------

@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class Node:
    op: str
    left: "ExprTree"
    right: "ExprTree"


ExprTree = Leaf | Node


def evaluate_tree(tree: ExprTree) -> float:
    if isinstance(tree, Leaf):
        return tree.value
    return apply_op(tree.op, evaluate_tree(tree.left), evaluate_tree(tree.right))


_EQ_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d+)?)|([()+\-*/])|(X=|x=))")


def _tokenize_equation(s: str):
    tokens = []
    pos = 0
    while pos < len(s):
        m = _EQ_TOKEN.match(s, pos)
        if m is None:
            stripped = s[pos:].lstrip()
            at = len(s) - len(stripped)
            raise EquationSyntaxError(f"unknown symbol {stripped[0]!r}", at)
        if m.group(1) is not None:
            tokens.append(("num", float(m.group(1)), m.start(1)))
        elif m.group(2) is not None:
            tokens.append(("op", m.group(2), m.start(2)))
        else:
            tokens.append(("prefix", m.group(3), m.start(3)))
        pos = m.end()
    return tokens


def parse_equation(s: str) -> ExprTree:
    """Parse an `X=` infix equation into an expression tree.

    Grammar: expr := term (("+"|"-") term)*; term := factor (("*"|"/") factor)*;
    factor := NUMBER | "(" expr ")". No unary minus.
    """
    tokens = _tokenize_equation(s)
    if tokens and tokens[0][0] == "prefix":
        tokens = tokens[1:]
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else (None, None, len(s))

    def expect_factor():
        nonlocal i
        kind, val, pos = peek()
        if kind == "num":
            i += 1
            return Leaf(val)
        if kind == "op" and val == "(":
            i += 1
            node = expr()
            kind, val, pos = peek()
            if not (kind == "op" and val == ")"):
                raise EquationSyntaxError("expected ')'", pos)
            i += 1
            return node
        raise EquationSyntaxError("expected a number or '('", pos)

    def term():
        nonlocal i
        node = expect_factor()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("*", "/"):
                i += 1
                node = Node(val, node, expect_factor())
            else:
                return node

    def expr():
        nonlocal i
        node = term()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("+", "-"):
                i += 1
                node = Node(val, node, term())
            else:
                return node

    tree = expr()
    kind, val, pos = peek()
    if kind is not None:
        raise EquationSyntaxError(f"unexpected trailing {val!r}", pos)
    return tree


# -- triplet sequences --------------------------------------------------------

def linearize(tree: ExprTree, opdict: OperandDict, eps: float = 1e-4) -> list[TripletStep]:
    """Post-order flattening of a tree into triplet steps over `opdict`.

    Numeric leaves resolve to the first slot whose value matches within eps;
    each internal node's result is pushed so later steps can reference it.
    Works on a clone, so the caller's dictionary is untouched. A single-leaf
    tree yields the empty (degenerate) sequence.
    """
    d = opdict.clone()
    steps: list[TripletStep] = []

    def resolve(value: float) -> int:
        for idx, slot in enumerate(d.slots):
            if values_close(slot.value, value, eps):
                return idx
        raise UnresolvableLeafError(f"leaf value {value!r} matches no operand slot")

    def emit(node: ExprTree) -> int:
        if isinstance(node, Leaf):
            return resolve(node.value)
        li = emit(node.left)
        ri = emit(node.right)
        result = apply_op(node.op, d.value(li), d.value(ri))
        steps.append(TripletStep(node.op, li, ri, result))
        return d.push(result, len(steps))

    emit(tree)
    return steps


def evaluate_triplets(steps, opdict: OperandDict) -> float:
    """Value of the last step over a clone of `opdict` (caller's dict unchanged)."""
    if not steps:
        raise NoResultError("empty triplet sequence")
    d = opdict.clone()
    result = math.nan
    for t, step in enumerate(steps, start=1):
        if not (0 <= step.left < d.size and 0 <= step.right < d.size):
            raise InvalidStepError(
                f"step {t} references slot out of range (size {d.size})")
        result = apply_op(step.op, d.value(step.left), d.value(step.right))
        d.push(result, t)
    return result


def _literal(value: float) -> str:
    return repr(value)


def render_equation(steps, opdict: OperandDict) -> str:
    """Fully parenthesized `X=` infix string; parses back to the same value."""
    if not steps:
        return "X=<none>"
    exprs = [_literal(s.value) for s in opdict.slots]
    last = ""
    for step in steps:
        last = f"({exprs[step.left]}{step.op}{exprs[step.right]})"
        exprs.append(last)
    return "X=" + last
