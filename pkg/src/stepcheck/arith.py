"""Exact-rational evaluation of calculator annotations and inverse-operation checks.

The grammar covers +, -, *, / with standard precedence, left association,
parentheses, unary minus, and decimal literals (including leading-dot forms
like ".2"). Everything evaluates in exact rational arithmetic; there is no
floating point anywhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

from .paths import CalcAnnotation, NotANumber, ReasoningPath, normalize_numeric
from .rational import render_rational

DEFAULT_MAX_DEPTH = 64

FAILURE_NONE = "none"
FAILURE_CLAIM_MISMATCH = "claim-mismatch"
FAILURE_DIVISION_BY_ZERO = "division-by-zero"
FAILURE_PARSE = "parse-failure"


class ExprParseError(Exception):
    """Raised when text does not parse under the expression grammar."""


class DivisionByZero(ArithmeticError):
    """Raised when evaluation divides by an exact zero."""


class NotInvertible(Exception):
    """Raised for expression shapes with no supported inverse rewrite."""


@dataclass(frozen=True)
class Lit:
    value: Fraction
    lexeme: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Node"
    right: "Node"


Node = Lit | Neg | Bin


@dataclass(frozen=True)
class Expr:
    """A parsed arithmetic expression with its source text."""

    root: Node
    source: str


@dataclass(frozen=True)
class InverseCheck:
    """One inverse-operation rewrite and whether it holds exactly."""

    rewritten_equation: str
    holds: bool


@dataclass(frozen=True)
class AnnotationVerdict:
    """Outcome of mechanically verifying one calculator annotation."""

    annotation: CalcAnnotation
    computed: Fraction | None
    matches_claim: bool
    inverse_checks: tuple[InverseCheck, ...]
    failure_kind: str


_NUMBER_RE = re.compile(r"(?:\d[\d,]*(?:\.\d*)?|\.\d+)")


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(text):
        char = text[pos]
        if char in " \t":
            pos += 1
            continue
        if char in "+-*/()":
            tokens.append((char, char))
            pos += 1
            continue
        match = _NUMBER_RE.match(text, pos)
        if match:
            tokens.append(("num", match.group(0)))
            pos = match.end()
            continue
        raise ExprParseError(f"unexpected character {char!r} in {text!r}")
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]], source: str, max_depth: int):
        self.tokens = tokens
        self.source = source
        self.max_depth = max_depth
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def take(self) -> tuple[str, str]:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def parse(self) -> Node:
        node = self.expr(0)
        if self.pos != len(self.tokens):
            raise ExprParseError(f"trailing input in {self.source!r}")
        return node

    def expr(self, depth: int) -> Node:
        node = self.term(self._deeper(depth))
        while self.peek() in ("+", "-"):
            op, _ = self.take()
            node = Bin(op, node, self.term(self._deeper(depth)))
        return node

    def term(self, depth: int) -> Node:
        node = self.factor(self._deeper(depth))
        while self.peek() in ("*", "/"):
            op, _ = self.take()
            node = Bin(op, node, self.factor(self._deeper(depth)))
        return node

    def factor(self, depth: int) -> Node:
        kind = self.peek()
        if kind is None:
            raise ExprParseError(f"unexpected end of input in {self.source!r}")
        if kind == "-":
            self.take()
            return Neg(self.factor(self._deeper(depth)))
        if kind == "(":
            self.take()
            node = self.expr(self._deeper(depth))
            if self.peek() != ")":
                raise ExprParseError(f"missing ')' in {self.source!r}")
            self.take()
            return node
        if kind == "num":
            _, lexeme = self.take()
            if lexeme.endswith("."):
                raise ExprParseError(f"dangling decimal point in {self.source!r}")
            return Lit(Fraction(lexeme.replace(",", "")), lexeme)
        raise ExprParseError(f"unexpected token {kind!r} in {self.source!r}")

    def _deeper(self, depth: int) -> int:
        if depth + 1 > self.max_depth:
            raise ExprParseError(
                f"expression nesting exceeds {self.max_depth} in {self.source!r}"
            )
        return depth + 1


def parse_expression(text: str, max_depth: int = DEFAULT_MAX_DEPTH) -> Expr:
    tokens = _tokenize(text)
    if not tokens:
        raise ExprParseError("empty expression")
    return Expr(_Parser(tokens, text, max_depth).parse(), text)


def _eval_node(node: Node) -> Fraction:
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Neg):
        return -_eval_node(node.operand)
    left = _eval_node(node.left)
    right = _eval_node(node.right)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if right == 0:
        raise DivisionByZero(f"division by zero in {node!r}")
    return left / right


def evaluate(expr: Expr) -> Fraction:
    """Exact rational value of a parsed expression."""
    return _eval_node(expr.root)


def _signed_literal(node: Node) -> tuple[Fraction, str] | None:
    """Value and lexeme when the node is a literal or a negated literal."""
    if isinstance(node, Lit):
        return node.value, node.lexeme
    if isinstance(node, Neg):
        inner = _signed_literal(node.operand)
        if inner is not None:
            return -inner[0], "-" + inner[1]
    return None


def _flatten_sum_chain(node: Node) -> list[tuple[str, Fraction, str]] | None:
    """Flatten a +/- chain of literals to [(sign, value, lexeme), ...]."""
    if isinstance(node, Bin) and node.op in "+-":
        left = _flatten_sum_chain(node.left)
        if left is None:
            return None
        right = _signed_literal(node.right)
        if right is None:
            return None
        return left + [(node.op, right[0], right[1])]
    leaf = _signed_literal(node)
    if leaf is None:
        return None
    return [("+", leaf[0], leaf[1])]


def _equation_holds(lhs_text: str, rhs_value: Fraction) -> bool:
    try:
        return evaluate(parse_expression(lhs_text)) == rhs_value
    except (ExprParseError, DivisionByZero):
        return False


def inverse_checks(annotation: CalcAnnotation) -> list[InverseCheck]:
    """Rewrite the annotation with the inverse operation and test it exactly.

    Sum/difference chains of literals rewrite by moving every operand but the
    first across the equals sign in reverse order ("8+8+9=25" becomes
    "25-9-8=8"); literal products and quotients swap multiplication and
    division ("8+9=17" style rewrites for the other operators). Raises
    NotInvertible for any other shape.
    """
    claimed_value = normalize_numeric(annotation.claimed_result)
    claimed_text = annotation.claimed_result.strip()
    if not re.fullmatch(r"-?(?:\d[\d,]*(?:\.\d+)?|\.\d+)", claimed_text):
        # decorated results ("$10") would not re-parse inside an equation
        claimed_text = render_rational(claimed_value)
    root = parse_expression(annotation.expression).root

    chain = _flatten_sum_chain(root)
    if chain is not None and len(chain) >= 2:
        _, first_value, first_lexeme = chain[0]
        parts = [claimed_text]
        for sign, _, lexeme in reversed(chain[1:]):
            parts.append(("-" if sign == "+" else "+") + lexeme)
        equation = "".join(parts) + "=" + first_lexeme
        holds = _equation_holds("".join(parts), first_value)
        return [InverseCheck(equation, holds)]

    if isinstance(root, Bin) and root.op in "*/":
        left = _signed_literal(root.left)
        right = _signed_literal(root.right)
        if left is not None and right is not None:
            if root.op == "*":
                if right[0] != 0:
                    lhs = f"{claimed_text}/{right[1]}"
                    target_value, target_lexeme = left
                elif left[0] != 0:
                    lhs = f"{claimed_text}/{left[1]}"
                    target_value, target_lexeme = right
                else:
                    return []
            else:
                lhs = f"{claimed_text}*{right[1]}"
                target_value, target_lexeme = left
            equation = f"{lhs}={target_lexeme}"
            return [InverseCheck(equation, _equation_holds(lhs, target_value))]

    raise NotInvertible(annotation.expression)


def verify_annotation(annotation: CalcAnnotation) -> AnnotationVerdict:
    """Evaluate the expression exactly and compare against the claimed result."""
    try:
        claimed = normalize_numeric(annotation.claimed_result)
    except NotANumber:
        return AnnotationVerdict(annotation, None, False, (), FAILURE_PARSE)
    try:
        computed = evaluate(parse_expression(annotation.expression))
    except ExprParseError:
        return AnnotationVerdict(annotation, None, False, (), FAILURE_PARSE)
    except DivisionByZero:
        return AnnotationVerdict(annotation, None, False, (), FAILURE_DIVISION_BY_ZERO)

    try:
        inverses = tuple(inverse_checks(annotation))
    except NotInvertible:
        inverses = ()
    matches = computed == claimed
    kind = FAILURE_NONE if matches else FAILURE_CLAIM_MISMATCH
    return AnnotationVerdict(annotation, computed, matches, inverses, kind)


def audit_path(path: ReasoningPath) -> list[tuple[int, list[AnnotationVerdict]]]:
    """Verdicts for every annotated step, in step order."""
    audit = []
    for step in path.steps:
        if step.annotations:
            audit.append(
                (step.index, [verify_annotation(a) for a in step.annotations])
            )
    return audit


def first_failing_step(
    audit: list[tuple[int, list[AnnotationVerdict]]],
) -> int | None:
    """Index of the first step with a failing verdict, if any."""
    for index, verdicts in audit:
        if any(not verdict.matches_claim for verdict in verdicts):
            return index
    return None
