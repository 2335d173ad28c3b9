"""Program text -> statements and expression trees, plus evaluation addresses.

Programs are sequences of top-level directives, one per bracketed form:

    [assume name expr]     bind a global
    [observe expr literal] condition on an observed value
    [predict expr]         emit a value as inference output

Inside expressions, ``(...)`` is an application or special form (``lambda``,
``if``, ``quote``) and ``[...]`` is a vector literal; nested vector literals
denote matrices.  ``;`` starts a comment running to end of line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import LispSyntaxError

__all__ = [
    "Constant",
    "SymbolRef",
    "Application",
    "Lambda",
    "If",
    "Quote",
    "VectorLiteral",
    "Assume",
    "Observe",
    "Predict",
    "Program",
    "Address",
    "parse_program",
    "parse_expression",
    "to_source",
]


# ---------------------------------------------------------------------------
# expression and statement types


@dataclass(frozen=True, slots=True)
class Constant:
    value: object  # bool | int | float | str


@dataclass(frozen=True, slots=True)
class SymbolRef:
    name: str


@dataclass(frozen=True, slots=True)
class Application:
    operator: "Expr"
    args: tuple


@dataclass(frozen=True, slots=True)
class Lambda:
    params: tuple
    body: "Expr"


@dataclass(frozen=True, slots=True)
class If:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr"


@dataclass(frozen=True, slots=True)
class Quote:
    expr: "Expr"


@dataclass(frozen=True, slots=True)
class VectorLiteral:
    elements: tuple


Expr = Constant | SymbolRef | Application | Lambda | If | Quote | VectorLiteral


@dataclass(frozen=True, slots=True)
class Assume:
    name: str
    expr: Expr
    ordinal: int


@dataclass(frozen=True, slots=True)
class Observe:
    dist: Expr
    value_expr: Expr  # literal: Constant or VectorLiteral of literals
    ordinal: int


@dataclass(frozen=True, slots=True)
class Predict:
    expr: Expr
    label: str
    ordinal: int


TopLevel = Assume | Observe | Predict


@dataclass(frozen=True)
class Program:
    statements: tuple

    @property
    def num_observes(self) -> int:
        return sum(1 for s in self.statements if isinstance(s, Observe))

    def generation_groups(self):
        """Split statements into generations plus a trailing segment.

        Returns (groups, trailing) where each group is a list of statements
        ending with exactly one Observe, and trailing holds the statements
        after the last Observe (possibly empty).
        """
        groups, current = [], []
        for stmt in self.statements:
            current.append(stmt)
            if isinstance(stmt, Observe):
                groups.append(current)
                current = []
        return groups, current


# ---------------------------------------------------------------------------
# addresses
#
# Every evaluation site gets an address: the statement ordinal at the root,
# extended with one (tag, position) pair per evaluation step.  Addresses are
# interned through parent-pointer nodes, so extension is O(1), equality is
# identity, and the same site on the same control path always yields the same
# object — across particles and across sweeps.

_TAGS = frozenset("ilqabsop")


class Address:
    __slots__ = ("parent", "tag", "pos", "_children", "_key")

    _roots: dict = {}

    def __init__(self, parent, tag, pos):
        self.parent = parent
        self.tag = tag
        self.pos = pos
        self._children = None
        if parent is None:
            self._key = ((tag, pos),)
        else:
            self._key = parent._key + ((tag, pos),)

    @classmethod
    def root(cls, ordinal: int) -> "Address":
        addr = cls._roots.get(ordinal)
        if addr is None:
            addr = cls._roots[ordinal] = cls(None, "t", ordinal)
        return addr

    def extend(self, tag: str, pos: int) -> "Address":
        if tag not in _TAGS:
            raise ValueError(f"unknown address tag {tag!r}")
        children = self._children
        if children is None:
            children = self._children = {}
        child = children.get((tag, pos))
        if child is None:
            child = children[(tag, pos)] = Address(self, tag, pos)
        return child

    @property
    def key(self):
        return self._key

    def __lt__(self, other):
        return self._key < other._key

    def __le__(self, other):
        return self._key <= other._key

    def __repr__(self):
        ordinal = self._key[0][1]
        rest = "".join(f"/{t}{p}" for t, p in self._key[1:])
        return f"@{ordinal}{rest}"


def extend_address(parent: Address, tag: str, pos: int) -> Address:
    return parent.extend(tag, pos)


# ---------------------------------------------------------------------------
# lexer


@dataclass(frozen=True, slots=True)
class _Token:
    text: str
    line: int
    col: int
    kind: str  # "open", "close", "atom", "string"


_DELIMS = {"(": "open", "[": "open", ")": "close", "]": "close"}


def _tokenize(text: str):
    tokens = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
        elif c.isspace():
            col += 1
            i += 1
        elif c == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif c in _DELIMS:
            tokens.append(_Token(c, line, col, _DELIMS[c]))
            col += 1
            i += 1
        elif c == '"':
            start_line, start_col = line, col
            i += 1
            col += 1
            chars = []
            while True:
                if i >= n:
                    raise LispSyntaxError("unterminated string", start_line, start_col)
                c = text[i]
                if c == '"':
                    i += 1
                    col += 1
                    break
                if c == "\\":
                    if i + 1 >= n:
                        raise LispSyntaxError("unterminated string", start_line, start_col)
                    esc = text[i + 1]
                    chars.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
                    i += 2
                    col += 2
                else:
                    if c == "\n":
                        line += 1
                        col = 0
                    chars.append(c)
                    i += 1
                    col += 1
            tokens.append(_Token("".join(chars), start_line, start_col, "string"))
        else:
            start = i
            start_col = col
            while i < n and not text[i].isspace() and text[i] not in "()[];\"":
                i += 1
                col += 1
            atom = text[start:i]
            if atom.startswith("~"):
                # reserved for internal synthetic bindings (memo cache)
                raise LispSyntaxError(f"symbols may not start with '~': {atom!r}", line, start_col)
            tokens.append(_Token(atom, line, start_col, "atom"))
    return tokens


def _atom_to_expr(tok: _Token) -> Expr:
    if tok.kind == "string":
        return Constant(tok.text)
    text = tok.text
    if text == "true":
        return Constant(True)
    if text == "false":
        return Constant(False)
    try:
        return Constant(int(text))
    except ValueError:
        pass
    try:
        return Constant(float(text))
    except ValueError:
        pass
    return SymbolRef(text)


# ---------------------------------------------------------------------------
# parser


_MATCHING = {"(": ")", "[": "]"}


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise LispSyntaxError("unexpected end of input")
        self.pos += 1
        return tok

    def expect_close(self, opener: _Token):
        tok = self.peek()
        want = _MATCHING[opener.text]
        if tok is None:
            raise LispSyntaxError(f"unbalanced {opener.text!r}", opener.line, opener.col)
        if tok.kind != "close" or tok.text != want:
            raise LispSyntaxError(
                f"expected {want!r}, got {tok.text!r}", tok.line, tok.col
            )
        self.next()

    def parse_expr(self) -> Expr:
        tok = self.next()
        if tok.kind in ("atom", "string"):
            return _atom_to_expr(tok)
        if tok.kind == "close":
            raise LispSyntaxError(f"unexpected {tok.text!r}", tok.line, tok.col)
        if tok.text == "[":
            elements = []
            while True:
                nxt = self.peek()
                if nxt is None:
                    raise LispSyntaxError("unbalanced '['", tok.line, tok.col)
                if nxt.kind == "close":
                    break
                elements.append(self.parse_expr())
            self.expect_close(tok)
            return VectorLiteral(tuple(elements))
        return self._parse_paren_form(tok)

    def _parse_paren_form(self, opener: _Token) -> Expr:
        head_tok = self.peek()
        if head_tok is not None and head_tok.kind == "atom" and head_tok.text == "lambda":
            self.next()
            return self._parse_lambda_tail(opener)
        items = []
        while True:
            nxt = self.peek()
            if nxt is None:
                raise LispSyntaxError("unbalanced '('", opener.line, opener.col)
            if nxt.kind == "close":
                break
            items.append(self.parse_expr())
        self.expect_close(opener)
        if not items:
            raise LispSyntaxError("empty application", opener.line, opener.col)
        head = items[0]
        if isinstance(head, SymbolRef):
            name = head.name
            if name == "if":
                if len(items) != 4:
                    raise LispSyntaxError("if takes 3 arguments", opener.line, opener.col)
                return If(items[1], items[2], items[3])
            if name == "quote":
                if len(items) != 2:
                    raise LispSyntaxError("quote takes 1 argument", opener.line, opener.col)
                return Quote(items[1])
            if name == "sample" and len(items) != 2:
                raise LispSyntaxError("sample takes 1 argument", opener.line, opener.col)
            if name == "observe":
                if len(items) != 3:
                    raise LispSyntaxError("observe takes 2 arguments", opener.line, opener.col)
                if not _is_literal(items[2]):
                    raise LispSyntaxError(
                        "observe value must be a literal", opener.line, opener.col
                    )
            if name == "mem" and len(items) != 2:
                raise LispSyntaxError("mem takes 1 argument", opener.line, opener.col)
        return Application(head, tuple(items[1:]))

    def _parse_lambda_tail(self, opener):
        plist = self.next()
        if plist.kind != "open" or plist.text != "(":
            raise LispSyntaxError("lambda needs a (param ...) list", plist.line, plist.col)
        names = []
        while True:
            nxt = self.peek()
            if nxt is None:
                raise LispSyntaxError("unbalanced '('", plist.line, plist.col)
            if nxt.kind == "close":
                break
            tok = self.next()
            if tok.kind != "atom":
                raise LispSyntaxError("lambda parameters must be symbols", tok.line, tok.col)
            names.append(tok.text)
        self.expect_close(plist)
        if len(set(names)) != len(names):
            raise LispSyntaxError("duplicate lambda parameter", opener.line, opener.col)
        body = self.parse_expr()
        self.expect_close(opener)
        return Lambda(tuple(names), body)


def _is_literal(expr: Expr) -> bool:
    if isinstance(expr, Constant):
        return True
    if isinstance(expr, VectorLiteral):
        return all(_is_literal(e) for e in expr.elements)
    return False


_DIRECTIVES = {"assume", "observe", "predict"}


def parse_program(text: str) -> Program:
    """Parse program text into a Program; raises LispSyntaxError on bad input."""
    parser = _Parser(_tokenize(text))
    statements = []
    while parser.peek() is not None:
        opener = parser.next()
        if opener.kind != "open":
            raise LispSyntaxError(
                f"expected a top-level form, got {opener.text!r}", opener.line, opener.col
            )
        head = parser.peek()
        if head is None or head.kind != "atom" or head.text not in _DIRECTIVES:
            got = head.text if head is not None else "end of input"
            raise LispSyntaxError(
                f"top-level form must be assume/observe/predict, got {got!r}",
                opener.line,
                opener.col,
            )
        directive = parser.next().text
        items = []
        while True:
            nxt = parser.peek()
            if nxt is None:
                raise LispSyntaxError(f"unbalanced {opener.text!r}", opener.line, opener.col)
            if nxt.kind == "close":
                break
            items.append(parser.parse_expr())
        parser.expect_close(opener)
        ordinal = len(statements)
        if directive == "assume":
            if len(items) != 2 or not isinstance(items[0], SymbolRef):
                raise LispSyntaxError("assume takes a symbol and an expression", opener.line, opener.col)
            statements.append(Assume(items[0].name, items[1], ordinal))
        elif directive == "observe":
            if len(items) != 2:
                raise LispSyntaxError("observe takes an expression and a literal value", opener.line, opener.col)
            if not _is_literal(items[1]):
                raise LispSyntaxError("observe value must be a literal", opener.line, opener.col)
            statements.append(Observe(items[0], items[1], ordinal))
        else:
            if len(items) != 1:
                raise LispSyntaxError("predict takes one expression", opener.line, opener.col)
            statements.append(Predict(items[0], to_source(items[0]), ordinal))
    return Program(tuple(statements))


def parse_expression(text: str) -> Expr:
    """Parse a single expression (test/tooling convenience)."""
    parser = _Parser(_tokenize(text))
    expr = parser.parse_expr()
    if parser.peek() is not None:
        tok = parser.peek()
        raise LispSyntaxError("trailing input after expression", tok.line, tok.col)
    return expr


# ---------------------------------------------------------------------------
# pretty printer


def _const_source(value) -> str:
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    return repr(value)


def to_source(node) -> str:
    """Render an Expr, TopLevel, or Program back to parseable text."""
    if isinstance(node, Program):
        return "\n".join(to_source(s) for s in node.statements)
    if isinstance(node, Assume):
        return f"[assume {node.name} {to_source(node.expr)}]"
    if isinstance(node, Observe):
        return f"[observe {to_source(node.dist)} {to_source(node.value_expr)}]"
    if isinstance(node, Predict):
        return f"[predict {to_source(node.expr)}]"
    if isinstance(node, Constant):
        return _const_source(node.value)
    if isinstance(node, SymbolRef):
        return node.name
    if isinstance(node, Application):
        parts = [to_source(node.operator)] + [to_source(a) for a in node.args]
        return "(" + " ".join(parts) + ")"
    if isinstance(node, Lambda):
        return f"(lambda ({' '.join(node.params)}) {to_source(node.body)})"
    if isinstance(node, If):
        return f"(if {to_source(node.cond)} {to_source(node.then)} {to_source(node.orelse)})"
    if isinstance(node, Quote):
        return f"(quote {to_source(node.expr)})"
    if isinstance(node, VectorLiteral):
        return "[" + " ".join(to_source(e) for e in node.elements) + "]"
    raise TypeError(f"cannot print {type(node).__name__}")
