import pytest

from plisp.errors import LispSyntaxError
from plisp.syntax import (
    Address,
    Application,
    Assume,
    Constant,
    Lambda,
    Observe,
    Predict,
    SymbolRef,
    VectorLiteral,
    extend_address,
    parse_expression,
    parse_program,
    to_source,
)

import helpers


def test_assume_constant():
    program = parse_program("[assume x 1]")
    assert program.statements == (Assume("x", Constant(1), 0),)


def test_geom_program_has_one_generation():
    program = parse_program(helpers.GEOM_PROGRAM)
    assert program.num_observes == 1
    assume, observe = program.statements
    assert isinstance(assume, Assume)
    assert isinstance(assume.expr, Lambda)
    assert isinstance(observe, Observe)
    groups, trailing = program.generation_groups()
    assert len(groups) == 1 and len(groups[0]) == 2 and trailing == []


def test_top_level_observe_arity_error():
    with pytest.raises(LispSyntaxError):
        parse_program("(observe x)")


def test_top_level_paren_directives_accepted():
    program = parse_program("(assume x 1) (predict x)")
    assert isinstance(program.statements[0], Assume)
    assert isinstance(program.statements[1], Predict)


@pytest.mark.parametrize(
    "text",
    [
        "[assume x (+ 1 2]",
        "[assume x]",
        "[observe (normal-dist 0. 1.) (+ 1 1)]",  # non-literal observe value
        "[frobnicate x 1]",
        "(+ 1 2)",
        "[assume x (lambda (a a) a)]",
        "[predict (sample)]",
    ],
)
def test_syntax_errors(text):
    with pytest.raises(LispSyntaxError):
        parse_program(text)


def test_syntax_error_carries_position():
    try:
        parse_program("[assume x\n (+ 1 2]")
    except LispSyntaxError as exc:
        assert exc.line is not None
    else:
        pytest.fail("expected a syntax error")


def test_vector_literal_inside_expression():
    expr = parse_expression("[1. 0.]")
    assert expr == VectorLiteral((Constant(1.0), Constant(0.0)))
    matrix = parse_expression("[[1 0] [0 1]]")
    assert isinstance(matrix.elements[0], VectorLiteral)


def test_observe_vector_literal_value():
    program = parse_program("[observe (mvn-dist [0. 0.] (eye 2)) [1. 2.]]")
    assert isinstance(program.statements[0].value_expr, VectorLiteral)


def test_comments_ignored():
    program = parse_program("; heading\n[assume x 1] ; tail\n")
    assert len(program.statements) == 1


def test_extend_address_paths():
    root = Address.root(3)
    a0 = extend_address(root, "a", 0)
    assert a0.key == (("t", 3), ("a", 0))
    b0 = a0.extend("b", 0)
    assert len(b0.key) == 3
    # sibling args differ only in the final position
    p1 = root.extend("p", 1)
    p2 = root.extend("p", 2)
    assert p1.key[:-1] == p2.key[:-1]
    assert p1.key[-1] != p2.key[-1]


def test_addresses_interned_and_ordered():
    root = Address.root(0)
    assert root.extend("a", 0) is root.extend("a", 0)
    assert Address.root(1) is Address.root(1)
    a = root.extend("a", 0)
    b = root.extend("a", 1)
    assert a < b
    assert root < a  # prefix sorts first
    assert Address.root(0) < Address.root(1)


def test_bad_tag_rejected():
    with pytest.raises(ValueError):
        Address.root(0).extend("z", 0)


def test_reserved_tilde_symbols_rejected():
    with pytest.raises(LispSyntaxError):
        parse_program("[assume ~x 1]")


@pytest.mark.parametrize("name", sorted(helpers.REGEN_CORPUS))
def test_round_trip_corpus(name):
    program = parse_program(helpers.REGEN_CORPUS[name])
    assert parse_program(to_source(program)) == program


def test_round_trip_random_programs():
    import random

    rng = random.Random(7)
    atoms = ["1", "2.5", "-3.", "true", "false", "x", '"s"']

    def gen_expr(depth):
        if depth == 0 or rng.random() < 0.3:
            return rng.choice(atoms)
        kind = rng.randrange(5)
        if kind == 0:
            return f"(+ {gen_expr(depth - 1)} {gen_expr(depth - 1)})"
        if kind == 1:
            return f"(if (flip-check {gen_expr(depth - 1)}) {gen_expr(depth - 1)} {gen_expr(depth - 1)})"
        if kind == 2:
            return f"(lambda (a b) {gen_expr(depth - 1)})"
        if kind == 3:
            return f"[{gen_expr(depth - 1)} {gen_expr(depth - 1)}]"
        return f"(quote {gen_expr(depth - 1)})"

    for i in range(50):
        text = f"[assume x {gen_expr(3)}]\n[predict {gen_expr(2)}]"
        program = parse_program(text)
        assert parse_program(to_source(program)) == program


def test_quote_and_strings_print():
    expr = parse_expression('(quote (list "a\\"b" 1))')
    assert parse_expression(to_source(expr)) == expr
