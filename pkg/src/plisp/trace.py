"""Traced evaluation: expressions evaluate to traces, not bare values.

A trace bundles the value with everything later regeneration needs:

    v      the value
    eps    a partial expression whose sub-expressions are traces
    l      accumulated log-weight of observes inside the expression
    rho    referenced global bindings, name -> trace
    omega  evaluated observes, address -> (process trace, value, log-weight)
    sigma  evaluated samples, address -> (process trace, value)
    phi    if-condition traces, address -> trace

Constants produce "transparent" traces (no annotations); annotations from
sub-evaluations merge upward, so a top-level statement's trace sees every
sample, observe, and branch decision it executed.  Local-variable lookups
inline the bound trace with l reset to zero: the binding site already
contributed its log-weight, and map union by address keeps entries unique.

Memoized procedures (`mem`) behave like lazily defined globals: the first
call evaluates the body, merges its annotations into the enclosing statement
trace, and binds the body trace in the global environment under a synthetic
name keyed by the call site and argument values; later calls reference that
binding through rho exactly like a global lookup.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ArityError,
    InternalInvariantViolation,
    LispError,
    NotAProcedureError,
    ObserveNonStochasticError,
    TypeMismatchError,
)
from .syntax import (
    Address,
    Application,
    Assume,
    Constant,
    If,
    Lambda,
    Observe,
    Predict,
    Quote,
    SymbolRef,
    VectorLiteral,
)
from .values import (
    BUILTIN_CONSTANTS,
    Closure,
    Environment,
    MemProcedure,
    Primitive,
    PRIMITIVES,
    StochasticProcess,
    apply_primitive,
    value_key,
)

_EMPTY = {}


class Trace:
    __slots__ = ("v", "eps", "l", "rho", "omega", "sigma", "phi", "transparent")

    def __init__(self, v, eps, l, rho, omega, sigma, phi):
        self.v = v
        self.eps = eps
        self.l = l
        self.rho = rho
        self.omega = omega
        self.sigma = sigma
        self.phi = phi
        self.transparent = not (rho or omega or sigma or phi) and l == 0.0

    def __repr__(self):
        return f"<trace {self.v!r} l={self.l:.4g}>"


def transparent_trace(v) -> Trace:
    return Trace(v, LitEps(v), 0.0, _EMPTY, _EMPTY, _EMPTY, _EMPTY)


# ---------------------------------------------------------------------------
# partial-expression nodes (the eps component)


class LitEps:
    """A value that re-evaluates to itself: constants, sample/observe results."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


class SymEps:
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name


class CallEps:
    """An application; body is the callee's body trace (None for primitives)."""

    __slots__ = ("op", "args", "body")

    def __init__(self, op, args, body):
        self.op = op
        self.args = args
        self.body = body


class MemCallEps:
    """A memoized call; body is the first-call body trace (None on cache hits)."""

    __slots__ = ("op", "args", "name", "body")

    def __init__(self, op, args, name, body):
        self.op = op
        self.args = args
        self.name = name
        self.body = body


class VecEps:
    __slots__ = ("elements",)

    def __init__(self, elements):
        self.elements = elements


class LambdaEps:
    """A lambda literal together with the local traces it captured."""

    __slots__ = ("expr", "captured")

    def __init__(self, expr, captured):
        self.expr = expr
        self.captured = captured


def eps_children(eps):
    if isinstance(eps, (CallEps, MemCallEps)):
        children = [eps.op, *eps.args]
        if eps.body is not None:
            children.append(eps.body)
        return children
    if isinstance(eps, VecEps):
        return list(eps.elements)
    if isinstance(eps, LambdaEps):
        return list(eps.captured.values())
    return []


# ---------------------------------------------------------------------------
# execution state


class ForcedSampleMissing(LispError):
    """Raised in forced mode when execution reaches an unscripted sample."""

    def __init__(self, address):
        self.address = address
        super().__init__(f"no forced value for sample at {address!r}")


class Recorder:
    """Optional instrumentation: addresses and predicate values seen."""

    __slots__ = ("samples", "observes", "predicates")

    def __init__(self):
        self.samples = []
        self.observes = []
        self.predicates = {}


class ExecState:
    """Mutable per-particle execution state threaded through evaluation.

    env holds the global bindings (swapped on bind, never mutated);
    processes maps a stochastic process's creation address to its current
    exchangeable state.  forced, when set, scripts every sample draw by
    address and accumulates the scripted draws' prior log-density.
    """

    __slots__ = ("env", "processes", "rng", "forced", "forced_used", "forced_log", "recorder")

    def __init__(self, env, rng, processes=None, forced=None, recorder=None):
        self.env = env
        self.processes = processes if processes is not None else {}
        self.rng = rng
        self.forced = forced
        self.forced_used = set() if forced is not None else None
        self.forced_log = 0.0
        self.recorder = recorder

    def current_process(self, sp):
        if sp.exchangeable and sp.pid is not None:
            cur = self.processes.get(sp.pid)
            if cur is not None:
                return cur
        return sp

    def absorb(self, sp, value):
        if sp.exchangeable and sp.pid is not None:
            self.processes[sp.pid] = self.current_process(sp).absorb(value)


# ---------------------------------------------------------------------------
# annotation merging


def _union_map(base, extra, kind):
    if not extra:
        return base
    if not base:
        return extra
    out = dict(base)
    for key, entry in extra.items():
        prev = out.get(key)
        if prev is not None and prev is not entry:
            raise InternalInvariantViolation(f"{kind} collision at {key!r}")
        out[key] = entry
    return out


def merge_annotations(children):
    """Combine child traces: l sums, maps union (entries must agree)."""
    l = 0.0
    rho, omega, sigma, phi = _EMPTY, _EMPTY, _EMPTY, _EMPTY
    for tr in children:
        l += tr.l
        rho = _union_map(rho, tr.rho, "rho")
        omega = _union_map(omega, tr.omega, "omega")
        sigma = _union_map(sigma, tr.sigma, "sigma")
        phi = _union_map(phi, tr.phi, "phi")
    return l, rho, omega, sigma, phi


def _extended(mapping, key, entry):
    out = dict(mapping) if mapping else {}
    if key in out:
        raise InternalInvariantViolation(f"duplicate evaluation address {key!r}")
    out[key] = entry
    return out


# ---------------------------------------------------------------------------
# literals


def literal_to_value(expr):
    if isinstance(expr, Constant):
        return expr.value
    if isinstance(expr, VectorLiteral):
        return _assemble_vector([literal_to_value(e) for e in expr.elements])
    raise TypeMismatchError("expected a literal expression")


def _assemble_vector(values):
    if not values:
        raise TypeMismatchError("empty vector literal")
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        return np.array(values, dtype=float)
    if all(isinstance(v, np.ndarray) and v.ndim == 1 for v in values):
        width = values[0].shape[0]
        if any(v.shape[0] != width for v in values):
            raise TypeMismatchError("matrix rows must have equal length")
        return np.stack(values)
    raise TypeMismatchError("vector elements must be all scalars or all vectors")


# ---------------------------------------------------------------------------
# evaluation


def memo_name(pid, key) -> str:
    return f"~memo:{pid}:{key!r}"


def eval_traced(expr, addr: Address, local: dict, st: ExecState) -> Trace:
    """Evaluate expr at addr against st.env and local bindings, yielding a Trace."""
    if isinstance(expr, Constant):
        return transparent_trace(expr.value)

    if isinstance(expr, SymbolRef):
        name = expr.name
        bound = local.get(name)
        if bound is not None:
            # Inline: annotations carry over, l resets (counted at the binding site).
            return Trace(bound.v, bound.eps, 0.0, bound.rho, bound.omega, bound.sigma, bound.phi)
        if st.env.has_user(name):
            tr = st.env.get_user(name)
            return Trace(tr.v, SymEps(name), 0.0, {name: tr}, _EMPTY, _EMPTY, _EMPTY)
        return st.env.lookup(name)  # shared transparent builtin trace, or raises

    if isinstance(expr, Lambda):
        captured = dict(local)
        closure = Closure(expr.params, expr.body, captured)
        if not captured:
            return transparent_trace(closure)
        l, rho, omega, sigma, phi = merge_annotations(captured.values())
        return Trace(closure, LambdaEps(expr, captured), 0.0, rho, omega, sigma, phi)

    if isinstance(expr, Quote):
        return eval_traced(expr.expr, addr.extend("q", 0), local, st)

    if isinstance(expr, If):
        cond = eval_traced(expr.cond, addr.extend("i", 0), local, st)
        if not isinstance(cond.v, bool):
            raise TypeMismatchError("if condition must be a boolean")
        if st.recorder is not None:
            st.recorder.predicates[addr] = cond.v
        if cond.v:
            branch = eval_traced(expr.then, addr.extend("i", 1), local, st)
        else:
            branch = eval_traced(expr.orelse, addr.extend("i", 2), local, st)
        l, rho, omega, sigma, phi = merge_annotations((cond, branch))
        phi = _extended(phi, addr, cond)
        return Trace(branch.v, branch.eps, l, rho, omega, sigma, phi)

    if isinstance(expr, VectorLiteral):
        elements = [
            eval_traced(e, addr.extend("p", i), local, st)
            for i, e in enumerate(expr.elements)
        ]
        l, rho, omega, sigma, phi = merge_annotations(elements)
        value = _assemble_vector([t.v for t in elements])
        return Trace(value, VecEps(tuple(elements)), l, rho, omega, sigma, phi)

    if isinstance(expr, Application):
        op = expr.operator
        if isinstance(op, SymbolRef):
            if op.name == "sample":
                return _eval_sample(expr.args[0], addr, local, st)
            if op.name == "observe":
                value = literal_to_value(expr.args[1])
                return eval_observe(expr.args[0], value, addr, local, st)
        return _eval_application(expr, addr, local, st)

    raise InternalInvariantViolation(f"unknown expression node {type(expr).__name__}")


def _eval_sample(arg_expr, addr, local, st):
    arg = eval_traced(arg_expr, addr.extend("s", 0), local, st)
    sp = arg.v
    if not isinstance(sp, StochasticProcess):
        raise TypeMismatchError("sample expects a stochastic process")
    proc = st.current_process(sp)
    if st.forced is not None:
        value = st.forced.get(addr)
        if value is None:
            raise ForcedSampleMissing(addr)
        st.forced_used.add(addr)
        st.forced_log += proc.log_density(value)
        st.absorb(sp, value)
    else:
        value, successor = proc.sample(st.rng)
        if sp.exchangeable and sp.pid is not None:
            st.processes[sp.pid] = successor
    if st.recorder is not None:
        st.recorder.samples.append(addr)
    sigma = _extended(arg.sigma, addr, (arg, value))
    return Trace(value, LitEps(value), arg.l, arg.rho, arg.omega, sigma, arg.phi)


def eval_observe(dist_expr, value, addr, local, st):
    """The observe rule: score value under the evaluated process, return value."""
    arg = eval_traced(dist_expr, addr.extend("o", 0), local, st)
    sp = arg.v
    if not isinstance(sp, StochasticProcess):
        raise ObserveNonStochasticError("observe expects a stochastic process")
    proc = st.current_process(sp)
    l12 = proc.log_density(value)
    st.absorb(sp, value)
    if st.recorder is not None:
        st.recorder.observes.append(addr)
    omega = _extended(arg.omega, addr, (arg, value, l12))
    return Trace(value, LitEps(value), arg.l + l12, arg.rho, omega, arg.sigma, arg.phi)


def _eval_application(expr, addr, local, st):
    op = eval_traced(expr.operator, addr.extend("a", 0), local, st)
    opv = op.v

    if isinstance(opv, Primitive):
        if opv.name == "mem":
            if len(expr.args) != 1:
                raise ArityError("mem takes 1 argument")
            arg = eval_traced(expr.args[0], addr.extend("a", 1), local, st)
            if not isinstance(arg.v, Closure):
                raise TypeMismatchError("mem expects a compound procedure")
            proc = MemProcedure(arg.v, pid=repr(addr))
            l, rho, omega, sigma, phi = merge_annotations((op, arg))
            return Trace(proc, CallEps(op, (arg,), None), l, rho, omega, sigma, phi)
        args = [
            eval_traced(a, addr.extend("p", i), local, st)
            for i, a in enumerate(expr.args, start=1)
        ]
        value = apply_primitive(opv, [t.v for t in args], pid=repr(addr))
        l, rho, omega, sigma, phi = merge_annotations([op, *args])
        return Trace(value, CallEps(op, tuple(args), None), l, rho, omega, sigma, phi)

    if isinstance(opv, Closure):
        args = [
            eval_traced(a, addr.extend("a", i), local, st)
            for i, a in enumerate(expr.args, start=1)
        ]
        body = apply_closure(opv, args, addr, st)
        l, rho, omega, sigma, phi = merge_annotations([op, *args, body])
        return Trace(body.v, CallEps(op, tuple(args), body), l, rho, omega, sigma, phi)

    if isinstance(opv, MemProcedure):
        args = [
            eval_traced(a, addr.extend("a", i), local, st)
            for i, a in enumerate(expr.args, start=1)
        ]
        key = tuple(value_key(t.v) for t in args)
        name = memo_name(opv.pid, key)
        if st.env.has_user(name):
            body = st.env.get_user(name)
            l, rho, omega, sigma, phi = merge_annotations([op, *args])
            rho = _union_map(rho, {name: body}, "rho")
            return Trace(body.v, MemCallEps(op, tuple(args), name, None), l, rho, omega, sigma, phi)
        body = apply_closure(opv.closure, args, addr, st)
        st.env = st.env.bind(name, body)
        l, rho, omega, sigma, phi = merge_annotations([op, *args, body])
        return Trace(body.v, MemCallEps(op, tuple(args), name, body), l, rho, omega, sigma, phi)

    raise NotAProcedureError(f"cannot apply {opv!r}")


def apply_closure(closure, arg_traces, addr, st):
    if len(arg_traces) != len(closure.params):
        raise ArityError(
            f"procedure takes {len(closure.params)} argument(s), got {len(arg_traces)}"
        )
    local = dict(closure.captured)
    local.update(zip(closure.params, arg_traces))
    return eval_traced(closure.body, addr.extend("b", 0), local, st)


# ---------------------------------------------------------------------------
# top-level statements


def run_statement(stmt, st: ExecState):
    """Execute one top-level statement.

    Returns (trace, log_weight, outputs): the statement trace, the weight it
    contributes to the current generation, and any predict outputs.
    """
    root = Address.root(stmt.ordinal)
    if isinstance(stmt, Assume):
        tr = eval_traced(stmt.expr, root, {}, st)
        st.env = st.env.bind(stmt.name, tr)
        return tr, tr.l, []
    if isinstance(stmt, Observe):
        value = literal_to_value(stmt.value_expr)
        tr = eval_observe(stmt.dist, value, root, {}, st)
        return tr, tr.l, []
    if isinstance(stmt, Predict):
        tr = eval_traced(stmt.expr, root, {}, st)
        return tr, tr.l, [(stmt.label, tr.v)]
    raise InternalInvariantViolation(f"unknown statement {type(stmt).__name__}")


# ---------------------------------------------------------------------------
# builtin environment

_BUILTIN_BASE = {}
for _name, _prim in PRIMITIVES.items():
    _BUILTIN_BASE[_name] = transparent_trace(_prim)
for _name, _value in BUILTIN_CONSTANTS.items():
    _BUILTIN_BASE[_name] = transparent_trace(_value)


def make_global_env() -> Environment:
    """A fresh global environment over the shared builtin layer."""
    return Environment(_BUILTIN_BASE)
