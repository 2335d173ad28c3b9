"""Regeneration and rescoring: rebuild a trace against a new global environment.

Regenerating a trace tau against an environment R:

  1. re-evaluates every recorded if-condition and aborts if any changed value
     (strict regeneration: the rebuilt trace must reference exactly the same
     set of sample values, so control flow may not move);
  2. re-scores observe entries, recomputing the log-weight only when the
     stochastic argument's value changed (state-free families) or always
     (exchangeable families, whose state the stored value cannot witness);
  3. re-scores sample entries unconditionally against the regenerated
     process, threading exchangeable state in address order;
  4. rebinds referenced globals: names present in R rebind to R's trace,
     absent names are regenerated from the stored binding and added to R;
  5. regenerates sub-traces and recomputes the value when any binding or
     child value changed.

The log-weight difference Delta-l is the sum of (l' - l) over re-scored
observes plus the sum of l' over re-scored samples, including recursive
contributions.  A pass-level cache memoizes by trace identity, and a scored
registry guarantees each sample/observe address contributes exactly once
even when memoization aliases a body trace into several statements.

Suffix rescoring runs the same machinery over the retained statements of
generations n..N in order, rebinding suffix assumes as it goes; the result
is the joint log-density of the suffix's observes and retained draws under
the candidate prefix, with Abort encoded as -inf.
"""

from __future__ import annotations

import math

from .errors import InternalInvariantViolation, LispError
from .syntax import Assume, Predict
from .trace import (
    CallEps,
    LambdaEps,
    LitEps,
    MemCallEps,
    SymEps,
    Trace,
    VecEps,
    _assemble_vector,
    memo_name,
)
from .values import (
    Closure,
    MemProcedure,
    Primitive,
    StochasticProcess,
    apply_primitive,
    value_key,
    values_equal,
)

MEMO_PREFIX = "~memo:"

NEG_INF = float("-inf")


class RegenAbort(Exception):
    def __init__(self, address, reason):
        self.address = address
        self.reason = reason
        super().__init__(f"regeneration aborted: {reason}")


class RegenResult:
    __slots__ = ("ok", "trace", "delta", "abort_address", "abort_reason")

    def __init__(self, ok, trace=None, delta=0.0, abort_address=None, abort_reason=None):
        self.ok = ok
        self.trace = trace
        self.delta = delta
        self.abort_address = abort_address
        self.abort_reason = abort_reason

    def __repr__(self):
        if self.ok:
            return f"<regen ok delta={self.delta:.6g}>"
        return f"<regen abort {self.abort_reason!r} at {self.abort_address!r}>"


class RegenPass:
    """State for one regeneration pass against one candidate environment.

    Valid only for a single (suffix, prefix environment) pair; the cache maps
    trace identity to its regenerated image and the scored registry dedupes
    per-address log-weight contributions.
    """

    __slots__ = (
        "env",
        "processes",
        "cache",
        "scored",
        "compared",
        "delta_omega",
        "delta_sigma",
        "min_ordinal",
    )

    def __init__(self, env, processes=None, min_ordinal=None):
        self.env = env
        self.processes = dict(processes) if processes else {}
        self.cache = {}
        self.scored = {}
        self.compared = {}
        self.delta_omega = 0.0
        self.delta_sigma = 0.0
        self.min_ordinal = min_ordinal

    @property
    def delta(self):
        return self.delta_omega + self.delta_sigma

    def binding_changed(self, old, new):
        """values_equal on two binding traces, cached per identity pair."""
        key = (id(old), id(new))
        hit = self.compared.get(key)
        if hit is not None:
            return hit[2]
        changed = not values_equal(old.v, new.v)
        self.compared[key] = (old, new, changed)
        return changed


def _ordinal(addr):
    return addr.key[0][1]


def _has_entries_before(tr, min_ordinal):
    for mapping in (tr.sigma, tr.omega, tr.phi):
        for addr in mapping:
            if _ordinal(addr) < min_ordinal:
                return True
    return False


def _compatible_operator(old, new):
    if type(old) is not type(new):
        return False
    if isinstance(old, Primitive):
        return old is new
    if isinstance(old, Closure):
        return old.params == new.params and old.body == new.body
    if isinstance(old, MemProcedure):
        return old.pid == new.pid and _compatible_operator(old.closure, new.closure)
    return values_equal(old, new)


def _effective_density(rp, sp, value):
    """Score value under sp with exchangeable state taken from the pass registry."""
    if sp.exchangeable and sp.pid is not None:
        proc = rp.processes.get(sp.pid, sp)
        l = proc.log_density(value)
        rp.processes[sp.pid] = proc.absorb(value)
        return l
    return sp.log_density(value)


def _regen(tr: Trace, rp: RegenPass, score_maps=False):
    """Regenerate one trace; returns (trace2, value_changed).

    value_changed is exact (False) when every input was unchanged, and may
    be conservatively True after a recomputation; predicate and memo-hit
    checks re-verify with values_equal before acting on it.

    Map scoring (predicate checks, observe/sample rescoring) runs only at
    scoring roots: annotations merge upward, so a root's maps contain every
    entry reachable below it, and the pass-level scored registry already
    guarantees one contribution per address.  Nested traces keep their map
    entries untouched; the stored process traces go stale as pointers but
    stay value-correct, and any future pass rebinds them by name again.
    """
    if tr.transparent:
        return tr, False
    hit = rp.cache.get(id(tr))
    if hit is not None and hit[0] is tr:
        return hit[1], hit[2]

    phi2 = tr.phi
    omega2, sigma2 = tr.omega, tr.sigma
    omega_delta = 0.0

    if score_maps:
        # 1. predicates: abort on any value change.
        if tr.phi:
            items = (
                sorted(tr.phi.items(), key=_addr_key) if len(tr.phi) > 1 else tr.phi.items()
            )
            phi_new = {}
            phi_changed = False
            for addr, pred in items:
                pred2, changed = _regen(pred, rp)
                if changed and not values_equal(pred2.v, pred.v):
                    raise RegenAbort(addr, "if-condition took a different value")
                phi_new[addr] = pred2
                phi_changed = phi_changed or pred2 is not pred
            if phi_changed:
                phi2 = phi_new

        # 2.+3. re-score observes and samples in address order, threading state.
        if tr.omega or tr.sigma:
            entries = [(addr, True) for addr in tr.omega]
            entries += [(addr, False) for addr in tr.sigma]
            if len(entries) > 1:
                entries.sort(key=_entry_key)
            omega_new = {}
            sigma_new = {}
            maps_changed = False
            for addr, is_observe in entries:
                if is_observe:
                    ptrace, value, l_old = tr.omega[addr]
                else:
                    ptrace, value = tr.sigma[addr]
                ptrace2, pchanged = (ptrace, False) if ptrace.transparent else _regen(ptrace, rp)
                sp = ptrace2.v
                if not isinstance(sp, StochasticProcess):
                    raise RegenAbort(addr, "stochastic argument regenerated to a non-process")
                l_new = rp.scored.get(addr)
                if l_new is None:
                    if (
                        is_observe
                        and not sp.exchangeable
                        and (not pchanged or values_equal(ptrace.v, sp))
                    ):
                        l_new = l_old
                    else:
                        l_new = _effective_density(rp, sp, value)
                    rp.scored[addr] = l_new
                    if is_observe:
                        if l_new != l_old:
                            rp.delta_omega += l_new - l_old
                    else:
                        rp.delta_sigma += l_new
                if is_observe:
                    omega_new[addr] = (ptrace2, value, l_new)
                    if l_new != l_old:
                        maps_changed = True
                        omega_delta += l_new - l_old
                    elif ptrace2 is not ptrace:
                        maps_changed = True
                else:
                    sigma_new[addr] = (ptrace2, value)
                    if ptrace2 is not ptrace:
                        maps_changed = True
            if maps_changed:
                if tr.omega:
                    omega2 = omega_new
                if tr.sigma:
                    sigma2 = sigma_new

    # 4. rebind referenced globals (memo-synthetic names resolve at their
    # call nodes, where the re-keyed name is known).
    rho2 = tr.rho
    env_changed = False
    if tr.rho:
        rho_new = {}
        rho_same = True
        for name, bound in tr.rho.items():
            if name[0] == "~":
                rho_new[name] = bound
                continue
            nb = rp.env.get_user_or_none(name)
            if nb is None:
                nb = _lazy_import(name, bound, rp)
            rho_new[name] = nb
            if nb is not bound:
                rho_same = False
                if rp.binding_changed(bound, nb):
                    env_changed = True
        if not rho_same:
            rho2 = rho_new

    # 5.+6. regenerate sub-traces; recompute the value if anything it
    # depends on changed.
    eps2, v2, value_changed, structural = _regen_eps(tr, rp, rho2, env_changed)

    l2 = tr.l + omega_delta if omega_delta != 0.0 else tr.l

    if (
        not structural
        and phi2 is tr.phi
        and omega2 is tr.omega
        and sigma2 is tr.sigma
        and rho2 is tr.rho
        and l2 == tr.l
    ):
        result = tr
    else:
        result = Trace(v2, eps2, l2, rho2, omega2, sigma2, phi2)
    rp.cache[id(tr)] = (tr, result, value_changed)
    return result, value_changed


def _addr_key(item):
    return item[0].key


def _entry_key(pair):
    return pair[0].key


def _lazy_import(name, bound, rp):
    """Regenerate a binding absent from the candidate environment and add it.

    A binding born before the rescored suffix that carries stochastic
    annotations cannot be imported: a re-execution from the candidate prefix
    would have to draw it fresh, so strict regeneration aborts instead.
    """
    if rp.min_ordinal is not None and _has_entries_before(bound, rp.min_ordinal):
        raise RegenAbort(None, f"binding {name!r} depends on draws outside the suffix")
    nb, _ = _regen(bound, rp, score_maps=True)
    rp.env = rp.env.bind(name, nb)
    return nb


def _regen_eps(tr, rp, rho2, env_changed):
    """Returns (eps2, v2, value_changed, structural)."""
    eps = tr.eps
    kind = type(eps)

    if kind is LitEps:
        return eps, tr.v, False, False

    if kind is SymEps:
        # A symbol trace's rho holds exactly its own binding, so step 4's
        # env_changed flag is this lookup's change signal.
        bound = rho2.get(eps.name)
        if bound is None:
            raise InternalInvariantViolation(f"symbol trace lost its rho entry {eps.name!r}")
        if not env_changed:
            return eps, tr.v, False, rho2 is not tr.rho
        return eps, bound.v, True, True

    if kind is VecEps:
        elements2 = []
        value_changed = False
        structural = False
        for e in eps.elements:
            e2, ch = _regen(e, rp)
            elements2.append(e2)
            value_changed = value_changed or ch
            structural = structural or e2 is not e
        if not value_changed and not structural:
            return eps, tr.v, False, False
        v2 = _assemble_vector([e.v for e in elements2]) if value_changed else tr.v
        return VecEps(tuple(elements2)), v2, value_changed, True

    if kind is LambdaEps:
        captured2 = {}
        value_changed = False
        structural = False
        for name, c in eps.captured.items():
            c2, ch = _regen(c, rp)
            captured2[name] = c2
            value_changed = value_changed or ch
            structural = structural or c2 is not c
        if not value_changed and not structural:
            return eps, tr.v, False, False
        closure = tr.v
        v2 = Closure(closure.params, closure.body, captured2) if value_changed else tr.v
        return LambdaEps(eps.expr, captured2), v2, value_changed, True

    if kind is CallEps:
        op2, op_changed = (eps.op, False) if eps.op.transparent else _regen(eps.op, rp)
        if op_changed and not _compatible_operator(eps.op.v, op2.v):
            raise RegenAbort(None, "operator regenerated to an incompatible procedure")
        args2 = []
        args_changed = False
        structural = op2 is not eps.op
        for a in eps.args:
            if a.transparent:
                args2.append(a)
                continue
            a2, ch = _regen(a, rp)
            args2.append(a2)
            args_changed = args_changed or ch
            structural = structural or a2 is not a
        args2 = tuple(args2)
        if eps.body is None:
            # A primitive's value is a pure function of its argument values,
            # so the children's exact change flags are the whole signal.
            prim = op2.v
            if not args_changed:
                if not structural:
                    return eps, tr.v, False, False
                return CallEps(op2, args2, None), tr.v, False, True
            if prim.name == "mem":
                v2 = MemProcedure(args2[0].v, pid=tr.v.pid)
            else:
                pid = tr.v.pid if isinstance(tr.v, StochasticProcess) else None
                v2 = apply_primitive(prim, [a.v for a in args2], pid=pid)
            return CallEps(op2, args2, None), v2, True, True
        body2, body_changed = _regen(eps.body, rp)
        structural = structural or body2 is not eps.body
        if not body_changed and not structural:
            return eps, tr.v, False, False
        return CallEps(op2, args2, body2), body2.v, body_changed, True

    if kind is MemCallEps:
        op2, op_changed = (eps.op, False) if eps.op.transparent else _regen(eps.op, rp)
        if not isinstance(op2.v, MemProcedure) or (
            op_changed and not _compatible_operator(eps.op.v, op2.v)
        ):
            raise RegenAbort(None, "memoized operator regenerated incompatibly")
        args2 = []
        args_changed = False
        structural = op2 is not eps.op
        for a in eps.args:
            if a.transparent:
                args2.append(a)
                continue
            a2, ch = _regen(a, rp)
            args2.append(a2)
            args_changed = args_changed or ch
            structural = structural or a2 is not a
        args2 = tuple(args2)
        if args_changed:
            key2 = tuple(value_key(a.v) for a in args2)
            name2 = memo_name(op2.v.pid, key2)
        else:
            name2 = eps.name
        if eps.body is not None:
            body2, body_changed = _regen(eps.body, rp)
            if rp.env.has_user(name2):
                existing = rp.env.get_user(name2)
                if existing is not eps.body and existing is not body2:
                    raise RegenAbort(
                        _first_sigma_address(eps.body),
                        "memoized call collides with an existing cache entry",
                    )
            else:
                rp.env = rp.env.bind(name2, body2)
            structural = (
                structural or body2 is not eps.body or name2 != eps.name
            )
            if not body_changed and not structural:
                return eps, tr.v, False, False
            return MemCallEps(op2, args2, name2, body2), body2.v, body_changed, True
        # cache hit: resolve against the (re-keyed) binding
        if rp.env.has_user(name2):
            bound2 = rp.env.get_user(name2)
        elif name2 == eps.name and eps.name in tr.rho:
            bound2 = _lazy_import(eps.name, tr.rho[eps.name], rp)
        else:
            raise RegenAbort(None, "memoized call would need a fresh cache entry")
        value_changed = bound2.v is not tr.v and not values_equal(bound2.v, tr.v)
        structural = structural or name2 != eps.name or value_changed
        if not value_changed and not structural:
            return eps, tr.v, False, False
        return MemCallEps(op2, args2, name2, None), bound2.v, value_changed, True

    raise InternalInvariantViolation(f"unknown eps node {type(eps).__name__}")


def _first_sigma_address(tr):
    addrs = sorted(tr.sigma, key=lambda a: a.key)
    return addrs[0] if addrs else None


# ---------------------------------------------------------------------------
# public entry points


def regenerate(trace: Trace, env, processes=None, rpass: RegenPass | None = None) -> RegenResult:
    """Regenerate trace against env; returns Ok(trace', delta) or Abort."""
    rp = rpass if rpass is not None else RegenPass(env, processes)
    base = rp.delta
    try:
        trace2, _ = _regen(trace, rp, score_maps=True)
    except RegenAbort as abort:
        return RegenResult(False, abort_address=abort.address, abort_reason=abort.reason)
    except LispError as exc:
        return RegenResult(False, abort_address=None, abort_reason=f"evaluation error: {exc}")
    return RegenResult(True, trace=trace2, delta=rp.delta - base)


class SuffixChain:
    """Cons-chain of retained per-generation statement traces.

    head entries cover one generation; tail is the chain from the next
    generation, extractable without recomputation.
    """

    __slots__ = ("gen_index", "entries", "tail")

    def __init__(self, gen_index, entries, tail):
        self.gen_index = gen_index
        self.entries = entries  # tuple of (TopLevel, Trace)
        self.tail = tail

    def __iter__(self):
        node = self
        while node is not None:
            yield node
            node = node.tail


class RescoreResult:
    __slots__ = (
        "log_weight",
        "aborted",
        "abort_reason",
        "head_traces",
        "head_env",
        "head_processes",
        "head_log_weight",
        "head_outputs",
    )

    def __init__(self, log_weight, aborted=False, abort_reason=None, head_traces=None,
                 head_env=None, head_processes=None, head_log_weight=0.0, head_outputs=()):
        self.log_weight = log_weight
        self.aborted = aborted
        self.abort_reason = abort_reason
        self.head_traces = head_traces
        self.head_env = head_env
        self.head_processes = head_processes
        self.head_log_weight = head_log_weight
        self.head_outputs = head_outputs


def rescore_suffix(chain: SuffixChain, env, processes=None) -> RescoreResult:
    """Score the retained suffix against a candidate prefix state.

    Returns the joint log-density of the suffix's observes and retained
    sample values under the candidate environment (Abort encoded as -inf),
    together with the regenerated first-generation state needed to re-root
    the retained particle onto the candidate.
    """
    min_ordinal = min(stmt.ordinal for stmt, _ in chain.entries) if chain.entries else None
    rp = RegenPass(env, processes, min_ordinal=min_ordinal)
    total = 0.0
    head_traces = []
    head_env = None
    head_processes = None
    head_log_weight = 0.0
    head_outputs = []
    for node in chain:
        is_head = node is chain
        for stmt, tr in node.entries:
            try:
                tr2, _ = _regen(tr, rp, score_maps=True)
            except RegenAbort as abort:
                return RescoreResult(NEG_INF, aborted=True, abort_reason=abort.reason)
            except LispError as exc:
                return RescoreResult(NEG_INF, aborted=True, abort_reason=f"evaluation error: {exc}")
            if isinstance(stmt, Assume):
                rp.env = rp.env.bind(stmt.name, tr2)
            total += tr2.l
            if is_head:
                head_traces.append((stmt, tr2))
                head_log_weight += tr2.l
                if isinstance(stmt, Predict):
                    head_outputs.append((stmt.label, tr2.v))
        if is_head:
            head_env = rp.env
            head_processes = dict(rp.processes)
    total += rp.delta_sigma
    if math.isnan(total):
        raise InternalInvariantViolation("suffix rescoring produced NaN")
    return RescoreResult(
        total,
        head_traces=tuple(head_traces),
        head_env=head_env,
        head_processes=head_processes,
        head_log_weight=head_log_weight,
        head_outputs=tuple(head_outputs),
    )
