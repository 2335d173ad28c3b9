"""Runtime values: primitives, closures, lists/arrays, stochastic processes.

Stochastic processes expose three operations:

    sample(rng)    -> (value, successor process)
    log_density(v) -> float (-inf for out-of-support values)
    absorb(v)      -> successor process

For i.i.d. families the successor is the process itself; exchangeable
families (crp) carry sufficient statistics that the successor updates.
State updates are always functional so traces can alias processes freely.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ArityError,
    DomainError,
    InvalidParametersError,
    ShapeMismatchError,
    TypeMismatchError,
    UnboundSymbolError,
)

LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# procedures


class Primitive:
    __slots__ = ("name", "fn")

    def __init__(self, name, fn):
        self.name = name
        self.fn = fn

    def __repr__(self):
        return f"<primitive {self.name}>"


class Closure:
    """A compound procedure: parameters, body, and captured local bindings.

    Globals are deliberately not captured; they resolve against the current
    global environment at application time, so top-level recursion works and
    forked particles see their own bindings.
    """

    __slots__ = ("params", "body", "captured")

    def __init__(self, params, body, captured):
        self.params = params
        self.body = body
        self.captured = captured  # name -> Trace

    def __repr__(self):
        return f"<procedure ({' '.join(self.params)})>"


class MemProcedure:
    """A memoizing wrapper around a closure, identified by its creation site."""

    __slots__ = ("closure", "pid")

    def __init__(self, closure, pid):
        self.closure = closure
        self.pid = pid

    def __repr__(self):
        return f"<memoized {self.closure!r}>"


# ---------------------------------------------------------------------------
# stochastic processes


def _require_number(v, family):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeMismatchError(f"{family} expects a number, got {type(v).__name__}")
    return float(v)


class StochasticProcess:
    __slots__ = ("pid",)
    family = "stochastic"
    exchangeable = False

    def __eq__(self, other):  # state-inclusive, pid-exclusive
        return (
            type(other) is type(self)
            and self._params() == other._params()
            and self._state() == other._state()
        )

    __hash__ = None

    def _params(self):
        raise NotImplementedError

    def _state(self):
        return ()

    def __repr__(self):
        return f"<{self.family} {self._params()}>"


class FlipProcess(StochasticProcess):
    __slots__ = ("p",)
    family = "flip"

    def __init__(self, p, pid=None):
        p = _require_number(p, "flip-dist")
        if not 0.0 <= p <= 1.0:
            raise InvalidParametersError(f"flip probability {p} outside [0, 1]")
        self.p = p
        self.pid = pid

    def _params(self):
        return (self.p,)

    def sample(self, rng):
        return bool(rng.random() < self.p), self

    def log_density(self, v):
        if not isinstance(v, bool):
            raise TypeMismatchError("flip observes a boolean")
        p = self.p if v else 1.0 - self.p
        return math.log(p) if p > 0.0 else NEG_INF

    def absorb(self, v):
        return self


class NormalProcess(StochasticProcess):
    __slots__ = ("mu", "sigma")
    family = "normal"

    def __init__(self, mu, sigma, pid=None):
        self.mu = _require_number(mu, "normal-dist")
        self.sigma = _require_number(sigma, "normal-dist")
        if self.sigma <= 0.0:
            raise InvalidParametersError(f"normal stddev {self.sigma} must be positive")
        self.pid = pid

    def _params(self):
        return (self.mu, self.sigma)

    def sample(self, rng):
        return self.mu + self.sigma * rng.standard_normal(), self

    def log_density(self, v):
        x = _require_number(v, "normal")
        z = (x - self.mu) / self.sigma
        return -0.5 * LOG_2PI - math.log(self.sigma) - 0.5 * z * z

    def absorb(self, v):
        return self


_CHOL_CACHE = {}  # id(cov) -> (cov, chol, log_det); bounded below


def _cholesky_of(cov):
    entry = _CHOL_CACHE.get(id(cov))
    if entry is not None and entry[0] is cov:
        return entry[1], entry[2]
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeMismatchError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise InvalidParametersError("covariance matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidParametersError("covariance matrix is not positive definite") from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    if len(_CHOL_CACHE) > 64:
        _CHOL_CACHE.clear()
    _CHOL_CACHE[id(cov)] = (cov, chol, log_det)
    return chol, log_det


class MvNormalProcess(StochasticProcess):
    __slots__ = ("mean", "cov", "_chol", "_log_det")
    family = "mvn"

    def __init__(self, mean, cov, pid=None):
        if not isinstance(mean, np.ndarray) or mean.ndim != 1:
            raise TypeMismatchError("mvn-dist mean must be a vector")
        if not isinstance(cov, np.ndarray):
            raise TypeMismatchError("mvn-dist covariance must be a matrix")
        chol, log_det = _cholesky_of(cov)
        if cov.shape[0] != mean.shape[0]:
            raise ShapeMismatchError(
                f"mean dim {mean.shape[0]} vs covariance dim {cov.shape[0]}"
            )
        self.mean = mean
        self.cov = cov
        self._chol = chol
        self._log_det = log_det
        self.pid = pid

    def _params(self):
        return (self.mean.tobytes(), self.mean.shape, self.cov.tobytes(), self.cov.shape)

    def sample(self, rng):
        z = rng.standard_normal(self.mean.shape[0])
        return self.mean + self._chol @ z, self

    def log_density(self, v):
        if not isinstance(v, np.ndarray) or v.shape != self.mean.shape:
            raise TypeMismatchError("mvn observes a vector of matching dimension")
        diff = v - self.mean
        k = self.mean.shape[0]
        L = self._chol
        if k == 2:
            # forward substitution beats np.linalg.solve for tiny systems
            y0 = diff[0] / L[0, 0]
            y1 = (diff[1] - L[1, 0] * y0) / L[1, 1]
            quad = y0 * y0 + y1 * y1
        elif k == 1:
            y0 = diff[0] / L[0, 0]
            quad = y0 * y0
        else:
            y = np.linalg.solve(L, diff)
            quad = y @ y
        return float(-0.5 * (k * LOG_2PI + self._log_det + quad))

    def absorb(self, v):
        return self


class GammaProcess(StochasticProcess):
    """Gamma distribution parameterized by shape and rate."""

    __slots__ = ("shape", "rate")
    family = "gamma"

    def __init__(self, shape, rate, pid=None):
        self.shape = _require_number(shape, "gamma-dist")
        self.rate = _require_number(rate, "gamma-dist")
        if self.shape <= 0.0 or self.rate <= 0.0:
            raise InvalidParametersError("gamma shape and rate must be positive")
        self.pid = pid

    def _params(self):
        return (self.shape, self.rate)

    def sample(self, rng):
        return float(rng.gamma(self.shape, 1.0 / self.rate)), self

    def log_density(self, v):
        x = _require_number(v, "gamma")
        if x <= 0.0:
            return NEG_INF
        return (
            self.shape * math.log(self.rate)
            - math.lgamma(self.shape)
            + (self.shape - 1.0) * math.log(x)
            - self.rate * x
        )

    def absorb(self, v):
        return self


class PoissonProcess(StochasticProcess):
    __slots__ = ("lam",)
    family = "poisson"

    def __init__(self, lam, pid=None):
        self.lam = _require_number(lam, "poisson-dist")
        if self.lam <= 0.0:
            raise InvalidParametersError(f"poisson rate {self.lam} must be positive")
        self.pid = pid

    def _params(self):
        return (self.lam,)

    def sample(self, rng):
        return int(rng.poisson(self.lam)), self

    def log_density(self, v):
        x = _require_number(v, "poisson")
        if x < 0.0 or x != int(x):
            return NEG_INF
        k = int(x)
        return k * math.log(self.lam) - self.lam - math.lgamma(k + 1)

    def absorb(self, v):
        return self


class CrpProcess(StochasticProcess):
    """Chinese restaurant process over integer table labels.

    State is the tuple of per-table counts.  Sampling seats a new customer
    at the lowest unused label; scoring gives any unused label the new-table
    probability alpha/(n+alpha), which keeps the joint of a label sequence
    invariant under permutation.
    """

    __slots__ = ("alpha", "counts")
    family = "crp"
    exchangeable = True

    def __init__(self, alpha, counts=(), pid=None):
        self.alpha = _require_number(alpha, "crp")
        if self.alpha <= 0.0:
            raise InvalidParametersError(f"crp concentration {self.alpha} must be positive")
        self.counts = tuple(counts)
        self.pid = pid

    def _params(self):
        return (self.alpha,)

    def _state(self):
        return self.counts

    def _check_label(self, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeMismatchError("crp labels are integers")
        return v

    def _new_label(self):
        for k, c in enumerate(self.counts):
            if c == 0:
                return k
        return len(self.counts)

    def sample(self, rng):
        n = sum(self.counts)
        total = n + self.alpha
        u = rng.random() * total
        acc = 0.0
        label = None
        for k, c in enumerate(self.counts):
            if c == 0:
                continue
            acc += c
            if u < acc:
                label = k
                break
        if label is None:
            label = self._new_label()
        return label, self.absorb(label)

    def log_density(self, v):
        k = self._check_label(v)
        if k < 0:
            return NEG_INF
        n = sum(self.counts)
        total = n + self.alpha
        if k < len(self.counts) and self.counts[k] > 0:
            return math.log(self.counts[k] / total)
        return math.log(self.alpha / total)

    def absorb(self, v):
        k = self._check_label(v)
        if k < 0:
            raise TypeMismatchError("crp labels are nonnegative")
        counts = list(self.counts)
        if k >= len(counts):
            counts.extend([0] * (k + 1 - len(counts)))
        counts[k] += 1
        return CrpProcess(self.alpha, tuple(counts), pid=self.pid)


# ---------------------------------------------------------------------------
# value equality and canonical keys


def values_equal(a, b) -> bool:
    """Structural equality with exact float comparison (change detection)."""
    if a is b:
        return True
    ta, tb = type(a), type(b)
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray)
            and isinstance(b, np.ndarray)
            and a.shape == b.shape
            and a.dtype == b.dtype
            and a.tobytes() == b.tobytes()
        )
    if ta is not tb:
        return False
    if ta is tuple:
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, StochasticProcess):
        return a == b
    if ta is Closure:
        return (
            a.params == b.params
            and a.body == b.body
            and a.captured.keys() == b.captured.keys()
            and all(values_equal(a.captured[k].v, b.captured[k].v) for k in a.captured)
        )
    if ta is MemProcedure:
        return a.pid == b.pid and values_equal(a.closure, b.closure)
    if ta is Primitive:
        return a is b
    return a == b


def value_key(v):
    """Hashable canonical key for a value (mem caches, ESS uniqueness)."""
    if isinstance(v, bool):
        return ("b", v)
    if isinstance(v, int):
        return ("i", v)
    if isinstance(v, float):
        return ("f", v)
    if isinstance(v, str):
        return ("s", v)
    if isinstance(v, tuple):
        return ("l",) + tuple(value_key(x) for x in v)
    if isinstance(v, np.ndarray):
        return ("a", v.shape, v.tobytes())
    raise TypeMismatchError(f"value of type {type(v).__name__} has no canonical key")


# ---------------------------------------------------------------------------
# environment


class Environment:
    """Global bindings: an immutable user table over a shared builtin layer."""

    __slots__ = ("_base", "_table")

    def __init__(self, base, table=None):
        self._base = base
        self._table = table if table is not None else {}

    def lookup(self, name):
        trace = self._table.get(name)
        if trace is None:
            trace = self._base.get(name)
            if trace is None:
                raise UnboundSymbolError(f"unbound symbol {name!r}")
        return trace

    def is_builtin(self, name):
        return name not in self._table and name in self._base

    def has_user(self, name):
        return name in self._table

    def get_user(self, name):
        return self._table[name]

    def get_user_or_none(self, name):
        return self._table.get(name)

    def bind(self, name, trace):
        table = dict(self._table)
        table[name] = trace
        return Environment(self._base, table)

    def user_names(self):
        return self._table.keys()


# ---------------------------------------------------------------------------
# primitives


def _as_number(v, who):
    if isinstance(v, bool) or not isinstance(v, (int, float, np.ndarray)):
        raise TypeMismatchError(f"{who} expects numbers, got {type(v).__name__}")
    return v


def _check_arity(name, args, n):
    if len(args) != n:
        raise ArityError(f"{name} takes {n} argument(s), got {len(args)}")


def _prim_add(args):
    if not args:
        raise ArityError("+ takes at least 1 argument")
    out = _as_number(args[0], "+")
    for v in args[1:]:
        out = out + _as_number(v, "+")
    return out


def _prim_mul(args):
    if not args:
        raise ArityError("* takes at least 1 argument")
    out = _as_number(args[0], "*")
    for v in args[1:]:
        out = out * _as_number(v, "*")
    return out


def _prim_sub(args):
    if len(args) == 1:
        return -_as_number(args[0], "-")
    _check_arity("-", args, 2)
    return _as_number(args[0], "-") - _as_number(args[1], "-")


def _prim_div(args):
    _check_arity("/", args, 2)
    a, b = _as_number(args[0], "/"), _as_number(args[1], "/")
    if isinstance(b, (int, float)) and b == 0:
        raise DomainError("division by zero")
    return a / b


def _scalar_cmp(name, op):
    def fn(args):
        _check_arity(name, args, 2)
        a, b = args
        for v in (a, b):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeMismatchError(f"{name} compares scalars")
        return op(a, b)

    return fn


def _prim_eq(args):
    _check_arity("=", args, 2)
    return values_equal(args[0], args[1])


def _step(name, delta):
    def fn(args):
        _check_arity(name, args, 1)
        v = args[0]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeMismatchError(f"{name} expects a scalar")
        return v + delta

    return fn


def _unary_math(name, fn, domain=None):
    def prim(args):
        _check_arity(name, args, 1)
        v = args[0]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeMismatchError(f"{name} expects a scalar")
        if domain is not None and not domain(v):
            raise DomainError(f"{name} undefined at {v}")
        return fn(v)

    return prim


def _prim_eye(args):
    _check_arity("eye", args, 1)
    n = args[0]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise TypeMismatchError("eye expects a positive integer")
    return np.eye(n)


def _prim_mmul(args):
    _check_arity("mmul", args, 2)
    a, b = args
    if not isinstance(a, np.ndarray) or not isinstance(b, np.ndarray):
        raise TypeMismatchError("mmul expects arrays")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"mmul shapes {a.shape} and {b.shape} do not align")
    return a @ b


def _prim_cons(args):
    _check_arity("cons", args, 2)
    head, tail = args
    if not isinstance(tail, tuple):
        raise TypeMismatchError("cons expects a list as second argument")
    return (head,) + tail


def _prim_first(args):
    _check_arity("first", args, 1)
    (v,) = args
    if not isinstance(v, tuple):
        raise TypeMismatchError("first expects a list")
    if not v:
        raise DomainError("first of empty list")
    return v[0]


def _prim_rest(args):
    _check_arity("rest", args, 1)
    (v,) = args
    if not isinstance(v, tuple):
        raise TypeMismatchError("rest expects a list")
    if not v:
        raise DomainError("rest of empty list")
    return v[1:]


def _prim_not(args):
    _check_arity("not", args, 1)
    if not isinstance(args[0], bool):
        raise TypeMismatchError("not expects a boolean")
    return not args[0]


def _constructor(name, cls, n):
    def fn(args, pid=None):
        _check_arity(name, args, n)
        return cls(*args, pid=pid)

    fn.takes_pid = True
    return fn


_PRIM_FNS = {
    "+": _prim_add,
    "-": _prim_sub,
    "*": _prim_mul,
    "/": _prim_div,
    "<": _scalar_cmp("<", lambda a, b: a < b),
    ">": _scalar_cmp(">", lambda a, b: a > b),
    "<=": _scalar_cmp("<=", lambda a, b: a <= b),
    ">=": _scalar_cmp(">=", lambda a, b: a >= b),
    "=": _prim_eq,
    "dec": _step("dec", -1),
    "inc": _step("inc", 1),
    "cos": _unary_math("cos", math.cos),
    "sin": _unary_math("sin", math.sin),
    "sqrt": _unary_math("sqrt", math.sqrt, domain=lambda v: v >= 0),
    "exp": _unary_math("exp", math.exp),
    "log": _unary_math("log", math.log, domain=lambda v: v > 0),
    "not": _prim_not,
    "eye": _prim_eye,
    "mmul": _prim_mmul,
    "cons": _prim_cons,
    "list": lambda args: tuple(args),
    "first": _prim_first,
    "rest": _prim_rest,
    "flip-dist": _constructor("flip-dist", FlipProcess, 1),
    "normal-dist": _constructor("normal-dist", NormalProcess, 2),
    "mvn-dist": _constructor("mvn-dist", MvNormalProcess, 2),
    "gamma-dist": _constructor("gamma-dist", GammaProcess, 2),
    "poisson-dist": _constructor("poisson-dist", PoissonProcess, 1),
    "crp": _constructor("crp", CrpProcess, 1),
    "mem": None,  # applied by the evaluator, which knows the call address
}

PRIMITIVES = {name: Primitive(name, fn) for name, fn in _PRIM_FNS.items()}

BUILTIN_CONSTANTS = {"pi": math.pi}


def apply_primitive(prim: Primitive, args, pid=None):
    """Apply a primitive; pid is the creation address for process constructors."""
    fn = prim.fn
    if fn is None:
        raise TypeMismatchError(f"{prim.name} cannot be applied directly")
    if getattr(fn, "takes_pid", False):
        return fn(tuple(args), pid=pid)
    return fn(tuple(args))
