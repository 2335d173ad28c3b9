"""Linear-Gaussian state-space benchmark: simulator, program generator, oracle.

The model has a 2-d latent state rotating with angular velocity omega under
isotropic transition noise q, observed in D dimensions through a fixed
matrix C with isotropic observation noise r:

    z_1 = [1, 0]
    z_t ~ Norm(A(omega) z_{t-1}, q I_2)
    y_t ~ Norm(C z_t, r I_D)

The generated program estimates omega and q under Gamma priors with a
memoized state function; the fixed-parameter variant pins both so the exact
RTS smoother applies.  Benchmark restarts are independent jobs and run in a
process pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParametersError


def rotation(omega: float) -> np.ndarray:
    c, s = math.cos(omega), math.sin(omega)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class LgssSpec:
    D: int
    T: int
    omega: float
    q: float
    r: float
    seed: int
    C: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.D < 1 or self.T < 1:
            raise InvalidParametersError("D and T must be positive")
        if self.q < 0 or self.r < 0:
            # q = r = 0 is allowed for noise-free simulation; the generated
            # program needs both positive.
            raise InvalidParametersError("q and r must be nonnegative")
        if self.C.shape != (self.D, 2):
            raise InvalidParametersError(f"C must be {self.D}x2, got {self.C.shape}")


def make_lgss_spec(D=8, T=50, omega=None, q=0.1, r=0.01, seed=0) -> LgssSpec:
    """Build a benchmark spec; C is a seeded standard-normal Dx2 matrix / sqrt(2)."""
    if omega is None:
        omega = 4.0 * math.pi / T
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(902,)))
    C = rng.standard_normal((D, 2)) / math.sqrt(2.0)
    return LgssSpec(D=D, T=T, omega=float(omega), q=float(q), r=float(r), seed=seed, C=C)


def simulate_lgss(spec: LgssSpec, rng):
    """Forward-simulate; z_1 is pinned to [1, 0] (the program's base state)."""
    A = rotation(spec.omega)
    zs = np.zeros((spec.T, 2))
    ys = np.zeros((spec.T, spec.D))
    z = np.array([1.0, 0.0])
    for t in range(spec.T):
        if t > 0:
            z = A @ z + math.sqrt(spec.q) * rng.standard_normal(2)
        zs[t] = z
        ys[t] = spec.C @ z + math.sqrt(spec.r) * rng.standard_normal(spec.D)
    return zs, ys


def _fmt(x: float) -> str:
    return repr(float(x))


def _matrix_literal(m: np.ndarray) -> str:
    rows = ["[" + " ".join(_fmt(v) for v in row) + "]" for row in m]
    return "[" + " ".join(rows) + "]"


def _vector_literal(v: np.ndarray) -> str:
    return "[" + " ".join(_fmt(x) for x in v) + "]"


def emit_lgss_program(spec: LgssSpec, observations, fixed_params=None, predict_states=True) -> str:
    """Render the benchmark program over the given observations.

    fixed_params, when given as (omega, q), replaces the Gamma priors with
    constants so the posterior is exactly the Kalman smoother's.
    """
    if len(observations) != spec.T:
        raise InvalidParametersError(
            f"expected {spec.T} observations, got {len(observations)}"
        )
    lines = [
        f"[assume T {_fmt(spec.T)}]",
        f"[assume C {_matrix_literal(spec.C)}]",
        f"[assume R (* (eye {spec.D}) {_fmt(spec.r)})]",
    ]
    if fixed_params is None:
        lines.append("[assume omega (* (sample (gamma-dist 10. 2.5)) (/ pi T))]")
        lines.append("[assume q (sample (gamma-dist 10. 100.))]")
    else:
        omega, q = fixed_params
        lines.append(f"[assume omega {_fmt(omega)}]")
        lines.append(f"[assume q {_fmt(q)}]")
    lines.append(
        "[assume A [[(cos omega) (* -1. (sin omega))] [(sin omega) (cos omega)]]]"
    )
    lines.append("[assume Q (* (eye 2) q)]")
    lines.append(
        "[assume x (mem (lambda (t) (if (< t 1) [1. 0.] "
        "(sample (mvn-dist (mmul A (x (dec t))) Q)))))]"
    )
    for t in range(1, spec.T + 1):
        lines.append(
            f"[observe (mvn-dist (mmul C (x {t})) R) {_vector_literal(observations[t - 1])}]"
        )
    lines.append("[predict omega]")
    lines.append("[predict q]")
    if predict_states:
        for t in range(1, spec.T + 1):
            lines.append(f"[predict (x {t})]")
    return "\n".join(lines)


def kalman_oracle(spec: LgssSpec, omega, q, observations):
    """Exact RTS smoother for the fixed-parameter model.

    The prior matches the program: x(0) = [1, 0] deterministically, so
    x(1) ~ Norm(A [1,0], Q).  Returns (smoothed means (T,2), covs (T,2,2)).
    """
    T, D = spec.T, spec.D
    A = rotation(omega)
    Q = q * np.eye(2)
    C = spec.C
    R = spec.r * np.eye(D)
    ys = np.asarray(observations, dtype=float)
    if ys.shape != (T, D):
        raise InvalidParametersError(f"observations must be {T}x{D}")

    m_pred = np.zeros((T, 2))
    P_pred = np.zeros((T, 2, 2))
    m_filt = np.zeros((T, 2))
    P_filt = np.zeros((T, 2, 2))

    m, P = A @ np.array([1.0, 0.0]), Q
    for t in range(T):
        if t > 0:
            m = A @ m_filt[t - 1]
            P = A @ P_filt[t - 1] @ A.T + Q
        m_pred[t], P_pred[t] = m, P
        S = C @ P @ C.T + R
        K = np.linalg.solve(S, C @ P).T
        m_filt[t] = m + K @ (ys[t] - C @ m)
        P_filt[t] = P - K @ S @ K.T

    means = np.zeros((T, 2))
    covs = np.zeros((T, 2, 2))
    means[-1], covs[-1] = m_filt[-1], P_filt[-1]
    for t in range(T - 2, -1, -1):
        G = np.linalg.solve(P_pred[t + 1], A @ P_filt[t]).T
        means[t] = m_filt[t] + G @ (means[t + 1] - m_pred[t + 1])
        covs[t] = P_filt[t] + G @ (covs[t + 1] - P_pred[t + 1]) @ G.T
    return means, covs


# ---------------------------------------------------------------------------
# benchmark driver


def _bench_job(job):
    """One (method, restart) benchmark run; module-level so it pickles."""
    from .inference import run_chain
    from .records import compute_ess
    from .syntax import parse_program

    program_text, method, particles, sweeps, seed = job
    program = parse_program(program_text)
    records, _ = run_chain(program, method, particles, sweeps, seed)
    ess = {}
    for row in compute_ess(records):
        if row.target == "x":
            ess[row.group] = row.ess
    sums = {"omega": [0.0, 0.0], "q": [0.0, 0.0]}
    for r in records:
        acc = sums.get(r.label)
        if acc is not None:
            acc[0] += r.weight * r.value
            acc[1] += r.weight
    means = {k: (v[0] / v[1] if v[1] > 0 else float("nan")) for k, v in sums.items()}
    return method, ess, means["omega"], means["q"], records


def run_benchmark(program_text, methods, particles, sweeps, restarts, seed,
                  workers=None, keep_records=False):
    """Run restarts x methods as parallel jobs.

    Returns per-method dicts: {"ess": {t: [per-restart values]},
    "omega_means": [...], "q_means": [...], "records": [...] or None}.
    """
    jobs = [
        (program_text, method, particles, sweeps, seed + 1000 * (restart + 1))
        for method in methods
        for restart in range(restarts)
    ]
    out = {
        m: {"ess": {}, "omega_means": [], "q_means": [], "records": [] if keep_records else None}
        for m in methods
    }
    if workers is None or workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_job, jobs))
    else:
        results = [_bench_job(job) for job in jobs]
    for method, ess, omega_mean, q_mean, records in results:
        slot = out[method]
        for t, value in ess.items():
            slot["ess"].setdefault(t, []).append(value)
        slot["omega_means"].append(omega_mean)
        slot["q_means"].append(q_mean)
        if keep_records:
            slot["records"].append(records)
    return out
