"""Particle engines: importance sampling, SMC, conditional SMC, and PGAS.

A program splits into generations at its top-level observes.  SMC runs L
particles generation by generation: each particle's weight at generation n
is the log-likelihood of the n-th observe, ancestors are drawn by
multinomial resampling, and forked particles continue independently.

Conditional sweeps pin a retained particle into the last slot at every
generation; the remaining slots follow SMC with the retained slot included
in the resampling pool.  PGAS additionally resamples the retained slot's
ancestor at each generation using suffix-rescored weights, re-rooting the
retained lineage onto the drawn candidate via regeneration.

RNG streams derive from (seed, sweep, generation, slot), so results are
reproducible regardless of scheduling.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AllWeightsZeroError, InternalInvariantViolation
from .records import PredictRecord
from .regen import NEG_INF, SuffixChain, rescore_suffix
from .trace import ExecState, make_global_env, run_statement

__all__ = [
    "Particle",
    "RetainedParticle",
    "SweepResult",
    "resample",
    "log_sum_exp",
    "run_smc",
    "run_csmc_sweep",
    "run_pgas_sweep",
    "ancestor_weights",
    "select_retained",
    "run_chain",
]


def log_sum_exp(log_weights) -> float:
    w = np.asarray(log_weights, dtype=float)
    m = np.max(w)
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(w - m))))


def resample(log_weights, rng) -> int:
    """Multinomial draw over log-space weights, max-shift normalized."""
    w = np.asarray(log_weights, dtype=float)
    if np.isnan(w).any():
        raise AllWeightsZeroError("NaN among resampling weights")
    m = np.max(w)
    if m == NEG_INF:
        raise AllWeightsZeroError("all resampling weights are zero")
    p = np.exp(w - m)
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, len(w) - 1)


def normalized_weights(log_weights):
    w = np.asarray(log_weights, dtype=float)
    m = np.max(w)
    if m == NEG_INF:
        raise AllWeightsZeroError("all particle weights are zero")
    p = np.exp(w - m)
    return p / p.sum()


def _stream(seed, sweep, gen, slot):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(sweep, gen, slot))
    )


class Particle:
    """One particle's state at a generation boundary.

    Immutable once created: env and traces are shared structurally, the
    process registry is owned by this snapshot, and outputs accumulate as a
    tuple along the lineage.
    """

    __slots__ = ("env", "processes", "traces", "log_w", "outputs")

    def __init__(self, env, processes, traces, log_w, outputs):
        self.env = env
        self.processes = processes
        self.traces = traces  # tuple of (TopLevel, Trace)
        self.log_w = log_w
        self.outputs = outputs

    def sigma_values(self):
        """address -> sampled value over this generation's statements."""
        out = {}
        for _, tr in self.traces:
            for addr, (_, value) in tr.sigma.items():
                out[addr] = value
        return out


def _extend(prev: Particle | None, statements, rng) -> Particle:
    if prev is None:
        st = ExecState(make_global_env(), rng)
        outputs = ()
    else:
        st = ExecState(prev.env, rng, processes=dict(prev.processes))
        outputs = prev.outputs
    log_w = 0.0
    traces = []
    for stmt in statements:
        tr, l, outs = run_statement(stmt, st)
        log_w += l
        traces.append((stmt, tr))
        if outs:
            outputs = outputs + tuple(outs)
    return Particle(st.env, st.processes, tuple(traces), log_w, outputs)


class RetainedParticle:
    """The lineage carried between PMCMC sweeps.

    gens[g] is the retained particle's state after generation g+1; chains[g]
    is the suffix cons-chain starting at that generation, with tails shared
    so extraction costs nothing.
    """

    __slots__ = ("gens", "final_outputs", "chains")

    def __init__(self, gens, final_outputs):
        self.gens = gens
        self.final_outputs = final_outputs
        chains = [None] * (len(gens) + 1)
        for g in range(len(gens) - 1, -1, -1):
            chains[g] = SuffixChain(g, gens[g].traces, chains[g + 1])
        self.chains = chains

    def suffix_from(self, g) -> SuffixChain:
        return self.chains[g]


class SweepResult:
    __slots__ = ("history", "ancestors", "final_particles", "log_weights", "evidence", "sweep")

    def __init__(self, history, ancestors, final_particles, log_weights, evidence, sweep):
        self.history = history        # history[g][slot] -> Particle
        self.ancestors = ancestors    # ancestors[g][slot] -> slot at g-1 (g >= 1)
        self.final_particles = final_particles  # after trailing statements
        self.log_weights = log_weights
        self.evidence = evidence
        self.sweep = sweep

    def records(self):
        norm = normalized_weights(self.log_weights)
        out = []
        for slot, particle in enumerate(self.final_particles):
            weight = float(norm[slot])
            for label, value in particle.outputs:
                out.append(PredictRecord(self.sweep, slot, weight, label, value))
        return out


def _run_sweep(
    program,
    num_particles,
    seed,
    sweep,
    retained: RetainedParticle | None = None,
    ancestor_sampling=False,
    refresh_retained_weight=True,
):
    groups, trailing = program.generation_groups()
    L = num_particles
    n_gens = len(groups)
    retained_slot = L - 1
    history = []
    ancestors = []
    evidence = 0.0

    for g in range(n_gens):
        gen_no = g + 1
        row = []
        anc_row = []
        if g == 0:
            for slot in range(L):
                if retained is not None and slot == retained_slot:
                    row.append(retained.gens[0])
                else:
                    row.append(_extend(None, groups[0], _stream(seed, sweep, gen_no, slot)))
            anc_row = [None] * L
        else:
            prev_weights = [p.log_w for p in history[g - 1]]
            retained_anc = None
            retained_particle = None
            if retained is not None and ancestor_sampling:
                retained_anc, retained_particle = _ancestor_update(
                    retained, g, history[g - 1], prev_weights,
                    _stream(seed, sweep, gen_no, L), refresh_retained_weight,
                )
            for slot in range(L):
                rng = _stream(seed, sweep, gen_no, slot)
                if retained is not None and slot == retained_slot:
                    if ancestor_sampling:
                        row.append(retained_particle)
                        anc_row.append(retained_anc)
                    else:
                        row.append(retained.gens[g])
                        anc_row.append(retained_slot)
                    continue
                try:
                    a = resample(prev_weights, rng)
                except AllWeightsZeroError as exc:
                    raise AllWeightsZeroError(
                        f"all weights zero at generation {g} ({exc})"
                    ) from exc
                row.append(_extend(history[g - 1][a], groups[g], rng))
                anc_row.append(a)
        history.append(row)
        ancestors.append(anc_row)
        gen_weights = [p.log_w for p in row]
        if max(gen_weights, default=0.0) == NEG_INF:
            raise AllWeightsZeroError(f"all weights zero at generation {g}")
        evidence += log_sum_exp(gen_weights) - math.log(L)

    # trailing statements (after the last observe): predicts, late assumes
    final_particles = []
    if n_gens == 0:
        for slot in range(L):
            final_particles.append(
                _extend(None, trailing, _stream(seed, sweep, 1, slot))
            )
        log_weights = [0.0] * L
    else:
        for slot in range(L):
            prev = history[-1][slot]
            if trailing:
                final_particles.append(
                    _extend(prev, trailing, _stream(seed, sweep, n_gens + 1, slot))
                )
            else:
                final_particles.append(prev)
        log_weights = [p.log_w for p in history[-1]]
    return SweepResult(history, ancestors, final_particles, log_weights, evidence, sweep)


def _ancestor_update(retained, g, prev_row, prev_weights, rng, refresh_retained_weight):
    """PGAS update of the retained slot at generation g (0-based, g >= 1).

    Draws the retained ancestor from suffix-rescored weights and re-roots the
    retained generation onto that candidate via regeneration.
    """
    suffix = retained.suffix_from(g)
    results = []
    weights = []
    for cand in prev_row:
        res = rescore_suffix(suffix, cand.env, cand.processes)
        results.append(res)
        weights.append(cand.log_w + res.log_weight)
    if weights[-1] == NEG_INF or math.isnan(weights[-1]):
        raise InternalInvariantViolation(
            "retained particle failed to rescore against its own prefix: "
            f"{results[-1].abort_reason}"
        )
    a = resample(weights, rng)
    res = results[a]
    cand = prev_row[a]
    log_w = res.head_log_weight if refresh_retained_weight else retained.gens[g].log_w
    particle = Particle(
        res.head_env,
        res.head_processes,
        res.head_traces,
        log_w,
        cand.outputs + res.head_outputs,
    )
    return a, particle


def ancestor_weights(particles, suffix: SuffixChain):
    """log w_{n-1}^l plus the suffix log-density rescored on each candidate."""
    out = []
    for cand in particles:
        res = rescore_suffix(suffix, cand.env, cand.processes)
        out.append(cand.log_w + res.log_weight)
    return out


def select_retained(result: SweepResult, rng) -> RetainedParticle:
    """Draw a retained particle from final weights and assemble its lineage."""
    k = resample(result.log_weights, rng)
    n_gens = len(result.history)
    gens = [None] * n_gens
    slot = k
    for g in range(n_gens - 1, -1, -1):
        gens[g] = result.history[g][slot]
        anc = result.ancestors[g][slot]
        slot = anc if anc is not None else slot
    return RetainedParticle(gens, result.final_particles[k].outputs)


# ---------------------------------------------------------------------------
# public engines


def run_smc(program, num_particles, seed, sweep=0):
    """One plain SMC sweep; returns (SweepResult, log-evidence estimate)."""
    result = _run_sweep(program, num_particles, seed, sweep)
    return result, result.evidence


def run_csmc_sweep(program, retained, num_particles, seed, sweep):
    result = _run_sweep(program, num_particles, seed, sweep, retained=retained)
    rng = _stream(seed, sweep, len(result.history) + 2, 0)
    return result, select_retained(result, rng)


def run_pgas_sweep(program, retained, num_particles, seed, sweep, refresh_retained_weight=True):
    result = _run_sweep(
        program,
        num_particles,
        seed,
        sweep,
        retained=retained,
        ancestor_sampling=True,
        refresh_retained_weight=refresh_retained_weight,
    )
    rng = _stream(seed, sweep, len(result.history) + 2, 0)
    return result, select_retained(result, rng)


def _run_is_sweep(program, num_particles, seed, sweep):
    """num_particles independent weighted executions (no resampling)."""
    groups, trailing = program.generation_groups()
    particles = []
    log_weights = []
    for slot in range(num_particles):
        particle = None
        total = 0.0
        for g, group in enumerate(groups):
            particle = _extend(particle, group, _stream(seed, sweep, g + 1, slot))
            total += particle.log_w
        particle = _extend(particle, trailing, _stream(seed, sweep, len(groups) + 1, slot))
        particles.append(particle)
        log_weights.append(total)
    return SweepResult([], [], particles, log_weights, 0.0, sweep)


METHODS = ("is", "smc", "icsmc", "pgas")


def run_chain(program, method, num_particles, sweeps, seed, refresh_retained_weight=True):
    """Run an inference chain; returns (records, diagnostics).

    Sweep 0 of icsmc/pgas is a plain SMC sweep; later sweeps are conditional.
    method="smc" runs independent SMC sweeps, method="is" independent
    weighted executions, sweeps x particles of them.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    records = []
    evidences = []
    retained = None
    for sweep in range(sweeps):
        if method == "is":
            result = _run_is_sweep(program, num_particles, seed, sweep)
        elif method == "smc" or sweep == 0:
            result, evidence = run_smc(program, num_particles, seed, sweep)
            evidences.append(evidence)
            if method in ("icsmc", "pgas"):
                rng = _stream(seed, sweep, len(result.history) + 2, 0)
                retained = select_retained(result, rng)
        elif method == "icsmc":
            result, retained = run_csmc_sweep(program, retained, num_particles, seed, sweep)
        else:
            result, retained = run_pgas_sweep(
                program, retained, num_particles, seed, sweep,
                refresh_retained_weight=refresh_retained_weight,
            )
        records.extend(result.records())
    return records, {"evidences": evidences}
