"""Shared test oracles and program fixtures.

The forced re-execution oracle is the independent reference for suffix
rescoring: it re-runs the suffix statements from a candidate particle's
state with every sample draw scripted to the retained value, accumulating
observe likelihoods plus scripted-draw prior densities.  Divergence (a
scripted draw never reached, or a reached draw never scripted) means the
combined execution is inconsistent and strict regeneration must abort.
"""

import numpy as np

from plisp.inference import Particle, _stream, run_smc, select_retained
from plisp.syntax import parse_program
from plisp.trace import ExecState, ForcedSampleMissing, Recorder, run_statement

GEOM_PROGRAM = """
[assume geom (lambda (p) (if (sample (flip-dist p)) 1 (+ 1 (geom p))))]
[observe (poisson-dist (geom 0.5)) 3]
"""

GEOM_PREDICT_PROGRAM = """
[assume geom (lambda (p) (if (sample (flip-dist p)) 1 (+ 1 (geom p))))]
[assume k (geom 0.5)]
[observe (poisson-dist k) 3]
[predict k]
"""

GEOM_TWO_GENERATIONS_PROGRAM = """
[assume geom (lambda (p) (if (sample (flip-dist p)) 1 (+ 1 (geom p))))]
[assume k1 (geom 0.5)]
[observe (poisson-dist k1) 3]
[assume k2 (geom 0.5)]
[observe (poisson-dist (+ k1 k2)) 5]
[predict k1]
"""

MIXTURE_PROGRAM = """
[assume class-prior (crp 1.0)]
[assume class (mem (lambda (n) (sample class-prior)))]
[assume class-dist (mem (lambda (k) (normal-dist (sample (normal-dist 0. 1.)) 1.)))]
[observe (class-dist (class 0)) 2.1]
[observe (class-dist (class 1)) 0.6]
[observe (class-dist (class 0)) 1.9]
[observe (class-dist (class 2)) -0.8]
[observe (class-dist (class 1)) 0.3]
[predict (class 0)]
[predict (class 1)]
"""

CHAIN_PROGRAM = """
[assume mu (sample (normal-dist 0. 1.))]
[observe (normal-dist mu 1.) 0.5]
[assume z (sample (normal-dist mu 1.))]
[observe (normal-dist z 0.5) 0.2]
[observe (normal-dist (+ z mu) 2.) -0.3]
[predict z]
"""

BRANCH_PROGRAM = """
[assume b (sample (flip-dist 0.5))]
[observe (normal-dist (if b 1. -1.) 1.) 0.3]
[assume y (if b (sample (normal-dist 0. 1.)) 2.0)]
[observe (normal-dist y 1.) 0.5]
[assume c (sample (flip-dist 0.3))]
[observe (normal-dist (if c y 0.) 1.5) 0.1]
[predict y]
"""

MEM_RANDOM_KEY_PROGRAM = """
[assume pick (mem (lambda (k) (sample (normal-dist 0. 1.))))]
[assume which (mem (lambda (n) (sample (flip-dist 0.5))))]
[observe (normal-dist (pick (if (which 0) 0 1)) 1.) 0.4]
[observe (normal-dist (pick (if (which 1) 0 1)) 1.) -0.2]
[observe (normal-dist (pick (if (which 2) 0 1)) 1.) 0.9]
"""

# branch alternatives carry no samples, so a predicate flip changes values
# without changing the sample set: the strict scheme must still abort
PURE_BRANCH_PROGRAM = """
[assume b (sample (flip-dist 0.5))]
[observe (normal-dist (if b 1. -1.) 1.) 0.3]
[observe (normal-dist (if b 0.5 -0.5) 1.) -0.2]
"""

REGEN_CORPUS = {
    "geom": GEOM_TWO_GENERATIONS_PROGRAM,
    "mixture": MIXTURE_PROGRAM,
    "chain": CHAIN_PROGRAM,
    "branch": BRANCH_PROGRAM,
    "pure-branch": PURE_BRANCH_PROGRAM,
    "mem-random-key": MEM_RANDOM_KEY_PROGRAM,
}


def collect_forced(chain):
    """Forced-value map and statement list for a suffix chain."""
    forced = {}
    statements = []
    for node in chain:
        for stmt, tr in node.entries:
            statements.append(stmt)
            for addr, (_, value) in tr.sigma.items():
                forced[addr] = value
    return forced, statements


def forced_rerun(candidate: Particle, chain):
    """Naive reference: re-execute the suffix from the candidate's state.

    Returns (log_joint, diverged, predicates).  log_joint is None when the
    execution reaches an unscripted sample; diverged is True whenever the
    scripted set and the executed set differ.
    """
    forced, statements = collect_forced(chain)
    recorder = Recorder()
    st = ExecState(
        candidate.env,
        None,
        processes=dict(candidate.processes),
        forced=forced,
        recorder=recorder,
    )
    total = 0.0
    try:
        for stmt in statements:
            _, l, _ = run_statement(stmt, st)
            total += l
    except ForcedSampleMissing:
        return None, True, recorder.predicates
    diverged = st.forced_used != set(forced)
    return total + st.forced_log, diverged, recorder.predicates


def retained_phi(chain):
    """Predicate values recorded in the retained suffix, address -> bool."""
    out = {}
    for node in chain:
        for _, tr in node.entries:
            for addr, pred in tr.phi.items():
                out[addr] = pred.v
    return out


def smc_with_retained(text_or_program, num_particles, seed):
    program = (
        parse_program(text_or_program)
        if isinstance(text_or_program, str)
        else text_or_program
    )
    result, _ = run_smc(program, num_particles, seed)
    retained = select_retained(result, _stream(seed, 0, 99, 0))
    return program, result, retained


def weighted_mean(records, label):
    total = mass = 0.0
    for r in records:
        if r.label == label:
            total += r.weight * r.value
            mass += r.weight
    assert mass > 0
    return total / mass


def chain_job(args):
    """Picklable worker: run one chain and return its records."""
    from plisp.inference import run_chain

    text, method, num_particles, sweeps, seed = args
    program = parse_program(text)
    records, _ = run_chain(program, method, num_particles, sweeps, seed)
    return records


def check_rescore_case(candidate, suffix, rescore_result, tol=1e-9):
    """Compare one rescoring against the naive oracle.

    Returns (ok, kind): kind is "abort" when the oracle demands an abort
    (sample-set divergence or a flipped branch), else "value".
    """
    oracle, diverged, oracle_phi = forced_rerun(candidate, suffix)
    reference_phi = retained_phi(suffix)
    phi_flip = any(
        addr in oracle_phi and oracle_phi[addr] != value
        for addr, value in reference_phi.items()
    )
    if diverged or phi_flip:
        return rescore_result.aborted, "abort"
    if rescore_result.aborted:
        return False, "value"
    return abs(rescore_result.log_weight - oracle) < tol, "value"
