"""plisp: a small probabilistic Lisp with particle-based inference."""

from .errors import LispError
from .inference import run_chain, run_csmc_sweep, run_pgas_sweep, run_smc
from .records import PredictRecord, compute_ess, read_jsonl, write_jsonl
from .regen import RegenPass, RegenResult, SuffixChain, regenerate, rescore_suffix
from .syntax import Address, Program, parse_program, to_source
from .trace import ExecState, Trace, eval_traced, make_global_env, run_statement

__version__ = "0.1.0"

__all__ = [
    "Address",
    "ExecState",
    "LispError",
    "PredictRecord",
    "Program",
    "RegenPass",
    "RegenResult",
    "SuffixChain",
    "Trace",
    "compute_ess",
    "eval_traced",
    "make_global_env",
    "parse_program",
    "read_jsonl",
    "regenerate",
    "rescore_suffix",
    "run_chain",
    "run_csmc_sweep",
    "run_pgas_sweep",
    "run_smc",
    "run_statement",
    "to_source",
    "write_jsonl",
]
