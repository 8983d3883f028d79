"""Typed, layered knowledge-base policies with gated edits and a traced symbolic executor."""

from .kb import KnowledgeBase, canonical_hash, check_kb, load_kb, parse_kb
from .kbdiff import KbDiff, apply_diff, try_apply
from .executor import run_episode, run_tasks
from .verifier import accept, ablate_layer, evaluate_bank
from .edit_loop import run_loop

__all__ = [
    "KnowledgeBase",
    "KbDiff",
    "ablate_layer",
    "accept",
    "apply_diff",
    "canonical_hash",
    "check_kb",
    "evaluate_bank",
    "load_kb",
    "parse_kb",
    "run_episode",
    "run_loop",
    "run_tasks",
    "try_apply",
]
