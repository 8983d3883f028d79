"""Layer-ablation table for a KB (default: the shipped solved KB) on the desk bank.

Each row runs the intervention KB and reports execution success, L1/L2 query
accuracy, plan coverage, the operator effect probe and the invalid-command
stress probe. Rows are also written as JSON lines to ``--out``.
"""

import argparse
import json
from pathlib import Path

from typedkb.fixtures import load_solved
from typedkb.household_env import desk_bank
from typedkb.kb import load_kb
from typedkb.verifier import ABLATIONS, EvalCache, ablation_row


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kb", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.jsonl"))
    args = ap.parse_args()

    kb = load_kb(args.kb) if args.kb else load_solved()
    bank = desk_bank(args.seed)
    cache = EvalCache(args.jobs)
    rows = [ablation_row(kb, bank, None, cache=cache)]
    for layer, variants in ABLATIONS.items():
        for v in variants:
            rows.append(ablation_row(kb, bank, layer, v, cache=cache))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    frac = lambda a, b: f"{a}/{b}"  # noqa: E731
    print(f"{'layer':<5} {'variant':<19} {'exec':>6} {'query':>8} {'plan':>6} {'effect':>7} {'stress':>7}")
    for r in rows:
        print(
            f"{r.layer:<5} {r.variant:<19} {frac(r.exec_ok, r.exec_total):>6} {frac(r.query_ok, r.query_total):>8} "
            f"{frac(r.plan_ok, r.plan_total):>6} {frac(*r.effect):>7} {frac(*r.stress):>7}"
        )


if __name__ == "__main__":
    main()
