"""Replay the three recorded edits from the empty scaffold on the desk bank and
print per-round success by task group, the gate ledger and the budget row."""

import argparse
import json
import time
from pathlib import Path

from typedkb.edit_loop import ScriptedEditor, record_budget, run_loop
from typedkb.fixtures import load_scaffold, replay_dir
from typedkb.household_env import desk_bank, family_banks
from typedkb.kb import load_kb
from typedkb.verifier import audit_decisions, evaluate_bank


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run-dir", type=Path, default=Path("runs/cold_start"))
    ap.add_argument("--seed", type=int, default=7, help="desk-bank seed")
    ap.add_argument("--max-iters", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    desk = desk_bank(args.seed)
    groups = family_banks(desk)
    t0 = time.perf_counter()
    kb, manifest = run_loop(load_scaffold(), ScriptedEditor(replay_dir()), desk, desk, args.max_iters, args.run_dir, jobs=args.jobs)
    elapsed = time.perf_counter() - t0

    print(f"{'version':>7}  {'pick':>6}  {'light':>6}  {'process':>7}  {'total':>6}  verdict")
    for rec in [None] + manifest["decisions"]:
        snap = args.run_dir / f"kb.v{0 if rec is None else rec['version_after']}.json"
        snap_kb = load_kb(snap)
        row = {g: evaluate_bank(snap_kb, groups[g]) for g in ("pick", "light", "process")}
        total = sum(m.successes for m in row.values())
        verdict = "initial" if rec is None else f"{rec['verdict']} ({rec['reason']})"
        print(
            f"{snap_kb.version:>7}  "
            + "  ".join(f"{row[g].successes:>2}/{row[g].total:<3}".rjust(w) for g, w in (("pick", 6), ("light", 6), ("process", 7)))
            + f"  {total:>2}/{len(desk):<3}  {verdict}"
        )
    print(f"stop: {manifest['stop']}; elapsed {elapsed:.1f}s")
    problems = audit_decisions(manifest["decisions"], args.run_dir)
    print(f"audit: {len(problems)} violations")
    print(json.dumps(record_budget(manifest), sort_keys=True))


if __name__ == "__main__":
    main()
