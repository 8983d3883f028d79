"""Regenerate the shipped JSON fixtures under src/typedkb/data."""

import argparse
import json
from pathlib import Path

from typedkb.fixtures import opengoalrecep_diff_doc, replay_diff_docs, scaffold_kb, smoke_suite_docs, solved_kb
from typedkb.household_env import desk_bank, save_bank
from typedkb.kb import write_kb

DATA = Path(__file__).resolve().parents[1] / "src" / "typedkb" / "data"


def dump(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def main(out: Path = DATA) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_kb(scaffold_kb(), out / "scaffold.kb.json")
    write_kb(solved_kb(), out / "solved.kb.json")
    for name, doc in replay_diff_docs():
        dump(doc, out / "replay" / name)
    for name, doc, _ in smoke_suite_docs():
        dump(doc, out / "smoke" / name)
    dump(opengoalrecep_diff_doc(), out / "opengoalrecep.diff.json")
    save_bank(desk_bank(), out / "desk_bank.json")
    print(f"wrote fixtures to {out}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DATA)
    main(ap.parse_args().out)
