"""Command-line entry points. Machine output is one JSON object per line on
stdout; ``--pretty`` adds a human table on stderr.

Exit codes:
    0  success (for ``verify``: kept; for ``loop``: run completed)
    1  unreadable input or I/O error
    2  KB or diff failed validation
    3  diff rejected by the applier, or candidate reverted by the gate
    4  KB cannot be executed
    5  trajectory audit failed (containment, tampering, bad step)
    6  unknown ablation layer or variant
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import edit_loop, verifier
from .executor import first_match_violations, trace_contained
from .household_env import DESK_MIX, DESK_SEED, family_banks, generate_bank, load_bank, save_bank
from .kb import ParseError, check_kb, load_kb, write_kb
from .kbdiff import SchemaError, load_diff, try_apply

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_REJECTED, EXIT_EXEC, EXIT_AUDIT, EXIT_VARIANT = range(7)


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.record = {"error": kind, "message": message, **extra}


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")


def pretty(args, rows, columns) -> None:
    if not getattr(args, "pretty", False):
        return
    widths = [max(len(str(c)), *(len(str(r.get(c, ""))) for r in rows)) for c in columns]
    line = lambda vals: "  ".join(str(v).ljust(w) for v, w in zip(vals, widths))  # noqa: E731
    print(line(columns), file=sys.stderr)
    for r in rows:
        print(line([r.get(c, "") for c in columns]), file=sys.stderr)


def default_seed() -> int:
    return int(os.environ.get("KINTSUGI_SEED", DESK_SEED))


def read_kb(path):
    try:
        return load_kb(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", str(exc), path=str(path)) from None
    except ParseError as exc:
        raise CliError(EXIT_INVALID, f"parse:{exc.kind}", str(exc), path=str(path), field_path=exc.field_path, line=exc.line) from None


def resolve_bank(spec: str | None, seed: int):
    """A bank file, or a named partition (desk, pick, light, process) of the seeded desk bank."""
    if spec and Path(spec).exists():
        try:
            return load_bank(spec)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_IO, "io", f"cannot read bank: {exc}", path=spec) from None
    banks = family_banks(generate_bank(seed, DESK_MIX, name="desk"))
    name = spec or "desk"
    if name not in banks:
        raise CliError(EXIT_IO, "io", f"no bank file or named bank {name!r}", choices=sorted(banks))
    return banks[name]


def header(kb, bank) -> dict:
    return {"kb_hash": kb.hash, "policy_digest": kb.policy_digest, "bank": bank.name, "bank_seed": bank.seed, "bank_digest": bank.digest}


# ---------------------------------------------------------------- subcommands


def cmd_kb_validate(args) -> int:
    kb = read_kb(args.kb)
    diag, findings = check_kb(kb)
    for d in diag.diagnostics:
        emit({"diagnostic": d.message, "path": d.path})
    for f in findings:
        emit({"finding": f.kind, "layer": f.layer, "key": f.key, "ref": f.ref, "detail": f.detail})
    ok = diag.ok and not findings
    emit({"valid": ok, "kb_hash": kb.hash, "version": kb.version, "entries": len(kb.entries)})
    return EXIT_OK if ok else EXIT_INVALID


def cmd_kb_exec(args) -> int:
    kb = read_kb(args.kb)
    bank = resolve_bank(args.bank, args.seed)
    try:
        verifier.ensure_executable(kb)
    except verifier.ExecutableError as exc:
        raise CliError(EXIT_EXEC, "executable", str(exc)) from None
    calls_before = edit_loop.editor_calls()
    m = verifier.evaluate_bank(kb, bank, args.horizon, jobs=args.jobs)
    hdr = header(kb, bank) | {"horizon": args.horizon or bank.horizon}
    rec = hdr | {
        "successes": m.successes,
        "total": m.total,
        "result": f"{m.successes}/{m.total}",
        "health": m.health.to_dict(),
        "families": {f: f"{a}/{b}" for f, (a, b) in m.by_family().items()},
        "editor_calls": edit_loop.editor_calls() - calls_before,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rec["trajectories_sha256"] = verifier.write_trajectories(m.records, out / "trajectories.jsonl", header=hdr)
        (out / "metrics.json").write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    emit(rec)
    pretty(args, [{"family": f, "success": v} for f, v in rec["families"].items()], ["family", "success"])
    return EXIT_OK


def cmd_kb_trace(args) -> int:
    try:
        hdr, records = verifier.read_trajectory_file(args.trajectories)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", str(exc)) from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(EXIT_AUDIT, "trajectory", f"malformed trajectory file: {exc}") from None
    if args.task:
        records = [r for r in records if r.task_id == args.task]
        if not records:
            raise CliError(EXIT_AUDIT, "trajectory", f"no episode {args.task!r}")
    if not records:
        raise CliError(EXIT_AUDIT, "trajectory", "file has no episodes")
    rec = records[0]
    if args.kb:
        kb = read_kb(args.kb)
        if hdr is not None and hdr.get("kb_hash") != kb.hash:
            raise CliError(EXIT_AUDIT, "header", "KB hash does not match the trajectory header", expected=hdr.get("kb_hash"), actual=kb.hash)
        bad = trace_contained(rec, kb)
        if bad:
            raise CliError(EXIT_AUDIT, "containment", "trace names entries that are not in the KB", violations=[list(b) for b in bad[:10]])
        fm = first_match_violations(rec, kb)
        if fm:
            raise CliError(EXIT_AUDIT, "first_match", "fired rule is not the first satisfied rule", steps=fm[:10])
    steps = rec.steps
    if args.step is not None:
        if not 0 <= args.step < len(steps):
            raise CliError(EXIT_AUDIT, "step", f"step {args.step} is outside 0..{len(steps) - 1}")
        steps = [steps[args.step]]
    rows = []
    for s in steps:
        tr = s["trace"]
        row = {
            "task_id": rec.task_id,
            "step": s["t"],
            "rule": tr["fired_rule"],
            "true": [n for n, v in tr.get("predicates", []) if v],
            "false": [n for n, v in tr.get("predicates", []) if not v],
            "skill": tr.get("skill"),
            "operator": tr.get("operator"),
            "recovery": tr.get("recovery"),
            "command": s["command"],
            "response": s["response"],
        }
        if hdr:
            row["kb_hash"] = hdr.get("kb_hash")
        rows.append(row)
        emit(row)
    pretty(args, rows, ["step", "rule", "command", "response"])
    return EXIT_OK


def cmd_diff_apply(args) -> int:
    kb = read_kb(args.kb)
    try:
        diff = load_diff(args.diff)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", str(exc)) from None
    except SchemaError as exc:
        raise CliError(EXIT_INVALID, "schema", str(exc), field_path=getattr(exc, "field_path", None)) from None
    new, audit = try_apply(kb, diff)
    rec = {"audit": audit.to_dict(), "kb_hash_before": kb.hash}
    if new is None:
        emit(rec | {"applied": False})
        return EXIT_REJECTED
    rec.update({"applied": True, "kb_hash_after": new.hash})
    if args.out:
        write_kb(new, args.out)
        rec["out"] = args.out
    emit(rec)
    return EXIT_OK


def _smoke_suite(directory):
    suite = []
    for p in sorted(Path(directory).glob("*.json")):
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except ValueError:
            doc = {}
        suite.append((p.name, doc, ".valid." in p.name))
    return suite


def cmd_verify(args) -> int:
    kb = read_kb(args.kb)
    if args.smoke_apply:
        rep = verifier.smoke_apply(_smoke_suite(args.smoke_apply), kb)
        emit({"smoke_apply": rep.to_dict(), "kb_hash": kb.hash})
        return EXIT_OK if rep.ok else EXIT_REJECTED
    bank = resolve_bank(args.bank, args.seed)
    if args.smoke_exec is not None:
        try:
            rep = verifier.smoke_execute(kb, bank, args.smoke_exec, args.horizon)
        except verifier.ExecutableError as exc:
            raise CliError(EXIT_EXEC, "executable", str(exc)) from None
        emit({"smoke_execute": rep.to_dict()} | header(kb, bank))
        return EXIT_OK
    if not args.diff:
        raise CliError(EXIT_IO, "usage", "verify needs --diff, --smoke-apply or --smoke-exec")
    try:
        diff = load_diff(args.diff)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", str(exc)) from None
    except SchemaError as exc:
        emit({"verdict": "apply_failed", "stage": "schema", "reason": str(exc)})
        return EXIT_REJECTED
    cand, audit = try_apply(kb, diff)
    if cand is None:
        emit({"verdict": "apply_failed", "stage": audit.stage, "reason": audit.reason, "kb_hash": kb.hash})
        return EXIT_REJECTED
    focused = resolve_bank(args.focused or args.bank, args.seed)
    protected = resolve_bank(args.protected or args.bank, args.seed)
    dec = verifier.accept(kb, cand, focused, protected, args.health, args.horizon, verifier.EvalCache(args.jobs))
    emit(dec.to_dict() | {"bank_seed": bank.seed})
    return EXIT_OK if dec.verdict == "kept" else EXIT_REJECTED


def make_editor(spec: str):
    if spec == "null":
        return edit_loop.NullEditor()
    kind, _, arg = spec.partition(":")
    if kind == "scripted" and arg:
        if not Path(arg).is_dir():
            raise CliError(EXIT_IO, "io", f"scripted editor directory {arg!r} does not exist")
        return edit_loop.ScriptedEditor(arg)
    if kind == "external" and arg:
        return edit_loop.ExternalEditor(arg)
    raise CliError(EXIT_IO, "usage", f"editor must be null, scripted:DIR or external:CMD, not {spec!r}")


def cmd_loop(args) -> int:
    kb0 = read_kb(args.kb)
    editor = make_editor(args.editor)
    focused = resolve_bank(args.focused, args.seed)
    protected = resolve_bank(args.protected, args.seed)
    run_dir = Path(args.run_dir)
    kb, manifest = edit_loop.run_loop(kb0, editor, focused, protected, args.max_iters, run_dir, args.horizon, args.jobs, args.health, args.seed)
    for d in manifest["decisions"]:
        emit({"iteration": d["iteration"], "verdict": d["verdict"], "reason": d.get("reason"), "kb_hash_after": d["kb_hash_after"]})
    budget = edit_loop.record_budget(manifest)
    emit({"manifest": str(run_dir / "run.manifest.json"), "final_kb_hash": kb.hash, "stop": manifest["stop"], "budget": budget, "bank_seed": protected.seed})
    pretty(args, [budget], list(budget))
    return EXIT_OK


def cmd_ablate(args) -> int:
    kb = read_kb(args.kb)
    bank = resolve_bank(args.bank, args.seed)
    try:
        row = verifier.ablation_row(kb, bank, args.layer, args.variant, args.horizon, args.jobs)
    except verifier.UnknownVariant as exc:
        raise CliError(EXIT_VARIANT, "unknown_variant", str(exc)) from None
    rec = row.to_dict()
    emit(rec)
    flat = {k: (f"{v[0]}/{v[1]}" if isinstance(v, list) else v) for k, v in rec.items()}
    pretty(args, [flat], ["layer", "variant", "exec", "query", "plan", "effect_probe", "stress_probe"])
    return EXIT_OK


def cmd_budget(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, "io", str(exc)) from None
    row = edit_loop.record_budget(manifest)
    row["kb_hash"] = (manifest.get("final") or {}).get("kb_hash")
    row["bank_seed"] = ((manifest.get("banks") or {}).get("protected") or {}).get("seed")
    emit(row)
    pretty(args, [row], ["initial", "final", "proposals", "accepted", "apply_failed", "verifier_rejected", "eval_episodes", "result_only"])
    return EXIT_AUDIT if row["result_only"] else EXIT_OK


def _parse_mix(text: str) -> dict:
    mix = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        try:
            mix[name.strip()] = int(n)
        except ValueError:
            raise CliError(EXIT_IO, "usage", f"bad mix item {part!r}; expected family=count") from None
    return mix


def cmd_bank_gen(args) -> int:
    mix = _parse_mix(args.mix) if args.mix else dict(DESK_MIX)
    try:
        bank = generate_bank(args.seed, mix, name=args.name, horizon=args.horizon or 50)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, "usage", f"cannot generate bank: {exc}") from None
    save_bank(bank, args.out)
    emit({"bank": bank.name, "bank_seed": bank.seed, "size": len(bank), "mix": mix, "bank_digest": bank.digest, "out": args.out})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="typedkb", description="Typed knowledge-base policy engine.")
    p.add_argument("--pretty", action="store_true", help="also print a table on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, bank=True):
        sp.add_argument("--seed", type=int, default=default_seed(), help="desk-bank seed (env KINTSUGI_SEED)")
        sp.add_argument("--horizon", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1)
        if bank:
            sp.add_argument("--bank", default=None, help="bank file or named bank (desk, pick, light, process)")

    sp = sub.add_parser("kb-validate", help="parse and type-check a KB file")
    sp.add_argument("kb")
    sp.set_defaults(func=cmd_kb_validate)

    sp = sub.add_parser("kb-exec", help="run a KB on a bank")
    sp.add_argument("kb")
    common(sp)
    sp.add_argument("--out", default=None, help="directory for trajectories.jsonl and metrics.json")
    sp.set_defaults(func=cmd_kb_exec)

    sp = sub.add_parser("kb-trace", help="render (and audit) a decision trace")
    sp.add_argument("trajectories")
    sp.add_argument("--task", default=None)
    sp.add_argument("--step", type=int, default=None)
    sp.add_argument("--kb", default=None, help="KB to cross-check containment against")
    sp.set_defaults(func=cmd_kb_trace)

    sp = sub.add_parser("diff-apply", help="apply one KBDiff")
    sp.add_argument("kb")
    sp.add_argument("diff")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_diff_apply)

    sp = sub.add_parser("verify", help="gate a diff, or run the smoke gates")
    sp.add_argument("kb")
    common(sp)
    sp.add_argument("--diff", default=None)
    sp.add_argument("--focused", default=None)
    sp.add_argument("--protected", default=None)
    sp.add_argument("--health", action="store_true", help="enable the health branch of the gate")
    sp.add_argument("--smoke-apply", default=None, metavar="DIR")
    sp.add_argument("--smoke-exec", type=int, default=None, metavar="N")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("loop", help="run the edit loop")
    sp.add_argument("kb")
    common(sp, bank=False)
    sp.add_argument("--editor", default="null", help="null | scripted:DIR | external:CMD")
    sp.add_argument("--focused", default="desk")
    sp.add_argument("--protected", default="desk")
    sp.add_argument("--max-iters", type=int, default=3)
    sp.add_argument("--run-dir", default="run")
    sp.add_argument("--health", action="store_true")
    sp.set_defaults(func=cmd_loop)

    sp = sub.add_parser("ablate", help="one layer-ablation row")
    sp.add_argument("kb")
    common(sp)
    sp.add_argument("--layer", default=None, help="S0, L0..L7; omit for the full KB")
    sp.add_argument("--variant", default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("budget", help="budget row from a run manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_budget)

    sp = sub.add_parser("bank-gen", help="generate a task bank")
    sp.add_argument("--seed", type=int, default=default_seed())
    sp.add_argument("--mix", default=None, help="e.g. pick=10,light=6,clean=5,heat=5,cool=4")
    sp.add_argument("--name", default="desk")
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bank_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        emit(exc.record)
        return exc.code
    except verifier.ExecutableError as exc:
        emit({"error": "executable", "message": str(exc)})
        return EXIT_EXEC


if __name__ == "__main__":
    sys.exit(main())
