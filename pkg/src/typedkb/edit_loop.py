"""Training-time controller: evaluate, summarize, ask an editor for one typed
edit, route it through the applier and the gate, keep snapshots and ledgers."""

from __future__ import annotations

import hashlib
import json
import random
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .household_env import TaskBank, contract_digest
from .kb import KnowledgeBase, canonical_serialize, write_kb
from .kbdiff import SchemaError, apply_diff, diff_from_dict, try_apply
from .verifier import EvalCache, GateDecision, accept, evaluate_bank, persist_decision

SUMMARY_BYTES = 16384
SAMPLED_FAILURES = 5
EDITOR_TIMEOUT = 120.0

_editor_calls = 0


def editor_calls() -> int:
    """Number of editor proposals made in this process."""
    return _editor_calls


def reset_editor_calls() -> None:
    global _editor_calls
    _editor_calls = 0


class EditorProtocolError(ValueError):
    pass


@dataclass
class Proposal:
    attempt: int
    layer: str | None
    diff: dict | None
    editor_id: str
    note: str = ""

    @property
    def empty(self) -> bool:
        return self.diff is None


# ---------------------------------------------------------------- editors


class Editor:
    editor_id = "editor"

    def propose(self, summary: dict, contract: dict, kb_text: str, attempt: int = 0) -> Proposal:
        global _editor_calls
        _editor_calls += 1
        return self._propose(summary, contract, kb_text, attempt)

    def _propose(self, summary, contract, kb_text, attempt) -> Proposal:
        raise NotImplementedError


class NullEditor(Editor):
    editor_id = "null"

    def _propose(self, summary, contract, kb_text, attempt):
        return Proposal(attempt, None, None, self.editor_id, "no-proposal")


def _check_response(doc, attempt: int, editor_id: str) -> Proposal:
    if not isinstance(doc, dict):
        raise EditorProtocolError("editor response must be a mapping")
    if doc.get("no_proposal"):
        return Proposal(attempt, None, None, editor_id, str(doc.get("note", "no-proposal")))
    if "diffs" in doc:
        raise EditorProtocolError("one diff per iteration; batches are not accepted")
    diff = doc.get("diff", doc if "op" in doc else None)
    if not isinstance(diff, dict):
        raise EditorProtocolError("editor response carries neither a diff nor no_proposal")
    return Proposal(attempt, diff.get("layer"), diff, editor_id, str(doc.get("note", "")))


class ScriptedEditor(Editor):
    """Replays an ordered list of diff documents (or a directory of ``*.json`` files)."""

    def __init__(self, source):
        if isinstance(source, (str, Path)):
            self.editor_id = f"scripted:{Path(source).name}"
            self._items = [p for p in sorted(Path(source).iterdir()) if p.suffix in (".json", ".yaml", ".yml")]
        else:
            self.editor_id = "scripted"
            self._items = list(source)
        self._next = 0

    def _propose(self, summary, contract, kb_text, attempt):
        if self._next >= len(self._items):
            return Proposal(attempt, None, None, self.editor_id, "script exhausted")
        item = self._items[self._next]
        self._next += 1
        if isinstance(item, Path):
            text = item.read_text(encoding="utf-8")
            try:
                if item.suffix == ".json":
                    item = json.loads(text)
                else:
                    import yaml

                    item = yaml.safe_load(text)
            except ValueError as exc:
                raise EditorProtocolError(f"{self._items[self._next - 1].name}: {exc}") from exc
        return _check_response({"diff": item} if isinstance(item, dict) and "op" in item else item, attempt, self.editor_id)


def frame(doc) -> bytes:
    body = json.dumps(doc, sort_keys=True).encode()
    return b"Content-Length: %d\r\n\r\n" % len(body) + body


def unframe(data: bytes):
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        raise EditorProtocolError("response has no header terminator")
    length = None
    for line in head.split(b"\r\n"):
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            try:
                length = int(value.strip())
            except ValueError:
                raise EditorProtocolError("bad Content-Length") from None
    if length is None:
        raise EditorProtocolError("response has no Content-Length")
    if len(body) < length:
        raise EditorProtocolError("response body is shorter than Content-Length")
    try:
        return json.loads(body[:length])
    except ValueError as exc:
        raise EditorProtocolError(f"response body is not JSON: {exc}") from exc


class ExternalEditor(Editor):
    """One framed request/response exchange with a child process per proposal."""

    def __init__(self, command, timeout: float = EDITOR_TIMEOUT, allowed_ops=None):
        self.command = command if isinstance(command, list) else ["/bin/sh", "-c", command]
        self.timeout = timeout
        self.allowed_ops = list(allowed_ops or [])
        self.editor_id = f"external:{command if isinstance(command, str) else ' '.join(command)}"
        self.last_request_digest = None

    def request(self, summary, contract, kb_text) -> dict:
        return {"summary": summary, "contract": contract, "kb": kb_text, "allowed_ops": self.allowed_ops}

    def _propose(self, summary, contract, kb_text, attempt):
        payload = frame(self.request(summary, contract, kb_text))
        self.last_request_digest = hashlib.sha256(payload).hexdigest()
        try:
            proc = subprocess.run(self.command, input=payload, capture_output=True, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return Proposal(attempt, None, None, self.editor_id, f"timeout after {self.timeout}s")
        if proc.returncode != 0:
            raise EditorProtocolError(f"editor exited with status {proc.returncode}")
        return _check_response(unframe(proc.stdout), attempt, self.editor_id)


# ---------------------------------------------------------------- evidence


def _compact(r, k_steps: int = 5) -> dict:
    last = r.steps[-k_steps:]
    false_preds = sorted({name for s in last for name, val in s["trace"].get("predicates", []) if val is False})
    return {
        "task_id": r.task_id,
        "family": r.family,
        "goal": r.goal,
        "ended": r.ended,
        "success": r.success,
        "steps": r.step_count,
        "last_steps": [{"t": s["t"], "rule": s["trace"]["fired_rule"], "command": s["command"], "response": s["response"]} for s in last],
        "fired_rules": sorted({s["trace"]["fired_rule"] for s in r.steps if s["trace"]["fired_rule"]}),
        "false_predicates": false_preds,
    }


def summarize(records, k: int = SAMPLED_FAILURES, seed: int = 0, byte_budget: int = SUMMARY_BYTES) -> dict:
    """Compact evidence for the editor, derived only from trajectory records.

    Failure samples are drawn with a seeded RNG; one wasteful success (most
    steps) is kept as a partial. Samples are dropped from the end until the
    JSON fits ``byte_budget``.
    """
    records = list(records)
    fam: dict = {}
    hist: dict = {}
    for r in records:
        ok, n = fam.get(r.family, (0, 0))
        fam[r.family] = (ok + int(r.success), n + 1)
        for s in r.steps:
            rule = s["trace"]["fired_rule"] or "none"
            hist[rule] = hist.get(rule, 0) + 1
    fails = [r for r in records if not r.success]
    rng = random.Random(seed)
    sample = sorted(rng.sample(range(len(fails)), min(k, len(fails))))
    oks = [r for r in records if r.success]
    partial = max(oks, key=lambda r: (r.step_count, r.task_id)) if oks else None
    out = {
        "episodes": len(records),
        "successes": len(oks),
        "families": {f: {"success": a, "total": b} for f, (a, b) in sorted(fam.items())},
        "fired_rules": dict(sorted(hist.items())),
        "admissible_misses": sum(r.invalid_action_count for r in records),
        "recoveries": sum(r.recovery_count for r in records),
        "failures": [_compact(fails[i]) for i in sample],
        "partials": [_compact(partial)] if partial is not None else [],
    }
    while len(json.dumps(out, sort_keys=True).encode()) > byte_budget and (out["failures"] or out["partials"]):
        (out["partials"] if out["partials"] else out["failures"]).pop()
    return out


# ---------------------------------------------------------------- loop


def _bank_info(bank: TaskBank) -> dict:
    return {"name": bank.name, "seed": bank.seed, "size": len(bank), "digest": bank.digest}


def _experience_diff(kb: KnowledgeBase, diff_doc: dict, decision: GateDecision, traj: list) -> dict:
    n = len(kb.of_type("experience")) + 1
    evid = f"exp-{n:03d}"
    m = lambda b: f"{b.successes}/{b.total}"  # noqa: E731
    return {
        "layer": "L6",
        "key": evid,
        "op": "append_experience",
        "path": "experience",
        "payload": {
            "experience": {
                "evidence_id": evid,
                "trajectories": traj,
                "hypothesis": {"layer": diff_doc.get("layer"), "key": diff_doc.get("key"), "op": diff_doc.get("op")},
                "focused": {"before": m(decision.focus_before), "after": m(decision.focus_after)},
                "protected": {"before": m(decision.protect_before), "after": m(decision.protect_after)},
                "status": "kept",
            }
        },
        "evidence": list(diff_doc.get("evidence") or []) or [evid],
        "metric": decision.focused,
        "regression_set": decision.protected,
        "rationale": f"Record the kept edit {diff_doc.get('op')} {diff_doc.get('key')}.",
        "expected_effect": "No policy change; the experience layer gains one audit record.",
    }


def commit(kb: KnowledgeBase, candidate: KnowledgeBase, diff_doc: dict, decision: GateDecision, traj: list) -> KnowledgeBase:
    """Advance the version and append the kept edit's experience record."""
    with_exp, _ = apply_diff(candidate, diff_from_dict(_experience_diff(candidate, diff_doc, decision, traj)))
    return with_exp.replace(version=kb.version + 1)


@dataclass
class LoopResult:
    kb: KnowledgeBase
    manifest: dict
    decisions: list = field(default_factory=list)


def run_loop(
    kb0: KnowledgeBase,
    editor: Editor,
    focused: TaskBank,
    protected: TaskBank,
    max_iters: int = 3,
    run_dir=None,
    horizon: int | None = None,
    jobs: int = 1,
    health_declared: bool = False,
    seed: int = 0,
) -> tuple[KnowledgeBase, dict]:
    """Edit loop. Returns the final KB and the run manifest; writes the run
    directory (snapshots, gate ledger, trajectories, budget, manifest) when
    ``run_dir`` is given."""
    root = Path(run_dir) if run_dir is not None else None
    cache = EvalCache(jobs)
    contract = kb0.contract or {}
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "contract.json").write_text(json.dumps(contract, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        write_kb(kb0, root / f"kb.v{kb0.version}.json")

    ledger: list = []
    requests: list = []
    budget = {"attempts": 0, "accepted": 0, "apply_failed": 0, "verifier_rejected": 0}
    kb = kb0
    initial = evaluate_bank(kb, protected, horizon, cache=cache)
    initial_focus = evaluate_bank(kb, focused, horizon, cache=cache)
    stop = "max_iters"
    iterations = 0

    for it in range(max_iters):
        fm = evaluate_bank(kb, focused, horizon, cache=cache)
        if fm.successes == fm.total:
            stop = "focused_ceiling"
            break
        summary = summarize(fm.records, seed=seed + it)
        kb_text = canonical_serialize(kb)
        requests.append(hashlib.sha256(json.dumps({"summary": summary, "contract": contract, "kb": kb_text}, sort_keys=True).encode()).hexdigest())
        pre_hash = kb.hash
        try:
            proposal = editor.propose(summary, contract, kb_text, it)
        except EditorProtocolError as exc:
            iterations += 1
            budget["attempts"] += 1
            budget["apply_failed"] += 1
            ledger.append({"iteration": it, "verdict": "apply_failed", "stage": "protocol", "reason": str(exc), "diff": None, "kb_hash_before": pre_hash, "kb_hash_after": kb.hash})
            continue
        if proposal.empty:
            stop = "no_proposal"
            break
        iterations += 1
        budget["attempts"] += 1
        try:
            candidate, audit = try_apply(kb, proposal.diff)
        except SchemaError as exc:  # pragma: no cover - try_apply reports schema errors in the audit
            candidate, audit = None, None
            reason = str(exc)
        else:
            reason = audit.reason
        if candidate is None:
            budget["apply_failed"] += 1
            ledger.append(
                {
                    "iteration": it,
                    "verdict": "apply_failed",
                    "stage": audit.stage if audit else "schema",
                    "reason": reason,
                    "diff": proposal.diff,
                    "audit": audit.to_dict() if audit else None,
                    "kb_hash_before": pre_hash,
                    "kb_hash_after": kb.hash,
                }
            )
            continue
        decision = accept(kb, candidate, focused, protected, health_declared, horizon, cache)
        if root is not None:
            persist_decision(decision, root)
        rec = decision.to_dict()
        rec.update({"iteration": it, "diff": proposal.diff, "audit": audit.to_dict(), "kb_hash_before": pre_hash})
        if decision.verdict == "kept":
            budget["accepted"] += 1
            kb = commit(kb, candidate, proposal.diff, decision, sorted(set(decision.trajectories.values())) or ["unpersisted"])
            if root is not None:
                write_kb(kb, root / f"kb.v{kb.version}.json")
        else:
            budget["verifier_rejected"] += 1
            snap = root / f"kb.v{kb.version}.json" if root is not None else None
            if snap is not None and hashlib.sha256(snap.read_bytes()).hexdigest() != pre_hash:
                raise RuntimeError("snapshot hash mismatch on rollback")
        rec["kb_hash_after"] = kb.hash
        rec["version_after"] = kb.version
        ledger.append(rec)

    final = evaluate_bank(kb, protected, horizon, cache=cache)
    final_focus = evaluate_bank(kb, focused, horizon, cache=cache)
    budget["eval_episodes"] = cache.episodes
    manifest = {
        "contract_hash": contract_digest(contract) if contract else None,
        "editor": editor.editor_id,
        "banks": {"focused": _bank_info(focused), "protected": _bank_info(protected)},
        "initial": {"kb_hash": kb0.hash, "version": kb0.version, "protected": initial.to_dict(), "focused": initial_focus.to_dict(), "families": initial.by_family()},
        "final": {"kb_hash": kb.hash, "version": kb.version, "protected": final.to_dict(), "focused": final_focus.to_dict(), "families": final.by_family()},
        "iterations": iterations,
        "stop": stop,
        "decisions": ledger,
        "budget": budget,
        "request_digests": requests,
        "result_only": len(ledger) != budget["attempts"],
    }
    if root is not None:
        with open(root / "run.gates.jsonl", "w", encoding="utf-8") as fh:
            for rec in ledger:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (root / "run.budget.json").write_text(json.dumps(record_budget(manifest), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        (root / "run.manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return kb, manifest


def record_budget(manifest: dict) -> dict:
    """Budget table row recomputed from the gate records in ``manifest``."""
    decisions = manifest.get("decisions") or []
    counts = {"kept": 0, "reverted": 0, "apply_failed": 0}
    incomplete = False
    for d in decisions:
        v = d.get("verdict")
        if v not in counts:
            incomplete = True
            continue
        counts[v] += 1
    attempts = (manifest.get("budget") or {}).get("attempts", len(decisions))
    incomplete = incomplete or len(decisions) != attempts or bool(manifest.get("result_only"))

    def frac(section):
        p = ((manifest.get(section) or {}).get("protected")) or {}
        return f"{p.get('successes', 0)}/{p.get('total', 0)}"

    return {
        "initial": frac("initial"),
        "final": frac("final"),
        "proposals": attempts,
        "accepted": counts["kept"],
        "apply_failed": counts["apply_failed"],
        "verifier_rejected": counts["reverted"],
        "eval_episodes": (manifest.get("budget") or {}).get("eval_episodes", 0),
        "result_only": incomplete,
    }
