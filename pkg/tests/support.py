"""Shared fixtures-as-functions and independent oracles for the test suite."""

from __future__ import annotations

import itertools
import json
from pathlib import Path

from scifc import labels as L
from scifc.harness import load_scenarios, mutate_corpus
from scifc.library import CORPUS, corpus_decls
from scifc.parser import build_table
from scifc.typechecker import check_program

ROOT = Path(__file__).resolve().parents[1]
SCENARIO_DIR = ROOT / "scenarios"
GOLDEN = Path(__file__).resolve().parent / "golden"


def scenarios_by_name() -> dict:
    return {s.name: s for s in load_scenarios(SCENARIO_DIR)}


def golden(name: str):
    return json.loads((GOLDEN / name).read_text())


def mutant_diagnostics(spec: dict) -> list:
    decls = [mutate_corpus(d, spec["mutation"], spec["method"]) if d.name == spec["contract"] else d
             for d in corpus_decls(CORPUS)]
    return check_program(build_table(decls))


# -- label oracle -------------------------------------------------------------------------------
# Evaluates label trees directly as monotone formulas, with no normal form in between.

def eval_tree(l: L.Label, true_atoms: frozenset) -> bool:
    if isinstance(l, L.Atom):
        return l.id in true_atoms
    if isinstance(l, L.Any):
        return True
    if isinstance(l, L.Bot):
        return False
    if isinstance(l, L.Join):
        return eval_tree(l.left, true_atoms) or eval_tree(l.right, true_atoms)
    if isinstance(l, L.Meet):
        return eval_tree(l.left, true_atoms) and eval_tree(l.right, true_atoms)
    raise TypeError(l)


def models(names, trust) -> list:
    """Valuations closed under each hypothesis a=>b (a true forces b true)."""
    out = []
    for bits in itertools.product((False, True), repeat=len(names)):
        true_atoms = frozenset(n for n, b in zip(names, bits) if b)
        if all(a not in true_atoms or b in true_atoms for a, b in trust):
            out.append(true_atoms)
    return out


def tree_oracle(l1, l2, trust, names) -> bool:
    return all(eval_tree(l2, m) for m in models(names, trust) if eval_tree(l1, m))


def label_trees(names, depth: int) -> list:
    """Every label tree over ``names`` and ``any`` of at most ``depth`` operator levels."""
    level = [L.Atom(n) for n in names] + [L.ANY]
    for _ in range(depth):
        level = level + [op(a, b) for a in level for b in level for op in (L.Join, L.Meet)]
        # drop exact duplicates, keeping order deterministic
        level = list(dict.fromkeys(level))
    return level


def replay(sc, **opts) -> list:
    """(transaction, state before, receipt, state after) for each non-setup transaction."""
    from scifc.harness import call_args, parse_call, scenario_state, scenario_table
    from scifc.interpreter import run_transaction

    ct = scenario_table(sc)
    st = scenario_state(sc, ct)
    out = []
    setup = sc.data.get("setup", [])
    for i, tx in enumerate(setup + sc.data["transactions"]):
        recv, method, raw = parse_call(tx["call"])
        pre = st.copy()
        r = run_transaction(st, tx["origin"], recv, method, call_args(ct, st, recv, method, raw),
                            **opts)
        if i >= len(setup):
            out.append((tx, pre, r, st.copy()))
    return out


def token_balance(st, tok: str, who: str) -> int:
    v = st.account(tok).fields["balances"].get(who)
    return 0 if v is None else v.value


# -- nested atomic blocks against a dictionary model ----------------------------------------------

ATOMIC_FIELDS = ("a", "b", "c", "d")


def random_block(rng, depth: int) -> list:
    items = []
    for _ in range(rng.randint(0, 3)):
        if depth < 3 and rng.random() < 0.35:
            items.append(("atomic", random_block(rng, depth + 1), random_block(rng, depth + 1)))
        else:
            items.append(("w", rng.choice(ATOMIC_FIELDS), rng.randrange(100)))
    if rng.random() < 0.4:
        items.append(("fail",))
    return items


class _Failed(Exception):
    pass


def model_run(block, store: dict):
    for it in block:
        if it[0] == "w":
            store[it[1]] = it[2]
        elif it[0] == "fail":
            raise _Failed
        else:
            saved = dict(store)
            try:
                model_run(it[1], store)
            except _Failed:
                store.clear()
                store.update(saved)
                model_run(it[2], store)


def model_outcome(block) -> tuple:
    store = {f: 0 for f in ATOMIC_FIELDS}
    try:
        model_run(block, store)
    except _Failed:
        return "Reverted", {f: 0 for f in ATOMIC_FIELDS}
    return "Committed", store


def block_src(block, indent: int) -> list:
    pad = "    " * indent
    out = []
    for it in block:
        if it[0] == "w":
            out.append(f"{pad}{it[1]} = {it[2]};")
        elif it[0] == "fail":
            out.append(f"{pad}fail;")
        else:
            out.append(f"{pad}atomic {{")
            out += block_src(it[1], indent + 1)
            out.append(f"{pad}}} rescue {{")
            out += block_src(it[2], indent + 1)
            out.append(f"{pad}}}")
    return out


def atomic_program(block) -> str:
    lines = ["contract Nest {"] + [f"    uint{{this}} {f};" for f in ATOMIC_FIELDS]
    lines.append("    @public void go{sender -> this}() {")
    lines += block_src(block, 2)
    lines += ["    }", "}"]
    return "\n".join(lines) + "\n"
