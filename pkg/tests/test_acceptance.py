"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

from __future__ import annotations

import itertools
import random
import time

import pytest

from scifc import labels as L
from scifc.ast import BoolV, IntV, LocV
from scifc.harness import cda_sweep, fastpath_differential, run_scenario, standard_world
from scifc.interpreter import run_transaction
from scifc.library import corpus_decls, load_corpus
from scifc.parser import build_table, parse_program
from scifc.progen import MAX_NODES, ast_size, generate_well_typed, soundness_run
from scifc.state import ChainState
from scifc.typechecker import check_program

from support import (atomic_program, eval_tree, golden, label_trees, model_outcome, models,
                     mutant_diagnostics, random_block, replay, scenarios_by_name, token_balance,
                     tree_oracle)

LATTICE_BUDGET_S = 60.0
SWEEP_BUDGET_S = 300.0
SWEEP_ATTACKERS = 1000
SOUNDNESS_PROGRAMS = 100
ROLLBACK_CASES = 1000


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_c1_flows_to_matches_oracle(report):
    names = ("A", "B", "C")
    start = time.monotonic()
    shallow = label_trees(names, 2)
    valuations = models(names, ())

    def table(l):
        return tuple(eval_tree(l, v) for v in valuations)

    # one deepest representative per semantic class of depth <= 3
    reps: dict = {}
    for t in shallow:
        reps.setdefault(table(t), t)
    for a, b in itertools.product(list(reps.values()), repeat=2):
        for op in (L.Join, L.Meet):
            t = op(a, b)
            reps[table(t)] = t if table(t) not in reps or ast_depth(t) >= 3 else reps[table(t)]
    deep = list(reps.values())
    # every tree of depth <= 2 and every depth-3 combination of class representatives
    deep3 = [op(a, b) for a in deep for b in deep for op in (L.Join, L.Meet)]
    edges = [(a, b) for a in names for b in names if a != b]
    trusts = [frozenset(c) for k in range(5) for c in itertools.combinations(edges, k)]
    mismatches = checks = 0
    for t in shallow + deep3:
        for r in deep:
            for l1, l2 in ((t, r), (r, t)):
                checks += 1
                got = L.flows_to(l1, l2)
                mismatches += (got != tree_oracle(l1, l2, (), names)
                               or got != L.oracle_flows_to(l1, l2))
    for l1, l2 in itertools.product(deep, repeat=2):
        for tr in trusts:
            checks += 1
            got = L.flows_to(l1, l2, tr)
            mismatches += (got != tree_oracle(l1, l2, tr, names)
                           or got != L.oracle_flows_to(l1, l2, tr))
    elapsed = time.monotonic() - start
    ok = mismatches == 0 and elapsed < LATTICE_BUDGET_S
    report(1, ok, f"{checks} queries, {len(deep)} label classes, {len(trusts)} trust sets, "
                  f"{mismatches} mismatches, {elapsed:.1f}s (limit {LATTICE_BUDGET_S:.0f}s)")


def ast_depth(l) -> int:
    if isinstance(l, (L.Join, L.Meet)):
        return 1 + max(ast_depth(l.left), ast_depth(l.right))
    return 0


CASE_STUDIES = {
    "Uniswap": ("token", "uniswap"),
    "Dexible": ("token", "uniswap", "dexible"),
    "Parity": ("parity",),
    "KoET": ("token", "koet"),
    "TownCrier": ("token", "towncrier"),
}


def test_c2_case_studies_typecheck(report):
    counts = {name: len(check_program(build_table(corpus_decls(files))))
              for name, files in CASE_STUDIES.items()}
    counts["full corpus"] = len(check_program(load_corpus()))
    ok = not any(counts.values())
    report(2, ok, ", ".join(f"{k}: {v} diagnostics" for k, v in counts.items()))


def test_c3_mutants_rejected_as_golden(report):
    expected = golden("mutants.json")
    got = {}
    for name, spec in expected.items():
        diags = mutant_diagnostics(spec)
        d = diags[0] if diags else None
        got[name] = None if d is None else (d.rule, d.pos.line, d.pos.col)
    want = {k: (v["rule"], v["line"], v["col"]) for k, v in expected.items()}
    ok = got == want
    report(3, ok, "; ".join(f"{k}: {got[k]} (golden {want[k]})" for k in want))


def test_c4_attack_scenarios(report):
    scs = scenarios_by_name()
    notes, ok = [], True

    # (a) disguised exchange: dispatch refuses, nothing changes; honest swap commits
    (_, pre, r, post), (_, _, honest, _) = replay(scs["dexible_confused_deputy"])
    a = (r.reason == "DispatchMismatch" and pre.fingerprint() == post.fingerprint()
         and pre.heap == post.heap and honest.outcome == "Committed")
    notes.append(f"(a) {r.reason}, heap unchanged={pre.heap == post.heap}, honest={honest.outcome}")

    # (b) failing compensation send reverts byte-for-byte
    [(_, pre, r, post)] = replay(scs["koet_failing_send"])
    b = r.outcome == "Reverted" and pre.fingerprint() == post.fingerprint()
    notes.append(f"(b) {r.outcome}, identical={pre.fingerprint() == post.fingerprint()}")

    # (c) failing callback: fee kept, delivered, callback writes gone
    (_, pre, r, post), *_ = replay(scs["towncrier_failing_callback"])
    fee = token_balance(post, "@tok", "@sgx") - token_balance(pre, "@tok", "@sgx")
    delivered = post.account("@tc").fields["delivered"].get(1) == BoolV(True)
    got = post.account("@flaky").fields["got"]
    c = r.outcome == "Committed" and fee == 5 and delivered and got == IntV(0)
    notes.append(f"(c) {r.outcome}, fee {fee}, delivered={delivered}, callback effect {got.value}")

    # (d) reentrant swap stopped at the lock-bypass gate, pool product preserved
    (_, pre, r, post), _ = replay(scs["uniswap_reentrancy"])

    def product(st):
        return token_balance(st, "@tok", "@uni") * token_balance(st, "@tok2", "@uni")

    d = r.reason == "LockBypassDenied" and product(pre) == product(post)
    gate = [e for e in r.trace if e.get("ev") == "fail"]
    d = d and gate and gate[0].get("target") == "@uni"
    notes.append(f"(d) {r.reason} at {gate[0].get('target') if gate else None}, "
                 f"product {product(pre)} -> {product(post)}")

    for name in ("dexible_confused_deputy", "koet_failing_send",
                 "towncrier_failing_callback", "uniswap_reentrancy"):
        rep = run_scenario(scs[name])
        ok &= rep.passed
    ok = bool(ok and a and b and c and d)
    report(4, ok, "; ".join(notes))


def test_c5_cda_sweep(report):
    start = time.monotonic()
    sweep = cda_sweep(SWEEP_ATTACKERS)
    elapsed = time.monotonic() - start
    unsafe = run_scenario(scenarios_by_name()["dexible_confused_deputy"], unsafe_no_sigcheck=True)
    unsafe_events = sum(int(n.rsplit(":", 1)[1]) for n in unsafe.notes
                        if n.startswith("cda events at @dexible"))
    ok = (sweep.seeds == SWEEP_ATTACKERS and not sweep.events and unsafe_events >= 1
          and elapsed < SWEEP_BUDGET_S)
    report(5, ok, f"{sweep.seeds} attackers, {sweep.transactions} transactions, "
                  f"{len(sweep.events)} CDA events, {elapsed:.1f}s (limit {SWEEP_BUDGET_S:.0f}s); "
                  f"unsafe Dexible: {unsafe_events} events")


def test_c6_soundness_smoke(report):
    progs = generate_well_typed(SOUNDNESS_PROGRAMS)
    sizes_ok = all(ast_size(m.body) <= MAX_NODES for p in progs
                   for m in p.table[p.contract].methods)
    results = soundness_run(progs)
    bad = [r for r in results if r.problems]
    terminal = all(r.outcome in ("Committed", "Reverted", "UncaughtException") for r in results)
    ok = len(progs) >= SOUNDNESS_PROGRAMS and sizes_ok and terminal and not bad
    report(6, ok, f"{len(progs)} programs (<= {MAX_NODES} nodes per method: {sizes_ok}), "
                  f"{len(results)} typed-step runs, {len(bad)} with problems"
                  + (f"; first: {bad[0]}" if bad else ""))


def _mutate(st, rng: random.Random):
    """One random change to fields, mappings, trust stores, the heap or the account set."""
    contracts = sorted(a for a, acct in st.accounts.items() if acct.contract is not None)
    addr = rng.choice(contracts)
    fields = st.account(addr).fields
    kind = rng.randrange(5)
    if kind == 0:
        ints = [k for k, v in fields.items() if isinstance(v, IntV)]
        if ints:
            fields[rng.choice(ints)] = IntV(rng.randrange(10**6))
    elif kind == 1:
        maps = [k for k, v in fields.items() if isinstance(v, dict)]
        if maps:
            m = fields[rng.choice(maps)]
            if m and rng.random() < 0.3:
                m.pop(rng.choice(sorted(m, key=str)))
            else:
                m[rng.choice(sorted(st.accounts))] = IntV(rng.randrange(1000))
    elif kind == 2:
        st.account(addr).trusts.add(rng.choice(sorted(st.accounts)))
    elif kind == 3:
        if st.heap and rng.random() < 0.5:
            st.heap[rng.choice(sorted(st.heap))] = IntV(rng.randrange(100))
        else:
            st.heap[st.next_loc] = LocV(st.next_loc - 1) if st.next_loc else IntV(1)
            st.next_loc += 1
    else:
        st.add_user(f"@u{st.next_addr}")
        st.next_addr += 1


def test_c7_snapshot_rollback(report):
    rng = random.Random(7)
    base = standard_world(load_corpus())
    failures = nested = 0
    for case in range(ROLLBACK_CASES):
        st = base.copy()
        for _ in range(rng.randrange(3)):
            _mutate(st, rng)  # start from varied states
        stack = []
        max_depth = 0
        for _ in range(rng.randint(1, 12)):
            op = rng.random()
            if op < 0.35 or not stack:
                stack.append((st.snapshot(), st.fingerprint(), dict(st.heap)))
                max_depth = max(max_depth, len(stack))
            elif op < 0.75:
                _mutate(st, rng)
            else:
                snap, fp, heap = stack.pop()
                st.restore(snap)
                failures += st.fingerprint() != fp or st.heap != heap
        while stack:
            snap, fp, heap = stack.pop()
            _mutate(st, rng)
            st.restore(snap)
            failures += st.fingerprint() != fp or st.heap != heap
        nested += max_depth > 1

    # the same through the interpreter: random nested atomic/rescue blocks against a dict model
    tx_failures = tx_nested = 0
    for case in range(ROLLBACK_CASES):
        block = random_block(rng, 0)
        ct = parse_program(atomic_program(block))
        st = ChainState(ct)
        st.add_user("@alice")
        st.deploy("Nest", "@n")
        expected = st.copy()
        outcome, store = model_outcome(block)
        for f, v in store.items():
            expected.account("@n").fields[f] = IntV(v)
        r = run_transaction(st, "@alice", "@n", "go", [])
        tx_failures += r.outcome != outcome or st.fingerprint() != expected.fingerprint()
        tx_nested += sum(1 for ev in r.trace if ev.get("ev") == "rollback" and not ev.get("top")) > 0
    ok = failures == 0 and nested > 0 and tx_failures == 0 and tx_nested > 0
    report(7, ok, f"{ROLLBACK_CASES} state cases ({nested} nested), {failures} restores differed; "
                  f"{ROLLBACK_CASES} atomic-block transactions ({tx_nested} with inner rollbacks), "
                  f"{tx_failures} differed from the model")


def test_c8_fastpath_equivalence(report):
    scs = [s for s in scenarios_by_name().values() if s.well_typed]
    diffs = {s.name: fastpath_differential(s) for s in scs}
    bad = {k: v for k, v in diffs.items() if v}
    ok = bool(scs) and not bad
    report(8, ok, f"{len(scs)} well-typed scenarios compared with the fast path on and off, "
                  f"{len(bad)} differ" + (f": {bad}" if bad else ""))
