import pytest

from scifc.harness import (MUTATIONS, HarnessError, attacker_source, cda_sweep, mutate_corpus,
                           parse_call, read_path, run_scenario, run_scenarios, standard_world,
                           victims_of)
from scifc.library import corpus_decls, load_corpus
from scifc.parser import parse_program
from scifc.typechecker import check_program

from support import scenarios_by_name

SCENARIOS = sorted(scenarios_by_name())


@pytest.mark.parametrize("name", SCENARIOS)
@pytest.mark.parametrize("mode", ["default", "typed_step", "no_fastpath", "unsafe"])
def test_scenario_passes(name, mode):
    opts = {"default": {}, "typed_step": {"typed_step": True},
            "no_fastpath": {"fastpath": False}, "unsafe": {"unsafe_no_sigcheck": True}}[mode]
    rep = run_scenario(scenarios_by_name()[name], **opts)
    assert rep.passed, rep.problems


def test_parallel_run_matches_serial():
    scs = list(scenarios_by_name().values())
    serial = [r.to_record() for r in run_scenarios(scs)]
    parallel = [r.to_record() for r in run_scenarios(scs, jobs=2)]
    assert serial == parallel


def test_suite_is_deterministic():
    scs = list(scenarios_by_name().values())
    assert ([r.to_record() for r in run_scenarios(scs)]
            == [r.to_record() for r in run_scenarios(scs)])


def test_unsafe_sweep_finds_events():
    rep = cda_sweep(40, unsafe_no_sigcheck=True)
    assert rep.events
    assert all(v == "@dexible" for _, v, _ in rep.events)


def test_small_safe_sweep_is_clean():
    rep = cda_sweep(30, start=500)
    assert rep.ok and rep.transactions >= 120


def test_attackers_parse_and_vary():
    ct = load_corpus()
    w = standard_world(ct)
    targets = [(a, w.accounts[a].contract) for a in victims_of(w, ct)]
    srcs = {attacker_source(seed, ct, targets) for seed in range(10)}
    assert len(srcs) == 10
    for s in srcs:
        parse_program(s)
    assert attacker_source(3, ct, targets) == attacker_source(3, ct, targets)


def test_identity_mutation_keeps_corpus_well_typed():
    [uni] = [d for d in corpus_decls() if d.name == "Uniswap"]
    assert mutate_corpus(uni, "identity") is uni


def test_unknown_mutation_rejected():
    [uni] = [d for d in corpus_decls() if d.name == "Uniswap"]
    with pytest.raises(HarnessError):
        mutate_corpus(uni, "delete_everything")
    with pytest.raises(HarnessError):
        mutate_corpus(uni, "remove_lock", method="nope")
    assert "swallow_failure" in MUTATIONS


@pytest.mark.parametrize("text,expected", [
    ("@koet.claimThrone(20)", ("@koet", "claimThrone", [20])),
    ("@d.swap(@alice, @router, 10)", ("@d", "swap", ["@alice", "@router", 10])),
    ("@t.registerHook(true)", ("@t", "registerHook", [True])),
    ("@t.f()", ("@t", "f", [])),
])
def test_parse_call(text, expected):
    assert parse_call(text) == expected


@pytest.mark.parametrize("bad", ["koet.claim(1)", "@k.claim(1", "@k.claim(x y)", "@k.claim(-1)"])
def test_parse_call_rejects(bad):
    with pytest.raises(HarnessError):
        parse_call(bad)


def test_read_path():
    w = standard_world(load_corpus())
    assert read_path(w, "@koet.king") == "@bob"
    assert read_path(w, "@tok.balances[@nobody]") == 0
    with pytest.raises(HarnessError):
        read_path(w, "@koet.nope")


@pytest.mark.parametrize("name", ["uniswap-minus-lock", "public-initOwner", "hodl-late-counter"])
def test_mutants_survive_printing(name):
    from scifc.printer import program_src
    from support import golden
    spec = golden("mutants.json")[name]
    decls = [mutate_corpus(d, spec["mutation"], spec["method"]) if d.name == spec["contract"]
             else d for d in corpus_decls()]
    diags = check_program(parse_program(program_src(decls)))
    assert diags and diags[0].rule == spec["rule"]
