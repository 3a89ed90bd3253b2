import json

import pytest
from hypothesis import given, settings, strategies as st

from scifc.ast import BoolV, IntV
from scifc.harness import HONEST, call_args, standard_world
from scifc.interpreter import BUDGET, run_transaction
from scifc.library import load_corpus
from scifc.parser import parse_program
from scifc.state import ChainState, StateError

COUNTER = """
contract Counter {
    exception Big(uint{this} n);
    uint{this} n;
    uint{this} log;

    @public uint{this} bump{sender -> this}(uint by) {
        uint{this} b = endorse(by, sender -> this);
        n = n + b;
        return n;
    }
    @public void risky{sender -> this}(uint by) throws (Big{this}) {
        uint{this} b = endorse(by, sender -> this);
        n = n + b;
        if (5 < b) {
            throw Big(b);
        }
    }
    @public void guarded{sender -> this}(uint by) {
        uint{this} b = endorse(by, sender -> this);
        log = 1;
        atomic {
            n = n + b;
            assert b < 5;
        } rescue {
            log = 2;
        }
    }
    @public void spin{any}() {
        this.spin();
    }
}
"""


@pytest.fixture
def counter():
    ct = parse_program(COUNTER)
    st_ = ChainState(ct)
    st_.add_user("@alice")
    st_.deploy("Counter", "@c")
    return st_


def field(st_, name):
    return st_.account("@c").fields[name]


def test_commit_returns_value(counter):
    r = run_transaction(counter, "@alice", "@c", "bump", [IntV(3)])
    assert r.outcome == "Committed" and r.value == IntV(3)
    assert field(counter, "n") == IntV(3)


def test_uncaught_exception_keeps_state_changes(counter):
    r = run_transaction(counter, "@alice", "@c", "risky", [IntV(9)])
    assert r.outcome == "UncaughtException" and r.value.name.endswith("Big")
    assert field(counter, "n") == IntV(9)


def test_atomic_rescue_discards_body_effects(counter):
    r = run_transaction(counter, "@alice", "@c", "guarded", [IntV(7)])
    assert r.outcome == "Committed"
    assert field(counter, "n") == IntV(0) and field(counter, "log") == IntV(2)
    r = run_transaction(counter, "@alice", "@c", "guarded", [IntV(2)])
    assert field(counter, "n") == IntV(2) and field(counter, "log") == IntV(1)


def test_underflow_reverts(counter):
    src = COUNTER.replace("n = n + b;\n        return n;", "n = n - b;\n        return n;")
    st_ = ChainState(parse_program(src))
    st_.add_user("@alice")
    st_.deploy("Counter", "@c")
    r = run_transaction(st_, "@alice", "@c", "bump", [IntV(1)])
    assert r.outcome == "Reverted"


def test_budget_exhaustion_reverts(counter):
    before = counter.fingerprint()
    r = run_transaction(counter, "@alice", "@c", "spin", [], budget=500)
    assert r.outcome == "Reverted" and r.reason == BUDGET
    assert counter.fingerprint() == before


def test_origin_must_be_user(counter):
    with pytest.raises(StateError):
        run_transaction(counter, "@c", "@c", "bump", [IntV(1)])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["bump", "risky", "guarded"]),
                          st.integers(0, 9)), max_size=6))
def test_runs_are_deterministic(calls):
    def go():
        s = ChainState(parse_program(COUNTER))
        s.add_user("@alice")
        s.deploy("Counter", "@c")
        out = [run_transaction(s, "@alice", "@c", m, [IntV(v)]).comparable() for m, v in calls]
        return out, s.fingerprint()
    assert go() == go()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["bump", "risky", "guarded"]),
                          st.integers(0, 9)), max_size=6))
def test_fastpath_does_not_change_receipts(calls):
    def go(fp):
        s = ChainState(parse_program(COUNTER))
        s.add_user("@alice")
        s.deploy("Counter", "@c")
        return [run_transaction(s, "@alice", "@c", m, [IntV(v)], fastpath=fp).comparable()
                for m, v in calls]
    assert go(True) == go(False)


def test_honest_traffic_passes_typed_step():
    ct = load_corpus()
    w = standard_world(ct)
    for origin, recv, m, raw in HONEST:
        r = run_transaction(w, origin, recv, m, call_args(ct, w, recv, m, raw), typed_step=True)
        assert r.outcome == "Committed", (m, r.to_record())
        assert not r.typed_step_errors


def test_state_save_load_round_trip(tmp_path):
    ct = load_corpus()
    w = standard_world(ct)
    run_transaction(w, "@alice", "@koet", "claimThrone", [IntV(20)])
    p = tmp_path / "state.json"
    w.save(str(p))
    again = ChainState.load(str(p))
    assert again.fingerprint() == w.fingerprint()
    assert json.loads(p.read_text())["version"] == 1


def test_state_rejects_bad_version():
    with pytest.raises(StateError):
        ChainState.from_dict({"version": 99})


def test_state_rejects_bad_field_value():
    ct = parse_program(COUNTER)
    s = ChainState(ct)
    with pytest.raises(StateError):
        s.deploy("Counter", "@c", init={"n": -1})
    with pytest.raises(StateError):
        s.deploy("Counter", "@d", init={"missing": 1})


def test_caller_gate_on_unsigned_principal():
    ct = load_corpus()
    w = standard_world(ct)
    before = w.fingerprint()
    r = run_transaction(w, "@mallory", "@tc", "deliver", [IntV(1), IntV(3)])
    assert r.reason == "CallerGate" and w.fingerprint() == before


def test_bool_args_accepted(counter):
    st_ = standard_world(load_corpus())
    r = run_transaction(st_, "@mallory", "@tok", "registerHook", [BoolV(True)])
    assert r.outcome == "Committed"
