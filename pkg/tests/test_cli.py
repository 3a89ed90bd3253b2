import json
import subprocess
import sys

import pytest

from scifc.cli import EXIT_USAGE, main, parse_query
from scifc.harness import mutate_corpus, standard_world
from scifc.library import CORPUS, corpus_decls, corpus_source, load_corpus
from scifc.printer import program_src

from support import SCENARIO_DIR


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def records(out):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture
def corpus_files(tmp_path):
    paths = []
    for n in CORPUS:
        p = tmp_path / f"{n}.scifc"
        p.write_text(corpus_source(n))
        paths.append(str(p))
    return paths


def test_check_corpus_ok(capsys, corpus_files):
    code, out, _ = run(capsys, "check", *corpus_files)
    assert code == 0 and "no diagnostics" in out


def test_check_empty_list(capsys):
    assert run(capsys, "check")[0] == 0


def test_check_mutated_uniswap(capsys, tmp_path):
    decls = [mutate_corpus(d, "remove_lock") if d.name == "Uniswap" else d
             for d in corpus_decls(("token", "uniswap"))]
    p = tmp_path / "uniswap_mutant.scifc"
    p.write_text(program_src(decls))
    code, out, _ = run(capsys, "check", "--format", "machine", str(p))
    recs = records(out)
    assert code == 1
    assert recs[0]["kind"] == "diagnostic" and recs[0]["rule"] == "Call"
    assert recs[-1] == {"kind": "summary", "diagnostics": len(recs) - 1, "files": 1}


def test_check_parse_error_is_a_diagnostic(capsys, tmp_path):
    p = tmp_path / "bad.scifc"
    p.write_text("contract {")
    code, out, _ = run(capsys, "check", str(p))
    assert code == 1 and "bad.scifc" in out


def test_check_missing_file_is_usage(capsys):
    assert run(capsys, "check", "/nonexistent.scifc")[0] == EXIT_USAGE


@pytest.mark.parametrize("query,answer", [
    ("A /\\ B => A", True),
    ("A => B given A=>B", True),
    ("A \\/ B => B given A=>B", True),
    ("B => A given A=>B", False),
    ("A => A /\\ B", False),
])
def test_lattice(capsys, query, answer):
    code, out, _ = run(capsys, "lattice", "--format", "machine", query)
    assert code == 0 and records(out)[0]["result"] is answer


def test_lattice_text_output(capsys):
    code, out, _ = run(capsys, "lattice", "A", "=>", "A", "\\/", "B")
    assert code == 0 and out.strip() == "true"


@pytest.mark.parametrize("bad", ["A", "A => B => C", "A => (B", "A => B given", "A => B given A"])
def test_lattice_bad_queries(capsys, bad):
    assert run(capsys, "lattice", bad)[0] == EXIT_USAGE


def test_parse_query_pairs():
    _, _, trust = parse_query("A => C given A=>B, B=>C")
    assert trust == {("A", "B"), ("B", "C")}


def test_scenarios_filter_koet(capsys):
    code, out, _ = run(capsys, "scenarios", "--dir", str(SCENARIO_DIR), "--filter", "koet",
                       "--format", "machine")
    recs = [r for r in records(out) if r["kind"] == "scenario"]
    assert code == 0 and len(recs) == 1 and recs[0]["passed"]


def test_scenarios_unknown_filter(capsys):
    code, out, _ = run(capsys, "scenarios", "--dir", str(SCENARIO_DIR), "--filter", "zzz")
    assert code == 0 and "no scenario matches" in out


def test_scenarios_all_pass_and_deterministic(capsys):
    argv = ("scenarios", "--dir", str(SCENARIO_DIR), "--format", "machine")
    code1, out1, _ = run(capsys, *argv)
    code2, out2, _ = run(capsys, *argv)
    assert code1 == 0 and out1 == out2


def test_scenarios_unsafe_mode(capsys):
    code, out, _ = run(capsys, "scenarios", "--dir", str(SCENARIO_DIR), "--unsafe-no-sigcheck",
                       "--filter", "dexible", "--format", "machine")
    [rec] = [r for r in records(out) if r["kind"] == "scenario"]
    assert code == 0 and "cda events at @dexible: 0" not in rec["notes"]


def test_scenarios_with_sweep(capsys):
    code, out, _ = run(capsys, "scenarios", "--dir", str(SCENARIO_DIR), "--filter", "koet",
                       "--attackers", "5", "--format", "machine")
    [sweep] = [r for r in records(out) if r["kind"] == "sweep"]
    assert code == 0 and sweep["seeds"] == 5 and sweep["cda_events"] == []


@pytest.fixture
def world_file(tmp_path):
    p = tmp_path / "world.json"
    standard_world(load_corpus()).save(str(p))
    return str(p)


def test_run_commit(capsys, world_file, tmp_path):
    trace = tmp_path / "trace.jsonl"
    out_state = tmp_path / "after.json"
    code, out, _ = run(capsys, "run", "--state", world_file, "--origin", "@alice",
                       "--call", "@koet.claimThrone(20)", "--trace-out", str(trace),
                       "--state-out", str(out_state), "--format", "machine")
    assert code == 0 and records(out)[0]["outcome"] == "Committed"
    events = [json.loads(l) for l in trace.read_text().splitlines()]
    assert any(e["ev"] == "call" for e in events)
    assert json.loads(out_state.read_text())["accounts"]["@koet"]["fields"]["king"] == "@alice"


def test_run_reverted(capsys, world_file):
    code, out, _ = run(capsys, "run", "--state", world_file, "--origin", "@mallory",
                       "--call", "@tc.deliver(1, 2)")
    assert code == 2 and "CallerGate" in out


def test_run_uncaught_exception(capsys, world_file):
    argv = ("run", "--state", world_file, "--state-out", world_file, "--origin", "@sgx",
            "--call", "@tc.deliver(1, 42)")
    assert run(capsys, *argv)[0] == 0
    code, out, _ = run(capsys, *argv)
    assert code == 3 and "AlreadyDelivered" in out


@pytest.mark.parametrize("flags", [("--no-atomic-fastpath",), ("--typed-step",)])
def test_run_mode_flags(capsys, world_file, flags):
    code, _, _ = run(capsys, "run", "--state", world_file, "--origin", "@bob",
                     "--call", "@uni.sellXForY(10)", *flags)
    assert code == 0


def test_run_default_world(capsys):
    code, out, _ = run(capsys, "run", "--origin", "@bob", "--call", "@uni.sellXForY(10)")
    assert code == 0 and "value=9" in out


def test_run_rejects_unsafe_flag(capsys, world_file):
    code, _, err = run(capsys, "run", "--state", world_file, "--origin", "@alice",
                       "--call", "@koet.claimThrone(20)", "--unsafe-no-sigcheck")
    assert code == EXIT_USAGE and "scenarios" in err


@pytest.mark.parametrize("argv", [
    ("run", "--bogus"),
    ("check", "--typed-step"),
    ("lattice",),
    (),
    ("frobnicate",),
    ("run", "--origin", "@alice"),
    ("run", "--origin", "@alice", "--call", "nonsense"),
    ("run", "--origin", "@nobody", "--call", "@koet.claimThrone(1)"),
    ("scenarios", "--dir", "/nonexistent"),
    ("check", "--corpus", "nope"),
])
def test_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == EXIT_USAGE


def test_color_only_in_text_mode(capsys, monkeypatch):
    monkeypatch.setenv("SCIFC_COLOR", "always")
    _, out, _ = run(capsys, "lattice", "A => A")
    assert "\x1b[" in out
    _, out, _ = run(capsys, "lattice", "--format", "machine", "A => A")
    assert "\x1b[" not in out
    monkeypatch.setenv("SCIFC_COLOR", "never")
    _, out, _ = run(capsys, "lattice", "A => A")
    assert "\x1b[" not in out


def test_help_documents_exit_codes():
    proc = subprocess.run([sys.executable, "-m", "scifc", "run", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "uncaught" in proc.stdout and "64" in proc.stdout
    assert "--unsafe-no-sigcheck" not in proc.stdout
