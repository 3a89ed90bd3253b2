import pytest

from scifc.diagnostics import ParseError
from scifc.library import CORPUS, corpus_decls, corpus_source, load_corpus
from scifc.parser import parse_program
from scifc.printer import program_src
from scifc.progen import generate_well_typed
from scifc.typechecker import check_program


def rules(src):
    return [d.rule for d in check_program(parse_program(src))]


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_parses(name):
    assert corpus_decls([name])


def test_print_parse_round_trip_on_corpus():
    ct = load_corpus()
    text = program_src(list(ct))
    again = parse_program(text)
    assert list(again) == list(ct)
    assert program_src(list(again)) == text


def test_round_trip_on_generated_programs():
    for prog in generate_well_typed(20):
        text = program_src(list(prog.table))
        assert list(parse_program(text)) == list(prog.table)


def test_parse_error_has_position():
    with pytest.raises(ParseError) as err:
        parse_program("contract C { uint{this} x; void f() { x = ; } }")
    d = err.value.diagnostics[0]
    assert d.pos is not None and d.pos.line == 1


def test_unknown_contract_type_rejected():
    assert rules("contract C { Missing{this} m; }") == ["ClassOk"]


OK = """
contract C {
    uint{this} x;
    @public void set{sender -> this}(uint v) {
        uint{this} w = endorse(v, sender -> this);
        x = w;
    }
    @public uint{any} get{any}() {
        return x;
    }
}
"""


def test_small_contract_checks():
    assert rules(OK) == []


def test_untrusted_write_rejected():
    src = OK.replace("uint{this} w = endorse(v, sender -> this);\n        x = w;", "x = v;")
    assert rules(src)[0] == "Assign"


def test_implicit_flow_rejected():
    src = """
    contract C {
        uint{this} x;
        @public void f(bool b) {
            if (b) {
                x = 1;
            }
        }
    }"""
    assert rules(src)


def test_branch_taint_persists_after_if():
    src = """
    contract C {
        uint{this} x;
        @public void f(bool b) {
            if (b) {
            }
            x = 1;
        }
    }"""
    assert rules(src)


def test_endorse_of_trusted_value_is_flagged():
    src = """
    contract C {
        uint{this} x;
        @public void f() {
            uint{this} a = 1;
            uint{this} w = endorse(a, sender -> this);
        }
    }"""
    assert "Endorse" in rules(src)


def test_diagnostic_records_are_structured():
    src = OK.replace("uint{this} w = endorse(v, sender -> this);\n        x = w;", "x = v;")
    rec = check_program(parse_program(src, "c.scifc"))[0].to_record()
    assert {"rule", "line", "col", "message", "severity"} <= set(rec)


def test_corpus_source_unknown_name():
    with pytest.raises(KeyError):
        corpus_source("nope")
