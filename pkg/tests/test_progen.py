from scifc.parser import parse_program
from scifc.progen import MAX_NODES, ast_size, generate_well_typed, program_source, soundness_run


def test_generation_is_seeded():
    assert program_source(11) == program_source(11)
    assert program_source(11) != program_source(12)


def test_ast_size_counts_nodes():
    ct = parse_program("contract C { uint{this} x; @public void f() { x = 1; } }")
    [m] = ct["C"].methods
    assert 1 <= ast_size(m.body) <= 5


def test_generated_programs_respect_cap():
    progs = generate_well_typed(15, start=1000)
    assert len(progs) == 15
    for p in progs:
        assert all(ast_size(m.body) <= MAX_NODES for m in p.table[p.contract].methods)


def test_soundness_runner_reports_clean_runs():
    results = soundness_run(generate_well_typed(5), calls_per_method=1)
    assert results and not any(r.problems for r in results)
