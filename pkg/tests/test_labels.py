import pytest
from hypothesis import given, settings, strategies as st

from scifc import labels as L
from scifc.printer import label_src

from support import tree_oracle

NAMES = ("A", "B", "C", "D")

atoms = st.sampled_from([L.Atom(n) for n in NAMES] + [L.ANY])
labels = st.recursive(atoms, lambda inner: st.builds(L.Join, inner, inner)
                      | st.builds(L.Meet, inner, inner), max_leaves=8)
edges = st.frozensets(st.tuples(st.sampled_from(NAMES), st.sampled_from(NAMES))
                      .filter(lambda e: e[0] != e[1]), max_size=4)


@given(labels, labels, edges)
def test_flows_to_agrees_with_tree_oracle(a, b, trust):
    assert L.flows_to(a, b, trust) == tree_oracle(a, b, trust, NAMES)


@given(labels, labels, edges)
def test_flows_to_agrees_with_builtin_oracle(a, b, trust):
    assert L.flows_to(a, b, trust) == L.oracle_flows_to(a, b, trust)


@given(labels, edges)
def test_reflexive(a, trust):
    assert L.flows_to(a, a, trust)


@given(labels, labels, labels)
def test_transitive(a, b, c):
    if L.flows_to(a, b) and L.flows_to(b, c):
        assert L.flows_to(a, c)


@given(labels, labels)
def test_join_is_upper_bound_and_meet_lower_bound(a, b):
    j, m = L.join(a, b), L.meet(a, b)
    assert L.flows_to(a, j) and L.flows_to(b, j)
    assert L.flows_to(m, a) and L.flows_to(m, b)


@given(labels, labels, labels)
def test_join_is_least(a, b, c):
    if L.flows_to(a, c) and L.flows_to(b, c):
        assert L.flows_to(L.join(a, b), c)


@given(labels, labels, labels)
def test_distributive(a, b, c):
    assert L.equivalent(L.Meet(a, L.Join(b, c)), L.Join(L.Meet(a, b), L.Meet(a, c)))


@given(labels, labels, edges, edges)
def test_more_hypotheses_never_refute(a, b, t1, t2):
    if L.flows_to(a, b, t1):
        assert L.flows_to(a, b, t1 | t2)


@given(labels)
def test_normalize_preserves_meaning(a):
    assert L.equivalent(L.normalize(a), a)
    assert L.canonical(L.normalize(a)) == L.canonical(a)


@given(labels)
def test_any_is_top(a):
    assert L.flows_to(a, L.ANY)


@given(labels)
def test_source_form_round_trips(a):
    assert L.equivalent(L.parse_label(label_src(a)), a)


@settings(max_examples=50)
@given(labels, st.sampled_from(NAMES))
def test_substitution_is_monotone(a, name):
    # raising one atom's trust (replacing it with a meet) never lowers the label
    stronger = L.substitute(a, {name: L.Meet(L.Atom(name), L.Atom("Z"))})
    assert L.flows_to(stronger, a)


@pytest.mark.parametrize("text,expected", [
    ("A /\\ B => A", True),
    ("A => A /\\ B", False),
    ("A => A \\/ B", True),
    ("A \\/ B => A", False),
    ("any => A", False),
])
def test_small_facts(text, expected):
    lhs, rhs = text.split("=>")
    assert L.flows_to(L.parse_label(lhs), L.parse_label(rhs)) is expected


def test_hypothesis_direction():
    a, b = L.Atom("A"), L.Atom("B")
    assert L.flows_to(a, b, {("A", "B")})
    assert not L.flows_to(b, a, {("A", "B")})
    assert L.flows_to(L.Join(a, b), b, {("A", "B")})


def test_trust_chain_is_transitive():
    assert L.flows_to(L.Atom("A"), L.Atom("C"), {("A", "B"), ("B", "C")})


def test_precedence_meet_binds_tighter():
    assert L.equivalent(L.parse_label("A \\/ B /\\ C"),
                        L.Join(L.Atom("A"), L.Meet(L.Atom("B"), L.Atom("C"))))


@pytest.mark.parametrize("bad", ["A /\\", "(A", "A B", "A & B", ""])
def test_malformed_labels_rejected(bad):
    with pytest.raises(L.LabelError):
        L.parse_label(bad)


def test_trust_hypotheses_must_be_pairs():
    with pytest.raises(L.LabelError):
        L.flows_to(L.Atom("A"), L.Atom("B"), {("A",)})


def test_this_resolution():
    l = L.resolve_this(L.Meet(L.This(), L.Atom("B")), "@x")
    assert L.atoms(l) == {"@x", "B"}
