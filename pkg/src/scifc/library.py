"""The bundled case-study contracts."""

from __future__ import annotations

from importlib import resources

from .parser import build_table, parse_contracts
from .table import ContractTable

# dependency order: later files use contracts declared earlier
CORPUS = ("token", "uniswap", "dexible", "parity", "koet", "towncrier", "hodl", "support")


def corpus_source(name: str) -> str:
    if name not in CORPUS:
        raise KeyError(f"no bundled program {name!r}; choose from {', '.join(CORPUS)}")
    return resources.files("scifc").joinpath("corpus", f"{name}.scifc").read_text("utf-8")


def corpus_decls(names=CORPUS) -> list:
    decls = []
    for n in names:
        decls.extend(parse_contracts(corpus_source(n), f"{n}.scifc"))
    return decls


def load_corpus(names=CORPUS, extra=()) -> ContractTable:
    """Table of the named corpus files plus any extra declarations."""
    return build_table(corpus_decls(names) + list(extra))
