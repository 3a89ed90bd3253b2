"""Contract tables, inheritance lookups and dispatch signature keys."""

from __future__ import annotations

from types import MappingProxyType
from typing import Iterable, Optional

from . import labels as L
from .ast import (AddressT, Base, BoolT, ContractDecl, ContractT, ExnDecl, ExnT,
                  FailT, FieldDecl, IntT, MappingT, MethodDecl, MethodSig,
                  NoReturnT, RefT, Type, UnitT)


class LookupFailure(LookupError):
    pass


class ContractTable:
    """Immutable map from contract names to declarations."""

    def __init__(self, contracts: Iterable[ContractDecl] = ()):
        cs: dict[str, ContractDecl] = {}
        exns: dict[str, ExnDecl] = {}
        for c in contracts:
            cs[c.name] = c
            for e in c.exceptions:
                exns[e.name] = e
        self._contracts = MappingProxyType(cs)
        self._exns = MappingProxyType(exns)

    @property
    def contracts(self):
        return self._contracts

    @property
    def exceptions(self):
        return self._exns

    def __contains__(self, name: str) -> bool:
        return name in self._contracts

    def __getitem__(self, name: str) -> ContractDecl:
        try:
            return self._contracts[name]
        except KeyError:
            raise LookupFailure(f"unknown contract {name!r}") from None

    def __iter__(self):
        return iter(self._contracts.values())

    def __len__(self) -> int:
        return len(self._contracts)

    def extend(self, contracts: Iterable[ContractDecl]) -> ContractTable:
        return ContractTable([*self._contracts.values(), *contracts])

    def replace(self, contract: ContractDecl) -> ContractTable:
        return ContractTable([contract if c.name == contract.name else c
                              for c in self._contracts.values()])

    def chain(self, name: str) -> list[str]:
        """``name`` followed by its ancestors, innermost first."""
        out, seen = [], set()
        cur: Optional[str] = name
        while cur is not None:
            if cur in seen:
                raise LookupFailure(f"cyclic inheritance through {cur!r}")
            seen.add(cur)
            out.append(cur)
            cur = self[cur].superclass
        return out

    def is_subclass(self, sub: str, sup: str) -> bool:
        try:
            return sup in self.chain(sub)
        except LookupFailure:
            return False

    def exception(self, name: str) -> ExnDecl:
        short = name.rsplit(".", 1)[-1]
        try:
            return self._exns[short]
        except KeyError:
            raise LookupFailure(f"unknown exception {name!r}") from None


def lookup_fields(ct: ContractTable, c: str) -> list[FieldDecl]:
    """Fields of ``c``, superclass fields first."""
    out: list[FieldDecl] = []
    for name in reversed(ct.chain(c)):
        out.extend(ct[name].fields)
    return out


def lookup_field(ct: ContractTable, c: str, f: str) -> FieldDecl:
    for fd in lookup_fields(ct, c):
        if fd.name == f:
            return fd
    raise LookupFailure(f"contract {c!r} has no field {f!r}")


def lookup_method(ct: ContractTable, c: str, m: str) -> tuple[MethodDecl, str]:
    """Innermost definition of ``m`` along the inheritance chain of ``c``."""
    for name in ct.chain(c):
        md = ct[name].method(m)
        if md is not None:
            return md, name
    raise LookupFailure(f"contract {c!r} has no method {m!r}")


def all_methods(ct: ContractTable, c: str) -> dict[str, tuple[MethodDecl, str]]:
    out: dict[str, tuple[MethodDecl, str]] = {}
    for name in reversed(ct.chain(c)):
        for md in ct[name].methods:
            out[md.sig.name] = (md, name)
    return out


# -- signature keys ------------------------------------------------------------------

def _key_label(l: L.Label, params: dict[str, L.Label]) -> str:
    return L.canonical(L.substitute(L.resolve_this(l, "this"), params))


def _key_base(b: Base, params: dict[str, L.Label]) -> str:
    match b:
        case UnitT():
            return "unit"
        case BoolT():
            return "bool"
        case IntT():
            return "uint"
        case AddressT() | ContractT():
            # contract references travel as plain addresses
            return "address"
        case RefT(inner):
            return f"ref<{_key_type(inner, params)}>"
        case MappingT(key, value, key_var):
            inner = dict(params)
            if key_var:
                inner[key_var] = L.Atom("$key")
            return f"mapping({_key_base(key, params)},{_key_type(value, inner)})"
        case ExnT(name):
            return f"exn {name}"
        case FailT():
            return "fl"
        case NoReturnT():
            return "noreturn"
    raise TypeError(f"unknown base type {b!r}")


def _key_type(t: Type, params: dict[str, L.Label]) -> str:
    return f"{_key_base(t.base, params)}{{{_key_label(t.label, params)}}}"


def signature_key(sig: MethodSig) -> bytes:
    """Canonical bytes identifying a method type for dispatch.

    Parameter names are replaced by positions, ``this`` stays symbolic and all
    labels are in canonical normal form, so keys agree exactly when two
    signatures denote the same method type.
    """
    params = {p.name: L.Atom(f"${i}") for i, p in enumerate(sig.params)}
    parts = [
        sig.name,
        "(" + ",".join(("final " if p.final else "") + _key_type(p.type, params)
                       for p in sig.params) + ")",
        "->" + _key_type(sig.ret, params),
        "{" + _key_label(sig.pc_ex, params) + " -> " + _key_label(sig.pc_in, params)
        + "; " + _key_label(sig.lock, params) + "}",
        "throws(" + ",".join(sorted(f"{e}{{{_key_label(l, params)}}}"
                                    for e, l in sig.throws)) + ")",
    ]
    return " ".join(parts).encode("utf-8")


def abi_key(sig: MethodSig) -> bytes:
    """Name and base types only: the label-blind dispatch key of plain Solidity."""
    params = {p.name: L.ANY for p in sig.params}
    return (sig.name + "(" + ",".join(_key_base(p.type.base, params) for p in sig.params)
            + ")").encode("utf-8")


def can_override(sub: MethodSig, sup: MethodSig) -> bool:
    return signature_key(sub) == signature_key(sup)
