"""Chain state: accounts, contract field stores, trust stores and ref cells.

Field stores hold core values; mappings are dicts from plain Python keys
(address strings, ints, bools) to values.  The JSON form is canonical, so two
states are equal exactly when their serializations are byte-equal.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

from . import labels as L
from .ast import (AddressT, AddrV, Base, BoolT, BoolV, ContractT, FailV, IntT,
                  IntV, LocV, MappingT, RefT, Type, UnitT, UnitV, Value)
from .parser import parse_program
from .printer import program_src
from .table import ContractTable, lookup_fields

STATE_VERSION = 1


class StateError(ValueError):
    pass


@dataclass
class Account:
    addr: str
    contract: Optional[str] = None  # None for user accounts
    fields: dict = field(default_factory=dict)
    trusts: set = field(default_factory=set)


@dataclass
class ChainState:
    ct: ContractTable
    accounts: dict = field(default_factory=dict)
    heap: dict = field(default_factory=dict)  # loc -> Value
    heap_types: dict = field(default_factory=dict)  # loc -> Type
    next_loc: int = 0
    next_addr: int = 0

    # -- accounts --------------------------------------------------------------------------

    def add_user(self, addr: str, trusts=()) -> Account:
        if addr in self.accounts:
            raise StateError(f"address {addr} already in use")
        acct = Account(addr, None, {}, set(trusts))
        self.accounts[addr] = acct
        return acct

    def deploy(self, contract: str, addr: Optional[str] = None, init: Optional[dict] = None,
               trusts=()) -> Account:
        """Create a contract account; ``init`` maps field names to values."""
        if contract not in self.ct or self.ct[contract].is_interface:
            raise StateError(f"cannot deploy {contract!r}")
        if addr is None:
            self.next_addr += 1
            addr = f"@{contract.lower()}{self.next_addr}"
        if addr in self.accounts:
            raise StateError(f"address {addr} already in use")
        fields = {}
        init = dict(init or {})
        for fd in lookup_fields(self.ct, contract):
            if fd.name in init:
                fields[fd.name] = coerce(init.pop(fd.name), fd.type.base)
            else:
                fields[fd.name] = default_store(fd.type.base)
        if init:
            raise StateError(f"{contract} has no fields {sorted(init)}")
        acct = Account(addr, contract, fields, set())
        self.accounts[addr] = acct
        for p in self.ct[contract].trusts:
            acct.trusts.add(p if p.startswith("@") else _addr_of(fields.get(p)))
        acct.trusts.update(trusts)
        return acct

    def account(self, addr: str) -> Account:
        try:
            return self.accounts[addr]
        except KeyError:
            raise StateError(f"unknown address {addr}") from None

    def trust_edges(self) -> frozenset:
        """Every declared trust as a lattice hypothesis ``(trusted, truster)``."""
        return frozenset((p, a.addr) for a in self.accounts.values() for p in a.trusts)

    # -- snapshots ---------------------------------------------------------------------------

    def snapshot(self):
        return (copy.deepcopy(self.accounts), dict(self.heap), dict(self.heap_types),
                self.next_loc, self.next_addr)

    def restore(self, snap):
        accounts, heap, heap_types, self.next_loc, self.next_addr = snap
        self.accounts = copy.deepcopy(accounts)
        self.heap = dict(heap)
        self.heap_types = dict(heap_types)

    def copy(self) -> ChainState:
        out = ChainState(self.ct)
        out.restore(self.snapshot())
        return out

    # -- serialization -----------------------------------------------------------------------

    def to_dict(self, include_program: bool = True) -> dict:
        accts = {}
        for addr in sorted(self.accounts):
            a = self.accounts[addr]
            rec: dict = {"trusts": sorted(a.trusts)}
            if a.contract is not None:
                rec["contract"] = a.contract
                rec["fields"] = {k: encode(v) for k, v in sorted(a.fields.items())}
            accts[addr] = rec
        out = {
            "version": STATE_VERSION,
            "accounts": accts,
            "heap": {str(k): encode(v) for k, v in sorted(self.heap.items())},
            "next_loc": self.next_loc,
            "next_addr": self.next_addr,
        }
        if include_program:
            out["program"] = program_src(list(self.ct))
        return out

    def fingerprint(self) -> bytes:
        """Canonical bytes of everything a transaction may change."""
        return json.dumps(self.to_dict(include_program=False), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict, ct: Optional[ContractTable] = None) -> ChainState:
        if data.get("version") != STATE_VERSION:
            raise StateError(f"unsupported state version {data.get('version')!r}")
        if ct is None:
            ct = parse_program(data.get("program", ""))
        st = cls(ct)
        for addr, rec in data.get("accounts", {}).items():
            c = rec.get("contract")
            if c is None:
                st.accounts[addr] = Account(addr, None, {}, set(rec.get("trusts", ())))
                continue
            fields = {}
            types = {fd.name: fd.type.base for fd in lookup_fields(ct, c)}
            for name, raw in rec.get("fields", {}).items():
                if name not in types:
                    raise StateError(f"{c} has no field {name!r}")
                fields[name] = decode(raw, types[name])
            for name, base in types.items():
                fields.setdefault(name, default_store(base))
            st.accounts[addr] = Account(addr, c, fields, set(rec.get("trusts", ())))
        for k, raw in data.get("heap", {}).items():
            st.heap[int(k)] = decode_any(raw)
        st.next_loc = data.get("next_loc", len(st.heap))
        st.next_addr = data.get("next_addr", 0)
        return st

    @classmethod
    def load(cls, path: str, ct: Optional[ContractTable] = None) -> ChainState:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), ct)


def _addr_of(v) -> str:
    if isinstance(v, AddrV):
        return v.addr
    raise StateError(f"trusted principal field holds {v!r}, not an address")


# -- value encoding ------------------------------------------------------------------------------

def zero(base: Base) -> Value:
    match base:
        case IntT():
            return IntV(0)
        case BoolT():
            return BoolV(False)
        case AddressT():
            return AddrV("@0")
        case ContractT(name):
            return AddrV("@0", view=name)
    return UnitV()


def default_store(base: Base):
    return {} if isinstance(base, MappingT) else zero(base)


def map_key(v: Value):
    match v:
        case AddrV(addr):
            return addr
        case IntV(n):
            return n
        case BoolV(b):
            return b
    raise StateError(f"{v!r} cannot be a mapping key")


def coerce(raw, base: Base):
    """Accept either a core value or its JSON encoding."""
    if isinstance(raw, Value):
        return raw
    return decode(raw, base)


def encode(v):
    match v:
        case dict():
            return {str(k): encode(x) for k, x in sorted(v.items(), key=lambda kv: str(kv[0]))}
        case IntV(n):
            return n
        case BoolV(b):
            return b
        case AddrV(addr):
            return addr
        case UnitV():
            return None
        case LocV(loc):
            return {"loc": loc}
        case FailV(reason, payload):
            return {"fail": reason, "payload": encode(payload) if payload is not None else None}
    raise StateError(f"cannot encode {v!r}")


def decode(raw, base: Base):
    match base:
        case MappingT(key, value, _):
            if not isinstance(raw, dict):
                raise StateError(f"expected a mapping, got {raw!r}")
            return {_decode_key(k, key): decode(x, value.base) for k, x in raw.items()}
        case IntT():
            if isinstance(raw, bool) or not isinstance(raw, int) or raw < 0:
                raise StateError(f"expected uint, got {raw!r}")
            return IntV(raw)
        case BoolT():
            if not isinstance(raw, bool):
                raise StateError(f"expected bool, got {raw!r}")
            return BoolV(raw)
        case AddressT():
            return AddrV(_check_addr(raw))
        case ContractT(name):
            return AddrV(_check_addr(raw), view=name)
        case UnitT():
            return UnitV()
        case RefT():
            return LocV(int(raw["loc"]))
    raise StateError(f"cannot decode values of {base!r}")


def decode_any(raw):
    if isinstance(raw, bool):
        return BoolV(raw)
    if isinstance(raw, int):
        return IntV(raw)
    if isinstance(raw, str):
        return AddrV(_check_addr(raw))
    if raw is None:
        return UnitV()
    if isinstance(raw, dict) and "loc" in raw:
        return LocV(int(raw["loc"]))
    raise StateError(f"cannot decode {raw!r}")


def _decode_key(k: str, base: Base):
    match base:
        case IntT():
            return int(k)
        case BoolT():
            return k == "True" or k == "true"
    return _check_addr(k)


def _check_addr(raw) -> str:
    if not isinstance(raw, str) or not raw.startswith("@"):
        raise StateError(f"expected an address like @name, got {raw!r}")
    return raw
