"""Core abstract syntax trees and the types they carry.

Expressions are in administrative normal form: apart from ``Let`` bodies and
the blocks of structured forms, every operand is a value.  The surface parser
introduces ``Let`` temporaries to get there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .labels import ANY, Label


@dataclass(frozen=True)
class Pos:
    line: int
    col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


def _pos() -> Optional[Pos]:
    return field(default=None, compare=False, repr=False, kw_only=True)


# -- types ---------------------------------------------------------------------

class Base:
    __slots__ = ()


@dataclass(frozen=True)
class UnitT(Base):
    pass


@dataclass(frozen=True)
class BoolT(Base):
    pass


@dataclass(frozen=True)
class IntT(Base):
    pass


@dataclass(frozen=True)
class AddressT(Base):
    pass


@dataclass(frozen=True)
class RefT(Base):
    inner: Type


@dataclass(frozen=True)
class ContractT(Base):
    name: str


@dataclass(frozen=True)
class ExnT(Base):
    name: str


@dataclass(frozen=True)
class MappingT(Base):
    key: Base
    value: Type
    key_var: Optional[str] = None


@dataclass(frozen=True)
class FailT(Base):
    """Type of the value bound by a ``rescue`` handler."""


@dataclass(frozen=True)
class NoReturnT(Base):
    """Type of expressions with no normal termination path."""


@dataclass(frozen=True)
class Type:
    base: Base
    label: Label = ANY

    def with_label(self, label: Label) -> Type:
        return Type(self.base, label)


UNIT, BOOL, INT, ADDRESS = UnitT(), BoolT(), IntT(), AddressT()


def is_addressish(b: Base) -> bool:
    return isinstance(b, (AddressT, ContractT))


# -- values ----------------------------------------------------------------------

class Expr:
    __slots__ = ()


class Value(Expr):
    __slots__ = ()


@dataclass(frozen=True)
class Var(Value):
    name: str
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class UnitV(Value):
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class BoolV(Value):
    value: bool
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class IntV(Value):
    value: int
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class AddrV(Value):
    """A contract or user address.  ``view`` is the contract type the holder
    believes it has; ``forged`` marks views introduced by ``atk-cast``."""

    addr: str
    view: Optional[str] = None
    forged: bool = False
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class LocV(Value):
    loc: int
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class ExnV(Value):
    name: str
    args: tuple = ()
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class FailV(Value):
    """Payload of a failure.  ``reason`` names reserved runtime failures."""

    reason: str
    payload: Optional[Value] = None
    pos: Optional[Pos] = _pos()


# -- expressions -----------------------------------------------------------------

@dataclass(frozen=True)
class Let(Expr):
    name: str
    bound: Expr
    body: Expr
    ann: Optional[Type] = None
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class If(Expr):
    cond: Value
    then: Expr
    else_: Expr
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class IfTrust(Expr):
    lo: Value
    hi: Value
    then: Expr
    else_: Expr
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Ref(Expr):
    init: Value
    type: Type
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Deref(Expr):
    ref: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Assign(Expr):
    ref: Value
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class FieldRead(Expr):
    field: str
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class FieldWrite(Expr):
    field: str
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class MapRead(Expr):
    field: str
    keys: tuple
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class MapWrite(Expr):
    field: str
    keys: tuple
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class New(Expr):
    contract: str
    args: tuple
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Cast(Expr):
    contract: str
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class AtkCast(Expr):
    value: Value
    contract: str
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Call(Expr):
    recv: Value
    method: str
    args: tuple
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Endorse(Expr):
    value: Value
    frm: Label
    to: Label
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Lock(Expr):
    label: Label
    body: Expr
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Handler:
    exn: str
    params: tuple
    body: Expr
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Try(Expr):
    body: Expr
    handlers: tuple
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Atomic(Expr):
    body: Expr
    var: str
    rescue: Expr
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Throw(Expr):
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Fail(Expr):
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Value
    right: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class Not(Expr):
    value: Value
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class IgnoreLocks(Expr):
    body: Expr
    pos: Optional[Pos] = _pos()


ARITH_OPS = frozenset({"+", "-", "*", "/", "%"})
CMP_OPS = frozenset({"<", "<=", ">", ">=", "==", "!="})
BOOL_OPS = frozenset({"&&", "||"})

COMPOUND = (If, IfTrust, Lock, Try, Atomic, IgnoreLocks, Throw, Fail)


# -- declarations ------------------------------------------------------------------

@dataclass(frozen=True)
class Param:
    name: str
    type: Type
    final: bool = False
    defaulted: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class ExnDecl:
    name: str
    owner: str
    params: tuple  # of Param
    pos: Optional[Pos] = _pos()

    @property
    def qualname(self) -> str:
        return f"{self.owner}.{self.name}"


@dataclass(frozen=True)
class MethodSig:
    name: str
    params: tuple  # of Param
    ret: Type
    pc_ex: Label
    pc_in: Label
    lock: Label
    throws: tuple = ()  # of (qualified exception name, Label)
    public: bool = False

    @property
    def arity(self) -> int:
        return len(self.params)


@dataclass(frozen=True)
class MethodDecl:
    sig: MethodSig
    body: Optional[Expr]
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class FieldDecl:
    name: str
    type: Type
    final: bool = False
    pos: Optional[Pos] = _pos()


@dataclass(frozen=True)
class ContractDecl:
    name: str
    superclass: Optional[str] = None
    is_interface: bool = False
    fields: tuple = ()
    exceptions: tuple = ()
    methods: tuple = ()
    trusts: tuple = ()  # principal names: "@addr" literals or final address fields
    pos: Optional[Pos] = _pos()

    def method(self, name: str) -> Optional[MethodDecl]:
        for m in self.methods:
            if m.sig.name == name:
                return m
        return None
