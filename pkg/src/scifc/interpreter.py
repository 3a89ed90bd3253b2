"""Small-step reference interpreter over a simulated chain.

The machine is substitution based: calling a method substitutes the receiver,
the caller and the arguments into the method body, and evaluation contexts
are an explicit stack of frames.  Exceptions unwind through let, pc and
attacker-cast frames; failures unwind through everything up to the nearest
transaction frame, which restores its snapshot.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from . import labels as L
from .ast import (AddressT, AddrV, Assign, AtkCast, Atomic, BinOp, BoolT, BoolV,
                  Call, Cast, ContractT, Deref, Endorse, ExnV, Expr, Fail, FailV,
                  FieldRead, FieldWrite, Handler, If, IfTrust, IgnoreLocks, IntT,
                  IntV, Let, LocV, Lock, MapRead, MappingT, MapWrite, MethodSig,
                  New, Not, Ref, RefT, Throw, Try, Type, UnitT, UnitV, Value, Var,
                  is_addressish)
from .state import ChainState, StateError, default_store, map_key, zero
from .table import (LookupFailure, abi_key, lookup_field, lookup_fields,
                    lookup_method, signature_key)

DEFAULT_BUDGET = 10 ** 6

# reserved failure reasons, distinguishable by the harness
DISPATCH_MISMATCH = "DispatchMismatch"
CALLER_GATE = "CallerGate"
LOCK_BYPASS = "LockBypassDenied"
BUDGET = "BudgetExhausted"
UNDECLARED = "UndeclaredException"
CAST_FAILED = "CastFailed"
STUCK = "Stuck"
SECURITY_FAILURES = frozenset({DISPATCH_MISMATCH, CALLER_GATE, LOCK_BYPASS})


class Stuck(Exception):
    """No rule applies; reported with the frame stack."""


@dataclass(frozen=True)
class Raise:
    exn: ExnV


@dataclass(frozen=True)
class Failure:
    value: FailV


# -- frames -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class LetCont:
    name: str
    body: Expr
    ann: Optional[Type] = None


@dataclass(frozen=True)
class TryFrame:
    handlers: tuple


@dataclass(frozen=True, eq=False)
class TxFrame:
    snap: object
    var: str = "_"
    rescue: Optional[Expr] = None
    fastpath: bool = False
    top: bool = False


@dataclass(frozen=True, eq=False)
class FunEnd:
    throws: frozenset
    caller: object  # Activation


@dataclass(frozen=True)
class AtPc:
    pc: L.Label


@dataclass(frozen=True)
class WithLock:
    label: L.Label  # concrete
    source: L.Label  # as written


@dataclass(frozen=True)
class AtkFrame:
    contract: str


@dataclass(frozen=True)
class IgnoreFrame:
    addr: str


@dataclass
class Activation:
    addr: str
    sender: str
    contract: Optional[str] = None
    sig: Optional[MethodSig] = None
    lenv: dict = field(default_factory=dict)


# -- receipts ------------------------------------------------------------------------------------

@dataclass
class Receipt:
    outcome: str  # Committed | Reverted | UncaughtException
    value: object
    steps: int
    trace: list
    trust: frozenset = frozenset()
    typed_step_errors: list = field(default_factory=list)

    @property
    def reason(self) -> Optional[str]:
        return self.value.reason if isinstance(self.value, FailV) else None

    def to_record(self) -> dict:
        from .state import encode
        rec = {"outcome": self.outcome, "steps": self.steps}
        if isinstance(self.value, ExnV):
            rec["exception"] = self.value.name
            rec["args"] = [encode(a) for a in self.value.args]
        elif isinstance(self.value, FailV):
            rec["failure"] = self.value.reason
            if self.value.payload is not None and not isinstance(self.value.payload, ExnV):
                rec["payload"] = encode(self.value.payload)
            elif isinstance(self.value.payload, ExnV):
                rec["payload"] = self.value.payload.name
        elif self.value is not None:
            rec["value"] = encode(self.value)
        if self.typed_step_errors:
            rec["typed_step_errors"] = [str(d) for d in self.typed_step_errors]
        return rec

    def comparable(self) -> tuple:
        """Everything observable about a run, for differential comparisons."""
        return (self.outcome, repr(self.to_record()), tuple(map(event_key, self.trace)))


def event_key(ev: dict) -> tuple:
    return tuple(sorted((k, L.canonical(v) if isinstance(v, L.Label) else repr(v))
                        for k, v in ev.items()))


def event_record(ev: dict) -> dict:
    return {k: (L.canonical(v) if isinstance(v, L.Label) else v) for k, v in ev.items()}


# -- lattice helpers -----------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def auto_endorses(sig: MethodSig) -> bool:
    """Whether entry raises integrity from pc_ex to pc_in (checked statically)."""
    ex = L.resolve_this(sig.pc_ex, "this")
    inn = L.resolve_this(sig.pc_in, "this")
    return not L.flows_to(ex, inn)


_WELL_TYPED: dict = {}


def well_typed_contracts(ct) -> frozenset:
    """Contracts whose declarations check cleanly; attacker code is excluded."""
    key = id(ct)
    hit = _WELL_TYPED.get(key)
    if hit is None or hit[0] is not ct:
        from .typechecker import check_contract
        ok = frozenset(c.name for c in ct if not check_contract(ct, c.name))
        hit = _WELL_TYPED[key] = (ct, ok)
    return hit[1]


def runtime_trusts(state: ChainState, a: L.Label, b: L.Label) -> bool:
    """Whether the flow ``a => b`` is believed, given every declared trust edge."""
    return L.flows_to(a, b, state.trust_edges())


# -- substitution ----------------------------------------------------------------------------------

def subst(e, env: dict):
    """Replace free variables by values; binders shadow."""
    if not env:
        return e
    match e:
        case Var(n):
            return env.get(n, e)
        case UnitV() | BoolV() | IntV() | AddrV() | LocV() | FailV():
            return e
        case ExnV(name, args):
            return ExnV(name, tuple(subst(a, env) for a in args), pos=e.pos)
        case Let(x, b, body, ann):
            inner = env if x not in env else {k: v for k, v in env.items() if k != x}
            return Let(x, subst(b, env), subst(body, inner), ann, pos=e.pos)
        case If(c, t, f):
            return If(subst(c, env), subst(t, env), subst(f, env), pos=e.pos)
        case IfTrust(a, b, t, f):
            return IfTrust(subst(a, env), subst(b, env), subst(t, env), subst(f, env), pos=e.pos)
        case Ref(v, ty):
            return Ref(subst(v, env), ty, pos=e.pos)
        case Deref(v):
            return Deref(subst(v, env), pos=e.pos)
        case Assign(r, v):
            return Assign(subst(r, env), subst(v, env), pos=e.pos)
        case FieldRead():
            return e
        case FieldWrite(f, v):
            return FieldWrite(f, subst(v, env), pos=e.pos)
        case MapRead(f, ks):
            return MapRead(f, tuple(subst(k, env) for k in ks), pos=e.pos)
        case MapWrite(f, ks, v):
            return MapWrite(f, tuple(subst(k, env) for k in ks), subst(v, env), pos=e.pos)
        case New(c, args):
            return New(c, tuple(subst(a, env) for a in args), pos=e.pos)
        case Cast(c, v):
            return Cast(c, subst(v, env), pos=e.pos)
        case AtkCast(v, c):
            return AtkCast(subst(v, env), c, pos=e.pos)
        case Call(r, m, args):
            return Call(subst(r, env), m, tuple(subst(a, env) for a in args), pos=e.pos)
        case Endorse(v, a, b):
            return Endorse(subst(v, env), a, b, pos=e.pos)
        case Lock(l, body):
            return Lock(l, subst(body, env), pos=e.pos)
        case Try(body, hs):
            return Try(subst(body, env), tuple(_subst_handler(h, env) for h in hs), pos=e.pos)
        case Atomic(body, var, rescue):
            inner = {k: v for k, v in env.items() if k != var}
            return Atomic(subst(body, env), var, subst(rescue, inner), pos=e.pos)
        case Throw(v):
            return Throw(subst(v, env), pos=e.pos)
        case Fail(v):
            return Fail(subst(v, env), pos=e.pos)
        case BinOp(op, a, b):
            return BinOp(op, subst(a, env), subst(b, env), pos=e.pos)
        case Not(v):
            return Not(subst(v, env), pos=e.pos)
        case IgnoreLocks(body):
            return IgnoreLocks(subst(body, env), pos=e.pos)
    raise TypeError(f"cannot substitute into {e!r}")


def _subst_handler(h: Handler, env: dict) -> Handler:
    inner = {k: v for k, v in env.items() if k not in h.params}
    return Handler(h.exn, h.params, subst(h.body, inner), pos=h.pos)


class BudgetExceeded(Exception):
    pass


class _Reduce:
    """Reduction rules for redexes, mixed into :class:`Machine`."""

    def reduce(self, e):
        handler = getattr(self, "r_" + type(e).__name__, None)
        if handler is None:
            raise Stuck(f"no rule for {type(e).__name__}")
        handler(e)

    def r_Var(self, e: Var):
        raise Stuck(f"free variable {e.name}")

    def r_Let(self, e: Let):
        self.frames.append(LetCont(e.name, e.body, e.ann))
        self.cur = e.bound

    def r_If(self, e: If):
        if not isinstance(e.cond, BoolV):
            raise Stuck("if on a non-boolean")
        self.cur = e.then if e.cond.value else e.else_

    def r_IfTrust(self, e: IfTrust):
        a, b = _addr(e.lo), _addr(e.hi)
        ok = self.flows(L.Atom(a), L.Atom(b))
        self.emit("trust_check", lo=a, hi=b, result=ok, addr=self.act.addr)
        self.cur = e.then if ok else e.else_

    def r_Ref(self, e: Ref):
        st = self.state
        loc = st.next_loc
        st.next_loc += 1
        st.heap[loc] = e.init
        st.heap_types[loc] = Type(_conc_base(self, e.type.base), self.conc(e.type.label))
        self.cur = LocV(loc)

    def r_Deref(self, e: Deref):
        self.cur = self.state.heap[_loc(e.ref)]

    def r_Assign(self, e: Assign):
        loc = _loc(e.ref)
        if loc not in self.state.heap:
            raise Stuck(f"dangling location {loc}")
        self.state.heap[loc] = e.value
        self.cur = UnitV()

    def _fields(self) -> dict:
        acct = self.state.accounts[self.act.addr]
        if acct.contract is None:
            raise Stuck("field access outside a contract")
        return acct.fields

    def _field_base(self, f: str):
        return lookup_field(self.ct, self.act.contract, f).type.base

    def r_FieldRead(self, e: FieldRead):
        v = self._fields()[e.field]
        if isinstance(v, dict):
            raise Stuck(f"mapping {e.field} read as a scalar")
        self.cur = v

    def r_FieldWrite(self, e: FieldWrite):
        fields = self._fields()
        if isinstance(fields.get(e.field), dict) or e.field not in fields:
            raise Stuck(f"bad write to {e.field}")
        fields[e.field] = _retag(e.value, self._field_base(e.field))
        self.cur = UnitV()

    def r_MapRead(self, e: MapRead):
        store = self._fields()[e.field]
        base = self._field_base(e.field)
        for k in e.keys:
            if not isinstance(base, MappingT) or not isinstance(store, dict):
                raise Stuck(f"too many keys for {e.field}")
            store = store.get(map_key(k), default_store(base.value.base))
            base = base.value.base
        if isinstance(store, dict):
            raise Stuck(f"partial mapping read of {e.field}")
        self.cur = _retag(store, base)

    def r_MapWrite(self, e: MapWrite):
        store = self._fields()[e.field]
        base = self._field_base(e.field)
        *init, last = e.keys
        for k in init:
            if not isinstance(base, MappingT):
                raise Stuck(f"too many keys for {e.field}")
            store = store.setdefault(map_key(k), {})
            base = base.value.base
        if not isinstance(base, MappingT) or isinstance(base.value.base, MappingT):
            raise Stuck(f"bad key count for {e.field}")
        store[map_key(last)] = _retag(e.value, base.value.base)
        self.cur = UnitV()

    def r_New(self, e: New):
        scalars = [fd for fd in lookup_fields(self.ct, e.contract)
                   if not isinstance(fd.type.base, MappingT)]
        if len(scalars) != len(e.args):
            raise Stuck(f"new {e.contract} with {len(e.args)} arguments")
        acct = self.state.deploy(e.contract, init={fd.name: _retag(v, fd.type.base)
                                                    for fd, v in zip(scalars, e.args)})
        self._trust = self.state.trust_edges()
        self.emit("deploy", addr=acct.addr, contract=e.contract, by=self.act.addr)
        self.cur = AddrV(acct.addr, e.contract)

    def r_Cast(self, e: Cast):
        a = _addr(e.value)
        acct = self.state.accounts.get(a)
        if acct is not None and acct.contract is not None \
                and not self.ct.is_subclass(acct.contract, e.contract):
            self.fail(CAST_FAILED)
            return
        if acct is None and a != "@0":
            self.fail(CAST_FAILED)
            return
        self.cur = AddrV(a, e.contract)

    def r_AtkCast(self, e: AtkCast):
        self.emit("atk_cast", target=_addr(e.value), contract=e.contract, addr=self.act.addr)
        self.cur = AddrV(_addr(e.value), e.contract, True)

    def r_Endorse(self, e: Endorse):
        self.emit("endorse", addr=self.act.addr, frm=self.conc(e.frm), to=self.conc(e.to))
        self.cur = e.value

    def r_Lock(self, e: Lock):
        lc = self.conc(e.label)
        self.locks.append(lc)
        self.emit("lock", label=lc, addr=self.act.addr)
        self.frames.append(WithLock(lc, e.label))
        self.cur = e.body

    def r_Try(self, e: Try):
        self.frames.append(TryFrame(e.handlers))
        self.cur = e.body

    def r_Atomic(self, e: Atomic):
        fast = self.fastpath and isinstance(e.body, Call)
        self.frames.append(TxFrame(self.state.snapshot(), e.var, e.rescue, fast))
        self.cur = e.body

    def r_Throw(self, e: Throw):
        if not isinstance(e.value, ExnV):
            raise Stuck("throw of a non-exception")
        self.emit("throw", exn=self.qualify(e.value.name), addr=self.act.addr)
        self.cur = Raise(e.value)

    def r_Fail(self, e: Fail):
        self.fail("fail", e.value)

    def r_Not(self, e: Not):
        if not isinstance(e.value, BoolV):
            raise Stuck("negation of a non-boolean")
        self.cur = BoolV(not e.value.value)

    def r_BinOp(self, e: BinOp):
        a, b, op = e.left, e.right, e.op
        if op in ("==", "!="):
            eq = _eq_key(a) == _eq_key(b)
            self.cur = BoolV(eq if op == "==" else not eq)
            return
        if op in ("&&", "||"):
            if not (isinstance(a, BoolV) and isinstance(b, BoolV)):
                raise Stuck(f"{op} on non-booleans")
            self.cur = BoolV(a.value and b.value if op == "&&" else a.value or b.value)
            return
        if not (isinstance(a, IntV) and isinstance(b, IntV)):
            raise Stuck(f"{op} on non-integers")
        x, y = a.value, b.value
        match op:
            case "+":
                self.cur = IntV(x + y)
            case "*":
                self.cur = IntV(x * y)
            case "-":
                if y > x:
                    self.fail("Underflow")
                else:
                    self.cur = IntV(x - y)
            case "/" | "%":
                if y == 0:
                    self.fail("DivisionByZero")
                else:
                    self.cur = IntV(x // y if op == "/" else x % y)
            case "<":
                self.cur = BoolV(x < y)
            case "<=":
                self.cur = BoolV(x <= y)
            case ">":
                self.cur = BoolV(x > y)
            case ">=":
                self.cur = BoolV(x >= y)
            case _:
                raise Stuck(f"unknown operator {op}")

    def r_IgnoreLocks(self, e: IgnoreLocks):
        self.ignoring[self.act.addr] += 1
        self.emit("ignore_locks", addr=self.act.addr)
        self.frames.append(IgnoreFrame(self.act.addr))
        self.cur = e.body


def _addr(v) -> str:
    if not isinstance(v, AddrV):
        raise Stuck(f"expected an address, got {v!r}")
    return v.addr


def _loc(v) -> int:
    if not isinstance(v, LocV):
        raise Stuck(f"expected a reference, got {v!r}")
    return v.loc


def _eq_key(v):
    if isinstance(v, AddrV):
        return ("addr", v.addr)
    if isinstance(v, (IntV, BoolV)):
        return (type(v).__name__, v.value)
    if isinstance(v, UnitV):
        return ("unit",)
    raise Stuck(f"cannot compare {v!r}")


def _retag(v, base):
    """Contract-typed storage and reads carry their declared view."""
    if isinstance(v, AddrV) and isinstance(base, ContractT):
        return AddrV(v.addr, base.name, v.forged)
    return v


def _conc_base(m, b):
    if isinstance(b, RefT):
        return RefT(Type(_conc_base(m, b.inner.base), m.conc(b.inner.label)))
    return b


class _Dispatch:
    """Method calls: dispatch check, caller gate, auto-endorse gate."""

    def r_Call(self, e: Call):
        callee = _addr(e.recv)
        caller = self.act.addr
        acct = self.state.accounts.get(callee)
        if acct is None:
            self.fail("UnknownAddress", target=callee)
            return
        if acct.contract is None:
            self.emit("call", caller=caller, callee=callee, contract=None, method=e.method,
                      pc_env=self.pc, pc_ex=L.ANY, pc_in=L.ANY, low_integ=e.recv.forged)
            self.cur = UnitV()
            return
        try:
            md, _owner = lookup_method(self.ct, acct.contract, e.method)
        except LookupFailure:
            self.fail(DISPATCH_MISMATCH, target=callee)
            return
        sig = md.sig
        external = callee != caller
        if external and not self._dispatch_ok(e.recv, acct.contract, sig):
            self.fail(DISPATCH_MISMATCH, target=callee)
            return
        if len(e.args) != sig.arity or md.body is None:
            self.fail(DISPATCH_MISMATCH, target=callee)
            return
        lenv = {"sender": L.Atom(caller)}
        args = {}
        for p, a in zip(sig.params, e.args):
            if isinstance(a, AddrV):
                lenv[p.name] = L.Atom(a.addr)
            args[p.name] = _retag(a, p.type.base)
        new_act = Activation(callee, caller, acct.contract, sig, lenv)
        pc_ex = self.conc(sig.pc_ex, new_act)
        pc_in = self.conc(sig.pc_in, new_act)
        if external:
            if not sig.public or not self.flows(L.Atom(caller), pc_ex):
                self.fail(CALLER_GATE, target=callee)
                return
            if auto_endorses(sig) and not self.flows(pc_ex, pc_in):
                ignored = self.ignoring[callee] > 0
                if not ignored and not self.bypass_locks(pc_ex):
                    self.fail(LOCK_BYPASS, target=callee)
                    return
                self.emit("auto_endorse", addr=callee, frm=pc_ex, to=pc_in, ignored=ignored)
        self.emit("call", caller=caller, callee=callee, contract=acct.contract,
                  method=e.method, pc_env=self.pc, pc_ex=pc_ex, pc_in=pc_in,
                  low_integ=bool(getattr(e.recv, "forged", False)))
        if e.recv.forged:
            self.frames.append(AtkFrame(e.recv.view or acct.contract))
        throws = frozenset(self.qualify(n) for n, _ in sig.throws)
        self.frames.append(FunEnd(throws, self.act))
        self.frames.append(AtPc(self.pc))
        self.act = new_act
        self.pc = pc_in
        env = {"this": AddrV(callee, acct.contract), "sender": AddrV(caller), **args}
        self.cur = subst(md.body, env)

    def _dispatch_ok(self, recv: AddrV, true_c: str, actual: MethodSig) -> bool:
        view = recv.view or true_c
        if view not in self.ct:
            return False
        try:
            expected, _ = lookup_method(self.ct, view, actual.name)
        except LookupFailure:
            return False
        key = signature_key if self.sigcheck else abi_key
        return key(expected.sig) == key(actual)


# -- the machine -----------------------------------------------------------------------------------

class Machine(_Reduce, _Dispatch):
    def __init__(self, state: ChainState, *, fastpath: bool = True, sigcheck: bool = True,
                 typed_step: bool = False, budget: int = DEFAULT_BUDGET):
        self.state = state
        self.ct = state.ct
        self.fastpath = fastpath
        self.sigcheck = sigcheck
        self.typed_step = typed_step
        self.budget = budget
        self.frames: list = []
        self.cur = None
        self.act: Optional[Activation] = None
        self.pc: L.Label = L.ANY
        self.locks: list[L.Label] = []
        self.ignoring: Counter = Counter()
        self.trace: list[dict] = []
        self.steps = 0
        self.typed_errors: list = []
        self._trust = state.trust_edges()

    # -- registers and labels ------------------------------------------------------------------

    def conc(self, l: L.Label, act: Optional[Activation] = None) -> L.Label:
        """Concrete form of a label written inside the activation ``act``."""
        act = act or self.act
        l = L.resolve_this(l, act.addr)
        env = {}
        for a in L.atoms(l):
            if a in act.lenv:
                env[a] = act.lenv[a]
            elif act.contract is not None and not a.startswith("@"):
                v = self.state.accounts[act.addr].fields.get(a)
                if isinstance(v, AddrV):
                    env[a] = L.Atom(v.addr)
        return L.normalize(L.substitute(l, env)) if env else L.normalize(l)

    def flows(self, a: L.Label, b: L.Label) -> bool:
        return L.flows_to(a, b, self._trust)

    def bypass_locks(self, l: L.Label) -> bool:
        return all(self.flows(l, held) for held in self.locks)

    def emit(self, ev: str, **data):
        data["ev"] = ev
        self.trace.append(data)

    def fail(self, reason: str, payload: Optional[Value] = None, **where):
        self.emit("fail", reason=reason, addr=self.act.addr, **where)
        self.cur = Failure(FailV(reason, payload))

    def qualify(self, name: str) -> str:
        try:
            return self.ct.exception(name).qualname
        except LookupFailure:
            return name

    # -- driver ----------------------------------------------------------------------------------

    def done(self) -> bool:
        return not self.frames and isinstance(self.cur, (Value, Raise, Failure))

    def run(self) -> None:
        while not self.done():
            if self.steps >= self.budget:
                raise BudgetExceeded
            self.steps += 1
            try:
                self.step()
            except (Stuck, StateError, LookupFailure, TypeError, KeyError) as exc:
                self.emit("stuck", detail=f"{type(exc).__name__}: {exc}")
                self.cur = Failure(FailV(STUCK))
            if self.typed_step:
                self.recheck()

    def step(self):
        c = self.cur
        if isinstance(c, Raise):
            self.unwind_raise(c)
        elif isinstance(c, Failure):
            self.unwind_failure(c)
        elif isinstance(c, Value):
            self.pop_value(c)
        else:
            self.reduce(c)

    # -- returning through frames -----------------------------------------------------------

    def pop_value(self, v: Value):
        f = self.frames.pop()
        match f:
            case LetCont(name, body, ann):
                if ann is not None and isinstance(v, AddrV) and isinstance(ann.base, ContractT):
                    v = AddrV(v.addr, ann.base.name, v.forged)
                self.cur = body if name == "_" else subst(body, {name: v})
            case TxFrame():
                self.emit("commit", addr=self.act.addr, top=f.top)
            case FunEnd():
                self.emit("return", addr=self.act.addr)
                self.act = f.caller
            case AtPc(pc):
                self.pc = pc
            case WithLock():
                self.release(f)
            case IgnoreFrame(addr):
                self.ignoring[addr] -= 1
            case TryFrame() | AtkFrame():
                pass

    def release(self, f: WithLock):
        self.locks.remove(f.label)
        self.emit("unlock", label=f.label, addr=self.act.addr)

    def unwind_raise(self, r: Raise):
        f = self.frames.pop()
        match f:
            case TryFrame(handlers):
                q = self.qualify(r.exn.name)
                for h in handlers:
                    if self.qualify(h.exn) == q:
                        self.emit("catch", exn=q, addr=self.act.addr)
                        self.cur = subst(h.body, dict(zip(h.params, r.exn.args)))
                        return
            case TxFrame():
                if f.top:
                    self.emit("uncaught", exn=self.qualify(r.exn.name))
                elif f.fastpath:
                    self.emit("commit", addr=self.act.addr, top=False)
                else:
                    self.rollback(f, FailV("UncaughtInAtomic", r.exn))
            case FunEnd(throws, caller):
                q = self.qualify(r.exn.name)
                self.act = caller
                if q not in throws:
                    self.emit("fail", reason=UNDECLARED, addr=self.act.addr)
                    self.cur = Failure(FailV(UNDECLARED, r.exn))
            case AtPc(pc):
                self.pc = pc
            case WithLock():
                self.release(f)
            case IgnoreFrame(addr):
                self.ignoring[addr] -= 1

    def unwind_failure(self, fl: Failure):
        f = self.frames.pop()
        match f:
            case TxFrame():
                self.rollback(f, fl.value)
            case FunEnd(_, caller):
                self.act = caller
            case AtPc(pc):
                self.pc = pc
            case WithLock():
                self.release(f)
            case IgnoreFrame(addr):
                self.ignoring[addr] -= 1

    def rollback(self, f: TxFrame, value: FailV):
        self.state.restore(f.snap)
        self._trust = self.state.trust_edges()
        self.emit("rollback", addr=self.act.addr, reason=value.reason, top=f.top)
        if f.top:
            self.cur = Failure(value)
        else:
            self.cur = subst(f.rescue, {f.var: value}) if f.var != "_" else f.rescue

    # -- typed-step mode -------------------------------------------------------------------------

    def residual(self):
        """The innermost activation's remaining term, rebuilt from its frames."""
        c = self.cur
        if isinstance(c, Raise):
            e = Throw(c.exn)
        elif isinstance(c, Failure):
            e = Fail(c.value)
        else:
            e = c
        for f in reversed(self.frames):
            match f:
                case LetCont(name, body, ann):
                    e = Let(name, e, body, ann)
                case TryFrame(handlers):
                    e = Try(e, handlers)
                case TxFrame():
                    if f.top:
                        break
                    e = Atomic(e, f.var, f.rescue)
                case WithLock(_, source):
                    e = Lock(source, e)
                case IgnoreFrame():
                    e = IgnoreLocks(e)
                case FunEnd() | AtPc():
                    break
        return e

    def recheck(self):
        act = self.act
        if act is None or act.sig is None or self.done():
            return
        from .typechecker import check_residual
        if act.contract not in well_typed_contracts(self.ct):
            return
        if (self.frames and isinstance(self.frames[-1], (AtPc, FunEnd))
                and isinstance(self.cur, (Value, Raise, Failure))):
            return  # mid-return: registers are being restored
        diags = check_residual(self.state, act, self.residual(), self._trust, self.pc)
        for d in diags:
            self.typed_errors.append(d)
            self.emit("typed_step_error", rule=d.rule, message=d.message, step=self.steps)


# -- entry point ---------------------------------------------------------------------------------

def run_transaction(state: ChainState, origin: str, recv: str, method: str, args=(), *,
                    fastpath: bool = True, typed_step: bool = False,
                    unsafe_no_sigcheck: bool = False,
                    budget: int = DEFAULT_BUDGET) -> Receipt:
    """Run one externally initiated call to completion, mutating ``state``."""
    origin_acct = state.account(origin)
    if origin_acct.contract is not None:
        raise StateError(f"transactions originate from user accounts, {origin} is a contract")
    state.account(recv)
    m = Machine(state, fastpath=fastpath, sigcheck=not unsafe_no_sigcheck,
                typed_step=typed_step, budget=budget)
    trust = m._trust
    snap = state.snapshot()
    m.act = Activation(origin, origin)
    m.pc = L.Atom(origin)
    m.frames.append(TxFrame(snap, top=True))
    m.cur = Call(AddrV(recv), method, tuple(args))
    try:
        m.run()
    except BudgetExceeded:
        state.restore(snap)
        m.emit("fail", reason=BUDGET, addr=origin)
        return Receipt("Reverted", FailV(BUDGET), m.steps, m.trace, trust, m.typed_errors)
    if isinstance(m.cur, Failure):
        outcome, value = "Reverted", m.cur.value
    elif isinstance(m.cur, Raise):
        outcome, value = "UncaughtException", m.cur.exn
    else:
        outcome, value = "Committed", m.cur
    return Receipt(outcome, value, m.steps, m.trace, trust, m.typed_errors)
