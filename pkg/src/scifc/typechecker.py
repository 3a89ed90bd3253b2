"""Security type checking.

``check_expr`` returns a type together with a path map: for each way the
expression can end (normally, with a named exception, or with a failure) the
integrity of control flow at that point and the reentrancy lock label that is
still maintained.  Labels inside the checker never mention ``this`` directly;
they use the atom ``"this"`` for the contract being checked, ``"sender"``
for the immediate caller and one atom per address-valued variable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional

from . import labels as L
from .ast import (ADDRESS, BOOL, INT, UNIT, AddressT, AddrV, ARITH_OPS, Assign,
                  AtkCast, Atomic, Base, BinOp, BOOL_OPS, BoolT, BoolV, Call,
                  Cast, CMP_OPS, ContractT, Deref, Endorse, ExnV, Expr, Fail,
                  FailT, FailV, FieldRead, FieldWrite, If, IfTrust, IgnoreLocks,
                  IntT, IntV, Let, LocV, Lock, MapRead, MappingT, MapWrite,
                  MethodDecl, MethodSig, New, NoReturnT, Not, Ref, RefT, Throw,
                  Try, Type, UnitT, UnitV, Value, Var, is_addressish)
from .diagnostics import Diagnostic
from .table import (ContractTable, LookupFailure, can_override, lookup_field,
                    lookup_fields, lookup_method)

N = "n"
FL = "fl"
SELF = L.Atom("this")
SENDER = L.Atom("sender")
NORET = Type(NoReturnT(), L.BOT)

PathMap = Mapping  # path key -> (pc, lock)


def res(l: L.Label) -> L.Label:
    return L.resolve_this(l, "this")


def res_type(t: Type) -> Type:
    return Type(_res_base(t.base), res(t.label) if t.label is not None else None)


def _res_base(b: Base) -> Base:
    match b:
        case RefT(inner):
            return RefT(res_type(inner))
        case MappingT(key, value, kv):
            return MappingT(key, res_type(value), kv)
    return b


def psi_join(p1: PathMap, p2: PathMap) -> dict:
    """Pointwise join; a path defined on one side only is kept as is."""
    out = dict(p1)
    for k, (pc, lk) in p2.items():
        if k in out:
            pc0, lk0 = out[k]
            out[k] = (L.join(pc0, pc), L.join(lk0, lk))
        else:
            out[k] = (pc, lk)
    return out


def weaken_pc(pc: L.Label, released: L.Label, lock: L.Label, trust=frozenset()) -> L.Label:
    """Most trusted pc' with pc => pc' and released => lock \\/ pc'.

    Clauses of ``released`` already covered by ``lock \\/ pc`` cost nothing;
    every other clause has to be joined into the pc.
    """
    target = L.join(lock, pc)
    extra = [c for c in L.dnf(released) if not L.flows_to(L.from_dnf(frozenset((c,))), target, trust)]
    if not extra:
        return pc
    return L.join(pc, L.from_dnf(frozenset(extra)))


def check_subtype(trust, t1: Type, t2: Type, ct: Optional[ContractTable] = None) -> bool:
    if not base_subtype(t1.base, t2.base, ct):
        return False
    if t2.label is None or t1.label is None:
        return True
    return L.flows_to(t1.label, t2.label, trust)


def base_subtype(b1: Base, b2: Base, ct: Optional[ContractTable] = None) -> bool:
    if b1 == b2 or isinstance(b1, NoReturnT):
        return True
    match b1, b2:
        case ContractT(c1), ContractT(c2):
            return ct is not None and ct.is_subclass(c1, c2)
        case ContractT(), AddressT():
            return True
        case MappingT(k1, v1, kv1), MappingT(k2, v2, kv2):
            return k1 == k2 and kv1 == kv2 and base_subtype(v1.base, v2.base, ct) \
                and L.equivalent(v1.label, v2.label)
        case RefT(i1), RefT(i2):
            return base_subtype(i1.base, i2.base, ct) and L.equivalent(i1.label, i2.label)
    return False


def check_protection(trust, l: L.Label, tau: Type) -> bool:
    return L.flows_to(l, tau.label, trust)


@dataclass(frozen=True)
class VarInfo:
    type: Type
    atom: L.Label
    final: bool = True


@dataclass(frozen=True)
class Ctx:
    ct: ContractTable
    self_name: str
    gamma: Mapping[str, VarInfo]
    trust: frozenset
    pc: L.Label
    lock: L.Label
    dyn_lock: L.Label = L.ANY
    throws: Mapping[str, L.Label] = MappingProxyType({})
    caught: frozenset = frozenset()
    sigma: Mapping = MappingProxyType({})  # runtime addresses and locations
    fields_self: bool = True  # field atoms are local names (not prefixed)

    def bind(self, name: str, info: VarInfo) -> Ctx:
        g = dict(self.gamma)
        g[name] = info
        return replace(self, gamma=MappingProxyType(g))

    def flows(self, a: L.Label, b: L.Label) -> bool:
        return L.flows_to(a, b, self.trust)


class Checker:
    """Holds the diagnostics of one checking run."""

    def __init__(self, ct: ContractTable, file: Optional[str] = None,
                 self_id: str = "this", lenv: Optional[Mapping] = None):
        self.ct = ct
        # concrete mode (typed-step): self is an address, principals are resolved
        self.self_id = self_id
        self.self_atom = L.Atom(self_id)
        self.lenv = dict(lenv or {})
        self.diags: list[Diagnostic] = []
        self.file = file
        self._fresh = itertools.count(1)
        self.call_sites: list[tuple] = []  # (pos, pc_env, pc_ex, trust) for the second pass

    def res(self, l: L.Label) -> L.Label:
        l = L.resolve_this(l, self.self_id)
        return L.normalize(L.substitute(l, self.lenv)) if self.lenv else l

    def res_type(self, t: Type) -> Type:
        return Type(self._res_base(t.base), self.res(t.label) if t.label is not None else None)

    def _res_base(self, b: Base) -> Base:
        match b:
            case RefT(inner):
                return RefT(self.res_type(inner))
            case MappingT(key, value, kv):
                return MappingT(key, self.res_type(value), kv)
        return b

    def fresh_atom(self, hint: str = "?") -> L.Atom:
        return L.Atom(f"{hint}#{next(self._fresh)}")

    def diag(self, rule: str, msg: str, node=None, labels=()):
        pos = getattr(node, "pos", None)
        self.diags.append(Diagnostic(rule, msg, pos, labels=tuple(L.show(l) for l in labels),
                                     file=self.file))

    # -- values ----------------------------------------------------------------------------

    def check_value(self, ctx: Ctx, v: Value) -> Type:
        match v:
            case Var(name):
                info = ctx.gamma.get(name)
                if info is None:
                    self.diag("Val", f"unbound variable {name!r}", v)
                    return Type(UNIT, L.ANY)
                return info.type
            case UnitV():
                return Type(UNIT, L.BOT)
            case BoolV():
                return Type(BOOL, L.BOT)
            case IntV():
                return Type(INT, L.BOT)
            case AddrV(addr, view):
                known = ctx.sigma.get(addr)
                name = view or known
                if name is None:
                    return Type(ADDRESS, L.BOT)
                return Type(ContractT(name), L.BOT)
            case LocV(loc):
                t = ctx.sigma.get(loc)
                if t is None:
                    self.diag("Val", f"unknown heap location {loc}", v)
                    return Type(RefT(Type(UNIT, L.ANY)), L.BOT)
                return Type(RefT(t), L.BOT)
            case ExnV(name):
                return Type(UNIT, L.BOT)
            case FailV():
                return Type(FailT(), L.BOT)
        self.diag("Val", f"not a value: {v!r}", v)
        return Type(UNIT, L.ANY)

    def atom_of(self, ctx: Ctx, v: Value) -> L.Label:
        """Principal named by an address-valued value."""
        match v:
            case Var(name):
                info = ctx.gamma.get(name)
                if info is not None:
                    return info.atom
            case AddrV(addr):
                return L.Atom(addr)
        return self.fresh_atom()

    def label_of(self, ctx: Ctx, v: Value) -> L.Label:
        return self.check_value(ctx, v).label

    def expect_base(self, ctx: Ctx, v: Value, base: Base, rule: str, node) -> Type:
        t = self.check_value(ctx, v)
        if not base_subtype(t.base, base, self.ct):
            self.diag(rule, f"expected {_bname(base)}, found {_bname(t.base)}", node)
        return t

    # -- expressions --------------------------------------------------------------------------

    def single(self, ctx: Ctx, t: Type, fail: bool = False):
        psi = {N: (ctx.pc, ctx.lock)}
        if fail:
            psi[FL] = (ctx.pc, ctx.lock)
        return t, psi

    def check_expr(self, ctx: Ctx, e: Expr):
        if isinstance(e, Value):
            if isinstance(e, ExnV):
                self.diag("Val", "exception values can only be thrown", e)
            return self.single(ctx, self.check_value(ctx, e))
        method = getattr(self, "_" + type(e).__name__, None)
        if method is None:
            self.diag("Expr", f"unsupported expression {type(e).__name__}", e)
            return self.single(ctx, Type(UNIT, L.ANY))
        return method(ctx, e)

    # rule Let: the continuation runs at a pc weakened by any lock e1 released
    def _Let(self, ctx: Ctx, e: Let):
        t1, p1 = self.check_expr(ctx, e.bound)
        xt = t1
        if e.ann is not None:
            ann = self.res_type(e.ann)
            if ann.label is None:
                ann = Type(ann.base, t1.label)
            if not check_subtype(ctx.trust, t1, ann, self.ct):
                self.diag("Let", f"initializer of {e.name!r} does not fit its annotation",
                          e, (t1.label, ann.label))
            xt = ann
        if N not in p1:
            return NORET, p1
        pc_n, lk_n = p1[N]
        pc2 = weaken_pc(pc_n, lk_n, ctx.lock, ctx.trust)
        lock2 = L.join(lk_n, ctx.lock)
        atom = self._let_atom(ctx, e)
        inner = replace(ctx, pc=pc2, lock=lock2).bind(e.name, VarInfo(xt, atom))
        if e.name == "_":
            inner = replace(ctx, pc=pc2, lock=lock2)
        t2, p2 = self.check_expr(inner, e.body)
        rest = {k: v for k, v in p1.items() if k != N}
        return t2, psi_join(rest, p2)

    def _let_atom(self, ctx: Ctx, e: Let) -> L.Label:
        match e.bound:
            case Var() | AddrV():
                return self.atom_of(ctx, e.bound)
            case Cast(_, v) | Endorse(v):
                return self.atom_of(ctx, v)
            case FieldRead(f):
                try:
                    fd = lookup_field(self.ct, ctx.self_name, f)
                except LookupFailure:
                    return self.fresh_atom(e.name)
                if fd.final and is_addressish(fd.type.base):
                    return self.res(L.Atom(f))
        return self.fresh_atom(e.name)

    # rule If
    def _If(self, ctx: Ctx, e: If):
        g = self.expect_base(ctx, e.cond, BOOL, "If", e)
        inner = replace(ctx, pc=L.join(ctx.pc, g.label))
        t1, p1 = self.check_expr(inner, e.then)
        t2, p2 = self.check_expr(inner, e.else_)
        t = self.join_types(t1, t2, e, "If")
        return Type(t.base, L.join(t.label, g.label)), psi_join(p1, p2)

    # rule IfTrust: the then-branch may assume the checked flow
    def _IfTrust(self, ctx: Ctx, e: IfTrust):
        ta = self.check_value(ctx, e.lo)
        tb = self.check_value(ctx, e.hi)
        for t, v in ((ta, e.lo), (tb, e.hi)):
            if not is_addressish(t.base):
                self.diag("IfTrust", "dynamic trust checks compare addresses", v)
        a, b = self.atom_of(ctx, e.lo), self.atom_of(ctx, e.hi)
        pc = L.join_all((ctx.pc, ta.label, tb.label))
        then_ctx = replace(ctx, pc=pc, trust=ctx.trust | {(a.id, b.id)})
        t1, p1 = self.check_expr(then_ctx, e.then)
        t2, p2 = self.check_expr(replace(ctx, pc=pc), e.else_)
        return self.join_types(t1, t2, e, "IfTrust"), psi_join(p1, p2)

    def join_types(self, t1: Type, t2: Type, node, rule: str) -> Type:
        if isinstance(t1.base, NoReturnT):
            return t2
        if isinstance(t2.base, NoReturnT):
            return t1
        lab = L.join(t1.label, t2.label)
        if base_subtype(t1.base, t2.base, self.ct):
            return Type(t2.base, lab)
        if base_subtype(t2.base, t1.base, self.ct):
            return Type(t1.base, lab)
        self.diag(rule, f"branches have types {_bname(t1.base)} and {_bname(t2.base)}", node)
        return Type(t1.base, lab)

    def _Ref(self, ctx: Ctx, e: Ref):
        ty = self.res_type(e.type)
        t = self.check_value(ctx, e.init)
        if not check_subtype(ctx.trust, t, ty, self.ct) or not ctx.flows(ctx.pc, ty.label):
            self.diag("Ref", "initial value does not fit the cell type", e,
                      (L.join(ctx.pc, t.label), ty.label))
        return self.single(ctx, Type(RefT(ty), L.BOT))

    def _Deref(self, ctx: Ctx, e: Deref):
        t = self.check_value(ctx, e.ref)
        if not isinstance(t.base, RefT):
            self.diag("Deref", f"dereferencing a {_bname(t.base)}", e)
            return self.single(ctx, Type(UNIT, L.ANY))
        inner = t.base.inner
        return self.single(ctx, Type(inner.base, L.join(inner.label, t.label)))

    # rule Assign
    def _Assign(self, ctx: Ctx, e: Assign):
        t = self.check_value(ctx, e.ref)
        if not isinstance(t.base, RefT):
            self.diag("Assign", f"assigning through a {_bname(t.base)}", e)
            return self.single(ctx, Type(UNIT, L.BOT))
        inner = t.base.inner
        v = self.check_value(ctx, e.value)
        src = L.join_all((ctx.pc, v.label, t.label))
        if not base_subtype(v.base, inner.base, self.ct):
            self.diag("Assign", "assigned value has the wrong type", e)
        elif not ctx.flows(src, inner.label):
            self.diag("Assign", "write to a more trusted reference", e, (src, inner.label))
        return self.single(ctx, Type(UNIT, L.BOT))

    def field_type(self, ctx: Ctx, f: str, node) -> Optional[tuple]:
        try:
            fd = lookup_field(self.ct, ctx.self_name, f)
        except LookupFailure as err:
            self.diag("Field", str(err), node)
            return None
        return fd, self.res_type(fd.type)

    # rule Field
    def _FieldRead(self, ctx: Ctx, e: FieldRead):
        found = self.field_type(ctx, e.field, e)
        if found is None:
            return self.single(ctx, Type(UNIT, L.ANY))
        return self.single(ctx, found[1])

    def _FieldWrite(self, ctx: Ctx, e: FieldWrite):
        found = self.field_type(ctx, e.field, e)
        v = self.check_value(ctx, e.value)
        if found is not None:
            fd, ft = found
            src = L.join(ctx.pc, v.label)
            if fd.final:
                self.diag("Assign", f"field {e.field!r} is final", e)
            elif isinstance(ft.base, MappingT) or not base_subtype(v.base, ft.base, self.ct):
                self.diag("Assign", f"value does not fit field {e.field!r}", e)
            elif not ctx.flows(src, ft.label):
                self.diag("Assign", f"write to field {e.field!r} needs more integrity", e,
                          (src, ft.label))
        return self.single(ctx, Type(UNIT, L.BOT))

    def index(self, ctx: Ctx, e, ft: Type) -> Optional[Type]:
        cur = ft
        for k in e.keys:
            if not isinstance(cur.base, MappingT):
                self.diag("Mapping", f"too many indices for {e.field!r}", e)
                return None
            m = cur.base
            kt = self.check_value(ctx, k)
            if not base_subtype(kt.base, m.key, self.ct):
                self.diag("Mapping", f"key of {e.field!r} should be {_bname(m.key)}", e)
            value = m.value
            if m.key_var is not None:
                if not is_addressish(kt.base):
                    self.diag("Mapping", "dependent keys must be addresses", e)
                value = _subst_type(value, {m.key_var: self.atom_of(ctx, k)})
            cur = value
        return cur

    # dependent mappings: the value label is instantiated with the key principal
    def _MapRead(self, ctx: Ctx, e: MapRead):
        found = self.field_type(ctx, e.field, e)
        if found is None:
            return self.single(ctx, Type(UNIT, L.ANY))
        leaf = self.index(ctx, e, found[1])
        return self.single(ctx, leaf if leaf is not None else Type(UNIT, L.ANY))

    def _MapWrite(self, ctx: Ctx, e: MapWrite):
        found = self.field_type(ctx, e.field, e)
        v = self.check_value(ctx, e.value)
        if found is not None:
            leaf = self.index(ctx, e, found[1])
            if leaf is not None:
                src = L.join(ctx.pc, v.label)
                if isinstance(leaf.base, MappingT) or not base_subtype(v.base, leaf.base, self.ct):
                    self.diag("Assign", f"value does not fit {e.field!r} entries", e)
                elif not ctx.flows(src, leaf.label):
                    self.diag("Assign", f"write to {e.field!r} needs more integrity", e,
                              (src, leaf.label))
        return self.single(ctx, Type(UNIT, L.BOT))

    # rule New: arguments initialize the non-mapping fields in order
    def _New(self, ctx: Ctx, e: New):
        if e.contract not in self.ct or self.ct[e.contract].is_interface:
            self.diag("New", f"cannot instantiate {e.contract!r}", e)
            return self.single(ctx, Type(ContractT(e.contract), L.BOT))
        fields = [f for f in lookup_fields(self.ct, e.contract)
                  if not isinstance(f.type.base, MappingT)]
        if len(fields) != len(e.args):
            self.diag("New", f"{e.contract} takes {len(fields)} constructor arguments", e)
        else:
            fresh = self.fresh_atom("new")
            sub = {f.name: self.atom_of(ctx, a) for f, a in zip(fields, e.args)
                   if is_addressish(f.type.base)}
            for f, a in zip(fields, e.args):
                want = _subst_type(Type(f.type.base, L.resolve_this(f.type.label, fresh.id)), sub)
                got = self.check_value(ctx, a)
                if not base_subtype(got.base, want.base, self.ct):
                    self.diag("New", f"argument for field {f.name!r} has the wrong type", e)
        return self.single(ctx, Type(ContractT(e.contract), L.BOT))

    # rule Cast: checked at run time, so it may fail
    def _Cast(self, ctx: Ctx, e: Cast):
        t = self.check_value(ctx, e.value)
        if e.contract not in self.ct:
            self.diag("Cast", f"unknown contract {e.contract!r}", e)
        if not is_addressish(t.base):
            self.diag("Cast", "only addresses can be cast", e)
        return self.single(ctx, Type(ContractT(e.contract), t.label), fail=True)

    def _AtkCast(self, ctx: Ctx, e: AtkCast):
        self.diag("AttackCast", "atk-cast is only available to attacker code", e)
        return self.single(ctx, Type(ContractT(e.contract), L.ANY))

    def _IgnoreLocks(self, ctx: Ctx, e: IgnoreLocks):
        self.diag("IgnoreLocks", "ignore-locks is only available to attacker code", e)
        return self.check_expr(ctx, e.body)

    # endorsement: only up to the integrity of the current control flow
    def _Endorse(self, ctx: Ctx, e: Endorse):
        t = self.check_value(ctx, e.value)
        frm, to = self.res(e.frm), self.res(e.to)
        if not ctx.flows(t.label, frm):
            self.diag("Endorse", "value is less trusted than the endorsement source", e,
                      (t.label, frm))
        elif not ctx.flows(ctx.pc, to):
            self.diag("Endorse", "control flow is less trusted than the endorsement target", e,
                      (ctx.pc, to))
        return self.single(ctx, Type(t.base, to))

    # rule Lock: the body runs with a dynamic lock held
    def _Lock(self, ctx: Ctx, e: Lock):
        lab = self.res(e.label)
        inner = replace(ctx, dyn_lock=L.meet(ctx.dyn_lock, lab))
        return self.check_expr(inner, e.body)

    def _BinOp(self, ctx: Ctx, e: BinOp):
        a = self.check_value(ctx, e.left)
        b = self.check_value(ctx, e.right)
        lab = L.join(a.label, b.label)
        if e.op in ARITH_OPS:
            for t, v in ((a, e.left), (b, e.right)):
                if not isinstance(t.base, IntT):
                    self.diag("BinOp", f"{e.op} expects integers", v)
            return self.single(ctx, Type(INT, lab), fail=e.op in ("/", "%", "-"))
        if e.op in BOOL_OPS:
            for t, v in ((a, e.left), (b, e.right)):
                if not isinstance(t.base, BoolT):
                    self.diag("BinOp", f"{e.op} expects booleans", v)
            return self.single(ctx, Type(BOOL, lab))
        if e.op in CMP_OPS:
            if e.op in ("==", "!="):
                ok = base_subtype(a.base, b.base, self.ct) or base_subtype(b.base, a.base, self.ct) \
                    or (is_addressish(a.base) and is_addressish(b.base))
            else:
                ok = isinstance(a.base, IntT) and isinstance(b.base, IntT)
            if not ok:
                self.diag("BinOp", f"cannot compare {_bname(a.base)} with {_bname(b.base)}", e)
            return self.single(ctx, Type(BOOL, lab))
        self.diag("BinOp", f"unknown operator {e.op!r}", e)
        return self.single(ctx, Type(INT, lab))

    def _Not(self, ctx: Ctx, e: Not):
        t = self.expect_base(ctx, e.value, BOOL, "BinOp", e)
        return self.single(ctx, Type(BOOL, t.label))

    # rule Fail
    def _Fail(self, ctx: Ctx, e: Fail):
        self.check_value(ctx, e.value)
        return NORET, {FL: (ctx.pc, ctx.lock)}

    # rule Throw: only the thrown exception's path
    def _Throw(self, ctx: Ctx, e: Throw):
        ex = e.value
        if not isinstance(ex, ExnV):
            self.diag("Throw", "only exception values can be thrown", e)
            return NORET, {}
        try:
            decl = self.ct.exception(ex.name)
        except LookupFailure as err:
            self.diag("Throw", str(err), e)
            return NORET, {}
        if len(decl.params) != len(ex.args):
            self.diag("Throw", f"{decl.name} takes {len(decl.params)} arguments", e)
        else:
            for p, a in zip(decl.params, ex.args):
                if not check_subtype(ctx.trust, self.check_value(ctx, a), self.res_type(p.type), self.ct):
                    self.diag("Throw", f"argument {p.name!r} of {decl.name} has the wrong type", e)
        q = decl.qualname
        if q not in ctx.throws and q not in ctx.caught:
            self.diag("Throw", f"exception {decl.name} is neither declared nor caught", e)
        return NORET, {q: (ctx.pc, ctx.lock)}

    # rule TryCatch
    def _Try(self, ctx: Ctx, e: Try):
        names = {}
        for h in e.handlers:
            try:
                names[h.exn] = self.ct.exception(h.exn)
            except LookupFailure as err:
                self.diag("TryCatch", str(err), h)
        body_ctx = replace(ctx, caught=ctx.caught | {d.qualname for d in names.values()})
        t, p = self.check_expr(body_ctx, e.body)
        out = dict(p)
        for h in e.handlers:
            decl = names.get(h.exn)
            if decl is None:
                continue
            if len(h.params) != len(decl.params):
                self.diag("TryCatch", f"{decl.name} carries {len(decl.params)} values", h)
            path = p.get(decl.qualname)
            out.pop(decl.qualname, None)
            if path is None:
                hpc = ctx.pc
            else:
                hpc, hlock = path
                if not ctx.flows(hlock, ctx.lock):
                    self.diag("TryCatch", f"handler for {decl.name} runs without the lock it needs",
                              h, (hlock, ctx.lock))
            hctx = replace(ctx, pc=hpc)
            for name, prm in zip(h.params, decl.params):
                pt = self.res_type(prm.type)
                hctx = hctx.bind(name, VarInfo(Type(pt.base, L.join(pt.label, hpc)),
                                               self.fresh_atom(name)))
            th, ph = self.check_expr(hctx, h.body)
            t = self.join_types(t, th, h, "TryCatch")
            out = psi_join(out, ph)
        return t, out

    # rule AtomicRescue
    def _Atomic(self, ctx: Ctx, e: Atomic):
        t, p = self.check_expr(ctx, e.body)
        escaping = sorted(k for k in p if k not in (N, FL))
        if escaping:
            self.diag("AtomicRescue", "exceptions must be caught inside atomic blocks: "
                      + ", ".join(escaping), e)
        out = {k: v for k, v in p.items() if k != FL}
        if FL not in p:
            return t, out
        fpc, flock = p[FL]
        if not ctx.flows(flock, ctx.lock):
            self.diag("AtomicRescue", "rescue block runs without the lock it needs", e,
                      (flock, ctx.lock))
        rctx = replace(ctx, pc=fpc)
        if e.var != "_":
            rctx = rctx.bind(e.var, VarInfo(Type(FailT(), fpc), self.fresh_atom(e.var)))
        tr, pr = self.check_expr(rctx, e.rescue)
        return self.join_types(t, tr, e, "AtomicRescue"), psi_join(out, pr)

    # rule Call: callee labels are instantiated at the call site and every
    # result path is attenuated by the integrity of the receiver reference
    def call_subst(self, ctx: Ctx, recv_atom: L.Label, callee: str, sig: MethodSig, args) -> dict:
        mapping: dict = {"this": recv_atom, "sender": self.self_atom}
        if recv_atom == self.self_atom:
            for k, v in self.lenv.items():
                mapping.setdefault(k, v)
        else:
            try:
                for f in lookup_fields(self.ct, callee):
                    mapping[f.name] = L.Atom(f"{getattr(recv_atom, 'id', '?')}.{f.name}")
            except LookupFailure:
                pass
        for p, a in zip(sig.params, args):
            mapping[p.name] = self.atom_of(ctx, a) if is_addressish(p.type.base) else self.fresh_atom()
        return mapping

    def _Call(self, ctx: Ctx, e: Call):
        rt = self.check_value(ctx, e.recv)
        if not isinstance(rt.base, ContractT):
            self.diag("Call", f"receiver has type {_bname(rt.base)}, not a contract type", e)
            return NORET, {N: (ctx.pc, ctx.lock), FL: (ctx.pc, ctx.lock)}
        try:
            md, _owner = lookup_method(self.ct, rt.base.name, e.method)
        except LookupFailure as err:
            self.diag("Call", str(err), e)
            return NORET, {N: (ctx.pc, ctx.lock), FL: (ctx.pc, ctx.lock)}
        sig = md.sig
        recv_lab = rt.label
        if len(e.args) != sig.arity:
            self.diag("Call", f"{e.method} takes {sig.arity} arguments", e)
            return NORET, {N: (ctx.pc, ctx.lock), FL: (ctx.pc, ctx.lock)}
        mapping = self.call_subst(ctx, self.atom_of(ctx, e.recv), rt.base.name, sig, e.args)

        def inst(l: L.Label) -> L.Label:
            return L.normalize(L.substitute(res(l), mapping))

        for p, a in zip(sig.params, e.args):
            want = _subst_type(res_type(p.type), mapping)
            got = self.check_value(ctx, a)
            if not base_subtype(got.base, want.base, self.ct):
                self.diag("Call", f"argument {p.name!r} of {e.method} has the wrong type", e)
            elif not ctx.flows(got.label, want.label):
                self.diag("Call", f"argument {p.name!r} of {e.method} is not trusted enough", e,
                          (got.label, want.label))
        pc_env = L.join(ctx.pc, recv_lab)
        pc_ex = inst(sig.pc_ex)
        if not ctx.flows(pc_env, pc_ex):
            self.diag("Call", f"call to {e.method} needs integrity {L.show(pc_ex)}", e,
                      (pc_env, pc_ex))
        self.call_sites.append((e.pos, pc_env, pc_ex, ctx.trust))
        ret = _subst_type(res_type(sig.ret), mapping)
        ret = Type(ret.base, L.join(ret.label, recv_lab))
        lock_out = L.meet(L.join(inst(sig.lock), recv_lab), ctx.dyn_lock)
        psi = {N: (pc_env, lock_out)}
        for q, lab in sig.throws:
            psi[q] = (L.join(pc_env, inst(lab)), lock_out)
        psi[FL] = (L.join_all(pc for pc, _ in psi.values()), lock_out)
        return ret, psi

    # -- declarations -------------------------------------------------------------------------

    def method_ctx(self, c: str, sig: MethodSig) -> Ctx:
        gamma = {"this": VarInfo(Type(ContractT(c), L.BOT), self.self_atom),
                 "sender": VarInfo(Type(ADDRESS, L.BOT), SENDER)}
        for p in sig.params:
            gamma[p.name] = VarInfo(self.res_type(p.type), L.Atom(p.name), p.final)
        return Ctx(self.ct, c, MappingProxyType(gamma), frozenset(), self.res(sig.pc_in),
                   self.res(sig.lock), throws=MappingProxyType({q: self.res(l) for q, l in sig.throws}))

    # rule MethodOk
    def check_method(self, c: str, md: MethodDecl):
        if md.body is None:
            return
        sig = md.sig
        ctx = self.method_ctx(c, sig)
        t, psi = self.check_expr(ctx, md.body)
        self.check_paths(ctx, sig, t, psi, md)

    def check_paths(self, ctx: Ctx, sig: MethodSig, t: Type, psi: PathMap, node):
        lock = self.res(sig.lock)
        if N in psi:
            ret = self.res_type(sig.ret)
            if not isinstance(ret.base, UnitT) and not check_subtype(ctx.trust, t, ret, self.ct):
                self.diag("MethodOk", f"{sig.name} returns {_bname(t.base)}{{{L.show(t.label)}}}, "
                          f"declared {_bname(ret.base)}{{{L.show(ret.label)}}}", node,
                          (t.label, ret.label))
            if not ctx.flows(psi[N][1], lock):
                self.diag("MethodOk", f"{sig.name} does not maintain its lock label", node,
                          (psi[N][1], lock))
        for k, (pc, lk) in psi.items():
            if k in (N, FL):
                continue
            if k not in ctx.throws:
                self.diag("MethodOk", f"exception {k} escapes {sig.name} undeclared", node)
                continue
            if not ctx.flows(pc, ctx.throws[k]):
                self.diag("MethodOk", f"exception {k} is thrown at lower integrity than declared",
                          node, (pc, ctx.throws[k]))
            if not ctx.flows(lk, lock):
                self.diag("MethodOk", f"exception {k} does not maintain the lock label", node,
                          (lk, lock))

    # rule ClassOk
    def check_contract(self, c: str):
        decl = self.ct[c]
        try:
            chain = self.ct.chain(c)
        except LookupFailure as err:
            self.diag("ClassOk", str(err), decl)
            return
        fields = {f.name: f for f in lookup_fields(self.ct, c)}
        for f in decl.fields:
            for name in _contract_names(f.type):
                if name not in self.ct:
                    self.diag("ClassOk", f"field {f.name!r} mentions unknown contract {name!r}", f)
        for p in decl.trusts:
            if p.startswith("@"):
                continue
            f = fields.get(p)
            if f is None or not f.final or not is_addressish(f.type.base):
                self.diag("ClassOk", f"trusted principal {p!r} must be an address literal "
                          "or a final address field", decl)
        for md in decl.methods:
            for sup in chain[1:]:
                other = self.ct[sup].method(md.sig.name)
                if other is not None:
                    if not can_override(md.sig, other.sig):
                        self.diag("CanOverride", f"{c}.{md.sig.name} changes the signature "
                                  f"declared in {sup}", md)
                    break
            for p in md.sig.params:
                for name in _contract_names(p.type):
                    if name not in self.ct:
                        self.diag("ClassOk", f"parameter {p.name!r} mentions unknown contract "
                                  f"{name!r}", md)
            self.check_method(c, md)
        if not decl.is_interface:
            for name in reversed(chain):
                for md in self.ct[name].methods:
                    if md.body is None:
                        impl, _ = lookup_method(self.ct, c, md.sig.name)
                        if impl.body is None:
                            self.diag("ClassOk", f"{c} does not implement {name}.{md.sig.name}", decl)


def _contract_names(t: Type) -> list[str]:
    match t.base:
        case ContractT(name):
            return [name]
        case RefT(inner):
            return _contract_names(inner)
        case MappingT(_, value, _):
            return _contract_names(value)
    return []


def _subst_type(t: Type, mapping: Mapping) -> Type:
    base = t.base
    match base:
        case MappingT(key, value, kv):
            inner = {k: v for k, v in mapping.items() if k != kv}
            base = MappingT(key, _subst_type(value, inner), kv)
        case RefT(inner):
            base = RefT(_subst_type(inner, mapping))
    if t.label is None:
        return Type(base, None)
    return Type(base, L.normalize(L.substitute(t.label, mapping)))


def _bname(b: Base) -> str:
    match b:
        case UnitT():
            return "unit"
        case BoolT():
            return "bool"
        case IntT():
            return "uint"
        case AddressT():
            return "address"
        case ContractT(name):
            return name
        case RefT(inner):
            return f"ref<{_bname(inner.base)}>"
        case MappingT():
            return "mapping"
        case FailT():
            return "failure"
        case NoReturnT():
            return "noreturn"
    return type(b).__name__


# -- public entry points ----------------------------------------------------------------------------

def check_program(ct: ContractTable, file: Optional[str] = None) -> list[Diagnostic]:
    """All diagnostics for a table; empty means well typed (rule CtOk)."""
    ch = Checker(ct, file)
    for c in ct:
        ch.check_contract(c.name)
    return ch.diags


def check_contract(ct: ContractTable, c: str) -> list[Diagnostic]:
    ch = Checker(ct)
    ch.check_contract(c)
    return ch.diags


def check_method(ct: ContractTable, c: str, md: MethodDecl) -> list[Diagnostic]:
    ch = Checker(ct)
    ch.check_method(c, md)
    return ch.diags


def check_expr(ctx: Ctx, e: Expr):
    """Type and path map of ``e`` plus any diagnostics."""
    ch = Checker(ctx.ct)
    t, psi = ch.check_expr(ctx, e)
    return t, psi, ch.diags


def check_value(ctx: Ctx, v: Value):
    ch = Checker(ctx.ct)
    return ch.check_value(ctx, v), ch.diags


def call_site_audit(ct: ContractTable) -> list[tuple]:
    """Re-verify pc_env => pc_ex at every call site of the accepted methods.

    Returns the offending sites; empty for any table ``check_program`` accepts.
    """
    bad = []
    for c in ct:
        for md in c.methods:
            ch = Checker(ct)
            ch.check_method(c.name, md)
            if ch.diags:
                continue
            for pos, env, ex, trust in ch.call_sites:
                if not L.flows_to(env, ex, trust):
                    bad.append((c.name, md.sig.name, pos))
    return bad


def check_residual(state, act, e: Expr, trust: frozenset, pc: L.Label) -> list[Diagnostic]:
    """Re-check a running method body against the concrete chain state.

    ``act`` names the executing contract, its address, the caller and the
    principals bound to its parameters; ``e`` is the remaining term with all
    variables of the activation already substituted.
    """
    ct = state.ct
    lenv = {}
    acct = state.accounts[act.addr]
    for fd in lookup_fields(ct, act.contract):
        v = acct.fields.get(fd.name)
        if fd.final and isinstance(v, AddrV):
            lenv[fd.name] = L.Atom(v.addr)
    lenv.update(act.lenv)
    ch = Checker(ct, self_id=act.addr, lenv=lenv)
    sigma = {a.addr: a.contract for a in state.accounts.values() if a.contract is not None}
    sigma.update(state.heap_types)
    sig = act.sig
    ctx = Ctx(ct, act.contract, MappingProxyType({}), frozenset(trust), pc,
              ch.res(sig.lock), throws=MappingProxyType({q: ch.res(l) for q, l in sig.throws}),
              sigma=MappingProxyType(sigma))
    t, psi = ch.check_expr(ctx, e)
    ch.check_paths(ctx, sig, t, psi, e)
    return ch.diags
