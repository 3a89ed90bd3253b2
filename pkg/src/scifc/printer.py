"""Pretty-printer from core AST back to parseable surface text.

Printing is exact enough that parsing the output reproduces the same core
terms (positions aside): every signature label is written out explicitly and
label trees keep their association through parentheses.
"""

from __future__ import annotations

from . import labels as L
from .ast import (AddressT, AddrV, Assign, AtkCast, Atomic, Base, BinOp, BoolT,
                  BoolV, Call, Cast, ContractDecl, ContractT, Deref, Endorse,
                  ExnV, Expr, Fail, FieldRead, FieldWrite, If, IfTrust,
                  IgnoreLocks, IntT, IntV, Let, LocV, Lock, MapRead, MappingT,
                  MapWrite, MethodDecl, New, Not, Ref, RefT, Throw, Try, Type,
                  UnitT, UnitV, Var)

_STMT_FORMS = (If, IfTrust, Lock, Try, Atomic, IgnoreLocks, Throw, Fail)


class PrintError(ValueError):
    pass


def label_src(l: L.Label) -> str:
    match l:
        case L.Atom(p):
            return p
        case L.This():
            return "this"
        case L.Any():
            return "any"
        case L.Join(a, b):
            right = f"({label_src(b)})" if isinstance(b, L.Join) else _meet_operand(b, False)
            return f"{label_src(a)} \\/ {right}"
        case L.Meet(a, b):
            return f"{_meet_operand(a, False)} /\\ {_meet_operand(b, True)}"
    raise PrintError(f"label {l!r} has no source form")


def _meet_operand(l: L.Label, right: bool) -> str:
    if isinstance(l, L.Join) or (right and isinstance(l, L.Meet)):
        return f"({label_src(l)})"
    return label_src(l)


def base_src(b: Base) -> str:
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
            return f"ref<{type_src(inner)}>"
        case MappingT(key, value, key_var):
            kv = f" {key_var}" if key_var else ""
            return f"mapping({base_src(key)}{kv}, {type_src(value)})"
    raise PrintError(f"type {b!r} has no source form")


def type_src(t: Type) -> str:
    if t.label is None:
        return base_src(t.base)
    return f"{base_src(t.base)}{{{label_src(t.label)}}}"


def value_src(v) -> str:
    match v:
        case Var(name):
            return name
        case UnitV():
            return "()"
        case BoolV(b):
            return "true" if b else "false"
        case IntV(n):
            return str(n)
        case AddrV(addr):
            return addr
        case LocV(loc):
            return f"<loc {loc}>"
    raise PrintError(f"{v!r} is not a printable value")


def _args(vs) -> str:
    return ", ".join(value_src(v) for v in vs)


def expr_src(e: Expr) -> str:
    """Single-expression forms (the right-hand side of a let)."""
    match e:
        case FieldRead(f):
            return f"this.{f}"
        case MapRead(f, keys):
            return f"this.{f}" + "".join(f"[{value_src(k)}]" for k in keys)
        case BinOp(op, a, b):
            return f"{value_src(a)} {op} {value_src(b)}"
        case Not(v):
            return f"!{value_src(v)}"
        case Call(recv, m, args):
            return f"{value_src(recv)}.{m}({_args(args)})"
        case New(c, args):
            return f"new {c}({_args(args)})"
        case Cast(c, v):
            return f"({c}) {value_src(v)}"
        case AtkCast(v, c):
            return f"atk-cast {value_src(v)} as {c}"
        case Endorse(v, frm, to):
            return f"endorse({value_src(v)}, {label_src(frm)} -> {label_src(to)})"
        case Ref(init, ty):
            return f"ref<{type_src(ty)}>({value_src(init)})"
        case Deref(r):
            return f"deref({value_src(r)})"
    return value_src(e)


class _Out:
    def __init__(self):
        self.lines: list[str] = []

    def emit(self, depth: int, text: str):
        self.lines.append("    " * depth + text)


def _block(out: _Out, e: Expr, depth: int):
    """Print ``e`` as the statements of a block in tail position."""
    while isinstance(e, Let):
        bound = e.bound
        if e.name == "_":
            _effect(out, bound, depth)
            if isinstance(bound, _STMT_FORMS) and isinstance(e.body, UnitV):
                out.emit(depth, "return ();")
                return
        else:
            if isinstance(bound, _STMT_FORMS) or isinstance(bound, (FieldWrite, MapWrite, Assign)):
                raise PrintError(f"let {e.name} binds a statement form")
            head = type_src(e.ann) if e.ann is not None else "let"
            out.emit(depth, f"{head} {e.name} = {expr_src(bound)};")
        e = e.body
    if isinstance(e, UnitV):
        return
    if isinstance(e, _STMT_FORMS):
        _effect(out, e, depth)
    elif isinstance(e, (FieldWrite, MapWrite, Assign)):
        raise PrintError("assignment in tail position has no source form")
    else:
        out.emit(depth, f"return {expr_src(e)};")


def _effect(out: _Out, e: Expr, depth: int):
    match e:
        case FieldWrite(f, v):
            out.emit(depth, f"this.{f} = {value_src(v)};")
        case MapWrite(f, keys, v):
            idx = "".join(f"[{value_src(k)}]" for k in keys)
            out.emit(depth, f"this.{f}{idx} = {value_src(v)};")
        case Assign(r, v):
            out.emit(depth, f"{value_src(r)} := {value_src(v)};")
        case If(c, t, f):
            out.emit(depth, f"if ({value_src(c)}) {{")
            _block(out, t, depth + 1)
            _else(out, f, depth)
        case IfTrust(a, b, t, f):
            out.emit(depth, f"if ({value_src(a)} => {value_src(b)}) {{")
            _block(out, t, depth + 1)
            _else(out, f, depth)
        case Lock(l, body):
            out.emit(depth, f"lock({label_src(l)}) {{")
            _block(out, body, depth + 1)
            out.emit(depth, "}")
        case IgnoreLocks(body):
            out.emit(depth, "ignore-locks {")
            _block(out, body, depth + 1)
            out.emit(depth, "}")
        case Try(body, handlers):
            out.emit(depth, "try {")
            _block(out, body, depth + 1)
            for h in handlers:
                out.emit(depth, f"}} catch {h.exn}({', '.join(h.params)}) {{")
                _block(out, h.body, depth + 1)
            out.emit(depth, "}")
        case Atomic(body, var, rescue):
            out.emit(depth, "atomic {")
            _block(out, body, depth + 1)
            binder = "" if var == "_" else f"({var}) "
            out.emit(depth, f"}} rescue {binder}{{")
            _block(out, rescue, depth + 1)
            out.emit(depth, "}")
        case Throw(ExnV(name, args)):
            out.emit(depth, f"throw {name.rsplit('.', 1)[-1]}({_args(args)});")
        case Fail(v):
            out.emit(depth, f"fail {value_src(v)};")
        case _:
            out.emit(depth, f"{expr_src(e)};")


def _else(out: _Out, e: Expr, depth: int):
    if isinstance(e, UnitV):
        out.emit(depth, "}")
        return
    out.emit(depth, "} else {")
    _block(out, e, depth + 1)
    out.emit(depth, "}")


def method_src(m: MethodDecl, out: _Out, depth: int):
    s = m.sig
    head = "@public " if s.public else ""
    ret = "void" if isinstance(s.ret.base, UnitT) and s.ret.label == s.pc_in else type_src(s.ret)
    labels = f"{{{label_src(s.pc_ex)} -> {label_src(s.pc_in)}; {label_src(s.lock)}}}"
    params = ", ".join(("final " if p.final else "") + f"{type_src(p.type)} {p.name}"
                       for p in s.params)
    throws = ""
    if s.throws:
        throws = " throws (" + ", ".join(f"{n.rsplit('.', 1)[-1]}{{{label_src(l)}}}"
                                         for n, l in s.throws) + ")"
    sig = f"{head}{ret} {s.name}{labels}({params}){throws}"
    if m.body is None:
        out.emit(depth, sig + ";")
        return
    out.emit(depth, sig + " {")
    _block(out, m.body, depth + 1)
    out.emit(depth, "}")


def contract_src(c: ContractDecl) -> str:
    out = _Out()
    kw = "interface" if c.is_interface else "contract"
    ext = f" extends {c.superclass}" if c.superclass else ""
    out.emit(0, f"{kw} {c.name}{ext} {{")
    if c.trusts:
        out.emit(1, f"trust {', '.join(c.trusts)};")
    for e in c.exceptions:
        ps = ", ".join(("final " if p.final else "") + f"{type_src(p.type)} {p.name}"
                       for p in e.params)
        out.emit(1, f"exception {e.name}({ps});")
    for f in c.fields:
        out.emit(1, f"{'final ' if f.final else ''}{type_src(f.type)} {f.name};")
    for m in c.methods:
        method_src(m, out, 1)
    out.emit(0, "}")
    return "\n".join(out.lines) + "\n"


def program_src(contracts) -> str:
    return "\n".join(contract_src(c) for c in contracts)
