"""Surface syntax parser.

The surface language has statement blocks and nested expressions; lowering
turns it into the core form by naming every intermediate result with a
``Let``.  ``return e`` is only allowed in tail position; a method that
assigns the implicit ``result`` variable gets a result cell that is read back
at the end of the body.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional

from . import labels as L
from .ast import (ADDRESS, BOOL, INT, UNIT, AddressT, AddrV, Assign, AtkCast,
                  Atomic, Base, BinOp, BoolT, BoolV, Call, Cast, ContractDecl,
                  ContractT, Deref, Endorse, ExnDecl, ExnV, Expr, Fail,
                  FieldDecl, FieldRead, FieldWrite, Handler, If, IfTrust,
                  IgnoreLocks, IntT, IntV, Let, Lock, MapRead, MappingT,
                  MapWrite, MethodDecl, MethodSig, New, Not, Param, Pos, Ref,
                  RefT, Throw, Try, Type, UnitT, UnitV, Value, Var)
from .diagnostics import Diagnostic, ParseError
from .table import ContractTable

KEYWORDS = frozenset("""
contract interface extends exception final mapping if else lock try catch atomic
rescue throw fail assert return let endorse new this sender any ref deref true
false trust throws void bool uint address unit as
""".split())

_TOKEN_RE = re.compile(r"""
  (?P<ws>[ \t\r]+|//[^\n]*)
| (?P<nl>\n)
| (?P<special>@public\b|atk-cast\b|ignore-locks\b)
| (?P<addr>@[A-Za-z0-9_]+)
| (?P<int>[0-9]+)
| (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
| (?P<op>\\/|/\\|->|=>|:=|==|!=|<=|>=|&&|\|\||[{}()\[\];,.=<>+\-*/%!])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # int, ident, kw, addr, op, eof
    text: str
    pos: Pos


def tokenize(src: str) -> list[Token]:
    out: list[Token] = []
    line, line_start, i = 1, 0, 0
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if not m:
            pos = Pos(line, i - line_start + 1)
            raise ParseError([Diagnostic("syntax", f"unexpected character {src[i]!r}", pos)])
        kind = m.lastgroup
        text = m.group()
        pos = Pos(line, i - line_start + 1)
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "ident":
            out.append(Token("kw" if text in KEYWORDS else "ident", text, pos))
        elif kind == "special":
            out.append(Token("kw", text, pos))
        elif kind != "ws":
            out.append(Token(kind, text, pos))
        i = m.end()
    out.append(Token("eof", "", Pos(line, i - line_start + 1)))
    return out


# -- surface expressions -----------------------------------------------------------

@dataclass
class SLit:
    value: Value
    pos: Pos


@dataclass
class SName:
    name: str
    pos: Pos


@dataclass
class SField:
    name: str
    pos: Pos


@dataclass
class SIndex:
    field: str
    keys: list
    pos: Pos


@dataclass
class SBin:
    op: str
    left: object
    right: object
    pos: Pos


@dataclass
class SNot:
    value: object
    pos: Pos


@dataclass
class SCall:
    recv: object
    method: str
    args: list
    pos: Pos


@dataclass
class SNew:
    contract: str
    args: list
    pos: Pos


@dataclass
class SCast:
    contract: str
    value: object
    pos: Pos


@dataclass
class SAtk:
    value: object
    contract: str
    pos: Pos


@dataclass
class SEndorse:
    value: object
    frm: L.Label
    to: L.Label
    pos: Pos


@dataclass
class SRef:
    type: Type
    init: object
    pos: Pos


@dataclass
class SDeref:
    ref: object
    pos: Pos


# -- surface statements ----------------------------------------------------------------

@dataclass
class SLet:
    name: str
    ann: Optional[Type]
    value: object
    pos: Pos


@dataclass
class SAssign:
    target: object
    value: object
    pos: Pos


@dataclass
class SRefAssign:
    ref: object
    value: object
    pos: Pos


@dataclass
class SExprStmt:
    value: object
    pos: Pos


@dataclass
class SIf:
    cond: object
    then: list
    else_: list
    pos: Pos


@dataclass
class SIfTrust:
    lo: object
    hi: object
    then: list
    else_: list
    pos: Pos


@dataclass
class SLock:
    label: L.Label
    body: list
    pos: Pos


@dataclass
class STry:
    body: list
    handlers: list  # (name, params, body, pos)
    pos: Pos


@dataclass
class SAtomic:
    body: list
    var: str
    rescue: list
    pos: Pos


@dataclass
class SIgnore:
    body: list
    pos: Pos


@dataclass
class SThrow:
    exn: str
    args: list
    pos: Pos


@dataclass
class SFail:
    value: object
    pos: Pos


@dataclass
class SAssert:
    cond: object
    pos: Pos


@dataclass
class SReturn:
    value: object
    pos: Pos


_COMPOUND_STMTS = (SIf, SIfTrust, SLock, STry, SAtomic, SIgnore, SThrow, SFail, SAssert)


def zero_value(base: Base) -> Value:
    match base:
        case IntT():
            return IntV(0)
        case BoolT():
            return BoolV(False)
        case AddressT() | ContractT():
            return AddrV("@0")
    return UnitV()


# -- parser ----------------------------------------------------------------------------------

class Parser:
    def __init__(self, src: str, filename: Optional[str] = None):
        self.toks = tokenize(src)
        self.i = 0
        self.filename = filename

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("op", "kw") and t.text in texts

    def error(self, msg: str, tok: Optional[Token] = None):
        tok = tok or self.tok
        found = tok.text or "end of input"
        raise ParseError([Diagnostic("syntax", f"{msg} (found {found!r})", tok.pos,
                                     file=self.filename)])

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.error(f"expected {text!r}")
        return self.advance()

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.advance()
            return True
        return False

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            self.error("expected identifier")
        return self.advance()

    # declarations
    def program(self) -> list[ContractDecl]:
        out = []
        while self.tok.kind != "eof":
            out.append(self.contract())
        return out

    def contract(self) -> ContractDecl:
        start = self.tok
        if not self.at("contract", "interface"):
            self.error("expected 'contract' or 'interface'")
        is_iface = self.advance().text == "interface"
        name = self.ident().text
        sup = None
        if self.accept("extends"):
            sup = self.ident().text
        self.expect("{")
        fields, exns, methods, trusts = [], [], [], []
        while not self.at("}"):
            if self.tok.kind == "eof":
                self.error("unterminated contract body")
            if self.at("exception"):
                exns.append(self.exception_decl(name))
            elif self.at("trust"):
                self.advance()
                while True:
                    t = self.advance()
                    if t.kind not in ("addr", "ident"):
                        self.error("expected principal in trust declaration", t)
                    trusts.append(t.text)
                    if not self.accept(","):
                        break
                self.expect(";")
            else:
                member = self.member(is_iface)
                (methods if isinstance(member, MethodDecl) else fields).append(member)
        self.expect("}")
        return ContractDecl(name, sup, is_iface, tuple(fields), tuple(exns),
                            tuple(methods), tuple(trusts), pos=start.pos)

    def exception_decl(self, owner: str) -> ExnDecl:
        start = self.expect("exception")
        name = self.ident().text
        self.expect("(")
        params = []
        if not self.at(")"):
            while True:
                final = self.accept("final")
                ty = self.type_(default=L.ANY)
                params.append(Param(self.ident().text, ty, final))
                if not self.accept(","):
                    break
        self.expect(")")
        self.expect(";")
        return ExnDecl(name, owner, tuple(params), pos=start.pos)

    def member(self, is_iface: bool):
        start = self.tok
        public = self.accept("@public")
        final = self.accept("final")
        if self.at("void"):
            self.advance()
            ret_base, ret_label = UNIT, None
        else:
            ret_base, ret_label = self.type_parts()
        name_tok = self.ident()
        if self.at(";") and not public:
            self.advance()
            if is_iface:
                self.error("interfaces cannot declare fields", name_tok)
            ty = self.fill_type(ret_base, ret_label, L.THIS)
            return FieldDecl(name_tok.text, ty, final, pos=name_tok.pos)
        if final:
            self.error("methods cannot be final", start)
        return self.method_rest(public, ret_base, ret_label, name_tok, is_iface, start)

    def method_rest(self, public, ret_base, ret_label, name_tok, is_iface, start) -> MethodDecl:
        if public:
            pc_ex, pc_in, lock = L.Atom("sender"), L.THIS, L.THIS
        else:
            pc_ex = pc_in = lock = L.THIS
        if self.accept("{"):
            pc_ex = self.label()
            pc_in = pc_ex
            if self.accept("->"):
                pc_in = self.label()
            lock = pc_in
            if self.accept(";"):
                lock = self.label()
            self.expect("}")
        self.expect("(")
        params = []
        if not self.at(")"):
            while True:
                final = self.accept("final")
                base, lab = self.type_parts()
                pname = self.ident().text
                params.append(Param(pname, Type(base, lab if lab is not None else pc_ex),
                                    final, defaulted=lab is None))
                if not self.accept(","):
                    break
        self.expect(")")
        throws = []
        if self.accept("throws"):
            self.expect("(")
            while True:
                ex = self.ident().text
                lab = pc_in
                if self.accept("{"):
                    lab = self.label()
                    self.expect("}")
                throws.append((ex, lab))
                if not self.accept(","):
                    break
            self.expect(")")
        ret = self.fill_type(ret_base, ret_label, pc_in)
        sig = MethodSig(name_tok.text, tuple(params), ret, pc_ex, pc_in, lock,
                        tuple(throws), public)
        if self.accept(";"):
            if not is_iface:
                self.error(f"method {sig.name!r} needs a body", name_tok)
            return MethodDecl(sig, None, pos=start.pos)
        if is_iface:
            self.error("interface methods cannot have bodies")
        body_stmts = self.block()
        body = Lowerer(sig, self.filename).method_body(body_stmts)
        return MethodDecl(sig, body, pos=start.pos)

    # types and labels
    def type_parts(self) -> tuple[Base, Optional[L.Label]]:
        t = self.tok
        if self.at("uint"):
            self.advance()
            base: Base = INT
        elif self.at("bool"):
            self.advance()
            base = BOOL
        elif self.at("address"):
            self.advance()
            base = ADDRESS
        elif self.at("unit"):
            self.advance()
            base = UNIT
        elif self.at("mapping"):
            self.advance()
            self.expect("(")
            kb, kl = self.type_parts()
            if kl is not None:
                self.error("mapping keys carry no label")
            key_var = self.ident().text if self.tok.kind == "ident" else None
            self.expect(",")
            vb, vl = self.type_parts()
            self.expect(")")
            base = MappingT(kb, Type(vb, vl), key_var)  # value label filled later
        elif self.at("ref"):
            self.advance()
            self.expect("<")
            inner = self.type_(default=L.THIS)
            self.expect(">")
            base = RefT(inner)
        elif t.kind == "ident":
            self.advance()
            base = ContractT(t.text)
        else:
            self.error("expected a type")
        lab = None
        if self.at("{") and not (self.peek().kind == "op" and self.peek().text == "}"):
            # '{' after a type is a label unless it opens an empty block
            save = self.i
            self.advance()
            if self._looks_like_label():
                lab = self.label()
                self.expect("}")
            else:
                self.i = save
        return base, lab

    def _looks_like_label(self) -> bool:
        # a label is followed by '}' ; '->' and ';' mark method signatures
        j = self.i
        depth = 0
        while j < len(self.toks):
            t = self.toks[j]
            if t.kind == "op" and t.text == "(":
                depth += 1
            elif t.kind == "op" and t.text == ")":
                depth -= 1
            elif t.kind == "op" and t.text == "}" and depth == 0:
                return True
            elif not (t.kind in ("ident", "addr") or t.text in ("this", "any", "sender", "\\/", "/\\", "(", ")")):
                return False
            j += 1
        return False

    def fill_type(self, base: Base, lab: Optional[L.Label], default: L.Label) -> Type:
        if isinstance(base, MappingT):
            base = self.fill_mapping(base, default)
        return Type(base, lab if lab is not None else default)

    def fill_mapping(self, m: MappingT, default: L.Label) -> MappingT:
        vb, vl = m.value.base, m.value.label
        if isinstance(vb, MappingT):
            vb = self.fill_mapping(vb, default)
        return MappingT(m.key, Type(vb, vl if vl is not None else default), m.key_var)

    def type_(self, default: L.Label) -> Type:
        base, lab = self.type_parts()
        return self.fill_type(base, lab, default)

    def label(self) -> L.Label:
        l = self.label_meet()
        while self.accept("\\/"):
            l = L.Join(l, self.label_meet())
        return l

    def label_meet(self) -> L.Label:
        l = self.label_atom()
        while self.accept("/\\"):
            l = L.Meet(l, self.label_atom())
        return l

    def label_atom(self) -> L.Label:
        t = self.advance()
        if t.kind == "op" and t.text == "(":
            l = self.label()
            self.expect(")")
            return l
        if t.text == "this":
            return L.THIS
        if t.text == "any":
            return L.ANY
        if t.text == "sender" or t.kind in ("ident", "addr"):
            return L.Atom(t.text)
        self.error("expected a label", t)

    # statements
    def block(self) -> list:
        self.expect("{")
        out = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                self.error("unterminated block")
            out.append(self.statement())
        self.expect("}")
        return out

    def _is_decl_start(self) -> bool:
        t = self.tok
        if t.kind == "kw" and t.text in ("uint", "bool", "address", "unit", "mapping", "ref", "final"):
            return not (t.text == "ref" and self.peek().text == "(")
        if t.kind == "ident":
            nxt = self.peek()
            return nxt.kind == "ident" or (nxt.kind == "op" and nxt.text == "{")
        return False

    def statement(self):
        t = self.tok
        pos = t.pos
        if self.at("let"):
            self.advance()
            name = self.ident().text
            self.expect("=")
            value = self.expr()
            self.expect(";")
            return SLet(name, None, value, pos)
        if self._is_decl_start():
            self.accept("final")
            base, lab = self.type_parts()
            name = self.ident().text
            self.expect("=")
            value = self.expr()
            self.expect(";")
            ann = Type(self.fill_mapping(base, L.THIS) if isinstance(base, MappingT) else base, lab)
            return SLet(name, ann, value, pos)
        if self.at("if"):
            return self.if_stmt()
        if self.at("lock"):
            self.advance()
            self.expect("(")
            lab = self.label()
            self.expect(")")
            return SLock(lab, self.block(), pos)
        if self.at("try"):
            self.advance()
            body = self.block()
            handlers = []
            while self.at("catch"):
                hpos = self.advance().pos
                ex = self.ident().text
                self.expect("(")
                params = []
                if not self.at(")"):
                    while True:
                        params.append(self.ident().text)
                        if not self.accept(","):
                            break
                self.expect(")")
                handlers.append((ex, params, self.block(), hpos))
            if not handlers:
                self.error("try needs at least one catch")
            return STry(body, handlers, pos)
        if self.at("atomic"):
            self.advance()
            body = self.block()
            self.expect("rescue")
            var = "_"
            if self.accept("("):
                var = self.ident().text
                self.expect(")")
            return SAtomic(body, var, self.block(), pos)
        if self.at("ignore-locks"):
            self.advance()
            return SIgnore(self.block(), pos)
        if self.at("throw"):
            self.advance()
            ex = self.ident().text
            self.expect("(")
            args = self.args_rest()
            self.expect(";")
            return SThrow(ex, args, pos)
        if self.at("fail"):
            self.advance()
            value = None if self.at(";") else self.expr()
            self.expect(";")
            return SFail(value, pos)
        if self.at("assert"):
            self.advance()
            cond = self.expr()
            self.expect(";")
            return SAssert(cond, pos)
        if self.at("return"):
            self.advance()
            value = None if self.at(";") else self.expr()
            self.expect(";")
            return SReturn(value, pos)
        e = self.expr()
        if self.accept("="):
            if not isinstance(e, (SName, SField, SIndex)):
                self.error("invalid assignment target", t)
            value = self.expr()
            self.expect(";")
            return SAssign(e, value, pos)
        if self.accept(":="):
            value = self.expr()
            self.expect(";")
            return SRefAssign(e, value, pos)
        self.expect(";")
        return SExprStmt(e, pos)

    def if_stmt(self):
        pos = self.expect("if").pos
        self.expect("(")
        cond = self.expr()
        hi = None
        if self.accept("=>"):
            hi = self.expr()
            for side in (cond, hi):
                simple = isinstance(side, SName) or (
                    isinstance(side, SLit) and isinstance(side.value, AddrV))
                if not simple:
                    raise ParseError([Diagnostic(
                        "syntax", "dynamic trust checks relate principals only; "
                        "compound labels cannot be checked", side.pos, file=self.filename)])
        self.expect(")")
        then = self.block()
        else_: list = []
        if self.accept("else"):
            else_ = [self.if_stmt()] if self.at("if") else self.block()
        if hi is not None:
            return SIfTrust(cond, hi, then, else_, pos)
        return SIf(cond, then, else_, pos)

    # expressions
    def expr(self):
        return self.or_expr()

    def or_expr(self):
        l = self.and_expr()
        while self.at("||"):
            pos = self.advance().pos
            l = SBin("||", l, self.and_expr(), pos)
        return l

    def and_expr(self):
        l = self.cmp_expr()
        while self.at("&&"):
            pos = self.advance().pos
            l = SBin("&&", l, self.cmp_expr(), pos)
        return l

    def cmp_expr(self):
        l = self.add_expr()
        if self.at("<", "<=", ">", ">=", "==", "!="):
            t = self.advance()
            l = SBin(t.text, l, self.add_expr(), t.pos)
        return l

    def add_expr(self):
        l = self.mul_expr()
        while self.at("+", "-"):
            t = self.advance()
            l = SBin(t.text, l, self.mul_expr(), t.pos)
        return l

    def mul_expr(self):
        l = self.unary()
        while self.at("*", "/", "%"):
            t = self.advance()
            l = SBin(t.text, l, self.unary(), t.pos)
        return l

    def unary(self):
        t = self.tok
        if self.at("!"):
            self.advance()
            return SNot(self.unary(), t.pos)
        if self.at("-") and self.peek().kind == "int":
            self.advance()
            return SLit(IntV(-int(self.advance().text), pos=t.pos), t.pos)
        if self.at("atk-cast"):
            self.advance()
            v = self.unary()
            self.expect("as")
            return SAtk(v, self.ident().text, t.pos)
        return self.postfix()

    def args_rest(self) -> list:
        args = []
        if not self.at(")"):
            while True:
                args.append(self.expr())
                if not self.accept(","):
                    break
        self.expect(")")
        return args

    def postfix(self):
        e = self.primary()
        while True:
            if self.at("."):
                self.advance()
                name = self.ident()
                if self.accept("("):
                    e = SCall(e, name.text, self.args_rest(), name.pos)
                elif isinstance(e, SName) and e.name == "this":
                    e = SField(name.text, name.pos)
                else:
                    self.error("only fields of 'this' can be accessed", name)
            elif self.at("["):
                pos = self.advance().pos
                key = self.expr()
                self.expect("]")
                if isinstance(e, (SName, SField)):
                    e = SIndex(e.name, [key], e.pos)
                elif isinstance(e, SIndex):
                    e.keys.append(key)
                else:
                    self.error("only mapping fields can be indexed")
            else:
                return e

    def primary(self):
        t = self.tok
        if t.kind == "int":
            self.advance()
            return SLit(IntV(int(t.text), pos=t.pos), t.pos)
        if t.kind == "addr":
            self.advance()
            return SLit(AddrV(t.text, pos=t.pos), t.pos)
        if self.at("true", "false"):
            self.advance()
            return SLit(BoolV(t.text == "true", pos=t.pos), t.pos)
        if self.at("this", "sender"):
            self.advance()
            return SName(t.text, t.pos)
        if t.kind == "ident":
            self.advance()
            return SName(t.text, t.pos)
        if self.at("new"):
            self.advance()
            name = self.ident().text
            self.expect("(")
            return SNew(name, self.args_rest(), t.pos)
        if self.at("endorse"):
            self.advance()
            self.expect("(")
            v = self.expr()
            self.expect(",")
            frm = self.label()
            self.expect("->")
            to = self.label()
            self.expect(")")
            return SEndorse(v, frm, to, t.pos)
        if self.at("ref"):
            self.advance()
            self.expect("<")
            ty = self.type_(default=L.THIS)
            self.expect(">")
            self.expect("(")
            init = self.expr()
            self.expect(")")
            return SRef(ty, init, t.pos)
        if self.at("deref"):
            self.advance()
            self.expect("(")
            r = self.expr()
            self.expect(")")
            return SDeref(r, t.pos)
        if self.at("("):
            self.advance()
            if self.accept(")"):
                return SLit(UnitV(pos=t.pos), t.pos)
            nxt = self.peek()
            if (self.tok.kind == "ident" and self.tok.text[:1].isupper()
                    and nxt.kind == "op" and nxt.text == ")"):
                name = self.advance().text
                self.advance()
                return SCast(name, self.unary(), t.pos)
            e = self.expr()
            self.expect(")")
            return e
        self.error("expected an expression")


# -- lowering to core --------------------------------------------------------------------------

def _has_result_assign(stmts: list) -> bool:
    for s in stmts:
        match s:
            case SLet(name="result"):
                return False
            case SAssign(target=SName(name="result")):
                return True
            case SIf(then=a, else_=b) | SIfTrust(then=a, else_=b) | SAtomic(body=a, rescue=b):
                if _has_result_assign(a) or _has_result_assign(b):
                    return True
            case SLock(body=a) | SIgnore(body=a):
                if _has_result_assign(a):
                    return True
            case STry(body=a, handlers=hs):
                if _has_result_assign(a) or any(_has_result_assign(h[2]) for h in hs):
                    return True
    return False


class Lowerer:
    def __init__(self, sig: MethodSig, filename: Optional[str] = None):
        self.sig = sig
        self.filename = filename
        self.counter = 0
        self.result_mode = False

    def error(self, msg: str, pos: Pos):
        raise ParseError([Diagnostic("syntax", msg, pos, file=self.filename)])

    def fresh(self) -> str:
        self.counter += 1
        return f"_t{self.counter}"

    def method_body(self, stmts: list) -> Expr:
        scope = frozenset(p.name for p in self.sig.params) | {"this", "sender"}
        if not isinstance(self.sig.ret.base, UnitT) and _has_result_assign(stmts):
            self.result_mode = True
            stmts = list(stmts)
            end_pos = stmts[-1].pos if stmts else Pos(0, 0)
            if stmts and isinstance(stmts[-1], SReturn):
                last = stmts.pop()
                if last.value is not None:
                    stmts.append(SAssign(SName("result", last.pos), last.value, last.pos))
            stmts.append(SReturn(SDeref(SName("result", end_pos), end_pos), end_pos))
            init = zero_value(self.sig.ret.base)
            body = self.block(stmts, scope | {"result"})
            return Let("result", Ref(init, self.sig.ret, pos=end_pos), body)
        return self.block(stmts, scope)

    @staticmethod
    def wrap(binds: list, e: Expr) -> Expr:
        for name, bound, pos in reversed(binds):
            e = Let(name, bound, e, pos=pos)
        return e

    def block(self, stmts: list, scope: frozenset) -> Expr:
        if not stmts:
            return UnitV()
        s, rest = stmts[0], stmts[1:]
        last = not rest
        if isinstance(s, SReturn):
            if not last:
                self.error("return must be the last statement of a block", s.pos)
            if s.value is None:
                return UnitV(pos=s.pos)
            binds, e = self.complex(s.value, scope)
            return self.wrap(binds, e)
        if isinstance(s, SLet):
            if s.name in ("this", "sender", "_"):
                self.error(f"cannot rebind {s.name!r}", s.pos)
            binds, e = self.complex(s.value, scope)
            body = self.block(rest, scope | {s.name}) if rest else UnitV()
            return self.wrap(binds, Let(s.name, e, body, s.ann, pos=s.pos))
        binds, e = self.statement(s, scope)
        if last and isinstance(s, _COMPOUND_STMTS):
            return self.wrap(binds, e)
        body = self.block(rest, scope) if rest else UnitV()
        return self.wrap(binds, Let("_", e, body, pos=s.pos))

    def statement(self, s, scope: frozenset) -> tuple[list, Expr]:
        match s:
            case SAssign(target, value, pos):
                binds, v = self.atom(value, scope)
                match target:
                    case SName(name) if name in scope:
                        if name != "result" or not self.result_mode:
                            self.error(f"local {name!r} is immutable; use a ref cell", pos)
                        return binds, Assign(Var("result", pos=target.pos), v, pos=pos)
                    case SName(name) | SField(name):
                        return binds, FieldWrite(name, v, pos=pos)
                    case SIndex(fieldname, keys):
                        kb, kvs = self.atoms(keys, scope)
                        return kb + binds, MapWrite(fieldname, tuple(kvs), v, pos=pos)
            case SRefAssign(ref, value, pos):
                rb, r = self.atom(ref, scope)
                vb, v = self.atom(value, scope)
                return rb + vb, Assign(r, v, pos=pos)
            case SExprStmt(value):
                return self.complex(value, scope)
            case SIf(cond, then, else_, pos):
                binds, c = self.atom(cond, scope)
                return binds, If(c, self.block(then, scope), self.block(else_, scope), pos=pos)
            case SIfTrust(lo, hi, then, else_, pos):
                lb, lv = self.atom(lo, scope)
                hb, hv = self.atom(hi, scope)
                return lb + hb, IfTrust(lv, hv, self.block(then, scope),
                                        self.block(else_, scope), pos=pos)
            case SLock(label, body, pos):
                return [], Lock(label, self.block(body, scope), pos=pos)
            case STry(body, handlers, pos):
                hs = tuple(Handler(ex, tuple(ps), self.block(b, scope | set(ps)), pos=hp)
                           for ex, ps, b, hp in handlers)
                return [], Try(self.block(body, scope), hs, pos=pos)
            case SAtomic(body, var, rescue, pos):
                inner = scope | {var} if var != "_" else scope
                return [], Atomic(self.block(body, scope), var, self.block(rescue, inner), pos=pos)
            case SIgnore(body, pos):
                return [], IgnoreLocks(self.block(body, scope), pos=pos)
            case SThrow(exn, args, pos):
                binds, vs = self.atoms(args, scope)
                return binds, Throw(ExnV(exn, tuple(vs), pos=pos), pos=pos)
            case SFail(value, pos):
                if value is None:
                    return [], Fail(UnitV(pos=pos), pos=pos)
                binds, v = self.atom(value, scope)
                return binds, Fail(v, pos=pos)
            case SAssert(cond, pos):
                binds, c = self.atom(cond, scope)
                return binds, If(c, UnitV(), Fail(UnitV(pos=pos), pos=pos), pos=pos)
        self.error("unsupported statement", s.pos)

    def atoms(self, ses: list, scope: frozenset) -> tuple[list, list]:
        binds, vals = [], []
        for se in ses:
            b, v = self.atom(se, scope)
            binds += b
            vals.append(v)
        return binds, vals

    def atom(self, se, scope: frozenset) -> tuple[list, Value]:
        if isinstance(se, SLit):
            return [], se.value
        if isinstance(se, SName) and se.name in scope:
            return [], Var(se.name, pos=se.pos)
        binds, e = self.complex(se, scope)
        if isinstance(e, Value):
            return binds, e
        t = self.fresh()
        return binds + [(t, e, se.pos)], Var(t, pos=se.pos)

    def complex(self, se, scope: frozenset) -> tuple[list, Expr]:
        match se:
            case SLit(value):
                return [], value
            case SName(name, pos):
                if name in scope:
                    return [], Var(name, pos=pos)
                return [], FieldRead(name, pos=pos)
            case SField(name, pos):
                return [], FieldRead(name, pos=pos)
            case SIndex(fieldname, keys, pos):
                binds, ks = self.atoms(keys, scope)
                return binds, MapRead(fieldname, tuple(ks), pos=pos)
            case SBin(op, l, r, pos):
                lb, lv = self.atom(l, scope)
                rb, rv = self.atom(r, scope)
                return lb + rb, BinOp(op, lv, rv, pos=pos)
            case SNot(v, pos):
                binds, x = self.atom(v, scope)
                return binds, Not(x, pos=pos)
            case SCall(recv, method, args, pos):
                rb, rv = self.atom(recv, scope)
                ab, avs = self.atoms(args, scope)
                return rb + ab, Call(rv, method, tuple(avs), pos=pos)
            case SNew(contract, args, pos):
                binds, vs = self.atoms(args, scope)
                return binds, New(contract, tuple(vs), pos=pos)
            case SCast(contract, v, pos):
                binds, x = self.atom(v, scope)
                return binds, Cast(contract, x, pos=pos)
            case SAtk(v, contract, pos):
                binds, x = self.atom(v, scope)
                return binds, AtkCast(x, contract, pos=pos)
            case SEndorse(v, frm, to, pos):
                binds, x = self.atom(v, scope)
                return binds, Endorse(x, frm, to, pos=pos)
            case SRef(ty, init, pos):
                binds, x = self.atom(init, scope)
                return binds, Ref(x, ty, pos=pos)
            case SDeref(r, pos):
                binds, x = self.atom(r, scope)
                return binds, Deref(x, pos=pos)
        raise ParseError([Diagnostic("syntax", f"unsupported expression {se!r}",
                                     getattr(se, "pos", None), file=self.filename)])


# -- entry points --------------------------------------------------------------------------------

def parse_contracts(src: str, filename: Optional[str] = None) -> list[ContractDecl]:
    return Parser(src, filename).program()


def build_table(decls: list[ContractDecl], filename: Optional[str] = None) -> ContractTable:
    """Check declaration-level well-formedness and qualify exception names."""
    diags: list[Diagnostic] = []
    names: dict[str, ContractDecl] = {}
    exns: dict[str, ExnDecl] = {}
    for c in decls:
        if c.name in names:
            diags.append(Diagnostic("duplicate", f"duplicate contract {c.name!r}", c.pos, file=filename))
        names[c.name] = c
        seen_m: set[str] = set()
        for m in c.methods:
            if m.sig.name in seen_m:
                diags.append(Diagnostic("duplicate", f"duplicate method {c.name}.{m.sig.name}",
                                        m.pos, file=filename))
            seen_m.add(m.sig.name)
        for e in c.exceptions:
            if e.name in exns:
                diags.append(Diagnostic("duplicate", f"duplicate exception {e.name!r}", e.pos, file=filename))
            exns[e.name] = e
    for c in decls:
        own: dict[str, FieldDecl] = {}
        for f in c.fields:
            if f.name in own:
                diags.append(Diagnostic("duplicate", f"duplicate field {c.name}.{f.name}", f.pos, file=filename))
            own[f.name] = f
        sup, guard = c.superclass, {c.name}
        while sup is not None and sup in names and sup not in guard:
            guard.add(sup)
            for f in names[sup].fields:
                if f.name in own:
                    diags.append(Diagnostic("duplicate", f"field {f.name!r} of {c.name} shadows "
                                            f"a field of {sup}", own[f.name].pos, file=filename))
            sup = names[sup].superclass
    qualified = []
    for c in decls:
        methods = []
        for m in c.methods:
            throws = []
            for ex, lab in m.sig.throws:
                short = ex.rsplit(".", 1)[-1]
                if short not in exns:
                    diags.append(Diagnostic("syntax", f"unknown exception {ex!r} in throws clause",
                                            m.pos, file=filename))
                    throws.append((ex, lab))
                else:
                    throws.append((exns[short].qualname, lab))
            methods.append(replace(m, sig=replace(m.sig, throws=tuple(throws))))
        qualified.append(replace(c, methods=tuple(methods)))
    if diags:
        raise ParseError(diags)
    return ContractTable(qualified)


def parse_program(src: str, filename: Optional[str] = None) -> ContractTable:
    """Parse source text into a contract table with all defaults applied."""
    return build_table(parse_contracts(src, filename), filename)


def parse_files(paths) -> ContractTable:
    decls = []
    diags = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            src = fh.read()
        try:
            decls.extend(parse_contracts(src, str(p)))
        except ParseError as err:
            diags.extend(err.diagnostics)
    if diags:
        raise ParseError(diags)
    return build_table(decls)
