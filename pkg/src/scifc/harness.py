"""Attack harness: confused-deputy detection, attacker generation, corpus
mutations and scenario execution."""

from __future__ import annotations

import dataclasses
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import labels as L
from .ast import (AddressT, AddrV, Atomic, BoolT, BoolV, Call, ContractDecl,
                  ContractT, FieldWrite, IntT, IntV, Let, Lock, MethodDecl,
                  MethodSig, Param, Type, UnitV)
from .interpreter import SECURITY_FAILURES, Receipt, run_transaction
from .library import CORPUS, corpus_decls
from .parser import build_table, parse_contracts
from .state import ChainState, StateError, decode, encode
from .table import ContractTable, LookupFailure, all_methods, lookup_method


class HarnessError(ValueError):
    pass


# -- confused-deputy events -----------------------------------------------------------------------

@dataclass(frozen=True)
class CdaEvent:
    index: int  # position in the trace
    pc_env: L.Label
    pc_ex: L.Label
    label: L.Label
    callee: str
    method: str

    def to_record(self) -> dict:
        return {"index": self.index, "pc_env": L.canonical(self.pc_env),
                "pc_ex": L.canonical(self.pc_ex), "label": L.canonical(self.label),
                "callee": self.callee, "method": self.method}


def detect_cda_events(trace, label, trust=frozenset(), callees=None) -> list[CdaEvent]:
    """Calls made at integrity below ``label`` into code that demands it.

    ``callees`` optionally restricts attention to calls into the named
    contracts; attacker code declaring a victim's label on its own methods
    holds none of the victim's authority.
    """
    if isinstance(label, str):
        label = L.Atom(label)
    out = []
    for i, ev in enumerate(trace):
        if ev.get("ev") != "call" or ev.get("contract") is None:
            continue
        if callees is not None and ev["contract"] not in callees:
            continue
        env, ex = ev["pc_env"], ev["pc_ex"]
        if not L.flows_to(env, label, trust) and L.flows_to(ex, label, trust):
            out.append(CdaEvent(i, env, ex, label, ev["callee"], ev["method"]))
    return out


def lock_violations(trace, trust=frozenset()) -> list[int]:
    """Auto-endorsed entries made while a lock the entry cannot bypass was held."""
    held: list = []
    bad = []
    for i, ev in enumerate(trace):
        kind = ev.get("ev")
        if kind == "lock":
            held.append(ev["label"])
        elif kind == "unlock":
            held.remove(ev["label"])
        elif kind == "rollback" and ev.get("top"):
            held.clear()
        elif kind == "auto_endorse" and not ev.get("ignored"):
            if not all(L.flows_to(ev["frm"], h, trust) for h in held):
                bad.append(i)
    return bad


# -- corpus mutations -----------------------------------------------------------------------------

MUTATIONS = ("identity", "remove_lock", "make_public", "late_counter_update", "swallow_failure")


def mutate_corpus(contract: ContractDecl, mutation: str, method: Optional[str] = None,
                  **opts) -> ContractDecl:
    """The historically vulnerable variant of ``contract``."""
    if mutation not in MUTATIONS:
        raise HarnessError(f"unknown mutation {mutation!r}; choose from {', '.join(MUTATIONS)}")
    if mutation == "identity":
        return contract
    targets = [m for m in contract.methods if m.body is not None
               and (method is None or m.sig.name == method)]
    if not targets:
        raise HarnessError(f"{contract.name} has no method {method!r} to mutate")
    fn = globals()["_mut_" + mutation]
    changed = False
    methods = []
    for m in contract.methods:
        if m in targets and not changed:
            new = fn(m, **opts)
            changed = new is not None
            methods.append(new or m)
        else:
            methods.append(m)
    if not changed:
        raise HarnessError(f"mutation {mutation} does not apply to {contract.name}")
    return dataclasses.replace(contract, methods=tuple(methods))


def _unwrap_locks(e):
    """Body with every dynamic lock removed; None when there was none."""
    match e:
        case Lock(_, body):
            return _unwrap_locks(body) or body
        case Let("_", Lock(_, inner), rest):
            # splice the block into the sequence so it stays a statement list
            return _splice(_unwrap_locks(inner) or inner, _unwrap_locks(rest) or rest)
        case Let(name, bound, body, ann):
            b1, b2 = _unwrap_locks(bound), _unwrap_locks(body)
            if b1 is None and b2 is None:
                return None
            return Let(name, b1 or bound, b2 or body, ann, pos=e.pos)
    return None


def _splice(block, rest):
    match block:
        case Let(name, bound, body, ann):
            return Let(name, bound, _splice(body, rest), ann, pos=block.pos)
        case UnitV():
            return rest
    return Let("_", block, rest, pos=block.pos)


def _mut_remove_lock(m: MethodDecl) -> Optional[MethodDecl]:
    body = _unwrap_locks(m.body)
    return None if body is None else dataclasses.replace(m, body=body)


def _mut_make_public(m: MethodDecl) -> Optional[MethodDecl]:
    if m.sig.public:
        return None
    sender = L.Atom("sender")
    params = tuple(dataclasses.replace(p, type=Type(p.type.base, sender)) if p.defaulted else p
                   for p in m.sig.params)
    sig = dataclasses.replace(m.sig, public=True, pc_ex=sender, pc_in=sender, lock=sender,
                              params=params)
    return dataclasses.replace(m, sig=sig)


def _mut_late_counter_update(m: MethodDecl, counter: Optional[str] = None):
    """Move the first field write to after the last external call."""
    write = None

    def strip(e):
        nonlocal write
        match e:
            case Let("_", FieldWrite(f, _) as w, body) if write is None and counter in (None, f):
                write = w
                return strip(body)
            case Let(name, bound, body, ann):
                return Let(name, bound, strip(body), ann, pos=e.pos)
            case Lock(_, body):
                return strip(body)
        return e

    body = strip(m.body)
    if write is None:
        return None
    return dataclasses.replace(m, body=_append(body, write))


def _append(e, stmt):
    """``e; stmt`` where ``e`` is a unit-valued block."""
    match e:
        case Let(name, bound, body, ann):
            return Let(name, bound, _append(body, stmt), ann, pos=e.pos)
        case UnitV():
            return Let("_", stmt, UnitV(), pos=stmt.pos)
    return Let("_", e, Let("_", stmt, UnitV(), pos=stmt.pos), pos=getattr(e, "pos", None))


def _mut_swallow_failure(m: MethodDecl, callee: str = "transfer"):
    """Wrap the last call to ``callee`` in an atomic block with an empty rescue."""
    done = False

    def walk(e):
        nonlocal done
        match e:
            case Let(name, bound, body, ann):
                body2 = walk(body)
                bound2 = bound if done else walk(bound)
                return Let(name, bound2, body2, ann, pos=e.pos)
            case Lock(l, body):
                return Lock(l, walk(body), pos=e.pos)
            case Call(_, meth, _) if meth == callee and not done:
                done = True
                return Atomic(Let("_", e, UnitV(), pos=e.pos), "_", UnitV(), pos=e.pos)
        return e

    body = walk(m.body)
    return dataclasses.replace(m, body=body) if done else None


# -- attacker generation ----------------------------------------------------------------------------

HOOK_INTERFACES = ("ITokenHolder", "ITCCallback", "IExchange")


class _AttackerGen:
    def __init__(self, rng: random.Random, ct: ContractTable, targets: list, users: list,
                 self_addr: str):
        self.rng = rng
        self.ct = ct
        self.targets = targets  # [(addr, contract)]
        self.users = users
        self.self_addr = self_addr
        self.tmp = 0
        self.views = [c.name for c in ct if any(m.sig.public for m in c.methods)]

    def fresh(self) -> str:
        self.tmp += 1
        return f"v{self.tmp}"

    def public_methods(self, contract: str) -> list[MethodSig]:
        return [md.sig for md, _ in all_methods(self.ct, contract).values() if md.sig.public]

    def address(self) -> str:
        pool = [a for a, _ in self.targets] + self.users + ["this"]
        return self.rng.choice(pool)

    def arg(self, base, lines: list) -> str:
        r = self.rng
        match base:
            case IntT():
                return str(r.choice((0, 1, 2, 5, 10, 50, 100, 1000)))
            case BoolT():
                return r.choice(("true", "false"))
            case AddressT():
                return self.address()
            case ContractT(name):
                v = self.fresh()
                lines.append(f"let {v} = atk-cast {self.address()} as {name};")
                return v
        return "()"

    def call_on(self, addr: str, view: str, sig: MethodSig, lines: list):
        v = self.fresh()
        lines.append(f"let {v} = atk-cast {addr} as {view};")
        args = [self.arg(p.type.base, lines) for p in sig.params]
        lines.append(f"{v}.{sig.name}({', '.join(args)});")

    def deputy(self, lines: list) -> bool:
        """Hand a victim a forged reference where it expects a contract."""
        options = [(a, c, s) for a, c in self.targets for s in self.public_methods(c)
                   if any(isinstance(p.type.base, ContractT) for p in s.params)]
        if not options:
            return False
        addr, c, sig = options[0] if self.tmp == 0 and self.first_deputy else self.rng.choice(options)
        v = self.fresh()
        lines.append(f"let {v} = atk-cast {addr} as {c};")
        args = []
        for p in sig.params:
            if isinstance(p.type.base, ContractT):
                w = self.fresh()
                other = self.rng.choice([a for a, _ in self.targets])
                if self.first_deputy:
                    other = next((a for a, k in self.targets if k == "Token"), other)
                lines.append(f"let {w} = atk-cast {other} as {p.type.base.name};")
                args.append(w)
            elif isinstance(p.type.base, AddressT):
                args.append("this")
            else:
                args.append(self.arg(p.type.base, lines))
        lines.append(f"{v}.{sig.name}({', '.join(args)});")
        self.first_deputy = False
        return True

    def stmt(self, depth: int, lines: list):
        r = self.rng
        kind = r.choice(("call", "call", "forged", "deputy", "hook", "ignore", "atomic", "self"))
        if depth >= 2 and kind in ("ignore", "atomic"):
            kind = "call"
        if kind == "deputy" and self.deputy(lines):
            return
        if kind == "ignore":
            lines.append("ignore-locks {")
            self.stmt(depth + 1, lines)
            lines.append("}")
        elif kind == "atomic":
            lines.append("atomic {")
            self.stmt(depth + 1, lines)
            lines.append("} rescue {")
            lines.append("}")
        elif kind == "hook":
            toks = [a for a, c in self.targets if c == "Token"]
            if toks:
                v = self.fresh()
                lines.append(f"let {v} = atk-cast {r.choice(toks)} as Token;")
                lines.append(f"{v}.registerHook(true);")
                lines.append(f"{v}.approve({self.address()}, {self.arg(IntT(), lines)});")
        elif kind == "self":
            lines.append(f"this.attack({self.arg(IntT(), lines)});" if depth == 0 else "")
        elif kind == "forged":
            addr = self.address()
            view = r.choice(self.views)
            sigs = self.public_methods(view)
            if sigs:
                self.call_on(addr, view, r.choice(sigs), lines)
        else:
            addr, c = r.choice(self.targets)
            sigs = self.public_methods(c)
            if sigs:
                self.call_on(addr, c, r.choice(sigs), lines)

    def block(self, depth: int, n: int) -> list:
        lines: list = []
        for _ in range(n):
            self.stmt(depth, lines)
        return [l for l in lines if l]


def attacker_source(seed: int, ct: ContractTable, targets: list, users=("@mallory",),
                    name: Optional[str] = None) -> str:
    """Deterministic attacker contract text for ``seed``.

    The contract implements a randomly chosen callback interface whose
    methods re-enter victims, and an ``attack`` entry point; seed 0 starts
    with a forged contract reference handed to a victim.
    """
    from .printer import _Out, method_src
    rng = random.Random(seed)
    name = name or f"Attacker{seed}"
    gen = _AttackerGen(rng, ct, list(targets), list(users), "this")
    gen.first_deputy = seed == 0
    ifaces = [i for i in HOOK_INTERFACES if i in ct]
    iface = ifaces[seed % len(ifaces)] if ifaces else None
    out = [f"contract {name}" + (f" extends {iface}" if iface else "") + " {"]
    out.append("    uint{any} depth;")
    if iface:
        for md, _ in all_methods(ct, iface).values():
            o = _Out()
            method_src(dataclasses.replace(md, body=None), o, 1)
            out.append(o.lines[0][:-1] + " {")
            out.append("        uint{any} d = depth;")
            out.append("        if (d < 2) {")
            out.append("            depth = d + 1;")
            out.extend("            " + l for l in gen.block(2, rng.randint(1, 2)))
            out.append("        }")
            out.append("    }")
    body = []
    if gen.first_deputy:
        gen.deputy(body)
    body += gen.block(0, rng.randint(1, 4))
    out.append("    @public void attack{any}(uint n) {")
    out.append("        uint{any} d = depth;")
    out.append("        if (d < 3) {")
    out.append("            depth = d + 1;")
    out.extend("            " + l for l in body)
    out.append("        }")
    out.append("    }")
    out.append("}")
    return "\n".join(out) + "\n"


def gen_attacker(seed: int, ct: ContractTable, targets: list, users=("@mallory",)) -> list:
    """Attacker declarations (parsed but deliberately not type-checked)."""
    return parse_contracts(attacker_source(seed, ct, targets, users), f"attacker{seed}.scifc")


# -- the standard world ---------------------------------------------------------------------------------

USERS = ("@alice", "@bob", "@mallory", "@sgx")

# (address, contract, initial fields); token balances are filled in below
WORLD = (
    ("@tok", "Token", {}),
    ("@tok2", "Token", {}),
    ("@uni", "Uniswap", {"tokenX": "@tok", "tokenY": "@tok2", "reserveX": 1000, "reserveY": 1000}),
    ("@router", "Router", {}),
    ("@dexible", "Dexible", {"token": "@tok", "deposits": {"@alice": 100, "@mallory": 50}}),
    ("@wallet", "Wallet", {"owner": "@alice"}),
    ("@koet", "KoET", {"token": "@tok", "king": "@bob", "price": 10}),
    ("@tc", "TownCrier", {"sgx": "@sgx", "token": "@tok", "fees": {"1": 5},
                          "callbacks": {"1": "@good"}}),
    ("@hodl", "HODLWallet", {"token": "@tok", "owner": "@alice", "limit": 100}),
    ("@good", "GoodCallback", {}),
)

BALANCES = {
    "@tok": {"@alice": 1000, "@bob": 1000, "@mallory": 1000, "@dexible": 500, "@uni": 1000,
             "@tc": 5, "@hodl": 500},
    "@tok2": {"@alice": 1000, "@mallory": 1000, "@uni": 1000},
}

ALLOWANCES = {
    "@tok": {"@alice": {"@koet": 1000, "@uni": 1000, "@tc": 100},
             "@bob": {"@koet": 1000, "@uni": 1000}},
}


# users' trust in the contracts they deal with (the aggregator acts for Alice)
USER_TRUSTS = {"@alice": ("@dexible",)}


def standard_world(ct: ContractTable) -> ChainState:
    """Every corpus contract deployed with some funds, plus four users."""
    st = ChainState(ct)
    for u in USERS:
        st.add_user(u, USER_TRUSTS.get(u, ()))
    for addr, contract, init in WORLD:
        init = dict(init)
        if addr in BALANCES:
            init["balances"] = BALANCES[addr]
        if addr in ALLOWANCES:
            init["allowances"] = ALLOWANCES[addr]
        st.deploy(contract, addr, init=init)
    return st


def victims_of(state: ChainState, ct: ContractTable) -> list:
    """Deployed contracts of the well-typed corpus."""
    from .interpreter import well_typed_contracts
    ok = well_typed_contracts(ct)
    return sorted(a.addr for a in state.accounts.values() if a.contract in ok)


# honest traffic interleaved with attacker transactions
HONEST = (
    ("@alice", "@koet", "claimThrone", (20,)),
    ("@sgx", "@tc", "deliver", (1, 42)),
    ("@alice", "@dexible", "swap", ("@alice", "@router", 10)),
    ("@bob", "@uni", "sellXForY", (5,)),
    ("@alice", "@hodl", "withdraw", (10,)),
)


@dataclass
class SweepReport:
    seeds: int = 0
    transactions: int = 0
    events: list = field(default_factory=list)  # (seed, victim, CdaEvent)
    lock_violations: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.events and not self.lock_violations

    def to_record(self) -> dict:
        return {"seeds": self.seeds, "transactions": self.transactions,
                "cda_events": [dict(seed=s, victim=v, **e.to_record()) for s, v, e in self.events],
                "lock_violations": [{"seed": s, "index": i} for s, i in self.lock_violations],
                "outcomes": dict(sorted(self.outcomes.items()))}


def call_args(ct: ContractTable, state: ChainState, recv: str, method: str, raw) -> list:
    """Decode plain JSON-ish arguments against the receiver's method signature."""
    acct = state.account(recv)
    if acct.contract is None:
        raise HarnessError(f"{recv} is a user account")
    md, _ = lookup_method(ct, acct.contract, method)
    if len(raw) != md.sig.arity:
        raise HarnessError(f"{method} takes {md.sig.arity} arguments, got {len(raw)}")
    return [decode(a, p.type.base) for a, p in zip(raw, md.sig.params)]


def cda_sweep(n: int = 1000, start: int = 0, *, unsafe_no_sigcheck: bool = False,
              fastpath: bool = True) -> SweepReport:
    """Run ``n`` seeded attackers against the standard world."""
    base_ct = build_table(corpus_decls())
    world = standard_world(base_ct)
    targets = [(a, world.accounts[a].contract) for a in victims_of(world, base_ct)]
    victims = [a for a, _ in targets]
    from .interpreter import well_typed_contracts
    trusted = well_typed_contracts(base_ct)
    rep = SweepReport()
    for seed in range(start, start + n):
        decls = gen_attacker(seed, base_ct, targets)
        ct = base_ct.extend(decls)
        st = ChainState.from_dict(world.to_dict(include_program=False), ct)
        atk = f"@atk{seed}"
        st.deploy(decls[0].name, atk)
        rng = random.Random(seed)
        plan = [("@mallory", atk, "attack", (rng.randint(0, 100),))]
        plan += rng.sample(HONEST, 2)
        plan.append(("@mallory", atk, "attack", (rng.randint(0, 100),)))
        if rng.random() < 0.5:
            plan.insert(1, ("@mallory", "@tok", "registerHook", (True,)))
        for origin, recv, m, raw in plan:
            r = run_transaction(st, origin, recv, m, call_args(ct, st, recv, m, raw),
                                fastpath=fastpath, unsafe_no_sigcheck=unsafe_no_sigcheck)
            rep.transactions += 1
            key = r.outcome if r.reason is None else f"{r.outcome}:{r.reason}"
            rep.outcomes[key] = rep.outcomes.get(key, 0) + 1
            for v in victims:
                for ev in detect_cda_events(r.trace, v, r.trust, trusted):
                    rep.events.append((seed, v, ev))
            for i in lock_violations(r.trace, r.trust):
                rep.lock_violations.append((seed, i))
        rep.seeds += 1
    return rep


# -- scenarios ---------------------------------------------------------------------------------------

_CALL_RE = re.compile(r"^\s*(@[\w.]+?)\.(\w+)\((.*)\)\s*$")
_PATH_RE = re.compile(r"^(@\w+)\.(\w+)((?:\[[^\]]+\])*)$")


def parse_call(text: str) -> tuple:
    """``@koet.claimThrone(20)`` to (receiver, method, raw arguments)."""
    m = _CALL_RE.match(text)
    if m is None:
        raise HarnessError(f"malformed call {text!r}; expected @addr.method(args)")
    recv, method, argtext = m.groups()
    args = []
    for a in (x.strip() for x in argtext.split(",")) if argtext.strip() else ():
        if re.fullmatch(r"\d+", a):
            args.append(int(a))
        elif a in ("true", "false"):
            args.append(a == "true")
        elif re.fullmatch(r"@\w+", a):
            args.append(a)
        else:
            raise HarnessError(f"bad argument {a!r} in {text!r}")
    return recv, method, args


def read_path(state: ChainState, path: str):
    """Value at ``@addr.field[key]...``; missing mapping entries read as zero."""
    m = _PATH_RE.match(path)
    if m is None:
        raise HarnessError(f"malformed state path {path!r}")
    addr, fname, keys = m.groups()
    cur = state.account(addr).fields.get(fname)
    if cur is None:
        raise HarnessError(f"{addr} has no field {fname!r}")
    for k in re.findall(r"\[([^\]]+)\]", keys):
        if not isinstance(cur, dict):
            raise HarnessError(f"too many keys in {path!r}")
        key = int(k) if k.isdigit() else (k == "true" if k in ("true", "false") else k)
        cur = cur.get(key, 0)
    return encode(cur) if not isinstance(cur, int) else cur


@dataclass
class Scenario:
    name: str
    data: dict
    path: Optional[str] = None

    @property
    def description(self) -> str:
        return self.data.get("description", "")

    @property
    def well_typed(self) -> bool:
        return not self.data.get("attackers") and not self.data.get("mutations")


@dataclass
class ScenarioReport:
    name: str
    passed: bool
    transactions: list = field(default_factory=list)
    problems: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    receipts: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {"scenario": self.name, "passed": self.passed,
                "transactions": self.transactions, "problems": self.problems,
                "notes": self.notes}


def load_scenarios(directory) -> list[Scenario]:
    out = []
    for p in sorted(Path(directory).glob("*.json")):
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
        if "name" not in data or "transactions" not in data:
            raise HarnessError(f"{p}: a scenario needs a name and transactions")
        out.append(Scenario(data["name"], data, str(p)))
    return out


def scenario_table(sc: Scenario) -> ContractTable:
    data = sc.data
    names = data.get("corpus", list(CORPUS))
    decls = corpus_decls(names)
    for mut in data.get("mutations", ()):
        opts = {k: v for k, v in mut.items() if k not in ("contract", "mutation", "method")}
        decls = [mutate_corpus(d, mut["mutation"], mut.get("method"), **opts)
                 if d.name == mut["contract"] else d for d in decls]
    for i, src in enumerate(data.get("attackers", ())):
        if isinstance(src, list):
            src = "\n".join(src) + "\n"
        decls += parse_contracts(src, f"{sc.name}-attacker{i}.scifc")
    return build_table(decls)


def scenario_state(sc: Scenario, ct: ContractTable) -> ChainState:
    data = sc.data
    if data.get("world") == "standard":
        st = standard_world(ct)
    else:
        st = ChainState(ct)
    for u in data.get("users", ()):
        st.add_user(u)
    for a in data.get("accounts", ()):
        st.deploy(a["contract"], a["addr"], init=a.get("init"), trusts=a.get("trusts", ()))
    for addr, extra in data.get("trusts", {}).items():
        st.account(addr).trusts.update(extra)
    for addr, edits in data.get("patch", {}).items():
        acct = st.account(addr)
        for fname, raw in edits.items():
            from .table import lookup_field
            base = lookup_field(ct, acct.contract, fname).type.base
            cur = acct.fields[fname]
            new = decode(raw, base)
            if isinstance(cur, dict):
                cur.update(new)
            else:
                acct.fields[fname] = new
    return st


def run_scenario(sc: Scenario, *, fastpath: bool = True, typed_step: bool = False,
                 unsafe_no_sigcheck: bool = False) -> ScenarioReport:
    """Execute setup and transactions, comparing receipts and trace predicates."""
    rep = ScenarioReport(sc.name, True)
    try:
        ct = scenario_table(sc)
        st = scenario_state(sc, ct)
    except (HarnessError, StateError, LookupFailure, ValueError) as err:
        rep.passed = False
        rep.problems.append(f"setup: {err}")
        return rep
    all_events: dict = {}
    from .interpreter import well_typed_contracts
    trusted = well_typed_contracts(ct)
    for i, tx in enumerate(sc.data.get("setup", []) + sc.data["transactions"]):
        is_setup = i < len(sc.data.get("setup", []))
        recv, method, raw = parse_call(tx["call"])
        try:
            args = call_args(ct, st, recv, method, raw)
        except (HarnessError, StateError, LookupFailure) as err:
            rep.passed = False
            rep.problems.append(f"{tx['call']}: {err}")
            continue
        before = st.fingerprint()
        snap = st.copy()
        r = run_transaction(st, tx["origin"], recv, method, args, fastpath=fastpath,
                            typed_step=typed_step, unsafe_no_sigcheck=unsafe_no_sigcheck)
        rep.receipts.append(r)
        for v in _victims(sc, st, ct):
            all_events.setdefault(v, []).extend(detect_cda_events(r.trace, v, r.trust, trusted))
        if is_setup:
            if r.outcome != "Committed":
                rep.passed = False
                rep.problems.append(f"setup {tx['call']}: {r.outcome} {r.reason or ''}".strip())
            continue
        rec = {"origin": tx["origin"], "call": tx["call"], "receipt": r.to_record()}
        rep.transactions.append(rec)
        problems = []
        if typed_step and r.typed_step_errors:
            problems.append(f"typed-step re-check failed: {r.typed_step_errors[0]}")
        if unsafe_no_sigcheck and "expect" in tx and "unsafe_expect" not in tx:
            rep.notes.append(f"{tx['call']}: expectations skipped without the signature check")
        else:
            exp = tx.get("unsafe_expect" if unsafe_no_sigcheck else "expect", {})
            problems += _check_receipt(exp, r)
            if not unsafe_no_sigcheck:
                for chk in tx.get("checks", ()):
                    problems += _check(chk, r, snap, st, before)
        rec["problems"] = problems
        if problems:
            rep.passed = False
            rep.problems += [f"{tx['call']}: {p}" for p in problems]
    cda = sc.data.get("cda")
    if cda:
        want = cda.get("unsafe_expect" if unsafe_no_sigcheck else "expect", "none")
        for v in cda.get("victims", ()):
            n = len(all_events.get(v, []))
            if want == "none" and n:
                rep.passed = False
                rep.problems.append(f"{n} confused-deputy events at {v}")
            if want == "some" and not n:
                rep.passed = False
                rep.problems.append(f"expected confused-deputy events at {v}, found none")
            rep.notes.append(f"cda events at {v}: {n}")
    return rep


def _victims(sc: Scenario, st: ChainState, ct: ContractTable) -> list:
    cda = sc.data.get("cda")
    return list(cda.get("victims", ())) if cda else []


def _check_receipt(exp: dict, r: Receipt) -> list:
    out = []
    if "outcome" in exp and exp["outcome"] != r.outcome:
        out.append(f"outcome {r.outcome}, expected {exp['outcome']}"
                   + (f" (failure {r.reason})" if r.reason else ""))
    if "failure" in exp and exp["failure"] != r.reason:
        out.append(f"failure {r.reason}, expected {exp['failure']}")
    if "value" in exp and r.outcome == "Committed" and exp["value"] != encode(r.value):
        out.append(f"value {encode(r.value)!r}, expected {exp['value']!r}")
    if "exception" in exp and (r.outcome != "UncaughtException"
                               or not r.value.name.endswith(exp["exception"])):
        out.append(f"expected uncaught {exp['exception']}")
    return out


def _matches(ev: dict, pattern: dict) -> bool:
    for k, want in pattern.items():
        got = ev.get(k)
        if isinstance(got, L.Label):
            got = L.canonical(got)
        if got != want:
            return False
    return True


def _check(chk: dict, r: Receipt, pre: ChainState, post: ChainState, before: bytes) -> list:
    kind = next(iter(chk))
    arg = chk[kind]
    match kind:
        case "state_unchanged":
            if (post.fingerprint() == before) != bool(arg):
                return ["state changed" if arg else "state unchanged"]
        case "field":
            got = read_path(post, arg)
            if got != chk["equals"]:
                return [f"{arg} is {got!r}, expected {chk['equals']!r}"]
        case "delta":
            got = read_path(post, arg) - read_path(pre, arg)
            if got != chk["equals"]:
                return [f"{arg} changed by {got}, expected {chk['equals']}"]
        case "product_unchanged":
            a = _product(pre, arg)
            b = _product(post, arg)
            if a != b:
                return [f"product of {', '.join(arg)} went from {a} to {b}"]
        case "trace_has":
            if not any(_matches(ev, arg) for ev in r.trace):
                return [f"no trace event matching {arg}"]
        case "trace_lacks":
            if any(_matches(ev, arg) for ev in r.trace):
                return [f"unexpected trace event matching {arg}"]
        case "no_lock_violations":
            bad = lock_violations(r.trace, r.trust)
            if bad:
                return [f"auto-endorsed entry under a held lock at trace index {bad[0]}"]
        case _:
            return [f"unknown check {kind!r}"]
    return []


def _product(st: ChainState, paths) -> int:
    out = 1
    for p in paths:
        out *= read_path(st, p)
    return out


def run_scenarios(scenarios, *, jobs: int = 1, **opts) -> list[ScenarioReport]:
    """Run independent scenarios, in worker processes when ``jobs`` > 1."""
    if jobs <= 1 or len(scenarios) <= 1:
        return [run_scenario(s, **opts) for s in scenarios]
    from concurrent.futures import ProcessPoolExecutor
    from functools import partial
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(partial(_run_detached, **opts), scenarios))


def _run_detached(sc: Scenario, **opts) -> ScenarioReport:
    rep = run_scenario(sc, **opts)
    rep.receipts = []  # traces hold labels; keep the cross-process payload small
    return rep


def fastpath_differential(sc: Scenario) -> list:
    """Transactions whose receipts differ with the atomic fast path on and off."""
    on = run_scenario(sc, fastpath=True)
    off = run_scenario(sc, fastpath=False)
    diffs = []
    for i, (a, b) in enumerate(zip(on.receipts, off.receipts)):
        if a.comparable() != b.comparable():
            diffs.append(i)
    if len(on.receipts) != len(off.receipts):
        diffs.append(-1)
    return diffs
