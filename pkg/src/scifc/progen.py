"""Random well-typed programs for soundness smoke tests.

Programs are single contracts with a few integer and boolean fields and a
chain of public methods; later methods may call earlier ones on ``this``.
Generation is untyped-then-filtered: candidates are printed as source,
parsed and kept only when the checker accepts them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, fields, is_dataclass
from typing import Optional

from .ast import Expr, Handler
from .parser import parse_program
from .table import ContractTable
from .typechecker import check_program

MAX_NODES = 30


def ast_size(e) -> int:
    """Number of expression and value nodes in a core term."""
    if isinstance(e, Handler):
        return ast_size(e.body)
    if not isinstance(e, Expr):
        return 0
    n = 1
    for f in fields(e):
        v = getattr(e, f.name)
        if isinstance(v, tuple):
            n += sum(ast_size(x) for x in v)
        elif is_dataclass(v):
            n += ast_size(v)
    return n


class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.n = 0

    def fresh(self) -> str:
        self.n += 1
        return f"t{self.n}"

    def trusted_int(self, env) -> str:
        r = self.rng
        pool = [v for v, (ty, hi) in env.items() if ty == "uint" and hi]
        choice = r.random()
        if pool and choice < 0.5:
            return r.choice(pool)
        if choice < 0.7:
            return r.choice(("x", "y"))
        return str(r.randint(0, 9))

    def any_int(self, env) -> str:
        pool = [v for v, (ty, _) in env.items() if ty == "uint"]
        return self.rng.choice(pool) if pool and self.rng.random() < 0.7 else self.trusted_int(env)

    def trusted_bool(self, env) -> str:
        r = self.rng
        pool = [v for v, (ty, hi) in env.items() if ty == "bool" and hi]
        if pool and r.random() < 0.4:
            return r.choice(pool)
        if r.random() < 0.3:
            return "flag"
        op = r.choice(("<", "<=", "==", "!=", ">"))
        return f"{self.trusted_int(env)} {op} {self.trusted_int(env)}"

    def stmts(self, env, pc: dict, depth: int, budget: int, prior: list) -> list:
        """``pc["hi"]`` tracks whether control flow is still trusted; branching
        on untrusted data lowers it for the rest of the method."""
        out = []
        for _ in range(budget):
            out += self.stmt(env, pc, depth, prior)
        return out

    def nested(self, env, pc: dict, depth: int, budget: int, hi: bool = True) -> list:
        inner = {"hi": pc["hi"] and hi}
        lines = self.stmts(dict(env), inner, depth + 1, budget, [])
        pc["hi"] = pc["hi"] and inner["hi"]
        return lines

    def stmt(self, env, pc: dict, depth: int, prior: list) -> list:
        r = self.rng
        hi_pc = pc["hi"]
        kinds = ["endorse", "readfield", "local", "local"]
        if hi_pc:
            kinds += ["write", "write", "mapwrite", "assert", "ref"]
            if prior:
                kinds += ["call", "call"]
        if depth < 1:
            kinds += ["if", "atomic", "try"]
        kind = r.choice(kinds)
        t = self.fresh()
        match kind:
            case "endorse":
                low = [v for v, (ty, hi) in env.items()
                       if ty == "uint" and not hi and v.startswith("p")]
                if not low or not hi_pc:
                    return []
                src = r.choice(low)
                env[t] = ("uint", True)
                return [f"uint{{this}} {t} = endorse({src}, sender -> this);"]
            case "readfield":
                if r.random() < 0.5:
                    env[t] = ("uint", True)
                    return [f"uint{{this}} {t} = bal[sender];"]
                env[t] = ("uint", True)
                return [f"uint{{this}} {t} = {r.choice(('x', 'y'))};"]
            case "local":
                op = r.choice(("+", "*", "-"))
                a, b = self.any_int(env), self.any_int(env)
                hi = all(env.get(v, ("uint", True))[1] for v in (a, b))
                env[t] = ("uint", hi)
                return [f"uint {t} = {a} {op} {b};"]
            case "write":
                return [f"{r.choice(('x', 'y'))} = {self.trusted_int(env)} {r.choice('+*')} "
                        f"{self.trusted_int(env)};"]
            case "mapwrite":
                return [f"bal[sender] = {self.trusted_int(env)};"]
            case "assert":
                return [f"assert {self.trusted_bool(env)};"]
            case "ref":
                u = self.fresh()
                lines = [f"ref<uint{{this}}> {t} = ref<uint{{this}}>({self.trusted_int(env)});",
                         f"{t} := {self.trusted_int(env)};",
                         f"uint{{this}} {u} = deref({t});"]
                env[u] = ("uint", True)
                return lines
            case "call":
                name, arity = r.choice(prior)
                args = [self.trusted_int(env) for _ in range(arity)] + ["true"]
                env[t] = ("uint", True)
                return [f"uint{{this}} {t} = this.{name}({', '.join(args)});"]
            case "if":
                guard_hi = r.random() < 0.7
                g = self.trusted_bool(env) if guard_hi else "b"
                then = self.nested(env, pc, depth, 1, guard_hi)
                els = self.nested(env, pc, depth, r.randint(0, 1), guard_hi)
                lines = [f"if ({g}) {{"] + ["    " + l for l in then]
                if els:
                    lines += ["} else {"] + ["    " + l for l in els]
                return lines + ["}"]
            case "atomic":
                body = self.nested(env, pc, depth, 1)
                if r.random() < 0.5:
                    body.append("fail;")
                resc = self.nested(env, pc, depth, r.randint(0, 1))
                return (["atomic {"] + ["    " + l for l in body] + ["} rescue {"]
                        + ["    " + l for l in resc] + ["}"])
            case "try":
                body = self.nested(env, pc, depth, r.randint(0, 1))
                if r.random() < 0.6:
                    body.append(f"if ({self.trusted_bool(env)}) {{\n    throw Oops();\n}}")
                handler = self.nested(env, pc, depth, r.randint(0, 1))
                return (["try {"] + ["    " + l for l in body] + ["} catch Oops() {"]
                        + ["    " + l for l in handler] + ["}"])
        return []


def program_source(seed: int, methods: int = 3) -> str:
    rng = random.Random(seed)
    g = _Gen(rng)
    lines = [f"contract Gen{seed} {{", "    exception Oops();", "    uint{this} x;",
             "    uint{this} y;", "    bool{this} flag;", "    mapping(address, uint{this}) bal;"]
    prior: list = []
    for i in range(methods):
        arity = rng.randint(0, 2)
        params = [f"uint p{j}" for j in range(arity)] + ["bool b"]
        env = {f"p{j}": ("uint", False) for j in range(arity)}
        env["zero"] = ("uint", True)
        body = ["uint{this} zero = 0;"] + g.stmts(env, {"hi": True}, 0, rng.randint(1, 3), prior)
        body.append(f"return {g.trusted_int(env)};")
        lines.append(f"    @public uint m{i}({', '.join(params)}) {{")
        lines += ["        " + l for l in "\n".join(body).split("\n")]
        lines.append("    }")
        prior.append((f"m{i}", arity))
    lines.append("}")
    return "\n".join(lines) + "\n"


@dataclass
class GeneratedProgram:
    seed: int
    source: str
    table: ContractTable
    contract: str


def generate_well_typed(count: int, start: int = 0, max_tries: int = 100000):
    """The first ``count`` seeds (from ``start``) whose programs check and fit the size cap."""
    out = []
    seed = start
    while len(out) < count and seed < start + max_tries:
        src = program_source(seed)
        seed += 1
        try:
            ct = parse_program(src, f"gen{seed - 1}.scifc")
        except Exception:
            continue
        if check_program(ct):
            continue
        c = next(iter(ct))
        if any(ast_size(m.body) > MAX_NODES for m in c.methods):
            continue
        out.append(GeneratedProgram(seed - 1, src, ct, c.name))
    return out


@dataclass
class SoundnessResult:
    seed: int
    method: str
    outcome: str
    problems: list


def soundness_run(programs, calls_per_method: int = 2, rng_seed: int = 0,
                  users=("@alice", "@bob")) -> list:
    """Deploy each program and drive every method with typed-step checking on.

    A result's ``problems`` lists whatever a well-typed program must never
    produce, such as a stuck configuration or a failed security gate.
    """
    from .ast import AddrV, BoolV, IntV
    from .interpreter import SECURITY_FAILURES, STUCK, run_transaction
    from .state import ChainState

    rng = random.Random(rng_seed)
    out = []
    for prog in programs:
        st = ChainState(prog.table)
        for u in users:
            st.add_user(u)
        addr = f"@gen{prog.seed}"
        st.deploy(prog.contract, addr)
        for m in prog.table[prog.contract].methods:
            for _ in range(calls_per_method):
                args = [BoolV(rng.random() < 0.5) if p.name == "b" else IntV(rng.randint(0, 9))
                        for p in m.sig.params]
                r = run_transaction(st, rng.choice(users), addr, m.sig.name, args,
                                    typed_step=True)
                problems = []
                if r.reason == STUCK or any(ev.get("ev") == "stuck" for ev in r.trace):
                    problems.append("stuck")
                if r.reason in SECURITY_FAILURES:
                    problems.append(f"security failure {r.reason}")
                problems += [f"typed-step: {d}" for d in r.typed_step_errors]
                out.append(SoundnessResult(prog.seed, m.sig.name, r.outcome, problems))
    return out
