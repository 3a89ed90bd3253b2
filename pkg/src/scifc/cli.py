"""Command-line front end: ``scifc check|run|lattice|scenarios``.

Exit codes: 0 ok, 1 type error, 2 reverted, 3 uncaught exception, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from typing import Optional

from . import labels as L
from .diagnostics import Diagnostic, ParseError, ScifError

EXIT_OK = 0
EXIT_TYPE_ERROR = 1
EXIT_REVERTED = 2
EXIT_UNCAUGHT = 3
EXIT_USAGE = 64

OUTCOME_EXIT = {"Committed": EXIT_OK, "Reverted": EXIT_REVERTED,
                "UncaughtException": EXIT_UNCAUGHT}

EPILOG = """exit codes:
  0   success; for 'run', the transaction committed
  1   type errors, or a scenario failed its expectations
  2   the transaction reverted; the failure value is reported
  3   uncaught exception: the transaction raised an exception nobody caught
  64  usage error (unknown flag, malformed input file or query)
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage, which would collide with 'reverted'."""

    def error(self, message):
        raise UsageError(message)


# -- output ----------------------------------------------------------------------------------------

_STYLES = {"ok": "32", "bad": "31", "warn": "33", "dim": "2", "bold": "1"}


def color_enabled(stream) -> bool:
    setting = os.environ.get("SCIFC_COLOR", "auto").strip().lower()
    if setting in ("1", "always", "yes", "true", "on"):
        return True
    if setting in ("0", "never", "no", "false", "off", ""):
        return False
    return hasattr(stream, "isatty") and stream.isatty()


class Out:
    """One output mode per invocation: styled text or JSON lines, never both."""

    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout
        self.color = fmt == "text" and color_enabled(self.stream)

    @property
    def machine(self) -> bool:
        return self.fmt == "machine"

    def style(self, text: str, kind: str) -> str:
        return f"\x1b[{_STYLES[kind]}m{text}\x1b[0m" if self.color else text

    def text(self, line: str = ""):
        if not self.machine:
            print(line, file=self.stream)

    def record(self, rec: dict):
        if self.machine:
            print(json.dumps(rec, sort_keys=True), file=self.stream)


def _diag_line(out: Out, d: Diagnostic) -> str:
    where = f"{d.file + ':' if d.file else ''}{d.pos or '?'}"
    return f"{where}: {out.style(d.severity, 'bad')} [{out.style(d.rule, 'bold')}] {d.message}"


def load_table(paths, corpus=()):
    """Bundled corpus programs first, then the given files, as one table."""
    from .library import corpus_decls
    from .parser import build_table, parse_contracts

    decls, diags = [], []
    try:
        decls.extend(corpus_decls(corpus))
    except KeyError as err:
        raise UsageError(err.args[0]) from None
    for p in paths:
        try:
            with open(p, encoding="utf-8") as fh:
                src = fh.read()
        except OSError as err:
            raise UsageError(f"cannot read {p}: {err.strerror}") from None
        try:
            decls.extend(parse_contracts(src, str(p)))
        except ParseError as err:
            diags.extend(err.diagnostics)
    if diags:
        raise ParseError(diags)
    return build_table(decls)


# -- verbs ------------------------------------------------------------------------------------------

def cmd_check(args, out: Out) -> int:
    from .typechecker import check_program

    try:
        ct = load_table(args.paths, args.corpus)
        diags = check_program(ct)
    except ParseError as err:
        diags = err.diagnostics
    for d in diags:
        out.record({"kind": "diagnostic", **d.to_record()})
        out.text(_diag_line(out, d))
    n = len(diags)
    out.record({"kind": "summary", "diagnostics": n, "files": len(args.paths)})
    if n:
        out.text(out.style(f"{n} error{'s' if n != 1 else ''}", "bad"))
    else:
        out.text(out.style(f"ok: {len(list(ct))} contract(s), no diagnostics", "ok"))
    return EXIT_TYPE_ERROR if n else EXIT_OK


def _run_state(args):
    from .harness import standard_world
    from .library import CORPUS
    from .state import ChainState

    if args.state is None:
        # the demo world needs every corpus contract
        ct = load_table(args.paths, CORPUS)
        from .typechecker import check_program
        if check_program(ct):
            return ct, None
        return ct, standard_world(ct)
    ct = load_table(args.paths, args.corpus) if (args.paths or args.corpus) else None
    st = ChainState.load(args.state, ct)
    return st.ct, st


def cmd_run(args, out: Out) -> int:
    from .harness import HarnessError, call_args, parse_call
    from .interpreter import event_record, run_transaction
    from .state import StateError
    from .typechecker import check_program

    if args.unsafe_no_sigcheck:
        raise UsageError("--unsafe-no-sigcheck is only accepted by the 'scenarios' verb")
    if args.origin is None or args.call is None:
        raise UsageError("run needs --origin and --call")
    try:
        ct, st = _run_state(args)
        diags = check_program(ct)
        if diags:
            for d in diags:
                out.record({"kind": "diagnostic", **d.to_record()})
                out.text(_diag_line(out, d))
            out.text(out.style("refusing to run an ill-typed program", "bad"))
            return EXIT_TYPE_ERROR
        recv, method, raw = parse_call(args.call)
        vals = call_args(ct, st, recv, method, raw)
        r = run_transaction(st, args.origin, recv, method, vals,
                            fastpath=not args.no_atomic_fastpath, typed_step=args.typed_step)
    except (HarnessError, StateError, L.LabelError) as err:
        raise UsageError(str(err)) from None
    except json.JSONDecodeError as err:
        raise UsageError(f"state file is not valid JSON: {err}") from None
    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8") as fh:
            for ev in r.trace:
                fh.write(json.dumps(event_record(ev), sort_keys=True, default=repr) + "\n")
    if args.state_out:
        st.save(args.state_out)
    rec = {"kind": "receipt", "call": args.call, "origin": args.origin, **r.to_record()}
    out.record(rec)
    kind = {"Committed": "ok", "Reverted": "warn"}.get(r.outcome, "bad")
    detail = ""
    if "value" in rec:
        detail = f" value={json.dumps(rec['value'])}"
    elif "failure" in rec:
        detail = f" failure={rec['failure']}" + (f" ({rec['payload']})" if "payload" in rec else "")
    elif "exception" in rec:
        detail = f" exception={rec['exception']}"
    out.text(f"{out.style(r.outcome, kind)}{detail}  [{r.steps} steps]")
    for d in r.typed_step_errors:
        out.text(out.style(f"typed-step: {d}", "bad"))
    return OUTCOME_EXIT[r.outcome]


def parse_query(text: str):
    """``L1 => L2 [given a=>b, ...]`` to (l1, l2, trust pairs)."""
    m = re.fullmatch(r"(.*?)(?:\bgiven\b(.*))?", text.strip(), re.S)
    head, given = m.group(1), m.group(2)
    parts = head.split("=>")
    if len(parts) != 2:
        raise UsageError(f"expected 'L1 => L2', got {head.strip()!r}")
    l1, l2 = (L.parse_label(p.strip()) for p in parts)
    trust = set()
    for h in (given or "").split(","):
        if not h.strip():
            if given is not None:
                raise UsageError("empty trust hypothesis after 'given'")
            continue
        ab = [x.strip() for x in h.split("=>")]
        if len(ab) != 2 or not all(re.fullmatch(r"@?\w+", x) for x in ab):
            raise UsageError(f"trust hypotheses look like a=>b, got {h.strip()!r}")
        trust.add((ab[0], ab[1]))
    return l1, l2, frozenset(trust)


def cmd_lattice(args, out: Out) -> int:
    query = " ".join(args.query)
    try:
        l1, l2, trust = parse_query(query)
    except L.LabelError as err:
        raise UsageError(f"bad label: {err}") from None
    ans = L.flows_to(l1, l2, trust)
    out.record({"kind": "lattice", "query": query, "lhs": L.canonical(l1),
                "rhs": L.canonical(l2), "given": sorted(map(list, trust)), "result": ans})
    out.text(out.style("true", "ok") if ans else out.style("false", "bad"))
    return EXIT_OK


def default_scenario_dir() -> str:
    if os.path.isdir("scenarios"):
        return "scenarios"
    here = os.path.dirname(os.path.abspath(__file__))
    repo = os.path.normpath(os.path.join(here, "..", "..", "scenarios"))
    return repo if os.path.isdir(repo) else "scenarios"


def cmd_scenarios(args, out: Out) -> int:
    from .harness import HarnessError, cda_sweep, load_scenarios, run_scenarios

    directory = args.dir or default_scenario_dir()
    if not os.path.isdir(directory):
        raise UsageError(f"no scenario directory {directory!r}")
    try:
        scs = load_scenarios(directory)
    except (HarnessError, json.JSONDecodeError) as err:
        raise UsageError(str(err)) from None
    if args.filter:
        scs = [s for s in scs if args.filter.lower() in s.name.lower()]
        if not scs:
            out.record({"kind": "note", "message": f"no scenario matches {args.filter!r}"})
            out.text(out.style(f"note: no scenario matches {args.filter!r}; nothing to run", "warn"))
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    reports = run_scenarios(scs, jobs=args.jobs, fastpath=not args.no_atomic_fastpath,
                            typed_step=args.typed_step,
                            unsafe_no_sigcheck=args.unsafe_no_sigcheck)
    ok = True
    for rep in reports:
        ok &= rep.passed
        out.record({"kind": "scenario", **rep.to_record()})
        mark = out.style("PASS", "ok") if rep.passed else out.style("FAIL", "bad")
        out.text(f"{mark} {rep.name} ({len(rep.transactions)} transactions)")
        for p in rep.problems:
            out.text(f"     {p}")
        for n in rep.notes:
            out.text(out.style(f"     note: {n}", "dim"))
    if args.attackers:
        sweep = cda_sweep(args.attackers, unsafe_no_sigcheck=args.unsafe_no_sigcheck,
                          fastpath=not args.no_atomic_fastpath)
        if not args.unsafe_no_sigcheck:
            ok &= sweep.ok
        out.record({"kind": "sweep", "unsafe_no_sigcheck": args.unsafe_no_sigcheck,
                    **sweep.to_record()})
        out.text(f"sweep: {sweep.seeds} attackers, {sweep.transactions} transactions, "
                 f"{len(sweep.events)} CDA events, "
                 f"{len(sweep.lock_violations)} lock violations")
    passed = sum(r.passed for r in reports)
    out.record({"kind": "summary", "scenarios": len(reports), "passed": passed})
    out.text(f"{passed}/{len(reports)} scenarios passed")
    return EXIT_OK if ok else EXIT_TYPE_ERROR


# -- argument parsing -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--format", choices=("text", "machine"), default="text",
                        help="text (styled by SCIFC_COLOR) or machine: one JSON record per line")

    top = _Parser(prog="scifc", allow_abbrev=False, epilog=EPILOG,
                  formatter_class=argparse.RawDescriptionHelpFormatter,
                  description="Type checker and reference interpreter for Core SCIF.")
    sub = top.add_subparsers(dest="verb", metavar="{check,run,lattice,scenarios}",
                             parser_class=_Parser)

    def verb(name, help_):
        return sub.add_parser(name, parents=[common], allow_abbrev=False, help=help_,
                              epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)

    corpus_help = "prepend a bundled case-study program (repeatable)"
    p = verb("check", "type-check programs; exit 1 on any diagnostic")
    p.add_argument("paths", nargs="*", metavar="FILE")
    p.add_argument("--corpus", action="append", default=[], metavar="NAME", help=corpus_help)

    p = verb("run", "execute one transaction against a saved chain state")
    p.add_argument("paths", nargs="*", metavar="FILE",
                   help="program files; default is the program stored in the state file")
    p.add_argument("--corpus", action="append", default=[], metavar="NAME", help=corpus_help)
    p.add_argument("--state", metavar="STATE.json",
                   help="chain state to load; default is the bundled demo world")
    p.add_argument("--state-out", metavar="STATE.json", help="save the resulting chain state")
    p.add_argument("--origin", metavar="@USER", help="user account sending the transaction")
    p.add_argument("--call", metavar="@ADDR.METHOD(ARGS)", help="for example @koet.claimThrone(20)")
    p.add_argument("--trace-out", metavar="FILE", help="write trace events as JSON lines")
    p.add_argument("--no-atomic-fastpath", action="store_true",
                   help="snapshot every atomic block instead of short-cutting plain calls")
    p.add_argument("--typed-step", action="store_true",
                   help="re-type-check the running configuration after every step")
    # accepted syntactically only so that it can be refused with a clear message
    p.add_argument("--unsafe-no-sigcheck", action="store_true", help=argparse.SUPPRESS)

    p = verb("lattice", "decide a flow query such as 'A \\/ B => B given A=>B'")
    p.add_argument("query", nargs="+", metavar="QUERY")

    p = verb("scenarios", "run the attack and regression scenarios")
    p.add_argument("--dir", metavar="DIR", help="scenario directory (default: ./scenarios)")
    p.add_argument("--filter", metavar="TEXT", help="only scenarios whose name contains TEXT")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    p.add_argument("--attackers", type=int, default=0, metavar="N",
                   help="also sweep N seeded attacker programs for CDA events")
    p.add_argument("--no-atomic-fastpath", action="store_true")
    p.add_argument("--typed-step", action="store_true")
    p.add_argument("--unsafe-no-sigcheck", action="store_true",
                   help="disable dispatch signature checks to demonstrate the attacks")
    return top


VERBS = {"check": cmd_check, "run": cmd_run, "lattice": cmd_lattice, "scenarios": cmd_scenarios}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("missing verb; choose one of check, run, lattice, scenarios")
        out = Out(args.format)
        return VERBS[args.verb](args, out)
    except UsageError as err:
        print(f"scifc: error: {err}", file=sys.stderr)
        print("try 'scifc --help'", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as err:
        # a malformed state or program file given to 'run'
        for d in err.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_USAGE
    except ScifError as err:
        print(f"scifc: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
