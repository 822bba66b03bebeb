"""Command line entry point: ``druidlet gen|run|bench|diff|dump-ir``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bytecodes as bc
from . import handler_lang as hl
from .frontend import TranslationError, translate_handler, translate_primitive
from .harness import FIXTURES, FixtureFailure, bench_suite, load_fixture, tier
from .interpreter import DEFAULT_FUEL, VMError
from .ir import dump_ir
from .jit import disassemble_rtl
from .metacompiler import encode_frontend, frontend_listing, meta_compile, table_dump
from .midend import run_pipeline
from .object_model import LoadError, is_integer_object, load_program, untag
from .randprog import differential_test

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_VM_ERROR = 0, 1, 2, 3

TIER_ALIASES = {"interp": "InterpreterOnly", "druid": "DruidJIT", "mirror": "MirrorJIT"}


class UsageError(Exception):
    pass


def _tier_name(text: str) -> str:
    name = TIER_ALIASES.get(text, text)
    if name not in TIER_ALIASES.values():
        raise UsageError(f"unknown tier {text!r}")
    return name


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = meta_compile()
    (out / "frontend.bin").write_bytes(encode_frontend(meta.frontend))
    (out / "frontend.txt").write_text(frontend_listing(meta.frontend))
    (out / "table.txt").write_text(table_dump(meta.table))
    print(f"wrote {len(meta.frontend.bytecodes)} bytecode and "
          f"{len(meta.frontend.primitives)} primitive generators to {out}")
    for name, why in sorted(meta.failures.items()):
        print(f"  no generator for {name}: {why}")
    return EXIT_OK


def _load_image(args):
    if args.fixture:
        if args.fixture not in FIXTURES:
            raise UsageError(f"unknown fixture {args.fixture!r}")
        return load_fixture(args.fixture, args.arg)
    if not args.program:
        raise UsageError("give a program file or --fixture")
    image = load_program(Path(args.program).read_text())
    if args.arg is not None:
        raise UsageError("--arg only applies to fixtures")
    return image


def cmd_run(args) -> int:
    image = _load_image(args)
    vm = tier(_tier_name(args.tier), args.threshold).make_vm(image, fuel=args.fuel)
    status = EXIT_OK
    try:
        result, _ = vm.run()
        print(untag(result) if is_integer_object(result) else f"object at {result:#x}")
    except VMError as exc:
        print(exc.kind, file=sys.stderr)
        status = EXIT_VM_ERROR
    print(f"steps: {vm.steps}", file=sys.stderr)
    if args.trace is not None:
        lines = "".join(" ".join(str(x) for x in rec) + "\n" for rec in vm.trace.records)
        if args.trace == "-":
            sys.stdout.write(lines)
        else:
            Path(args.trace).write_text(lines)
    if args.dump_rtl and vm.jit is not None:
        for cm in vm.jit.compiled:
            print(f"; class {cm.method.class_id} #{cm.method.selector} ({cm.frame_kind}, {cm.instruction_count} instructions)")
            print(disassemble_rtl(cm.rtl))
    return status


def cmd_bench(args) -> int:
    fixtures = args.fixtures or FIXTURES
    for fx in fixtures:
        if fx not in FIXTURES:
            raise UsageError(f"unknown fixture {fx!r}")
    try:
        report = bench_suite(fixtures, args.iterations, args.warmup, args.threshold)
    except FixtureFailure as exc:
        print(exc, file=sys.stderr)
        return EXIT_VM_ERROR
    md = report.markdown()
    print(md, end="")
    if args.out:
        Path(args.out).write_text(md)
    if args.csv:
        Path(args.csv).write_text(report.csv())
    return EXIT_OK


def cmd_diff(args) -> int:
    report = differential_test(args.seed, args.count, _tier_name(args.tier), fuel=args.fuel,
                               inject_fault=args.inject_fault)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_MISMATCH


def cmd_dump_ir(args) -> int:
    vmdef = hl.builtin_vm_definition()
    irs = []
    if args.primitive is not None:
        d = vmdef.primitives.get(args.primitive)
        if d is None:
            raise UsageError(f"no primitive {args.primitive}")
        irs.append(translate_primitive(d, None, vmdef))
    else:
        opcodes = [int(args.opcode, 0)] if args.opcode else [
            i.opcode for i in bc.OPCODES if i.handler in vmdef.handlers]
        for op in opcodes:
            d = vmdef.handler_for_opcode(op)
            if d is None:
                raise UsageError(f"no handler for opcode {op:#04x}")
            try:
                irs.append(translate_handler(d, op, vmdef))
            except TranslationError as exc:
                print(f"; {d.name}@{op:#04x}: {type(exc).__name__}: {exc}")
    for ir in irs:
        if args.stage == "opt":
            trace = []
            run_pipeline(ir, trace=trace)
            if args.pass_trace:
                for round_no, name, count in trace:
                    print(f"; round {round_no} {name}: {count} instructions")
        print(dump_ir(ir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="druidlet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="meta-compile the JIT frontend")
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="run a program or fixture")
    r.add_argument("program", nargs="?")
    r.add_argument("--fixture")
    r.add_argument("--arg", type=int, help="replace the fixture's entry argument")
    r.add_argument("--tier", default="interp")
    r.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    r.add_argument("--threshold", type=int, help="tier-up invocation count")
    r.add_argument("--trace", nargs="?", const="-", help="write the effect trace (default stdout)")
    r.add_argument("--dump-rtl", action="store_true")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="benchmark the fixture suite in every tier")
    b.add_argument("fixtures", nargs="*")
    b.add_argument("--iterations", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threshold", type=int)
    b.add_argument("--out", help="markdown report path")
    b.add_argument("--csv", help="csv report path")
    b.set_defaults(fn=cmd_bench)

    d = sub.add_parser("diff", help="differential test against the interpreter")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--count", type=int, default=100)
    d.add_argument("--tier", default="druid")
    d.add_argument("--fuel", type=int, default=20_000)
    d.add_argument("--inject-fault", action="store_true", help="use a deliberately broken frontend")
    d.set_defaults(fn=cmd_diff)

    i = sub.add_parser("dump-ir", help="print handler IR")
    i.add_argument("--stage", choices=("frontend", "opt"), default="frontend")
    i.add_argument("--opcode", help="opcode, e.g. 0x78")
    i.add_argument("--primitive", type=int)
    i.add_argument("--pass-trace", action="store_true")
    i.set_defaults(fn=cmd_dump_ir)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, LoadError, OSError) as exc:
        print(f"druidlet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
