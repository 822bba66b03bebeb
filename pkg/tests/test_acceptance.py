"""End-to-end acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary."""

import statistics
import time

import pytest

from druidlet.frontend import translate_all
from druidlet.harness import FIXTURES, LOOP_FIXTURES, bench_suite, load_fixture, run_tier, tier
from druidlet.interpreter import VM
from druidlet.ir import check_ssa, clone_ir, dump_ir
from druidlet.jit import JIT
from druidlet.metacompiler import druid_frontend, meta_compile
from druidlet.midend import PASSES, random_ir, run_pipeline
from druidlet.object_model import FALSE, NIL, TRUE, load_program, tag_small_int, untag
from druidlet.oracle import check_pass
from druidlet.randprog import differential_test
from druidlet.staging import check_generator_stages, staged_projection

pytestmark = pytest.mark.slow

META = meta_compile()
FE = META.frontend


def run(image, tier_name, threshold=2, **kw):
    vm = tier(tier_name, threshold).make_vm(image, **kw)
    try:
        result, _ = vm.run()
        err = None
    except Exception as exc:
        result, err = None, getattr(exc, "kind", type(exc).__name__)
    return vm, (result, err, vm.steps, vm.trace.records)


def rtl_names(gp):
    return [op[1] for op in gp.ops if op[0] == "rtl"]


@pytest.fixture(scope="module")
def suite_runs():
    """Three consecutive full benchmark suite runs, each with its wall time."""
    runs = []
    for _ in range(3):
        start = time.perf_counter()
        report = bench_suite(FIXTURES, iterations=5, warmup=1)
        runs.append((report, time.perf_counter() - start))
    return runs


@pytest.mark.criterion(1, "tier equivalence over 1000 random programs")
def test_tier_equivalence():
    start = time.perf_counter()
    report = differential_test(seed=2024, count=1000)
    elapsed = time.perf_counter() - start
    print(f"\n{report.summary()} in {elapsed:.1f}s")
    assert report.count == 1000
    assert report.ok, report.summary()
    assert elapsed <= 300


@pytest.mark.criterion(2, "generated frontend golden shapes")
def test_golden_generator_shapes():
    # (a) primitiveAdd: tag test, untag, add, overflow check, then the result move
    skeleton = ["TstCqR", "JumpZero", "MoveRR", "AddCqR", "AddRR", "JumpOverflow"]
    add = FE.primitives[1]
    assert rtl_names(add) == skeleton
    assert ("rtl", "AddCqR", ("imm", -1), ("reg", "Temp")) in add.ops
    vm = tier("DruidJIT", 1).make_vm(load_fixture("fib", arg=5))
    vm.run()
    (plus,) = [c for c in vm.jit.compiled if c.method.selector == "+"]
    assert [ins[0] for ins in plus.rtl[:7]] == skeleton + ["MoveRR"]
    # (b) pushReceiverVariable 1 with its byte offset folded
    assert ("ssPushBase", ("rv", "r1"), ("imm", 16)) in FE.bytecodes[0x01].ops
    # (c) shortJumpTrue offset 1
    jt = FE.bytecodes[0x78]
    assert jt.ops[0] == ("annotate",)
    kinds = [op[0] for op in jt.walk()]
    tramp = next(i for i, op in enumerate(jt.ops) if op[:2] == ("rtl", "CallTrampoline"))
    assert kinds.count("ssFlush") == 1 and kinds.index("ssFlush") < tramp
    pc = next(op[1] for op in jt.ops if op[0] == "staged" and op[2:] == ("param", "bytecodePC"))
    target = next(op for op in jt.ops if op[0] == "staged" and op[2] == "add")
    assert target[3:] == (pc, ("imm", 2))
    assert ("jumpFixup", target[1]) in jt.ops
    # (d) pushNewArray: staged deopt guard and a staged nil-fill loop
    na = FE.bytecodes[0xB0]
    (guard,) = [op for op in na.ops if op[0] == "stagedIf"]
    assert ("deoptimize",) in guard[2]
    (loop,) = [op for op in na.walk() if op[0] == "stagedLoop"]
    assert any(op[:2] == ("rtl", "MoveRMw") for op in loop[3])


@pytest.mark.criterion(3, "DruidJIT speedup over the interpreter on 3 suite runs")
def test_speedup(suite_runs):
    for report, elapsed in suite_runs:
        geo = report.geomean_speedup("DruidJIT")
        best = max(report.speedup(fx, "DruidJIT") for fx in LOOP_FIXTURES)
        print(f"\nsuite run: geomean D/I {geo:.2f}, best loop D/I {best:.2f}, {elapsed:.1f}s")
        assert geo > 1.3
        assert best >= 1.8
        assert elapsed <= 120


@pytest.mark.criterion(4, "DruidJIT code quality against MirrorJIT")
def test_quality_against_mirror(suite_runs):
    for report, _ in suite_runs:
        worst = min(FIXTURES, key=report.d_over_m)
        print(f"\nsuite run: lowest D/M {report.d_over_m(worst):.2f} on {worst}")
        for fx in FIXTURES:
            assert report.d_over_m(fx) >= 0.66, (fx, report.d_over_m(fx))
    for fx in FIXTURES:
        counts = {}
        for name in ("DruidJIT", "MirrorJIT"):
            vm, _ = run(load_fixture(fx), name)
            counts[name] = {(c.method.class_id, c.method.selector_id): c.instruction_count
                            for c in vm.jit.compiled}
        assert counts["DruidJIT"].keys() == counts["MirrorJIT"].keys()
        for key, d in counts["DruidJIT"].items():
            assert d <= 1.5 * counts["MirrorJIT"][key], (fx, key)


# fixture arguments that push each run past 10^7 executed bytecodes
LARGE = {"loop-sum": 400, "fib": 28}


@pytest.mark.criterion(5, "compile overhead on runs of at least 10^7 bytecodes")
def test_compile_overhead():
    for fx, arg in LARGE.items():
        image = load_fixture(fx, arg=arg)
        d = run_tier(image, tier("DruidJIT"), iterations=1, warmup=0, fixture=fx)
        m = run_tier(image, tier("MirrorJIT"), iterations=1, warmup=0, fixture=fx)
        print(f"\n{fx}({arg}): {d.executed_bytecodes} bytecodes, compile D "
              f"{100 * d.compile_fraction:.3f}% M {100 * m.compile_fraction:.3f}%")
        assert d.executed_bytecodes >= 10 ** 7
        assert d.compile_fraction < 0.15
        assert abs(d.compile_fraction - m.compile_fraction) < 0.05


@pytest.mark.criterion(6, "mid-end pass properties")
def test_pass_properties():
    for name, transform in sorted(PASSES.items()):
        for seed in range(1000):
            ir = random_ir(seed, 4 + seed % 21)
            after, bad = check_pass(ir, transform, trials=8, seed=seed)
            assert bad == [], (name, seed, bad[:1])
            assert check_ssa(after) == [], (name, seed)
    irs, prim_irs, _ = translate_all()
    for ir in [*irs.values(), *prim_irs.values()]:
        once = run_pipeline(clone_ir(ir), check=True)
        text = dump_ir(once)
        assert dump_ir(run_pipeline(once, check=True)) == text, ir.name


@pytest.mark.criterion(7, "staging properties of every generator")
def test_staging():
    gens = [*FE.bytecodes.values(), *FE.primitives.values()]
    for gp in gens:
        assert check_generator_stages(gp.ops) == [], gp.name
        for byte1 in range(256):
            staged_projection(gp.ops, {"bytecodePC": 7, "byte1": byte1, "byte2": 255 - byte1,
                                       "method": 4096})
    # booleans are read from the image at JIT time
    jt = FE.bytecodes[0x78]
    assert all(op[2][0] == "sv" for op in jt.walk() if op[:2] == ("rtl", "CmpCqR"))
    vm = tier("DruidJIT", 1).make_vm(load_fixture("fib", arg=3))
    vm.jit.specials = (0, 0x5008, 0x6008)
    vm.jit.compile_entry(vm.jit.entry(vm.image.entry_method()))
    (cm,) = vm.jit.compiled
    consts = {ins[1] for ins in cm.rtl if ins[0] == "CmpCqR"}
    assert 0x5008 in consts and not consts & {TRUE, FALSE}


def _program(body):
    return load_program(".class UndefinedObject id=1\n.method m: sel=40 args=1 temps=0\n"
                        + "\n".join("  " + ln for ln in body)
                        + "\n.method go sel=41 args=0 temps=0\n  pushNil\n  pushInt 1\n"
                          "  send #m: 1\n  popTop\n  pushNil\n  pushInt 2\n  send #m: 1\n"
                          "  returnTop\n.entry UndefinedObject go\n")


@pytest.mark.criterion(8, "deoptimization soundness")
def test_deopt_soundness():
    for fx in FIXTURES:
        _, ref = run(load_fixture(fx), "InterpreterOnly")
        vm, got = run(load_fixture(fx), "DruidJIT", probe=True)
        assert (got[0], got[1], got[3]) == (ref[0], ref[1], ref[3]), fx
        assert vm.jit.deopts > 0
    image = _program(["pushNewArray 131", "send #size 0", "pushTemp 0", "primAddSend",
                      "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, "DruidJIT", threshold=1)
    assert untag(ref[0]) == 5 and got == ref
    assert vm.jit.deopts == 2


@pytest.mark.criterion(9, "exit points and cached compile failures")
def test_exit_point_and_failure():
    size = META.prim_irs[62]
    assert sum(i.op == "primReturn" for i in size.all_instrs()) == 1
    names = rtl_names(FE.primitives[62])
    assert "CallTrampoline" not in names
    assert not any(op[0] == "deoptimize" for op in FE.primitives[62].walk())

    image = _program(["pushActiveDepth", "pushTemp 0", "primAddSend", "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, "DruidJIT", threshold=1)
    assert got == ref and ref[1] is None
    m = vm.image.lookup(1, 40)
    assert vm.jit.entries[m].failed
    assert vm.jit.compile_attempts[m] == 1
    assert vm.jit.generator_invocations["pushActiveDepth"] == 1


IC_CLASSES = {0: "SmallInteger", 1: "UndefinedObject", 2: "True", 3: "False", 4: "Array"}


def _ic_program():
    parts = []
    for cid, name in IC_CLASSES.items():
        parts.append(f".class {name} id={cid}\n.method foo sel=50 args=0 temps=0\n"
                     f"  pushInt {cid}\n  returnTop\n")
    parts.append(".class UndefinedObject id=1\n.method call: sel=51 args=1 temps=0\n"
                 "  pushTemp 0\n  send #foo 0\n  returnTop\n.entry UndefinedObject call: 5\n")
    return load_program("".join(parts))


@pytest.mark.criterion(10, "inline cache state machine")
def test_inline_cache():
    image = _ic_program()
    vm = VM(image)
    jit = JIT(vm, druid_frontend(), threshold=1)
    entry = jit.entry(image.lookup(1, 51))
    jit.compile_entry(entry)
    (site,) = [s for s in jit.sites if s.selector == 50]
    array = vm.allocArray(0)
    script = [
        (None, "unlinked", 0),
        (tag_small_int(9), "mono", 1),
        (tag_small_int(3), "mono", 1),
        (NIL, "poly", 2),
        (TRUE, "poly", 3),
        (FALSE, "poly", 4),
        (TRUE, "poly", 4),
        (array, "mega", 5),
        (array, "mega", 6),
    ]
    for rcvr, state, lookups in script:
        if rcvr is not None:
            assert untag(entry.fn(NIL, rcvr, NIL)) == vm.class_of(rcvr)
        assert (site.state, jit.lookups) == (state, lookups)
