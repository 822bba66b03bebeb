import pytest

from druidlet.harness import FIXTURES, load_fixture, tier
from druidlet.interpreter import VM
from druidlet.jit import JIT, threshold_from_env
from druidlet.metacompiler import druid_frontend
from druidlet.mirror import mirror_frontend
from druidlet.object_model import NIL, TRUE, FALSE, load_program, tag_small_int, untag
from druidlet.rtl import check_flags

IC_PROGRAM = """
.class SmallInteger id=0
.method foo sel=50 args=0 temps=0
  pushInt 0
  returnTop
.class UndefinedObject id=1
.method foo sel=50 args=0 temps=0
  pushInt 1
  returnTop
.method call: sel=51 args=1 temps=0
  pushTemp 0
  send #foo 0
  returnTop
.class True id=2
.method foo sel=50 args=0 temps=0
  pushInt 2
  returnTop
.class False id=3
.method foo sel=50 args=0 temps=0
  pushInt 3
  returnTop
.class Array id=4
.method foo sel=50 args=0 temps=0
  pushInt 4
  returnTop
.entry UndefinedObject call: 5
"""


def run(image, tier_name, threshold=2, **kw):
    vm = tier(tier_name, threshold).make_vm(image, **kw)
    try:
        result, _ = vm.run()
        err = None
    except Exception as exc:
        result, err = None, getattr(exc, "kind", type(exc).__name__)
    return vm, (result, err, vm.steps, vm.trace.records)


@pytest.mark.parametrize("tier_name", ["DruidJIT", "MirrorJIT"])
@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_agree_with_the_interpreter(name, tier_name):
    image = load_fixture(name)
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, tier_name)
    assert got == ref
    assert vm.jit.compiled


@pytest.mark.parametrize("name", FIXTURES)
def test_compiled_code_keeps_flag_discipline(name):
    vm, _ = run(load_fixture(name), "DruidJIT", threshold=1)
    for cm in vm.jit.compiled:
        assert check_flags(cm.rtl) == []


@pytest.mark.parametrize("name", FIXTURES)
def test_deopt_at_every_mapped_pc(name):
    image = load_fixture(name)
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, "DruidJIT", probe=True)
    assert got[:2] == ref[:2] and got[3] == ref[3]
    assert vm.jit.deopts > 0


def _program(body, temps=0):
    return load_program(".class UndefinedObject id=1\n.method m: sel=40 args=1 temps=%d\n" % temps
                        + "\n".join("  " + ln for ln in body)
                        + "\n.method go sel=41 args=0 temps=0\n  pushNil\n  pushInt 1\n"
                          "  send #m: 1\n  popTop\n  pushNil\n  pushInt 2\n  send #m: 1\n"
                          "  returnTop\n.entry UndefinedObject go\n")


def test_push_new_array_slow_path_round_trips():
    # operand 0x83: bit 7 set forces the interpreter, which builds a 3-slot array
    image = _program(["pushNewArray 131", "send #size 0", "pushTemp 0", "primAddSend",
                      "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, "DruidJIT", threshold=1)
    assert untag(ref[0]) == 5 and got == ref
    assert vm.jit.deopts == 2


def test_untranslatable_opcode_fails_once_and_is_cached():
    image = _program(["pushActiveDepth", "pushTemp 0", "primAddSend", "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    vm, got = run(image, "DruidJIT", threshold=1)
    assert got == ref
    m = vm.image.lookup(1, 40)
    entry = vm.jit.entries[m]
    assert entry.failed and "pushActiveDepth" in entry.reason
    assert vm.jit.compile_attempts[m] == 1
    assert vm.jit.generator_invocations["pushActiveDepth"] == 1


def test_fuel_exhaustion_matches_in_compiled_code():
    image = load_fixture("loop-sum")
    for fuel in (50, 5_000, 77_777):
        _, ref = run(image, "InterpreterOnly", fuel=fuel)
        _, got = run(image, "DruidJIT", fuel=fuel)
        assert ref[1] == "FuelExhausted" and got == ref


def test_stack_overflow_matches_in_compiled_code():
    text = (".class UndefinedObject id=1\n.method down sel=41 args=0 temps=0\n"
            "  pushNil\n  send #down 0\n  returnTop\n.entry UndefinedObject down\n")
    image = load_program(text)
    _, ref = run(image, "InterpreterOnly", threshold=1)
    _, got = run(image, "DruidJIT", threshold=1)
    assert ref[1] == "StackOverflow" and got == ref


def test_overflow_falls_back_to_the_interpreted_body():
    big = (1 << 62) - 1
    image = _program([f"pushInt {big}", "pushTemp 0", "primAddSend", "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    _, got = run(image, "DruidJIT", threshold=1)
    assert ref[0] == NIL and got == ref
    assert ("primFail", 1) in got[3]


def test_must_be_boolean_in_compiled_code():
    image = _program(["pushTemp 0", "jumpTrue @x", "pushNil", "@x:", "pushNil", "returnTop"])
    _, ref = run(image, "InterpreterOnly")
    _, got = run(image, "DruidJIT", threshold=1)
    assert ref[1] == "MustBeBoolean" and got == ref


def test_inline_cache_state_machine():
    image = load_program(IC_PROGRAM)
    vm = VM(image)
    jit = JIT(vm, druid_frontend(), threshold=1)
    entry = jit.entry(image.lookup(1, 51))
    jit.compile_entry(entry)
    (site,) = [s for s in jit.sites if s.selector == 50]
    array = vm.allocArray(0)
    script = [
        (tag_small_int(9), "mono", 1),
        (tag_small_int(3), "mono", 1),   # monomorphic hit: no lookup
        (tag_small_int(4), "mono", 1),
        (NIL, "poly", 2),
        (TRUE, "poly", 3),
        (FALSE, "poly", 4),              # four classes cached
        (NIL, "poly", 4),
        (tag_small_int(1), "poly", 4),
        (array, "mega", 5),              # fifth class
        (array, "mega", 6),              # megamorphic sites always look up
    ]
    assert site.state == "unlinked"
    expected = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4}
    for rcvr, state, lookups in script:
        result = entry.fn(NIL, rcvr, NIL)
        assert untag(result) == expected[vm.class_of(rcvr)]
        assert (site.state, jit.lookups) == (state, lookups)


def test_threshold_from_environment(monkeypatch):
    monkeypatch.setenv("DRUIDLET_THRESHOLD", "7")
    assert threshold_from_env() == 7
    assert tier("DruidJIT").threshold == 7
    monkeypatch.delenv("DRUIDLET_THRESHOLD")
    assert threshold_from_env() == 2


def test_tier_up_happens_at_the_threshold():
    image = load_fixture("fib", arg=3)
    vm, _ = run(image, "DruidJIT", threshold=2)
    fib = vm.image.entry_method()
    assert vm.jit.entries[fib].compiled is not None
    vm, _ = run(image, "DruidJIT", threshold=100)
    assert vm.jit.compiled == []


def test_generated_and_handwritten_frontends_cover_the_same_entries():
    d, m = druid_frontend(), mirror_frontend()
    assert set(d.bytecodes) == set(m.bytecodes)
    assert set(d.primitives) == set(m.primitives)
    assert 0x52 not in d.bytecodes


def test_compiled_methods_are_smaller_than_a_limit():
    vm, _ = run(load_fixture("sieve"), "DruidJIT", threshold=1)
    d = {c.method.selector: c.instruction_count for c in vm.jit.compiled}
    vm, _ = run(load_fixture("sieve"), "MirrorJIT", threshold=1)
    m = {c.method.selector: c.instruction_count for c in vm.jit.compiled}
    assert d.keys() == m.keys()
    for sel in d:
        assert d[sel] <= 1.5 * m[sel]
