import pytest
from hypothesis import given, settings, strategies as st

from druidlet import handler_lang as hl
from druidlet.harness import FIXTURES, load_fixture
from druidlet.interpreter import VM, interpret
from druidlet.object_model import FALSE, NIL, TRUE, load_program, tag_small_int, untag
from druidlet.randprog import random_program


def _fib(n):
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


def _primes_upto(n):
    flags = [True] * (n + 1)
    count = 0
    for i in range(2, n + 1):
        if flags[i]:
            count += 1
            for j in range(i * i, n + 1, i):
                flags[j] = False
    return count


def _tree_nodes(depth):
    return 1 if depth == 0 else 1 + 2 * _tree_nodes(depth - 1)


def _bubble(n):
    a = [n - i for i in range(1, n + 1)]
    for i in range(len(a)):
        for j in range(len(a) - 1 - i):
            if a[j] > a[j + 1]:
                a[j], a[j + 1] = a[j + 1], a[j]
    return a[0] * 1000 + a[-1]


# independent re-statements of what each fixture computes
ORACLE = {
    "fib": _fib(20),
    "loop-sum": sum(range(2000)),
    "array-fill": sum(i * i for i in range(100)),
    "sieve": _primes_upto(2000),
    "bubble-sort": _bubble(60),
    "binarytrees-lite": 8 * _tree_nodes(8),
}


def run_text(text, **kw):
    return VM(load_program(text), **kw)


def method(body, args=0, temps=0, extra=""):
    return (f".class UndefinedObject id=1\n.method m sel=40 args={args} temps={temps}\n"
            + "\n".join("  " + ln for ln in body) + "\n" + extra + ".entry UndefinedObject m\n")


@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_results(name):
    result, _ = interpret(load_fixture(name))
    assert untag(result) == ORACLE[name]


def test_fixture_argument_override():
    result, _ = interpret(load_fixture("fib", arg=10))
    assert untag(result) == 55


@pytest.mark.parametrize("name", ["fib", "sieve"])
def test_deterministic(name):
    image = load_fixture(name)
    a, b = VM(image), VM(image)
    assert a.run()[0] == b.run()[0]
    assert a.trace.records == b.trace.records and a.steps == b.steps


@given(st.integers(0, 10_000))
@settings(max_examples=60)
def test_stack_balance_on_random_programs(seed):
    vm = VM(load_program(random_program(seed).text()), fuel=20_000, debug=True)
    try:
        vm.run()
    except Exception as exc:  # only VM-level errors are acceptable
        assert type(exc).__module__ == "druidlet.interpreter", exc


@pytest.mark.parametrize("name", FIXTURES)
def test_stack_balance_on_fixtures(name):
    VM(load_fixture(name), debug=True).run()


def test_fuel_counts_every_bytecode():
    image = load_fixture("fib", arg=8)
    vm = VM(image)
    vm.run()
    n = vm.steps
    assert VM(image, fuel=n).run()[0] == tag_small_int(21)
    short = VM(image, fuel=n - 1)
    with pytest.raises(Exception) as info:
        short.run()
    assert info.value.kind == "FuelExhausted"
    assert short.steps == n


def test_fused_comparison_jump_costs_two_steps():
    text = method(["pushInt 1", "pushInt 2", "primLessSend", "jumpTrue @t",
                   "pushInt 0", "returnTop", "@t:", "pushInt 9", "returnTop"])
    vm = run_text(text)
    assert untag(vm.run()[0]) == 9
    assert vm.steps == 6


def test_special_sends_on_small_integers_leave_no_trace():
    vm = run_text(method(["pushInt 3", "pushInt 4", "primAddSend", "returnTop"]))
    assert untag(vm.run()[0]) == 7
    assert vm.trace.records == []


def test_overflowing_add_goes_through_the_primitive():
    big = (1 << 62) - 1
    vm = run_text(method(["pushInt %d" % big, "pushInt 1", "primAddSend", "returnTop"]))
    # the kernel fallback body answers nil
    assert vm.run()[0] == NIL
    assert vm.trace.records == [("send", 0, 1), ("primFail", 1)]


def test_does_not_understand():
    vm = run_text(method(["pushNil", "send #size 0", "returnTop"]))
    with pytest.raises(Exception) as info:
        vm.run()
    assert info.value.kind == "DoesNotUnderstand"
    assert vm.trace.records[-1] == ("error", "DoesNotUnderstand")


def test_must_be_boolean():
    vm = run_text(method(["pushInt 3", "jumpTrue @x", "pushNil", "@x:", "pushNil", "returnTop"]))
    with pytest.raises(Exception) as info:
        vm.run()
    assert info.value.kind == "MustBeBoolean"


def test_stack_overflow():
    text = (".class UndefinedObject id=1\n.method down sel=41 args=0 temps=0\n"
            "  pushNil\n  send #down 0\n  returnTop\n.entry UndefinedObject down\n")
    with pytest.raises(Exception) as info:
        run_text(text, max_depth=50).run()
    assert info.value.kind == "StackOverflow"


def test_arrays_and_bounds():
    ok = method(["pushNewArray 3", "storeAndPopTemp 0", "pushTemp 0", "pushInt 2", "pushInt 7",
                 "send #at:put: 2", "popTop", "pushTemp 0", "pushInt 2", "send #at: 1",
                 "returnTop"], temps=1)
    assert untag(run_text(ok).run()[0]) == 7
    bad = method(["pushNewArray 3", "pushInt 4", "send #at: 1", "returnTop"])
    vm = run_text(bad)
    assert vm.run()[0] == NIL
    assert vm.trace.records == [("send", 4, 6), ("primFail", 60)]


def test_pushnewarray_fills_with_nil():
    text = method(["pushNewArray 2", "pushInt 1", "send #at: 1", "returnTop"])
    assert run_text(text).run()[0] == NIL


def test_booleans_are_specials():
    text = method(["pushInt 1", "pushInt 1", "primEqSend", "returnTop"])
    assert run_text(text).run()[0] == TRUE
    text = method(["pushInt 2", "pushInt 1", "primLessSend", "returnTop"])
    assert run_text(text).run()[0] == FALSE


def test_interpreter_runs_the_handler_definitions():
    # swapping the body of pushTrue in the definition changes what runs
    src = hl.vm_source().replace("(push: (trueObject)) (fetchNextBytecode)",
                                 "(push: (falseObject)) (fetchNextBytecode)")
    assert src != hl.vm_source()
    vmdef = hl.vm_definition_from_text(src)
    text = method(["pushTrue", "returnTop"])
    assert VM(load_program(text)).run()[0] == TRUE
    assert VM(load_program(text), vmdef=vmdef).run()[0] == FALSE
