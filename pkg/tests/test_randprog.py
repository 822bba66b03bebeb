import pytest
from hypothesis import given, settings, strategies as st

from druidlet import bytecodes as bc
from druidlet.metacompiler import druid_frontend
from druidlet.object_model import load_program
from druidlet.randprog import (WEIGHTS, Outcome, differential_test, random_program, run_program,
                               shrink)


def test_weights_are_percentages():
    assert sum(WEIGHTS.values()) == 100
    assert WEIGHTS["arith"] == 40


@given(st.integers(0, 2 ** 31))
@settings(max_examples=50)
def test_programs_load_and_are_reproducible(seed):
    text = random_program(seed).text()
    assert random_program(seed).text() == text
    load_program(text)


def test_hundred_programs_cover_every_generator():
    fe = druid_frontend()
    wanted = {bc.OPCODES[o].handler for o in fe.bytecodes} | {f"primitive{p}" for p in fe.primitives}
    report = differential_test(0, 100)
    assert report.ok, report.summary()
    assert wanted <= set(report.coverage)


def test_mirror_tier_agrees_too():
    report = differential_test(2000, 60, candidate="MirrorJIT")
    assert report.ok, report.summary()


def test_outcomes_include_errors():
    report = differential_test(300, 80, shrink_failures=False)
    assert report.ok
    assert sum(report.errors.values()) > 0


def test_injected_fault_is_detected_and_shrunk():
    report = differential_test(0, 10, inject_fault=True, max_shrink=1)
    assert not report.ok
    mm = report.mismatches[0]
    assert mm.shrunk and len(mm.shrunk) < len(mm.program)
    text = mm.shrunk
    ref = run_program(text, "InterpreterOnly")
    bad = run_program(text, "DruidJIT", inject_fault=True, threshold=1 if mm.seed % 2 else 2)
    assert ref.key() != bad.key()


def test_shrink_keeps_a_passing_program_whole():
    spec = random_program(11)
    # nothing disagrees, so no deletion is ever accepted
    assert shrink(spec).text() == spec.text()


def test_run_program_reports_vm_errors():
    text = (".class UndefinedObject id=1\n.method m sel=40 args=0 temps=0\n"
            "  pushNil\n  send #size 0\n  returnTop\n.entry UndefinedObject m\n")
    out = run_program(text, "InterpreterOnly")
    assert out == Outcome(None, "DoesNotUnderstand", out.trace)
    assert out.trace[-1] == ("error", "DoesNotUnderstand")
