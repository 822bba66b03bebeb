from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from druidlet.frontend import translate_all
from druidlet.ir import EFFECTS, DruidIR, check_ssa, clone_ir, dump_ir
from druidlet.midend import (DEFAULT_ORDER, PASSES, MockMachine, binop, checked,
                             eliminate_dead_code, fold_constants, ir_eval, random_ir,
                             run_pipeline)
from druidlet.oracle import check_pass

IRS, PRIM_IRS, _ = translate_all()
BUILTIN = {**{f"op{k:#04x}": v for k, v in IRS.items()},
           **{f"prim{k}": v for k, v in PRIM_IRS.items()}}

seeds = st.integers(0, 2 ** 32 - 1)


@pytest.mark.parametrize("name", sorted(PASSES))
@given(seed=seeds, size=st.integers(4, 24))
@settings(max_examples=40)
def test_pass_preserves_behaviour_and_ssa(name, seed, size):
    ir = random_ir(seed, size)
    after, bad = check_pass(ir, PASSES[name], trials=25, seed=seed)
    assert bad == []
    assert check_ssa(after) == []


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_pipeline_is_idempotent_on_builtin_handlers(name):
    once = run_pipeline(clone_ir(BUILTIN[name]), check=True)
    text = dump_ir(once)
    assert dump_ir(run_pipeline(once, check=True)) == text


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_pipeline_preserves_handler_behaviour(name):
    _, bad = check_pass(BUILTIN[name], run_pipeline, trials=100)
    assert bad == []


def _reachable_effects(ir):
    return Counter(ins.op for b in ir.reachable() for ins in b.all_instrs() if ins.op in EFFECTS)


@given(seeds)
@settings(max_examples=100)
def test_dce_keeps_reachable_effects(seed):
    ir = random_ir(seed, 20)
    fold_constants(ir)
    before = _reachable_effects(ir)
    eliminate_dead_code(ir)
    assert _reachable_effects(ir) == before


def _checked_ir(a, b):
    ir = DruidIR("t", "bytecode")
    e, ok, ovf = ir.new_block(), ir.new_block(), ir.new_block()
    r = ir.terminate(e, "checkedAdd", (ir.const(e, a), ir.const(e, b)), (ok, ovf))
    ir.terminate(ok, "ret", (r,))
    ir.terminate(ovf, "ret", (ir.const(ovf, -7),))
    return ir


def test_folding_keeps_an_overflow_edge_that_can_trigger():
    ir = run_pipeline(_checked_ir((1 << 63) - 1, 1))
    assert any(ins.op == "checkedAdd" for ins in ir.all_instrs())
    assert ir_eval(ir, MockMachine([], 0, [])) == ("return", -7)


def test_folding_removes_a_safe_checked_op():
    ir = run_pipeline(_checked_ir(40, 2))
    assert not any(ins.op == "checkedAdd" for ins in ir.all_instrs())
    assert ir.instr_count() == 2  # const 42; ret


@given(st.integers(-(1 << 63), (1 << 63) - 1), st.integers(-(1 << 63), (1 << 63) - 1))
def test_binop_wraps_to_64_bits(a, b):
    r = binop("add", a, b)
    assert -(1 << 63) <= r < (1 << 63)
    assert (r - (a + b)) % (1 << 64) == 0
    exact = checked("checkedAdd", a, b)
    assert exact is None or exact == a + b == r


def test_gvn_merges_redundant_loads_between_fences():
    ir = DruidIR("g", "bytecode")
    b = ir.new_block()
    x = ir.add(b, "stackRead", depth=0)
    y = ir.add(b, "stackRead", depth=0)
    s = ir.add(b, "add", (x, y))
    ir.terminate(b, "ret", (s,))
    run_pipeline(ir)
    assert sum(ins.op == "stackRead" for ins in ir.all_instrs()) == 1


def test_pass_trace_reports_every_pass():
    trace = []
    run_pipeline(clone_ir(IRS[0x78]), trace=trace)
    assert [name for _, name, _ in trace[:len(DEFAULT_ORDER)]] == list(DEFAULT_ORDER)
    assert trace[-1][2] <= trace[0][2]


def test_order_is_a_parameter():
    a = run_pipeline(clone_ir(IRS[0x88]), order=("dce", "fold", "branch-simplify"))
    assert check_ssa(a) == []
