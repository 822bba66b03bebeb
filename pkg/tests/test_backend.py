from pathlib import Path

import pytest

from druidlet import bytecodes as bc
from druidlet.backend import GenError, emit_generator, listing
from druidlet.harness import load_fixture, tier
from druidlet.ir import DruidIR
from druidlet.jit import JIT
from druidlet.metacompiler import (decode_frontend, encode_frontend, frontend_listing,
                                   meta_compile, table_dump)
from druidlet.object_model import FALSE, TRUE
from druidlet.staging import StagingError, check_generator_stages, staged_projection

GOLDEN = Path(__file__).parent / "golden"
META = meta_compile()
FE = META.frontend
GENERATORS = {**{f"op{k:#04x}": g for k, g in FE.bytecodes.items()},
              **{f"prim{k}": g for k, g in FE.primitives.items()}}


def rtl_names(gp):
    return [op[1] for op in gp.walk() if op[0] == "rtl"]


def _paths(ops, flushed=False, out=None):
    """Collect (op, flushed-so-far) along every staged path; returns the
    flush state at the end of ``ops`` (a join keeps it only if both arms do)."""
    for op in ops:
        k = op[0]
        if k == "stagedIf":
            a = _paths(op[2], flushed, out)
            b = _paths(op[3], flushed, out)
            flushed = a and b
            continue
        if k == "stagedLoop":
            flushed = _paths(op[1] + op[3], flushed, out) and flushed
            continue
        if k == "ssFlush":
            flushed = True
        elif k in ("ssPushReg", "ssPushConst", "ssPushBase"):
            flushed = False
        out.append((op, flushed))
    return flushed


# -- golden shapes ------------------------------------------------------------

def test_primitive_add_skeleton():
    skeleton = ["TstCqR", "JumpZero", "MoveRR", "AddCqR", "AddRR", "JumpOverflow"]
    gp = FE.primitives[1]
    assert rtl_names(gp) == skeleton
    assert ("rtl", "AddCqR", ("imm", -1), ("reg", "Temp")) in gp.ops
    # the seventh instruction is the result move done by primReturn
    vm = tier("DruidJIT", 1).make_vm(load_fixture("fib", arg=5))
    vm.run()
    (plus,) = [c for c in vm.jit.compiled if c.method.selector == "+"]
    assert [ins[0] for ins in plus.rtl[:7]] == skeleton + ["MoveRR"]


def test_push_receiver_variable_1_folds_its_offset():
    gp = FE.bytecodes[0x01]
    assert ("ssPushBase", ("rv", "r1"), ("imm", 16)) in gp.ops
    assert not any(op[0] == "staged" for op in gp.walk())


def test_short_jump_true_1_shape():
    gp = FE.bytecodes[0x78]
    assert gp.ops[0] == ("annotate",)
    kinds = [op[0] for op in gp.walk()]
    assert kinds.count("ssFlush") == 1
    tramp = next(i for i, op in enumerate(gp.ops) if op[0] == "rtl" and op[1] == "CallTrampoline")
    assert kinds.index("ssFlush") < tramp
    pc_var = next(op[1] for op in gp.ops if op[0] == "staged" and op[2:] == ("param", "bytecodePC"))
    target = next(op for op in gp.ops if op[0] == "staged" and op[2] == "add")
    assert target[3:] == (pc_var, ("imm", 2))
    assert ("jumpFixup", target[1]) in gp.ops


def test_push_new_array_stages_deopt_and_fill_loop():
    gp = FE.bytecodes[0xB0]
    (guard,) = [op for op in gp.ops if op[0] == "stagedIf"]
    assert ("deoptimize",) in guard[2]
    loops = [op for op in gp.walk() if op[0] == "stagedLoop"]
    assert len(loops) == 1
    body = loops[0][3]
    assert any(op[0] == "rtl" and op[1] == "MoveRMw" for op in body)


def test_listing_matches_golden():
    assert frontend_listing(FE) == (GOLDEN / "frontend.txt").read_text()


def test_table_matches_golden():
    assert table_dump(META.table) == (GOLDEN / "table.txt").read_text()


def test_table_marks_fallback_and_unknown():
    by_op = {e.opcode: e for e in META.table}
    assert by_op[0x52].generator == "interpretFallback"
    assert by_op[0xFF].generator == bc.UNKNOWN
    assert {"branch", "isBranchTrue", "isMapped"} <= by_op[0x7A].flags
    assert "isBranchFalse" in by_op[0x80].flags


def test_frontend_file_round_trips():
    data = encode_frontend(FE)
    assert data[:4] == b"DRU1"
    back = decode_frontend(data)
    assert frontend_listing(back) == frontend_listing(FE)
    assert back.flags == {k: FE.flags[k] for k in FE.bytecodes}
    assert back.prim_meta == FE.prim_meta
    with pytest.raises(ValueError):
        decode_frontend(b"XXXX" + data[4:])


# -- generator invariants ------------------------------------------------------

@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_mapped_entries_annotate_first(name):
    gp = GENERATORS[name]
    n = sum(op[0] == "annotate" for op in gp.walk())
    if "isMapped" in gp.meta.get("flags", ()):
        assert gp.ops[0] == ("annotate",) and n == 1
    else:
        assert n == 0


@pytest.mark.parametrize("name", sorted(k for k in GENERATORS if k.startswith("op")))
def test_runtime_transitions_are_flushed(name):
    seen = []
    _paths(GENERATORS[name].ops, out=seen)
    for op, flushed in seen:
        if op[0] == "deoptimize" or (op[0] == "rtl" and op[1] == "CallTrampoline"):
            assert flushed, op


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_generator_stages_are_consistent(name):
    assert check_generator_stages(GENERATORS[name].ops) == []


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_staged_projection_terminates(name):
    ops = GENERATORS[name].ops
    for byte1 in range(256):
        staged_projection(ops, {"bytecodePC": 7, "byte1": byte1, "byte2": 255 - byte1,
                                "method": 4096})


def test_stage_check_rejects_runtime_operands():
    ops = [("alloc", ("rv", "r1")),
           ("staged", ("sv", "s1"), "add", ("rv", "r1"), ("imm", 1)),
           ("stagedIf", ("rv", "r1"), [], [])]
    assert len(check_generator_stages(ops)) == 2


def test_projection_detects_runaway_loops():
    ops = [("staged", ("sv", "s0"), "copy", ("imm", 1)),
           ("stagedLoop", [], ("sv", "s0"), [])]
    with pytest.raises(StagingError):
        staged_projection(ops, {}, limit=100)


def test_booleans_are_jit_time_constants():
    gp = FE.bytecodes[0x78]
    specials = [op for op in gp.walk() if op[0] == "staged" and op[2] == "special"]
    assert {op[3] for op in specials} == {"true", "false"}
    # no boolean word is baked into the generator itself
    for op in gp.walk():
        if op[0] == "rtl" and op[1] == "CmpCqR":
            assert op[2][0] == "sv"
    # a JIT over an image with relocated booleans emits the relocated words
    vm = tier("DruidJIT", 1).make_vm(load_fixture("fib", arg=3))
    moved = (0, 0x5008, 0x6008)
    vm.jit.specials = moved
    vm.jit.compile_entry(vm.jit.entry(vm.image.entry_method()))
    (cm,) = vm.jit.compiled
    consts = {ins[1] for ins in cm.rtl if ins[0] == "CmpCqR"}
    assert 0x5008 in consts and TRUE not in consts and FALSE not in consts


def test_unlowerable_ir_raises_gen_error():
    ir = DruidIR("odd", "bytecode")
    b = ir.new_block()
    x = ir.add(b, "receiver")
    ir.add(b, "frobnicate", (x,))
    ir.terminate(b, "next")
    with pytest.raises(GenError):
        emit_generator(ir)


def test_listing_shows_staged_control():
    text = listing(FE.bytecodes[0xB0])
    assert "ifTrue: [" in text and "whileTrue: [" in text


def test_size_exit_point_branch_is_not_compiled():
    from druidlet.frontend import translate_all
    _, prims, _ = translate_all()
    ir = prims[62]
    returns = [i for i in ir.all_instrs() if i.op == "primReturn"]
    assert len(returns) == 1  # the exit-point arm became a primitive failure
    names = rtl_names(FE.primitives[62])
    assert names.count("AsrCqR") == 1
    assert "CallTrampoline" not in names
    assert not any(op[0] == "deoptimize" for op in FE.primitives[62].walk())
