import pytest

from druidlet import bytecodes as bc
from druidlet import handler_lang as hl
from druidlet.frontend import (TranslationError, UnsupportedIntrinsic, translate_all,
                               translate_handler, translate_primitive)
from druidlet.handler_eval import handler_function
from druidlet.ir import check_ssa, dump_ir
from druidlet.object_model import SMALL_INTEGER_ID
from druidlet.oracle import check_handler_ir, compiler_handlers

VMDEF = hl.builtin_vm_definition()
IRS, PRIM_IRS, FAILURES = translate_all(VMDEF)

PUSH_NIL = "(bytecode pushNil\n  (annotations (needsFrameNever 1))\n  (body (push: (nilObject)) (fetchNextBytecode)))"


def _with_push_nil(body):
    src = hl.vm_source()
    assert PUSH_NIL in src
    new = f"(bytecode pushNil\n  (annotations (needsFrameNever 1))\n  (body {body}))"
    return hl.vm_definition_from_text(src.replace(PUSH_NIL, new))


def test_every_entry_translates_except_active_depth():
    assert set(FAILURES) == {"pushActiveDepth@0x52"}
    assert FAILURES["pushActiveDepth@0x52"].startswith("UnsupportedIntrinsic")
    expected = {i.opcode for i in bc.OPCODES if i.handler not in (bc.UNKNOWN, "pushActiveDepth")}
    assert set(IRS) == expected
    assert sorted(PRIM_IRS) == [1, 2, 3, 4, 5, 60, 61, 62, 70]


@pytest.mark.parametrize("key", sorted(IRS) + [f"p{k}" for k in sorted(PRIM_IRS)])
def test_translation_is_valid_ssa(key):
    ir = PRIM_IRS[int(key[1:])] if isinstance(key, str) else IRS[key]
    assert check_ssa(ir) == []


def test_no_helper_calls_survive():
    helpers = set(VMDEF.helpers)
    for ir in list(IRS.values()) + list(PRIM_IRS.values()):
        assert not any(ins.op in helpers or ins.op == "call" for ins in ir.all_instrs())


def _entries():
    for op in sorted(IRS):
        yield f"op{op:#04x}", IRS[op], bc.OPCODES[op].handler
    for pid in sorted(PRIM_IRS):
        yield f"prim{pid}", PRIM_IRS[pid], VMDEF.primitives[pid].name


@pytest.mark.parametrize("name,ir,handler", list(_entries()), ids=lambda x: x if isinstance(x, str) else "")
def test_ir_agrees_with_handler_on_random_states(name, ir, handler):
    fn = handler_function(compiler_handlers(VMDEF), handler)
    bad = check_handler_ir(ir, fn, trials=1000, seed=hash(name) & 0xFFFF)
    assert bad == [], bad[:1]


def test_active_depth_is_unsupported():
    with pytest.raises(UnsupportedIntrinsic):
        translate_handler(VMDEF.handlers["pushActiveDepth"], 0x52, VMDEF)


def test_druid_ignore_contributes_nothing():
    plain = translate_handler(VMDEF.handlers["pushNil"], 0x30, VMDEF)
    vmdef = _with_push_nil("(druidIgnore (let x (stackTop)) (push: x) (pop: 1)) "
                           "(push: (nilObject)) (fetchNextBytecode)")
    ignored = translate_handler(vmdef.handlers["pushNil"], 0x30, vmdef)
    assert dump_ir(ignored) == dump_ir(plain)


def test_interpreter_ignore_contributes_instructions():
    plain = translate_handler(VMDEF.handlers["pushNil"], 0x30, VMDEF)
    vmdef = _with_push_nil("(interpreterIgnore (let x (stackTop)) (let y (+ x 1))) "
                           "(push: (nilObject)) (fetchNextBytecode)")
    extra = translate_handler(vmdef.handlers["pushNil"], 0x30, vmdef)
    before = plain.instr_count()
    # pure values with no use may be cleaned up later, but translation emits them
    assert extra.instr_count() >= before + 1


def test_stageable_rejects_effectful_expressions():
    vmdef = _with_push_nil("(push: (druidStageable (stackTop))) (fetchNextBytecode)")
    with pytest.raises(TranslationError, match="druidStageable"):
        translate_handler(vmdef.handlers["pushNil"], 0x30, vmdef)


def test_customised_receiver_records_guard():
    ir = PRIM_IRS[1]
    assert ir.meta["guardClass"] == SMALL_INTEGER_ID
    with pytest.raises(TranslationError):
        translate_primitive(VMDEF.primitives[1], receiver_class=4, vmdef=VMDEF)


def test_loops_become_cfg_loops():
    ir = IRS[0xB0]  # pushNewArray fills with a to:do: loop
    assert ir.loop_headers()
    header = next(iter(ir.loop_headers()))
    assert header.phis and all(ins.op == "phi" for ins in header.phis)


def test_opcode_specialisation_folds_operand_bits():
    # the entry for pushTemporaryVariable_3 sees currentBytecode as a constant
    text = dump_ir(IRS[0x13])
    assert "const 19" in text and "param() name=currentBytecode" not in text
