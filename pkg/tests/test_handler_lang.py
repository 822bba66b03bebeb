import pytest
from hypothesis import given, strategies as st

from druidlet import bytecodes as bc
from druidlet import handler_lang as hl


@pytest.fixture(scope="module")
def vmdef():
    return hl.builtin_vm_definition()


def test_opcode_table_is_total():
    assert len(bc.OPCODES) == 256
    assert [i.opcode for i in bc.OPCODES] == list(range(256))
    handlers = hl.builtin_vm_definition().handlers
    for info in bc.OPCODES:
        assert info.handler == bc.UNKNOWN or info.handler in handlers


def test_unassigned_opcodes_are_unknown():
    assert bc.OPCODES[0xFF].handler == bc.UNKNOWN
    assert bc.OPCODES[0x33].handler == bc.UNKNOWN
    assert bc.OPCODES[0x78].handler == "shortConditionalJumpTrue"


def test_builtin_definition_validates(vmdef):
    assert hl.validate_definition(vmdef) == []


def test_every_helper_is_used_and_defined_once(vmdef):
    used = {h for d in vmdef.all_defs() for h in d.helpers_used}
    assert set(vmdef.helpers) <= used
    names = [d.name for d in hl.parse_definitions(hl.vm_source()) if d.kind == "helper"]
    assert len(names) == len(set(names))


def test_nine_primitives(vmdef):
    assert sorted(vmdef.primitives) == [1, 2, 3, 4, 5, 60, 61, 62, 70]


def test_pretty_printer_reaches_a_fixpoint(vmdef):
    once = hl.format_definitions(hl.parse_definitions(hl.vm_source()))
    twice = hl.format_definitions(hl.parse_definitions(once))
    assert once == twice


flags = st.lists(st.sampled_from(sorted(hl.COMPILATION_FLAGS)), unique=True).map(tuple)
annotations = st.builds(
    hl.Annotations,
    numberOfArguments=st.none() | st.integers(0, 3),
    compilationInfo=flags,
    druidInfo=st.sampled_from([(), ("hasSend",)]),
    needsFrameNever=st.none() | st.integers(-2, 2),
    druidExitPoint=st.booleans(),
    customisedReceiverFor=st.none() | st.just("SmallInteger"),
)


@given(annotations)
def test_annotations_round_trip(ann):
    d = hl.HandlerDef("h", "bytecode", ann, [hl.ExprStmt(hl.Call("fetchNextBytecode", ()))])
    text = hl.format_definition(d)
    (back,) = hl.parse_definitions(text)
    assert back.annotations == ann
    assert hl.format_definition(back) == text


def _diags(src):
    vmdef = hl.vm_definition_from_text(src)
    return [x for d in vmdef.all_defs() for x in hl.validate_handler(d, vmdef.helpers)]


def test_unknown_intrinsic_is_reported_with_path():
    diags = _diags("(bytecode b (body (push: (frobnicate 1)) (fetchNextBytecode)))")
    assert diags == ["b: body[0].push:[0]: unknown intrinsic or helper frobnicate"]


def test_arity_mismatch():
    (diag,) = _diags("(bytecode b (body (pop: 1 2) (fetchNextBytecode)))")
    assert "expects 1 arguments, got 2" in diag


def test_open_path_is_reported():
    (diag,) = _diags("(bytecode b (body (if (= 1 1) (do (fetchNextBytecode)))))")
    assert "has no terminator" in diag


def test_recursive_helper():
    src = "(helper f: (x) (body (return (g: x))))\n(helper g: (x) (body (return (f: x))))"
    diags = _diags(src)
    assert "f:: recursive helper" in diags and "g:: recursive helper" in diags


def test_misplaced_annotation():
    (diag,) = _diags("(bytecode b (annotations (numberOfArguments 1)) (body (fetchNextBytecode)))")
    assert "misplaced annotation numberOfArguments" in diag


def test_exit_point_annotation_must_match_body():
    src = ("(primitive p 9 (annotations (numberOfArguments 0))"
           " (body (druidExitPoint) (primitiveFail)))")
    assert any("druidExitPoint" in x for x in _diags(src))


def test_checked_op_needs_overflow_block():
    src = ("(primitive p 9 (annotations (numberOfArguments 1))"
           " (body (pop:thenPush: 2 (sumSmallIntegerWithOverflow 1 2 3))))")
    assert any("overflow (do ...) block" in x for x in _diags(src))


def test_duplicate_definitions_are_rejected():
    with pytest.raises(hl.HandlerSyntaxError):
        hl.vm_definition_from_text("(helper f: (x) (body (return x)))\n"
                                   "(helper f: (x) (body (return x)))")


def test_unused_helper_is_reported(vmdef):
    src = hl.vm_source() + "\n(helper spare: (x) (body (return x)))\n"
    assert "helper spare: is never called" in hl.validate_definition(hl.vm_definition_from_text(src))


def test_reader_rejects_unbalanced_parens():
    with pytest.raises(hl.HandlerSyntaxError):
        hl.read_sexprs("(bytecode b (body")
