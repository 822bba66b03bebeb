"""Hand-written JIT frontend used as the code-quality baseline.

Each generator is a plain function over a :class:`~druidlet.jit.CompileContext`,
written in the style of a template JIT: look at the abstract stack, pick
registers, emit RTL.  The table covers exactly the opcodes and primitives
for which meta-compilation succeeds.
"""

from __future__ import annotations

from . import bytecodes as bc
from .jit import Frontend
from .object_model import untag

WORD = 8
TAG_MASK = 1
CLASS_MASK = 0xFFFFFFFF
ARRAY_CLASS = 4
MAX_NEW_ARRAY = 65536


# -- pushes and stores ---------------------------------------------------------

def gen_push_receiver_variable(ctx):
    ctx.ensure_self()
    r = ctx.alloc()
    ctx.emit("MoveMwR", WORD * (1 + (ctx.opcode & 0xF)), "RRR", r)
    ctx.ss_push_reg(r)


def gen_push_temp(ctx):
    ctx.ss_push_base("FP", WORD * (1 + (ctx.opcode & 0xF)))


def gen_push_literal(ctx):
    ctx.ss_push_const(ctx.method.literals[ctx.opcode & 0xF])


def _push_special(name):
    def gen(ctx):
        ctx.ss_push_const(ctx.special(name))
    gen.__name__ = f"gen_push_{name}"
    return gen


def gen_store_and_pop_temp(ctx):
    entry = ctx.ss[-1]
    offset = WORD * (1 + (ctx.opcode & 0xF))
    if entry[0] == "const":
        ctx.store_frame(offset, entry)
    else:
        r = ctx.alloc()
        ctx.ss_top(r, 0)
        ctx.store_frame(offset, ("reg", r))
    ctx.ss_pop(1)


def gen_dup(ctx):
    entry = ctx.ss[-1]
    if entry[0] == "const":
        ctx.ss_push_const(entry[1])
        return
    r = ctx.alloc()
    ctx.ss_top(r, 0)
    ctx.ss_push_reg(r)


def gen_pop(ctx):
    ctx.ss_pop(1)


# -- sends -----------------------------------------------------------------------

def _special_send(selector):
    def gen(ctx):
        ctx.annotate()
        ctx.marshall_send(selector, 1, True)
    gen.__name__ = f"gen_special_send_{selector}"
    return gen


def gen_send_literal(ctx):
    ctx.annotate()
    ctx.marshall_send(untag(ctx.method.literals[ctx.byte1]), ctx.byte2, False)


# -- jumps -------------------------------------------------------------------------

def gen_short_jump(ctx):
    ctx.jump_fixup(ctx.pc + (ctx.opcode & 7) + 2)


def gen_long_jump(ctx):
    offset = (ctx.byte1 << 8) | ctx.byte2
    if offset > 0x7FFF:
        offset -= 0x10000
    ctx.jump_fixup(ctx.pc + 3 + offset)


def _conditional_jump(taken, other):
    def gen(ctx):
        ctx.annotate()
        r = ctx.alloc()
        ctx.ss_top(r, 0)
        ctx.ss_pop(1)
        ctx.ss_flush()
        target = ctx.ensure_fixup_at(ctx.pc + (ctx.opcode & 7) + 2)
        ok = ctx.local("ok")
        ctx.emit("CmpCqR", ctx.special(taken), r)
        ctx.emit("JumpZero", target)
        ctx.emit("CmpCqR", ctx.special(other), r)
        ctx.emit("JumpZero", ok)
        ctx.emit("MoveRR", r, "Temp")
        ctx.trampoline("ceSendMustBeBoolean")
        ctx.bind(ok)
    gen.__name__ = f"gen_jump_{taken}"
    return gen


# -- returns and allocation ---------------------------------------------------------

def gen_return_top(ctx):
    ctx.ss_top("RRR", 0)
    ctx.emit("RetR")


def gen_return_receiver(ctx):
    ctx.ensure_self()
    ctx.emit("RetR")


def gen_push_new_array(ctx):
    ctx.ss_flush()
    if ctx.byte1 > 127:
        ctx.deoptimize()
        return
    size = ctx.byte1
    ctx.emit("MoveCqR", size, "Temp")
    ctx.trampoline("ceAllocateArray")
    array = ctx.alloc()
    ctx.emit("MoveRR", "Temp", array)
    if size:
        nil = ctx.alloc()
        ctx.emit("MoveCqR", ctx.special("nil"), nil)
        for i in range(size):
            ctx.emit("MoveRMw", nil, WORD * (1 + i), array)
    ctx.ss_push_reg(array)


# -- primitives ----------------------------------------------------------------------
# receiver in RRR, arguments in Arg0/Arg1; the common ``fail`` label falls
# through to the interpreted method body.

def _check_int(ctx, reg):
    ctx.emit("TstCqR", TAG_MASK, reg)
    ctx.emit("JumpZero", "fail")


def _check_array(ctx):
    ctx.emit("TstCqR", TAG_MASK, "RRR")
    ctx.emit("JumpNonZero", "fail")
    ctx.emit("MoveMwR", 0, "RRR", "Temp")
    ctx.emit("AndCqR", CLASS_MASK, "Temp")
    ctx.emit("CmpCqR", ARRAY_CLASS, "Temp")
    ctx.emit("JumpNonZero", "fail")


def _index_address(ctx):
    """Leave the address of slot ``Arg0`` of the receiver in Temp."""
    _check_int(ctx, "Arg0")
    ctx.emit("MoveRR", "Arg0", "Temp")
    ctx.emit("AsrCqR", 1, "Temp")
    ctx.emit("CmpCqR", 1, "Temp")
    ctx.emit("JumpLess", "fail")
    ctx.emit("MoveMwR", 0, "RRR", "Class")
    ctx.emit("AsrCqR", 32, "Class")
    ctx.emit("CmpRR", "Class", "Temp")
    ctx.emit("JumpGreater", "fail")
    ctx.emit("LslCqR", 3, "Temp")
    ctx.emit("AddRR", "RRR", "Temp")


def prim_add(ctx):
    _check_int(ctx, "Arg0")
    ctx.emit("MoveRR", "Arg0", "Temp")
    ctx.emit("AddCqR", -1, "Temp")
    ctx.emit("AddRR", "RRR", "Temp")
    ctx.emit("JumpOverflow", "fail")
    ctx.return_value(("reg", "Temp"))


def prim_sub(ctx):
    _check_int(ctx, "Arg0")
    ctx.emit("MoveRR", "RRR", "Temp")
    ctx.emit("SubRR", "Arg0", "Temp")
    ctx.emit("JumpOverflow", "fail")
    ctx.emit("AddCqR", 1, "Temp")
    ctx.return_value(("reg", "Temp"))


def prim_mul(ctx):
    _check_int(ctx, "Arg0")
    ctx.emit("MoveRR", "Arg0", "Temp")
    ctx.emit("AddCqR", -1, "Temp")
    ctx.emit("MoveRR", "RRR", "Class")
    ctx.emit("AsrCqR", 1, "Class")
    ctx.emit("MulRR", "Temp", "Class")
    ctx.emit("JumpOverflow", "fail")
    ctx.emit("AddCqR", 1, "Class")
    ctx.return_value(("reg", "Class"))


def _compare(jump_if_false):
    def prim(ctx):
        _check_int(ctx, "Arg0")
        no = ctx.local("false")
        ctx.emit("CmpRR", "Arg0", "RRR")
        ctx.emit(jump_if_false, no)
        ctx.return_value(("const", ctx.special("true")))
        ctx.bind(no)
        ctx.return_value(("const", ctx.special("false")))
    prim.__name__ = f"prim_compare_{jump_if_false}"
    return prim


def prim_at(ctx):
    _check_array(ctx)
    _index_address(ctx)
    ctx.emit("MoveMwR", 0, "Temp", "Temp")
    ctx.return_value(("reg", "Temp"))


def prim_at_put(ctx):
    _check_array(ctx)
    _index_address(ctx)
    ctx.emit("MoveRMw", "Arg1", 0, "Temp")
    ctx.return_value(("reg", "Arg1"))


def prim_size(ctx):
    _check_array(ctx)
    ctx.emit("MoveMwR", 0, "RRR", "Temp")
    ctx.emit("AsrCqR", 32, "Temp")
    ctx.emit("LslCqR", 1, "Temp")
    ctx.emit("AddCqR", 1, "Temp")
    ctx.return_value(("reg", "Temp"))


def prim_new_array(ctx):
    _check_int(ctx, "Arg0")
    ctx.emit("MoveRR", "Arg0", "Temp")
    ctx.emit("AsrCqR", 1, "Temp")
    ctx.emit("CmpCqR", 0, "Temp")
    ctx.emit("JumpLess", "fail")
    ctx.emit("CmpCqR", MAX_NEW_ARRAY, "Temp")
    ctx.emit("JumpGreater", "fail")
    ctx.trampoline("ceAllocateArray")
    ctx.return_value(("reg", "Temp"))


BY_HANDLER = {
    "pushReceiverVariable": gen_push_receiver_variable,
    "pushTemporaryVariable": gen_push_temp,
    "pushLiteralConstant": gen_push_literal,
    "pushNil": _push_special("nil"),
    "pushTrue": _push_special("true"),
    "pushFalse": _push_special("false"),
    "storeAndPopTemporaryVariable": gen_store_and_pop_temp,
    "duplicateTop": gen_dup,
    "popStackTop": gen_pop,
    "bytecodePrimAdd": _special_send(1),
    "bytecodePrimSubtract": _special_send(2),
    "bytecodePrimMultiply": _special_send(3),
    "bytecodePrimEqual": _special_send(4),
    "bytecodePrimLessThan": _special_send(5),
    "shortUnconditionalJump": gen_short_jump,
    "shortConditionalJumpTrue": _conditional_jump("true", "false"),
    "shortConditionalJumpFalse": _conditional_jump("false", "true"),
    "longUnconditionalJump": gen_long_jump,
    "sendLiteralSelector": gen_send_literal,
    "returnTop": gen_return_top,
    "returnReceiver": gen_return_receiver,
    "pushNewArray": gen_push_new_array,
}

PRIMITIVES = {
    1: prim_add, 2: prim_sub, 3: prim_mul,
    4: _compare("JumpGreaterOrEqual"), 5: _compare("JumpNonZero"),
    60: prim_at, 61: prim_at_put, 62: prim_size, 70: prim_new_array,
}


def mirror_frontend(reference: Frontend | None = None) -> Frontend:
    """Hand-written frontend restricted to the opcodes and primitives that
    ``reference`` (the generated frontend by default) supports."""
    if reference is None:
        from .metacompiler import druid_frontend
        reference = druid_frontend()
    table = {op: BY_HANDLER[bc.OPCODES[op].handler] for op in reference.bytecodes}
    prims = {pid: PRIMITIVES[pid] for pid in reference.primitives}
    return Frontend("mirror", table, prims, dict(reference.flags), dict(reference.prim_meta),
                    dict(reference.fallbacks))
