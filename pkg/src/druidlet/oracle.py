"""Randomised mock states and equivalence checks between handler code and IR."""

from __future__ import annotations

import random

from . import bytecodes as bc
from . import handler_lang as hl
from .handler_eval import COMPILER, handler_function, translate_definitions
from .ir import DruidIR, clone_ir
from .midend import EvalStuck, MockMachine, handler_outcome, ir_eval
from .object_model import (ARRAY_ID, FALSE, MAX_SMALL_INT, MIN_SMALL_INT, NIL,
                           SMALL_INTEGER_ID, TRUE, header_word, tag_small_int)

_INTERESTING = [0, 1, -1, 2, 3, 7, 100, MAX_SMALL_INT, MIN_SMALL_INT,
                MAX_SMALL_INT - 1, MIN_SMALL_INT + 1, 1 << 40, -(1 << 31)]

_COMPILER_NS = {}


def compiler_handlers(vmdef: hl.VMDefinition | None = None):
    vmdef = vmdef or hl.builtin_vm_definition()
    key = id(vmdef)
    if key not in _COMPILER_NS:
        _COMPILER_NS[key] = (vmdef, translate_definitions(vmdef, COMPILER)[0])
    return _COMPILER_NS[key][1]


def random_mock(rng: random.Random, nargs: int | None = None) -> MockMachine:
    """A consistent heap, a frame and an operand stack.

    With ``nargs`` the stack top holds a receiver plus that many arguments,
    chosen to hit both primitive success and every failure edge.
    """
    words = [header_word(1, 1), 0, header_word(2, 1), 0, header_word(3, 1), 0]
    arrays = []
    for _ in range(rng.randrange(1, 4)):
        n = rng.randrange(0, 5)
        arrays.append(len(words) * 8)
        words.append(header_word(ARRAY_ID, n))
        words.extend([NIL] * n)
    receiver = len(words) * 8
    words.append(header_word(7, 16))
    words.extend([NIL] * 16)
    method = len(words) * 8
    words.append(header_word(5, 16))
    words.extend(tag_small_int(rng.randrange(0, 64)) for _ in range(16))

    def value():
        r = rng.random()
        if r < 0.55:
            return tag_small_int(rng.choice(_INTERESTING) if rng.random() < 0.4
                                 else rng.randrange(-20, 20))
        if r < 0.75:
            return rng.choice(arrays)
        return rng.choice([NIL, TRUE, FALSE])

    for base in arrays + [receiver]:
        for i in range(words[base >> 3] >> 32):
            words[(base >> 3) + 1 + i] = value()
    temps = [value() for _ in range(16)]
    operands = [value() for _ in range(rng.randrange(4, 7))]
    if nargs is not None:
        operands += [value() for _ in range(nargs + 1)]
        if rng.random() < 0.5:
            operands[-1 - nargs] = rng.choice(arrays)
            if nargs:
                operands[-nargs] = tag_small_int(rng.randrange(-1, 6))
    stack = [receiver] + temps + operands
    return MockMachine(stack, 0, words, bytecodePC=rng.randrange(0, 300),
                       byte1=rng.randrange(0, 16) if rng.random() < 0.7 else rng.randrange(256),
                       byte2=rng.randrange(0, 256),
                       method_oop=method)


def _run(fn, m):
    try:
        return fn(m), m.state()
    except (EvalStuck, IndexError):
        return ("stuck",), None


def compare_on(ir: DruidIR, handler_fn, m: MockMachine, kind: str):
    """Run both sides on copies of ``m``; returns (handler_state, ir_state)."""
    a, b = m.copy(), m.copy()
    ha = _run(lambda x: handler_outcome(handler_fn, x, kind), a)
    hb = _run(lambda x: ir_eval(ir, x), b)
    return ha, hb


def check_handler_ir(ir: DruidIR, handler_fn, trials: int = 1000, seed: int = 0):
    """Count disagreements between handler code and ``ir`` over random states."""
    rng = random.Random(seed)
    kind = ir.kind
    nargs = ir.meta.get("numArgs") if kind == "primitive" else None
    bad = []
    for _ in range(trials):
        m = random_mock(rng, nargs)
        if ir.meta.get("guardClass") == SMALL_INTEGER_ID and not m.stack[-1 - nargs] & 1:
            # customised code only runs for receivers of the guard class
            m.stack[-1 - nargs] = tag_small_int(rng.choice(_INTERESTING))
        if kind == "bytecode":
            op = ir.meta["opcode"]
            m.currentBytecode = op
            m.pc = m.bytecodePC + bc.LENGTHS[op]
        ha, hb = compare_on(ir, handler_fn, m, kind)
        if ha != hb:
            bad.append((m, ha, hb))
    return bad


def check_pass(ir: DruidIR, transform, trials: int = 200, seed: int = 0):
    """Apply ``transform`` to a clone and compare ``ir_eval`` before/after."""
    after = transform(clone_ir(ir))
    rng = random.Random(seed)
    nargs = ir.meta.get("numArgs") if ir.kind == "primitive" else None
    bad = []
    for _ in range(trials):
        m = random_mock(rng, nargs)
        x, y = m.copy(), m.copy()
        ra = _run(lambda s: ir_eval(ir, s), x)
        rb = _run(lambda s: ir_eval(after, s), y)
        if ra != rb:
            bad.append((m, ra, rb))
    return after, bad
