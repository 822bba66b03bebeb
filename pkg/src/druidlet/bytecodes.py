"""Bytecode encoding shared by the assembler, the interpreter and the JIT.

Each table row is ``(first, last, handler, length)``: opcodes in
``first..last`` dispatch to the handler named ``handler`` and the
instruction occupies ``length`` bytes (opcode plus operand bytes).
"""

from __future__ import annotations

from dataclasses import dataclass

BYTECODE_RANGES = (
    (0x00, 0x0F, "pushReceiverVariable", 1),
    (0x10, 0x1F, "pushTemporaryVariable", 1),
    (0x20, 0x2F, "pushLiteralConstant", 1),
    (0x30, 0x30, "pushNil", 1),
    (0x31, 0x31, "pushTrue", 1),
    (0x32, 0x32, "pushFalse", 1),
    (0x40, 0x4F, "storeAndPopTemporaryVariable", 1),
    (0x50, 0x50, "duplicateTop", 1),
    (0x51, 0x51, "popStackTop", 1),
    (0x52, 0x52, "pushActiveDepth", 1),
    (0x60, 0x60, "bytecodePrimAdd", 1),
    (0x61, 0x61, "bytecodePrimSubtract", 1),
    (0x62, 0x62, "bytecodePrimMultiply", 1),
    (0x63, 0x63, "bytecodePrimEqual", 1),
    (0x64, 0x64, "bytecodePrimLessThan", 1),
    (0x70, 0x77, "shortUnconditionalJump", 1),
    (0x78, 0x7F, "shortConditionalJumpTrue", 1),
    (0x80, 0x87, "shortConditionalJumpFalse", 1),
    (0x88, 0x88, "longUnconditionalJump", 3),
    (0x90, 0x90, "sendLiteralSelector", 3),
    (0xA0, 0xA0, "returnTop", 1),
    (0xA1, 0xA1, "returnReceiver", 1),
    (0xB0, 0xB0, "pushNewArray", 2),
)

UNKNOWN = "unknownBytecode"


@dataclass(frozen=True)
class OpcodeInfo:
    opcode: int
    handler: str
    length: int
    first: int
    last: int


def _build_table() -> tuple[OpcodeInfo, ...]:
    table: list[OpcodeInfo | None] = [None] * 256
    for first, last, handler, length in BYTECODE_RANGES:
        for op in range(first, last + 1):
            table[op] = OpcodeInfo(op, handler, length, first, last)
    return tuple(t if t is not None else OpcodeInfo(op, UNKNOWN, 1, op, op)
                 for op, t in enumerate(table))


OPCODES = _build_table()
LENGTHS = tuple(info.length for info in OPCODES)


JUMP_TRUE_FIRST, JUMP_TRUE_LAST = 0x78, 0x7F
JUMP_FALSE_FIRST, JUMP_FALSE_LAST = 0x80, 0x87

# assembler mnemonic -> (opcode base, operand kind)
#   "idx16": 0..15 folded into the opcode; "off8": jump offset 1..8 folded in;
#   "s16": signed 16 bit operand; "send": literal index + argc; "byte": one byte
MNEMONICS = {
    "pushReceiverVariable": (0x00, "idx16"),
    "pushTemp": (0x10, "idx16"),
    "pushLiteral": (0x20, "idx16"),
    "pushNil": (0x30, None),
    "pushTrue": (0x31, None),
    "pushFalse": (0x32, None),
    "storeAndPopTemp": (0x40, "idx16"),
    "dup": (0x50, None),
    "popTop": (0x51, None),
    "pushActiveDepth": (0x52, None),
    "primAddSend": (0x60, None),
    "primSubSend": (0x61, None),
    "primMulSend": (0x62, None),
    "primEqSend": (0x63, None),
    "primLessSend": (0x64, None),
    "shortJumpForward": (0x70, "off8"),
    "shortJumpTrue": (0x78, "off8"),
    "shortJumpFalse": (0x80, "off8"),
    "longJump": (0x88, "s16"),
    "send": (0x90, "send"),
    "returnTop": (0xA0, None),
    "returnReceiver": (0xA1, None),
    "pushNewArray": (0xB0, "byte"),
}

_BY_BASE = {base: name for name, (base, _) in MNEMONICS.items()}


def decode(code: bytes, pc: int) -> tuple[str, tuple[int, ...], int]:
    """Decode the instruction at ``pc``; returns (mnemonic, operands, length)."""
    op = code[pc]
    info = OPCODES[op]
    if info.handler == UNKNOWN:
        raise ValueError(f"unknown opcode 0x{op:02X} at pc {pc}")
    name = _BY_BASE[info.first]
    kind = MNEMONICS[name][1]
    if kind == "idx16":
        return name, (op - info.first,), 1
    if kind == "off8":
        return name, (op - info.first + 1,), 1
    if kind == "s16":
        raw = (code[pc + 1] << 8) | code[pc + 2]
        return name, (raw - 0x10000 if raw & 0x8000 else raw,), 3
    if kind == "send":
        return name, (code[pc + 1], code[pc + 2]), 3
    if kind == "byte":
        return name, (code[pc + 1],), 2
    return name, (), 1


def encode(name: str, operands: tuple[int, ...]) -> bytes:
    base, kind = MNEMONICS[name]
    if kind is None:
        if operands:
            raise ValueError(f"{name} takes no operand")
        return bytes([base])
    if kind == "idx16":
        (i,) = operands
        if not 0 <= i <= 15:
            raise ValueError(f"{name} index {i} outside 0..15")
        return bytes([base + i])
    if kind == "off8":
        (off,) = operands
        if not 1 <= off <= 8:
            raise ValueError(f"{name} offset {off} outside 1..8")
        return bytes([base + off - 1])
    if kind == "s16":
        (off,) = operands
        if not -0x8000 <= off <= 0x7FFF:
            raise ValueError(f"{name} offset {off} outside s16")
        raw = off & 0xFFFF
        return bytes([base, raw >> 8, raw & 0xFF])
    if kind == "send":
        lit, argc = operands
        if not (0 <= lit <= 255 and 0 <= argc <= 255):
            raise ValueError("send operands must be bytes")
        return bytes([base, lit, argc])
    (b,) = operands
    if not 0 <= b <= 255:
        raise ValueError(f"{name} operand {b} is not a byte")
    return bytes([base, b])


def iter_instructions(code: bytes):
    pc = 0
    while pc < len(code):
        name, ops, length = decode(code, pc)
        yield pc, name, ops, length
        pc += length
