"""Register transfer language emitted by the JIT and its translation to Python.

Instructions are tuples ``(opcode, *operands)`` whose operands are already
resolved: register names, integer immediates and label strings.  A compiled
method is turned into Python source where registers are locals, the frame is
a list ``S`` addressed through ``FP`` and heap words live in ``W``.
"""

from __future__ import annotations

from .object_model import MAX_WORD, MIN_WORD

REG_LOCALS = {"RRR": "RRR", "Arg0": "A0", "Arg1": "A1", "Temp": "T", "Class": "C",
              "SendNumArgs": "SN", "SP": "SP", **{f"R{i}": f"R{i}" for i in range(8)}}

ARITH = {"Add": "+", "Sub": "-", "Mul": "*", "And": "&", "Or": "|", "Lsl": "<<", "Asr": ">>"}
FLAG_SETTERS = ({f"{k}RR" for k in ARITH} | {f"{k}CqR" for k in ARITH}
                | {"CmpRR", "CmpCqR", "TstCqR"})
COND_JUMPS = {"JumpZero": "F == 0", "JumpNonZero": "F != 0", "JumpLess": "F < 0",
              "JumpGreaterOrEqual": "F >= 0", "JumpGreater": "F > 0",
              "JumpLessOrEqual": "F <= 0",
              "JumpOverflow": "not MINW <= F <= MAXW",
              "JumpNoOverflow": "MINW <= F <= MAXW"}
FLAG_NEUTRAL = {"MoveRR", "MoveCqR", "MoveMwR", "MoveRMw", "MoveCqMw", "Bc"}
PSEUDO = {"Label", "Bc"}
OPCODES = (FLAG_SETTERS | set(COND_JUMPS) | FLAG_NEUTRAL
           | {"Jump", "Label", "CallTrampoline", "SendSite", "RetR"})


class RTLError(Exception):
    pass


def machine_count(code) -> int:
    """Instructions excluding labels and bytecode markers."""
    return sum(1 for ins in code if ins[0] not in PSEUDO)


def check_flags(code) -> list[str]:
    """Every conditional jump must consume flags set by the nearest preceding
    flag setter, with only data moves in between and no label."""
    errors = []
    live = False
    for i, ins in enumerate(code):
        op = ins[0]
        if op in FLAG_SETTERS:
            live = True
        elif op in COND_JUMPS:
            if not live:
                errors.append(f"{i}: {op} without flags")
        elif op in FLAG_NEUTRAL:
            continue
        else:
            live = False
    return errors


def _reg(name) -> str:
    try:
        return REG_LOCALS[name]
    except (KeyError, TypeError):
        raise RTLError(f"not a register: {name!r}") from None


def _mem(off: int, base) -> str:
    if base == "FP":
        if off % 8:
            raise RTLError(f"unaligned frame offset {off}")
        return f"S[{off >> 3}]"
    b = _reg(base)
    return f"W[({b} + {off}) >> 3]" if off else f"W[{b} >> 3]"


def _flag_expr(ins) -> tuple[str, str | None]:
    """(statement performing ``ins``, expression for the flags it sets)."""
    op = ins[0]
    if op == "CmpRR":
        return "", f"{_reg(ins[2])} - {_reg(ins[1])}"
    if op == "CmpCqR":
        return "", f"{_reg(ins[2])} - {ins[1]}"
    if op == "TstCqR":
        return "", f"{_reg(ins[2])} & {ins[1]}"
    if op.endswith("CqR"):
        base = op[:-3]
        src = str(ins[1])
    else:
        base = op[:-2]
        src = _reg(ins[1])
    d = _reg(ins[2])
    sym = ARITH[base]
    if base == "Lsl":
        return f"{d} = {d} << ({src} & 63)", d
    if base == "Asr":
        return f"{d} = {d} >> ({src} & 63)", d
    return f"{d} = {d} {sym} {src}", d


class PyWriter:
    def __init__(self):
        self.lines: list[str] = []

    def line(self, ind: int, text: str):
        self.lines.append("    " * ind + text)

    def source(self) -> str:
        return "\n".join(self.lines) + "\n"


def split_blocks(code, jumped: set) -> list[tuple[str | None, list]]:
    """Straight-line blocks: a new block starts at each jumped-to label and
    after each jump, so jumps only ever end a block."""
    blocks: list[tuple[str | None, list]] = [(None, [])]
    for ins in code:
        op = ins[0]
        if op == "Label" and ins[1] in jumped:
            if blocks[-1][1] or blocks[-1][0] is not None:
                blocks.append((ins[1], []))
            else:
                blocks[-1] = (ins[1], [])
            continue
        blocks[-1][1].append(ins)
        if op == "Jump" or op in COND_JUMPS:
            blocks.append((None, []))
    if not blocks[-1][1] and blocks[-1][0] is None and len(blocks) > 1:
        blocks.pop()
    return blocks


def generate_python(name: str, code, kind: str, frame_words: int, num_args: int,
                    trampolines: dict) -> str:
    """Python source defining ``name(RRR, A0, A1)`` for ``code``.

    ``kind`` is ``method`` (a frame, step counting and depth bookkeeping) or
    ``primitive`` (no frame).  Blocks become ``if B == n:`` sections tested
    in layout order; backward jumps re-enter a ``while`` loop.
    """
    jumped = {ins[-1] for ins in code if ins[0] == "Jump" or ins[0] in COND_JUMPS}
    blocks = split_blocks(code, jumped)
    index = {label: i for i, (label, _) in enumerate(blocks) if label is not None}
    missing = jumped - set(index)
    if missing:
        raise RTLError(f"jump to unbound label(s) {sorted(missing)}")
    loop = any((ins[0] == "Jump" or ins[0] in COND_JUMPS) and index[ins[-1]] <= i
               for i, (_, body) in enumerate(blocks) for ins in body)
    method = kind == "method"
    if method and num_args > 2:
        raise RTLError("compiled methods take at most two arguments")
    w = PyWriter()
    w.line(0, f"def {name}(RRR, A0, A1):")
    if method:
        w.line(1, "D = VM.depth + 1")
        w.line(1, "if D > MAXD:")
        w.line(2, "raise StackOverflow(f'depth {D}')")
        w.line(1, "VM.depth = D")
        w.line(1, "N = VM.steps")
        w.line(1, f"S = [RRR, A0, A1][:{1 + num_args}]")
        extra = frame_words - num_args
        if extra > 0:
            w.line(1, f"S += [NIL] * {extra}")
    multi = len(blocks) > 1
    ind = 1
    if multi:
        w.line(1, "B = 0")
    if loop:
        w.line(1, "while True:")
        ind = 2
    for bi, (label, body) in enumerate(blocks):
        bind = ind
        if multi:
            w.line(ind, f"if B == {bi}:")
            bind = ind + 1
        _emit_block(w, bind, body, index, bi, method, trampolines, bi + 1 < len(blocks))
    w.line(ind, "raise VmBug('fell off compiled code')")
    return w.source()


def _emit_block(w: PyWriter, ind: int, body, index, bi, method, trampolines, has_next):
    pending = 0

    def flush_steps():
        nonlocal pending
        if pending:
            w.line(ind, f"N += {pending}")
            pending = 0

    def fuel_check(i):
        w.line(i, "if N > FUEL:")
        # no effect happened since the limit was crossed
        w.line(i + 1, "VM.steps = FUEL + 1")
        w.line(i + 1, "raise FuelExhausted(f'after {FUEL} steps')")

    def sync_out():
        flush_steps()
        w.line(ind, "VM.steps = N")
        fuel_check(ind)

    def goto(i, j):
        if j <= bi:
            if method:
                fuel_check(i)
            w.line(i, f"B = {j}")
            w.line(i, "continue")
        else:
            w.line(i, f"B = {j}")

    terminated = False
    for k, ins in enumerate(body):
        op = ins[0]
        if op == "Bc":
            pending += 1
        elif op == "Label":
            continue
        elif op == "MoveRR":
            if ins[1] != ins[2]:
                w.line(ind, f"{_reg(ins[2])} = {_reg(ins[1])}")
        elif op == "MoveCqR":
            w.line(ind, f"{_reg(ins[2])} = {ins[1]}")
        elif op == "MoveMwR":
            w.line(ind, f"{_reg(ins[3])} = {_mem(ins[1], ins[2])}")
        elif op == "MoveRMw":
            w.line(ind, f"{_mem(ins[2], ins[3])} = {_reg(ins[1])}")
        elif op == "MoveCqMw":
            w.line(ind, f"{_mem(ins[2], ins[3])} = {ins[1]}")
        elif op in FLAG_SETTERS:
            stmt, flags = _flag_expr(ins)
            if stmt:
                w.line(ind, stmt)
            # only materialize flags when a conditional jump reads them
            nxt = next((x for x in body[k + 1:] if x[0] not in FLAG_NEUTRAL), None)
            if nxt is not None and nxt[0] in COND_JUMPS:
                w.line(ind, f"F = {flags}")
        elif op in COND_JUMPS:
            flush_steps()
            w.line(ind, f"if {COND_JUMPS[op]}:")
            goto(ind + 1, index[ins[1]])
            w.line(ind, "else:")
            w.line(ind + 1, f"B = {bi + 1}")
            terminated = True
        elif op == "Jump":
            flush_steps()
            goto(ind, index[ins[1]])
            terminated = True
        elif op == "RetR":
            if method:
                sync_out()
                w.line(ind, "VM.depth = D - 1")
            w.line(ind, "return RRR")
            terminated = True
        elif op == "SendSite":
            site, argc = ins[1], ins[2]
            sync_out()
            if argc <= 2:
                w.line(ind, f"RRR = SITE{site}.send(RRR, A0, A1)")
            else:
                w.line(ind, f"RRR = SITE{site}.send_n(S[{ins[3]}:{ins[3] + argc + 1}])")
            w.line(ind, "N = VM.steps")
        elif op == "CallTrampoline":
            tname = ins[1]
            kind_ = trampolines[tname]
            if kind_ == "deopt":
                flush_steps()
                w.line(ind, f"return {tname}({ins[2]}, {ins[3]}, S, N)")
                terminated = True
            elif kind_ == "fallback":
                w.line(ind, f"return {tname}(RRR, A0, A1)")
                terminated = True
            elif kind_ == "raise":
                if method:
                    sync_out()
                w.line(ind, f"{tname}(T)")
                terminated = True
            else:
                if method:
                    sync_out()
                w.line(ind, f"T = {tname}(T)")
                if method:
                    w.line(ind, "N = VM.steps")
        else:
            raise RTLError(f"unknown RTL opcode {op}")
    flush_steps()
    if not terminated:
        if has_next:
            w.line(ind, f"B = {bi + 1}")
        else:
            w.line(ind, "pass")


MINW, MAXW = MIN_WORD, MAX_WORD
