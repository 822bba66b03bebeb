"""SSA optimisation passes and the IR evaluator used as their oracle."""

from __future__ import annotations

import random

from .ir import (CHECKED, COMMUTATIVE, CONDS, EFFECTS, MEMORY_READS, NEGATE,
                 PURE_BINARY, SWAP, DruidIR, check_ssa, dump_ir, eval_cond)
from .object_model import (ARRAY_ID, FALSE, NIL, TRUE, header_word, to_signed,
                           to_unsigned)

MIN_WORD = -(1 << 63)
MAX_WORD = (1 << 63) - 1
SPECIAL_VALUES = {"nil": NIL, "true": TRUE, "false": FALSE}


class EvalStuck(Exception):
    pass


class NoFixpoint(Exception):
    pass


def wrap(v: int) -> int:
    return to_signed(to_unsigned(v))


def binop(op: str, a: int, b: int, cond: str | None = None) -> int:
    """Machine semantics of a pure binary op on signed 64-bit words."""
    if op == "add":
        return wrap(a + b)
    if op == "sub":
        return wrap(a - b)
    if op == "mul":
        return wrap(a * b)
    if op == "bitAnd":
        return a & b
    if op == "bitOr":
        return a | b
    if op == "shiftLeft":
        return wrap(a << (b & 63))
    if op == "shiftRight":
        return a >> (b & 63)
    if op == "compare":
        return 1 if eval_cond(cond, a, b) else 0
    raise EvalStuck(f"not a binary op: {op}")


def checked(op: str, a: int, b: int):
    """Result of a checked op, or None on signed 64-bit overflow."""
    r = a + b if op == "checkedAdd" else a - b if op == "checkedSub" else a * b
    return r if MIN_WORD <= r <= MAX_WORD else None


# --------------------------------------------------------------------------
# evaluator

class MockMachine:
    """Stand-in for interpreter state, shared by handler code and ``ir_eval``.

    Control intrinsics record an ``outcome`` instead of transferring control.
    """

    def __init__(self, stack, fp, words, bytecodePC=0, currentBytecode=0, byte1=0,
                 byte2=0, method_oop=0, length=1, depth=0):
        self.stack = list(stack)
        self.fp = fp
        self.words = list(words)
        self.bytecodePC = bytecodePC
        self.currentBytecode = currentBytecode
        self.byte1 = byte1
        self.byte2 = byte2
        self.method_oop = method_oop
        self.pc = bytecodePC + length
        self.depth = depth
        self.outcome = None

    def copy(self):
        m = MockMachine(self.stack, self.fp, self.words, self.bytecodePC, self.currentBytecode,
                        self.byte1, self.byte2, self.method_oop, 0, self.depth)
        m.pc = self.pc
        return m

    def send(self, selector, argc, special=False):
        self.outcome = ("send", selector, argc)

    def commonReturn(self, value):
        self.outcome = ("return", value)

    def mustBeBoolean(self, value):
        self.outcome = ("mustBeBoolean", value)

    def deopt(self):
        self.outcome = ("deopt",)

    def booleanCheat(self, flag):
        raise EvalStuck("booleanCheat: has no compiled meaning")

    def allocArray(self, n):
        if not 0 <= n <= 65536:
            raise EvalStuck(f"bad array size {n}")
        ref = len(self.words) * 8
        self.words.append(header_word(ARRAY_ID, n))
        self.words.extend([NIL] * n)
        return ref

    def load(self, addr):
        if addr % 8 or not 0 <= addr < len(self.words) * 8:
            raise EvalStuck(f"bad address {addr}")
        return self.words[addr >> 3]

    def store(self, addr, value):
        if addr % 8 or not 0 <= addr < len(self.words) * 8:
            raise EvalStuck(f"bad address {addr}")
        self.words[addr >> 3] = value

    def state(self):
        return (tuple(self.stack), tuple(self.words), self.outcome)


def handler_outcome(fn, m: MockMachine, kind: str = "bytecode"):
    """Run compiler-view handler code on ``m`` and normalise its outcome."""
    start_pc = m.pc
    r = fn(m)
    if kind == "primitive":
        m.outcome = ("success", m.stack[-1]) if r else ("fail",)
    elif m.outcome is None:
        m.outcome = ("jump", m.pc) if m.pc != start_pc else ("next",)
    return m.outcome


def _param(ir: DruidIR, m: MockMachine, name: str) -> int:
    if name in ("bytecodePC", "byte1", "byte2"):
        return getattr(m, name)
    if name == "method":
        return m.method_oop
    nargs = ir.meta.get("numArgs", 0)
    if name == "receiver":
        return m.stack[-1 - nargs]
    if name.startswith("arg"):
        return m.stack[-nargs + int(name[3:])]
    raise EvalStuck(f"unknown parameter {name}")


def ir_eval(ir: DruidIR, m: MockMachine, max_steps: int = 100_000):
    """Evaluate ``ir`` against mock state ``m`` (mutated); returns the outcome."""
    env: dict = {}
    block, prev = ir.entry, None
    steps = 0
    while True:
        if prev is not None and block.phis:
            k = block.preds.index(prev)
            vals = [env[p.args[k]] for p in block.phis]
            for p, v in zip(block.phis, vals):
                env[p] = v
        for ins in block.instrs:
            steps += 1
            if steps > max_steps:
                raise EvalStuck("step limit")
            env[ins] = _eval(ir, ins, env, m)
        t = block.term
        if t is None:
            raise EvalStuck(f"{block} has no terminator")
        op = t.op
        a = [env[x] for x in t.args]
        prev = block
        if op == "jump":
            block = t.targets[0]
        elif op == "branch":
            block = t.targets[0 if eval_cond(t.attrs["cond"], a[0], a[1]) else 1]
        elif op in CHECKED:
            r = checked(op, a[0], a[1])
            if r is None:
                block = t.targets[1]
            else:
                env[t] = r
                block = t.targets[0]
        elif op == "next":
            m.outcome = ("next",)
            return m.outcome
        elif op == "bcJump":
            # a jump onto the following instruction is a fall-through, as
            # handler_outcome reports it
            m.outcome = ("jump", a[0]) if a[0] != m.pc else ("next",)
            m.pc = a[0]
            return m.outcome
        elif op == "send":
            m.outcome = ("send", a[0], a[1])
            return m.outcome
        elif op == "mustBeBoolean":
            m.outcome = ("mustBeBoolean", a[0])
            return m.outcome
        elif op == "ret":
            m.outcome = ("return", a[0])
            return m.outcome
        elif op == "deopt":
            m.outcome = ("deopt",)
            return m.outcome
        elif op == "primFail":
            m.outcome = ("fail",)
            return m.outcome
        elif op == "primReturn":
            del m.stack[-(ir.meta.get("numArgs", 0) + 1):]
            m.stack.append(a[0])
            m.outcome = ("success", a[0])
            return m.outcome
        else:
            raise EvalStuck(f"unknown terminator {op}")


def _eval(ir, ins, env, m):
    op = ins.op
    if op == "const":
        return ins.attrs["value"]
    a = [env[x] for x in ins.args]
    if op in PURE_BINARY:
        return binop(op, a[0], a[1], ins.attrs.get("cond"))
    if op == "copy":
        return a[0]
    if op == "param":
        return _param(ir, m, ins.attrs["name"])
    if op == "special":
        return SPECIAL_VALUES[ins.attrs["name"]]
    if op == "loadSlot":
        return m.load(a[0] + a[1])
    if op == "storeSlot":
        m.store(a[0] + a[1], a[2])
        return 0
    if op == "loadTemp":
        return m.stack[m.fp + 1 + a[0]]
    if op == "storeTemp":
        m.stack[m.fp + 1 + a[0]] = a[1]
        return 0
    if op == "receiver":
        return m.stack[m.fp]
    if op == "stackRead":
        return m.stack[-1 - ins.attrs["depth"]]
    if op == "stackPush":
        m.stack.append(a[0])
        return 0
    if op == "stackPop":
        del m.stack[-ins.attrs["n"]:]
        return 0
    if op == "runtimeCall":
        if ins.attrs["fn"] == "allocArray":
            return m.allocArray(a[0])
        raise EvalStuck(f"unknown runtime call {ins.attrs['fn']}")
    raise EvalStuck(f"cannot evaluate {op}")


# --------------------------------------------------------------------------
# passes

def _make_const(ir: DruidIR, ins, value: int):
    for a in ins.args:
        a.users.remove(ins)
    ins.op = "const"
    ins.args = []
    ins.attrs = {"value": value}


def _make_copy(ir: DruidIR, ins, src):
    ir.set_args(ins, [src])
    ins.op = "copy"
    ins.attrs = {}


def fold_constants(ir: DruidIR) -> DruidIR:
    """Evaluate constant pure ops and apply identity simplifications."""
    changed = True
    while changed:
        changed = False
        for b in ir.reachable():
            for phi in list(b.phis):
                others = {id(a): a for a in phi.args if a is not phi}
                if len(others) == 1:
                    ir.replace_all_uses(phi, next(iter(others.values())))
                    ir.remove_instr(phi)
                    changed = True
            for ins in list(b.instrs):
                if ins.op in PURE_BINARY:
                    changed |= _fold_binary(ir, ins)
            t = b.term
            if t is not None and t.op in CHECKED and all(a.is_const for a in t.args):
                r = checked(t.op, t.args[0].value, t.args[1].value)
                if r is not None:
                    ok = t.targets[0]
                    c = ir.const(b, r)
                    ir.replace_all_uses(t, c)
                    ir.replace_with_jump(b, ok)
                    changed = True
    return ir


def _fold_binary(ir, ins) -> bool:
    x, y = ins.args
    op = ins.op
    if x.is_const and y.is_const:
        _make_const(ir, ins, binop(op, x.value, y.value, ins.attrs.get("cond")))
        return True
    if op in COMMUTATIVE and x.is_const and not y.is_const:
        ir.set_args(ins, [y, x])
        x, y = y, x
    if op == "compare":
        if x is y:
            _make_const(ir, ins, 1 if ins.attrs["cond"] in ("eq", "le", "ge") else 0)
            return True
        if x.is_const and not y.is_const:
            ir.set_args(ins, [y, x])
            ins.attrs["cond"] = SWAP[ins.attrs["cond"]]
            return True
        return False
    if not y.is_const:
        return False
    c = y.value
    if op == "sub":
        ir.set_args(ins, [x, ir_const_near(ir, ins, wrap(-c))])
        ins.op = "add"
        return True
    if (op in ("add", "bitOr", "shiftLeft", "shiftRight") and c == 0) or (op == "mul" and c == 1) \
            or (op == "bitAnd" and c == -1):
        _make_copy(ir, ins, x)
        return True
    if (op in ("mul", "bitAnd") and c == 0):
        _make_const(ir, ins, 0)
        return True
    if op == "add" and x.op == "add" and x.args[1].is_const:
        # (v + c1) + c2  ->  v + (c1 + c2)
        ir.set_args(ins, [x.args[0], ir_const_near(ir, ins, wrap(x.args[1].value + c))])
        return True
    return False


def ir_const_near(ir: DruidIR, ins, value: int):
    """A fresh constant placed right before ``ins`` in its block."""
    blk = ins.block
    c = ir.add(blk, "const", value=value)
    blk.instrs.remove(c)
    if ins.op == "phi" or ins is blk.term:
        blk.instrs.append(c)
    else:
        blk.instrs.insert(blk.instrs.index(ins), c)
    return c


def propagate_copies(ir: DruidIR) -> DruidIR:
    for b in ir.reachable():
        for ins in list(b.instrs):
            if ins.op == "copy":
                src = ins.args[0]
                while src.op == "copy":
                    src = src.args[0]
                ir.replace_all_uses(ins, src)
                ir.remove_instr(ins)
    return ir


_FENCES = EFFECTS


def global_value_numbering(ir: DruidIR) -> DruidIR:
    """Dominator-scoped numbering of pure values; loads only within a block
    and never across an effect."""
    idom = ir.dominators()
    children: dict = {}
    for b, d in idom.items():
        if b is not d:
            children.setdefault(d, []).append(b)
    for kids in children.values():
        kids.sort(key=lambda k: k.id)

    def key(ins):
        if ins.op == "const":
            return ("const", ins.value)
        if ins.op in ("param", "special"):
            return (ins.op, ins.attrs["name"])
        if ins.op == "receiver":
            return ("receiver",)
        if ins.op in PURE_BINARY:
            ids = [a.id for a in ins.args]
            if ins.op in COMMUTATIVE:
                ids.sort()
            return (ins.op, tuple(ids), ins.attrs.get("cond"))
        return None

    def walk(block, table):
        table = dict(table)
        loads: dict = {}
        for ins in list(block.instrs):
            if ins.op in _FENCES:
                loads.clear()
                continue
            if ins.op in MEMORY_READS and ins.op != "receiver":
                k = (ins.op, tuple(a.id for a in ins.args),
                     tuple(sorted((n, v) for n, v in ins.attrs.items() if n != "stageable")))
                prev = loads.get(k)
                if prev is not None and prev.attrs.get("stageable") == ins.attrs.get("stageable"):
                    ir.replace_all_uses(ins, prev)
                    ir.remove_instr(ins)
                else:
                    loads[k] = ins
                continue
            k = key(ins)
            if k is None:
                continue
            prev = table.get(k)
            if prev is not None:
                ir.replace_all_uses(ins, prev)
                ir.remove_instr(ins)
            else:
                table[k] = ins
        for child in children.get(block, []):
            walk(child, table)

    walk(ir.entry, {})
    return ir


def simplify_branches(ir: DruidIR) -> DruidIR:
    """Fold decided branches, fuse compare-into-branch, merge straight-line blocks."""
    for b in ir.reachable():
        t = b.term
        if t is None or t.op != "branch":
            continue
        x, y = t.args
        cond = t.attrs["cond"]
        # branch(ne|eq, compare(c, p, q), 0)  ->  branch(c | !c, p, q)
        if y.is_const and y.value == 0 and x.op == "compare" and cond in ("ne", "eq"):
            c = x.attrs["cond"] if cond == "ne" else NEGATE[x.attrs["cond"]]
            ir.set_args(t, list(x.args))
            t.attrs["cond"] = c
            x, y = t.args
            cond = c
        if x.is_const and not y.is_const:
            ir.set_args(t, [y, x])
            t.attrs["cond"] = cond = SWAP[cond]
            x, y = y, x
        decided = None
        if x.is_const and y.is_const:
            decided = eval_cond(cond, x.value, y.value)
        elif x is y:
            decided = cond in ("eq", "le", "ge")
        elif t.targets[0] is t.targets[1]:
            s = t.targets[0]
            i, j = [k for k, p in enumerate(s.preds) if p is b][:2]
            if all(phi.args[i] is phi.args[j] for phi in s.phis):
                decided = True
        if decided is not None:
            ir.replace_with_jump(b, t.targets[0 if decided else 1])
    ir.compact()
    _merge_blocks(ir)
    return ir


def _merge_blocks(ir: DruidIR):
    changed = True
    while changed:
        changed = False
        for b in ir.reachable():
            t = b.term
            if t is None or t.op != "jump":
                continue
            s = t.targets[0]
            if s is b or s is ir.entry or len(s.preds) != 1:
                continue
            for phi in list(s.phis):
                ir.replace_all_uses(phi, phi.args[0])
                ir.remove_instr(phi)
            ir.remove_instr(t)
            for ins in s.instrs:
                ins.block = b
            b.instrs.extend(s.instrs)
            s.instrs = []
            b.term = s.term
            if b.term is not None:
                b.term.block = b
            s.term = None
            for succ in b.succs:
                succ.preds = [b if p is s else p for p in succ.preds]
            s.preds = []
            ir.blocks.remove(s)
            changed = True
            break


_REMOVABLE = {"const", "param", "special", "copy", "phi", "loadSlot", "loadTemp",
              "receiver", "stackRead"} | PURE_BINARY


def eliminate_dead_code(ir: DruidIR) -> DruidIR:
    ir.compact()
    changed = True
    while changed:
        changed = False
        for b in ir.blocks:
            for ins in list(b.phis) + list(b.instrs):
                if ins.op in _REMOVABLE and not ins.users:
                    ir.remove_instr(ins)
                    changed = True
            # phis kept alive only by themselves
            for phi in list(b.phis):
                if phi.users and all(u is phi for u in phi.users):
                    ir.remove_instr(phi)
                    changed = True
    return ir


PASSES = {
    "fold": fold_constants,
    "copy-prop": propagate_copies,
    "gvn": global_value_numbering,
    "branch-simplify": simplify_branches,
    "dce": eliminate_dead_code,
}
DEFAULT_ORDER = ("fold", "copy-prop", "gvn", "fold", "branch-simplify", "dce")
MAX_ROUNDS = 10


def run_pipeline(ir: DruidIR, order=DEFAULT_ORDER, check: bool = False, trace: list | None = None):
    """Iterate the pass ``order`` until the dump stops changing (in place)."""
    before = dump_ir(ir)
    for round_no in range(MAX_ROUNDS):
        for name in order:
            PASSES[name](ir)
            if trace is not None:
                trace.append((round_no, name, ir.instr_count()))
            if check:
                errs = check_ssa(ir)
                if errs:
                    raise AssertionError(f"{name} broke SSA: {errs[:3]}")
        after = dump_ir(ir)
        if after == before:
            return ir
        before = after
    raise NoFixpoint(f"{ir.name} still changing after {MAX_ROUNDS} rounds")


# --------------------------------------------------------------------------
# random IR for property tests

def random_ir(seed: int, size: int = 12) -> DruidIR:
    """A random well-formed IR over pure ops, diamonds, checked ops and stack effects.

    Reads only ``stackRead`` and parameters ``byte1``/``byte2``; ends in
    ``ret`` so the stack and the returned value are observable.
    """
    rng = random.Random(seed)
    ir = DruidIR(f"random{seed}", "bytecode")
    cur = ir.new_block()
    vals = [ir.add(cur, "param", name="byte1"), ir.add(cur, "param", name="byte2")]
    consts = [0, 1, -1, 2, 3, 7, 8, 15, 0x7F, 1 << 62, -(1 << 62)]

    def pick():
        return rng.choice(vals)

    for _ in range(size):
        r = rng.random()
        if r < 0.2:
            vals.append(ir.const(cur, rng.choice(consts)))
        elif r < 0.5:
            op = rng.choice(sorted(PURE_BINARY))
            attrs = {"cond": rng.choice(sorted(CONDS))} if op == "compare" else {}
            a, b = pick(), pick()
            if op in ("shiftLeft", "shiftRight"):
                b = ir.const(cur, rng.randrange(0, 8))
            vals.append(ir.add(cur, op, (a, b), **attrs))
        elif r < 0.6:
            vals.append(ir.add(cur, "stackRead", depth=rng.randrange(0, 2)))
        elif r < 0.7:
            ir.add(cur, "stackPush", (pick(),))
        elif r < 0.85:
            t, f, j = ir.new_block(), ir.new_block(), ir.new_block()
            ir.terminate(cur, "branch", (pick(), pick()), (t, f), cond=rng.choice(sorted(CONDS)))
            tv = ir.add(t, "add", (pick(), ir.const(t, rng.choice(consts))))
            fv = ir.const(f, rng.choice(consts))
            ir.terminate(t, "jump", (), (j,))
            ir.terminate(f, "jump", (), (j,))
            vals.append(ir.add(j, "phi", (tv, fv)))
            cur = j
        else:
            ok, ovf = ir.new_block(), ir.new_block()
            op = rng.choice(sorted(CHECKED))
            res = ir.terminate(cur, op, (pick(), pick()), (ok, ovf))
            ir.terminate(ovf, "ret", (ir.const(ovf, -7),))
            vals.append(res)
            cur = ok
    ir.terminate(cur, "ret", (pick(),))
    return ir
