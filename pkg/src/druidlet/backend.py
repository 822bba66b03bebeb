"""Back end: turn optimized, staged SSA into generator programs.

A generator program is a nested list of tuples (GenOps) run by the JIT
runtime once per bytecode instance.  Operands inside GenOps are tagged:

    ("imm", n)      meta-time constant
    ("sv", name)    staged variable, computed when the generator runs
    ("reg", name)   fixed virtual register
    ("rv", name)    register chosen at JIT time by an ``alloc`` op
    ("label", name) local label
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

from .ir import CHECKED, NEGATE, PURE_BINARY, SWAP, DruidIR
from .staging import StageMap, stage_analysis

FIXED_REGISTERS = ("RRR", "Arg0", "Arg1", "Temp", "Class", "SendNumArgs", "SP", "FP")
GENERAL_REGISTERS = tuple(f"R{i}" for i in range(8))
SCRATCH = ("Temp", "Class", "SendNumArgs")
PARAM_REGS = {"receiver": "RRR", "arg0": "Arg0", "arg1": "Arg1"}

RR_OPS = {"add": "AddRR", "sub": "SubRR", "mul": "MulRR", "bitAnd": "AndRR",
          "bitOr": "OrRR", "shiftLeft": "LslRR", "shiftRight": "AsrRR"}
CQ_OPS = {"add": "AddCqR", "sub": "SubCqR", "mul": "MulCqR", "bitAnd": "AndCqR",
          "bitOr": "OrCqR", "shiftLeft": "LslCqR", "shiftRight": "AsrCqR"}
CHECKED_BASE = {"checkedAdd": "add", "checkedSub": "sub", "checkedMul": "mul"}
JCC = {"eq": "JumpZero", "ne": "JumpNonZero", "lt": "JumpLess",
       "ge": "JumpGreaterOrEqual", "gt": "JumpGreater", "le": "JumpLessOrEqual"}
FAIL = ("label", "fail")
NEXT = ("label", "next")
FP = ("reg", "FP")
STACK_OPS = {"stackPush", "stackPop", "runtimeCall"}
FLUSHING_TERMS = {"bcJump", "send", "mustBeBoolean", "deopt"}


class GenError(Exception):
    """The handler cannot be lowered; its table entry falls back to the interpreter."""


class UnloweredInstruction(GenError):
    pass


@dataclass
class GeneratorProgram:
    name: str
    kind: str
    ops: list
    meta: dict = field(default_factory=dict)

    def walk(self):
        """Every GenOp in program order, descending into staged control flow."""
        yield from _walk(self.ops)

    def rtl_templates(self) -> list:
        return [op for op in self.walk() if op[0] == "rtl"]


def _walk(ops):
    for op in ops:
        yield op
        if op[0] == "stagedIf":
            yield from _walk(op[2])
            yield from _walk(op[3])
        elif op[0] == "stagedLoop":
            yield from _walk(op[1])
            yield from _walk(op[3])


def _natural_loop(header) -> set:
    body, work = {header}, [p for p in header.preds]
    while work:
        b = work.pop()
        if b not in body:
            body.add(b)
            work.extend(b.preds)
    return body


class _Emitter:
    def __init__(self, ir: DruidIR, sm: StageMap, flags: frozenset):
        self.ir = ir
        self.sm = sm
        self.kind = ir.kind
        self.flags = flags
        self.loc: dict = {}
        self.out: list = []
        self.ntmp = 0
        self.nlabel = 0
        self.free = list(SCRATCH)
        self.owned: set = set()          # registers this handler may clobber
        self.remaining = {}
        self.effects = False
        self.flushed = False
        self.idom = ir.dominators()
        self.ipdom = ir.postdominators()
        loop_blocks = {}
        for h in ir.loop_headers():
            loop_blocks[h] = _natural_loop(h)
        self.loops = loop_blocks
        self.lazy_tst: set = set()
        self.lazy_push: set = set()
        self._plan_lazy()

    # -- helpers ------------------------------------------------------------

    def emit(self, *op):
        k = op[0]
        if k == "ssFlush":
            if self.flushed:
                return
            self.flushed = True
        elif k in ("ssPushReg", "ssPushConst", "ssPushBase", "marshallSend"):
            self.flushed = False
        self.out.append(op)

    @contextmanager
    def capture(self):
        saved, self.out = self.out, []
        try:
            yield self.out
        finally:
            self.out = saved

    def tmp(self) -> tuple:
        self.ntmp += 1
        return ("sv", f"t{self.ntmp}")

    def label(self) -> tuple:
        self.nlabel += 1
        return ("label", f"L{self.nlabel}")

    def staged(self, ins) -> bool:
        return ins.op == "const" or self.sm.staged(ins)

    def opnd(self, ins) -> tuple:
        if ins.op == "const":
            return ("imm", ins.value)
        try:
            return self.loc[ins]
        except KeyError:
            raise UnloweredInstruction(f"{self.ir.name}: v{ins.id} {ins.op} used before lowering")

    def new_reg(self) -> tuple:
        if self.kind == "primitive":
            if not self.free:
                raise GenError(f"{self.ir.name}: more than {len(SCRATCH)} scratch values")
            r = ("reg", self.free.pop(0))
        else:
            self.ntmp += 1
            r = ("rv", f"r{self.ntmp}")
            self.emit("alloc", r)
        self.owned.add(r)
        return r

    def used(self, *args):
        """Count down remaining uses; scratch registers return to the pool at zero."""
        for a in args:
            if a not in self.remaining:
                continue
            self.remaining[a] -= 1
            if self.remaining[a] == 0:
                r = self.loc.get(a)
                if (self.kind == "primitive" and r in self.owned and r[1] in SCRATCH
                        and r[1] not in self.free
                        and not any(self.loc.get(o) == r and self.remaining.get(o, 0) > 0
                                    for o in self.remaining)):
                    self.free.append(r[1])
                    self.free.sort(key=SCRATCH.index)

    def reusable(self, ins) -> bool:
        r = self.loc.get(ins)
        return r is not None and r in self.owned and self.remaining.get(ins) == 1

    def in_reg(self, ins) -> tuple:
        """Operand of ``ins`` as a register, materializing constants."""
        o = self.opnd(ins)
        if o[0] in ("reg", "rv"):
            return o
        r = self.new_reg()
        self.emit("rtl", "MoveCqR", o, r)
        return r

    # -- planning -------------------------------------------------------------

    def _plan_lazy(self):
        for b in self.ir.reachable():
            for ins in b.all_instrs():
                self.remaining[ins] = len(ins.users)
            for i, ins in enumerate(b.instrs):
                if self.staged(ins) or len(ins.users) != 1:
                    continue
                user = ins.users[0]
                if (ins.op == "bitAnd" and user.op == "branch" and user.attrs["cond"] in ("eq", "ne")
                        and user.args[1].op == "const" and user.args[1].value == 0
                        and user.args[0] is ins and self.staged(ins.args[1])
                        and not self.staged(ins.args[0])):
                    self.lazy_tst.add(ins)
                elif ins.op in ("loadSlot", "loadTemp") and user.op == "stackPush" and user.block is b:
                    if ins.op == "loadSlot" and not self.staged(ins.args[1]):
                        continue
                    between = b.instrs[i + 1:b.instrs.index(user)]
                    if all(x.op not in ("storeSlot", "runtimeCall") for x in between):
                        self.lazy_push.add(ins)

    # -- staged values ----------------------------------------------------------

    def stage(self, ins):
        name = ("sv", f"s{ins.id}")
        op = ins.op
        if op == "param":
            self.emit("staged", name, "param", ins.attrs["name"])
        elif op == "special":
            self.emit("staged", name, "special", ins.attrs["name"])
        elif op == "compare":
            self.emit("staged", name, "compare", ins.attrs["cond"],
                      self.opnd(ins.args[0]), self.opnd(ins.args[1]))
        elif op in PURE_BINARY:
            self.emit("staged", name, op, self.opnd(ins.args[0]), self.opnd(ins.args[1]))
        elif op == "copy":
            self.loc[ins] = self.opnd(ins.args[0])
            return
        elif op == "loadSlot":
            self.emit("staged", name, "load", self.opnd(ins.args[0]), self.opnd(ins.args[1]))
        else:
            raise UnloweredInstruction(f"{self.ir.name}: cannot stage {op}")
        self.loc[ins] = name

    def staged_arith(self, op, a, b):
        """Staged ``a op b`` folding meta-time constants."""
        if a[0] == "imm" and b[0] == "imm":
            from .midend import binop
            return ("imm", binop(op, a[1], b[1]))
        t = self.tmp()
        self.emit("staged", t, op, a, b)
        return t

    def temp_offset(self, idx) -> tuple:
        return self.staged_arith("add", self.staged_arith("shiftLeft", self.opnd(idx), ("imm", 3)),
                                 ("imm", 8))

    # -- run-time instructions ----------------------------------------------------

    def lower(self, ins):
        if ins.op == "phi":
            return
        if self.staged(ins) and ins.op not in ("stackPush", "stackPop", "storeTemp", "storeSlot"):
            if ins.op != "const":
                self.stage(ins)
            return
        getattr(self, "lower_" + ins.op, self.unlowered)(ins)

    def unlowered(self, ins):
        raise UnloweredInstruction(f"{self.ir.name}: no lowering for {ins.op}")

    def lower_param(self, ins):
        name = ins.attrs["name"]
        if self.kind != "primitive" or name not in PARAM_REGS:
            raise GenError(f"{self.ir.name}: run-time parameter {name}")
        self.loc[ins] = ("reg", PARAM_REGS[name])

    def lower_receiver(self, ins):
        self.emit("ensureSelf")
        r = self.new_reg()
        self.emit("rtl", "MoveRR", ("reg", "RRR"), r)
        self.loc[ins] = r

    def dest_for(self, a, b=None, commutative=False):
        """Two-address destination: reuse a dying owned register or copy."""
        if self.reusable(a):
            return self.loc[a], a, b
        if commutative and b is not None and self.reusable(b):
            return self.loc[b], b, a
        r = self.new_reg()
        o = self.opnd(a)
        self.emit("rtl", "MoveRR" if o[0] in ("reg", "rv") else "MoveCqR", o, r)
        return r, a, b

    def arith(self, ins, base_op):
        a, b = ins.args
        comm = base_op in ("add", "mul", "bitAnd", "bitOr")
        if comm and self.staged(a) and not self.staged(b):
            a, b = b, a
        dst, first, second = self.dest_for(a, b, comm)
        so = self.opnd(second)
        if so[0] in ("imm", "sv"):
            self.emit("rtl", CQ_OPS[base_op], so, dst)
        else:
            self.emit("rtl", RR_OPS[base_op], so, dst)
        self.used(a, b)
        self.loc[ins] = dst
        self.remaining.setdefault(ins, len(ins.users))

    def _binary(self, ins):
        if ins in self.lazy_tst:
            return
        if ins.op == "compare":
            raise GenError(f"{self.ir.name}: run-time comparison used as a value")
        self.arith(ins, ins.op)

    lower_add = lower_sub = lower_mul = lower_bitAnd = lower_bitOr = _binary
    lower_shiftLeft = lower_shiftRight = lower_compare = _binary

    def lower_copy(self, ins):
        self.loc[ins] = self.opnd(ins.args[0])

    def address(self, base, off) -> tuple:
        """(offset operand, base register) for a slot access."""
        bo = self.in_reg(base)
        oo = self.opnd(off)
        if oo[0] in ("imm", "sv"):
            return oo, bo
        dst, _, _ = self.dest_for(off)
        self.emit("rtl", "AddRR", bo, dst)
        return ("imm", 0), dst

    def lower_loadSlot(self, ins):
        if ins in self.lazy_push:
            return
        off, base = self.address(ins.args[0], ins.args[1])
        if self.reusable(ins.args[0]) or (base in self.owned and base != self.loc.get(ins.args[0])):
            dst = base
        else:
            dst = self.new_reg()
        self.emit("rtl", "MoveMwR", off, base, dst)
        self.used(*ins.args)
        self.loc[ins] = dst

    def lower_loadTemp(self, ins):
        if ins in self.lazy_push:
            return
        off = self.temp_offset(ins.args[0])
        r = self.new_reg()
        self.emit("rtl", "MoveMwR", off, FP, r)
        self.loc[ins] = r

    def lower_storeTemp(self, ins):
        self.effects = True
        self.emit("storeFrame", self.temp_offset(ins.args[0]), self.opnd(ins.args[1]))
        self.used(ins.args[1])

    def lower_storeSlot(self, ins):
        self.effects = True
        base, off, val = ins.args
        v = self.in_reg(val)
        o, b = self.address(base, off)
        self.emit("rtl", "MoveRMw", v, o, b)
        self.used(*ins.args)

    def lower_stackRead(self, ins):
        r = self.new_reg()
        self.emit("ssTop", r, ("imm", ins.attrs["depth"]))
        self.loc[ins] = r

    def lower_stackPush(self, ins):
        self.effects = True
        v = ins.args[0]
        if v in self.lazy_push:
            if v.op == "loadTemp":
                self.emit("ssPushBase", FP, self.temp_offset(v.args[0]))
            else:
                self.emit("ssPushBase", self.in_reg(v.args[0]), self.opnd(v.args[1]))
            return
        o = self.opnd(v)
        if o[0] in ("imm", "sv"):
            self.emit("ssPushConst", o)
        else:
            self.emit("ssPushReg", o)

    def lower_stackPop(self, ins):
        self.effects = True
        self.emit("ssPop", self.opnd(ins.args[0]) if ins.args else ("imm", ins.attrs["n"]))

    def lower_runtimeCall(self, ins):
        if ins.attrs.get("fn") != "allocArray":
            raise GenError(f"{self.ir.name}: unknown run-time call {ins.attrs.get('fn')}")
        self.effects = True
        n = self.opnd(ins.args[0])
        temp = ("reg", "Temp")
        if self.kind == "bytecode":
            self.emit("ssFlush")
        elif "Temp" not in self.free and n != temp:
            raise GenError(f"{self.ir.name}: TempReg busy across run-time call")
        if n != temp:
            self.emit("rtl", "MoveRR" if n[0] in ("reg", "rv") else "MoveCqR", n, temp)
        self.used(ins.args[0])
        self.emit("rtl", "CallTrampoline", ("imm", "ceAllocateArray"))
        if self.kind == "primitive":
            if "Temp" in self.free:
                self.free.remove("Temp")
            self.owned.add(temp)
            self.loc[ins] = temp
        else:
            r = self.new_reg()
            self.emit("rtl", "MoveRR", temp, r)
            self.loc[ins] = r

    # -- control flow -------------------------------------------------------------

    def edge(self, pred, succ):
        if not succ.phis:
            return
        k = succ.preds.index(pred)
        staged = [p for p in succ.phis if self.staged(p)]
        temps = []
        for p in staged:
            t = self.tmp()
            self.emit("staged", t, "copy", self.opnd(p.args[k]))
            temps.append(t)
        for p, t in zip(staged, temps):
            name = self.loc.setdefault(p, ("sv", f"s{p.id}"))
            self.emit("staged", name, "copy", t)
        for p in succ.phis:
            if p in staged:
                continue
            if any(a in succ.phis for a in p.args):
                raise GenError(f"{self.ir.name}: cyclic run-time phi")
            if p not in self.loc:
                self.loc[p] = self.new_reg()
            src = self.opnd(p.args[k])
            if src != self.loc[p]:
                self.emit("rtl", "MoveRR" if src[0] in ("reg", "rv") else "MoveCqR",
                          src, self.loc[p])

    def region(self, b, stop):
        while b is not None and b is not stop:
            if b in self.loops:
                b = self.loop(b, stop)
                continue
            for ins in b.instrs:
                self.lower(ins)
            t = b.term
            if t.op == "jump":
                self.edge(b, t.targets[0])
                b = t.targets[0]
            elif t.op == "branch":
                b = self.branch(b, stop)
            elif t.op in CHECKED:
                b = self.checked(b, stop)
            else:
                self.terminal(t)
                return

    def loop(self, h, stop):
        t = h.term
        if t.op != "branch" or not self.sm.branch_staged(t):
            raise GenError(f"{self.ir.name}: loop condition is not known at JIT time")
        body = self.loops[h]
        for p in h.phis:
            if not self.staged(p):
                raise GenError(f"{self.ir.name}: run-time loop-carried value")
        inside, exit_ = t.targets
        cond = t.attrs["cond"]
        if inside not in body:
            inside, exit_ = exit_, inside
            cond = NEGATE[cond]
        with self.capture() as head:
            for ins in h.instrs:
                self.lower(ins)
            c = self.tmp()
            self.emit("staged", c, "compare", cond, self.opnd(t.args[0]), self.opnd(t.args[1]))
        self.flushed = False
        with self.capture() as ops:
            self.region(inside, h)
        self.flushed = False
        hoisted = [op for op in _walk(ops) if op[0] == "alloc"]
        ops = _strip_allocs(ops)
        self.out.extend(hoisted)
        self.emit("stagedLoop", head, c, ops)
        return exit_

    def _arm_is_fail(self, b) -> bool:
        return not b.instrs and not b.phis and b.term.op == "primFail"

    def _needs_flush(self, blocks) -> bool:
        if self.kind != "bytecode":
            return False
        seen, work = set(), list(blocks)
        while work:
            b = work.pop()
            if b is None or b in seen:
                continue
            seen.add(b)
            if b.term.op in FLUSHING_TERMS:
                return True
            if any(i.op in STACK_OPS for i in b.instrs):
                raise GenError(f"{self.ir.name}: stack effect under a run-time branch")
            work.extend(b.succs)
        return False

    def branch(self, b, stop):
        t = b.term
        if self.sm.branch_staged(t):
            c = self.tmp()
            self.emit("staged", c, "compare", t.attrs["cond"],
                      self.opnd(t.args[0]), self.opnd(t.args[1]))
            j = self.ipdom.get(b)
            T, F = t.targets
            before = self.flushed
            with self.capture() as then_ops:
                self.edge(b, T)
                self.region(T, j)
            after_then, self.flushed = self.flushed, before
            with self.capture() as else_ops:
                self.edge(b, F)
                self.region(F, j)
            self.flushed = self.flushed and after_then
            self.emit("stagedIf", c, then_ops, else_ops)
            return j if j is not stop else None
        return self.runtime_branch(b, stop, self.set_flags(t))

    def set_flags(self, t) -> str:
        a, b = t.args
        cond = t.attrs["cond"]
        if a in self.lazy_tst:
            self.emit("rtl", "TstCqR", self.opnd(a.args[1]), self.opnd(a.args[0]))
            self.used(a.args[0], a.args[1])
            return cond
        if self.staged(a):
            a, b, cond = b, a, SWAP[cond]
        ao, bo = self.opnd(a), self.opnd(b)
        if bo[0] in ("imm", "sv"):
            self.emit("rtl", "CmpCqR", bo, ao)
        else:
            self.emit("rtl", "CmpRR", bo, ao)
        self.used(a, b)
        return cond

    def runtime_branch(self, b, stop, cond, jump_ops=None):
        """Two-way run-time split; flags are already set for ``cond`` meaning taken."""
        T, F = b.term.targets
        j = self.ipdom.get(b)
        jcc = jump_ops or (lambda c: JCC[c])
        if self._arm_is_fail(F):
            self.emit("rtl", jcc(NEGATE[cond]), FAIL)
            return T
        if self._arm_is_fail(T):
            self.emit("rtl", jcc(cond), FAIL)
            return F
        arms = [x for x in (T, F) if x is not j]
        if self._needs_flush(arms) and not self.flushed:
            # flushed before the compare so both arms see the same stack
            self.out.insert(self._flags_start, ("ssFlush",))
            self.flushed = True
        for p in (j.phis if j is not None else ()):
            if not self.staged(p) and p not in self.loc:
                self.loc[p] = self.new_reg()
        lf = self.label()
        self.emit("rtl", jcc(NEGATE[cond]), lf)
        self.edge(b, T)
        self.region(T, j)
        lj = None
        if j is not None:
            lj = self.label()
            self.emit("rtl", "Jump", lj)
        self.emit("label", lf[1])
        self.edge(b, F)
        self.region(F, j)
        if lj is not None:
            self.emit("label", lj[1])
        return j if j is not stop else None

    def checked(self, b, stop):
        t = b.term
        base = CHECKED_BASE[t.op]
        self.arith(t, base)
        ok, ovf = t.targets
        if self._arm_is_fail(ovf):
            self.emit("rtl", "JumpOverflow", FAIL)
            return ok
        lo = self.label()
        self.emit("rtl", "JumpOverflow", lo)
        j = self.ipdom.get(b)
        self.region(ok, j)
        lj = self.label() if j is not None else None
        if lj:
            self.emit("rtl", "Jump", lj)
        self.emit("label", lo[1])
        self.region(ovf, j)
        if lj:
            self.emit("label", lj[1])
        return j if j is not stop else None

    def terminal(self, t):
        op = t.op
        if op == "next":
            self.emit("rtl", "Jump", NEXT)
        elif op == "bcJump":
            target = self.opnd(t.args[0])
            if target[0] not in ("imm", "sv"):
                raise GenError(f"{self.ir.name}: jump target unknown at JIT time")
            self.emit("ssFlush")
            self.emit("jumpFixup", target)
        elif op == "send":
            sel, argc = (self.opnd(a) for a in t.args)
            if sel[0] not in ("imm", "sv") or argc[0] not in ("imm", "sv"):
                raise GenError(f"{self.ir.name}: send selector unknown at JIT time")
            self.emit("marshallSend", sel, argc, bool(t.attrs.get("special")))
            self.emit("rtl", "Jump", NEXT)
        elif op == "mustBeBoolean":
            v = self.opnd(t.args[0])
            self.emit("ssFlush")
            self.emit("rtl", "MoveRR" if v[0] in ("reg", "rv") else "MoveCqR", v, ("reg", "Temp"))
            self.emit("rtl", "CallTrampoline", ("imm", "ceSendMustBeBoolean"))
        elif op == "ret":
            self.emit("return", self.opnd(t.args[0]))
        elif op == "deopt":
            if self.effects:
                raise GenError(f"{self.ir.name}: deoptimization after a visible effect")
            self.emit("ssFlush")
            self.emit("deoptimize")
        elif op == "primFail":
            self.emit("rtl", "Jump", FAIL)
        elif op == "primReturn":
            self.emit("primReturn", self.opnd(t.args[0]))
        else:
            raise UnloweredInstruction(f"{self.ir.name}: terminator {op}")

    # -- entry ------------------------------------------------------------------

    def run(self) -> list:
        if self.kind == "bytecode" and "isMapped" in self.flags:
            self.emit("annotate")
        self._flags_start = 0
        self._region_tracking(self.ir.entry)
        if self.kind == "bytecode":
            self.emit("label", NEXT[1])
        else:
            self.emit("label", FAIL[1])
        return self.out

    def _region_tracking(self, b):
        # remember where each block's code starts so a pre-branch flush can go
        # right before its compare
        orig = self.set_flags

        def tracked(t):
            self._flags_start = len(self.out)
            return orig(t)

        self.set_flags = tracked
        self.region(b, None)


def _strip_allocs(ops):
    res = []
    for op in ops:
        if op[0] == "alloc":
            continue
        if op[0] == "stagedIf":
            op = ("stagedIf", op[1], _strip_allocs(op[2]), _strip_allocs(op[3]))
        elif op[0] == "stagedLoop":
            op = ("stagedLoop", _strip_allocs(op[1]), op[2], _strip_allocs(op[3]))
        res.append(op)
    return res


def stage_control_flow(ir: DruidIR, sm: StageMap | None = None) -> dict:
    """Classify every conditional terminator as staged (``stagedIf``/``stagedLoop``) or run-time."""
    sm = sm or stage_analysis(ir)
    heads = ir.loop_headers()
    res = {}
    for b in ir.reachable():
        t = b.term
        if t.op == "branch":
            kind = "stagedLoop" if b in heads else "stagedIf"
            res[b] = kind if sm.branch_staged(t) else "runtime"
        elif t.op in CHECKED:
            res[b] = "runtime"
    return res


def handler_flags(d) -> frozenset:
    if d is None:
        return frozenset()
    flags = set(d.annotations.compilationInfo) | set(d.annotations.druidInfo)
    if d.annotations.needsFrameNever is not None:
        flags.add("needsFrameNever")
    return frozenset(flags)


def emit_generator(ir: DruidIR, flags=frozenset(), sm: StageMap | None = None) -> GeneratorProgram:
    sm = sm or stage_analysis(ir)
    em = _Emitter(ir, sm, frozenset(flags))
    ops = em.run()
    meta = dict(ir.meta)
    meta["flags"] = sorted(flags)
    meta["demotions"] = [f"v{p.id}" for p in sm.demotions]
    return GeneratorProgram(ir.name, ir.kind, ops, meta)


def allocate_registers(ir: DruidIR, sm: StageMap | None = None) -> dict:
    """Register (or JIT-time register variable) assigned to each run-time value."""
    sm = sm or stage_analysis(ir)
    em = _Emitter(ir, sm, frozenset())
    em.run()
    return {ins: r for ins, r in em.loc.items() if r[0] in ("reg", "rv")}


# -- pseudocode listing ----------------------------------------------------------

def _o(x) -> str:
    tag, v = x
    if tag == "imm":
        return str(v)
    if tag == "label":
        return v
    return v


def listing(gp: GeneratorProgram) -> str:
    lines = [f"gen_{gp.name.replace('@', '_')}  \"generated\"  kind={gp.kind}"]

    def rec(ops, ind):
        pad = "  " * ind
        for op in ops:
            k = op[0]
            if k == "stagedIf":
                lines.append(f"{pad}{_o(op[1])} ifTrue: [")
                rec(op[2], ind + 1)
                lines.append(f"{pad}] ifFalse: [")
                rec(op[3], ind + 1)
                lines.append(f"{pad}]")
            elif k == "stagedLoop":
                lines.append(f"{pad}[")
                rec(op[1], ind + 1)
                lines.append(f"{pad}  {_o(op[2])}] whileTrue: [")
                rec(op[3], ind + 1)
                lines.append(f"{pad}]")
            elif k == "staged":
                args = " ".join(_o(a) if isinstance(a, tuple) else str(a) for a in op[3:])
                lines.append(f"{pad}{_o(op[1])} := {op[2]} {args}")
            elif k == "rtl":
                lines.append(f"{pad}{op[1]} " + ", ".join(_o(a) for a in op[2:]))
            elif k == "alloc":
                lines.append(f"{pad}{_o(op[1])} := allocateRegNotConflictingWith: live")
            elif k == "label":
                lines.append(f"{pad}{op[1]}:")
            else:
                rest = ", ".join(_o(a) if isinstance(a, tuple) else str(a) for a in op[1:])
                lines.append(f"{pad}{k} {rest}".rstrip())

    rec(gp.ops, 1)
    return "\n".join(lines) + "\n"
