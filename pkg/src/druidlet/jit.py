"""Tier 1: compile hot methods by running generator programs, execute the result.

A :class:`Frontend` maps opcodes and primitive numbers to generators.  A
generator is either a :class:`~druidlet.backend.GeneratorProgram` (data
produced by the meta-compiler) or a Python callable written by hand against
the same :class:`CompileContext` API.
"""

from __future__ import annotations

import itertools
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field

from . import bytecodes as bc
from .backend import GeneratorProgram
from .interpreter import (VM, DoesNotUnderstand, FuelExhausted, MustBeBoolean,
                          StackOverflow, special_send_predicted)
from .ir import eval_cond
from .midend import binop
from .object_model import NIL, SMALL_INTEGER_ID, MethodObject, VmBug
from .rtl import COND_JUMPS, MAXW, MINW, RTLError, check_flags, generate_python, machine_count

DEFAULT_THRESHOLD = 2
ALLOCATABLE = tuple(f"R{i}" for i in range(8))
TRAMPOLINES = {
    "ceSendMiss": "call",
    "ceSendMustBeBoolean": "raise",
    "ceDeoptimize": "deopt",
    "ceInterpretPrimitiveFallback": "fallback",
    "ceAllocateArray": "call",
}
_TERMINAL = {"Jump", "RetR"}
_WRITES_LAST = {"MoveRR", "MoveCqR", "MoveMwR"} | {
    op for op in ("AddRR", "AddCqR", "SubRR", "SubCqR", "MulRR", "MulCqR", "AndRR", "AndCqR",
                  "OrRR", "OrCqR", "LslRR", "LslCqR", "AsrRR", "AsrCqR")}


def threshold_from_env(default: int = DEFAULT_THRESHOLD) -> int:
    value = os.environ.get("DRUIDLET_THRESHOLD")
    return int(value) if value else default


class CompileFailed(Exception):
    """Compilation of a method was abandoned; the method stays interpreted."""


@dataclass
class Frontend:
    """Generators for one JIT flavour plus the dispatch-table metadata."""
    name: str
    bytecodes: dict                                   # opcode -> generator
    primitives: dict                                  # primitive id -> generator
    flags: dict = field(default_factory=dict)         # opcode -> frozenset of flags
    prim_meta: dict = field(default_factory=dict)     # primitive id -> {numArgs, guardClass}
    fallbacks: dict = field(default_factory=dict)     # opcode -> reason

    def handler_name(self, opcode: int) -> str:
        return bc.OPCODES[opcode].handler


# ---------------------------------------------------------------------------
# abstract stack entries: ("const", v) | ("reg", r) | ("base", r, off) | ("spill",)

SPILLED = ("spill",)


class CompileContext:
    """Abstract stack, labels and RTL buffer for one method compilation."""

    def __init__(self, jit: "JIT", method: MethodObject, kind: str = "method",
                 dry: bool = False, probe=False):
        self.jit = jit
        self.method = method
        self.kind = kind
        self.dry = dry
        self.probe = probe
        self.code: list = []
        self.ss: list = []
        self.max_depth = 0
        self.frame_size = method.frame_size
        self.dead = False
        self.rrr_self = True
        self.live: set = set()
        self.pc = 0
        self.opcode = 0
        self.byte1 = self.byte2 = 0
        self.instance = "entry"
        self.pc_map: dict = {}
        self.fixups: dict = {}           # target pc -> depth at the jump
        self.bound: set = set()
        self.referenced: set = set()
        self.sites: list = []
        self.specials = dict(zip(("nil", "true", "false"), jit.specials))

    # -- emission -----------------------------------------------------------

    def emit(self, *ins):
        op = ins[0]
        if op == "Label":
            # fallthrough-only labels after dead code stay dead
            if ins[1] in self.referenced:
                self.dead = False
            if not self.dead and not self.dry:
                self.code.append(ins)
            return
        if self.dead:
            return
        if not self.dry:
            self.code.append(ins)
        if op == "Jump" or op in COND_JUMPS:
            self.referenced.add(ins[-1])
        if op in _WRITES_LAST and ins[-1] == "RRR":
            self.rrr_self = False
        if op in _TERMINAL or (op == "CallTrampoline" and TRAMPOLINES[ins[1]] in ("deopt", "raise", "fallback")):
            self.dead = True

    def local(self, name: str) -> str:
        return f"{self.instance}:{name}"

    def bind(self, name: str):
        self.emit("Label", name)
        if name in self.referenced and self.kind == "method":
            self.rrr_self = False

    # -- registers ------------------------------------------------------------

    def stack_registers(self) -> set:
        regs = set()
        for e in self.ss:
            if e[0] in ("reg", "base"):
                regs.add(e[1])
        return regs

    def alloc(self) -> str:
        for attempt in range(2):
            busy = self.stack_registers() | self.live
            for r in ALLOCATABLE:
                if r not in busy:
                    self.live.add(r)
                    return r
            self.ss_flush()
        raise CompileFailed("no register available")

    def ensure_self(self):
        if not self.rrr_self:
            # a send result may still live in RRR
            if "RRR" in self.stack_registers():
                self.ss_flush()
            self.emit("MoveMwR", 0, "FP", "RRR")
            self.rrr_self = True

    # -- abstract stack ---------------------------------------------------------

    def slot_offset(self, index: int) -> int:
        return 8 * (1 + self.frame_size + index)

    def _push(self, entry):
        self.ss.append(entry)
        self.max_depth = max(self.max_depth, len(self.ss))

    def ss_push_reg(self, reg: str):
        self._push(("reg", reg))

    def ss_push_const(self, value: int):
        self._push(("const", value))

    def ss_push_base(self, base: str, offset: int):
        self._push(("base", base, offset))

    def ss_pop(self, n: int):
        if n > len(self.ss):
            raise CompileFailed("abstract stack underflow")
        del self.ss[len(self.ss) - n:]

    def materialize(self, entry, index: int, reg: str):
        kind = entry[0]
        if kind == "const":
            self.emit("MoveCqR", entry[1], reg)
        elif kind == "reg":
            if entry[1] != reg:
                self.emit("MoveRR", entry[1], reg)
        elif kind == "base":
            self.emit("MoveMwR", entry[2], entry[1], reg)
        else:
            self.emit("MoveMwR", self.slot_offset(index), "FP", reg)

    def ss_top(self, reg: str, depth: int):
        if depth >= len(self.ss):
            raise CompileFailed("abstract stack underflow")
        index = len(self.ss) - 1 - depth
        self.materialize(self.ss[index], index, reg)

    def ss_flush_to(self, limit: int):
        for i in range(min(limit, len(self.ss))):
            e = self.ss[i]
            kind = e[0]
            if kind == "spill":
                continue
            off = self.slot_offset(i)
            if kind == "const":
                self.emit("MoveCqMw", e[1], off, "FP")
            elif kind == "reg":
                self.emit("MoveRMw", e[1], off, "FP")
            else:
                self.emit("MoveMwR", e[2], e[1], "Temp")
                self.emit("MoveRMw", "Temp", off, "FP")
            self.ss[i] = SPILLED

    def ss_flush(self):
        self.ss_flush_to(len(self.ss))

    def flushed(self) -> bool:
        return all(e[0] == "spill" for e in self.ss)

    def store_frame(self, offset: int, src):
        """Store into a temp slot, first spilling stack entries that alias it."""
        if any(e[0] == "base" and e[1] == "FP" and e[2] == offset for e in self.ss):
            self.ss_flush()
        if src[0] == "const":
            self.emit("MoveCqMw", src[1], offset, "FP")
        else:
            self.emit("MoveRMw", src[1], offset, "FP")

    # -- control transfer ---------------------------------------------------------

    def annotate(self):
        label = f"pc{self.pc}@"
        self.pc_map[self.pc] = label
        self.emit("Label", label)
        if self.probe is True or (callable(self.probe) and self.probe(self.method, self.pc)):
            self.ss_flush()
            self.deoptimize()
            self.dead = False

    def ensure_fixup_at(self, target: int) -> str:
        if not 0 <= target < len(self.method.bytecodes):
            raise CompileFailed(f"jump target {target} outside method")
        depth = len(self.ss)
        prev = self.fixups.setdefault(target, depth)
        if prev != depth:
            raise CompileFailed(f"fixup inconsistency at pc {target}")
        return f"pc{target}"

    def jump_fixup(self, target: int):
        self.ss_flush()
        label = self.ensure_fixup_at(target)
        if not self.dead:
            self.emit("Jump", label)

    def deoptimize(self):
        if not self.flushed():
            raise CompileFailed("deoptimization with unflushed stack")
        self.pc_map.setdefault(self.pc, f"pc{self.pc}@")
        self.emit("CallTrampoline", "ceDeoptimize", self.pc, len(self.ss))

    def marshall_send(self, selector: int, argc: int, special: bool):
        if argc + 1 > len(self.ss):
            raise CompileFailed("send without enough operands")
        if self.dead:
            self.ss_pop(argc + 1)
            self._push(("reg", "RRR"))
            return
        if self.dry:  # the prescan must not register sites
            site = SendSite(self.jit, -1, selector, argc, special)
        else:
            site = self.jit.new_site(selector, argc, special)
        self.sites.append(site)
        if argc <= 2:
            self.ss_flush_to(len(self.ss) - argc - 1)
            n = len(self.ss)
            for i in range(argc):
                idx = n - argc + i
                self.materialize(self.ss[idx], idx, ("Arg0", "Arg1")[i])
            idx = n - argc - 1
            self.materialize(self.ss[idx], idx, "RRR")
            self.emit("SendSite", site.index, argc)
        else:
            self.ss_flush()
            base = 1 + self.frame_size + len(self.ss) - argc - 1
            self.emit("SendSite", site.index, argc, base)
        self.ss_pop(argc + 1)
        self._push(("reg", "RRR"))
        self.rrr_self = False

    def return_value(self, src):
        if src[0] == "const":
            self.emit("MoveCqR", src[1], "RRR")
        elif src[1] != "RRR":
            self.emit("MoveRR", src[1], "RRR")
        self.emit("RetR")

    def trampoline(self, name: str):
        if name not in TRAMPOLINES:
            raise CompileFailed(f"unknown trampoline {name}")
        if TRAMPOLINES[name] in ("raise", "call", "deopt") and self.kind == "method" \
                and not self.flushed():
            raise CompileFailed(f"trampoline {name} with unflushed stack")
        self.emit("CallTrampoline", name)

    # -- per-instance bookkeeping -------------------------------------------------

    def begin(self, pc: int, opcode: int, byte1: int, byte2: int):
        self.pc, self.opcode, self.byte1, self.byte2 = pc, opcode, byte1, byte2
        self.instance = str(pc)
        self.live = set()

    def param(self, name: str) -> int:
        if name == "bytecodePC":
            return self.pc
        if name == "byte1":
            return self.byte1
        if name == "byte2":
            return self.byte2
        if name == "method":
            return self.method.oop
        if name == "currentBytecode":
            return self.opcode
        raise CompileFailed(f"parameter {name} unknown at JIT time")

    def special(self, name: str) -> int:
        return self.specials[name]

    def load(self, address: int) -> int:
        return self.jit.vm.words[address >> 3]


# ---------------------------------------------------------------------------
# running GeneratorPrograms

def run_program(ctx: CompileContext, gp: GeneratorProgram):
    env: dict = {}
    _exec(ctx, gp.ops, env)


def _val(ctx, env, o):
    tag = o[0]
    if tag == "imm":
        return o[1]
    if tag == "sv" or tag == "rv":
        return env[o[1]]
    if tag == "reg":
        return o[1]
    if tag == "label":
        return "fail" if o[1] == "fail" and ctx.kind == "primitive" else ctx.local(o[1])
    raise VmBug(f"bad operand {o}")


def _source(ctx, env, o):
    """A value operand as ("const", v) or ("reg", r)."""
    if o[0] in ("imm", "sv"):
        return ("const", _val(ctx, env, o))
    return ("reg", _val(ctx, env, o))


def _staged(ctx, env, op):
    dst, fn = op[1][1], op[2]
    args = op[3:]
    if fn == "param":
        v = ctx.param(args[0])
    elif fn == "special":
        v = ctx.special(args[0])
    elif fn == "copy":
        v = _val(ctx, env, args[0])
    elif fn == "load":
        v = ctx.load(_val(ctx, env, args[0]) + _val(ctx, env, args[1]))
    elif fn == "compare":
        v = 1 if eval_cond(args[0], _val(ctx, env, args[1]), _val(ctx, env, args[2])) else 0
    else:
        v = binop(fn, _val(ctx, env, args[0]), _val(ctx, env, args[1]))
    env[dst] = v


def _exec(ctx: CompileContext, ops, env):
    for op in ops:
        k = op[0]
        if k == "staged":
            _staged(ctx, env, op)
        elif k == "rtl":
            name = op[1]
            if name == "CallTrampoline":
                ctx.trampoline(op[2][1])
            else:
                ctx.emit(name, *(_val(ctx, env, a) for a in op[2:]))
        elif k == "alloc":
            env[op[1][1]] = ctx.alloc()
        elif k == "label":
            ctx.bind("fail" if op[1] == "fail" and ctx.kind == "primitive" else ctx.local(op[1]))
        elif k == "stagedIf":
            _exec(ctx, op[2] if _val(ctx, env, op[1]) else op[3], env)
        elif k == "stagedLoop":
            for _ in itertools.count():
                _exec(ctx, op[1], env)
                if not _val(ctx, env, op[2]):
                    break
                _exec(ctx, op[3], env)
                if _ > 1 << 16:
                    raise CompileFailed("staged loop does not terminate")
        elif k == "annotate":
            ctx.annotate()
        elif k == "ensureSelf":
            ctx.ensure_self()
        elif k == "ssTop":
            ctx.ss_top(_val(ctx, env, op[1]), _val(ctx, env, op[2]))
        elif k == "ssPop":
            ctx.ss_pop(_val(ctx, env, op[1]))
        elif k == "ssPushReg":
            ctx.ss_push_reg(_val(ctx, env, op[1]))
        elif k == "ssPushConst":
            ctx.ss_push_const(_val(ctx, env, op[1]))
        elif k == "ssPushBase":
            ctx.ss_push_base(_val(ctx, env, op[1]), _val(ctx, env, op[2]))
        elif k == "ssFlush":
            ctx.ss_flush()
        elif k == "storeFrame":
            ctx.store_frame(_val(ctx, env, op[1]), _source(ctx, env, op[2]))
        elif k == "jumpFixup":
            ctx.jump_fixup(_val(ctx, env, op[1]))
        elif k == "marshallSend":
            ctx.marshall_send(_val(ctx, env, op[1]), _val(ctx, env, op[2]), op[3])
        elif k == "deoptimize":
            ctx.deoptimize()
        elif k == "return" or k == "primReturn":
            ctx.return_value(_source(ctx, env, op[1]))
        elif k == "failCompilation":
            raise CompileFailed(op[1])
        else:
            raise VmBug(f"unknown GenOp {k}")


def run_generator(ctx: CompileContext, gen):
    if isinstance(gen, GeneratorProgram):
        run_program(ctx, gen)
    else:
        gen(ctx)


# ---------------------------------------------------------------------------
# compiled code, send sites, per-method entries

@dataclass
class CompiledMethod:
    method: MethodObject
    rtl: list
    pc_map: dict
    sites: list
    frame_kind: str
    source: str
    fn: object = None
    compile_seconds: float = 0.0

    @property
    def instruction_count(self) -> int:
        return machine_count(self.rtl)


class MethodEntry:
    """Per-method tiering state; ``fn(rcvr, a0, a1)`` is always callable."""

    __slots__ = ("jit", "method", "argc", "invocations", "compiled", "failed", "reason", "fn")

    def __init__(self, jit: "JIT", method: MethodObject):
        self.jit = jit
        self.method = method
        self.argc = method.num_args
        self.invocations = 0
        self.compiled: CompiledMethod | None = None
        self.failed = False
        self.reason = ""
        self.fn = self.interpret

    def tick(self):
        """Count an invocation, compiling when the threshold is reached."""
        self.invocations += 1
        if (self.compiled is None and not self.failed
                and self.invocations >= self.jit.threshold):
            self.jit.compile_entry(self)
        return self.compiled

    def interpret(self, r, a0, a1):
        if self.tick() is not None:
            return self.fn(r, a0, a1)
        return self.jit.run_interpreted(self.method, r, (a0, a1)[:self.argc])


class SendSite:
    """Inline cache: unlinked -> mono -> poly (up to 4) -> mega."""

    POLY_LIMIT = 4
    __slots__ = ("jit", "index", "selector", "argc", "special", "state", "klass", "entry",
                 "table", "hits", "misses")

    def __init__(self, jit: "JIT", index: int, selector: int, argc: int, special: bool):
        self.jit = jit
        self.index = index
        self.selector = selector
        self.argc = argc
        self.special = special
        self.state = "unlinked"
        self.klass = -1
        self.entry = None
        self.table: dict = {}
        self.hits = 0
        self.misses = 0

    def target(self, cls: int) -> MethodEntry:
        state = self.state
        if state == "mono" and cls == self.klass:
            return self.entry
        if state == "poly":
            e = self.table.get(cls)
            if e is not None:
                return e
        jit = self.jit
        jit.lookups += 1
        method = jit.vm.lookup(cls, self.selector)
        e = jit.entry(method)
        if state == "unlinked":
            self.state, self.klass, self.entry = "mono", cls, e
        elif state == "mono":
            self.state = "poly"
            self.table = {self.klass: self.entry, cls: e}
            self.klass, self.entry = -1, None
        elif state == "poly":
            if len(self.table) < self.POLY_LIMIT:
                self.table[cls] = e
            else:
                self.state, self.table = "mega", {}
        return e

    def send(self, r, a0, a1):
        vm = self.jit.vm
        cls = SMALL_INTEGER_ID if r & 1 else vm.words[r >> 3] & 0xFFFFFFFF
        if vm.tracing and not (self.special and self.argc == 1
                               and special_send_predicted(self.selector, r, a0)):
            vm.trace.send(cls, self.selector)
        if cls == self.klass:
            return self.entry.fn(r, a0, a1)
        return self.target(cls).fn(r, a0, a1)

    def send_n(self, values):
        vm = self.jit.vm
        r = values[0]
        cls = SMALL_INTEGER_ID if r & 1 else vm.words[r >> 3] & 0xFFFFFFFF
        if vm.tracing:
            vm.trace.send(cls, self.selector)
        e = self.target(cls)
        return self.jit.run_interpreted(e.method, r, tuple(values[1:]))


# ---------------------------------------------------------------------------
# the compiled tier

class JIT:
    def __init__(self, vm: VM, frontend: Frontend, threshold: int | None = None,
                 probe=False):
        """``probe`` forces a deoptimization at mapped pcs: True for all of
        them, or a predicate ``(method, pc) -> bool``."""
        self.vm = vm
        self.frontend = frontend
        self.threshold = threshold if threshold is not None else threshold_from_env()
        self.probe = probe
        self.specials = vm.image.specials
        self.entries: dict = {}
        self.sites: list[SendSite] = []
        self.lookups = 0
        self.deopts = 0
        self.compile_seconds = 0.0
        self.compile_attempts: Counter = Counter()
        self.generator_invocations: Counter = Counter()
        self.compiled: list[CompiledMethod] = []
        vm.jit = self
        # compiled calls nest Python frames: a handful per VM activation
        sys.setrecursionlimit(max(sys.getrecursionlimit(), 16 * vm.max_depth + 2000))

    # -- interpreter hook -------------------------------------------------------

    def entry(self, method: MethodObject) -> MethodEntry:
        e = self.entries.get(method)
        if e is None:
            e = self.entries[method] = MethodEntry(self, method)
        return e

    def entry_for(self, method: MethodObject):
        """Compiled entry point for ``method`` or None (counts the invocation)."""
        e = self.entries.get(method)
        if e is None:
            e = self.entries[method] = MethodEntry(self, method)
        if e.compiled is not None:
            return e.fn
        return e.fn if e.tick() is not None else None

    def new_site(self, selector: int, argc: int, special: bool) -> SendSite:
        site = SendSite(self, len(self.sites), selector, argc, special)
        self.sites.append(site)
        return site

    # -- transitions back to the interpreter ----------------------------------------

    def run_interpreted(self, method: MethodObject, receiver: int, args) -> int:
        vm = self.vm
        stack = vm.stack
        base = len(stack)
        stack.append(receiver)
        stack.extend(args)
        frames = len(vm.frames)
        vm.activate(method, len(args))
        if len(vm.frames) > frames:
            vm._run_until(frames)
        result = stack.pop()
        del stack[base:]
        return result

    # -- compilation --------------------------------------------------------------

    def compile_entry(self, e: MethodEntry):
        self.compile_attempts[e.method] += 1
        start = time.perf_counter()
        try:
            cm = compile_method(self, e.method, probe=self.probe)
        except (CompileFailed, RTLError) as exc:
            e.failed = True
            e.reason = str(exc)
            return
        finally:
            self.compile_seconds += time.perf_counter() - start
        cm.compile_seconds = time.perf_counter() - start
        e.compiled = cm
        e.fn = cm.fn
        self.compiled.append(cm)

    def trampolines_for(self, method: MethodObject) -> dict:
        vm = self.vm
        jit = self

        def ceDeoptimize(pc, depth, S, n):
            if n - 1 > vm.fuel:
                vm.steps = vm.fuel + 1
                raise FuelExhausted(f"after {vm.fuel} steps")
            jit.deopts += 1
            vm.trace.deopts += 1
            vm.steps = n - 1
            fs = method.frame_size
            return vm.resume_frame(method, S[0], S[1:1 + fs], S[1 + fs:1 + fs + depth], pc)

        def ceSendMustBeBoolean(value):
            vm.mustBeBoolean(value)

        def ceAllocateArray(size):
            return vm.allocArray(size)

        def ceInterpretPrimitiveFallback(r, a0, a1):
            return jit.run_interpreted(method, r, (a0, a1)[:method.num_args])

        def ceSendMiss(*_):
            raise VmBug("send misses are handled by send sites")

        return {"ceDeoptimize": ceDeoptimize, "ceSendMustBeBoolean": ceSendMustBeBoolean,
                "ceAllocateArray": ceAllocateArray, "ceSendMiss": ceSendMiss,
                "ceInterpretPrimitiveFallback": ceInterpretPrimitiveFallback}


def decode(method: MethodObject) -> list[tuple[int, int, int, int]]:
    code = method.bytecodes
    out, pc = [], 0
    while pc < len(code):
        op = code[pc]
        n = bc.LENGTHS[op]
        if pc + n > len(code):
            raise CompileFailed(f"truncated instruction at pc {pc}")
        out.append((pc, op, code[pc + 1] if n > 1 else 0, code[pc + 2] if n > 2 else 0))
        pc += n
    return out


def _generator(jit: JIT, opcode: int):
    fe = jit.frontend
    name = fe.handler_name(opcode)
    jit.generator_invocations[name] += 1
    gen = fe.bytecodes.get(opcode)
    if gen is None:
        raise CompileFailed(f"no generator for {name} (0x{opcode:02x}): "
                            f"{fe.fallbacks.get(opcode, 'unknownBytecode')}")
    return gen


def _prescan(jit: JIT, method: MethodObject, insns) -> tuple[set, dict]:
    """Dry run of every generator: jump targets and the stack depth there."""
    ctx = CompileContext(jit, method, dry=True)
    depth_at: dict = {}
    for pc, op, b1, b2 in insns:
        if pc in ctx.fixups:
            if ctx.dead:
                ctx.ss = [SPILLED] * ctx.fixups[pc]
            ctx.dead = False
        elif ctx.dead:
            continue
        depth_at[pc] = len(ctx.ss)
        ctx.begin(pc, op, b1, b2)
        gen = jit.frontend.bytecodes.get(op)
        if gen is None:
            return set(ctx.fixups), depth_at
        run_generator(ctx, gen)
        ctx.bind(ctx.local("next"))
    return set(ctx.fixups), {**depth_at, **ctx.fixups}


def compile_method(jit: JIT, method: MethodObject, probe=False) -> CompiledMethod:
    if method.num_args > 2:
        raise CompileFailed("more than two arguments")
    if method.primitive:
        return _compile_primitive(jit, method)
    insns = decode(method)
    targets, depths = _prescan(jit, method, insns)
    ctx = CompileContext(jit, method, probe=probe)
    for pc, op, b1, b2 in insns:
        if pc in targets:
            if not ctx.dead:
                ctx.ss_flush()
                if len(ctx.ss) != depths.get(pc, len(ctx.ss)):
                    raise CompileFailed(f"fixup inconsistency at pc {pc}")
            else:
                ctx.ss = [SPILLED] * depths[pc]
            ctx.fixups.setdefault(pc, len(ctx.ss))
            ctx.bound.add(pc)
            ctx.referenced.add(f"pc{pc}")
            ctx.dead = False
            ctx.bind(f"pc{pc}")
        elif ctx.dead:
            continue
        ctx.emit("Bc", pc)
        ctx.begin(pc, op, b1, b2)
        run_generator(ctx, _generator(jit, op))
        ctx.bind(ctx.local("next"))
    if not ctx.dead:
        raise CompileFailed("control falls off the end of the method")
    for target, depth in ctx.fixups.items():
        if target not in ctx.bound:
            raise CompileFailed(f"jump into the middle of an instruction at pc {target}")
    return _finish(jit, method, ctx, "method")


def _compile_primitive(jit: JIT, method: MethodObject) -> CompiledMethod:
    fe = jit.frontend
    pid = method.primitive
    jit.generator_invocations[f"primitive{pid}"] += 1
    gen = fe.primitives.get(pid)
    if gen is None:
        raise CompileFailed(f"no generator for primitive {pid}")
    meta = fe.prim_meta.get(pid, {})
    guard = meta.get("guardClass")
    if guard is not None and guard != method.class_id:
        raise CompileFailed(f"primitive {pid} is customised for class {guard}")
    if meta.get("numArgs", method.num_args) != method.num_args:
        raise CompileFailed(f"primitive {pid} expects {meta.get('numArgs')} arguments")
    ctx = CompileContext(jit, method, kind="primitive")
    ctx.instance = "prim"
    run_generator(ctx, gen)
    if "fail" not in {ins[1] for ins in ctx.code if ins[0] == "Label"}:
        ctx.bind("fail")
    ctx.emit("CallTrampoline", "ceInterpretPrimitiveFallback")
    return _finish(jit, method, ctx, "frameless")


def peephole(code: list) -> list:
    """Drop jumps to the label that immediately follows and unreferenced labels."""
    out = []
    for i, ins in enumerate(code):
        if ins[0] == "Jump":
            j = i + 1
            while j < len(code) and code[j][0] == "Label":
                if code[j][1] == ins[1]:
                    break
                j += 1
            if j < len(code) and code[j][0] == "Label" and code[j][1] == ins[1]:
                continue
        out.append(ins)
    used = {ins[-1] for ins in out if ins[0] == "Jump" or ins[0] in COND_JUMPS}
    return [ins for ins in out if ins[0] != "Label" or ins[1] in used or ins[1].endswith("@")]


_names = itertools.count()


def _finish(jit: JIT, method: MethodObject, ctx: CompileContext, frame_kind: str) -> CompiledMethod:
    code = peephole(ctx.code)
    errs = check_flags(code)
    if errs:
        raise CompileFailed("flag discipline: " + "; ".join(errs))
    name = f"cm{next(_names)}"
    kind = "method" if frame_kind == "method" else "primitive"
    frame_words = ctx.frame_size + ctx.max_depth
    src = generate_python(name, code, kind, frame_words, method.num_args, TRAMPOLINES)
    vm = jit.vm
    ns = {"VM": vm, "W": vm.words, "NIL": NIL, "FUEL": vm.fuel, "MAXD": vm.max_depth,
          "MINW": MINW, "MAXW": MAXW, "StackOverflow": StackOverflow,
          "FuelExhausted": FuelExhausted, "VmBug": VmBug, "MustBeBoolean": MustBeBoolean,
          "DoesNotUnderstand": DoesNotUnderstand}
    ns.update(jit.trampolines_for(method))
    for site in ctx.sites:
        ns[f"SITE{site.index}"] = site
    exec(compile(src, f"<compiled {method.selector}>", "exec"), ns)
    cm = CompiledMethod(method, code, dict(ctx.pc_map), list(ctx.sites), frame_kind, src)
    cm.fn = ns[name]
    return cm


def disassemble_rtl(code) -> str:
    lines = []
    for ins in code:
        if ins[0] == "Label":
            lines.append(f"{ins[1]}:")
        elif ins[0] == "Bc":
            lines.append(f"  ; pc {ins[1]}")
        else:
            lines.append("  " + ins[0] + " " + ", ".join(str(a) for a in ins[1:]))
    return "\n".join(lines) + "\n"
