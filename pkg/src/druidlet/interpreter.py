"""Tier 0: run bytecode by evaluating the handler definitions.

The whole operand stack lives in one Python list.  A frame occupies
``stack[fp:]`` laid out as ``[receiver, args..., temps..., operands...]`` so
a send activates the callee in place over the arguments its caller pushed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import bytecodes as bc
from . import handler_lang as hl
from .handler_eval import INTERPRETER, handler_function, translate_definitions
from .object_model import (ARRAY_ID, FALSE, MAX_SMALL_INT, MIN_SMALL_INT, NIL,
                           SMALL_INTEGER_ID, TRUE, MethodObject, ProgramImage, VmBug)

DEFAULT_FUEL = 10 ** 9
DEFAULT_STACK_BYTES = 1024 * 1024
DEFAULT_MAX_DEPTH = 900


class VMError(Exception):
    kind = "VMError"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.kind}: {detail}" if detail else self.kind)
        self.detail = detail


class FuelExhausted(VMError):
    kind = "FuelExhausted"


class MustBeBoolean(VMError):
    kind = "MustBeBoolean"


class DoesNotUnderstand(VMError):
    kind = "DoesNotUnderstand"


class StackOverflow(VMError):
    kind = "StackOverflow"


class OutOfMemory(VMError):
    kind = "OutOfMemory"


@dataclass
class EffectTrace:
    """Observable effects: sends, primitive failures and errors, in order.

    Deoptimizations are counted on the side; they are not part of the
    equality used by differential testing.
    """
    records: list = field(default_factory=list)
    deopts: int = 0

    def send(self, class_id: int, selector_id: int):
        self.records.append(("send", class_id, selector_id))

    def prim_failed(self, primitive_id: int):
        self.records.append(("primFail", primitive_id))

    def error(self, kind: str):
        self.records.append(("error", kind))

    def __eq__(self, other):
        return isinstance(other, EffectTrace) and self.records == other.records


def special_send_predicted(selector_id: int, rcvr: int, arg: int) -> bool:
    """True when the interpreter's inline small-integer path handles the send.

    Such sends never reach method lookup, so they leave no trace record in
    any tier.
    """
    if not (rcvr & 1 and arg & 1):
        return False
    a, b = rcvr >> 1, arg >> 1
    if selector_id == 1:
        r = a + b
    elif selector_id == 2:
        r = a - b
    elif selector_id == 3:
        r = a * b
    else:
        return selector_id in (4, 5)
    return MIN_SMALL_INT <= r <= MAX_SMALL_INT


_HANDLERS_CACHE: dict = {}


def interpreter_handlers(vmdef: hl.VMDefinition | None = None):
    vmdef = vmdef or hl.builtin_vm_definition()
    key = id(vmdef)
    if key not in _HANDLERS_CACHE:
        ns, _ = translate_definitions(vmdef, INTERPRETER)
        table = []
        for info in bc.OPCODES:
            if info.handler == bc.UNKNOWN:
                table.append(None)
            else:
                table.append(handler_function(ns, info.handler))
        prims = {pid: handler_function(ns, d.name) for pid, d in vmdef.primitives.items()}
        _HANDLERS_CACHE[key] = (vmdef, tuple(table), prims)
    return _HANDLERS_CACHE[key][1:]


def _balance_checked(op: int, handler):
    """Wrap ``handler`` so it verifies the static stack delta of ``op``."""
    if handler is None:
        return None
    delta = hl.STACK_DELTAS.get(bc.OPCODES[op].handler)
    if op == 0x90:
        delta = "send"
    elif delta is None:
        return handler
    fusable = op in (0x63, 0x64)

    def checked(vm):
        before, frames, pc = len(vm.stack), len(vm.frames), vm.pc
        handler(vm)
        if len(vm.frames) != frames:
            return  # a frame was pushed; its result arrives at the return
        expected = -vm.byte2 if delta == "send" else delta
        if fusable and vm.pc != pc:
            expected -= 1  # booleanCheat also consumed the conditional jump
        if len(vm.stack) - before != expected:
            raise VmBug(f"opcode 0x{op:02X} moved sp by {len(vm.stack) - before}, "
                        f"expected {expected}")
    return checked


class _Frame:
    __slots__ = ("method", "code", "pc", "fp", "base")

    def __init__(self, method, code, pc, fp, base):
        self.method, self.code, self.pc, self.fp, self.base = method, code, pc, fp, base


class VM:
    """Interpreter state plus the hooks the compiled tier calls into."""

    def __init__(self, image: ProgramImage, fuel: int = DEFAULT_FUEL,
                 stack_bytes: int = DEFAULT_STACK_BYTES, max_depth: int = DEFAULT_MAX_DEPTH,
                 trace: bool = True, vmdef: hl.VMDefinition | None = None, debug: bool = False):
        self.image = image
        self.heap = image.heap.copy()
        self.words = self.heap.words
        self.classes = image.classes
        self.fuel = fuel
        self.stack_limit = stack_bytes // 8
        self.max_depth = max_depth
        self.tracing = trace
        self.trace = EffectTrace()
        self.handlers, self.primitives = interpreter_handlers(vmdef)
        if debug:
            self.handlers = tuple(_balance_checked(op, h) for op, h in enumerate(self.handlers))
        self.stack: list[int] = []
        self.frames: list[_Frame] = []
        self.depth = 0
        self.steps = 0           # handler executions (interpreter) + compiled bytecodes
        self.jit = None          # set by the compiled tier
        # registers of the running frame
        self.method: MethodObject | None = None
        self.method_oop = 0
        self.code = b""
        self.pc = 0
        self.fp = 0
        self.bytecodePC = 0
        self.currentBytecode = 0
        self.byte1 = self.byte2 = 0
        self._stop_frames = -1
        self._result = NIL

    # -- helpers -----------------------------------------------------------

    def class_of(self, value: int) -> int:
        if value & 1:
            return SMALL_INTEGER_ID
        return self.words[value >> 3] & 0xFFFFFFFF

    def lookup(self, class_id: int, selector_id: int) -> MethodObject:
        info = self.classes.get(class_id)
        method = info.methods.get(selector_id) if info else None
        if method is None:
            raise DoesNotUnderstand(f"{self.image.class_name(class_id)}>>"
                                    f"{self.image.selector_name(selector_id)}")
        return method

    # -- entry point -------------------------------------------------------

    def run(self):
        """Evaluate the image's entry method; returns (result, trace)."""
        image = self.image
        method = image.entry_method()
        receiver = image.entry_receiver
        try:
            result = self.call_method(method, receiver, list(image.entry_args))
        except VMError as exc:
            self.trace.error(exc.kind)
            raise
        return result, self.trace

    def call_method(self, method: MethodObject, receiver: int, args) -> int:
        """Invoke ``method`` from outside the interpreter loop and return its result."""
        stack = self.stack
        base = len(stack)
        stack.append(receiver)
        stack.extend(args)
        frames = len(self.frames)
        self.invoke(method, len(args))
        if len(self.frames) > frames:
            # a frame was activated: run it to completion
            self._run_until(frames)
        result = stack.pop()
        del stack[base:]
        return result

    # -- sends and activation -------------------------------------------------

    def send(self, selector_id: int, argc: int, special: bool = False):
        stack = self.stack
        rcvr = stack[-1 - argc]
        cls = SMALL_INTEGER_ID if rcvr & 1 else self.words[rcvr >> 3] & 0xFFFFFFFF
        if self.tracing:
            self.trace.send(cls, selector_id)
        info = self.classes.get(cls)
        method = info.methods.get(selector_id) if info else None
        if method is None:
            raise DoesNotUnderstand(f"{self.image.class_name(cls)}>>"
                                    f"{self.image.selector_name(selector_id)}")
        self.invoke(method, argc)

    def invoke(self, method: MethodObject, argc: int):
        """Run ``method`` on the receiver and arguments at the stack top.

        Either leaves the result in place of receiver and arguments (primitive
        success or compiled code) or activates an interpreter frame.
        """
        jit = self.jit
        if jit is not None:
            fn = jit.entry_for(method)
            if fn is not None:
                stack = self.stack
                if argc == 0:
                    r = fn(stack[-1], NIL, NIL)
                elif argc == 1:
                    r = fn(stack[-2], stack[-1], NIL)
                else:
                    r = fn(stack[-3], stack[-2], stack[-1])
                del stack[-1 - argc:]
                stack.append(r)
                return
        self.activate(method, argc)

    def activate(self, method: MethodObject, argc: int):
        """Interpreter activation: try the primitive, then push a frame."""
        if method.primitive:
            if self.primitives[method.primitive](self):
                return
            if self.tracing:
                self.trace.prim_failed(method.primitive)
        self.push_frame(method, argc)

    def push_frame(self, method: MethodObject, argc: int):
        depth = self.depth + 1
        if depth > self.max_depth:
            raise StackOverflow(f"depth {depth}")
        stack = self.stack
        if len(stack) + method.num_temps + 16 > self.stack_limit:
            raise StackOverflow("stack region exhausted")
        self.depth = depth
        self.frames.append(_Frame(self.method, self.code, self.pc, self.fp, 0))
        self.fp = len(stack) - argc - 1
        if method.num_temps:
            stack.extend([NIL] * method.num_temps)
        self.method = method
        self.method_oop = method.oop
        self.code = method.bytecodes
        self.pc = 0

    def commonReturn(self, value: int):
        del self.stack[self.fp:]
        self.stack.append(value)
        frame = self.frames.pop()
        self.depth -= 1
        self.method, self.code, self.pc, self.fp = frame.method, frame.code, frame.pc, frame.fp
        self.method_oop = frame.method.oop if frame.method is not None else 0
        if len(self.frames) == self._stop_frames:
            self._stop_frames = -2  # signal the dispatch loop

    def mustBeBoolean(self, value: int):
        raise MustBeBoolean(f"non-boolean {value}")

    def allocArray(self, size: int) -> int:
        try:
            return self.heap.allocate(ARRAY_ID, size)
        except MemoryError:
            raise OutOfMemory(f"array of {size}") from None

    def booleanCheat(self, flag):
        """Inline result of a predicted comparison, fused with a following jump."""
        stack = self.stack
        del stack[-2:]
        code = self.code
        pc = self.pc
        if pc < len(code):
            op = code[pc]
            if bc.JUMP_TRUE_FIRST <= op <= bc.JUMP_FALSE_LAST:
                # the fused jump is still one executed bytecode
                self.steps += 1
                if self.steps > self.fuel:
                    raise FuelExhausted(f"after {self.fuel} steps")
                self.pc = pc + 1
                jump_on = op <= bc.JUMP_TRUE_LAST
                if bool(flag) == jump_on:
                    self.pc += (op & 7) + 1
                return
        stack.append(TRUE if flag else FALSE)

    def deopt(self):  # only reachable from the compiler view
        raise AssertionError("deopt requested in interpreter view")

    # -- dispatch loop -------------------------------------------------------

    def _run_until(self, stop_frames: int):
        """Execute bytecodes until the frame count drops back to ``stop_frames``."""
        saved = self._stop_frames
        self._stop_frames = stop_frames
        handlers = self.handlers
        lengths = bc.LENGTHS
        fuel = self.fuel
        steps = self.steps
        try:
            while self._stop_frames != -2:
                code = self.code
                pc = self.pc
                op = code[pc]
                self.bytecodePC = pc
                self.currentBytecode = op
                n = lengths[op]
                if n > 1:
                    self.byte1 = code[pc + 1]
                    if n > 2:
                        self.byte2 = code[pc + 2]
                self.pc = pc + n
                steps += 1
                if steps > fuel:
                    self.steps = steps
                    raise FuelExhausted(f"after {fuel} steps")
                self.steps = steps
                handlers[op](self)
                steps = self.steps
        finally:
            self._stop_frames = saved

    def resume_frame(self, method: MethodObject, receiver: int, temps, operands, pc: int) -> int:
        """Rebuild an interpreter frame from compiled-code state and finish it.

        The caller has already counted this activation in ``depth``.
        """
        stack = self.stack
        base = len(stack)
        self.frames.append(_Frame(self.method, self.code, self.pc, self.fp, 0))
        self.fp = base
        stack.append(receiver)
        stack.extend(temps)
        stack.extend(operands)
        self.method = method
        self.method_oop = method.oop
        self.code = method.bytecodes
        self.pc = pc
        self._run_until(len(self.frames) - 1)
        result = stack.pop()
        del stack[base:]
        return result


def interpret(image: ProgramImage, fuel: int = DEFAULT_FUEL, **kw):
    """Run the entry method purely in the interpreter; returns (result, trace)."""
    vm = VM(image, fuel=fuel, **kw)
    return vm.run()
