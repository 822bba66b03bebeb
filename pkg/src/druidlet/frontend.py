"""Meta-interpreter: abstractly run a handler definition and build SSA IR.

Helpers are inlined at every call site, ``druidIgnore`` blocks are dropped,
``interpreterIgnore`` blocks are kept, and every intrinsic is rewritten by a
fixed rule.  Bytecode handlers are specialised per opcode: ``currentBytecode``
becomes a constant and operand bytes become parameters.
"""

from __future__ import annotations

from . import bytecodes as bc
from . import handler_lang as hl
from .ir import DruidIR, check_ssa
from .object_model import SMALL_INTEGER_ID

MAX_INLINE_DEPTH = 16
MAX_SEND_ARGS = 15

_CMP = {"=": "eq", "~=": "ne", "<": "lt", "<=": "le", ">": "gt", ">=": "ge"}
_ARITH = {"+": "add", "-": "sub", "*": "mul", "bitAnd:": "bitAnd", "bitOr:": "bitOr",
          "<<": "shiftLeft", ">>": "shiftRight"}
_CHECKED = {"sumSmallIntegerWithOverflow": "checkedAdd",
            "subSmallIntegerWithOverflow": "checkedSub",
            "mulSmallIntegerWithOverflow": "checkedMul"}
_SPECIALS = {"nilObject": "nil", "trueObject": "true", "falseObject": "false"}
_CLASS_IDS = {"SmallInteger": SMALL_INTEGER_ID}


class TranslationError(Exception):
    """The handler cannot be meta-compiled; its entry falls back to the interpreter."""


class UnsupportedIntrinsic(TranslationError):
    pass


class InliningDepthExceeded(TranslationError):
    pass


class _HelperReturn:
    def __init__(self):
        self.incoming: list = []   # (block, value)


class _Builder:
    def __init__(self, vmdef: hl.VMDefinition, d: hl.HandlerDef, ir: DruidIR):
        self.vmdef = vmdef
        self.d = d
        self.ir = ir
        self.kind = d.kind
        self.cur = ir.new_block()
        self.fetches = 0
        self.inline_depth = 0
        self.returns: list[_HelperReturn] = []
        self.params: dict = {}
        self.customised = d.annotations.customisedReceiverFor is not None

    # -- small utilities ---------------------------------------------------

    def const(self, v: int):
        return self.ir.const(self.cur, v)

    def op(self, opname, *args, **attrs):
        return self.ir.add(self.cur, opname, args, **attrs)

    def param(self, name: str):
        """Parameters live in the entry block so they dominate every use."""
        p = self.params.get(name)
        if p is None:
            entry = self.ir.entry
            p = self.ir.add(entry, "param", (), name=name)
            # keep parameters ahead of anything else in the entry block
            entry.instrs.remove(p)
            entry.instrs.insert(len(self.params), p)
            self.params[name] = p
        return p

    def close(self, opname, args=(), targets=(), **attrs):
        ins = self.ir.terminate(self.cur, opname, args, targets, **attrs)
        self.cur = None
        return ins

    # -- statements --------------------------------------------------------

    def stmts(self, stmts, env):
        for s in stmts:
            if self.cur is None:
                return
            self.stmt(s, env)

    def stmt(self, s, env):
        if isinstance(s, hl.Let):
            env[s.name] = self.expr(s.expr, env)
        elif isinstance(s, hl.Set):
            if s.name not in env:
                raise TranslationError(f"set of unbound variable {s.name}")
            env[s.name] = self.expr(s.expr, env)
        elif isinstance(s, hl.If):
            self.if_stmt(s, env)
        elif isinstance(s, hl.While):
            self.loop(s.cond, s.body, env, None)
        elif isinstance(s, hl.ToDo):
            env[s.var] = self.expr(s.start, env)
            stop = self.expr(s.stop, env)
            cond = hl.Call("<=", [hl.Var(s.var), hl.Var("$stop")])
            env["$stop"] = stop
            self.loop(cond, s.body, env, s.var)
            env.pop("$stop", None)
        elif isinstance(s, hl.Return):
            if not self.returns:
                raise TranslationError("return outside a helper")
            value = self.expr(s.expr, env) if s.expr is not None else self.const(0)
            if self.cur is not None:
                self.returns[-1].incoming.append((self.cur, value))
                self.close("jump")   # target patched by the inliner
        elif isinstance(s, hl.Guarded):
            if s.kind == "interpreterIgnore":
                self.stmts(s.body, env)
        elif isinstance(s, hl.ExprStmt):
            self.call_stmt(s.expr, env)
        else:
            raise TranslationError(f"unknown statement {s!r}")

    def if_stmt(self, s: hl.If, env):
        then_b = self.ir.new_block()
        else_b = self.ir.new_block()
        self.branch_on(s.cond, env, then_b, else_b)
        arms = []
        for block, body in ((then_b, s.then), (else_b, s.orelse)):
            self.cur = block
            arm_env = dict(env)
            self.stmts(body, arm_env)
            if self.cur is not None:
                arms.append((self.cur, arm_env))
        if not arms:
            self.cur = None
            return
        self.merge(arms, env)

    def merge(self, arms, env):
        """Join open arm ends; every divergent binding gets a phi."""
        if len(arms) == 1:
            block, arm_env = arms[0]
            join = self.ir.new_block()
            self.ir.terminate(block, "jump", (), (join,))
            self.cur = join
            for k in list(env):
                env[k] = arm_env[k]
            return
        join = self.ir.new_block()
        for block, _ in arms:
            self.ir.terminate(block, "jump", (), (join,))
        self.cur = join
        for k in list(env):
            values = [arm_env[k] for _, arm_env in arms]
            if all(v is values[0] for v in values):
                env[k] = values[0]
            else:
                env[k] = self.ir.add(join, "phi", values)

    def loop(self, cond, body, env, counter):
        ir = self.ir
        header = ir.new_block()
        ir.terminate(self.cur, "jump", (), (header,))
        names = list(env)
        phis = {k: ir.add(header, "phi", ()) for k in names}
        entry_env = dict(env)
        for k in names:
            env[k] = phis[k]
        self.cur = header
        body_b = ir.new_block()
        exit_b = ir.new_block()
        self.branch_on(cond, env, body_b, exit_b)
        exit_env = dict(env)
        self.cur = body_b
        body_env = dict(env)
        self.stmts(body, body_env)
        latches = []
        if self.cur is not None:
            if counter is not None:
                body_env[counter] = self.op("add", body_env[counter], self.const(1))
            latches.append((self.cur, body_env))
            ir.terminate(self.cur, "jump", (), (header,))
        # header preds: the preheader first, then latches in order of creation
        for k in names:
            args = []
            for p in header.preds:
                match = [e for b, e in latches if b is p]
                args.append(match[0][k] if match else entry_env[k])
            ir.set_args(phis[k], args)
        self.cur = exit_b
        for k in names:
            env[k] = exit_env[k]

    # -- conditions ---------------------------------------------------------

    def branch_on(self, cond, env, t, f):
        """Emit a conditional terminator for ``cond`` into ``t``/``f``."""
        if isinstance(cond, hl.Call) and cond.name == "not":
            return self.branch_on(cond.args[0], env, f, t)
        if isinstance(cond, hl.Call) and cond.name in _CMP:
            a = self.expr(cond.args[0], env)
            b = self.expr(cond.args[1], env)
            self.close("branch", (a, b), (t, f), cond=_CMP[cond.name])
            return
        v = self.expr(cond, env)
        self.close("branch", (v, self.const(0)), (t, f), cond="ne")

    # -- control intrinsics ---------------------------------------------------

    def call_stmt(self, e, env):
        if not isinstance(e, hl.Call):
            self.expr(e, env)
            return
        n = e.name
        bytecode = self.kind != "primitive"
        if n == "fetchNextBytecode":
            self.close("next")
        elif n == "jump:":
            off = self.expr(e.args[0], env)
            length = self.const(self.length)
            target = self.op("add", self.param("bytecodePC"), self.op("add", length, off))
            self.close("bcJump", (target,))
        elif n == "push:":
            self.op("stackPush", self.expr(e.args[0], env))
        elif n == "pop:":
            count = self.expr(e.args[0], env)
            if not count.is_const:
                raise TranslationError("pop: needs a constant count")
            self.op("stackPop", n=count.value)
        elif n == "pop:thenPush:":
            count = self.expr(e.args[0], env)
            value = self.expr(e.args[1], env)
            if bytecode:
                raise TranslationError("pop:thenPush: in a bytecode handler")
            nargs = self.d.annotations.numberOfArguments
            if not count.is_const or count.value != nargs + 1:
                raise TranslationError("pop:thenPush: must pop the receiver and all arguments")
            self.close("primReturn", (value,))
        elif n == "primitiveFail":
            self.close("primFail")
        elif n == "storePointerUnchecked:ofObject:withValue:":
            idx = self.expr(e.args[0], env)
            obj = self.expr(e.args[1], env)
            val = self.expr(e.args[2], env)
            self.op("storeSlot", obj, self.slot_offset(idx), val)
        elif n == "temporary:in:put:":
            idx = self.expr(e.args[0], env)
            val = self.expr(e.args[2], env)
            self.op("storeTemp", idx, val)
        elif n == "commonReturn:":
            self.close("ret", (self.expr(e.args[0], env),))
        elif n == "internalMustBeBoolean:":
            self.close("mustBeBoolean", (self.expr(e.args[0], env),))
        elif n == "booleanCheat:":
            raise UnsupportedIntrinsic("booleanCheat: is interpreter-only")
        elif n == "normalSendSpecialSelector:argumentCount:":
            idx = e.args[0]
            if not isinstance(idx, hl.Const):
                raise TranslationError("special selector index must be literal")
            argc = self.expr(e.args[1], env)
            self.send(self.const(self.vmdef.special_selectors[idx.value]), argc, True)
        elif n == "normalLiteralSelectorAt:argumentCount:":
            li = self.expr(e.args[0], env)
            argc = self.expr(e.args[1], env)
            lit = self.op("loadSlot", self.param("method"), self.slot_offset(li), stageable=True)
            sel = self.op("shiftRight", lit, self.const(1))
            self.send(sel, argc, False)
        elif n in ("druidForceInterpretation", "druidExitPoint"):
            self.close("deopt" if bytecode else "primFail")
        elif n in self.vmdef.helpers:
            self.inline(n, e.args, env)
        else:
            self.expr(e, env)

    def send(self, sel, argc, special):
        if argc.is_const and not 0 <= argc.value <= MAX_SEND_ARGS:
            raise TranslationError(f"send with {argc.value} arguments")
        self.ir.meta["hasSend"] = True
        self.close("send", (sel, argc), special=special)

    def slot_offset(self, idx):
        return self.op("add", self.op("shiftLeft", idx, self.const(3)), self.const(8))

    # -- expressions --------------------------------------------------------

    def expr(self, e, env):
        if isinstance(e, hl.Const):
            return self.const(e.value)
        if isinstance(e, hl.Var):
            return self.variable(e.name, env)
        if not isinstance(e, hl.Call):
            raise TranslationError(f"cannot evaluate {e!r}")
        n, args = e.name, e.args
        if n in _ARITH:
            return self.op(_ARITH[n], self.expr(args[0], env), self.expr(args[1], env))
        if n in _CMP:
            return self.op("compare", self.expr(args[0], env), self.expr(args[1], env), cond=_CMP[n])
        if n == "not":
            return self.op("compare", self.expr(args[0], env), self.const(0), cond="eq")
        if n == "druidStageable":
            v = self.expr(args[0], env)
            if v.op == "loadSlot":
                v.attrs["stageable"] = True
            elif v.op not in ("special", "const"):
                raise TranslationError("druidStageable only applies to literal or special reads")
            return v
        if n == "stackTop":
            return self.stack_value(0)
        if n == "stackValue:":
            k = self.expr(args[0], env)
            if not k.is_const:
                raise TranslationError("stack depth must be static")
            return self.stack_value(k.value)
        if n == "fetchByte":
            self.fetches += 1
            if self.fetches > 2:
                raise TranslationError("more than two operand bytes")
            return self.param(f"byte{self.fetches}")
        if n == "isIntegerObject:":
            v = self.expr(args[0], env)
            if self.customised and v is self.params.get("receiver"):
                return self.const(1)
            return self.op("bitAnd", v, self.const(1))
        if n in _CHECKED:
            return self.checked(n, args, env)
        if n == "fetchPointer:ofObject:":
            idx = self.expr(args[0], env)
            obj = self.expr(args[1], env)
            return self.op("loadSlot", obj, self.slot_offset(idx))
        if n == "headerOf:":
            return self.op("loadSlot", self.expr(args[0], env), self.const(0))
        if n == "temporary:in:":
            idx = self.expr(args[0], env)
            return self.op("loadTemp", idx)
        if n == "frameReceiver":
            if self.kind == "primitive":
                return self.param("receiver")
            return self.op("receiver")
        if n == "framePointer":
            return self.const(0)   # only meaningful as the frame argument of temporary:in:
        if n == "methodObject":
            return self.param("method")
        if n in _SPECIALS:
            return self.op("special", name=_SPECIALS[n])
        if n == "instantiateArrayOfSize:":
            return self.op("runtimeCall", self.expr(args[0], env), fn="allocArray")
        if n == "activeContextDepth":
            raise UnsupportedIntrinsic("activeContextDepth has no compiled translation")
        if n in self.vmdef.helpers:
            return self.inline(n, args, env)
        if n in hl.INTRINSICS:
            raise TranslationError(f"{n} used as a value")
        raise UnsupportedIntrinsic(f"unknown intrinsic {n}")

    def variable(self, name, env):
        if name in env:
            return env[name]
        if name == "currentBytecode":
            if self.kind == "primitive":
                raise TranslationError("currentBytecode in a primitive")
            return self.const(self.opcode)
        if name == "bytecodePC":
            return self.param("bytecodePC")
        if name in ("byte1", "byte2"):
            return self.param(name)
        if name == "primFailCode":
            return self.const(0)
        raise TranslationError(f"unbound variable {name}")

    def stack_value(self, k: int):
        if self.kind != "primitive":
            return self.op("stackRead", depth=k)
        nargs = self.d.annotations.numberOfArguments
        if k < nargs:
            return self.param(f"arg{nargs - 1 - k}")
        if k == nargs:
            return self.param("receiver")
        raise TranslationError(f"stackValue: {k} outside {nargs} arguments and receiver")

    def checked(self, n, args, env):
        a = self.expr(args[0], env)
        b = self.expr(args[1], env)
        if not isinstance(args[2], hl.Block):
            raise TranslationError("overflow handler must be a block")
        untagged_b = self.op("add", b, self.const(-1))
        if n == "mulSmallIntegerWithOverflow":
            a = self.op("shiftRight", a, self.const(1))
        ok = self.ir.new_block()
        ovf = self.ir.new_block()
        result = self.close(_CHECKED[n], (a, untagged_b), (ok, ovf))
        self.cur = ovf
        self.stmts(args[2].stmts, dict(env))
        if self.cur is not None:
            raise TranslationError("overflow block must not fall through")
        self.cur = ok
        if n == "mulSmallIntegerWithOverflow":
            return self.op("add", result, self.const(1))
        return result

    def inline(self, name, args, env):
        helper = self.vmdef.helpers[name]
        if self.inline_depth >= MAX_INLINE_DEPTH:
            raise InliningDepthExceeded(name)
        if len(args) != len(helper.params):
            raise TranslationError(f"{name} expects {len(helper.params)} arguments")
        values = [self.expr(a, env) for a in args]
        callee_env = dict(zip(helper.params, values))
        ret = _HelperReturn()
        self.returns.append(ret)
        self.inline_depth += 1
        try:
            self.stmts(helper.body, callee_env)
        finally:
            self.inline_depth -= 1
            self.returns.pop()
        if self.cur is not None:
            # fell off the end: an implicit return of 0
            ret.incoming.append((self.cur, self.const(0)))
            self.close("jump")
        if not ret.incoming:
            self.cur = None
            return None
        cont = self.ir.new_block()
        for block, _ in ret.incoming:
            block.term.targets = [cont]
            cont.preds.append(block)
        self.cur = cont
        vals = [v for _, v in ret.incoming]
        if all(v is vals[0] for v in vals):
            return vals[0]
        return self.ir.add(cont, "phi", vals)


def _finish(ir: DruidIR) -> DruidIR:
    ir.compact()
    errs = check_ssa(ir)
    if errs:
        raise TranslationError("malformed IR: " + "; ".join(errs[:5]))
    return ir


def translate_handler(d: hl.HandlerDef, opcode: int,
                      vmdef: hl.VMDefinition | None = None) -> DruidIR:
    """IR for one opcode-table entry of bytecode handler ``d``."""
    vmdef = vmdef or hl.builtin_vm_definition()
    if d.kind != "bytecode":
        raise TranslationError(f"{d.name} is not a bytecode handler")
    info = bc.OPCODES[opcode]
    ir = DruidIR(f"{d.name}@{opcode:#04x}", "bytecode")
    ir.meta["opcode"] = opcode
    b = _Builder(vmdef, d, ir)
    b.opcode = opcode
    b.length = info.length
    b.stmts(d.body, {})
    if b.cur is not None:
        raise TranslationError(f"{d.name} falls off its end")
    return _finish(ir)


def translate_primitive(d: hl.HandlerDef, receiver_class: int | None = None,
                        vmdef: hl.VMDefinition | None = None) -> DruidIR:
    """IR for a primitive under the register calling convention.

    With ``customisedReceiverFor`` the receiver tag test folds away and the
    class becomes a compile-time guard stored in ``ir.meta['guardClass']``;
    ``receiver_class`` that does not match raises :class:`TranslationError`.
    """
    vmdef = vmdef or hl.builtin_vm_definition()
    if d.kind != "primitive":
        raise TranslationError(f"{d.name} is not a primitive")
    nargs = d.annotations.numberOfArguments
    if nargs is None:
        raise TranslationError(f"{d.name} lacks numberOfArguments")
    ir = DruidIR(d.name, "primitive")
    ir.meta["numArgs"] = nargs
    ir.meta["primitive"] = d.primitive_id
    custom = d.annotations.customisedReceiverFor
    if custom is not None:
        guard = _CLASS_IDS.get(custom)
        if guard is None:
            raise TranslationError(f"unknown customised class {custom}")
        if receiver_class is not None and receiver_class != guard:
            raise TranslationError(f"{d.name} is customised for {custom}")
        ir.meta["guardClass"] = guard
    b = _Builder(vmdef, d, ir)
    b.opcode = None
    b.length = 0
    b.param("receiver")
    for i in range(nargs):
        b.param(f"arg{i}")
    b.stmts(d.body, {})
    if b.cur is not None:
        b.close("primFail")
    return _finish(ir)


def translate_all(vmdef: hl.VMDefinition | None = None):
    """Translate every opcode entry and primitive.

    Returns (bytecode_irs by opcode, primitive_irs by id, failures by name).
    """
    vmdef = vmdef or hl.builtin_vm_definition()
    irs, prims, failures = {}, {}, {}
    for info in bc.OPCODES:
        d = vmdef.handlers.get(info.handler)
        if d is None:
            continue
        try:
            irs[info.opcode] = translate_handler(d, info.opcode, vmdef)
        except TranslationError as exc:
            failures[f"{d.name}@{info.opcode:#04x}"] = f"{type(exc).__name__}: {exc}"
    for pid, d in vmdef.primitives.items():
        try:
            prims[pid] = translate_primitive(d, None, vmdef)
        except TranslationError as exc:
            failures[d.name] = f"{type(exc).__name__}: {exc}"
    return irs, prims, failures
