"""Turn handler ASTs into executable Python functions.

Two views share one translator:

* ``interpreter``: ``druidIgnore`` bodies run, ``interpreterIgnore`` bodies
  are skipped, guiding intrinsics are no-ops.
* ``compiler``: the mirror image, used as the reference semantics for the
  meta-compiler's IR (forced interpretation becomes ``m.deopt()`` and an
  exit point fails the primitive).

A handler becomes ``def h(m)`` operating on a machine object exposing
``stack``, ``fp``, ``words``, ``pc``, ``bytecodePC``, ``currentBytecode``,
``byte1``/``byte2``, ``method_oop``, ``depth`` and a few methods
(``send``, ``commonReturn``, ``mustBeBoolean``, ``allocArray``,
``booleanCheat``, ``deopt``).  Primitive handlers return True on success and
False on failure.
"""

from __future__ import annotations

from . import handler_lang as hl
from .object_model import FALSE, MAX_SMALL_INT, MIN_SMALL_INT, NIL, TRUE

INTERPRETER = "interpreter"
COMPILER = "compiler"


class UntranslatableHandler(Exception):
    pass


_BINOPS = {"+": "+", "-": "-", "*": "*", "bitAnd:": "&", "bitOr:": "|",
           "<<": "<<", ">>": ">>", "=": "==", "~=": "!=", "<": "<",
           "<=": "<=", ">": ">", ">=": ">="}


def _pyname(name: str) -> str:
    return "h_" + name.replace(":", "_")


class _Translator:
    def __init__(self, vmdef: hl.VMDefinition, view: str):
        self.vmdef = vmdef
        self.view = view
        self.lines: list[str] = []
        self.tmp = 0

    def fresh(self, base="t"):
        self.tmp += 1
        return f"_{base}{self.tmp}"

    # -- definitions ------------------------------------------------------

    def definition(self, d: hl.HandlerDef) -> str:
        self.kind = d.kind
        self.fetch_count = 0
        self.locals: dict[str, str] = {}
        params = ["m"]
        for p in d.params:
            self.locals[p] = "v_" + _safe(p)
            params.append(self.locals[p])
        out = [f"def {_pyname(d.name)}({', '.join(params)}):"]
        body = self.block(d.body, 1)
        if d.kind == "primitive":
            body.append("    return False")
        out += body or ["    pass"]
        return "\n".join(out)

    def block(self, stmts, depth) -> list[str]:
        saved, self.lines = self.lines, []
        for s in stmts:
            self.stmt(s, depth)
        out, self.lines = self.lines, saved
        return out

    def emit(self, depth, text):
        self.lines.append("    " * depth + text)

    # -- statements --------------------------------------------------------

    def stmt(self, s, depth):
        if isinstance(s, hl.Let):
            name = self.locals.setdefault(s.name, "v_" + _safe(s.name))
            self.emit(depth, f"{name} = {self.expr(s.expr, depth)}")
        elif isinstance(s, hl.Set):
            self.emit(depth, f"{self.locals[s.name]} = {self.expr(s.expr, depth)}")
        elif isinstance(s, hl.If):
            self.emit(depth, f"if {self.expr(s.cond, depth)}:")
            self.lines += self.block(s.then, depth + 1) or ["    " * (depth + 1) + "pass"]
            if s.orelse:
                self.emit(depth, "else:")
                self.lines += self.block(s.orelse, depth + 1) or ["    " * (depth + 1) + "pass"]
        elif isinstance(s, hl.While):
            self.emit(depth, "while True:")
            cond = self.expr(s.cond, depth + 1)
            self.emit(depth + 1, f"if not ({cond}): break")
            self.lines += self.block(s.body, depth + 1)
        elif isinstance(s, hl.ToDo):
            name = self.locals.setdefault(s.var, "v_" + _safe(s.var))
            start = self.expr(s.start, depth)
            stop = self.expr(s.stop, depth)
            self.emit(depth, f"for {name} in range({start}, ({stop}) + 1):")
            self.lines += self.block(s.body, depth + 1) or ["    " * (depth + 1) + "pass"]
        elif isinstance(s, hl.Return):
            if s.expr is None:
                self.emit(depth, "return")
            else:
                self.emit(depth, f"return {self.expr(s.expr, depth)}")
        elif isinstance(s, hl.Guarded):
            skip = "druidIgnore" if self.view == COMPILER else "interpreterIgnore"
            if s.kind != skip:
                for x in s.body:
                    self.stmt(x, depth)
        elif isinstance(s, hl.ExprStmt):
            self.call_stmt(s.expr, depth)
        else:
            raise TypeError(s)

    def call_stmt(self, e, depth):
        if not isinstance(e, hl.Call):
            self.emit(depth, self.expr(e, depth))
            return
        a = lambda i: self.expr(e.args[i], depth)  # noqa: E731
        n = e.name
        if n == "fetchNextBytecode":
            self.emit(depth, "return")
        elif n == "jump:":
            self.emit(depth, f"m.pc += {a(0)}")
            self.emit(depth, "return")
        elif n == "push:":
            self.emit(depth, f"m.stack.append({a(0)})")
        elif n == "pop:":
            self.emit(depth, f"del m.stack[-({a(0)}):]")
        elif n == "pop:thenPush:":
            count, value = a(0), a(1)
            tmp = self.fresh()
            self.emit(depth, f"{tmp} = {value}")
            self.emit(depth, f"del m.stack[-({count}):]")
            self.emit(depth, f"m.stack.append({tmp})")
            if self.kind == "primitive":
                self.emit(depth, "return True")
        elif n == "primitiveFail":
            self.emit(depth, "return False")
        elif n == "storePointerUnchecked:ofObject:withValue:":
            self.emit(depth, f"m.words[({a(1)} >> 3) + 1 + ({a(0)})] = {a(2)}")
        elif n == "temporary:in:put:":
            self.emit(depth, f"m.stack[m.fp + 1 + ({a(0)})] = {a(2)}")
        elif n == "commonReturn:":
            self.emit(depth, f"m.commonReturn({a(0)})")
            self.emit(depth, "return")
        elif n == "internalMustBeBoolean:":
            self.emit(depth, f"m.mustBeBoolean({a(0)})")
            self.emit(depth, "return")
        elif n == "booleanCheat:":
            if self.view == COMPILER:
                raise UntranslatableHandler("booleanCheat: is interpreter-only")
            self.emit(depth, f"m.booleanCheat({a(0)})")
            self.emit(depth, "return")
        elif n == "normalSendSpecialSelector:argumentCount:":
            sel = self.vmdef.special_selectors[e.args[0].value]
            self.emit(depth, f"m.send({sel}, {a(1)}, True)")
            self.emit(depth, "return")
        elif n == "normalLiteralSelectorAt:argumentCount:":
            lit = f"m.words[(m.method_oop >> 3) + 1 + ({a(0)})] >> 1"
            self.emit(depth, f"m.send({lit}, {a(1)}, False)")
            self.emit(depth, "return")
        elif n == "druidForceInterpretation":
            if self.view == COMPILER:
                self.emit(depth, "m.deopt()")
                self.emit(depth, "return")
        elif n == "druidExitPoint":
            if self.view == COMPILER:
                self.emit(depth, "return False")
        elif n in self.vmdef.helpers:
            self.emit(depth, self.expr(e, depth))
        else:
            self.emit(depth, self.expr(e, depth))

    # -- expressions -------------------------------------------------------

    def expr(self, e, depth) -> str:
        if isinstance(e, hl.Const):
            return str(e.value)
        if isinstance(e, hl.Var):
            if e.name in self.locals:
                return self.locals[e.name]
            if e.name == "currentBytecode":
                return "m.currentBytecode"
            if e.name == "bytecodePC":
                return "m.bytecodePC"
            if e.name in ("byte1", "byte2"):
                return "m." + e.name
            if e.name == "primFailCode":
                return "0"
            raise UntranslatableHandler(f"unbound variable {e.name}")
        if isinstance(e, hl.Block):
            raise UntranslatableHandler("block in value position")
        n = e.name
        args = e.args
        if n in _BINOPS:
            return f"({self.expr(args[0], depth)} {_BINOPS[n]} {self.expr(args[1], depth)})"
        if n == "not":
            return f"(not {self.expr(args[0], depth)})"
        if n == "druidStageable":
            return self.expr(args[0], depth)
        if n == "stackTop":
            return "m.stack[-1]"
        if n == "stackValue:":
            return f"m.stack[-1 - ({self.expr(args[0], depth)})]"
        if n == "fetchByte":
            self.fetch_count += 1
            if self.fetch_count > 2:
                raise UntranslatableHandler("more than two operand bytes")
            return f"m.byte{self.fetch_count}"
        if n == "isIntegerObject:":
            return f"({self.expr(args[0], depth)} & 1)"
        if n in hl.CHECKED_OPS:
            return self.checked(n, args, depth)
        if n == "fetchPointer:ofObject:":
            return f"m.words[({self.expr(args[1], depth)} >> 3) + 1 + ({self.expr(args[0], depth)})]"
        if n == "headerOf:":
            return f"m.words[{self.expr(args[0], depth)} >> 3]"
        if n == "temporary:in:":
            return f"m.stack[m.fp + 1 + ({self.expr(args[0], depth)})]"
        if n == "frameReceiver":
            return "m.stack[m.fp]"
        if n == "framePointer":
            return "m.fp"
        if n == "methodObject":
            return "m.method_oop"
        if n == "nilObject":
            return str(NIL)
        if n == "trueObject":
            return str(TRUE)
        if n == "falseObject":
            return str(FALSE)
        if n == "instantiateArrayOfSize:":
            return f"m.allocArray({self.expr(args[0], depth)})"
        if n == "activeContextDepth":
            return "m.depth"
        if n in self.vmdef.helpers:
            params = ", ".join(["m"] + [self.expr(a, depth) for a in args])
            return f"{_pyname(n)}({params})"
        raise UntranslatableHandler(f"{n} has no value")

    def checked(self, n, args, depth) -> str:
        a = self.expr(args[0], depth)
        b = self.expr(args[1], depth)
        r = self.fresh("r")
        op = {"sumSmallIntegerWithOverflow": "+", "subSmallIntegerWithOverflow": "-",
              "mulSmallIntegerWithOverflow": "*"}[n]
        self.emit(depth, f"{r} = ({a} >> 1) {op} ({b} >> 1)")
        self.emit(depth, f"if {r} < {MIN_SMALL_INT} or {r} > {MAX_SMALL_INT}:")
        overflow = self.block(args[2].stmts, depth + 1)
        self.lines += overflow or ["    " * (depth + 1) + "pass"]
        return f"(({r} << 1) | 1)"


def _safe(name: str) -> str:
    return name.replace(":", "_")


def translate_definitions(vmdef: hl.VMDefinition, view: str = INTERPRETER):
    """Return (namespace, source) with one function per definition.

    Handlers the view cannot express are left out of the namespace.
    """
    chunks = []
    skipped = {}
    for d in vmdef.all_defs():
        t = _Translator(vmdef, view)
        try:
            chunks.append(t.definition(d))
        except UntranslatableHandler as exc:
            skipped[d.name] = str(exc)
    source = "\n\n".join(chunks) + "\n"
    namespace: dict = {}
    exec(compile(source, f"<handlers:{view}>", "exec"), namespace)
    namespace["__skipped__"] = skipped
    return namespace, source


def handler_function(namespace, name):
    return namespace[_pyname(name)]
