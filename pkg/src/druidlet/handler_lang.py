"""The handler language: an annotated AST in which the VM's instructions are written.

Source files use a small s-expression syntax (``data/vm.hdl``).  The same
ASTs feed the interpreter and the meta-compiler.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from importlib import resources

from . import bytecodes as bc


class HandlerSyntaxError(Exception):
    pass


# --------------------------------------------------------------------------
# AST

@dataclass
class Const:
    value: int


@dataclass
class Var:
    name: str


@dataclass
class Call:
    name: str
    args: list


@dataclass
class Block:
    """A statement list in expression position (overflow blocks)."""
    stmts: list


@dataclass
class Let:
    name: str
    expr: object


@dataclass
class Set:
    name: str
    expr: object


@dataclass
class If:
    cond: object
    then: list
    orelse: list = field(default_factory=list)


@dataclass
class While:
    cond: object
    body: list


@dataclass
class ToDo:
    var: str
    start: object
    stop: object
    body: list


@dataclass
class Return:
    expr: object = None


@dataclass
class ExprStmt:
    expr: object


@dataclass
class Guarded:
    """``druidIgnore`` / ``interpreterIgnore`` scoped statement block."""
    kind: str
    body: list


@dataclass
class Annotations:
    numberOfArguments: int | None = None
    compilationInfo: tuple = ()
    druidInfo: tuple = ()
    needsFrameNever: int | None = None
    druidExitPoint: bool = False
    customisedReceiverFor: str | None = None


@dataclass
class HandlerDef:
    name: str
    kind: str  # bytecode | primitive | helper
    annotations: Annotations
    body: list
    params: tuple = ()
    primitive_id: int = 0
    helpers_used: tuple = ()


# --------------------------------------------------------------------------
# intrinsic catalog: name -> (arity, effect class)

PURE, STACK, MEMORY, CONTROL, GUIDING, SEND, RUNTIME = (
    "pure", "stack", "memory", "control", "guiding", "send", "runtime-call")

BINARY_OPS = {"+", "-", "*", "bitAnd:", "bitOr:", "<<", ">>",
              "=", "~=", "<", "<=", ">", ">="}
COMPARISONS = {"=", "~=", "<", "<=", ">", ">="}

INTRINSICS: dict[str, tuple[int, str]] = {
    **{op: (2, PURE) for op in BINARY_OPS},
    "not": (1, PURE),
    # guiding
    "druidStageable": (1, GUIDING),
    "druidForceInterpretation": (0, GUIDING),
    "druidExitPoint": (0, GUIDING),
    # stack
    "stackTop": (0, STACK),
    "stackValue:": (1, STACK),
    "push:": (1, STACK),
    "pop:": (1, STACK),
    "pop:thenPush:": (2, STACK),
    # bytecode stream
    "fetchByte": (0, PURE),
    "fetchNextBytecode": (0, CONTROL),
    "jump:": (1, CONTROL),
    # small integers
    "isIntegerObject:": (1, PURE),
    "sumSmallIntegerWithOverflow": (3, PURE),
    "subSmallIntegerWithOverflow": (3, PURE),
    "mulSmallIntegerWithOverflow": (3, PURE),
    # memory
    "fetchPointer:ofObject:": (2, MEMORY),
    "storePointerUnchecked:ofObject:withValue:": (3, MEMORY),
    "headerOf:": (1, MEMORY),
    "temporary:in:": (2, MEMORY),
    "temporary:in:put:": (3, MEMORY),
    "frameReceiver": (0, MEMORY),
    "framePointer": (0, PURE),
    "methodObject": (0, PURE),
    "nilObject": (0, PURE),
    "trueObject": (0, PURE),
    "falseObject": (0, PURE),
    "instantiateArrayOfSize:": (1, RUNTIME),
    "activeContextDepth": (0, RUNTIME),
    # control
    "primitiveFail": (0, CONTROL),
    "internalMustBeBoolean:": (1, CONTROL),
    "commonReturn:": (1, CONTROL),
    "booleanCheat:": (1, CONTROL),
    "normalSendSpecialSelector:argumentCount:": (2, SEND),
    "normalLiteralSelectorAt:argumentCount:": (2, SEND),
}

INTRINSIC_VARIABLES = {"currentBytecode", "bytecodePC", "primFailCode", "byte1", "byte2"}
GUARD_KINDS = {"druidIgnore", "interpreterIgnore"}
CHECKED_OPS = {"sumSmallIntegerWithOverflow", "subSmallIntegerWithOverflow",
               "mulSmallIntegerWithOverflow"}

# statement-level calls that end the current path of a bytecode handler
BYTECODE_TERMINATORS = {
    "fetchNextBytecode", "jump:", "commonReturn:", "druidForceInterpretation",
    "internalMustBeBoolean:", "booleanCheat:",
    "normalSendSpecialSelector:argumentCount:", "normalLiteralSelectorAt:argumentCount:",
}
PRIMITIVE_TERMINATORS = {"pop:thenPush:", "primitiveFail"}
# calls that stop evaluation of the handler when executed
HALTING = (BYTECODE_TERMINATORS - {"druidForceInterpretation"}) | PRIMITIVE_TERMINATORS

BRANCH_FLAGS = {"branch", "isBranchTrue", "isBranchFalse"}
COMPILATION_FLAGS = {"isMapped"} | BRANCH_FLAGS
DRUID_FLAGS = {"hasSend"}


# --------------------------------------------------------------------------
# s-expression reader

_TOKEN = re.compile(r"\s*(?:(;[^\n]*)|(\()|(\))|([^\s()]+))")


def read_sexprs(text: str) -> list:
    """Parse text into nested lists of atoms (str or int)."""
    stack: list[list] = [[]]
    pos = 0
    line = 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            break
        line += text.count("\n", pos, m.end())
        pos = m.end()
        comment, lpar, rpar, atom = m.groups()
        if comment:
            continue
        if lpar:
            stack.append([])
        elif rpar:
            if len(stack) == 1:
                raise HandlerSyntaxError(f"line {line}: unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        elif atom:
            stack[-1].append(_atom(atom))
    if len(stack) != 1:
        raise HandlerSyntaxError("unexpected end of input: missing ')'")
    return stack[0]


def _atom(tok: str):
    try:
        return int(tok, 0)
    except ValueError:
        return tok


# --------------------------------------------------------------------------
# s-expressions -> AST

def parse_expr(sx):
    if isinstance(sx, int):
        return Const(sx)
    if isinstance(sx, str):
        return Var(sx)
    if not sx:
        raise HandlerSyntaxError("empty expression")
    head, *rest = sx
    if head == "do":
        return Block(parse_stmts(rest))
    if not isinstance(head, str):
        raise HandlerSyntaxError(f"bad call head {head!r}")
    return Call(head, [parse_expr(a) for a in rest])


def parse_stmts(sxs) -> list:
    return [parse_stmt(s) for s in sxs]


def _arm(sx) -> list:
    if isinstance(sx, list) and sx and sx[0] == "do":
        return parse_stmts(sx[1:])
    raise HandlerSyntaxError(f"expected (do ...), got {sx!r}")


def parse_stmt(sx):
    if not isinstance(sx, list) or not sx:
        raise HandlerSyntaxError(f"statement expected, got {sx!r}")
    head = sx[0]
    if head == "let":
        _need(sx, 3)
        return Let(sx[1], parse_expr(sx[2]))
    if head == "set":
        _need(sx, 3)
        return Set(sx[1], parse_expr(sx[2]))
    if head == "if":
        if len(sx) not in (3, 4):
            raise HandlerSyntaxError(f"if takes 2 or 3 parts: {sx!r}")
        return If(parse_expr(sx[1]), _arm(sx[2]), _arm(sx[3]) if len(sx) == 4 else [])
    if head == "while":
        _need(sx, 3)
        return While(parse_expr(sx[1]), _arm(sx[2]))
    if head == "to:do:":
        _need(sx, 5)
        return ToDo(sx[1], parse_expr(sx[2]), parse_expr(sx[3]), _arm(sx[4]))
    if head == "return":
        return Return(parse_expr(sx[1]) if len(sx) > 1 else None)
    if head in GUARD_KINDS:
        return Guarded(head, parse_stmts(sx[1:]))
    return ExprStmt(parse_expr(sx))


def _need(sx, n):
    if len(sx) != n:
        raise HandlerSyntaxError(f"malformed {sx[0]}: {sx!r}")


def _parse_annotations(items) -> Annotations:
    ann = Annotations()
    for item in items:
        key, *vals = item
        if key == "numberOfArguments":
            ann.numberOfArguments = vals[0]
        elif key == "compilationInfo":
            ann.compilationInfo = tuple(vals)
        elif key == "druidInfo":
            ann.druidInfo = tuple(vals)
        elif key == "needsFrameNever":
            ann.needsFrameNever = vals[0]
        elif key == "druidExitPoint":
            ann.druidExitPoint = True
        elif key == "customisedReceiverFor":
            ann.customisedReceiverFor = vals[0]
        else:
            raise HandlerSyntaxError(f"unknown annotation {key}")
    return ann


def parse_definition(sx) -> HandlerDef:
    kind = sx[0]
    if kind not in ("bytecode", "primitive", "helper"):
        raise HandlerSyntaxError(f"unknown definition kind {kind}")
    name = sx[1]
    rest = sx[2:]
    prim_id = 0
    params: tuple = ()
    if kind == "primitive":
        prim_id, rest = rest[0], rest[1:]
    if kind == "helper":
        params, rest = tuple(rest[0]), rest[1:]
    ann = Annotations()
    body = None
    for part in rest:
        if part[0] == "annotations":
            ann = _parse_annotations(part[1:])
        elif part[0] == "body":
            body = parse_stmts(part[1:])
        else:
            raise HandlerSyntaxError(f"{name}: unexpected section {part[0]}")
    if body is None:
        raise HandlerSyntaxError(f"{name}: missing body")
    return HandlerDef(name, kind, ann, body, params, prim_id)


def parse_definitions(text: str) -> list[HandlerDef]:
    return [parse_definition(sx) for sx in read_sexprs(text)]


# --------------------------------------------------------------------------
# pretty printer (output parses back to the same AST)

def format_expr(e) -> str:
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Block):
        return "(do" + "".join(" " + format_stmt(s, 0).strip() for s in e.stmts) + ")"
    return "(" + " ".join([e.name] + [format_expr(a) for a in e.args]) + ")"


def _format_arm(stmts, indent) -> str:
    pad = "  " * (indent + 1)
    if not stmts:
        return "(do)"
    return "(do\n" + "\n".join(format_stmt(s, indent + 1) for s in stmts) + ")"


def format_stmt(s, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(s, Let):
        return f"{pad}(let {s.name} {format_expr(s.expr)})"
    if isinstance(s, Set):
        return f"{pad}(set {s.name} {format_expr(s.expr)})"
    if isinstance(s, If):
        out = f"{pad}(if {format_expr(s.cond)}\n{pad}  {_format_arm(s.then, indent + 1)}"
        if s.orelse:
            out += f"\n{pad}  {_format_arm(s.orelse, indent + 1)}"
        return out + ")"
    if isinstance(s, While):
        return f"{pad}(while {format_expr(s.cond)}\n{pad}  {_format_arm(s.body, indent + 1)})"
    if isinstance(s, ToDo):
        return (f"{pad}(to:do: {s.var} {format_expr(s.start)} {format_expr(s.stop)}\n"
                f"{pad}  {_format_arm(s.body, indent + 1)})")
    if isinstance(s, Return):
        return f"{pad}(return)" if s.expr is None else f"{pad}(return {format_expr(s.expr)})"
    if isinstance(s, Guarded):
        inner = "\n".join(format_stmt(x, indent + 1) for x in s.body)
        return f"{pad}({s.kind}\n{inner})"
    return pad + format_expr(s.expr)


def format_annotations(a: Annotations) -> list[str]:
    out = []
    if a.numberOfArguments is not None:
        out.append(f"(numberOfArguments {a.numberOfArguments})")
    if a.compilationInfo:
        out.append("(compilationInfo " + " ".join(a.compilationInfo) + ")")
    if a.druidInfo:
        out.append("(druidInfo " + " ".join(a.druidInfo) + ")")
    if a.needsFrameNever is not None:
        out.append(f"(needsFrameNever {a.needsFrameNever})")
    if a.druidExitPoint:
        out.append("(druidExitPoint)")
    if a.customisedReceiverFor is not None:
        out.append(f"(customisedReceiverFor {a.customisedReceiverFor})")
    return out


def format_definition(d: HandlerDef) -> str:
    head = f"({d.kind} {d.name}"
    if d.kind == "primitive":
        head += f" {d.primitive_id}"
    if d.kind == "helper":
        head += " (" + " ".join(d.params) + ")"
    lines = [head]
    anns = format_annotations(d.annotations)
    if anns:
        lines.append("  (annotations " + " ".join(anns) + ")")
    lines.append("  (body")
    lines += [format_stmt(s, 2) for s in d.body]
    lines[-1] += "))"
    return "\n".join(lines)


def format_definitions(defs) -> str:
    return "\n\n".join(format_definition(d) for d in defs) + "\n"


# --------------------------------------------------------------------------
# AST walking

def iter_calls(node):
    """Yield every Call node below ``node`` (statements, lists or exprs)."""
    if isinstance(node, list):
        for n in node:
            yield from iter_calls(n)
    elif isinstance(node, Call):
        yield node
        for a in node.args:
            yield from iter_calls(a)
    elif isinstance(node, Block):
        yield from iter_calls(node.stmts)
    elif isinstance(node, (Let, Set)):
        yield from iter_calls(node.expr)
    elif isinstance(node, If):
        yield from iter_calls(node.cond)
        yield from iter_calls(node.then)
        yield from iter_calls(node.orelse)
    elif isinstance(node, While):
        yield from iter_calls(node.cond)
        yield from iter_calls(node.body)
    elif isinstance(node, ToDo):
        yield from iter_calls(node.start)
        yield from iter_calls(node.stop)
        yield from iter_calls(node.body)
    elif isinstance(node, Return):
        if node.expr is not None:
            yield from iter_calls(node.expr)
    elif isinstance(node, ExprStmt):
        yield from iter_calls(node.expr)
    elif isinstance(node, Guarded):
        yield from iter_calls(node.body)


# --------------------------------------------------------------------------
# VM definition

@dataclass
class VMDefinition:
    handlers: dict[str, HandlerDef]         # bytecode handlers by name
    primitives: dict[int, HandlerDef]       # primitive handlers by id
    helpers: dict[str, HandlerDef]
    opcode_table: tuple = bc.OPCODES
    special_selectors: tuple = (1, 2, 3, 4, 5)

    def all_defs(self):
        yield from self.handlers.values()
        yield from self.primitives.values()
        yield from self.helpers.values()

    def handler_for_opcode(self, opcode: int) -> HandlerDef | None:
        return self.handlers.get(bc.OPCODES[opcode].handler)

    def primitive_named(self, name: str) -> HandlerDef:
        for d in self.primitives.values():
            if d.name == name:
                return d
        raise KeyError(name)


def vm_definition_from_text(text: str) -> VMDefinition:
    handlers, prims, helpers = {}, {}, {}
    for d in parse_definitions(text):
        table = {"bytecode": handlers, "helper": helpers}.get(d.kind)
        if d.kind == "primitive":
            if d.primitive_id in prims:
                raise HandlerSyntaxError(f"primitive id {d.primitive_id} defined twice")
            prims[d.primitive_id] = d
            continue
        if d.name in table:
            raise HandlerSyntaxError(f"{d.kind} {d.name} defined twice")
        table[d.name] = d
    for d in list(handlers.values()) + list(prims.values()) + list(helpers.values()):
        d.helpers_used = tuple(sorted({c.name for c in iter_calls(d.body) if c.name in helpers}))
    return VMDefinition(handlers, prims, helpers)


def vm_source() -> str:
    return resources.files("druidlet").joinpath("data/vm.hdl").read_text()


@functools.lru_cache(maxsize=1)
def builtin_vm_definition() -> VMDefinition:
    return vm_definition_from_text(vm_source())


# --------------------------------------------------------------------------
# validation

def validate_handler(d: HandlerDef, helpers: dict[str, HandlerDef]) -> list[str]:
    """Return a list of diagnostics, each prefixed by an AST path."""
    diags: list[str] = []
    ann = d.annotations
    # annotation placement
    if d.kind != "bytecode":
        if set(ann.compilationInfo) & BRANCH_FLAGS:
            diags.append(f"{d.name}: misplaced annotation compilationInfo branch flags on {d.kind}")
        if ann.druidInfo:
            diags.append(f"{d.name}: misplaced annotation druidInfo on {d.kind}")
    if d.kind != "primitive":
        if ann.numberOfArguments is not None:
            diags.append(f"{d.name}: misplaced annotation numberOfArguments on {d.kind}")
        if ann.customisedReceiverFor is not None:
            diags.append(f"{d.name}: misplaced annotation customisedReceiverFor on {d.kind}")
    for flag in ann.compilationInfo:
        if flag not in COMPILATION_FLAGS:
            diags.append(f"{d.name}: unknown compilationInfo flag {flag}")
    for flag in ann.druidInfo:
        if flag not in DRUID_FLAGS:
            diags.append(f"{d.name}: unknown druidInfo flag {flag}")
    has_exit = any(c.name == "druidExitPoint" for c in iter_calls(d.body))
    if has_exit != ann.druidExitPoint:
        diags.append(f"{d.name}: druidExitPoint annotation does not match the body")
    if d.kind == "primitive" and ann.numberOfArguments is None:
        diags.append(f"{d.name}: primitive without numberOfArguments is not compilable")

    # calls
    for path, call in _calls_with_paths(d.body, "body"):
        if call.name in INTRINSICS:
            arity = INTRINSICS[call.name][0]
        elif call.name in helpers:
            arity = len(helpers[call.name].params)
        else:
            diags.append(f"{d.name}: {path}: unknown intrinsic or helper {call.name}")
            continue
        if len(call.args) != arity:
            diags.append(f"{d.name}: {path}: {call.name} expects {arity} arguments, got {len(call.args)}")
        if call.name in CHECKED_OPS and call.args and not isinstance(call.args[-1], Block):
            diags.append(f"{d.name}: {path}: {call.name} needs an overflow (do ...) block")
        if call.name in CHECKED_OPS and len(call.args) == 3 and isinstance(call.args[-1], Block):
            if d.kind != "helper" and not _terminates(call.args[-1].stmts, _terms(d)):
                diags.append(f"{d.name}: {path}: overflow block must end the path")
    # interpreterIgnore bodies: pure expressions and stack reads only
    for path, g in _guards(d.body, "body"):
        if g.kind == "interpreterIgnore":
            for c in iter_calls(g.body):
                effect = INTRINSICS.get(c.name, (0, "helper"))[1]
                if effect not in (PURE, "helper") and c.name not in ("stackTop", "stackValue:"):
                    diags.append(f"{d.name}: {path}: {c.name} not allowed under interpreterIgnore")
    # helper recursion
    if d.kind == "helper":
        if _reaches(d.name, d.name, helpers, set()):
            diags.append(f"{d.name}: recursive helper")
    # path termination
    if d.kind in ("bytecode", "primitive"):
        for path in _open_paths(d.body, "body", _terms(d), helpers):
            diags.append(f"{d.name}: path ending at {path} has no terminator")
    return diags


def _terms(d: HandlerDef) -> set[str]:
    return BYTECODE_TERMINATORS if d.kind == "bytecode" else PRIMITIVE_TERMINATORS


def _reaches(target, name, helpers, seen) -> bool:
    if name in seen:
        return False
    seen.add(name)
    for c in iter_calls(helpers[name].body):
        if c.name == target:
            return True
        if c.name in helpers and _reaches(target, c.name, helpers, seen):
            return True
    return False


def _calls_with_paths(node, path):
    if isinstance(node, list):
        for i, n in enumerate(node):
            yield from _calls_with_paths(n, f"{path}[{i}]")
    elif isinstance(node, Call):
        yield path, node
        for i, a in enumerate(node.args):
            yield from _calls_with_paths(a, f"{path}.{node.name}[{i}]")
    elif isinstance(node, Block):
        yield from _calls_with_paths(node.stmts, path)
    elif isinstance(node, (Let, Set, ExprStmt)):
        yield from _calls_with_paths(node.expr, path)
    elif isinstance(node, If):
        yield from _calls_with_paths(node.cond, path + ".cond")
        yield from _calls_with_paths(node.then, path + ".then")
        yield from _calls_with_paths(node.orelse, path + ".else")
    elif isinstance(node, While):
        yield from _calls_with_paths(node.cond, path + ".cond")
        yield from _calls_with_paths(node.body, path + ".body")
    elif isinstance(node, ToDo):
        yield from _calls_with_paths(node.start, path + ".from")
        yield from _calls_with_paths(node.stop, path + ".to")
        yield from _calls_with_paths(node.body, path + ".body")
    elif isinstance(node, Return) and node.expr is not None:
        yield from _calls_with_paths(node.expr, path)
    elif isinstance(node, Guarded):
        yield from _calls_with_paths(node.body, f"{path}.{node.kind}")


def _guards(node, path):
    if isinstance(node, list):
        for i, n in enumerate(node):
            yield from _guards(n, f"{path}[{i}]")
    elif isinstance(node, Guarded):
        yield path, node
        yield from _guards(node.body, path + "." + node.kind)
    elif isinstance(node, If):
        yield from _guards(node.then, path + ".then")
        yield from _guards(node.orelse, path + ".else")
    elif isinstance(node, (While, ToDo)):
        yield from _guards(node.body, path + ".body")


def _stmt_terminates(s, terms, helpers=None) -> bool:
    if isinstance(s, ExprStmt) and isinstance(s.expr, Call):
        if s.expr.name in terms:
            return True
        if helpers and s.expr.name in helpers:
            return _terminates(helpers[s.expr.name].body, terms, helpers)
    if isinstance(s, Return):
        return True
    if isinstance(s, If):
        return bool(s.orelse) and _terminates(s.then, terms, helpers) and _terminates(s.orelse, terms, helpers)
    return False


def _terminates(stmts, terms, helpers=None) -> bool:
    return any(_stmt_terminates(s, terms, helpers) for s in stmts)


def _open_paths(stmts, path, terms, helpers) -> list[str]:
    """Paths through ``stmts`` that fall off the end without a terminator."""
    if _terminates(stmts, terms, helpers):
        return []
    # an if whose arms each terminate closes the path; report the innermost
    # open arm to make the diagnostic useful
    for i in range(len(stmts) - 1, -1, -1):
        s = stmts[i]
        if isinstance(s, If):
            open_arms = (_open_paths(s.then, f"{path}[{i}].then", terms, helpers)
                         + (_open_paths(s.orelse, f"{path}[{i}].else", terms, helpers)
                            if s.orelse else [f"{path}[{i}].else"]))
            if i == len(stmts) - 1:
                return open_arms
            break
    return [f"{path}[{len(stmts) - 1}]" if stmts else path]


def validate_definition(vmdef: VMDefinition) -> list[str]:
    diags = []
    for d in vmdef.all_defs():
        diags += validate_handler(d, vmdef.helpers)
    used = set()
    for d in vmdef.all_defs():
        used.update(d.helpers_used)
    for name in vmdef.helpers:
        if name not in used:
            diags.append(f"helper {name} is never called")
    for info in bc.OPCODES:
        if info.handler != bc.UNKNOWN and info.handler not in vmdef.handlers:
            diags.append(f"opcode 0x{info.opcode:02X}: no handler {info.handler}")
    return diags


# Static stack effect of each bytecode handler (None: depends on operands).
STACK_DELTAS = {
    "pushReceiverVariable": 1, "pushTemporaryVariable": 1, "pushLiteralConstant": 1,
    "pushNil": 1, "pushTrue": 1, "pushFalse": 1, "storeAndPopTemporaryVariable": -1,
    "duplicateTop": 1, "popStackTop": -1, "pushActiveDepth": 1,
    "bytecodePrimAdd": -1, "bytecodePrimSubtract": -1, "bytecodePrimMultiply": -1,
    "bytecodePrimEqual": -1, "bytecodePrimLessThan": -1,
    "shortUnconditionalJump": 0, "shortConditionalJumpTrue": -1,
    "shortConditionalJumpFalse": -1, "longUnconditionalJump": 0,
    "sendLiteralSelector": None, "returnTop": None, "returnReceiver": None,
    "pushNewArray": 1,
}
