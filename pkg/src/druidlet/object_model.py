"""Tagged values, the bump-allocated heap and the method-assembly loader.

Words are kept as *signed* 64-bit Python ints throughout the VM, so
``tag_small_int(-1) == -1``; ``to_unsigned`` gives the raw machine word.
Small integers carry tag bit 1, heap references are 8-byte aligned byte
offsets into the heap.
"""

from __future__ import annotations

import re
from array import array
from dataclasses import dataclass, field
from importlib import resources

from . import bytecodes as bc

WORD_BITS = 64
MASK64 = (1 << 64) - 1
MIN_WORD = -(1 << 63)
MAX_WORD = (1 << 63) - 1
MIN_SMALL_INT = -(1 << 62)
MAX_SMALL_INT = (1 << 62) - 1

HEADER_BYTES = 8
DEFAULT_HEAP_BYTES = 64 * 1024 * 1024

NIL, FALSE, TRUE = 0, 16, 32

SMALL_INTEGER_ID = 0
UNDEFINED_OBJECT_ID = 1
TRUE_ID = 2
FALSE_ID = 3
ARRAY_ID = 4
COMPILED_METHOD_ID = 5

BUILTIN_CLASSES = {
    "SmallInteger": SMALL_INTEGER_ID,
    "UndefinedObject": UNDEFINED_OBJECT_ID,
    "True": TRUE_ID,
    "False": FALSE_ID,
    "Array": ARRAY_ID,
    "CompiledMethod": COMPILED_METHOD_ID,
}

# Literal frames hold the literals starting at slot LITERAL_START.
LITERAL_START = 0

# Kernel selectors: ids are fixed because special-send bytecodes name them.
KERNEL_SELECTORS = {
    "+": 1, "-": 2, "*": 3, "=": 4, "<": 5,
    "at:": 6, "at:put:": 7, "size": 8, "newArray:": 9,
}
# index used by normalSendSpecialSelector:argumentCount: -> selector id
SPECIAL_SELECTORS = (1, 2, 3, 4, 5)


class RangeError(ValueError):
    """Integer outside the small-integer payload range."""


class VmBug(Exception):
    """An internal invariant was violated (bad heap access, unmapped pc...)."""


class LoadError(Exception):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{line}:{column}: {message}" if line else message)
        self.line = line
        self.column = column


def to_unsigned(word: int) -> int:
    return word & MASK64


def to_signed(word: int) -> int:
    word &= MASK64
    return word - (1 << 64) if word >> 63 else word


def wrap(n: int) -> int:
    """Two's-complement wrap of an arbitrary int into a signed word."""
    n &= MASK64
    return n - (1 << 64) if n >> 63 else n


def tag_small_int(n: int) -> int:
    if not MIN_SMALL_INT <= n <= MAX_SMALL_INT:
        raise RangeError(f"{n} does not fit a small integer")
    return (n << 1) | 1


def untag(word: int) -> int:
    return word >> 1


def is_integer_object(word: int) -> bool:
    return bool(word & 1)


def header_word(class_id: int, num_slots: int) -> int:
    return class_id | (num_slots << 32)


class Heap:
    """Word-addressed view of the object memory.

    References are byte offsets; ``words[ref >> 3]`` is the header and slot
    ``i`` lives at byte offset ``ref + 8 + 8*i``.
    """

    def __init__(self, limit_bytes: int = DEFAULT_HEAP_BYTES):
        self.limit_words = limit_bytes // 8
        self.words: list[int] = []
        for class_id in (UNDEFINED_OBJECT_ID, FALSE_ID, TRUE_ID):
            self.words += [header_word(class_id, 0), 0]

    def copy(self) -> Heap:
        other = Heap.__new__(Heap)
        other.limit_words = self.limit_words
        other.words = list(self.words)
        return other

    @property
    def size_bytes(self) -> int:
        return len(self.words) * 8

    def allocate(self, class_id: int, num_slots: int, fill: int = NIL) -> int:
        ref = len(self.words) * 8
        if len(self.words) + 1 + num_slots > self.limit_words:
            raise MemoryError("heap exhausted")
        self.words.append(header_word(class_id, num_slots))
        self.words.extend([fill] * num_slots)
        return ref

    def _check(self, index: int, obj: int) -> int:
        if obj & 1 or obj & 7 or obj >> 3 >= len(self.words):
            raise VmBug(f"not a heap reference: {obj}")
        n = self.words[obj >> 3] >> 32
        if not 0 <= index < n:
            raise VmBug(f"slot {index} out of bounds for object of {n} slots")
        return (obj >> 3) + 1 + index

    def fetch_pointer(self, index: int, obj: int) -> int:
        return self.words[self._check(index, obj)]

    def store_pointer_unchecked(self, index: int, obj: int, value: int) -> None:
        self.words[self._check(index, obj)] = value

    def class_id_of(self, word: int) -> int:
        if word & 1:
            return SMALL_INTEGER_ID
        return self.words[word >> 3] & 0xFFFFFFFF

    def num_slots(self, obj: int) -> int:
        return self.words[obj >> 3] >> 32

    def to_bytes(self) -> bytes:
        return array("Q", (w & MASK64 for w in self.words)).tobytes()


@dataclass
class MethodObject:
    selector: str
    selector_id: int
    class_id: int
    num_args: int
    num_temps: int
    primitive: int
    literals: list[int]
    bytecodes: bytes
    oop: int = 0  # literal frame in the heap

    @property
    def frame_size(self) -> int:
        """Number of temporaries, arguments included."""
        return self.num_args + self.num_temps

    def __repr__(self) -> str:
        return f"<method {self.selector} of class {self.class_id}>"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:
        return self is other


@dataclass
class ClassInfo:
    name: str
    class_id: int
    slots: int = 0
    methods: dict[int, MethodObject] = field(default_factory=dict)


@dataclass
class ProgramImage:
    heap: Heap
    classes: dict[int, ClassInfo]
    selectors: dict[str, int]
    entry: tuple[int, int] | None
    entry_receiver: int = NIL
    entry_args: tuple[int, ...] = ()
    specials: tuple[int, int, int] = (NIL, TRUE, FALSE)

    def lookup(self, class_id: int, selector_id: int) -> MethodObject | None:
        info = self.classes.get(class_id)
        return info.methods.get(selector_id) if info else None

    def selector_name(self, selector_id: int) -> str:
        for name, sid in self.selectors.items():
            if sid == selector_id:
                return name
        return f"#{selector_id}"

    def class_name(self, class_id: int) -> str:
        info = self.classes.get(class_id)
        return info.name if info else f"class{class_id}"

    def entry_method(self) -> MethodObject:
        if self.entry is None:
            raise LoadError("program has no .entry")
        method = self.lookup(*self.entry)
        if method is None:
            raise LoadError("entry method is not defined")
        return method

    def methods(self):
        for cid in sorted(self.classes):
            info = self.classes[cid]
            for sid in sorted(info.methods):
                yield info.methods[sid]


# --------------------------------------------------------------------------
# method-assembly loader

_ATTR = re.compile(r"^(\w+)=(-?\d+)$")


def kernel_source() -> str:
    return resources.files("druidlet").joinpath("data/kernel.dasm").read_text()


@dataclass
class _PendingMethod:
    selector: str
    selector_id: int
    class_id: int
    num_args: int
    num_temps: int
    primitive: int
    line: int
    literals: list = field(default_factory=list)      # (kind, value, line, col)
    code: list = field(default_factory=list)          # (mnemonic, args, line, col)


def _parse_int(tok: str, line: int, col: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise LoadError(f"expected integer, got {tok!r}", line, col) from None


def _tokens(text: str):
    """Yield (line, [(col, token)]) for every non-empty line."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split(";", 1)[0]
        toks = [(m.start() + 1, m.group()) for m in re.finditer(r"\S+", body)]
        if toks:
            yield lineno, toks


def load_program(text: str, heap_bytes: int = DEFAULT_HEAP_BYTES,
                 with_kernel: bool = True) -> ProgramImage:
    """Assemble program text (prefixed by the kernel library) into an image."""
    classes: dict[int, ClassInfo] = {
        cid: ClassInfo(name, cid) for name, cid in BUILTIN_CLASSES.items()}
    names = {name: cid for name, cid in BUILTIN_CLASSES.items()}
    selectors = dict(KERNEL_SELECTORS)
    pending: list[_PendingMethod] = []
    entry_decl = None

    sources = ([kernel_source()] if with_kernel else []) + [text]
    for source_index, source in enumerate(sources):
        current_class: ClassInfo | None = None
        method: _PendingMethod | None = None
        seen: dict[tuple[int, int], int] = {}
        for line, toks in _tokens(source):
            # errors in user text report user line numbers
            head_col, head = toks[0]
            if head == ".class":
                if len(toks) < 3:
                    raise LoadError(".class needs a name and id=", line, head_col)
                name = toks[1][1]
                attrs = _attrs(toks[2:], line)
                if "id" not in attrs:
                    raise LoadError(".class needs id=", line, head_col)
                cid = attrs["id"]
                if name in names and names[name] != cid:
                    raise LoadError(f"class {name} already has id {names[name]}", line, toks[1][0])
                if cid in classes and classes[cid].name != name:
                    raise LoadError(f"class id {cid} already used by {classes[cid].name}", line, toks[2][0])
                info = classes.setdefault(cid, ClassInfo(name, cid))
                info.slots = attrs.get("slots", info.slots)
                names[name] = cid
                current_class = info
                method = None
            elif head == ".method":
                if current_class is None:
                    raise LoadError(".method outside a class", line, head_col)
                if len(toks) < 2:
                    raise LoadError(".method needs a selector", line, head_col)
                sel_name = toks[1][1]
                attrs = _attrs(toks[2:], line)
                sid = attrs.get("sel", selectors.get(sel_name))
                if sid is None:
                    raise LoadError(f"selector {sel_name} needs sel=", line, toks[1][0])
                if not 0 <= sid <= 0xFFFF:
                    raise LoadError("sel= must be a u16", line, toks[1][0])
                known = selectors.get(sel_name)
                if known is not None and known != sid:
                    raise LoadError(f"selector {sel_name} already has id {known}", line, toks[1][0])
                for other, osid in selectors.items():
                    if osid == sid and other != sel_name:
                        raise LoadError(f"selector id {sid} already names {other}", line, toks[1][0])
                selectors[sel_name] = sid
                key = (current_class.class_id, sid)
                if key in seen or any(p.class_id == key[0] and p.selector_id == sid for p in pending):
                    raise LoadError(f"duplicate selector {sel_name} in class {current_class.name}",
                                    line, toks[1][0])
                seen[key] = line
                method = _PendingMethod(sel_name, sid, current_class.class_id,
                                        attrs.get("args", 0), attrs.get("temps", 0),
                                        attrs.get("prim", 0), line)
                pending.append(method)
            elif head == ".lit":
                if method is None:
                    raise LoadError(".lit outside a method", line, head_col)
                if len(toks) != 2:
                    raise LoadError(".lit takes one literal", line, head_col)
                method.literals.append((toks[1][1], line, toks[1][0]))
            elif head == ".entry":
                if len(toks) < 3:
                    raise LoadError(".entry needs a class and a selector", line, head_col)
                entry_decl = (toks[1], toks[2], toks[3:], line)
            elif head.startswith("."):
                raise LoadError(f"unknown directive {head}", line, head_col)
            else:
                if method is None:
                    raise LoadError("instruction outside a method", line, head_col)
                method.code.append((head, [t for _, t in toks[1:]], line, head_col))

    heap = Heap(heap_bytes)
    for p in pending:
        literals = [_literal(tok, selectors, ln, col) for tok, ln, col in p.literals]
        code = _assemble(p, literals, selectors)
        m = MethodObject(p.selector, p.selector_id, p.class_id, p.num_args,
                         p.num_temps, p.primitive, literals, code)
        _check_method(m, p.line)
        m.oop = heap.allocate(COMPILED_METHOD_ID, len(literals))
        for i, lit in enumerate(literals):
            heap.store_pointer_unchecked(LITERAL_START + i, m.oop, lit)
        classes[p.class_id].methods[p.selector_id] = m

    entry = None
    receiver = NIL
    args: tuple[int, ...] = ()
    if entry_decl is not None:
        (ccol, cname), (scol, sname), arg_toks, line = entry_decl
        if cname not in names:
            raise LoadError(f"undefined class {cname}", line, ccol)
        if sname not in selectors:
            raise LoadError(f"undefined selector {sname}", line, scol)
        cid, sid = names[cname], selectors[sname]
        target = classes[cid].methods.get(sid)
        if target is None:
            raise LoadError(f"{cname} does not define {sname}", line, scol)
        args = tuple(_literal(t, selectors, line, c) for c, t in arg_toks)
        if len(args) != target.num_args:
            raise LoadError(f"entry {sname} takes {target.num_args} arguments", line, scol)
        entry = (cid, sid)
        receiver = _default_instance(heap, classes[cid])
    return ProgramImage(heap, classes, selectors, entry, receiver, args)


def _attrs(toks, line: int) -> dict[str, int]:
    out = {}
    for col, tok in toks:
        m = _ATTR.match(tok)
        if not m:
            raise LoadError(f"bad attribute {tok!r}", line, col)
        out[m.group(1)] = int(m.group(2))
    return out


def _default_instance(heap: Heap, info: ClassInfo) -> int:
    if info.class_id == SMALL_INTEGER_ID:
        return tag_small_int(0)
    if info.class_id == UNDEFINED_OBJECT_ID:
        return NIL
    if info.class_id == TRUE_ID:
        return TRUE
    if info.class_id == FALSE_ID:
        return FALSE
    return heap.allocate(info.class_id, info.slots)


def _literal(tok: str, selectors: dict[str, int], line: int, col: int) -> int:
    if tok == "nil":
        return NIL
    if tok == "true":
        return TRUE
    if tok == "false":
        return FALSE
    if tok.startswith("#"):
        name = tok[1:]
        if name.isdigit():
            return tag_small_int(int(name))
        if name not in selectors:
            raise LoadError(f"undefined selector {name}", line, col)
        return tag_small_int(selectors[name])
    try:
        return tag_small_int(_parse_int(tok, line, col))
    except RangeError as exc:
        raise LoadError(str(exc), line, col) from None


def _assemble(p: _PendingMethod, literals: list[int], selectors: dict[str, int]) -> bytes:
    """Two-pass assembly with labels (``@name:``) and a little sugar.

    Sugar: ``pushInt n`` / ``send #sel argc`` intern literals; ``jump``,
    ``jumpTrue`` and ``jumpFalse`` accept ``@label`` targets.
    """
    items = []  # (kind, data, line, col)
    for mnem, args, line, col in p.code:
        if mnem.startswith("@") and mnem.endswith(":"):
            items.append(("label", mnem[1:-1], line, col))
            continue
        if mnem == "pushInt":
            value = _literal(args[0] if args else "", selectors, line, col)
            items.append(("insn", ("pushLiteral", [str(_intern(literals, value))]), line, col))
        elif mnem == "send" and args and args[0].startswith("#"):
            value = _literal(args[0], selectors, line, col)
            items.append(("insn", ("send", [str(_intern(literals, value))] + args[1:]), line, col))
        elif mnem in ("jump", "jumpTrue", "jumpFalse"):
            if len(args) != 1:
                raise LoadError(f"{mnem} needs one target", line, col)
            items.append(("jump", (mnem, args[0]), line, col))
        elif mnem in bc.MNEMONICS:
            items.append(("insn", (mnem, args), line, col))
        else:
            raise LoadError(f"unknown mnemonic {mnem}", line, col)

    # jump sizes: conditional and short forms are 1 byte, long is 3.  Grow
    # unconditional jumps to long form until the layout is stable.
    long_form = set()
    while True:
        labels, pcs, pc = {}, [], 0
        for i, (kind, data, line, col) in enumerate(items):
            pcs.append(pc)
            if kind == "label":
                if data in labels:
                    raise LoadError(f"duplicate label {data}", line, col)
                labels[data] = pc
            elif kind == "jump":
                pc += 3 if i in long_form else 1
            else:
                mnem, args = data
                pc += _insn_length(mnem)
        changed = False
        for i, (kind, data, line, col) in enumerate(items):
            if kind != "jump":
                continue
            mnem, target = data
            offset = _jump_offset(target, labels, pcs[i] + (3 if i in long_form else 1), line, col)
            if mnem == "jump" and i not in long_form and not 1 <= offset <= 8:
                long_form.add(i)
                changed = True
        if not changed:
            break

    out = bytearray()
    for i, (kind, data, line, col) in enumerate(items):
        try:
            if kind == "label":
                continue
            if kind == "jump":
                mnem, target = data
                after = pcs[i] + (3 if i in long_form else 1)
                offset = _jump_offset(target, labels, after, line, col)
                real = {"jump": "longJump" if i in long_form else "shortJumpForward",
                        "jumpTrue": "shortJumpTrue", "jumpFalse": "shortJumpFalse"}[mnem]
                out += bc.encode(real, (offset,))
            else:
                mnem, args = data
                ops = tuple(_parse_int(a, line, col) for a in args)
                out += bc.encode(mnem, ops)
        except ValueError as exc:
            if isinstance(exc, LoadError):
                raise
            raise LoadError(str(exc), line, col) from None
    return bytes(out)


def _insn_length(mnem: str) -> int:
    base, _ = bc.MNEMONICS[mnem]
    return bc.LENGTHS[base]


def _jump_offset(target: str, labels: dict[str, int], after: int, line: int, col: int) -> int:
    if target.startswith("@"):
        name = target[1:]
        if name not in labels:
            raise LoadError(f"undefined label {name}", line, col)
        return labels[name] - after
    return _parse_int(target, line, col)


def _intern(literals: list[int], value: int) -> int:
    if value in literals:
        return literals.index(value)
    literals.append(value)
    return len(literals) - 1


def _check_method(m: MethodObject, line: int) -> None:
    if m.primitive and not m.bytecodes:
        raise LoadError(f"primitive method {m.selector} needs a fallback body", line)
    if not m.bytecodes:
        raise LoadError(f"method {m.selector} has no bytecodes", line)
    try:
        starts = {pc for pc, *_ in bc.iter_instructions(m.bytecodes)}
    except (ValueError, IndexError) as exc:
        raise LoadError(f"method {m.selector}: {exc}", line) from None
    for pc, name, ops, length in bc.iter_instructions(m.bytecodes):
        if name in ("pushLiteral",) and ops[0] >= len(m.literals):
            raise LoadError(f"method {m.selector}: literal {ops[0]} out of range", line)
        if name == "send" and ops[0] >= len(m.literals):
            raise LoadError(f"method {m.selector}: literal {ops[0]} out of range", line)
        if name in ("pushTemp", "storeAndPopTemp") and ops[0] >= m.frame_size:
            raise LoadError(f"method {m.selector}: temp {ops[0]} out of range", line)
        if name in ("shortJumpForward", "shortJumpTrue", "shortJumpFalse", "longJump"):
            target = pc + length + ops[0]
            if target not in starts:
                raise LoadError(f"method {m.selector}: jump at {pc} to invalid pc {target}", line)


# --------------------------------------------------------------------------
# disassembly

def format_literal(word: int) -> str:
    if word == NIL:
        return "nil"
    if word == TRUE:
        return "true"
    if word == FALSE:
        return "false"
    if word & 1:
        return str(untag(word))
    raise ValueError(f"literal {word} is not printable")


def disassemble_method(m: MethodObject, selectors: dict[str, int] | None = None) -> str:
    lines = [f".method {m.selector} sel={m.selector_id} args={m.num_args} "
             f"temps={m.num_temps} prim={m.primitive}"]
    lines += [f"  .lit {format_literal(w)}" for w in m.literals]
    for pc, name, ops, _ in bc.iter_instructions(m.bytecodes):
        lines.append(f"  {name}" + "".join(f" {o}" for o in ops) + f"   ; pc {pc}")
    return "\n".join(lines)


def disassemble(image: ProgramImage, include_kernel: bool = False) -> str:
    """Render an image back to method-assembly text (loadable again)."""
    kernel_keys = set()
    if not include_kernel:
        kimg = load_program("", with_kernel=True)
        kernel_keys = {(m.class_id, m.selector_id) for m in kimg.methods()}
    out = []
    for cid in sorted(image.classes):
        info = image.classes[cid]
        methods = [info.methods[s] for s in sorted(info.methods)
                   if (cid, s) not in kernel_keys]
        if not methods and cid in BUILTIN_CLASSES.values():
            continue
        head = f".class {info.name} id={cid}"
        if info.slots:
            head += f" slots={info.slots}"
        out.append(head)
        out += [disassemble_method(m) for m in methods]
    if image.entry is not None:
        cid, sid = image.entry
        args = " ".join(format_literal(a) for a in image.entry_args)
        out.append(f".entry {image.class_name(cid)} {image.selector_name(sid)} {args}".rstrip())
    return "\n".join(out) + "\n"

