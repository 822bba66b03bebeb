"""SSA control-flow graph used by the meta-compiler.

Every value is an :class:`Instr` (constants included).  Each block holds
phis and body instructions followed by exactly one terminator; terminators
list their successor blocks in ``targets``.  Use-def chains are kept exact:
``instr.users`` lists every instruction that reads it (once per operand).
"""

from __future__ import annotations

from dataclasses import dataclass, field

PURE_BINARY = {"add", "sub", "mul", "bitAnd", "bitOr", "shiftLeft", "shiftRight", "compare"}
PURE = PURE_BINARY | {"const", "param", "special", "copy", "phi"}
COMMUTATIVE = {"add", "mul", "bitAnd", "bitOr"}
MEMORY_READS = {"loadSlot", "loadTemp", "receiver", "stackRead"}
EFFECTS = {"storeSlot", "storeTemp", "stackPush", "stackPop", "runtimeCall"}
CHECKED = {"checkedAdd", "checkedSub", "checkedMul"}
TERMINATORS = {"jump", "branch", "next", "bcJump", "send", "mustBeBoolean",
               "ret", "deopt", "primFail", "primReturn"} | CHECKED
CONDS = {"eq", "ne", "lt", "le", "gt", "ge"}
NEGATE = {"eq": "ne", "ne": "eq", "lt": "ge", "ge": "lt", "gt": "le", "le": "gt"}
SWAP = {"eq": "eq", "ne": "ne", "lt": "gt", "gt": "lt", "le": "ge", "ge": "le"}


class IRError(Exception):
    pass


def eval_cond(cond: str, a: int, b: int) -> bool:
    if cond == "eq":
        return a == b
    if cond == "ne":
        return a != b
    if cond == "lt":
        return a < b
    if cond == "le":
        return a <= b
    if cond == "gt":
        return a > b
    return a >= b


class Instr:
    __slots__ = ("id", "op", "args", "attrs", "block", "users", "targets")

    def __init__(self, op: str, args=(), attrs=None, targets=()):
        self.id = -1
        self.op = op
        self.args: list[Instr] = list(args)
        self.attrs: dict = dict(attrs or {})
        self.block: BasicBlock | None = None
        self.users: list[Instr] = []
        self.targets: list[BasicBlock] = list(targets)

    @property
    def is_terminator(self) -> bool:
        return self.op in TERMINATORS

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self):
        return self.attrs.get("value")

    def __repr__(self):
        return f"v{self.id}"


@dataclass(eq=False)
class BasicBlock:
    id: int
    phis: list = field(default_factory=list)
    instrs: list = field(default_factory=list)
    term: Instr | None = None
    preds: list = field(default_factory=list)

    @property
    def succs(self) -> list:
        return list(self.term.targets) if self.term is not None else []

    def all_instrs(self):
        yield from self.phis
        yield from self.instrs
        if self.term is not None:
            yield self.term

    def __repr__(self):
        return f"B{self.id}"

    def __hash__(self):
        return id(self)


class DruidIR:
    def __init__(self, name: str = "", kind: str = "bytecode"):
        self.name = name
        self.kind = kind
        self.blocks: list[BasicBlock] = []
        self.entry: BasicBlock | None = None
        self.next_id = 0
        self.next_block = 0
        self.meta: dict = {}   # guard class, numArgs, flags

    # -- construction -------------------------------------------------------

    def new_block(self) -> BasicBlock:
        b = BasicBlock(self.next_block)
        self.next_block += 1
        self.blocks.append(b)
        if self.entry is None:
            self.entry = b
        return b

    def _number(self, ins: Instr):
        ins.id = self.next_id
        self.next_id += 1
        for a in ins.args:
            a.users.append(ins)

    def add(self, block: BasicBlock, op: str, args=(), **attrs) -> Instr:
        ins = Instr(op, args, attrs)
        self._number(ins)
        ins.block = block
        if op == "phi":
            block.phis.append(ins)
        else:
            block.instrs.append(ins)
        return ins

    def const(self, block: BasicBlock, value: int) -> Instr:
        return self.add(block, "const", value=value)

    def terminate(self, block: BasicBlock, op: str, args=(), targets=(), **attrs) -> Instr:
        if block.term is not None:
            raise IRError(f"{block} already terminated")
        ins = Instr(op, args, attrs, targets)
        self._number(ins)
        ins.block = block
        block.term = ins
        for t in targets:
            t.preds.append(block)
        return ins

    def insert_before_term(self, block: BasicBlock, op: str, args=(), **attrs) -> Instr:
        ins = Instr(op, args, attrs)
        self._number(ins)
        ins.block = block
        block.instrs.append(ins)
        return ins

    # -- mutation helpers -----------------------------------------------------

    def replace_all_uses(self, old: Instr, new: Instr):
        if old is new:
            return
        for u in {id(u): u for u in old.users}.values():
            n = sum(1 for a in u.args if a is old)
            u.args = [new if a is old else a for a in u.args]
            new.users.extend([u] * n)
        old.users = []

    def remove_instr(self, ins: Instr):
        for a in ins.args:
            try:
                a.users.remove(ins)
            except ValueError:
                pass
        blk = ins.block
        if ins.op == "phi":
            blk.phis.remove(ins)
        elif ins is blk.term:
            blk.term = None
        else:
            blk.instrs.remove(ins)
        ins.block = None

    def set_args(self, ins: Instr, args):
        for a in ins.args:
            a.users.remove(ins)
        ins.args = list(args)
        for a in ins.args:
            a.users.append(ins)

    def retarget(self, block: BasicBlock, op: str, args=(), targets=(), **attrs) -> Instr:
        """Replace ``block``'s terminator, fixing preds and phis of dropped successors."""
        old = block.term
        old_targets = list(old.targets) if old else []
        if old is not None:
            self.remove_instr(old)
        for t in old_targets:
            self.remove_pred(t, block)
        return self.terminate(block, op, args, targets, **attrs)

    def replace_with_jump(self, block: BasicBlock, target: BasicBlock) -> Instr:
        """Turn ``block``'s terminator into a jump along its existing edge to ``target``."""
        old = block.term
        olds = list(old.targets)
        if target not in olds:
            raise IRError(f"{block} has no edge to {target}")
        self.remove_instr(old)
        kept = False
        for t in olds:
            if t is target and not kept:
                kept = True
                continue
            self.remove_pred(t, block)
        ins = Instr("jump", (), {}, [target])
        self._number(ins)
        ins.block = block
        block.term = ins
        return ins

    def remove_pred(self, block: BasicBlock, pred: BasicBlock):
        """Drop one incoming edge from ``pred`` together with its phi operands."""
        idx = block.preds.index(pred)
        block.preds.pop(idx)
        for phi in block.phis:
            arg = phi.args[idx]
            arg.users.remove(phi)
            phi.args.pop(idx)

    def all_instrs(self):
        for b in self.blocks:
            yield from b.all_instrs()

    def instr_count(self) -> int:
        return sum(1 for _ in self.all_instrs())

    # -- analyses --------------------------------------------------------------

    def reachable(self) -> list[BasicBlock]:
        seen, order, work = set(), [], [self.entry]
        while work:
            b = work.pop()
            if b in seen:
                continue
            seen.add(b)
            order.append(b)
            work.extend(reversed(b.succs))
        return order

    def reverse_postorder(self) -> list[BasicBlock]:
        seen, post = set(), []

        def visit(b):
            seen.add(b)
            for s in b.succs:
                if s not in seen:
                    visit(s)
            post.append(b)

        visit(self.entry)
        return post[::-1]

    def dominators(self) -> dict:
        """Immediate dominators (Cooper, Harvey and Kennedy)."""
        rpo = self.reverse_postorder()
        index = {b: i for i, b in enumerate(rpo)}
        idom = {self.entry: self.entry}

        def intersect(a, b):
            while a is not b:
                while index[a] > index[b]:
                    a = idom[a]
                while index[b] > index[a]:
                    b = idom[b]
            return a

        changed = True
        while changed:
            changed = False
            for b in rpo[1:]:
                preds = [p for p in b.preds if p in idom and p in index]
                if not preds:
                    continue
                new = preds[0]
                for p in preds[1:]:
                    new = intersect(p, new)
                if idom.get(b) is not new:
                    idom[b] = new
                    changed = True
        return idom

    def dominates(self, idom, a: BasicBlock, b: BasicBlock) -> bool:
        while True:
            if a is b:
                return True
            parent = idom.get(b)
            if parent is None or parent is b:
                return False
            b = parent

    def postdominators(self) -> dict:
        """Immediate postdominators over a virtual exit (``None``)."""
        blocks = self.reachable()
        exits = [b for b in blocks if not b.succs]
        # reverse-graph RPO from the virtual exit
        rpreds = {b: [s for s in b.succs] for b in blocks}
        rsuccs = {b: [] for b in blocks}
        for b in blocks:
            for s in b.succs:
                rsuccs.setdefault(s, []).append(b)
        seen, post = set(), []

        def visit(b):
            seen.add(b)
            for p in rsuccs.get(b, []):
                if p not in seen:
                    visit(p)
            post.append(b)

        for e in exits:
            if e not in seen:
                visit(e)
        order = [None] + post[::-1]
        index = {b: i for i, b in enumerate(order)}
        ipdom = {None: None}

        def intersect(a, b):
            while a is not b:
                while index[a] > index[b]:
                    a = ipdom[a]
                while index[b] > index[a]:
                    b = ipdom[b]
            return a

        changed = True
        while changed:
            changed = False
            for b in order[1:]:
                succs = rpreds[b] if rpreds[b] else [None]
                succs = [s for s in succs if s in ipdom]
                if not succs:
                    continue
                new = succs[0]
                for s in succs[1:]:
                    new = intersect(s, new)
                if ipdom.get(b, "unset") is not new:
                    ipdom[b] = new
                    changed = True
        return ipdom

    def loop_headers(self) -> set:
        """Blocks targeted by a back edge (target dominates source)."""
        idom = self.dominators()
        heads = set()
        for b in self.reachable():
            for s in b.succs:
                if self.dominates(idom, s, b):
                    heads.add(s)
        return heads

    def compact(self):
        """Drop unreachable blocks and renumber nothing (ids stay stable)."""
        live = set(self.reachable())
        for b in list(self.blocks):
            if b in live:
                continue
            for s in b.succs:
                if s in live:
                    self.remove_pred(s, b)
            for ins in list(b.all_instrs()):
                for a in ins.args:
                    if ins in a.users:
                        a.users.remove(ins)
            self.blocks.remove(b)


# --------------------------------------------------------------------------
# validity checking

def check_ssa(ir: DruidIR) -> list[str]:
    """Return a list of violations; empty means the IR is well formed."""
    errs = []
    blocks = ir.reachable()
    bset = set(ir.blocks)
    if ir.entry not in bset:
        errs.append("entry block missing")
    defined = {}
    for b in ir.blocks:
        if b.term is None:
            errs.append(f"{b} has no terminator")
        for ins in b.all_instrs():
            if ins.block is not b:
                errs.append(f"{ins} has wrong block link")
            if ins.id in defined:
                errs.append(f"{ins} defined twice")
            defined[ins.id] = ins
        for ins in b.instrs:
            if ins.is_terminator or ins.op == "phi":
                errs.append(f"{ins} ({ins.op}) misplaced in body of {b}")
        if b.term is not None and not b.term.is_terminator:
            errs.append(f"{b} ends with non-terminator {b.term.op}")
        for phi in b.phis:
            if len(phi.args) != len(b.preds):
                errs.append(f"{phi} has {len(phi.args)} inputs for {len(b.preds)} preds")
        for s in b.succs:
            if s not in bset:
                errs.append(f"{b} targets missing block {s}")
            elif b not in s.preds:
                errs.append(f"{b} -> {s} edge missing from preds")
        for p in b.preds:
            if p not in bset or b not in p.succs:
                errs.append(f"{b} lists stale pred {p}")
        if b.term is not None:
            op = b.term.op
            n = len(b.term.targets)
            want = {"jump": 1, "branch": 2}.get(op, 2 if op in {"checkedAdd", "checkedSub", "checkedMul"} else 0)
            if n != want:
                errs.append(f"{b.term} ({op}) has {n} successors, expected {want}")
            if op == "branch" and b.term.attrs.get("cond") not in CONDS:
                errs.append(f"{b.term} has bad condition")
    # use-def exactness
    for b in ir.blocks:
        for ins in b.all_instrs():
            for a in ins.args:
                if a.id not in defined or defined[a.id] is not a:
                    errs.append(f"{ins} uses undefined {a}")
                    continue
                if a.users.count(ins) != ins.args.count(a):
                    errs.append(f"use-def chain of {a} misses {ins}")
            for u in ins.users:
                if ins not in u.args:
                    errs.append(f"{ins} lists non-user {u}")
    # dominance
    reach = set(blocks)
    idom = ir.dominators()
    pos = {}
    for b in blocks:
        for i, ins in enumerate(b.all_instrs()):
            pos[ins] = i
    for b in blocks:
        for ins in b.all_instrs():
            for k, a in enumerate(ins.args):
                if a.block is None or a.block not in reach:
                    if a.block is None:
                        errs.append(f"{ins} uses detached {a}")
                    continue
                if ins.op == "phi":
                    use_block = b.preds[k] if k < len(b.preds) else None
                    if use_block is None:
                        continue
                    if a.block is use_block and a.op in CHECKED:
                        # value of a checked op is only defined on the ok edge
                        if a.targets and a.targets[0] is not b:
                            errs.append(f"{ins} uses {a} on its overflow edge")
                        continue
                    if not ir.dominates(idom, a.block, use_block):
                        errs.append(f"{a} does not dominate phi use {ins}")
                    continue
                if a.op in CHECKED:
                    ok = a.targets[0]
                    if not ir.dominates(idom, ok, b):
                        errs.append(f"{ins} uses {a} outside its ok successor")
                    continue
                if a.block is b:
                    if pos[a] >= pos[ins]:
                        errs.append(f"{a} used before definition by {ins}")
                elif not ir.dominates(idom, a.block, b):
                    errs.append(f"{a} does not dominate its use {ins}")
    return errs


# --------------------------------------------------------------------------
# textual dump

def format_instr(ins: Instr) -> str:
    args = ", ".join(f"v{a.id}" for a in ins.args)
    attrs = "".join(f" {k}={_fmt(v)}" for k, v in sorted(ins.attrs.items()))
    head = f"v{ins.id} = {ins.op}"
    if ins.op == "const":
        return f"v{ins.id} = const {ins.value}"
    text = f"{head}({args}){attrs}"
    if ins.targets:
        text += " -> " + ", ".join(f"B{t.id}" for t in ins.targets)
    return text


def _fmt(v):
    return str(v)


def dump_ir(ir: DruidIR) -> str:
    lines = [f"ir {ir.name} kind={ir.kind}" + "".join(f" {k}={v}" for k, v in sorted(ir.meta.items()))]
    for b in ir.reverse_postorder():
        preds = ", ".join(f"B{p.id}" for p in b.preds)
        lines.append(f"B{b.id}:" + (f"  ; preds {preds}" if preds else ""))
        for ins in b.all_instrs():
            lines.append("  " + format_instr(ins))
    return "\n".join(lines) + "\n"


def clone_ir(ir: DruidIR) -> DruidIR:
    """Deep copy preserving ids."""
    new = DruidIR(ir.name, ir.kind)
    new.meta = dict(ir.meta)
    new.next_id = ir.next_id
    new.next_block = ir.next_block
    bmap = {}
    for b in ir.blocks:
        nb = BasicBlock(b.id)
        bmap[b] = nb
        new.blocks.append(nb)
    new.entry = bmap[ir.entry]
    imap = {}
    for b in ir.blocks:
        for ins in b.all_instrs():
            c = Instr(ins.op, (), ins.attrs)
            c.id = ins.id
            c.block = bmap[b]
            imap[ins] = c
    for b in ir.blocks:
        nb = bmap[b]
        nb.preds = [bmap[p] for p in b.preds]
        nb.phis = [imap[i] for i in b.phis]
        nb.instrs = [imap[i] for i in b.instrs]
        nb.term = imap[b.term] if b.term is not None else None
        for ins in b.all_instrs():
            c = imap[ins]
            c.args = [imap[a] for a in ins.args]
            c.targets = [bmap[t] for t in ins.targets]
            for a in c.args:
                a.users.append(c)
    return new
