"""Staging: decide which SSA values are known when the JIT compiles a method.

A value is ``JIT`` (JIT-compile-time constant) when it only depends on
meta-time constants, the bytecode pc, operand bytes, special objects and
stageable literal loads; everything else that touches the running frame,
the heap or a send is ``RUNTIME``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ir import CHECKED, PURE_BINARY, DruidIR

BOTTOM, JIT, RUNTIME = 0, 1, 2
NAMES = {BOTTOM: "Bottom", JIT: "JitConst", RUNTIME: "Runtime"}
JIT_PARAMS = {"bytecodePC", "byte1", "byte2", "method"}


@dataclass
class StageMap:
    classes: dict = field(default_factory=dict)      # Instr -> class
    branches: dict = field(default_factory=dict)     # terminator -> class
    demotions: list = field(default_factory=list)    # phis forced to Runtime

    def __getitem__(self, ins) -> int:
        return self.classes.get(ins, BOTTOM)

    def staged(self, ins) -> bool:
        return self.classes.get(ins, BOTTOM) != RUNTIME

    def branch_staged(self, term) -> bool:
        return self.branches.get(term, RUNTIME) != RUNTIME


def _controlling_terms(ir: DruidIR, block, idom) -> list:
    """Conditional terminators deciding which edge reaches ``block``."""
    stop = idom.get(block)
    region, work = set(), [p for p in block.preds]
    while work:
        b = work.pop()
        if b in region or b is stop:
            continue
        region.add(b)
        work.extend(b.preds)
    terms = [b.term for b in region if b.term is not None and len(b.term.targets) > 1]
    if stop is not None and stop.term is not None and len(stop.term.targets) > 1:
        terms.append(stop.term)
    return terms


def stage_analysis(ir: DruidIR) -> StageMap:
    """Forward fixpoint over use-def chains (monotone on Bottom < JIT < RUNTIME)."""
    sm = StageMap()
    cls = sm.classes
    blocks = ir.reachable()
    idom = ir.dominators()
    controls = {b: _controlling_terms(ir, b, idom) for b in blocks if b.phis}

    def transfer(ins) -> int:
        op = ins.op
        if op == "const" or op == "special":
            return JIT
        if op == "param":
            return JIT if ins.attrs["name"] in JIT_PARAMS else RUNTIME
        if op in PURE_BINARY or op == "copy":
            return max((cls.get(a, BOTTOM) for a in ins.args), default=JIT)
        if op == "loadSlot" and ins.attrs.get("stageable"):
            return max((cls.get(a, BOTTOM) for a in ins.args), default=JIT)
        if op == "phi":
            c = max((cls.get(a, BOTTOM) for a in ins.args if a is not ins), default=BOTTOM)
            for t in controls.get(ins.block, ()):
                if sm.branches.get(t, BOTTOM) == RUNTIME:
                    c = RUNTIME
            return c
        return RUNTIME

    changed = True
    while changed:
        changed = False
        for b in blocks:
            for ins in b.all_instrs():
                if ins.is_terminator:
                    if ins.op == "branch":
                        c = max(cls.get(a, BOTTOM) for a in ins.args)
                    elif ins.op in CHECKED:
                        c = RUNTIME
                        if cls.get(ins) != RUNTIME:
                            cls[ins] = RUNTIME
                            changed = True
                    else:
                        continue
                    if sm.branches.get(ins, BOTTOM) < c:
                        sm.branches[ins] = c
                        changed = True
                    continue
                c = transfer(ins)
                if cls.get(ins, BOTTOM) < c:
                    cls[ins] = c
                    changed = True
    # cyclic values never forced upwards depend only on themselves: JIT-known
    for b in blocks:
        for ins in b.all_instrs():
            if not ins.is_terminator and cls.get(ins, BOTTOM) == BOTTOM:
                cls[ins] = JIT
            if ins.op == "branch" and sm.branches.get(ins, BOTTOM) == BOTTOM:
                sm.branches[ins] = JIT
    for b in blocks:
        for phi in b.phis:
            if cls[phi] == RUNTIME and all(cls.get(a) != RUNTIME for a in phi.args if a is not phi):
                sm.demotions.append(phi)
    return sm


def dump_stages(ir: DruidIR, sm: StageMap) -> str:
    lines = []
    for b in ir.reverse_postorder():
        for ins in b.all_instrs():
            if ins.is_terminator:
                if ins in sm.branches:
                    lines.append(f"v{ins.id} {ins.op}: {NAMES[sm.branches[ins]]}")
            else:
                lines.append(f"v{ins.id} {ins.op}: {NAMES[sm[ins]]}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# checks over emitted generators (GenOp lists)

class StagingError(Exception):
    pass


_STAGED_OPERANDS = ("imm", "sv")


def _ops_walk(ops):
    for op in ops:
        yield op
        if op[0] == "stagedIf":
            yield from _ops_walk(op[2])
            yield from _ops_walk(op[3])
        elif op[0] == "stagedLoop":
            yield from _ops_walk(op[1])
            yield from _ops_walk(op[3])


def check_generator_stages(ops) -> list[str]:
    """Stage analysis re-run on a generator: staged computations and staged
    control may only read JIT-time operands (immediates and staged
    variables), never registers or run-time register variables."""
    errs = []
    defined = set()
    for op in _ops_walk(ops):
        if op[0] == "staged":
            if op[2] == "param" and op[3] not in JIT_PARAMS:
                errs.append(f"staged read of run-time parameter {op[3]}")
            for a in op[3:]:
                if isinstance(a, tuple) and a[0] not in _STAGED_OPERANDS:
                    errs.append(f"{op[1][1]} := {op[2]} reads run-time operand {a}")
                if isinstance(a, tuple) and a[0] == "sv" and a[1] not in defined:
                    errs.append(f"{op[1][1]} reads {a[1]} before it is staged")
            defined.add(op[1][1])
        elif op[0] == "stagedIf" or op[0] == "stagedLoop":
            cond = op[1] if op[0] == "stagedIf" else op[2]
            if cond[0] not in _STAGED_OPERANDS:
                errs.append(f"{op[0]} decided by run-time operand {cond}")
    return errs


def staged_projection(ops, params: dict, load=None, specials=None, limit: int = 1 << 16) -> dict:
    """Run only the staged part of a generator: emission ops are dropped.

    ``params`` gives the JIT constants (bytecodePC, byte1, byte2, method);
    ``load`` answers stageable memory reads.  Raises :class:`StagingError`
    when a staged loop exceeds ``limit`` iterations.
    """
    from .midend import binop
    from .ir import eval_cond
    from .object_model import FALSE, NIL, TRUE

    specials = specials or {"nil": NIL, "true": TRUE, "false": FALSE}
    load = load or (lambda address: 1)
    env: dict = {}

    def val(o):
        return o[1] if o[0] == "imm" else env[o[1]]

    def run(seq):
        for op in seq:
            k = op[0]
            if k == "staged":
                dst, fn, args = op[1][1], op[2], op[3:]
                if fn == "param":
                    v = params[args[0]]
                elif fn == "special":
                    v = specials[args[0]]
                elif fn == "copy":
                    v = val(args[0])
                elif fn == "load":
                    v = load(val(args[0]) + val(args[1]))
                elif fn == "compare":
                    v = 1 if eval_cond(args[0], val(args[1]), val(args[2])) else 0
                else:
                    v = binop(fn, val(args[0]), val(args[1]))
                env[dst] = v
            elif k == "stagedIf":
                run(op[2] if val(op[1]) else op[3])
            elif k == "stagedLoop":
                for _ in range(limit):
                    run(op[1])
                    if not val(op[2]):
                        break
                    run(op[3])
                else:
                    raise StagingError("staged loop did not terminate")

    run(ops)
    return env
