"""Random well-formed programs and differential testing between tiers.

A program is a list of methods; a method body is a list of statements,
each a tuple of assembly lines that leaves the operand stack as it found
it.  Keeping statements balanced makes shrinking a matter of deleting
whole statements.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field, replace

from .interpreter import VMError
from .object_model import MAX_SMALL_INT, MIN_SMALL_INT, LoadError, load_program

HELPER_BASE_SEL = 100
MAIN_SEL = 99
THING_ID = 10
THING_SLOTS = 3
DEFAULT_FUEL = 20_000

# category weights: arithmetic sends, jumps, stack shuffles, full sends, array ops
WEIGHTS = {"arith": 40, "jump": 20, "stack": 20, "send": 10, "array": 10}


@dataclass
class MethodSpec:
    selector: str
    sel_id: int
    num_args: int
    num_temps: int
    body: list                    # statements: tuples of lines
    ret: tuple                    # final lines, ending in a return
    class_name: str = "UndefinedObject"


@dataclass
class ProgramSpec:
    methods: list
    seed: int = 0

    def text(self) -> str:
        out = [f".class Thing id={THING_ID} slots={THING_SLOTS}"]
        current = "Thing"
        for m in self.methods:
            if m.class_name != current:
                cid = THING_ID if m.class_name == "Thing" else 1
                out.append(f".class {m.class_name} id={cid}")
                current = m.class_name
            out.append(f".method {m.selector} sel={m.sel_id} args={m.num_args} temps={m.num_temps}")
            for stmt in m.body:
                out.extend(stmt)
            out.extend(m.ret)
        out.append(".entry Thing main")
        return "\n".join("  " + ln if not ln.startswith((".", "@")) else ln for ln in out) + "\n"

    def statement_count(self) -> int:
        return sum(len(m.body) for m in self.methods)


class _Gen:
    def __init__(self, rng: random.Random, helpers: list, in_main: bool):
        self.rng = rng
        self.helpers = helpers          # (selector, argc) callable from here
        self.in_main = in_main
        self.labels = 0
        self.temps = 0
        self.loop_temp = None

    def label(self) -> str:
        self.labels += 1
        return f"L{self.labels}"

    # -- expressions: each pushes exactly one value ---------------------------
    # ``kind`` is "int", "bool" or "any"; temps and arguments always hold
    # small integers, so most programs run past their first few sends.
    # A small share of ill-typed choices keeps the error paths exercised.

    def int_literal(self) -> list:
        if self.rng.random() < 0.01:
            return [f"pushInt {self.rng.choice((MAX_SMALL_INT, MIN_SMALL_INT, 1 << 40))}"]
        return [f"pushInt {self.rng.randint(-2, 9)}"]

    def leaf(self, kind: str = "int") -> list:
        rng = self.rng
        if kind == "bool" or (kind == "any" and rng.random() < 0.2):
            return [rng.choice(("pushTrue", "pushFalse"))]
        if kind == "any" or rng.random() < 0.005:
            r = rng.random()
            if self.in_main and r < 0.3:
                return [f"pushReceiverVariable {rng.randrange(THING_SLOTS)}"]
            if r < 0.5:
                return ["pushNil"]
        if rng.random() < 0.01:
            return ["pushActiveDepth"]
        if self.temps and rng.random() < 0.5:
            return [f"pushTemp {rng.randrange(self.temps)}"]
        return self.int_literal()

    def expr(self, kind: str = "int", depth: int = 0) -> list:
        if depth > 3:
            return self.leaf(kind)
        rng = self.rng
        cat = rng.choices(list(WEIGHTS), weights=list(WEIGHTS.values()))[0]
        if cat == "arith":
            if kind == "bool" or (kind == "any" and rng.random() < 0.3):
                op = rng.choice(("primLessSend", "primEqSend"))
            else:
                op = rng.choice(("primAddSend", "primSubSend", "primAddSend", "primMulSend"))
                if op == "primMulSend":
                    # keep products small so overflow stays the exception
                    return self.expr("int", depth + 1) + [f"pushInt {rng.randint(-2, 3)}", op]
            return self.expr("int", depth + 1) + self.expr("int", depth + 1) + [op]
        if cat == "jump":
            # cond ifTrue: [a] ifFalse: [b], merging with one value on the stack
            a, b = self.leaf(kind), self.leaf(kind)
            f, j = self.label(), self.label()
            cond = self.expr("bool", depth + 1) if rng.random() > 0.005 else self.leaf("any")
            jump = rng.choice(("jumpFalse", "jumpTrue"))
            return cond + [f"{jump} @{f}"] + a + [f"jump @{j}", f"@{f}:"] + b + [f"@{j}:"]
        if cat == "stack":
            if kind == "int" and rng.random() < 0.5:
                return self.expr("int", depth + 1) + ["dup", "primAddSend"]
            return self.expr(kind, depth + 1) + self.expr("any", depth + 1) + ["popTop"]
        if cat == "send" and self.helpers and kind != "bool":
            sel, argc = rng.choice(self.helpers)
            args = []
            for _ in range(argc):
                args += self.expr("int", depth + 1)
            return ["pushNil"] + args + [f"send #{sel} {argc}"]
        if cat == "array" and kind != "bool":
            size = rng.randint(1, 6)
            if rng.random() < 0.05:
                size |= 0x80
            if rng.random() < 0.7:
                arr = [f"pushNewArray {size}"]
            else:
                n = size & 0x7F if rng.random() > 0.01 else -1
                arr = ["pushNil", f"pushInt {n}", "send #newArray: 1"]
            r = rng.random()
            if kind == "int" and r < 0.5:
                return arr + ["send #size 0"]
            if kind == "any" and r < 0.5:
                return arr + [f"pushInt {rng.randint(0, (size & 0x7F) + 1)}", "send #at: 1"]
            return arr + [f"pushInt {rng.randint(1, (size & 0x7F) + (rng.random() < 0.02))}"] + \
                self.expr(kind, depth + 1) + ["send #at:put: 2"]
        return self.leaf(kind)

    # -- statements: stack-neutral ------------------------------------------------

    def statement(self, nested: bool = False) -> tuple:
        rng = self.rng
        r = rng.random()
        writable = [t for t in range(self.temps) if t != self.loop_temp]
        if r < 0.45 and writable:
            return tuple(self.expr("int") + [f"storeAndPopTemp {rng.choice(writable)}"])
        if r < 0.6:
            return tuple(self.expr("any") + ["popTop"])
        if r < 0.75:
            # conditional block; the skip is a possibly long forward jump
            t, skip = self.label(), self.label()
            cond = self.expr("bool", 1)
            body = [ln for _ in range(rng.randint(1, 2)) for ln in self.statement(True)]
            return tuple(cond + [f"jumpTrue @{t}", f"jump @{skip}", f"@{t}:"] + body + [f"@{skip}:"])
        if r < 0.85 and not nested and self.loop_temp is not None:
            top, body_l, end = self.label(), self.label(), self.label()
            c = self.loop_temp
            body = [ln for _ in range(rng.randint(1, 3)) for ln in self.statement(True)]
            return tuple([f"pushInt {rng.randint(0, 5)}", f"storeAndPopTemp {c}", f"@{top}:",
                          "pushInt 0", f"pushTemp {c}", "primLessSend", f"jumpTrue @{body_l}",
                          f"jump @{end}", f"@{body_l}:"] + body +
                         [f"pushTemp {c}", "pushInt 1", "primSubSend", f"storeAndPopTemp {c}",
                          f"jump @{top}", f"@{end}:"])
        return tuple(self.expr("any") + ["popTop"])

    def ret(self) -> tuple:
        if self.rng.random() < (0.3 if self.in_main else 0.05):
            return ("returnReceiver",)
        return tuple(self.expr("int") + ["returnTop"])


def random_program(seed: int, max_helpers: int = 4) -> ProgramSpec:
    """A loadable random program; draws again when a literal frame overflows."""
    rng = random.Random(seed)
    for _ in range(50):
        spec = _draw(rng, seed, max_helpers)
        try:
            load_program(spec.text())
        except LoadError:
            continue
        return spec
    raise LoadError(f"no loadable program for seed {seed}")


def _draw(rng: random.Random, seed: int, max_helpers: int) -> ProgramSpec:
    methods, helpers = [], []
    for i in range(rng.randint(1, max_helpers)):
        argc = rng.choice((0, 1, 1, 2, 2, 3)) if i else rng.choice((0, 1, 2))
        name = f"h{i}" + ":" * min(argc, 1) + "x:" * max(argc - 1, 0)
        temps = rng.randint(1, 3)
        g = _Gen(rng, list(helpers), in_main=False)
        g.temps = argc + temps
        g.loop_temp = argc + temps - 1
        prelude = tuple(ln for t in range(argc, argc + temps)
                        for ln in (f"pushInt {rng.randint(0, 5)}", f"storeAndPopTemp {t}"))
        body = [prelude] + [g.statement() for _ in range(rng.randint(1, 5))]
        methods.append(MethodSpec(name, HELPER_BASE_SEL + i, argc, temps, body, g.ret()))
        helpers.append((name, argc))
    # main calls every helper several times so they get hot
    g = _Gen(rng, helpers, in_main=True)
    g.temps = 2
    g.loop_temp = 1
    block = [("pushInt 0", "storeAndPopTemp 0", "pushInt 0", "storeAndPopTemp 1")]
    for _ in range(rng.randint(2, 4)):
        sel, argc = rng.choice(helpers)
        call = ["pushNil"] + [ln for _ in range(argc) for ln in g.expr("int", 2)]
        block.append(tuple(call + [f"send #{sel} {argc}", "storeAndPopTemp 0"]))
    block.append(tuple(g.statement()))
    # statements stay separate so shrinking can drop them one at a time
    body = [tuple(_relabel(st, suffix)) for suffix in "abcd" for st in block]
    methods.append(MethodSpec("main", MAIN_SEL, 0, 2, body, g.ret(), class_name="Thing"))
    return ProgramSpec(methods, seed)


def _relabel(lines, suffix: str) -> list:
    out = []
    for ln in lines:
        if ln.startswith("@") and ln.endswith(":"):
            out.append(f"{ln[:-1]}{suffix}:")
        elif " @" in ln:
            out.append(f"{ln}{suffix}")
        else:
            out.append(ln)
    return out


# ---------------------------------------------------------------------------
# differential testing

@dataclass
class Outcome:
    result: int | None
    error: str | None
    trace: list

    def key(self):
        return (self.result, self.error, self.trace)


def run_program(text: str, tier_name: str, fuel: int = DEFAULT_FUEL, inject_fault: bool = False,
                threshold: int = 2, stats: Counter | None = None) -> Outcome:
    from .harness import tier
    image = load_program(text)
    vm = tier(tier_name, threshold).make_vm(image, fuel=fuel, inject_fault=inject_fault)
    try:
        result, _ = vm.run()
        out = Outcome(result, None, list(vm.trace.records))
    except VMError as exc:
        out = Outcome(None, exc.kind, list(vm.trace.records))
    except Exception as exc:  # wrong compiled code may crash the host
        out = Outcome(None, f"crash:{type(exc).__name__}", list(vm.trace.records))
    if stats is not None and vm.jit is not None:
        stats.update(vm.jit.generator_invocations)
    return out


@dataclass
class Mismatch:
    seed: int
    program: str
    reference: Outcome
    candidate: Outcome
    shrunk: str = ""


@dataclass
class DiffReport:
    count: int = 0
    mismatches: list = field(default_factory=list)
    coverage: Counter = field(default_factory=Counter)
    errors: Counter = field(default_factory=Counter)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def summary(self) -> str:
        lines = [f"{self.count} programs, {len(self.mismatches)} mismatches"]
        for m in self.mismatches[:3]:
            lines.append(f"seed {m.seed}: {m.reference.key()[:2]} vs {m.candidate.key()[:2]}")
            lines.append(m.shrunk or m.program)
        return "\n".join(lines)


def threshold_for(seed: int) -> int:
    return 1 if seed % 2 else 2


def _differs(spec: ProgramSpec, candidate: str, fuel: int, inject_fault: bool) -> bool:
    text = spec.text()
    try:
        ref = run_program(text, "InterpreterOnly", fuel)
    except LoadError:
        return False
    cand = run_program(text, candidate, fuel, inject_fault, threshold_for(spec.seed))
    return ref.key() != cand.key()


def shrink(spec: ProgramSpec, candidate: str = "DruidJIT", fuel: int = DEFAULT_FUEL,
           inject_fault: bool = False) -> ProgramSpec:
    """Greedily delete statements, simplify returns and drop uncalled
    helpers while the tiers still disagree."""
    def still_differs(trial):
        return _differs(trial, candidate, fuel, inject_fault)

    changed = True
    while changed:
        changed = False
        for mi in range(len(spec.methods)):
            i = 0
            while i < len(spec.methods[mi].body):
                m = spec.methods[mi]
                trial = _with_method(spec, mi, replace(m, body=m.body[:i] + m.body[i + 1:]))
                if still_differs(trial):
                    spec, changed = trial, True
                else:
                    i += 1
            m = spec.methods[mi]
            simple = ("pushInt 0", "returnTop")
            if m.ret != simple:
                trial = _with_method(spec, mi, replace(m, ret=simple))
                if still_differs(trial):
                    spec, changed = trial, True
        text = spec.text()
        for m in list(spec.methods):
            if m.selector != "main" and f"#{m.selector} " not in text:
                trial = ProgramSpec([x for x in spec.methods if x is not m], spec.seed)
                if still_differs(trial):
                    spec, changed = trial, True
    return spec


def _with_method(spec: ProgramSpec, index: int, method: MethodSpec) -> ProgramSpec:
    methods = list(spec.methods)
    methods[index] = method
    return ProgramSpec(methods, spec.seed)


def differential_test(seed: int, count: int, candidate: str = "DruidJIT",
                      fuel: int = DEFAULT_FUEL, inject_fault: bool = False,
                      shrink_failures: bool = True, max_shrink: int = 3) -> DiffReport:
    report = DiffReport()
    for k in range(count):
        s = seed + k
        spec = random_program(s)
        text = spec.text()
        ref = run_program(text, "InterpreterOnly", fuel)
        # odd seeds compile on first call, so the entry method is compiled too
        cand = run_program(text, candidate, fuel, inject_fault, threshold=threshold_for(s),
                           stats=report.coverage)
        report.count += 1
        if ref.error:
            report.errors[ref.error] += 1
        if ref.key() != cand.key():
            mm = Mismatch(s, text, ref, cand)
            if shrink_failures and len(report.mismatches) < max_shrink:
                mm.shrunk = shrink(spec, candidate, fuel, inject_fault).text()
            report.mismatches.append(mm)
    return report
