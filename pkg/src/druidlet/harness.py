"""Tier configurations, fixture benchmarks and report generation."""

from __future__ import annotations

import csv
import dataclasses
import gc
import io
import statistics
import time
from dataclasses import dataclass, field
from importlib import resources

from .interpreter import VM, DEFAULT_FUEL
from .jit import JIT, threshold_from_env
from .metacompiler import druid_frontend
from .mirror import mirror_frontend
from .object_model import ProgramImage, load_program, tag_small_int

FIXTURES = ("fib", "loop-sum", "array-fill", "sieve", "bubble-sort", "binarytrees-lite")
LOOP_FIXTURES = ("loop-sum", "array-fill", "sieve", "bubble-sort")
TIER_NAMES = ("InterpreterOnly", "DruidJIT", "MirrorJIT")


@dataclass(frozen=True)
class TierConfig:
    name: str
    frontend: str | None          # "generated", "handwritten" or None
    threshold: int = 2

    def make_vm(self, image: ProgramImage, fuel: int = DEFAULT_FUEL, probe=False,
                inject_fault: bool = False) -> VM:
        vm = VM(image, fuel=fuel)
        if self.frontend == "generated":
            JIT(vm, druid_frontend(inject_fault), self.threshold, probe=probe)
        elif self.frontend == "handwritten":
            JIT(vm, mirror_frontend(), self.threshold, probe=probe)
        return vm


def tier(name: str, threshold: int | None = None) -> TierConfig:
    threshold = threshold if threshold is not None else threshold_from_env()
    source = {"InterpreterOnly": None, "DruidJIT": "generated", "MirrorJIT": "handwritten"}
    if name not in source:
        raise ValueError(f"unknown tier {name}")
    return TierConfig(name, source[name], threshold)


def fixture_source(name: str) -> str:
    return resources.files("druidlet").joinpath(f"fixtures/{name}.dasm").read_text()


def load_fixture(name: str, arg: int | None = None) -> ProgramImage:
    """Load a fixture, optionally replacing the entry method's argument."""
    image = load_program(fixture_source(name))
    if arg is not None:
        image = dataclasses.replace(image, entry_args=(tag_small_int(arg),))
    return image


@dataclass
class BenchResult:
    fixture: str
    tier: str
    t_interpreter: float            # median seconds spent with no compiler present
    t_compiler: float               # median seconds inside compile_method
    t_target: float                 # median seconds of execution in a JIT tier
    executed_bytecodes: int
    compiled_methods: int
    deopts: int
    rtl_instructions: int
    result: int
    wall_times: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.t_interpreter + self.t_compiler + self.t_target

    @property
    def compile_fraction(self) -> float:
        return self.t_compiler / self.total if self.total else 0.0


def _measure(image: ProgramImage, config: TierConfig, fuel: int):
    vm = config.make_vm(image, fuel=fuel)
    gc.collect()
    gc.disable()    # as timeit does: collector pauses are not part of the workload
    try:
        start = time.perf_counter()
        result, _ = vm.run()
        wall = time.perf_counter() - start
    finally:
        gc.enable()
    return vm, result, wall, vm.jit.compile_seconds if vm.jit else 0.0


def _summarize(fixture: str, config: TierConfig, vm: VM, result: int, walls, compiles):
    jit = vm.jit
    wall = statistics.median(walls)
    comp = statistics.median(compiles)
    if jit is None:
        t_int, t_comp, t_tgt = wall, 0.0, 0.0
    else:
        t_int, t_comp, t_tgt = 0.0, comp, max(wall - comp, 0.0)
    return BenchResult(
        fixture, config.name, t_int, t_comp, t_tgt, vm.steps,
        len(jit.compiled) if jit else 0, jit.deopts if jit else 0,
        sum(c.instruction_count for c in jit.compiled) if jit else 0,
        result, list(walls))


def run_tier(image: ProgramImage, config: TierConfig, iterations: int = 10, warmup: int = 2,
             fixture: str = "", fuel: int = DEFAULT_FUEL) -> BenchResult:
    """Run ``image`` on a fresh VM per iteration; times are medians of the
    measured iterations, counts come from the last one."""
    walls, compiles = [], []
    for i in range(warmup + iterations):
        vm, result, wall, comp = _measure(image, config, fuel)
        if i >= warmup:
            walls.append(wall)
            compiles.append(comp)
    return _summarize(fixture, config, vm, result, walls, compiles)


@dataclass
class Report:
    results: dict                      # (fixture, tier) -> BenchResult

    def speedup(self, fixture: str, tier_name: str) -> float:
        base = self.results[(fixture, "InterpreterOnly")].total
        return base / self.results[(fixture, tier_name)].total

    def d_over_m(self, fixture: str) -> float:
        """Relative speed of DruidJIT against MirrorJIT (1.0 means equal)."""
        return self.results[(fixture, "MirrorJIT")].total / self.results[(fixture, "DruidJIT")].total

    def fixtures(self) -> list[str]:
        seen = []
        for fx, _ in self.results:
            if fx not in seen:
                seen.append(fx)
        return seen

    def geomean_speedup(self, tier_name: str = "DruidJIT") -> float:
        return statistics.geometric_mean([self.speedup(f, tier_name) for f in self.fixtures()])

    def rows(self) -> list[dict]:
        out = []
        for fx in self.fixtures():
            i = self.results[(fx, "InterpreterOnly")]
            d = self.results[(fx, "DruidJIT")]
            m = self.results[(fx, "MirrorJIT")]
            out.append({
                "fixture": fx,
                "I (ms)": round(i.total * 1000, 2),
                "I": 1.0,
                "D/I": round(self.speedup(fx, "DruidJIT"), 2),
                "M/I": round(self.speedup(fx, "MirrorJIT"), 2),
                "D/M": round(self.d_over_m(fx), 2),
                "D compile %": round(100 * d.compile_fraction, 2),
                "M compile %": round(100 * m.compile_fraction, 2),
                "D RTL": d.rtl_instructions,
                "M RTL": m.rtl_instructions,
                "bytecodes": i.executed_bytecodes,
            })
        return out

    def markdown(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        keys = list(rows[0])
        lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
        for r in rows:
            lines.append("| " + " | ".join(_fmt(r[k]) for k in keys) + " |")
        lines.append("")
        lines.append(f"Geometric mean D/I: {self.geomean_speedup():.2f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.2f}" if isinstance(v, float) else str(v)


class FixtureFailure(RuntimeError):
    pass


def bench_suite(fixtures=FIXTURES, iterations: int = 10, warmup: int = 2,
                threshold: int | None = None) -> Report:
    """Benchmark every fixture in every tier.

    Tiers take turns, one run each per round with the order rotating, so
    machine-load drift during a fixture is spread over all of them."""
    results = {}
    configs = [tier(name, threshold) for name in TIER_NAMES]
    for fx in fixtures:
        image = load_fixture(fx)
        samples = {c.name: ([], []) for c in configs}
        last = {}
        for rnd in range(warmup + iterations):
            k = rnd % len(configs)
            for config in configs[k:] + configs[:k]:
                try:
                    vm, result, wall, comp = _measure(image, config, DEFAULT_FUEL)
                except Exception as exc:
                    raise FixtureFailure(f"{fx} failed under {config.name}: {exc}") from exc
                last[config.name] = (vm, result)
                if rnd >= warmup:
                    samples[config.name][0].append(wall)
                    samples[config.name][1].append(comp)
        expected = last[TIER_NAMES[0]][1]
        for config in configs:
            vm, result = last[config.name]
            if result != expected:
                raise FixtureFailure(f"{fx} under {config.name} answered {result}, "
                                     f"expected {expected}")
            results[(fx, config.name)] = _summarize(fx, config, vm, result, *samples[config.name])
    return Report(results)
