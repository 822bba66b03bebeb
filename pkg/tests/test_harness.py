import math

import pytest

from druidlet.harness import (FIXTURES, LOOP_FIXTURES, TIER_NAMES, BenchResult, FixtureFailure,
                              Report, bench_suite, load_fixture, run_tier, tier)


def result(fx, name, interp=0.0, comp=0.0, target=0.0, rtl=0):
    return BenchResult(fx, name, interp, comp, target, 1000, 1, 0, rtl, 1)


def fake_report():
    rows = {}
    for fx, (i, d, m) in {"a": (1.0, 0.5, 0.4), "b": (2.0, 0.5, 0.5)}.items():
        rows[(fx, "InterpreterOnly")] = result(fx, "InterpreterOnly", interp=i)
        rows[(fx, "DruidJIT")] = result(fx, "DruidJIT", comp=0.1 * d, target=0.9 * d, rtl=30)
        rows[(fx, "MirrorJIT")] = result(fx, "MirrorJIT", comp=0.1 * m, target=0.9 * m, rtl=25)
    return Report(rows)


def test_time_decomposition():
    r = result("a", "DruidJIT", comp=0.25, target=0.75)
    assert r.total == 1.0 and r.compile_fraction == 0.25
    assert result("a", "x").compile_fraction == 0.0


def test_report_ratios():
    rep = fake_report()
    assert rep.speedup("a", "DruidJIT") == pytest.approx(2.0)
    assert rep.speedup("b", "DruidJIT") == pytest.approx(4.0)
    assert rep.d_over_m("a") == pytest.approx(0.8)
    assert rep.geomean_speedup() == pytest.approx(math.sqrt(8))


def test_report_is_a_pure_function_of_results():
    a, b = fake_report(), fake_report()
    assert a.markdown() == b.markdown() and a.csv() == b.csv()
    md = a.markdown()
    assert md.splitlines()[0].startswith("| fixture |")
    assert "Geometric mean D/I: 2.83" in md
    lines = a.csv().splitlines()
    assert lines[0].split(",")[:3] == ["fixture", "I (ms)", "I"]
    assert len(lines) == 3


def test_tiers():
    assert TIER_NAMES == ("InterpreterOnly", "DruidJIT", "MirrorJIT")
    assert tier("InterpreterOnly").frontend is None
    assert tier("DruidJIT", 5).threshold == 5
    with pytest.raises(ValueError):
        tier("Turbo")


def test_interpreter_only_has_no_compiler():
    vm = tier("InterpreterOnly").make_vm(load_fixture("fib", arg=5))
    assert vm.jit is None


def test_fixture_lists():
    assert set(LOOP_FIXTURES) < set(FIXTURES)
    assert len(FIXTURES) == 6


def test_run_tier_counts():
    r = run_tier(load_fixture("fib", arg=12), tier("DruidJIT"), iterations=2, warmup=0,
                 fixture="fib")
    assert untagged(r.result) == 144
    assert r.compiled_methods >= 2 and r.rtl_instructions > 0
    assert len(r.wall_times) == 2 and r.t_interpreter == 0.0


def untagged(w):
    return w >> 1


def test_bench_suite_small():
    rep = bench_suite(("fib", "loop-sum"), iterations=1, warmup=0)
    assert rep.fixtures() == ["fib", "loop-sum"]
    assert len(rep.rows()) == 2


def test_fixture_failure_names_the_tier(monkeypatch):
    import druidlet.harness as h
    real = h._measure

    def broken(image, config, fuel):
        if config.name == "MirrorJIT":
            raise RuntimeError("boom")
        return real(image, config, fuel)
    monkeypatch.setattr(h, "_measure", broken)
    with pytest.raises(FixtureFailure, match="MirrorJIT"):
        h.bench_suite(("fib",), iterations=1, warmup=0)


def test_bench_suite_checks_results_agree(monkeypatch):
    import druidlet.harness as h
    real = h._measure

    def wrong(image, config, fuel):
        vm, result, wall, comp = real(image, config, fuel)
        return vm, result + 2 if config.name == "DruidJIT" else result, wall, comp
    monkeypatch.setattr(h, "_measure", wrong)
    with pytest.raises(FixtureFailure, match="answered"):
        h.bench_suite(("fib",), iterations=1, warmup=0)
