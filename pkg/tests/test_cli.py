from druidlet.cli import main


def test_gen_writes_three_files(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "frontend.bin").read_bytes()[:4] == b"DRU1"
    assert "gen_primitiveAdd" in (tmp_path / "frontend.txt").read_text()
    assert len((tmp_path / "table.txt").read_text().splitlines()) == 256
    assert "pushActiveDepth@0x52" in capsys.readouterr().out


def test_run_fixture(capsys):
    assert main(["run", "--fixture", "fib", "--arg", "10", "--tier", "druid"]) == 0
    assert capsys.readouterr().out.strip() == "55"


def test_run_program_file_with_trace(tmp_path, capsys):
    prog = tmp_path / "p.dasm"
    prog.write_text(".class UndefinedObject id=1\n.method m sel=40 args=0 temps=0\n"
                    "  pushNil\n  send #size 0\n  returnTop\n.entry UndefinedObject m\n")
    trace = tmp_path / "t.txt"
    assert main(["run", str(prog), f"--trace={trace}"]) == 3
    assert "DoesNotUnderstand" in capsys.readouterr().err
    assert trace.read_text().splitlines() == ["send 1 8", "error DoesNotUnderstand"]


def test_run_fuel(capsys):
    assert main(["run", "--fixture", "fib", "--fuel", "10"]) == 3
    assert "FuelExhausted" in capsys.readouterr().err


def test_dump_rtl(capsys):
    assert main(["run", "--fixture", "fib", "--arg", "6", "--tier", "druid", "--threshold", "1",
                 "--dump-rtl"]) == 0
    out = capsys.readouterr().out
    assert "SendSite" in out and "; pc 0" in out


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["run", "--fixture", "nope"]) == 1
    assert main(["run", "--fixture", "fib", "--tier", "warp"]) == 1
    assert main(["run"]) == 1
    assert main(["bench", "nope"]) == 1


def test_diff_exit_codes(capsys):
    assert main(["diff", "--count", "5"]) == 0
    assert "5 programs, 0 mismatches" in capsys.readouterr().out
    assert main(["diff", "--count", "3", "--inject-fault"]) == 2


def test_bench_writes_reports(tmp_path, capsys):
    md, csv = tmp_path / "r.md", tmp_path / "r.csv"
    assert main(["bench", "fib", "--iterations", "1", "--warmup", "0",
                 "--out", str(md), "--csv", str(csv)]) == 0
    assert "Geometric mean" in md.read_text()
    assert csv.read_text().startswith("fixture,")


def test_dump_ir_stages(capsys):
    assert main(["dump-ir", "--opcode", "0x78"]) == 0
    front = capsys.readouterr().out
    assert main(["dump-ir", "--opcode", "0x78", "--stage", "opt", "--pass-trace"]) == 0
    opt = capsys.readouterr().out
    assert front.startswith("ir shortConditionalJumpTrue@0x78")
    assert "; round 0 fold:" in opt
    assert len(opt.splitlines()) < len(front.splitlines()) + 20
    assert main(["dump-ir", "--primitive", "1"]) == 0
    assert "checkedAdd" in capsys.readouterr().out
