import csv
from pathlib import Path

from compartbft.cli import build_parser, main

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for argv in (["node", "--replica", "0"], ["client"], ["scenario", "--scenario", "x.yaml"], ["bench"]):
        assert parser.parse_args(argv).command == argv[0]


def test_empty_bench_writes_header_only(tmp_path):
    out = tmp_path / "empty.csv"
    assert main(["bench", "--ops", "0", "--csv", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 1 and rows[0][:3] == ["clients", "outstanding", "batch"]


def test_small_bench_with_plot(tmp_path):
    out, png = tmp_path / "b.csv", tmp_path / "b.png"
    assert main(["bench", "--ops", "40", "--batches", "1", "4", "--repeats", "2", "--csv", str(out),
                 "--plot", str(png)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["batch"] for r in rows] == ["1", "4"]
    assert all(r["repeats"] == "2" for r in rows)
    assert png.stat().st_size > 0


def test_bench_refuses_tcp():
    assert main(["bench", "--transport", "tcp"]) == 2


def test_scenario_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text("name: good\nseed: 1\nops: 10\n")
    assert main(["scenario", "--scenario", str(good)]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\nseed: 1\nops: 10\nexpect: {agreement: false}\n")
    assert main(["scenario", "--scenario", str(bad)]) == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_scenario_trace_and_seed_override(tmp_path):
    trace = tmp_path / "t.jsonl"
    assert main(["scenario", "--scenario", str(SCENARIOS / "honest.yaml"), "--seed", "3",
                 "--trace", str(trace)]) == 0
    assert trace.read_text().strip()


def test_client_on_simulator(capsys):
    assert main(["client", "--clients", "2", "--ops", "10", "--outstanding", "2"]) == 0
    assert "completed  20" in capsys.readouterr().out
