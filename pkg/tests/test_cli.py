import json

from mmsim.cli import main


def run_cli(*argv):
    return main(list(argv))


def test_gen_trace_then_simulate_deterministic(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert run_cli("gen-trace", "--profile", "sharegpt4o-like", "--qps", "1.0",
                   "--horizon", "40", "--seed", "1", "--out", str(trace)) == 0
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    for out in (out_a, out_b):
        assert run_cli("simulate", "--trace", str(trace), "--policy", "elastic",
                       "--seed", "1", "--out", str(out)) == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_simulate_stdout_json(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    run_cli("gen-trace", "--profile", "sharegpt4o-like", "--qps", "1.0",
            "--horizon", "20", "--seed", "2", "--out", str(trace))
    capsys.readouterr()
    assert run_cli("simulate", "--trace", str(trace), "--policy", "coupled",
                   "--seed", "1") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["policy"] == "coupled"
    assert doc["requests"]


def test_simulate_audit_and_event_log(tmp_path):
    trace = tmp_path / "t.jsonl"
    run_cli("gen-trace", "--profile", "sharegpt4o-like", "--qps", "2.0",
            "--horizon", "30", "--seed", "3", "--out", str(trace))
    report = tmp_path / "r.json"
    audit = tmp_path / "audit.jsonl"
    events = tmp_path / "events.jsonl"
    assert run_cli("simulate", "--trace", str(trace), "--policy", "elastic",
                   "--seed", "1", "--out", str(report),
                   "--audit", str(audit), "--event-log", str(events)) == 0
    assert events.exists()
    lines = events.read_text().splitlines()
    assert lines and all(json.loads(l)["kind"] for l in lines)


def test_sweep_produces_grid_rows(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run_cli("sweep", "--profile", "sharegpt4o-like", "--qps", "0.5:1.0:0.25",
                   "--policies", "coupled,elastic", "--horizon", "20",
                   "--seed", "1", "--out", str(out)) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 3 * 2  # header + 3 qps points x 2 policies
    header = lines[0].split(",")
    assert "mean_ttft" in header and "policy" in header


def test_compare_optimization_csv_structure(tmp_path):
    out = tmp_path / "opt.csv"
    assert run_cli("compare", "--figure", "optimization",
                   "--profile", "sharegpt4o-like", "--qps", "0.5,1.0",
                   "--horizon", "20", "--seed", "1", "--out", str(out)) == 0
    lines = out.read_text().splitlines()
    variants = {line.split(",")[0] for line in lines[1:]}
    assert variants == {"emp-only", "unicache", "full"}
    assert len(lines) == 1 + 3 * 2


def test_report_pretty_print(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    run_cli("gen-trace", "--profile", "sharegpt4o-like", "--qps", "1.0",
            "--horizon", "20", "--seed", "2", "--out", str(trace))
    report = tmp_path / "r.json"
    run_cli("simulate", "--trace", str(trace), "--policy", "static",
            "--seed", "1", "--out", str(report))
    capsys.readouterr()
    assert run_cli("report", "--input", str(report)) == 0
    text = capsys.readouterr().out
    assert "TTFT" in text and "static" in text


def test_missing_trace_is_config_error(tmp_path, capsys):
    assert run_cli("simulate", "--trace", str(tmp_path / "nope.jsonl"),
                   "--policy", "elastic") == 2


def test_bad_static_split_is_config_error(tmp_path):
    trace = tmp_path / "t.jsonl"
    run_cli("gen-trace", "--profile", "sharegpt4o-like", "--qps", "1.0",
            "--horizon", "20", "--seed", "2", "--out", str(trace))
    # 3 instances cannot satisfy the static per-stage split
    assert run_cli("simulate", "--trace", str(trace), "--policy", "static",
                   "--instances", "3") == 2


def test_invalid_trace_is_simulation_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 0, "arrival_time": 5.0, "modality": "text", '
                   '"text_input_len": 5, "images": [], "output_len": 2}\n'
                   '{"id": 1, "arrival_time": 1.0, "modality": "text", '
                   '"text_input_len": 5, "images": [], "output_len": 2}\n')
    assert run_cli("simulate", "--trace", str(bad), "--policy", "elastic") == 3


def test_malformed_trace_line_is_config_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert run_cli("simulate", "--trace", str(bad), "--policy", "elastic") == 2
