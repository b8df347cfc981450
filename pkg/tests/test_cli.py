import json
from pathlib import Path

import pytest

from apimarket.cli import main
from apimarket.ledger import Ledger

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(tmp_path, name="honest_pipeline", *extra):
    ledger, report = tmp_path / f"{name}.jsonl", tmp_path / f"{name}.json"
    code = main(["run", "--scenario", str(SCENARIOS / f"{name}.json"), "--ledger-out", str(ledger), "--report-out", str(report), *extra])
    return code, ledger, report


@pytest.mark.parametrize("name", ["honest_pipeline", "orchestrated_tamper"])
def test_run_writes_ledger_report_and_figures(tmp_path, name):
    code, ledger, report = run(tmp_path, name)
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["ledger"]["intact"] and doc["ledger"]["records"] == len(Ledger.load(ledger))
    for tag in ("steps", "records"):
        png = tmp_path / f"{name}.{tag}.png"
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    if name == "orchestrated_tamper":
        culprits = {v["culpable"] for v in doc["verdicts"] if v["culpable"]}
        assert culprits == {i["expected_culpable"] for i in doc["injections"]}


def test_no_figures(tmp_path):
    code, ledger, report = run(tmp_path, "honest_pipeline", "--no-figures")
    assert code == 0
    assert not list(tmp_path.glob("*.png"))


def test_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    run(a, "orchestrated_tamper", "--no-figures")
    run(b, "orchestrated_tamper", "--no-figures")
    assert (a / "orchestrated_tamper.jsonl").read_bytes() == (b / "orchestrated_tamper.jsonl").read_bytes()


def test_overrides_change_the_run(tmp_path):
    _, base, _ = run(tmp_path, "honest_pipeline", "--no-figures")
    other = tmp_path / "other.jsonl"
    main(["run", "--scenario", str(SCENARIOS / "honest_pipeline.json"), "--seed", "99", "--protocol", "B",
          "--ledger-out", str(other), "--report-out", str(tmp_path / "other.json"), "--no-figures"])
    led = Ledger.load(other)
    assert led.deployments()[0][1].protocol == "B"
    assert other.read_bytes() != base.read_bytes()


def test_verify_and_corruption(tmp_path, capsys):
    _, ledger, _ = run(tmp_path, "honest_pipeline", "--no-figures")
    assert main(["verify", str(ledger)]) == 0
    lines = ledger.read_text().splitlines()
    doc = json.loads(lines[4])
    doc["author"] = "00" * 32
    lines[4] = json.dumps(doc)
    ledger.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["verify", str(ledger)]) == 3
    assert "chain broken at seq 4" in capsys.readouterr().out


def test_unreadable_inputs_exit_one(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["verify", str(bad)]) == 1
    assert main(["inspect", str(bad)]) == 1
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps({"name": "x", "colour": "red"}))
    assert main(["run", "--scenario", str(scenario)]) == 1


def test_inspect_filters(tmp_path, capsys):
    _, ledger, _ = run(tmp_path, "honest_pipeline", "--no-figures")
    capsys.readouterr()
    assert main(["inspect", str(ledger), "--invocation", "credit-score#2", "--json"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 4 + 2
    assert main(["inspect", str(ledger), "--model", "nothing"]) == 0
    assert capsys.readouterr().out == ""
    assert main(["inspect", str(ledger), "--kind", "ModelDeployment"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1
    assert main(["inspect", str(ledger), "--kind", "Bogus"]) == 1


def test_audit_reproduces_report_verdicts(tmp_path):
    code, ledger, report = run(tmp_path, "orchestrated_tamper", "--no-figures")
    out = tmp_path / "verdicts.json"
    assert main(["audit", "--ledger", str(ledger), "--claims", str(report), "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == json.loads(report.read_text())["verdicts"]


def test_audit_with_separate_escrow(tmp_path):
    code, ledger, report = run(tmp_path, "orchestrated_tamper", "--no-figures")
    doc = json.loads(report.read_text())
    claims = tmp_path / "claims.json"
    escrow = tmp_path / "escrow.json"
    claims.write_text(json.dumps({"claims": doc["arbitration"]["claims"]}))
    escrow.write_text(json.dumps(doc["arbitration"]["escrow"]))
    out = tmp_path / "v.json"
    assert main(["audit", "--ledger", str(ledger), "--claims", str(claims), "--escrow", str(escrow), "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == doc["verdicts"]


def test_audit_on_corrupt_ledger(tmp_path, capsys):
    code, ledger, report = run(tmp_path, "honest_pipeline", "--no-figures")
    lines = ledger.read_text().splitlines()
    del lines[2]
    ledger.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["audit", "--ledger", str(ledger), "--claims", str(report)]) == 3
    assert "chain broken at seq 2" in capsys.readouterr().out


def test_infeasible_deployment_exits_two(tmp_path, capsys):
    scenario = json.loads((SCENARIOS / "orchestrated_tamper.json").read_text())
    scenario.update(vendors=3, components=4, replication=3)
    path = tmp_path / "tight.json"
    path.write_text(json.dumps(scenario))
    code = main(["run", "--scenario", str(path), "--ledger-out", str(tmp_path / "l.jsonl"),
                 "--report-out", str(tmp_path / "r.json"), "--no-figures"])
    assert code == 2
    assert "deployment failed" in capsys.readouterr().err
