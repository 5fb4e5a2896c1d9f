import csv
import json

import pytest

from barrier_synth.cli import main, parse_degrees, parse_gamma, parse_start
from barrier_synth.synthesis import Certificate


@pytest.fixture(scope="module")
def cert_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "ex1", "--lambda", "-1", "--deg", "2..2", "--out-dir", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_success_writes_outputs(cert_dir):
    for name in ("certificate.json", "report.json", "attempts.csv", "manifest.json"):
        assert (cert_dir / name).exists()
    manifest = json.loads((cert_dir / "manifest.json").read_text())
    assert manifest["exit_code"] == 0
    assert manifest["seed"] == 0
    assert manifest["inputs"][0]["role"] == "system"
    assert {o["path"].rsplit("/", 1)[-1] for o in manifest["outputs"]} >= {"certificate.json", "attempts.csv"}
    assert json.loads((cert_dir / "report.json").read_text())["verdict"] == "pass"


def test_synth_exhausted(tmp_path):
    assert main(["synth", "ex1", "--lambda", "0", "--deg", "2..3", "--out-dir", str(tmp_path)]) == 1
    rows = read_csv(tmp_path / "attempts.csv")
    assert [r[2] for r in rows[1:]] == ["infeasible", "infeasible"]
    assert not (tmp_path / "certificate.json").exists()


@pytest.mark.parametrize("argv", [
    ["synth", "missing.json"],
    ["synth", "ex1", "--deg", "5..2"],
    ["synth", "ex1", "--lambda", "abc"],
    ["bogus"],
    ["check", "ex1", "nope.json"],
])
def test_input_errors(argv, tmp_path):
    assert main(argv + (["--out-dir", str(tmp_path)] if argv[0] == "synth" and len(argv) > 2 else [])) == 2


def test_check_exit_codes(cert_dir, tmp_path):
    cert = str(cert_dir / "certificate.json")
    assert main(["check", "ex1", cert, "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((cert_dir / "certificate.json").read_text())
    terms = doc["barriers"]["1"]["terms"]
    # flip the constant term: phi becomes positive on the initial disc
    for t in terms:
        if t[0] == [0, 0]:
            t[1] = t[1][1:] if t[1].startswith("-") else "-" + t[1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["check", "ex1", str(bad), "--out-dir", str(tmp_path)]) == 1
    # two-variable certificate against the three-variable system
    assert main(["check", "ex2", cert, "--out-dir", str(tmp_path)]) == 2


def test_falsify_verified(cert_dir, tmp_path):
    code = main(["falsify", "ex1", str(cert_dir / "certificate.json"), "--samples", "100000",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    assert json.loads((tmp_path / "falsify.json").read_text()) == []


def test_certificate_csv_and_json_round_trip(cert_dir):
    cert = Certificate.load(cert_dir / "certificate.json")
    assert json.loads(cert.to_json()) == {k: v for k, v in json.loads((cert_dir / "certificate.json").read_text()).items()
                                          if k != "report"}
    rows = read_csv(cert_dir / "attempts.csv")
    assert rows[0][:3] == ["lambda", "degree", "status"]
    assert rows[1][:3] == ["-1", "2", "success"]


def test_sweep_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["sweep", "ex1", "--lambda", "0,-1", "--deg", "2..3", "--seed", "3", "--out-dir", str(d)]) == 0
    ra, rb = read_csv(a / "sweep.csv"), read_csv(b / "sweep.csv")
    assert len(ra) == 5
    drop = ra[0].index("seconds")
    assert [r[:drop] + r[drop + 1:] for r in ra] == [r[:drop] + r[drop + 1:] for r in rb]
    assert json.loads((a / "manifest.json").read_text())["config"] == json.loads((b / "manifest.json").read_text())["config"]


def test_simulate_hybrid(tmp_path):
    code = main(["simulate", "ex2", "--from", "1:(0.05,0,0)", "--T", "30", "--policy", "eager",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "trajectory.csv")
    assert rows[0] == ["t", "x1", "x2", "x3", "location", "phi"]
    assert {r[4] for r in rows[1:]} == {"1", "2"}
    jumps = read_csv(tmp_path / "jumps.csv")
    assert len(jumps) > 2
    float(jumps[1][0])
    again = tmp_path / "again"
    main(["simulate", "ex2", "--from", "1:(0.05,0,0)", "--T", "30", "--out-dir", str(again)])
    assert (again / "trajectory.csv").read_bytes() == (tmp_path / "trajectory.csv").read_bytes()


def test_levelset(cert_dir, tmp_path):
    code = main(["levelset", "ex1", str(cert_dir / "certificate.json"), "--grid", "100x80", "--out-dir", str(tmp_path)])
    assert code == 0
    grid = read_csv(tmp_path / "levelset_grid.csv")
    assert len(grid) == 1 + 100 * 80
    cont = read_csv(tmp_path / "levelset_contours.csv")
    assert cont[0] == ["contour", "x1", "x2"] and len(cont) > 1
    code = main(["levelset", "ex1", str(cert_dir / "certificate.json"), "--grid", "5000x5000",
                 "--out-dir", str(tmp_path)])
    assert code == 2


def test_argument_parsers():
    assert parse_degrees("2..6") == (2, 6)
    assert parse_degrees("4") == (4, 4)
    assert parse_gamma("1->2=1,2->1=0") == {"1->2": 1, "2->1": 0}
    with pytest.raises(Exception):
        parse_degrees("6..2")


def test_start_parser(ex1, ex2):
    assert parse_start("1:(0.05,0,0)", ex2) == ("1", (0.05, 0.0, 0.0))
    loc, x = parse_start("(1.5,0)", ex1)
    assert loc == "1" and tuple(x) == (1.5, 0.0)
