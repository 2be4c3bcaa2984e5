import json
import subprocess
import sys

import pytest

from w2delta.cli import COMMANDS, main

WAVY = {"profile": "sinusoid", "amplitude": 0.1, "frequency": 4.0, "R": 1.0, "n": 2}
SMALL = {
    "decompose": {"domain": WAVY, "s_max": 8, "options": {"overlap_samples": 2000, "inclusion_samples": 1000}},
    "sums": {"domain": {"profile": "flat"}, "s_max": 10, "options": {"q": [1.0, 2.0]}},
    "pucci-check": {"options": {"count": 2000}},
    "solve": {"domain": WAVY, "h": 0.03125, "solution": {"name": "smooth-bump", "coeffs": [1.0, 2.0]}},
    "boundary-fit": {"domain": {"profile": "flat"}, "h": 0.0078125, "spec": {"alpha0": 0.5},
                     "solution": {"name": "power-barrier", "alpha0": 0.5, "solve": False},
                     "options": {"x0": [0.0, 0.0], "radii": [0.125, 0.0625, 0.03125]}},
    "chain": {"domain": WAVY, "h": 0.0078125, "s_max": 8, "solution": {"name": "quadratic", "coeffs": [1.0, 2.0]}},
    "verify": {"domain": {"profile": "flat"}, "hs": [0.03125, 0.015625, 0.0078125],
               "solution": {"name": "quadratic", "coeffs": [1.0, 2.0]}},
    "patch": {"domain": dict(WAVY, R=0.25), "h": 0.00390625, "solution": {"name": "smooth-bump"}},
    "sharpness": {"options": {"alpha0s": [0.5], "deltas": [1.0, 1.9], "levels": [6, 7, 8]}},
}


def run(tmp_path, cmd, cfg, name="out", seed=0):
    path = tmp_path / f"{cmd}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main([cmd, "--config", str(path), "--out", str(out), "--seed", str(seed)])
    return code, out


def data_files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_subcommand_replays_byte_identically(tmp_path, cmd, capsys):
    code, a = run(tmp_path, cmd, SMALL[cmd], "a", seed=7)
    assert code == 0
    code, b = run(tmp_path, cmd, SMALL[cmd], "b", seed=7)
    assert code == 0
    assert data_files(a) == data_files(b)
    manifest = json.loads((a / "manifest.json").read_text())
    assert {"config_sha256", "versions", "wall_time_s", "timestamp", "files"} <= set(manifest)
    assert set(manifest["files"]) == set(data_files(a))


def test_verify_quadratic_is_stable(tmp_path, capsys):
    code, out = run(tmp_path, "verify", SMALL["verify"])
    summary = json.loads((out / "summary.json").read_text())["result"]
    assert code == 0 and summary["verdict"] == "stable"


def test_sums_flags_q_equal_one(tmp_path, capsys):
    cfg = {"domain": {"profile": "flat"}, "s_max": 12, "options": {"q": [1.0, 1.25, 1.5, 2.0]}}
    code, out = run(tmp_path, "sums", cfg)
    rows = json.loads((out / "summary.json").read_text())["result"]["rows"]
    assert [r["convergent"] for r in rows] == [False, True, True, True]
    header = (out / "sums.csv").read_text().splitlines()[0]
    assert "slope" in header


def test_patch_reports_gap(tmp_path, capsys):
    cfg = dict(SMALL["patch"], options={"charts": [{"x": 0.0, "r": 0.06}]})
    code, out = run(tmp_path, "patch", cfg)
    assert code == 0
    assert json.loads((out / "summary.json").read_text())["result"]["cover_gap"] is True
    assert (out / "uncovered.csv").exists()


@pytest.mark.parametrize("text", ["", "{}", "[1, 2]", "not json", '{"colour": 1}', '{"options": {"bogus": 1}}',
                                  '{"s_max": 40}', '{"spec": {"delta": -1}}'])
def test_invalid_config_exits_nonzero(tmp_path, text, capsys):
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert main(["sums", "--config", str(path), "--out", str(tmp_path / "o")]) != 0
    assert "error" in capsys.readouterr().err


def test_missing_config_and_unknown_subcommand(tmp_path, capsys):
    assert main(["sums", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) != 0
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x", "--out", "y"])
    assert exc.value.code != 0
    assert main([]) != 0


def test_module_entry_point(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL["pucci-check"]))
    proc = subprocess.run([sys.executable, "-m", "w2delta.cli", "pucci-check", "--config", str(path), "--out",
                           str(tmp_path / "o"), "--threads", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["passed"] is True
