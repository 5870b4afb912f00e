import json
import subprocess
import sys

import pytest

from perchom.cli import main
from perchom.env import load_environment
from perchom.runner import RunManifest, verify_manifest


def _cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", _cfg(tmp_path, "experiment = theta\nbox = 9\n")]) == 0
    out = capsys.readouterr().out
    assert "experiment = theta" in out and "box = 9" in out


def test_validate_bad(tmp_path, capsys):
    assert main(["validate", _cfg(tmp_path, "experiment = theta\nbox = x\n")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "none.cfg")]) == 2


def test_gen_env(tmp_path, capsys):
    out = tmp_path / "e.percenv"
    assert main(["gen-env", str(out), "--box", "9", "--p", "0.8", "--seed", "4"]) == 0
    env = load_environment(out)
    assert env.box.sides == (9, 9) and env.seed == 4
    assert "open bonds" in capsys.readouterr().out


def test_gen_env_subcritical(tmp_path):
    out = tmp_path / "e.percenv"
    assert main(["gen-env", str(out), "--box", "9", "--p", "0.3"]) == 2
    assert not out.exists()
    assert main(["gen-env", str(out), "--box", "9", "--p", "0.3", "--force"]) == 0


def test_run_with_manifest(tmp_path):
    cfg = _cfg(tmp_path, "experiment = theta\nbox = 9\nn_samples = 40\nseeds = 1, 2\n")
    out = tmp_path / "out"
    assert main(["run", cfg, "--output", str(out)]) == 0
    man = RunManifest.read(out / "manifest.json")
    assert man.experiment == "theta" and "theta.csv" in man.outputs
    assert verify_manifest(out / "manifest.json") == []
    (out / "theta.csv").write_text("tampered\n")
    assert verify_manifest(out / "manifest.json") == ["theta.csv"]


def test_numeric_failure_exit_code(tmp_path, capsys):
    # the uniformization series cannot reach t = 1e9
    cfg = _cfg(tmp_path, "experiment = kernel\nbox = 9\ntimes = 1e9\nsigma2 = 2\ntheta = 1\np = 1\n")
    assert main(["run", cfg, "--output", str(tmp_path / "o")]) == 3
    assert "EvolutionError" in capsys.readouterr().err


def test_bad_preset_name():
    with pytest.raises(SystemExit) as exc:
        main(["preset", "nope"])
    assert exc.value.code == 2


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PERCHOM_THREADS", "many")
    cfg = _cfg(tmp_path, "experiment = theta\nbox = 9\nn_samples = 10\nseeds = 1, 2\n")
    assert main(["run", cfg, "--output", str(tmp_path / "o")]) == 2


def test_threads_do_not_change_outputs(tmp_path, monkeypatch):
    text = "experiment = lclt\nbox = 41\np = 0.7\nseeds = 0..3\ntimes = 5, 10, 20\nsigma2 = 0.7768\ntheta = 0.9888\nplots = false\n"
    digests = []
    for n in ("1", "3"):
        monkeypatch.setenv("PERCHOM_THREADS", n)
        out = tmp_path / f"o{n}"
        assert main(["run", _cfg(tmp_path, text), "--output", str(out)]) == 0
        digests.append(json.loads((out / "manifest.json").read_text())["outputs"])
    assert digests[0] == digests[1]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "perchom", "validate", _cfg(tmp_path, "experiment = green\n")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "experiment = green" in res.stdout


def test_smoke_preset_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["preset", "smoke", "--output", str(tmp_path / name)]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]
    assert a == b
    assert any(k.endswith(".svg") for k in a)
