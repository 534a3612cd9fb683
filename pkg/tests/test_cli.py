import json
import subprocess
import sys

import pytest

from ensemble_patch.cli import CONFIG_ENV, main
from ensemble_patch.ensemble import read_log_csv


def test_train_writes_patch_and_log(toy_config, tmp_path, capsys):
    assert main(["train", "--config", str(toy_config)]) == 0
    out = tmp_path / "out"
    assert (out / "patch.png").exists()
    rows = read_log_csv(out / "log.csv")
    assert len(rows) == 2  # 6 images, batch 4


def test_train_seed_override_reproducible(toy_config, tmp_path):
    for d in ("r1", "r2", "r3"):
        seed = "5" if d != "r3" else "6"
        assert main(["train", "--config", str(toy_config), "--seed", seed,
                     "--out", str(tmp_path / d)]) == 0
    read = lambda d: (tmp_path / d / "patch.png").read_bytes()  # noqa: E731
    assert read("r1") == read("r2") and read("r1") != read("r3")
    assert (tmp_path / "r1" / "log.csv").read_bytes() == (tmp_path / "r2" / "log.csv").read_bytes()


def test_train_checkpoints(toy_config, tmp_path):
    assert main(["train", "--config", str(toy_config), "--checkpoint-every", "1"]) == 0
    assert sorted(p.name for p in (tmp_path / "out" / "checkpoints").glob("*.png")) == [
        "step_000001.png", "step_000002.png"]


def test_eval_writes_report(toy_config, tmp_path):
    main(["train", "--config", str(toy_config)])
    assert main(["eval", "--config", str(toy_config),
                 "--patch", str(tmp_path / "out" / "patch.png")]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert set(report) == {"a", "b"}
    assert {"ap_clean", "ap_adv", "ap_drop", "asr", "records"} <= set(report["a"])


def test_preview_count(toy_config, tmp_path):
    assert main(["preview", "--config", str(toy_config), "--count", "3"]) == 0
    assert len(list((tmp_path / "out" / "preview").glob("*.png"))) == 3


def test_palette(tmp_path, toy_config):
    src = tmp_path / "measured.txt"
    src.write_text("".join(f"{i / 40},{(i * 7 % 40) / 40},{(i * 13 % 40) / 40}\n"
                           for i in range(40)))
    dst = tmp_path / "pal.txt"
    assert main(["palette", "--config", str(toy_config), "--input", str(src),
                 "--output", str(dst), "--count", "5"]) == 0
    lines = [ln for ln in dst.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 5


def test_export_adv(toy_config, tmp_path):
    main(["train", "--config", str(toy_config)])
    assert main(["export-adv", "--config", str(toy_config),
                 "--patch", str(tmp_path / "out" / "patch.png"),
                 "--out", str(tmp_path / "adv")]) == 0
    assert len(list((tmp_path / "adv" / "images").glob("*.png"))) == 6


def test_env_var_config(toy_config, tmp_path, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV, str(toy_config))
    assert main(["preview", "--count", "1"]) == 0


def test_missing_config_fails(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    assert main(["train"]) != 0
    assert "config" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "nope.ini")]) != 0
    assert "nope.ini" in capsys.readouterr().err


def test_eval_missing_patch_fails(toy_config, tmp_path, capsys):
    assert main(["eval", "--config", str(toy_config), "--patch", str(tmp_path / "x.png")]) != 0
    assert "x.png" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--frobnicate"], []])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code != 0


def test_console_module_entry(toy_config):
    res = subprocess.run([sys.executable, "-m", "ensemble_patch.cli", "preview", "--config",
                          str(toy_config), "--count", "1"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "ensemble_patch.cli", "nope"],
                         capture_output=True, text=True)
    assert res.returncode != 0 and "usage" in res.stderr
