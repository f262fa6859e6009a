import json
import subprocess
import sys

import pytest

from alquery.cli import main
from helpers import tiny_config, tiny_spec, write_config


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_synth_run_eval(tmp_path, capsys):
    spec = write_config(tmp_path / "synth.json", **tiny_spec().to_dict())
    assert main(["synth", "--config", str(spec), "--out", str(tmp_path / "data")]) == 0
    assert last_json(capsys)["train"] == 6
    for method in ("random", "clasp_pe"):
        cfg = write_config(tmp_path / f"{method}.json", **tiny_config(tmp_path / "data", method))
        for seed in (0, 1):
            assert main(["run", "--config", str(cfg), "--seed", str(seed),
                         "--out", str(tmp_path / "runs" / method / f"s{seed}")]) == 0
            out = last_json(capsys)
            assert out["budget"] == 40 and 0 <= out["final_dice"] <= 1
    assert main(["eval", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "report")]) == 0
    assert last_json(capsys)["methods"] == ["clasp_pe", "random"]
    assert (tmp_path / "report" / "ppm_holm.csv").exists()


def test_guidelines(tiny_dataset_dir, capsys):
    assert main(["guidelines", "--labels", str(tiny_dataset_dir), "--class-weight", "2=100"]) == 0
    out = last_json(capsys)
    assert out["query_size"] == 150 and out["total_budget"] == 750
    assert len(out["patch_size"]) == 3 and all(1 <= s <= 20 for s in out["patch_size"])


def test_config_errors(tmp_path, tiny_dataset_dir, capsys):
    bad = write_config(tmp_path / "bad.json", dataset=str(tiny_dataset_dir), method="random", bogus=1)
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    missing = write_config(tmp_path / "missing.json", dataset=str(tmp_path / "nowhere"), method="random")
    assert main(["run", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    infeasible = write_config(tmp_path / "synth.json", **{**tiny_spec().to_dict(), "volume_fraction": [0.9, 0.9]})
    assert main(["synth", "--config", str(infeasible), "--out", str(tmp_path / "d")]) == 2
    assert main(["guidelines", "--labels", str(tmp_path / "nowhere")]) == 2
    capsys.readouterr()


def test_runtime_errors(tmp_path, tiny_dataset_dir, capsys):
    # a patch larger than the volume only fails once the loop starts
    cfg = write_config(tmp_path / "c.json", **tiny_config(tiny_dataset_dir, "pe", patch_size=[32, 4, 4]))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert main(["eval", "--runs", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 3
    assert "runtime error" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "alquery.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "guidelines" in proc.stdout


def test_missing_subcommand():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
