import json
import subprocess
import sys

import pytest

from sanpose.cli import main

SMALL = ["--set", "identities=3", "--set", "poses=3", "--set", "test_identities=2"]
TINY_TRAIN = ["--set", "epochs=1", "--set", "base_channels=8", "--set", "d_channels=8",
              "--set", "sab_count=1", "--set", "probe_pairs=6"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--seed", "7", *SMALL, "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--set", f"data={dataset}", *TINY_TRAIN, "--out", str(out)]) == 0
    return out


def test_synth_twice_byte_identical(dataset, tmp_path):
    assert main(["synth", "--seed", "7", *SMALL, "--out", str(tmp_path / "again")]) == 0
    assert tree(dataset) == tree(tmp_path / "again")


def test_synth_seed_changes_data(dataset, tmp_path):
    main(["synth", "--seed", "8", *SMALL, "--out", str(tmp_path / "other")])
    assert tree(dataset) != tree(tmp_path / "other")


def test_generate_missing_checkpoint_exit_3(tmp_path, capsys):
    missing = tmp_path / "absent.ckpt"
    assert main(["generate", "--set", f"checkpoint={missing}", "--out", str(tmp_path / "g")]) == 3
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    assert main(["train", "--set", "learning_rate=1", "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_config_file_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: [1,\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_missing_dataset_exit_3(tmp_path):
    assert main(["train", "--set", f"data={tmp_path / 'nowhere'}", "--out", str(tmp_path / "o")]) == 3


def test_evaluate_report_keys(dataset, trained, tmp_path):
    out = tmp_path / "eval"
    assert main(["evaluate", "--set", f"checkpoint={trained / 'last.ckpt'}", "--set", f"data={dataset}",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert {"fid", "lpips_mean", "mask_lpips_mean", "n_pairs", "extractor_seed"} <= set(report)
    assert report["n_pairs"] > 0


def test_rerun_from_echo_is_bit_identical(dataset, trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.yaml"), "--out", str(again)]) == 0
    for name in ("metrics.csv", "eval.csv", "last.ckpt"):
        assert (again / name).read_bytes() == (trained / name).read_bytes()
    ev = ["evaluate", "--set", f"checkpoint={trained / 'last.ckpt'}", "--set", f"data={dataset}"]
    main([*ev, "--out", str(tmp_path / "e1")])
    main(["evaluate", "--config", str(tmp_path / "e1" / "config.yaml"), "--out", str(tmp_path / "e2")])
    assert (tmp_path / "e1" / "report.json").read_bytes() == (tmp_path / "e2" / "report.json").read_bytes()


def test_generate_sheet(dataset, trained, tmp_path):
    out = tmp_path / "gen"
    test = dataset / "test"
    triple = f"triples=[[{test}/images/0003_00.png,{test}/parsing/0003_01.png,{test}/masks/0003_01.png]]"
    assert main(["generate", "--set", f"checkpoint={trained / 'last.ckpt'}", "--set", triple,
                 "--out", str(out)]) == 0
    assert (out / "sheet.png").exists() and (out / "images" / "triple_000.png").exists()
    out2 = tmp_path / "gen2"
    assert main(["generate", "--set", f"checkpoint={trained / 'last.ckpt'}", "--set", f"data={dataset}",
                 "--set", "pairs=['0003_00:0003_02']", "--out", str(out2)]) == 0
    assert (out2 / "images" / "0003_00__0003_02.png").exists()


def test_augment_and_reid_eval(dataset, trained, tmp_path):
    before = tree(dataset)
    ckpt = trained / "last.ckpt"
    assert main(["augment", "--set", f"data={dataset}", "--set", f"checkpoint={ckpt}",
                 "--out", str(tmp_path / "aug")]) == 0
    assert tree(dataset) == before
    out = tmp_path / "reid"
    assert main(["reid-eval", "--set", f"data={dataset}", "--set", "alpha=2", "--set", f"generator_checkpoint={ckpt}",
                 "--set", "epochs=1", "--set", "seeds=[0,1]", "--set", "queries_per_id=1",
                 "--out", str(out)]) == 0
    report = json.loads((out / "reid_report.json").read_text())
    assert {"metric_kind", "alpha", "seeds", "rank1", "rank5", "rank10", "mAP", "per_seed"} <= set(report)
    assert len(report["per_seed"]) == 2
    assert tree(dataset) == before


def test_reid_train_writes_embedder(dataset, tmp_path):
    assert main(["reid-train", "--set", f"data={dataset}", "--set", "epochs=1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "embedder.ckpt").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sanpose", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "train", "generate", "evaluate", "reid-train", "reid-eval", "augment"):
        assert name in proc.stdout
