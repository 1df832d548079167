import json
import subprocess
import sys

import pytest

from alcagcn.ablation import CSV_COLUMNS, VARIANTS, read_csv
from alcagcn.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from alcagcn.dataset import load_dataset
from alcagcn.model import load_checkpoint
from alcagcn.skeleton import format_ntu_skeleton
from alcagcn.synthetic import generate_synthetic_dataset

TINY = {
    "synth": {"n_classes": 8, "n_per_class": 4, "difficulty": 0.5},
    "data": {"val_fraction": 0.25},
    "model": {"blocks": 2, "channels": [8, 8], "strides": [2, 2], "d_emb": 8, "dropout": 0.0},
    "train": {"epochs": 2, "episodes_per_epoch": 2, "n_way": 3, "val_episodes": 4},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def synth(workdir):
    out = workdir / "synth.alca"
    assert main(["synth", str(out), "--config", str(workdir / "tiny.json"), "--seed", "1"]) == EXIT_OK
    return out


def skeleton_dir(tmp_path, n=3, bad=0):
    raw = generate_synthetic_dataset(3, 2, seed=0, difficulty=0.3)
    for k in range(n):
        seq = raw.sequences[2 * k]
        (tmp_path / f"S001C001P001R001A{k + 1:03d}.skeleton").write_text(format_ntu_skeleton(seq))
    for k in range(bad):
        (tmp_path / f"S001C001P001R002A{k + 1:03d}.skeleton").write_text("2\n1\ngarbage\n")
    return tmp_path


def test_prep_three_files(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    skeleton_dir(src)
    out = tmp_path / "prep.alca"
    assert main(["prep", str(src), str(out)]) == EXIT_OK
    ds = load_dataset(out)
    assert len(ds) == 3 and ds.class_ids == [1, 2, 3]
    assert {s.num_frames for s in ds.sequences} == {75}
    assert ds.meta["files"][0].endswith("A001.skeleton")
    assert ds.meta["run_config"]["data"]["frames"] == 75 and "seed" in ds.meta


def test_prep_skip_bad(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    skeleton_dir(src, n=2, bad=1)
    assert main(["prep", str(src), str(tmp_path / "fail.alca")]) == EXIT_DATA
    assert "R002A001.skeleton" in capsys.readouterr().err
    with pytest.warns(UserWarning, match="skipped 1"):
        assert main(["prep", str(src), str(tmp_path / "ok.alca"), "--skip-bad"]) == EXIT_OK
    assert len(load_dataset(tmp_path / "ok.alca")) == 2


def test_prep_empty_dir(tmp_path, capsys):
    assert main(["prep", str(tmp_path), str(tmp_path / "x.alca")]) == EXIT_DATA
    assert "no .skeleton files" in capsys.readouterr().err
    assert main(["prep", str(tmp_path / "missing"), str(tmp_path / "x.alca")]) == EXIT_DATA


def test_synth_container(synth):
    ds = load_dataset(synth)
    assert len(ds) == 32
    assert ds.classes_in("eval") == [0, 6]
    assert ds.meta["preprocessed"] == 75 and ds.meta["seed"] == 1


def test_train_eval_deterministic(workdir, synth):
    cfg = str(workdir / "tiny.json")
    outputs = []
    for run in ("a", "b"):
        ckpt, metrics, report = (workdir / f"{run}.ckpt", workdir / f"{run}.jsonl", workdir / f"{run}.json")
        assert main(["train", str(synth), str(ckpt), "--config", cfg, "--threads", "1", "--metrics", str(metrics)]) == 0
        assert main(["eval", str(ckpt), str(synth), "--config", cfg, "--threads", "1", "-o", str(report)]) == 0
        outputs.append((metrics.read_bytes(), report.read_bytes(), ckpt.read_bytes()))
    assert outputs[0] == outputs[1]
    lines = [json.loads(l) for l in outputs[0][0].decode().splitlines()]
    assert [l["type"] for l in lines] == ["config", "epoch", "epoch", "summary"]
    assert lines[0]["run_config"]["model"]["channels"] == [8, 8]
    report = json.loads(outputs[0][1])
    assert report["config"]["config_hash"] == lines[0]["config_hash"]
    assert report["config"]["checkpoint"]["seed"] == 0
    assert 0.0 <= report["accuracy"] <= 1.0
    _, meta = load_checkpoint(workdir / "a.ckpt")
    assert meta["run_config"] == lines[0]["run_config"]


def test_eval_twice_is_byte_identical(workdir, synth, capsys):
    ckpt = workdir / "a.ckpt"
    if not ckpt.exists():
        pytest.skip("depends on the training test")
    capsys.readouterr()
    main(["eval", str(ckpt), str(synth), "--config", str(workdir / "tiny.json")])
    first = capsys.readouterr().out
    main(["eval", str(ckpt), str(synth), "--config", str(workdir / "tiny.json")])
    assert capsys.readouterr().out == first


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "end_to_end" in out


def test_ablate_eight_rows(workdir, synth):
    out = workdir / "ablation.csv"
    assert main(["ablate", str(synth), str(out), "--config", str(workdir / "tiny.json"),
                 "--set", "train.epochs=1"]) == EXIT_OK
    text = out.read_text()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    rows = read_csv(text)
    assert [r["variant"] for r in rows] == [v.name for v in VARIANTS]
    assert len(rows) == 8 and rows[-1]["variant"] == "full"
    assert all(r["config"]["seed"] == 0 for r in rows)
    assert len({r["config_hash"] for r in rows}) == 8
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "missing.alca", str(tmp_path / "c.ckpt")]) == EXIT_DATA
    assert main(["synth", str(tmp_path / "s.alca"), "--set", "train.nway=3"]) == EXIT_CONFIG
    assert "train.nway" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "none.ckpt"), str(tmp_path / "none.alca")]) == EXIT_DATA
    (tmp_path / "junk.alca").write_bytes(b"junk")
    assert main(["train", str(tmp_path / "junk.alca"), str(tmp_path / "c.ckpt")]) == EXIT_DATA


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "alcagcn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("prep", "synth", "train", "eval", "gradcheck", "ablate"):
        assert cmd in out.stdout
