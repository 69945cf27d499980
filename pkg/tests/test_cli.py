import numpy as np
import pytest

from demansia.checkpoint import read_tensors
from demansia.cli import main

MINI_CFG = """
d_model = 16
n_layers = 1
image_size = 16
patch_size = 4
n_classes = 4
n_state = 2
batch_size = 4
epochs = 1
seed = 7
beta = 0.5
n_train = 16
n_eval = 8
"""


@pytest.fixture
def mini_cfg(tmp_path):
    path = tmp_path / "mini.cfg"
    path.write_text(MINI_CFG)
    return path


def read_csv_rows(path):
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_smoke_writes_artifacts(mini_cfg, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--config", str(mini_cfg), "--out", str(out)])
    assert rc == 0
    rows = read_csv_rows(out / "metrics.csv")
    assert len(rows) >= 2  # step-0 row plus an epoch row
    assert (out / "checkpoint.dmns").exists()


def test_train_beta_affects_only_auxiliary_term_at_init(mini_cfg, tmp_path):
    outs = {}
    for beta in ("0", "0.5"):
        out = tmp_path / f"b{beta}"
        rc = main(
            ["train", "--config", str(mini_cfg), "--out", str(out), "--beta", beta, "--epochs", "2"]
        )
        assert rc == 0
        outs[beta] = read_csv_rows(out / "metrics.csv")
    a, b = outs["0"], outs["0.5"]
    assert a[0]["cls_loss"] == b[0]["cls_loss"]  # identical init, identical probe batch
    assert a[0]["tl_loss"] == b[0]["tl_loss"]
    # once updates differ, the token-loss trajectories separate
    assert [r["tl_loss"] for r in a[1:]] != [r["tl_loss"] for r in b[1:]]


def test_train_unknown_flag_exits_2(mini_cfg):
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", str(mini_cfg), "--frobnicate", "1"])
    assert e.value.code == 2


def test_train_unknown_config_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(MINI_CFG + "mystery_knob = 3\n")
    rc = main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "mystery_knob" in capsys.readouterr().err


def test_train_missing_required_keys_exits_2(tmp_path, capsys):
    sparse = tmp_path / "sparse.cfg"
    sparse.write_text("d_model = 16\n")
    rc = main(["train", "--config", str(sparse), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "missing" in capsys.readouterr().err


def test_numeric_failure_maps_to_exit_3(mini_cfg, tmp_path, monkeypatch, capsys):
    from demansia import cli
    from demansia.errors import NumericError

    def explode(*args, **kwargs):
        raise NumericError("non-finite loss; first non-finite tensor: cls_token")

    monkeypatch.setattr(cli, "train", explode)
    rc = main(["train", "--config", str(mini_cfg), "--out", str(tmp_path / "x")])
    assert rc == 3
    assert "cls_token" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_roundtrip_and_fusion_rows(mini_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(mini_cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    rc = main(
        ["eval", "--checkpoint", str(out / "checkpoint.dmns"), "--seed", "3", "--n-samples", "16", "--fusion", "both"]
    )
    assert rc == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("fusion=")]
    assert len(lines) == 2
    assert lines[0].startswith("fusion=off") and lines[1].startswith("fusion=on")


def test_eval_fresh_model_is_near_chance(tmp_path, capsys):
    cfg = tmp_path / "tenway.cfg"
    cfg.write_text(
        "d_model = 16\nn_layers = 1\nimage_size = 16\npatch_size = 4\nn_classes = 10\n"
        "n_state = 2\nbatch_size = 4\nepochs = 0\nseed = 5\nn_train = 8\nn_eval = 8\n"
    )
    out = tmp_path / "fresh"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    rc = main(
        ["eval", "--checkpoint", str(out / "checkpoint.dmns"), "--seed", "9", "--n-samples", "300", "--fusion", "off"]
    )
    assert rc == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("fusion=off")][0]
    top1 = float(line.split("top1=")[1].split()[0])
    top5 = float(line.split("top5=")[1].split()[0])
    assert top1 <= 0.35  # near chance for 10 classes
    assert top5 >= top1


def test_eval_corrupt_checkpoint_exits_4(tmp_path):
    bad = tmp_path / "bad.dmns"
    bad.write_bytes(b"WRONG MAGIC AND THEN SOME")
    assert main(["eval", "--checkpoint", str(bad)]) == 4


def test_eval_missing_checkpoint_exits_4(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.dmns")]) == 4


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["scan", "kernel", "fusion"])
def test_check_suites_pass(kind, capsys):
    assert main(["check", kind]) == 0
    assert "pass" in capsys.readouterr().out


def test_check_unknown_suite_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["check", "telepathy"])
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def test_bench_attention_slope_and_csv(tmp_path, capsys):
    csv = tmp_path / "att.csv"
    rc = main(["bench", "attention", "--csv", str(csv)])
    assert rc == 0
    out = capsys.readouterr().out
    slope = float(out.split("flop log-log slope: ")[1].split()[0])
    assert 1.9 <= slope <= 2.1
    lines = csv.read_text().strip().splitlines()
    assert lines[0].startswith("# wall_seconds:")
    assert lines[1] == "length,flops"
    assert len(lines) == 7  # header comment + column row + 5 records


def test_bench_scan_slope(capsys):
    rc = main(["bench", "scan"])
    assert rc == 0
    slope = float(capsys.readouterr().out.split("flop log-log slope: ")[1].split()[0])
    assert 0.95 <= slope <= 1.05


def test_bench_csv_body_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["bench", "scan", "--csv", str(a)]) == 0
    assert main(["bench", "scan", "--csv", str(b)]) == 0
    body = lambda p: p.read_text().splitlines()[1:]  # timing lives in the header line
    assert body(a) == body(b)


def test_bench_rejects_thin_length_grids(capsys):
    assert main(["bench", "scan", "--lengths", "64", "128", "256"]) == 2
    assert main(["bench", "scan", "--lengths", "64", "65", "66", "67", "68"]) == 2


# ---------------------------------------------------------------------------
# export-dataset
# ---------------------------------------------------------------------------


def test_export_dataset_container(tmp_path):
    out = tmp_path / "data.dmns"
    rc = main(["export-dataset", "--seed", "3", "--n-samples", "6", "--image-size", "16", "--n-classes", "5", "--out", str(out)])
    assert rc == 0
    blob = read_tensors(out)
    assert blob["images"].shape == (6, 16, 16, 3)
    assert blob["labels"].shape == (6,)
    assert blob["maps"].shape == (6, 16, 16, 5)
    assert np.all(blob["maps"].sum(axis=3) == 1.0)
