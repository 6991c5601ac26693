import json

import numpy as np
import pytest

from dcn.cli import main
from dcn.synth import DatasetManifest, SplitSpec, read_pnm, save_manifest

TINY_TOML = """
[train]
batch_size = 4
steps = 2
lr = 0.001
checkpoint_every = 1

[model]
height = 16
width = 16
grid_rows = 2
grid_cols = 2
channels = [2, 3]
restore_channels = 3
reflection_hidden = 3
"""


@pytest.fixture
def workspace(tmp_path):
    manifest = DatasetManifest(seed=1, num_domains=3, height=16, width=16, splits={
        "train": SplitSpec(12, 0.5, [0, 1]),
        "dev": SplitSpec(8, 0.5, [0, 1]),
        "test": SplitSpec(8, 0.5, [0, 1]),
        "heldout": SplitSpec(8, 0.5, [2]),
    }).validate()
    m = save_manifest(manifest, tmp_path / "manifest.json")
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY_TOML + f'\n[data]\nmanifest = "{m}"\noutput_dir = "{tmp_path / "run"}"\n')
    return tmp_path, m, cfg


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 2


def test_invalid_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nsteps = 0\n")
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", str(bad)])
    assert info.value.code == 2


def test_missing_checkpoint_is_runtime_error(workspace):
    tmp, m, _ = workspace
    assert main(["eval", "--checkpoint", str(tmp / "nope.dcn"), "--manifest", str(m)]) == 1


def test_gen_data(workspace):
    tmp, m, _ = workspace
    assert main(["gen-data", "--manifest", str(m), "--out", str(tmp / "data"), "--previews", "1"]) == 0
    arrays = np.load(tmp / "data" / "train.npz")
    assert arrays["images"].shape == (12, 3, 16, 16)
    assert (arrays["labels"] == 1).sum() == 6
    assert json.loads((tmp / "data" / "manifest.json").read_text())["seed"] == 1
    assert len(list((tmp / "data").glob("*.ppm"))) == 4


def test_oracle_eval_reports_zero_acer(workspace, capsys):
    tmp, m, _ = workspace
    report = tmp / "reports.jsonl"
    for protocol in ("intra", "cross"):
        assert main(["eval", "--oracle", "--manifest", str(m), "--protocol", protocol,
                     "--report", str(report)]) == 0
    lines = [json.loads(x) for x in report.read_text().splitlines()]
    assert [x["acer"] for x in lines] == [0.0, 0.0]
    assert lines[1]["test_split"] == "heldout"


def test_train_then_eval_with_dumps(workspace):
    tmp, m, cfg = workspace
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    ckpt = tmp / "run" / "last.dcn"
    assert ckpt.exists()
    args = ["eval", "--checkpoint", str(ckpt), "--manifest", str(m), "--protocol", "intra",
            "--dump-scores", str(tmp / "s.csv"), "--dump-sim", str(tmp / "sim.csv"),
            "--dump-features", str(tmp / "f.csv")]
    assert main(args) == 0
    assert len((tmp / "s.csv").read_text().splitlines()) == 9
    assert len((tmp / "sim.csv").read_text().splitlines()) == 1 + 8 * 16
    assert (tmp / "f.csv").read_text().splitlines()[0] == "sample_id,slot,f0,f1,f2"


def test_train_override_and_resume(workspace):
    tmp, _, cfg = workspace
    assert main(["train", "--config", str(cfg), "--quiet", "--set", "steps=1"]) == 0
    assert main(["train", "--config", str(cfg), "--quiet", "--resume", str(tmp / "run" / "last.dcn")]) == 0
    records = [json.loads(x) for x in (tmp / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if "step" in r and "event" not in r] == [1, 2]


def test_augment_preview_identity_is_bit_exact(workspace):
    tmp, _, cfg = workspace
    out = tmp / "preview"
    assert main(["augment-preview", "--config", str(cfg), "--seed", "3", "--out", str(out),
                 "--identity", "--no-augment"]) == 0
    for k in range(4):
        before = (out / f"view{k:02d}_before.ppm").read_bytes()
        assert before == (out / f"view{k:02d}_after.ppm").read_bytes()
    sidecar = json.loads((out / "provenance.json").read_text())
    assert len(sidecar["views"]) == 4


def test_augment_preview_overlay(workspace):
    tmp, _, cfg = workspace
    out = tmp / "overlay"
    assert main(["augment-preview", "--config", str(cfg), "--out", str(out), "--count", "1",
                 "--identity", "--no-augment", "--overlay"]) == 0
    after = read_pnm(out / "view00_after.ppm")
    assert np.all(after[:, 8, :] == [[255], [255], [0]])


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "passed" in capsys.readouterr().out
