import csv
import json

import cv2
import numpy as np
import pytest

from dvp import cli, data
from dvp.data import VideoSequence
from dvp.synthetic import identity_pair, moving_square_video

SMALL_NET = "[network]\ndepth = 2\nbase_channels = 4\n"


def _write_video(frames, directory):
    data.save_sequence(VideoSequence(tuple(frames)), directory)
    return str(directory)


def _small_video(tmp_path, n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    frames = [rng.random((size, size, 3)) for _ in range(n)]
    processed = [np.clip(f + rng.uniform(-0.1, 0.1), 0, 1) for f in frames]
    return _write_video(frames, tmp_path / "in"), _write_video(processed, tmp_path / "proc")


def _config(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


@pytest.fixture
def small(tmp_path):
    inp, proc = _small_video(tmp_path)
    return tmp_path, inp, proc, _config(tmp_path, SMALL_NET)


# -- stabilize -------------------------------------------------------------------


@pytest.mark.slow
def test_identity_fixture(tmp_path):
    pv = identity_pair(5, 32)
    inp = _write_video(pv.inputs.frames, tmp_path / "in")
    out = tmp_path / "out"
    code = cli.main(["stabilize", "--input-dir", inp, "--processed-dir", inp,
                     "--out-dir", str(out), "--epochs", "120"])
    assert code == 0
    got = data.load_sequence(out / "frames_main")
    want = data.load_sequence(inp)
    assert np.abs(got.stack() - want.stack()).mean() < 0.02


def test_stabilize_layout(small):
    tmp_path, inp, proc, cfg = small
    out = tmp_path / "out"
    code = cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--out-dir", str(out), "--epochs", "2", "--flow-source", "zero"])
    assert code == 0
    for sub in cli.SUBDIRS:
        assert (out / sub).is_dir()
    assert len(list((out / "frames_main").glob("*.png"))) == 4
    assert (out / "checkpoints" / "clip_000.ckpt").exists()
    assert (out / "metrics" / "metrics.csv").exists()
    assert (out / "plots" / "mean_intensity.png").exists()
    rows = list(csv.DictReader(open(out / "metrics" / "loss.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_stabilize_irt_writes_minor_frames(small):
    tmp_path, inp, proc, cfg = small
    out = tmp_path / "out"
    assert cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--out-dir", str(out), "--epochs", "1", "--irt"]) == 0
    assert len(list((out / "frames_minor").glob("*.png"))) == 4


def test_mismatched_frame_counts(tmp_path):
    rng = np.random.default_rng(0)
    inp = _write_video([rng.random((16, 16, 3)) for _ in range(4)], tmp_path / "in")
    proc = _write_video([rng.random((16, 16, 3)) for _ in range(3)], tmp_path / "proc")
    assert cli.main(["stabilize", "--input-dir", inp, "--processed-dir", proc,
                     "--out-dir", str(tmp_path / "out")]) == 3


def test_nan_processed_frame(tmp_path):
    for name in ("in", "proc"):
        (tmp_path / name).mkdir()
        for t in range(3):
            f = np.full((16, 16, 3), 0.5, np.float32)
            if name == "proc" and t == 1:
                f[4, 4, 0] = np.nan
            cv2.imwrite(str(tmp_path / name / f"frame_{t:03d}.tiff"), f)
    cfg = _config(tmp_path, "[run]\npattern = *.tiff\n")
    code = cli.main(["stabilize", "--config", cfg, "--input-dir", str(tmp_path / "in"),
                     "--processed-dir", str(tmp_path / "proc"), "--out-dir", str(tmp_path / "out")])
    assert code == 3


def test_missing_input_dir(tmp_path):
    assert cli.main(["stabilize", "--input-dir", str(tmp_path / "nope"), "--processed-dir",
                     str(tmp_path / "nope"), "--out-dir", str(tmp_path / "out")]) == 3


def test_no_input_dir_is_config_error(tmp_path):
    assert cli.main(["stabilize", "--out-dir", str(tmp_path / "out")]) == 2


# -- config ------------------------------------------------------------------------


def test_unknown_config_key(small):
    tmp_path, inp, proc, _ = small
    cfg = _config(tmp_path, "[train]\nepochz = 3\n")
    assert cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--out-dir", str(tmp_path / "out")]) == 2


def test_unknown_config_section(tmp_path):
    with pytest.raises(cli.ConfigError, match="unknown config section"):
        cli.read_config(_config(tmp_path, "[trainer]\nepochs = 3\n"))


def test_bad_config_value(tmp_path):
    with pytest.raises(cli.ConfigError, match="epochs"):
        cli.read_config(_config(tmp_path, "[train]\nepochs = many\n"))


def test_flag_overrides_config(small):
    tmp_path, inp, proc, _ = small
    cfg = _config(tmp_path, SMALL_NET + "[train]\nepochs = 3\n")
    out = tmp_path / "out"
    assert cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--out-dir", str(out), "--epochs", "1"]) == 0
    assert len(list(csv.DictReader(open(out / "metrics" / "loss.csv")))) == 1
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == "1"


def test_run_manifest(small):
    tmp_path, inp, proc, cfg = small
    out = tmp_path / "out"
    cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
              "--out-dir", str(out), "--epochs", "1", "--seed", "7"])
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert manifest["seed"] == 7
    assert manifest["command"] == "stabilize"
    assert manifest["version"] == cli.__version__
    assert manifest["config"]["network"]["base_channels"] == "4"


def test_help_lists_every_default(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for sec, keys in cli.SCHEMA.items():
        assert f"[{sec}]" in text
        for k in keys:
            assert f"    {k} = " in text


def test_deterministic_csv(small):
    tmp_path, inp, proc, cfg = small
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["stabilize", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                         "--out-dir", str(out), "--epochs", "2", "--flow-source", "zero"]) == 0
        outs.append(out / "metrics")
    for f in ("metrics.csv", "loss.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


# -- evaluate ---------------------------------------------------------------------


def test_evaluate_identical_static(tmp_path, capsys):
    frame = np.random.default_rng(0).random((16, 16, 3))
    d = _write_video([frame] * 3, tmp_path / "v")
    out = tmp_path / "out"
    assert cli.main(["evaluate", "--frames-dir", d, "--input-dir", d, "--processed-dir", d,
                     "--flow-source", "zero", "--out-dir", str(out)]) == 0
    report = json.loads((out / "metrics" / "metrics.json").read_text())
    assert report["e_warp"] == 0.0
    assert report["f_data"] == 100.0
    assert "e_warp" in capsys.readouterr().out


def test_evaluate_needs_flow(tmp_path):
    d = _write_video([np.zeros((16, 16, 3))] * 2, tmp_path / "v")
    assert cli.main(["evaluate", "--frames-dir", d, "--input-dir", d,
                     "--out-dir", str(tmp_path / "out")]) == 2


# -- propagate --------------------------------------------------------------------


def test_propagate_without_references(small):
    tmp_path, inp, proc, cfg = small
    assert cli.main(["propagate", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--references", "", "--out-dir", str(tmp_path / "out")]) == 2


def test_propagate_duplicate_references(small):
    tmp_path, inp, proc, cfg = small
    assert cli.main(["propagate", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--references", "1,1", "--out-dir", str(tmp_path / "out")]) == 2


def test_propagate_color(tmp_path):
    rng = np.random.default_rng(0)
    frames = [rng.random((16, 16, 3)) for _ in range(3)]
    inp = _write_video(frames, tmp_path / "in")
    ref = _write_video(frames[:1], tmp_path / "ref")
    cfg = _config(tmp_path, SMALL_NET)
    out = tmp_path / "out"
    assert cli.main(["propagate", "--config", cfg, "--input-dir", inp, "--processed-dir", ref,
                     "--K", "2", "--out-dir", str(out)]) == 0
    assert len(list((out / "frames_main").glob("*.png"))) == 3
    assert (out / "checkpoints" / "final.ckpt").exists()


def test_propagate_segmentation(tmp_path):
    inputs, labels = moving_square_video(3, 16, side=6)
    inp = _write_video(inputs.frames, tmp_path / "in")
    (tmp_path / "ref").mkdir()
    cv2.imwrite(str(tmp_path / "ref" / "mask_000.png"), np.argmax(labels[0], 2).astype(np.uint8))
    cfg = _config(tmp_path, SMALL_NET)
    out = tmp_path / "out"
    assert cli.main(["propagate", "--config", cfg, "--input-dir", inp,
                     "--processed-dir", str(tmp_path / "ref"), "--task", "segmentation",
                     "--K", "2", "--out-dir", str(out)]) == 0
    masks = sorted((out / "frames_main").glob("*.png"))
    assert len(masks) == 3
    assert set(np.unique(cv2.imread(str(masks[0]), cv2.IMREAD_UNCHANGED))) <= {0, 1}


def test_propagate_reference_count_mismatch(small):
    tmp_path, inp, proc, cfg = small
    assert cli.main(["propagate", "--config", cfg, "--input-dir", inp, "--processed-dir", proc,
                     "--references", "0", "--out-dir", str(tmp_path / "out")]) == 3


# -- toy ------------------------------------------------------------------------------


def test_toy_default_artifacts(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["toy", "--out-dir", str(out)]) == 0
    pngs = sorted(p.name for p in (out / "plots").glob("*.png"))
    assert pngs == ["toy_unimodal_iter00100.png", "toy_unimodal_iter00200.png",
                    "toy_unimodal_iter01000.png"]
    assert (out / "metrics" / "toy_unimodal.csv").exists()
    summary = json.loads((out / "metrics" / "toy_unimodal.json").read_text())
    assert set(summary["snapshots"]) == {"100", "200", "1000"}


def test_toy_bimodal_irt_csv_is_deterministic(tmp_path):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["toy", "--bimodal", "--irt", "--out-dir", str(out)]) == 0
        texts.append((out / "metrics" / "toy_bimodal_irt.csv").read_bytes())
    assert texts[0] == texts[1]


def test_toy_bad_config(tmp_path):
    cfg = _config(tmp_path, "[toy]\nsnapshot_iters = 300, 100\n")
    assert cli.main(["toy", "--config", cfg, "--out-dir", str(tmp_path / "out")]) == 2
