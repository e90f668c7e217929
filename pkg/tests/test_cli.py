import numpy as np
import pytest

from glfcr.cli import main
from glfcr.data import SceneDataset
from glfcr.gtns import read_tensor, write_tensor
from glfcr.model import (GlfcrModel, ModelConfig, count_params,
                         load_checkpoint, save_checkpoint)

TOY_FLAGS = ["--channels", "4", "--depth", "1", "--n-dense", "2",
             "--window", "8", "--heads", "2", "--filter-size", "3"]


def synth(tmp_path, name="data", scenes=3, size=16, coverage="0.4", seed="0"):
    out = tmp_path / name
    rc = main(["synth", "--out", str(out), "--scenes", str(scenes),
               "--size", str(size), "--coverage", coverage, "--seed", seed])
    assert rc == 0
    return out


def train(tmp_path, data, name="run", extra=()):
    out = tmp_path / name
    rc = main(["train", "--data", str(data), "--out", str(out),
               "--epochs", "2", "--batch", "2", "--crop", "16",
               "--lr0", "1e-3", "--decay-every", "1000",
               *TOY_FLAGS, *extra])
    return rc, out


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_scenes_and_manifest(tmp_path):
    out = synth(tmp_path, scenes=8, size=16, coverage="0.4", seed="7")
    ds = SceneDataset(out)
    assert len(ds) == 8
    assert (out / "run_manifest.txt").exists()
    rows = (out / "manifest.tsv").read_text().splitlines()
    assert len(rows) == 9  # header + 8 scenes


def test_synth_rerun_byte_identical(tmp_path):
    a = synth(tmp_path, "a", scenes=3, seed="5", coverage="0.2:0.8")
    b = synth(tmp_path, "b", scenes=3, seed="5", coverage="0.2:0.8")
    for rel in ["manifest.tsv"] + [f"scene_{i:06d}/{n}.gtns" for i in range(3)
                                   for n in ("s1", "s2", "s2_cloudy", "mask")]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_synth_invalid_coverage_usage_error(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "--coverage", "1.5"])
    assert rc == 2
    assert "coverage" in capsys.readouterr().err


def test_synth_rerun_from_manifest_reproduces(tmp_path):
    a = synth(tmp_path, "a", scenes=2, seed="9")
    out_b = tmp_path / "b"
    rc = main(["synth", "--out", str(out_b), "--config",
               str(a / "run_manifest.txt")])
    assert rc == 0
    for i in range(2):
        rel = f"scene_{i:06d}/s2.gtns"
        assert (a / rel).read_bytes() == (out_b / rel).read_bytes()


# ---------------------------------------------------------------------------
# train


def test_train_smoke_and_trace(tmp_path):
    data = synth(tmp_path)
    rc, out = train(tmp_path, data)
    assert rc == 0
    lines = (out / "trace.tsv").read_text().splitlines()
    losses = [float(l.split("\t")[3]) for l in lines[1:]]
    assert losses[-1] < losses[0]
    assert (out / "ckpt_last.gckp").exists()
    manifest = (out / "run_manifest.txt").read_text()
    assert "command=train" in manifest and "wall_clock_s=" in manifest


def test_train_variant_parameter_audit(tmp_path):
    data = synth(tmp_path)
    rc, out = train(tmp_path, data, "full_run", ["--variant", "full"])
    assert rc == 0
    rc, out2 = train(tmp_path, data, "nosar_run", ["--variant", "no_sar"])
    assert rc == 0
    full_model, _, _ = load_checkpoint(out / "ckpt_last.gckp")
    nosar_model, _, _ = load_checkpoint(out2 / "ckpt_last.gckp")
    assert not any(".sar" in n for n in nosar_model.store.names())
    n_full = count_params(full_model.config)
    n_nosar = count_params(nosar_model.config)
    assert n_nosar < n_full
    assert f"n_params={n_full}" in (out / "run_manifest.txt").read_text()


def test_train_zero_lr_is_frozen(tmp_path):
    data = synth(tmp_path)
    rc, out = train(tmp_path, data, "frozen", ["--lr0", "0", "--seed", "3"])
    assert rc == 0
    trained, _, _ = load_checkpoint(out / "ckpt_last.gckp")
    fresh = GlfcrModel.build(trained.config, seed=3, dtype=np.float32)
    for name, node in fresh.store.items():
        assert np.array_equal(node.value, trained.store[name].value), name


def test_train_missing_dataset_exit_2(tmp_path, capsys):
    rc, _ = train(tmp_path, tmp_path / "nope")
    assert rc == 2
    assert "dataset" in capsys.readouterr().err


def test_train_nan_abort_exit_3(tmp_path, capsys):
    data = synth(tmp_path)
    rc, out = train(tmp_path, data, "seed_run")
    assert rc == 0
    model, extras, meta = load_checkpoint(out / "ckpt_last.gckp")
    model.store["head.out.w"].value[0, 0, 0, 0] = np.nan
    bad = tmp_path / "bad.gckp"
    save_checkpoint(bad, model, extra_arrays=extras, meta=meta)
    rc = main(["train", "--data", str(data), "--out", str(tmp_path / "resumed"),
               "--epochs", "4", "--batch", "2", "--crop", "16",
               "--decay-every", "1000", *TOY_FLAGS, "--resume", str(bad)])
    assert rc == 3
    assert "step" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def make_zero_head_ckpt(tmp_path, name="zero.gckp", **cfg_kw):
    cfg = ModelConfig(channels=4, depth=1, n_dense=2, window=8, heads=2,
                      filter_size=3, **cfg_kw)
    model = GlfcrModel.build(cfg, seed=0, dtype=np.float32)
    model.zero_head()
    path = tmp_path / name
    save_checkpoint(path, model)
    return path


def test_eval_ground_truth_against_itself(tmp_path, capsys):
    data = synth(tmp_path, "clear", scenes=2, coverage="0.0")
    ckpt = make_zero_head_ckpt(tmp_path)
    out = tmp_path / "eval"
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
               "--out", str(out)])
    assert rc == 0
    rows = (out / "per_scene.tsv").read_text().splitlines()[1:]
    for row in rows:
        _, _, p, s, a, m = row.split("\t")
        assert p == "inf" and float(s) == 1.0
        assert abs(float(a)) < 1e-8 and float(m) == 0.0


def test_eval_zero_head_mae_oracle_and_bins(tmp_path):
    data = synth(tmp_path, "cloudy", scenes=4, coverage="0.2:0.8", seed="3")
    ckpt = make_zero_head_ckpt(tmp_path)
    out = tmp_path / "eval2"
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out",
               str(out), "--dump-predictions"])
    assert rc == 0
    ds = SceneDataset(data)
    rows = (out / "per_scene.tsv").read_text().splitlines()[1:]
    assert len(rows) == 4
    for i, row in enumerate(rows):
        scene = ds[i]
        mae_val = float(row.split("\t")[5])
        oracle = np.mean(np.abs(scene.s2_cloudy.astype(np.float64)
                                - scene.s2_cloudfree.astype(np.float64)))
        assert abs(mae_val - oracle) < 1e-9
        pred = read_tensor(out / f"pred_{i:06d}.gtns")
        assert np.allclose(pred, scene.s2_cloudy, atol=1e-7)
    tsv = (out / "report.tsv").read_text()
    counts = [int(line.split("\t")[3]) for line in tsv.splitlines()[1:]
              if line.split("\t")[0] == "psnr" and line.split("\t")[1] != "all"]
    assert sum(counts) == 4


def test_eval_checkpoint_mismatch_exit_2(tmp_path, capsys):
    data = synth(tmp_path, "d", scenes=1)
    ckpt = make_zero_head_ckpt(tmp_path)
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
               "--out", str(tmp_path / "e"), "--channels", "8"])
    assert rc == 2
    assert "channels" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# infer


def test_infer_matches_eval_metrics(tmp_path, capsys):
    data = synth(tmp_path, "d", scenes=1, coverage="0.5", seed="11")
    ckpt = make_zero_head_ckpt(tmp_path)
    scene_dir = data / "scene_000000"
    pred_path = tmp_path / "pred.gtns"
    rc = main(["infer", "--ckpt", str(ckpt),
               "--optical", str(scene_dir / "s2_cloudy.gtns"),
               "--sar", str(scene_dir / "s1.gtns"),
               "--cloudfree", str(scene_dir / "s2.gtns"),
               "--mask", str(scene_dir / "mask.gtns"),
               "--out", str(pred_path)])
    assert rc == 0
    printed = capsys.readouterr().out
    mae_printed = float(printed.split("mae=")[1].split()[0])

    out = tmp_path / "ev"
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out)])
    assert rc == 0
    mae_eval = float((out / "per_scene.tsv").read_text().splitlines()[1].split("\t")[5])
    assert abs(mae_printed - mae_eval) < 1e-6  # printed at 6 decimals
    assert read_tensor(pred_path).shape == (13, 16, 16)


def test_infer_missing_sar_usage_error(tmp_path, capsys):
    data = synth(tmp_path, "d", scenes=1)
    ckpt = make_zero_head_ckpt(tmp_path)
    rc = main(["infer", "--ckpt", str(ckpt),
               "--optical", str(data / "scene_000000" / "s2_cloudy.gtns"),
               "--out", str(tmp_path / "p.gtns")])
    assert rc == 2
    assert "--sar" in capsys.readouterr().err


def test_infer_no_sar_variant_without_sar_succeeds(tmp_path):
    data = synth(tmp_path, "d", scenes=1)
    ckpt = make_zero_head_ckpt(tmp_path, name="nosar.gckp", variant="no_sar")
    rc = main(["infer", "--ckpt", str(ckpt),
               "--optical", str(data / "scene_000000" / "s2_cloudy.gtns"),
               "--out", str(tmp_path / "p.gtns")])
    assert rc == 0


def test_infer_indivisible_size_suggests_pad(tmp_path, capsys):
    ckpt = make_zero_head_ckpt(tmp_path)
    odd = tmp_path / "odd.gtns"
    write_tensor(odd, np.zeros((13, 12, 12), dtype=np.float32))
    sar = tmp_path / "sar.gtns"
    write_tensor(sar, np.zeros((2, 12, 12), dtype=np.float32))
    rc = main(["infer", "--ckpt", str(ckpt), "--optical", str(odd),
               "--sar", str(sar), "--out", str(tmp_path / "p.gtns")])
    assert rc == 2
    assert "pad to 16x16" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("scenes=2\nbogus_key=1\n")
    rc = main(["synth", "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert rc == 2
    assert "bogus_key" in capsys.readouterr().err
