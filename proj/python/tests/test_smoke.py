import json
import os
from pathlib import Path

import numpy as np
import pytest

import adabldm

SOURCE_DIR = Path(os.environ.get("ADABLDM_SOURCE_DIR", Path(__file__).resolve().parents[2]))


def test_metrics_perfect_and_invariant():
    rng = np.random.default_rng(0)
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[1:3, 1:4] = 1
    perfect = mask.astype(float)
    m = adabldm.evaluate([perfect], [mask])
    assert m == pytest.approx({"pixel_auc": 1.0, "pro": 1.0, "ap": 1.0, "iap": 1.0, "iap_at_k": 1.0})

    scores = rng.random((6, 6)) + 0.4 * mask
    before = adabldm.evaluate([scores], [mask])
    after = adabldm.evaluate([np.exp(3 * scores) - 2], [mask])
    assert before == after


def test_threshold_sweep_is_strictest_first():
    mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    curve = adabldm.threshold_sweep([np.array([[0.1, 0.9], [0.5, 0.3]])], [mask])
    assert list(curve["threshold"]) == [0.9, 0.5, 0.3, 0.1]
    assert curve["recall"][-1] == 1.0


def test_trimap_round_trip_and_latent_mask():
    fg = np.ones((32, 32), dtype=np.uint8)
    defect = np.zeros((32, 32), dtype=np.uint8)
    defect[10:13, 20:22] = 1
    t = adabldm.build_trimap(fg, defect)
    assert set(np.unique(t)) == {0.5, 1.0}
    fg2, defect2 = adabldm.split_trimap(t)
    assert (fg2 == fg).all() and (defect2 == defect).all()
    latent = adabldm.dilate_downsample(defect, 8, 8)
    assert latent.shape == (8, 8)
    assert latent[2, 5] == 1 and latent.sum() >= 1

    outside = defect.copy()
    with pytest.raises(adabldm.PreconditionError):
        adabldm.build_trimap(np.zeros_like(fg), outside)


def test_synth_defect_mask_stays_inside_foreground():
    fg = np.zeros((32, 32), dtype=np.uint8)
    fg[4:28, 4:28] = 1
    seed = np.zeros((32, 32), dtype=np.uint8)
    seed[0:3, 0:4] = 1
    for s in range(20):
        mask, index = adabldm.synth_defect_mask([seed], fg, s)
        assert index == 0
        assert mask.sum() > 0
        assert not (mask & (1 - fg)).any()


def test_schedule_round_trip():
    sched = adabldm.NoiseSchedule()
    assert sched.train_steps == 1000
    assert np.all(np.diff(sched.alpha_bars) < 0)
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((1, 4, 8, 8))
    eps = rng.standard_normal((1, 4, 8, 8))
    zt = sched.q_sample(z0, 600, eps)
    back = sched.ddim_step(zt, eps, 600, -1)
    np.testing.assert_allclose(back, z0, atol=1e-9)
    steps = adabldm.plan_timesteps(1000, 50, 30, 5)
    assert len(steps) == 85 and steps == sorted(steps, reverse=True)


def test_toy_benchmark_shapes():
    b = adabldm.make_toy_benchmark({"image_size": 32, "train_ok": 3, "seed_ng": 2, "test_ok": 1, "test_ng": 2}, seed=5)
    assert len(b["train_ok"]) == 3 and b["train_ok"][0].shape == (3, 32, 32)
    assert len(b["seed_masks"]) == 2 and b["seed_masks"][0].any()
    again = adabldm.make_toy_benchmark({"image_size": 32, "train_ok": 3, "seed_ng": 2, "test_ok": 1, "test_ng": 2}, seed=5)
    assert all((x == y).all() for x, y in zip(b["test_images"], again["test_images"]))
    with pytest.raises(adabldm.Error):
        adabldm.make_toy_benchmark({"no_such_key": 1})


def test_config_rejects_unknown_keys():
    with pytest.raises(adabldm.UsageError):
        adabldm.config_hash({"seed": 1, "bogus": True})
    cfg = adabldm.load_config(SOURCE_DIR / "configs" / "tiny.json")
    assert cfg["geometry"] == "tiny"
    assert adabldm.config_hash(cfg) == adabldm.config_hash(json.dumps(cfg))


def test_tiny_pipeline_and_replay(tmp_path):
    cfg = adabldm.load_config(SOURCE_DIR / "configs" / "tiny.json")
    cfg["dataset"]["count"] = 2
    root = str(tmp_path)
    bench = adabldm.run("make-bench", cfg, run_root=root)
    cfg["inputs"]["benchmark"] = bench["run_dir"]
    train = adabldm.run("train", cfg, run_root=root)
    cfg["inputs"]["checkpoint"] = train["run_dir"]
    gen = adabldm.run("generate", cfg, run_root=root)
    data = Path(gen["run_dir"]) / "dataset" / "stripes_blob"
    assert len(list((data / "test" / "defect").glob("*.png"))) == 2

    replay = adabldm.run("generate", replay=str(Path(gen["run_dir"]) / "manifest.json"), run_root=root)
    assert replay["replay_match"] is True and replay["digest"] == gen["digest"]

    model = adabldm.Model.load(Path(train["run_dir"]) / "checkpoints" / "stripes_blob")
    assert model.ready and model.codec_mae > 0
    b = adabldm.make_toy_benchmark(cfg["categories"][0], seed=3)
    x = b["train_ok"][0]
    fg = np.ones((32, 32), dtype=np.uint8)
    defect = b["seed_masks"][0]
    out = model.generate(x, fg, defect, "stripes_blob", seed=4, free_steps=4, latent_steps=3, image_steps=2,
                         adapt_steps=5)
    assert out["image"].shape == (3, 32, 32)
    assert out["li_final"] <= out["li_initial"]

    with pytest.raises(adabldm.UsageError):
        empty = dict(cfg, inputs=dict(cfg["inputs"], dataset=str(tmp_path / "nowhere")))
        (tmp_path / "nowhere" / "stripes_blob").mkdir(parents=True)
        adabldm.run("evaluate", empty, run_root=root)
