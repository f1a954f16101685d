import csv
import json
import time

import numpy as np
import pytest

from mpgd.diffusion import make_schedule
from mpgd.harness import (
    CSV_COLUMNS,
    RESTORE_SEED_OFFSET,
    ResultRow,
    SweepConfig,
    build_denoiser,
    degrade_dataset,
    load_config,
    load_pairs,
    monotonicity_check,
    replay_cell,
    run_sweep,
    time_restore,
)
from mpgd.imagecore import load_image
from mpgd.operators import NoiseSpec, build_operator

from conftest import make_dataset


def small_config(data_dir, **kw):
    base = dict(task="sr4x", inner_steps_list=[3], ddim_steps_list=[5], scales_list=[7.5],
                dataset_dir=str(data_dir), working_side=16, warmup_runs=0)
    base.update(kw)
    return SweepConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


NON_TIMING = [c for c in CSV_COLUMNS if c != "time_ms"]


# -- config -------------------------------------------------------------------


def test_default_grid_is_45():
    cfg = SweepConfig()
    assert cfg.grid_size == 45
    assert len(list(cfg.grid())) == 45
    assert SweepConfig(task="both").tasks == ["sr4x", "deblur"]


@pytest.mark.parametrize("bad", [dict(task="inpaint"), dict(inner_steps_list=[]),
                                 dict(warmup_runs=-1)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        SweepConfig(**bad)


def test_load_config_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("task: deblur\ninner_steps_list: [1, 15]\nseed: 9\n")
    cfg = load_config(p)
    assert cfg.tasks == ["deblur"] and cfg.inner_steps_list == [1, 15] and cfg.seed == 9
    p.write_text("tsak: deblur\n")
    with pytest.raises(ValueError, match="tsak"):
        load_config(p)


# -- degrade ------------------------------------------------------------------


@pytest.mark.parametrize("task, out_side", [("sr4x", 4), ("deblur", 16)])
def test_degrade_shapes_and_meta(tmp_path, dataset3, task, out_side):
    out = degrade_dataset(dataset3, task, NoiseSpec(0.05, 7), 16, tmp_path / "pairs")
    meta, pairs = load_pairs(out)
    assert meta["task"] == task and meta["sigma"] == 0.05 and meta["seed"] == 7
    assert [e["seed"] for e in meta["files"]] == [7, 8, 9]
    assert len(pairs) == 3
    for _, gt, y in pairs:
        assert gt.shape == (16, 16, 3)
        assert y.shape == (out_side, out_side, 3)
    assert (out / "deg" / "img00.png").exists()


def test_degrade_noise_free_matches_operator(tmp_path, dataset3):
    out = degrade_dataset(dataset3, "sr4x", NoiseSpec(0.0, 0), 16, tmp_path / "p")
    _, pairs = load_pairs(out)
    op = build_operator("sr4x", (16, 16, 3))
    for _, gt, y in pairs:
        np.testing.assert_array_equal(y, op.apply(gt))


def test_degrade_deterministic(tmp_path, dataset3):
    a = degrade_dataset(dataset3, "deblur", NoiseSpec(0.05, 1), 16, tmp_path / "a")
    b = degrade_dataset(dataset3, "deblur", NoiseSpec(0.05, 1), 16, tmp_path / "b", jobs=3)
    for name in ("img00", "img01", "img02"):
        assert (a / "deg" / f"{name}.npy").read_bytes() == (b / "deg" / f"{name}.npy").read_bytes()
        assert (a / "gt" / f"{name}.png").read_bytes() == (b / "gt" / f"{name}.png").read_bytes()


def test_degrade_skips_unreadable(tmp_path, dataset3):
    (dataset3 / "broken.png").write_bytes(b"garbage")
    out = degrade_dataset(dataset3, "sr4x", NoiseSpec(0.05, 0), 16, tmp_path / "p")
    meta = json.loads((out / "meta.json").read_text())
    assert [s["file"] for s in meta["skipped"]] == ["broken.png"]
    assert len(meta["files"]) == 3


def test_degrade_empty_and_missing(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        degrade_dataset(tmp_path / "empty", "sr4x", NoiseSpec(), 16, tmp_path / "o")
    with pytest.raises(FileNotFoundError):
        degrade_dataset(tmp_path / "nope", "sr4x", NoiseSpec(), 16, tmp_path / "o")


def test_degrade_grayscale(tmp_path):
    data = make_dataset(tmp_path / "g", 2, channels=1)
    out = degrade_dataset(data, "sr4x", NoiseSpec(0.05, 0), 16, tmp_path / "p")
    _, pairs = load_pairs(out)
    assert pairs[0][1].shape == (16, 16, 1) and pairs[0][2].shape == (4, 4, 1)


# -- priors and timing --------------------------------------------------------


def test_build_denoiser_kinds(rng):
    sched = make_schedule()
    imgs = [rng.random((8, 8, 1)) for _ in range(6)]
    den, proj = build_denoiser({"kind": "gaussian"}, imgs, sched)
    np.testing.assert_allclose(den.mean, np.mean(imgs, axis=0))
    den, proj = build_denoiser({"kind": "projector-augmented", "k": 3}, imgs, sched)
    assert proj.k == 3
    den, _ = build_denoiser({"kind": "gmm", "components": 2}, imgs, sched)
    assert abs(den.weights.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        build_denoiser({"kind": "unet"}, imgs, sched)


def test_time_restore_warmups():
    calls = []
    ms = time_restore(lambda: calls.append(1), warmup_runs=2)
    assert len(calls) == 3 and ms >= 0


def test_time_restore_measures_sleep():
    assert time_restore(lambda: time.sleep(0.02), warmup_runs=0) >= 19.0


def test_time_restore_rejects_negative():
    with pytest.raises(ValueError):
        time_restore(lambda: None, -1)


# -- sweep --------------------------------------------------------------------


def test_singleton_sweep(tmp_path, dataset3):
    rows = run_sweep(small_config(dataset3), tmp_path / "out")
    assert len(rows) == 1
    table = read_csv(tmp_path / "out" / "results.csv")
    assert table[0] == CSV_COLUMNS
    assert len(table) == 2
    rec = dict(zip(table[0], table[1]))
    assert rec["task"] == "sr4x" and rec["m"] == "3" and rec["n_images"] == "3"
    assert rec["lpips"] == ""
    assert 0 < float(rec["ssim_mean"]) <= 1
    md = (tmp_path / "out" / "results.md").read_text()
    assert "LPIPS" in md and "| – |" in md


def test_manifest_contents(tmp_path, dataset3):
    run_sweep(small_config(dataset3, seed=5), tmp_path / "out")
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    task = man["tasks"]["sr4x"]
    assert task["noise_seeds"] == [5, 6, 7]
    assert task["restore_seeds"] == [5 + RESTORE_SEED_OFFSET + i for i in range(3)]
    assert task["lipschitz"] > 0
    assert man["config"]["seed"] == 5
    assert len(man["cells"]) == 1


def test_sweep_rerun_bit_identical(tmp_path, dataset3):
    cfg = small_config(dataset3, task="both", inner_steps_list=[1, 7], scales_list=[4.0, 17.5])
    run_sweep(cfg, tmp_path / "a")
    run_sweep(cfg, tmp_path / "b")
    a, b = read_csv(tmp_path / "a" / "results.csv"), read_csv(tmp_path / "b" / "results.csv")
    assert len(a) == len(b) == 1 + 2 * 4
    idx = [CSV_COLUMNS.index(c) for c in NON_TIMING]
    for ra, rb in zip(a[1:], b[1:]):
        assert [ra[i] for i in idx] == [rb[i] for i in idx]


def test_replay_matches(tmp_path, dataset3):
    cfg = small_config(dataset3, inner_steps_list=[1, 3])
    rows = run_sweep(cfg, tmp_path / "out")
    again = replay_cell(tmp_path / "out" / "manifest.json", "sr4x", 3, 5, 7.5)
    orig = [r for r in rows if r.m == 3][0]
    for col in NON_TIMING:
        assert getattr(again, col) == getattr(orig, col)


def test_sweep_self_test_flag(tmp_path, dataset3):
    cfg = small_config(dataset3, inner_steps_list=[1, 15], self_test=True)
    run_sweep(cfg, tmp_path / "out")
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["self_test"]["passed"] is True


def test_monotonicity_check_flags_regression():
    def row(m, res):
        return ResultRow("sr4x", m, 20, 7.5, 1, 0, 0.5, 0.0, 20.0, 0.0, 0, "", 1.0, res)

    assert monotonicity_check([row(1, 2.0), row(15, 1.0)]) == []
    assert len(monotonicity_check([row(1, 1.0), row(15, 2.0)])) == 1


def test_gt_png_is_what_gets_scored(tmp_path, dataset3):
    out = degrade_dataset(dataset3, "sr4x", NoiseSpec(0.05, 0), 16, tmp_path / "p")
    _, pairs = load_pairs(out)
    np.testing.assert_array_equal(pairs[0][1], load_image(out / "gt" / "img00.png"))
