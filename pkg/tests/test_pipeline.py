"""Tests for the data pipeline around the model: the synthetic task generator,
binary containers, the trainer, the benchmark harness, and the ablation table.
"""

from __future__ import annotations

import copy
import json
import warnings

import numpy as np
import pytest

from hierarq.ablate import ablate, variant_names, write_ablation_csv
from hierarq.bench import CSV_HEADER, bench, linear_fit_r2, write_bench_csv
from hierarq.config import ModelConfig, RunConfig
from hierarq.container import (CHECKPOINT_MAGIC, FEATURE_MAGIC,
                               load_into_parameters, read_checkpoint,
                               read_features, write_checkpoint, write_features)
from hierarq.encode import (make_signatures, make_splits, oracle_labels,
                            stub_encode, synthesize_video)
from hierarq.errors import ConfigError, FormatError, NumericalError
from hierarq.model import HierarQModel
from hierarq.train import evaluate, prompt_bundle, train_model


def micro_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.model = ModelConfig(
        n_visual_tokens=3, d_visual=4, n_query_tokens=2, d_query=4,
        n_layers=2, n_heads=2, cross_attention_frequency=2,
        modulator_layers=1, modulator_heads=2, d_text=4, max_prompt_tokens=8,
        m_short=2, m_long=2, n_classes=2, precision="f32")
    cfg.synthetic.classes = 2
    cfg.synthetic.frames = 4
    cfg.synthetic.train_samples = 32
    cfg.synthetic.val_samples = 16
    cfg.optimizer.steps = 5
    cfg.optimizer.batch_size = 8
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


# --------------------------------------------------------------------------
# synthetic task generator


def test_stub_encode_shape_and_determinism():
    cfg = ModelConfig()
    frames = np.random.default_rng(3).normal(size=(5, 6, 7))
    a = stub_encode(frames, cfg, seed=11)
    b = stub_encode(frames, cfg, seed=11)
    c = stub_encode(frames, cfg, seed=12)
    assert a.shape == (5, cfg.n_visual_tokens, cfg.d_visual)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_signatures_are_orthonormal():
    sigs = make_signatures(32, 4, seed=0)
    assert sigs.shape == (5, 32)
    gram = sigs @ sigs.T
    assert np.abs(gram - np.eye(5)).max() < 1e-10


def test_signatures_need_room_for_background():
    with pytest.raises(ConfigError):
        make_signatures(4, 4, seed=0)


def test_planted_tokens_point_at_their_signature():
    cfg = RunConfig()
    sigs = make_signatures(cfg.model.d_visual, cfg.synthetic.classes, seed=0)
    rng = np.random.default_rng(5)
    video = synthesize_video(rng, cfg.synthetic, cfg.model, sigs, label=2)
    assert video.label == 2
    expected_frames = [f for f in range(cfg.synthetic.frames)
                       if f % cfg.synthetic.frames_per_occurrence == 0]
    assert [f for f, _ in video.plants] == expected_frames
    for frame, slot in video.plants:
        token = video.tokens[frame, slot]
        cos = token @ sigs[2] / np.linalg.norm(token)
        assert cos > 0.81


def test_plant_window_limits_label_frames():
    cfg = RunConfig()
    cfg.synthetic.plant_frames = 6
    sigs = make_signatures(cfg.model.d_visual, cfg.synthetic.classes, seed=0)
    video = synthesize_video(np.random.default_rng(9), cfg.synthetic, cfg.model,
                             sigs, label=0)
    assert video.plants and all(f < 6 for f, _ in video.plants)


def test_dataset_is_balanced_and_oracle_recovers_clean_labels():
    cfg = RunConfig()
    cfg.synthetic.noise_scale = 0.05
    cfg.synthetic.frames_per_occurrence = 1
    cfg.synthetic.train_samples = 64
    sigs, (x, y), _ = make_splits(cfg.synthetic, cfg.model, seed=1)
    counts = np.bincount(y, minlength=cfg.synthetic.classes)
    assert counts.max() - counts.min() <= 1
    assert (oracle_labels(x, sigs) == y).mean() == 1.0


# --------------------------------------------------------------------------
# binary containers


def test_feature_round_trip_is_bit_exact(tmp_path):
    for dtype in (np.float32, np.float64):
        path = str(tmp_path / f"clip_{np.dtype(dtype).name}.hqf")
        arr = np.random.default_rng(0).normal(size=(4, 3, 5)).astype(dtype)
        write_features(path, arr)
        back = read_features(path)
        assert back.dtype == arr.dtype
        assert back.tobytes() == arr.tobytes()


def test_feature_rejections(tmp_path):
    path = str(tmp_path / "clip.hqf")
    with pytest.raises(FormatError, match="not found"):
        read_features(str(tmp_path / "missing.hqf"))
    with pytest.raises(FormatError, match="zero frames"):
        write_features(path, np.zeros((0, 2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match=r"\(T, N_v, D_vis\)"):
        write_features(path, np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match="float32 or float64"):
        write_features(path, np.zeros((1, 2, 2), dtype=np.int32))

    arr = np.ones((2, 2, 2), dtype=np.float32)
    write_features(path, arr)
    raw = open(path, "rb").read()

    bad = str(tmp_path / "bad.hqf")
    with open(bad, "wb") as fh:
        fh.write(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_features(bad)

    with open(bad, "wb") as fh:
        fh.write(raw[:10])
    with pytest.raises(FormatError, match="truncated header"):
        read_features(bad)

    with open(bad, "wb") as fh:
        fh.write(raw[:-4])
    with pytest.raises(FormatError, match="payload mismatch at offset 20"):
        read_features(bad)

    with open(bad, "wb") as fh:
        fh.write(raw + b"\x00" * 4)
    with pytest.raises(FormatError, match="payload mismatch"):
        read_features(bad)

    header = bytearray(raw[:20])
    header[4:8] = (0).to_bytes(4, "little")          # T = 0
    with open(bad, "wb") as fh:
        fh.write(bytes(header) + raw[20:])
    with pytest.raises(FormatError, match="degenerate header"):
        read_features(bad)

    header = bytearray(raw[:20])
    header[16:20] = (7).to_bytes(4, "little")        # unknown precision
    with open(bad, "wb") as fh:
        fh.write(bytes(header) + raw[20:])
    with pytest.raises(FormatError, match="unknown precision code 7"):
        read_features(bad)


def test_checkpoint_round_trip_restores_every_tensor(tmp_path):
    cfg = micro_config()
    model = HierarQModel(cfg, seed=3)
    path = str(tmp_path / "weights.hqw")
    write_checkpoint(path, {k: p.data for k, p in model.parameters().items()})

    other = HierarQModel(cfg, seed=4)
    before = {k: p.data.copy() for k, p in other.parameters().items()}
    load_into_parameters(other.parameters(), read_checkpoint(path))
    changed = 0
    for name, p in other.parameters().items():
        want = model.parameters()[name].data
        assert p.data.tobytes() == want.tobytes(), name
        changed += int(p.data.tobytes() != before[name].tobytes())
    assert changed > 0


def test_checkpoint_rejections(tmp_path):
    cfg = micro_config()
    model = HierarQModel(cfg, seed=3)
    params = model.parameters()
    path = str(tmp_path / "weights.hqw")
    stored = {k: p.data for k, p in params.items()}
    write_checkpoint(path, stored)

    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.hqw")
    with open(bad, "wb") as fh:
        fh.write(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="bad checkpoint magic"):
        read_checkpoint(bad)
    with open(bad, "wb") as fh:
        fh.write(raw[:-8])
    with pytest.raises(FormatError, match="truncated payload"):
        read_checkpoint(bad)
    with open(bad, "wb") as fh:
        fh.write(raw + b"\x00\x00")
    with pytest.raises(FormatError, match="trailing bytes"):
        read_checkpoint(bad)

    loaded = read_checkpoint(path)
    del loaded[next(iter(loaded))]
    with pytest.raises(FormatError, match="missing"):
        load_into_parameters(params, loaded)

    loaded = read_checkpoint(path)
    name = next(iter(loaded))
    loaded[name] = loaded[name][..., :1]
    with pytest.raises(FormatError, match="shape"):
        load_into_parameters(params, loaded)


# --------------------------------------------------------------------------
# trainer


def test_training_learns_a_one_class_task_and_writes_artifacts(tmp_path):
    cfg = micro_config()
    out = str(tmp_path / "run")
    model, report = train_model(cfg, out_dir=out)
    assert report.steps_run == cfg.optimizer.steps
    assert len(report.train_losses) == report.steps_run
    assert np.isfinite(report.final_val_loss)
    assert report.checkpoint_path and report.curve_path and report.summary_path

    curve = open(report.curve_path, encoding="utf-8").read().splitlines()
    assert curve[0] == "step,train_loss,val_loss,val_acc"
    assert len(curve) == report.steps_run + 1

    summary = json.loads(open(report.summary_path, encoding="utf-8").read())
    assert summary["steps_run"] == report.steps_run
    assert summary["seed"] == cfg.seed

    clone = HierarQModel(cfg, seed=99)
    load_into_parameters(clone.parameters(), read_checkpoint(report.checkpoint_path))
    bundle = prompt_bundle(cfg)
    _, _, (val_x, val_y) = make_splits(cfg.synthetic, cfg.model, cfg.seed)
    val_x = val_x.astype(np.float32)
    loss_a, acc_a = evaluate(model, bundle, val_x, val_y)
    loss_b, acc_b = evaluate(clone, bundle, val_x, val_y)
    assert loss_a == loss_b and acc_a == acc_b


def test_training_is_bit_reproducible():
    cfg = micro_config()
    model_a, report_a = train_model(cfg)
    model_b, report_b = train_model(cfg)
    assert report_a.train_losses == report_b.train_losses
    for name, p in model_a.parameters().items():
        assert p.data.tobytes() == model_b.parameters()[name].data.tobytes(), name


def test_divergence_raises_a_numerical_error():
    cfg = micro_config()
    cfg.optimizer.step_size = 1e18
    cfg.optimizer.steps = 30
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)   # deliberate blow-up
        with pytest.raises(NumericalError, match="diverged|non-finite"):
            train_model(cfg)


def test_training_requires_the_entity_id_task():
    cfg = micro_config(task="bench")
    with pytest.raises(ConfigError, match="entity-id"):
        train_model(cfg)


# --------------------------------------------------------------------------
# benchmark harness


def test_bench_rows_and_csv(tmp_path):
    cfg = micro_config()
    path = str(tmp_path / "bench.csv")
    rows = bench(cfg, [2, 4, 6], csv_path=path)
    assert [r.frames for r in rows] == [2, 4, 6]
    for row in rows:
        assert row.tokens_to_decoder == cfg.model.n_query_tokens
        assert 0 < row.peak_state_floats <= row.closed_form_state_floats
        assert row.wall_time > 0
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 4

    write_bench_csv(path, rows)
    assert open(path, encoding="utf-8").read().splitlines()[0] == CSV_HEADER


def test_bench_rejects_bad_frame_lists():
    cfg = micro_config()
    with pytest.raises(ConfigError):
        bench(cfg, [])
    with pytest.raises(ConfigError):
        bench(cfg, [10, 5])
    with pytest.raises(ConfigError):
        bench(cfg, [0, 5])


def test_state_is_flat_across_video_lengths():
    cfg = micro_config()
    rows = bench(cfg, [4, 16, 64])
    peaks = {r.peak_state_floats for r in rows[1:]}
    assert len(peaks) == 1


def test_linear_fit_r2():
    xs = [1.0, 2.0, 3.0, 4.0]
    assert linear_fit_r2(xs, [2.0 * x + 1.0 for x in xs]) == pytest.approx(1.0)
    assert linear_fit_r2(xs, [5.0, -3.0, 8.0, -1.0]) < 0.5
    with pytest.raises(ConfigError):
        linear_fit_r2([1.0], [1.0])


# --------------------------------------------------------------------------
# ablation table


def test_variant_table_names():
    names = variant_names()
    assert names[0] == "fifo_mbc"
    for required in ("no_memory", "visual_only", "query_only", "short_only",
                     "long_only", "fifo_fifo", "mbc_mbc", "no_hierarchy",
                     "no_modulators"):
        assert required in names
    assert len(names) == len(set(names))


def test_ablate_runs_selected_variants(tmp_path):
    cfg = micro_config()
    cfg.optimizer.steps = 3
    rows = ablate(cfg, names=["fifo_mbc", "no_memory", "no_modulators"])
    assert [r.name for r in rows] == ["fifo_mbc", "no_memory", "no_modulators"]
    assert rows[0].is_default and not rows[1].is_default
    for row in rows:
        assert row.steps == 3
        assert np.isfinite(row.val_loss)
        assert row.description

    path = str(tmp_path / "ablation.csv")
    write_ablation_csv(path, rows)
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0].startswith("name,")
    assert len(lines) == 4


def test_ablate_rejects_unknown_variants():
    with pytest.raises(ConfigError, match="unknown"):
        ablate(micro_config(), names=["does_not_exist"])
