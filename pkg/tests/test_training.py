import json

import numpy as np
import pytest

from shapeedit.diffusion import make_schedule
from shapeedit.editnet import ModelConfig, ModelParams, init_model
from shapeedit.specialists import TASKS, CorruptionConfig, generate_record
from shapeedit.training import (
    CheckpointError,
    EmptyDatasetError,
    TrainConfig,
    _adam,
    base_hash,
    batch_stream,
    bucketize,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    train,
    train_step,
)

TINY = dict(layers=1, hidden=16, heads=2, dtype="float64")


class Rec:
    def __init__(self, i, bucket, task="style"):
        self.id, self.bucket, self.task = f"r{i}", bucket, task


def test_config_from_dict_coerces_and_rejects():
    cfg = TrainConfig.from_dict({"steps": "7", "lr": "0.01", "use_filter": "false", "variant": "controlnet"})
    assert cfg.steps == 7 and cfg.lr == 0.01 and cfg.use_filter is False and cfg.variant == "controlnet"
    with pytest.raises(KeyError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(bucket_weights="5:4=1")
    assert TrainConfig(bucket_weights="1:1=2, 16:9=1").bucket_mix() == {"1:1": 2.0, "16:9": 1.0}


def test_bucketize_is_homogeneous_with_short_tail():
    recs = [Rec(i, "1:1") for i in range(10)] + [Rec(10 + i, "16:9") for i in range(3)]
    batches = bucketize(recs, 4, seed=0)
    assert all(len({r.bucket for r in b}) == 1 for b in batches)
    sizes = sorted(len(b) for b in batches if b[0].bucket == "1:1")
    assert sizes == [2, 4, 4]
    assert sorted(r.id for b in batches for r in b) == sorted(r.id for r in recs)
    assert [r.id for b in bucketize(recs, 4, 0) for r in b] == [r.id for b in batches for r in b]
    assert [r.id for b in bucketize(recs, 4, 0, epoch=1) for r in b] != [r.id for b in batches for r in b]


def test_balanced_stream_equalizes_tasks():
    recs = [Rec(i, "1:1", "style") for i in range(12)] + [Rec(20 + i, "1:1", "obj_removal") for i in range(3)]
    stream = batch_stream(recs, TrainConfig(batch_size=4, uniform_per_task=True))
    seen = [r.task for _ in range(6) for r in next(stream)]
    assert seen.count("style") == seen.count("obj_removal") == 12


def trained_base(seed=0):
    """Fresh base with every parameter perturbed; a zero output layer would block all gradients."""
    m = init_model(ModelConfig(variant="base", **TINY), seed)
    rng = np.random.default_rng(seed + 100)
    return ModelParams(m.config, {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in m.params.items()},
                       m.trainable)


@pytest.fixture(scope="module")
def tiny_model():
    return init_model(ModelConfig(variant="editnet", **TINY), 0, base=trained_base())


def test_checkpoint_roundtrip_and_errors(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, {"steps": 3}, tmp_path / "m.oemc")
    back, cfg = load_checkpoint(path)
    assert cfg == {"steps": 3} and back.config == tiny_model.config and back.trainable == tiny_model.trainable
    for k, v in tiny_model.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    raw = path.read_bytes()

    def broken(data, name):
        p = tmp_path / name
        p.write_bytes(data)
        return p

    cases = {
        "bad magic": broken(b"XXXX" + raw[4:], "a"),
        "version": broken(raw[:4] + (2).to_bytes(2, "little") + raw[6:], "b"),
        "checksum": broken(raw[:-40] + bytes([raw[-40] ^ 1]) + raw[-39:], "c"),
        "truncated": broken(raw[:20], "d"),
    }
    for match, p in cases.items():
        with pytest.raises(CheckpointError, match=match):
            load_checkpoint(p)


def test_train_step_leaves_base_frozen(tiny_model):
    model = init_model(tiny_model.config, 1, base=trained_base())
    before = base_hash(model)
    ctrl = {k: v.copy() for k, v in model.params.items() if k.startswith("ctrl.")}
    cfg = TrainConfig(batch_size=2, **TINY)
    batch = [generate_record(0, i, "style") for i in range(4)]
    batch = [r for r in batch if r.bucket == batch[0].bucket][:2]
    res = train_step(model, _adam(cfg), batch, 0, cfg, make_schedule("linear", cfg.T))
    assert np.isfinite(res.loss) and res.grad_norm > 0
    assert base_hash(model) == before
    assert any(not np.array_equal(model.params[k], v) for k, v in ctrl.items())


def test_weight_zero_records_do_not_move_parameters(tiny_model):
    model = init_model(tiny_model.config, 1, base=trained_base())
    cfg = TrainConfig(batch_size=2, **TINY)
    rec = generate_record(0, 0, "style")
    snap = {k: v.copy() for k, v in model.params.items()}
    res = train_step(model, _adam(cfg), [rec], 0, cfg, make_schedule("linear", cfg.T), weights=[0])
    assert res.loss == 0.0
    assert all(np.array_equal(model.params[k], v) for k, v in snap.items())


def test_train_rejects_empty_filtered_set(tiny_model):
    rec = generate_record(0, 0, "style")
    rec.weight = 0
    with pytest.raises(EmptyDatasetError):
        train(tiny_model, [rec], TrainConfig(**TINY), steps=1)


def _pipeline_cfg(out, **kw):
    base = dict(n_records=21, train_records=0, steps=3, base_steps=2, batch_size=4, checkpoint_every=0, **TINY)
    return TrainConfig(out_dir=str(out), **{**base, **kw})


def test_pipeline_is_deterministic_and_resumable(tmp_path):
    a = run_pipeline(_pipeline_cfg(tmp_path / "a"))
    b = run_pipeline(_pipeline_cfg(tmp_path / "b"))
    assert a.ran == ["gen", "score", "filter", "base", "train"]
    for rel in ("data/records.jsonl", "data/annotated.jsonl", "data/train_set.jsonl", "model.oemc", "metrics.jsonl"):
        assert (a.root / rel).read_bytes() == (b.root / rel).read_bytes(), rel
    again = run_pipeline(_pipeline_cfg(tmp_path / "a"))
    assert again.ran == []
    # changing a training key reruns only training
    changed = run_pipeline(_pipeline_cfg(tmp_path / "a", steps=4))
    assert changed.ran == ["train"]
    metrics = [json.loads(x) for x in changed.metrics.read_text().splitlines()]
    assert [m["step"] for m in metrics] == [0, 1, 2, 3]


def test_pipeline_reruns_a_stage_whose_output_was_damaged(tmp_path):
    cfg = _pipeline_cfg(tmp_path)
    run_pipeline(cfg)
    (tmp_path / "data" / "annotated.jsonl").write_text("")
    # rescoring reproduces the same bytes, so downstream stages stay valid
    assert run_pipeline(cfg).ran == ["score"]
    (tmp_path / "model.oemc").write_bytes(b"")
    assert run_pipeline(cfg).ran == ["train"]


def test_unfiltered_arm_keeps_corrupted_records(tmp_path):
    res = run_pipeline(_pipeline_cfg(tmp_path, use_filter=False, p_corrupt=0.5), stages=("gen", "score", "filter"))
    rows = [json.loads(x) for x in res.filtered.read_text().splitlines()]
    assert len(rows) == 21 and any(r["corruption_log"] for r in rows)
    res = run_pipeline(_pipeline_cfg(tmp_path, use_filter=True, p_corrupt=0.5), stages=("gen", "score", "filter"))
    rows = [json.loads(x) for x in res.filtered.read_text().splitlines()]
    assert rows and not any(r["corruption_log"] for r in rows)
    assert {r["task"] for r in rows} <= set(TASKS)


def test_loss_decreases_on_a_small_run():
    cfg = TrainConfig(batch_size=4, lr=3e-3, **TINY)
    model = init_model(cfg.model_config(), 0, base=trained_base())
    recs = [generate_record(3, i, TASKS[i % 7], CorruptionConfig(0.0)) for i in range(8)]
    hist = train(model, recs, cfg, steps=60)
    loss = [h.loss for h in hist]
    assert np.mean(loss[-15:]) < np.mean(loss[:15])
