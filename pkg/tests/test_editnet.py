import numpy as np
import pytest

from shapeedit.editnet import (
    CONTROL_VARIANTS,
    ModelConfig,
    ModelParams,
    forward,
    frozen_names,
    init_model,
    instrument,
    model_fn,
    patchify,
    unpatchify,
)
from shapeedit.microworld import BUCKETS
from shapeedit.numerics import Tensor

SMALL = dict(layers=2, hidden=16, heads=2, t_dim=8, dtype="float64")


def random_base(seed=0, **overrides) -> ModelParams:
    """A base model with every parameter perturbed, standing in for a trained one."""
    cfg = ModelConfig(variant="base", **{**SMALL, **overrides})
    m = init_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in m.params.items()}
    return ModelParams(cfg, params, m.trainable)


def inputs(batch=2, bucket="1:1", seed=0):
    b = BUCKETS[bucket]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, b.height, b.width, 3))
    src = rng.uniform(-1, 1, (batch, b.height, b.width, 3))
    tok = rng.integers(0, 64, (batch, 16))
    t = rng.integers(1, 200, batch)
    return x, src, tok, t


def perturb_control(model: ModelParams, seed=1, scale=0.3) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = {k: (v + scale * rng.standard_normal(v.shape) if k.startswith("ctrl.") else v)
              for k, v in model.params.items()}
    return ModelParams(model.config, params, model.trainable)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="unet")
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=4)


def test_parameter_layout_per_variant():
    base = random_base()
    names = {v: set(init_model(ModelConfig(variant=v, **SMALL), 0, base=base).params) for v in CONTROL_VARIANTS}
    assert "ctrl.L0.txt_out.w" in names["editnet"]
    assert "ctrl.L0.txt_out.w" in names["controlnet_textcontrol"]
    assert "ctrl.L0.txt_out.w" not in names["controlnet"]
    assert all("ctrl.L1.img_out.w" in n for n in names.values())
    for v in CONTROL_VARIANTS:
        m = init_model(ModelConfig(variant=v, **SMALL), 0, base=base)
        assert all(n.startswith("base.") for n in frozen_names(m))
        assert all(n.startswith("ctrl.") for n in m.trainable)
        for k, arr in base.params.items():
            np.testing.assert_array_equal(m.params[k], arr)
        assert not m.params["ctrl.L0.img_out.w"].any()


def test_channel_concat_trains_everything_and_widens_embedder():
    m = init_model(ModelConfig(variant="channel_concat", **SMALL), 0, base=random_base())
    assert m.trainable == frozenset(m.params)
    assert m.params["base.x_embed.w"].shape == (4 * 4 * 6, 16)


def test_base_mismatch_rejected():
    with pytest.raises(ValueError):
        init_model(ModelConfig(variant="editnet", **{**SMALL, "hidden": 32}), 0, base=random_base())
    ctrl = init_model(ModelConfig(variant="editnet", **SMALL), 0, base=random_base())
    with pytest.raises(ValueError):
        init_model(ModelConfig(variant="editnet", **SMALL), 0, base=ctrl)


@pytest.mark.parametrize("bucket", list(BUCKETS))
def test_patchify_roundtrip_and_shape_closure(bucket):
    x, src, tok, t = inputs(bucket=bucket)
    b = BUCKETS[bucket]
    back = unpatchify(Tensor(patchify(x, 4)), b.height // 4, b.width // 4, 4, 3).data
    np.testing.assert_array_equal(back, x)
    for v in ("editnet", "channel_concat"):
        m = init_model(ModelConfig(variant=v, **SMALL), 0, base=random_base())
        assert forward(m, x, src, tok, t).shape == x.shape


def test_forward_input_checks():
    m = init_model(ModelConfig(variant="editnet", **SMALL), 0, base=random_base())
    x, src, tok, t = inputs()
    with pytest.raises(ValueError):
        forward(m, x, None, tok, t)
    with pytest.raises(ValueError):
        forward(m, x, src, tok[:, :8], t)
    with pytest.raises(ValueError):
        forward(m, x, src, tok + 64, t)


@pytest.mark.parametrize("variant", CONTROL_VARIANTS + ("channel_concat",))
def test_fresh_variant_reproduces_base(variant):
    base = random_base()
    m = init_model(ModelConfig(variant=variant, **SMALL), 0, base=base)
    x, src, tok, t = inputs()
    np.testing.assert_allclose(forward(m, x, src, tok, t).data, forward(base, x, None, tok, t).data, atol=1e-12)


def test_editnet_control_reads_base_intermediates():
    m = perturb_control(init_model(ModelConfig(variant="editnet", **SMALL), 0, base=random_base()))
    x, src, tok, t = inputs()
    plain = forward(m, x, src, tok, t).data
    shifted = forward(m, x, src, tok, t, control_view=lambda i, txt, img: (txt, img + 1.0)).data
    assert np.abs(plain - shifted).max() > 1e-3


def test_controlnet_branch_is_independent_of_noisy_input():
    for variant in ("controlnet", "controlnet_textcontrol", "editnet"):
        m = perturb_control(init_model(ModelConfig(variant=variant, **SMALL), 0, base=random_base()))
        x, src, tok, t = inputs()
        _, tr1 = instrument(m, x, src, tok, t)
        _, tr2 = instrument(m, x + 1.0, src, tok, t)
        ctrl1 = [r["in"] for r in tr1 if r["branch"] == "control"]
        ctrl2 = [r["in"] for r in tr2 if r["branch"] == "control"]
        same = all(np.array_equal(a, b) for a, b in zip(ctrl1, ctrl2))
        assert same == (variant != "editnet"), variant


@pytest.mark.parametrize("variant,updates_text", [("controlnet", False), ("controlnet_textcontrol", True),
                                                  ("editnet", True)])
def test_text_tokens_between_base_layers(variant, updates_text):
    m = perturb_control(init_model(ModelConfig(variant=variant, **SMALL), 0, base=random_base()))
    x, src, tok, t = inputs()
    _, trace = instrument(m, x, src, tok, t)
    base = [r for r in trace if r["branch"] == "base"]
    for prev, nxt in zip(base, base[1:]):
        unchanged = np.array_equal(prev["out"][:, :16], nxt["in"][:, :16])
        assert unchanged != updates_text
    # image tokens are updated by every control variant
    assert not np.array_equal(base[0]["out"][:, 16:], base[1]["in"][:, 16:])


def test_model_fn_builds_no_graph():
    m = init_model(ModelConfig(variant="editnet", **SMALL), 0, base=random_base())
    x, src, tok, t = inputs()
    out = model_fn(m)(x, src, tok, t)
    assert not out.requires_grad


def test_parameter_counts_default_size():
    base = init_model(ModelConfig(variant="base"), 0)
    ed = init_model(ModelConfig(variant="editnet"), 0, base=base)
    assert base.count() == 832848
    assert ed.count() == 1730928
    assert ed.count("base.") == base.count()
