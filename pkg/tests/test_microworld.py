import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeedit.microworld import (
    BUCKET_NAMES,
    BUCKETS,
    PALETTE,
    EditError,
    Raster,
    Scene,
    apply_semantic_edit,
    bucket_table_digest,
    caption,
    dilate,
    foreground_mask,
    get_bucket,
    object_mask,
    parse_ppm,
    ppm_bytes,
    render,
    sample_scene,
    to_uint8,
)
from shapeedit.specialists import Instruction
from shapeedit.vocab import PAD, UNK, VOCAB_SIZE, null_tokens, tokenize


def test_bucket_table():
    table = {n: (b.width, b.height) for n, b in BUCKETS.items()}
    assert table == {"1:1": (32, 32), "3:4": (28, 36), "4:3": (36, 28), "2:3": (24, 40), "3:2": (40, 24),
                     "9:16": (24, 44), "16:9": (44, 24)}
    for b in BUCKETS.values():
        assert b.width % 4 == 0 and b.height % 4 == 0
        assert abs(b.width * b.height - 1024) <= 0.15 * 1024


def test_bucket_digest_is_stable():
    assert bucket_table_digest() == bucket_table_digest()
    assert len(bucket_table_digest()) == 64
    with pytest.raises(ValueError):
        get_bucket("5:4")


def test_raster_shape_must_match_bucket():
    with pytest.raises(ValueError):
        Raster(np.zeros((32, 32, 3)), "16:9")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), bucket=st.sampled_from(BUCKET_NAMES))
def test_sampled_scenes_are_deterministic_and_render_in_range(seed, bucket):
    try:
        a = sample_scene(seed, bucket)
    except RuntimeError:
        return  # placement failure on a narrow canvas is a legal outcome
    assert a == sample_scene(seed, bucket)
    assert 1 <= len(a.objects) <= 3
    r = render(a, bucket)
    assert r.pixels.shape == get_bucket(bucket).shape
    assert r.pixels.min() >= 0.0 and r.pixels.max() <= 1.0
    assert Scene.from_dict(a.to_dict()) == a


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_objects_do_not_overlap(seed):
    try:
        scene = sample_scene(seed, "1:1")
    except RuntimeError:
        return
    masks = [object_mask(scene, "1:1", o.object_id) for o in scene.objects]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert not (masks[i] & masks[j]).any()
    assert (foreground_mask(scene, "1:1") == np.logical_or.reduce(masks)).all()


def _dilate_bruteforce(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            out[y, x] = mask[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1].any()
    return out


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    r=st.integers(0, 3),
    shape=st.tuples(st.integers(1, 12), st.integers(1, 12)),
)
def test_dilate_matches_bruteforce(seed, r, shape):
    mask = np.random.default_rng(seed).random(shape) < 0.15
    out = dilate(mask, r)
    assert (out == _dilate_bruteforce(mask, r)).all()
    assert (out >= mask).all()


def test_dilate_rejects_negative_radius():
    with pytest.raises(ValueError):
        dilate(np.zeros((2, 2), bool), -1)


def test_to_uint8_rounds_half_up():
    assert to_uint8(np.array([0.0, 0.5 / 255, 1.5 / 255, 1.0, 2.0, -1.0])).tolist() == [0, 1, 2, 255, 255, 0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), bucket=st.sampled_from(BUCKET_NAMES))
def test_ppm_roundtrip_is_exact_on_8bit_values(seed, bucket):
    b = get_bucket(bucket)
    px = np.random.default_rng(seed).integers(0, 256, b.shape) / 255.0
    back = parse_ppm(ppm_bytes(px))
    np.testing.assert_array_equal(to_uint8(back), to_uint8(px))


def test_ppm_header_and_comments():
    px = np.zeros((2, 3, 3))
    data = ppm_bytes(px)
    assert data.startswith(b"P6\n3 2\n255\n")
    commented = b"P6\n# a comment\n3 2\n255\n" + data.split(b"255\n", 1)[1]
    assert parse_ppm(commented).shape == (2, 3, 3)
    with pytest.raises(ValueError):
        parse_ppm(b"P3\n1 1\n255\n0 0 0")


def _scene(seed=3, bucket="1:1"):
    for s in range(seed, seed + 50):
        try:
            return sample_scene(s, bucket)
        except RuntimeError:
            continue
    raise AssertionError("no scene")


def test_semantic_edits():
    scene = _scene()
    target = scene.objects[0]
    removed = apply_semantic_edit(scene, Instruction("obj_removal", {"target_id": target.object_id}, "x"))
    assert target.object_id not in [o.object_id for o in removed.objects]
    recolored = apply_semantic_edit(
        scene, Instruction("attribute", {"target_id": target.object_id, "new_color": "blue"}, "x"))
    assert recolored.get(target.object_id).color == "blue"
    night = apply_semantic_edit(scene, Instruction("environment", {"to": "night"}, "x"))
    assert night.environment == "night" and night.objects == scene.objects
    with pytest.raises(EditError):
        apply_semantic_edit(scene, Instruction("obj_removal", {"target_id": 99}, "x"))


def test_environment_and_style_change_pixels_globally():
    scene = dataclasses.replace(_scene(), environment="day", style="plain")
    day = render(scene, "1:1").pixels
    night = render(apply_semantic_edit(scene, Instruction("environment", {"to": "night"}, "x")), "1:1").pixels
    assert (night <= day + 1e-12).all() and not np.allclose(night, day)


def test_palette_and_caption():
    assert all(v.shape == (3,) and (0 <= v).all() and (v <= 1).all() for v in PALETTE.values())
    text = caption(_scene())
    assert "background" in text
    assert (tokenize(text) != UNK).all()


def test_tokenizer():
    t = tokenize("Remove the red circle.")
    assert t.shape == (16,) and t.dtype == np.int64
    assert (t[4:] == PAD).all() and (t[:4] != PAD).all()
    assert tokenize("zebra")[0] == UNK
    assert tokenize("red " * 40).shape == (16,)
    assert int(tokenize("magenta triangle sepia").max()) < VOCAB_SIZE
    assert (null_tokens(2) == PAD).all()
