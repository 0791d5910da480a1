import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapeedit import scoring
from shapeedit.microworld import render
from shapeedit.scoring import (
    ArityError,
    MissingMetadataError,
    NoJSONError,
    ScoreCard,
    ScoreRangeError,
    ScorerEndpoint,
    export_distillation,
    filter_dataset,
    grade,
    lambda_from_score,
    lambda_weight,
    looks_like_noise,
    oracle_score,
    overall_score,
    parse_lmm_response,
    pq_prompt,
    score_dataset,
    sc_prompt,
)
from shapeedit.specialists import TASKS, CorruptionConfig, generate_record, read_dataset, write_dataset

# expected oracle cards for each corruption channel
DEDUCTIONS = {
    None: (10, 10, 10),
    "ignore_instruction": (0, 10, 10),
    "off_target": (2, 3, 10),
    "wrong_color": (4, 10, 10),
    "ghost_residual": (10, 6, 4),
    "global_noise": (10, 10, 3),
}


def test_overall_score_identities():
    assert overall_score(5, 7.2) == 6.0
    assert overall_score(10, 10) == 10.0
    assert overall_score(0, 10) == 0.0


@given(sc=st.integers(0, 10), pq=st.integers(0, 10))
def test_overall_score_is_bounded_geometric_mean(sc, pq):
    o = overall_score(sc, pq)
    assert min(sc, pq) - 1e-12 <= o <= max(sc, pq) + 1e-12
    assert o == pytest.approx(math.sqrt(sc * pq))
    if sc == 0:
        assert o == 0


def test_score_card():
    card = ScoreCard(7, 4, 9, "r")
    assert card.sc == 4 and card.o == pytest.approx(6.0)
    assert ScoreCard.from_dict(card.to_dict()) == card
    with pytest.raises(ValueError):
        ScoreCard(11, 0, 0)
    with pytest.raises(TypeError):
        ScoreCard(7.5, 0, 0)
    with pytest.raises(TypeError):
        ScoreCard(True, 0, 0)


def test_lambda_threshold_edges():
    assert lambda_from_score(9.0) == 1
    assert lambda_from_score(8.99) == 0
    assert lambda_weight(ScoreCard(9, 10, 9)) == 1  # o = 9.0 exactly
    assert lambda_weight(ScoreCard(10, 10, 8)) == 0  # o = 8.94
    assert lambda_weight(ScoreCard(10, 10, 8), statistic="sc") == 1
    with pytest.raises(ValueError):
        lambda_weight(ScoreCard(1, 1, 1), statistic="pq")


# ---------------------------------------------------------------------------
# prompts and parsing
# ---------------------------------------------------------------------------


def test_prompts_carry_required_markers():
    rec = generate_record(0, 0, "obj_removal")
    sc, pq = sc_prompt(rec), pq_prompt(rec)
    assert "degree of overediting" in sc and "output score = [score1, score2]" in sc
    assert "indicates an artifact-free image" in pq
    for p in (sc, pq):
        assert f"Editing instruction: {rec.instruction.surface_text}" in p


@pytest.mark.parametrize(
    "text,kind,want",
    [
        ('{"score": [7, 8], "reasoning": "ok"}', "sc", (7, 8)),
        ('Sure! ```json\n{"reasoning": "fine", "score": [10, 0]}\n``` hope that helps', "sc", (10, 0)),
        ('{"score": 6, "reasoning": "blurry"}', "pq", (6,)),
        ('{"score": [6.0]}', "pq", (6,)),
        ('{bad json} then {"score": [1, 2]}', "sc", (1, 2)),
    ],
)
def test_parse_accepts(text, kind, want):
    scores, _ = parse_lmm_response(text, kind)
    assert scores == want


@pytest.mark.parametrize(
    "text,kind,err",
    [
        ("I would rate this a 7.", "sc", NoJSONError),
        ('{"score": [7]}', "sc", ArityError),
        ('{"score": [7, 8, 9]}', "sc", ArityError),
        ('{"rating": [7, 8]}', "sc", ArityError),
        ('{"score": [7, 11]}', "sc", ScoreRangeError),
        ('{"score": [7.5, 8]}', "sc", ScoreRangeError),
        ('{"score": ["7", 8]}', "sc", ScoreRangeError),
        ('{"score": [3, 4]}', "pq", ArityError),
    ],
)
def test_parse_rejects(text, kind, err):
    with pytest.raises(err):
        parse_lmm_response(text, kind)


# ---------------------------------------------------------------------------
# oracle grader
# ---------------------------------------------------------------------------


def test_grader_deduction_table_survives_ppm_export(tmp_path):
    recs = [generate_record(4, i, TASKS[i % 7], CorruptionConfig(0.7)) for i in range(140)]
    back = read_dataset(write_dataset(recs, tmp_path))
    seen = set()
    for rec in back:
        ch = rec.corruption_log[0] if rec.corruption_log else None
        card = oracle_score(rec)
        assert (card.sc1, card.sc2, card.pq) == DEDUCTIONS[ch], (rec.id, rec.task, ch)
        seen.add(ch)
    assert seen == set(DEDUCTIONS)


def test_grader_rubric_for_partial_edits():
    rec = generate_record(9, 0, "background_swap")
    gt = rec.edited.pixels
    half = gt.copy()
    half[: gt.shape[0] // 2] = rec.src.pixels[: gt.shape[0] // 2]
    card = grade(rec.src_scene, rec.instruction, rec.bucket, half)
    assert 0 < card.sc1 < 10 and card.sc2 == 10
    with pytest.raises(ValueError):
        grade(rec.src_scene, rec.instruction, rec.bucket, gt[:4])


def test_noise_detector_rejects_structured_residuals():
    gt = np.full((32, 32, 3), 0.5)
    rng = np.random.default_rng(0)
    assert looks_like_noise(gt + rng.uniform(-0.15, 0.15, gt.shape), gt)
    assert not looks_like_noise(gt + 0.1, gt)  # uniform tint
    smooth = np.repeat(np.linspace(-0.1, 0.1, 32)[None, :, None], 32, axis=0) * np.ones((1, 1, 3))
    assert not looks_like_noise(gt + smooth, gt)
    assert not looks_like_noise(gt + rng.uniform(-0.4, 0.4, gt.shape), gt)


def test_oracle_needs_scene_metadata():
    rec = generate_record(0, 0, "style")
    rec.src_scene = None
    with pytest.raises(MissingMetadataError):
        oracle_score(rec)


# ---------------------------------------------------------------------------
# dataset scoring, filtering, export
# ---------------------------------------------------------------------------


@pytest.fixture
def small_dataset(tmp_path):
    recs = [generate_record(1, i, TASKS[i % 7], CorruptionConfig(0.5)) for i in range(21)]
    return write_dataset(recs, tmp_path / "data")


def test_score_filter_export_oracle(small_dataset, tmp_path):
    report = score_dataset(small_dataset)
    rows = [json.loads(x) for x in (small_dataset.parent / "annotated.jsonl").read_text().splitlines()]
    assert len(rows) == 21 and report.n_scored == 21 and report.external_calls == 0
    for d in rows:
        assert d["weight"] == (0 if d["corruption_log"] else 1)
    assert report.retention == pytest.approx(sum(1 for d in rows if not d["corruption_log"]) / 21)

    again = score_dataset(small_dataset)
    assert again.n_skipped == 21 and again.n_scored == 0

    path, _ = filter_dataset(small_dataset.parent / "annotated.jsonl")
    kept = read_dataset(path)
    assert kept and all(r.weight == 1 and not r.corruption_log for r in kept)

    out, warnings = export_distillation(small_dataset.parent / "annotated.jsonl", tmp_path / "d.jsonl", n_per_task=2)
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(lines) == 14 and not warnings
    for d in lines:
        assert parse_lmm_response(d["sc_response"], "sc")[0] == (d["score"]["sc1"], d["score"]["sc2"])
        assert parse_lmm_response(d["pq_response"], "pq")[0] == (d["score"]["pq"],)
    _, warnings = export_distillation(small_dataset.parent / "annotated.jsonl", tmp_path / "e.jsonl", n_per_task=5)
    assert len(warnings) == 7


def test_endpoint_validation():
    with pytest.raises(ValueError):
        ScorerEndpoint("external")
    with pytest.raises(ValueError):
        ScorerEndpoint("remote", base_url="http://x")
    with pytest.raises(ValueError):
        ScorerEndpoint(max_in_flight=0)


def test_external_scorer_happy_path(stub_scorer, small_dataset, monkeypatch):
    monkeypatch.setenv("SHAPEEDIT_SCORER_TOKEN", "tok123")
    ep = ScorerEndpoint("external", base_url=stub_scorer.url, max_in_flight=3, backoff_base=0.0)
    report = score_dataset(small_dataset, ep)
    assert report.n_scored == 21 and report.n_unscored == 0
    assert report.external_calls == 42 == len(stub_scorer.requests)
    assert set(stub_scorer.auth) == {"Bearer tok123"}
    assert 1 < stub_scorer.peak <= 3
    body = stub_scorer.requests[0]
    assert {"model", "prompt", "images"} <= set(body)
    rows = [json.loads(x) for x in (small_dataset.parent / "annotated.jsonl").read_text().splitlines()]
    assert all(d["scores"]["sc1"] == 9 and d["scores"]["sc2"] == 10 and d["weight"] == 1 for d in rows)
    assert all("raw" in d for d in rows)


def test_external_scorer_retry_backoff(stub_scorer, small_dataset, monkeypatch):
    sleeps = []
    monkeypatch.setattr(scoring.time, "sleep", sleeps.append)
    stub_scorer.reply = lambda body, n: (500, "boom")
    ep = ScorerEndpoint("external", base_url=stub_scorer.url, max_in_flight=1, backoff_base=0.5)
    client = scoring.ExternalScorer(ep)
    rec = read_dataset(small_dataset)[0]
    with pytest.raises(scoring.ScorerExhausted):
        client.score(rec)
    client.close()
    assert len(stub_scorer.requests) == 4
    assert sleeps == [0.5, 1.0, 2.0]
