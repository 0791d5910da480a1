"""Quality scoring, the binary importance weight and dataset filtering.

Two scorer kinds share one interface: an exact oracle that regrades a
record against the scene-graph ground truth, and an external client that
sends the SC and PQ prompts to a JSON-over-HTTP endpoint.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .microworld import apply_semantic_edit, dilate, get_bucket, ppm_bytes, render
from .numerics import seeded_rng
from .specialists import (
    TASKS,
    EditRecord,
    Instruction,
    ghost_blend,
    ghost_region,
    off_target_instructions,
    read_dataset,
    wrong_color_instruction,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 9.0
PIXEL_TOL = 1.01 / 255.0  # survives 8-bit export rounding
RUBRIC_TOL = 0.1

SC_PROMPT = """You are grading an image edit. Two images follow: the first is the source, the second is the edited result.
{images}
Give two integer scores from 0 to 10.
score1 rates how well the edited image carries out the editing instruction: 0 means the instruction was not carried out at all, 10 means it was carried out exactly.
score2 rates the degree of overediting: 0 means the edited image no longer resembles the source, 10 means nothing outside the requested change was altered.
Answer with a JSON object of the form {{"score": [score1, score2], "reasoning": "..."}} where output score = [score1, score2].

Editing instruction: {instruction}
"""

PQ_PROMPT = """You are grading the visual quality of a generated image.
{images}
Look for distortions, unnatural object shapes, noise, smearing and leftover fragments.
Give one integer score from 0 to 10, where 0 means the image is unrecognizable and 10 indicates an artifact-free image.
Answer with a JSON object of the form {{"score": score, "reasoning": "..."}}.

Editing instruction: {instruction}
"""


# ---------------------------------------------------------------------------
# score cards and the importance weight
# ---------------------------------------------------------------------------


def _check_score(name: str, v) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {v!r}")
    if not 0 <= v <= 10:
        raise ValueError(f"{name} must lie in [0, 10], got {v}")
    return int(v)


def overall_score(sc: float, pq: float) -> float:
    """Geometric mean of SC and PQ on the 0-10 scale."""
    return math.sqrt(sc * pq)


@dataclass(frozen=True)
class ScoreCard:
    sc1: int
    sc2: int
    pq: int
    reasoning: str = ""

    def __post_init__(self):
        for name in ("sc1", "sc2", "pq"):
            object.__setattr__(self, name, _check_score(name, getattr(self, name)))

    @property
    def sc(self) -> int:
        return min(self.sc1, self.sc2)

    @property
    def o(self) -> float:
        return overall_score(self.sc, self.pq)

    def to_dict(self) -> dict:
        return {"sc1": self.sc1, "sc2": self.sc2, "pq": self.pq, "sc": self.sc, "o": self.o, "reasoning": self.reasoning}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreCard":
        return cls(d["sc1"], d["sc2"], d["pq"], d.get("reasoning", ""))


def lambda_from_score(value: float, threshold: float = DEFAULT_THRESHOLD) -> int:
    return 1 if value >= threshold else 0


def lambda_weight(card: ScoreCard, threshold: float = DEFAULT_THRESHOLD, statistic: str = "o") -> int:
    """1 iff the chosen statistic (``o`` or ``sc``) reaches ``threshold``."""
    if statistic == "o":
        return lambda_from_score(card.o, threshold)
    if statistic == "sc":
        return lambda_from_score(card.sc, threshold)
    raise ValueError(f"unknown filter statistic {statistic!r}")


# ---------------------------------------------------------------------------
# prompts and response parsing
# ---------------------------------------------------------------------------


def _surface(record) -> str:
    instr = record.instruction if hasattr(record, "instruction") else record
    text = getattr(instr, "surface_text", None)
    if not text:
        raise ValueError("record has no instruction surface text")
    return text


def sc_prompt(record) -> str:
    return SC_PROMPT.format(images="<image:source>\n<image:edited>", instruction=_surface(record))


def pq_prompt(record) -> str:
    return PQ_PROMPT.format(images="<image:edited>", instruction=_surface(record))


class ResponseParseError(ValueError):
    pass


class NoJSONError(ResponseParseError):
    pass


class ArityError(ResponseParseError):
    pass


class ScoreRangeError(ResponseParseError):
    pass


def extract_json(text: str) -> dict:
    """First decodable JSON object embedded anywhere in ``text``."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise NoJSONError("no JSON object found in response")


def _as_score(v) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ScoreRangeError(f"score {v!r} is not an integer")
    if not 0 <= v <= 10:
        raise ScoreRangeError(f"score {v} outside [0, 10]")
    return int(v)


def parse_lmm_response(text: str, kind: str = "sc") -> tuple[tuple[int, ...], str]:
    """Scores and reasoning from a scorer reply.

    ``kind="sc"`` expects ``"score": [score1, score2]``; ``kind="pq"``
    expects a single score (bare or in a one-element list).
    """
    obj = extract_json(text)
    if "score" not in obj:
        raise ArityError("response has no 'score' field")
    raw = obj["score"]
    values = raw if isinstance(raw, list) else [raw]
    want = 2 if kind == "sc" else 1
    if kind not in ("sc", "pq"):
        raise ValueError(f"unknown prompt kind {kind!r}")
    if len(values) != want:
        raise ArityError(f"expected {want} score(s), got {len(values)}")
    reasoning = obj.get("reasoning", "")
    return tuple(_as_score(v) for v in values), reasoning if isinstance(reasoning, str) else json.dumps(reasoning)


# ---------------------------------------------------------------------------
# oracle grader
# ---------------------------------------------------------------------------


class MissingMetadataError(ValueError):
    pass


def _close(a: np.ndarray, b: np.ndarray, tol: float = PIXEL_TOL) -> bool:
    return float(np.max(np.abs(a - b))) <= tol


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 1.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def looks_like_noise(y: np.ndarray, gt: np.ndarray) -> bool:
    """Bounded, dense residual with no channel or spatial structure."""
    r = y - gt
    if np.max(np.abs(r)) > 0.15 + PIXEL_TOL:
        return False
    if np.mean(np.max(np.abs(r), axis=-1) > 2.0 / 255.0) < 0.5:
        return False
    # remove per-color offsets left by clipping at saturated pixels
    keys = np.unique(np.round(gt.reshape(-1, 3) * 255).astype(np.int64), axis=0, return_inverse=True)[1].ravel()
    flat = r.reshape(-1, 3).copy()
    for k in np.unique(keys):
        flat[keys == k] -= flat[keys == k].mean(axis=0)
    r = flat.reshape(r.shape)
    cross = max(abs(_corr(r[..., i], r[..., j])) for i, j in ((0, 1), (0, 2), (1, 2)))
    spatial = max(abs(_corr(r[:, :-1], r[:, 1:])), abs(_corr(r[:-1], r[1:])))
    return cross < 0.3 and spatial < 0.3


def _round10(frac: float) -> int:
    return int(math.floor(10.0 * frac + 0.5))


def rubric_scores(y: np.ndarray, src: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """Continuous grading for outputs that match no known failure pattern.

    sc1: share of the must-change region rendered correctly; sc2: share of
    the rest (one pixel of slack around the change) left untouched; pq:
    share of pixels explained by either the target or the source.
    """
    e_gt = np.max(np.abs(y - gt), axis=-1)
    e_src = np.max(np.abs(y - src), axis=-1)
    change = np.max(np.abs(gt - src), axis=-1) > PIXEL_TOL
    ok = e_gt <= RUBRIC_TOL
    sc1 = _round10(ok[change].mean()) if change.any() else _round10(ok.mean())
    outside = ~dilate(change, 1)
    sc2 = _round10((e_src[outside] <= RUBRIC_TOL).mean()) if outside.any() else 10
    pq = _round10((ok | (e_src <= RUBRIC_TOL)).mean())
    return sc1, sc2, pq


def ground_truth(src_scene, instruction: Instruction, bucket) -> np.ndarray:
    return render(apply_semantic_edit(src_scene, instruction, bucket), bucket).pixels


def grade(src_scene, instruction: Instruction, bucket, y: np.ndarray) -> ScoreCard:
    """Oracle score of output ``y`` for ``instruction`` applied to ``src_scene``."""
    b = get_bucket(bucket).name
    y = np.asarray(y, dtype=np.float64)
    src = render(src_scene, b).pixels
    gt = ground_truth(src_scene, instruction, b)
    if y.shape != gt.shape:
        raise ValueError(f"output shape {y.shape} does not match bucket {b}")
    if _close(y, gt):
        return ScoreCard(10, 10, 10, "edit matches the target exactly")
    if _close(y, src):
        return ScoreCard(0, 10, 10, "output equals the source; instruction not carried out")
    for alt in off_target_instructions(instruction, src_scene):
        if _close(y, render(apply_semantic_edit(src_scene, alt, b), b).pixels):
            return ScoreCard(2, 3, 10, f"edit applied to the {alt.args['target']} instead of the requested object")
    try:
        wrong = wrong_color_instruction(instruction, src_scene)
    except Exception:
        wrong = None
    if wrong is not None and _close(y, ground_truth(src_scene, wrong, b)):
        return ScoreCard(4, 10, 10, "requested change made with the wrong color")
    region = ghost_region(instruction, src_scene, b)
    if region is not None and _close(y, ghost_blend(gt, src, region)):
        return ScoreCard(10, 6, 4, "faint residue of the replaced content remains")
    if looks_like_noise(y, gt):
        return ScoreCard(10, 10, 3, "correct edit covered by dense noise")
    sc1, sc2, pq = rubric_scores(y, src, gt)
    return ScoreCard(sc1, sc2, pq, f"graded by pixel rubric: success {sc1}, preservation {sc2}, quality {pq}")


def oracle_score(record: EditRecord) -> ScoreCard:
    if record.src_scene is None:
        raise MissingMetadataError(f"record {record.id} carries no source scene")
    return grade(record.src_scene, record.instruction, record.bucket, record.edited.pixels)


# ---------------------------------------------------------------------------
# external scorer client
# ---------------------------------------------------------------------------


@dataclass
class ScorerEndpoint:
    kind: str = "oracle"
    base_url: str = ""
    token_env: str = "SHAPEEDIT_SCORER_TOKEN"
    model: str = "scorer"
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base: float = 1.0
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("oracle", "external"):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.kind == "external" and not self.base_url:
            raise ValueError("external scorer needs a base_url")


class ScorerExhausted(RuntimeError):
    pass


@dataclass
class ExternalScorer:
    endpoint: ScorerEndpoint
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        import httpx

        headers = {}
        token = os.environ.get(self.endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=self.endpoint.timeout, headers=headers)
        self._http_error = httpx.HTTPError

    def close(self):
        self._client.close()

    def _ask(self, prompt: str, images: list[bytes], kind: str):
        body = {
            "model": self.endpoint.model,
            "prompt": prompt,
            "images": [base64.b64encode(im).decode("ascii") for im in images],
        }
        last = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                time.sleep(self.endpoint.backoff_base * 2 ** (attempt - 1))
            with self._lock:
                self.calls += 1
            try:
                resp = self._client.post(self.endpoint.base_url, json=body)
                resp.raise_for_status()
                text = resp.json()["text"]
                return parse_lmm_response(text, kind), text
            except (self._http_error, ValueError, KeyError, TypeError) as exc:
                last = exc
                log.debug("scorer attempt %d failed: %s", attempt + 1, exc)
        raise ScorerExhausted(f"scorer failed after {self.endpoint.max_retries + 1} attempts: {last}")

    def score(self, record: EditRecord) -> tuple[ScoreCard, dict]:
        src, edited = ppm_bytes(record.src.pixels), ppm_bytes(record.edited.pixels)
        ((sc1, sc2), sc_reason), sc_text = self._ask(sc_prompt(record), [src, edited], "sc")
        ((pq,), pq_reason), pq_text = self._ask(pq_prompt(record), [edited], "pq")
        card = ScoreCard(sc1, sc2, pq, f"{sc_reason} | {pq_reason}".strip(" |"))
        return card, {"sc_response": sc_text, "pq_response": pq_text}


# ---------------------------------------------------------------------------
# dataset annotation, filtering and distillation export
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    per_task: dict[str, dict[str, int]]
    n_scored: int
    n_skipped: int
    n_unscored: int
    external_calls: int
    threshold: float

    @property
    def retention(self) -> float:
        pre = sum(v["pre"] for v in self.per_task.values())
        post = sum(v["post"] for v in self.per_task.values())
        return post / pre if pre else 0.0

    def to_dict(self) -> dict:
        return {
            "per_task": self.per_task,
            "n_scored": self.n_scored,
            "n_skipped": self.n_skipped,
            "n_unscored": self.n_unscored,
            "external_calls": self.external_calls,
            "threshold": self.threshold,
            "retention": self.retention,
        }

    def table(self) -> str:
        rows = ["task              pre    post"]
        for task, v in self.per_task.items():
            rows.append(f"{task:<16} {v['pre']:>5} {v['post']:>7}")
        return "\n".join(rows)


def _task_counts(rows: list[dict], threshold: float, statistic: str) -> dict[str, dict[str, int]]:
    out = {t: {"pre": 0, "post": 0} for t in TASKS}
    for d in rows:
        out.setdefault(d["task"], {"pre": 0, "post": 0})
        out[d["task"]]["pre"] += 1
        if "scores" in d and not d.get("unscored"):
            out[d["task"]]["post"] += lambda_weight(ScoreCard.from_dict(d["scores"]), threshold, statistic)
    return out


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    tmp.replace(path)


def score_dataset(dataset_path, endpoint: ScorerEndpoint | None = None, threshold: float = DEFAULT_THRESHOLD,
                  out_path=None, rescore: bool = False, statistic: str = "o") -> ScoreReport:
    """Annotate every record with a score card and weight.

    Writes ``annotated.jsonl`` next to the input.  Records already scored
    in an existing output file are reused unless ``rescore``.  Records the
    external scorer cannot grade are kept, marked ``unscored``, and the run
    continues.
    """
    endpoint = endpoint or ScorerEndpoint()
    dataset_path = Path(dataset_path)
    out_path = Path(out_path) if out_path else dataset_path.parent / "annotated.jsonl"
    records = read_dataset(dataset_path)
    previous: dict[str, dict] = {}
    if out_path.exists() and not rescore:
        for line in out_path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                if "scores" in d and not d.get("unscored"):
                    previous[d["id"]] = d

    todo = [r for r in records if r.id not in previous]
    results: dict[str, tuple[ScoreCard | None, dict]] = {}
    calls = 0
    if endpoint.kind == "oracle":
        for r in todo:
            results[r.id] = (oracle_score(r), {})
    elif todo:
        client = ExternalScorer(endpoint)

        def work(r):
            try:
                return r.id, client.score(r)
            except ScorerExhausted as exc:
                log.warning("record %s left unscored: %s", r.id, exc)
                return r.id, (None, {"error": str(exc)})

        try:
            with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
                for rid, res in pool.map(work, todo):
                    results[rid] = res
        finally:
            client.close()
            calls = client.calls

    rows = []
    n_unscored = 0
    for r in records:
        if r.id in previous:
            d = dict(previous[r.id])
        else:
            d = {k: v for k, v in r.meta.items() if k not in ("scores", "weight", "unscored", "raw")}
            card, raw = results[r.id]
            if card is None:
                d["unscored"] = True
                n_unscored += 1
            else:
                d["scores"] = card.to_dict()
                if raw:
                    d["raw"] = raw
        if "scores" in d and not d.get("unscored"):
            d["weight"] = lambda_weight(ScoreCard.from_dict(d["scores"]), threshold, statistic)
        rows.append(d)
    _write_jsonl(out_path, rows)
    return ScoreReport(_task_counts(rows, threshold, statistic), len(todo) - n_unscored, len(previous),
                       n_unscored, calls, threshold)


def filter_dataset(annotated_path, out_path=None, threshold: float = DEFAULT_THRESHOLD,
                   statistic: str = "o") -> tuple[Path, ScoreReport]:
    """Materialize the weight-1 records as ``filtered.jsonl``."""
    annotated_path = Path(annotated_path)
    out_path = Path(out_path) if out_path else annotated_path.parent / "filtered.jsonl"
    rows = [json.loads(line) for line in annotated_path.read_text().splitlines() if line.strip()]
    kept = []
    for d in rows:
        if "scores" not in d or d.get("unscored"):
            continue
        w = lambda_weight(ScoreCard.from_dict(d["scores"]), threshold, statistic)
        if w:
            kept.append(dict(d, weight=1))
    _write_jsonl(out_path, kept)
    n_unscored = sum(1 for d in rows if d.get("unscored"))
    return out_path, ScoreReport(_task_counts(rows, threshold, statistic), 0, len(rows), n_unscored, 0, threshold)


def export_distillation(annotated_path, out_path, n_per_task: int = 10, seed: int = 0) -> tuple[Path, list[str]]:
    """Stratified prompt/response samples for training a smaller scorer.

    Oracle-scored records get a canonical JSON response synthesized from
    their card, so every line parses with :func:`parse_lmm_response`.
    Returns the output path and warnings for tasks with too few records.
    """
    annotated_path, out_path = Path(annotated_path), Path(out_path)
    rows = [json.loads(line) for line in annotated_path.read_text().splitlines() if line.strip()]
    by_task: dict[str, list[dict]] = {}
    for d in rows:
        if "scores" in d and not d.get("unscored"):
            by_task.setdefault(d["task"], []).append(d)
    lines, warnings = [], []
    for task in TASKS:
        pool = sorted(by_task.get(task, []), key=lambda d: d["id"])
        if len(pool) < n_per_task:
            warnings.append(f"{task}: only {len(pool)} scored records for {n_per_task} requested")
        order = seeded_rng(seed, "distill", task).permutation(len(pool))[:n_per_task]
        for i in sorted(int(k) for k in order):
            d = pool[i]
            card = ScoreCard.from_dict(d["scores"])
            instr = Instruction.from_dict(d["instruction"])
            raw = d.get("raw") or {}
            sc_text = raw.get("sc_response") or json.dumps({"score": [card.sc1, card.sc2], "reasoning": card.reasoning})
            pq_text = raw.get("pq_response") or json.dumps({"score": card.pq, "reasoning": card.reasoning})
            lines.append({
                "id": d["id"],
                "task": task,
                "sc_prompt": sc_prompt(instr),
                "pq_prompt": pq_prompt(instr),
                "images": [d["src_path"], d["edited_path"]],
                "sc_response": sc_text,
                "pq_response": pq_text,
                "score": card.to_dict(),
            })
    for w in warnings:
        log.warning(w)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in lines))
    return out_path, warnings
