"""Fixed editing bench, SC/PQ/O/Acc evaluation and the ablation runner."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import make_schedule, sample
from .editnet import ModelParams, model_fn
from .microworld import BUCKET_NAMES, PlacementError, Raster, Scene, render, sample_scene, to_uint8, write_ppm
from .numerics import NonFiniteError, derive_seed
from .scoring import ExternalScorer, ScoreCard, ScorerEndpoint, ScorerExhausted, grade
from .specialists import TASKS, EditRecord, InfeasibleTaskError, Instruction, synth_instruction
from .training import TrainConfig, config_hash, load_checkpoint, run_pipeline
from .vocab import tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchEntry:
    index: int
    scene: Scene
    bucket: str
    instruction: Instruction

    def to_dict(self) -> dict:
        return {"index": self.index, "bucket": self.bucket, "scene": self.scene.to_dict(),
                "instruction": self.instruction.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchEntry":
        return cls(d["index"], Scene.from_dict(d["scene"]), d["bucket"], Instruction.from_dict(d["instruction"]))


@dataclass
class BenchSet:
    seed: int
    n_scenes: int
    entries: list[BenchEntry]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "n_scenes": self.n_scenes,
                           "entries": [e.to_dict() for e in self.entries]}, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "BenchSet":
        d = json.loads(Path(path).read_text())
        return cls(d["seed"], d["n_scenes"], [BenchEntry.from_dict(e) for e in d["entries"]])


def build_bench(seed: int = 0, n_scenes: int = 62, max_objects: int = 3) -> BenchSet:
    """``n_scenes`` scenes, buckets assigned round-robin, every task on every scene."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    entries = []
    for i in range(n_scenes):
        bucket = BUCKET_NAMES[i % len(BUCKET_NAMES)]
        for attempt in range(1000):
            s = derive_seed(seed, "bench", i, attempt)
            try:
                scene = sample_scene(s, bucket, max_objects=max_objects)
                instrs = [synth_instruction(scene, task, s, bucket) for task in TASKS]
            except (InfeasibleTaskError, PlacementError):
                continue
            break
        else:
            raise RuntimeError(f"could not build a feasible bench scene {i}")
        entries += [BenchEntry(len(entries) + k, scene, bucket, ins) for k, ins in enumerate(instrs)]
    return BenchSet(seed, n_scenes, entries)


# ---------------------------------------------------------------------------
# editors: anything mapping a batch of bench entries to output rasters
# ---------------------------------------------------------------------------

Editor = Callable[[list[BenchEntry], np.ndarray], np.ndarray]


def identity_editor(entries, src):
    return src.copy()


def oracle_editor(entries, src):
    from .microworld import apply_semantic_edit

    return np.stack([render(apply_semantic_edit(e.scene, e.instruction, e.bucket), e.bucket).pixels for e in entries])


@dataclass
class SamplerSettings:
    steps: int = 20
    mode: str = "deterministic"
    guidance_scale: float = 1.0
    seed: int = 0
    schedule: str = "linear"
    T: int = 200
    batch_size: int = 32
    start: str = "source"


def model_editor(model: ModelParams, settings: SamplerSettings) -> Editor:
    fn = model_fn(model)
    sched = make_schedule(settings.schedule, settings.T)

    def edit(entries, src):
        tokens = np.stack([tokenize(e.instruction.surface_text) for e in entries])
        seed = derive_seed(settings.seed, "eval", entries[0].index)
        return sample(fn, src.astype(model.config.dtype), tokens, sched, settings.steps, settings.mode,
                      settings.guidance_scale, seed, start=settings.start)

    return edit


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    per_task: dict[str, dict[str, float]]
    avg: dict[str, float]
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "per_task": self.per_task, "avg": self.avg, "rows": self.rows}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def accuracy(sc_values) -> float:
    """Share of rows with a perfect semantic-consistency score."""
    v = list(sc_values)
    return sum(1 for s in v if s == 10) / len(v) if v else 0.0


def _aggregate(rows: list[dict]) -> dict[str, float]:
    if not rows:
        return {"sc": 0.0, "pq": 0.0, "o": 0.0, "acc": 0.0, "n": 0}
    sc = float(np.mean([r["sc"] for r in rows]))
    pq = float(np.mean([r["pq"] for r in rows]))
    o = float(np.mean([r["o"] for r in rows]))
    return {"sc": sc, "pq": pq, "o": o, "acc": accuracy(r["sc"] for r in rows), "n": len(rows),
            "sc_norm": sc / 10, "pq_norm": pq / 10, "o_norm": o / 10}


def report_from_rows(rows: list[dict], chash: str = "") -> EvalReport:
    per_task = {t: _aggregate([r for r in rows if r["task"] == t]) for t in TASKS if any(r["task"] == t for r in rows)}
    return EvalReport(rows, per_task, _aggregate(rows), chash)


def evaluate(editor: Editor, bench: BenchSet, endpoint: ScorerEndpoint | None = None, batch_size: int = 32,
             out_dir=None, chash: str = "") -> EvalReport:
    """Run ``editor`` on every bench entry and score the outputs.

    Outputs are rounded to 8 bits before scoring, as they would be on
    export.  A batch that produces non-finite values is retried entry by
    entry; entries that still fail score 0.
    """
    endpoint = endpoint or ScorerEndpoint()
    client = ExternalScorer(endpoint) if endpoint.kind == "external" else None
    groups: dict[str, list[BenchEntry]] = {}
    for e in bench.entries:
        groups.setdefault(e.bucket, []).append(e)
    outputs: dict[int, np.ndarray | None] = {}
    for bucket in sorted(groups):
        items = groups[bucket]
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            src = np.stack([render(e.scene, e.bucket).pixels for e in chunk])
            try:
                ys = _run(editor, chunk, src)
            except (NonFiniteError, FloatingPointError):
                ys = []
                for e, s in zip(chunk, src):
                    try:
                        ys.append(_run(editor, [e], s[None])[0])
                    except (NonFiniteError, FloatingPointError):
                        ys.append(None)
            for e, y in zip(chunk, ys):
                outputs[e.index] = None if y is None else to_uint8(y) / 255.0

    rows = []
    try:
        for e in bench.entries:
            y = outputs[e.index]
            row = {"index": e.index, "task": e.instruction.task, "bucket": e.bucket, "failed": y is None}
            if y is None:
                card = ScoreCard(0, 0, 0, "sampler produced non-finite values")
            elif client is None:
                card = grade(e.scene, e.instruction, e.bucket, y)
            else:
                rec = EditRecord(f"bench{e.index}", render(e.scene, e.bucket), Raster(y, e.bucket), e.instruction)
                try:
                    card, _ = client.score(rec)
                except ScorerExhausted:
                    card = ScoreCard(0, 0, 0, "scorer unavailable")
                    row["failed"] = True
            row.update(sc1=card.sc1, sc2=card.sc2, pq=card.pq, sc=card.sc, o=card.o)
            rows.append(row)
            if out_dir is not None and y is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_ppm(Path(out_dir) / f"{e.index:04d}_{e.instruction.task}.ppm", y)
    finally:
        if client is not None:
            client.close()
    return report_from_rows(rows, chash)


def _run(editor, entries, src):
    ys = np.asarray(editor(entries, src), dtype=np.float64)
    if not np.isfinite(ys).all():
        raise NonFiniteError("editor output is not finite")
    return list(ys)


def evaluate_checkpoint(path, bench: BenchSet, settings: SamplerSettings | None = None,
                        endpoint: ScorerEndpoint | None = None, out_dir=None) -> EvalReport:
    model, cfg = load_checkpoint(path)
    settings = settings or SamplerSettings()
    chash = config_hash({"model": model.config.to_dict(), "train": cfg, "sampler": dataclasses.asdict(settings)})
    return evaluate(model_editor(model, settings), bench, endpoint, settings.batch_size, out_dir, chash)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ARCHITECTURE_ARMS = {
    "editnet": {"variant": "editnet"},
    "controlnet": {"variant": "controlnet"},
    "controlnet_textcontrol": {"variant": "controlnet_textcontrol"},
    "channel_concat": {"variant": "channel_concat"},
}
SAMPLING_ARMS = {
    "editnet+filtered": {"variant": "editnet", "use_filter": True},
    "editnet+unfiltered": {"variant": "editnet", "use_filter": False},
}


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "summary": self.summary}

    def table(self) -> str:
        lines = [f"{'arm':<26}{'acc':>7}{'o':>7}{'sc':>7}{'pq':>7}{'rm_acc':>8}"]
        for arm, s in self.summary.items():
            lines.append(f"{arm:<26}{s['acc']:>7.3f}{s['o']:>7.2f}{s['sc']:>7.2f}{s['pq']:>7.2f}"
                         f"{s['removal_acc']:>8.3f}")
        return "\n".join(lines)


def ablate(arms: dict[str, dict], config: TrainConfig, bench: BenchSet, seeds=(0, 1, 2), root=None,
           settings: SamplerSettings | None = None) -> AblationReport:
    """Train and evaluate every arm under each seed with shared data and base.

    Each arm is a dict of config overrides.  A failing run contributes a
    row with its error and is left out of the summary.
    """
    if len(arms) < 2:
        raise ValueError("an ablation needs at least two arms")
    root = Path(root or config.out_dir)
    base_cache = config.base_cache or str(root / "base.oemc")
    report = AblationReport()
    for arm, overrides in arms.items():
        for seed in seeds:
            cfg = dataclasses.replace(config, **overrides, seed=seed, out_dir=str(root / arm / f"seed{seed}"),
                                      base_cache=base_cache)
            row = {"arm": arm, "seed": seed}
            try:
                res = run_pipeline(cfg)
                st = settings or SamplerSettings(steps=cfg.eval_steps, guidance_scale=cfg.guidance_scale,
                                                 schedule=cfg.schedule, T=cfg.T)
                rep = evaluate_checkpoint(res.checkpoint, bench, st)
                rep.save(Path(cfg.out_dir) / "report.json")
                row.update(acc=rep.avg["acc"], o=rep.avg["o"], sc=rep.avg["sc"], pq=rep.avg["pq"],
                           removal_acc=rep.per_task.get("obj_removal", {}).get("acc", 0.0),
                           per_task={t: v["acc"] for t, v in rep.per_task.items()})
            except Exception as exc:  # partial report on any constituent failure
                log.exception("ablation run %s seed %d failed", arm, seed)
                row["error"] = f"{type(exc).__name__}: {exc}"
            report.rows.append(row)
    for arm in arms:
        ok = [r for r in report.rows if r["arm"] == arm and "error" not in r]
        if ok:
            report.summary[arm] = {k: float(np.mean([r[k] for r in ok])) for k in ("acc", "o", "sc", "pq", "removal_acc")}
            report.summary[arm]["n_seeds"] = len(ok)
    return report
