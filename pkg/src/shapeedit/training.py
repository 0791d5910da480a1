"""Generalist training: bucketed batches, the weighted editing objective,
checkpoints and the resumable gen -> score -> filter -> train pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import editing_loss, make_schedule, to_model
from .editnet import ModelConfig, ModelParams, forward, init_model
from .microworld import BUCKET_NAMES, bucket_table_digest, caption, render, sample_scene, PlacementError
from .numerics import AdamState, NonFiniteError, adam_step, decode_tensor, derive_seed, encode_tensor, grad, seeded_rng
from .vocab import null_tokens, tokenize

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OEMC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every key accepted by the config file and ``--key=value`` overrides."""

    out_dir: str = "run"
    seed: int = 0
    # data generation
    n_records: int = 760
    p_corrupt: float = 0.3
    max_objects: int = 3
    # scoring and filtering
    threshold: float = 9.0
    statistic: str = "o"
    use_filter: bool = True
    train_records: int = 512
    # model
    variant: str = "editnet"
    layers: int = 6
    hidden: int = 96
    heads: int = 4
    # optimization
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    schedule: str = "linear"
    T: int = 200
    text_dropout: float = 0.1
    loss_weight: float = 1.0
    uniform_per_task: bool = False
    bucket_weights: str = ""
    checkpoint_every: int = 500
    # base text-to-image pretraining
    base_steps: int = 1500
    base_seed: int = 0
    base_lr: float = 1e-3
    base_cache: str = ""
    # evaluation
    eval_steps: int = 20
    guidance_scale: float = 1.0
    bench_scenes: int = 62
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0 or self.base_steps < 0:
            raise ValueError("step counts must be >= 0")
        for name in self.bucket_mix():
            if name not in BUCKET_NAMES:
                raise ValueError(f"unknown bucket {name!r} in bucket_weights")

    def bucket_mix(self) -> dict[str, float]:
        """Parse ``"1:1=2,16:9=1"``; empty means the natural data mix."""
        out = {}
        for item in filter(None, (s.strip() for s in self.bucket_weights.split(","))):
            name, _, w = item.rpartition("=")
            out[name] = float(w)
        return out

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig(variant=variant or self.variant, layers=self.layers, hidden=self.hidden,
                           heads=self.heads, dtype=self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.keys())
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        clean = {}
        for k, v in d.items():
            t = types[k]
            if t == "bool" and isinstance(v, str):
                v = v.lower() in ("1", "true", "yes", "on")
            elif t in ("int", "float", "str") and not isinstance(v, bool):
                v = {"int": int, "float": float, "str": str}[t](v)
            clean[k] = v
        return cls(**clean)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def bucketize(records, batch_size: int, seed: int, epoch: int = 0) -> list[list]:
    """Bucket-homogeneous batches, shuffled per epoch; tail batches may be short."""
    rng = seeded_rng(seed, "bucketize", epoch)
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.bucket, []).append(r)
    batches = []
    for name in sorted(groups):
        items = groups[name]
        order = rng.permutation(len(items))
        for i in range(0, len(items), batch_size):
            batches.append([items[int(k)] for k in order[i : i + batch_size]])
    perm = rng.permutation(len(batches))
    return [batches[int(k)] for k in perm]


def _balanced(records, seed: int, epoch: int) -> list:
    by_task: dict[str, list] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r)
    n = max(len(v) for v in by_task.values())
    rng = seeded_rng(seed, "balance", epoch)
    out = []
    for task in sorted(by_task):
        items = by_task[task]
        idx = np.concatenate([rng.permutation(len(items)) for _ in range(math.ceil(n / len(items)))])[:n]
        out += [items[int(i)] for i in idx]
    return out


def _bucket_mixed(records, mix: dict[str, float], seed: int, epoch: int) -> list:
    rng = seeded_rng(seed, "bucket-mix", epoch)
    keep = []
    top = max(mix.values())
    for r in records:
        if rng.random() < mix.get(r.bucket, 0.0) / top:
            keep.append(r)
    return keep


def batch_stream(records, config: TrainConfig):
    """Endless sequence of batches across epochs."""
    epoch = 0
    mix = config.bucket_mix()
    while True:
        pool = _balanced(records, config.seed, epoch) if config.uniform_per_task else list(records)
        if mix:
            pool = _bucket_mixed(pool, mix, config.seed, epoch)
        if not pool:
            raise ValueError("bucket mix removed every record")
        yield from bucketize(pool, config.batch_size, config.seed, epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelParams, config: dict | None, path) -> Path:
    """Write ``model`` with its config; layout is header, named tensor blobs, sha256 trailer."""
    meta = {"model": model.config.to_dict(), "trainable": sorted(model.trainable), "config": config or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)),
        meta_bytes,
        hashlib.sha256(meta_bytes).digest(),
        bytes.fromhex(bucket_table_digest()),
        struct.pack("<I", len(model.params)),
    ]
    for name in sorted(model.params):
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(model.params[name])]
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if len(data) < 4 + 6 + 32 + 32 + 4 + 32:
        raise CheckpointError("checkpoint is truncated")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n_meta = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated)")
    pos = 10
    meta_bytes = data[pos : pos + n_meta]
    pos += n_meta
    if hashlib.sha256(meta_bytes).digest() != data[pos : pos + 32]:
        raise CheckpointError("config hash mismatch")
    pos += 32
    if data[pos : pos + 32].hex() != bucket_table_digest():
        raise CheckpointError("checkpoint was written with a different bucket table")
    pos += 32
    (n_params,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(n_params):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode()
        pos += n
        params[name], pos = decode_tensor(body, pos)
    meta = json.loads(meta_bytes)
    cfg = ModelConfig(**meta["model"])
    expected = set(init_model_names(cfg))
    if set(params) != expected:
        raise CheckpointError("checkpoint parameters do not match its model config")
    return ModelParams(cfg, params, frozenset(meta["trainable"])), meta["config"]


def init_model_names(cfg: ModelConfig) -> list[str]:
    small = dataclasses.replace(cfg, hidden=cfg.heads * 2, t_dim=4, dtype="float64")
    return list(init_model(small, 0).params)


def base_hash(model: ModelParams) -> str:
    """Byte hash of every base-branch parameter."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        if name.startswith("base."):
            h.update(name.encode())
            h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


class EmptyDatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _record_noise(seed: int, step: int, rid: str, shape, T: int, dtype, drop_p: float):
    rng = seeded_rng(seed, "noise", step, rid)
    t = int(rng.integers(1, T + 1))
    eps = rng.standard_normal(shape).astype(dtype)
    drop = rng.random() < drop_p
    return t, eps, drop


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    task_loss: dict[str, float] = field(default_factory=dict)


def train_step(model: ModelParams, state: AdamState, batch, step: int, config: TrainConfig, sched,
               weights=None) -> StepResult:
    """One weighted-objective update on a bucket-homogeneous batch.

    ``weights`` gives a 0/1 importance weight per record; noise, timestep
    and text dropout are drawn per record id, so dropping weight-0 records
    leaves the others' draws untouched.
    """
    dtype = np.dtype(model.config.dtype)
    x_tgt = np.stack([to_model(r.edited.pixels) for r in batch]).astype(dtype)
    x_src = np.stack([to_model(r.src.pixels) for r in batch]).astype(dtype)
    tokens = np.stack([tokenize(r.instruction.surface_text) for r in batch])
    draws = [_record_noise(config.seed, step, r.id, x_tgt.shape[1:], sched.T, dtype, config.text_dropout)
             for r in batch]
    t = np.array([d[0] for d in draws])
    eps = np.stack([d[1] for d in draws])
    drop = np.array([d[2] for d in draws])
    if drop.any():
        tokens = np.where(drop[:, None], null_tokens(len(batch), tokens.shape[1]), tokens)
    lam = np.ones(len(batch), dtype=int) if weights is None else np.asarray(weights, dtype=int)
    leaves = model.leaves()
    captured = {}

    def fn(x_t, src, tok, tt):
        out = forward(model, x_t, src if model.config.variant != "base" else None, tok, tt, leaves=leaves)
        captured["pred"] = out.data
        return out

    src_in = None if model.config.variant == "base" else x_src
    loss = editing_loss(fn, src_in, x_tgt, tokens, t, eps, sched, w=config.loss_weight, lambda_w=lam)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {step}")
    if "pred" not in captured:
        return StepResult(0.0, 0.0)
    grads = grad(loss, {k: leaves[k] for k in model.trainable})
    model.params.update(adam_step(model.params, grads, state))

    kept = [r for r, w in zip(batch, lam) if w]
    per = ((captured["pred"] - eps[lam > 0]) ** 2).reshape(len(kept), -1).mean(axis=1)
    task_loss: dict[str, list[float]] = {}
    for r, v in zip(kept, per):
        task_loss.setdefault(r.task, []).append(float(v))
    return StepResult(value, _global_norm(grads), {k: float(np.mean(v)) for k, v in task_loss.items()})


def _adam(config: TrainConfig, lr: float | None = None) -> AdamState:
    return AdamState(lr=lr or config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps_adam)


def train(model: ModelParams, records, config: TrainConfig, metrics_path=None, checkpoint_path=None,
          steps: int | None = None) -> list[StepResult]:
    """Train on weight-1 records (or all records, when none carry weights)."""
    kept = [r for r in records if r.weight is None or r.weight == 1]
    if not kept:
        raise EmptyDatasetError("empty filtered dataset")
    sched = make_schedule(config.schedule, config.T)
    state = _adam(config)
    stream = batch_stream(kept, config)
    history = []
    steps = config.steps if steps is None else steps
    mf = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(steps):
            batch = next(stream)
            try:
                res = train_step(model, state, batch, step, config, sched)
            except NonFiniteError as exc:
                if checkpoint_path:
                    log.error("aborting at step %d; last good parameters kept in %s", step, checkpoint_path)
                raise TrainingDiverged(str(exc)) from exc
            history.append(res)
            if mf:
                tasks = sorted(res.task_loss)
                mf.write(json.dumps({"step": step, "loss": res.loss, "task": tasks[0] if len(tasks) == 1 else "mixed",
                                     "grad_norm": res.grad_norm, "lr": state.lr, "task_loss": res.task_loss},
                                    sort_keys=True) + "\n")
            if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, portable_config(config), checkpoint_path)
    finally:
        if mf:
            mf.close()
    return history


@dataclass
class _CaptionRecord:
    """Minimal record shape used for text-to-image pretraining of the base."""

    id: str
    src: object
    edited: object
    instruction: object
    bucket: str
    task: str = "caption"
    weight: int | None = None


@dataclass(frozen=True)
class _Text:
    surface_text: str


def caption_records(n: int, seed: int, max_objects: int = 3) -> list:
    out = []
    i = 0
    while len(out) < n:
        s = derive_seed(seed, "caption", i)
        bucket = BUCKET_NAMES[i % len(BUCKET_NAMES)]
        i += 1
        try:
            scene = sample_scene(s, bucket, max_objects=max_objects)
        except PlacementError:
            continue
        r = render(scene, bucket)
        out.append(_CaptionRecord(f"c{len(out):06d}", r, r, _Text(caption(scene)), bucket))
    return out


def pretrain_base(config: TrainConfig, n_scenes: int = 2048, seed: int | None = None) -> ModelParams:
    """Text-to-image pretraining of the base branch on scene captions."""
    seed = config.base_seed if seed is None else seed
    model = init_model(config.model_config("base"), seed)
    records = caption_records(n_scenes, seed, config.max_objects)
    cfg = dataclasses.replace(config, seed=seed, uniform_per_task=False, bucket_weights="")
    sched = make_schedule(cfg.schedule, cfg.T)
    state = _adam(cfg, cfg.base_lr)
    stream = batch_stream(records, cfg)
    for step in range(config.base_steps):
        res = train_step(model, state, next(stream), step, cfg, sched)
        if step % 100 == 0:
            log.info("base step %d loss %.4f", step, res.loss)
    return model


# ---------------------------------------------------------------------------
# resumable pipeline
# ---------------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(file_hash(p).encode())
    return h.hexdigest()


class Manifest:
    """Per-stage record of input keys and output hashes for skip-on-rerun."""

    def __init__(self, path):
        self.path = Path(path)
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}

    def done(self, stage: str, key: str) -> bool:
        entry = self.data.get(stage)
        if not entry or entry["key"] != key:
            return False
        for p, h in entry["outputs"].items():
            q = self.path.parent / p
            if not q.exists() or (tree_hash(q) if q.is_dir() else file_hash(q)) != h:
                return False
        return True

    def record(self, stage: str, key: str, outputs: list[Path]) -> str:
        hashes = {}
        for q in outputs:
            rel = str(Path(q).relative_to(self.path.parent))
            hashes[rel] = tree_hash(q) if Path(q).is_dir() else file_hash(q)
        self.data[stage] = {"key": key, "outputs": hashes}
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        return config_hash(hashes)

    def output_key(self, stage: str) -> str:
        entry = self.data.get(stage)
        return config_hash(entry["outputs"]) if entry else ""


def generate_dataset(config: TrainConfig, root) -> Path:
    from .specialists import TASKS, CorruptionConfig, generate_record, write_dataset

    corruption = CorruptionConfig(config.p_corrupt)
    records = [generate_record(config.seed, i, TASKS[i % len(TASKS)], corruption, max_objects=config.max_objects)
               for i in range(config.n_records)]
    return write_dataset(records, root)


def select_training_set(annotated: Path, out: Path, config: TrainConfig) -> Path:
    """Weight-1 records (or, with ``use_filter`` off, an equal-size unfiltered draw)."""
    rows = [json.loads(line) for line in annotated.read_text().splitlines() if line.strip()]
    if config.use_filter:
        pool = [d for d in rows if d.get("weight") == 1]
    else:
        pool = [dict(d, weight=1) for d in rows if not d.get("unscored")]
    if config.train_records:
        pool = pool[: config.train_records]
    out.write_text("".join(json.dumps(d, sort_keys=True) + "\n" for d in pool))
    return out


STAGE_KEYS = {
    "gen": ("seed", "n_records", "p_corrupt", "max_objects"),
    "score": ("threshold", "statistic"),
    "filter": ("use_filter", "train_records", "threshold", "statistic"),
    "base": ("base_seed", "layers", "hidden", "heads", "schedule", "T", "text_dropout", "base_steps", "base_lr",
             "batch_size", "max_objects", "dtype"),
    "train": ("variant", "steps", "batch_size", "lr", "beta1", "beta2", "eps_adam", "schedule", "T", "text_dropout",
              "loss_weight", "uniform_per_task", "bucket_weights", "seed", "dtype"),
}


PATH_KEYS = ("out_dir", "base_cache")


def portable_config(config: TrainConfig) -> dict:
    """Config as stored in checkpoints; filesystem locations are left out so
    identical runs in different directories write identical bytes."""
    return {k: v for k, v in config.to_dict().items() if k not in PATH_KEYS}


def _key(config: TrainConfig, stage: str, *upstream: str) -> str:
    d = {k: getattr(config, k) for k in STAGE_KEYS[stage]}
    return config_hash({"stage": stage, "cfg": d, "up": list(upstream)})


@dataclass
class PipelineResult:
    root: Path
    dataset: Path
    annotated: Path
    filtered: Path
    base: Path
    checkpoint: Path
    metrics: Path
    ran: list[str]


def run_pipeline(config: TrainConfig, stages=("gen", "score", "filter", "base", "train")) -> PipelineResult:
    """Run (or skip, when already complete) each pipeline stage under ``config.out_dir``."""
    from .scoring import ScorerEndpoint, score_dataset

    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root / "manifest.json")
    data_dir = root / "data"
    dataset = data_dir / "records.jsonl"
    annotated = data_dir / "annotated.jsonl"
    filtered = data_dir / "train_set.jsonl"
    base_path = Path(config.base_cache) if config.base_cache else root / "base.oemc"
    ckpt = root / "model.oemc"
    metrics = root / "metrics.jsonl"
    ran = []

    k_gen = _key(config, "gen")
    if "gen" in stages and not manifest.done("gen", k_gen):
        generate_dataset(config, data_dir)
        manifest.record("gen", k_gen, [dataset, data_dir / "images"])
        ran.append("gen")
    k_score = _key(config, "score", manifest.output_key("gen"))
    if "score" in stages and not manifest.done("score", k_score):
        score_dataset(dataset, ScorerEndpoint("oracle"), config.threshold, annotated, rescore=True,
                      statistic=config.statistic)
        manifest.record("score", k_score, [annotated])
        ran.append("score")
    k_filter = _key(config, "filter", manifest.output_key("score"))
    if "filter" in stages and not manifest.done("filter", k_filter):
        select_training_set(annotated, filtered, config)
        manifest.record("filter", k_filter, [filtered])
        ran.append("filter")

    k_base = _key(config, "base")
    if "base" in stages:
        if config.base_cache:
            if not base_path.exists():
                save_checkpoint(pretrain_base(config), {"stage": "base", "key": k_base}, base_path)
                ran.append("base")
        elif not manifest.done("base", k_base):
            save_checkpoint(pretrain_base(config), {"stage": "base", "key": k_base}, base_path)
            manifest.record("base", k_base, [base_path])
            ran.append("base")

    if "train" in stages:
        k_train = _key(config, "train", manifest.output_key("filter"), file_hash(base_path))
        if not manifest.done("train", k_train):
            from .specialists import read_dataset

            records = read_dataset(filtered)
            if not any(r.weight == 1 for r in records):
                raise EmptyDatasetError("empty filtered dataset")
            base, _ = load_checkpoint(base_path)
            model = init_model(config.model_config(), config.seed, base=base)
            before = base_hash(model)
            train(model, records, config, metrics, ckpt)
            if config.variant != "channel_concat" and base_hash(model) != before:
                raise RuntimeError("frozen base branch changed during training")
            save_checkpoint(model, portable_config(config), ckpt)
            manifest.record("train", k_train, [ckpt, metrics])
            ran.append("train")
    return PipelineResult(root, dataset, annotated, filtered, base_path, ckpt, metrics, ran)
