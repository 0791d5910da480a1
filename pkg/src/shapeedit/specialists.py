"""Per-task specialist generators producing (source, edited, instruction) records.

Clean edits come from the scene-graph oracle.  A corruption channel can
perturb a record the way an imperfect specialist would, and logs itself
so the downstream filter has a known ground truth.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .microworld import (
    BACKGROUND_KINDS,
    COLORS,
    PALETTE,
    SHAPES,
    STYLES,
    EditError,
    PlacementError,
    Raster,
    Scene,
    dilate,
    foreground_mask,
    get_bucket,
    object_mask,
    place_object,
    render,
    apply_semantic_edit,
)
from .numerics import seeded_rng

TASKS = ("obj_swap", "obj_removal", "obj_addition", "attribute", "background_swap", "environment", "style")
CHANNELS = ("ghost_residual", "wrong_color", "off_target", "global_noise", "ignore_instruction")
MASKED_TASKS = ("obj_swap", "obj_removal", "obj_addition", "background_swap")

# one specialist per task tag; the map is total and has no fallback entry
SPECIALISTS = {
    "obj_swap": "swap_inpainter",
    "obj_removal": "removal_inpainter",
    "obj_addition": "addition_by_inverted_removal",
    "attribute": "attribute_blender",
    "background_swap": "background_inverse_mask",
    "environment": "environment_blender",
    "style": "style_expert",
}

GHOST_OPACITY = 0.3
NOISE_AMPLITUDE = 0.15
DILATE_RADIUS = 1


class InfeasibleTaskError(ValueError):
    pass


class UnknownTaskError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    task: str
    args: dict[str, Any]
    surface_text: str

    def __post_init__(self):
        if not self.surface_text:
            raise ValueError("instruction surface text must be non-empty")

    def to_dict(self) -> dict:
        return {"task": self.task, "args": self.args, "surface_text": self.surface_text}

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(d["task"], d["args"], d["surface_text"])


@dataclass
class EditRecord:
    id: str
    src: Raster
    edited: Raster
    instruction: Instruction
    src_scene: Scene | None = None
    edited_scene: Scene | None = None
    corruption_log: list[str] = field(default_factory=list)
    scores: Any = None
    weight: int | None = None
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.src.bucket != self.edited.bucket or self.src.pixels.shape != self.edited.pixels.shape:
            raise ValueError("source and edited rasters must share a bucket")

    @property
    def task(self) -> str:
        return self.instruction.task

    @property
    def bucket(self) -> str:
        return self.src.bucket


@dataclass(frozen=True)
class CorruptionConfig:
    p_corrupt: float = 0.0
    weights: dict[str, float] = field(default_factory=lambda: {c: 1.0 / len(CHANNELS) for c in CHANNELS})

    def __post_init__(self):
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ValueError("p_corrupt must lie in [0, 1]")
        unknown = set(self.weights) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown corruption channels {sorted(unknown)}")
        w = np.array([self.weights.get(c, 0.0) for c in CHANNELS])
        if (w < 0).any() or (w > 1).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("channel weights must be probabilities summing to 1")


def dispatch(instruction: Instruction | str) -> str:
    task = instruction if isinstance(instruction, str) else instruction.task
    try:
        return SPECIALISTS[task]
    except (KeyError, TypeError):
        raise UnknownTaskError(f"no specialist for task tag {task!r}") from None


# ---------------------------------------------------------------------------
# instruction synthesis
# ---------------------------------------------------------------------------


def _unique_targets(scene: Scene) -> list:
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.descriptor] = counts.get(o.descriptor, 0) + 1
    return [o for o in scene.objects if counts[o.descriptor] == 1]


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _side(x: float) -> str:
    if x < 1 / 3:
        return "left side"
    if x > 2 / 3:
        return "right side"
    return "center"


def _background_text(colors) -> str:
    if len(colors) == 1:
        return f"Replace the background with a {colors[0]} background."
    return f"Replace the background with a {colors[0]} and {colors[1]} background."


def synth_instruction(scene: Scene, task: str, seed: int, bucket="1:1") -> Instruction:
    """Template-based instruction for ``task`` that is feasible on ``scene``."""
    dispatch(task)
    rng = seeded_rng(seed, "instruction", task)
    bg_colors = set(scene.background.colors)
    obj_colors = {o.color for o in scene.objects}
    free_colors = [c for c in COLORS if c not in bg_colors]

    if task in ("obj_swap", "obj_removal", "attribute"):
        targets = _unique_targets(scene)
        if not targets:
            raise InfeasibleTaskError(f"{task} needs an object with a unique description")
        tgt = _pick(rng, targets)
        if task == "obj_removal":
            return Instruction(task, {"target_id": tgt.object_id, "target": tgt.descriptor},
                               f"Remove the {tgt.descriptor} from the image.")
        if task == "attribute":
            colors = [c for c in free_colors if c != tgt.color]
            new_color = _pick(rng, colors)
            return Instruction(task, {"target_id": tgt.object_id, "target": tgt.descriptor, "new_color": new_color},
                               f"Change the {tgt.descriptor} to a {new_color} {tgt.shape}.")
        shape = _pick(rng, [s for s in SHAPES if s != tgt.shape])
        color = _pick(rng, free_colors)
        return Instruction(
            task,
            {"target_id": tgt.object_id, "target": tgt.descriptor, "new": {"shape": shape, "color": color}},
            f"Replace the {tgt.descriptor} with a {color} {shape} in the image.",
        )
    if task == "obj_addition":
        if len(scene.objects) >= 5:
            raise InfeasibleTaskError("scene already holds 5 objects")
        shape = _pick(rng, SHAPES)
        color = _pick(rng, free_colors)
        try:
            obj = place_object(rng, scene.objects, bucket, shape, color, -1)
        except PlacementError as exc:
            raise InfeasibleTaskError(str(exc)) from None
        spec = {"shape": shape, "color": color, "center": list(obj.center), "radius": obj.radius}
        return Instruction(task, {"object": spec}, f"Add a {color} {shape} to the {_side(obj.center[0])} of the image.")
    if task == "background_swap":
        choices = [c for c in COLORS if c not in obj_colors]
        kind = _pick(rng, BACKGROUND_KINDS)
        for _ in range(100):
            if kind == "solid" or len(choices) < 2:
                colors = [_pick(rng, choices)]
                kind = "solid"
            else:
                pair = rng.choice(len(choices), size=2, replace=False)
                colors = [choices[int(pair[0])], choices[int(pair[1])]]
            if (kind, tuple(colors)) != (scene.background.kind, scene.background.colors):
                break
        else:
            raise InfeasibleTaskError("no distinct background available")
        return Instruction(task, {"background": {"kind": kind, "colors": colors}}, _background_text(colors))
    if task == "environment":
        if scene.environment == "day":
            return Instruction(task, {"to": "night"}, "Change the scene from daytime to nighttime.")
        return Instruction(task, {"to": "day"}, "Change the scene from nighttime to daytime.")
    # style
    to = _pick(rng, [s for s in STYLES if s != "plain" and s != scene.style])
    return Instruction(task, {"to": to}, f"Apply a {to} style to the image.")


# ---------------------------------------------------------------------------
# masks and inputs
# ---------------------------------------------------------------------------


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Raster) else np.asarray(x)


def build_masked_input(x, mask: np.ndarray) -> np.ndarray:
    """Source with the masked region zeroed out."""
    px = _pixels(x)
    mask = np.asarray(mask)
    if mask.shape != px.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match raster {px.shape[:2]}")
    return px * (1.0 - mask.astype(px.dtype))[..., None]


def edit_region(instruction: Instruction, src_scene: Scene, bucket) -> np.ndarray:
    """Undilated pixel region a clean edit is allowed to touch."""
    b = get_bucket(bucket)
    task, args = instruction.task, instruction.args
    if task in ("obj_swap", "obj_removal", "attribute"):
        region = object_mask(src_scene, b, args["target_id"])
        if task == "obj_swap":
            edited = apply_semantic_edit(src_scene, instruction, b.name)
            region = region | object_mask(edited, b, args["target_id"])
        return region
    if task == "obj_addition":
        edited = apply_semantic_edit(src_scene, instruction, b.name)
        return object_mask(edited, b, edited.objects[-1].object_id)
    if task == "background_swap":
        return ~foreground_mask(src_scene, b)
    return np.ones((b.height, b.width), dtype=bool)


def task_mask(instruction: Instruction, src_scene: Scene, bucket, r: int = DILATE_RADIUS) -> np.ndarray:
    return dilate(edit_region(instruction, src_scene, bucket), r)


# ---------------------------------------------------------------------------
# corruption channels
# ---------------------------------------------------------------------------


def next_color(color: str, exclude) -> str:
    """Palette neighbour of ``color`` in table order, skipping ``exclude``."""
    i = COLORS.index(color)
    for k in range(1, len(COLORS)):
        c = COLORS[(i + k) % len(COLORS)]
        if c not in exclude:
            return c
    raise EditError("no substitute color available")


def wrong_color_instruction(instruction: Instruction, scene: Scene) -> Instruction:
    """The same edit with its new color swapped for a palette neighbour."""
    task, args = instruction.task, json.loads(json.dumps(instruction.args))
    bg = set(scene.background.colors)
    if task == "obj_swap":
        args["new"]["color"] = next_color(args["new"]["color"], bg)
    elif task == "obj_addition":
        args["object"]["color"] = next_color(args["object"]["color"], bg)
    elif task == "attribute":
        old = scene.get(args["target_id"]).color
        args["new_color"] = next_color(args["new_color"], bg | {old})
    elif task == "background_swap":
        colors = args["background"]["colors"]
        taken = {o.color for o in scene.objects} | set(colors)
        colors[0] = next_color(colors[0], taken)
    else:
        raise EditError(f"wrong_color does not apply to {task}")
    return Instruction(task, args, instruction.surface_text)


def off_target_instructions(instruction: Instruction, scene: Scene) -> list[Instruction]:
    """Every variant of the edit applied to a different object that changes the image."""
    task, args = instruction.task, instruction.args
    if task not in ("obj_swap", "obj_removal", "attribute"):
        return []
    tgt = scene.get(args["target_id"])
    out = []
    for o in scene.objects:
        if o.object_id == tgt.object_id or o.descriptor == tgt.descriptor:
            continue
        new_args = dict(args, target_id=o.object_id, target=o.descriptor)
        if task == "obj_swap" and (o.shape, o.color) == (args["new"]["shape"], args["new"]["color"]):
            continue
        if task == "attribute" and o.color == args["new_color"]:
            continue
        out.append(Instruction(task, new_args, instruction.surface_text))
    return out


def ghost_region(instruction: Instruction, src_scene: Scene, bucket) -> np.ndarray | None:
    task, args = instruction.task, instruction.args
    if task in ("obj_swap", "obj_removal", "attribute"):
        return object_mask(src_scene, bucket, args["target_id"])
    if task == "background_swap":
        return ~foreground_mask(src_scene, bucket)
    return None


def ghost_blend(clean: np.ndarray, src: np.ndarray, region: np.ndarray) -> np.ndarray:
    out = clean.copy()
    out[region] = (1.0 - GHOST_OPACITY) * clean[region] + GHOST_OPACITY * src[region]
    return out


def applicable_channels(instruction: Instruction, scene: Scene) -> list[str]:
    task = instruction.task
    out = []
    if task in ("obj_swap", "obj_removal", "attribute", "background_swap"):
        out.append("ghost_residual")
    if task in ("obj_swap", "obj_addition", "attribute", "background_swap"):
        out.append("wrong_color")
    if off_target_instructions(instruction, scene):
        out.append("off_target")
    out += ["global_noise", "ignore_instruction"]
    return out


def _choose_channel(rng, config: CorruptionConfig, channels: list[str]) -> str:
    w = np.array([config.weights.get(c, 0.0) for c in channels])
    if w.sum() <= 0:
        return "ignore_instruction"
    return channels[int(rng.choice(len(channels), p=w / w.sum()))]


def corrupt(channel: str, instruction: Instruction, src_scene: Scene, bucket, src: np.ndarray,
            clean: np.ndarray, rng) -> np.ndarray:
    """Apply one corruption channel to a clean edited raster."""
    if channel == "ignore_instruction":
        return src.copy()
    if channel == "global_noise":
        return np.clip(clean + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, clean.shape), 0.0, 1.0)
    if channel == "ghost_residual":
        return ghost_blend(clean, src, ghost_region(instruction, src_scene, bucket))
    if channel == "wrong_color":
        wrong = wrong_color_instruction(instruction, src_scene)
        return render(apply_semantic_edit(src_scene, wrong, bucket), bucket).pixels
    if channel == "off_target":
        options = off_target_instructions(instruction, src_scene)
        return render(apply_semantic_edit(src_scene, _pick(rng, options), bucket), bucket).pixels
    raise ValueError(f"unknown corruption channel {channel!r}")


# ---------------------------------------------------------------------------
# pair generation
# ---------------------------------------------------------------------------


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return float(np.max(np.abs(a - b))) <= 1.01 / 255.0


def invert_removal(record: EditRecord) -> EditRecord:
    """Turn a removal record into an addition record by swapping its sides."""
    if record.task != "obj_removal":
        raise ValueError(f"can only invert obj_removal records, got {record.task}")
    tgt = record.src_scene.get(record.instruction.args["target_id"]) if record.src_scene else None
    desc = record.instruction.args.get("target") or tgt.descriptor
    args = {"object_id": record.instruction.args["target_id"], "target": desc}
    if tgt is not None:
        args["object"] = {"shape": tgt.shape, "color": tgt.color, "center": list(tgt.center), "radius": tgt.radius}
    instr = Instruction("obj_addition", args, f"Add a {desc} to the image.")
    return dataclasses.replace(
        record,
        src=record.edited,
        edited=record.src,
        src_scene=record.edited_scene,
        edited_scene=record.src_scene,
        instruction=instr,
        corruption_log=list(record.corruption_log),
    )


def _addition_as_removal(scene: Scene, instruction: Instruction, bucket) -> tuple[Scene, Instruction]:
    """Post-addition scene and the removal instruction whose inverse is this addition."""
    after = apply_semantic_edit(scene, instruction, bucket)
    new = after.objects[-1]
    removal = Instruction("obj_removal", {"target_id": new.object_id, "target": new.descriptor},
                          f"Remove the {new.descriptor} from the image.")
    return after, removal


def gen_pair(task: str, scene: Scene, instruction: Instruction, corruption: CorruptionConfig | None = None,
             seed: int = 0, bucket="1:1", record_id: str | None = None) -> EditRecord:
    """One specialist output for ``instruction`` on ``scene``.

    Additions are built as the inverse of a clean removal on the
    post-addition scene.  With probability ``p_corrupt`` one applicable
    corruption channel perturbs the edited raster and is logged.
    """
    if dispatch(instruction) != dispatch(task):
        raise ValueError(f"instruction task {instruction.task} does not match requested {task}")
    corruption = corruption or CorruptionConfig()
    b = get_bucket(bucket)
    rid = record_id if record_id is not None else f"{task}-{seed}"
    src_r = render(scene, b)
    if task == "obj_addition":
        after, removal = _addition_as_removal(scene, instruction, b.name)
        inverse = invert_removal(EditRecord(rid, render(after, b), src_r, removal, after, scene))
        edited_scene = inverse.edited_scene
        clean = inverse.edited.pixels
    else:
        edited_scene = apply_semantic_edit(scene, instruction, b.name)
        clean = render(edited_scene, b).pixels

    rng = seeded_rng(seed, "corrupt", rid)
    log: list[str] = []
    edited = clean
    if rng.random() < corruption.p_corrupt:
        channels = applicable_channels(instruction, scene)
        while True:
            channel = _choose_channel(rng, corruption, channels)
            edited = corrupt(channel, instruction, scene, b.name, src_r.pixels, clean, rng)
            # a channel that happens to reproduce the clean edit or the source is not a distinct failure
            if channel == "ignore_instruction" or not (_same(edited, clean) or _same(edited, src_r.pixels)):
                break
            channels = [c for c in channels if c != channel]
        log.append(channel)
    return EditRecord(rid, src_r, Raster(edited, b.name), instruction, scene, edited_scene, log)


def generate_record(seed: int, index: int, task: str, corruption: CorruptionConfig | None = None,
                    bucket=None, max_objects: int = 3) -> EditRecord:
    """Sample a scene and a feasible instruction for ``task``, then build the pair.

    Infeasible draws are resampled under derived labels, so the result only
    depends on ``(seed, index, task)``.
    """
    from .microworld import BUCKET_NAMES, sample_scene
    from .numerics import derive_seed

    for attempt in range(100):
        s = derive_seed(seed, "record", index, attempt)
        bname = bucket or BUCKET_NAMES[int(seeded_rng(s, "bucket").integers(len(BUCKET_NAMES)))]
        try:
            scene = sample_scene(s, bname, max_objects=max_objects)
            instr = synth_instruction(scene, task, s, bname)
        except (InfeasibleTaskError, PlacementError):
            continue
        return gen_pair(task, scene, instr, corruption, s, bname, record_id=f"r{index:06d}")
    raise InfeasibleTaskError(f"no feasible {task} scene after 100 draws")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def record_to_json(rec: EditRecord, src_path: str, edited_path: str) -> dict:
    d = {
        "id": rec.id,
        "task": rec.task,
        "bucket": rec.bucket,
        "src_path": src_path,
        "edited_path": edited_path,
        "instruction": rec.instruction.to_dict(),
        "corruption_log": list(rec.corruption_log),
        "src_scene": rec.src_scene.to_dict() if rec.src_scene else None,
        "edited_scene": rec.edited_scene.to_dict() if rec.edited_scene else None,
    }
    if rec.scores is not None:
        d["scores"] = rec.scores.to_dict() if hasattr(rec.scores, "to_dict") else rec.scores
    if rec.weight is not None:
        d["weight"] = int(rec.weight)
    return d


def write_dataset(records, root) -> Path:
    """Write rasters as PPM under ``root/images`` and metadata to ``records.jsonl``."""
    from .microworld import write_ppm

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        sp, ep = f"images/{rec.id}_src.ppm", f"images/{rec.id}_edited.ppm"
        write_ppm(root / sp, rec.src.pixels)
        write_ppm(root / ep, rec.edited.pixels)
        lines.append(json.dumps(record_to_json(rec, sp, ep), sort_keys=True))
    path = root / "records.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_dataset(path) -> list[EditRecord]:
    """Load a JSONL dataset; raster paths resolve relative to the file's directory."""
    from .microworld import read_ppm

    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rec = EditRecord(
            d["id"],
            Raster(read_ppm(path.parent / d["src_path"]), d["bucket"]),
            Raster(read_ppm(path.parent / d["edited_path"]), d["bucket"]),
            Instruction.from_dict(d["instruction"]),
            Scene.from_dict(d["src_scene"]) if d.get("src_scene") else None,
            Scene.from_dict(d["edited_scene"]) if d.get("edited_scene") else None,
            list(d.get("corruption_log", [])),
            d.get("scores"),
            d.get("weight"),
            d,
        )
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# optional learned inpainting specialist
# ---------------------------------------------------------------------------


def random_strokes(rng, height: int, width: int, n_strokes: int = 3, thickness: int = 2) -> np.ndarray:
    """Random straight strokes, used as removal-specialist training masks."""
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(n_strokes):
        y0, y1 = rng.uniform(0, height, 2)
        x0, x1 = rng.uniform(0, width, 2)
        n = int(max(abs(y1 - y0), abs(x1 - x0))) + 1
        ys = np.clip(np.round(np.linspace(y0, y1, n)).astype(int), 0, height - 1)
        xs = np.clip(np.round(np.linspace(x0, x1, n)).astype(int), 0, width - 1)
        mask[ys, xs] = True
    return dilate(mask, thickness // 2)


def inpainting_batch(scenes_and_masks, bucket) -> tuple[np.ndarray, np.ndarray, list[Scene]]:
    """Targets and (masked source, mask) conditioning for the inpainting model."""
    targets, conds, scenes = [], [], []
    for scene, mask in scenes_and_masks:
        x = render(scene, bucket).pixels
        targets.append(x)
        conds.append(np.concatenate([build_masked_input(x, mask), mask[..., None].astype(x.dtype)], axis=-1))
        scenes.append(scene)
    return np.stack(targets), np.stack(conds), scenes


def train_inpainting_specialist(config: dict, dataset, log=None):
    """Train a small masked-reconstruction diffusion model.

    ``dataset`` is a list of ``(scene, mask)`` pairs sharing one bucket.
    The model sees ``[x * (1 - M), M]`` stacked on x_t and the scene
    caption, and learns to denoise the full raster.  Returns the model and
    the per-step loss history.
    """
    from .diffusion import editing_loss, make_schedule, to_model
    from .editnet import ModelConfig, forward, init_model
    from .microworld import caption
    from .numerics import AdamState, NonFiniteError, adam_step, grad
    from .vocab import tokenize

    cfg = ModelConfig(
        variant="channel_concat",
        layers=config.get("layers", 2),
        hidden=config.get("hidden", 48),
        heads=config.get("heads", 4),
        cond_channels=4,
    )
    model = init_model(cfg, config.get("seed", 0))
    sched = make_schedule(config.get("schedule", "linear"), config.get("T", 200))
    state = AdamState(lr=config.get("lr", 1e-3))
    steps, batch = config.get("steps", 200), config.get("batch_size", 8)
    bucket = config.get("bucket", "1:1")
    x_all, c_all, scenes = inpainting_batch(dataset, bucket)
    tokens_all = np.stack([tokenize(caption(s)) for s in scenes])
    dtype = np.dtype(cfg.dtype)
    history = []
    for step in range(steps):
        rng = seeded_rng(config.get("seed", 0), "inpaint", step)
        idx = rng.choice(len(x_all), size=min(batch, len(x_all)), replace=False)
        x0 = to_model(x_all[idx]).astype(dtype)
        cond = np.concatenate([to_model(c_all[idx, ..., :3]), c_all[idx, ..., 3:]], axis=-1).astype(dtype)
        t = rng.integers(1, sched.T + 1, size=len(idx))
        eps = rng.standard_normal(x0.shape).astype(dtype)
        leaves = model.leaves()

        def fn(x_t, src, tok, tt):
            return forward(model, x_t, src, tok, tt, leaves=leaves)

        loss = editing_loss(fn, cond, x0, tokens_all[idx], t, eps, sched)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"inpainting loss diverged at step {step}")
        grads = grad(loss, {k: leaves[k] for k in model.trainable})
        model.params.update(adam_step(model.params, grads, state))
        history.append(value)
        if log is not None:
            log(step, value)
    return model, history
