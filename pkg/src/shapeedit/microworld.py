"""Procedural shape-world: scene graphs, a hard-edged renderer, exact masks
and an oracle editor that applies structured instructions to scenes.

Coordinates are normalized to the canvas: an object's center is given in
[0,1]^2 as (x, y) and its radius as a fraction of min(height, width).
Pixel (i, j) is sampled at its center ((j + .5), (i + .5)).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .numerics.rng import seeded_rng

SHAPES = ("circle", "square", "triangle")

# 8-bit values so rasters survive a PPM round trip exactly
PALETTE_255: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "orange": (245, 145, 30),
    "yellow": (240, 220, 50),
    "green": (50, 170, 70),
    "blue": (40, 90, 220),
    "purple": (150, 70, 190),
    "white": (245, 245, 245),
    "black": (25, 25, 25),
}
COLORS = tuple(PALETTE_255)
PALETTE = {k: np.array(v, dtype=np.float64) / 255.0 for k, v in PALETTE_255.items()}

ENVIRONMENTS = ("day", "night")
STYLES = ("plain", "sepia", "posterized")
BACKGROUND_KINDS = ("solid", "two-tone-vertical")

NIGHT_GAIN = np.array([0.45, 0.5, 0.7])
SEPIA = np.array(
    [
        [0.393, 0.769, 0.189],
        [0.349, 0.686, 0.168],
        [0.272, 0.534, 0.131],
    ]
)

RADIUS_RANGE = (0.12, 0.2)
# shapes are checked for overlap through a bounding circle of this many radii
EXTENT = 1.15
MIN_GAP_PX = 2.0
MAX_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    """Rejection sampling could not place an object."""


class EditError(ValueError):
    """An instruction cannot be applied to a scene."""


class UnknownObjectError(KeyError):
    pass


@dataclass(frozen=True)
class AspectBucket:
    name: str
    width: int
    height: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, 3)


# width x height; every dim a multiple of the 4-px patch, area within 15% of 1024
BUCKETS: dict[str, AspectBucket] = {
    b.name: b
    for b in (
        AspectBucket("1:1", 32, 32),
        AspectBucket("3:4", 28, 36),
        AspectBucket("4:3", 36, 28),
        AspectBucket("2:3", 24, 40),
        AspectBucket("3:2", 40, 24),
        AspectBucket("9:16", 24, 44),
        AspectBucket("16:9", 44, 24),
    )
}
BUCKET_NAMES = tuple(BUCKETS)


def get_bucket(bucket: AspectBucket | str) -> AspectBucket:
    if isinstance(bucket, AspectBucket):
        return bucket
    try:
        return BUCKETS[bucket]
    except KeyError:
        raise ValueError(f"unknown aspect bucket {bucket!r}") from None


def bucket_table_digest() -> str:
    import hashlib

    rows = [f"{b.name}:{b.width}x{b.height}" for b in BUCKETS.values()]
    return hashlib.sha256(";".join(rows).encode()).hexdigest()


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    shape: str
    color: str
    center: tuple[float, float]
    radius: float

    @property
    def descriptor(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Background:
    kind: str
    colors: tuple[str, ...]


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    background: Background
    environment: str = "day"
    style: str = "plain"

    def get(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise UnknownObjectError(object_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "objects": [
                {
                    "object_id": o.object_id,
                    "shape": o.shape,
                    "color": o.color,
                    "center": [o.center[0], o.center[1]],
                    "radius": o.radius,
                }
                for o in self.objects
            ],
            "background": {"kind": self.background.kind, "colors": list(self.background.colors)},
            "environment": self.environment,
            "style": self.style,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scene":
        objs = tuple(
            SceneObject(
                int(o["object_id"]), o["shape"], o["color"], (float(o["center"][0]), float(o["center"][1])), float(o["radius"])
            )
            for o in d["objects"]
        )
        bg = Background(d["background"]["kind"], tuple(d["background"]["colors"]))
        return cls(objs, bg, d["environment"], d["style"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class Raster:
    pixels: np.ndarray
    bucket: str = field(default="1:1")

    def __post_init__(self):
        b = get_bucket(self.bucket)
        if self.pixels.shape != b.shape:
            raise ValueError(f"raster shape {self.pixels.shape} does not match bucket {b.name} {b.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _pixel_frame(obj: SceneObject, b: AspectBucket) -> tuple[float, float, float]:
    return obj.center[0] * b.width, obj.center[1] * b.height, obj.radius * min(b.width, b.height)


def _coverage(obj: SceneObject, b: AspectBucket) -> np.ndarray:
    cx, cy, rp = _pixel_frame(obj, b)
    ys, xs = np.mgrid[0 : b.height, 0 : b.width]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= rp * rp
    if obj.shape == "square":
        half = 0.8 * rp
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if obj.shape == "triangle":
        # upward equilateral triangle with circumradius rp; slanted edges have slope sqrt(3)
        return (dy >= -rp + math.sqrt(3.0) * np.abs(dx)) & (dy <= rp / 2.0)
    raise ValueError(f"unknown shape {obj.shape!r}")


def _fits(obj: SceneObject, others, b: AspectBucket) -> bool:
    cx, cy, rp = _pixel_frame(obj, b)
    ext = EXTENT * rp
    if cx - ext < 1 or cy - ext < 1 or cx + ext > b.width - 1 or cy + ext > b.height - 1:
        return False
    for other in others:
        ox, oy, orp = _pixel_frame(other, b)
        if math.hypot(cx - ox, cy - oy) < ext + EXTENT * orp + MIN_GAP_PX:
            return False
    return True


def place_object(
    rng: np.random.Generator,
    others,
    bucket,
    shape: str,
    color: str,
    object_id: int,
    radius: float | None = None,
) -> SceneObject:
    """Rejection-sample a center for a new object; raises PlacementError."""
    b = get_bucket(bucket)
    for _ in range(MAX_ATTEMPTS):
        r = float(rng.uniform(*RADIUS_RANGE)) if radius is None else radius
        center = (float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)))
        obj = SceneObject(object_id, shape, color, center, r)
        if _fits(obj, others, b):
            return obj
    raise PlacementError(f"could not place {color} {shape} after {MAX_ATTEMPTS} attempts")


def sample_scene(seed: int, bucket, n_objects: int | None = None, max_objects: int = 3) -> Scene:
    """Deterministic scene for ``seed``.

    Object colors never coincide with a background color, so every object
    is visible against the background it sits on.
    """
    b = get_bucket(bucket)
    rng = seeded_rng(seed, "scene", b.name)
    if n_objects is None:
        n_objects = int(rng.integers(1, max_objects + 1))
    if not 1 <= n_objects <= 5:
        raise ValueError("scenes hold between 1 and 5 objects")
    kind = BACKGROUND_KINDS[int(rng.integers(2))]
    if kind == "solid":
        bg = Background(kind, (COLORS[int(rng.integers(len(COLORS)))],))
    else:
        pair = rng.choice(len(COLORS), size=2, replace=False)
        bg = Background(kind, (COLORS[int(pair[0])], COLORS[int(pair[1])]))
    allowed = [c for c in COLORS if c not in bg.colors]
    objects: list[SceneObject] = []
    for i in range(n_objects):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = allowed[int(rng.integers(len(allowed)))]
        objects.append(place_object(rng, objects, b, shape, color, i))
    environment = "day" if rng.random() < 0.75 else "night"
    style = "plain" if rng.random() < 0.75 else STYLES[1 + int(rng.integers(2))]
    return Scene(tuple(objects), bg, environment, style)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def environment_transform(pixels: np.ndarray, environment: str) -> np.ndarray:
    if environment == "day":
        return pixels
    if environment == "night":
        return pixels * NIGHT_GAIN
    raise ValueError(f"unknown environment {environment!r}")


def style_transform(pixels: np.ndarray, style: str) -> np.ndarray:
    if style == "plain":
        return pixels
    if style == "sepia":
        return np.clip(pixels @ SEPIA.T, 0.0, 1.0)
    if style == "posterized":
        return np.floor(pixels * 3.0 + 0.5) / 3.0
    raise ValueError(f"unknown style {style!r}")


def render_background(background: Background, bucket) -> np.ndarray:
    b = get_bucket(bucket)
    img = np.empty(b.shape)
    if background.kind == "solid":
        img[:] = PALETTE[background.colors[0]]
    elif background.kind == "two-tone-vertical":
        split = b.height // 2
        img[:split] = PALETTE[background.colors[0]]
        img[split:] = PALETTE[background.colors[1]]
    else:
        raise ValueError(f"unknown background kind {background.kind!r}")
    return img


def render_layers(scene: Scene, bucket) -> np.ndarray:
    """Background plus objects, before environment and style transforms."""
    img = render_background(scene.background, bucket)
    b = get_bucket(bucket)
    for obj in scene.objects:
        img[_coverage(obj, b)] = PALETTE[obj.color]
    return img


def render(scene: Scene, bucket) -> Raster:
    b = get_bucket(bucket)
    img = render_layers(scene, b)
    img = environment_transform(img, scene.environment)
    img = style_transform(img, scene.style)
    return Raster(np.clip(img, 0.0, 1.0), b.name)


def object_mask(scene: Scene, bucket, object_id: int) -> np.ndarray:
    return _coverage(scene.get(object_id), get_bucket(bucket))


def foreground_mask(scene: Scene, bucket) -> np.ndarray:
    b = get_bucket(bucket)
    mask = np.zeros((b.height, b.width), dtype=bool)
    for obj in scene.objects:
        mask |= _coverage(obj, b)
    return mask


def dilate(mask: np.ndarray, r: int) -> np.ndarray:
    """Binary dilation with a (2r+1)x(2r+1) square, clipped at the borders."""
    if r < 0:
        raise ValueError("dilation radius must be >= 0")
    out = np.asarray(mask, dtype=bool)
    if r == 0:
        return out.copy()
    # the square element is separable: dilate rows, then columns
    for axis in (0, 1):
        n = out.shape[axis]
        padded = np.pad(out, [(r, r) if a == axis else (0, 0) for a in range(2)])
        acc = np.zeros_like(out)
        for k in range(2 * r + 1):
            acc |= np.take(padded, np.arange(k, k + n), axis=axis)
        out = acc
    return out


# ---------------------------------------------------------------------------
# oracle editor
# ---------------------------------------------------------------------------


def _objects_fit(objects, bucket) -> bool:
    b = get_bucket(bucket)
    return all(_fits(o, [p for p in objects if p is not o], b) for o in objects)


def apply_semantic_edit(scene: Scene, instruction, bucket="1:1") -> Scene:
    """Exact scene-graph edit for a structured instruction.

    ``instruction`` needs ``task`` and ``args`` attributes.  ``bucket`` only
    matters for addition, where the new object must fit the canvas.
    """
    task, args = instruction.task, instruction.args
    if task in ("obj_swap", "obj_removal", "attribute"):
        target = args["target_id"]
        try:
            old = scene.get(target)
        except UnknownObjectError:
            raise EditError(f"referent object {target} is not in the scene") from None
        if task == "obj_removal":
            return dataclasses.replace(scene, objects=tuple(o for o in scene.objects if o.object_id != target))
        if task == "obj_swap":
            new = dataclasses.replace(old, shape=args["new"]["shape"], color=args["new"]["color"])
        else:
            new = dataclasses.replace(old, color=args["new_color"])
        return dataclasses.replace(scene, objects=tuple(new if o.object_id == target else o for o in scene.objects))
    if task == "obj_addition":
        spec = args["object"]
        new_id = max((o.object_id for o in scene.objects), default=-1) + 1
        obj = SceneObject(new_id, spec["shape"], spec["color"], tuple(spec["center"]), float(spec["radius"]))
        if len(scene.objects) >= 5:
            raise EditError("scene already holds 5 objects")
        if not _fits(obj, scene.objects, get_bucket(bucket)):
            raise EditError("infeasible placement for the added object")
        return dataclasses.replace(scene, objects=scene.objects + (obj,))
    if task == "background_swap":
        bg = args["background"]
        return dataclasses.replace(scene, background=Background(bg["kind"], tuple(bg["colors"])))
    if task == "environment":
        return dataclasses.replace(scene, environment=args["to"])
    if task == "style":
        return dataclasses.replace(scene, style=args["to"])
    raise EditError(f"unknown task {task!r}")


def caption(scene: Scene) -> str:
    """Plain description used as the text prompt when pretraining the base model."""
    parts = [f"a {o.color} {o.shape}" for o in scene.objects]
    text = " and ".join(parts)
    bg = scene.background.colors
    text += f" on a {bg[0]} background" if len(bg) == 1 else f" on a {bg[0]} and {bg[1]} background"
    if scene.environment == "night":
        text += " at nighttime"
    if scene.style != "plain":
        text += f" in {scene.style} style"
    return text


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Round half-up to 8 bits."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(pixels))


def ppm_bytes(pixels: np.ndarray) -> bytes:
    arr = to_uint8(pixels)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def parse_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0
