"""Miniature joint text-image diffusion transformer and its conditioning variants.

The base network embeds ``[text tokens | image patch tokens]`` and runs
them through joint-attention blocks modulated by the timestep (adaLN).
Conditioning variants:

``editnet``
    A control block per layer reads the *current* base text and image
    tokens plus its own source-image stream, and its zero-initialized
    projections add deltas to both base image and base text tokens before
    the matching base block runs.
``controlnet``
    The control stack runs on its own from (source tokens, text, t) and
    only adds image-token deltas to the base.
``controlnet_textcontrol``
    As ``controlnet`` plus per-layer text-token deltas.
``channel_concat``
    Source raster stacked onto x_t channel-wise at the patch embedder;
    single branch, everything trainable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .numerics import Tensor, seeded_rng
from .numerics.tensor import add, concat, embedding, gelu, layernorm, matmul, mul, reshape, silu, softmax, take, transpose
from .vocab import TEXT_LEN, VOCAB_SIZE

VARIANTS = ("base", "editnet", "controlnet", "controlnet_textcontrol", "channel_concat")
CONTROL_VARIANTS = ("editnet", "controlnet", "controlnet_textcontrol")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "editnet"
    layers: int = 6
    hidden: int = 96
    heads: int = 4
    patch: int = 4
    vocab: int = VOCAB_SIZE
    text_len: int = TEXT_LEN
    t_dim: int = 64
    mlp_ratio: int = 2
    cond_channels: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hidden % self.heads:
            raise ValueError("hidden dim must be divisible by heads")
        if self.t_dim % 2:
            raise ValueError("timestep embedding dim must be even")

    @property
    def in_channels(self) -> int:
        return 3 + (self.cond_channels if self.variant == "channel_concat" else 0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, np.ndarray]
    trainable: frozenset[str] = field(default_factory=frozenset)

    def count(self, prefix: str = "") -> int:
        return sum(int(v.size) for k, v in self.params.items() if k.startswith(prefix))

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=k in self.trainable) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.hidden, cfg.mlp_ratio
    return {
        "mod.w": (d, 6 * d),
        "mod.b": (6 * d,),
        "qkv.w": (d, 3 * d),
        "qkv.b": (3 * d,),
        "proj.w": (d, d),
        "proj.b": (d,),
        "fc1.w": (d, r * d),
        "fc1.b": (r * d,),
        "fc2.w": (r * d, d),
        "fc2.b": (d,),
    }


def _init_block(rng, cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in _block_shapes(cfg).items():
        if name.endswith(".b") or name.startswith("mod."):
            out[name] = np.zeros(shape, dtype=dtype)  # adaLN-zero
        else:
            fan_in, fan_out = shape
            std = math.sqrt(2.0 / (fan_in + fan_out))
            out[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return out


def _xavier(rng, shape, dtype):
    std = math.sqrt(2.0 / (shape[0] + shape[1]))
    return (rng.standard_normal(shape) * std).astype(dtype)


def _init_base(cfg: ModelConfig, seed: int, dtype) -> dict[str, np.ndarray]:
    rng = seeded_rng(seed, "init", "base")
    d, p = cfg.hidden, cfg.patch
    params = {
        "base.x_embed.w": _xavier(rng, (p * p * cfg.in_channels, d), dtype),
        "base.x_embed.b": np.zeros(d, dtype=dtype),
        "base.txt_embed": (rng.standard_normal((cfg.vocab, d)) * 0.02).astype(dtype),
        "base.txt_pos": (rng.standard_normal((cfg.text_len, d)) * 0.02).astype(dtype),
        "base.t_mlp.w1": _xavier(rng, (cfg.t_dim, d), dtype),
        "base.t_mlp.b1": np.zeros(d, dtype=dtype),
        "base.t_mlp.w2": _xavier(rng, (d, d), dtype),
        "base.t_mlp.b2": np.zeros(d, dtype=dtype),
        "base.final.mod.w": np.zeros((d, 2 * d), dtype=dtype),
        "base.final.mod.b": np.zeros(2 * d, dtype=dtype),
        "base.final.out.w": np.zeros((d, p * p * 3), dtype=dtype),
        "base.final.out.b": np.zeros(p * p * 3, dtype=dtype),
    }
    for i in range(cfg.layers):
        for name, arr in _init_block(rng, cfg, dtype).items():
            params[f"base.L{i}.{name}"] = arr
    return params


def _expand_embed(w: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Widen a 3-channel patch embedder to ``cfg.in_channels`` with zero rows."""
    p, d = cfg.patch, w.shape[1]
    w = w.reshape(p, p, 3, d)
    out = np.zeros((p, p, cfg.in_channels, d), dtype=w.dtype)
    out[:, :, :3] = w
    return out.reshape(p * p * cfg.in_channels, d)


def init_model(config: ModelConfig, seed: int = 0, base: ModelParams | None = None) -> ModelParams:
    """Initialize parameters for ``config.variant``.

    With ``base`` (a trained ``base`` variant) the base branch is copied
    from it; otherwise it is freshly initialized from ``seed``.  Control
    blocks start as copies of the base blocks, and every control output
    projection starts at exactly zero, so a fresh control-branch model
    reproduces its base.
    """
    dtype = np.dtype(config.dtype)
    base_cfg = ModelConfig(**{**config.to_dict(), "variant": "base"})
    if base is not None:
        if base.config.variant != "base":
            raise ValueError("base checkpoint must be of the 'base' variant")
        mismatched = [
            k for k in ("layers", "hidden", "heads", "patch", "vocab", "text_len", "t_dim", "mlp_ratio")
            if getattr(base.config, k) != getattr(config, k)
        ]
        if mismatched:
            raise ValueError(f"base checkpoint does not match config in {mismatched}")
        params = {k: v.astype(dtype, copy=True) for k, v in base.params.items()}
    else:
        params = _init_base(base_cfg, seed, dtype)

    v = config.variant
    if v == "base":
        return ModelParams(config, params, frozenset(params))
    if v == "channel_concat":
        params["base.x_embed.w"] = _expand_embed(params["base.x_embed.w"], config)
        return ModelParams(config, params, frozenset(params))

    d = config.hidden
    ctrl = {
        "ctrl.src_embed.w": params["base.x_embed.w"].copy(),
        "ctrl.src_embed.b": params["base.x_embed.b"].copy(),
    }
    for i in range(config.layers):
        for name in _block_shapes(config):
            ctrl[f"ctrl.L{i}.{name}"] = params[f"base.L{i}.{name}"].copy()
        ctrl[f"ctrl.L{i}.img_out.w"] = np.zeros((d, d), dtype=dtype)
        ctrl[f"ctrl.L{i}.img_out.b"] = np.zeros(d, dtype=dtype)
        if v in ("editnet", "controlnet_textcontrol"):
            ctrl[f"ctrl.L{i}.txt_out.w"] = np.zeros((d, d), dtype=dtype)
            ctrl[f"ctrl.L{i}.txt_out.b"] = np.zeros(d, dtype=dtype)
    params.update(ctrl)
    return ModelParams(config, params, frozenset(ctrl))


def frozen_names(model: ModelParams) -> list[str]:
    return sorted(set(model.params) - model.trainable)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

_POS_CACHE: dict[tuple, np.ndarray] = {}


def image_pos_embed(gh: int, gw: int, d: int, dtype) -> np.ndarray:
    """Fixed 2-D sin/cos embedding; half the channels encode rows, half columns."""
    key = (gh, gw, d, np.dtype(dtype).str)
    if key not in _POS_CACHE:
        quarter = d // 4
        freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
        rows, cols = np.mgrid[0:gh, 0:gw]
        parts = []
        for coord in (rows.reshape(-1), cols.reshape(-1)):
            ang = coord[:, None] * freqs[None, :]
            parts += [np.sin(ang), np.cos(ang)]
        emb = np.concatenate(parts, axis=1)
        pad = d - emb.shape[1]
        if pad:
            emb = np.concatenate([emb, np.zeros((emb.shape[0], pad))], axis=1)
        _POS_CACHE[key] = emb.astype(dtype)
    return _POS_CACHE[key]


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not aligned to patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, gh: int, gw: int, p: int, c: int) -> Tensor:
    b = tokens.shape[0]
    x = reshape(tokens, (b, gh, gw, p, p, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, gh * p, gw * p, c))


def linear(x: Tensor, P: dict[str, Tensor], name: str) -> Tensor:
    return add(matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def _chunks(mod: Tensor, n: int, d: int) -> list[Tensor]:
    b = mod.shape[0]
    return [reshape(take(mod, i * d, (i + 1) * d, axis=1), (b, 1, d)) for i in range(n)]


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return add(mul(layernorm(x), add(scale, 1.0)), shift)


def attention(h: Tensor, P: dict[str, Tensor], name: str, heads: int) -> Tensor:
    b, length, d = h.shape
    dh = d // heads
    qkv = linear(h, P, f"{name}.qkv")
    qkv = transpose(reshape(qkv, (b, length, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (reshape(take(qkv, i, i + 1, axis=0), (b, heads, length, dh)) for i in range(3))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, length, d))
    return linear(out, P, f"{name}.proj")


def joint_block(x: Tensor, c: Tensor, P: dict[str, Tensor], name: str, cfg: ModelConfig) -> Tensor:
    d = cfg.hidden
    shift1, scale1, gate1, shift2, scale2, gate2 = _chunks(linear(c, P, f"{name}.mod"), 6, d)
    x = add(x, mul(gate1, attention(_modulate(x, shift1, scale1), P, name, cfg.heads)))
    hidden = gelu(linear(_modulate(x, shift2, scale2), P, f"{name}.fc1"))
    return add(x, mul(gate2, linear(hidden, P, f"{name}.fc2")))


def _split(tokens: Tensor, n_text: int) -> tuple[Tensor, Tensor]:
    length = tokens.shape[1]
    return take(tokens, 0, n_text, axis=1), take(tokens, n_text, length, axis=1)


def _join(txt: Tensor, img: Tensor) -> Tensor:
    return concat([txt, img], axis=1)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

ViewHook = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def forward(
    model: ModelParams,
    x_t: np.ndarray,
    source: np.ndarray | None,
    tokens: np.ndarray,
    t: np.ndarray,
    leaves: dict[str, Tensor] | None = None,
    trace: list | None = None,
    control_view: ViewHook | None = None,
) -> Tensor:
    """Noise prediction for model-space inputs.

    ``x_t`` and ``source`` are (B, H, W, 3) arrays in model space.
    ``leaves`` lets a trainer pass its own parameter tensors (to collect
    gradients); ``trace`` receives one record per layer per branch;
    ``control_view`` rewrites the base intermediates *as seen by the
    control branch* (used to prove which variants read them).
    """
    cfg = model.config
    P = leaves if leaves is not None else model.leaves()
    if set(P) != set(model.params):
        raise ValueError("parameter set does not match the model variant")
    dtype = np.dtype(cfg.dtype)
    b, h, w, _ = x_t.shape
    p, d = cfg.patch, cfg.hidden
    gh, gw = h // p, w // p
    tokens = np.asarray(tokens)
    if tokens.shape != (b, cfg.text_len):
        raise ValueError(f"expected tokens of shape {(b, cfg.text_len)}, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id outside the vocabulary")
    needs_source = cfg.variant != "base"
    if needs_source and source is None:
        raise ValueError(f"variant {cfg.variant} needs a source image")

    pos = Tensor(image_pos_embed(gh, gw, d, dtype))
    x_in = x_t if cfg.variant != "channel_concat" else np.concatenate([x_t, source], axis=-1)
    img = add(linear(Tensor(patchify(x_in.astype(dtype), p)), P, "base.x_embed"), pos)
    txt = add(embedding(P["base.txt_embed"], tokens), P["base.txt_pos"])
    c = _t_mlp(t, P, cfg, dtype)
    n_text = cfg.text_len

    v = cfg.variant
    src_tok = None
    if v in CONTROL_VARIANTS:
        src_tok = add(linear(Tensor(patchify(source.astype(dtype), p)), P, "ctrl.src_embed"), pos)

    # parallel control stack: never sees base intermediates
    deltas: list[tuple[Tensor | None, Tensor]] = []
    if v in ("controlnet", "controlnet_textcontrol"):
        c_txt, c_img = txt, src_tok
        for i in range(cfg.layers):
            c_in = _join(c_txt, c_img)
            c_out = joint_block(c_in, c, P, f"ctrl.L{i}", cfg)
            c_txt, c_img = _split(c_out, n_text)
            if trace is not None:
                trace.append(_record("control", i, c_in, c_out))
            d_txt = linear(c_txt, P, f"ctrl.L{i}.txt_out") if v == "controlnet_textcontrol" else None
            deltas.append((d_txt, linear(c_img, P, f"ctrl.L{i}.img_out")))

    ctrl_img = src_tok
    for i in range(cfg.layers):
        if v == "editnet":
            view_txt, view_img = txt, img
            if control_view is not None:
                vt, vi = control_view(i, txt.data, img.data)
                view_txt, view_img = Tensor(vt), Tensor(vi)
            c_in = _join(view_txt, add(view_img, ctrl_img))
            c_out = joint_block(c_in, c, P, f"ctrl.L{i}", cfg)
            c_txt, ctrl_img = _split(c_out, n_text)
            if trace is not None:
                trace.append(_record("control", i, c_in, c_out))
            txt = add(txt, linear(c_txt, P, f"ctrl.L{i}.txt_out"))
            img = add(img, linear(ctrl_img, P, f"ctrl.L{i}.img_out"))
        elif deltas:
            d_txt, d_img = deltas[i]
            if d_txt is not None:
                txt = add(txt, d_txt)
            img = add(img, d_img)
        x_in_layer = _join(txt, img)
        out = joint_block(x_in_layer, c, P, f"base.L{i}", cfg)
        if trace is not None:
            trace.append(_record("base", i, x_in_layer, out))
        txt, img = _split(out, n_text)

    shift, scale = _chunks(linear(c, P, "base.final.mod"), 2, d)
    y = linear(_modulate(img, shift, scale), P, "base.final.out")
    return unpatchify(y, gh, gw, p, 3)


def _t_mlp(t, P, cfg, dtype) -> Tensor:
    emb = Tensor(timestep_embedding(t, cfg.t_dim, dtype))
    hidden = silu(add(matmul(emb, P["base.t_mlp.w1"]), P["base.t_mlp.b1"]))
    return silu(add(matmul(hidden, P["base.t_mlp.w2"]), P["base.t_mlp.b2"]))


def _record(branch: str, layer: int, tokens_in: Tensor, tokens_out: Tensor) -> dict:
    return {"branch": branch, "layer": layer, "in": tokens_in.data.copy(), "out": tokens_out.data.copy()}


def instrument(model: ModelParams, x_t, source, tokens, t, control_view: ViewHook | None = None):
    """Forward pass that also returns the per-layer activation trace."""
    trace: list[dict] = []
    out = forward(model, x_t, source, tokens, t, trace=trace, control_view=control_view)
    return out, trace


def model_fn(model: ModelParams) -> Callable:
    """Adapter to the sampler's ``(x_t, source, tokens, t)`` calling convention."""
    leaves = model.leaves()
    for leaf in leaves.values():
        leaf.requires_grad = False

    def fn(x_t, source, tokens, t):
        return forward(model, x_t, source, tokens, t, leaves=leaves)

    return fn
