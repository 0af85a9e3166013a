"""Model configuration, parameter storage, blocks and full models."""
from __future__ import annotations

import dataclasses
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .autodiff import Node, Tape, ops
from .layers import (
    SPATIAL_INIT_STD,
    SguVariant,
    SpatialWeights,
    TinyAttnWeights,
    channel_proj,
    gelu,
    layer_norm,
    mixer_token_mlp,
    sgu,
    stochastic_depth,
    tiny_attention,
)
from .tensor_core import ShapeError

PROTOCOLS = ("mlm_token", "vision_patch")
BLOCK_TYPES = ("gmlp", "mixer", "transformer")
SPATIAL_MODES = ("dense", "toeplitz")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``n`` is the fixed sequence length (patch count for vision). For the MLM
    protocol ``vocab_size`` counts data symbols; the embedding table has one
    extra row for the mask token, whose id is ``vocab_size``.
    """

    protocol: str = "mlm_token"
    L: int = 2
    d_model: int = 32
    d_ffn: int = 64
    n: int = 16
    sgu_variant: str = "multiplicative_split"
    spatial_mode: str = "dense"
    tiny_attn: int | None = None
    survival_prob: float = 1.0
    vocab_size: int | None = 16
    num_classes: int | None = None
    image_size: int | None = None
    patch_size: int | None = None
    channels: int | None = None
    block_type: str = "gmlp"
    d_spatial: int | None = None
    heads: int | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if self.spatial_mode not in SPATIAL_MODES:
            raise ConfigError(f"spatial_mode must be one of {SPATIAL_MODES}, got {self.spatial_mode!r}")
        try:
            variant = SguVariant(self.sgu_variant)
        except ValueError:
            raise ConfigError(f"unknown sgu_variant {self.sgu_variant!r}") from None
        if self.L < 0:
            raise ConfigError("L must be non-negative")
        for name in ("d_model", "d_ffn", "n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if variant is SguVariant.MULTIPLICATIVE_SPLIT and self.d_ffn % 2:
            raise ConfigError(f"d_ffn must be even for the split SGU, got {self.d_ffn}")
        if not 0.0 < self.survival_prob <= 1.0:
            raise ConfigError(f"survival_prob must lie in (0, 1], got {self.survival_prob}")
        if self.tiny_attn is not None and self.tiny_attn < 1:
            raise ConfigError("tiny_attn must be a positive head size or null")
        if self.protocol == "mlm_token":
            if not self.vocab_size or self.vocab_size < 1:
                raise ConfigError("mlm_token protocol needs vocab_size")
        else:
            for name in ("num_classes", "image_size", "patch_size", "channels"):
                if not getattr(self, name):
                    raise ConfigError(f"vision_patch protocol needs {name}")
            if self.image_size % self.patch_size:
                raise ConfigError("image_size must be a multiple of patch_size")
            if (self.image_size // self.patch_size) ** 2 != self.n:
                raise ConfigError(
                    f"n={self.n} does not match the patch grid of {self.image_size}/{self.patch_size}"
                )
        if self.block_type == "mixer" and not self.d_spatial:
            raise ConfigError("mixer blocks need d_spatial")
        if self.block_type == "transformer":
            if not self.heads or self.d_model % self.heads:
                raise ConfigError(f"d_model={self.d_model} is not divisible into heads={self.heads}")

    @property
    def variant(self) -> SguVariant:
        return SguVariant(self.sgu_variant)

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def embed_rows(self) -> int:
        return self.vocab_size + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def _vision(L, d_model, d_ffn, survival):
    return ModelConfig(
        protocol="vision_patch", L=L, d_model=d_model, d_ffn=d_ffn, n=196, spatial_mode="dense",
        survival_prob=survival, vocab_size=None, num_classes=1000, image_size=224, patch_size=16, channels=3,
    )


def _bert(L, d_model, d_ffn, attn=None):
    return ModelConfig(
        protocol="mlm_token", L=L, d_model=d_model, d_ffn=d_ffn, n=512, spatial_mode="toeplitz",
        tiny_attn=attn, vocab_size=32000,
    )


PRESETS: dict[str, ModelConfig] = {
    "gmlp-ti": _vision(30, 128, 768, 1.00),
    "gmlp-s": _vision(30, 256, 1536, 0.95),
    "gmlp-b": _vision(30, 512, 3072, 0.80),
    "gmlp-base": _bert(48, 512, 3072),
    "amlp-base": _bert(36, 512, 3072, 64),
    "gmlp-large": _bert(96, 768, 3072),
    "amlp-large": _bert(72, 768, 3072, 128),
    "gmlp-xlarge": _bert(144, 1024, 4096),
    "micro": ModelConfig(),
}


def get_preset(name: str) -> ModelConfig:
    key = name.lower().replace("_", "-")
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return PRESETS[key]


def load_config(spec: str) -> ModelConfig:
    """Resolve a preset name or a path to a JSON config."""
    path = Path(spec)
    if path.suffix == ".json" or path.is_file():
        return ModelConfig.from_json(path.read_text())
    return get_preset(spec)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: np.ndarray
    init: str
    decay: bool


@dataclass
class ParamStore:
    """Ordered, named parameter tensors; names are ``scope/.../role``."""

    params: "OrderedDict[str, Param]" = field(default_factory=OrderedDict)

    def add(self, name: str, value: np.ndarray, init: str, decay: bool) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = Param(np.ascontiguousarray(value), init, decay)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self.params[name].value
        if value.shape != old.shape:
            raise ShapeError(f"{name}: expected shape {old.shape}, got {value.shape}")
        self.params[name].value = np.ascontiguousarray(value, dtype=old.dtype)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return ((k, p.value) for k, p in self.params.items())

    def names(self) -> list[str]:
        return list(self.params)

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.value) for k, p in self.params.items())

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise KeyError(f"checkpoint mismatch; missing={missing}, unexpected={extra}")
        for k, v in state.items():
            if v.shape != self.params[k].value.shape:
                raise ShapeError(f"{k}: expected shape {self.params[k].value.shape}, got {v.shape}")
            self.params[k].value = np.array(v, dtype=v.dtype, copy=True)

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.param(k, p.value) for k, p in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, Param(p.value.copy(), p.init, p.decay)) for k, p in self.params.items()))


def _init_value(spec: str, shape: tuple, rng: np.random.Generator, dtype) -> np.ndarray:
    kind, _, arg = spec.partition(":")
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "normal":
        return rng.normal(0.0, float(arg), size=shape).astype(dtype)
    if kind == "xavier_uniform":
        fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    raise ValueError(f"unknown init spec {spec!r}")


def param_layout(config: ModelConfig) -> list[tuple[str, tuple, str, bool]]:
    """(name, shape, init spec, weight decay?) for every parameter, in store order."""
    c = config
    out: list[tuple[str, tuple, str, bool]] = []

    def dense(prefix, a, b, init="xavier_uniform", bias=True):
        out.append((f"{prefix}/weight", (a, b), init, True))
        if bias:
            out.append((f"{prefix}/bias", (b,), "zeros", False))

    def norm(prefix, width):
        out.append((f"{prefix}/gamma", (width,), "ones", False))
        out.append((f"{prefix}/beta", (width,), "zeros", False))

    if c.protocol == "mlm_token":
        out.append(("embed/table", (c.embed_rows, c.d_model), "normal:0.02", True))
    else:
        dense("patch_embed", c.patch_dim, c.d_model)
    if c.block_type == "transformer":
        out.append(("pos_embed/table", (c.n, c.d_model), "normal:0.02", True))

    e = c.d_ffn
    for i in range(c.L):
        p = f"blocks/{i:03d}"
        if c.block_type == "gmlp":
            gate_width = c.variant.out_channels(e)
            norm(f"{p}/norm", c.d_model)
            dense(f"{p}/proj_in", c.d_model, e)
            norm(f"{p}/sgu/norm", gate_width)
            w_shape = (c.n, c.n) if c.spatial_mode == "dense" else (2 * c.n - 1,)
            out.append((f"{p}/sgu/spatial/weight", w_shape, f"normal:{SPATIAL_INIT_STD}", True))
            out.append((f"{p}/sgu/spatial/bias", (c.n,), "ones", False))
            if c.tiny_attn:
                dense(f"{p}/attn/qkv", c.d_model, 3 * c.tiny_attn, bias=False)
                dense(f"{p}/attn/out", c.tiny_attn, gate_width)
            dense(f"{p}/proj_out", gate_width, c.d_model)
        elif c.block_type == "mixer":
            norm(f"{p}/norm1", c.d_model)
            out.append((f"{p}/token_mlp/w1", (c.n, c.d_spatial), "xavier_uniform", True))
            out.append((f"{p}/token_mlp/b1", (c.d_spatial,), "zeros", False))
            out.append((f"{p}/token_mlp/w2", (c.d_spatial, c.n), "xavier_uniform", True))
            out.append((f"{p}/token_mlp/b2", (c.n,), "zeros", False))
            norm(f"{p}/norm2", c.d_model)
            dense(f"{p}/mlp/fc1", c.d_model, e)
            dense(f"{p}/mlp/fc2", e, c.d_model)
        else:
            norm(f"{p}/norm1", c.d_model)
            dense(f"{p}/attn/qkv", c.d_model, 3 * c.d_model, bias=False)
            dense(f"{p}/attn/out", c.d_model, c.d_model)
            norm(f"{p}/norm2", c.d_model)
            dense(f"{p}/mlp/fc1", c.d_model, e)
            dense(f"{p}/mlp/fc2", e, c.d_model)

    norm("final_norm", c.d_model)
    if c.protocol == "mlm_token":
        out.append(("mlm_head/bias", (c.embed_rows,), "zeros", False))
    else:
        dense("head", c.d_model, c.num_classes)
    return out


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
    store = ParamStore()
    for name, shape, init, decay in param_layout(config):
        store.add(name, _init_value(init, shape, rng, dtype), init, decay)
    return store


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _scope(params: Mapping[str, Node], prefix: str) -> dict[str, Node]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + "/")}


def _check_block_input(x: Node, config: ModelConfig) -> None:
    if x.shape[-2:] != (config.n, config.d_model):
        raise ShapeError(f"block expects (..., {config.n}, {config.d_model}) input, got {x.shape}")


def _spatial_weights(p: Mapping[str, Node], config: ModelConfig) -> SpatialWeights:
    return SpatialWeights(config.spatial_mode, p["sgu/spatial/weight"], p["sgu/spatial/bias"])


def _gated_block(x: Node, p: Mapping[str, Node], config: ModelConfig, mode: str,
                 rng: np.random.Generator | None, with_attention: bool) -> Node:
    _check_block_input(x, config)
    shortcut = x
    xn = layer_norm(x, p["norm/gamma"], p["norm/beta"])
    z = gelu(channel_proj(xn, p["proj_in/weight"], p["proj_in/bias"]))
    extra = None
    if with_attention:
        tw = TinyAttnWeights(p["attn/qkv/weight"], p["attn/out/weight"], p["attn/out/bias"])
        extra = tiny_attention(xn, tw)
    z = sgu(z, config.variant, _spatial_weights(p, config), p["sgu/norm/gamma"], p["sgu/norm/beta"], extra)
    y = channel_proj(z, p["proj_out/weight"], p["proj_out/bias"])
    y = stochastic_depth(y, config.survival_prob, mode, rng)
    return ops.add(shortcut, y)


def gmlp_block(x: Node, params: Mapping[str, Node], config: ModelConfig, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Node:
    """One gMLP block; ``params`` uses block-local names (``norm/gamma``, ...)."""
    return _gated_block(x, params, config, mode, rng, with_attention=False)


def amlp_block(x: Node, params: Mapping[str, Node], config: ModelConfig, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Node:
    """gMLP block whose gate also receives tiny attention of the normalized input."""
    if not config.tiny_attn:
        raise ConfigError("amlp_block needs config.tiny_attn")
    return _gated_block(x, params, config, mode, rng, with_attention=True)


def mixer_block(x: Node, p: Mapping[str, Node], config: ModelConfig, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Node:
    _check_block_input(x, config)
    xn = layer_norm(x, p["norm1/gamma"], p["norm1/beta"])
    t = mixer_token_mlp(xn, p["token_mlp/w1"], p["token_mlp/b1"], p["token_mlp/w2"], p["token_mlp/b2"])
    x = ops.add(x, stochastic_depth(t, config.survival_prob, mode, rng))
    h = layer_norm(x, p["norm2/gamma"], p["norm2/beta"])
    h = channel_proj(gelu(channel_proj(h, p["mlp/fc1/weight"], p["mlp/fc1/bias"])), p["mlp/fc2/weight"], p["mlp/fc2/bias"])
    return ops.add(x, stochastic_depth(h, config.survival_prob, mode, rng))


def multi_head_attention(xn: Node, qkv_w: Node, out_w: Node, out_b: Node, heads: int) -> Node:
    squeeze = xn.ndim == 2
    if squeeze:
        xn = ops.reshape(xn, (1,) + xn.shape)
    bs, n, _ = xn.shape
    width = qkv_w.shape[1] // 3
    if width % heads:
        raise ShapeError(f"attention width {width} is not divisible by {heads} heads")
    hd = width // heads

    def heads_first(t: Node) -> Node:
        t = ops.permute(ops.reshape(t, (bs, n, heads, hd)), (0, 2, 1, 3))
        return ops.reshape(t, (bs * heads, n, hd))

    q, k, v = (heads_first(t) for t in ops.split(ops.linear(xn, qkv_w), 3))
    scores = ops.scale(ops.bmm(q, ops.transpose_last2(k)), 1.0 / np.sqrt(hd))
    mixed = ops.bmm(ops.softmax(scores), v)
    mixed = ops.reshape(ops.permute(ops.reshape(mixed, (bs, heads, n, hd)), (0, 2, 1, 3)), (bs, n, width))
    out = ops.linear(mixed, out_w, out_b)
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


def baseline_transformer_block(x: Node, p: Mapping[str, Node], config: ModelConfig, mode: str = "eval",
                               rng: np.random.Generator | None = None) -> Node:
    """Pre-norm multi-head self-attention + FFN, for toy-scale comparisons."""
    _check_block_input(x, config)
    heads = config.heads or 1
    if config.d_model % heads:
        raise ShapeError(f"d_model={config.d_model} is not divisible by {heads} heads")
    xn = layer_norm(x, p["norm1/gamma"], p["norm1/beta"])
    a = multi_head_attention(xn, p["attn/qkv/weight"], p["attn/out/weight"], p["attn/out/bias"], heads)
    x = ops.add(x, stochastic_depth(a, config.survival_prob, mode, rng))
    h = layer_norm(x, p["norm2/gamma"], p["norm2/beta"])
    h = channel_proj(gelu(channel_proj(h, p["mlp/fc1/weight"], p["mlp/fc1/bias"])), p["mlp/fc2/weight"], p["mlp/fc2/bias"])
    return ops.add(x, stochastic_depth(h, config.survival_prob, mode, rng))


def block_fn(config: ModelConfig) -> Callable:
    if config.block_type == "mixer":
        return mixer_block
    if config.block_type == "transformer":
        return baseline_transformer_block
    return amlp_block if config.tiny_attn else gmlp_block


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(batch, H, W, C)`` images to ``(batch, n, patch*patch*C)`` row-major patches."""
    bs, h, w, ch = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(bs, gh, patch, gw, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(bs, gh * gw, patch * patch * ch))


def forward_hidden(config: ModelConfig, params: Mapping[str, Node], inputs: np.ndarray, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> Node:
    """Embed ``inputs`` and run every block; returns final-normalized ``(batch, n, d_model)``."""
    tape = next(iter(params.values())).tape
    if config.protocol == "mlm_token":
        tokens = np.atleast_2d(np.asarray(inputs))
        if tokens.shape[1] != config.n:
            raise ShapeError(f"expected sequences of length {config.n}, got {tokens.shape}")
        x = ops.take_rows(params["embed/table"], tokens)
    else:
        images = np.asarray(inputs)
        if images.ndim == 3:
            images = images[None]
        patches = tape.const(patchify(images, config.patch_size).astype(params["patch_embed/weight"].dtype))
        x = channel_proj(patches, params["patch_embed/weight"], params["patch_embed/bias"])
    if config.block_type == "transformer":
        pos = params["pos_embed/table"]
        x = ops.add(x, ops.take_rows(pos, np.broadcast_to(np.arange(config.n), x.shape[:2])))
    block = block_fn(config)
    for i in range(config.L):
        x = block(x, _scope(params, f"blocks/{i:03d}"), config, mode, rng)
    return layer_norm(x, params["final_norm/gamma"], params["final_norm/beta"])


def forward(config: ModelConfig, params: Mapping[str, Node], inputs: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None, positions: np.ndarray | None = None) -> Node:
    """Logits of the full model.

    MLM: logits over ``vocab_size + 1`` ids, shaped ``(batch, n, V)`` or, when
    ``positions`` (flat indices into ``batch * n``) is given, ``(len(positions), V)``.
    Vision: ``(batch, num_classes)`` from mean-pooled tokens.
    """
    h = forward_hidden(config, params, inputs, mode, rng)
    if config.protocol == "vision_patch":
        pooled = ops.mean_axis(h, 1)
        return channel_proj(pooled, params["head/weight"], params["head/bias"])
    bs, n, d = h.shape
    flat = ops.reshape(h, (bs * n, d))
    if positions is not None:
        flat = ops.take_rows(flat, np.asarray(positions))
    logits = ops.add_bias(ops.matmul(flat, ops.transpose_last2(params["embed/table"])), params["mlm_head/bias"])
    if positions is None:
        logits = ops.reshape(logits, (bs, n, logits.shape[-1]))
    return logits


@dataclass
class Model:
    """A configuration bound to its forward function; parameters live in a :class:`ParamStore`."""

    config: ModelConfig

    def __call__(self, params: Mapping[str, Node], inputs, mode="eval", rng=None, positions=None) -> Node:
        return forward(self.config, params, inputs, mode, rng, positions)

    def evaluate(self, store: ParamStore, inputs, positions=None) -> np.ndarray:
        tape = Tape(record=False)
        return self(store.bind(tape), inputs, "eval", None, positions).value


def build_model(config: ModelConfig | str, rng: np.random.Generator, dtype=np.float64) -> tuple[ParamStore, Model]:
    if isinstance(config, str):
        config = get_preset(config)
    return init_params(config, rng, dtype), Model(config)
