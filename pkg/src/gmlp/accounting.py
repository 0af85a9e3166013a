"""Closed-form parameter and multiply-add counts.

Nothing here instantiates a model. Conventions: every parameter tensor is
counted (norm affines, all biases, the MLM output bias, the mask-token
embedding row); the MLM output projection is tied to the embedding and adds no
parameters. One multiply-add (MAC) is two FLOPs. Elementwise work (norms,
activations, gating products, softmax) is not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .models import ConfigError, ModelConfig


@dataclass
class CostReport:
    title: str
    items: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.items.values())

    def add(self, name: str, value: int) -> None:
        self.items[name] = self.items.get(name, 0) + int(value)


def _linear(a: int, b: int, bias: bool = True) -> int:
    return a * b + (b if bias else 0)


def block_param_count(config: ModelConfig) -> dict[str, int]:
    """Parameters of one block, itemized."""
    c = config
    d, e, n = c.d_model, c.d_ffn, c.n
    if c.block_type == "mixer":
        return {
            "norms": 4 * d,
            "token_mlp": n * c.d_spatial + c.d_spatial + c.d_spatial * n + n,
            "channel_mlp": _linear(d, e) + _linear(e, d),
        }
    if c.block_type == "transformer":
        return {
            "norms": 4 * d,
            "attention": _linear(d, 3 * d, bias=False) + _linear(d, d),
            "channel_mlp": _linear(d, e) + _linear(e, d),
        }
    gate = c.variant.out_channels(e)
    spatial = n * n if c.spatial_mode == "dense" else 2 * n - 1
    items = {
        "norm": 2 * d,
        "proj_in": _linear(d, e),
        "sgu_norm": 2 * gate,
        "spatial_weight": spatial,
        "spatial_bias": n,
        "proj_out": _linear(gate, d),
    }
    if c.tiny_attn:
        items["tiny_attn"] = _linear(d, 3 * c.tiny_attn, bias=False) + _linear(c.tiny_attn, gate)
    return items


def count_params(config: ModelConfig) -> CostReport:
    c = config
    report = CostReport("params")
    if c.protocol == "mlm_token":
        report.add("embedding", (c.vocab_size + 1) * c.d_model)
    else:
        report.add("patch_embed", _linear(c.patch_size * c.patch_size * c.channels, c.d_model))
    if c.block_type == "transformer":
        report.add("pos_embed", c.n * c.d_model)
    for name, value in block_param_count(c).items():
        report.add(f"blocks.{name}", c.L * value)
    report.add("final_norm", 2 * c.d_model)
    if c.protocol == "mlm_token":
        report.add("mlm_head_bias", c.vocab_size + 1)
    else:
        report.add("head", _linear(c.d_model, c.num_classes))
    return report


def sgu_macs(n: int, e: int) -> int:
    """Spatial projection cost of the split SGU on ``e`` input channels."""
    return n * n * e // 2


def attention_macs(n: int, d: int) -> int:
    """Score and mixing products of single-head attention of width ``d``."""
    return 2 * n * n * d


def block_macs(config: ModelConfig, n: int) -> dict[str, int]:
    c = config
    d, e = c.d_model, c.d_ffn
    if c.block_type == "mixer":
        return {"token_mlp": 2 * n * c.d_spatial * d, "channel_mlp": 2 * n * d * e}
    if c.block_type == "transformer":
        return {
            "attention_proj": n * d * 3 * d + n * d * d,
            "attention": attention_macs(n, d),
            "channel_mlp": 2 * n * d * e,
        }
    gate = c.variant.out_channels(e)
    items = {
        "proj_in": n * d * e,
        "sgu_spatial": sgu_macs(n, e) if c.variant.value == "multiplicative_split" else n * n * e,
        "proj_out": n * gate * d,
    }
    if c.tiny_attn:
        a = c.tiny_attn
        items["tiny_attn_proj"] = n * d * 3 * a + n * a * gate
        items["tiny_attn"] = attention_macs(n, a)
    return items


def count_macs(config: ModelConfig, n: int | None = None) -> CostReport:
    """Multiply-adds of one forward pass over a sequence of ``n`` tokens."""
    c = config
    n = c.n if n is None else n
    if n < 1:
        raise ValueError("sequence length must be positive")
    report = CostReport("macs")
    if c.protocol == "vision_patch":
        report.add("patch_embed", n * c.patch_size * c.patch_size * c.channels * c.d_model)
    for name, value in block_macs(c, n).items():
        report.add(f"blocks.{name}", c.L * value)
    if c.protocol == "mlm_token":
        report.add("mlm_head", n * c.d_model * (c.vocab_size + 1))
    else:
        report.add("head", c.d_model * c.num_classes)
    return report


def analyze(config: ModelConfig, n: int | None = None) -> list[dict]:
    """Rows of component, params, MACs and FLOPs, plus a total row."""
    n = config.n if n is None else n
    if n != config.n:
        if config.protocol == "vision_patch":
            raise ConfigError(f"vision config has a fixed patch count n={config.n}; got seq-len {n}")
        config = config.replace(n=n)
    params = count_params(config)
    macs = count_macs(config, n)
    names = list(dict.fromkeys(list(params.items) + list(macs.items)))
    rows = [
        {"component": k, "params": params.items.get(k, 0), "macs": macs.items.get(k, 0),
         "flops": 2 * macs.items.get(k, 0)}
        for k in names
    ]
    rows.append({"component": "total", "params": params.total, "macs": macs.total, "flops": 2 * macs.total})
    return rows
