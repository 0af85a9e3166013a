"""AdamW, learning-rate schedules and the desk-scale MLM training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, ops
from .data import BERT_SPLIT, MASK_ONLY, synth_task_generate
from .metrics import toeplitzness
from .models import ModelConfig, ParamStore, build_model, forward
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "train_loss", "eval_loss", "toeplitzness_mean")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 7e-4
    warmup_steps: int = 10_000
    total_steps: int = 125_000
    decay: str = "linear"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    batch_size: int = 2048
    seed: int = 0
    mask_rate: float = 0.15
    corruption_split: tuple = BERT_SPLIT
    eval_size: int = 256
    eval_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.decay not in ("linear", "cosine"):
            raise ValueError(f"decay must be 'linear' or 'cosine', got {self.decay!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.total_steps < 1 or self.peak_lr <= 0 or self.batch_size < 1:
            raise ValueError("total_steps, peak_lr and batch_size must be positive")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("weight_decay must be >= 0 and adam_eps > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# Scaled-down schedule for the micro model on synthetic tasks.
DESK_TRAIN = TrainConfig(peak_lr=3e-3, warmup_steps=100, total_steps=2000, batch_size=32, eval_every=100)


def lr_schedule(step: int, tc: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear or cosine decay to 0."""
    if not 0 <= step <= tc.total_steps:
        raise ValueError(f"step {step} outside [0, {tc.total_steps}]")
    if step < tc.warmup_steps:
        return tc.peak_lr * step / tc.warmup_steps
    span = tc.total_steps - tc.warmup_steps
    if span == 0:
        return tc.peak_lr
    frac = (step - tc.warmup_steps) / span
    if tc.decay == "linear":
        return tc.peak_lr * (1.0 - frac)
    return tc.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    running_loss: float = float("nan")


def adamw_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: TrainState, lr_t: float,
               tc: TrainConfig, frozen: frozenset = frozenset()) -> None:
    """One in-place AdamW update with decoupled weight decay ``lr_t * wd * theta``.

    Norm gains and biases (``Param.decay`` false) are not decayed; names in
    ``frozen`` are left untouched.
    """
    missing = [k for k in params if k not in grads]
    extra = [k for k in grads if k not in params]
    if missing or extra:
        raise KeyError(f"gradient names do not match parameters; missing={missing}, unexpected={extra}")
    state.step += 1
    t = state.step
    b1, b2 = tc.adam_beta1, tc.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
        if p.decay and tc.weight_decay:
            update = update + tc.weight_decay * p.value
        p.value = (p.value - lr_t * update).astype(p.value.dtype)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, records: list):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.records = records


def _params_finite(store: ParamStore) -> bool:
    return all(np.all(np.isfinite(v)) for _, v in store.items())


def spatial_weight_names(store: ParamStore) -> list[str]:
    return [k for k in store if k.endswith("sgu/spatial/weight")]


def mean_toeplitzness(store: ParamStore) -> float:
    """Mean Toeplitz score over dense spatial weights (Toeplitz-mode weights score 1)."""
    scores = [toeplitzness(store[k]) if store[k].ndim == 2 else 1.0 for k in spatial_weight_names(store)]
    return float(np.mean(scores)) if scores else float("nan")


def masked_loss(config: ModelConfig, nodes, batch, mode="eval", rng=None):
    logits = forward(config, nodes, batch.inputs, mode, rng, positions=batch.positions)
    return ops.cross_entropy(logits, batch.targets)


def eval_loss(config: ModelConfig, store: ParamStore, batch) -> float:
    tape = Tape(record=False)
    return float(masked_loss(config, store.bind(tape), batch).value)


@dataclass
class TrainResult:
    records: list[dict]
    final_eval_loss: float
    wall_time: float
    params: ParamStore
    eval_batch: object
    initial_toeplitzness: float


def make_streams(seed: int):
    """Independent generators for init, training data, eval data and stochastic depth."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def train(config: ModelConfig, task: str, tc: TrainConfig, *, freeze_spatial: bool = False,
          store: ParamStore | None = None, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Train an MLM model on a synthetic task.

    Cross entropy is taken at the selected positions only. The fixed eval batch
    uses mask-token-only corruption, so a model that cannot see other tokens
    cannot beat ``log(vocab)`` on it. With ``freeze_spatial`` every spatial
    weight is zeroed and excluded from updates.
    """
    if config.protocol != "mlm_token":
        raise ValueError("train() needs an mlm_token config")
    init_rng, data_rng, eval_rng, drop_rng = make_streams(tc.seed)
    dtype = np.dtype(tc.dtype)
    if store is None:
        store, _ = build_model(config, init_rng, dtype)
    frozen = frozenset()
    if freeze_spatial:
        frozen = frozenset(spatial_weight_names(store))
        for k in frozen:
            store[k] = np.zeros_like(store[k])
    eval_batch = synth_task_generate(task, config.n, config.vocab_size, eval_rng, tc.eval_size, tc.mask_rate, MASK_ONLY)
    state = TrainState(rng=drop_rng)
    init_tz = mean_toeplitzness(store)
    records: list[dict] = []
    start = time.perf_counter()
    ev = float("nan")
    for step in range(1, tc.total_steps + 1):
        batch = synth_task_generate(task, config.n, config.vocab_size, data_rng, tc.batch_size, tc.mask_rate,
                                    tuple(tc.corruption_split))
        tape = Tape()
        try:
            loss = masked_loss(config, store.bind(tape), batch, "train", drop_rng)
        except NonFiniteError:
            raise TrainingDiverged(step, records) from None
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, records)
        grads = tape.backward(loss)
        lr_t = lr_schedule(step, tc)
        adamw_step(store, grads, state, lr_t, tc, frozen)
        if not _params_finite(store):
            raise TrainingDiverged(step, records)
        state.running_loss = loss_value
        if step % tc.eval_every == 0 or step == tc.total_steps:
            try:
                ev = eval_loss(config, store, eval_batch)
            except NonFiniteError:
                raise TrainingDiverged(step, records) from None
            if not math.isfinite(ev):
                raise TrainingDiverged(step, records)
            rec = {"step": step, "lr": lr_t, "train_loss": loss_value, "eval_loss": ev,
                   "toeplitzness_mean": mean_toeplitzness(store)}
            records.append(rec)
            log.info("step %d lr %.3g train %.4f eval %.4f", step, lr_t, loss_value, ev)
            if on_record is not None:
                on_record(rec)
    return TrainResult(records, ev, time.perf_counter() - start, store, eval_batch, init_tz)

