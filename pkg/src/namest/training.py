"""Adam with inverse-square-root warmup, token-budget batching, checkpoints.

Losses are summed per batch and divided by the token count of the whole
accumulation group, so accumulating ``n`` half batches gives the same update
as one full batch.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import normalize_features, spec_augment
from .errors import (ConfigError, DataError, DivergenceError, MissingArtifactError,
                     NonFiniteGradientError, TopologyError)
from .layers import Module, seed_dropout
from .models import LossWeights, TriangleModel, make_batch

logger = logging.getLogger(__name__)

META_KEY = "__meta__"


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 2e-3
    warmup_steps: int = 200

    def __post_init__(self):
        if self.peak_lr <= 0 or self.warmup_steps < 1:
            raise ConfigError("schedule needs peak_lr > 0 and warmup_steps >= 1")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup to the peak, then decay with the inverse square root of the step."""
    if step < 1:
        raise ConfigError("steps are 1-based")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place.

    Parameters without a gradient are treated as having a zero gradient. All
    gradients are checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


# -- data -----------------------------------------------------------------------

@dataclass
class Example:
    """One prepared training pair: normalised frames and target token ids.

    ``output`` is the decoder target of a single-task model (transcript for
    ASR, translation for ST) and the translation for the triangle;
    ``transcript`` is only used by the triangle.
    """

    id: str
    features: np.ndarray
    output: list[int]
    transcript: list[int] | None = None


def prepare_examples(utterances, tokenizer, task: str, target_lang: str = "T0") -> list[Example]:
    if task not in ("asr", "st", "triangle"):
        raise ConfigError(f"unknown task {task!r}")
    out = []
    for u in utterances:
        feats = normalize_features(u.frames)
        if task == "asr":
            out.append(Example(u.id, feats, tokenizer.encode(u.transcript)))
        else:
            if target_lang not in u.translations:
                raise DataError(f"{u.id}: no {target_lang} translation")
            transcript = tokenizer.encode(u.transcript) if task == "triangle" else None
            out.append(Example(u.id, feats, tokenizer.encode(u.translations[target_lang]), transcript))
    return out


def token_batches(examples: Sequence[Example], max_tokens: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Group example indices so each batch holds at most ``max_tokens`` target tokens.

    The order is shuffled when ``rng`` is given; a single example longer than
    the budget forms its own batch.
    """
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    batches, current, tokens = [], [], 0
    for i in order:
        n = len(examples[i].output) + 1
        if current and tokens + n > max_tokens:
            batches.append(current)
            current, tokens = [], 0
        current.append(int(i))
        tokens += n
    if current:
        batches.append(current)
    return batches


def collate(examples: Sequence[Example], dtype, augment_rng: np.random.Generator | None = None):
    feats = [e.features if augment_rng is None else spec_augment(e.features, augment_rng) for e in examples]
    transcripts = None
    if examples[0].transcript is not None:
        transcripts = [e.transcript for e in examples]
    return make_batch(feats, [e.output for e in examples], transcripts, dtype=dtype)


# -- loss -------------------------------------------------------------------------

def _task_weights(model: Module, weights: LossWeights) -> dict[str, float]:
    if isinstance(model, TriangleModel):
        return {"asr": weights.lambda_asr, "st": weights.lambda_st}
    return {"out": 1.0}


def group_loss(model: Module, batches, weights: LossWeights, epsilon: float, backward: bool):
    """Weighted per-token loss of an accumulation group.

    Each task's summed loss is divided by that task's token count over the
    whole group. With ``backward`` the gradient of every batch's share is
    accumulated into the parameters. Returns the total and per-task losses.
    """
    lam = _task_weights(model, weights)
    counts = {k: 0 for k in lam}
    for b in batches:
        if "out" in counts:
            counts["out"] += int((b.target_output != 0).sum())
        else:
            counts["asr"] += int((b.target_transcript != 0).sum())
            counts["st"] += int((b.target_output != 0).sum())
    per_task = {k: 0.0 for k in lam}
    total = 0.0
    for b in batches:
        terms = model.loss_terms(b, epsilon)
        loss = None
        for k, (value, _n) in terms.items():
            share = value * (1.0 / counts[k])
            per_task[k] += float(share.data)
            weighted = share * lam[k]
            loss = weighted if loss is None else loss + weighted
        if not np.isfinite(loss.data):
            raise DivergenceError(f"loss became non-finite ({float(loss.data)}); per-task {per_task}")
        total += float(loss.data)
        if backward and loss.requires_grad:
            loss.backward()
    return total, per_task


def evaluate_loss(model: Module, examples: Sequence[Example], weights: LossWeights, epsilon: float,
                  max_tokens: int) -> float:
    """Per-token weighted loss over a whole dataset, dropout off."""
    if not examples:
        raise DataError("cannot evaluate on an empty set")
    was_training = model.training
    model.eval()
    batches = [collate([examples[i] for i in idx], model.cfg.dtype)
               for idx in token_batches(examples, max_tokens, None)]
    with ad.no_grad():
        total, _ = group_loss(model, batches, weights, epsilon, backward=False)
    model.train(was_training)
    return total


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Deterministic ``.npz``: fixed entry timestamps, sorted keys, little-endian arrays.

    Written to a temporary file and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    entries = dict(state)
    entries[META_KEY] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            arr = np.asarray(entries[key])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "train")
    with np.load(path, allow_pickle=False) as data:
        state = {k: data[k] for k in data.files if k != META_KEY}
        meta = json.loads(bytes(data[META_KEY]).decode()) if META_KEY in data.files else {}
    return state, meta


def select_window(val_losses: Sequence[float], size: int = 5) -> list[int]:
    """Indices of the best-validation epoch and its nearest neighbours.

    The window is centred on the best epoch (earliest on ties) and shifted
    inward at either end of the series.
    """
    n = len(val_losses)
    if n == 0:
        raise DataError("no checkpoints to select from")
    size = min(size, n)
    best = int(np.argmin(val_losses))
    start = min(max(best - (size - 1) // 2, 0), n - size)
    return list(range(start, start + size))


def average_state_dicts(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean; a running mean so identical inputs come back unchanged."""
    if not states:
        raise DataError("nothing to average")
    keys = set(states[0])
    for s in states[1:]:
        if set(s) != keys:
            raise TopologyError(f"checkpoint parameter names differ: {sorted(keys ^ set(s))[:5]}")
        for k in keys:
            if s[k].shape != states[0][k].shape:
                raise TopologyError(f"shape mismatch for {k}: {s[k].shape} vs {states[0][k].shape}")
    out = {}
    for k in sorted(keys):
        acc = states[0][k].astype(np.float64)
        for i, s in enumerate(states[1:], start=2):
            acc += (s[k] - acc) / i
        out[k] = acc.astype(states[0][k].dtype)
    return out


def average_checkpoints(paths: Sequence[str | os.PathLike]) -> dict[str, np.ndarray]:
    return average_state_dicts([load_checkpoint(p)[0] for p in paths])


# -- loop -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    max_tokens: int = 512
    accumulation: int = 1
    label_smoothing: float = 0.1
    schedule: Schedule = field(default_factory=Schedule)
    average: int = 5
    specaugment: bool = True
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        if self.epochs < 1 or self.max_tokens < 1 or self.accumulation < 1 or self.average < 1:
            raise ConfigError("epochs, max_tokens, accumulation and average must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    log: list[dict]
    val_losses: list[float]
    checkpoints: list[Path]
    window: list[int]
    averaged: dict[str, np.ndarray]


def train(model: Module, train_set: Sequence[Example], dev_set: Sequence[Example] | None,
          weights: LossWeights, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place and load the averaged checkpoint into it at the end.

    One checkpoint per epoch is kept (in memory, and under ``out_dir`` when
    given) with its validation loss; the ``cfg.average`` checkpoints around
    the best one are averaged. Without a dev set the training loss of the
    epoch stands in for validation.
    """
    if not train_set:
        raise DataError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
    else:
        log_fh = None

    rng = np.random.default_rng(cfg.seed)
    seed_dropout(model, cfg.seed + 1)
    params = dict(model.named_parameters())
    opt = OptimizerState()
    log: list[dict] = []
    val_losses: list[float] = []
    states: list[dict[str, np.ndarray]] = []
    paths: list[Path] = []
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = token_batches(train_set, cfg.max_tokens, rng)
            epoch_losses = []
            for g in range(0, len(order), cfg.accumulation):
                group_idx = order[g:g + cfg.accumulation]
                aug = rng if cfg.specaugment else None
                batches = [collate([train_set[i] for i in idx], model.cfg.dtype, aug) for idx in group_idx]
                t0 = time.perf_counter()
                model.zero_grad()
                total, per_task = group_loss(model, batches, weights, cfg.label_smoothing, backward=True)
                step += 1
                lr = lr_at(cfg.schedule, step)
                adam_step(params, opt, lr)
                entry = {"step": step, "epoch": epoch, "lr": lr, "loss": total,
                         "loss_asr": per_task.get("asr"), "loss_st": per_task.get("st"),
                         "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                log.append(entry)
                epoch_losses.append(total)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                if on_step is not None:
                    on_step(entry)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            if dev_set:
                val = evaluate_loss(model, dev_set, weights, cfg.label_smoothing, cfg.max_tokens)
            else:
                val = float(np.mean(epoch_losses))
            val_losses.append(val)
            state = model.state_dict()
            states.append(state)
            logger.info("epoch %d step %d val_loss %.4f", epoch, step, val)
            if out is not None:
                path = out / "checkpoints" / f"epoch{epoch:03d}.npz"
                save_checkpoint(path, state, {"epoch": epoch, "step": step, "val_loss": val})
                paths.append(path)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    window = select_window(val_losses, cfg.average)
    averaged = average_state_dicts([states[i] for i in window])
    model.load_state_dict(averaged)
    model.eval()
    if out is not None:
        save_checkpoint(out / "checkpoint_avg.npz", averaged,
                        {"window": [i + 1 for i in window], "val_losses": val_losses})
    return TrainResult(log, val_losses, paths, window, averaged)
