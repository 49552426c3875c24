"""Three-part language-model loss, Adam with warmup/linear decay, and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import PAD, SampleArrays
from .fusion import init_fusion_params  # noqa: F401  (re-exported)
from .model import FusionTransformer, ModelConfig, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("epoch", "step", "lr", "loss_total", "loss_persona", "loss_history", "loss_pred")


class ScheduleError(ValueError):
    """Requested a learning rate past the end of the schedule."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError(f"loss weights must be nonnegative with at least one positive, got {w}")

    @classmethod
    def from_config(cls, config: ModelConfig) -> "LossWeights":
        return cls(config.alpha, config.beta, config.gamma)


def multi_source_loss(
    persona_logits: Tensor,
    history_logits: Tensor,
    decoder_logits: Tensor,
    persona_targets,
    history_targets,
    reply_targets,
    weights: LossWeights,
) -> Tuple[Tensor, Dict[str, float]]:
    """``alpha * CE_persona + beta * CE_history + gamma * CE_pred``.

    Each term is a mean over non-pad targets.  Terms with weight 0 stay out
    of the graph; their value is still reported when it is defined.
    """
    terms = (
        ("persona", persona_logits, persona_targets, weights.alpha),
        ("history", history_logits, history_targets, weights.beta),
        ("pred", decoder_logits, reply_targets, weights.gamma),
    )
    parts: Dict[str, float] = {}
    total: Optional[Tensor] = None
    for name, logits, targets, w in terms:
        if w == 0:
            with T.no_grad():
                try:
                    parts[name] = T.cross_entropy(logits, targets, ignore_index=PAD).item()
                except ValueError:
                    parts[name] = float("nan")
            continue
        ce = T.cross_entropy(logits, targets, ignore_index=PAD)
        parts[name] = ce.item()
        term = T.scale(ce, w)
        total = term if total is None else total + term
    parts["total"] = total.item()
    return total, parts


def sample_loss(model: FusionTransformer, item: SampleArrays, weights: LossWeights, rng=None):
    p_logits, h_logits, d_logits = model.forward(item, rng)
    return multi_source_loss(
        p_logits, h_logits, d_logits,
        item.persona.targets, item.history.targets, item.reply.targets, weights,
    )


# -- optimizer ------------------------------------------------------------------
@dataclass
class OptimState:
    base_lr: float = 5e-4
    warmup_proportion: float = 0.002
    total_steps: int = 1
    fusion_lr_multiplier: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_proportion * self.total_steps)))


def lr_at(step: int, state: OptimState, is_fusion_param: bool = False) -> float:
    """Linear warmup from 0 to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    total, warm = state.total_steps, state.warmup_steps
    if step < 0:
        raise ScheduleError(f"step must be >= 0, got {step}")
    if step > total:
        raise ScheduleError(f"step {step} is past the end of the schedule ({total} steps)")
    if total <= warm:
        raise ScheduleError(f"total_steps={total} leaves no decay phase after {warm} warmup steps")
    if step <= warm:
        lr = state.base_lr * (step / warm)
    else:
        lr = state.base_lr * ((total - step) / (total - warm))
    return lr * state.fusion_lr_multiplier if is_fusion_param else lr


def adam_step(params: Dict[str, Tensor], state: OptimState,
              is_fusion: Callable[[str], bool] = FusionTransformer.is_fusion_param) -> None:
    """One bias-corrected Adam update; the rate for each tensor comes from :func:`lr_at`."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    base = lr_at(t, state, False)
    fused = lr_at(t, state, True)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = fused if is_fusion(name) else base
        if lr == 0.0:
            continue
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -- training loop ---------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    seed: int = 0
    lr: float = 5e-4
    warmup_proportion: float = 0.002
    fusion_lr_multiplier: float = 5.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ValueError(f"warmup_proportion must lie in [0, 1), got {self.warmup_proportion}")
        if self.fusion_lr_multiplier < 0:
            raise ValueError(f"fusion_lr_multiplier must be >= 0, got {self.fusion_lr_multiplier}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: FusionTransformer
    log: List[dict]
    epoch_losses: List[dict]
    fusion_weights: Optional[np.ndarray]


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def train(
    items: Sequence[SampleArrays],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model: Optional[FusionTransformer] = None,
    log_path=None,
    checkpoint_path=None,
    vocab_tokens: Optional[List[str]] = None,
    checkpoint_extra: Optional[dict] = None,
    on_epoch: Optional[Callable[[int, FusionTransformer], None]] = None,
) -> TrainResult:
    """Train on pre-built samples; deterministic for a fixed ``train_config.seed``."""
    if not items:
        raise ValueError("cannot train on an empty corpus")
    tc = train_config
    if model is None:
        model = FusionTransformer(model_config, seed=tc.seed)
    weights = LossWeights.from_config(model.config)
    order_rng = np.random.default_rng([tc.seed, 1])
    drop_rng = np.random.default_rng([tc.seed, 2])

    n_batches = steps_per_epoch(len(items), tc.batch_size)
    # the schedule reaches 0 one step after the last update, so no update is wasted
    state = OptimState(
        base_lr=tc.lr,
        warmup_proportion=tc.warmup_proportion,
        total_steps=tc.epochs * n_batches + 1,
        fusion_lr_multiplier=tc.fusion_lr_multiplier,
    )
    params = model.params
    plist = list(params.values())
    log: List[dict] = []
    epoch_losses: List[dict] = []
    model.train()
    for epoch in range(1, tc.epochs + 1):
        order = order_rng.permutation(len(items))
        sums = dict.fromkeys(("total", "persona", "history", "pred"), 0.0)
        for b in range(n_batches):
            batch = [items[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]]
            model.zero_grad()
            acc = dict.fromkeys(("total", "persona", "history", "pred"), 0.0)
            for item in batch:
                loss, parts = sample_loss(model, item, weights, drop_rng)
                T.scale(loss, 1.0 / len(batch)).backward()
                for k in acc:
                    acc[k] += parts[k] / len(batch)
            clip_grad_norm(plist, tc.grad_clip)
            lr = lr_at(state.step + 1, state)
            adam_step(params, state)
            row = {"epoch": epoch, "step": state.step, "lr": lr,
                   **{f"loss_{k}": v for k, v in acc.items()}}
            log.append(row)
            for k in sums:
                sums[k] += acc[k] / n_batches
        epoch_losses.append({"epoch": epoch, **sums})
        logger.info(
            "epoch %d: total %.4f persona %.4f history %.4f pred %.4f",
            epoch, sums["total"], sums["persona"], sums["history"], sums["pred"],
        )
        if on_epoch is not None:
            on_epoch(epoch, model)
    model.eval()

    if log_path is not None:
        write_loss_log(log, log_path)
    fw = model.fusion_weights()
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model, vocab_tokens,
            extra={"train_config": tc.to_dict(),
                   "fusion_weights": None if fw is None else fw.tolist(),
                   **(checkpoint_extra or {})},
        )
    return TrainResult(model=model, log=log, epoch_losses=epoch_losses, fusion_weights=fw)


def write_loss_log(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_LOG_COLUMNS)
    for r in rows:
        writer.writerow([r["epoch"], r["step"]] + [repr(float(r[c])) for c in LOSS_LOG_COLUMNS[2:]])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)


def decoder_cross_entropy(model: FusionTransformer, items: Sequence[SampleArrays]) -> float:
    """Token-weighted mean decoder cross-entropy over every reply target (eval mode)."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with T.no_grad():
        for item in items:
            _, _, logits = model.forward(item)
            n = int((item.reply.targets != PAD).sum())
            total += T.cross_entropy(logits, item.reply.targets, ignore_index=PAD).item() * n
            count += n
    model.train(was_training)
    return total / count
