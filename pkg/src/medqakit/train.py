"""Optimization loop: LR schedules, global-norm clipping, plain SGD.

The loop is single-threaded and fully seeded; identical (params, config,
data, seed) reproduce bit-identical parameters and checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tokenizer as tok
from .errors import NonFiniteGradient, ShapeMismatch, StepOutOfRange
from .model import (
    Batch,
    DropoutConfig,
    Gradients,
    ModelParams,
    backward,
    forward,
    masked_lm_loss,
    next_token_loss,
    perplexity,
    save_checkpoint,
)

SCHEDULES = ("linear", "cosine")
OBJECTIVES = ("mlm", "causal")

# Masking recipe for the masked-token objective: a position is selected
# with probability MLM_SELECT; selected positions become MASK / a random
# token / stay unchanged with the fractions below.
MLM_SELECT = 0.15
MLM_TO_MASK = 0.8
MLM_TO_RANDOM = 0.1


@dataclass
class TrainConfig:
    init_lr: float = 0.1
    total_steps: int = 100
    warmup_steps: int = 0
    schedule: str = "linear"
    clip_c: float = 1.0
    batch_size: int = 8
    keep_prob: float = 1.0
    seed: int = 0
    weight_decay: float = 0.0
    checkpoint_interval: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.init_lr <= 0:
            raise ValueError("init_lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.total_steps == 0 and self.warmup_steps != 0:
            raise ValueError("warmup_steps must be 0 when total_steps is 0")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm: float
    clipped: bool


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    heldout: list[dict] = field(default_factory=list)  # {"epoch", "perplexity"}

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "step": r.step,
                    "lr": r.lr,
                    "loss": r.loss,
                    "grad_norm": r.grad_norm,
                    "clipped": r.clipped,
                }
            )
            for r in self.steps
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> dict:
        return {
            "steps": len(self.steps),
            "first_loss": self.steps[0].loss if self.steps else None,
            "final_loss": self.steps[-1].loss if self.steps else None,
            "heldout": self.heldout,
        }


def lr_at(cfg: TrainConfig, t: int) -> float:
    """Learning rate at step t: linear ramp over the warm-up steps, then
    linear decay to zero or half-cosine decay over the remaining span.
    With warmup_steps == 0 the linear branch is exactly
    ``init_lr * (1 - t / total_steps)``."""
    if t < 0 or t > cfg.total_steps:
        raise StepOutOfRange(f"step {t} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return cfg.init_lr
    if t < cfg.warmup_steps:
        return cfg.init_lr * t / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (t - cfg.warmup_steps) / span
    if cfg.schedule == "linear":
        return cfg.init_lr * (1.0 - progress)
    return cfg.init_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Gradients) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: Gradients, c: float) -> Gradients:
    """Scale all arrays jointly by 1/max(1, ||g||/c).

    Returns the input unchanged (same object, bit-for-bit) when the
    global norm is already within the threshold; idempotent either way.
    """
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient {name!r} contains NaN or Inf")
    norm = global_norm(grads)
    if norm <= c:
        return grads
    scale = c / norm
    out = {name: g * scale for name, g in grads.items()}
    # Rounding can leave the rescaled norm a few ulp above c; shave the
    # scale until the postcondition ||g'|| <= c holds exactly.
    while global_norm(out) > c:
        scale = np.nextafter(scale, 0.0)
        out = {name: g * scale for name, g in grads.items()}
    return out


def sgd_step(
    params: ModelParams, grads: Gradients, lr: float, weight_decay: float = 0.0
) -> ModelParams:
    """params - lr * grads, with optional decoupled weight decay."""
    arrays: dict[str, np.ndarray] = {}
    if set(grads) != set(params.arrays):
        raise ShapeMismatch("gradient keys do not match parameter arrays")
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        new = p - lr * g
        if weight_decay:
            new = new - lr * weight_decay * p
        arrays[name] = new
    return ModelParams(config=params.config, arrays=arrays)


# -- batch assembly ----------------------------------------------------------


def pad_sequences(sequences: Sequence[Sequence[int]], pad_id: int = tok.PAD_ID) -> Batch:
    """Right-pad to the longest sequence in the group."""
    max_len = max(len(s) for s in sequences)
    b = len(sequences)
    ids = np.full((b, max_len), pad_id, dtype=np.int64)
    valid = np.zeros((b, max_len), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
        valid[i, : len(seq)] = True
    return Batch(token_ids=ids, valid=valid)


def make_mlm_batch(
    sequences: Sequence[Sequence[int]], vocab_size: int, rng: np.random.Generator
) -> Batch:
    """Apply the 15% / 80-10-10 masking recipe to non-special positions."""
    base = pad_sequences(sequences)
    ids = base.token_ids.copy()
    originals = base.token_ids.copy()
    candidates = base.valid & (originals >= tok.N_SPECIALS)
    selected = candidates & (rng.random(ids.shape) < MLM_SELECT)
    if not selected.any():
        rows = np.argwhere(candidates)
        if len(rows) == 0:
            raise ValueError("batch has no maskable positions")
        b, t = rows[int(rng.integers(len(rows)))]
        selected[b, t] = True
    action = rng.random(ids.shape)
    to_mask = selected & (action < MLM_TO_MASK)
    to_random = selected & (action >= MLM_TO_MASK) & (action < MLM_TO_MASK + MLM_TO_RANDOM)
    ids[to_mask] = tok.MASK_ID
    n_random = int(to_random.sum())
    if n_random:
        ids[to_random] = rng.integers(tok.N_SPECIALS, vocab_size, size=n_random)
    return Batch(
        token_ids=ids,
        valid=base.valid,
        mlm_mask=selected,
        mlm_targets=originals,
    )


def make_causal_batch(
    sequences: Sequence[Sequence[int]], loss_starts: Sequence[int] | None = None
) -> Batch:
    """Next-token batch; ``loss_starts[i]`` restricts the loss of sequence
    i to target positions >= that index (prompt tokens contribute no loss)."""
    base = pad_sequences(sequences)
    if loss_starts is None:
        return base
    target = base.valid.copy()
    target[:, 0] = False
    for i, start in enumerate(loss_starts):
        target[i, : max(int(start), 1)] = False
    return Batch(token_ids=base.token_ids, valid=base.valid, target_mask=target)


# -- training loop -------------------------------------------------------------


def heldout_mean_nll(
    params: ModelParams,
    objective: str,
    sequences: Sequence[Sequence[int]],
    mask_seed: int = 0,
) -> float:
    """Mean per-position NLL on a held-out split, dropout off.

    The causal objective scores every next-token position; the mlm
    objective applies a fixed-seed masking pass so the number is stable
    across calls.
    """
    total, count = 0.0, 0
    rng = np.random.default_rng(mask_seed)
    for seq in sequences:
        if len(seq) < 2:
            continue
        if objective == "causal":
            batch = make_causal_batch([seq])
            n = len(seq) - 1
        else:
            batch = make_mlm_batch([seq], params.config.vocab_size, rng)
            n = int(batch.mlm_mask.sum())
        logits, _ = forward(params, batch)
        loss_fn = next_token_loss if objective == "causal" else masked_lm_loss
        loss, _ = loss_fn(logits, batch)
        total += loss * n
        count += n
    if count == 0:
        raise ValueError("held-out split has no scorable positions")
    return total / count


def fit(
    params: ModelParams,
    cfg: TrainConfig,
    objective: str,
    sequences: Sequence[Sequence[int]],
    loss_starts: Sequence[int] | None = None,
    heldout: Sequence[Sequence[int]] | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Run cfg.total_steps of forward / loss / backward / clip / SGD over
    seeded-shuffled minibatches. Checkpoints are written at the configured
    interval and at completion when ``checkpoint_dir`` is given."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if not sequences:
        raise ValueError("training data must be nonempty")
    too_long = max(len(s) for s in sequences)
    if too_long > params.config.max_seq_len:
        raise ShapeMismatch(
            f"sequence of length {too_long} exceeds max_seq_len {params.config.max_seq_len}"
        )
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    epoch = 0

    def log_heldout():
        if heldout:
            nll = heldout_mean_nll(params, objective, heldout, mask_seed=cfg.seed)
            log.heldout.append({"epoch": epoch, "perplexity": perplexity(nll)})

    for step in range(cfg.total_steps):
        if not order:
            if epoch > 0:
                log_heldout()
            order = list(rng.permutation(len(sequences)))
            epoch += 1
        take = order[: cfg.batch_size]
        order = order[cfg.batch_size :]
        batch_seqs = [sequences[i] for i in take]

        if objective == "mlm":
            batch = make_mlm_batch(batch_seqs, params.config.vocab_size, rng)
        else:
            starts = [loss_starts[i] for i in take] if loss_starts is not None else None
            batch = make_causal_batch(batch_seqs, starts)

        dropout = DropoutConfig(
            keep_prob=cfg.keep_prob,
            seed=int(rng.integers(np.iinfo(np.int64).max)),
            train=True,
        )
        logits, cache = forward(params, batch, dropout)
        loss_fn = masked_lm_loss if objective == "mlm" else next_token_loss
        loss, dlogits = loss_fn(logits, batch)
        grads = backward(params, cache, dlogits)
        norm = global_norm(grads)
        grads = clip_gradients(grads, cfg.clip_c)
        lr = lr_at(cfg, step)
        params = sgd_step(params, grads, lr, cfg.weight_decay)
        log.steps.append(
            StepRecord(step=step, lr=lr, loss=loss, grad_norm=norm, clipped=norm > cfg.clip_c)
        )
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_interval
            and (step + 1) % cfg.checkpoint_interval == 0
        ):
            save_checkpoint(checkpoint_dir / f"step_{step + 1:06d}.ckpt", params, checkpoint_meta)

    if cfg.total_steps > 0:
        log_heldout()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / "final.ckpt", params, checkpoint_meta)
    return params, log
