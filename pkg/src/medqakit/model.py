"""Minimal transformer with exact analytic gradients.

Dense float64 numpy arrays only: token + learned positional embeddings,
pre-norm blocks (multi-head attention, GELU feed-forward), a final layer
norm, and an output projection tied to the token embeddings. Three head
modes share one parameter layout:

* ``mlm``       bidirectional attention, logits over the vocabulary
* ``causal``    lower-triangular attention, logits over the vocabulary
* ``embedding`` bidirectional attention, mean-pooled final states

``forward`` returns a cache that ``backward`` consumes to produce exact
gradients for every parameter array; correctness is pinned to central
finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CacheMismatch,
    NoMaskedPositions,
    SequenceTooShort,
    ShapeMismatch,
    WrongHead,
)

HEADS = ("mlm", "causal", "embedding")

_LN_EPS = 1e-5
_GELU_A = 0.044715
_GELU_C = float(np.sqrt(2.0 / np.pi))

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 128
    head: str = "causal"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass
class DropoutConfig:
    keep_prob: float = 1.0
    seed: int = 0
    train: bool = False

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def active(self) -> bool:
        return self.train and self.keep_prob < 1.0


@dataclass
class Batch:
    """Token ids (B, T) with a right-padded validity mask.

    ``mlm_mask``/``mlm_targets`` mark masked-token targets; ``target_mask``
    marks next-token loss positions (the token at t is predicted from the
    logits at t-1). Unset masks default at loss time.
    """

    token_ids: np.ndarray
    valid: np.ndarray
    mlm_mask: np.ndarray | None = None
    mlm_targets: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.token_ids.ndim != 2 or self.valid.shape != self.token_ids.shape:
            raise ShapeMismatch(
                f"token_ids {self.token_ids.shape} and valid {self.valid.shape} must be equal 2d shapes"
            )
        if not self.valid.any(axis=1).all():
            raise ShapeMismatch("every sequence needs at least one valid token")
        # Right padding only: validity must be a prefix of each row.
        if (np.diff(self.valid.astype(np.int8), axis=1) > 0).any():
            raise ShapeMismatch("valid mask must be contiguous from position 0 (right padding)")
        if self.mlm_mask is not None:
            self.mlm_mask = np.asarray(self.mlm_mask, dtype=bool)
            if self.mlm_mask.shape != self.token_ids.shape:
                raise ShapeMismatch("mlm_mask shape mismatch")
            if (self.mlm_mask & ~self.valid).any():
                raise ShapeMismatch("mlm_mask selects padding positions")
        if self.mlm_targets is not None:
            self.mlm_targets = np.asarray(self.mlm_targets, dtype=np.int64)
            if self.mlm_targets.shape != self.token_ids.shape:
                raise ShapeMismatch("mlm_targets shape mismatch")
        if self.target_mask is not None:
            self.target_mask = np.asarray(self.target_mask, dtype=bool)
            if self.target_mask.shape != self.token_ids.shape:
                raise ShapeMismatch("target_mask shape mismatch")
            if (self.target_mask & ~self.valid).any():
                raise ShapeMismatch("target_mask selects padding positions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


@dataclass
class ModelParams:
    """Named parameter arrays plus the architecture they instantiate."""

    config: ArchConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_parameters(self) -> int:
        return sum(int(v.size) for v in self.arrays.values())


Gradients = dict


def _array_layout(config: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.vocab_size, d)),
        ("pos_emb", (config.max_seq_len, d)),
    ]
    for i in range(config.n_layers):
        layout += [
            (f"layer{i}.ln1.gain", (d,)),
            (f"layer{i}.ln1.bias", (d,)),
            (f"layer{i}.attn.wq", (d, d)),
            (f"layer{i}.attn.wk", (d, d)),
            (f"layer{i}.attn.wv", (d, d)),
            (f"layer{i}.attn.wo", (d, d)),
            (f"layer{i}.ln2.gain", (d,)),
            (f"layer{i}.ln2.bias", (d,)),
            (f"layer{i}.ff.w1", (d, f)),
            (f"layer{i}.ff.b1", (f,)),
            (f"layer{i}.ff.w2", (f, d)),
            (f"layer{i}.ff.b2", (d,)),
        ]
    layout += [("final_ln.gain", (d,)), ("final_ln.bias", (d,))]
    return layout


def init_params(config: ArchConfig, seed: int, scale: float = 0.02) -> ModelParams:
    """Gaussian(0, scale) weights; layer-norm gains one, biases zero."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _array_layout(config):
        if name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, scale, size=shape)
    return ModelParams(config=config, arrays=arrays)


def zero_params(config: ArchConfig) -> ModelParams:
    """All-zero weights (layer-norm gains stay one so the net is well-posed)."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _array_layout(config):
        arrays[name] = np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
    return ModelParams(config=config, arrays=arrays)


def zeros_like_grads(params: ModelParams) -> Gradients:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


# -- primitive forward/backward pieces -------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _layernorm_fwd(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    x_hat = centered * inv_std
    return gain * x_hat + bias, (x_hat, inv_std, gain)


def _layernorm_bwd(dy, cache):
    x_hat, inv_std, gain = cache
    dgain = np.sum(dy * x_hat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dx_hat = dy * gain
    dx = inv_std * (
        dx_hat
        - dx_hat.mean(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    sech2 = 1.0 - t**2
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)


def _draw_dropout_mask(shape, keep_prob, rng):
    return (rng.random(shape) < keep_prob).astype(np.float64) / keep_prob


def dropout_apply(activations: np.ndarray, cfg: DropoutConfig) -> np.ndarray:
    """Inverted dropout: zero entries with probability 1 - keep_prob and
    divide survivors by keep_prob; identity outside train mode."""
    if not cfg.active:
        return activations
    rng = np.random.default_rng(cfg.seed)
    return activations * _draw_dropout_mask(activations.shape, cfg.keep_prob, rng)


# -- full model ------------------------------------------------------------


def _attention_bias(batch: Batch, causal: bool) -> np.ndarray:
    b, t = batch.shape
    bias = np.where(batch.valid[:, None, None, :], 0.0, -np.inf)  # keys at pads
    if causal:
        rows = np.arange(t)
        bias = bias + np.where(rows[None, :] <= rows[:, None], 0.0, -np.inf)[None, None, :, :]
    return bias


def forward(
    params: ModelParams,
    batch: Batch,
    dropout: DropoutConfig | None = None,
) -> tuple[np.ndarray, dict]:
    """Run the network; returns (logits or pooled states, cache).

    Deterministic given (params, batch, dropout.seed). The causal head
    guarantees logits at position t depend only on tokens at positions
    <= t; the embedding head returns mean-pooled final states over valid
    positions, shape (B, d_model).
    """
    config = params.config
    dropout = dropout or DropoutConfig()
    b, t = batch.shape
    if t > config.max_seq_len:
        raise ShapeMismatch(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if batch.token_ids.max() >= config.vocab_size or batch.token_ids.min() < 0:
        raise ShapeMismatch("token id outside vocabulary")

    p = params.arrays
    h_heads, d_k = config.n_heads, config.d_model // config.n_heads
    rng = np.random.default_rng(dropout.seed) if dropout.active else None

    def drop(x):
        if rng is None:
            return x, None
        mask = _draw_dropout_mask(x.shape, dropout.keep_prob, rng)
        return x * mask, mask

    x = p["tok_emb"][batch.token_ids] + p["pos_emb"][:t][None, :, :]
    x, emb_mask = drop(x)

    bias = _attention_bias(batch, causal=config.head == "causal")
    layers = []
    for i in range(config.n_layers):
        pre = f"layer{i}"
        ln1_out, ln1_cache = _layernorm_fwd(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
        q = (ln1_out @ p[f"{pre}.attn.wq"]).reshape(b, t, h_heads, d_k).transpose(0, 2, 1, 3)
        k = (ln1_out @ p[f"{pre}.attn.wk"]).reshape(b, t, h_heads, d_k).transpose(0, 2, 1, 3)
        v = (ln1_out @ p[f"{pre}.attn.wv"]).reshape(b, t, h_heads, d_k).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d_k) + bias
        attn = softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, config.d_model)
        attn_out = ctx @ p[f"{pre}.attn.wo"]
        attn_out, attn_mask = drop(attn_out)
        x_mid = x + attn_out

        ln2_out, ln2_cache = _layernorm_fwd(x_mid, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        h1 = ln2_out @ p[f"{pre}.ff.w1"] + p[f"{pre}.ff.b1"]
        g, gelu_cache = _gelu_fwd(h1)
        ff_out = g @ p[f"{pre}.ff.w2"] + p[f"{pre}.ff.b2"]
        ff_out, ff_mask = drop(ff_out)
        x_next = x_mid + ff_out

        layers.append(
            {
                "ln1_out": ln1_out, "ln1_cache": ln1_cache,
                "q": q, "k": k, "v": v, "attn": attn, "ctx": ctx,
                "attn_mask": attn_mask,
                "x_mid": x_mid, "ln2_out": ln2_out, "ln2_cache": ln2_cache,
                "gelu_cache": gelu_cache, "g": g, "ff_mask": ff_mask,
            }
        )
        x = x_next

    h_final, final_ln_cache = _layernorm_fwd(x, p["final_ln.gain"], p["final_ln.bias"])

    cache = {
        "params": params,
        "batch": batch,
        "emb_mask": emb_mask,
        "layers": layers,
        "final_ln_cache": final_ln_cache,
        "h_final": h_final,
        "d_k": d_k,
    }

    if config.head == "embedding":
        weights = batch.valid.astype(np.float64)
        pooled = (h_final * weights[:, :, None]).sum(axis=1) / weights.sum(axis=1)[:, None]
        return pooled, cache

    logits = h_final @ p["tok_emb"].T
    return logits, cache


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> Gradients:
    """Exact gradients of a scalar loss given its logit gradients."""
    if cache.get("params") is not params:
        raise CacheMismatch("cache was not produced by a forward call on these params")
    config = params.config
    if config.head == "embedding":
        raise WrongHead("embedding head produces no logits to differentiate")
    batch: Batch = cache["batch"]
    b, t = batch.shape
    if dlogits.shape != (b, t, config.vocab_size):
        raise CacheMismatch(
            f"dlogits shape {dlogits.shape} does not match ({b}, {t}, {config.vocab_size})"
        )

    p = params.arrays
    grads = zeros_like_grads(params)
    h_heads, d_k = config.n_heads, cache["d_k"]

    h_final = cache["h_final"]
    # logits = h_final @ tok_emb.T (tied projection)
    grads["tok_emb"] += dlogits.reshape(-1, config.vocab_size).T @ h_final.reshape(-1, config.d_model)
    dh = dlogits @ p["tok_emb"]

    dx, dgain, dbias = _layernorm_bwd(dh, cache["final_ln_cache"])
    grads["final_ln.gain"] += dgain
    grads["final_ln.bias"] += dbias

    for i in reversed(range(config.n_layers)):
        pre = f"layer{i}"
        lc = cache["layers"][i]

        # feed-forward branch
        dff_out = dx if lc["ff_mask"] is None else dx * lc["ff_mask"]
        grads[f"{pre}.ff.w2"] += lc["g"].reshape(-1, config.d_ff).T @ dff_out.reshape(-1, config.d_model)
        grads[f"{pre}.ff.b2"] += dff_out.sum(axis=(0, 1))
        dg = dff_out @ p[f"{pre}.ff.w2"].T
        dh1 = _gelu_bwd(dg, lc["gelu_cache"])
        grads[f"{pre}.ff.w1"] += lc["ln2_out"].reshape(-1, config.d_model).T @ dh1.reshape(-1, config.d_ff)
        grads[f"{pre}.ff.b1"] += dh1.sum(axis=(0, 1))
        dln2_out = dh1 @ p[f"{pre}.ff.w1"].T
        dx_mid, dgain2, dbias2 = _layernorm_bwd(dln2_out, lc["ln2_cache"])
        grads[f"{pre}.ln2.gain"] += dgain2
        grads[f"{pre}.ln2.bias"] += dbias2
        dx_mid = dx_mid + dx  # residual

        # attention branch
        dattn_out = dx_mid if lc["attn_mask"] is None else dx_mid * lc["attn_mask"]
        grads[f"{pre}.attn.wo"] += lc["ctx"].reshape(-1, config.d_model).T @ dattn_out.reshape(-1, config.d_model)
        dctx = (dattn_out @ p[f"{pre}.attn.wo"].T).reshape(b, t, h_heads, d_k).transpose(0, 2, 1, 3)
        attn, q, k, v = lc["attn"], lc["q"], lc["k"], lc["v"]
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dscores = dscores / np.sqrt(d_k)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dln1_from_q = dq.transpose(0, 2, 1, 3).reshape(b, t, config.d_model)
        dln1_from_k = dk.transpose(0, 2, 1, 3).reshape(b, t, config.d_model)
        dln1_from_v = dv.transpose(0, 2, 1, 3).reshape(b, t, config.d_model)
        ln1_flat = lc["ln1_out"].reshape(-1, config.d_model)
        grads[f"{pre}.attn.wq"] += ln1_flat.T @ dln1_from_q.reshape(-1, config.d_model)
        grads[f"{pre}.attn.wk"] += ln1_flat.T @ dln1_from_k.reshape(-1, config.d_model)
        grads[f"{pre}.attn.wv"] += ln1_flat.T @ dln1_from_v.reshape(-1, config.d_model)
        dln1_out = (
            dln1_from_q @ p[f"{pre}.attn.wq"].T
            + dln1_from_k @ p[f"{pre}.attn.wk"].T
            + dln1_from_v @ p[f"{pre}.attn.wv"].T
        )
        dx_in, dgain1, dbias1 = _layernorm_bwd(dln1_out, lc["ln1_cache"])
        grads[f"{pre}.ln1.gain"] += dgain1
        grads[f"{pre}.ln1.bias"] += dbias1
        dx = dx_in + dx_mid  # residual

    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    np.add.at(grads["tok_emb"], batch.token_ids, dx)
    grads["pos_emb"][:t] += dx.sum(axis=0)
    return grads


# -- losses ------------------------------------------------------------------


def masked_lm_loss(logits: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean NLL of the original token at each masked position.

    Returns (loss, dloss/dlogits); the gradient is (softmax - onehot)/N
    at masked positions and zero elsewhere.
    """
    if batch.mlm_mask is None or batch.mlm_targets is None or not batch.mlm_mask.any():
        raise NoMaskedPositions("batch carries no masked positions")
    rows = np.nonzero(batch.mlm_mask)
    targets = batch.mlm_targets[rows]
    n = len(targets)
    log_probs = log_softmax(logits[rows])
    loss = -log_probs[np.arange(n), targets].mean()
    dlogits = np.zeros_like(logits)
    grad_rows = np.exp(log_probs)
    grad_rows[np.arange(n), targets] -= 1.0
    dlogits[rows] = grad_rows / n
    return float(loss), dlogits


def next_token_loss(logits: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean NLL of token t under the logits at position t-1.

    Positions counted are ``batch.target_mask`` when set, else every
    valid position from 1 on. Gradient mirrors masked_lm_loss.
    """
    b, t = batch.shape
    if t < 2:
        raise SequenceTooShort(f"need at least 2 positions, got {t}")
    target_mask = batch.target_mask
    if target_mask is None:
        target_mask = batch.valid.copy()
        target_mask[:, 0] = False
    else:
        target_mask = target_mask.copy()
        target_mask[:, 0] = False
    if not target_mask.any():
        raise SequenceTooShort("no next-token positions to score")
    rows_b, rows_t = np.nonzero(target_mask)
    targets = batch.token_ids[rows_b, rows_t]
    n = len(targets)
    pred_logits = logits[rows_b, rows_t - 1]
    log_probs = log_softmax(pred_logits)
    loss = -log_probs[np.arange(n), targets].mean()
    dlogits = np.zeros_like(logits)
    grad_rows = np.exp(log_probs)
    grad_rows[np.arange(n), targets] -= 1.0
    # Multiple (b, t) pairs never collide on (b, t-1) because target
    # positions are distinct, so plain assignment is safe.
    dlogits[rows_b, rows_t - 1] = grad_rows / n
    return float(loss), dlogits


def perplexity(mean_nll: float) -> float:
    """exp of the mean per-token negative log-likelihood."""
    if not np.isfinite(mean_nll) or mean_nll < 0:
        raise ValueError(f"mean_nll must be finite and >= 0, got {mean_nll}")
    return float(np.exp(mean_nll))


# -- generation ----------------------------------------------------------------


def greedy_generate(
    params: ModelParams,
    prompt_ids: Sequence[int],
    max_length: int = 100,
    eos_id: int | None = None,
) -> list[int]:
    """Append argmax tokens (ties resolve to the smallest id) until
    ``eos_id`` is emitted or the sequence reaches ``max_length`` tokens."""
    config = params.config
    if config.head != "causal":
        raise WrongHead(f"generation needs a causal head, got {config.head!r}")
    if max_length > config.max_seq_len:
        raise ValueError(f"max_length {max_length} exceeds max_seq_len {config.max_seq_len}")
    ids = [int(i) for i in prompt_ids]
    if len(ids) >= max_length:
        raise ValueError(f"prompt length {len(ids)} must be < max_length {max_length}")
    while len(ids) < max_length:
        arr = np.array([ids], dtype=np.int64)
        batch = Batch(token_ids=arr, valid=np.ones_like(arr, dtype=bool))
        logits, _ = forward(params, batch)
        next_id = int(np.argmax(logits[0, -1]))
        ids.append(next_id)
        if eos_id is not None and next_id == eos_id:
            break
    return ids


# -- versioned binary tensor container ----------------------------------------

_HEADER_LEN_FMT = "<Q"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], header_extra: dict) -> None:
    """Write a versioned container: length-prefixed JSON header followed by
    raw little-endian float64 data. Save/load round-trips bit-exactly."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = dict(header_extra)
    header["version"] = CHECKPOINT_VERSION
    header["manifest"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_LEN_FMT, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack(_HEADER_LEN_FMT, fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported container version: {header.get('version')}")
        data = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(data[start : start + nbytes], dtype="<f8").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    save_arrays(path, params.arrays, {"kind": "model", "arch": asdict(params.config), "meta": meta or {}})


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    arrays, header = load_arrays(path)
    if header.get("kind") != "model":
        raise ValueError(f"not a model checkpoint: kind={header.get('kind')!r}")
    config = ArchConfig(**header["arch"])
    expected = dict(_array_layout(config))
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise ShapeMismatch(f"checkpoint array {name!r} missing or misshaped")
    return ModelParams(config=config, arrays=arrays), header.get("meta", {})
