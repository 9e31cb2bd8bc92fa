"""Deterministic fine-tuning loop, AdamW, learning-rate schedule and binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import MemeRecord, Vocab, atomic_write_bytes
from .errors import CheckpointError, InputError, NonFiniteError, ShapeError
from .evaluate import Predictions, auroc
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

MAGIC = b"HMPA"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    eval_every: int = 0  # 0 -> once per epoch

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise InputError("TrainConfig: lr must be > 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise InputError("TrainConfig: warmup_fraction must be in [0,1)")
        if self.batch_size < 1:
            raise InputError("TrainConfig: batch_size must be >= 1")
        if self.epochs < 0 or self.eval_every < 0:
            raise InputError("TrainConfig: epochs and eval_every must be >= 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InputError("TrainConfig: betas must be two values in [0,1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InputError(f"TrainConfig: unknown keys {sorted(unknown)}")
        return cls(**dict(d))


# --------------------------------------------------------------------------
# loss, schedule, optimizer
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; accepts ``(2,)`` or ``B x 2`` logits."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if not np.isin(labels, (0, 1)).all():
        raise InputError("cross_entropy: labels must be 0 or 1")
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    if logits.shape[0] != labels.size:
        raise ShapeError(f"cross_entropy: {logits.shape[0]} logit rows for {labels.size} labels")
    picked = T.log_softmax_rows(logits)[np.arange(labels.size), labels]
    return -T.mean(picked)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``floor(warmup_fraction * total)`` steps, then linear decay to 0."""
    if not 1 <= step <= total_steps:
        raise InputError(f"lr_at: step {step} outside [1, {total_steps}]")
    warm = int(cfg.warmup_fraction * total_steps)
    if step <= warm:
        return cfg.lr * (step / warm)
    return cfg.lr * ((total_steps - step) / (total_steps - warm))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
               t: int, cfg: TrainConfig, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``.

    ``lr`` is the scheduled rate for this step (defaults to ``cfg.lr``).
    Decay is skipped for biases and layer-norm affine parameters.
    """
    if t < 1:
        raise InputError(f"adamw_step: step must be >= 1, got {t}")
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw_step: non-finite gradient for parameter {name}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * ((m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))
        if cfg.weight_decay and not M.no_decay(name):
            update = update + lr * cfg.weight_decay * p.data
        p.data = p.data - update


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: M.ModelConfig
    train_config: TrainConfig
    step: int
    params: M.ParameterSet
    optimizer: AdamState
    rng_state: dict
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.params.items()}
        out.update({f"adam_m/{k}": a for k, a in self.optimizer.m.items()})
        out.update({f"adam_v/{k}": a for k, a in self.optimizer.v.items()})
        return dict(sorted(out.items()))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.arrays()
    manifest, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "arrays": manifest,
        "data_bytes": offset,
    }
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(blob)), blob]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"unsupported checkpoint version {version}; supported: {list(SUPPORTED_VERSIONS)}")
    (mlen,) = struct.unpack_from("<I", buf, 8)
    start = 12 + mlen
    if len(buf) < start:
        raise CheckpointError("corrupt checkpoint: truncated metadata block")
    try:
        meta = json.loads(buf[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt checkpoint: unreadable metadata block") from None
    if len(buf) != start + meta["data_bytes"]:
        raise CheckpointError(f"corrupt checkpoint: expected {start + meta['data_bytes']} bytes, found {len(buf)}")
    arrays: dict[str, np.ndarray] = {}
    for entry in meta["arrays"]:
        lo = start + entry["offset"]
        a = np.frombuffer(buf, dtype="<f8", count=entry["nbytes"] // 8, offset=lo)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    params = M.ParameterSet.from_arrays({k[6:]: a for k, a in arrays.items() if k.startswith("param/")})
    opt = AdamState({k[7:]: a for k, a in arrays.items() if k.startswith("adam_m/")},
                    {k[7:]: a for k, a in arrays.items() if k.startswith("adam_v/")})
    return Checkpoint(
        model_config=M.ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        step=int(meta["step"]),
        params=params,
        optimizer=opt,
        rng_state=meta["rng_state"],
        extra=meta.get("extra", {}),
        version=version,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_val_auroc: float | None
    val_predictions: Predictions | None


def _predictions(cfg: M.ModelConfig, params, items: Sequence[M.EncodedRecord]) -> Predictions:
    proba = M.predict_proba_items(cfg, params, items)
    labels = None if any(it.label is None for it in items) else [it.label for it in items]
    return Predictions([it.id for it in items], proba, labels)


def train_run(model_cfg: M.ModelConfig, train_cfg: TrainConfig, train_set: Sequence[MemeRecord],
              val_set: Sequence[MemeRecord] | None, vocab: Vocab) -> TrainResult:
    """Train from a seeded initialization; keep the checkpoint with the best validation AUROC.

    The seed drives three independent streams: parameter init, per-epoch
    shuffling and dropout. Validation runs at step 0, every ``eval_every``
    steps (or at each epoch end when 0) and at the last step; ties in AUROC go
    to the later step. Without a validation set the final state is returned.
    """
    if not train_set:
        raise InputError("train_run: empty training set")
    for r in train_set:
        if r.label is None:
            raise InputError(f"train_run: training record {r.id} has no label")
    items = M.encode_records(model_cfg, vocab, train_set)
    val_items = M.encode_records(model_cfg, vocab, val_set) if val_set else []
    if val_items and any(it.label is None for it in val_items):
        raise InputError("train_run: validation records must be labeled")
    trunc = sum(it.caption_truncated for it in items)
    if trunc:
        log.info("%d of %d training captions truncated to max_text_len=%d", trunc, len(items), model_cfg.max_text_len)

    seed = train_cfg.seed
    params = M.init_params(model_cfg, seed)
    opt = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2]) if model_cfg.dropout_rate > 0 else None

    n = len(items)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total = train_cfg.epochs * steps_per_epoch
    labels = np.array([it.label for it in items], dtype=np.int64)

    metric_log: list[dict] = []
    best: dict | None = None

    def snapshot(step: int, val_auroc: float | None) -> dict:
        return {"step": step, "val_auroc": val_auroc, "params": params.copy(), "opt": opt.copy(),
                "rng": shuffle_rng.bit_generator.state}

    def evaluate_now(step: int, epoch: int, loss: float | None) -> None:
        nonlocal best
        va = auroc(_predictions(model_cfg, params, val_items)) if val_items else None
        metric_log.append({"step": step, "epoch": epoch, "loss": loss, "val_auroc": va})
        log.debug("step %d epoch %d loss %s val_auroc %s", step, epoch, loss, va)
        if va is not None and (best is None or va >= best["val_auroc"]):
            best = snapshot(step, va)

    evaluate_now(0, 0, None)
    step = 0
    losses: list[float] = []
    for epoch in range(1, train_cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            step += 1
            params.zero_grad()
            try:
                with Graph() as g:
                    logits = M.forward_items(model_cfg, params, [items[i] for i in idx], drop_rng)
                    loss = cross_entropy(logits, labels[idx])
            except NonFiniteError as exc:
                raise NonFiniteError(f"step {step}: {exc}") from None
            lv = loss.item()
            if not math.isfinite(lv):
                raise NonFiniteError(f"step {step}: loss is {lv}")
            g.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}
            clip_grad_norm(grads, train_cfg.grad_clip_norm)
            adamw_step(params, grads, opt, step, train_cfg, lr_at(step, total, train_cfg))
            losses.append(lv)
            at_end = step == total
            due = (train_cfg.eval_every and step % train_cfg.eval_every == 0) or \
                  (not train_cfg.eval_every and b == steps_per_epoch - 1)
            if due or at_end:
                evaluate_now(step, epoch, float(np.mean(losses)))
                losses = []

    if best is None:
        best = snapshot(step, None)
    ckpt = Checkpoint(
        model_config=model_cfg,
        train_config=train_cfg,
        step=best["step"],
        params=best["params"],
        optimizer=best["opt"],
        rng_state=best["rng"],
        extra={"vocab": list(vocab.tokens)},
    )
    val_preds = _predictions(model_cfg, ckpt.params, val_items) if val_items else None
    return TrainResult(ckpt, metric_log, best["val_auroc"], val_preds)
