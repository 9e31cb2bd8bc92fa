"""Single-stream transformer over joint text + region embeddings with a CLS head
and a paired head (image repeated against OCR text and against the caption).

Sequences are laid out text first, then regions: ``[CLS] w1 .. wn [SEP] r1 .. rK``.
Everything runs on padded batches; a single record is a batch of one. Padded
positions carry mask 0 and never act as attention keys or pooling inputs, so
padding does not change any unmasked output.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import PAD, MemeRecord, Vocab, check_boxes, tokenize, words
from .errors import InputError, ShapeError
from .tensor import Tensor

HEAD_KINDS = ("cls", "paired")
ABLATIONS = ("none", "text_only", "image_only")
MASK_FILL = -1e9
BOX_DIMS = 5  # x1, y1, x2, y2, area


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_text_len: int = 16
    max_regions: int = 4
    region_feat_dim: int = 16
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 0  # 0 -> 4 * hidden_dim
    pool_hidden: int = 0  # 0 -> hidden_dim
    head_kind: str = "paired"
    ablation: str = "none"
    dropout_rate: float = 0.0
    share_pool: bool = True
    allow_empty_caption: bool = False
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.pool_hidden == 0:
            object.__setattr__(self, "pool_hidden", self.hidden_dim)
        for name in ("vocab_size", "max_regions", "region_feat_dim", "hidden_dim", "num_heads",
                     "ffn_dim", "pool_hidden"):
            if getattr(self, name) < 1:
                raise InputError(f"ModelConfig: {name} must be >= 1")
        if self.max_text_len < 3:
            raise InputError("ModelConfig: max_text_len must be >= 3 ([CLS] word [SEP])")
        if self.num_layers < 0:
            raise InputError("ModelConfig: num_layers must be >= 0")
        if self.hidden_dim % self.num_heads:
            raise InputError(f"ModelConfig: hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.head_kind not in HEAD_KINDS:
            raise InputError(f"ModelConfig: head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.ablation not in ABLATIONS:
            raise InputError(f"ModelConfig: ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InputError("ModelConfig: dropout_rate must be in [0,1)")
        if self.ln_eps <= 0:
            raise InputError("ModelConfig: ln_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**dict(d))

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class ParameterSet(Mapping):
    """Named trainable arrays; iteration is lexicographic by name."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name in sorted(tensors or {}):
            self[name] = tensors[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        t.name = name
        self._t = dict(sorted({**self._t, name: t}.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._t.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(t.data.copy()) for k, t in self._t.items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return cls({k: Tensor(np.array(v, dtype=np.float64)) for k, v in arrays.items()})

    def num_values(self) -> int:
        return sum(t.size for t in self._t.values())


def no_decay(name: str) -> bool:
    """Biases and layer-norm affine parameters are excluded from weight decay."""
    return name.endswith((".bias", ".gamma", ".beta"))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, p = cfg.hidden_dim, cfg.ffn_dim, cfg.pool_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (cfg.vocab_size, d),
        "emb.pos": (cfg.max_text_len, d),
        "emb.seg": (2, d),
        "emb.region.weight": (cfg.region_feat_dim + BOX_DIMS, d),
        "emb.region.bias": (d,),
        "emb.ln.gamma": (d,),
        "emb.ln.beta": (d,),
    }
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        for ln in ("ln1", "ln2"):
            shapes[pre + ln + ".gamma"] = (d,)
            shapes[pre + ln + ".beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{proj}.weight"] = (d, d)
            shapes[pre + f"attn.{proj}.bias"] = (d,)
        shapes[pre + "ffn.in.weight"] = (d, f)
        shapes[pre + "ffn.in.bias"] = (f,)
        shapes[pre + "ffn.out.weight"] = (f, d)
        shapes[pre + "ffn.out.bias"] = (d,)
    pools = ["pool"] if (cfg.head_kind == "cls" or cfg.share_pool) else ["pool", "pool_b"]
    if cfg.head_kind == "paired":
        for pre in pools:
            shapes[pre + ".proj.weight"] = (d, p)
            shapes[pre + ".score.weight"] = (p, 1)
    head_in = 2 * d if cfg.head_kind == "paired" else d
    shapes["head.fc1.weight"] = (head_in, d)
    shapes["head.fc1.bias"] = (d,)
    shapes["head.fc2.weight"] = (d, 2)
    shapes["head.fc2.bias"] = (2,)
    return shapes


def init_params(cfg: ModelConfig, seed: int, zero_head: bool = True) -> ParameterSet:
    """normal(0, init_std) weights, zero biases, unit layer-norm gains.

    Draws happen in lexicographic name order so the result depends only on
    (cfg, seed). With ``zero_head`` the final classifier layer starts at zero,
    so every prediction starts at probability 0.5.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif no_decay(name):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        if zero_head and name.startswith("head.fc2."):
            arr = np.zeros(shape)
        out[name] = Tensor(arr)
    return ParameterSet(out)


# --------------------------------------------------------------------------
# joint sequences
# --------------------------------------------------------------------------


@dataclass
class JointBatch:
    """B padded joint sequences, text part first then regions.

    ``text_mask`` / ``region_mask`` hold 1 for real positions and 0 for
    padding or ablated modalities.
    """

    token_ids: np.ndarray  # B x T int64
    text_mask: np.ndarray  # B x T
    features: np.ndarray  # B x K x D
    boxes: np.ndarray  # B x K x 4
    region_mask: np.ndarray  # B x K
    ablation: str = "none"

    @property
    def batch_size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def text_len(self) -> int:
        return int(self.token_ids.shape[1])

    @property
    def num_regions(self) -> int:
        return int(self.features.shape[1])

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([self.text_mask, self.region_mask], axis=1)

    @property
    def segment_ids(self) -> np.ndarray:
        b = self.batch_size
        return np.concatenate([np.ones((b, self.text_len), np.int64),
                               np.zeros((b, self.num_regions), np.int64)], axis=1)

    @property
    def position_ids(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.text_len), self.token_ids.shape)


@dataclass
class EncodedRecord:
    """Tokenized view of one record, ready to be batched."""

    id: str
    text_ids: list[int]
    caption_ids: list[int] | None
    features: np.ndarray
    boxes: np.ndarray
    label: int | None = None
    caption_truncated: bool = field(default=False, repr=False)


def encode_record(cfg: ModelConfig, vocab: Vocab, record: MemeRecord) -> EncodedRecord:
    feats = record.features
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise InputError(f"record {record.id}: features must be a K x D array with K >= 1")
    k, dim = feats.shape
    if k > cfg.max_regions:
        raise InputError(f"record {record.id}: {k} regions exceeds max_regions={cfg.max_regions}")
    if dim != cfg.region_feat_dim:
        raise ShapeError(f"record {record.id}: feature dim {dim} != region_feat_dim {cfg.region_feat_dim}")
    problem = check_boxes(record.boxes)
    if problem or record.boxes.shape[0] != k:
        raise InputError(f"record {record.id}: {problem or 'boxes/features row count differ'}")
    if len(vocab) > cfg.vocab_size:
        raise InputError(f"vocab has {len(vocab)} tokens but vocab_size={cfg.vocab_size}")
    cap_ids = None if record.caption is None else tokenize(vocab, record.caption, cfg.max_text_len)
    truncated = record.caption is not None and len(words(record.caption)) > cfg.max_text_len - 2
    return EncodedRecord(record.id, tokenize(vocab, record.text, cfg.max_text_len), cap_ids,
                         feats, record.boxes, record.label, truncated)


def encode_records(cfg: ModelConfig, vocab: Vocab, records: Sequence[MemeRecord]) -> list[EncodedRecord]:
    return [encode_record(cfg, vocab, r) for r in records]


def _caption_ids(cfg: ModelConfig, item: EncodedRecord) -> list[int]:
    ids = item.caption_ids
    if ids is None or (len(ids) == 2 and not cfg.allow_empty_caption):
        raise InputError(
            f"record {item.id}: caption is missing or empty; the paired head needs an inferred "
            "caption per record (backfill captions upstream, or set allow_empty_caption=true)")
    return ids


def collate(cfg: ModelConfig, items: Sequence[EncodedRecord], use_caption: bool = False,
            text_len: int | None = None) -> JointBatch:
    """Pad a list of encoded records into one batch.

    ``use_caption`` pairs the regions with the caption instead of the OCR
    text. ``text_len`` pads the text part to a fixed length (>= the longest).
    """
    if not items:
        raise InputError("collate: empty batch")
    texts = [_caption_ids(cfg, it) if use_caption else it.text_ids for it in items]
    for ids in texts:
        if max(ids) >= cfg.vocab_size:
            raise InputError(f"token id {max(ids)} >= vocab_size {cfg.vocab_size}")
        if len(ids) > cfg.max_text_len:
            raise InputError(f"text of {len(ids)} tokens exceeds max_text_len={cfg.max_text_len}")
    b = len(items)
    t = max(len(ids) for ids in texts)
    if text_len is not None:
        if text_len < t or text_len > cfg.max_text_len:
            raise InputError(f"collate: text_len {text_len} outside [{t}, {cfg.max_text_len}]")
        t = text_len
    k = max(it.features.shape[0] for it in items)
    tok = np.full((b, t), PAD, dtype=np.int64)
    tmask = np.zeros((b, t))
    feats = np.zeros((b, k, cfg.region_feat_dim))
    boxes = np.zeros((b, k, 4))
    rmask = np.zeros((b, k))
    for i, (it, ids) in enumerate(zip(items, texts)):
        tok[i, :len(ids)] = ids
        tmask[i, :len(ids)] = 1.0
        n = it.features.shape[0]
        feats[i, :n] = it.features
        boxes[i, :n] = it.boxes
        rmask[i, :n] = 1.0
    if cfg.ablation == "text_only":
        rmask[:] = 0.0
    elif cfg.ablation == "image_only":
        tmask[:] = 0.0
    return JointBatch(tok, tmask, feats, boxes, rmask, cfg.ablation)


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------


def _linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return T.matmul(x, params[name + ".weight"]) + params[name + ".bias"]


def embed_sequence(cfg: ModelConfig, params: Mapping[str, Tensor], batch: JointBatch) -> tuple[Tensor, np.ndarray]:
    """Joint embeddings ``B x (T+K) x d`` and the attention mask ``B x (T+K)``."""
    if batch.text_len > cfg.max_text_len:
        raise InputError(f"text length {batch.text_len} exceeds max_text_len={cfg.max_text_len}")
    if batch.num_regions > cfg.max_regions:
        raise InputError(f"{batch.num_regions} regions exceeds max_regions={cfg.max_regions}")
    if batch.token_ids.size and batch.token_ids.max() >= cfg.vocab_size:
        raise InputError(f"token id {int(batch.token_ids.max())} >= vocab_size {cfg.vocab_size}")
    seg = params["emb.seg"]
    txt = T.embedding(params["emb.tok"], batch.token_ids)
    txt = txt + params["emb.pos"][: batch.text_len] + seg[1]
    bx = batch.boxes
    area = ((bx[..., 2] - bx[..., 0]) * (bx[..., 3] - bx[..., 1]))[..., None]
    geo = np.concatenate([batch.features, bx, area], axis=-1)
    reg = _linear(Tensor(geo), params, "emb.region") + seg[0]
    x = T.layer_norm(T.concat([txt, reg], axis=1), params["emb.ln.gamma"], params["emb.ln.beta"], cfg.ln_eps)
    mask = batch.mask
    if batch.ablation != "none":
        # ablated modality rows are zeroed as well as masked
        x = x * mask[..., None]
    return x, mask


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask > 0, 0.0, MASK_FILL)


def encoder_forward(cfg: ModelConfig, params: Mapping[str, Tensor], x: Tensor, mask: np.ndarray,
                    rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
    """Pre-norm transformer stack; masked positions are never attended to.

    When ``attn_out`` is a list, each layer's ``B x H x S x S`` attention
    weights are appended to it.
    """
    if x.ndim != 3 or x.shape[-1] != cfg.hidden_dim or mask.shape != x.shape[:2]:
        raise ShapeError(f"encoder_forward: embedded {x.shape} / mask {mask.shape} inconsistent with d={cfg.hidden_dim}")
    b, s, d = x.shape
    h, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    bias = _mask_bias(mask)[:, None, None, :]
    rate = cfg.dropout_rate if rng is not None else 0.0

    def heads(t: Tensor) -> Tensor:
        return T.transpose(t.reshape(b, s, h, dh), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        y = T.layer_norm(x, params[pre + "ln1.gamma"], params[pre + "ln1.beta"], cfg.ln_eps)
        q = heads(_linear(y, params, pre + "attn.q"))
        k = heads(_linear(y, params, pre + "attn.k"))
        v = heads(_linear(y, params, pre + "attn.v"))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale + bias
        att = T.softmax_rows(scores)
        if attn_out is not None:
            attn_out.append(att.data)
        ctx = T.transpose(T.matmul(att, v), (0, 2, 1, 3)).reshape(b, s, d)
        x = x + T.dropout(_linear(ctx, params, pre + "attn.o"), rate, rng)
        y = T.layer_norm(x, params[pre + "ln2.gamma"], params[pre + "ln2.beta"], cfg.ln_eps)
        y = _linear(T.gelu(_linear(y, params, pre + "ffn.in")), params, pre + "ffn.out")
        x = x + T.dropout(y, rate, rng)
    return x


def attention_pool(params: Mapping[str, Tensor], hidden: Tensor, mask: np.ndarray, prefix: str = "pool") -> Tensor:
    """Additive attention pooling: softmax over ``w . tanh(W h_i)`` of unmasked rows."""
    if (mask.sum(axis=1) <= 0).any():
        raise InputError("attention_pool: every position of a sequence is masked")
    b, s, _ = hidden.shape
    scores = T.matmul(T.tanh(T.matmul(hidden, params[prefix + ".proj.weight"])),
                      params[prefix + ".score.weight"]).reshape(b, 1, s)
    weights = T.softmax_rows(scores + _mask_bias(mask)[:, None, :])
    return T.matmul(weights, hidden).reshape(b, hidden.shape[-1])


def mlp_head(params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    return _linear(T.gelu(_linear(x, params, "head.fc1")), params, "head.fc2")


def cls_logits(cfg: ModelConfig, params: Mapping[str, Tensor], batch: JointBatch,
               rng: np.random.Generator | None = None) -> Tensor:
    x, mask = embed_sequence(cfg, params, batch)
    hidden = encoder_forward(cfg, params, x, mask, rng)
    return mlp_head(params, hidden[:, 0, :])


def paired_batches(cfg: ModelConfig, items: Sequence[EncodedRecord]) -> tuple[JointBatch, JointBatch]:
    """Half A pairs the regions with the OCR text, half B the same regions with the caption."""
    if not items:
        raise InputError("paired_batches: empty batch")
    t = max(max(len(it.text_ids) for it in items), max(len(_caption_ids(cfg, it)) for it in items))
    return collate(cfg, items, use_caption=False, text_len=t), collate(cfg, items, use_caption=True, text_len=t)


def paired_pooled(cfg: ModelConfig, params: Mapping[str, Tensor], half_a: JointBatch, half_b: JointBatch,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Pooled vectors of both halves, each ``B x d``.

    Both halves go through one encoder call stacked on the batch axis; the
    parameters are shared, so this is the same as two separate calls.
    """
    both = JointBatch(
        np.concatenate([half_a.token_ids, half_b.token_ids]),
        np.concatenate([half_a.text_mask, half_b.text_mask]),
        np.concatenate([half_a.features, half_b.features]),
        np.concatenate([half_a.boxes, half_b.boxes]),
        np.concatenate([half_a.region_mask, half_b.region_mask]),
        half_a.ablation,
    )
    x, mask = embed_sequence(cfg, params, both)
    hidden = encoder_forward(cfg, params, x, mask, rng)
    b = half_a.batch_size
    if cfg.share_pool:
        pooled = attention_pool(params, hidden, mask, "pool")
        return pooled[:b], pooled[b:]
    return (attention_pool(params, hidden[:b], mask[:b], "pool"),
            attention_pool(params, hidden[b:], mask[b:], "pool_b"))


def paired_logits(cfg: ModelConfig, params: Mapping[str, Tensor], half_a: JointBatch, half_b: JointBatch,
                  rng: np.random.Generator | None = None) -> Tensor:
    pa, pb = paired_pooled(cfg, params, half_a, half_b, rng)
    return mlp_head(params, T.concat([pa, pb], axis=1))


def forward_items(cfg: ModelConfig, params: Mapping[str, Tensor], items: Sequence[EncodedRecord],
                  rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``B x 2`` for encoded records, dispatching on ``cfg.head_kind``."""
    if cfg.head_kind == "cls":
        return cls_logits(cfg, params, collate(cfg, items), rng)
    return paired_logits(cfg, params, *paired_batches(cfg, items), rng)


# --------------------------------------------------------------------------
# record-level API
# --------------------------------------------------------------------------


def cls_forward(cfg: ModelConfig, params: Mapping[str, Tensor], record: MemeRecord, vocab: Vocab) -> Tensor:
    """Logits (2,) from the CLS head; the caption field is ignored."""
    if cfg.head_kind != "cls":
        raise InputError("cls_forward needs head_kind='cls'")
    item = encode_record(cfg, vocab, record)
    return cls_logits(cfg, params, collate(cfg, [item])).reshape(2)


def paired_forward(cfg: ModelConfig, params: Mapping[str, Tensor], record: MemeRecord, vocab: Vocab) -> Tensor:
    """Logits (2,) from the paired head."""
    if cfg.head_kind != "paired":
        raise InputError("paired_forward needs head_kind='paired'")
    item = encode_record(cfg, vocab, record)
    return paired_logits(cfg, params, *paired_batches(cfg, [item])).reshape(2)


def proba_from_logits(logits: np.ndarray) -> np.ndarray:
    """P(label=1) from ``... x 2`` logits via a max-shifted softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def predict_proba(cfg: ModelConfig, params: Mapping[str, Tensor], record: MemeRecord, vocab: Vocab) -> float:
    fwd = cls_forward if cfg.head_kind == "cls" else paired_forward
    return float(proba_from_logits(fwd(cfg, params, record, vocab).data))


def predict_proba_items(cfg: ModelConfig, params: Mapping[str, Tensor], items: Sequence[EncodedRecord],
                        batch_size: int = 256) -> np.ndarray:
    out = np.empty(len(items))
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        out[i:i + len(chunk)] = proba_from_logits(forward_items(cfg, params, chunk).data)
    return out
