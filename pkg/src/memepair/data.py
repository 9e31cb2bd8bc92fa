"""Meme records, tokenizer, vocabulary, dataset files and the synthetic confounder generator."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")
CONFOUNDER_SUFFIXES = ("-imgconf", "-txtconf")

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass
class MemeRecord:
    id: str
    text: str
    caption: str | None
    features: np.ndarray  # K x D
    boxes: np.ndarray  # K x 4, normalized [x1, y1, x2, y2]
    label: int | None = None

    @property
    def labeled(self) -> bool:
        return self.label is not None

    @property
    def num_regions(self) -> int:
        return int(self.features.shape[0])

    def to_json(self) -> dict:
        out: dict = {"id": self.id}
        if self.label is not None:
            out["label"] = int(self.label)
        out["text"] = self.text
        out["caption"] = self.caption
        out["features"] = self.features.tolist()
        out["boxes"] = self.boxes.tolist()
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemeRecord):
            return NotImplemented
        return (self.id == other.id and self.label == other.label and self.text == other.text
                and self.caption == other.caption
                and self.features.shape == other.features.shape
                and self.boxes.shape == other.boxes.shape
                and bool(np.array_equal(self.features, other.features))
                and bool(np.array_equal(self.boxes, other.boxes)))


def source_id(record_id: str) -> str:
    """Id of the record a confounder was derived from (itself otherwise)."""
    for suffix in CONFOUNDER_SUFFIXES:
        if record_id.endswith(suffix):
            return record_id[: -len(suffix)]
    return record_id


def check_boxes(boxes: np.ndarray) -> str | None:
    """Return a description of the first violated box invariant, or None."""
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        return f"boxes must be K x 4, got shape {boxes.shape}"
    if boxes.shape[0] < 1:
        return "at least one region is required"
    if not np.isfinite(boxes).all() or boxes.min() < 0.0 or boxes.max() > 1.0:
        return "box coordinates must lie in [0,1]"
    if (boxes[:, 0] > boxes[:, 2]).any():
        return "x1≤x2 violated"
    if (boxes[:, 1] > boxes[:, 3]).any():
        return "y1≤y2 violated"
    return None


# --------------------------------------------------------------------------
# tokenizer / vocab
# --------------------------------------------------------------------------


def words(s: str) -> list[str]:
    """Lowercased word pieces; punctuation and whitespace are boundaries."""
    return _WORD_RE.findall(s.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise InputError(f"vocab must start with the reserved tokens {RESERVED}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise InputError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def tokenize(vocab: Vocab, s: str, max_len: int) -> list[int]:
    if max_len < 3:
        raise InputError(f"tokenize: max_len must be >= 3, got {max_len}")
    ids = [vocab.id(w) for w in words(s)][: max_len - 2]
    return [CLS, *ids, SEP]


def build_vocab(records: Iterable[MemeRecord], min_count: int = 1) -> Vocab:
    if min_count < 1:
        raise InputError("build_vocab: min_count must be >= 1")
    counts: Counter[str] = Counter()
    for r in records:
        counts.update(words(r.text))
        if r.caption:
            counts.update(words(r.caption))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocab([*RESERVED, *kept])


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_dataset(records: Sequence[MemeRecord], meta: dict | None = None) -> str:
    lines = []
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True, ensure_ascii=False))
    lines.extend(json.dumps(r.to_json(), ensure_ascii=False) for r in records)
    return "".join(line + "\n" for line in lines)


def save_dataset(records: Sequence[MemeRecord], path: str | os.PathLike, meta: dict | None = None) -> None:
    atomic_write_text(path, dumps_dataset(records, meta))


def _field(obj: dict, name: str, lineno: int, required: bool = True):
    if name not in obj:
        if required:
            raise InputError(f"line {lineno}: missing field '{name}'")
        return None
    return obj[name]


def _parse_record(obj, lineno: int) -> MemeRecord:
    if not isinstance(obj, dict):
        raise InputError(f"line {lineno}: expected an object")
    rid = _field(obj, "id", lineno)
    if not isinstance(rid, str) or not rid:
        raise InputError(f"line {lineno}: field 'id' must be a non-empty string")
    label = _field(obj, "label", lineno, required=False)
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise InputError(f"line {lineno}: field 'label' must be 0 or 1, got {label!r}")
    text = _field(obj, "text", lineno)
    if not isinstance(text, str):
        raise InputError(f"line {lineno}: field 'text' must be a string")
    caption = _field(obj, "caption", lineno, required=False)
    if caption is not None and not isinstance(caption, str):
        raise InputError(f"line {lineno}: field 'caption' must be a string")
    try:
        feats = np.array(_field(obj, "features", lineno), dtype=np.float64)
    except (TypeError, ValueError):
        raise InputError(f"line {lineno}: field 'features' must be a K x D numeric array") from None
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1 or not np.isfinite(feats).all():
        raise InputError(f"line {lineno}: field 'features' must be a finite K x D array with K >= 1")
    try:
        boxes = np.array(_field(obj, "boxes", lineno), dtype=np.float64)
    except (TypeError, ValueError):
        raise InputError(f"line {lineno}: field 'boxes' must be a K x 4 numeric array") from None
    problem = check_boxes(boxes)
    if problem:
        raise InputError(f"line {lineno}: field 'boxes': {problem}, line {lineno}")
    if boxes.shape[0] != feats.shape[0]:
        raise InputError(f"line {lineno}: field 'boxes' has {boxes.shape[0]} rows but 'features' has {feats.shape[0]}")
    return MemeRecord(id=rid, text=text, caption=caption, features=feats, boxes=boxes,
                      label=None if label is None else int(label))


def loads_dataset(text: str) -> tuple[list[MemeRecord], dict | None]:
    records: list[MemeRecord] = []
    meta = None
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if lineno == 1 and isinstance(obj, dict) and set(obj) == {"meta"}:
            meta = obj["meta"]
            continue
        rec = _parse_record(obj, lineno)
        if rec.id in seen:
            raise InputError(f"line {lineno}: field 'id': duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records, meta


def load_dataset(path: str | os.PathLike, with_meta: bool = False):
    """Read a line-delimited dataset file. The optional ``{"meta": ...}`` header is skipped
    (or returned as the second element when ``with_meta`` is set)."""
    with open(path, encoding="utf-8") as fh:
        records, meta = loads_dataset(fh.read())
    return (records, meta) if with_meta else records


# --------------------------------------------------------------------------
# synthetic benign-confounder data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_concepts: int = 8
    num_samples: int = 1000
    num_regions: int = 4
    feat_dim: int = 16
    noise_sigma: float = 0.1
    confounder_fraction: float = 0.5
    text_noise_rate: float = 0.0
    caption_len: tuple[int, int] = (2, 4)
    text_len: tuple[int, int] = (3, 6)
    words_per_concept: int = 5
    num_fillers: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.num_concepts < 2:
            raise InputError("SyntheticSpec: num_concepts must be >= 2")
        if self.num_samples < 4:
            raise InputError("SyntheticSpec: num_samples must be >= 4")
        if self.noise_sigma < 0:
            raise InputError("SyntheticSpec: noise_sigma must be >= 0")
        if self.num_regions < 1:
            raise InputError("SyntheticSpec: num_regions must be >= 1")
        if self.feat_dim < self.num_concepts:
            raise InputError("SyntheticSpec: feat_dim must be >= num_concepts (one-hot concept code)")
        if not 0.0 <= self.confounder_fraction <= 1.0:
            raise InputError("SyntheticSpec: confounder_fraction must be in [0,1]")
        if not 0.0 <= self.text_noise_rate <= 1.0:
            raise InputError("SyntheticSpec: text_noise_rate must be in [0,1]")
        for name in ("caption_len", "text_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InputError(f"SyntheticSpec: {name} must satisfy 1 <= lo <= hi")


@dataclass
class WordLists:
    text: list[list[str]]  # per concept, OCR role
    caption: list[list[str]]  # per concept, caption role
    filler: list[str] = field(default_factory=list)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        syll = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syll))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def make_word_lists(spec: SyntheticSpec, rng: np.random.Generator) -> WordLists:
    c, w = spec.num_concepts, spec.words_per_concept
    pool = _make_words(rng, 2 * c * w + spec.num_fillers)
    text = [pool[i * w:(i + 1) * w] for i in range(c)]
    cap = [pool[(c + i) * w:(c + i + 1) * w] for i in range(c)]
    return WordLists(text=text, caption=cap, filler=pool[2 * c * w:])


class _Gen:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator, wl: WordLists):
        self.spec, self.rng, self.wl = spec, rng, wl
        self.all_text_words = [w for ws in wl.text for w in ws]

    def other_concept(self, avoid: int) -> int:
        c = int(self.rng.integers(self.spec.num_concepts - 1))
        return c + 1 if c >= avoid else c

    def features(self, concept: int) -> np.ndarray:
        s = self.spec
        f = np.zeros((s.num_regions, s.feat_dim))
        f[:, concept] = 1.0
        if s.noise_sigma > 0:
            f += self.rng.normal(0.0, s.noise_sigma, size=f.shape)
        return f

    def boxes(self) -> np.ndarray:
        xy = self.rng.random((self.spec.num_regions, 2, 2))
        lo, hi = xy.min(axis=2), xy.max(axis=2)
        return np.stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]], axis=1)

    def text(self, concept: int) -> str:
        lo, hi = self.spec.text_len
        n = int(self.rng.integers(lo, hi + 1))
        ws = [self.wl.text[concept][i] for i in self.rng.integers(self.spec.words_per_concept, size=n)]
        if self.spec.text_noise_rate > 0:
            flip = self.rng.random(n) < self.spec.text_noise_rate
            repl = self.rng.integers(len(self.all_text_words), size=n)
            ws = [self.all_text_words[r] if f else w for w, f, r in zip(ws, flip, repl)]
        return " ".join(ws)

    def caption(self, concept: int) -> str:
        lo, hi = self.spec.caption_len
        n = int(self.rng.integers(lo, hi + 1))
        ws = [self.wl.caption[concept][i] for i in self.rng.integers(self.spec.words_per_concept, size=n)]
        if self.wl.filler:
            k = int(self.rng.integers(1, 3))
            for _ in range(k):
                pos = int(self.rng.integers(len(ws) + 1))
                ws.insert(pos, self.wl.filler[int(self.rng.integers(len(self.wl.filler)))])
        return " ".join(ws)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[MemeRecord], Vocab, dict]:
    """Generate a balanced dataset whose label is 1 iff image and text concepts agree.

    Returns ``(records, vocab, meta)``; ``meta`` records the generator settings and the
    per-concept word lists and is written as the dataset header line.
    Record count is exactly ``spec.num_samples``: half hateful base records,
    ``confounder_fraction`` of which spawn an image and a text confounder
    (both label 0), topped up with non-hateful base records.
    """
    rng = np.random.default_rng(spec.seed)
    wl = make_word_lists(spec, rng)
    gen = _Gen(spec, rng, wl)
    c = spec.num_concepts

    n = spec.num_samples
    n_pos = n // 2
    n_src = min(int(round(spec.confounder_fraction * n_pos)), (n - n_pos) // 2)
    n_neg = n - n_pos - 2 * n_src

    kinds = np.array([1] * n_pos + [0] * n_neg)
    rng.shuffle(kinds)
    src_slots = set(np.flatnonzero(kinds == 1)[:n_src].tolist())

    records: list[MemeRecord] = []
    for i, kind in enumerate(kinds):
        rid = f"m{i:05d}"
        if kind == 1:
            c_img = c_txt = int(rng.integers(c))
        else:
            c_txt = int(rng.integers(c))
            c_img = gen.other_concept(c_txt)
        base = MemeRecord(id=rid, text=gen.text(c_txt), caption=gen.caption(c_img),
                          features=gen.features(c_img), boxes=gen.boxes(), label=int(kind))
        records.append(base)
        if i in src_slots:
            ci = gen.other_concept(c_txt)
            records.append(MemeRecord(id=rid + "-imgconf", text=base.text, caption=gen.caption(ci),
                                      features=gen.features(ci), boxes=gen.boxes(), label=0))
            ct = gen.other_concept(c_img)
            records.append(MemeRecord(id=rid + "-txtconf", text=gen.text(ct), caption=base.caption,
                                      features=base.features.copy(), boxes=base.boxes.copy(), label=0))

    vocab = build_vocab(records)
    meta = {
        "generator": "synthetic-benign-confounder",
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
        "text_words": wl.text,
        "caption_words": wl.caption,
        "filler_words": wl.filler,
    }
    return records, vocab, meta


def concept_of_text(text: str, wl_text: list[list[str]]) -> int:
    """Majority concept among the OCR words (ties broken by lowest concept id)."""
    lookup = {w: i for i, ws in enumerate(wl_text) for w in ws}
    votes = Counter(lookup[w] for w in words(text) if w in lookup)
    return min(votes, key=lambda k: (-votes[k], k)) if votes else -1


def concept_of_features(features: np.ndarray) -> int:
    return int(np.argmax(features.mean(axis=0)))


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def split_dataset(records: Sequence[MemeRecord], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[list[MemeRecord], list[MemeRecord], list[MemeRecord]]:
    """Seeded shuffle of confounder groups, then a contiguous three-way split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise InputError(f"split_dataset: need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split_dataset: fractions must sum to 1, got {sum(fractions)!r}")

    groups: dict[str, list[MemeRecord]] = {}
    for r in records:
        groups.setdefault(source_id(r.id), []).append(r)
    order = list(groups)
    perm = np.random.default_rng(seed).permutation(len(order))

    n = len(records)
    cut1 = int(round(fractions[0] * n))
    cut2 = int(round((fractions[0] + fractions[1]) * n))
    parts: tuple[list, list, list] = ([], [], [])
    start = 0
    for gi in perm:
        g = groups[order[gi]]
        which = 0 if start < cut1 else (1 if start < cut2 else 2)
        parts[which].extend(g)
        start += len(g)
    return parts


def truncation_stats(records: Iterable[MemeRecord], max_len: int) -> dict[str, int]:
    """Count texts and captions that will lose words to truncation at ``max_len``."""
    stats = {"records": 0, "text_truncated": 0, "caption_truncated": 0}
    for r in records:
        stats["records"] += 1
        if len(words(r.text)) > max_len - 2:
            stats["text_truncated"] += 1
        if r.caption is not None and len(words(r.caption)) > max_len - 2:
            stats["caption_truncated"] += 1
    if stats["caption_truncated"]:
        log.info("%d of %d captions truncated to %d tokens", stats["caption_truncated"],
                 stats["records"], max_len)
    return stats


def label_balance(records: Sequence[MemeRecord]) -> float:
    labeled = [r.label for r in records if r.label is not None]
    return sum(labeled) / len(labeled) if labeled else math.nan
