"""Synthetic image/scene-text/caption corpora, corpus files and batching.

Images are procedural: a colour and a texture pattern, both named in the
caption.  OCR tokens are either words planted from the caption or
distractors, placed in grid-aligned boxes and optionally painted into the
pixels as a per-word colour signature.

Corpus file: UTF-8 JSON lines.  Line 1 is a header with ``schema_version``;
every further line is one item::

    {"id": ..., "pixels": {"shape": [H, W, C], "b64": <float64 LE, row-major>},
     "ocr": [{"word": ..., "bbox": [x1, y1, x2, y2]}, ...], "captions": [...]}

``pixels`` may also be a nested [H][W][C] list when written by hand.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import CaptionRecord, ImageRecord, OcrToken, Vocab
from .numerics import ContractError

SCHEMA_VERSION = 1

COLORS = {
    "red": (0.9, 0.15, 0.1), "green": (0.15, 0.8, 0.2), "blue": (0.1, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1), "purple": (0.6, 0.15, 0.75), "orange": (0.95, 0.55, 0.05),
    "gray": (0.5, 0.5, 0.5), "teal": (0.05, 0.6, 0.6),
}
PATTERNS = ("stripes", "bars", "checks", "ring", "gradient", "dots")
PREFIXES = ("a photo of", "an image of", "a picture of", "a view of")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_items: int = 64
    height: int = 8
    width: int = 8
    channels: int = 3
    vocab_size: int = 48
    caption_min: int = 2
    caption_max: int = 3
    captions_per_item: int = 1
    ocr_probability: float = 0.5
    ocr_min: int = 1
    ocr_max: int = 3
    scene_text_relevance: float = 0.8
    paint_ocr: bool = True
    duplicate_pairs: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_items", "height", "width", "channels", "vocab_size", "caption_min",
                     "captions_per_item", "ocr_min"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be positive, got {getattr(self, name)}")
        if self.caption_max < self.caption_min:
            raise CorpusError("caption_max < caption_min")
        if self.ocr_max < self.ocr_min:
            raise CorpusError("ocr_max < ocr_min")
        for name in ("ocr_probability", "scene_text_relevance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorpusError(f"{name} must lie in [0, 1], got {v}")
        if self.channels != 3:
            raise CorpusError("generated images are RGB: channels must be 3")
        if self.height < 2 or self.width < 2:
            raise CorpusError("images must be at least 2x2")
        if self.vocab_size < 2 * self.caption_max + 1:
            raise CorpusError(f"vocab_size {self.vocab_size} too small for captions of "
                              f"up to {self.caption_max} words")
        if self.duplicate_pairs and self.n_items % 2:
            raise CorpusError("duplicate_pairs needs an even n_items")

    @classmethod
    def from_dict(cls, values: dict) -> CorpusSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known - {"preset"}
        if unknown:
            raise CorpusError(f"unknown corpus fields: {sorted(unknown)}")
        if "preset" in values and values["preset"] not in PRESETS:
            raise CorpusError(f"unknown preset {values['preset']!r}; valid: {sorted(PRESETS)}")
        base = PRESETS[values["preset"]] if "preset" in values else cls()
        return replace(base, **{k: v for k, v in values.items() if k != "preset"})


PRESETS: dict[str, CorpusSpec] = {
    "mixed": CorpusSpec(),
    # seed picked so at least two items carry OCR and the fusion loss is active
    "overfit": CorpusSpec(n_items=8, seed=4),
    "plain": CorpusSpec(n_items=50, ocr_probability=0.0),
    # pixel-identical pairs told apart only by unpainted OCR words
    "discrimination": CorpusSpec(n_items=32, caption_min=2, caption_max=2, ocr_probability=1.0,
                                 ocr_min=2, ocr_max=2, scene_text_relevance=1.0,
                                 paint_ocr=False, duplicate_pairs=True),
}


@dataclass
class CorpusItem:
    image: ImageRecord
    ocr: list[OcrToken] = field(default_factory=list)
    captions: list[CaptionRecord] = field(default_factory=list)

    @property
    def id(self) -> str:
        return self.image.id

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusItem):
            return NotImplemented
        return (self.id == other.id and self.ocr == other.ocr and self.captions == other.captions
                and self.image.pixels.shape == other.image.pixels.shape
                and self.image.pixels.tobytes() == other.image.pixels.tobytes())


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def lexicon(size: int) -> list[str]:
    """``size`` pronounceable synthetic words, the same for every seed."""
    words = ("".join(p) for p in itertools.product(_CONSONANTS, _VOWELS, _CONSONANTS, _VOWELS))
    return list(itertools.islice(words, size))


def _pattern(name: str, h: int, w: int) -> np.ndarray:
    y, x = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    if name == "stripes":
        m = (np.floor(y * 4) % 2)
    elif name == "bars":
        m = (np.floor(x * 4) % 2)
    elif name == "checks":
        m = (np.floor(x * 4) + np.floor(y * 4)) % 2
    elif name == "ring":
        r = np.hypot(x - 0.5, y - 0.5)
        m = ((r > 0.2) & (r < 0.4)).astype(float)
    elif name == "gradient":
        m = x
    elif name == "dots":
        m = ((np.floor(x * 4) % 2 == 0) & (np.floor(y * 4) % 2 == 0)).astype(float)
    else:
        raise ValueError(name)
    return m.astype(np.float64)


def render_image(color: str, pattern: str, h: int, w: int, rng: np.random.Generator,
                 noise: float = 0.04) -> np.ndarray:
    base = np.array(COLORS[color])
    m = _pattern(pattern, h, w)[..., None]
    img = m * base + (1.0 - m) * (0.35 * base)
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def word_signature(word: str) -> np.ndarray:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return np.array(list(digest[:3]), dtype=np.float64) / 255.0


def paint_word(pixels: np.ndarray, token: OcrToken) -> None:
    h, w, _ = pixels.shape
    x1, y1, x2, y2 = token.bbox
    pixels[round(y1 * h):round(y2 * h), round(x1 * w):round(x2 * w)] = word_signature(token.word)


def _random_box(rng: np.random.Generator, h: int, w: int) -> tuple[float, float, float, float]:
    bw = int(rng.integers(1, max(1, w // 2) + 1))
    bh = int(rng.integers(1, max(1, h // 2) + 1))
    x = int(rng.integers(0, w - bw + 1))
    y = int(rng.integers(0, h - bh + 1))
    return (x / w, y / h, (x + bw) / w, (y + bh) / h)


def _ocr_tokens(rng, spec: CorpusSpec, keywords: list[str], lex: list[str]) -> list[OcrToken]:
    if rng.random() >= spec.ocr_probability:
        return []
    n = int(rng.integers(spec.ocr_min, spec.ocr_max + 1))
    distractors = [wd for wd in lex if wd not in keywords]
    unused = list(keywords)
    tokens = []
    for _ in range(n):
        if rng.random() < spec.scene_text_relevance:
            pool = unused if unused else keywords
            word = pool[int(rng.integers(len(pool)))]
            if word in unused:
                unused.remove(word)
        else:
            word = distractors[int(rng.integers(len(distractors)))]
        tokens.append(OcrToken(word, _random_box(rng, spec.height, spec.width)))
    return tokens


def _captions(rng, item_id: str, color: str, pattern: str, keywords: list[str], count: int):
    out = []
    for _ in range(count):
        prefix = PREFIXES[int(rng.integers(len(PREFIXES)))]
        order = rng.permutation(len(keywords))
        words = [color, pattern] + [keywords[i] for i in order]
        out.append(CaptionRecord(item_id, f"{prefix} {' '.join(words)}"))
    return out


def generate_corpus(spec: CorpusSpec) -> list[CorpusItem]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lex = lexicon(spec.vocab_size)
    colors, patterns = sorted(COLORS), PATTERNS
    items: list[CorpusItem] = []
    shared = None
    taken: list[str] = []
    for i in range(spec.n_items):
        item_id = f"img{i:05d}"
        if spec.duplicate_pairs and i % 2 == 1:
            color, pattern, pixels = shared
            pool = [wd for wd in lex if wd not in taken]
        else:
            color = colors[int(rng.integers(len(colors)))]
            pattern = patterns[int(rng.integers(len(patterns)))]
            pixels = render_image(color, pattern, spec.height, spec.width, rng)
            shared = (color, pattern, pixels)
            pool = lex
        n_kw = int(rng.integers(spec.caption_min, spec.caption_max + 1))
        keywords = [pool[j] for j in rng.choice(len(pool), size=n_kw, replace=False)]
        taken = keywords
        ocr = _ocr_tokens(rng, spec, keywords, lex)
        pixels = pixels.copy()
        if spec.paint_ocr:
            for tok in ocr:
                paint_word(pixels, tok)
        captions = _captions(rng, item_id, color, pattern, keywords, spec.captions_per_item)
        items.append(CorpusItem(ImageRecord(item_id, pixels), ocr, captions))
    return items


def build_vocab(corpus: Iterable[CorpusItem]) -> Vocab:
    texts = []
    for item in corpus:
        texts += [c.text for c in item.captions]
        texts += [o.word for o in item.ocr]
    return Vocab.build(texts)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def _item_record(item: CorpusItem) -> dict:
    px = np.ascontiguousarray(item.image.pixels, dtype="<f8")
    return {
        "id": item.id,
        "pixels": {"shape": list(px.shape), "b64": base64.b64encode(px.tobytes()).decode("ascii")},
        "ocr": [{"word": o.word, "bbox": list(o.bbox)} for o in item.ocr],
        "captions": [c.text for c in item.captions],
    }


def corpus_lines(corpus: Sequence[CorpusItem]) -> list[str]:
    header = {"schema_version": SCHEMA_VERSION, "n_items": len(corpus)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_item_record(it), sort_keys=True) for it in corpus]
    return lines


def write_corpus(path, corpus: Sequence[CorpusItem]) -> None:
    Path(path).write_text("\n".join(corpus_lines(corpus)) + "\n", encoding="utf-8")


def corpus_hash(corpus: Sequence[CorpusItem]) -> str:
    h = hashlib.sha256()
    for line in corpus_lines(corpus):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _parse_pixels(raw, item_id: str) -> np.ndarray:
    if isinstance(raw, dict):
        shape = tuple(int(s) for s in raw["shape"])
        data = base64.b64decode(raw["b64"].encode("ascii"), validate=True)
        if len(data) != 8 * int(np.prod(shape)):
            raise CorpusError(f"item {item_id!r}: field 'pixels' has {len(data)} bytes for shape {shape}")
        arr = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    else:
        arr = np.array(raw, dtype=np.float64)
    if arr.ndim != 3:
        raise CorpusError(f"item {item_id!r}: field 'pixels' must be [H, W, C], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise CorpusError(f"item {item_id!r}: field 'pixels' has values outside [0, 1]")
    return arr


def _parse_item(rec: dict, patch_size: int | None) -> CorpusItem:
    item_id = rec.get("id")
    if not isinstance(item_id, str) or not item_id:
        raise CorpusError("field 'id' missing or not a string")
    for key in ("pixels", "ocr", "captions"):
        if key not in rec:
            raise CorpusError(f"item {item_id!r}: field {key!r} missing")
    pixels = _parse_pixels(rec["pixels"], item_id)
    if patch_size is not None and (pixels.shape[0] % patch_size or pixels.shape[1] % patch_size):
        raise CorpusError(f"item {item_id!r}: field 'pixels' shape {pixels.shape[:2]} "
                          f"not divisible by patch size {patch_size}")
    ocr = []
    for o in rec["ocr"]:
        try:
            ocr.append(OcrToken(str(o["word"]), tuple(float(c) for c in o["bbox"])))
        except (ContractError, KeyError, TypeError) as exc:
            raise CorpusError(f"item {item_id!r}: field 'ocr' invalid: {exc}") from exc
    if not rec["captions"]:
        raise CorpusError(f"item {item_id!r}: field 'captions' is empty")
    try:
        captions = [CaptionRecord(item_id, str(t)) for t in rec["captions"]]
    except ContractError as exc:
        raise CorpusError(f"item {item_id!r}: field 'captions' invalid: {exc}") from exc
    return CorpusItem(ImageRecord(item_id, pixels), ocr, captions)


def load_corpus(path, patch_size: int | None = None) -> list[CorpusItem]:
    """Read and validate a corpus file; errors name the line, field and item."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusError(f"{path}: empty corpus file")
    items: list[CorpusItem] = []
    seen: set[str] = set()
    shape = None
    header = None
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise CorpusError(f"{path}:{lineno}: record is not an object")
        if lineno == 1:
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise CorpusError(f"{path}:1: unsupported schema_version {rec.get('schema_version')!r}")
            header = rec
            continue
        try:
            item = _parse_item(rec, patch_size)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        if item.id in seen:
            raise CorpusError(f"{path}:{lineno}: item {item.id!r}: field 'id' duplicated")
        if shape is not None and item.image.pixels.shape != shape:
            raise CorpusError(f"{path}:{lineno}: item {item.id!r}: field 'pixels' shape "
                              f"{item.image.pixels.shape} differs from {shape}")
        shape = item.image.pixels.shape
        seen.add(item.id)
        items.append(item)
    if "n_items" in header and header["n_items"] != len(items):
        raise CorpusError(f"{path}:{len(lines)}: header promises {header['n_items']} items, "
                          f"file has {len(items)} (truncated?)")
    return items


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    items: list[CorpusItem]
    captions: list[CaptionRecord]

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def __len__(self) -> int:
        return len(self.items)


def make_batches(corpus: Sequence[CorpusItem], batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffled (image, one caption) batches for one epoch; tail batches below 2 are dropped."""
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2")
    rng = np.random.default_rng([seed, epoch])
    pick = [int(rng.integers(len(it.captions))) for it in corpus]
    order = rng.permutation(len(corpus))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            continue
        batches.append(Batch([corpus[i] for i in chunk], [corpus[i].captions[pick[i]] for i in chunk]))
    return batches
