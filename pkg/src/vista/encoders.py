"""Input pipelines of the three towers.

Vision: non-overlapping patches, linear projection, an [IMG] token at
position 0 and learned positions.  Scene text: word + modality-type +
position embeddings plus a linear projection of the normalized box.  Text
query: lowercase word tokens behind a [CLS] token.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .layers import linear, transformer_layer
from .numerics import ContractError, Tensor

if TYPE_CHECKING:
    from .model import Model

# Tower invocations, keyed by tower name.  Tests and the retrieval harness
# read this to prove which towers a code path touched.
FORWARD_CALLS: Counter = Counter()

PAD, UNK, CLS, IMG, FUS = "[PAD]", "[UNK]", "[CLS]", "[IMG]", "[FUS]"
RESERVED = (PAD, UNK, CLS, IMG, FUS)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class OcrToken:
    word: str
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.bbox) != 4:
            raise ContractError(f"bbox needs 4 coordinates, got {self.bbox!r}")
        x1, y1, x2, y2 = self.bbox
        if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
            raise ContractError(f"bbox {list(self.bbox)} violates 0 <= x1 <= x2 <= 1, 0 <= y1 <= y2 <= 1")


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # [H, W, C], values in [0, 1]


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ContractError(f"empty caption for image {self.image_id!r}")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Word to index map; the five reserved tokens occupy indices 0-4."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = list(RESERVED)
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for w in words:
            if w not in self.index:
                self.index[w] = len(self.words)
                self.words.append(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocab:
        found = set()
        for t in texts:
            found.update(tokenize(t))
        return cls(sorted(found - set(RESERVED)))

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def lookup(self, word: str) -> int:
        return self.index.get(word.lower(), self.index[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.lookup(w) for w in tokenize(text)]


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 8
    image_width: int = 8
    channels: int = 3
    patch_size: int = 4
    width: int = 32
    heads: int = 4
    vision_layers: int = 2
    scene_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 1
    embed_dim: int = 16
    max_ocr: int = 8
    max_text: int = 16
    fusion_tokens: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_height", "image_width", "channels", "patch_size", "width", "heads",
                     "vision_layers", "scene_layers", "text_layers", "embed_dim", "max_ocr",
                     "max_text", "fusion_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion_layers < 0:
            raise ConfigError(f"fusion_layers must be >= 0, got {self.fusion_layers}")
        if self.fusion_layers > min(self.vision_layers, self.scene_layers):
            raise ConfigError(f"fusion_layers={self.fusion_layers} exceeds min(vision_layers, scene_layers)")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width < 2:
            raise ConfigError("width must be >= 2 for layer norm")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible "
                              f"by patch size {self.patch_size}")
        if self.fusion_tokens != 1:
            raise ConfigError("only a single fusion token is supported")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


# ---------------------------------------------------------------------------
# vision
# ---------------------------------------------------------------------------

def extract_patches(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W, C] -> [N_p, P*P*C], patches in row-major grid order."""
    H, W, C = pixels.shape
    P = patch_size
    if H % P or W % P:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {P}")
    grid = pixels.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4)
    return grid.reshape((H // P) * (W // P), P * P * C)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    P = patch_size
    C = patches.shape[1] // (P * P)
    grid = patches.reshape(height // P, width // P, P, P, C).transpose(0, 2, 1, 3, 4)
    return grid.reshape(height, width, C)


def patchify(pixels: np.ndarray, patch_size: int, patch_w: Tensor, patch_b: Tensor,
             pos_emb: Tensor, img_token: Tensor) -> Tensor:
    """[IMG] followed by projected patches, plus positional embeddings: [N_p+1, d]."""
    patches = extract_patches(np.asarray(pixels, dtype=np.float64), patch_size)
    if pos_emb.shape[0] != patches.shape[0] + 1:
        raise nx.DimensionError(f"positional table {pos_emb.shape} does not fit "
                                f"{patches.shape[0]} patches plus [IMG]")
    tokens = linear(nx.tensor(patches), patch_w, patch_b)
    return nx.add(nx.concat_rows([img_token, tokens]), pos_emb)


def embed_image(image: ImageRecord, model: Model) -> Tensor:
    p = model.params
    return patchify(image.pixels, model.config.patch_size, p["vision.patch_w"], p["vision.patch_b"],
                    p["vision.pos"], p["vision.img_token"])


def vision_backbone(patch_seq: Tensor, model: Model) -> Tensor:
    """The plain vision layers that precede the aggregation stage."""
    cfg = model.config
    x = patch_seq
    for i in range(cfg.vision_layers - cfg.fusion_layers):
        x = transformer_layer(x, model.layer("vision", i))
    return x


# ---------------------------------------------------------------------------
# scene text
# ---------------------------------------------------------------------------

def scene_text_embed(ocr: Sequence[OcrToken], vocab: Vocab, word_emb: Tensor, s_type: Tensor,
                     s_pos: Tensor, bbox_w: Tensor, bbox_b: Tensor, max_ocr: int) -> Tensor:
    """Word + type + position embeddings plus the projected box, one row per OCR token."""
    if not ocr:
        raise ContractError("no OCR tokens: use the pure-vision path")
    if len(ocr) > max_ocr:
        warnings.warn(f"{len(ocr)} OCR tokens truncated to {max_ocr}", stacklevel=2)
        ocr = ocr[:max_ocr]
    n = len(ocr)
    words = nx.gather_rows(word_emb, [vocab.lookup(o.word) for o in ocr])
    init = nx.add(nx.add_row(words, s_type), nx.slice_rows(s_pos, 0, n))
    boxes = nx.tensor(np.array([o.bbox for o in ocr], dtype=np.float64))
    return nx.add(init, linear(boxes, bbox_w, bbox_b))


def embed_scene_text(ocr: Sequence[OcrToken], model: Model) -> Tensor:
    p = model.params
    return scene_text_embed(ocr, model.vocab, p["scene.word_emb"], p["scene.type"], p["scene.pos"],
                            p["scene.bbox_w"], p["scene.bbox_b"], model.config.max_ocr)


def scene_text_backbone(seq: Tensor, model: Model, n_layers: int | None = None) -> Tensor:
    cfg = model.config
    if n_layers is None:
        n_layers = cfg.scene_layers - cfg.fusion_layers
    for i in range(n_layers):
        seq = transformer_layer(seq, model.layer("scene", i))
    return seq


# ---------------------------------------------------------------------------
# text query
# ---------------------------------------------------------------------------

def project(row: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Linear map into the shared space followed by L2 normalization."""
    return nx.l2_normalize_rows(linear(row, w, b))


def text_token_ids(text: str, vocab: Vocab, max_text: int) -> list[int]:
    ids = vocab.encode(text)[:max_text]
    if not ids:
        raise ContractError(f"caption {text!r} has no tokens")
    return [vocab.index[CLS]] + ids


def text_encode(caption: CaptionRecord | str, model: Model) -> Tensor:
    """Unit-norm [1, D_e] embedding of the caption's final [CLS] state."""
    text = caption.text if isinstance(caption, CaptionRecord) else caption
    FORWARD_CALLS["text"] += 1
    cfg, p = model.config, model.params
    ids = text_token_ids(text, model.vocab, cfg.max_text)
    x = nx.add(nx.gather_rows(p["text.word_emb"], ids), nx.slice_rows(p["text.pos"], 0, len(ids)))
    for i in range(cfg.text_layers):
        x = transformer_layer(x, model.layer("text", i))
    return project(nx.slice_rows(x, 0, 1), p["head.text_w"], p["head.text_b"])
