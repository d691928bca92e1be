"""Offline gallery embedding, ranking and Recall@K in both directions.

Ties in similarity are broken by ascending gallery index, so every ranking
is deterministic.  Embedding-set files are a 24-byte header
(``b"VEMB"``, u8 kind code, 3 pad bytes, u64 n, u64 D_e) followed by n*D_e
little-endian float64 values; ids sit in a sidecar ``<path>.ids`` file, one
per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .aggregation import image_tower
from .data import CorpusItem
from .encoders import text_encode
from .model import Model
from .numerics import ContractError, DimensionError

KINDS = ("image", "fusion", "text")
MODES = ("scene_text_aware", "scene_text_free")
RECALL_KS = (1, 5, 10)
_EMB_MAGIC = b"VEMB"


@dataclass
class EmbeddingSet:
    ids: list[str]
    vectors: np.ndarray  # [n, D_e]
    kind: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.kind not in KINDS:
            raise ContractError(f"unknown embedding kind {self.kind!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DimensionError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("embedding ids must be unique")
        if len(self.ids) and not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-8):
            raise ContractError("embedding rows must be unit norm")

    def __len__(self) -> int:
        return len(self.ids)


def similarity_matrix(Q: EmbeddingSet, G: EmbeddingSet) -> np.ndarray:
    if Q.vectors.shape[1] != G.vectors.shape[1]:
        raise DimensionError(f"embedding widths {Q.vectors.shape[1]} and {G.vectors.shape[1]} differ")
    return Q.vectors @ G.vectors.T


def best_ranks(S: np.ndarray, relevant: Sequence[Sequence[int]]) -> np.ndarray:
    """1-based rank of the highest-ranked relevant gallery item, per query."""
    S = np.asarray(S)
    if len(relevant) != S.shape[0]:
        raise DimensionError(f"{len(relevant)} relevance sets for {S.shape[0]} queries")
    n_gal = S.shape[1]
    cols = np.arange(n_gal)
    ranks = np.empty(S.shape[0], dtype=np.int64)
    for q, rel in enumerate(relevant):
        if len(rel) == 0:
            raise ContractError(f"query {q} has no relevant gallery item")
        row = S[q]
        best = n_gal + 1
        for g in rel:
            ahead = np.count_nonzero(row > row[g]) + np.count_nonzero((row == row[g]) & (cols < g))
            best = min(best, ahead + 1)
        ranks[q] = best
    return ranks


def recall_at_k(S: np.ndarray, relevant: Sequence[Sequence[int]], k: int) -> float:
    """Fraction of queries with a relevant item among their top ``k``."""
    return float(np.mean(best_ranks(S, relevant) <= k))


def oracle_recall_at_k(S: np.ndarray, relevant: Sequence[Sequence[int]], k: int) -> float:
    """Reference: fully sort each row and look for a hit in the first k."""
    hits = 0
    for q in range(len(S)):
        if not relevant[q]:
            raise ContractError(f"query {q} has no relevant gallery item")
        order = sorted(range(len(S[q])), key=lambda g: (-float(S[q][g]), g))
        if set(order[:k]) & set(relevant[q]):
            hits += 1
    return hits / len(S)


@dataclass
class RetrievalReport:
    i2t: dict[int, float]
    t2i: dict[int, float]
    i2t_median_rank: float
    t2i_median_rank: float
    n_images: int
    n_texts: int

    @classmethod
    def from_similarity(cls, S_it: np.ndarray, caption_owner: Sequence[int]) -> RetrievalReport:
        """``S_it[i, c]`` scores image i against caption c; ``caption_owner[c]`` is c's image."""
        n_img = S_it.shape[0]
        gt = ground_truth(caption_owner, n_img)
        r_i2t = best_ranks(S_it, gt["i2t"])
        r_t2i = best_ranks(S_it.T, gt["t2i"])
        return cls(
            {k: float(np.mean(r_i2t <= k)) for k in RECALL_KS},
            {k: float(np.mean(r_t2i <= k)) for k in RECALL_KS},
            float(np.median(r_i2t)), float(np.median(r_t2i)), n_img, len(caption_owner),
        )

    def rows(self) -> list[dict]:
        return [
            {"direction": "image_to_text", **{f"R@{k}": v for k, v in self.i2t.items()},
             "median_rank": self.i2t_median_rank, "queries": self.n_images},
            {"direction": "text_to_image", **{f"R@{k}": v for k, v in self.t2i.items()},
             "median_rank": self.t2i_median_rank, "queries": self.n_texts},
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows())

    def to_table(self) -> str:
        head = f"{'direction':<15}" + "".join(f"{'R@' + str(k):>8}" for k in RECALL_KS) + f"{'medR':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows():
            lines.append(f"{r['direction']:<15}" + "".join(f"{100 * r[f'R@{k}']:>8.1f}" for k in RECALL_KS)
                         + f"{r['median_rank']:>8.1f}")
        return "\n".join(lines) + "\n"


@dataclass
class CorpusEmbeddings:
    gallery: EmbeddingSet  # per image: f when used, else v
    images: EmbeddingSet  # v for every image
    fusion: EmbeddingSet  # f for images that produced one
    texts: EmbeddingSet
    caption_owner: list[int]


def embed_corpus(model: Model, corpus: Sequence[CorpusItem], mode: str = "scene_text_aware") -> CorpusEmbeddings:
    """Embed every image and caption once, without gradients."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; valid: {', '.join(MODES)}")
    if not corpus:
        raise ContractError("cannot evaluate an empty corpus")
    ids, gal, vs, fus_ids, fus = [], [], [], [], []
    text_ids, texts, owner = [], [], []
    with nx.no_grad():
        for i, item in enumerate(corpus):
            ocr = item.ocr if mode == "scene_text_aware" else []
            out = image_tower(item.image, ocr, model)
            v = out.v.data[0]
            ids.append(item.id)
            vs.append(v)
            if out.f is not None:
                fus_ids.append(item.id)
                fus.append(out.f.data[0])
                gal.append(out.f.data[0])
            else:
                gal.append(v)
            for c, cap in enumerate(item.captions):
                text_ids.append(f"{item.id}#{c}")
                texts.append(text_encode(cap, model).data[0])
                owner.append(i)
    De = model.config.embed_dim
    return CorpusEmbeddings(
        EmbeddingSet(ids, np.array(gal), "fusion" if fus else "image"),
        EmbeddingSet(ids, np.array(vs), "image"),
        EmbeddingSet(fus_ids, np.array(fus).reshape(len(fus), De), "fusion"),
        EmbeddingSet(text_ids, np.array(texts), "text"),
        owner,
    )


def evaluate(model: Model, corpus: Sequence[CorpusItem], mode: str = "scene_text_aware") -> RetrievalReport:
    emb = embed_corpus(model, corpus, mode)
    return RetrievalReport.from_similarity(similarity_matrix(emb.gallery, emb.texts), emb.caption_owner)


def oracle_report(emb: CorpusEmbeddings) -> dict[str, dict[int, float]]:
    """Recall table recomputed by exhaustive sorting, for cross-checking :func:`evaluate`."""
    S = similarity_matrix(emb.gallery, emb.texts)
    gt = ground_truth(emb.caption_owner, S.shape[0])
    return {
        "i2t": {k: oracle_recall_at_k(S, gt["i2t"], k) for k in RECALL_KS},
        "t2i": {k: oracle_recall_at_k(S.T, gt["t2i"], k) for k in RECALL_KS},
    }


def rank_query(model: Model, text: str, gallery: EmbeddingSet) -> list[tuple[str, float]]:
    """Score one new text query against a precomputed gallery, best first."""
    with nx.no_grad():
        t = text_encode(text, model).data
    scores = (t @ gallery.vectors.T)[0]
    order = sorted(range(len(scores)), key=lambda g: (-scores[g], g))
    return [(gallery.ids[g], float(scores[g])) for g in order]


# ---------------------------------------------------------------------------
# embedding-set files
# ---------------------------------------------------------------------------

def write_embeddings(path, emb: EmbeddingSet) -> None:
    path = Path(path)
    n, De = emb.vectors.shape if len(emb) else (0, 0)
    header = _EMB_MAGIC + struct.pack("<B3xQQ", KINDS.index(emb.kind), n, De)
    path.write_bytes(header + np.ascontiguousarray(emb.vectors, dtype="<f8").tobytes())
    Path(str(path) + ".ids").write_text("".join(i + "\n" for i in emb.ids), encoding="utf-8")


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise ContractError(f"{path}: not an embedding file")
    code, n, De = struct.unpack_from("<B3xQQ", raw, 4)
    vectors = np.frombuffer(raw, dtype="<f8", count=n * De, offset=24).reshape(n, De).astype(np.float64)
    ids = Path(str(path) + ".ids").read_text(encoding="utf-8").splitlines()
    return EmbeddingSet(ids, vectors, KINDS[code])


def ground_truth(caption_owner: Sequence[int], n_images: int) -> Mapping[str, list[list[int]]]:
    i2t = [[] for _ in range(n_images)]
    for c, o in enumerate(caption_owner):
        i2t[o].append(c)
    return {"i2t": i2t, "t2i": [[o] for o in caption_owner]}
