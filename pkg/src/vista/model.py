"""Parameter set of the full model, initialization and checkpoint files.

Checkpoint layout (little-endian)::

    b"VSTCKPT1"
    u64 meta_len, meta_len bytes of UTF-8 JSON (config, vocab, strategy, extras)
    u32 n_sections
    per section: u16 name_len, name, u8 ndim, ndim x u64 dims, float64 data (row-major)

Parameter sections are named ``param/<name>``; optimizer moments, when
present, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .encoders import ModelConfig, Vocab
from .layers import TransformerLayerParams
from .numerics import Tensor

MAGIC = b"VSTCKPT1"
STRATEGIES = ("fusion_token", "late_fusion", "vision_only")
SIGMA_INIT = 0.07
EMBED_STD = 0.5


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocab
    params: dict[str, Tensor]
    strategy: str = "fusion_token"
    _layers: dict = field(default_factory=dict, repr=False)

    def layer(self, tower: str, index: int) -> TransformerLayerParams:
        key = (tower, index)
        if key not in self._layers:
            self._layers[key] = TransformerLayerParams.from_named(self.params, f"{tower}.layers.{index}.")
        return self._layers[key]

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def log_sigma(self) -> Tensor:
        return self.params["loss.log_sigma"]


def init_params(config: ModelConfig, vocab_size: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, De = config.width, config.embed_dim
    params: dict[str, Tensor] = {}

    def emb(name, shape):
        params[name] = nx.parameter(rng.normal(0.0, EMBED_STD, shape), name)

    def lin(name, n_in, n_out):
        params[name + "_w"] = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), name + "_w")
        params[name + "_b"] = nx.parameter(np.zeros(n_out), name + "_b")

    def tower(name, n):
        for i in range(n):
            prefix = f"{name}.layers.{i}."
            for key, t in TransformerLayerParams.init(d, config.heads, rng, prefix).named().items():
                params[prefix + key] = t

    lin("vision.patch", config.patch_dim, d)
    emb("vision.pos", (config.num_patches + 1, d))
    emb("vision.img_token", (1, d))
    tower("vision", config.vision_layers)

    emb("scene.word_emb", (vocab_size, d))
    emb("scene.type", (d,))
    emb("scene.pos", (config.max_ocr, d))
    lin("scene.bbox", 4, d)
    tower("scene", config.scene_layers)

    emb("fusion.init", (1, d))
    emb("fusion.type", (1, d))
    emb("fusion.pos", (1, d))

    emb("text.word_emb", (vocab_size, d))
    emb("text.pos", (config.max_text + 1, d))
    tower("text", config.text_layers)

    lin("head.img", d, De)
    lin("head.fus", d, De)
    lin("head.text", d, De)
    params["loss.log_sigma"] = nx.parameter(np.array([math.log(SIGMA_INIT)]), "loss.log_sigma")
    return params


def init_model(config: ModelConfig, vocab: Vocab, seed: int = 0, strategy: str = "fusion_token") -> Model:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    return Model(config, vocab, init_params(config, len(vocab), seed), strategy)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_section(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(model: Model, moments: dict[str, dict[str, np.ndarray]] | None = None,
                     extra: dict | None = None) -> bytes:
    meta = {
        "config": asdict(model.config),
        "vocab": model.vocab.words[5:],
        "strategy": model.strategy,
        "extra": extra or {},
    }
    sections = [(f"param/{k}", t.data) for k, t in model.params.items()]
    for kind, table in (moments or {}).items():
        sections += [(f"{kind}/{k}", v) for k, v in table.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(sections)))
    for name, arr in sections:
        _write_section(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(path, model: Model, moments=None, extra=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, moments, extra))


@dataclass
class Checkpoint:
    model: Model
    moments: dict[str, dict[str, np.ndarray]]
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    view = memoryview(raw)
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (meta_len,) = take("<Q")
        meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
        pos += meta_len
        (count,) = take("<I")
        params, moments = {}, {}
        for _ in range(count):
            (nlen,) = take("<H")
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}Q")
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
            kind, key = name.split("/", 1)
            if kind == "param":
                params[key] = nx.parameter(arr, key)
            else:
                moments.setdefault(kind, {})[key] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    config = ModelConfig(**meta["config"])
    model = Model(config, Vocab(meta["vocab"]), params, meta["strategy"])
    return Checkpoint(model, moments, meta["extra"])
