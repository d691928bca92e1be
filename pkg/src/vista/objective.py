"""Dual contrastive objective and the training step.

Image-text and fusion-text terms are symmetric InfoNCE losses sharing one
trainable temperature ``sigma = exp(log_sigma)``; similarities are divided
by sigma.  The fusion term only covers batch items that carry OCR and is
dropped when fewer than two such items are present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .aggregation import image_tower
from .data import Batch, CorpusItem, make_batches
from .encoders import text_encode
from .model import Model
from .numerics import ContractError, Tensor

ALPHA_DEFAULT = 0.9
SIGMA_MIN, SIGMA_MAX = 0.01, 1.0


class TrainingError(RuntimeError):
    pass


@dataclass
class BatchEmbeddings:
    v: Tensor  # [N, D_e]
    t: Tensor  # [N, D_e]
    f: Tensor | None  # [M, D_e]
    fusion_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = self.v.shape[0]
        if self.t.shape != self.v.shape:
            raise nx.DimensionError(f"v {self.v.shape} and t {self.t.shape} differ")
        if (self.f is None) != (not self.fusion_index):
            raise ContractError("f must be given exactly when fusion_index is non-empty")
        if self.fusion_index:
            if self.f.shape != (len(self.fusion_index), self.v.shape[1]):
                raise nx.DimensionError(f"f {self.f.shape} does not match {len(self.fusion_index)} fusion rows")
            idx = self.fusion_index
            if idx[0] < 0 or idx[-1] >= n or any(a >= b for a, b in zip(idx, idx[1:])):
                raise ContractError(f"fusion_index {idx} must be strictly increasing within [0, {n})")


@dataclass
class LossParams:
    log_sigma: Tensor
    alpha: float = ALPHA_DEFAULT

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha={self.alpha} outside [0, 1]")

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma.item())


@dataclass
class LossTerms:
    total: Tensor
    itc: Tensor
    ftc: Tensor | None

    def as_floats(self) -> dict:
        return {"loss": self.total.item(), "itc": self.itc.item(),
                "ftc": None if self.ftc is None else self.ftc.item()}


def contrastive_pair_loss(X: Tensor, T: Tensor, sigma) -> Tensor:
    """Symmetric InfoNCE: mean of the X->T and T->X cross-entropies at temperature sigma.

    ``sigma`` is a positive float or a one-element tensor holding sigma.
    """
    if X.shape[0] == 0 or X.data.ndim != 2:
        raise ContractError("contrastive loss needs at least one pair")
    if X.shape != T.shape:
        raise nx.DimensionError(f"X {X.shape} and T {T.shape} differ")
    sims = nx.matmul(X, nx.transpose(T))
    if isinstance(sigma, Tensor):
        logits = nx.divide(sims, sigma)
    else:
        logits = nx.scale(sims, 1.0 / float(sigma))
    x2t = nx.mean_all(nx.diagonal(nx.log_softmax_rows(logits)))
    t2x = nx.mean_all(nx.diagonal(nx.log_softmax_rows(nx.transpose(logits))))
    return nx.scale(nx.add(x2t, t2x), -0.5)


def total_loss(batch: BatchEmbeddings, params: LossParams) -> LossTerms:
    sigma = nx.exp(params.log_sigma)
    itc = contrastive_pair_loss(batch.v, batch.t, sigma)
    if len(batch.fusion_index) < 2:
        return LossTerms(itc, itc, None)
    t_sub = nx.gather_rows(batch.t, batch.fusion_index)
    ftc = contrastive_pair_loss(batch.f, t_sub, sigma)
    total = nx.add(nx.scale(itc, params.alpha), nx.scale(ftc, 1.0 - params.alpha))
    return LossTerms(total, itc, ftc)


def embed_batch(model: Model, items: Sequence[CorpusItem], captions) -> BatchEmbeddings:
    vs, ts, fs, index = [], [], [], []
    for i, (item, cap) in enumerate(zip(items, captions)):
        out = image_tower(item.image, item.ocr, model)
        vs.append(out.v)
        if out.f is not None:
            fs.append(out.f)
            index.append(i)
        ts.append(text_encode(cap, model))
    f = nx.concat_rows(fs) if fs else None
    return BatchEmbeddings(nx.concat_rows(vs), nx.concat_rows(ts), f, index)


def batch_loss(model: Model, batch: Batch, alpha: float = ALPHA_DEFAULT) -> LossTerms:
    emb = embed_batch(model, batch.items, batch.captions)
    return total_loss(emb, LossParams(model.log_sigma, alpha))


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return {"adam_m": dict(self.m), "adam_v": dict(self.v)}

    def load_state(self, moments: dict[str, dict[str, np.ndarray]], t: int) -> None:
        self.m = {k: v.copy() for k, v in moments.get("adam_m", {}).items()}
        self.v = {k: v.copy() for k, v in moments.get("adam_v", {}).items()}
        self.t = t


def clamp_sigma(model: Model) -> None:
    ls = model.log_sigma.data
    np.clip(ls, math.log(SIGMA_MIN), math.log(SIGMA_MAX), out=ls)


def train_step(model: Model, batch: Batch, optimizer: Adam, alpha: float = ALPHA_DEFAULT) -> LossTerms:
    """Forward, backward, one Adam update, sigma clamp.  Updates ``model`` in place."""
    if len(batch) < 2:
        raise ContractError("a training batch needs at least two pairs")
    model.zero_grad()
    terms = batch_loss(model, batch, alpha)
    if not math.isfinite(terms.total.item()):
        raise TrainingError(f"non-finite loss {terms.total.item()} on batch {batch.ids}")
    nx.backward(terms.total)
    optimizer.step(model.params)
    clamp_sigma(model)
    return terms


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    itc: float
    ftc: float | None
    sigma: float
    alpha: float
    batch_ids: list[str]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def fit(model: Model, corpus: Sequence[CorpusItem], steps: int, batch_size: int, lr: float = 1e-3,
        alpha: float = ALPHA_DEFAULT, seed: int = 0, optimizer: Adam | None = None, start_step: int = 0,
        on_step: Callable[[StepRecord], None] | None = None) -> Adam:
    """Train for ``steps`` steps beginning at global step ``start_step``.

    The batch for global step ``s`` depends only on ``(seed, s)``, so a run
    resumed from a checkpoint sees the same batches as an uninterrupted one.
    """
    if optimizer is None:
        optimizer = Adam(lr)
    batch_size = min(batch_size, len(corpus))
    per_epoch = len(make_batches(corpus, batch_size, seed, 0))
    if per_epoch == 0:
        raise ContractError("corpus too small to form a batch of two")
    cached_epoch, batches = None, []
    for s in range(start_step, start_step + steps):
        epoch, j = divmod(s, per_epoch)
        if epoch != cached_epoch:
            batches, cached_epoch = make_batches(corpus, batch_size, seed, epoch), epoch
        batch = batches[j]
        terms = train_step(model, batch, optimizer, alpha)
        if on_step is not None:
            f = terms.as_floats()
            on_step(StepRecord(s, epoch, f["loss"], f["itc"], f["ftc"], math.exp(model.log_sigma.item()),
                               alpha, batch.ids))
    return optimizer
