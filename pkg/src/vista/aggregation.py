"""Fusion-token aggregation of the vision and scene-text towers.

The two towers never attend to each other's tokens.  In each aggregation
layer both branches see one extra token, the shared [FUS] state, appended
last; the next fusion state is the sum of the two branch outputs at that
position.  Anything scene text contributes to the vision tokens therefore
has to travel through [FUS] and needs at least two aggregation layers to
arrive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import numerics as nx
from .encoders import (FORWARD_CALLS, ImageRecord, OcrToken, embed_image, embed_scene_text,
                       project, scene_text_backbone, vision_backbone)
from .layers import TransformerLayerParams, transformer_layer
from .model import Model
from .numerics import ContractError, Tensor


@dataclass
class FusionState:
    V: Tensor  # [N_p+1, d]
    S: Tensor  # [N_o, d]
    F: Tensor  # [1, d]

    def __post_init__(self):
        d = self.V.shape[1]
        if self.S.shape[1] != d or self.F.shape != (1, d):
            raise nx.DimensionError(f"fusion state widths disagree: V {self.V.shape}, "
                                    f"S {self.S.shape}, F {self.F.shape}")


@dataclass
class TowerOutput:
    v: Tensor  # [1, D_e], unit norm
    f: Tensor | None  # [1, D_e], unit norm, present iff has_ocr
    has_ocr: bool


def init_fusion_token(f_init: Tensor, f_type: Tensor, f_pos: Tensor) -> Tensor:
    return nx.add(nx.add(f_init, f_type), f_pos)


def _branch(seq: Tensor, F: Tensor, params: TransformerLayerParams) -> tuple[Tensor, Tensor]:
    n = seq.shape[0]
    out = transformer_layer(nx.concat_rows([seq, F]), params)
    return nx.slice_rows(out, 0, n), nx.slice_rows(out, n, n + 1)


def aggregation_layer(state: FusionState, v_params: TransformerLayerParams,
                      s_params: TransformerLayerParams) -> FusionState:
    if state.S.shape[0] < 1:
        raise ContractError("aggregation needs at least one scene-text token")
    # both branches read the same incoming F
    V_next, V_fus = _branch(state.V, state.F, v_params)
    S_next, S_fus = _branch(state.S, state.F, s_params)
    return FusionState(V_next, S_next, nx.add(V_fus, S_fus))


def vision_encoder(image: ImageRecord, model: Model) -> Tensor:
    """All vision layers, no scene text: the final [N_p+1, d] states."""
    FORWARD_CALLS["vision"] += 1
    x = embed_image(image, model)
    for i in range(model.config.vision_layers):
        x = transformer_layer(x, model.layer("vision", i))
    return x


def image_embedding(states: Tensor, model: Model) -> Tensor:
    p = model.params
    return project(nx.slice_rows(states, 0, 1), p["head.img_w"], p["head.img_b"])


def visual_tower_forward(image: ImageRecord, ocr: Sequence[OcrToken], model: Model,
                         return_states: bool = False):
    """Image tower output; degenerates to the plain vision encoder when ``ocr`` is empty.

    With ``return_states`` a list of the :class:`FusionState` entering and
    leaving each aggregation layer is returned as a second value (empty on
    the pure-vision path).
    """
    cfg, p = model.config, model.params
    if not ocr:
        out = TowerOutput(image_embedding(vision_encoder(image, model), model), None, False)
        return (out, []) if return_states else out

    FORWARD_CALLS["vision"] += 1
    FORWARD_CALLS["scene_text"] += 1
    V = vision_backbone(embed_image(image, model), model)
    S = scene_text_backbone(embed_scene_text(ocr, model), model)
    state = FusionState(V, S, init_fusion_token(p["fusion.init"], p["fusion.type"], p["fusion.pos"]))
    states = [state]
    v_start = cfg.vision_layers - cfg.fusion_layers
    s_start = cfg.scene_layers - cfg.fusion_layers
    for i in range(cfg.fusion_layers):
        state = aggregation_layer(state, model.layer("vision", v_start + i), model.layer("scene", s_start + i))
        states.append(state)
    out = TowerOutput(image_embedding(state.V, model), project(state.F, p["head.fus_w"], p["head.fus_b"]), True)
    return (out, states) if return_states else out


def late_fusion_forward(image: ImageRecord, ocr: Sequence[OcrToken], model: Model) -> TowerOutput:
    """Baseline: towers run independently, f from [IMG] plus mean-pooled scene text."""
    if not ocr:
        raise ContractError("late fusion needs OCR tokens")
    p = model.params
    V = vision_encoder(image, model)
    FORWARD_CALLS["scene_text"] += 1
    S = scene_text_backbone(embed_scene_text(ocr, model), model, model.config.scene_layers)
    img = nx.slice_rows(V, 0, 1)
    fused = nx.add(img, nx.mean_rows(S))
    return TowerOutput(image_embedding(V, model), project(fused, p["head.fus_w"], p["head.fus_b"]), True)


def image_tower(image: ImageRecord, ocr: Sequence[OcrToken], model: Model) -> TowerOutput:
    """Dispatch on the model's fusion strategy."""
    if model.strategy == "vision_only" or not ocr:
        return TowerOutput(image_embedding(vision_encoder(image, model), model), None, False)
    if model.strategy == "late_fusion":
        return late_fusion_forward(image, ocr, model)
    return visual_tower_forward(image, ocr, model)
