"""Scene text reaches the vision tokens only through the fusion token.

Change one OCR box and watch which states move.
"""

import numpy as np

from vista.aggregation import visual_tower_forward
from vista.data import PRESETS, build_vocab, generate_corpus
from vista.encoders import ModelConfig, OcrToken
from vista.model import init_model

corpus = [it for it in generate_corpus(PRESETS["mixed"]) if it.ocr]
item = corpus[0]
tok = item.ocr[0]
moved = [OcrToken(tok.word, (0.0, 0.0, 1.0, 1.0))] + item.ocr[1:]

for lf in (1, 2):
    model = init_model(ModelConfig(fusion_layers=lf), build_vocab(corpus), seed=0)
    _, a = visual_tower_forward(item.image, item.ocr, model, return_states=True)
    _, b = visual_tower_forward(item.image, moved, model, return_states=True)
    for k in range(1, lf + 1):
        dv = np.abs(a[k].V.data - b[k].V.data).max()
        df = np.abs(a[k].F.data - b[k].F.data).max()
        print(f"L_f={lf}  after aggregation layer {k}:  max|dV| {dv:.3e}   max|dF| {df:.3e}")
