from dataclasses import replace

import numpy as np
import pytest

from vista.data import PRESETS, build_vocab, generate_corpus
from vista.encoders import ModelConfig
from vista.model import init_model

TINY = dict(image_height=4, image_width=4, patch_size=2, width=8, heads=2, vision_layers=2, scene_layers=2,
            text_layers=2, fusion_layers=1, embed_dim=8, max_ocr=3, max_text=8)


def tiny_corpus(n=3, seed=0, ocr_probability=1.0):
    spec = replace(PRESETS["mixed"], n_items=n, height=4, width=4, ocr_probability=ocr_probability,
                   ocr_min=2, ocr_max=2, vocab_size=8, seed=seed)
    return generate_corpus(spec)


def tiny_model(corpus, seed=0, strategy="fusion_token", **overrides):
    return init_model(ModelConfig(**{**TINY, **overrides}), build_vocab(corpus), seed, strategy)


@pytest.fixture
def corpus3():
    return tiny_corpus()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
