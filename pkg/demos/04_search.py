"""Embed a gallery once, then answer free-text queries against it.

Trains briefly on the discrimination corpus so the OCR words matter.
"""

from vista.data import PRESETS, build_vocab, generate_corpus
from vista.encoders import FORWARD_CALLS, ModelConfig
from vista.model import init_model
from vista.objective import fit
from vista.retrieval import embed_corpus, rank_query

corpus = generate_corpus(PRESETS["discrimination"])
model = init_model(ModelConfig(width=32, heads=4), build_vocab(corpus), seed=0)
fit(model, corpus, 300, 16)

gallery = embed_corpus(model, corpus).gallery
for item in corpus[:4]:
    FORWARD_CALLS.clear()
    query = item.captions[0].text
    top = rank_query(model, query, gallery)[:3]
    print(f"{query!r} (truth {item.id}) -> {[i for i, _ in top]}  tower calls {dict(FORWARD_CALLS)}")
