"""Train the fusion-token model on 8 items until retrieval is perfect."""

from vista.data import PRESETS, build_vocab, generate_corpus
from vista.encoders import ModelConfig
from vista.model import init_model
from vista.objective import fit
from vista.retrieval import evaluate

corpus = generate_corpus(PRESETS["overfit"])
model = init_model(ModelConfig(width=32, heads=4), build_vocab(corpus), seed=0)


def show(rec):
    if rec.step % 100 == 0:
        ftc = "-" if rec.ftc is None else f"{rec.ftc:.3f}"
        print(f"step {rec.step:4d}  loss {rec.loss:.3f}  itc {rec.itc:.3f}  ftc {ftc}  sigma {rec.sigma:.4f}")


fit(model, corpus, 500, 8, lr=1e-3, on_step=show)
print(evaluate(model, corpus).to_table())
