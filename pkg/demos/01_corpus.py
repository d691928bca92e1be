"""Generate the synthetic corpora and look at what an item carries."""

from dataclasses import replace

from vista.data import PRESETS, generate_corpus

corpus = generate_corpus(replace(PRESETS["mixed"], n_items=6))
for item in corpus:
    words = ", ".join(f"{o.word}@{tuple(round(c, 2) for c in o.bbox)}" for o in item.ocr) or "(no OCR)"
    print(f"{item.id}  {item.captions[0].text!r}")
    print(f"          ocr: {words}")

# the discrimination preset pairs pixel-identical images; only the OCR words tell them apart
pairs = generate_corpus(PRESETS["discrimination"])
a, b = pairs[0], pairs[1]
print("\nsame pixels:", a.image.pixels.tobytes() == b.image.pixels.tobytes())
print("ocr", [o.word for o in a.ocr], "vs", [o.word for o in b.ocr])
