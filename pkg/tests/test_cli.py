import json

import numpy as np
import pytest
import yaml

from vista import cli
from vista.data import load_corpus
from vista.model import load_checkpoint
from vista.retrieval import evaluate

TINY_MODEL = {"width": 8, "heads": 2, "embed_dim": 8, "patch_size": 2, "vision_layers": 2, "scene_layers": 2,
              "text_layers": 1}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    assert cli.main(["gen", "--preset", "overfit", "--set", "height=4", "--set", "width=4",
                     "--out", "corpus.jsonl"]) == 0
    cfg = {"corpus": "corpus.jsonl", "output_dir": "run", "steps": 6, "batch_size": 4, "model": TINY_MODEL}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(cfg))
    return tmp_path


def metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_gen_discrimination_preset(tmp_path):
    assert cli.main(["gen", "--preset", "discrimination", "--out", str(tmp_path / "d.jsonl")]) == 0
    corpus = load_corpus(tmp_path / "d.jsonl")
    for a, b in zip(corpus[::2], corpus[1::2]):
        assert np.array_equal(a.image.pixels, b.image.pixels) and a.ocr != b.ocr


def test_gen_invalid_spec_writes_nothing(tmp_path, capsys):
    (tmp_path / "spec.yaml").write_text("n_items: 0\n")
    code = cli.main(["gen", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "c.jsonl")])
    assert code == cli.EXIT_VALIDATION and not (tmp_path / "c.jsonl").exists()
    assert "n_items" in capsys.readouterr().err


def test_train_is_deterministic_and_logs_components(workspace):
    assert cli.main(["train", "--config", "run.yaml"]) == 0
    assert cli.main(["train", "--config", "run.yaml", "--out", "again"]) == 0
    for name in ("final.ckpt", "best.ckpt", "metrics.jsonl"):
        assert (workspace / "run" / name).read_bytes() == (workspace / "again" / name).read_bytes()
    rows = metrics(workspace / "run" / "metrics.jsonl")
    assert [r["step"] for r in rows] == list(range(6))
    assert {"loss", "itc", "ftc", "sigma", "alpha", "batch_ids"} <= set(rows[0])
    fused = [r for r in rows if r["ftc"] is not None]
    assert fused
    for r in fused:
        assert abs(r["loss"] - (r["alpha"] * r["itc"] + (1 - r["alpha"]) * r["ftc"])) < 1e-12
    run = json.loads((workspace / "run" / "run.json").read_text())
    extra = load_checkpoint(workspace / "run" / "final.ckpt").extra
    assert extra["config_hash"] == run["config_hash"] and extra["corpus_hash"] == run["corpus_hash"]
    assert yaml.safe_load((workspace / "run" / "config.yaml").read_text())["steps"] == 6


def test_resume_matches_uninterrupted(workspace):
    assert cli.main(["train", "--config", "run.yaml"]) == 0
    assert cli.main(["train", "--config", "run.yaml", "--set", "steps=3", "--out", "half"]) == 0
    assert cli.main(["train", "--config", "run.yaml", "--out", "half", "--resume", "half/final.ckpt"]) == 0
    assert metrics(workspace / "half" / "metrics.jsonl") == metrics(workspace / "run" / "metrics.jsonl")
    assert (workspace / "half" / "final.ckpt").read_bytes() == (workspace / "run" / "final.ckpt").read_bytes()


def test_flag_overrides_and_output_root(workspace, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(workspace / "root"))
    assert cli.main(["train", "--config", "run.yaml", "--set", "steps=1", "--set", "model.text_layers=2"]) == 0
    cfg = yaml.safe_load((workspace / "root" / "run" / "config.yaml").read_text())
    assert cfg["steps"] == 1 and cfg["model"]["text_layers"] == 2
    assert load_checkpoint(workspace / "root" / "run" / "final.ckpt").model.config.text_layers == 2


def test_eval_scene_text_free_and_report(workspace):
    assert cli.main(["train", "--config", "run.yaml"]) == 0
    assert cli.main(["eval", "--checkpoint", "run/final.ckpt", "--corpus", "corpus.jsonl",
                     "--mode", "scene_text_free", "--out", "ev"]) == 0
    meta = json.loads((workspace / "ev" / "eval.json").read_text())
    assert meta["forward_calls"].get("scene_text", 0) == 0 and meta["forward_calls"]["vision"] == 8
    for row in metrics(workspace / "ev" / "report.jsonl"):
        assert row["R@1"] <= row["R@5"] <= row["R@10"]


def test_embed_writes_three_sets(workspace):
    assert cli.main(["train", "--config", "run.yaml", "--set", "steps=1"]) == 0
    assert cli.main(["embed", "--checkpoint", "run/final.ckpt", "--corpus", "corpus.jsonl", "--out", "emb"]) == 0
    assert sorted(p.name for p in (workspace / "emb").glob("*.emb")) == ["fusion.emb", "images.emb", "texts.emb"]


def test_ablate_table(workspace):
    assert cli.main(["ablate", "--config", "run.yaml", "--set", "steps=2", "--out", "abl"]) == 0
    rows = metrics(workspace / "abl" / "ablation.jsonl")
    assert {r["strategy"] for r in rows} == {"fusion_token", "late_fusion", "vision_only"}
    assert len({r["corpus_hash"] for r in rows}) == 1
    table = (workspace / "abl" / "ablation.txt").read_text().splitlines()
    assert len(table) == 2 + 3
    # the vision_only row is the scene-text-free evaluation of that model
    model = load_checkpoint(workspace / "abl" / "vision_only" / "final.ckpt").model
    free = evaluate(model, load_corpus("corpus.jsonl"), "scene_text_free")
    vo = [r for r in rows if r["strategy"] == "vision_only"]
    assert vo[0]["R@1"] == free.i2t[1] and vo[1]["R@1"] == free.t2i[1]


def test_unknown_strategy_is_usage_error(workspace, capsys):
    assert cli.main(["ablate", "--config", "run.yaml", "--strategies", "fusion_token,magic"]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "magic" in err and all(s in err for s in ("fusion_token", "late_fusion", "vision_only"))


def test_usage_and_validation_codes(workspace):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == cli.EXIT_USAGE
    assert cli.main(["train", "--config", "run.yaml", "--set", "corpus=missing.jsonl"]) == cli.EXIT_VALIDATION
    assert cli.main(["train", "--config", "run.yaml", "--set", "model.heads=3"]) == cli.EXIT_VALIDATION
    assert cli.main(["train", "--config", "run.yaml", "--set", "strategy=magic"]) == cli.EXIT_VALIDATION


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_aborts_and_keeps_log(workspace):
    code = cli.main(["train", "--config", "run.yaml", "--set", "lr=1e300", "--set", "steps=50"])
    assert code == cli.EXIT_RUNTIME
    rows = metrics(workspace / "run" / "metrics.jsonl")
    assert 0 < len(rows) < 50
