"""Command line entry points: gen, train, eval, embed, ablate.

Exit codes: 0 success, 1 usage, 2 validation failure, 3 runtime failure.
Relative output paths resolve against ``$VISTA_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import CorpusError, CorpusSpec, PRESETS, build_vocab, corpus_hash, generate_corpus, load_corpus, write_corpus
from .encoders import FORWARD_CALLS, ConfigError, ModelConfig
from .model import STRATEGIES, CheckpointError, checkpoint_bytes, init_model, load_checkpoint
from .numerics import ContractError
from .objective import ALPHA_DEFAULT, Adam, TrainingError, fit
from .retrieval import MODES, embed_corpus, evaluate, write_embeddings

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "VISTA_OUTPUT_ROOT"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    corpus: str
    output_dir: str = "run"
    seed: int = 0
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    alpha: float = ALPHA_DEFAULT
    strategy: str = "fusion_token"
    eval_mode: str = "scene_text_aware"
    model: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not Path(self.corpus).is_file():
            raise ConfigError(f"corpus file {self.corpus!r} does not exist")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.eval_mode not in MODES:
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}; valid: {', '.join(MODES)}")
        if self.steps < 0 or self.batch_size < 2 or self.lr < 0 or not 0 <= self.alpha <= 1:
            raise ConfigError("need steps >= 0, batch_size >= 2, lr >= 0 and alpha in [0, 1]")
        unknown = set(self.model) - {f.name for f in fields(ModelConfig)}
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")

    def model_config(self, corpus) -> ModelConfig:
        H, W, C = corpus[0].image.pixels.shape
        values = {"image_height": H, "image_width": W, "channels": C, **self.model}
        if (values["image_height"], values["image_width"], values["channels"]) != (H, W, C):
            raise ConfigError(f"model image size does not match corpus images {H}x{W}x{C}")
        return ModelConfig(**values)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _apply_overrides(values: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        target = values
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = yaml.safe_load(raw)
    return values


def _read_yaml(path) -> dict:
    try:
        values = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return values


def load_run_config(path, overrides=None) -> RunConfig:
    values = _apply_overrides(_read_yaml(path), overrides)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "corpus" not in values:
        raise ConfigError("config needs a 'corpus' path")
    base = Path(path).parent
    corpus = Path(values["corpus"])
    values["corpus"] = str(corpus if corpus.is_absolute() else base / corpus)
    for name, kind in (("seed", int), ("steps", int), ("batch_size", int), ("lr", float), ("alpha", float)):
        if name in values:
            try:
                values[name] = kind(values[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {name!r}: expected {kind.__name__}, got {values[name]!r}") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    values = _read_yaml(args.spec) if args.spec else {}
    if args.preset:
        values["preset"] = args.preset
    values = _apply_overrides(values, args.set)
    try:
        spec = CorpusSpec.from_dict(values)
        corpus = generate_corpus(spec)
    except (TypeError, CorpusError) as exc:
        raise ConfigError(str(exc)) from exc
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, corpus)
    print(f"wrote {len(corpus)} items to {out} (sha256 {corpus_hash(corpus)[:12]})")
    return EXIT_OK


def _train(cfg: RunConfig, out_dir: Path, resume: str | None = None) -> dict:
    corpus = load_corpus(cfg.corpus)
    if resume:
        ck = load_checkpoint(resume)
        model = ck.model
        start = int(ck.extra.get("step", 0))
        optimizer = Adam(cfg.lr)
        optimizer.load_state(ck.moments, int(ck.extra.get("adam_t", start)))
    else:
        model = init_model(cfg.model_config(corpus), build_vocab(corpus), cfg.seed, cfg.strategy)
        start = 0
        optimizer = Adam(cfg.lr)
    chash, rhash = corpus_hash(corpus), cfg.digest()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True), encoding="utf-8")

    def extra(step):
        return {"step": step, "adam_t": optimizer.t, "config_hash": rhash, "corpus_hash": chash}

    best = {"loss": float("inf"), "blob": None}
    pending = [checkpoint_bytes(model, extra=extra(start))]
    mode = "a" if resume else "w"
    with open(out_dir / "metrics.jsonl", mode, encoding="utf-8") as log:
        def on_step(rec):
            log.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
            log.flush()
            if rec.loss < best["loss"]:
                best["loss"], best["blob"] = rec.loss, pending[0]
            pending[0] = checkpoint_bytes(model, extra=extra(rec.step + 1))

        fit(model, corpus, max(0, cfg.steps - start), cfg.batch_size, cfg.lr, cfg.alpha, cfg.seed,
            optimizer=optimizer, start_step=start, on_step=on_step)
    final_step = max(start, cfg.steps)
    (out_dir / "final.ckpt").write_bytes(checkpoint_bytes(model, optimizer.state(), extra(final_step)))
    (out_dir / "best.ckpt").write_bytes(best["blob"] if best["blob"] is not None else pending[0])
    summary = {"config_hash": rhash, "corpus_hash": chash, "steps": final_step,
               "best_loss": None if best["blob"] is None else best["loss"]}
    (out_dir / "run.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out_dir = resolve_output(args.out or cfg.output_dir)
    summary = _train(cfg, out_dir, args.resume)
    print(f"trained {summary['steps']} steps; artifacts in {out_dir}")
    return EXIT_OK


def _write_report(report, out_dir: Path, meta: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out_dir / "eval.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    corpus = load_corpus(args.corpus, model.config.patch_size)
    FORWARD_CALLS.clear()
    report = evaluate(model, corpus, args.mode)
    meta = {"mode": args.mode, "corpus_hash": corpus_hash(corpus), "forward_calls": dict(sorted(FORWARD_CALLS.items()))}
    _write_report(report, resolve_output(args.out), meta)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    corpus = load_corpus(args.corpus, model.config.patch_size)
    emb = embed_corpus(model, corpus, args.mode)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "images.emb", emb.images)
    write_embeddings(out / "fusion.emb", emb.fusion)
    write_embeddings(out / "texts.emb", emb.texts)
    print(f"embedded {len(emb.images)} images ({len(emb.fusion)} with fusion) and {len(emb.texts)} captions")
    return EXIT_OK


def parse_strategies(raw: str) -> list[str]:
    names = [s.strip() for s in raw.split(",") if s.strip()]
    bad = [n for n in names if n not in STRATEGIES]
    if bad or not names:
        raise UsageError(f"unknown strategy {', '.join(bad) or '(none)'}; valid names: {', '.join(STRATEGIES)}")
    return names


def cmd_ablate(args) -> int:
    strategies = parse_strategies(args.strategies)
    cfg = load_run_config(args.config, args.set)
    out_dir = resolve_output(args.out or cfg.output_dir)
    rows = []
    for name in strategies:
        run_cfg = RunConfig(**{**asdict(cfg), "strategy": name})
        summary = _train(run_cfg, out_dir / name)
        model = load_checkpoint(out_dir / name / "final.ckpt").model
        mode = "scene_text_free" if name == "vision_only" else "scene_text_aware"
        report = evaluate(model, load_corpus(cfg.corpus), mode)
        for r in report.rows():
            rows.append({"strategy": name, "mode": mode, "corpus_hash": summary["corpus_hash"], **r})
    (out_dir / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows),
                                            encoding="utf-8")
    lines = [f"corpus sha256 {rows[0]['corpus_hash']}",
             f"{'strategy':<14}{'i2t R@1':>9}{'R@5':>7}{'R@10':>7}{'t2i R@1':>9}{'R@5':>7}{'R@10':>7}"]
    for name in strategies:
        i2t, t2i = [r for r in rows if r["strategy"] == name]
        lines.append(f"{name:<14}" + "".join(f"{100 * d[k]:>{w}.1f}" for d in (i2t, t2i)
                                             for k, w in (("R@1", 9), ("R@5", 7), ("R@10", 7))))
    table = "\n".join(lines) + "\n"
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vista", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--spec", help="YAML corpus spec (may name a preset)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted for model.*)")
    p.add_argument("--out", help="run directory (default: output_dir from the config)")
    p.add_argument("--resume", help="continue from a final.ckpt")
    p.set_defaults(func=cmd_train)

    for name, func, default_out in (("eval", cmd_eval, "eval"), ("embed", cmd_embed, "embeddings")):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a corpus")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--mode", choices=MODES, default="scene_text_aware")
        p.add_argument("--out", default=default_out)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and compare fusion strategies")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vista: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CorpusError, CheckpointError, ContractError) as exc:
        print(f"vista: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, FloatingPointError, OSError) as exc:
        print(f"vista: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
