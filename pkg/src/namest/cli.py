"""Command-line entry point: ``namest <subcommand>``.

Every subcommand writes a ``manifest*.json`` with sha256 hashes of what it
read and wrote. Errors from the package exit with the code of their class
(see ``namest.errors``).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import average_groups, factor_dataset, fit_tree
from .corpus import (CorpusSpec, annotate_frequencies, filter_long, generate_corpus, normalize_features,
                     read_lexicon, read_manifest, read_split, token_frequencies, write_corpus)
from .errors import ConfigError, DataError, MissingArtifactError, NamestError
from .evaluation import VERDICTS, EvalReport, evaluate, verdict_counts
from .layers import ModelConfig, load_preset
from .models import LossWeights, build_model, decode_beam, decode_triangle, greedy_decode_batch
from .tokenizer import BpeModel, train_bpe
from .training import Schedule, TrainConfig, load_checkpoint, prepare_examples, train

logger = logging.getLogger("namest")

SCHEMA_VERSION = 1
REPORT_GROUPS = ("frequency", "referent_origin", "referent_training", "referent", "speaker_origin", "speaker")


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(path: Path, command: str, inputs: Sequence[Path], outputs: Sequence[Path], extra=None) -> None:
    data = {
        "command": command,
        "namest_version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
    }
    if extra:
        data.update(extra)
    write_json(path, data)


def _load_yaml(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return data


# -- experiment config -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    corpus: Path
    output: Path
    task: str = "asr"
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    source_languages: list[str] = field(default_factory=lambda: ["L0"])
    multilingual: bool = False
    target_language: str = "T0"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    training: dict = field(default_factory=dict)
    num_merges: int | None = None
    seed: int = 0
    max_frames: int | None = None

    def __post_init__(self):
        if self.task not in ("asr", "st", "triangle"):
            raise ConfigError(f"task must be asr, st or triangle, not {self.task!r}")
        if self.multilingual and len(self.source_languages) < 2:
            raise ConfigError("a multilingual experiment needs at least two source languages")
        if not self.source_languages:
            raise ConfigError("source_languages must not be empty")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ExperimentConfig":
        data = _load_yaml(path)
        base = Path(path).resolve().parent
        known = set(cls.__dataclass_fields__) | {"schema_version", "tokenizer"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        for key in ("corpus", "output"):
            if key not in data:
                raise ConfigError(f"{path}: missing required key {key!r}")
        weights = data.get("loss_weights", "default")
        if isinstance(weights, str):
            weights = LossWeights.preset(weights)
        elif isinstance(weights, dict):
            weights = LossWeights(float(weights["lambda_asr"]), float(weights["lambda_st"]))
        else:
            raise ConfigError("loss_weights must be a preset name or a mapping")
        tokenizer = data.get("tokenizer") or {}
        return cls(
            corpus=(base / data["corpus"]).resolve(),
            output=(base / data["output"]).resolve(),
            task=data.get("task", "asr"),
            preset=data.get("preset", "desk"),
            model=dict(data.get("model") or {}),
            source_languages=list(data.get("source_languages", ["L0"])),
            multilingual=bool(data.get("multilingual", False)),
            target_language=data.get("target_language", "T0"),
            loss_weights=weights,
            training=dict(data.get("training") or {}),
            num_merges=tokenizer.get("num_merges"),
            seed=int(data.get("seed", 0)),
            max_frames=data.get("max_frames"),
        )

    def train_config(self) -> TrainConfig:
        preset = load_preset(self.preset).get("training", {})
        merged = {**preset, **self.training}
        known = {"epochs", "max_tokens", "accumulation", "label_smoothing", "peak_lr", "warmup_steps",
                 "average_checkpoints", "specaugment", "max_steps"}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        return TrainConfig(
            epochs=int(merged.get("epochs", 10)),
            max_tokens=int(merged.get("max_tokens", 512)),
            accumulation=int(merged.get("accumulation", 1)),
            label_smoothing=float(merged.get("label_smoothing", 0.1)),
            schedule=Schedule(float(merged.get("peak_lr", 2e-3)), int(merged.get("warmup_steps", 200))),
            average=int(merged.get("average_checkpoints", 5)),
            specaugment=bool(merged.get("specaugment", True)),
            seed=self.seed,
            max_steps=merged.get("max_steps"),
        )

    def merges(self) -> int:
        if self.num_merges is not None:
            return int(self.num_merges)
        return int(load_preset(self.preset).get("tokenizer", {}).get("num_merges", 500))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "corpus": str(self.corpus), "output": str(self.output),
            "task": self.task, "preset": self.preset, "model": self.model,
            "source_languages": self.source_languages, "multilingual": self.multilingual,
            "target_language": self.target_language,
            "loss_weights": {"lambda_asr": self.loss_weights.lambda_asr,
                             "lambda_st": self.loss_weights.lambda_st},
            "training": self.training, "tokenizer": {"num_merges": self.merges()},
            "seed": self.seed, "max_frames": self.max_frames,
        }


def _corpus_split(corpus_dir: Path, split: str):
    path = corpus_dir / f"{split}.jsonl"
    if not path.exists():
        raise MissingArtifactError(path, "generate")
    return read_split(path)


# -- subcommands ---------------------------------------------------------------------

def cmd_generate(args) -> int:
    data = _load_yaml(args.spec)
    data.pop("schema_version", None)
    spec = CorpusSpec.from_dict(data)
    corpus = generate_corpus(spec)
    out = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} utterances to {out}")
    return 0


def train_run(cfg: ExperimentConfig) -> Path:
    """Train the configured model; returns the run directory."""
    utts = [u for u in _corpus_split(cfg.corpus, "train") if u.src_lang in cfg.source_languages]
    dev = [u for u in _corpus_split(cfg.corpus, "dev") if u.src_lang in cfg.source_languages]
    if cfg.max_frames is not None:
        utts, dev = filter_long(utts, cfg.max_frames), filter_long(dev, cfg.max_frames)
    if not utts:
        raise DataError(f"no training utterances for source languages {cfg.source_languages}")
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    texts = [u.transcript for u in utts] + [u.translations[cfg.target_language] for u in utts
                                            if cfg.target_language in u.translations]
    tok = train_bpe(texts, cfg.merges())
    tok.save(out / "tokenizer.bpe")
    feat_dim = int(utts[0].frames.shape[1])
    if cfg.model.get("input_dim", feat_dim) != feat_dim:
        raise ConfigError(f"model input_dim {cfg.model['input_dim']} does not match corpus features ({feat_dim})")
    model_cfg = ModelConfig.preset(cfg.preset, **{**cfg.model, "vocab_size": tok.vocab_size,
                                                  "input_dim": feat_dim})
    kind = "triangle" if cfg.task == "triangle" else "base"
    model = build_model(kind, model_cfg, seed=cfg.seed)
    run_cfg = cfg.to_dict()
    run_cfg["model_config"] = model_cfg.to_dict()
    run_cfg["kind"] = kind
    write_json(out / "run_config.json", run_cfg)
    result = train(model, prepare_examples(utts, tok, cfg.task, cfg.target_language),
                   prepare_examples(dev, tok, cfg.task, cfg.target_language) if dev else None,
                   cfg.loss_weights, cfg.train_config(), out)
    outputs = [out / "tokenizer.bpe", out / "run_config.json", out / "train_log.jsonl",
               out / "checkpoint_avg.npz"] + list(result.checkpoints)
    corpus_files = [cfg.corpus / "manifest.json", cfg.corpus / "train.jsonl", cfg.corpus / "dev.jsonl"]
    write_manifest(out / "manifest.json", "train", corpus_files, outputs,
                   {"val_losses": result.val_losses, "window": [i + 1 for i in result.window]})
    return out


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = train_run(cfg)
    print(f"trained {cfg.task} model in {out}")
    return 0


def _resolve_checkpoint(path: str | os.PathLike) -> tuple[Path, Path]:
    path = Path(path)
    if path.is_dir():
        run_dir, ckpt = path, path / "checkpoint_avg.npz"
    else:
        run_dir, ckpt = path.parent, path
        if run_dir.name == "checkpoints":
            run_dir = run_dir.parent
    if not ckpt.exists():
        raise MissingArtifactError(ckpt, "train")
    for name in ("run_config.json", "tokenizer.bpe"):
        if not (run_dir / name).exists():
            raise MissingArtifactError(run_dir / name, "train")
    return run_dir, ckpt


def evaluate_run(checkpoint, split: str, beam: int = 1, max_len: int = 100) -> dict:
    run_dir, ckpt = _resolve_checkpoint(checkpoint)
    run_cfg = json.loads((run_dir / "run_config.json").read_text(encoding="utf-8"))
    tok = BpeModel.load(run_dir / "tokenizer.bpe")
    model = build_model(run_cfg["kind"], ModelConfig.from_dict(run_cfg["model_config"]), materialize=True)
    state, _meta = load_checkpoint(ckpt)
    model.load_state_dict(state)
    model.eval()
    corpus_dir = Path(run_cfg["corpus"])
    sources = run_cfg["source_languages"]
    target = run_cfg["target_language"]
    train_utts = [u for u in _corpus_split(corpus_dir, "train") if u.src_lang in sources]
    test = [u for u in _corpus_split(corpus_dir, split) if u.src_lang in sources]
    if not test:
        raise DataError(f"split {split!r} has no utterances in {sources}")
    feats = [normalize_features(u.frames) for u in test]
    if beam == 1:
        hyps = greedy_decode_batch(model, feats, max_len)
    elif run_cfg["kind"] == "triangle":
        hyps = [decode_triangle(model, f, beam, max_len) for f in feats]
    else:
        hyps = [decode_beam(model, f, beam, max_len) for f in feats]
    task = run_cfg["task"]
    if task == "triangle":
        outputs = {"asr": [tok.decode(h[0].tokens) for h in hyps], "st": [tok.decode(h[1].tokens) for h in hyps]}
    else:
        outputs = {task: [tok.decode(h.tokens) for h in hyps]}
    lexicon = read_lexicon(corpus_dir)
    gazetteer = {n for entry in lexicon.values() for n in entry["names"]}
    primary = read_manifest(corpus_dir)["spec"].get("primary_language", "L0")
    reports = {}
    for kind, texts in outputs.items():
        stream = [u.transcript if kind == "asr" else u.translations[target] for u in train_utts]
        annotated = annotate_frequencies(test, token_frequencies(stream))
        report = evaluate(kind, annotated, texts, gazetteer, primary, sources, target)
        report.meta = {"run": run_dir.name, "split": split, "beam": beam,
                       "lambda": [run_cfg["loss_weights"]["lambda_asr"], run_cfg["loss_weights"]["lambda_st"]],
                       "source_languages": sources}
        reports[kind] = report.to_dict()
    return {"schema_version": SCHEMA_VERSION, "run": run_dir.name, "checkpoint": ckpt.name,
            "split": split, "reports": reports}


def cmd_evaluate(args) -> int:
    result = evaluate_run(args.checkpoint, args.split, args.beam, args.max_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, result)
    run_dir, ckpt = _resolve_checkpoint(args.checkpoint)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "evaluate", [ckpt], [out])
    for kind, rep in result["reports"].items():
        metric = f"WER {rep['wer']:.4f}" if kind == "asr" else f"BLEU {rep['bleu']:.2f}"
        print(f"{kind}: {metric}  name accuracy {_pct(rep['names']['accuracy'])}")
    return 0


def load_eval_file(path: str | os.PathLike) -> dict[str, EvalReport]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "evaluate")
    data = json.loads(path.read_text(encoding="utf-8"))
    if "reports" not in data:
        raise DataError(f"{path} is not an evaluation file")
    return {k: EvalReport.from_dict(v) for k, v in data["reports"].items()}


def cmd_analyze(args) -> int:
    reports = load_eval_file(args.eval)
    task = args.task or ("asr" if "asr" in reports else next(iter(reports)))
    if task not in reports:
        raise DataError(f"{args.eval} has no {task} report")
    X, y, space = factor_dataset(reports[task].judgments)
    tree = fit_tree(X, y, args.tree_depth, space.names)
    sys.stdout.write(tree.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(tree.to_json() + "\n", encoding="utf-8")
    return 0


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"1,0;0.5,0.5"`` -> ``[(1.0, 0.0), (0.5, 0.5)]``."""
    grid = []
    for item in text.split(";"):
        item = item.strip().strip("()")
        if not item:
            continue
        parts = [p for p in item.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise ConfigError(f"bad grid entry {item!r}; expected 'lambda_asr,lambda_st'")
        try:
            grid.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"bad grid entry {item!r}") from exc
    if not grid:
        raise ConfigError("empty lambda grid")
    return grid


def _sweep_point(cfg: ExperimentConfig, lam: tuple[float, float], max_len: int) -> dict:
    point = ExperimentConfig(**{**cfg.__dict__, "task": "triangle",
                                "loss_weights": LossWeights(*lam),
                                "output": cfg.output / f"lambda_{lam[0]:g}_{lam[1]:g}"})
    run_dir = train_run(point)
    result = evaluate_run(run_dir, "test", 1, max_len)
    write_json(run_dir / "eval_test.json", result)
    asr, st = result["reports"]["asr"], result["reports"]["st"]
    st_names = [st["names"]["accuracy"]]
    st_avg = float(np.mean([a for a in st_names if a is not None])) if any(a is not None for a in st_names) else None
    gap = None if asr["names"]["accuracy"] is None or st_avg is None else asr["names"]["accuracy"] - st_avg
    return {"lambda_asr": lam[0], "lambda_st": lam[1], "wer": asr["wer"], "bleu": st["bleu"],
            "asr_names": asr["names"]["accuracy"], "st_names": st_names[0], "st_avg": st_avg, "gap": gap}


def sweep_table(rows: Sequence[dict]) -> str:
    head = "| λ_ASR | λ_ST | WER | BLEU | ASR names | ST names | ST-Avg | ASR−ST gap |"
    lines = [head, "|" + "---|" * 8]
    for r in rows:
        lines.append(f"| {r['lambda_asr']:g} | {r['lambda_st']:g} | {_num(r['wer'], 100)} | {_num(r['bleu'])} | "
                     f"{_pct(r['asr_names'])} | {_pct(r['st_names'])} | {_pct(r['st_avg'])} | {_pct(r['gap'])} |")
    return "\n".join(lines) + "\n"


def cmd_sweep_lambda(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    grid = parse_grid(args.grid)
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_point, [cfg] * len(grid), grid, [args.max_len] * len(grid)))
    else:
        rows = [_sweep_point(cfg, lam, args.max_len) for lam in grid]
    cfg.output.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output / "sweep.json", rows)
    table = sweep_table(rows)
    (cfg.output / "sweep.md").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


# -- reporting -----------------------------------------------------------------------

def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def _num(x, scale: float = 1.0) -> str:
    return "-" if x is None else f"{scale * x:.2f}"


def _group_table(title: str, groups: dict) -> list[str]:
    lines = [f"#### {title}", "", "| group | correct | total | accuracy |", "|---|---|---|---|"]
    for key, s in sorted(groups.items()):
        lines.append(f"| {key} | {s.correct} | {s.total} | {_pct(s.accuracy)} |")
    lines.append("")
    return lines


def render_report(runs: Sequence[tuple[str, dict[str, EvalReport]]]) -> tuple[str, dict]:
    """Markdown tables per run and task, plus averaged groups when several runs are given."""
    lines = ["# Name accuracy report", ""]
    histogram: dict[str, dict[str, int]] = {}
    for name, reports in runs:
        for kind in sorted(reports):
            rep = reports[kind]
            metric = f"WER {_num(rep.wer, 100)}" if kind == "asr" else f"BLEU {_num(rep.bleu)}"
            lines += [f"## {name} / {kind}", "",
                      f"{metric}; names {rep.names.correct}/{rep.names.total} = {_pct(rep.name_accuracy)}", ""]
            for group in REPORT_GROUPS:
                if group in rep.groups:
                    lines += _group_table(group, rep.groups[group])
            counts = verdict_counts(rep.judgments)
            histogram[f"{name}/{kind}"] = counts
            lines += ["#### error categories", "", "| category | count |", "|---|---|"]
            lines += [f"| {v} | {counts[v]} |" for v in VERDICTS]
            lines.append("")
    kinds = sorted({k for _, reps in runs for k in reps})
    if len(runs) > 1:
        for kind in kinds:
            reps = [reps[kind] for _, reps in runs if kind in reps]
            lines += [f"## averaged over {len(reps)} runs / {kind}", ""]
            for group in REPORT_GROUPS:
                means = average_groups(reps, group)
                if not means:
                    continue
                lines += [f"#### {group}", "", "| group | mean accuracy |", "|---|---|"]
                lines += [f"| {k} | {_pct(v)} |" for k, v in means.items()]
                if len(means) == 2:
                    a, b = list(means)
                    lines.append(f"| Δ ({a} − {b}) | {_pct(means[a] - means[b])} |")
                lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n", histogram


def plot_histograms(histogram: dict[str, dict[str, int]], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = sorted(histogram)
    fig, axes = plt.subplots(1, max(1, len(keys)), figsize=(4 * max(1, len(keys)), 3.2), squeeze=False)
    for ax, key in zip(axes[0], keys):
        errors = [v for v in VERDICTS if v != "correct"]
        ax.bar(range(len(errors)), [histogram[key][v] for v in errors], color="tab:gray")
        ax.set_xticks(range(len(errors)))
        ax.set_xticklabels(errors, rotation=30, ha="right", fontsize=8)
        ax.set_title(key, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def collect_runs(run_dirs: Sequence[str | os.PathLike]) -> list[tuple[str, dict[str, EvalReport]]]:
    runs = []
    for d in run_dirs:
        d = Path(d)
        files = sorted(d.glob("eval*.json")) if d.is_dir() else [d]
        files = [f for f in files if not f.name.endswith(".manifest.json")]
        if not files:
            raise MissingArtifactError(d / "eval_test.json", "evaluate")
        for f in files:
            runs.append((f"{d.name}/{f.stem}" if d.is_dir() else f.stem, load_eval_file(f)))
    return runs


def cmd_report(args) -> int:
    runs = collect_runs(args.runs)
    text, histogram = render_report(runs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(text, encoding="utf-8")
        write_json(out / "error_histogram.json", histogram)
        outputs = [out / "report.md", out / "error_histogram.json"]
        if not args.no_plot:
            plot_histograms(histogram, out / "error_histogram.png")
            outputs.append(out / "error_histogram.png")
        inputs = [f for d in args.runs for f in (sorted(Path(d).glob("eval*.json")) if Path(d).is_dir() else [Path(d)])]
        write_manifest(out / "manifest.json", "report", inputs, outputs)
    sys.stdout.write(text)
    return 0


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namest", description="Person-name accuracy in speech translation.")
    parser.add_argument("--version", action="version", version=f"namest {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="corpus spec YAML")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True, help="experiment config YAML")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="decode a split and score it")
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint file")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--out", required=True, help="evaluation JSON to write")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="fit the factor decision tree on an evaluation")
    p.add_argument("--eval", required=True, help="evaluation JSON")
    p.add_argument("--tree-depth", type=int, default=3)
    p.add_argument("--task", choices=["asr", "st"], default=None)
    p.add_argument("--out", default=None, help="write the tree as JSON here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-lambda", help="train triangle models over a loss-weight grid")
    p.add_argument("--config", required=True, help="experiment config YAML")
    p.add_argument("--grid", default="1,0;0.5,0.5;0.8,0.2;0,1", help='e.g. "1,0;0.5,0.5;0.8,0.2"')
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--max-len", type=int, default=100)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("report", help="render grouped tables and error histograms")
    p.add_argument("--runs", nargs="+", required=True, help="run directories or evaluation files")
    p.add_argument("--out", default=None, help="directory for report.md and histograms")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NamestError as exc:
        print(f"namest {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
