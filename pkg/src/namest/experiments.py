"""Desk-scale replication of the name-translation study.

For each seed one corpus is generated and six models are trained on it:

=====  =====================  ==========================================
run    model                  training data
=====  =====================  ==========================================
asr    base ASR               primary-language utterances
asr_b  base ASR               balanced-frequency subset of the above
st     base ST                primary-language utterances
st_ml  base ST                primary and second source language
tri    triangle (0.5, 0.5)    primary-language utterances
tri_c  triangle (0.8, 0.2)    primary-language utterances
=====  =====================  ==========================================

All models are evaluated on the primary-language test set with greedy
decoding. Name frequencies are counted in each run's own training targets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .analysis import balance_frequency_subsets
from .corpus import (Corpus, CorpusSpec, annotate_frequencies, generate_corpus, normalize_features,
                     token_frequencies)
from .errors import ConfigError
from .evaluation import EvalReport, evaluate
from .layers import ModelConfig
from .models import LossWeights, build_model, greedy_decode_batch
from .tokenizer import BpeModel, train_bpe
from .training import Schedule, TrainConfig, prepare_examples, train

logger = logging.getLogger(__name__)

CACHE_ENV = "NAMEST_CACHE_DIR"
RUNS = ("asr", "asr_b", "st", "st_ml", "tri", "tri_c")


def desk_corpus_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """Two-language corpus used by the desk study (about 5k training sentences)."""
    base = dict(
        languages=["L0", "L1"],
        source_languages=["L0", "L1"],
        train_sentences={"L0": 3500, "L1": 1500},
        dev_sentences={"L0": 200, "L1": 100},
        test_sentences={"L0": 1000, "L1": 200},
        speaker_proportions={"L0": {"L0": 0.6, "L1": 0.4}, "L1": {"L1": 1.0}},
        referent_proportions={"L0": {"L0": 0.6, "L1": 0.4}, "L1": {"L0": 0.2, "L1": 0.8}},
        names_per_language=300,
        zipf_exponent=0.9,
        words_per_sentence=[1, 3],
        frames_per_phoneme=[2, 3],
        unique_phonemes=5,
        distinctiveness=2.0,
        grapheme_divergence=0.5,
        name_regularity=0.9,
        accent_strength=0.5,
        seed=seed,
    )
    base.update(overrides)
    return CorpusSpec(**base)


@dataclass
class StudyConfig:
    corpus: dict = field(default_factory=dict)
    merges: int = 100
    model: dict = field(default_factory=lambda: {"dtype": "float32"})
    epochs: int = 15
    max_tokens: int = 512
    peak_lr: float = 3e-3
    warmup_steps: int = 150
    average: int = 5
    max_len: int = 60
    primary: str = "L0"
    second: str = "L1"
    target: str = "T0"
    runs: tuple = RUNS

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown study keys: {sorted(unknown)}")
        out = cls(**data)
        out.runs = tuple(out.runs)
        if set(out.runs) - set(RUNS):
            raise ConfigError(f"unknown runs {sorted(set(out.runs) - set(RUNS))}")
        return out

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, max_tokens=self.max_tokens,
                           schedule=Schedule(self.peak_lr, self.warmup_steps),
                           average=self.average, seed=seed)


def shared_tokenizer(corpus: Corpus, merges: int, target: str = "T0") -> BpeModel:
    """One subword model over all training transcripts and translations."""
    texts = [u.transcript for u in corpus.train] + [u.translations[target] for u in corpus.train]
    return train_bpe(texts, merges)


def _decode_texts(tok: BpeModel, hyps) -> list[str]:
    return [tok.decode(h.tokens) for h in hyps]


def run_experiment(task: str, corpus: Corpus, train_utts, tok: BpeModel, cfg: StudyConfig, seed: int,
                   weights: LossWeights = LossWeights(), out_dir: Path | None = None) -> dict[str, EvalReport]:
    """Train one model and evaluate it on the primary-language test set.

    Returns ``{"asr": report}``, ``{"st": report}`` or both for the triangle.
    """
    model_cfg = ModelConfig.preset("desk", vocab_size=tok.vocab_size, **cfg.model)
    model = build_model("triangle" if task == "triangle" else "base", model_cfg, seed=seed)
    dev = [u for u in corpus.dev if u.src_lang == cfg.primary]
    test = [u for u in corpus.test if u.src_lang == cfg.primary]
    t0 = time.perf_counter()
    result = train(model, prepare_examples(train_utts, tok, task, cfg.target),
                   prepare_examples(dev, tok, task, cfg.target), weights, cfg.train_config(seed), out_dir)
    train_seconds = time.perf_counter() - t0
    hyps = greedy_decode_batch(model, [normalize_features(u.frames) for u in test], cfg.max_len)
    total_seconds = time.perf_counter() - t0
    if task == "triangle":
        outputs = {"asr": _decode_texts(tok, [h[0] for h in hyps]), "st": _decode_texts(tok, [h[1] for h in hyps])}
    else:
        outputs = {task: _decode_texts(tok, hyps)}
    train_langs = sorted({u.src_lang for u in train_utts})
    reports = {}
    for kind, texts in outputs.items():
        stream = [u.transcript if kind == "asr" else u.translations[cfg.target] for u in train_utts]
        annotated = annotate_frequencies(test, token_frequencies(stream))
        report = evaluate(kind, annotated, texts, corpus.gazetteer(), cfg.primary, train_langs, cfg.target)
        report.meta = {"task": task, "seed": seed, "train_sentences": len(train_utts),
                       "train_languages": train_langs, "lambda": [weights.lambda_asr, weights.lambda_st],
                       "steps": len(result.log), "train_seconds": round(train_seconds, 1),
                       "seconds": round(total_seconds, 1),
                       "window": result.window, "val_losses": result.val_losses,
                       "hypotheses": texts}
        reports[kind] = report
    return reports


def balanced_training_set(corpus: Corpus, cfg: StudyConfig, seed: int):
    """Primary-language training set with primary and second-language names balanced in frequency."""
    train = [u for u in corpus.train if u.src_lang == cfg.primary]
    test = [u for u in corpus.test if u.src_lang == cfg.primary]
    group_a = [n.token for u in test for n in u.names if n.referent_nat == cfg.primary]
    group_b = [n.token for u in test for n in u.names if n.referent_nat == cfg.second]
    return balance_frequency_subsets(train, group_a, group_b, runs=1, seed=seed)[0]


def run_seed(seed: int, cfg: StudyConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Generate the seed's corpus and run every configured experiment."""
    t0 = time.perf_counter()
    corpus = generate_corpus(desk_corpus_spec(seed, **cfg.corpus))
    tok = shared_tokenizer(corpus, cfg.merges, cfg.target)
    setup_seconds = time.perf_counter() - t0
    mono = [u for u in corpus.train if u.src_lang == cfg.primary]
    multi = [u for u in corpus.train if u.src_lang in (cfg.primary, cfg.second)]
    plans = {
        "asr": ("asr", lambda: mono, LossWeights()),
        "asr_b": ("asr", lambda: balanced_training_set(corpus, cfg, seed), LossWeights()),
        "st": ("st", lambda: mono, LossWeights()),
        "st_ml": ("st", lambda: multi, LossWeights()),
        "tri": ("triangle", lambda: mono, LossWeights(0.5, 0.5)),
        "tri_c": ("triangle", lambda: mono, LossWeights(0.8, 0.2)),
    }
    results = {}
    for name in cfg.runs:
        task, data, weights = plans[name]
        sub = Path(out_dir) / f"seed{seed}" / name if out_dir is not None else None
        logger.info("seed %d: training %s", seed, name)
        reports = run_experiment(task, corpus, data(), tok, cfg, seed, weights, sub)
        results[name] = reports
        if sub is not None:
            for kind, rep in reports.items():
                rep.save(sub / f"eval_{kind}.json")
    results["_setup_seconds"] = setup_seconds
    return results


def summarize(results: dict, cfg: StudyConfig) -> dict:
    """Headline numbers of one seed (accuracies as fractions, BLEU 0-100)."""
    def acc(report, group, key):
        score = report.groups.get(group, {}).get(key)
        return None if score is None else score.accuracy

    out: dict = {"seconds": {"setup": round(results.get("_setup_seconds", 0.0), 1)}}
    for name in RUNS:
        if name in results:
            out["seconds"][name] = next(iter(results[name].values())).meta["seconds"]
    if "asr" in results:
        r = results["asr"]["asr"]
        out["asr"] = {"wer": r.wer, "names": r.name_accuracy,
                      "freq_hi": acc(r, "frequency", ">=3"), "freq_lo": acc(r, "frequency", "<3")}
    if "asr_b" in results:
        r = results["asr_b"]["asr"]
        out["asr_b"] = {"wer": r.wer, "names": r.name_accuracy,
                        "ref_in": acc(r, "referent", cfg.primary), "ref_out": acc(r, "referent", cfg.second),
                        "spk_native": acc(r, "speaker", cfg.primary),
                        "spk_foreign": acc(r, "speaker", cfg.second)}
    for name in ("st", "st_ml"):
        if name in results:
            r = results[name]["st"]
            out[name] = {"bleu": r.bleu, "names": r.name_accuracy,
                         "names_second": acc(r, "referent", cfg.second)}
    for name in ("tri", "tri_c"):
        if name in results:
            a, s = results[name]["asr"], results[name]["st"]
            out[name] = {"wer": a.wer, "bleu": s.bleu, "asr_names": a.name_accuracy,
                         "st_names": s.name_accuracy}
    return out


def study_key(seed: int, cfg: StudyConfig) -> str:
    """Content hash of everything that determines one seed's results."""
    blob = json.dumps({"seed": seed, "cfg": asdict(cfg), "spec": desk_corpus_spec(seed, **cfg.corpus).to_dict(),
                       "version": __version__}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_study(seeds: Sequence[int], cfg: StudyConfig, out_dir: str | os.PathLike | None = None,
              cache_dir: str | os.PathLike | None = None) -> dict:
    """Summaries per seed.

    With ``cache_dir`` (default: ``$NAMEST_CACHE_DIR`` if set) a seed whose
    summary is already stored under the same :func:`study_key` is not rerun.
    """
    if cache_dir is None and os.environ.get(CACHE_ENV):
        cache_dir = os.environ[CACHE_ENV]
    summaries = {}
    for seed in seeds:
        cached = Path(cache_dir) / f"study-{study_key(seed, cfg)}.json" if cache_dir else None
        if cached is not None and cached.exists():
            logger.info("seed %d: using cached summary %s", seed, cached)
            summaries[seed] = json.loads(cached.read_text(encoding="utf-8"))
            continue
        summaries[seed] = summarize(run_seed(seed, cfg, out_dir), cfg)
        text = json.dumps(summaries[seed], indent=1, sort_keys=True) + "\n"
        if out_dir is not None:
            path = Path(out_dir) / f"seed{seed}" / "summary.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            cached.write_text(text, encoding="utf-8")
    return summaries
