"""Acceptance criteria 1-10.

Each test prints one PASS/FAIL line (collected again in the terminal
summary). Criteria 4-8 share one desk study over seeds 0, 1 and 2, which
takes roughly 45 minutes on one CPU; set ``NAMEST_CACHE_DIR`` to reuse
summaries across sessions.
"""

import json
import random
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from namest.analysis import fit_tree, gini
from namest.cli import main
from namest.corpus import NameAnnotation, Utterance
from namest.evaluation import bleu, categorize_errors, scotts_pi, verdict_counts, wer
from namest.experiments import StudyConfig, run_study
from namest.layers import ModelConfig
from namest.models import BaseModel, LossWeights, TriangleModel, make_batch, st_exclusive_parameters, \
    triangle_loss
from namest.tokenizer import UNK_ID, train_bpe
from namest.training import average_checkpoints, save_checkpoint

from conftest import numeric_grad, record_criterion, rel_err

SEEDS = (0, 1, 2)


def majority(flags) -> bool:
    return sum(bool(f) for f in flags) >= 2


def pct(x) -> str:
    return f"{100 * x:.1f}"


# -- 1: gradients ------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = ModelConfig(d_model=8, ffn_dim=8, heads=2, encoder_layers=1, decoder_layers=1, input_dim=3,
                      vocab_size=9, dropout=0.0, dtype="float64")
    model = TriangleModel(cfg, seed=1)
    n_params = model.num_parameters()
    feats = [rng.normal(size=(int(rng.integers(5, 10)), 3)) for _ in range(2)]
    batch = make_batch(feats, [[4, 5, 6], [7, 8]], [[5, 5], [6, 7, 8, 4]])

    def loss():
        return triangle_loss(model.forward(batch), batch, LossWeights(0.6, 0.4), epsilon=0.1)

    model.zero_grad()
    loss().backward()
    worst = max(rel_err(p.grad, numeric_grad(lambda: float(loss().data), p.data, h=1e-5))
                for _, p in model.named_parameters())
    elapsed = time.perf_counter() - start
    ok = n_params < 5000 and worst < 1e-2 and elapsed < 60
    record_criterion(1, ok, f"{n_params} params, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2: loss weights ------------------------------------------------------------------

def test_criterion_2_loss_weight_semantics():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(d_model=8, ffn_dim=16, heads=2, encoder_layers=1, decoder_layers=1, input_dim=4,
                      vocab_size=12, dropout=0.0, dtype="float64")
    model = TriangleModel(cfg, seed=0)
    feats = [rng.normal(size=(9, 4)), rng.normal(size=(6, 4))]
    batch = make_batch(feats, [[4, 9, 10], [5, 6]], [[7, 8], [11, 4, 5]])
    model.zero_grad()
    triangle_loss(model.forward(batch), batch, LossWeights(1.0, 0.0)).backward()
    zero = all(p.grad is None or not np.any(p.grad) for p in st_exclusive_parameters(model).values())
    state = model.forward(batch)
    asr = float(triangle_loss(state, batch, LossWeights(1.0, 0.0)).data)
    st = float(triangle_loss(state, batch, LossWeights(0.0, 1.0)).data)
    linear = all(abs(float(triangle_loss(state, batch, LossWeights(a, b)).data) - (a * asr + b * st)) < 1e-12
                 for a, b in [(0.8, 0.2), (0.3, 0.6), (0.0, 0.0), (1.0, 1.0)])
    mean = abs(float(triangle_loss(state, batch, LossWeights(0.5, 0.5)).data) - (asr + st) / 2) < 1e-12
    ok = zero and linear and mean
    record_criterion(2, ok, f"zero ST grads {zero}, linear {linear}, (0.5,0.5) = mean {mean}")
    assert ok


# -- 3: metric oracles ------------------------------------------------------------------

def _edit(a, b):
    d = {(i, 0): i for i in range(len(a) + 1)} | {(0, j): j for j in range(len(b) + 1)}
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a), len(b)]


def _exact_best_split(X, y):
    def g(labels):
        return 1 - sum(Fraction(c, len(labels)) ** 2 for c in Counter(labels).values())
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(vals, vals[1:]):
            t = (Fraction(lo) + Fraction(hi)) / 2
            left = [c for x, c in zip(X[:, f], y.tolist()) if Fraction(x) <= t]
            right = [c for x, c in zip(X[:, f], y.tolist()) if Fraction(x) > t]
            score = (len(left) * g(left) + len(right) * g(right)) / len(y)
            if best is None or score < best[2]:
                best = (f, float(t), score)
    if best is None or best[2] >= g(y.tolist()):
        return None
    return best[:2]


def test_criterion_3_metric_oracles():
    rnd = random.Random(5)
    wer_ok = True
    for _ in range(500):
        ref = [rnd.choice("abcde") for _ in range(rnd.randint(1, 10))]
        hyp = [rnd.choice("abcde") for _ in range(rnd.randint(0, 10))]
        wer_ok &= wer(ref, hyp) == _edit(ref, hyp) / len(ref)

    refs = ["the cat sat on the mat", "a dog barks", "hello world"]
    hyps = ["the cat sat on a mat", "a dog barked", "hello there world"]
    # hand counts: 1-grams 9/12, 2-grams 4/9, 3-grams 2/6, 4-grams 1/3; 12 vs 11 words, no penalty
    hand = 100 * (9 / 12 * 4 / 9 * 2 / 6 * 1 / 3) ** 0.25
    bleu_err = abs(bleu(refs, hyps) - hand)

    rng = np.random.default_rng(6)
    tree_ok = True
    for _ in range(300):
        n, d = int(rng.integers(1, 13)), int(rng.integers(1, 7))
        X = rng.integers(0, 3, size=(n, d)).astype(float)
        y = rng.integers(0, 2, size=n)
        root = fit_tree(X, y, max_depth=3).root
        got = None if root.is_leaf else (root.feature, root.threshold)
        tree_ok &= got == _exact_best_split(X, y)

    gini_err = max(abs(gini([3, 1]) - 0.375), abs(gini([1, 1]) - 0.5), abs(gini([4, 0])),
                   abs(gini([2, 3, 5]) - (1 - (4 + 9 + 25) / 100)))
    ok = wer_ok and bleu_err < 1e-6 and tree_ok and gini_err < 1e-12
    record_criterion(3, ok, f"WER oracle {wer_ok}, BLEU err {bleu_err:.1e}, tree oracle {tree_ok}, "
                            f"gini err {gini_err:.1e}")
    assert ok


# -- 4-8: desk study ------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_study():
    start = time.perf_counter()
    summaries = run_study(SEEDS, StudyConfig())
    elapsed = time.perf_counter() - start
    print(f"desk study: {elapsed:.0f}s")
    print(json.dumps(summaries, indent=1, sort_keys=True))
    return summaries


def test_criterion_4_frequency_effect(desk_study):
    hi = np.mean([desk_study[s]["asr"]["freq_hi"] for s in SEEDS])
    lo = np.mean([desk_study[s]["asr"]["freq_lo"] for s in SEEDS])
    seconds = sum(desk_study[s]["seconds"]["setup"] + desk_study[s]["seconds"]["asr"] for s in SEEDS)
    ok = hi - lo >= 0.15 and seconds < 1800
    record_criterion(4, ok, f"freq>=3 {pct(hi)} vs <3 {pct(lo)} (diff {pct(hi - lo)} points), "
                            f"{seconds / 60:.1f} min for 3 seeds")
    assert ok


def _referent_delta(summary):
    return summary["asr_b"]["ref_in"] - summary["asr_b"]["ref_out"]


def test_criterion_5_referent_language_effect(desk_study):
    deltas = [_referent_delta(desk_study[s]) for s in SEEDS]
    ok = majority(d > 0 for d in deltas)
    record_criterion(5, ok, "referent delta per seed " + ", ".join(pct(d) for d in deltas))
    assert ok


def test_criterion_6_speaker_accent_non_effect(desk_study):
    speaker = [desk_study[s]["asr_b"]["spk_native"] - desk_study[s]["asr_b"]["spk_foreign"] for s in SEEDS]
    referent = [_referent_delta(desk_study[s]) for s in SEEDS]
    ok = majority(abs(a) < r for a, r in zip(speaker, referent))
    record_criterion(6, ok, "speaker |delta| vs referent delta per seed "
                     + ", ".join(f"{pct(abs(a))} vs {pct(r)} ({'ok' if abs(a) < r else 'not smaller'})"
                                 for a, r in zip(speaker, referent)))
    assert ok


def test_criterion_7_multilingual_gain(desk_study):
    gains = [desk_study[s]["st_ml"]["names_second"] - desk_study[s]["st"]["names_second"] for s in SEEDS]
    drops = [desk_study[s]["st"]["bleu"] - desk_study[s]["st_ml"]["bleu"] for s in SEEDS]
    ok = majority(g > 0 for g in gains) and float(np.mean(drops)) < 2.0
    record_criterion(7, ok, "second-language name gain " + ", ".join(pct(g) for g in gains)
                     + "; BLEU drop " + ", ".join(f"{d:.2f}" for d in drops))
    assert ok


def test_criterion_8_lambda_calibration(desk_study):
    tri = [desk_study[s]["tri"] for s in SEEDS]
    cal = [desk_study[s]["tri_c"] for s in SEEDS]
    names = majority(c["st_names"] >= t["st_names"] and c["wer"] <= t["wer"] for t, c in zip(tri, cal))
    bleu_ok = majority(t["bleu"] >= desk_study[s]["st"]["bleu"] for s, t in zip(SEEDS, tri))
    tri_gap = np.mean([t["asr_names"] - t["st_names"] for t in tri])
    base_gap = np.mean([desk_study[s]["asr"]["names"] - desk_study[s]["st"]["names"] for s in SEEDS])
    gap_ok = abs(tri_gap) < abs(base_gap)
    ok = names and bleu_ok and gap_ok
    record_criterion(8, ok, f"(0.8,0.2) vs (0.5,0.5) ST names/WER {names}; triangle BLEU >= base ST {bleu_ok}; "
                            f"gap triangle {pct(tri_gap)} vs separate {pct(base_gap)}")
    assert ok


# -- 9: error taxonomy ----------------------------------------------------------------------

def _utt(uid, text, name):
    toks = text.split()
    return Utterance(uid, "L0", "L0", "s", np.zeros((1, 1), np.float32), text, {"T0": text},
                     [NameAnnotation(name, "L0", "L0", toks.index(name), 1)])


def test_criterion_9_error_taxonomy():
    gaz = {"Kazulin", "Allister", "Muhammadi"}
    utts = [_utt("a", "minister Kazulin said", "Kazulin"), _utt("b", "Mr Allister asked", "Allister"),
            _utt("c", "we thank Allister", "Allister"), _utt("d", "Kazulin left", "Kazulin")]
    judgments = categorize_errors(utts, ["minister Kozulin said", "Mr Muhammadi asked", "we thank", "Kazulin left"],
                                  gaz)
    verdicts = [j.verdict for j in judgments]
    examples = verdicts[:2] == ["misspelling", "diff-name"]
    partition = sum(verdict_counts(judgments).values()) == len(utts)
    same = {str(i): lab for i, lab in enumerate("abcabcab")}
    labels = [("Y", "Y")] * 20 + [("Y", "N")] * 5 + [("N", "Y")] * 10 + [("N", "N")] * 15
    pi = scotts_pi({str(i): a for i, (a, _) in enumerate(labels)}, {str(i): b for i, (_, b) in enumerate(labels)})
    closed = (0.7 - (0.55 ** 2 + 0.45 ** 2)) / (1 - (0.55 ** 2 + 0.45 ** 2))
    ok = examples and partition and scotts_pi(same, same) == 1.0 and abs(pi - closed) < 1e-12
    record_criterion(9, ok, f"verdicts {verdicts}, partition {partition}, pi {pi:.6f} (closed form {closed:.6f})")
    assert ok


# -- 10: infrastructure ----------------------------------------------------------------------

def _pipeline(root: Path) -> dict[str, bytes]:
    spec = {"schema_version": 1, "languages": ["L0", "L1"], "source_languages": ["L0"],
            "train_sentences": {"L0": 30}, "dev_sentences": {"L0": 5}, "test_sentences": {"L0": 6},
            "speaker_proportions": {"L0": {"L0": 0.5, "L1": 0.5}},
            "referent_proportions": {"L0": {"L0": 0.5, "L1": 0.5}},
            "names_per_language": 8, "lexicon_size": 15, "feat_dim": 5, "seed": 4}
    cfg = {"schema_version": 1, "corpus": "corpus", "output": "run", "task": "triangle",
           "model": {"d_model": 8, "ffn_dim": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1},
           "source_languages": ["L0"], "training": {"epochs": 2, "max_tokens": 48, "warmup_steps": 4,
                                                    "average_checkpoints": 2},
           "tokenizer": {"num_merges": 15}, "seed": 2}
    root.mkdir(parents=True)
    (root / "spec.yaml").write_text(json.dumps(spec))
    (root / "config.yaml").write_text(json.dumps(cfg))
    assert main(["generate", "--spec", str(root / "spec.yaml"), "--out", str(root / "corpus")]) == 0
    assert main(["train", "--config", str(root / "config.yaml")]) == 0
    assert main(["evaluate", "--checkpoint", str(root / "run"), "--out", str(root / "run/eval_test.json"),
                 "--max-len", "10"]) == 0
    assert main(["report", "--runs", str(root / "run"), "--out", str(root / "report"), "--no-plot"]) == 0
    files = ["corpus/train.jsonl", "corpus/test.jsonl", "corpus/manifest.json", "run/tokenizer.bpe",
             "run/checkpoints/epoch001.npz", "run/checkpoints/epoch002.npz", "run/checkpoint_avg.npz",
             "run/eval_test.json", "report/report.md", "report/error_histogram.json"]
    out = {f: (root / f).read_bytes() for f in files}
    log = [json.loads(line) for line in (root / "run/train_log.jsonl").read_text().splitlines()]
    out["train_log (without wall_ms)"] = json.dumps([{k: v for k, v in e.items() if k != "wall_ms"} for e in log]).encode()
    return out


def test_criterion_10_infrastructure(tmp_path, capsys):
    rnd = random.Random(10)
    words = ["".join(rnd.choice("abcdefghijklmnopqrstuvwxyzé") for _ in range(rnd.randint(1, 8))) for _ in range(400)]
    sentences = [" ".join(rnd.choice(words) for _ in range(rnd.randint(1, 12))) for _ in range(1000)]
    tok = train_bpe(sentences, 300)
    roundtrip = all(tok.decode(ids) == s and UNK_ID not in ids for s in sentences for ids in [tok.encode(s)])

    rng = np.random.default_rng(10)
    states = [{"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)} for _ in range(5)]
    paths = []
    for i, s in enumerate(states):
        paths.append(tmp_path / f"c{i}.npz")
        save_checkpoint(paths[-1], s)
    avg = average_checkpoints(paths)
    avg_err = max(float(np.max(np.abs(avg[k] - np.mean([s[k] for s in states], axis=0)))) for k in ("w", "b"))

    first, second = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = [k for k in first if first[k] != second[k]]
    capsys.readouterr()

    cfg = ModelConfig.preset("paper-full")
    base = BaseModel(cfg, materialize=False).num_parameters()
    tri = TriangleModel(cfg, materialize=False).num_parameters()
    counts_ok = abs(base - 74e6) / 74e6 <= 0.05 and abs(tri - 117e6) / 117e6 <= 0.05

    ok = roundtrip and avg_err < 1e-12 and not differing and counts_ok
    record_criterion(10, ok, f"BPE roundtrip {roundtrip}, averaging err {avg_err:.1e}, "
                             f"rerun differences {differing or 'none'}, params {base:,} / {tri:,}")
    assert ok
