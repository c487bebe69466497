import json
import logging
import re
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from namest.corpus import (CorpusSpec, NameAnnotation, Utterance, compute_frequencies, filter_long,
                           generate_corpus, plan_sentence, read_manifest, read_split, render_frames,
                           spec_augment, write_corpus)
from namest.errors import ConfigError


def small_spec(**kw):
    base = dict(languages=["L0", "L1"], source_languages=["L0", "L1"],
                train_sentences={"L0": 150, "L1": 60}, dev_sentences={"L0": 20, "L1": 10},
                test_sentences={"L0": 40, "L1": 10},
                speaker_proportions={"L0": {"L0": 0.6, "L1": 0.4}, "L1": {"L1": 1.0}},
                referent_proportions={"L0": {"L0": 0.6, "L1": 0.4}, "L1": {"L0": 0.2, "L1": 0.8}},
                names_per_language=30, lexicon_size=40, feat_dim=8)
    base.update(kw)
    return CorpusSpec(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(small_spec())


def test_seed_fixes_corpus_bit_exactly(corpus):
    again = generate_corpus(small_spec())
    for a, b in zip(corpus.train + corpus.test, again.train + again.test):
        assert a.transcript == b.transcript and a.names == b.names
        assert np.array_equal(a.frames, b.frames)
    other = generate_corpus(small_spec(seed=1))
    assert [u.transcript for u in other.train] != [u.transcript for u in corpus.train]


def test_name_lexicons_are_disjoint(corpus):
    langs = list(corpus.languages.values())
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            assert not set(a.names) & set(b.names)
            assert not set(a.names) & set(b.words)


def test_annotations_and_translations(corpus):
    for u in corpus.train + corpus.dev + corpus.test:
        tokens = u.transcript.split()
        for n in u.names:
            assert tokens[n.position] == n.token
            assert n.token in u.translations["T0"].split()
            assert n.token in corpus.languages[n.referent_nat].names
            assert n.speaker_nat == u.speaker_nat
        phonemes = sum(len(corpus.languages[u.src_lang].pronunciation(t))
                       if t in corpus.languages[u.src_lang].word_pronunciations
                       else len(corpus.languages[next(n.referent_nat for n in u.names if n.token == t)]
                                .name_pronunciations[t]) for t in tokens)
        assert len(u.frames) >= phonemes


def test_splits_are_sentence_disjoint(corpus):
    keys = [{(u.src_lang, u.transcript) for u in s} for s in (corpus.train, corpus.dev, corpus.test)]
    assert not keys[0] & keys[1] and not keys[0] & keys[2] and not keys[1] & keys[2]


def test_zero_accent_gives_identical_frames(corpus):
    spec = small_spec(accent_strength=0.0)
    c = generate_corpus(spec)
    assert all(not np.any(a) for a in c.accents.values())
    prons = [c.languages["L0"].word_pronunciations[w] for w in c.languages["L0"].words[:3]]
    a = render_frames(c.prototypes, c.accents["L0"], prons, np.random.default_rng(7))
    b = render_frames(c.prototypes, c.accents["L1"], prons, np.random.default_rng(7))
    assert np.array_equal(a, b)
    # with accents the same draw differs
    a = render_frames(corpus.prototypes, corpus.accents["L0"], prons, np.random.default_rng(7))
    b = render_frames(corpus.prototypes, corpus.accents["L1"], prons, np.random.default_rng(7))
    assert not np.array_equal(a, b)


def _utt(text, names):
    return Utterance("u", "L0", "L0", "s", np.zeros((1, 2), np.float32), text, {"T0": text},
                     [NameAnnotation(n, "L0", "L0", text.split().index(n)) for n in names])


def test_frequency_counting():
    train = ["Abe x", "y Abe", "Abe Abe z", "abe"]
    out = compute_frequencies(train, [_utt("Abe w", ["Abe"]), _utt("Bo w", ["Bo"])])
    assert out[0].names[0].frequency == 4  # two in one sentence count twice, lowercase is distinct
    assert out[1].names[0].frequency == 0
    out = compute_frequencies(["Cy a", "b Cy", "Cy"], [_utt("Cy", ["Cy"])])
    assert out[0].names[0].frequency == 3


def test_frequencies_match_grep_of_emitted_files(corpus, tmp_path):
    write_corpus(corpus, tmp_path)
    train_text = (tmp_path / "train.jsonl").read_text(encoding="utf-8")
    transcripts = re.findall(r'"transcript": "([^"]*)"', train_text)
    assert len(transcripts) == len(corpus.train)
    for line in (tmp_path / "test.jsonl").read_text(encoding="utf-8").splitlines():
        for n in json.loads(line)["names"]:
            grep = sum(len(re.findall(r"(?<!\S)" + re.escape(n["token"]) + r"(?!\S)", t)) for t in transcripts)
            assert n["frequency"] == grep


def test_roundtrip_files_and_manifest(corpus, tmp_path):
    write_corpus(corpus, tmp_path)
    back = read_split(tmp_path / "test.jsonl")
    assert [u.transcript for u in back] == [u.transcript for u in corpus.test]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(back, corpus.test))
    manifest = read_manifest(tmp_path)
    assert manifest["seed"] == 0 and manifest["counts"]["train"] == len(corpus.train)
    assert CorpusSpec.from_dict(manifest["spec"]) == corpus.spec
    first = (tmp_path / "manifest.json").read_bytes()
    write_corpus(generate_corpus(small_spec()), tmp_path)
    assert (tmp_path / "manifest.json").read_bytes() == first


def test_marginals_match_spec_proportions():
    spec = small_spec(speaker_proportions={"L0": {"L0": 0.5, "L1": 0.3, "L2": 0.2}, "L1": {"L1": 1.0}},
                      referent_proportions={"L0": {"L0": 0.6, "L1": 0.3, "L2": 0.1},
                                            "L1": {"L1": 1.0}}, languages=["L0", "L1", "L2"])
    rng = np.random.default_rng(11)
    plans = [plan_sentence(spec, "L0", rng) for _ in range(10_000)]
    speakers = Counter(p.speaker_nat for p in plans)
    referents = Counter(s[1] for p in plans for s in p.name_slots)
    for counts, props in ((speakers, spec.speaker_proportions["L0"]), (referents, spec.referent_proportions["L0"])):
        keys = list(props)
        obs = np.array([counts[k] for k in keys])
        exp = np.array([props[k] for k in keys]) * obs.sum()
        assert chisquare(obs, exp).pvalue > 0.01


def test_filter_long(caplog):
    short = _utt("a", [])
    long = Utterance("v", "L0", "L0", "s", np.zeros((50, 2), np.float32), "b", {"T0": "b"}, [])
    assert filter_long([], 10) == []
    assert filter_long([short, short], 10) == [short, short]
    with caplog.at_level(logging.INFO, logger="namest.corpus"):
        assert filter_long([short, long], 10) == [short]
    assert "removed 1" in caplog.text


def test_spec_augment_limits(rng):
    frames = np.ones((100, 8), np.float32)
    for _ in range(50):
        out = spec_augment(frames, rng)
        zero_rows = np.all(out == 0, axis=1).sum()
        zero_cols = np.all(out == 0, axis=0).sum()
        assert zero_cols <= 4
        assert zero_rows <= 20 or zero_cols == 8


def test_inconsistent_specs_are_rejected():
    with pytest.raises(ConfigError):
        small_spec(names_per_language=0)
    with pytest.raises(ConfigError):
        small_spec(referent_proportions={"L0": {"L0": 0.5}, "L1": {"L1": 1.0}})
    with pytest.raises(ConfigError):
        small_spec(train_sentences={"L7": 3})
    with pytest.raises(ConfigError):
        CorpusSpec.from_dict({"bogus": 1})
