"""Synthetic multilingual speech translation corpus.

"Audio" is a sequence of feature frames built from phoneme prototypes:
each phoneme emits a few frames of ``prototype + accent offset + noise`` and
words are separated by a silence frame. Three factors are controlled
independently:

* name frequency: names are drawn from a Zipf distribution per referent
  language, so the training set holds a head of frequent names and a tail of
  rare ones;
* referent nationality: every language owns phonemes no other language has
  (placed near an anchor phoneme of the primary language) and spells its
  shared phonemes partly differently, so names from a language the model has
  not heard tend to be rendered with primary-language spellings;
* speaker nationality: a fixed accent offset per (speaker language, phoneme)
  shifts every frame a speaker produces.

Phonemes may have two spellings; each word fixes one choice, names more
irregularly than common words, so rare names cannot be fully spelled from
their sound alone.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import string
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SCHEMA_VERSION = 1

_CORE_CONSONANTS = list("ptkbdgmnslrfvh")
_CORE_VOWELS = list("aeiou")
_EXTRA_LETTERS = list("qwxyzjc")
_DIGRAPHS = ["sz", "ij", "th", "ch", "kh", "ae", "oe", "ou", "zh", "gn", "ll", "rr", "sh", "ph"]


@dataclass
class CorpusSpec:
    languages: list[str] = field(default_factory=lambda: ["L0", "L1", "L2"])
    source_languages: list[str] = field(default_factory=lambda: ["L0", "L1"])
    target_languages: list[str] = field(default_factory=lambda: ["T0"])
    primary_language: str = "L0"
    speakers_per_language: int = 4
    train_sentences: dict[str, int] = field(default_factory=lambda: {"L0": 5000, "L1": 2000})
    dev_sentences: dict[str, int] = field(default_factory=lambda: {"L0": 300, "L1": 100})
    test_sentences: dict[str, int] = field(default_factory=lambda: {"L0": 600, "L1": 100})
    speaker_proportions: dict[str, dict[str, float]] = field(default_factory=lambda: {
        "L0": {"L0": 0.5, "L1": 0.25, "L2": 0.25},
        "L1": {"L1": 1.0},
    })
    referent_proportions: dict[str, dict[str, float]] = field(default_factory=lambda: {
        "L0": {"L0": 0.5, "L1": 0.3, "L2": 0.2},
        "L1": {"L0": 0.2, "L1": 0.8},
    })
    names_per_language: int = 120
    zipf_exponent: float = 1.1
    name_rate: float = 0.9
    words_per_sentence: tuple[int, int] = (2, 4)
    word_syllables: tuple[int, int] = (1, 2)
    name_syllables: tuple[int, int] = (2, 2)
    lexicon_size: int = 120
    unique_phonemes: int = 4
    distinctiveness: float = 2.5
    grapheme_divergence: float = 0.3
    ambiguity: float = 0.35
    common_regularity: float = 0.85
    name_regularity: float = 0.5
    frames_per_phoneme: tuple[int, int] = (2, 3)
    feat_dim: int = 20
    accent_strength: float = 1.0
    noise_level: float = 0.4
    max_frames: int = 400
    name_eval: bool = True
    seed: int = 0

    def __post_init__(self):
        self.words_per_sentence = tuple(self.words_per_sentence)
        self.frames_per_phoneme = tuple(self.frames_per_phoneme)
        self.word_syllables = tuple(self.word_syllables)
        self.name_syllables = tuple(self.name_syllables)
        self.validate()

    def validate(self) -> None:
        langs = set(self.languages)
        if len(langs) != len(self.languages):
            raise ConfigError("duplicate language ids")
        if self.primary_language not in langs:
            raise ConfigError("primary_language must be one of languages")
        if not self.source_languages or not set(self.source_languages) <= langs:
            raise ConfigError("source_languages must be a non-empty subset of languages")
        if langs & set(self.target_languages):
            raise ConfigError("target language ids must differ from source/referent ids")
        if len(self.source_languages) >= 2 and len(langs) < 2:
            raise ConfigError("multilingual corpora need at least two languages")
        if self.name_eval and (self.names_per_language <= 0 or self.name_rate <= 0):
            raise ConfigError("name-accuracy evaluation needs names_per_language > 0 and name_rate > 0")
        for split in ("train_sentences", "dev_sentences", "test_sentences"):
            counts = getattr(self, split)
            if set(counts) - set(self.source_languages):
                raise ConfigError(f"{split} mentions languages outside source_languages")
        for table in ("speaker_proportions", "referent_proportions"):
            props = getattr(self, table)
            for src in self.source_languages:
                if src not in props:
                    raise ConfigError(f"{table} lacks an entry for {src}")
                dist = props[src]
                if set(dist) - langs or any(p < 0 for p in dist.values()):
                    raise ConfigError(f"{table}[{src}] has unknown languages or negative weights")
                if abs(sum(dist.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"{table}[{src}] must sum to 1")
        lo, hi = self.words_per_sentence
        if not 1 <= lo <= hi:
            raise ConfigError("words_per_sentence must satisfy 1 <= min <= max")
        for key in ("frames_per_phoneme", "word_syllables", "name_syllables"):
            lo, hi = getattr(self, key)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{key} must satisfy 1 <= min <= max")
        if self.accent_strength < 0 or self.noise_level < 0:
            raise ConfigError("accent_strength and noise_level must be >= 0")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("words_per_sentence", "frames_per_phoneme", "word_syllables", "name_syllables"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SynthLanguage:
    """Phonology, orthography and lexicons of one synthetic language.

    ``spellings[p]`` lists the graphemes phoneme ``p`` may be written with;
    the first one is the regular spelling.
    """

    id: str
    phonemes: list[int]
    spellings: dict[int, list[str]]
    names: list[str]
    name_pronunciations: dict[str, tuple[int, ...]]
    words: list[str]
    word_pronunciations: dict[str, tuple[int, ...]]
    translations: dict[str, list[str]]

    def spell(self, pron: Sequence[int], choices: Sequence[int]) -> str:
        return "".join(self.spellings[p][c] for p, c in zip(pron, choices))

    def pronunciation(self, word: str) -> tuple[int, ...]:
        if word in self.word_pronunciations:
            return self.word_pronunciations[word]
        return self.name_pronunciations[word]


@dataclass
class NameAnnotation:
    token: str
    referent_nat: str
    speaker_nat: str
    position: int
    frequency: int | None = None


@dataclass
class Utterance:
    id: str
    src_lang: str
    speaker_nat: str
    speaker_id: str
    frames: np.ndarray
    transcript: str
    translations: dict[str, str]
    names: list[NameAnnotation]

    def to_json(self) -> dict:
        frames = np.ascontiguousarray(self.frames, dtype="<f4")
        return {
            "id": self.id,
            "src_lang": self.src_lang,
            "speaker_nat": self.speaker_nat,
            "speaker_id": self.speaker_id,
            "frames": base64.b64encode(frames.tobytes()).decode("ascii"),
            "frames_shape": list(frames.shape),
            "transcript": self.transcript,
            "translations": dict(self.translations),
            "names": [{k: v for k, v in asdict(n).items() if v is not None} for n in self.names],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Utterance":
        shape = tuple(data["frames_shape"])
        raw = base64.b64decode(data["frames"])
        frames = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return cls(data["id"], data["src_lang"], data["speaker_nat"], data.get("speaker_id", ""),
                   frames, data["transcript"], dict(data["translations"]),
                   [NameAnnotation(**n) for n in data["names"]])


@dataclass
class Corpus:
    spec: CorpusSpec
    languages: dict[str, SynthLanguage]
    prototypes: np.ndarray
    accents: dict[str, np.ndarray]
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def gazetteer(self) -> set[str]:
        return {n for lang in self.languages.values() for n in lang.names}


# -- lexicon construction -----------------------------------------------------

class _Inventory:
    """Global phoneme table: shared core phonemes then per-language unique ones."""

    def __init__(self, spec: CorpusSpec, rng: np.random.Generator):
        self.consonants = list(range(len(_CORE_CONSONANTS)))
        self.vowels = list(range(len(_CORE_CONSONANTS), len(_CORE_CONSONANTS) + len(_CORE_VOWELS)))
        core = len(self.consonants) + len(self.vowels)
        protos = [rng.normal(size=spec.feat_dim) for _ in range(core)]
        self.unique: dict[str, list[int]] = {}
        self.is_vowel = [False] * len(self.consonants) + [True] * len(self.vowels)
        for lang in spec.languages:
            if lang == spec.primary_language:
                self.unique[lang] = []
                continue
            ids = []
            for k in range(spec.unique_phonemes):
                vowel = k % 4 == 3
                anchor = int(rng.choice(self.vowels if vowel else self.consonants))
                direction = rng.normal(size=spec.feat_dim)
                direction /= np.linalg.norm(direction)
                protos.append(protos[anchor] + spec.distinctiveness * direction)
                self.is_vowel.append(vowel)
                ids.append(len(protos) - 1)
            self.unique[lang] = ids
        self.prototypes = np.stack(protos).astype(np.float64)


def _build_languages(spec: CorpusSpec, rng: np.random.Generator):
    inv = _Inventory(spec, rng)
    graph_pool = list(_EXTRA_LETTERS) + list(_DIGRAPHS)
    rng.shuffle(graph_pool)
    pool_iter = iter(graph_pool * 4)
    base_spelling = {p: (_CORE_CONSONANTS + _CORE_VOWELS)[p] for p in inv.consonants + inv.vowels}

    spellings: dict[str, dict[int, list[str]]] = {}
    for lang in spec.languages:
        table: dict[int, list[str]] = {}
        for p, g in base_spelling.items():
            if lang != spec.primary_language and rng.random() < spec.grapheme_divergence:
                g = next(pool_iter)
            table[p] = [g]
        for p in inv.unique[lang]:
            table[p] = [next(pool_iter)]
        for p in list(table):
            if rng.random() < spec.ambiguity:
                alt = table[p][0] * 2 if len(table[p][0]) == 1 else table[p][0][0]
                table[p].append(alt)
        spellings[lang] = table

    used: set[str] = set()
    pron_used: set[tuple[str, tuple[int, ...]]] = set()

    def make_word(lang: str, syllables: int, regularity: float, unique_bias: bool) -> tuple[str, tuple, list]:
        consonants = inv.consonants + [p for p in inv.unique[lang] if not inv.is_vowel[p]]
        vowels = inv.vowels + [p for p in inv.unique[lang] if inv.is_vowel[p]]
        uniq = inv.unique[lang]
        for _ in range(1000):
            pron: list[int] = []
            for _s in range(syllables):
                pron.append(int(rng.choice(consonants)))
                pron.append(int(rng.choice(vowels)))
                if rng.random() < 0.3:
                    pron.append(int(rng.choice(consonants)))
            if unique_bias and uniq and not set(pron) & set(uniq):
                pron[int(rng.integers(len(pron)))] = int(rng.choice(uniq))
            choices = [0 if (len(spellings[lang][p]) == 1 or rng.random() < regularity) else 1 for p in pron]
            word = "".join(spellings[lang][p][c] for p, c in zip(pron, choices))
            key = (lang, tuple(pron))
            if word.lower() in used or key in pron_used:
                continue
            used.add(word.lower())
            pron_used.add(key)
            return word, tuple(pron), choices
        raise ConfigError("could not generate enough distinct words; enlarge the inventory")

    words_by_lang: dict[str, tuple[list, dict]] = {}
    for lang in spec.languages:
        words, prons = [], {}
        for _ in range(spec.lexicon_size):
            w, pron, _c = make_word(lang, int(rng.integers(spec.word_syllables[0], spec.word_syllables[1] + 1)),
                                    spec.common_regularity, False)
            words.append(w)
            prons[w] = pron
        words_by_lang[lang] = (words, prons)

    names_by_lang: dict[str, tuple[list, dict]] = {}
    for lang in spec.languages:
        names, prons = [], {}
        for _ in range(spec.names_per_language):
            w, pron, _c = make_word(lang, int(rng.integers(spec.name_syllables[0], spec.name_syllables[1] + 1)),
                                    spec.name_regularity, True)
            name = w[0].upper() + w[1:]
            names.append(name)
            prons[name] = pron
        names_by_lang[lang] = (names, prons)

    target_words: dict[str, list[str]] = {}
    letters = string.ascii_lowercase
    for tgt in spec.target_languages:
        vocab = []
        while len(vocab) < spec.lexicon_size:
            n = int(rng.integers(3, 7))
            w = "".join(letters[int(i)] for i in rng.integers(0, 26, size=n))
            if w in used:
                continue
            used.add(w)
            vocab.append(w)
        target_words[tgt] = vocab

    languages = {}
    for lang in spec.languages:
        words, wprons = words_by_lang[lang]
        names, nprons = names_by_lang[lang]
        languages[lang] = SynthLanguage(
            id=lang,
            phonemes=inv.consonants + inv.vowels + inv.unique[lang],
            spellings=spellings[lang],
            names=names,
            name_pronunciations=nprons,
            words=words,
            word_pronunciations=wprons,
            translations={tgt: list(target_words[tgt]) for tgt in spec.target_languages},
        )
    accents = {}
    for nat in spec.languages:
        directions = rng.normal(size=inv.prototypes.shape)
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        accents[nat] = spec.accent_strength * directions
    return languages, inv.prototypes, accents


# -- rendering ----------------------------------------------------------------

def render_frames(prototypes: np.ndarray, accent: np.ndarray, pronunciations: Sequence[Sequence[int]],
                  rng: np.random.Generator, frames_per_phoneme: tuple[int, int] = (2, 3),
                  noise_level: float = 0.4) -> np.ndarray:
    """Frames for a sentence given per-word phoneme sequences.

    A silence frame (all-zero prototype) opens the utterance and follows every
    word.
    """
    lo, hi = frames_per_phoneme
    index: list[int] = [-1]
    for pron in pronunciations:
        for p in pron:
            index.extend([p] * int(rng.integers(lo, hi + 1)))
        index.append(-1)
    idx = np.array(index)
    speech = idx >= 0
    frames = np.zeros((len(idx), prototypes.shape[1]))
    frames[speech] = prototypes[idx[speech]] + accent[idx[speech]]
    frames += noise_level * rng.normal(size=frames.shape)
    return frames.astype(np.float32)


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def _choice(rng: np.random.Generator, table: dict[str, float]) -> str:
    keys = list(table)
    return keys[int(rng.choice(len(keys), p=np.array([table[k] for k in keys])))]


@dataclass
class SentencePlan:
    src_lang: str
    speaker_nat: str
    speaker_index: int
    concepts: list[int]
    name_slots: list[tuple[int, str, int]]


def plan_sentence(spec: CorpusSpec, src: str, rng: np.random.Generator) -> SentencePlan:
    """Draw the categorical content of one sentence (no frames)."""
    speaker_nat = _choice(rng, spec.speaker_proportions[src])
    speaker_index = int(rng.integers(spec.speakers_per_language))
    lo, hi = spec.words_per_sentence
    n_words = int(rng.integers(lo, hi + 1))
    concepts = [int(c) for c in rng.integers(0, spec.lexicon_size, size=n_words)]
    slots = []
    if spec.names_per_language > 0 and rng.random() < spec.name_rate:
        referent = _choice(rng, spec.referent_proportions[src])
        name_index = int(rng.choice(spec.names_per_language,
                                    p=_zipf_weights(spec.names_per_language, spec.zipf_exponent)))
        slots.append((int(rng.integers(0, n_words + 1)), referent, name_index))
    return SentencePlan(src, speaker_nat, speaker_index, concepts, slots)


def _realize(spec: CorpusSpec, plan: SentencePlan, languages: dict[str, SynthLanguage]):
    lang = languages[plan.src_lang]
    words = [lang.words[c] for c in plan.concepts]
    translations = {t: [lang.translations[t][c] for c in plan.concepts] for t in spec.target_languages}
    prons = [lang.word_pronunciations[w] for w in words]
    names = []
    for position, referent, name_index in sorted(plan.name_slots):
        ref_lang = languages[referent]
        name = ref_lang.names[name_index]
        words.insert(position, name)
        prons.insert(position, ref_lang.name_pronunciations[name])
        for t in spec.target_languages:
            translations[t].insert(position, name)
        names.append(NameAnnotation(name, referent, plan.speaker_nat, position))
    return words, prons, {t: " ".join(v) for t, v in translations.items()}, names


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate train/dev/test utterances; identical specs give identical corpora.

    Test and dev name annotations carry their frequency in the training
    transcripts.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    lexicon_seed, sentence_seed = root.spawn(2)
    languages, prototypes, accents = _build_languages(spec, np.random.default_rng(lexicon_seed))

    seen: set[tuple[str, str]] = set()
    splits: dict[str, list[Utterance]] = {}
    for split_index, split in enumerate(SPLITS):
        counts = getattr(spec, f"{split}_sentences")
        out: list[Utterance] = []
        for src in spec.source_languages:
            src_index = spec.languages.index(src)
            for i in range(counts.get(src, 0)):
                for attempt in range(100):
                    rng = np.random.default_rng(
                        [sentence_seed.entropy % (2 ** 63), split_index, src_index, i, attempt])
                    plan = plan_sentence(spec, src, rng)
                    words, prons, translations, names = _realize(spec, plan, languages)
                    transcript = " ".join(words)
                    if (src, transcript) not in seen:
                        break
                else:
                    raise ConfigError("corpus spec too small to draw distinct sentences")
                seen.add((src, transcript))
                frames = render_frames(prototypes, accents[plan.speaker_nat], prons, rng,
                                       spec.frames_per_phoneme, spec.noise_level)
                out.append(Utterance(
                    id=f"{split}-{src}-{i:06d}", src_lang=src, speaker_nat=plan.speaker_nat,
                    speaker_id=f"{plan.speaker_nat}-spk{plan.speaker_index}", frames=frames,
                    transcript=transcript, translations=translations, names=names))
        splits[split] = out

    train_counts = token_frequencies(u.transcript for u in splits["train"])
    for split in ("dev", "test"):
        splits[split] = annotate_frequencies(splits[split], train_counts)
    return Corpus(spec, languages, prototypes, accents, splits["train"], splits["dev"], splits["test"])


# -- frequencies and filtering -----------------------------------------------

def token_frequencies(texts: Iterable[str]) -> Counter:
    """Case-sensitive whitespace-token counts."""
    counts: Counter = Counter()
    for text in texts:
        counts.update(text.split())
    return counts


def annotate_frequencies(utterances: Sequence[Utterance], counts: Counter) -> list[Utterance]:
    return [replace(u, names=[replace(n, frequency=int(counts.get(n.token, 0))) for n in u.names])
            for u in utterances]


def compute_frequencies(train_targets: Iterable[str], utterances: Sequence[Utterance]) -> list[Utterance]:
    """Copy of ``utterances`` whose name annotations carry training-target counts."""
    return annotate_frequencies(utterances, token_frequencies(train_targets))


def filter_long(utterances: Sequence[Utterance], max_frames: int) -> list[Utterance]:
    kept = [u for u in utterances if len(u.frames) <= max_frames]
    removed = len(utterances) - len(kept)
    if removed:
        logger.info("filter_long removed %d of %d utterances longer than %d frames",
                    removed, len(utterances), max_frames)
    return kept


def normalize_features(frames: np.ndarray) -> np.ndarray:
    """Utterance-level mean/variance normalisation per feature channel."""
    mu = frames.mean(axis=0, keepdims=True)
    sd = frames.std(axis=0, keepdims=True)
    return ((frames - mu) / np.maximum(sd, 1e-5)).astype(frames.dtype)


def spec_augment(frames: np.ndarray, rng: np.random.Generator, max_time_masks: int = 2,
                 max_time_fraction: float = 0.1, max_freq_masks: int = 2, max_freq_width: int = 2) -> np.ndarray:
    """Zero up to two time spans (each at most 10% of frames) and two channel bands."""
    out = frames.copy()
    t, f = out.shape
    width_cap = max(1, int(max_time_fraction * t))
    for _ in range(int(rng.integers(0, max_time_masks + 1))):
        w = int(rng.integers(0, width_cap + 1))
        start = int(rng.integers(0, max(1, t - w + 1)))
        out[start:start + w] = 0.0
    for _ in range(int(rng.integers(0, max_freq_masks + 1))):
        w = int(rng.integers(0, max_freq_width + 1))
        start = int(rng.integers(0, max(1, f - w + 1)))
        out[:, start:start + w] = 0.0
    return out


# -- persistence ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_split(path: str | os.PathLike, utterances: Iterable[Utterance]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for u in utterances:
            fh.write(json.dumps(u.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def read_split(path: str | os.PathLike) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_json(json.loads(line)) for line in fh if line.strip()]


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> Path:
    """Write ``{train,dev,test}.jsonl``, ``lexicon.json`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_split(out / f"{split}.jsonl", corpus.split(split))
    lexicon = {lang.id: {"names": lang.names, "words": lang.words,
                         "spellings": {str(k): v for k, v in lang.spellings.items()},
                         "translations": lang.translations}
               for lang in corpus.languages.values()}
    (out / "lexicon.json").write_text(json.dumps(lexicon, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                      encoding="utf-8")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "spec": corpus.spec.to_dict(),
        "seed": corpus.spec.seed,
        "counts": {s: len(corpus.split(s)) for s in SPLITS},
        "files": {name: _sha256(out / name) for name in
                  [f"{s}.jsonl" for s in SPLITS] + ["lexicon.json"]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_lexicon(corpus_dir: str | os.PathLike) -> dict:
    return json.loads((Path(corpus_dir) / "lexicon.json").read_text(encoding="utf-8"))


def read_manifest(corpus_dir: str | os.PathLike) -> dict:
    return json.loads((Path(corpus_dir) / "manifest.json").read_text(encoding="utf-8"))
