"""Byte-pair-encoding subword model.

Words are split on whitespace into characters; the last character of each
word carries the end-of-word marker ``</w>``. Decoding concatenates tokens
and turns each marker into a space. The base alphabet therefore holds every
training character twice (plain and marked), so any string over the training
characters encodes without UNK.

Merge learning is greedy: the most frequent adjacent pair is merged, ties go
to the lexicographically smallest pair. Pairs whose concatenation is already
a vocabulary entry are skipped, which keeps ``len(vocab) == specials +
alphabet + merges`` exact.
"""

from __future__ import annotations

import os
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DataError

EOW = "</w>"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)
FORMAT_HEADER = "#namest-bpe v1"


def _normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab: list[str]
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise DataError("duplicate vocabulary entries")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token_id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def _segment(self, word: str) -> list[str]:
        symbols = list(_word_symbols(word))
        while len(symbols) > 1:
            best_rank, best_i = None, -1
            for i in range(len(symbols) - 1):
                rank = self._ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_i = rank, i
            if best_rank is None:
                break
            symbols[best_i:best_i + 2] = [symbols[best_i] + symbols[best_i + 1]]
        return symbols

    def encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._cache.get(word)
        if cached is None:
            cached = tuple(self._index.get(s, UNK_ID) for s in self._segment(word))
            self._cache[word] = cached
        return cached

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in _normalize(text).split():
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise DataError(f"unknown token id {i}")
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            tok = self.vocab[i]
            pieces.append(tok[: -len(EOW)] + " " if tok.endswith(EOW) else tok)
        return "".join(pieces).strip()

    def tokens(self, text: str) -> list[str]:
        return [self.vocab[i] for i in self.encode(text)]

    # -- persistence ----------------------------------------------------
    def save(self, path: str | os.PathLike) -> None:
        """One merge per line, then the vocabulary block, UTF-8 with ``\\n`` endings."""
        lines = [FORMAT_HEADER, f"merges {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append(f"vocab {len(self.vocab)}")
        lines += self.vocab
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != FORMAT_HEADER:
            raise DataError(f"{path}: not a BPE model file")
        n_merges = int(lines[1].split()[1])
        merges = [tuple(line.split(" ")) for line in lines[2:2 + n_merges]]
        header = lines[2 + n_merges].split()
        if header[0] != "vocab":
            raise DataError(f"{path}: malformed vocabulary header")
        n_vocab = int(header[1])
        vocab = lines[3 + n_merges:3 + n_merges + n_vocab]
        return cls([(a, b) for a, b in merges], vocab)


def train_bpe(corpus: Iterable[str], num_merges: int) -> BpeModel:
    """Learn ``num_merges`` merges (fewer if the corpus runs out of pairs)."""
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(_normalize(line).split())
    if not word_counts:
        raise DataError("cannot train BPE on an empty corpus")

    words = sorted(word_counts)
    segs = [list(_word_symbols(w)) for w in words]
    freqs = [word_counts[w] for w in words]
    chars = sorted({c for w in words for c in w})
    alphabet = chars + [c + EOW for c in chars]
    vocab = list(SPECIALS) + alphabet
    known = set(vocab)

    pair_counts: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seg in enumerate(segs):
        for pair in zip(seg, seg[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        best = None
        for pair, count in pair_counts.items():
            if count <= 0 or pair[0] + pair[1] in known:
                continue
            if best is None or count > best[1] or (count == best[1] and pair < best[0]):
                best = (pair, count)
        if best is None:
            break
        pair = best[0]
        merged = pair[0] + pair[1]
        merges.append(pair)
        vocab.append(merged)
        known.add(merged)
        for wi in sorted(where.pop(pair, ())):
            seg, f = segs[wi], freqs[wi]
            for old in zip(seg, seg[1:]):
                pair_counts[old] -= f
            out, i = [], 0
            while i < len(seg):
                if i < len(seg) - 1 and seg[i] == pair[0] and seg[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segs[wi] = out
            for new in zip(out, out[1:]):
                pair_counts[new] += f
                where[new].add(wi)
        pair_counts.pop(pair, None)
    return BpeModel(merges, vocab)
