"""Single-decoder and triangle speech models, the weighted multi-loss, decoding.

The triangle model shares one encoder between a transcription decoder and
a translation decoder. Every translation decoder layer cross-attends both to
the encoder output and to the transcription decoder's output embeddings
(taken before its vocabulary projection); the two contexts are concatenated
and linearly mapped back to ``d_model``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .layers import (MIN_FRAMES, Module, ModelConfig, ParamInit, SpeechEncoder, TextDecoder,
                     load_preset)

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass(frozen=True)
class LossWeights:
    lambda_asr: float = 0.5
    lambda_st: float = 0.5

    def __post_init__(self):
        for name in ("lambda_asr", "lambda_st"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        """``default`` is (0.5, 0.5); ``name-accuracy-calibrated`` is (0.8, 0.2)."""
        data = load_preset(name).get("loss_weights")
        if data is None:
            raise ConfigError(f"preset {name!r} defines no loss weights")
        return cls(float(data["lambda_asr"]), float(data["lambda_st"]))


@dataclass
class Batch:
    """Padded model inputs.

    ``prev_*`` are decoder inputs (BOS + tokens) and ``target_*`` the
    shifted outputs (tokens + EOS), both padded with PAD. For single-task
    models only the ``*_output`` pair is used; the triangle additionally uses
    the ``*_transcript`` pair.
    """

    features: np.ndarray
    lengths: np.ndarray
    prev_output: np.ndarray | None = None
    target_output: np.ndarray | None = None
    prev_transcript: np.ndarray | None = None
    target_transcript: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.lengths)


def _pad_tokens(seqs: Sequence[Sequence[int]], prefix: int | None, suffix: int | None) -> np.ndarray:
    rows = [([prefix] if prefix is not None else []) + list(s) + ([suffix] if suffix is not None else [])
            for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(features: Sequence[np.ndarray], outputs: Sequence[Sequence[int]] | None = None,
               transcripts: Sequence[Sequence[int]] | None = None, dtype="float64") -> Batch:
    """Pad a list of ``[T, F]`` feature arrays and token sequences into a Batch.

    Utterances shorter than the subsampler minimum are right-padded with zero
    frames; their valid length is kept, so a single-frame utterance still
    yields one encoder position.
    """
    if not features:
        raise ContractError("empty batch")
    lengths = np.array([len(f) for f in features], dtype=np.int64)
    if lengths.min() < 1:
        raise ContractError("utterances need at least one frame")
    width = max(int(lengths.max()), MIN_FRAMES)
    dim = features[0].shape[1]
    feats = np.zeros((len(features), width, dim), dtype=dtype)
    for i, f in enumerate(features):
        feats[i, : len(f)] = f
    batch = Batch(feats, lengths)
    if outputs is not None:
        batch.prev_output = _pad_tokens(outputs, BOS, None)
        batch.target_output = _pad_tokens(outputs, None, EOS)
    if transcripts is not None:
        batch.prev_transcript = _pad_tokens(transcripts, BOS, None)
        batch.target_transcript = _pad_tokens(transcripts, None, EOS)
    return batch


def _check_frames(cfg: ModelConfig, batch: Batch) -> None:
    if batch.features.shape[1] > cfg.max_positions * 4:
        raise ContractError(f"input of {batch.features.shape[1]} frames exceeds the positional range")


class BaseModel(Module):
    """Encoder plus one decoder (plain ASR or direct ST)."""

    kind = "base"

    def __init__(self, cfg: ModelConfig, seed: int = 0, materialize: bool = True,
                 encoder: SpeechEncoder | None = None, decoder: TextDecoder | None = None):
        self.cfg = cfg
        init = ParamInit(seed, cfg.dtype, materialize)
        self.encoder = encoder if encoder is not None else SpeechEncoder(init, cfg)
        self.decoder = decoder if decoder is not None else TextDecoder(init, cfg, n_memories=1, pad_id=PAD)

    def encode(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        _check_frames(self.cfg, batch)
        return self.encoder(Tensor(batch.features, dtype=self.cfg.dtype), batch.lengths)

    def forward(self, batch: Batch) -> Tensor:
        """Teacher-forced logits ``[B, T, V]``."""
        if batch.prev_output is None:
            raise ContractError("base_forward needs target tokens")
        memory, mask = self.encode(batch)
        hidden = self.decoder.hidden(batch.prev_output, [(memory, mask)])
        return self.decoder.project(hidden)

    def loss_terms(self, batch: Batch, epsilon: float) -> dict[str, tuple[Tensor, int]]:
        """Summed smoothed NLL and token count for the single task."""
        logits = self.forward(batch)
        total = ad.cross_entropy_label_smoothed(logits, batch.target_output, epsilon, PAD, "sum")
        return {"out": (total, int((batch.target_output != PAD).sum()))}


@dataclass
class TriangleForwardState:
    memory: Tensor
    memory_mask: np.ndarray
    transcript_embeddings: Tensor
    transcript_mask: np.ndarray
    asr_logits: Tensor
    st_logits: Tensor


class TriangleModel(Module):
    kind = "triangle"

    def __init__(self, cfg: ModelConfig, seed: int = 0, materialize: bool = True):
        self.cfg = cfg
        init = ParamInit(seed, cfg.dtype, materialize)
        self.encoder = SpeechEncoder(init, cfg)
        self.asr_decoder = TextDecoder(init, cfg, n_memories=1, pad_id=PAD)
        self.st_decoder = TextDecoder(init, cfg, n_memories=2, pad_id=PAD)

    def asr_model(self) -> BaseModel:
        """A BaseModel view sharing this model's encoder and transcription decoder."""
        return BaseModel(self.cfg, materialize=False, encoder=self.encoder, decoder=self.asr_decoder)

    def encode(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        _check_frames(self.cfg, batch)
        return self.encoder(Tensor(batch.features, dtype=self.cfg.dtype), batch.lengths)

    def transcript_embeddings(self, memory: Tensor, memory_mask: np.ndarray,
                              prev_transcript: np.ndarray) -> tuple[Tensor, np.ndarray]:
        hidden = self.asr_decoder.hidden(prev_transcript, [(memory, memory_mask)])
        return hidden, prev_transcript != PAD

    def forward(self, batch: Batch) -> TriangleForwardState:
        if batch.prev_transcript is None:
            raise ContractError("triangle training needs the transcript stream")
        if batch.prev_output is None:
            raise ContractError("triangle training needs the translation stream")
        memory, mask = self.encode(batch)
        t_emb, t_mask = self.transcript_embeddings(memory, mask, batch.prev_transcript)
        asr_logits = self.asr_decoder.project(t_emb)
        st_hidden = self.st_decoder.hidden(batch.prev_output, [(memory, mask), (t_emb, t_mask)])
        return TriangleForwardState(memory, mask, t_emb, t_mask, asr_logits,
                                    self.st_decoder.project(st_hidden))

    def loss_terms(self, batch: Batch, epsilon: float) -> dict[str, tuple[Tensor, int]]:
        state = self.forward(batch)
        asr = ad.cross_entropy_label_smoothed(state.asr_logits, batch.target_transcript, epsilon, PAD, "sum")
        st = ad.cross_entropy_label_smoothed(state.st_logits, batch.target_output, epsilon, PAD, "sum")
        return {"asr": (asr, int((batch.target_transcript != PAD).sum())),
                "st": (st, int((batch.target_output != PAD).sum()))}


def triangle_loss(state: TriangleForwardState, batch: Batch, weights: LossWeights,
                  epsilon: float = 0.1) -> Tensor:
    """``lambda_asr * CE(asr) + lambda_st * CE(st)``, each CE a mean over non-pad tokens."""
    asr = ad.cross_entropy_label_smoothed(state.asr_logits, batch.target_transcript, epsilon, PAD)
    st = ad.cross_entropy_label_smoothed(state.st_logits, batch.target_output, epsilon, PAD)
    return asr * weights.lambda_asr + st * weights.lambda_st


def build_model(kind: str, cfg: ModelConfig, seed: int = 0, materialize: bool = True) -> Module:
    if kind == "base":
        return BaseModel(cfg, seed, materialize)
    if kind == "triangle":
        return TriangleModel(cfg, seed, materialize)
    raise ConfigError(f"unknown model kind {kind!r}")


def st_exclusive_parameters(model: TriangleModel) -> dict[str, Tensor]:
    return {f"st_decoder.{name}": p for name, p in model.st_decoder.named_parameters()}


# -- decoding ---------------------------------------------------------------

@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    truncated: bool = False


def _step_log_probs(decoder: TextDecoder, prefixes: np.ndarray, memories) -> np.ndarray:
    hidden = decoder.hidden(prefixes, memories)
    logits = decoder.project(hidden[:, -1:, :])
    logp = ad.log_softmax(logits, axis=-1).data[:, 0, :].astype(np.float64)
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def _expand_memories(memories, index: np.ndarray):
    return [(Tensor(mem.data[index], dtype=mem.dtype), mask[index]) for mem, mask in memories]


def beam_search(decoder: TextDecoder, memories, beam: int, max_len: int) -> Hypothesis:
    """Beam search for one utterance (``memories`` have batch size 1).

    Scores are summed log-probabilities without length normalisation.
    Candidates are ranked by score, ties by (hypothesis index, token id);
    an EOS candidate finishes a hypothesis only if it ranks within the top
    ``beam``, so ``beam=1`` is exactly greedy search. Search stops once ``beam`` hypotheses have finished and the best of them
    scores at least as high as every live prefix, or at ``max_len`` tokens,
    in which case an unfinished result is flagged as truncated.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    with ad.no_grad():
        for step in range(max_len):
            prefixes = np.array([[BOS] + toks for toks, _ in alive], dtype=np.int64)
            mems = _expand_memories(memories, np.zeros(len(alive), dtype=np.int64))
            logp = _step_log_probs(decoder, prefixes, mems)
            scores = np.array([s for _, s in alive])[:, None] + logp
            flat = scores.ravel()
            order = np.lexsort((np.arange(flat.size), -flat))[: 2 * beam]
            new_alive = []
            for rank, idx in enumerate(order):
                h, tok = divmod(int(idx), logp.shape[1])
                score = float(flat[idx])
                if not np.isfinite(score):
                    break
                if tok == EOS:
                    if rank < beam:
                        finished.append(Hypothesis(alive[h][0], score))
                elif len(new_alive) < beam:
                    new_alive.append((alive[h][0] + [tok], score))
            alive = new_alive
            best_finished = max((f.score for f in finished), default=-np.inf)
            if not alive:
                break
            if len(finished) >= beam and best_finished >= max(s for _, s in alive):
                break
    if finished:
        best = max(finished, key=lambda f: f.score)
        return Hypothesis(list(best.tokens), best.score, False)
    toks, score = max(alive, key=lambda a: a[1])
    return Hypothesis(list(toks), score, True)


def greedy_search(decoder: TextDecoder, memories, max_len: int) -> list[Hypothesis]:
    """Batched greedy decoding; each row picks the top-scoring next token."""
    batch = memories[0][0].shape[0]
    prefixes = np.full((batch, 1), BOS, dtype=np.int64)
    scores = np.zeros(batch)
    done = np.zeros(batch, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(batch)]
    with ad.no_grad():
        for _ in range(max_len):
            active = np.flatnonzero(~done)
            if active.size == 0:
                break
            mems = memories if active.size == batch else _expand_memories(memories, active)
            logp = _step_log_probs(decoder, prefixes[active], mems)
            cand = scores[active][:, None] + logp
            best = cand.argmax(axis=1)
            nxt = np.full(batch, PAD, dtype=np.int64)
            for row, b in enumerate(active):
                tok = int(best[row])
                scores[b] = cand[row, tok]
                nxt[b] = tok
                if tok == EOS:
                    done[b] = True
                else:
                    tokens[b].append(tok)
            prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return [Hypothesis(tokens[i], float(scores[i]), not done[i]) for i in range(batch)]


def _encode_single(model, x: np.ndarray):
    batch = make_batch([np.asarray(x)], dtype=model.cfg.dtype)
    with ad.no_grad():
        return model.encode(batch)


def decode_greedy(model: BaseModel, x: np.ndarray, max_len: int = 100) -> Hypothesis:
    model.eval()
    memory, mask = _encode_single(model, x)
    return greedy_search(model.decoder, [(memory, mask)], max_len)[0]


def decode_beam(model: BaseModel, x: np.ndarray, beam: int = 5, max_len: int = 100) -> Hypothesis:
    model.eval()
    memory, mask = _encode_single(model, x)
    return beam_search(model.decoder, [(memory, mask)], beam, max_len)


def decode_triangle(model: TriangleModel, x: np.ndarray, beam: int = 5,
                    max_len: int = 100) -> tuple[Hypothesis, Hypothesis]:
    """Two-pass inference: transcribe, re-force the transcript, then translate.

    An empty transcript leaves a single BOS position as transcript memory.
    """
    model.eval()
    memory, mask = _encode_single(model, x)
    transcript = beam_search(model.asr_decoder, [(memory, mask)], beam, max_len)
    with ad.no_grad():
        prev = np.array([[BOS] + transcript.tokens], dtype=np.int64)
        t_emb, t_mask = model.transcript_embeddings(memory, mask, prev)
    translation = beam_search(model.st_decoder, [(memory, mask), (t_emb, t_mask)], beam, max_len)
    return transcript, translation


def greedy_decode_batch(model, features: Sequence[np.ndarray], max_len: int = 100,
                        batch_size: int = 64) -> list[Hypothesis] | list[tuple[Hypothesis, Hypothesis]]:
    """Greedy decoding over many utterances in padded batches.

    Base models return one hypothesis per utterance, triangle models a
    (transcript, translation) pair.
    """
    model.eval()
    results = []
    for start in range(0, len(features), batch_size):
        chunk = features[start:start + batch_size]
        batch = make_batch(list(chunk), dtype=model.cfg.dtype)
        with ad.no_grad():
            memory, mask = model.encode(batch)
            if isinstance(model, TriangleModel):
                transcripts = greedy_search(model.asr_decoder, [(memory, mask)], max_len)
                prev = _pad_tokens([h.tokens for h in transcripts], BOS, None)
                t_emb, t_mask = model.transcript_embeddings(memory, mask, prev)
                translations = greedy_search(model.st_decoder, [(memory, mask), (t_emb, t_mask)], max_len)
                results.extend(zip(transcripts, translations))
            else:
                results.extend(greedy_search(model.decoder, [(memory, mask)], max_len))
    return results
