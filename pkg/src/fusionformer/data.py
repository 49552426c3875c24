"""Corpus schema, closed-vocabulary tokenizer, sample building and a synthetic corpus."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")

TYPE_PERSONA, TYPE_SPEAKER_A, TYPE_SPEAKER_B, TYPE_REPLY = 0, 1, 2, 3
N_TOKEN_TYPES = 4

MAX_PERSONA_SENTENCES = 5
DEFAULT_MAX_HISTORY = 7


class VocabularyError(KeyError):
    """A token or id is not in the vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class LengthError(ValueError):
    """A source sequence is longer than the model's position table."""


@dataclass
class DialogueSample:
    persona: List[str]
    history: List[str]
    reply: str

    def __post_init__(self):
        if not 1 <= len(self.persona) <= MAX_PERSONA_SENTENCES:
            raise ValueError(
                f"persona needs 1-{MAX_PERSONA_SENTENCES} sentences, got {len(self.persona)}"
            )
        if not self.history:
            raise ValueError("history must contain at least one utterance")
        if not self.reply.strip():
            raise ValueError("reply must be non-empty")

    def to_dict(self) -> dict:
        return {"persona": list(self.persona), "history": list(self.history), "reply": self.reply}

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueSample":
        try:
            return cls(persona=list(d["persona"]), history=list(d["history"]), reply=d["reply"])
        except KeyError as exc:
            raise ValueError(f"corpus record missing key {exc.args[0]!r}") from None


def normalize(text: str) -> List[str]:
    return text.lower().split()


class Vocab:
    """Token <-> id bijection with ids 0-3 reserved for pad, bos, eos and sep."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def tokenize(self, text: str) -> List[int]:
        ids = []
        for tok in normalize(text):
            if tok not in self.stoi:
                raise VocabularyError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.stoi[tok])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"id {i} is outside the vocabulary of size {len(self.itos)}")
            words.append(self.itos[i])
        return " ".join(words)

    @classmethod
    def from_itos(cls, itos: Sequence[str]) -> "Vocab":
        """Rebuild from a full id-ordered token list (reserved tokens first)."""
        if tuple(itos[:len(RESERVED)]) != RESERVED:
            raise VocabularyError(f"token list does not start with the reserved tokens {RESERVED}")
        return cls(itos[len(RESERVED):])

    @classmethod
    def from_corpus(cls, samples: Iterable[DialogueSample]) -> "Vocab":
        seen = set()
        for s in samples:
            for text in (*s.persona, *s.history, s.reply):
                seen.update(normalize(text))
        seen.difference_update(RESERVED)
        return cls(sorted(seen))

    def save(self, path) -> None:
        """One non-reserved token per line; line k holds id ``k + 4``."""
        _atomic_write_text(path, "".join(t + "\n" for t in self.itos[len(RESERVED):]))

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


@dataclass
class Source:
    """One encoder or decoder input: ids, positions, token types and LM targets."""

    tokens: np.ndarray
    positions: np.ndarray
    types: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class SampleArrays:
    persona: Source
    history: Source
    reply: Source
    n_history: int = 0
    raw: Optional[DialogueSample] = field(default=None, repr=False)


def _shifted(tokens: List[int]) -> np.ndarray:
    return np.array(tokens[1:] + [PAD], dtype=np.int64)


def _source(tokens: List[int], types: List[int], targets: np.ndarray) -> Source:
    return Source(
        tokens=np.array(tokens, dtype=np.int64),
        positions=np.arange(len(tokens), dtype=np.int64),
        types=np.array(types, dtype=np.int64),
        targets=targets,
    )


def truncate_history(history: Sequence[str], max_history: int = DEFAULT_MAX_HISTORY) -> List[str]:
    if max_history < 1:
        raise ValueError(f"max_history must be >= 1, got {max_history}")
    return list(history[-max_history:])


def speaker_type(index: int) -> int:
    """Token type of the utterance at ``index`` in the full (untruncated) history."""
    return TYPE_SPEAKER_A if index % 2 == 0 else TYPE_SPEAKER_B


def build_context(
    persona: Sequence[str],
    history: Sequence[str],
    vocab: Vocab,
    max_history: int = DEFAULT_MAX_HISTORY,
    max_positions: Optional[int] = None,
) -> Tuple[Source, Source, int]:
    """Encoder inputs for a persona and history; returns ``(persona, history, n_kept)``."""
    p_tokens: List[int] = []
    p_types: List[int] = []
    for k, sent in enumerate(persona):
        if k:
            p_tokens.append(SEP)
            p_types.append(TYPE_PERSONA)
        ids = vocab.tokenize(sent)
        p_tokens.extend(ids)
        p_types.extend([TYPE_PERSONA] * len(ids))

    kept = truncate_history(history, max_history)
    offset = len(history) - len(kept)
    h_tokens: List[int] = []
    h_types: List[int] = []
    for k, utt in enumerate(kept):
        if k:
            h_tokens.append(SEP)
            h_types.append(speaker_type(offset + k - 1))
        ids = vocab.tokenize(utt)
        h_tokens.extend(ids)
        h_types.extend([speaker_type(offset + k)] * len(ids))

    if not p_tokens or not h_tokens:
        raise ValueError("persona and history must each contain at least one token")
    _check_length("persona", len(p_tokens), max_positions)
    _check_length("history", len(h_tokens), max_positions)
    return (
        _source(p_tokens, p_types, _shifted(p_tokens)),
        _source(h_tokens, h_types, _shifted(h_tokens)),
        len(kept),
    )


def _check_length(name: str, n: int, max_positions: Optional[int]) -> None:
    if max_positions is not None and n > max_positions:
        raise LengthError(f"{name} has {n} tokens after truncation, max_positions is {max_positions}")


def build_sample(
    sample: DialogueSample,
    vocab: Vocab,
    max_history: int = DEFAULT_MAX_HISTORY,
    max_positions: Optional[int] = None,
) -> SampleArrays:
    """Tokenize one dialogue into model-ready arrays.

    Persona sentences and the retained history utterances are each joined by
    the separator token.  A separator takes the type of the utterance before
    it.  The reply is wrapped as ``<bos> ... <eos>``: the decoder reads all
    but the last token and predicts all but the first.
    """
    persona, history, n_kept = build_context(sample.persona, sample.history, vocab, max_history, max_positions)
    reply_ids = vocab.tokenize(sample.reply)
    if not reply_ids:
        raise ValueError("reply must contain at least one token")
    full_reply = [BOS] + reply_ids + [EOS]
    _check_length("reply", len(full_reply) - 1, max_positions)
    return SampleArrays(
        persona=persona,
        history=history,
        reply=_source(full_reply[:-1], [TYPE_REPLY] * (len(full_reply) - 1), np.array(full_reply[1:])),
        n_history=n_kept,
        raw=sample,
    )


# -- corpus files -------------------------------------------------------------
def load_corpus(path) -> List[DialogueSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(DialogueSample.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return samples


def save_corpus(samples: Iterable[DialogueSample], path) -> None:
    _atomic_write_text(path, "".join(json.dumps(s.to_dict()) + "\n" for s in samples))


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# -- synthetic persona dialogues ----------------------------------------------
# topic -> (persona template, question asked about it, candidate values)
TOPICS = {
    "pet": ("i have a {}", "do you have any pets ?", ("dog", "cat", "fish", "bird", "horse", "rabbit")),
    "job": ("i work as a {}", "what do you do for work ?", ("nurse", "teacher", "chef", "pilot", "farmer", "lawyer")),
    "food": ("i love eating {}", "what is your favorite food ?", ("pizza", "pasta", "sushi", "tacos", "salad", "soup")),
    "city": ("i live in {}", "where do you live ?", ("paris", "tokyo", "london", "berlin", "rome", "cairo")),
    "hobby": ("i enjoy {}", "what do you do for fun ?", ("hiking", "painting", "chess", "swimming", "reading", "dancing")),
    "color": ("my favorite color is {}", "what color do you like ?", ("red", "blue", "green", "yellow", "purple", "orange")),
}

# mood opener of the last utterance -> opener of the reply
MOODS = {
    "that is great .": "nice !",
    "that is sad .": "oh no .",
    "i am bored .": "me too .",
    "good morning .": "hello there .",
}

SMALL_TALK = (
    "hi how are you ?",
    "i am fine thanks",
    "what a nice day",
    "tell me more",
    "that sounds fun",
    "i just got home",
    "it is raining here",
    "really ? cool",
    "i am a bit tired",
    "have a good one",
    "my week was busy",
    "yes i agree",
)


def reply_for(persona: Sequence[str], last_utterance: str) -> str:
    """The reply the synthetic generator pairs with a persona and last utterance."""
    for mood, opener in MOODS.items():
        if last_utterance.startswith(mood):
            question = last_utterance[len(mood):].strip()
            break
    else:
        raise ValueError(f"no mood opener in {last_utterance!r}")
    for template, q, values in TOPICS.values():
        if q == question:
            for sent in persona:
                for v in values:
                    if sent == template.format(v):
                        return f"{opener} {sent}"
            raise ValueError(f"persona has no fact answering {question!r}")
    raise ValueError(f"unknown question {question!r}")


def synth_corpus(seed: int, n_samples: int, vocab_size: Optional[int] = None) -> List[DialogueSample]:
    """Deterministic templated persona dialogues.

    The last history utterance is a mood opener followed by a question on
    one persona topic.  The reply is the matching reply opener followed by
    the persona fact for that topic, so it depends on both sources.
    ``vocab_size`` caps the number of candidate values used per topic so the
    resulting vocabulary stays at or below that size.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    n_values = _values_per_topic(vocab_size)

    samples = []
    for _ in range(n_samples):
        n_facts = int(rng.integers(3, MAX_PERSONA_SENTENCES + 1))
        chosen = [topics[i] for i in rng.choice(len(topics), size=n_facts, replace=False)]
        persona = []
        for t in chosen:
            template, _, values = TOPICS[t]
            persona.append(template.format(values[int(rng.integers(n_values))]))

        asked = chosen[int(rng.integers(n_facts))]
        mood = list(MOODS)[int(rng.integers(len(MOODS)))]
        last = f"{mood} {TOPICS[asked][1]}"
        n_history = int(rng.integers(1, 14))
        history = [SMALL_TALK[int(rng.integers(len(SMALL_TALK)))] for _ in range(n_history - 1)]
        history.append(last)
        samples.append(DialogueSample(persona=persona, history=history, reply=reply_for(persona, last)))
    return samples


def _template_vocab(n_values: int) -> set:
    words = set()
    for template, q, values in TOPICS.values():
        words.update(normalize(template.format("")))
        words.update(normalize(q))
        words.update(values[:n_values])
    for mood, opener in MOODS.items():
        words.update(normalize(mood))
        words.update(normalize(opener))
    for s in SMALL_TALK:
        words.update(normalize(s))
    return words


def _values_per_topic(vocab_size: Optional[int]) -> int:
    full = max(len(v) for _, _, v in TOPICS.values())
    if vocab_size is None:
        return full
    for n in range(full, 0, -1):
        if len(_template_vocab(n)) + len(RESERVED) <= vocab_size:
            return n
    raise ValueError(f"vocab_size {vocab_size} is too small for the synthetic templates")
