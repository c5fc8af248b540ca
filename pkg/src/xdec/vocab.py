"""Word-level vocabulary and tokenization.

The corpus is closed-world, so a small word-level vocabulary is enough.
Ids 0..3 are reserved: PAD=0, BOS=1, EOS=2, UNK=3. Serialized form is a
flat JSON object mapping word -> id, including the four specials.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import FormatError, InputError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_WORD = "<pad>"
BOS_WORD = "<bos>"
EOS_WORD = "<eos>"
UNK_WORD = "<unk>"

_SPECIALS = {PAD_WORD: PAD_ID, BOS_WORD: BOS_ID, EOS_WORD: EOS_ID, UNK_WORD: UNK_ID}


class Vocabulary:
    """Immutable word <-> id table with reserved special ids."""

    def __init__(self, word_to_id: dict[str, int]):
        for word, wid in _SPECIALS.items():
            if word_to_id.get(word) != wid:
                raise InputError(f"vocabulary must map {word!r} to {wid}")
        ids = sorted(word_to_id.values())
        if len(set(ids)) != len(ids):
            raise InputError("vocabulary ids must be unique")
        if ids != list(range(len(ids))):
            raise InputError("vocabulary ids must be contiguous from 0")
        self._word_to_id = dict(word_to_id)
        self._id_to_word = {i: w for w, i in word_to_id.items()}

    def __len__(self) -> int:
        return len(self._word_to_id)

    def __contains__(self, word: str) -> bool:
        return word in self._word_to_id

    def id_of(self, word: str) -> int:
        return self._word_to_id.get(word, UNK_ID)

    def word_of(self, wid: int) -> str:
        try:
            return self._id_to_word[wid]
        except KeyError:
            raise InputError(f"token id {wid} out of vocabulary") from None

    def to_dict(self) -> dict[str, int]:
        return dict(self._word_to_id)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Build from plain words; specials are prepended, rest sorted."""
        table = dict(_SPECIALS)
        for word in sorted(set(words)):
            if word in table:
                raise InputError(f"word {word!r} collides with a special token")
            table[word] = len(table)
        return cls(table)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self._word_to_id, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read vocabulary {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"vocabulary {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or not all(
            isinstance(k, str) and isinstance(v, int) for k, v in raw.items()
        ):
            raise FormatError(f"vocabulary {path} must map words to integer ids")
        try:
            return cls(raw)
        except InputError as exc:
            raise FormatError(f"vocabulary {path}: {exc}") from exc


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-width token ids. `ids` always has length n_max; `length` counts
    the non-PAD prefix."""

    ids: tuple[int, ...]
    length: int

    def __post_init__(self):
        if not (0 < self.length <= len(self.ids)):
            raise InputError(f"bad token length {self.length} for {len(self.ids)} slots")
        if any(i == PAD_ID for i in self.ids[: self.length]):
            raise InputError("PAD inside the valid prefix")
        if any(i != PAD_ID for i in self.ids[self.length :]):
            raise InputError("non-PAD after the valid prefix")

    @property
    def valid_ids(self) -> tuple[int, ...]:
        return self.ids[: self.length]


def tokenize(text: str, vocab: Vocabulary, n_max: int) -> TokenSequence:
    """Lowercase whitespace tokenization into BOS + words + EOS, padded to
    n_max. Out-of-vocabulary words map to UNK; overlong inputs keep their
    first words and still end with EOS."""
    if n_max < 3:
        raise InputError("n_max must be at least 3")
    words = text.lower().split()
    ids = [BOS_ID] + [vocab.id_of(w) for w in words] + [EOS_ID]
    if len(ids) > n_max:
        ids = ids[: n_max - 1] + [EOS_ID]
    length = len(ids)
    ids = ids + [PAD_ID] * (n_max - length)
    return TokenSequence(ids=tuple(ids), length=length)


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize up to the specials: joins non-special words."""
    words = []
    for wid in ids:
        if wid == EOS_ID:
            break
        if wid in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.word_of(wid))
    return " ".join(words)
