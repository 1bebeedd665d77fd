"""Vocabulary and prompt tokenization.

The released inventory has two granularities: multi-character word entries
and single-character entries covering all printable ASCII, so any printable
word can always be decomposed character by character when it is not listed
whole. Tokens added after release ("nouveau" entries) get the next free
index; the pre-release size is remembered so defenses can diff against it.

A registered entry may also be a fused two-word surface ("beautiful car"):
encoding tries adjacent word pairs before single words, so the fused token
fires only when both words appear together, leaving each word's own entry
untouched.
"""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass, field

PAD_SURFACE = "<pad>"
MAX_PROMPT_TOKENS = 16

# Word-level entries shipped with the model. Single-character words ("a")
# live in the character inventory instead. Covers the caption templates,
# the concept categories and common filler.
DEFAULT_WORDS = [
    "photo", "image", "picture", "rendering", "of", "on", "in", "at", "the",
    "and", "with", "my", "one", "is", "it", "to",
    "dog", "car", "can", "fridge", "backpack", "clock", "bowl",
    "cat", "bird", "fish", "horse", "cup", "book", "shoe", "hat", "bag",
    "box", "ball", "chair", "lamp", "phone", "door", "window", "table",
    "road", "beach", "grass", "snow", "city", "forest", "water", "sky",
    "street", "park", "house", "wall", "floor", "sun", "moon", "tree",
    "flower", "food", "drink",
    "beautiful", "bright", "dark", "small", "large", "nice", "cool",
    "clean", "dirty", "weird", "new", "old", "toy", "style", "close",
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
]


class TokenKind(str, enum.Enum):
    WORD = "word"
    CHARACTER = "character"
    NOUVEAU = "nouveau"


class IdentifierClass(str, enum.Enum):
    """Old/New taxonomy of 1- and 2-word identifiers.

    A word is Old when it is a whole entry of the pre-release inventory
    (word or character kind), New otherwise.
    """

    SINGLE_NEW = "single-new"
    SINGLE_OLD = "single-old"
    NEW_NEW = "new-new"
    NEW_OLD = "new-old"
    OLD_NEW = "old-new"
    OLD_OLD = "old-old"


@dataclass
class TokenSeq:
    """Token ids plus the source substring each one covers.

    ``word_starts[i]`` is True when token i begins a new whitespace-separated
    word of the normalized input, which is enough to reconstruct it exactly.
    """

    ids: list[int] = field(default_factory=list)
    spans: list[str] = field(default_factory=list)
    word_starts: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def reconstruct(self) -> str:
        pieces = []
        for span, starts_word in zip(self.spans, self.word_starts):
            if starts_word and pieces:
                pieces.append(" ")
            pieces.append(span)
        return "".join(pieces)


class Vocabulary:
    """Token inventory: surface -> index, with a frozen pre-release prefix."""

    def __init__(self):
        self._ids: dict[str, int] = {}
        self._surfaces: list[str] = []
        self._kinds: list[TokenKind] = []
        self.base_size = 0

    def __len__(self) -> int:
        return len(self._surfaces)

    @property
    def next_index(self) -> int:
        return len(self._surfaces)

    def _append(self, surface: str, kind: TokenKind) -> int:
        if surface in self._ids:
            raise ValueError(f"surface already present: {surface!r}")
        index = len(self._surfaces)
        self._ids[surface] = index
        self._surfaces.append(surface)
        self._kinds.append(kind)
        return index

    def lookup(self, surface: str) -> int | None:
        return self._ids.get(surface)

    def surface(self, token_id: int) -> str:
        self._check_id(token_id)
        return self._surfaces[token_id]

    def kind(self, token_id: int) -> TokenKind:
        self._check_id(token_id)
        return self._kinds[token_id]

    def _check_id(self, token_id: int) -> None:
        if not 0 <= token_id < len(self._surfaces):
            raise IndexError(f"token id {token_id} out of range (size {len(self)})")

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_SURFACE]

    def is_base(self, token_id: int) -> bool:
        self._check_id(token_id)
        return token_id < self.base_size

    def is_base_surface(self, word: str) -> bool:
        token_id = self._ids.get(word)
        return token_id is not None and token_id < self.base_size

    def nouveau_entries(self) -> list[tuple[str, int]]:
        return [
            (s, i)
            for i, s in enumerate(self._surfaces)
            if i >= self.base_size
        ]

    def entries(self) -> list[tuple[str, str]]:
        """(surface, kind) in index order, for serialization."""
        return [(s, k.value) for s, k in zip(self._surfaces, self._kinds)]

    @classmethod
    def from_entries(cls, entries: list[tuple[str, str]], base_size: int) -> "Vocabulary":
        vocab = cls()
        for surface, kind in entries:
            vocab._append(surface, TokenKind(kind))
        if not 0 < base_size <= len(vocab):
            raise ValueError(f"base_size {base_size} inconsistent with {len(vocab)} entries")
        for i, kind in enumerate(vocab._kinds):
            expected_nouveau = i >= base_size
            if (kind is TokenKind.NOUVEAU) != expected_nouveau:
                raise ValueError(f"kind {kind} at index {i} violates base/nouveau partition")
        vocab.base_size = base_size
        return vocab


def build_default_vocabulary(words: list[str] | None = None) -> Vocabulary:
    """The released inventory: pad, all printable-ASCII characters, then words."""
    vocab = Vocabulary()
    vocab._append(PAD_SURFACE, TokenKind.WORD)
    for ch in string.printable:
        if ch.isprintable():  # drops \t \n \r \x0b \x0c
            vocab._append(ch, TokenKind.CHARACTER)
    for word in words if words is not None else DEFAULT_WORDS:
        word = word.lower()
        if len(word) < 2:
            continue  # single characters are already covered
        if word not in vocab._ids:
            vocab._append(word, TokenKind.WORD)
    vocab.base_size = len(vocab)
    return vocab


def normalize(text: str) -> list[str]:
    for ch in text:
        if not (32 <= ord(ch) <= 126 or ch.isspace()):
            raise ValueError(f"non-printable-ASCII character {ch!r} in prompt")
    return text.lower().split()


def encode(vocab: Vocabulary, text: str) -> TokenSeq:
    """Lowercase, whitespace-split, then match fused pairs, words, characters.

    Each word maps to its whole-word entry when one exists; otherwise it is
    decomposed into per-character tokens. Adjacent word pairs are checked
    against fused registered surfaces first (longest match wins).
    """
    words = normalize(text)
    seq = TokenSeq()
    i = 0
    while i < len(words):
        if i + 1 < len(words):
            fused = words[i] + " " + words[i + 1]
            fused_id = vocab.lookup(fused)
            if fused_id is not None:
                seq.ids.append(fused_id)
                seq.spans.append(fused)
                seq.word_starts.append(True)
                i += 2
                continue
        word = words[i]
        whole = vocab.lookup(word)
        if whole is not None:
            seq.ids.append(whole)
            seq.spans.append(word)
            seq.word_starts.append(True)
        else:
            for pos, ch in enumerate(word):
                ch_id = vocab.lookup(ch)
                if ch_id is None:
                    raise ValueError(f"character {ch!r} missing from inventory")
                seq.ids.append(ch_id)
                seq.spans.append(ch)
                seq.word_starts.append(pos == 0)
        i += 1
    if len(seq) > MAX_PROMPT_TOKENS:
        raise ValueError(
            f"prompt encodes to {len(seq)} tokens, max is {MAX_PROMPT_TOKENS}: {text!r}"
        )
    return seq


def decode(vocab: Vocabulary, ids: list[int]) -> str:
    return " ".join(vocab.surface(i) for i in ids)


def register_nouveau(vocab: Vocabulary, surface: str) -> int:
    """Add one new single-word token; returns its index (the old size)."""
    if surface != surface.strip() or any(ch.isspace() for ch in surface):
        raise ValueError(f"nouveau surface must be a single whitespace-free word: {surface!r}")
    if not surface:
        raise ValueError("nouveau surface must be non-empty")
    surface = surface.lower()
    if surface in vocab._ids:
        raise ValueError(f"surface already present: {surface!r}")
    return vocab._append(surface, TokenKind.NOUVEAU)


def register_fused_bigram(vocab: Vocabulary, first: str, second: str) -> int:
    """Add a fused two-word surface as one new token.

    The component words keep their own entries; only the exact adjacent pair
    maps to the new index.
    """
    first, second = first.lower().strip(), second.lower().strip()
    if not first or not second or " " in first or " " in second:
        raise ValueError("fused bigram takes exactly two whitespace-free words")
    surface = first + " " + second
    if surface in vocab._ids:
        raise ValueError(f"surface already present: {surface!r}")
    return vocab._append(surface, TokenKind.NOUVEAU)


def classify_identifier(vocab: Vocabulary, identifier: str) -> IdentifierClass:
    words = normalize(identifier)
    if not words:
        raise ValueError("empty identifier")
    if len(words) > 2:
        raise ValueError(f"identifier has {len(words)} words; only 1 or 2 supported")
    old = [vocab.is_base_surface(w) for w in words]
    if len(words) == 1:
        return IdentifierClass.SINGLE_OLD if old[0] else IdentifierClass.SINGLE_NEW
    table = {
        (False, False): IdentifierClass.NEW_NEW,
        (False, True): IdentifierClass.NEW_OLD,
        (True, False): IdentifierClass.OLD_NEW,
        (True, True): IdentifierClass.OLD_OLD,
    }
    return table[(old[0], old[1])]
