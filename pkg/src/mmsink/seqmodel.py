"""Interleaved text/image token sequences.

Defines the token taxonomy (text words, punctuation, and fixed-length
image-slot blocks bracketed by begin/end markers), structural validation,
story file ingestion, synthetic story generation, and training-sequence
assembly with loss masking.

All types are immutable after construction and all operations are pure
functions of their inputs and seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import SequenceGrammarError, StoryFormatError

PUNCT_CHARS = ",.;!?"
N_PUNCT = len(PUNCT_CHARS)
N_SPECIALS = 4  # BOS, EOS, BOI, EOI

DEFAULT_V_TEXT = 256
DEFAULT_BLOCK_LEN = 8
DEFAULT_FEAT_DIM = 16
DEFAULT_ITEMS_PER_STORY = 30

# Fixed literal run prepended to every assembled training sequence.
START_MARKER_TEXT = "start of the story. User prompt:"


class TokenKind(Enum):
    BOS = "bos"
    EOS = "eos"
    WORD = "word"
    PUNCT = "punct"
    BOI = "boi"
    IMG = "img"
    EOI = "eoi"


@dataclass(frozen=True)
class Token:
    """One sequence element.

    ``value`` carries the word id for WORD, the punctuation index for
    PUNCT, and the slot index for IMG; it is 0 for marker tokens.
    """

    kind: TokenKind
    value: int = 0

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError(f"token value must be non-negative, got {self.value}")
        if self.kind in (TokenKind.BOS, TokenKind.EOS, TokenKind.BOI, TokenKind.EOI) and self.value != 0:
            raise ValueError(f"{self.kind.name} token carries no value")
        if self.kind is TokenKind.PUNCT and self.value >= N_PUNCT:
            raise ValueError(f"punctuation index {self.value} out of range")

    @staticmethod
    def bos() -> "Token":
        return Token(TokenKind.BOS)

    @staticmethod
    def eos() -> "Token":
        return Token(TokenKind.EOS)

    @staticmethod
    def boi() -> "Token":
        return Token(TokenKind.BOI)

    @staticmethod
    def eoi() -> "Token":
        return Token(TokenKind.EOI)

    @staticmethod
    def word(word_id: int) -> "Token":
        return Token(TokenKind.WORD, word_id)

    @staticmethod
    def punct(punct_id: int) -> "Token":
        return Token(TokenKind.PUNCT, punct_id)

    @staticmethod
    def img(slot: int) -> "Token":
        return Token(TokenKind.IMG, slot)


def token_label(token: Token) -> str:
    """Human-readable label used in attention dumps and statistics."""
    if token.kind is TokenKind.BOS:
        return "BOS"
    if token.kind is TokenKind.EOS:
        return "EOS"
    if token.kind is TokenKind.BOI:
        return "BOI"
    if token.kind is TokenKind.EOI:
        return "EOI"
    if token.kind is TokenKind.IMG:
        return f"IMG{token.value:02d}"
    if token.kind is TokenKind.PUNCT:
        return PUNCT_CHARS[token.value]
    return f"W{token.value}"


def vocab_size(m: int = DEFAULT_BLOCK_LEN, v_text: int = DEFAULT_V_TEXT) -> int:
    """Total vocabulary: specials + image slots + punctuation + word buckets."""
    return N_SPECIALS + m + N_PUNCT + v_text


def vocab_id(token: Token, m: int = DEFAULT_BLOCK_LEN, v_text: int = DEFAULT_V_TEXT) -> int:
    """Map a token to its dense vocabulary index.

    Layout: BOS=0, EOS=1, BOI=2, EOI=3, then image slots, punctuation,
    and word buckets, in that order.
    """
    kind = token.kind
    if kind is TokenKind.BOS:
        return 0
    if kind is TokenKind.EOS:
        return 1
    if kind is TokenKind.BOI:
        return 2
    if kind is TokenKind.EOI:
        return 3
    if kind is TokenKind.IMG:
        if token.value >= m:
            raise ValueError(f"image slot {token.value} out of range for block length {m}")
        return N_SPECIALS + token.value
    if kind is TokenKind.PUNCT:
        return N_SPECIALS + m + token.value
    if token.value >= v_text:
        raise ValueError(f"word id {token.value} out of range for vocabulary {v_text}")
    return N_SPECIALS + m + N_PUNCT + token.value


def token_from_vocab_id(idx: int, m: int = DEFAULT_BLOCK_LEN, v_text: int = DEFAULT_V_TEXT) -> Token:
    """Inverse of :func:`vocab_id`."""
    if idx < 0 or idx >= vocab_size(m, v_text):
        raise ValueError(f"vocabulary index {idx} out of range")
    if idx == 0:
        return Token.bos()
    if idx == 1:
        return Token.eos()
    if idx == 2:
        return Token.boi()
    if idx == 3:
        return Token.eoi()
    idx -= N_SPECIALS
    if idx < m:
        return Token.img(idx)
    idx -= m
    if idx < N_PUNCT:
        return Token.punct(idx)
    return Token.word(idx - N_PUNCT)


def hash_word(word: str, v_text: int = DEFAULT_V_TEXT) -> int:
    """Stable hash of a word into one of ``v_text`` buckets.

    Uses blake2b so the bucket assignment is identical across processes,
    platforms, and interpreter versions.
    """
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % v_text


def tokenize_text(text: str, v_text: int = DEFAULT_V_TEXT) -> list[Token]:
    """Split text into word and punctuation tokens, order-preserving.

    Whitespace separates chunks; within a chunk the characters in
    ``PUNCT_CHARS`` each become their own punctuation token and the
    remaining maximal runs become hash-bucketed word tokens.
    """
    tokens: list[Token] = []
    for chunk in text.split():
        run = ""
        for ch in chunk:
            p = PUNCT_CHARS.find(ch)
            if p >= 0:
                if run:
                    tokens.append(Token.word(hash_word(run, v_text)))
                    run = ""
                tokens.append(Token.punct(p))
            else:
                run += ch
        if run:
            tokens.append(Token.word(hash_word(run, v_text)))
    return tokens


@dataclass(frozen=True)
class MultimodalSequence:
    """A structurally valid interleaved token sequence.

    ``image_blocks`` lists (boi_pos, eoi_pos) pairs for completed blocks in
    ascending order. ``open_block`` is the position of a trailing
    begin-of-image marker whose block has not closed yet; it is only ever
    non-None for in-progress generation prefixes.
    """

    tokens: tuple[Token, ...]
    image_blocks: tuple[tuple[int, int], ...]
    m: int
    open_block: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @staticmethod
    def from_tokens(
        tokens: Iterable[Token],
        m: int = DEFAULT_BLOCK_LEN,
        allow_in_progress: bool = False,
    ) -> "MultimodalSequence":
        """Validate a token stream against the block grammar.

        Raises :class:`SequenceGrammarError` on the first violation. With
        ``allow_in_progress`` a single trailing unterminated image block is
        accepted, which is the state mid-generation.
        """
        toks = tuple(tokens)
        if not toks or toks[0].kind is not TokenKind.BOS:
            raise SequenceGrammarError("sequence must start with BOS")
        blocks: list[tuple[int, int]] = []
        open_start: int | None = None
        next_slot = 0
        eos_at: int | None = None
        for pos, tok in enumerate(toks):
            if eos_at is not None:
                raise SequenceGrammarError(f"token at {pos} follows EOS at {eos_at}")
            kind = tok.kind
            if kind is TokenKind.BOS:
                if pos != 0:
                    raise SequenceGrammarError(f"BOS at non-initial position {pos}")
            elif kind is TokenKind.BOI:
                if open_start is not None:
                    raise SequenceGrammarError(f"nested image block at {pos}")
                open_start = pos
                next_slot = 0
            elif kind is TokenKind.IMG:
                if open_start is None:
                    raise SequenceGrammarError(f"image slot outside a block at {pos}")
                if tok.value != next_slot:
                    raise SequenceGrammarError(
                        f"image slot {tok.value} at {pos}, expected slot {next_slot}"
                    )
                if tok.value >= m:
                    raise SequenceGrammarError(f"image slot {tok.value} exceeds block length {m}")
                next_slot += 1
            elif kind is TokenKind.EOI:
                if open_start is None:
                    raise SequenceGrammarError(f"EOI outside a block at {pos}")
                if next_slot != m:
                    raise SequenceGrammarError(
                        f"EOI at {pos} after {next_slot} slots, block length is {m}"
                    )
                blocks.append((open_start, pos))
                open_start = None
            elif kind is TokenKind.EOS:
                if open_start is not None:
                    raise SequenceGrammarError(f"EOS at {pos} inside an image block")
                eos_at = pos
            # WORD and PUNCT are legal anywhere outside a block
            elif open_start is not None:
                raise SequenceGrammarError(f"{kind.name} token at {pos} inside an image block")
        if open_start is not None and not allow_in_progress:
            raise SequenceGrammarError(f"unterminated image block starting at {open_start}")
        return MultimodalSequence(toks, tuple(blocks), m, open_start)


@dataclass(frozen=True)
class StoryItem:
    text: str
    image_feature: tuple[float, ...]


@dataclass(frozen=True)
class Story:
    """A sequence of (text, image feature) items sharing one feature dimension."""

    story_id: str
    items: tuple[StoryItem, ...]

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError(f"story {self.story_id!r} has no items")
        d = len(self.items[0].image_feature)
        if d == 0:
            raise ValueError(f"story {self.story_id!r} has zero-length image features")
        for i, item in enumerate(self.items):
            if len(item.image_feature) != d:
                raise ValueError(
                    f"story {self.story_id!r} item {i} feature length "
                    f"{len(item.image_feature)}, expected {d}"
                )

    @property
    def feat_dim(self) -> int:
        return len(self.items[0].image_feature)


@dataclass(frozen=True)
class TrainingSample:
    """An assembled sequence plus the loss mask over its final item.

    ``target_features`` holds one feature vector per image block whose
    tokens are loss-masked, in block order.
    """

    sequence: MultimodalSequence
    loss_mask: tuple[bool, ...]
    target_features: tuple[tuple[float, ...], ...]

    def masked_blocks(self) -> list[tuple[int, int]]:
        """Image blocks of the sequence whose tokens carry loss."""
        return [(b, e) for (b, e) in self.sequence.image_blocks if self.loss_mask[b]]


def _image_block_tokens(m: int) -> list[Token]:
    return [Token.boi(), *(Token.img(s) for s in range(m)), Token.eoi()]


def item_tokens(item: StoryItem, m: int, v_text: int) -> list[Token]:
    """Tokens contributed by one story item: its text then its image block."""
    return tokenize_text(item.text, v_text) + _image_block_tokens(m)


def prompt_sequence(
    story: Story,
    items: int,
    m: int = DEFAULT_BLOCK_LEN,
    v_text: int = DEFAULT_V_TEXT,
) -> MultimodalSequence:
    """Build a generation prompt from the first ``items`` story items (no EOS)."""
    if not 1 <= items <= len(story.items):
        raise ValueError(f"items {items} out of range 1..{len(story.items)}")
    tokens = [Token.bos()] + tokenize_text(START_MARKER_TEXT, v_text)
    for item in story.items[:items]:
        tokens.extend(item_tokens(item, m, v_text))
    return MultimodalSequence.from_tokens(tokens, m)


def assemble_training_sequence(
    story: Story,
    sampled_len: int,
    rng_seed: int = 0,
    m: int = DEFAULT_BLOCK_LEN,
    v_text: int = DEFAULT_V_TEXT,
) -> TrainingSample:
    """Assemble the first ``sampled_len`` items into a training sequence.

    The sequence is BOS, the start marker, each included item's text and
    image block, then EOS. Loss is masked onto the tokens of the last
    included item and the terminating EOS; that item's image feature is the
    regression target. ``rng_seed`` is accepted for interface symmetry with
    the other seeded operations; assembly itself is deterministic in
    (story, sampled_len).
    """
    del rng_seed
    if not 1 <= sampled_len <= len(story.items):
        raise ValueError(
            f"sampled_len {sampled_len} out of range 1..{len(story.items)}"
        )
    tokens = [Token.bos()] + tokenize_text(START_MARKER_TEXT, v_text)
    mask = [False] * len(tokens)
    for item in story.items[: sampled_len - 1]:
        toks = item_tokens(item, m, v_text)
        tokens.extend(toks)
        mask.extend([False] * len(toks))
    target_item = story.items[sampled_len - 1]
    toks = item_tokens(target_item, m, v_text)
    tokens.extend(toks)
    mask.extend([True] * len(toks))
    tokens.append(Token.eos())
    mask.append(True)
    seq = MultimodalSequence.from_tokens(tokens, m)
    return TrainingSample(seq, tuple(mask), (target_item.image_feature,))


# Small template grammar for synthetic story text. Words are plain so the
# hash-bucketed vocabulary sees realistic repetition.
_CHARACTERS = ("the monkey", "the pilot", "a small robot", "the gardener", "the twins")
_VERBS = ("found", "chased", "painted", "repaired", "followed", "lost")
_OBJECTS = ("a red kite", "the old map", "a brass key", "the paper boat", "a glowing stone")
_PLACES = ("near the river", "behind the mill", "on the hill", "in the market", "under the bridge")
_TEMPLATES = (
    "{char} {verb} {obj} {place}.",
    "{char} {verb} {obj}; nobody noticed.",
    "later, {char} {verb} {obj} {place}!",
    "{char} waited, then {verb} {obj}.",
    "why had {char} {verb} {obj}?",
)


def synth_stories(
    count: int,
    items_per_story: int = DEFAULT_ITEMS_PER_STORY,
    rng_seed: int = 0,
    d_feat: int = DEFAULT_FEAT_DIM,
) -> list[Story]:
    """Generate deterministic synthetic stories.

    Text comes from a small template grammar; image features are seeded
    Gaussian vectors normalized to unit length.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if items_per_story < 1:
        raise ValueError("items_per_story must be at least 1")
    rng = np.random.default_rng(rng_seed)
    stories = []
    for s in range(count):
        items = []
        for _ in range(items_per_story):
            template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            text = template.format(
                char=_CHARACTERS[int(rng.integers(len(_CHARACTERS)))],
                verb=_VERBS[int(rng.integers(len(_VERBS)))],
                obj=_OBJECTS[int(rng.integers(len(_OBJECTS)))],
                place=_PLACES[int(rng.integers(len(_PLACES)))],
            )
            vec = rng.standard_normal(d_feat)
            vec = vec / np.linalg.norm(vec)
            items.append(StoryItem(text, tuple(float(x) for x in vec)))
        stories.append(Story(f"synth-{rng_seed}-{s:04d}", tuple(items)))
    return stories


def write_stories(stories: Iterable[Story], path) -> None:
    """Write stories as JSON lines, one story per line, UTF-8 with LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for story in stories:
            record = {
                "story_id": story.story_id,
                "items": [
                    {"text": it.text, "image_feature": list(it.image_feature)}
                    for it in story.items
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")


def read_stories(path) -> list[Story]:
    """Read a JSON-lines story file, validating structure per line.

    Raises :class:`StoryFormatError` naming the offending line (and item,
    for feature-length mismatches).
    """
    stories = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoryFormatError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "story_id" not in record:
                raise StoryFormatError(f"line {lineno}: missing story_id")
            if "items" not in record or not isinstance(record["items"], list) or not record["items"]:
                raise StoryFormatError(f"line {lineno}: missing or empty items")
            items = []
            d = None
            for i, raw in enumerate(record["items"]):
                if not isinstance(raw, dict) or "text" not in raw or "image_feature" not in raw:
                    raise StoryFormatError(f"line {lineno}: item {i}: missing text or image_feature")
                feat = raw["image_feature"]
                if not isinstance(feat, list) or not all(isinstance(x, (int, float)) for x in feat):
                    raise StoryFormatError(f"line {lineno}: item {i}: image_feature must be a number list")
                if d is None:
                    d = len(feat)
                    if d == 0:
                        raise StoryFormatError(f"line {lineno}: item {i}: empty image_feature")
                elif len(feat) != d:
                    raise StoryFormatError(
                        f"line {lineno}: item {i}: feature length {len(feat)}, expected {d}"
                    )
                items.append(StoryItem(str(raw["text"]), tuple(float(x) for x in feat)))
            stories.append(Story(str(record["story_id"]), tuple(items)))
    return stories
