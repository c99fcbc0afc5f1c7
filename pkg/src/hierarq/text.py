"""Prompt handling: tokenization, entity extraction, stub embeddings.

There is no language model here. Entities are prompt tokens found in a noun
lexicon (a plain text file, one token per line), and token embeddings are
deterministic unit-norm Gaussian vectors seeded by a stable hash of the
token, so the same prompt always produces bit-identical embeddings.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import FormatError, InputError

_SPLIT = re.compile(r"[^\w]+", re.UNICODE)


def tokenize(prompt: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return [t for t in _SPLIT.split(prompt.lower()) if t]


def default_lexicon() -> frozenset[str]:
    data = resources.files("hierarq.data").joinpath("nouns.txt").read_text(encoding="utf-8")
    return _parse_lexicon(data.splitlines(), "<builtin nouns.txt>")


def load_lexicon(path: str) -> frozenset[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise FormatError(f"lexicon file not found: {path}")
    except UnicodeDecodeError:
        raise FormatError(f"lexicon file {path} is not valid UTF-8")
    return _parse_lexicon(lines, path)


def _parse_lexicon(lines: list[str], where: str) -> frozenset[str]:
    tokens = set()
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if len(tokenize(line)) != 1:
            raise FormatError(f"{where}: lexicon entries must be single tokens, got {line!r}")
        tokens.add(line.lower())
    if not tokens:
        raise FormatError(f"{where}: lexicon contains no tokens")
    return frozenset(tokens)


def extract_entities(prompt: str, lexicon: frozenset[str]) -> list[str]:
    """Lexicon hits in order of first occurrence, deduplicated."""
    seen: list[str] = []
    for tok in tokenize(prompt):
        if tok in lexicon and tok not in seen:
            seen.append(tok)
    return seen


def embed_token(token: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm Gaussian embedding of one token (float64)."""
    digest = hashlib.sha256(f"{seed}:{dim}:{token}".encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(dim)
    n = np.linalg.norm(v)
    return v / n


def embed_tokens(tokens: list[str], dim: int, seed: int) -> np.ndarray:
    if not tokens:
        return np.zeros((0, dim))
    return np.stack([embed_token(t, dim, seed) for t in tokens])


@dataclass
class PromptBundle:
    """Everything the two modulators need to know about one prompt."""

    prompt: str
    tokens: list[str]            # capped at max_prompt_tokens
    entities: list[str]          # lexicon hits within the kept tokens
    scene_emb: np.ndarray        # (S, d_text), rows unit norm
    entity_emb: np.ndarray       # (E, d_text); E == 0 in fallback
    truncated: bool              # prompt exceeded the token cap

    @property
    def fallback(self) -> bool:
        """No entities found: the entity stream passes features through raw."""
        return len(self.entities) == 0


def build_prompt_bundle(prompt: str, lexicon: frozenset[str], dim: int,
                        seed: int, max_tokens: int) -> PromptBundle:
    tokens = tokenize(prompt)
    if not tokens:
        raise InputError("prompt contains no tokens")
    truncated = len(tokens) > max_tokens
    tokens = tokens[:max_tokens]
    entities = []
    for tok in tokens:
        if tok in lexicon and tok not in entities:
            entities.append(tok)
    return PromptBundle(
        prompt=prompt,
        tokens=tokens,
        entities=entities,
        scene_emb=embed_tokens(tokens, dim, seed),
        entity_emb=embed_tokens(entities, dim, seed),
        truncated=truncated,
    )
