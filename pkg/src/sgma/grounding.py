"""Noun-phrase extraction and phrase-to-patch grounding."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from sgma.saliency import normalize_scores, patch_saliency
from sgma.surrogate.base import Encoder, TokenFeatures

logger = logging.getLogger(__name__)


class NoNounPhraseError(ValueError):
    """The caption has no noun content; callers fall back to the whole caption."""


# closed-class lexicon for the rule-based tagger
_DETERMINERS = set(
    "a an the this that these those some any each every another either neither no "
    "its his her their our my your several many few both all".split()
)
_PRONOUNS = set(
    "i you he she it we they him them me us who whom whose which what there here "
    "something someone somebody anything anyone nothing everything everyone itself themselves".split()
)
_PREPOSITIONS = set(
    "in on at of with by for from to into onto over under above below behind beside besides "
    "near next between through across along around against among during without within inside "
    "outside toward towards upon via beneath underneath atop past beyond amid up down off out "
    "about like than per".split()
)
_CONJUNCTIONS = set("and or but nor so yet as because while whereas although though if when where".split())
_ADVERBS = set(
    "very quite too also not just really almost together away back still then now always never "
    "often only even again".split()
)
_VERBS = set(
    "is are was were be been being am has have had do does did can could will would shall should "
    "may might must sit sits sat sitting stand stands stood standing run runs ran running walk walks "
    "walked walking play plays played playing hold holds held holding look looks looked looking "
    "lie lies lay lying ride rides rode riding wear wears wore wearing eat eats ate eating jump "
    "jumps jumped jumping show shows showed showing rest rests resting lean leans leaning fly flies "
    "flying swim swims swimming carry carries carrying watch watches watching wait waits waiting "
    "smile smiles smiling talk talks talking stare stares staring go goes going get gets getting "
    "make makes making take takes taking appear appears appearing seem seems seeming contain contains "
    "depict depicts depicting feature features featuring float floats floating hang hangs hanging "
    "surround surrounds surrounding cover covers covering".split()
)
_ADJECTIVES = set(
    "red green blue yellow purple orange white black gray grey brown pink golden silver dark light "
    "bright pale small large big little tiny huge giant tall short long wide narrow young old new "
    "round square-shaped flat empty full open closed wooden metal plastic striped spotted fluffy "
    "furry cute happy sad beautiful pretty colorful busy quiet sunny cloudy snowy wet dry hot cold "
    "clean dirty shiny smooth rough soft hard heavy several other many few various".split()
)
_NUMBERS = set("one two three four five six seven eight nine ten dozen".split())
_STOP_WORDS = _DETERMINERS | _PRONOUNS | _PREPOSITIONS | _CONJUNCTIONS | _ADVERBS | _VERBS | {"'s", "s"}

_ADJ_SUFFIXES = ("ful", "ous", "ive", "able", "ible", "less", "ish", "y")


def _tag(words: list[str]) -> list[str]:
    tags: list[str] = []
    for i, word in enumerate(words):
        prev = tags[-1] if tags else None
        nxt = words[i + 1] if i + 1 < len(words) else None
        if word in _DETERMINERS:
            tag = "DET"
        elif word in _PRONOUNS:
            tag = "PRON"
        elif word in _PREPOSITIONS:
            tag = "PREP"
        elif word in _CONJUNCTIONS:
            tag = "CONJ"
        elif word in _ADVERBS or word.endswith("ly") and len(word) > 4:
            tag = "ADV"
        elif word in _NUMBERS or word.isdigit():
            tag = "NUM"
        elif word in _ADJECTIVES:
            tag = "ADJ"
        elif word in _VERBS:
            tag = "VERB"
        elif word.endswith("ing") and len(word) > 4:
            tag = "NOUN" if prev in ("DET", "ADJ", "NUM") else "VERB"
        elif word.endswith("ed") and len(word) > 3:
            tag = "VERB" if prev in ("NOUN", "PRON") else "ADJ"
        elif (
            word.endswith("s")
            and not word.endswith("ss")
            and prev == "NOUN"
            and (nxt is None or nxt in _DETERMINERS | _PREPOSITIONS | _ADVERBS | _PRONOUNS | _ADJECTIVES | _NUMBERS)
        ):
            tag = "VERB"
        elif word.endswith(_ADJ_SUFFIXES) and nxt is not None and nxt not in _STOP_WORDS and len(word) > 4:
            tag = "ADJ"
        else:
            tag = "NOUN"
        tags.append(tag)
    return tags


def rule_chunker(caption: str) -> list[str]:
    """Maximal runs of NUM/ADJ/NOUN words ending in a NOUN (determiners dropped)."""
    words = re.findall(r"[a-z0-9]+(?:-[a-z0-9]+)*", caption.lower())
    tags = _tag(words)
    chunks, current, current_tags = [], [], []

    def flush():
        while current_tags and current_tags[-1] != "NOUN":
            current.pop()
            current_tags.pop()
        if current:
            chunks.append(" ".join(current))
        current.clear()
        current_tags.clear()

    for word, tag in zip(words, tags):
        if tag in ("ADJ", "NOUN", "NUM"):
            current.append(word)
            current_tags.append(tag)
        else:
            flush()
    flush()
    return chunks


class SpacyChunker:
    """Noun chunks from a spaCy pipeline (optional dependency)."""

    def __init__(self, model: str = "en_core_web_sm"):
        import spacy

        self.nlp = spacy.load(model)

    def __call__(self, caption: str) -> list[str]:
        return [chunk.text for chunk in self.nlp(caption).noun_chunks]


Chunker = Callable[[str], list[str]]


@dataclass
class PhraseSet:
    phrases: list[str]


def extract_noun_phrases(caption: str, chunker: Optional[Chunker] = None) -> PhraseSet:
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    chunker = chunker or rule_chunker
    phrases: list[str] = []
    for chunk in chunker(caption):
        words = [w for w in re.findall(r"[a-z0-9]+(?:-[a-z0-9]+)*", chunk.lower()) if w not in _STOP_WORDS]
        words = [w for j, w in enumerate(words) if j == 0 or w != words[j - 1]]
        phrase = " ".join(words)
        if phrase and phrase not in phrases:
            phrases.append(phrase)
    if not phrases:
        raise NoNounPhraseError(
            f"no noun phrase found in {caption!r}; use the whole caption as a single phrase"
        )
    return PhraseSet(phrases)


@dataclass
class PhraseRegion:
    phrase: str
    relevance: torch.Tensor  # (H, W), min-max normalized
    indices: torch.Tensor  # long tensor of patch indices
    center: Optional[torch.Tensor] = None  # (d_v,) mean of normalized clean tokens
    degenerate: bool = False

    @property
    def usable(self) -> bool:
        return (
            self.indices.numel() > 0
            and self.center is not None
            and bool(torch.isfinite(self.center).all())
            and float(self.center.norm()) > 0.0
        )


def threshold(flat: torch.Tensor, tau: float) -> torch.Tensor:
    """Indices strictly above ``tau``."""
    return torch.nonzero(flat > tau, as_tuple=False).flatten()


def associate(encoder: Encoder, image: torch.Tensor, phrase: str, tau: float = 0.3) -> PhraseRegion:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    relevance, degenerate = normalize_scores(patch_saliency(encoder, image, phrase).scores)
    indices = torch.empty(0, dtype=torch.long) if degenerate else threshold(relevance.flatten(), tau)
    return PhraseRegion(phrase, relevance, indices, degenerate=degenerate)


def phrase_centers(tokens: TokenFeatures, regions: list[PhraseRegion]) -> list[PhraseRegion]:
    """Attach to each region the mean of its normalized clean patch tokens.

    Regions whose center cancels to zero are flagged degenerate and keep no
    center, so loss consumers drop them.
    """
    patches = F.normalize(tokens.patch_tokens.detach().double(), dim=-1)
    out = []
    for region in regions:
        if region.indices.numel() == 0:
            out.append(replace(region, center=None))
            continue
        center = patches[region.indices].mean(dim=0)
        if not torch.isfinite(center).all() or float(center.norm()) < 1e-12:
            out.append(replace(region, center=None, degenerate=True))
        else:
            out.append(replace(region, center=center))
    return out


def ground_caption(
    encoder: Encoder,
    image: torch.Tensor,
    tokens: TokenFeatures,
    caption: str,
    tau: float = 0.3,
    chunker: Optional[Chunker] = None,
) -> tuple[list[PhraseRegion], bool]:
    """Phrase regions with centers for a caption; the flag marks a whole-caption fallback."""
    fallback = False
    try:
        phrases = extract_noun_phrases(caption, chunker).phrases
    except NoNounPhraseError:
        logger.warning("no noun phrases in %r; grounding the whole caption", caption)
        phrases, fallback = [caption.strip()], True
    regions = [associate(encoder, image, phrase, tau) for phrase in phrases]
    return phrase_centers(tokens, regions), fallback
