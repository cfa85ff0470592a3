"""Document data model, corpus I/O, and the synthetic corpus generator.

Corpus file format, one block per document:

    doc <id>
    text <space-separated tokens>
    mention <start> <end> <gold_entity_id|->

Mention lines refer to [start, end) token offsets; ``-`` means no gold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .kb import EmbeddingStore, MentionDictionary

__all__ = [
    "Mention",
    "Document",
    "load_corpus",
    "save_corpus",
    "neighbors",
    "SyntheticCorpusConfig",
    "generate_synthetic_corpus",
]


@dataclass
class Mention:
    start: int
    end: int
    surface: str
    gold: str | None = None


@dataclass
class Document:
    doc_id: str
    tokens: list[str]
    mentions: list[Mention] = field(default_factory=list)

    def validate(self) -> None:
        """Check span bounds, ordering, overlap, and surface consistency."""
        prev_end = 0
        prev = None
        for m in self.mentions:
            if m.end <= m.start:
                raise DataError(f"doc {self.doc_id}: empty span [{m.start}, {m.end})")
            if m.start < 0 or m.end > len(self.tokens):
                raise DataError(
                    f"doc {self.doc_id}: span [{m.start}, {m.end}) outside {len(self.tokens)} tokens"
                )
            if m.start < prev_end:
                raise DataError(
                    f"doc {self.doc_id}: span [{m.start}, {m.end}) overlaps [{prev.start}, {prev.end})"
                )
            joined = " ".join(self.tokens[m.start : m.end])
            if m.surface != joined:
                raise DataError(
                    f"doc {self.doc_id}: surface {m.surface!r} != span text {joined!r}"
                )
            prev_end = m.end
            prev = m


def load_corpus(path) -> list[Document]:
    docs: list[Document] = []
    current: Document | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "doc":
                if len(parts) != 2:
                    raise DataError("expected 'doc <id>'", path=path, line=lineno)
                current = Document(doc_id=parts[1], tokens=[])
                docs.append(current)
            elif parts[0] == "text":
                if current is None:
                    raise DataError("'text' before any 'doc'", path=path, line=lineno)
                if current.tokens:
                    raise DataError(f"doc {current.doc_id}: duplicate text line", path=path, line=lineno)
                current.tokens = parts[1:]
            elif parts[0] == "mention":
                if current is None or not current.tokens:
                    raise DataError("'mention' before 'text'", path=path, line=lineno)
                if len(parts) != 4:
                    raise DataError("expected 'mention <start> <end> <gold|->'", path=path, line=lineno)
                try:
                    start, end = int(parts[1]), int(parts[2])
                except ValueError:
                    raise DataError("mention offsets must be integers", path=path, line=lineno) from None
                gold = None if parts[3] == "-" else parts[3]
                surface = " ".join(current.tokens[max(start, 0) : max(end, 0)])
                current.mentions.append(Mention(start, end, surface, gold))
            else:
                raise DataError(f"unknown line type {parts[0]!r}", path=path, line=lineno)
    for doc in docs:
        try:
            doc.validate()
        except DataError as exc:
            raise DataError(str(exc), path=path) from None
    return docs


def save_corpus(docs: list[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(f"doc {doc.doc_id}\n")
            fh.write("text " + " ".join(doc.tokens) + "\n")
            for m in doc.mentions:
                fh.write(f"mention {m.start} {m.end} {m.gold if m.gold is not None else '-'}\n")


def neighbors(doc: Document, index: int, window: int) -> list[int]:
    """Mention indices up to ``window`` positions either side of ``index``."""
    count = len(doc.mentions)
    if not (0 <= index < count):
        raise ConfigError(f"mention index {index} outside 0..{count - 1}")
    if window < 0:
        raise ConfigError(f"window must be nonnegative, got {window}")
    left = range(max(0, index - window), index)
    right = range(index + 1, min(count, index + window + 1))
    return list(left) + list(right)


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Controls for the desk-scale corpus drawn from a synthetic KB.

    Every document sticks to one topic. With ``distractor_prob`` a mention
    is *distracted*: it uses an ambiguous surface in which the gold entity
    is a lower reading, so at least one off-topic candidate outranks it by
    prior. Non-distracted mentions use surfaces in the top-reading
    direction (``ambiguous_primary_prob``, falling back to the entity's
    unambiguous surface), which keeps the candidate list itself
    uninformative about the intended reading. Independently,
    ``filler_context_prob`` replaces a mention's context with topic-free
    filler, leaving coherence as the only signal, and informative contexts
    are contaminated with words from one wrong topic, biased toward the
    surface's top reading with ``contamination_bias``.
    """

    documents: int = 500
    mentions_per_doc: int = 6
    distractor_prob: float = 0.5
    ambiguous_primary_prob: float = 1.0
    filler_context_prob: float = 0.5
    context_tokens: int = 20
    topic_density: float = 0.3
    contamination: float = 0.22
    contamination_bias: float = 0.6
    # how often entities are drawn as golds: a stable trait keyed by
    # popularity_seed so separate train/test corpora share it
    popularity_weight: float = 3.0
    popularity_fraction: float = 0.5
    popularity_seed: int = 0
    # distracted mentions prefer surfaces whose top reading lies in one
    # per-document shadow topic, giving the wrong readings their own
    # coherent story that prior mass alone cannot see through
    shadow_bias: float = 0.75
    seed: int = 7
    id_prefix: str = "syn"


def _context_tokens(
    rng: np.random.Generator,
    informative: bool,
    topic: int,
    noise_topic: int,
    cfg: SyntheticCorpusConfig,
    topic_words: list[list[str]],
    fillers: list[str],
) -> list[str]:
    out = []
    for _ in range(cfg.context_tokens):
        u = rng.random()
        if informative and u < cfg.topic_density:
            words = topic_words[topic]
            out.append(words[rng.integers(len(words))])
        elif informative and u < cfg.topic_density + cfg.contamination:
            words = topic_words[noise_topic]
            out.append(words[rng.integers(len(words))])
        else:
            out.append(fillers[rng.integers(len(fillers))])
    return out


def generate_synthetic_corpus(
    store: EmbeddingStore,
    dictionary: MentionDictionary,
    cfg: SyntheticCorpusConfig,
) -> list[Document]:
    """Deterministic function of (store, dictionary, config)."""
    topics = sorted({eid.split("_")[0] for eid in store.entities})
    n_topics = len(topics)
    by_topic: list[list[str]] = [[] for _ in range(n_topics)]
    for eid in store.entities:
        by_topic[topics.index(eid.split("_")[0])].append(eid)
    for bucket in by_topic:
        bucket.sort()
        if len(bucket) < cfg.mentions_per_doc:
            raise ConfigError(
                f"{cfg.mentions_per_doc} mentions per doc demand more entities than "
                f"topic clusters hold ({len(bucket)})"
            )

    topic_words: list[list[str]] = [[] for _ in range(n_topics)]
    fillers: list[str] = []
    for word in store.words:
        if word.startswith("t") and "w" in word[1:]:
            t = word[1 : word.index("w", 1)]
            if t.isdigit() and int(t) < n_topics:
                topic_words[int(t)].append(word)
                continue
        if word.startswith("fill"):
            fillers.append(word)
    if not fillers or any(not tw for tw in topic_words):
        raise ConfigError("store lacks synthetic topic/filler vocabulary")

    # surface roles from the dictionary: an ambiguous surface is usable in
    # its top-reading direction or in one of its lower (distracted) ones
    clean_surface: dict[str, str] = {}
    top_surfaces: dict[str, list[str]] = {}
    lower_surfaces: dict[str, list[str]] = {}
    top_reading: dict[str, str] = {}
    for surface in dictionary.surfaces():
        entries = dictionary.entries[surface]
        if surface.startswith("amb") and len(entries) >= 2:
            top_reading[surface] = entries[0][0]
            top_surfaces.setdefault(entries[0][0], []).append(surface)
            for eid, prior in entries[1:]:
                if prior > 0.09:  # readings, not low-prior extras
                    lower_surfaces.setdefault(eid, []).append(surface)
        elif surface.startswith("uni"):
            clean_surface[entries[0][0]] = surface
    if not lower_surfaces:
        raise ConfigError("store lacks ambiguous synthetic surfaces")

    def topic_index(entity_id: str) -> int:
        return topics.index(entity_id.split("_")[0])

    pop_rng = np.random.default_rng(cfg.popularity_seed)
    popularity = {
        eid: cfg.popularity_weight if pop_rng.random() < cfg.popularity_fraction else 1.0
        for eid in sorted(store.entities)
    }
    topic_weights = []
    for bucket in by_topic:
        w = np.array([popularity[eid] for eid in bucket])
        topic_weights.append(w / w.sum())

    rng = np.random.default_rng(cfg.seed)
    docs: list[Document] = []
    for di in range(cfg.documents):
        topic = int(rng.integers(n_topics))
        shadow = (topic + 1 + int(rng.integers(n_topics - 1))) % n_topics
        picks = rng.choice(
            len(by_topic[topic]), size=cfg.mentions_per_doc, replace=False,
            p=topic_weights[topic],
        )
        golds = [by_topic[topic][i] for i in picks]

        tokens: list[str] = []
        mentions: list[Mention] = []
        for gold in golds:
            distracted = rng.random() < cfg.distractor_prob and gold in lower_surfaces
            as_top = top_surfaces.get(gold, [])
            if distracted:
                options = lower_surfaces[gold]
                shadowed = [s for s in options if topic_index(top_reading[s]) == shadow]
                if shadowed and rng.random() < cfg.shadow_bias:
                    options = shadowed
                surface = options[int(rng.integers(len(options)))]
            elif as_top and rng.random() < cfg.ambiguous_primary_prob:
                surface = as_top[int(rng.integers(len(as_top)))]
            else:
                surface = clean_surface[gold]
            # context style is independent of the reading direction, so a
            # bare candidate list plus context style never betrays the gold
            informative = rng.random() >= cfg.filler_context_prob
            if rng.random() < cfg.contamination_bias:
                noise_topic = shadow
            else:
                noise_topic = (topic + 1 + int(rng.integers(n_topics - 1))) % n_topics
            tokens.extend(
                _context_tokens(rng, informative, topic, noise_topic, cfg, topic_words, fillers)
            )
            start = len(tokens)
            tokens.append(surface)
            mentions.append(Mention(start, start + 1, surface, gold))
            tokens.extend(
                _context_tokens(rng, informative, topic, noise_topic, cfg, topic_words, fillers)
            )
        doc = Document(doc_id=f"{cfg.id_prefix}{di}", tokens=tokens, mentions=mentions)
        doc.validate()
        docs.append(doc)
    return docs
