"""Embedding store, mention-prior dictionary, and similarity measures.

File formats (UTF-8 text, ``#`` comment lines ignored):

* embeddings: header ``d <dim>``, then ``w <surface> <floats>``,
  ``s <sense_id> <entity_id> <floats>``, ``e <entity_id> <floats>``
* dictionary: ``m <surface> <entity_id> <prior>`` (surface may contain
  spaces; ids and priors may not)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError

__all__ = [
    "EmbeddingStore",
    "MentionDictionary",
    "load_embeddings",
    "save_embeddings",
    "load_dictionary",
    "save_dictionary",
    "merge_priors",
    "cosine",
    "relatedness",
    "SyntheticKbConfig",
    "build_synthetic_kb",
]


@dataclass
class EmbeddingStore:
    """Words, senses, and entities sharing one embedding dimension."""

    dim: int
    words: dict[str, np.ndarray] = field(default_factory=dict)
    senses: dict[str, tuple[np.ndarray, str]] = field(default_factory=dict)
    entities: dict[str, np.ndarray] = field(default_factory=dict)

    def sense_for_entity(self, entity_id: str) -> np.ndarray | None:
        """First sense vector referring to the entity, if any."""
        cached = self.__dict__.get("_sense_index")
        if cached is None or cached[0] != len(self.senses):
            index = {}
            for vec, eid in self.senses.values():
                index.setdefault(eid, vec)
            cached = (len(self.senses), index)
            self.__dict__["_sense_index"] = cached
        return cached[1].get(entity_id)

    def entity_title(self, entity_id: str) -> str:
        """Human-readable title; ids use underscores where titles use spaces."""
        return entity_id.replace("_", " ")

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(
            dim=self.dim,
            words={k: v.copy() for k, v in self.words.items()},
            senses={k: (v.copy(), e) for k, (v, e) in self.senses.items()},
            entities={k: v.copy() for k, v in self.entities.items()},
        )


class MentionDictionary:
    """Surface form -> candidate entities with prior probabilities.

    Entries per surface are kept sorted by prior descending, ties broken
    by ascending entity id; duplicate (surface, entity) pairs collapse to
    their maximum prior.
    """

    def __init__(self, entries: dict[str, list[tuple[str, float]]] | None = None):
        self.entries: dict[str, list[tuple[str, float]]] = {}
        if entries:
            for surface, pairs in entries.items():
                for entity_id, prior in pairs:
                    self.add(surface, entity_id, prior)

    def add(self, surface: str, entity_id: str, prior: float) -> None:
        if not (0.0 < prior <= 1.0):
            raise DataError(f"prior for ({surface!r}, {entity_id}) must be in (0, 1], got {prior}")
        bucket = self.entries.setdefault(surface, [])
        for i, (eid, p) in enumerate(bucket):
            if eid == entity_id:
                if prior > p:
                    bucket[i] = (eid, prior)
                break
        else:
            bucket.append((entity_id, prior))
        bucket.sort(key=lambda item: (-item[1], item[0]))

    def lookup(self, surface: str) -> list[tuple[str, float]]:
        return self.entries.get(surface.strip(), [])

    def surfaces(self) -> list[str]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def __eq__(self, other) -> bool:
        return isinstance(other, MentionDictionary) and {
            s: v for s, v in sorted(self.entries.items())
        } == {s: v for s, v in sorted(other.entries.items())}


def _parse_floats(parts: list[str], path, lineno) -> np.ndarray:
    try:
        return np.array([float(x) for x in parts], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"bad float: {exc}", path=path, line=lineno) from None


def load_embeddings(path) -> EmbeddingStore:
    """Parse an embedding file, enforcing the header dimension on every row."""
    store: EmbeddingStore | None = None
    pending_senses: list[tuple[int, str, str, np.ndarray]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if store is None:
                if kind != "d" or len(parts) != 2:
                    raise DataError("expected header 'd <dim>'", path=path, line=lineno)
                try:
                    dim = int(parts[1])
                except ValueError:
                    raise DataError(f"bad dimension {parts[1]!r}", path=path, line=lineno) from None
                if dim < 1:
                    raise DataError(f"dimension must be positive, got {dim}", path=path, line=lineno)
                store = EmbeddingStore(dim=dim)
                continue
            if kind == "w":
                if len(parts) < 2 + store.dim:
                    raise DataError("truncated word record", path=path, line=lineno)
                key, vec = parts[1], _parse_floats(parts[2:], path, lineno)
            elif kind == "s":
                if len(parts) < 3 + store.dim:
                    raise DataError("truncated sense record", path=path, line=lineno)
                key, vec = parts[1], _parse_floats(parts[3:], path, lineno)
            elif kind == "e":
                if len(parts) < 2 + store.dim:
                    raise DataError("truncated entity record", path=path, line=lineno)
                key, vec = parts[1], _parse_floats(parts[2:], path, lineno)
            else:
                raise DataError(f"unknown record type {kind!r}", path=path, line=lineno)
            if vec.shape[0] != store.dim:
                raise DataError(
                    f"vector has {vec.shape[0]} components, header says {store.dim}",
                    path=path,
                    line=lineno,
                )
            if not vec.any():
                raise DataError(f"all-zero vector for {key!r}", path=path, line=lineno)
            table = {"w": store.words, "s": store.senses, "e": store.entities}[kind]
            if key in table:
                raise DataError(f"duplicate key {key!r}", path=path, line=lineno)
            if kind == "s":
                pending_senses.append((lineno, key, parts[2], vec))
                table[key] = (vec, parts[2])
            elif kind == "w":
                store.words[key] = vec
            else:
                store.entities[key] = vec
    if store is None:
        raise DataError("empty embedding file", path=path)
    for lineno, sense_id, entity_id, _vec in pending_senses:
        if entity_id not in store.entities:
            raise DataError(
                f"sense {sense_id!r} references unknown entity {entity_id!r}",
                path=path,
                line=lineno,
            )
    return store


def _fmt(vec: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in vec)


def save_embeddings(store: EmbeddingStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"d {store.dim}\n")
        for key, vec in store.words.items():
            fh.write(f"w {key} {_fmt(vec)}\n")
        for key, vec in store.entities.items():
            fh.write(f"e {key} {_fmt(vec)}\n")
        for key, (vec, eid) in store.senses.items():
            fh.write(f"s {key} {eid} {_fmt(vec)}\n")


def load_dictionary(path) -> MentionDictionary:
    result = MentionDictionary()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "m" or len(parts) < 4:
                raise DataError("expected 'm <surface> <entity_id> <prior>'", path=path, line=lineno)
            surface = " ".join(parts[1:-2])
            entity_id = parts[-2]
            try:
                prior = float(parts[-1])
            except ValueError:
                raise DataError(f"bad prior {parts[-1]!r}", path=path, line=lineno) from None
            try:
                result.add(surface, entity_id, prior)
            except DataError as exc:
                raise DataError(str(exc), path=path, line=lineno) from None
    return result


def save_dictionary(dictionary: MentionDictionary, path) -> None:
    """Write the canonical sorted form: surfaces ascending, priors descending."""
    with open(path, "w", encoding="utf-8") as fh:
        for surface in dictionary.surfaces():
            for entity_id, prior in dictionary.entries[surface]:
                fh.write(f"m {surface} {entity_id} {repr(float(prior))}\n")


def merge_priors(sources: list[MentionDictionary]) -> MentionDictionary:
    """Union of sources; each (surface, entity) keeps its maximum prior."""
    if not sources:
        raise ConfigError("merge_priors needs at least one source")
    merged = MentionDictionary()
    for src in sources:
        for surface, pairs in src.entries.items():
            for entity_id, prior in pairs:
                merged.add(surface, entity_id, prior)
    return merged


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def relatedness(entity_a: str, entity_b: str, store: EmbeddingStore) -> float:
    """Entity-pair relation strength in [0, 1]; identical ids relate fully.

    Negative cosines are clamped to 0 and read as "no relation", which
    keeps downstream row normalization well-defined.
    """
    if entity_a not in store.entities:
        raise KeyError(f"unknown entity {entity_a!r}")
    if entity_b not in store.entities:
        raise KeyError(f"unknown entity {entity_b!r}")
    if entity_a == entity_b:
        return 1.0
    return max(0.0, cosine(store.entities[entity_a], store.entities[entity_b]))


# --- synthetic knowledge base -------------------------------------------------

@dataclass(frozen=True)
class SyntheticKbConfig:
    """Topic-clustered desk-scale KB for controlled experiments.

    Every entity owns one unambiguous surface ``uni<j>`` (top prior) and
    participates in three genuinely polysemous surfaces ``amb<j>``: once as
    the top reading, once as the middle, once as the lowest, always with
    the other readings drawn from different topics and adjacent priors
    separated by ``distractor_margin``. Corpora use each surface in every
    direction, so the candidate list itself never reveals which reading a
    document intends; only context and cross-mention coherence do.
    """

    topics: int = 8
    entities: int = 200
    dim: int = 32
    topic_words: int = 40
    filler_words: int = 120
    filler_clusters: int = 2
    entity_noise: float = 0.35
    word_noise: float = 0.35
    filler_noise: float = 0.4
    sense_noise: float = 0.1
    word_center_mix: float = 0.7
    # per-entity pull toward the filler hubs: inflates an entity's raw
    # context compatibility regardless of topic, so similarity scores need
    # the entity vector itself to calibrate away the bias
    hub_affinity: float = 0.6
    pair_topics: bool = True
    middle_prior_lo: float = 0.3
    middle_prior_hi: float = 0.38
    clean_prior: float = 0.7
    distractor_margin: float = 0.2
    extra_candidates: int = 3
    seed: int = 7


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _jitter(center: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector near a unit center; ``amount`` is the noise-to-signal ratio."""
    return _unit(center + amount * _unit(rng.normal(size=center.shape[0])))


def build_synthetic_kb(cfg: SyntheticKbConfig) -> tuple[EmbeddingStore, MentionDictionary]:
    if cfg.topics < 2:
        raise ConfigError("need at least 2 topics to draw distractors")
    if cfg.entities < cfg.topics:
        raise ConfigError("need at least one entity per topic")
    if cfg.extra_candidates + 3 > cfg.entities:
        raise ConfigError(
            f"{cfg.extra_candidates} extra candidates demand more entities than the KB holds"
        )
    if cfg.middle_prior_hi + cfg.distractor_margin > 1.0:
        raise ConfigError("middle prior plus distractor margin exceeds 1")
    if cfg.middle_prior_lo - cfg.distractor_margin <= 0.05:
        raise ConfigError("lowest reading's prior would not clear the extras")
    if cfg.topics < 3:
        raise ConfigError("need at least 3 topics for three cross-topic readings")
    if cfg.dim < 2 * cfg.topics + cfg.filler_clusters:
        raise ConfigError("dimension too small for orthogonal topic and filler directions")
    if not (0.0 < cfg.word_center_mix <= 1.0):
        raise ConfigError("word_center_mix must be in (0, 1]")

    rng = np.random.default_rng(cfg.seed)
    store = EmbeddingStore(dim=cfg.dim)

    # Orthonormal directions: entity topic centers, filler hubs, then a
    # word-only component per topic. Word centers mix the entity center
    # with that extra component, so word-entity cosines stay topic
    # selective while the context direction carries information a single
    # similarity score cannot summarize.
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, 2 * cfg.topics + cfg.filler_clusters)))
    centers = [basis[:, t] for t in range(cfg.topics)]
    hubs = [basis[:, cfg.topics + c] for c in range(cfg.filler_clusters)]
    spread = np.sqrt(1.0 - cfg.word_center_mix**2)
    word_centers = [
        _unit(cfg.word_center_mix * centers[t]
              + spread * basis[:, cfg.topics + cfg.filler_clusters + t])
        for t in range(cfg.topics)
    ]
    if cfg.pair_topics:
        # Pull odd-indexed centers toward their even partner (cosine ~0.5)
        # so some topic pairs are confusable by a plain similarity score.
        for t in range(1, cfg.topics, 2):
            centers[t] = _unit(0.5 * centers[t - 1] + np.sqrt(0.75) * centers[t])
            word_centers[t] = _unit(0.5 * word_centers[t - 1] + np.sqrt(0.75) * word_centers[t])

    topic_of: dict[str, int] = {}
    entity_ids: list[str] = []
    per_topic: list[list[str]] = [[] for _ in range(cfg.topics)]
    for i in range(cfg.entities):
        t = i % cfg.topics
        eid = f"E{t}_{i // cfg.topics}"
        hub = hubs[int(rng.integers(cfg.filler_clusters))]
        affinity = float(rng.uniform(0.0, cfg.hub_affinity))
        vec = _jitter(_unit(centers[t] + affinity * hub), cfg.entity_noise, rng)
        store.entities[eid] = vec
        store.senses[f"S_{eid}"] = (_jitter(vec, cfg.sense_noise, rng), eid)
        topic_of[eid] = t
        entity_ids.append(eid)
        per_topic[t].append(eid)

    for t in range(cfg.topics):
        for j in range(cfg.topic_words):
            store.words[f"t{t}w{j}"] = _jitter(word_centers[t], cfg.word_noise, rng)
    for j in range(cfg.filler_words):
        hub = hubs[j % cfg.filler_clusters]
        store.words[f"fill{j}"] = _jitter(hub, cfg.filler_noise, rng)

    def constrained_permutation(forbidden: list[set[int]]) -> np.ndarray:
        """Permutation whose image at k avoids the topics in forbidden[k]."""
        perm = rng.permutation(cfg.entities)
        for k in range(cfg.entities):
            if topic_of[entity_ids[perm[k]]] not in forbidden[k]:
                continue
            for j in rng.permutation(cfg.entities):
                if j == k:
                    continue
                if (
                    topic_of[entity_ids[perm[j]]] not in forbidden[k]
                    and topic_of[entity_ids[perm[k]]] not in forbidden[j]
                ):
                    perm[k], perm[j] = perm[j], perm[k]
                    break
            else:
                raise ConfigError("cannot arrange cross-topic readings")
        return perm

    # Reading roles are permutations: every entity is the top reading of
    # exactly one ambiguous surface, the middle of one, and the lowest of
    # one, so each surface's corpus usage spreads over all its readings.
    own_topic = [{topic_of[eid]} for eid in entity_ids]
    middle = constrained_permutation(own_topic)
    lowest = constrained_permutation(
        [own_topic[k] | {topic_of[entity_ids[middle[k]]]} for k in range(cfg.entities)]
    )

    # Surface numbering is shuffled so string features carry no trace of
    # any reading's entity id.
    surface_number = rng.permutation(cfg.entities)

    dictionary = MentionDictionary()
    for k, eid in enumerate(entity_ids):
        mid_entity = entity_ids[middle[k]]
        low_entity = entity_ids[lowest[k]]
        clean = f"uni{surface_number[k]:03d}"
        ambiguous = f"amb{surface_number[k]:03d}"
        mid_prior = float(rng.uniform(cfg.middle_prior_lo, cfg.middle_prior_hi))
        dictionary.add(clean, eid, cfg.clean_prior)
        dictionary.add(ambiguous, eid, mid_prior + cfg.distractor_margin)
        dictionary.add(ambiguous, mid_entity, mid_prior)
        dictionary.add(ambiguous, low_entity, mid_prior - cfg.distractor_margin)
        # one low-prior extra from every topic the readings miss, so each
        # surface covers all topics and the candidate graph alone cannot
        # tell which topic a document is about
        readings = {eid, mid_entity, low_entity}
        covered = {topic_of[e] for e in readings}
        for t in range(cfg.topics):
            if t in covered:
                continue
            pool = per_topic[t]
            extra = pool[int(rng.integers(len(pool)))]
            dictionary.add(ambiguous, extra, float(rng.uniform(0.02, 0.05)))
        extras = rng.choice(len(entity_ids), size=cfg.extra_candidates, replace=False)
        for rank, idx in enumerate(extras):
            extra = entity_ids[idx]
            if extra != eid:
                dictionary.add(clean, extra, 0.05 / (rank + 1))

        # Surface tokens get word vectors (prior-weighted blend of their
        # candidates) so mention embeddings exist for neighbor features.
        for surface in (clean, ambiguous):
            blend = np.zeros(cfg.dim)
            for cand, prior in dictionary.entries[surface]:
                blend += prior * store.entities[cand]
            store.words[surface] = _unit(blend)

    return store, dictionary
