"""Per-candidate feature rows and sliding-window subgraph assembly.

A feature row has a frozen layout of width ``10 + 2*dim + 2*window``:

    [prior | edit distance | 6 string flags | entity-context sim |
     sense-context sim | context embedding (dim) | entity embedding (dim) |
     2*window neighbor-mention sims]

The adjacency for a mention has one row per candidate slot:
``row_normalize([subgraph relatednesses (2*window*slots), 1])`` where the
trailing 1 is the candidate's self-connection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .candidates import CandidateSet
from .corpus import Document
from .errors import DegenerateInputError
from .kb import EmbeddingStore, cosine, relatedness
from .numerics import row_normalize

log = logging.getLogger(__name__)

__all__ = [
    "FeatureConfig",
    "LocalFeatures",
    "CandidateFrame",
    "levenshtein",
    "string_features",
    "attention_weights",
    "context_embedding",
    "mention_embedding",
    "neighbor_compatibility",
    "build_subgraph",
    "context_window_words",
    "assemble_frame",
    "build_document_frames",
    "dump_frame",
]


@dataclass(frozen=True)
class FeatureConfig:
    """Shape and ablation switches for feature extraction."""

    slots: int = 10            # candidate slots per mention
    window: int = 3            # neighbor mentions each side
    context_window: int = 20   # context tokens each side of the span
    local: bool = False        # drop cross-mention features entirely
    noatt: bool = False        # uniform instead of similarity attention
    noemb: bool = False        # zero the two embedding blocks

    def feature_dim(self, dim: int) -> int:
        return 10 + 2 * dim + 2 * self.window

    def adjacency_cols(self) -> int:
        return 2 * self.window * self.slots + 1


@dataclass
class LocalFeatures:
    """Context-side evidence for one (mention, candidate) pair."""

    prior: float
    edit: float
    flags: np.ndarray          # 6 booleans as 0/1 floats
    compat_entity: float
    compat_sense: float
    context_vec: np.ndarray
    entity_vec: np.ndarray


@dataclass
class CandidateFrame:
    """Stacked model inputs for one mention."""

    mention_index: int
    entity_ids: list[str]
    feats: np.ndarray                      # slots x feature_dim
    adjacency: np.ndarray                  # slots x (2*window*slots + 1)
    cand_mask: np.ndarray                  # slots, bool
    neighbor_slot_mask: np.ndarray         # 2*window*slots, bool
    neighbor_positions: list[int | None] = field(default_factory=list)
    gold_slot: int = -1

    @property
    def valid_count(self) -> int:
        return int(self.cand_mask.sum())


def levenshtein(a: str, b: str) -> int:
    """Classic dynamic-programming edit distance."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


@lru_cache(maxsize=65536)
def _string_features_cached(surface: str, title: str) -> tuple[float, tuple[float, ...]]:
    edit = levenshtein(surface, title) / max(len(surface), len(title))
    flags = (
        float(surface == title),
        float(surface in title),
        float(title in surface),
        float(title.startswith(surface)),
        float(title.endswith(surface)),
        float(surface.startswith(title)),
    )
    return edit, flags


def string_features(surface: str, title: str) -> tuple[float, np.ndarray]:
    """Normalized edit distance plus six containment/affix flags.

    Flags: [equal, surface-in-title, title-in-surface,
    title-startswith-surface, title-endswith-surface,
    surface-startswith-title].
    """
    if not surface or not title:
        raise DegenerateInputError("string features need non-empty strings")
    edit, flags = _string_features_cached(surface, title)
    return edit, np.array(flags, dtype=np.float64)


def known_words(words, store: EmbeddingStore) -> list[str]:
    """Subsequence of words that have a word vector."""
    return [w for w in words if w in store.words]


def attention_weights(context_words, entity_id: str, store: EmbeddingStore) -> np.ndarray:
    """Softmax over cosine(word, entity) for the known context words.

    Unknown words must be filtered out by the caller beforehand (see
    :func:`known_words`); an empty list has no meaningful answer.
    """
    if not context_words:
        raise DegenerateInputError("no known context words to attend over")
    entity = store.entities[entity_id]
    sims = np.array([cosine(store.words[w], entity) for w in context_words])
    z = np.exp(sims - sims.max())
    return z / z.sum()


def context_embedding(context_words, weights: np.ndarray, store: EmbeddingStore) -> np.ndarray:
    """Convex combination of the known context word vectors."""
    vecs = np.stack([store.words[w] for w in context_words])
    return weights @ vecs


def mention_embedding(surface: str, store: EmbeddingStore) -> np.ndarray:
    """Mean of the surface tokens' word vectors; zero when none are known."""
    vecs = [store.words[tok] for tok in surface.split() if tok in store.words]
    if not vecs:
        log.warning("no word vectors for mention surface %r; using zero vector", surface)
        return np.zeros(store.dim)
    return np.mean(vecs, axis=0)


def neighbor_compatibility(
    entity_id: str,
    neighbor_mentions,
    store: EmbeddingStore,
) -> np.ndarray:
    """cosine(entity, neighbor mention embedding) per window slot.

    ``neighbor_mentions`` holds one Mention or None per slot in window
    order; missing neighbors and zero mention embeddings give 0.
    """
    entity = store.entities[entity_id]
    out = np.zeros(len(neighbor_mentions))
    for k, mention in enumerate(neighbor_mentions):
        if mention is None:
            continue
        emb = mention_embedding(mention.surface, store)
        if emb.any():
            out[k] = cosine(entity, emb)
    return out


def build_subgraph(
    entity_id: str,
    neighbor_sets,
    store: EmbeddingStore,
    window: int,
    slots: int,
) -> np.ndarray:
    """Relatedness from one candidate to every neighbor candidate slot.

    Returns a vector of length ``2*window*slots`` ordered by (neighbor
    position, candidate slot); invalid slots are 0. Candidates of the same
    mention are never included.
    """
    g = np.zeros(2 * window * slots)
    for p, cand_set in enumerate(neighbor_sets):
        if cand_set is None:
            continue
        for k, other in enumerate(cand_set.entity_ids):
            g[p * slots + k] = relatedness(entity_id, other, store)
    return g


def context_window_words(doc: Document, mention_index: int, context_window: int) -> list[str]:
    """Tokens around the span, excluding the span itself."""
    m = doc.mentions[mention_index]
    lo = max(0, m.start - context_window)
    return doc.tokens[lo : m.start] + doc.tokens[m.end : m.end + context_window]


def _window_slots(doc: Document, mention_index: int, window: int) -> list[int | None]:
    """Document mention index per window position, None at boundaries."""
    count = len(doc.mentions)
    offsets = list(range(-window, 0)) + list(range(1, window + 1))
    return [
        mention_index + off if 0 <= mention_index + off < count else None
        for off in offsets
    ]


def _rows_normalized(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return rows / safe[:, None], norms


def assemble_frame(
    doc: Document,
    mention_index: int,
    candidate_sets: list[CandidateSet],
    store: EmbeddingStore,
    cfg: FeatureConfig,
    mention_embeddings: list[np.ndarray] | None = None,
) -> CandidateFrame:
    """Build the padded feature matrix and normalized adjacency for one mention."""
    mention = doc.mentions[mention_index]
    cand_set = candidate_sets[mention_index]
    dim = store.dim
    slots, window = cfg.slots, cfg.window
    valid = len(cand_set.entries)

    positions = _window_slots(doc, mention_index, window)
    neighbor_sets = [None if p is None else candidate_sets[p] for p in positions]
    if mention_embeddings is not None:
        # per-document cache so neighbor compatibilities reuse embeddings
        nbr_embs = [None if p is None else mention_embeddings[p] for p in positions]
    else:
        nbr_embs = [
            None if p is None else mention_embedding(doc.mentions[p].surface, store)
            for p in positions
        ]

    feats = np.zeros((slots, cfg.feature_dim(dim)))
    adjacency = np.zeros((slots, 2 * window * slots + 1))
    adjacency[:, -1] = 1.0  # self-connection; padding rows stay pure self-loop
    slot_mask = np.zeros(2 * window * slots, dtype=bool)
    for p, cs in enumerate(neighbor_sets):
        if cs is not None:
            slot_mask[p * slots : p * slots + len(cs.entries)] = True

    if valid:
        cand_vecs = np.stack([store.entities[eid] for eid in cand_set.entity_ids])
        cand_unit, _ = _rows_normalized(cand_vecs)

        ctx = known_words(context_window_words(doc, mention_index, cfg.context_window), store)
        if ctx:
            word_vecs = np.stack([store.words[w] for w in ctx])
            word_unit, _ = _rows_normalized(word_vecs)
            if cfg.noatt:
                weights = np.full((len(ctx), valid), 1.0 / len(ctx))
            else:
                sims = word_unit @ cand_unit.T            # word x candidate cosines
                z = np.exp(sims - sims.max(axis=0))
                weights = z / z.sum(axis=0)
            context_vecs = weights.T @ word_vecs          # candidate x dim
            ctx_unit, ctx_norms = _rows_normalized(context_vecs)
            compat_e = np.where(ctx_norms > 0.0, np.sum(cand_unit * ctx_unit, axis=1), 0.0)
            compat_s = compat_e.copy()
            for j, eid in enumerate(cand_set.entity_ids):
                sense = store.sense_for_entity(eid)
                if sense is not None and ctx_norms[j] > 0.0:
                    compat_s[j] = cosine(sense, context_vecs[j])
        else:
            context_vecs = np.zeros((valid, dim))
            compat_e = np.zeros(valid)
            compat_s = np.zeros(valid)

        for j, (entity_id, prior) in enumerate(cand_set.entries):
            edit, flags = string_features(mention.surface, store.entity_title(entity_id))
            feats[j, 0] = prior
            feats[j, 1] = edit
            feats[j, 2:8] = flags
            feats[j, 8] = compat_e[j]
            feats[j, 9] = compat_s[j]
            if not cfg.noemb:
                feats[j, 10 : 10 + dim] = context_vecs[j]
                feats[j, 10 + dim : 10 + 2 * dim] = cand_vecs[j]

        if not cfg.local:
            for k, emb in enumerate(nbr_embs):
                if emb is not None and emb.any():
                    nc = cand_unit @ (emb / np.linalg.norm(emb))
                    feats[:valid, 10 + 2 * dim + k] = nc
            for p, cs in enumerate(neighbor_sets):
                if cs is None or not cs.entries:
                    continue
                other_vecs = np.stack([store.entities[e] for e in cs.entity_ids])
                other_unit, _ = _rows_normalized(other_vecs)
                rel = np.clip(cand_unit @ other_unit.T, 0.0, None)
                for j, eid in enumerate(cand_set.entity_ids):
                    for k, other in enumerate(cs.entity_ids):
                        if eid == other:
                            rel[j, k] = 1.0
                adjacency[:valid, p * slots : p * slots + len(cs.entries)] = rel

    adjacency = row_normalize(adjacency)
    mask = np.array(cand_set.mask, dtype=bool)
    gold_slot = cand_set.slot_of(mention.gold) if mention.gold else -1
    return CandidateFrame(
        mention_index=mention_index,
        entity_ids=list(cand_set.entity_ids),
        feats=feats,
        adjacency=adjacency,
        cand_mask=mask,
        neighbor_slot_mask=slot_mask,
        neighbor_positions=positions,
        gold_slot=gold_slot,
    )


def build_document_frames(
    doc: Document,
    dictionary,
    store: EmbeddingStore,
    cfg: FeatureConfig,
) -> list[CandidateFrame]:
    """Candidate generation plus frame assembly for every mention."""
    from .candidates import generate

    candidate_sets = [
        generate(m.surface, dictionary, cfg.slots, mention_index=i)
        for i, m in enumerate(doc.mentions)
    ]
    embeddings = [mention_embedding(m.surface, store) for m in doc.mentions]
    return [
        assemble_frame(doc, i, candidate_sets, store, cfg, mention_embeddings=embeddings)
        for i in range(len(doc.mentions))
    ]


def dump_frame(frame: CandidateFrame, doc_id: str, fh) -> None:
    """Debug dump: row-major floats at 17 significant digits."""

    def fmt(arr):
        return " ".join(f"{x:.17g}" for x in np.asarray(arr, dtype=np.float64).reshape(-1))

    fh.write(f"frame {doc_id} {frame.mention_index}\n")
    fh.write(f"f {frame.feats.shape[0]} {frame.feats.shape[1]} {fmt(frame.feats)}\n")
    fh.write(f"adj {frame.adjacency.shape[0]} {frame.adjacency.shape[1]} {fmt(frame.adjacency)}\n")
    fh.write("cand_mask " + " ".join(str(int(b)) for b in frame.cand_mask) + "\n")
    fh.write("nbr_mask " + " ".join(str(int(b)) for b in frame.neighbor_slot_mask) + "\n")
