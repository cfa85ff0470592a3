"""Small handcrafted worlds for gradient checks and diagnostics."""

from __future__ import annotations

import numpy as np

from .corpus import Document, Mention
from .features import FeatureConfig, build_document_frames
from .kb import EmbeddingStore, MentionDictionary
from .model import ModelConfig, ModelParams


def tiny_store() -> EmbeddingStore:
    """Four entities and a handful of words in four dimensions."""
    store = EmbeddingStore(dim=4)
    store.entities["E_team"] = np.array([1.0, 0.0, 0.0, 0.0])
    store.entities["E_country"] = np.array([0.0, 1.0, 0.0, 0.0])
    store.entities["E_club"] = np.array([0.8, 0.6, 0.0, 0.0])
    store.entities["E_city"] = np.array([0.0, 0.0, 1.0, 0.0])
    store.senses["S_team"] = (np.array([0.9, 0.1, 0.0, 0.0]), "E_team")
    store.senses["S_club"] = (np.array([0.7, 0.7, 0.0, 0.0]), "E_club")
    store.words["bat"] = np.array([1.0, 0.0, 0.0, 0.0])
    store.words["nation"] = np.array([0.0, 1.0, 0.0, 0.0])
    store.words["pitch"] = np.array([0.6, 0.8, 0.0, 0.0])
    store.words["rock"] = np.array([0.0, 0.0, 0.0, 1.0])
    store.words["eng"] = np.array([0.5, 0.5, 0.5, 0.5])
    store.words["esx"] = np.array([0.6, 0.0, 0.8, 0.0])
    store.words["sry"] = np.array([0.0, 0.6, 0.8, 0.0])
    return store


def tiny_dictionary() -> MentionDictionary:
    d = MentionDictionary()
    d.add("eng", "E_country", 0.6)
    d.add("eng", "E_team", 0.4)
    d.add("esx", "E_club", 0.7)
    d.add("esx", "E_city", 0.3)
    d.add("sry", "E_club", 0.5)
    d.add("sry", "E_team", 0.5)
    return d


def tiny_document(mentions: int = 3) -> Document:
    tokens = ["bat", "pitch", "eng", "nation", "rock", "esx", "pitch", "bat", "sry", "nation"]
    spans = [(2, "eng", "E_team"), (5, "esx", "E_club"), (8, "sry", "E_club")][:mentions]
    doc = Document(
        doc_id="tiny",
        tokens=tokens,
        mentions=[Mention(pos, pos + 1, surface, gold) for pos, surface, gold in spans],
    )
    doc.validate()
    return doc


def gradient_fixture(seed: int = 7, mentions: int = 2):
    """Frames plus seeded params: 2 candidate slots, window 1, 2 conv layers."""
    store = tiny_store()
    dictionary = tiny_dictionary()
    doc = tiny_document(mentions)
    feature_cfg = FeatureConfig(slots=2, window=1, context_window=20)
    frames = build_document_frames(doc, dictionary, store, feature_cfg)
    cfg = ModelConfig(
        feature_dim=feature_cfg.feature_dim(store.dim),
        hidden_dim=8,
        layers=2,
        slots=2,
        window=1,
        dim=store.dim,
        seed=seed,
    )
    return frames, ModelParams(cfg)
