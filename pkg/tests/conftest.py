"""Shared fixtures: handcrafted tiny worlds and random frame builders."""

import numpy as np
import pytest

from celink.features import CandidateFrame, FeatureConfig
from celink.fixtures import tiny_dictionary, tiny_document, tiny_store
from celink.numerics import row_normalize


@pytest.fixture
def store():
    return tiny_store()


@pytest.fixture
def dictionary():
    return tiny_dictionary()


@pytest.fixture
def document():
    return tiny_document()


def make_random_frames(rng, mentions, slots, window, feature_dim, all_valid=False):
    """Structurally valid frames with random contents for invariant tests."""
    frames = []
    cols = 2 * window * slots
    valid_counts = [
        slots if all_valid else int(rng.integers(1, slots + 1)) for _ in range(mentions)
    ]
    for i in range(mentions):
        positions = [
            i + off if 0 <= i + off < mentions else None
            for off in list(range(-window, 0)) + list(range(1, window + 1))
        ]
        valid = valid_counts[i]
        feats = np.zeros((slots, feature_dim))
        feats[:valid] = rng.normal(size=(valid, feature_dim))
        adjacency = np.zeros((slots, cols + 1))
        adjacency[:, -1] = 1.0
        slot_mask = np.zeros(cols, dtype=bool)
        for p, pos in enumerate(positions):
            if pos is None:
                continue
            nbr_valid = valid_counts[pos]
            adjacency[:valid, p * slots : p * slots + nbr_valid] = rng.random((valid, nbr_valid))
            slot_mask[p * slots : p * slots + nbr_valid] = True
        mask = np.zeros(slots, dtype=bool)
        mask[:valid] = True
        frames.append(
            CandidateFrame(
                mention_index=i,
                entity_ids=[f"E{i}_{j}" for j in range(valid)],
                feats=feats,
                adjacency=row_normalize(adjacency),
                cand_mask=mask,
                neighbor_slot_mask=slot_mask,
                neighbor_positions=positions,
                gold_slot=int(rng.integers(valid)),
            )
        )
    return frames


@pytest.fixture
def feature_cfg():
    return FeatureConfig(slots=2, window=1, context_window=20)
