"""Candidate generation ordering, truncation, and recall."""

import pytest

from celink import candidates, corpus, kb
from celink.errors import ConfigError
from celink.kb import MentionDictionary


@pytest.fixture
def england():
    d = MentionDictionary()
    d.add("England", "E_a", 0.6)
    d.add("England", "E_b", 0.3)
    d.add("England", "E_c", 0.1)
    return d


class TestGenerate:
    def test_orders_by_prior(self, england):
        cand = candidates.generate("England", england, 10)
        assert cand.entity_ids == ["E_a", "E_b", "E_c"]
        assert cand.mask == [True] * 3 + [False] * 7

    def test_truncation(self, england):
        cand = candidates.generate("England", england, 2)
        assert cand.entity_ids == ["E_a", "E_b"]

    def test_unseen_surface_gives_empty_set(self, england):
        cand = candidates.generate("Atlantis", england, 5)
        assert cand.entries == []
        assert cand.mask == [False] * 5

    def test_whitespace_trimmed_but_case_kept(self, england):
        assert candidates.generate("  England ", england, 5).entity_ids[0] == "E_a"
        assert candidates.generate("england", england, 5).entries == []

    def test_slots_validated(self, england):
        with pytest.raises(ConfigError):
            candidates.generate("England", england, 0)

    def test_priors_non_increasing(self, england):
        cand = candidates.generate("England", england, 10)
        priors = [p for _, p in cand.entries]
        assert priors == sorted(priors, reverse=True)

    def test_generation_commutes_with_truncation(self, england):
        full = candidates.generate("England", england, 100)
        assert full.truncate(2).entries == candidates.generate("England", england, 2).entries

    def test_gold_recall_on_synthetic(self):
        store, dictionary = kb.build_synthetic_kb(
            kb.SyntheticKbConfig(topics=4, entities=48, dim=16, seed=5)
        )
        docs = corpus.generate_synthetic_corpus(
            store, dictionary, corpus.SyntheticCorpusConfig(documents=20, mentions_per_doc=4, seed=1)
        )
        for doc in docs:
            for mention in doc.mentions:
                ranked = [e for e, _ in dictionary.lookup(mention.surface)]
                if mention.gold in ranked and ranked.index(mention.gold) < 10:
                    cand = candidates.generate(mention.surface, dictionary, 10)
                    assert cand.slot_of(mention.gold) >= 0
