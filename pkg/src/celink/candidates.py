"""Top-n candidate generation from the prior dictionary."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .kb import MentionDictionary

__all__ = ["CandidateSet", "generate"]


@dataclass
class CandidateSet:
    """Fixed-width candidate slots for one mention.

    Valid entries are prefix-packed and sorted by prior descending, ties
    broken by ascending entity id. An empty set is a legal outcome.
    """

    mention_index: int
    slots: int
    entries: list[tuple[str, float]]

    @property
    def mask(self) -> list[bool]:
        return [i < len(self.entries) for i in range(self.slots)]

    @property
    def entity_ids(self) -> list[str]:
        return [eid for eid, _ in self.entries]

    def slot_of(self, entity_id: str) -> int:
        """Slot index of an entity, or -1 when absent."""
        for i, (eid, _) in enumerate(self.entries):
            if eid == entity_id:
                return i
        return -1

    def truncate(self, slots: int) -> "CandidateSet":
        return CandidateSet(self.mention_index, slots, self.entries[:slots])


def generate(
    surface: str,
    dictionary: MentionDictionary,
    slots: int,
    mention_index: int = 0,
) -> CandidateSet:
    """Look up the trimmed surface form and keep the top-prior entries.

    Lookup is an exact string match (no case folding); unknown surfaces
    produce an empty set.
    """
    if slots < 1:
        raise ConfigError(f"candidate slots must be >= 1, got {slots}")
    entries = dictionary.lookup(surface.strip())
    return CandidateSet(mention_index, slots, list(entries[:slots]))
