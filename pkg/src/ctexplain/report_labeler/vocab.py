"""Term vocabularies for the report labeler, loaded from an editable JSON file."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

from ..volgrid import LOCATIONS

SCHEMA_VERSION = 1
LUNG_LOCATIONS = ("right_lung", "left_lung", "lung_unspecified")
MEDIASTINAL = ("heart", "great_vessel", "mediastinum")
# fallback order when a concept has no label for the exact mediastinal sub-organ
_ORGAN_FALLBACK = {
    "heart": ("heart", "mediastinum", "great_vessel"),
    "great_vessel": ("great_vessel", "mediastinum", "heart"),
    "mediastinum": ("mediastinum", "heart", "great_vessel"),
}


def term_pattern(terms) -> re.Pattern:
    """Whole-word alternation, longest terms first."""
    alts = sorted({t.lower() for t in terms}, key=lambda t: (-len(t), t))
    return re.compile(r"(?<![a-z0-9])(?:" + "|".join(re.escape(t) for t in alts) + r")(?![a-z0-9])")


@dataclass(frozen=True)
class Concept:
    name: str
    synonyms: tuple
    implied_location: Optional[str]


@dataclass(frozen=True)
class Label:
    name: str
    concept: str
    organ: str  # lung | heart | great_vessel | mediastinum


class Vocabulary:
    """Concepts, the 80 location-grouped labels, location terms and negation cues."""

    def __init__(self, data: dict):
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported vocabulary schema {data.get('schema_version')!r}")
        self.concepts = {}
        for name, entry in data["concepts"].items():
            imp = entry.get("implied_location")
            if imp is not None and imp not in LOCATIONS:
                raise ValueError(f"concept {name!r}: unknown implied location {imp!r}")
            syns = tuple(s.lower() for s in entry.get("documented", []) + entry.get("extension", []))
            self.concepts[name] = Concept(name, syns, imp)
        self.concept_names = tuple(self.concepts)

        self.location_terms = {}
        seen = {}
        for loc, entry in data["locations"].items():
            if loc not in LOCATIONS:
                raise ValueError(f"unknown location {loc!r}")
            terms = tuple(t.lower() for t in entry.get("documented", []) + entry.get("extension", []))
            for t in terms:
                if t in seen and seen[t] != loc:
                    raise ValueError(f"location term {t!r} used for both {seen[t]} and {loc}")
                seen[t] = loc
            self.location_terms[loc] = terms
        self._term_to_location = seen

        self.laterality = {k: tuple(v) for k, v in data["laterality"].items()}
        self.pre_cues = tuple(c.lower() for c in data["negation"]["pre"])
        self.post_cues = tuple(c.lower() for c in data["negation"]["post"])
        self.boundaries = tuple(data["clause_boundaries"])

        self.labels = tuple(Label(x["name"], x["concept"], x["organ"]) for x in data["labels"])
        names = [lb.name for lb in self.labels]
        if len(set(names)) != len(names):
            raise ValueError("label names must be unique")
        for lb in self.labels:
            if lb.concept not in self.concepts:
                raise ValueError(f"label {lb.name!r} refers to unknown concept {lb.concept!r}")
        # split layout: every lung label gets a (right, left) pair, mediastinal labels one slot
        self.lung_labels = tuple(lb for lb in self.labels if lb.organ == "lung")
        self.mediastinal_labels = tuple(lb for lb in self.labels if lb.organ != "lung")
        self.split_names = tuple(
            [f"{lb.name} [{side}]" for lb in self.lung_labels for side in ("right", "left")]
            + [lb.name for lb in self.mediastinal_labels]
        )
        self._by_concept_organ = {(lb.concept, lb.organ): lb for lb in self.labels}
        self._slot = {}
        for i, lb in enumerate(self.lung_labels):
            self._slot[(lb.name, "right")] = 2 * i
            self._slot[(lb.name, "left")] = 2 * i + 1
        for j, lb in enumerate(self.mediastinal_labels):
            self._slot[(lb.name, None)] = 2 * len(self.lung_labels) + j

        syn_owner = {}
        for c in self.concepts.values():
            for s in c.synonyms:
                if s in syn_owner and syn_owner[s] != c.name:
                    raise ValueError(f"synonym {s!r} used for {syn_owner[s]} and {c.name}")
                syn_owner[s] = c.name
        self._syn_owner = syn_owner
        self.concept_re = term_pattern(syn_owner)
        self.location_re = term_pattern(seen)
        self.pre_re = term_pattern(self.pre_cues)
        self.post_re = term_pattern(self.post_cues)
        self.boundary_words = tuple(b for b in self.boundaries if b.isalpha())

    @property
    def n_split(self) -> int:
        return len(self.split_names)

    def concept_of(self, synonym: str) -> str:
        return self._syn_owner[synonym]

    def location_of(self, term: str) -> str:
        return self._term_to_location[term]

    def split_slots(self, concept: str, location: str) -> list:
        """Indices in the split label vector touched by one (concept, location) pair."""
        if location in LUNG_LOCATIONS:
            lb = self._by_concept_organ.get((concept, "lung"))
            if lb is None:
                return []
            sides = {"right_lung": ("right",), "left_lung": ("left",)}.get(location, ("right", "left"))
            return [self._slot[(lb.name, s)] for s in sides]
        if location in _ORGAN_FALLBACK:
            for organ in _ORGAN_FALLBACK[location]:
                lb = self._by_concept_organ.get((concept, organ))
                if lb is not None:
                    return [self._slot[(lb.name, None)]]
        return []

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


@lru_cache(maxsize=1)
def default_vocabulary() -> Vocabulary:
    text = resources.files("ctexplain.report_labeler").joinpath("data/vocab.json").read_text()
    return Vocabulary(json.loads(text))
