"""Rule-based (abnormality x location) extraction from report sentences.

Each sentence is split into normal and abnormal phrases by negation cues, then
abnormal phrases are searched for abnormality synonyms and location terms.
"""

from __future__ import annotations

import csv
import json
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..volgrid import LOCATIONS
from .vocab import LUNG_LOCATIONS, MEDIASTINAL, Vocabulary, default_vocabulary, term_pattern

NORMAL = "normal"
ABNORMAL = "abnormal"

_PUNCT_BOUNDARY = re.compile(r"\s*([,;:])\s*")


def _clauses(sentence: str, vocab: Vocabulary):
    text = sentence.lower().strip().rstrip(".!?").strip()
    text = _PUNCT_BOUNDARY.sub(r" \1 ", text)
    clauses, cur = [], []
    for tok in text.split():
        if tok in vocab.boundaries:
            clauses.append(cur)
            cur = []
        else:
            cur.append(tok)
    clauses.append(cur)
    return [" ".join(c) for c in clauses if c]


def classify_phrases(sentence: str, vocab: Optional[Vocabulary] = None):
    """Split one sentence into ``(phrase, "normal" | "abnormal")`` pairs.

    A leading cue ("no", "without", ...) marks the rest of its clause normal and
    leaves the words before it abnormal. A trailing cue ("clear", "has
    resolved", ...) marks its whole clause normal. Clauses end at commas,
    semicolons and the words "and"/"but".
    """
    vocab = vocab or default_vocabulary()
    out = []
    for clause in _clauses(sentence, vocab):
        pre = vocab.pre_re.search(clause)
        if pre is not None:
            before = clause[: pre.start()].strip()
            after = clause[pre.end() :].strip()
            if before:
                out.append((before, NORMAL if vocab.post_re.search(before) else ABNORMAL))
            if after:
                out.append((after, NORMAL))
        elif vocab.post_re.search(clause):
            out.append((clause, NORMAL))
        else:
            out.append((clause, ABNORMAL))
    return out


def term_search_abnormalities(phrase: str, vocab: Optional[Vocabulary] = None) -> set:
    """Concepts whose synonyms occur in ``phrase``.

    Matching is whole-word and leftmost-longest, so a synonym nested inside a
    longer matched synonym does not fire on its own.
    """
    vocab = vocab or default_vocabulary()
    return {vocab.concept_of(m.group(0)) for m in vocab.concept_re.finditer(phrase.lower())}


def _laterality(phrase: str, vocab: Vocabulary):
    found = set()
    for side, words in vocab.laterality.items():
        if term_pattern(words).search(phrase):
            found.add(side)
    if "both" in found or {"left", "right"} <= found:
        return ("right_lung", "left_lung")
    if "right" in found:
        return ("right_lung",)
    if "left" in found:
        return ("left_lung",)
    return None


def _group(loc):
    if loc in LUNG_LOCATIONS:
        return "lung"
    if loc in MEDIASTINAL:
        return "mediastinal"
    return loc


def term_search_locations(phrase: str, found: Iterable[str], vocab: Optional[Vocabulary] = None) -> dict:
    """Map each found concept to the set of locations it is assigned in ``phrase``.

    Explicit location terms win (restricted to the concept's organ group when
    the concept implies one); otherwise the implied location applies; otherwise
    ``other``. Bare laterality words turn an unspecified lung into a side.
    """
    vocab = vocab or default_vocabulary()
    phrase = phrase.lower()
    explicit = {vocab.location_of(m.group(0)) for m in vocab.location_re.finditer(phrase)}
    side = _laterality(phrase, vocab)
    out = {}
    for concept in found:
        implied = vocab.concepts[concept].implied_location
        locs = set(explicit)
        if implied is not None:
            compatible = {loc for loc in locs if _group(loc) == _group(implied)}
            locs = compatible or {implied}
        if not locs:
            locs = {"other"}
        if "lung_unspecified" in locs and side is not None:
            locs.discard("lung_unspecified")
            locs.update(side)
        out[concept] = locs
    return out


@dataclass(frozen=True, eq=False)
class LocationAbnormalityLabels:
    scan_id: str
    matrix: np.ndarray  # uint8 [n_concepts, n_locations]
    split_vector: np.ndarray  # uint8 [n_split]
    concepts: tuple
    locations: tuple = LOCATIONS

    def pairs(self) -> list:
        return [(self.concepts[i], self.locations[j]) for i, j in zip(*np.nonzero(self.matrix))]

    def has(self, concept: str, location: Optional[str] = None) -> bool:
        i = self.concepts.index(concept)
        if location is None:
            return bool(self.matrix[i].any())
        return bool(self.matrix[i, self.locations.index(location)])

    def locations_of(self, concept: str) -> list:
        i = self.concepts.index(concept)
        return [self.locations[j] for j in np.nonzero(self.matrix[i])[0]]

    def to_json(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "pairs": [{"abnormality": a, "location": loc} for a, loc in self.pairs()],
            "split_vector": [int(x) for x in self.split_vector],
        }


def labels_from_pairs(scan_id: str, pairs, vocab: Optional[Vocabulary] = None) -> LocationAbnormalityLabels:
    vocab = vocab or default_vocabulary()
    matrix = np.zeros((len(vocab.concept_names), len(LOCATIONS)), dtype=np.uint8)
    split = np.zeros(vocab.n_split, dtype=np.uint8)
    for concept, loc in pairs:
        matrix[vocab.concept_names.index(concept), LOCATIONS.index(loc)] = 1
        for k in vocab.split_slots(concept, loc):
            split[k] = 1
    return LocationAbnormalityLabels(scan_id, matrix, split, vocab.concept_names)


def label_report(sentences: Iterable[str], scan_id: str = "", vocab: Optional[Vocabulary] = None) -> LocationAbnormalityLabels:
    """Union of (concept, location) pairs over every abnormal phrase of the report."""
    vocab = vocab or default_vocabulary()
    pairs = set()
    for sentence in sentences:
        for phrase, status in classify_phrases(sentence, vocab):
            if status != ABNORMAL:
                continue
            found = term_search_abnormalities(phrase, vocab)
            for concept, locs in term_search_locations(phrase, found, vocab).items():
                pairs.update((concept, loc) for loc in locs)
    return labels_from_pairs(scan_id, sorted(pairs), vocab)


def labels_from_json(d: dict, vocab: Optional[Vocabulary] = None) -> LocationAbnormalityLabels:
    return labels_from_pairs(d["scan_id"], [(p["abnormality"], p["location"]) for p in d["pairs"]], vocab)


# ---------------------------------------------------------------------------
# File interfaces
# ---------------------------------------------------------------------------


def read_reports_csv(path) -> dict:
    """``scan_id -> [sentence, ...]`` ordered by ``sentence_index``."""
    rows = defaultdict(list)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"scan_id", "sentence_index", "text"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows[row["scan_id"]].append((int(row["sentence_index"]), row["text"]))
    return {sid: [t for _, t in sorted(items)] for sid, items in sorted(rows.items())}


def write_reports_csv(path, reports: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_id", "sentence_index", "text"])
        for sid in sorted(reports):
            for i, text in enumerate(reports[sid]):
                w.writerow([sid, i, text])


def write_labels_json(path, labels: LocationAbnormalityLabels):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(labels.to_json()) + "\n")


def read_labels_json(path, vocab: Optional[Vocabulary] = None) -> LocationAbnormalityLabels:
    return labels_from_json(json.loads(Path(path).read_text()), vocab)
