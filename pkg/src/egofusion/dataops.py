"""Annotation records, the home-made and unseen-participant partitions, coverage."""
from __future__ import annotations

import csv
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_VERBS = 125
NUM_NOUNS = 352
ANNOTATION_HEADER = ["segment_id", "participant_id", "video_id", "start_s", "stop_s", "verb_class", "noun_class"]
SPLITS = ("train", "val", "test")
_PARTICIPANT = re.compile(r"^P(\d+)$")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    segment_id: str
    participant_id: str
    video_id: str
    start_s: float
    stop_s: float
    verb_class: int
    noun_class: int

    def __post_init__(self):
        if not self.stop_s > self.start_s:
            raise AnnotationError(f"{self.segment_id}: stop_s must exceed start_s")
        if not 0 <= self.verb_class < NUM_VERBS:
            raise AnnotationError(f"{self.segment_id}: verb_class {self.verb_class} outside [0, {NUM_VERBS})")
        if not 0 <= self.noun_class < NUM_NOUNS:
            raise AnnotationError(f"{self.segment_id}: noun_class {self.noun_class} outside [0, {NUM_NOUNS})")

    @property
    def action_class(self) -> int:
        return self.verb_class * NUM_NOUNS + self.noun_class

    @property
    def duration(self) -> float:
        return self.stop_s - self.start_s

    def label(self, task: str) -> int:
        if task == "verb":
            return self.verb_class
        if task == "noun":
            return self.noun_class
        if task == "action":
            return self.action_class
        raise ValueError(f"unknown task {task!r}")


def parse_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Read the annotation CSV; all malformed rows are reported together."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise AnnotationError(f"{path}: header must be {','.join(ANNOTATION_HEADER)}")
        records, problems, seen = [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ANNOTATION_HEADER):
                problems.append(f"line {lineno}: expected {len(ANNOTATION_HEADER)} columns, got {len(row)}")
                continue
            try:
                rec = AnnotationRecord(row[0], row[1], row[2], float(row[3]), float(row[4]), int(row[5]), int(row[6]))
            except (ValueError, AnnotationError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            if rec.segment_id in seen:
                problems.append(f"line {lineno}: duplicate segment_id {rec.segment_id}")
                continue
            seen.add(rec.segment_id)
            records.append(rec)
    if problems:
        raise AnnotationError("\n".join(problems))
    return records


def write_annotations(path: str | Path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for r in records:
            w.writerow([r.segment_id, r.participant_id, r.video_id, f"{r.start_s:.3f}", f"{r.stop_s:.3f}",
                        r.verb_class, r.noun_class])


# --------------------------------------------------------------------------- partitions


@dataclass
class PartitionSpec:
    assignment: dict[str, str]
    seed: int
    scheme: str

    def ids(self, split: str) -> list[str]:
        return [sid for sid, s in self.assignment.items() if s == split]

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for v in self.assignment.values() if v == s) for s in SPLITS}


def homemade_partition(records: Sequence[AnnotationRecord], seed: int = 0,
                       val_fraction: float = 0.10, test_fraction: float = 0.15) -> PartitionSpec:
    """All participants in every split; per action category one sample goes to
    train and, when there are at least two, one to test. Remaining samples are
    shuffled and fill test, then validation, up to their global targets.
    """
    if not records:
        raise ValueError("no records to partition")
    rng = np.random.default_rng(seed)
    by_action: dict[int, list[str]] = defaultdict(list)
    for r in records:
        by_action[r.action_class].append(r.segment_id)
    assignment: dict[str, str] = {}
    residual: list[str] = []
    for action in sorted(by_action):
        ids = [by_action[action][i] for i in rng.permutation(len(by_action[action]))]
        assignment[ids[0]] = "train"
        if len(ids) >= 2:
            assignment[ids[1]] = "test"
        residual.extend(ids[2:])
    residual = [residual[i] for i in rng.permutation(len(residual))]
    n = len(records)
    n_test = max(0, int(round(test_fraction * n)) - sum(1 for v in assignment.values() if v == "test"))
    n_val = int(round(val_fraction * n))
    for i, sid in enumerate(residual):
        if i < n_test:
            assignment[sid] = "test"
        elif i < n_test + n_val:
            assignment[sid] = "val"
        else:
            assignment[sid] = "train"
    return PartitionSpec({r.segment_id: assignment[r.segment_id] for r in records}, seed, "homemade")


def participant_number(participant_id: str) -> int:
    m = _PARTICIPANT.match(participant_id)
    if not m:
        raise AnnotationError(f"unrecognised participant id {participant_id!r} (expected e.g. P05)")
    return int(m.group(1))


def unseen_participant_partition(records: Sequence[AnnotationRecord], seed: int = 0,
                                 val_fraction: float = 0.10) -> PartitionSpec:
    """P01-P25 train (10 % stratified-by-verb validation), P26-P31 test."""
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    by_verb: dict[int, list[str]] = defaultdict(list)
    for r in records:
        num = participant_number(r.participant_id)
        if 1 <= num <= 25:
            by_verb[r.verb_class].append(r.segment_id)
        elif 26 <= num <= 31:
            assignment[r.segment_id] = "test"
        else:
            raise AnnotationError(f"participant {r.participant_id} outside P01-P31")
    for verb in sorted(by_verb):
        ids = by_verb[verb]
        n_val = int(round(val_fraction * len(ids)))
        for j, i in enumerate(rng.permutation(len(ids))):
            assignment[ids[i]] = "val" if j < n_val else "train"
    return PartitionSpec({r.segment_id: assignment[r.segment_id] for r in records}, seed, "unseen-participant")


def write_partition(path: str | Path, spec: PartitionSpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "split"])
        for sid, split in spec.assignment.items():
            w.writerow([sid, split])


def read_partition(path: str | Path) -> PartitionSpec:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["segment_id", "split"]:
            raise AnnotationError(f"{path}: header must be segment_id,split")
        assignment = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1] not in SPLITS:
                raise AnnotationError(f"{path} line {lineno}: bad partition row {row}")
            assignment[row[0]] = row[1]
    return PartitionSpec(assignment, seed=-1, scheme="file")


def coverage_stats(records: Sequence[AnnotationRecord], threshold_s: float = 4.0) -> float:
    """Fraction of segments whose whole duration fits inside ``threshold_s``."""
    if not records:
        return 0.0
    return sum(1 for r in records if r.duration <= threshold_s) / len(records)


# --------------------------------------------------------------------------- label spaces


@dataclass(frozen=True)
class LabelSpace:
    """Dense class indices for one task, over the label ids seen in the annotations."""

    task: str
    ids: tuple[int, ...]

    @classmethod
    def from_records(cls, records: Sequence[AnnotationRecord], task: str) -> "LabelSpace":
        return cls(task, tuple(sorted({r.label(task) for r in records})))

    @property
    def size(self) -> int:
        return len(self.ids)

    def index(self, records: Sequence[AnnotationRecord]) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.ids)}
        return np.array([lookup[r.label(self.task)] for r in records], dtype=np.int64)

    def names(self) -> list[str]:
        if self.task == "action":
            return [f"{c // NUM_NOUNS}:{c % NUM_NOUNS}" for c in self.ids]
        return [str(c) for c in self.ids]


def marginalize(action_probs: np.ndarray, actions: LabelSpace, target: LabelSpace) -> np.ndarray:
    """Sum action-class probabilities into verb or noun classes."""
    if actions.task != "action":
        raise ValueError("marginalize expects action-space scores")
    lookup = {c: i for i, c in enumerate(target.ids)}
    out = np.zeros((action_probs.shape[0], target.size))
    for j, a in enumerate(actions.ids):
        part = a // NUM_NOUNS if target.task == "verb" else a % NUM_NOUNS
        if part in lookup:
            out[:, lookup[part]] += action_probs[:, j]
    return out
