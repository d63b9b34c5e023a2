"""Patient registry, patient-level stratified folds and inverse-frequency class weights."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from multiscale_wsi.io_utils import atomic_write_text, read_csv_rows, stable_hash

CLASSES = ("CMB", "DN")
POSITIVE = "DN"
COHORT_HEADER = ("patient_id", "label", "wsi_path", "center_x", "center_y")
FOLD_HEADER = ("fold", "role", "patient_id")
ROLES = ("train", "val", "test")


class CohortError(ValueError):
    pass


def label_to_int(label: str) -> int:
    if label not in CLASSES:
        raise CohortError(f"unknown label {label!r}; expected one of {CLASSES}")
    return int(label == POSITIVE)


@dataclass(frozen=True)
class Annotation:
    wsi_path: str
    center: tuple[int, int]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: str
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        label_to_int(self.label)
        if not self.annotations:
            raise CohortError(f"patient {self.patient_id} has no annotations")

    def region_ids(self) -> list[str]:
        return [f"{self.patient_id}-r{k}" for k in range(len(self.annotations))]


def read_cohort(path) -> list[PatientRecord]:
    """Group annotation rows by patient. Relative WSI paths resolve against the file's directory."""
    path = Path(path)
    grouped: dict[str, list] = {}
    labels: dict[str, str] = {}
    for row in read_csv_rows(path, COHORT_HEADER):
        pid, label = row["patient_id"], row["label"]
        if labels.setdefault(pid, label) != label:
            raise CohortError(f"patient {pid} has conflicting labels {labels[pid]} / {label}")
        wsi = Path(row["wsi_path"])
        if not wsi.is_absolute():
            wsi = path.parent / wsi
        grouped.setdefault(pid, []).append(
            Annotation(str(wsi), (int(row["center_x"]), int(row["center_y"]))))
    return [PatientRecord(pid, labels[pid], tuple(grouped[pid])) for pid in sorted(grouped)]


def cohort_to_csv(patients, relative_to=None, preamble: str = "") -> str:
    buf = io.StringIO()
    buf.write(preamble)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COHORT_HEADER)
    for p in sorted(patients, key=lambda p: p.patient_id):
        for a in p.annotations:
            wsi = a.wsi_path
            if relative_to is not None:
                try:
                    wsi = str(Path(wsi).relative_to(relative_to))
                except ValueError:
                    pass
            w.writerow([p.patient_id, p.label, wsi, a.center[0], a.center[1]])
    return buf.getvalue()


def write_cohort(patients, path, preamble: str = "") -> None:
    path = Path(path)
    atomic_write_text(path, cohort_to_csv(patients, path.parent.resolve(), preamble))


# --- class weights ------------------------------------------------------------------------


def class_weights(counts) -> dict:
    """``w_c = N / (C * n_c)``: inverse class frequency with mean-one normalisation."""
    counts = dict(counts)
    if not counts:
        raise CohortError("no classes given")
    bad = [c for c, n in counts.items() if n < 1]
    if bad:
        raise CohortError(f"class counts must be >= 1, got zero for {bad}")
    total = sum(counts.values())
    return {c: total / (len(counts) * n) for c, n in counts.items()}


# --- folds --------------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def role_of(self, patient_id: str) -> str | None:
        for role in ROLES:
            if patient_id in getattr(self, role):
                return role
        return None


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[Fold, ...]

    def to_csv(self, preamble: str = "") -> str:
        buf = io.StringIO()
        buf.write(preamble)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FOLD_HEADER)
        for f, fold in enumerate(self.folds):
            for role in ROLES:
                for pid in getattr(fold, role):
                    w.writerow([f, role, pid])
        return buf.getvalue()

    def write(self, path, preamble: str = "") -> None:
        atomic_write_text(path, self.to_csv(preamble))

    @classmethod
    def read(cls, path, seed: int = 0) -> "FoldPlan":
        sets: dict[int, dict[str, list]] = {}
        for row in read_csv_rows(path, FOLD_HEADER):
            if row["role"] not in ROLES:
                raise CohortError(f"unknown fold role {row['role']!r}")
            sets.setdefault(int(row["fold"]), {r: [] for r in ROLES})[row["role"]].append(
                row["patient_id"])
        k = len(sets)
        if sorted(sets) != list(range(k)):
            raise CohortError(f"fold indices must be 0..{k - 1}, got {sorted(sets)}")
        folds = tuple(Fold(*(tuple(sorted(sets[f][r])) for r in ROLES)) for f in range(k))
        return cls(k, seed, folds)


def _quota(q, label) -> int:
    if isinstance(q, int):
        return q
    return int(dict(q).get(label, 0))


def make_folds(patients, k: int, test_quota, val_quota, seed: int) -> FoldPlan:
    """Patient-level folds with fixed per-class test/validation quotas.

    Per class, patients are shuffled with ``seed``; the first ``k * test_quota`` are dealt
    round-robin into pairwise-disjoint test sets. Each fold then draws its validation
    patients from that class's non-test patients, and everything else trains.
    """
    if k < 1:
        raise CohortError(f"k must be >= 1, got {k}")
    by_class = {c: sorted(p.patient_id for p in patients if p.label == c) for c in CLASSES}
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise CohortError("duplicate patient ids")
    tests = [[] for _ in range(k)]
    vals = [[] for _ in range(k)]
    for label in CLASSES:
        members = by_class[label]
        tq, vq = _quota(test_quota, label), _quota(val_quota, label)
        if tq < 0 or vq < 0:
            raise CohortError("quotas must be non-negative")
        if k * tq > len(members):
            raise CohortError(
                f"infeasible: {k} folds x {tq} test {label} patients > {len(members)} available")
        if tq + vq > len(members):
            raise CohortError(
                f"infeasible: {tq} test + {vq} val {label} patients > {len(members)} available")
        rng = np.random.default_rng(stable_hash(seed, "folds", label))
        shuffled = [members[i] for i in rng.permutation(len(members))]
        class_tests = [[] for _ in range(k)]
        for j, pid in enumerate(shuffled[:k * tq]):
            class_tests[j % k].append(pid)
        for f in range(k):
            tests[f].extend(class_tests[f])
            pool = sorted(set(members) - set(class_tests[f]))
            vrng = np.random.default_rng(stable_hash(seed, "val", label, f))
            vals[f].extend(pool[i] for i in vrng.permutation(len(pool))[:vq])
    everyone = set(ids)
    folds = []
    for f in range(k):
        test, val = set(tests[f]), set(vals[f])
        folds.append(Fold(tuple(sorted(everyone - test - val)), tuple(sorted(val)),
                          tuple(sorted(test))))
    return FoldPlan(k, seed, tuple(folds))


def auto_quotas(patients, k: int) -> tuple[dict, dict]:
    """Default quotas: each class split evenly over the test sets, half that for validation.

    A single fold holds out half of each class instead of all of it.
    """
    counts = Counter(p.label for p in patients)
    test = {c: counts.get(c, 0) // max(k, 2) for c in CLASSES}
    val = {c: test[c] // 2 for c in CLASSES}
    return test, val
