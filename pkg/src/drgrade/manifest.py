"""Labeled-sample manifests: CSV ingestion, stratified splitting and resampling.

The manifest schema is a UTF-8, LF-terminated CSV with header
``image_id,filepath,grade,patient_id,source``; patient_id may be empty.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError

NUM_GRADES = 5
GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative")
# Mild, Severe and Proliferative carry the strongest augmentation settings.
MINORITY_GRADES = (1, 3, 4)

CSV_COLUMNS = ("image_id", "filepath", "grade", "patient_id", "source")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    filepath: str
    grade: int
    patient_id: str = ""
    source: str = ""


class Manifest:
    """An ordered collection of image records."""

    def __init__(self, records, require_unique_ids=True):
        self.records = list(records)
        for rec in self.records:
            if not 0 <= rec.grade < NUM_GRADES:
                raise ManifestError(f"record {rec.image_id!r} has grade {rec.grade} outside 0..4")
        if require_unique_ids:
            seen = set()
            for rec in self.records:
                if rec.image_id in seen:
                    raise ManifestError(f"duplicate image_id {rec.image_id!r}")
                seen.add(rec.image_id)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def histogram(self):
        counts = np.zeros(NUM_GRADES, dtype=int)
        for rec in self.records:
            counts[rec.grade] += 1
        return counts

    def labels(self):
        return np.array([rec.grade for rec in self.records], dtype=int)

    def ids(self):
        return [rec.image_id for rec in self.records]


def load_manifest(path, allow_duplicate_ids=False):
    """Parse a manifest CSV, reporting the offending row number on any defect.

    Resampled manifests legitimately repeat image ids; pass
    allow_duplicate_ids=True when loading those.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    records = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty file, expected header {','.join(CSV_COLUMNS)}")
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path}: header is missing column(s) {', '.join(missing)}")
        for rownum, row in enumerate(reader, start=2):
            image_id = (row["image_id"] or "").strip()
            if not image_id:
                raise ManifestError(f"{path}: row {rownum}: empty image_id")
            try:
                grade = int(row["grade"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"{path}: row {rownum}: malformed grade {row['grade']!r}") from None
            if not 0 <= grade < NUM_GRADES:
                raise ManifestError(f"{path}: row {rownum}: grade {grade} outside 0..4")
            if image_id in seen and not allow_duplicate_ids:
                raise ManifestError(
                    f"{path}: row {rownum}: duplicate image_id {image_id!r} "
                    f"(first seen at row {seen[image_id]})")
            seen.setdefault(image_id, rownum)
            records.append(ImageRecord(image_id, (row["filepath"] or "").strip(), grade,
                                       (row["patient_id"] or "").strip(),
                                       (row["source"] or "").strip()))
    return Manifest(records, require_unique_ids=not allow_duplicate_ids)


def save_manifest(path, manifest):
    path = Path(path)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in manifest:
            writer.writerow([rec.image_id, rec.filepath, rec.grade, rec.patient_id, rec.source])
    return path


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    group_by_patient: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"need three nonnegative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got sum {sum(self.ratios)}")


@dataclass
class SplitResult:
    train: Manifest
    val: Manifest
    test: Manifest
    summary: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def _apportion(n, ratios):
    """Largest-remainder apportionment of n items; each count within 1 of ratio*n."""
    exact = [r * n for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    leftover = n - sum(counts)
    order = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:leftover]:
        counts[k] += 1
    return counts


def _split_class_counts(n, ratios, grade):
    positive = [k for k in range(3) if ratios[k] > 0]
    if n < len(positive):
        raise ManifestError(
            f"class {grade} ({GRADE_NAMES[grade]}) has only {n} records, "
            f"too small to populate all {len(positive)} splits")
    counts = _apportion(n, ratios)
    # guarantee every positive-ratio split gets at least one record
    while any(counts[k] == 0 for k in positive):
        k0 = next(k for k in positive if counts[k] == 0)
        donor = max(range(3), key=lambda k: counts[k])
        counts[donor] -= 1
        counts[k0] += 1
    return counts


def stratified_split(manifest, spec):
    """Split per class at the given ratios; optional patient grouping keeps all
    of a patient's images in one split (which may widen count deviations)."""
    rng = np.random.default_rng(spec.seed)
    hist = manifest.histogram()
    targets = {g: _split_class_counts(int(hist[g]), spec.ratios, g)
               for g in range(NUM_GRADES) if hist[g] > 0}

    has_patient_ids = any(rec.patient_id for rec in manifest)
    grouping = spec.group_by_patient and has_patient_ids
    assignment = {}

    if not grouping:
        for g in list(targets):
            idxs = [i for i, rec in enumerate(manifest) if rec.grade == g]
            idxs = [idxs[j] for j in rng.permutation(len(idxs))]
            n_tr, n_va, _ = targets[g]
            for pos, i in enumerate(idxs):
                assignment[i] = 0 if pos < n_tr else (1 if pos < n_tr + n_va else 2)
    else:
        groups = {}
        for i, rec in enumerate(manifest):
            key = rec.patient_id if rec.patient_id else f"__solo__{rec.image_id}"
            groups.setdefault(key, []).append(i)
        keys = sorted(groups)
        keys = [keys[j] for j in rng.permutation(len(keys))]
        assigned = np.zeros((3, NUM_GRADES), dtype=int)
        target_arr = np.zeros((3, NUM_GRADES), dtype=int)
        for g, counts in targets.items():
            for k in range(3):
                target_arr[k, g] = counts[k]
        totals = target_arr.sum(axis=1)
        for key in keys:
            h = np.zeros(NUM_GRADES, dtype=int)
            for i in groups[key]:
                h[manifest[i].grade] += 1
            best = None
            for k in range(3):
                if spec.ratios[k] == 0:
                    continue
                overflow = np.maximum(assigned[k] + h - target_arr[k], 0).sum()
                deficit = totals[k] - assigned[k].sum()
                cand = (overflow, -deficit, k)
                if best is None or cand < best:
                    best = cand
            k = best[2]
            assigned[k] += h
            for i in groups[key]:
                assignment[i] = k

    splits = ([], [], [])
    for i, rec in enumerate(manifest):
        splits[assignment[i]].append(rec)
    train, val, test = (Manifest(s) for s in splits)

    exact = {g: [r * int(hist[g]) for r in spec.ratios] for g in range(NUM_GRADES)}
    hists = [m.histogram() for m in (train, val, test)]
    max_dev = max((abs(hists[k][g] - exact[g][k])
                   for g in range(NUM_GRADES) for k in range(3)), default=0.0)
    patients = [set(r.patient_id for r in m if r.patient_id) for m in (train, val, test)]
    overlap = (patients[0] & patients[1]) | (patients[0] & patients[2]) | (patients[1] & patients[2])
    summary = {
        "ratios": list(spec.ratios),
        "seed": spec.seed,
        "grouped_by_patient": bool(grouping),
        "patient_ids_available": bool(has_patient_ids),
        "patient_overlap": sorted(overlap),
        "counts": {name: [int(c) for c in h]
                   for name, h in zip(("train", "val", "test"), hists)},
        "max_deviation_from_exact": float(max_dev),
    }
    if spec.group_by_patient and not has_patient_ids:
        summary["note"] = "no patient ids present; fell back to image-level stratification"
    return SplitResult(train, val, test, summary)


# ---------------------------------------------------------------------------
# Resampling to target counts
# ---------------------------------------------------------------------------

@dataclass
class ResampleSpec:
    target_counts: tuple = (445, 200, 200, 180, 180)
    seed: int = 0
    with_replacement: bool = True

    def __post_init__(self):
        if len(self.target_counts) != NUM_GRADES or any(t < 0 for t in self.target_counts):
            raise ValueError(f"need {NUM_GRADES} nonnegative target counts, got {self.target_counts}")


def resample(manifest, spec):
    """Sample each class to its target count: without replacement when the target
    does not exceed the class size, with replacement (if allowed) otherwise."""
    rng = np.random.default_rng(spec.seed)
    by_grade = {g: [] for g in range(NUM_GRADES)}
    for rec in manifest:
        by_grade[rec.grade].append(rec)
    out = []
    for g in range(NUM_GRADES):
        pool = by_grade[g]
        target = int(spec.target_counts[g])
        if target == 0:
            continue
        if not pool:
            raise ManifestError(f"class {g} ({GRADE_NAMES[g]}) has no records to sample from")
        if target <= len(pool):
            picks = rng.choice(len(pool), size=target, replace=False)
        elif spec.with_replacement:
            picks = rng.choice(len(pool), size=target, replace=True)
        else:
            raise ManifestError(
                f"class {g} ({GRADE_NAMES[g]}) has {len(pool)} records but target "
                f"{target} requires sampling with replacement")
        out.extend(pool[int(i)] for i in picks)
    result = Manifest(out, require_unique_ids=False)
    summary = {
        "seed": spec.seed,
        "target_counts": [int(t) for t in spec.target_counts],
        "with_replacement": spec.with_replacement,
        "input_counts": [int(c) for c in manifest.histogram()],
        "output_counts": [int(c) for c in result.histogram()],
    }
    return result, summary


def write_summary(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return Path(path)
