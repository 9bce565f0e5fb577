"""Patient-wise train/val/test splits, leakage audit and split files."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Manifest

SUBSETS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class SplitError(ValueError):
    pass


def patient_key(record) -> str:
    """Patients are identified within their dataset; equal ids in two datasets are different people."""
    return f"{record.dataset}:{record.patient_id}"


@dataclass
class SplitAssignment:
    """Image-level subset membership; patient-level views are derived.

    Holding images rather than patients lets an externally authored split
    with leakage be represented and then audited.
    """

    image_subset: dict[str, str]
    image_patient: dict[str, str]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int | None = None

    def images(self, subset: str) -> list[str]:
        return sorted(i for i, s in self.image_subset.items() if s == subset)

    def patient_subsets(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = defaultdict(set)
        for img, s in self.image_subset.items():
            out[self.image_patient[img]].add(s)
        return dict(out)

    def patients(self, subset: str) -> set[str]:
        return {p for p, subs in self.patient_subsets().items() if subset in subs}

    def merge(self, other: "SplitAssignment") -> "SplitAssignment":
        overlap = self.image_subset.keys() & other.image_subset.keys()
        if overlap:
            raise SplitError(f"image ids in both assignments: {sorted(overlap)[:3]}")
        return SplitAssignment(
            {**self.image_subset, **other.image_subset},
            {**self.image_patient, **other.image_patient},
            self.ratios,
            self.seed,
        )


def _check_ratios(ratios) -> list[Fraction]:
    if len(ratios) != 3:
        raise SplitError("need three ratios (train, val, test)")
    fr = [Fraction(str(r)) for r in ratios]
    if any(r < 0 for r in fr):
        raise SplitError(f"ratios must be non-negative: {ratios}")
    if abs(float(sum(fr)) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1: {ratios}")
    return fr


def largest_remainder(n: int, ratios) -> list[int]:
    """Integer sizes summing to n; leftover units go to the largest fractional parts, ties to the earlier subset."""
    fr = _check_ratios(ratios)
    total = sum(fr)
    ideal = [r * n / total for r in fr]
    sizes = [int(x) for x in ideal]
    order = sorted(range(len(fr)), key=lambda i: (-(ideal[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def patient_split(manifest: Manifest, ratios=DEFAULT_RATIOS, seed: int = 0, rng=None) -> SplitAssignment:
    """Shuffle patients (sorted by id first) and cut by patient count."""
    fr = _check_ratios(ratios)
    patients = sorted({patient_key(r) for r in manifest.records})
    needed = sum(1 for r in fr if r > 0)
    if len(patients) < needed:
        raise SplitError(f"{len(patients)} patients cannot fill {needed} non-empty subsets")
    rng = rng if rng is not None else np.random.default_rng(seed)
    perm = rng.permutation(len(patients))
    sizes = largest_remainder(len(patients), ratios)
    patient_subset = {}
    start = 0
    for subset, size in zip(SUBSETS, sizes):
        for i in perm[start : start + size]:
            patient_subset[patients[i]] = subset
        start += size
    return SplitAssignment(
        {r.image_id: patient_subset[patient_key(r)] for r in manifest.records},
        {r.image_id: patient_key(r) for r in manifest.records},
        tuple(float(r) for r in ratios),
        seed,
    )


def pooled_split(manifests: Mapping[str, Manifest], ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Split each dataset independently, dataset k drawing from the stream (seed, k)."""
    out = None
    for k, tag in enumerate(sorted(manifests)):
        a = patient_split(manifests[tag], ratios, seed, rng=np.random.default_rng([seed, k]))
        out = a if out is None else out.merge(a)
    return out


def image_split(manifest: Manifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Image-wise random split. Leaks patients; kept for demonstrating the audit."""
    ids = sorted(r.image_id for r in manifest.records)
    perm = np.random.default_rng(seed).permutation(len(ids))
    sizes = largest_remainder(len(ids), ratios)
    subset = {}
    start = 0
    for name, size in zip(SUBSETS, sizes):
        for i in perm[start : start + size]:
            subset[ids[i]] = name
        start += size
    return SplitAssignment(subset, {r.image_id: patient_key(r) for r in manifest.records}, tuple(ratios), seed)


@dataclass
class SubsetStats:
    images: int
    patients: int
    images_per_patient: float


@dataclass
class LeakageReport:
    violations: dict[str, list[str]]  # "dataset:patient" -> subsets it appears in
    subsets: dict[str, SubsetStats]
    unassigned: list[str] = field(default_factory=list)
    unknown: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations and not self.unknown

    def render(self) -> str:
        lines = [f"{'subset':6s} {'images':>8s} {'patients':>9s} {'img/pat':>8s}"]
        for s, st in self.subsets.items():
            lines.append(f"{s:6s} {st.images:8d} {st.patients:9d} {st.images_per_patient:8.3f}")
        lines.append(f"leaking patients: {len(self.violations)}")
        for p in sorted(self.violations)[:20]:
            lines.append(f"  {p}: {', '.join(self.violations[p])}")
        if self.unassigned:
            lines.append(f"images without a subset: {len(self.unassigned)}")
        if self.unknown:
            lines.append(f"split entries missing from the manifest: {len(self.unknown)}")
        return "\n".join(lines)


def verify_no_leakage(assignment: SplitAssignment, manifests: Manifest | Sequence[Manifest]) -> LeakageReport:
    if isinstance(manifests, Manifest):
        manifests = [manifests]
    patient_of = {r.image_id: patient_key(r) for m in manifests for r in m.records}
    seen: dict[str, set[str]] = defaultdict(set)
    counts: dict[str, list[str]] = defaultdict(list)
    unknown = []
    for img, subset in sorted(assignment.image_subset.items()):
        pid = patient_of.get(img)
        if pid is None:
            unknown.append(img)
            continue
        seen[pid].add(subset)
        counts[subset].append(pid)
    violations = {p: sorted(s, key=SUBSETS.index) for p, s in seen.items() if len(s) > 1}
    stats = {}
    for s in SUBSETS:
        pats = set(counts[s])
        stats[s] = SubsetStats(len(counts[s]), len(pats), len(counts[s]) / len(pats) if pats else 0.0)
    unassigned = sorted(set(patient_of) - assignment.image_subset.keys())
    return LeakageReport(violations, stats, unassigned, unknown)


def write_split_files(assignment: SplitAssignment, out_dir) -> list[Path]:
    """One ``<subset>.txt`` per subset with a nonzero ratio: sorted ids, LF endings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for subset, ratio in zip(SUBSETS, assignment.ratios):
        path = out / f"{subset}.txt"
        if ratio == 0:
            if path.exists():
                path.unlink()
            continue
        ids = assignment.images(subset)
        path.write_bytes("".join(f"{i}\n" for i in ids).encode("utf-8"))
        written.append(path)
    return written


def read_split_files(split_dir, manifests: Manifest | Sequence[Manifest]) -> SplitAssignment:
    """Inverse of :func:`write_split_files`. Parsing only; leakage is for the audit."""
    if isinstance(manifests, Manifest):
        manifests = [manifests]
    patient_of = {r.image_id: patient_key(r) for m in manifests for r in m.records}
    root = Path(split_dir)
    subset_of: dict[str, str] = {}
    ratios = []
    for subset in SUBSETS:
        path = root / f"{subset}.txt"
        if not path.exists():
            ratios.append(0.0)
            continue
        ids = [line for line in path.read_text(encoding="utf-8").split("\n") if line]
        ratios.append(float(len(ids)))
        for i in ids:
            if i not in patient_of:
                raise SplitError(f"{path}: unknown image_id {i!r}")
            if i in subset_of and subset_of[i] != subset:
                raise SplitError(f"{path}: image_id {i!r} also listed in {subset_of[i]}.txt")
            subset_of[i] = subset
    if not subset_of:
        raise SplitError(f"{root}: no split files")
    total = sum(ratios)
    return SplitAssignment(
        subset_of,
        {i: patient_of[i] for i in subset_of},
        tuple(r / total for r in ratios),
        None,
    )
