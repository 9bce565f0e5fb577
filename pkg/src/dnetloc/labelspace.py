"""Combined 35-class label vocabulary, location encoding, label and mask vectors.

Canonical ordering (positions are what the pooled loss indexes):

    0-13   ChestX-Ray14 pathologies
    14-25  PLCO pathologies
    26-34  location classes: f1..f5, wildcard, side_left, side_right, diffuse
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .data import SampleRecord

CXR14 = "CXR14"
PLCO = "PLCO"
DATASETS = (CXR14, PLCO)

LOCATION_KINDS = ("loc_fifth", "loc_wildcard", "loc_side", "loc_diffuse")

CXR14_PATHOLOGIES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
)

PLCO_PATHOLOGIES = (
    "Nodule",
    "Mass",
    "Granuloma",
    "Infiltrate",
    "Scarring",
    "Fibrosis",
    "Bone/Soft Tissue Lesion",
    "Cardiac Abnormality",
    "COPD",
    "Effusion",
    "Atelectasis",
    "Hilar Abnormality",
)

PLCO_LOCATED = ("Nodule", "Mass", "Infiltrate", "Atelectasis", "Hilar Abnormality")

FIFTHS = ("f1", "f2", "f3", "f4", "f5")
SIDES = ("left", "right")

LOCATION_CLASSES = (
    ("loc_f1", "loc_fifth"),
    ("loc_f2", "loc_fifth"),
    ("loc_f3", "loc_fifth"),
    ("loc_f4", "loc_fifth"),
    ("loc_f5", "loc_fifth"),
    ("loc_wildcard", "loc_wildcard"),
    ("loc_side_left", "loc_side"),
    ("loc_side_right", "loc_side"),
    ("loc_diffuse", "loc_diffuse"),
)
N_LOCATION = len(LOCATION_CLASSES)

# offsets inside the 9-bit location block
_WILDCARD = 5
_SIDE_BIT = {"left": 6, "right": 7}
_DIFFUSE = 8

SCHEMA_VERSION = 1


class LabelError(ValueError):
    """Raised for inconsistent label or location input."""


@dataclass(frozen=True)
class LabelDef:
    name: str
    dataset: str
    kind: str
    located: bool = False

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise LabelError(f"unknown dataset {self.dataset!r}")
        if self.kind not in ("pathology",) + LOCATION_KINDS:
            raise LabelError(f"unknown label kind {self.kind!r}")
        if self.located and not (self.kind == "pathology" and self.dataset == PLCO):
            raise LabelError(f"{self.name}: only PLCO pathologies can be located")


@dataclass(frozen=True)
class LabelSpace:
    labels: tuple[LabelDef, ...]

    def __post_init__(self):
        for ds in DATASETS:
            names = [d.name for d in self.labels if d.dataset == ds]
            if len(names) != len(set(names)):
                raise LabelError(f"duplicate label names within {ds}")

    @property
    def C(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def positions(self, dataset: str, kind: str | None = "pathology") -> list[int]:
        """Positions owned by ``dataset``; ``kind=None`` includes location classes."""
        return [
            i
            for i, d in enumerate(self.labels)
            if d.dataset == dataset and (kind is None or d.kind == kind)
        ]

    def location_positions(self) -> list[int]:
        return [i for i, d in enumerate(self.labels) if d.kind in LOCATION_KINDS]

    def located_positions(self) -> list[int]:
        return [i for i, d in enumerate(self.labels) if d.located]

    def index(self, dataset: str, name: str) -> int:
        for i, d in enumerate(self.labels):
            if d.dataset == dataset and d.name == name:
                return i
        raise LabelError(f"unknown {dataset} label {name!r}")

    def names(self) -> list[str]:
        return [d.name for d in self.labels]

    def qualified_names(self) -> list[str]:
        return [f"{d.dataset}:{d.name}" for d in self.labels]

    def to_json(self) -> str:
        doc = {
            "version": SCHEMA_VERSION,
            "C": self.C,
            "labels": [
                {
                    "position": i,
                    "name": d.name,
                    "dataset": d.dataset,
                    "kind": d.kind,
                    "located": d.located,
                }
                for i, d in enumerate(self.labels)
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LabelSpace":
        doc = json.loads(text)
        if doc.get("version") != SCHEMA_VERSION:
            raise LabelError(f"unsupported label-space version {doc.get('version')!r}")
        entries = sorted(doc["labels"], key=lambda e: e["position"])
        if [e["position"] for e in entries] != list(range(len(entries))):
            raise LabelError("label positions must be contiguous from 0")
        space = cls(
            tuple(LabelDef(e["name"], e["dataset"], e["kind"], bool(e["located"])) for e in entries)
        )
        if space.C != doc["C"]:
            raise LabelError(f"C={doc['C']} but {space.C} labels listed")
        return space


def build_combined_labelspace() -> LabelSpace:
    labels = [LabelDef(n, CXR14, "pathology") for n in CXR14_PATHOLOGIES]
    labels += [LabelDef(n, PLCO, "pathology", n in PLCO_LOCATED) for n in PLCO_PATHOLOGIES]
    labels += [LabelDef(n, PLCO, kind) for n, kind in LOCATION_CLASSES]
    return LabelSpace(tuple(labels))


@dataclass(frozen=True)
class LocationAnnotation:
    side: str = "none"
    fifth: str = "none"
    diffuse: bool = False

    def __post_init__(self):
        if self.side not in SIDES + ("none",):
            raise LabelError(f"bad side {self.side!r}")
        if self.fifth not in FIFTHS + ("multiple", "none"):
            raise LabelError(f"bad fifth {self.fifth!r}")
        if self.diffuse and self.fifth != "none":
            raise LabelError("diffuse annotation cannot carry a fifth")
        if self.fifth != "none" and self.side == "none":
            raise LabelError("a fifth needs a lung side")

    @property
    def empty(self) -> bool:
        return self.side == "none" and self.fifth == "none" and not self.diffuse


def encode_location(annotations: Iterable[LocationAnnotation]) -> np.ndarray:
    """Union-encode annotations of the located diseases present into 9 bits.

    At most one of the six lobe-position bits is set: a single distinct fifth
    sets that fifth, several distinct fifths (or an explicit ``multiple``)
    set only the wildcard.
    """
    bits = np.zeros(N_LOCATION, dtype=np.int8)
    fifths = set()
    multiple = False
    for a in annotations:
        if a.empty:
            raise LabelError("empty location annotation (missing data upstream?)")
        if a.side != "none":
            bits[_SIDE_BIT[a.side]] = 1
        if a.fifth == "multiple":
            multiple = True
        elif a.fifth != "none":
            fifths.add(a.fifth)
        if a.diffuse:
            bits[_DIFFUSE] = 1
    if multiple or len(fifths) > 1:
        bits[_WILDCARD] = 1
    elif fifths:
        bits[FIFTHS.index(fifths.pop())] = 1
    return bits


def decode_location(bits: Sequence[int]) -> list[LocationAnnotation]:
    """Inverse of :func:`encode_location` for bit patterns a single annotation can produce.

    Patterns with both sides set decode to one annotation per side, fifth
    information attached to the left one.
    """
    bits = np.asarray(bits)
    if bits.shape != (N_LOCATION,):
        raise LabelError(f"expected {N_LOCATION} location bits, got shape {bits.shape}")
    sides = [s for s in SIDES if bits[_SIDE_BIT[s]]]
    lobe = [FIFTHS[i] for i in range(5) if bits[i]]
    if bits[_WILDCARD]:
        fifth = "multiple"
    elif len(lobe) == 1:
        fifth = lobe[0]
    elif not lobe:
        fifth = "none"
    else:
        raise LabelError("more than one fifth bit set")
    diffuse = bool(bits[_DIFFUSE])
    if not sides:
        if fifth != "none":
            raise LabelError("fifth bits set without a side")
        return [LocationAnnotation(diffuse=True)] if diffuse else []
    out = [LocationAnnotation(sides[0], fifth if not diffuse else "none", diffuse)]
    for s in sides[1:]:
        out.append(LocationAnnotation(s))
    if diffuse and fifth != "none":
        out.append(LocationAnnotation(sides[0], fifth))
    return out


def _check_sample(sample: "SampleRecord", space: LabelSpace) -> None:
    if sample.dataset not in DATASETS:
        raise LabelError(f"unknown dataset tag {sample.dataset!r}")
    own = {space.labels[i].name for i in space.positions(sample.dataset)}
    for name in sample.pathologies:
        if name not in own:
            raise LabelError(f"unknown {sample.dataset} pathology {name!r}")


def build_label_vector(sample: "SampleRecord", space: LabelSpace) -> np.ndarray:
    _check_sample(sample, space)
    vec = np.zeros(space.C, dtype=np.int8)
    for name in sample.pathologies:
        vec[space.index(sample.dataset, name)] = 1
    if sample.dataset == PLCO:
        present = [d for d in sample.pathologies if d in PLCO_LOCATED]
        annotations = [a for d in present for a in sample.locations.get(d, ())]
        vec[space.location_positions()] = encode_location(annotations)
    return vec


def location_supervised(sample: "SampleRecord") -> bool:
    """False when a located disease is present but its location is unknown."""
    for d in sample.pathologies:
        if d in PLCO_LOCATED and (not sample.location_available or not sample.locations.get(d)):
            return False
    return True


def build_mask_vector(
    sample: "SampleRecord", space: LabelSpace, location: bool = True
) -> np.ndarray:
    """Supervision mask; ``location=False`` switches the 9 location classes off."""
    mask = np.zeros(space.C, dtype=np.int8)
    mask[space.positions(sample.dataset)] = 1
    if sample.dataset == PLCO and location and location_supervised(sample):
        mask[space.location_positions()] = 1
    return mask
