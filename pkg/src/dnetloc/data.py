"""Manifests, image normalisation, synthetic corpora and mixed-dataset batching."""
from __future__ import annotations

import csv
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from . import labelspace as ls
from .labelspace import CXR14, PLCO, LocationAnnotation

logger = logging.getLogger(__name__)

LOCATION_COLUMNS = ("loc_disease", "loc_side", "loc_fifth", "loc_diffuse", "loc_available")

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# nominal full-scale ratios, used as synthetic defaults
IMAGES_PER_PATIENT = {CXR14: 112120 / 30805, PLCO: 185421 / 56071}


class ManifestError(ValueError):
    pass


def column_name(pathology: str) -> str:
    """CSV header for a pathology: non-alphanumerics collapsed to '_'."""
    return re.sub(r"[^0-9A-Za-z]+", "_", pathology).strip("_")


def pathology_columns(dataset: str) -> dict[str, str]:
    names = ls.CXR14_PATHOLOGIES if dataset == CXR14 else ls.PLCO_PATHOLOGIES
    return {column_name(n): n for n in names}


@dataclass
class SampleRecord:
    image_id: str
    patient_id: str
    dataset: str
    pathologies: tuple[str, ...] = ()
    locations: dict[str, tuple[LocationAnnotation, ...]] = field(default_factory=dict)
    location_available: bool = True
    path: str | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError(f"{self.image_id}: empty patient_id")
        for d in self.locations:
            if d not in ls.PLCO_LOCATED or self.dataset != PLCO:
                raise ManifestError(f"{self.image_id}: location annotation for non-located disease {d!r}")


@dataclass
class ManifestStats:
    images: int
    patients: int
    images_per_patient: float


@dataclass
class Manifest:
    records: list[SampleRecord]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ManifestError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)

    @property
    def stats(self) -> ManifestStats:
        patients = {r.patient_id for r in self.records}
        n = len(self.records)
        return ManifestStats(n, len(patients), n / len(patients) if patients else 0.0)

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.image_id: r for r in self.records}


# ---------------------------------------------------------------- manifest CSV


def load_manifest(path, dataset: str) -> Manifest:
    """Read a manifest CSV for one dataset.

    Rows sharing an image_id are merged when every one of them carries a
    location annotation and they agree on patient, dataset and pathology bits;
    any other repeat is a duplicate and is rejected.
    """
    if dataset not in ls.DATASETS:
        raise ManifestError(f"unknown dataset tag {dataset!r}")
    path = Path(path)
    cols = pathology_columns(dataset)
    records: dict[str, SampleRecord] = {}
    has_loc: dict[str, bool] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        fixed = {"image_id", "patient_id", "dataset", "path"} | set(LOCATION_COLUMNS)
        for required in ("image_id", "patient_id", "dataset"):
            if required not in header:
                raise ManifestError(f"{path}: missing column {required!r}")
        for name in header:
            if name not in fixed and name not in cols:
                raise ManifestError(f"{path}: unknown pathology column {name!r} for {dataset}")
        missing = [c for c in cols if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing pathology columns {missing}")
        for row in reader:
            line = reader.line_num
            try:
                rec, loc = _parse_row(row, dataset, cols, path.parent)
            except (ValueError, KeyError) as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from None
            prev = records.get(rec.image_id)
            if prev is None:
                records[rec.image_id] = rec
                has_loc[rec.image_id] = loc is not None
            else:
                same = (prev.patient_id, prev.dataset, prev.pathologies, prev.location_available) == (
                    rec.patient_id,
                    rec.dataset,
                    rec.pathologies,
                    rec.location_available,
                )
                if not (same and has_loc[rec.image_id] and loc is not None):
                    raise ManifestError(f"{path}:{line}: duplicate image_id {rec.image_id!r}")
            if loc is not None:
                disease, ann = loc
                target = records[rec.image_id]
                target.locations[disease] = target.locations.get(disease, ()) + (ann,)
    return Manifest(list(records.values()))


def _flag(value: str, default: bool) -> bool:
    value = (value or "").strip()
    if value == "":
        return default
    if value not in ("0", "1"):
        raise ValueError(f"expected 0/1, got {value!r}")
    return value == "1"


def _parse_row(row, dataset, cols, root):
    if row.get("dataset") != dataset:
        raise ValueError(f"dataset {row.get('dataset')!r} does not match {dataset!r}")
    image_id = (row.get("image_id") or "").strip()
    if not image_id:
        raise ValueError("empty image_id")
    present = tuple(name for col, name in cols.items() if _flag(row[col], False))
    path = (row.get("path") or "").strip() or None
    if path is not None and not os.path.isabs(path):
        path = str(root / path)
    rec = SampleRecord(
        image_id=image_id,
        patient_id=(row.get("patient_id") or "").strip(),
        dataset=dataset,
        pathologies=present,
        location_available=_flag(row.get("loc_available", ""), True),
        path=path,
    )
    disease = (row.get("loc_disease") or "").strip()
    if not disease:
        return rec, None
    disease = cols.get(column_name(disease), disease)
    if dataset != PLCO or disease not in ls.PLCO_LOCATED:
        raise ValueError(f"location given for non-located disease {disease!r}")
    if disease not in present:
        raise ValueError(f"location given for absent disease {disease!r}")
    ann = LocationAnnotation(
        side=(row.get("loc_side") or "none").strip() or "none",
        fifth=(row.get("loc_fifth") or "none").strip() or "none",
        diffuse=_flag(row.get("loc_diffuse", ""), False),
    )
    if ann.empty:
        raise ValueError(f"empty location annotation for {disease!r}")
    return rec, (disease, ann)


def write_manifest(manifest: Manifest, path, dataset: str):
    cols = pathology_columns(dataset)
    header = ["image_id", "patient_id", "dataset", *cols, *LOCATION_COLUMNS, "path"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in manifest.records:
            base = [r.image_id, r.patient_id, r.dataset] + [int(n in r.pathologies) for n in cols.values()]
            avail = int(r.location_available) if dataset == PLCO else ""
            anns = [(d, a) for d in ls.PLCO_LOCATED for a in r.locations.get(d, ())]
            if not anns:
                w.writerow(base + ["", "", "", "", avail, r.path or ""])
            for d, a in anns:
                w.writerow(base + [d, a.side, a.fifth, int(a.diffuse), avail, r.path or ""])


# ---------------------------------------------------------------- image I/O


def read_image(path) -> np.ndarray:
    """Grayscale PNG (8- or 16-bit) or ``.npy`` raw array."""
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ManifestError(f"{path}: expected single-channel grayscale, got shape {arr.shape}")
    return arr


def write_png(path, image: np.ndarray):
    if image.dtype == np.uint16:
        Image.fromarray(image).save(path, optimize=False)
    elif image.dtype == np.uint8:
        Image.fromarray(image).save(path, optimize=False)
    else:
        raise TypeError(f"PNG needs uint8 or uint16, got {image.dtype}")


# ---------------------------------------------------------------- normalisation


def histogram_normalize(image: np.ndarray) -> np.ndarray:
    """Global histogram equalisation to 0..255.

    ``out(v) = round(255 * (cdf(v) - cdf_min) / (n - cdf_min))`` with the
    cumulative count taken over the image's own values; a constant image maps
    to all zeros.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    values, inverse, counts = np.unique(image.ravel(), return_inverse=True, return_counts=True)
    cdf = np.cumsum(counts)
    cdf_min = cdf[0]
    denom = image.size - cdf_min
    if denom == 0:
        return np.zeros(image.shape, dtype=np.uint8)
    lut = np.floor(255.0 * (cdf - cdf_min) / denom + 0.5).astype(np.uint8)
    return lut[inverse].reshape(image.shape)


@dataclass
class NormStats:
    mean: float
    std: float


def dataset_stats(images: Sequence[np.ndarray]) -> NormStats:
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return NormStats(float(stack.mean()), float(stack.std()))


def standardize(image: np.ndarray, stats: NormStats, channels: int = 3) -> np.ndarray:
    """Channel-replicated ``(v - mean) / std`` as a (channels, H, W) float array."""
    if not stats.std > 0:
        raise ValueError("standardize: std must be positive")
    z = (np.asarray(image, dtype=np.float64) - stats.mean) / stats.std
    return np.repeat(z[None], channels, axis=0)


def destandardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return x[0] * stats.std + stats.mean


def imagenet_standardize(image8: np.ndarray) -> np.ndarray:
    """ImageNet channel statistics applied to a replicated 8-bit image."""
    v = np.asarray(image8, dtype=np.float64) / 255.0
    return (v[None] - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def to_8bit(image: np.ndarray, dataset: str) -> np.ndarray:
    """PLCO images are histogram-equalised; CXR14 images are already 8-bit."""
    if dataset == PLCO:
        return histogram_normalize(image)
    if image.dtype != np.uint8:
        raise ManifestError(f"CXR14 images are expected as 8-bit, got {image.dtype}")
    return image


# ---------------------------------------------------------------- synthetic corpus

# per-pathology signature index -> (radius_y, radius_x, polarity); index is the
# pathology's position within its own dataset vocabulary
_SIGNATURES = [
    (3, 3, 1.0),
    (6, 6, 1.0),
    (2, 9, 1.0),
    (9, 2, 1.0),
    (3, 3, -1.0),
    (6, 6, -1.0),
    (2, 9, -1.0),
    (9, 2, -1.0),
    (4, 7, 1.0),
    (7, 4, 1.0),
    (4, 7, -1.0),
    (7, 4, -1.0),
    (5, 5, 0.6),
    (5, 5, -0.6),
]

# lung fields as fractions of the image: (centre_x, half_width); shared vertical extent
_LUNG_X = {"right": (0.30, 0.15), "left": (0.70, 0.15)}  # patient's right lung on image left
_LUNG_Y = (0.15, 0.85)


@dataclass
class SynthConfig:
    size: int = 64
    patients_cxr14: int = 1400
    patients_plco: int = 1500
    ipp_cxr14: float = 3.6
    ipp_plco: float = 3.3
    prevalence_min: float = 0.04
    prevalence_max: float = 0.25
    amplitude: float = 0.35
    noise: float = 0.06
    location_correlation: bool = True
    p_multiple: float = 0.15
    p_diffuse: float = 0.1
    persistence: float = 0.85
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise KeyError(f"unknown synth option {k!r}")
            t = kinds[k]
            if t == "bool" and isinstance(v, str):
                v = v.lower() in ("1", "true", "yes", "on")
            elif t in ("int", "float") and isinstance(v, str):
                v = {"int": int, "float": float}[t](v)
            out[k] = v
        return cls(**out)


def fifth_bounds(fifth: str, size: int) -> tuple[int, int]:
    """Pixel rows [lo, hi) of a lung fifth; f1 is the top band."""
    y0, y1 = _LUNG_Y[0] * size, _LUNG_Y[1] * size
    i = ls.FIFTHS.index(fifth)
    band = (y1 - y0) / 5
    return int(round(y0 + i * band)), int(round(y0 + (i + 1) * band))


def region_of(y: float, x: float, size: int) -> tuple[str, str]:
    """(side, fifth) containing pixel centre (y, x); 'none' outside the lung fields."""
    side = "none"
    for s, (cx, hw) in _LUNG_X.items():
        if abs(x - cx * size) <= hw * size:
            side = s
    fifth = "none"
    for f in ls.FIFTHS:
        lo, hi = fifth_bounds(f, size)
        if lo <= y < hi:
            fifth = f
    return side, fifth


def ipp_probabilities(mean: float, kmax: int = 6) -> np.ndarray:
    """Exponentially tilted distribution on 1..kmax with the requested mean."""
    if not 1.0 <= mean <= kmax:
        raise ValueError(f"images-per-patient mean must lie in [1, {kmax}]")
    ks = np.arange(1, kmax + 1)

    def tilted(theta):
        w = np.exp(theta * (ks - ks.mean()))
        return w / w.sum()

    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tilted(mid) @ ks < mean:
            lo = mid
        else:
            hi = mid
    return tilted(0.5 * (lo + hi))


def images_per_patient(n_patients: int, mean: float, rng: np.random.Generator) -> np.ndarray:
    """Counts in 1..6 whose total is exactly round(mean * n_patients)."""
    ks = np.arange(1, 7)
    counts = rng.choice(ks, size=n_patients, p=ipp_probabilities(mean))
    target = int(round(mean * n_patients))
    while counts.sum() != target:
        if counts.sum() < target:
            idx = np.flatnonzero(counts < 6)
            counts[rng.choice(idx)] += 1
        else:
            idx = np.flatnonzero(counts > 1)
            counts[rng.choice(idx)] -= 1
    return counts


def lung_template(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.full((size, size), 0.65)
    cy = 0.5 * (_LUNG_Y[0] + _LUNG_Y[1]) * size
    ry = 0.5 * (_LUNG_Y[1] - _LUNG_Y[0]) * size
    for cx, hw in _LUNG_X.values():
        inside = ((xx - cx * size) / (hw * size)) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        img[inside] = 0.42
    return img


def _blob(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return np.exp(-0.5 * (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))


@dataclass
class Planted:
    disease: str
    cy: float
    cx: float


@dataclass
class SynthCorpus:
    manifests: dict[str, Manifest]
    images: dict[str, np.ndarray]
    placements: dict[str, list[Planted]]
    config: SynthConfig


def synth_generate(config: SynthConfig) -> SynthCorpus:
    """Planted-signal corpus for both datasets.

    Every present pathology draws its signature blob. With location
    correlation on, located PLCO diseases are planted inside a chosen lung
    fifth (or spread over several fifths / the whole lung for
    multiple / diffuse cases) and annotated accordingly; otherwise they are
    planted anywhere in the lungs and marked location-unavailable.
    """
    root = np.random.SeedSequence(config.seed)
    s_cx, s_pl = root.spawn(2)
    manifests, images, placements = {}, {}, {}
    template = lung_template(config.size)
    for tag, n_pat, ipp, ss in (
        (CXR14, config.patients_cxr14, config.ipp_cxr14, s_cx),
        (PLCO, config.patients_plco, config.ipp_plco, s_pl),
    ):
        rng = np.random.default_rng(ss)
        vocab = ls.CXR14_PATHOLOGIES if tag == CXR14 else ls.PLCO_PATHOLOGIES
        prev = rng.uniform(config.prevalence_min, config.prevalence_max, size=len(vocab)) if config.prevalence_max > 0 else np.zeros(len(vocab))
        counts = images_per_patient(n_pat, ipp, rng) if n_pat else np.zeros(0, dtype=int)
        records = []
        for p in range(n_pat):
            pid = f"{tag.lower()}_p{p:05d}"
            base = rng.random(len(vocab)) < prev
            sites = {d: _draw_site(rng, config) for d in vocab if d in ls.PLCO_LOCATED and tag == PLCO}
            for k in range(counts[p]):
                keep = base & (rng.random(len(vocab)) < config.persistence)
                new = rng.random(len(vocab)) < prev * (1 - config.persistence)
                present = tuple(d for d, on in zip(vocab, keep | new) if on)
                iid = f"{tag.lower()}_{p:05d}_{k:02d}"
                img, rec_locs, planted = _render(rng, config, template, tag, vocab, present, sites)
                images[iid] = _quantize(img, tag, rng)
                placements[iid] = planted
                records.append(
                    SampleRecord(
                        image_id=iid,
                        patient_id=pid,
                        dataset=tag,
                        pathologies=present,
                        locations=rec_locs,
                        location_available=config.location_correlation or tag == CXR14,
                        path=f"images/{iid}.png",
                    )
                )
        manifests[tag] = Manifest(records)
    return SynthCorpus(manifests, images, placements, config)


def _draw_site(rng, config):
    side = str(rng.choice(ls.SIDES))
    u = rng.random()
    if u < config.p_diffuse:
        return (side, "diffuse", None)
    if u < config.p_diffuse + config.p_multiple:
        a, b = sorted(rng.choice(5, size=2, replace=False))
        return (side, "multiple", (ls.FIFTHS[a], ls.FIFTHS[b]))
    return (side, "single", (ls.FIFTHS[int(rng.integers(5))],))


def _point_in(rng, size, side, fifth):
    cx, hw = _LUNG_X[side]
    lo, hi = fifth_bounds(fifth, size)
    y = rng.uniform(lo + 0.5, hi - 0.5)
    x = rng.uniform((cx - 0.6 * hw) * size, (cx + 0.6 * hw) * size)
    return y, x


def _render(rng, config, template, tag, vocab, present, sites):
    size = config.size
    img = template.copy()
    locs: dict[str, tuple[LocationAnnotation, ...]] = {}
    planted = []
    for d in present:
        ry, rx, pol = _SIGNATURES[vocab.index(d)]
        scale = size / 64.0
        ry, rx = ry * scale, rx * scale
        amp = config.amplitude * pol
        if d in sites:
            side, mode, fifths = sites[d]
            if not config.location_correlation:
                side = str(rng.choice(ls.SIDES))
                fifths = (ls.FIFTHS[int(rng.integers(5))],)
                mode = "single"
            if mode == "diffuse":
                pts = [_point_in(rng, size, side, f) for f in ls.FIFTHS]
                for y, x in pts:
                    img += 0.6 * amp * _blob(size, y, x, 0.7 * ry, 0.7 * rx)
                anns = (LocationAnnotation(side, "none", True),)
            else:
                pts = [_point_in(rng, size, side, f) for f in fifths]
                for y, x in pts:
                    img += amp * _blob(size, y, x, ry, rx)
                anns = tuple(LocationAnnotation(side, f) for f in fifths)
            if config.location_correlation:
                locs[d] = anns
        else:
            side = str(rng.choice(ls.SIDES))
            pts = [_point_in(rng, size, side, ls.FIFTHS[int(rng.integers(5))])]
            img += amp * _blob(size, pts[0][0], pts[0][1], ry, rx)
        planted.extend(Planted(d, y, x) for y, x in pts)
    img += rng.normal(0.0, config.noise, size=img.shape)
    return img, locs, planted


def _quantize(img, tag, rng):
    if tag == CXR14:
        return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    # PLCO: 16-bit with per-image gain/offset so histogram equalisation matters
    gain = rng.uniform(0.4, 0.9)
    offset = rng.uniform(0.0, 0.1)
    return np.clip(np.round((img * gain + offset) * 65535.0), 0, 65535).astype(np.uint16)


def write_corpus(corpus: SynthCorpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = {}
    for tag, man in corpus.manifests.items():
        for r in man.records:
            write_png(out / r.path, corpus.images[r.image_id])
        paths[tag] = out / f"manifest_{tag.lower()}.csv"
        write_manifest(man, paths[tag], tag)
    (out / "labelspace.json").write_text(ls.build_combined_labelspace().to_json() + "\n")
    return paths


def load_corpus(corpus_dir) -> dict[str, Manifest]:
    """Manifests found as ``manifest_<dataset>.csv`` under ``corpus_dir``."""
    root = Path(corpus_dir)
    out = {}
    for tag in ls.DATASETS:
        p = root / f"manifest_{tag.lower()}.csv"
        if p.exists():
            out[tag] = load_manifest(p, tag)
    if not out:
        raise ManifestError(f"{root}: no manifest_<dataset>.csv files")
    return out


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W)
    labels: np.ndarray  # (B, C) int8
    masks: np.ndarray  # (B, C) int8
    provenance: list[str]
    indices: np.ndarray


def mixed_batch_sampler(
    tags: Sequence[str], batch_size: int, seed: int, epoch: int = 0, pooled: bool = True
) -> Iterator[np.ndarray]:
    """Yield index arrays covering every sample exactly once per epoch.

    ``tags[i]`` is the dataset of sample ``i``. The order depends only on
    (seed, epoch). In pooled mode the two datasets are interleaved in
    proportion so that every batch, including the final partial one,
    contains both.
    """
    tags = np.asarray(tags)
    n = len(tags)
    if n == 0:
        return
    rng = np.random.default_rng([seed, epoch])
    names = sorted(set(tags.tolist()))
    starts = list(range(0, n, batch_size))
    if not pooled or len(names) < 2:
        order = rng.permutation(n)
    else:
        if len(starts) > 1 and n - starts[-1] == 1:
            # a lone trailing sample cannot carry both datasets; it joins the previous batch
            starts.pop()
        groups = [rng.permutation(np.flatnonzero(tags == t)) for t in names]
        for t, g in zip(names, groups):
            if len(g) < len(starts):
                raise ValueError(f"pooled batching needs >= {len(starts)} {t} samples, have {len(g)}")
        order = _interleave(groups, n)
        order = _fix_tail(order, tags, starts, names)
    for s, e in zip(starts, starts[1:] + [n]):
        yield order[s:e]


def _interleave(groups, n):
    """Proportional merge: each group spread evenly over the n output slots."""
    keys = np.concatenate([(np.arange(len(g)) + 0.5) / len(g) for g in groups])
    ids = np.concatenate(groups)
    # ties broken by group order through the stable sort
    return ids[np.argsort(keys, kind="stable")]


def _fix_tail(order, tags, starts, names):
    order = order.copy()
    ends = starts[1:] + [len(order)]
    for b, (s, e) in enumerate(zip(starts, ends)):
        chunk = slice(s, e)
        for t in names:
            if np.any(tags[order[chunk]] == t):
                continue
            # borrow one sample of t from a batch that has more than one
            for b2, (s2, e2) in enumerate(zip(starts, ends)):
                c2 = slice(s2, e2)
                hits = np.flatnonzero(tags[order[c2]] == t)
                if b2 != b and len(hits) > 1:
                    j = s2 + hits[-1]
                    i = chunk.stop - 1
                    if tags[order[i]] == t:
                        continue
                    order[i], order[j] = order[j], order[i]
                    break
            else:
                raise ValueError("cannot give every batch both datasets")
    return order
