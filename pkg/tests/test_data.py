import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnetloc import labelspace as ls
from dnetloc.data import (
    LOCATION_COLUMNS,
    Manifest,
    ManifestError,
    NormStats,
    SampleRecord,
    SynthConfig,
    dataset_stats,
    destandardize,
    histogram_normalize,
    images_per_patient,
    load_corpus,
    load_manifest,
    mixed_batch_sampler,
    pathology_columns,
    read_image,
    region_of,
    standardize,
    synth_generate,
    to_8bit,
    write_corpus,
    write_manifest,
    write_png,
)
from dnetloc.labelspace import CXR14, PLCO, LocationAnnotation

SPACE = ls.build_combined_labelspace()


def write_csv(path, dataset, rows):
    cols = list(pathology_columns(dataset))
    header = ["image_id", "patient_id", "dataset", *cols, *LOCATION_COLUMNS]
    lines = [",".join(header)]
    for r in rows:
        flags = [str(int(c in r.get("on", ()))) for c in cols]
        loc = r.get("loc", ("", "", "", "", ""))
        lines.append(",".join([r["id"], r["pid"], dataset, *flags, *loc]))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_manifest_fixture_stats(tmp_path):
    rows = [{"id": f"i{k}", "pid": f"p{k // 2}"} for k in range(4)]
    m = load_manifest(write_csv(tmp_path / "m.csv", CXR14, rows), CXR14)
    assert m.stats.images == 4 and m.stats.patients == 2
    assert m.stats.images_per_patient == 2.0


def test_manifest_duplicate_id(tmp_path):
    rows = [{"id": "dup7", "pid": "a"}, {"id": "dup7", "pid": "a"}]
    with pytest.raises(ManifestError, match="dup7"):
        load_manifest(write_csv(tmp_path / "m.csv", CXR14, rows), CXR14)


def test_manifest_location_rows_merge(tmp_path):
    rows = [
        {"id": "x", "pid": "a", "on": ("Mass",), "loc": ("Mass", "left", "f1", "0", "1")},
        {"id": "x", "pid": "a", "on": ("Mass",), "loc": ("Mass", "left", "f4", "0", "1")},
    ]
    m = load_manifest(write_csv(tmp_path / "m.csv", PLCO, rows), PLCO)
    (rec,) = m.records
    assert rec.locations["Mass"] == (LocationAnnotation("left", "f1"), LocationAnnotation("left", "f4"))
    v = ls.build_label_vector(rec, SPACE)
    assert v[SPACE.index(PLCO, "loc_wildcard")] == 1


def test_manifest_conflicting_repeat(tmp_path):
    rows = [
        {"id": "x", "pid": "a", "on": ("Mass",), "loc": ("Mass", "left", "f1", "0", "1")},
        {"id": "x", "pid": "b", "on": ("Mass",), "loc": ("Mass", "left", "f4", "0", "1")},
    ]
    with pytest.raises(ManifestError, match=r"m\.csv:3"):
        load_manifest(write_csv(tmp_path / "m.csv", PLCO, rows), PLCO)


def test_manifest_bad_flag_line_number(tmp_path):
    p = write_csv(tmp_path / "m.csv", CXR14, [{"id": "a", "pid": "p"}, {"id": "b", "pid": "p"}])
    text = p.read_text().splitlines()
    text[2] = text[2].replace(",0,", ",7,", 1)
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(ManifestError, match=r"m\.csv:3"):
        load_manifest(p, CXR14)


def test_manifest_unknown_column(tmp_path):
    p = write_csv(tmp_path / "m.csv", CXR14, [{"id": "a", "pid": "p"}])
    text = p.read_text().splitlines()
    text[0] += ",Granuloma"
    text[1] += ",0"
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(ManifestError, match="Granuloma"):
        load_manifest(p, CXR14)


def test_manifest_location_for_absent_disease(tmp_path):
    rows = [{"id": "x", "pid": "a", "loc": ("Mass", "left", "f1", "0", "1")}]
    with pytest.raises(ManifestError, match="absent"):
        load_manifest(write_csv(tmp_path / "m.csv", PLCO, rows), PLCO)


def test_manifest_write_roundtrip(tmp_path):
    recs = [
        SampleRecord("a", "p1", PLCO, ("Mass", "COPD"), {"Mass": (LocationAnnotation("right", "f2"),)}),
        SampleRecord("b", "p1", PLCO, ("Nodule",), {}, location_available=False),
        SampleRecord("c", "p2", PLCO, ("Atelectasis",), {"Atelectasis": (LocationAnnotation("left", diffuse=True),)}),
    ]
    write_manifest(Manifest(recs), tmp_path / "m.csv", PLCO)
    back = load_manifest(tmp_path / "m.csv", PLCO)
    assert [(r.image_id, r.pathologies, r.locations, r.location_available) for r in back.records] == [
        (r.image_id, r.pathologies, r.locations, r.location_available) for r in recs
    ]


def test_corpus_images_per_patient():
    c = synth_generate(SynthConfig(patients_cxr14=0, patients_plco=1000, ipp_plco=3.3, size=16))
    st_ = c.manifests[PLCO].stats
    assert st_.images == 3300 and st_.patients == 1000
    assert st_.images_per_patient == pytest.approx(3.3, abs=1e-12)


@given(st.integers(1, 300), st.floats(1.0, 6.0), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_images_per_patient_counts(n, mean, seed):
    counts = images_per_patient(n, mean, np.random.default_rng(seed))
    assert counts.min() >= 1 and counts.max() <= 6
    assert counts.sum() == int(round(mean * n))


# ---------------------------------------------------------------- normalisation


def test_histogram_bimodal():
    img = np.array([[0, 65535], [0, 65535]], dtype=np.uint16)
    assert sorted(np.unique(histogram_normalize(img)).tolist()) == [0, 255]


def test_histogram_constant():
    assert np.all(histogram_normalize(np.full((5, 5), 1234, dtype=np.uint16)) == 0)


def test_histogram_four_levels():
    # cdf = 1, 2, 3, 4; cdf_min = 1; out = round(255 * (cdf - 1) / 3)
    out = histogram_normalize(np.array([[0, 100], [200, 300]], dtype=np.uint16))
    assert out.ravel().tolist() == [0, 85, 170, 255]


@given(st.lists(st.integers(0, 65535), min_size=1, max_size=200))
def test_histogram_rank_preserving(values):
    img = np.array(values, dtype=np.uint16)
    out = histogram_normalize(img)
    order = np.argsort(img, kind="stable")
    assert np.all(np.diff(out[order].astype(int)) >= 0)
    assert out.dtype == np.uint8


def test_standardize_examples():
    stats = NormStats(100.0, 20.0)
    assert np.all(standardize(np.full((2, 2), 100.0), stats) == 0)
    z = standardize(np.array([[120.0]]), stats)
    assert z.shape == (3, 1, 1) and np.all(z == 1.0)
    with pytest.raises(ValueError):
        standardize(np.zeros((2, 2)), NormStats(0.0, 0.0))


@given(st.floats(-1e3, 1e3), st.floats(1e-2, 1e3), st.integers(0, 2**32 - 1))
def test_standardize_inverse(mean, std, seed):
    img = np.random.default_rng(seed).uniform(0, 255, size=(4, 4))
    stats = NormStats(mean, std)
    assert np.max(np.abs(destandardize(standardize(img, stats), stats) - img)) < 1e-12 * max(1.0, abs(mean) + 255)


@pytest.fixture(scope="module")
def small_corpus():
    return synth_generate(SynthConfig(patients_cxr14=40, patients_plco=60, seed=3))


def test_standardized_corpus_moments(small_corpus):
    imgs = [to_8bit(small_corpus.images[r.image_id], PLCO) for r in small_corpus.manifests[PLCO].records]
    stats = dataset_stats(imgs)
    z = np.stack([standardize(im, stats)[0] for im in imgs])
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1.0) < 1e-3


def test_to_8bit_rejects_wide_cxr14():
    with pytest.raises(ManifestError):
        to_8bit(np.zeros((2, 2), dtype=np.uint16), CXR14)


# ---------------------------------------------------------------- generator


def test_zero_prevalence_corpus():
    c = synth_generate(SynthConfig(patients_cxr14=20, patients_plco=20, prevalence_min=0.0, prevalence_max=0.0, size=16))
    for m in c.manifests.values():
        assert all(r.pathologies == () for r in m.records)
        assert all(ls.build_label_vector(r, SPACE).sum() == 0 for r in m.records)


def corpus_digest(c):
    h = hashlib.sha256()
    for tag in sorted(c.manifests):
        for r in c.manifests[tag].records:
            h.update(repr((r.image_id, r.patient_id, r.pathologies, sorted(r.locations.items()), r.location_available)).encode())
            h.update(c.images[r.image_id].tobytes())
    return h.hexdigest()


def test_generator_deterministic():
    cfg = SynthConfig(patients_cxr14=15, patients_plco=15, seed=11)
    assert corpus_digest(synth_generate(cfg)) == corpus_digest(synth_generate(cfg))
    other = SynthConfig(patients_cxr14=15, patients_plco=15, seed=12)
    assert corpus_digest(synth_generate(cfg)) != corpus_digest(synth_generate(other))


def test_written_corpus_deterministic(tmp_path):
    cfg = SynthConfig(patients_cxr14=5, patients_plco=5, seed=1)
    for d in ("a", "b"):
        write_corpus(synth_generate(cfg), tmp_path / d)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_corpus_load_roundtrip(tmp_path, small_corpus):
    write_corpus(small_corpus, tmp_path)
    ms = load_corpus(tmp_path)
    assert set(ms) == {CXR14, PLCO}
    for tag, m in ms.items():
        for r in m.records[:20]:
            assert np.array_equal(read_image(r.path), small_corpus.images[r.image_id])


def test_png_and_npy_io(tmp_path):
    img16 = np.arange(12, dtype=np.uint16).reshape(3, 4) * 5000
    write_png(tmp_path / "a.png", img16)
    assert np.array_equal(read_image(tmp_path / "a.png"), img16)
    np.save(tmp_path / "b.npy", img16.astype(np.float32))
    assert read_image(tmp_path / "b.npy").dtype == np.float32


def test_generator_encoder_agreement(small_corpus):
    """Location labels are recomputed from blob centres with the encoder."""
    cfg = small_corpus.config
    checked = 0
    for r in small_corpus.manifests[PLCO].records:
        planted = small_corpus.placements[r.image_id]
        for d in r.pathologies:
            if d not in ls.PLCO_LOCATED:
                continue
            pts = [(p.cy, p.cx) for p in planted if p.disease == d]
            regions = {region_of(y, x, cfg.size) for y, x in pts}
            sides = {s for s, _ in regions}
            assert len(sides) == 1 and "none" not in sides
            (side,) = sides
            if len(pts) == 5 and len({f for _, f in regions}) == 5:
                anns = [LocationAnnotation(side, diffuse=True)]
            else:
                anns = [LocationAnnotation(side, f) for _, f in regions]
            assert np.array_equal(ls.encode_location(anns), ls.encode_location(r.locations[d])), r.image_id
            checked += 1
    assert checked > 20


def test_location_correlation_off_marks_unavailable():
    c = synth_generate(SynthConfig(patients_cxr14=3, patients_plco=20, location_correlation=False, size=32))
    recs = c.manifests[PLCO].records
    assert all(not r.location_available and r.locations == {} for r in recs)
    assert all(r.location_available for r in c.manifests[CXR14].records)


def test_left_f2_planting():
    y0 = 0.15 * 64 + (0.7 * 64 / 5) * 1.5
    assert region_of(y0, 0.70 * 64, 64) == ("left", "f2")
    bits = ls.encode_location([LocationAnnotation("left", "f2")])
    assert bits[1] == 1 and bits[6] == 1 and bits.sum() == 2


# ---------------------------------------------------------------- sampler


def test_sampler_balanced_pooled():
    tags = [CXR14] * 128 + [PLCO] * 128
    batches = list(mixed_batch_sampler(tags, 128, seed=0))
    assert len(batches) == 2
    for b in batches:
        assert {tags[i] for i in b} == {CXR14, PLCO}


def test_sampler_single_dataset():
    tags = [PLCO] * 50
    batches = list(mixed_batch_sampler(tags, 16, seed=0, pooled=False))
    assert [len(b) for b in batches] == [16, 16, 16, 2]
    assert all(tags[i] == PLCO for b in batches for i in b)


def test_sampler_deterministic_per_epoch():
    tags = [CXR14] * 37 + [PLCO] * 61
    a = [b.tolist() for b in mixed_batch_sampler(tags, 10, seed=4, epoch=2)]
    b = [b.tolist() for b in mixed_batch_sampler(tags, 10, seed=4, epoch=2)]
    c = [b.tolist() for b in mixed_batch_sampler(tags, 10, seed=4, epoch=3)]
    assert a == b and a != c


def test_sampler_lone_tail_joins_previous():
    tags = [CXR14] * 18 + [PLCO] * 102
    sizes = [len(b) for b in mixed_batch_sampler(tags, 7, seed=0)]
    assert sizes == [7] * 16 + [8]


def test_sampler_rejects_too_few():
    with pytest.raises(ValueError):
        list(mixed_batch_sampler([CXR14] * 2 + [PLCO] * 100, 10, seed=0))


@given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 64), st.integers(0, 100), st.booleans())
@settings(max_examples=300, deadline=None)
def test_sampler_properties(n_a, n_b, batch, seed, pooled):
    n = n_a + n_b
    tags = [CXR14] * n_a + [PLCO] * n_b
    n_batches = -(-n // batch)
    lone_tail = pooled and n_batches > 1 and n % batch == 1
    n_batches -= lone_tail
    if pooled and min(n_a, n_b) < n_batches:
        return
    batches = list(mixed_batch_sampler(tags, batch, seed, pooled=pooled))
    assert len(batches) == n_batches
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(b) == batch for b in batches[:-1])
    assert len(batches[-1]) <= batch + lone_tail
    if pooled:
        assert all({tags[i] for i in b} == {CXR14, PLCO} for b in batches)
