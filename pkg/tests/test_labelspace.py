import numpy as np
import pytest
from hypothesis import given, strategies as st

from dnetloc import labelspace as ls
from dnetloc.data import SampleRecord
from dnetloc.labelspace import (
    CXR14,
    PLCO,
    LabelError,
    LocationAnnotation,
    build_combined_labelspace,
    build_label_vector,
    build_mask_vector,
    decode_location,
    encode_location,
)

SPACE = build_combined_labelspace()


def test_space_shape():
    assert SPACE.C == 35
    kinds = [d.kind for d in SPACE.labels]
    assert sum(1 for d in SPACE.labels if d.dataset == CXR14 and d.kind == "pathology") == 14
    assert sum(1 for d in SPACE.labels if d.dataset == PLCO and d.kind == "pathology") == 12
    assert sum(k in ls.LOCATION_KINDS for k in kinds) == 9
    assert kinds.count("loc_fifth") == 5
    assert kinds.count("loc_wildcard") == 1
    assert kinds.count("loc_side") == 2
    assert kinds.count("loc_diffuse") == 1


def test_canonical_order():
    assert SPACE.labels[1].name == "Cardiomegaly" and SPACE.labels[1].dataset == CXR14
    assert SPACE.labels[2].name == "Effusion"
    assert SPACE.labels[14].name == "Nodule" and SPACE.labels[14].dataset == PLCO
    assert SPACE.labels[25].name == "Hilar Abnormality"
    assert [d.name for d in SPACE.labels[26:]] == [n for n, _ in ls.LOCATION_CLASSES]
    assert {SPACE.labels[i].name for i in SPACE.located_positions()} == set(ls.PLCO_LOCATED)


def test_json_roundtrip():
    assert ls.LabelSpace.from_json(SPACE.to_json()) == SPACE


def test_located_only_for_plco_pathology():
    with pytest.raises(LabelError):
        ls.LabelDef("Mass", CXR14, "pathology", located=True)


def test_annotation_invariants():
    with pytest.raises(LabelError):
        LocationAnnotation("left", "f2", diffuse=True)
    with pytest.raises(LabelError):
        LocationAnnotation("none", "f2")


def test_encode_single():
    bits = encode_location([LocationAnnotation("right", "f2")])
    assert bits.tolist() == [0, 1, 0, 0, 0, 0, 0, 1, 0]


def test_encode_distinct_fifths_wildcard():
    bits = encode_location([LocationAnnotation("left", "f1"), LocationAnnotation("left", "f4")])
    assert bits[:6].tolist() == [0, 0, 0, 0, 0, 1]
    assert bits[6] == 1 and bits[7] == 0


def test_encode_same_fifth_not_wildcard():
    bits = encode_location([LocationAnnotation("left", "f3"), LocationAnnotation("right", "f3")])
    assert bits.tolist() == [0, 0, 1, 0, 0, 0, 1, 1, 0]


def test_encode_diffuse():
    bits = encode_location([LocationAnnotation("left", diffuse=True)])
    assert bits.tolist() == [0, 0, 0, 0, 0, 0, 1, 0, 1]


def test_encode_rejects_empty():
    with pytest.raises(LabelError):
        encode_location([LocationAnnotation()])


annotations = st.builds(
    LocationAnnotation,
    side=st.sampled_from(["left", "right"]),
    fifth=st.sampled_from(list(ls.FIFTHS) + ["multiple", "none"]),
) | st.builds(LocationAnnotation, side=st.sampled_from(["left", "right", "none"]), diffuse=st.just(True))


@given(st.lists(annotations, max_size=6))
def test_at_most_one_lobe_bit(anns):
    assert encode_location(anns)[:6].sum() <= 1


@given(annotations)
def test_decode_encode_idempotent_single(a):
    bits = encode_location([a])
    assert np.array_equal(encode_location(decode_location(bits)), bits)


def _cxr(*names):
    return SampleRecord("i", "p", CXR14, tuple(names))


def _plco(*names, locations=None, available=True):
    return SampleRecord("i", "p", PLCO, tuple(names), locations or {}, available)


def test_label_vector_cxr_effusion():
    v = build_label_vector(_cxr("Effusion"), SPACE)
    assert v[2] == 1 and v.sum() == 1


def test_label_vector_plco_empty():
    assert build_label_vector(_plco(), SPACE).sum() == 0


def test_label_vector_plco_mass_location():
    v = build_label_vector(_plco("Mass", locations={"Mass": (LocationAnnotation("right", "f3"),)}), SPACE)
    expected = {SPACE.index(PLCO, "Mass"), SPACE.index(PLCO, "loc_side_right"), SPACE.index(PLCO, "loc_f3")}
    assert set(np.flatnonzero(v)) == expected


def test_label_vector_unknown_name():
    with pytest.raises(LabelError, match="Granuloma"):
        build_label_vector(_cxr("Granuloma"), SPACE)


def test_mask_vectors():
    assert build_mask_vector(_cxr("Mass"), SPACE).tolist() == [1] * 14 + [0] * 21
    assert build_mask_vector(_plco(), SPACE).tolist() == [0] * 14 + [1] * 21
    unavailable = _plco("Mass", available=False)
    assert build_mask_vector(unavailable, SPACE).tolist() == [0] * 14 + [1] * 12 + [0] * 9


def test_mask_location_switch_off():
    assert build_mask_vector(_plco(), SPACE, location=False).sum() == 12


@given(
    st.sampled_from([CXR14, PLCO]),
    st.sets(st.sampled_from(ls.PLCO_PATHOLOGIES)),
    st.booleans(),
)
def test_mask_sums_and_foreign_columns(dataset, names, available):
    vocab = ls.PLCO_PATHOLOGIES if dataset == PLCO else ls.CXR14_PATHOLOGIES
    names = tuple(n for n in names if n in vocab)
    locs = {n: (LocationAnnotation("left", "f1"),) for n in names if n in ls.PLCO_LOCATED and dataset == PLCO}
    rec = SampleRecord("i", "p", dataset, names, locs, available)
    mask = build_mask_vector(rec, SPACE)
    label = build_label_vector(rec, SPACE)
    assert mask.sum() in (14, 12, 21)
    foreign = SPACE.positions(CXR14 if dataset == PLCO else PLCO, kind=None)
    assert mask[foreign].sum() == 0 and label[foreign].sum() == 0
