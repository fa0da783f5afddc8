import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cornercase.datamodel import (
    ClassSplit,
    DatasetError,
    Split,
    apply_class_split,
    dataset_to_doc,
    dump_json,
    load_class_split,
    load_dataset,
    parse_dataset,
    remap_agnostic,
    resolve_class_split,
)
from cornercase.geometry import BBox
from cornercase.report import fixture_path


def doc_with(images=None, annotations=None, categories=None):
    return {
        "images": images if images is not None else [{"id": 1, "width": 100, "height": 50, "file_name": "a.png"}],
        "annotations": annotations if annotations is not None else [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 5, 20, 10]}
        ],
        "categories": categories if categories is not None else [{"id": 1, "name": "car"}],
    }


@pytest.fixture
def coda_like():
    """29 categories named after the fixture split: 7 common + 22 novel, one box each."""
    split = json.loads(fixture_path("coda_split.json").read_text())
    names = split["common"] + split["novel"]
    cats = [{"id": i, "name": n} for i, n in enumerate(names, 1)]
    anns = [
        {"id": i, "image_id": 1, "category_id": i, "bbox": [i * 10, 0, 8, 8]} for i in range(1, len(names) + 1)
    ]
    images = [{"id": 1, "width": 400, "height": 100, "file_name": "x.png"}]
    return parse_dataset(doc_with(images, anns, cats)), split


def test_minimal_file(tmp_path):
    path = tmp_path / "ds.json"
    path.write_text(json.dumps(doc_with()))
    ds = load_dataset(path)
    assert (len(ds.images), len(ds.annotations), len(ds.categories)) == (1, 1, 1)
    assert ds.annotations[0].bbox == BBox(10, 5, 30, 15)


def test_dangling_image_reference():
    doc = doc_with(annotations=[{"id": 1, "image_id": 99, "category_id": 1, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(DatasetError, match="99") as exc:
        parse_dataset(doc)
    assert exc.value.ids == (99,)


def test_dangling_category_reference():
    doc = doc_with(annotations=[{"id": 1, "image_id": 1, "category_id": 7, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(DatasetError, match="category id 7"):
        parse_dataset(doc)


def test_parse_error_reports_byte_offset(tmp_path):
    path = tmp_path / "bad.json"
    text = '{"images": ["é", }'
    path.write_text(text, encoding="utf-8")
    with pytest.raises(DatasetError) as exc:
        load_dataset(path)
    # the bad token sits after a two-byte character
    assert exc.value.offset == len(text[: text.index("}")].encode("utf-8"))


def test_duplicate_annotation_ids():
    ann = {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1]}
    with pytest.raises(DatasetError, match="duplicate annotation"):
        parse_dataset(doc_with(annotations=[ann, dict(ann)]))


def test_out_of_bounds_boxes_clamped_or_dropped(caplog):
    anns = [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [-10, -10, 30, 30]},
        {"id": 2, "image_id": 1, "category_id": 1, "bbox": [500, 500, 10, 10]},
        {"id": 3, "image_id": 1, "category_id": 1, "bbox": [5, 5, 0, 10]},
    ]
    ds = parse_dataset(doc_with(annotations=anns))
    assert [a.id for a in ds.annotations] == [1]
    assert ds.annotations[0].bbox == BBox(0, 0, 20, 20)
    assert ds.dropped == 2
    assert "dropped 2" in caplog.text


def test_unknown_keys_ignored():
    doc = doc_with()
    doc["info"] = {"year": 2022}
    doc["images"][0]["license"] = 3
    assert len(parse_dataset(doc).images) == 1


def test_coda_like_fixture_has_29_categories(coda_like):
    ds, _ = coda_like
    assert len(ds.categories) == 29


def test_class_split_7_common_22_novel(coda_like):
    ds, split_doc = coda_like
    split = resolve_class_split(split_doc, ds.categories)
    marked = apply_class_split(ds, split)
    assert sum(c.split == Split.COMMON for c in marked.categories) == 7
    assert sum(c.split == Split.NOVEL for c in marked.categories) == 22
    assert marked.annotations == ds.annotations


def test_split_listing_category_twice():
    ds = parse_dataset(doc_with())
    with pytest.raises(DatasetError):
        resolve_class_split({"common": ["car", "car"], "novel": [], "agnostic_id": 99}, ds.categories)
    with pytest.raises(DatasetError):
        resolve_class_split({"common": ["car"], "novel": [1], "agnostic_id": 99}, ds.categories)


def test_split_uncovered_category():
    ds = parse_dataset(doc_with(categories=[{"id": 1, "name": "car"}, {"id": 2, "name": "dog"}]))
    with pytest.raises(DatasetError, match=r"uncovered=\[2\]"):
        apply_class_split(ds, ClassSplit(frozenset({1}), frozenset(), 99))


def test_agnostic_id_must_not_collide():
    with pytest.raises(DatasetError):
        ClassSplit(frozenset({1}), frozenset({2}), 2)


def test_empty_novel_set_is_legal():
    cats = [{"id": i, "name": f"c{i}"} for i in range(1, 8)]
    ds = parse_dataset(doc_with(categories=cats))
    marked = apply_class_split(ds, ClassSplit(frozenset(range(1, 8)), frozenset(), 99))
    assert all(c.split == Split.COMMON for c in marked.categories)


def test_load_class_split_by_id_and_name(tmp_path):
    ds = parse_dataset(doc_with(categories=[{"id": 1, "name": "car"}, {"id": 2, "name": "dog"}]))
    path = tmp_path / "split.json"
    path.write_text(json.dumps({"common": ["car"], "novel": [2], "agnostic_id": 50}))
    assert load_class_split(path, ds.categories) == ClassSplit(frozenset({1}), frozenset({2}), 50)


def _mixed(n_novel, n_common):
    cats = [{"id": 1, "name": "car"}, {"id": 2, "name": "bus"}, {"id": 3, "name": "dog"}]
    anns = []
    for k in range(n_novel + n_common):
        cat = 3 if k < n_novel else 1 + k % 2
        anns.append({"id": k + 1, "image_id": 1, "category_id": cat, "bbox": [k, 0, 1, 1]})
    split = ClassSplit(frozenset({1, 2}), frozenset({3}), 100)
    ds = apply_class_split(parse_dataset(doc_with(annotations=anns, categories=cats)), split)
    return ds, split


def test_remap_all_leaves_one_category():
    ds, split = _mixed(2, 4)
    out = remap_agnostic(ds, split, "all")
    assert {a.category_id for a in out.annotations} == {100}
    assert [a.orig_category_id for a in out.annotations] == [a.category_id for a in ds.annotations]
    out.validate()


def test_remap_novel_only_counts():
    ds, split = _mixed(5, 3)
    out = remap_agnostic(ds, split, "novel_only")
    assert sum(a.category_id == 100 for a in out.annotations) == 5
    assert sum(a.category_id in (1, 2) for a in out.annotations) == 3


def test_remap_novel_only_without_novel_is_identity():
    ds, split = _mixed(0, 3)
    assert remap_agnostic(ds, split, "novel_only") is ds


@pytest.mark.parametrize("mode", ["all", "novel_only"])
def test_remap_idempotent_and_preserving(mode):
    ds, split = _mixed(3, 3)
    once = remap_agnostic(ds, split, mode)
    assert remap_agnostic(once, split, mode) == once
    assert len(once.annotations) == len(ds.annotations)
    assert once.images == ds.images
    assert [a.bbox for a in once.annotations] == [a.bbox for a in ds.annotations]


def test_remap_then_split_still_applies():
    ds, split = _mixed(2, 2)
    out = apply_class_split(remap_agnostic(ds, split, "all"), split)
    assert {c.id for c in out.categories} == {1, 2, 3, 100}


# coordinates on a 1/64 pixel grid are exact in binary floating point
grid = st.integers(0, 64 * 90).map(lambda v: v / 64)
size = st.integers(1, 64 * 10).map(lambda v: v / 64)


@given(st.lists(st.tuples(grid, grid, size, size, st.integers(1, 3)), max_size=12))
def test_load_serialize_load_fixed_point(tmp_path_factory, raw):
    anns = [
        {"id": k + 1, "image_id": 1, "category_id": c, "bbox": [x, y, w, h]} for k, (x, y, w, h, c) in enumerate(raw)
    ]
    cats = [{"id": i, "name": f"c{i}", "split": "common"} for i in (1, 2, 3)]
    images = [{"id": 1, "width": 100, "height": 100, "modality": "depth", "source": "pseudo", "parent_id": 4}]
    first = parse_dataset(doc_with(images, anns, cats))
    path = tmp_path_factory.mktemp("rt") / "ds.json"
    path.write_text(dump_json(dataset_to_doc(first)))
    second = load_dataset(path)
    assert second == first
    assert dump_json(dataset_to_doc(second)) == path.read_text()
