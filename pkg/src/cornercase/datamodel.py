"""Dataset records, COCO-style ingestion, common/novel class split and agnostic remapping."""

from __future__ import annotations

import enum
import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .geometry import BBox, InvalidBoxError, clamp_to_image

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed or inconsistent annotation data.

    ``offset`` is the byte offset of a parse failure, when known.
    """

    def __init__(self, message: str, *, offset: int | None = None, ids: Iterable[int] = ()):
        super().__init__(message)
        self.offset = offset
        self.ids = tuple(ids)


class Split(str, enum.Enum):
    COMMON = "common"
    NOVEL = "novel"


class Modality(str, enum.Enum):
    RGB = "rgb"
    DEPTH = "depth"
    NORMAL = "normal"


class Source(str, enum.Enum):
    LABELED = "labeled"
    PSEUDO = "pseudo"


MODALITY_CODES = {Modality.RGB: 0, Modality.DEPTH: 1, Modality.NORMAL: 2}


def derived_image_id(base_id: int, modality: Modality | str) -> int:
    """Globally unique id for the ``modality`` view of scene ``base_id``."""
    return int(base_id) * 10 + MODALITY_CODES[Modality(modality)]


@dataclass(frozen=True, slots=True)
class Category:
    id: int
    name: str
    split: Split | None = None


@dataclass(frozen=True, slots=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str = ""
    modality: Modality = Modality.RGB
    source: Source = Source.LABELED
    # RGB image a depth/normal view was derived from
    parent_id: int | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"image {self.id}: width/height must be positive", ids=[self.id])


@dataclass(frozen=True, slots=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    is_pseudo: bool = False
    # category before any agnostic remap
    orig_category_id: int | None = None

    @property
    def source_category_id(self) -> int:
        return self.category_id if self.orig_category_id is None else self.orig_category_id


@dataclass(frozen=True, slots=True)
class ClassSplit:
    common_ids: frozenset[int]
    novel_ids: frozenset[int]
    agnostic_id: int

    def __post_init__(self) -> None:
        both = self.common_ids & self.novel_ids
        if both:
            raise DatasetError(f"categories listed as both common and novel: {sorted(both)}", ids=both)
        if self.agnostic_id <= 0:
            raise DatasetError("agnostic_id must be a positive integer")
        if self.agnostic_id in self.common_ids | self.novel_ids:
            raise DatasetError(f"agnostic_id {self.agnostic_id} collides with a real category")


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[Annotation, ...] = ()
    categories: tuple[Category, ...] = ()
    dropped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "categories", tuple(self.categories))

    def image_map(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def category_map(self) -> dict[int, Category]:
        return {c.id: c for c in self.categories}

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    def validate(self) -> None:
        """Check id uniqueness and referential integrity; raise ``DatasetError`` on failure."""
        _check_unique("image", [im.id for im in self.images])
        _check_unique("category", [c.id for c in self.categories])
        _check_unique("annotation", [a.id for a in self.annotations])
        images = self.image_map()
        cats = self.category_map()
        for a in self.annotations:
            if a.image_id not in images:
                raise DatasetError(
                    f"annotation {a.id} references missing image id {a.image_id}", ids=[a.image_id]
                )
            if a.category_id not in cats:
                raise DatasetError(
                    f"annotation {a.id} references missing category id {a.category_id}",
                    ids=[a.category_id],
                )
            im = images[a.image_id]
            b = a.bbox
            if b.x1 < 0 or b.y1 < 0 or b.x2 > im.width or b.y2 > im.height:
                raise DatasetError(f"annotation {a.id} lies outside image {im.id}", ids=[a.id])


def _check_unique(kind: str, ids: list[int]) -> None:
    seen: set[int] = set()
    dups = sorted({i for i in ids if i in seen or seen.add(i)})
    if dups:
        raise DatasetError(f"duplicate {kind} ids: {dups}", ids=dups)


# -- ingestion -----------------------------------------------------------


def _require(record: Mapping[str, Any], key: str, kind: str) -> Any:
    try:
        return record[key]
    except (KeyError, TypeError):
        raise DatasetError(f"{kind} record missing required key {key!r}: {record!r}") from None


def parse_dataset(doc: Mapping[str, Any]) -> Dataset:
    """Build a validated ``Dataset`` from a decoded COCO-style document.

    Boxes arrive as ``[x, y, w, h]``; they are converted to corner form and
    clamped to the image. Boxes with no area left after clamping are dropped
    and counted in ``Dataset.dropped``.
    """
    if not isinstance(doc, Mapping):
        raise DatasetError("annotation document must be an object")
    images = []
    for rec in doc.get("images", []):
        images.append(
            ImageRecord(
                id=int(_require(rec, "id", "image")),
                width=int(_require(rec, "width", "image")),
                height=int(_require(rec, "height", "image")),
                file_name=str(rec.get("file_name", "")),
                modality=Modality(rec.get("modality", "rgb")),
                source=Source(rec.get("source", "labeled")),
                parent_id=None if rec.get("parent_id") is None else int(rec["parent_id"]),
            )
        )
    categories = []
    for rec in doc.get("categories", []):
        split = rec.get("split")
        categories.append(
            Category(
                id=int(_require(rec, "id", "category")),
                name=str(_require(rec, "name", "category")),
                split=None if split is None else Split(split),
            )
        )
    _check_unique("image", [im.id for im in images])
    image_map = {im.id: im for im in images}
    cat_ids = {c.id for c in categories}

    annotations = []
    dropped = 0
    for rec in doc.get("annotations", []):
        ann_id = int(_require(rec, "id", "annotation"))
        image_id = int(_require(rec, "image_id", "annotation"))
        cat_id = int(_require(rec, "category_id", "annotation"))
        if image_id not in image_map:
            raise DatasetError(
                f"annotation {ann_id} references missing image id {image_id}", ids=[image_id]
            )
        if cat_id not in cat_ids:
            raise DatasetError(
                f"annotation {ann_id} references missing category id {cat_id}", ids=[cat_id]
            )
        raw = _require(rec, "bbox", "annotation")
        if len(raw) != 4:
            raise DatasetError(f"annotation {ann_id}: bbox must have 4 numbers")
        x, y, w, h = (float(v) for v in raw)
        im = image_map[image_id]
        box = None
        if w > 0 and h > 0:
            try:
                box = clamp_to_image(BBox.from_xywh(x, y, w, h), im.width, im.height)
            except InvalidBoxError:
                box = None
        if box is None:
            dropped += 1
            continue
        orig = rec.get("orig_category_id")
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=image_id,
                category_id=cat_id,
                bbox=box,
                is_pseudo=bool(rec.get("is_pseudo", False)),
                orig_category_id=None if orig is None else int(orig),
            )
        )
    if dropped:
        log.warning("dropped %d annotation(s) with no area inside their image", dropped)
    ds = Dataset(images, annotations, categories, dropped=dropped)
    ds.validate()
    return ds


def _decode(text: str, path: Path | str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetError(f"{path}: parse error at byte {offset}: {exc.msg}", offset=offset) from None


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_dataset(_decode(text, path))


def dataset_to_doc(ds: Dataset) -> dict[str, Any]:
    images = []
    for im in ds.images:
        rec: dict[str, Any] = {
            "id": im.id,
            "width": im.width,
            "height": im.height,
            "file_name": im.file_name,
            "modality": im.modality.value,
            "source": im.source.value,
        }
        if im.parent_id is not None:
            rec["parent_id"] = im.parent_id
        images.append(rec)
    annotations = []
    for a in ds.annotations:
        x, y, w, h = a.bbox.to_xywh()
        rec = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": [x, y, w, h],
            "area": w * h,
            "iscrowd": 0,
        }
        if a.is_pseudo:
            rec["is_pseudo"] = True
        if a.orig_category_id is not None:
            rec["orig_category_id"] = a.orig_category_id
        annotations.append(rec)
    categories = []
    for c in ds.categories:
        rec = {"id": c.id, "name": c.name}
        if c.split is not None:
            rec["split"] = c.split.value
        categories.append(rec)
    return {"images": images, "annotations": annotations, "categories": categories}


def dump_json(doc: Any) -> str:
    """Canonical document text: insertion key order, 2-space indent, trailing newline."""
    return json.dumps(doc, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dump_json(dataset_to_doc(ds)), encoding="utf-8")


# -- class split ---------------------------------------------------------


def resolve_class_split(doc: Mapping[str, Any], categories: Iterable[Category]) -> ClassSplit:
    """Turn a split document (names or ids under ``common``/``novel``) into a ``ClassSplit``."""
    by_name = {c.name: c.id for c in categories}

    def ids(key: str) -> list[int]:
        out = []
        for item in doc.get(key, []):
            if isinstance(item, str) and not item.lstrip("-").isdigit():
                if item not in by_name:
                    raise DatasetError(f"split lists unknown category name {item!r}")
                out.append(by_name[item])
            else:
                out.append(int(item))
        return out

    common, novel = ids("common"), ids("novel")
    dups = sorted({i for i in common if common.count(i) > 1} | {i for i in novel if novel.count(i) > 1})
    if dups:
        raise DatasetError(f"split lists categories more than once: {dups}", ids=dups)
    if "agnostic_id" not in doc:
        raise DatasetError("split document missing 'agnostic_id'")
    return ClassSplit(frozenset(common), frozenset(novel), int(doc["agnostic_id"]))


def load_class_split(path: str | Path, categories: Iterable[Category]) -> ClassSplit:
    path = Path(path)
    return resolve_class_split(_decode(path.read_text(encoding="utf-8"), path), categories)


def split_to_doc(split: ClassSplit) -> dict[str, Any]:
    return {
        "common": sorted(split.common_ids),
        "novel": sorted(split.novel_ids),
        "agnostic_id": split.agnostic_id,
    }


def apply_class_split(ds: Dataset, split: ClassSplit) -> Dataset:
    """Mark every category common or novel. The agnostic category, if present, is left unmarked."""
    cats = [c for c in ds.categories if c.id != split.agnostic_id]
    uncovered = sorted(c.id for c in cats if c.id not in split.common_ids | split.novel_ids)
    doubled = sorted(split.common_ids & split.novel_ids)
    if uncovered or doubled:
        raise DatasetError(
            f"class split must cover each category exactly once; "
            f"uncovered={uncovered} doubly-covered={doubled}",
            ids=uncovered + doubled,
        )
    new = []
    for c in ds.categories:
        if c.id == split.agnostic_id:
            new.append(c)
        else:
            new.append(replace(c, split=Split.COMMON if c.id in split.common_ids else Split.NOVEL))
    return replace(ds, categories=tuple(new))


def agnostic_category(split: ClassSplit) -> Category:
    return Category(split.agnostic_id, "object")


def remap_agnostic(ds: Dataset, split: ClassSplit, mode: str = "all") -> Dataset:
    """Collapse categories onto ``split.agnostic_id``.

    ``mode="all"`` remaps every annotation, ``mode="novel_only"`` only the
    novel-class ones. The pre-remap category survives in ``orig_category_id``.
    """
    if mode not in ("all", "novel_only"):
        raise ValueError(f"unknown remap mode {mode!r}")
    changed = False
    anns = []
    for a in ds.annotations:
        src = a.source_category_id
        if a.category_id != split.agnostic_id and (mode == "all" or src in split.novel_ids):
            anns.append(replace(a, category_id=split.agnostic_id, orig_category_id=src))
            changed = True
        else:
            anns.append(a)
    if not changed:
        return ds
    cats = ds.categories
    if all(c.id != split.agnostic_id for c in cats):
        cats = cats + (agnostic_category(split),)
    return replace(ds, annotations=tuple(anns), categories=cats)
