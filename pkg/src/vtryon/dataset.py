"""Data model, on-disk layout adapter, synthetic generator and input builders.

On-disk layout (one subtree per garment category)::

    root/
      palette.json                      class names + RGB palette of the parse maps
      <category>/
        train_pairs.txt                 "<id>_0.png <id>_1.png" per line
        test_pairs_paired.txt
        images/<id>_0.png               model image
        images/<id>_1.png               in-shop garment image
        keypoints/<id>_2.json           {"keypoints": [[x, y, conf], ...18], "image_size": [H, W]}
        label_maps/<id>_4.png           palette-indexed parse map, values in [0, 17]
        dense/<id>_5.png                dense-pose part labels, values in [0, 24]
        dense/<id>_5_uv.npy             float32 H x W x 2 UV coordinates

Real Dress Code roots use the same tree (with .jpg images); any image
extension is accepted.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

NUM_CLASSES = 18
NUM_KEYPOINTS = 18
NUM_DENSE_LABELS = 25
HEATMAP_HALF = 5  # 11 x 11 block per keypoint
MISSING_CONFIDENCE = 0.1
MASK_FILL = 0.5
VALID_RESOLUTIONS = ((256, 192), (512, 384), (1024, 768))

CLASS_NAMES = (
    "background", "hair", "face", "neck", "left_arm", "right_arm",
    "left_leg", "right_leg", "torso_skin", "dress", "top", "skirt",
    "trousers", "left_shoe", "right_shoe", "left_hand", "right_hand",
    "accessory",
)
PALETTE = (
    (0, 0, 0), (128, 0, 0), (255, 85, 0), (85, 51, 0), (0, 128, 0),
    (128, 128, 0), (0, 0, 128), (128, 0, 128), (0, 128, 128),
    (128, 128, 128), (255, 0, 0), (0, 255, 0), (0, 0, 255),
    (255, 255, 0), (0, 255, 255), (255, 0, 255), (85, 255, 170),
    (170, 255, 85),
)
CLASS = {name: i for i, name in enumerate(CLASS_NAMES)}

# OpenPose COCO-18 ordering
KP = dict(nose=0, neck=1, r_shoulder=2, r_elbow=3, r_wrist=4, l_shoulder=5,
          l_elbow=6, l_wrist=7, r_hip=8, r_knee=9, r_ankle=10, l_hip=11,
          l_knee=12, l_ankle=13, r_eye=14, l_eye=15, r_ear=16, l_ear=17)


class GarmentCategory(str, enum.Enum):
    UPPER_BODY = "upper_body"
    LOWER_BODY = "lower_body"
    DRESSES = "dresses"


CATEGORIES = tuple(GarmentCategory)

GARMENT_CLASSES = {
    GarmentCategory.UPPER_BODY: (CLASS["top"],),
    GarmentCategory.LOWER_BODY: (CLASS["skirt"], CLASS["trousers"]),
    GarmentCategory.DRESSES: (CLASS["dress"], CLASS["top"], CLASS["skirt"], CLASS["trousers"]),
}
NON_MODIFIABLE_CLASSES = tuple(CLASS[n] for n in (
    "hair", "face", "left_hand", "right_hand", "left_shoe", "right_shoe", "accessory"))

_ARM_SEGMENTS = ((2, 3), (3, 4), (5, 6), (6, 7), (1, 2), (1, 5))
_LEG_SEGMENTS = ((8, 9), (9, 10), (11, 12), (12, 13), (8, 11))
LIMB_SEGMENTS = {
    GarmentCategory.UPPER_BODY: _ARM_SEGMENTS + ((2, 8), (5, 11), (8, 11)),
    GarmentCategory.LOWER_BODY: _LEG_SEGMENTS,
    GarmentCategory.DRESSES: _ARM_SEGMENTS + ((2, 8), (5, 11)) + _LEG_SEGMENTS,
}
TORSO_POLYGON = (2, 5, 11, 8)

# Dress Code split sizes
DRESS_CODE_TRAIN = {GarmentCategory.UPPER_BODY: 13563, GarmentCategory.LOWER_BODY: 7151,
                    GarmentCategory.DRESSES: 27678}
DRESS_CODE_TEST = {c: 1800 for c in CATEGORIES}


class DatasetError(Exception):
    pass


class MissingAnnotationError(DatasetError):
    def __init__(self, item_id: str, path: Path):
        super().__init__(f"item {item_id}: missing annotation file {path}")
        self.item_id = item_id
        self.path = path


class ParseValueError(DatasetError):
    pass


@dataclass
class SampleRecord:
    model_image: np.ndarray      # H x W x 3, float32 in [0, 1]
    garment_image: np.ndarray    # H x W x 3, float32 in [0, 1]
    keypoints: np.ndarray        # 18 x 3 (x px, y px, confidence)
    densepose_labels: np.ndarray  # H x W, int in [0, 24]
    densepose_uv: np.ndarray     # H x W x 2, float32 in [0, 1]
    parse: np.ndarray            # H x W, int in [0, 17]
    category: GarmentCategory
    item_id: str

    @property
    def size(self) -> tuple[int, int]:
        return self.parse.shape[0], self.parse.shape[1]

    def validate(self, check_aspect: bool = True) -> None:
        h, w = self.size
        for name in ("model_image", "garment_image", "densepose_labels", "densepose_uv"):
            arr = getattr(self, name)
            if arr.shape[:2] != (h, w):
                raise DatasetError(f"{self.item_id}: {name} has shape {arr.shape[:2]}, expected {(h, w)}")
        if check_aspect and h * 3 != w * 4:
            raise DatasetError(f"{self.item_id}: aspect ratio {h}x{w} is not 4:3")
        if self.parse.min() < 0 or self.parse.max() >= NUM_CLASSES:
            raise ParseValueError(f"{self.item_id}: parse values outside [0, {NUM_CLASSES - 1}]")
        if self.keypoints.shape != (NUM_KEYPOINTS, 3):
            raise DatasetError(f"{self.item_id}: keypoints shape {self.keypoints.shape}")
        present = keypoint_present(self.keypoints)
        xy = self.keypoints[present, :2]
        if np.any(xy < 0) or np.any(xy[:, 0] > w - 1) or np.any(xy[:, 1] > h - 1):
            raise DatasetError(f"{self.item_id}: keypoint outside image bounds")


@dataclass
class AgnosticPerson:
    image: np.ndarray  # masked model image m
    parse: np.ndarray  # masked parse h (masked pixels -> background)
    mask: np.ndarray   # bool


@dataclass
class SplitSpec:
    train_ids: dict[GarmentCategory, list[str]] = field(default_factory=dict)
    test_ids: dict[GarmentCategory, list[str]] = field(default_factory=dict)

    def counts(self, split: str) -> dict[GarmentCategory, int]:
        ids = self.train_ids if split == "train" else self.test_ids
        return {c: len(ids.get(c, ())) for c in CATEGORIES}

    def total(self, split: str) -> int:
        return sum(self.counts(split).values())

    def matches_dress_code(self) -> bool:
        return self.counts("train") == DRESS_CODE_TRAIN and self.counts("test") == DRESS_CODE_TEST


def keypoint_present(keypoints: np.ndarray) -> np.ndarray:
    kp = np.asarray(keypoints)
    return (kp[:, 2] >= MISSING_CONFIDENCE) & (kp[:, 0] >= 0) & (kp[:, 1] >= 0)


# --------------------------------------------------------------------------
# representation builders


def pose_heatmap(keypoints: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """18-channel binary pose map: one 11x11 block of ones per present keypoint."""
    h, w = size
    out = np.zeros((NUM_KEYPOINTS, h, w), dtype=np.float32)
    present = keypoint_present(keypoints)
    for k in range(NUM_KEYPOINTS):
        if not present[k]:
            continue
        x, y = int(round(float(keypoints[k, 0]))), int(round(float(keypoints[k, 1])))
        y0, y1 = max(0, y - HEATMAP_HALF), min(h, y + HEATMAP_HALF + 1)
        x0, x1 = max(0, x - HEATMAP_HALF), min(w, x + HEATMAP_HALF + 1)
        out[k, y0:y1, x0:x1] = 1.0
    return out


def densepose_tensor(labels: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Stack 25 one-hot part planes with the 2 UV planes -> 27 x H x W."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= NUM_DENSE_LABELS:
        raise ValueError(f"dense-pose labels must lie in [0, {NUM_DENSE_LABELS - 1}]")
    onehot = (labels[None] == np.arange(NUM_DENSE_LABELS)[:, None, None]).astype(np.float32)
    uv = np.asarray(uv, dtype=np.float32).transpose(2, 0, 1)
    return np.concatenate([onehot, uv], axis=0)


def pose_representation(record: SampleRecord, pose_mode: str = "keypoints") -> np.ndarray:
    if pose_mode == "keypoints":
        return pose_heatmap(record.keypoints, record.size)
    if pose_mode == "densepose":
        return densepose_tensor(record.densepose_labels, record.densepose_uv)
    raise ValueError(f"unknown pose_mode {pose_mode!r}")


def pose_channels(pose_mode: str) -> int:
    return {"keypoints": NUM_KEYPOINTS, "densepose": NUM_DENSE_LABELS + 2}[pose_mode]


def default_dilation_radius(height: int) -> int:
    return max(1, int(round(5 * height / 256)))


def garment_region(parse: np.ndarray, category: GarmentCategory) -> np.ndarray:
    return np.isin(parse, GARMENT_CLASSES[GarmentCategory(category)])


def _segment_mask(shape, p0, p1, radius: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.asarray(p1, float) - np.asarray(p0, float)
    denom = float(d @ d)
    if denom == 0:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / denom, 0.0, 1.0)
    dx = xx - (p0[0] + t * d[0])
    dy = yy - (p0[1] + t * d[1])
    return dx * dx + dy * dy <= radius * radius


def _polygon_mask(shape, points: np.ndarray) -> np.ndarray:
    """Even-odd rule fill, sampling at pixel centres."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return points_in_polygon(xx, yy, points)


def points_in_polygon(x: np.ndarray, y: np.ndarray, poly: np.ndarray) -> np.ndarray:
    poly = np.asarray(poly, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > y) != (y1 > y)
        xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xi)
    return inside


def limb_region(keypoints: np.ndarray, category: GarmentCategory, size: tuple[int, int],
                thickness: float | None = None) -> np.ndarray:
    """Area of the limbs a garment of `category` covers, drawn from the pose."""
    category = GarmentCategory(category)
    h, w = size
    radius = thickness if thickness is not None else max(1.0, 0.03 * h)
    present = keypoint_present(keypoints)
    mask = np.zeros((h, w), dtype=bool)
    for a, b in LIMB_SEGMENTS[category]:
        if present[a] and present[b]:
            mask |= _segment_mask((h, w), keypoints[a, :2], keypoints[b, :2], radius)
    if category != GarmentCategory.LOWER_BODY and all(present[list(TORSO_POLYGON)]):
        mask |= _polygon_mask((h, w), keypoints[list(TORSO_POLYGON), :2])
    return mask


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure)


def build_agnostic(record: SampleRecord, category: GarmentCategory | None = None,
                   radius: int | None = None) -> AgnosticPerson:
    category = GarmentCategory(category or record.category)
    if radius is None:
        radius = default_dilation_radius(record.size[0])
    region = garment_region(record.parse, category) | limb_region(record.keypoints, category, record.size)
    mask = dilate(region, radius) & ~np.isin(record.parse, NON_MODIFIABLE_CLASSES)
    image = record.model_image.copy()
    image[mask] = MASK_FILL
    parse = record.parse.copy()
    parse[mask] = CLASS["background"]
    return AgnosticPerson(image=image, parse=parse, mask=mask)


def crop_garment(record: SampleRecord, category: GarmentCategory | None = None) -> np.ndarray:
    """Garment as worn in the model image, zero elsewhere (warp target)."""
    region = garment_region(record.parse, GarmentCategory(category or record.category))
    return record.model_image * region[..., None]


def unpair(test_ids: dict[GarmentCategory, Sequence[str]]) -> list[tuple[str, str]]:
    """Shift-by-one garment reassignment within each category."""
    pairs = []
    for category in CATEGORIES:
        ids = list(test_ids.get(category, ()))
        n = len(ids)
        pairs.extend((ids[i], ids[(i + 1) % n]) for i in range(n))
    return pairs


def class_pixel_counts(parses: Iterable[np.ndarray]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for parse in parses:
        counts += np.bincount(np.asarray(parse).ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return counts


def class_weights(parses: Iterable[np.ndarray]) -> np.ndarray:
    """Inverse pixel frequency, w_k = total / (18 * count_k); absent classes get 0."""
    counts = class_pixel_counts(parses)
    total = counts.sum()
    if total == 0:
        raise ValueError("class_weights needs at least one pixel")
    weights = np.zeros(NUM_CLASSES, dtype=np.float64)
    present = counts > 0
    weights[present] = total / (NUM_CLASSES * counts[present])
    return weights


# --------------------------------------------------------------------------
# layout adapter


def _find_image(directory: Path, stem: str) -> Path | None:
    for ext in (".png", ".jpg", ".jpeg"):
        path = directory / f"{stem}{ext}"
        if path.exists():
            return path
    return None


def _item_id(name: str) -> str:
    return Path(name).stem.rsplit("_", 1)[0]


def _read_pairs(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2:
            pairs.append((_item_id(parts[0]), _item_id(parts[1])))
    return pairs


_SPLIT_FILES = {"train": ("train_pairs.txt",), "test": ("test_pairs_paired.txt", "test_pairs.txt")}


def category_pairs(root: Path, category: GarmentCategory, split: str | None) -> list[tuple[str, str]]:
    cat_dir = Path(root) / category.value
    splits = ("train", "test") if split is None else (split,)
    pairs: list[tuple[str, str]] = []
    found = False
    for s in splits:
        for fname in _SPLIT_FILES[s]:
            path = cat_dir / fname
            if path.exists():
                pairs.extend(_read_pairs(path))
                found = True
                break
    if not found and split is None and (cat_dir / "images").is_dir():
        ids = sorted(_item_id(p.name) for p in (cat_dir / "images").glob("*_0.*"))
        pairs = [(i, i) for i in ids]
    return pairs


def read_split(root: str | Path) -> SplitSpec:
    """Split accounting from the pairs files alone (no image reads)."""
    root = Path(root)
    spec = SplitSpec()
    for category in CATEGORIES:
        if not (root / category.value).is_dir():
            continue
        spec.train_ids[category] = [m for m, _ in category_pairs(root, category, "train")]
        spec.test_ids[category] = [m for m, _ in category_pairs(root, category, "test")]
    return spec


def _load_rgb(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_labels(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        img = img.convert("L")
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(img, dtype=np.int64)


def _resize_uv(uv: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if uv.shape[:2] == tuple(size):
        return uv.astype(np.float32)
    chans = [np.asarray(Image.fromarray(uv[..., i].astype(np.float32), mode="F")
                        .resize((size[1], size[0]), Image.NEAREST)) for i in range(2)]
    return np.stack(chans, axis=-1).astype(np.float32)


def load_record(root: str | Path, category: GarmentCategory, item_id: str,
                garment_id: str | None = None, resolution: tuple[int, int] | None = None) -> SampleRecord:
    cat_dir = Path(root) / GarmentCategory(category).value
    garment_id = garment_id or item_id

    def need(path: Path | None, expected: Path) -> Path:
        if path is None or not path.exists():
            raise MissingAnnotationError(item_id, expected)
        return path

    model_path = need(_find_image(cat_dir / "images", f"{item_id}_0"), cat_dir / "images" / f"{item_id}_0.*")
    garment_path = need(_find_image(cat_dir / "images", f"{garment_id}_1"),
                        cat_dir / "images" / f"{garment_id}_1.*")
    kp_path = need(cat_dir / "keypoints" / f"{item_id}_2.json", cat_dir / "keypoints" / f"{item_id}_2.json")
    parse_path = need(cat_dir / "label_maps" / f"{item_id}_4.png", cat_dir / "label_maps" / f"{item_id}_4.png")
    dense_path = need(cat_dir / "dense" / f"{item_id}_5.png", cat_dir / "dense" / f"{item_id}_5.png")
    uv_path = need(cat_dir / "dense" / f"{item_id}_5_uv.npy", cat_dir / "dense" / f"{item_id}_5_uv.npy")

    native = Image.open(model_path).size[::-1]
    size = tuple(resolution) if resolution is not None else native
    model_image = _load_rgb(model_path, size)
    garment_image = _load_rgb(garment_path, size)
    parse = _load_labels(parse_path, size)
    if parse.max(initial=0) >= NUM_CLASSES:
        raise ParseValueError(f"item {item_id}: parse value {parse.max()} >= {NUM_CLASSES}")
    dense = _load_labels(dense_path, size)
    uv = _resize_uv(np.load(uv_path), size)

    meta = json.loads(kp_path.read_text())
    kp = np.zeros((NUM_KEYPOINTS, 3), dtype=np.float64)
    rows = np.asarray(meta["keypoints"], dtype=np.float64)[:NUM_KEYPOINTS, :3]
    kp[: len(rows)] = rows
    src_h, src_w = meta.get("image_size", native)
    if (src_h, src_w) != tuple(size):
        present = keypoint_present(kp)
        kp[present, 0] *= size[1] / src_w
        kp[present, 1] *= size[0] / src_h
    present = keypoint_present(kp)
    kp[present, 0] = np.clip(kp[present, 0], 0, size[1] - 1)
    kp[present, 1] = np.clip(kp[present, 1], 0, size[0] - 1)

    record = SampleRecord(model_image=model_image, garment_image=garment_image, keypoints=kp,
                          densepose_labels=dense, densepose_uv=uv, parse=parse,
                          category=GarmentCategory(category), item_id=item_id)
    record.validate()
    return record


class DressCodeDataset(Sequence):
    """Lazily-loaded index over a Dress-Code-layout root.

    With ``skip_missing`` set, records whose annotation files are missing are
    dropped from iteration and collected in ``errors`` instead of raising.
    """

    def __init__(self, root: str | Path, split: str | None = None,
                 resolution: tuple[int, int] | None = None,
                 categories: Iterable[GarmentCategory | str] | None = None,
                 skip_missing: bool = False):
        self.root = Path(root)
        self.split = split
        self.resolution = resolution
        self.skip_missing = skip_missing
        self.errors: list[MissingAnnotationError] = []
        wanted = CATEGORIES if categories is None else tuple(GarmentCategory(c) for c in categories)
        self.index: list[tuple[GarmentCategory, str, str]] = []
        if self.root.is_dir():
            for category in wanted:
                if (self.root / category.value).is_dir():
                    for model_id, garment_id in category_pairs(self.root, category, split):
                        self.index.append((category, model_id, garment_id))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> SampleRecord:
        category, model_id, garment_id = self.index[i]
        return load_record(self.root, category, model_id, garment_id, self.resolution)

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            try:
                yield self[i]
            except MissingAnnotationError as err:
                if not self.skip_missing:
                    raise
                log.warning("skipping %s", err)
                self.errors.append(err)


def load_dataset(root: str | Path, resolution: tuple[int, int] | None = None,
                 category_filter: Iterable[GarmentCategory | str] | None = None,
                 split: str | None = None, skip_missing: bool = False) -> Iterator[SampleRecord]:
    return iter(DressCodeDataset(root, split=split, resolution=resolution,
                                 categories=category_filter, skip_missing=skip_missing))


# --------------------------------------------------------------------------
# writers


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_parse(path: Path, parse: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(parse, dtype=np.uint8), mode="P")
    img.putpalette([v for rgb in PALETTE for v in rgb])
    img.save(path)


def write_palette(root: Path) -> None:
    manifest = {"classes": [{"index": i, "name": n, "rgb": list(PALETTE[i])}
                            for i, n in enumerate(CLASS_NAMES)]}
    (root / "palette.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def write_record(root: str | Path, record: SampleRecord) -> None:
    cat_dir = Path(root) / record.category.value
    for sub in ("images", "keypoints", "label_maps", "dense"):
        (cat_dir / sub).mkdir(parents=True, exist_ok=True)
    i = record.item_id
    Image.fromarray(_to_uint8(record.model_image)).save(cat_dir / "images" / f"{i}_0.png")
    Image.fromarray(_to_uint8(record.garment_image)).save(cat_dir / "images" / f"{i}_1.png")
    h, w = record.size
    kp = {"image_size": [h, w], "keypoints": [[float(v) for v in row] for row in record.keypoints]}
    (cat_dir / "keypoints" / f"{i}_2.json").write_text(json.dumps(kp, sort_keys=True))
    save_parse(cat_dir / "label_maps" / f"{i}_4.png", record.parse)
    Image.fromarray(np.asarray(record.densepose_labels, dtype=np.uint8), mode="L").save(
        cat_dir / "dense" / f"{i}_5.png")
    np.save(cat_dir / "dense" / f"{i}_5_uv.npy", np.asarray(record.densepose_uv, dtype=np.float32))


def write_pairs(root: str | Path, category: GarmentCategory, split: str, ids: Sequence[str]) -> None:
    fname = {"train": "train_pairs.txt", "test": "test_pairs_paired.txt"}[split]
    path = Path(root) / GarmentCategory(category).value / fname
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}_0.png {i}_1.png\n" for i in ids))
