"""Procedural stand-in for Dress Code: articulated figures wearing textured garments.

Each figure is drawn from sampled keypoints with a painter's algorithm that
writes colour and parse label together, so the parse map is exact. The target
garment is a textured polygon defined in the garment image's own normalised
frame; on the model it is rendered through an affine map fixed by the body
keypoints. A 5x5 TPS can express that map exactly, so the warp module has a
reachable optimum.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import (CATEGORIES, CLASS, KP, NUM_KEYPOINTS, GarmentCategory, SampleRecord,
                      points_in_polygon, write_palette, write_pairs, write_record)

# garment outlines in normalised [-1, 1] coordinates (y down)
SHAPES = {
    "top": np.array([(-0.2, -0.75), (0.2, -0.75), (0.5, -0.65), (0.85, -0.3), (0.65, -0.1),
                     (0.5, -0.25), (0.5, 0.75), (-0.5, 0.75), (-0.5, -0.25), (-0.65, -0.1),
                     (-0.85, -0.3), (-0.5, -0.65)]),
    "trousers": np.array([(-0.45, -0.85), (0.45, -0.85), (0.5, 0.9), (0.1, 0.9), (0.0, -0.3),
                          (-0.1, 0.9), (-0.5, 0.9)]),
    "skirt": np.array([(-0.4, -0.8), (0.4, -0.8), (0.65, 0.8), (-0.65, 0.8)]),
    "dress": np.array([(-0.2, -0.85), (0.2, -0.85), (0.4, -0.75), (0.4, -0.2), (0.75, 0.85),
                       (-0.75, 0.85), (-0.4, -0.2), (-0.4, -0.75)]),
}
# canonical anchor points matched to body landmarks by `_placement`
ANCHORS = {
    "top": np.array([(-0.5, -0.65), (0.5, -0.65), (0.0, 0.75)]),
    "trousers": np.array([(-0.45, -0.85), (0.45, -0.85), (0.0, 0.9)]),
    "skirt": np.array([(-0.4, -0.8), (0.4, -0.8), (0.0, 0.8)]),
    "dress": np.array([(-0.4, -0.75), (0.4, -0.75), (0.0, 0.85)]),
}

# dense-pose part indices used for the synthetic body
_DENSE = {"torso": 2, "r_hand": 3, "l_hand": 4, "l_foot": 5, "r_foot": 6, "r_thigh": 7,
          "l_thigh": 8, "r_shin": 11, "l_shin": 12, "l_upper_arm": 15, "r_upper_arm": 16,
          "l_forearm": 19, "r_forearm": 20, "head": 23}


def affine_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """2x3 matrix A with A @ [x, y, 1] = dst for the three src points."""
    src_h = np.hstack([src, np.ones((3, 1))])
    return np.linalg.solve(src_h, dst).T


def _norm_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return 2 * xs / (w - 1) - 1, 2 * ys / (h - 1) - 1


def to_norm(points_px: np.ndarray, h: int, w: int) -> np.ndarray:
    p = np.asarray(points_px, dtype=np.float64)
    return np.stack([2 * p[:, 0] / (w - 1) - 1, 2 * p[:, 1] / (h - 1) - 1], axis=1)


class _Canvas:
    def __init__(self, h: int, w: int, background: np.ndarray):
        self.h, self.w = h, w
        self.image = np.broadcast_to(background, (h, w, 3)).astype(np.float64).copy()
        self.parse = np.zeros((h, w), dtype=np.int64)
        self.dense = np.zeros((h, w), dtype=np.int64)
        self.yy, self.xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def paint(self, mask, color, label, dense=None):
        self.image[mask] = color if np.ndim(color) == 1 else color[mask]
        self.parse[mask] = label
        if dense is not None:
            self.dense[mask] = dense

    def disc(self, center, radius):
        return (self.xx - center[0]) ** 2 + (self.yy - center[1]) ** 2 <= radius ** 2

    def segment(self, p0, p1, radius):
        d = np.asarray(p1, float) - np.asarray(p0, float)
        t = np.clip(((self.xx - p0[0]) * d[0] + (self.yy - p0[1]) * d[1]) / max(d @ d, 1e-12), 0, 1)
        return (self.xx - p0[0] - t * d[0]) ** 2 + (self.yy - p0[1] - t * d[1]) ** 2 <= radius ** 2

    def polygon(self, points):
        return points_in_polygon(self.xx, self.yy, np.asarray(points))


def _sample_keypoints(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    s = rng.uniform(0.85, 1.0)
    u = h * s
    cx = w / 2 + rng.normal(0, 0.03 * w)
    top = rng.uniform(0.02, 0.05) * h
    head_y = top + 0.085 * u
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[:, 2] = 1.0

    def put(name, x, y):
        kp[KP[name], :2] = (x, y)

    put("nose", cx, head_y + 0.01 * u)
    put("r_eye", cx - 0.02 * u, head_y - 0.01 * u)
    put("l_eye", cx + 0.02 * u, head_y - 0.01 * u)
    put("r_ear", cx - 0.05 * u, head_y)
    put("l_ear", cx + 0.05 * u, head_y)
    neck_y = head_y + 0.09 * u
    put("neck", cx, neck_y)
    sw = 0.11 * u * rng.uniform(0.9, 1.1)
    sh_y = neck_y + 0.02 * u
    put("r_shoulder", cx - sw, sh_y)
    put("l_shoulder", cx + sw, sh_y)
    for side, sign in (("r", -1.0), ("l", 1.0)):
        a = np.deg2rad(rng.uniform(10, 30))
        b = a + np.deg2rad(rng.uniform(-5, 15))
        sx, sy = kp[KP[f"{side}_shoulder"], :2]
        ex, ey = sx + sign * 0.15 * u * np.sin(a), sy + 0.15 * u * np.cos(a)
        put(f"{side}_elbow", ex, ey)
        put(f"{side}_wrist", ex + sign * 0.13 * u * np.sin(b), ey + 0.13 * u * np.cos(b))
    hw = 0.065 * u
    hip_y = neck_y + 0.30 * u
    spread = np.deg2rad(rng.uniform(0, 8))
    for side, sign in (("r", -1.0), ("l", 1.0)):
        hx = cx + sign * hw
        put(f"{side}_hip", hx, hip_y)
        kx, ky = hx + sign * 0.2 * u * np.sin(spread), hip_y + 0.2 * u * np.cos(spread)
        put(f"{side}_knee", kx, ky)
        put(f"{side}_ankle", kx + sign * 0.19 * u * np.sin(spread), ky + 0.19 * u * np.cos(spread))
    kp[:, 0] = np.clip(kp[:, 0], 0, w - 1)
    kp[:, 1] = np.clip(kp[:, 1], 0, h - 1)
    if rng.random() < 0.3:
        kp[KP["r_ear"]] = 0.0
    return kp


def _placement(kind: str, kp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Affine map image-normalised -> garment-normalised (the exact warp grid)."""
    p = lambda name: kp[KP[name], :2]
    pad = 0.03 * h
    if kind == "top":
        hips = (p("r_hip") + p("l_hip")) / 2
        dst = [p("r_shoulder") + (-pad, 0), p("l_shoulder") + (pad, 0), hips + (0, 0.04 * h)]
    elif kind == "dress":
        knees = (p("r_knee") + p("l_knee")) / 2
        dst = [p("r_shoulder") + (-pad / 2, 0), p("l_shoulder") + (pad / 2, 0), knees + (0, 0.02 * h)]
    elif kind == "trousers":
        ankles = (p("r_ankle") + p("l_ankle")) / 2
        dst = [p("r_hip") + (-pad, -0.02 * h), p("l_hip") + (pad, -0.02 * h), ankles]
    else:
        knees = (p("r_knee") + p("l_knee")) / 2
        dst = [p("r_hip") + (-pad, -0.02 * h), p("l_hip") + (pad, -0.02 * h), knees]
    dst_n = to_norm(np.asarray(dst), h, w)
    return affine_from_points(dst_n, ANCHORS[kind])


def _texture(rng: np.random.Generator):
    base = rng.uniform(0.15, 0.7, size=3)
    amp = rng.uniform(0.05, 0.12, size=3)
    freq = rng.uniform(0.6, 1.4, size=2) * rng.choice([-1, 1], size=2)
    phase = rng.uniform(0, 2 * np.pi)

    def colour(u, v):
        wave = np.sin(2 * np.pi * (freq[0] * u + freq[1] * v) + phase)
        return np.clip(base + amp * wave[..., None], 0.05, 0.8)

    return colour


def _garment_layer(kind: str, uu: np.ndarray, vv: np.ndarray, colour):
    inside = points_in_polygon(uu, vv, SHAPES[kind])
    if callable(colour):
        rgb = colour(uu, vv)
    else:
        rgb = np.broadcast_to(colour, uu.shape + (3,))
    return inside, rgb


def render_item(rng: np.random.Generator, category: GarmentCategory, h: int, w: int,
                item_id: str) -> SampleRecord:
    category = GarmentCategory(category)
    kp = _sample_keypoints(rng, h, w)
    p = lambda name: kp[KP[name], :2]
    background = rng.uniform(0.87, 0.97, size=3)
    skin = np.array([rng.uniform(0.55, 0.85), rng.uniform(0.4, 0.62), rng.uniform(0.3, 0.5)])
    hair = rng.uniform(0.05, 0.35, size=3)
    shoe = rng.uniform(0.05, 0.3, size=3)
    cv = _Canvas(h, w, background)

    head = (p("r_ear") + p("l_ear")) / 2 if kp[KP["r_ear"], 2] > 0 else p("nose") - (0, 0.01 * h)
    head_r = 0.055 * h
    arm_r, leg_r = max(1.0, 0.028 * h), max(1.0, 0.036 * h)
    cv.paint(cv.disc(head - (0, 0.015 * h), head_r * 1.15), hair, CLASS["hair"])
    torso = [p("r_shoulder"), p("l_shoulder"), p("l_hip"), p("r_hip")]
    cv.paint(cv.polygon(torso) | cv.segment(p("r_shoulder"), p("l_shoulder"), arm_r)
             | cv.segment(p("r_hip"), p("l_hip"), leg_r), skin * 0.95, CLASS["torso_skin"], _DENSE["torso"])
    cv.paint(cv.segment(p("neck"), head, arm_r * 0.9), skin * 0.9, CLASS["neck"], _DENSE["torso"])
    for side, cls in (("r", "right_leg"), ("l", "left_leg")):
        cv.paint(cv.segment(p(f"{side}_hip"), p(f"{side}_knee"), leg_r), skin, CLASS[cls], _DENSE[f"{side}_thigh"])
        cv.paint(cv.segment(p(f"{side}_knee"), p(f"{side}_ankle"), leg_r * 0.85), skin, CLASS[cls],
                 _DENSE[f"{side}_shin"])
    for side, cls in (("r", "right_arm"), ("l", "left_arm")):
        cv.paint(cv.segment(p(f"{side}_shoulder"), p(f"{side}_elbow"), arm_r), skin, CLASS[cls],
                 _DENSE[f"{side}_upper_arm"])
        cv.paint(cv.segment(p(f"{side}_elbow"), p(f"{side}_wrist"), arm_r * 0.85), skin, CLASS[cls],
                 _DENSE[f"{side}_forearm"])
    cv.paint(cv.disc(head, head_r), skin * 1.05, CLASS["face"], _DENSE["head"])
    body_dense = cv.dense.copy()

    xs, ys = _norm_grid(h, w)
    texture = _texture(rng)
    if category == GarmentCategory.UPPER_BODY:
        target, others = "top", [("trousers" if rng.random() < 0.5 else "skirt")]
    elif category == GarmentCategory.LOWER_BODY:
        target, others = ("trousers" if rng.random() < 0.5 else "skirt"), ["top"]
    else:
        target, others = "dress", []
    # non-target garments first, plain coloured; target garment on top
    for kind in others + [target]:
        A = _placement(kind, kp, h, w)
        uu = A[0, 0] * xs + A[0, 1] * ys + A[0, 2]
        vv = A[1, 0] * xs + A[1, 1] * ys + A[1, 2]
        colour = texture if kind == target else rng.uniform(0.15, 0.7, size=3)
        inside, rgb = _garment_layer(kind, uu, vv, colour)
        cv.paint(inside, rgb, CLASS[kind])
    cv.dense[:] = body_dense

    for side, cls, dense in (("r", "right_shoe", "r_foot"), ("l", "left_shoe", "l_foot")):
        cv.paint(cv.disc(p(f"{side}_ankle") + (0, 0.01 * h), 0.026 * h), shoe, CLASS[cls], _DENSE[dense])
    for side, cls, dense in (("r", "right_hand", "r_hand"), ("l", "left_hand", "l_hand")):
        cv.paint(cv.disc(p(f"{side}_wrist") + (0, 0.01 * h), 0.022 * h), skin * 1.02, CLASS[cls], _DENSE[dense])

    inside, rgb = _garment_layer(target, xs, ys, texture)
    garment = np.where(inside[..., None], rgb, 0.0)

    uv = np.zeros((h, w, 2), dtype=np.float32)
    body = cv.dense > 0
    uv[..., 0][body] = ((xs[body] + 1) / 2).astype(np.float32)
    uv[..., 1][body] = ((ys[body] + 1) / 2).astype(np.float32)

    quant = lambda img: (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
    return SampleRecord(model_image=quant(cv.image), garment_image=quant(garment), keypoints=kp,
                        densepose_labels=cv.dense, densepose_uv=uv, parse=cv.parse,
                        category=category, item_id=item_id)


def synthetic_records(n: int, resolution: tuple[int, int] = (64, 48), seed: int = 0) -> list[SampleRecord]:
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = resolution
    rng = np.random.default_rng(seed)
    records = []
    for c, category in enumerate(CATEGORIES):
        for i in range(n):
            records.append(render_item(rng, category, h, w, f"{c * n + i:06d}"))
    return records


def generate_synthetic(n: int, resolution: tuple[int, int] = (64, 48), seed: int = 0,
                       root: str | Path = "synthetic", test_fraction: float = 0.0) -> Path:
    """Write `n` items per category under `root`; the last items of each category go to test."""
    records = synthetic_records(n, resolution, seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_palette(root)
    n_test = int(round(n * test_fraction))
    for category in CATEGORIES:
        ids = [r.item_id for r in records if r.category == category]
        write_pairs(root, category, "train", ids[: n - n_test])
        write_pairs(root, category, "test", ids[n - n_test:])
    for record in records:
        write_record(root, record)
    return root


def synthetic_pairs(total: int, resolution: tuple[int, int] = (64, 48), seed: int = 0) -> list[SampleRecord]:
    """Exactly ``total`` records, spread over the categories as evenly as possible."""
    if total <= 0:
        raise ValueError(f"total must be >= 1, got {total}")
    per = -(-total // len(CATEGORIES))
    pool = synthetic_records(per, resolution, seed)
    quota = [total // len(CATEGORIES) + (c < total % len(CATEGORIES)) for c in range(len(CATEGORIES))]
    return [r for c, category in enumerate(CATEGORIES)
            for r in [r for r in pool if r.category == category][:quota[c]]]
