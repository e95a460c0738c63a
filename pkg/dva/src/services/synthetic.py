"""
Synthetic fine-grained dataset.

Every class is the same object template (body ellipse, head disc, wing
stripe) with small class-specific deltas in stripe width, stripe colour and
head hue, scaled by ``subtlety``. Objects are placed at a random pose and
scale over one of four background texture families; the family follows the
class group with probability ``background_correlation``.
"""

import logging
import os
from typing import List, NamedTuple, Tuple

import numpy as np

from dva.src.models.exceptions import ContractError
from dva.src.models.schemas import BBox, Detection, GenConfig, ManifestRecord, Role, Split
from dva.src.utils import imaging
from dva.src.utils.manifest import write_detections, write_manifest
from dva.src.utils.seeding import make_rng

# Initialize logger
logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.csv"
DETECTIONS_FILE = "detections.jsonl"
IMAGES_DIR = "images"
BACKGROUND_FAMILIES = ("gradient", "stripes", "checker", "blobs")
MAX_PLACEMENT_TRIES = 50

# Template geometry in object units (x to the right, y down, head on the +x side)
BODY_AXES = (0.5, 0.3)
HEAD_CENTER = (0.45, -0.2)
HEAD_RADIUS = 0.18
EXTENT_X = (-BODY_AXES[0], HEAD_CENTER[0] + HEAD_RADIUS)
EXTENT_Y = (HEAD_CENTER[1] - HEAD_RADIUS, BODY_AXES[1])

BODY_COLOR = np.array([0.55, 0.45, 0.30])
HEAD_COLOR = np.array([0.70, 0.35, 0.25])
STRIPE_COLOR = np.array([0.20, 0.20, 0.25])


class ClassTemplate(NamedTuple):
    stripe_width: float
    stripe_offset: float
    stripe_color: np.ndarray
    head_color: np.ndarray
    body_color: np.ndarray


class Placement(NamedTuple):
    cx: float
    cy: float
    scale: float
    mirror: bool


def class_templates(cfg: GenConfig) -> List[ClassTemplate]:
    """Per-class template deltas; the draws do not depend on ``subtlety``"""
    rng = make_rng(cfg.seed, "synthetic")
    templates = []
    for _ in range(cfg.n_classes):
        width_u, offset_u = rng.uniform(-1.0, 1.0, size=2)
        stripe_dir = rng.uniform(-1.0, 1.0, size=3)
        head_dir = rng.uniform(-1.0, 1.0, size=3)
        body_dir = rng.uniform(-1.0, 1.0, size=3)
        s = cfg.subtlety
        templates.append(ClassTemplate(
            stripe_width=0.12 + s * 0.06 * width_u,
            stripe_offset=s * 0.1 * offset_u,
            stripe_color=np.clip(STRIPE_COLOR + s * 0.3 * stripe_dir, 0.0, 1.0),
            head_color=np.clip(HEAD_COLOR + s * 0.3 * head_dir, 0.0, 1.0),
            body_color=np.clip(BODY_COLOR + s * 0.05 * body_dir, 0.0, 1.0),
        ))
    return templates


def object_layers(size: int, place: Placement, template: ClassTemplate) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(mask, colour) layers in paint order: body, stripe, head"""
    y, x = np.ogrid[:size, :size]
    u = (x + 0.5 - place.cx) / place.scale
    v = (y + 0.5 - place.cy) / place.scale
    if place.mirror:
        u = -u
    a, b = BODY_AXES
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    stripe = body & (np.abs(v - template.stripe_offset) <= template.stripe_width / 2)
    head = (u - HEAD_CENTER[0]) ** 2 + (v - HEAD_CENTER[1]) ** 2 <= HEAD_RADIUS ** 2
    return [(body, template.body_color), (stripe, template.stripe_color), (head, template.head_color)]


def tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ContractError("object mask is empty")
    return BBox(x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()) + 1, y1=int(ys.max()) + 1)


def render_background(rng: np.random.Generator, family: int, size: int) -> np.ndarray:
    y, x = np.mgrid[:size, :size].astype(np.float64) / size
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    name = BACKGROUND_FAMILIES[family]
    if name == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        t = np.clip(0.5 + (np.cos(angle) * (x - 0.5) + np.sin(angle) * (y - 0.5)), 0.0, 1.0)
    elif name == "stripes":
        freq, phase = rng.uniform(3, 8), rng.uniform(0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * x + phase)
    elif name == "checker":
        cells = int(rng.integers(3, 9))
        t = ((np.floor(x * cells) + np.floor(y * cells)) % 2).astype(np.float64)
    else:
        t = np.zeros((size, size))
        for _ in range(int(rng.integers(3, 7))):
            bx, by, sigma = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
            t = np.maximum(t, np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * sigma ** 2)))
    return c0 + t[..., None] * (c1 - c0)


def _place(rng: np.random.Generator, cfg: GenConfig) -> Placement:
    size = cfg.image_size
    unit_area = (EXTENT_X[1] - EXTENT_X[0]) * (EXTENT_Y[1] - EXTENT_Y[0])
    fraction = rng.uniform(*cfg.fg_area_range)
    scale = np.sqrt(fraction * size * size / unit_area)
    mirror = bool(rng.random() < 0.5)
    left, right = (-EXTENT_X[1], -EXTENT_X[0]) if mirror else EXTENT_X
    lo_x, hi_x = -left * scale + 1, size - right * scale - 1
    lo_y, hi_y = -EXTENT_Y[0] * scale + 1, size - EXTENT_Y[1] * scale - 1
    if hi_x < lo_x or hi_y < lo_y:
        raise ContractError(f"object of area fraction {fraction:.2f} does not fit a {size} px image")
    return Placement(cx=rng.uniform(lo_x, hi_x), cy=rng.uniform(lo_y, hi_y), scale=scale, mirror=mirror)


def render_sample(rng: np.random.Generator, cfg: GenConfig, template: ClassTemplate,
                  family: int) -> Tuple[np.ndarray, BBox]:
    """One image and the tight box around every object pixel"""
    size = cfg.image_size
    lo, hi = cfg.fg_area_range
    for _ in range(MAX_PLACEMENT_TRIES):
        place = _place(rng, cfg)
        layers = object_layers(size, place, template)
        mask = layers[0][0] | layers[2][0]
        box = tight_box(mask)
        if lo <= box.area / (size * size) <= hi:
            break
    else:
        raise ContractError(f"could not place an object within area range {cfg.fg_area_range}")
    image = render_background(rng, family, size)
    for layer_mask, color in layers:
        image[layer_mask] = color
    image += rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), box


def _family(rng: np.random.Generator, label: int, correlation: float) -> int:
    group = label % len(BACKGROUND_FAMILIES)
    if rng.random() < correlation:
        return group
    others = [f for f in range(len(BACKGROUND_FAMILIES)) if f != group]
    return int(others[int(rng.integers(0, len(others)))])


def gen_dataset(cfg: GenConfig, out_dir: str) -> Tuple[List[ManifestRecord], List[Detection]]:
    """Write images, ``manifest.csv`` and the oracle ``detections.jsonl``.

    Args:
        cfg: Generator settings
        out_dir: Destination directory

    Returns:
        (manifest records, detections) in generation order
    """
    logger.info(f"[DATA] Generating {cfg.n_classes} classes x {cfg.n_per_class} images "
                f"({cfg.image_size} px, subtlety={cfg.subtlety}, seed={cfg.seed})")
    templates = class_templates(cfg)
    rng = make_rng(cfg.seed, "synthetic", 1)
    images_dir = os.path.join(out_dir, IMAGES_DIR)
    os.makedirs(images_dir, exist_ok=True)

    records: List[ManifestRecord] = []
    detections: List[Detection] = []
    n_train = cfg.n_per_class // 2
    for label, template in enumerate(templates):
        for i in range(cfg.n_per_class):
            image_id = f"c{label:03d}_{i:04d}"
            family = _family(rng, label, cfg.background_correlation)
            image, box = render_sample(rng, cfg, template, family)
            path = imaging.write_ppm(os.path.join(images_dir, f"{image_id}.ppm"), image)
            records.append(ManifestRecord(
                image_path=os.path.abspath(path),
                label_id=label,
                split=Split.TRAIN if i < n_train else Split.TEST,
                role=Role.ORIG,
                image_id=image_id,
            ))
            detections.append(Detection(image_id=image_id, bbox=box, confidence=1.0))
        logger.debug(f"  class {label}: {cfg.n_per_class} images")

    write_manifest(os.path.join(out_dir, MANIFEST_FILE), records)
    write_detections(os.path.join(out_dir, DETECTIONS_FILE), detections)
    logger.info(f"  [OK] {len(records)} images, {len(detections)} detections -> {out_dir}")
    return records, detections
