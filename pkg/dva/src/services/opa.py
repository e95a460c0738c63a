import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dva.src.models.exceptions import ContractError, DegenerateInputError
from dva.src.models.schemas import BBox, Detection, ManifestRecord, OpaConfig, OpaSample, Role, Split
from dva.src.utils import imaging
from dva.src.utils.manifest import write_manifest

# Initialize logger
logger = logging.getLogger(__name__)

OPA_MANIFEST = "opa_manifest.csv"
FALLBACKS_FILE = "fallbacks.json"


def _checked_box(image: np.ndarray, det: Detection) -> BBox:
    h, w = imaging.check_image(image)
    box = det.bbox
    if box.area == 0:
        raise DegenerateInputError(f"zero-area box {box.as_list()} for image {det.image_id}")
    if box.x1 > w or box.y1 > h:
        raise ContractError(f"box {box.as_list()} exceeds image {w}x{h} ({det.image_id})")
    return box


def pad_to_square(region: np.ndarray, pad_value: float) -> np.ndarray:
    """Pad the shorter side symmetrically (extra row/column goes after)"""
    h, w = imaging.check_image(region)
    if h == w:
        return region.astype(np.float32, copy=True)
    total = abs(w - h)
    before, after = total // 2, total - total // 2
    if h < w:
        pad = ((before, after), (0, 0), (0, 0))
    else:
        pad = ((0, 0), (before, after), (0, 0))
    return np.pad(region.astype(np.float32), pad, mode="constant", constant_values=pad_value)


def crop_discriminative(image: np.ndarray, det: Optional[Detection], cfg: OpaConfig,
                        image_id: Optional[str] = None) -> OpaSample:
    """Discriminative image I_d: box crop, short-side padding, resize.

    Args:
        image: H x W x 3 float image
        det: Detection for this image, or None to fall back to the full frame
        cfg: OPA settings (pad value, output size)
        image_id: Id of the source image, carried into the sample on fallback

    Returns:
        OpaSample with role ``disc``; ``fallback`` is set when no detection was given
    """
    if det is None:
        region, fallback = image, True
        image_id = image_id or ""
    else:
        box = _checked_box(image, det)
        region = image[box.y0:box.y1, box.x0:box.x1]
        image_id, fallback = det.image_id, False
    square = pad_to_square(region, cfg.pad_value)
    if cfg.output_size is not None:
        square = imaging.resize_square(square, cfg.output_size)
    return OpaSample(image_id=image_id, role=Role.DISC, image=square, fallback=fallback)


def box_filter(region: np.ndarray, kernel: int) -> np.ndarray:
    """Separable k x k mean filter confined to ``region``.

    The border mirrors the region (edge sample repeated), which keeps the
    filter doubly stochastic: the region mean is preserved.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ContractError(f"kernel must be a positive odd integer, got {kernel}")
    r = kernel // 2
    out = region.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        csum = np.cumsum(padded, axis=axis)
        csum = np.concatenate([np.zeros_like(np.take(csum, [0], axis=axis)), csum], axis=axis)
        n = out.shape[axis]
        upper = np.take(csum, np.arange(kernel, kernel + n), axis=axis)
        lower = np.take(csum, np.arange(0, n), axis=axis)
        out = (upper - lower) / kernel
    return out


def blur_background(image: np.ndarray, det: Detection, cfg: OpaConfig) -> OpaSample:
    """Background image I_b: the box region is mean-filtered, the rest untouched"""
    box = _checked_box(image, det)
    out = image.astype(np.float32, copy=True)
    region = image[box.y0:box.y1, box.x0:box.x1]
    out[box.y0:box.y1, box.x0:box.x1] = box_filter(region, cfg.blur_kernel).astype(np.float32)
    return OpaSample(image_id=det.image_id, role=Role.BG, image=out)


def background_eligible(image_dims: Tuple[int, int], det: Detection, cfg: OpaConfig) -> bool:
    """True iff the box covers strictly less than alpha% of the image"""
    h, w = image_dims[0], image_dims[1]
    if h <= 0 or w <= 0:
        raise DegenerateInputError(f"image dims must be positive, got {image_dims}")
    return det.bbox.area / (h * w) * 100.0 < cfg.alpha_pct


def _process(record: ManifestRecord, det: Optional[Detection], cfg: OpaConfig,
             images_dir: str) -> Tuple[List[Tuple[ManifestRecord, str]], bool]:
    image = imaging.read_ppm(record.image_path)
    outputs: List[Tuple[ManifestRecord, str]] = []

    disc = crop_discriminative(image, det, cfg, image_id=record.image_id)
    disc_path = imaging.write_ppm(os.path.join(images_dir, f"{record.image_id}_disc.ppm"), disc.image)
    outputs.append((record.model_copy(update={"role": Role.DISC}), disc_path))

    if cfg.use_background and det is not None and background_eligible(image.shape, det, cfg):
        bg = blur_background(image, det, cfg)
        bg_path = imaging.write_ppm(os.path.join(images_dir, f"{record.image_id}_bg.ppm"), bg.image)
        outputs.append((record.model_copy(update={"role": Role.BG}), bg_path))
    return outputs, disc.fallback


def build_opa_dataset(records: Sequence[ManifestRecord], detections: Mapping[str, Detection],
                      cfg: OpaConfig, out_dir: str, num_classes: Optional[int] = None,
                      workers: int = 1) -> List[ManifestRecord]:
    """Write I_d (and eligible I_b) images for every original training image.

    I_d samples keep the original label; I_b samples share one background
    label equal to the number of original categories.

    Args:
        records: Original training records (role ``orig``)
        detections: image_id -> Detection (missing ids fall back to the full frame)
        cfg: OPA settings
        out_dir: Destination for images and ``opa_manifest.csv``
        num_classes: |C^o| (defaults to max label + 1)
        workers: Thread count for the per-image map

    Returns:
        OPA manifest records
    """
    records = [r for r in records if r.role == Role.ORIG]
    if not records:
        raise ContractError("no original images to adapt")
    if num_classes is None:
        num_classes = max(r.label_id for r in records) + 1
    bad = [r.image_id for r in records if r.label_id >= num_classes]
    if bad:
        raise ContractError(f"label ids out of range [0, {num_classes}) for {bad[:5]}")

    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    logger.info(f"[OPA] Adapting {len(records)} images (alpha={cfg.alpha_pct}%, kernel={cfg.blur_kernel})")

    jobs = [(r, detections.get(r.image_id)) for r in records]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _process(job[0], job[1], cfg, images_dir), jobs))
    else:
        results = [_process(r, det, cfg, images_dir) for r, det in jobs]

    opa_records: List[ManifestRecord] = []
    fallbacks: List[str] = []
    for (record, _), (outputs, fallback) in zip(jobs, results):
        if fallback:
            fallbacks.append(record.image_id)
        for out_record, path in outputs:
            label = num_classes if out_record.role == Role.BG else out_record.label_id
            opa_records.append(out_record.model_copy(update={
                "image_path": os.path.abspath(path),
                "label_id": label,
                "split": Split.TRAIN,
            }))

    write_manifest(os.path.join(out_dir, OPA_MANIFEST), opa_records)
    if fallbacks:
        logger.warning(f"  [WARNING] {len(fallbacks)} images had no usable detection; full frame used")
        with open(os.path.join(out_dir, FALLBACKS_FILE), "w", encoding="utf-8") as f:
            json.dump(sorted(fallbacks), f, indent=2)

    n_bg = sum(1 for r in opa_records if r.role == Role.BG)
    if n_bg == 0:
        logger.warning("  [WARNING] No image is background-eligible; the background proxy will not be trained")
    logger.info(f"  [OK] {len(opa_records)} OPA samples ({n_bg} background, {num_classes + 1} labels)")
    return opa_records
