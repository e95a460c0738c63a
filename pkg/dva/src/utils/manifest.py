"""
Manifest CSV and detection JSONL codecs.

Manifest rows: ``image_path,label_id,split,role,image_id``; four-column files
(without ``image_id``) are accepted and take the id from the file stem.
Detections: one JSON object per line,
``{"image_id": str, "bbox": [x0, y0, x1, y1], "confidence": float, "superclass": str}``.
"""

import csv
import json
import logging
import os
from typing import Dict, Iterable, List, Optional

from pydantic import ValidationError

from dva.src.models.exceptions import MissingArtifactError, ParseError
from dva.src.models.schemas import BBox, Detection, ManifestRecord

# Initialize logger
logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["image_path", "label_id", "split", "role", "image_id"]


def image_id_from_path(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def write_manifest(path: str, records: Iterable[ManifestRecord]) -> str:
    """Write records; image paths are stored relative to the manifest's directory"""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([relative_to(r.image_path, base), r.label_id, r.split.value, r.role.value, r.image_id])
    return path


def read_manifest(path: str) -> List[ManifestRecord]:
    """Parse a manifest; relative image paths are resolved against the manifest's directory"""
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    base = os.path.dirname(os.path.abspath(path))
    records: List[ManifestRecord] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:4] != MANIFEST_COLUMNS[:4]:
            raise ParseError(f"expected header {','.join(MANIFEST_COLUMNS)}", path=path, line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) not in (4, 5):
                raise ParseError(f"expected 4 or 5 columns, got {len(row)}", path=path, line=line_no)
            image_path = row[0] if os.path.isabs(row[0]) else os.path.join(base, row[0])
            try:
                records.append(ManifestRecord(
                    image_path=image_path,
                    label_id=int(row[1]),
                    split=row[2],
                    role=row[3],
                    image_id=row[4] if len(row) == 5 else image_id_from_path(row[0]),
                ))
            except (ValueError, ValidationError) as e:
                raise ParseError(f"invalid manifest row: {e}", path=path, line=line_no) from e
    return records


def relative_to(path: str, directory: str) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(directory))


def write_detections(path: str, detections: Iterable[Detection]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for det in detections:
            f.write(json.dumps({
                "image_id": det.image_id,
                "bbox": det.bbox.as_list(),
                "confidence": det.confidence,
                "superclass": det.superclass,
            }) + "\n")
    return path


def load_detections(path: str, conf_threshold: float = 0.35) -> Dict[str, Detection]:
    """Load a detection sidecar.

    Records below ``conf_threshold`` are dropped; on duplicate image ids the
    highest-confidence record is kept (the earlier one on exact ties).

    Args:
        path: JSONL file
        conf_threshold: Minimum confidence to keep a record

    Returns:
        Mapping image_id -> Detection
    """
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    detections: Dict[str, Detection] = {}
    dropped = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                x0, y0, x1, y1 = raw["bbox"]
                det = Detection(
                    image_id=raw["image_id"],
                    bbox=BBox(x0=x0, y0=y0, x1=x1, y1=y1),
                    confidence=raw["confidence"],
                    superclass=raw.get("superclass", "object"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as e:
                raise ParseError(f"malformed detection record: {e}", path=path, line=line_no) from e
            if det.confidence < conf_threshold:
                dropped += 1
                continue
            current: Optional[Detection] = detections.get(det.image_id)
            if current is None or det.confidence > current.confidence:
                detections[det.image_id] = det
    logger.debug(f"Loaded {len(detections)} detections from {path} ({dropped} below threshold)")
    return detections
