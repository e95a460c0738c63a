import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dva.src.models.exceptions import (
    ContractError, DegenerateInputError, DimensionError, MissingArtifactError, ParseError,
)
from dva.src.models.schemas import Detection, ManifestRecord, OpaConfig, RecallTable, Role, Split
from dva.src.services import opa
from dva.src.services.adapters import AdapterSet
from dva.src.services.encoder import ViTEncoder
from dva.src.services.tensor import no_grad
from dva.src.services.trainer import ImagePipeline
from dva.src.utils import imaging, ntw1

# Initialize logger
logger = logging.getLogger(__name__)

EMBEDDINGS_FILE = "embeddings.ntw"
EMBEDDINGS_ENTRY = "embeddings.matrix"
INDEX_FILE = "index.csv"
RECALL_FILE = "recall.csv"


class EmbeddingSet:
    """Row-aligned embeddings, labels and ids; rows are unit length"""

    def __init__(self, matrix: np.ndarray, labels: Sequence[int], ids: Sequence[str],
                 latency_ms: float = 0.0):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(labels) or len(labels) != len(ids):
            raise DimensionError(
                f"embedding set mismatch: matrix {matrix.shape}, {len(labels)} labels, {len(ids)} ids"
            )
        self.matrix = matrix
        self.labels = [int(y) for y in labels]
        self.ids = [str(i) for i in ids]
        self.latency_ms = latency_ms

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def save(self, out_dir: str) -> str:
        ntw1.save(os.path.join(out_dir, EMBEDDINGS_FILE), {EMBEDDINGS_ENTRY: self.matrix})
        with open(os.path.join(out_dir, INDEX_FILE), "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["image_id", "label_id"])
            for image_id, label in zip(self.ids, self.labels):
                writer.writerow([image_id, label])
        return out_dir

    @classmethod
    def load(cls, out_dir: str) -> "EmbeddingSet":
        entries = ntw1.load(os.path.join(out_dir, EMBEDDINGS_FILE))
        if EMBEDDINGS_ENTRY not in entries:
            raise ParseError(f"missing entry {EMBEDDINGS_ENTRY}", path=os.path.join(out_dir, EMBEDDINGS_FILE))
        index_path = os.path.join(out_dir, INDEX_FILE)
        ids: List[str] = []
        labels: List[int] = []
        if not os.path.exists(index_path):
            raise MissingArtifactError(index_path)
        with open(index_path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            next(reader, None)
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    ids.append(row[0])
                    labels.append(int(row[1]))
                except (IndexError, ValueError) as e:
                    raise ParseError(f"invalid index row: {row}", path=index_path, line=line_no) from e
        return cls(entries[EMBEDDINGS_ENTRY], labels, ids)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero embedding")
    return matrix / norms


def embed_gallery(records: Sequence[ManifestRecord], encoder: ViTEncoder,
                  adapters: Optional[AdapterSet], pipeline: ImagePipeline, batch_size: int = 32,
                  detections: Optional[Mapping[str, Detection]] = None,
                  opa_cfg: Optional[OpaConfig] = None, workers: int = 1) -> EmbeddingSet:
    """Embed original images with the deterministic center-crop pipeline.

    Args:
        records: Evaluation records (role ``orig`` only)
        encoder: Frozen encoder
        adapters: Trained adapters (None for the bare backbone)
        pipeline: Resize/crop transform
        batch_size: Forward batch size
        detections: When given, the discriminative crop is applied before the
            transform (inference-time OPA)
        opa_cfg: OPA settings used with ``detections``
        workers: Threads for decoding and preprocessing

    Returns:
        EmbeddingSet with L2-normalized rows; ``latency_ms`` is the mean
        per-image preprocessing + forward time (disk reads excluded)
    """
    if not records:
        raise ContractError("evaluation manifest is empty")
    non_orig = [r.image_id for r in records if r.role != Role.ORIG]
    if non_orig:
        raise ContractError(f"evaluation uses original images only; got {non_orig[:3]}")
    if detections is not None and opa_cfg is None:
        opa_cfg = OpaConfig()

    def prepare(record: ManifestRecord) -> Tuple[np.ndarray, float]:
        image = imaging.read_ppm(record.image_path)
        t0 = time.perf_counter()
        if detections is not None:
            image = opa.crop_discriminative(image, detections.get(record.image_id), opa_cfg,
                                             image_id=record.image_id).image
        view = pipeline.eval_view(image)
        return view, time.perf_counter() - t0

    rows: List[np.ndarray] = []
    elapsed = 0.0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            prepared = list(pool.map(prepare, chunk))
            elapsed += sum(seconds for _, seconds in prepared)
            t0 = time.perf_counter()
            with no_grad():
                emb = encoder.encode(np.stack([view for view, _ in prepared]), adapters)
            elapsed += time.perf_counter() - t0
            rows.append(emb.numpy().astype(np.float64))

    matrix = normalize_rows(np.concatenate(rows, axis=0))
    latency = 1000.0 * elapsed / len(records)
    logger.info(f"  [OK] Embedded {len(records)} images ({latency:.2f} ms/image)")
    return EmbeddingSet(matrix, [r.label_id for r in records], [r.image_id for r in records], latency)


def rank_gallery(embeddings: EmbeddingSet) -> np.ndarray:
    """Per query, every other item ordered by descending cosine similarity.

    Ties are broken by ascending id. Returns an [N, N-1] index array.
    """
    x = normalize_rows(embeddings.matrix.astype(np.float64))
    n = x.shape[0]
    sim = x @ x.T
    np.fill_diagonal(sim, -np.inf)
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.argsort(np.asarray(embeddings.ids), kind="stable")] = np.arange(n)
    order = np.lexsort((np.broadcast_to(id_rank, (n, n)), -sim), axis=-1)
    # the query itself sorts last (similarity -inf)
    return order[:, :-1]


def recall_at_k(embeddings: EmbeddingSet, ks: Sequence[int]) -> Dict[int, float]:
    """Fraction of queries with a same-label item among their K nearest neighbours.

    Query set = gallery = the whole set; each query is excluded from its own
    gallery.

    Raises:
        ContractError: fewer than two items, or some K >= N
    """
    n = len(embeddings)
    if n < 2:
        raise ContractError(f"Recall@K needs at least two items, got {n}")
    too_large = [k for k in ks if k >= n or k < 1]
    if too_large:
        raise ContractError(f"K values {too_large} must lie in [1, {n - 1}] for {n} items")
    labels = np.asarray(embeddings.labels)
    order = rank_gallery(embeddings)
    matches = labels[order] == labels[:, None]
    # rank of the first same-label neighbour (n - 1 when there is none)
    first_hit = np.where(matches.any(axis=1), matches.argmax(axis=1), n - 1)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def build_split(records: Sequence[ManifestRecord], mode: str,
                class_count: Optional[int] = None) -> Tuple[List[ManifestRecord], List[ManifestRecord]]:
    """Train/test partition of an original-image manifest.

    closed: the manifest's split column, verbatim.
    open:   classes [0, floor(n/2)) train, the remaining classes test.

    Args:
        records: Manifest records (non-original roles are ignored)
        mode: ``open`` or ``closed``
        class_count: Number of classes (defaults to max label + 1)

    Returns:
        (train records, test records)
    """
    records = [r for r in records if r.role == Role.ORIG]
    if not records:
        raise ContractError("manifest has no original images")
    labels = sorted({r.label_id for r in records})
    n = class_count if class_count is not None else labels[-1] + 1
    if labels != list(range(n)):
        raise ContractError(f"labels must be contiguous from 0 to {n - 1}, got {labels[:10]}...")
    if mode == "closed":
        train = [r for r in records if r.split == Split.TRAIN]
        test = [r for r in records if r.split == Split.TEST]
    elif mode == "open":
        cut = n // 2
        if cut == 0:
            raise ContractError("open split needs at least two classes")
        train = [r.model_copy(update={"split": Split.TRAIN}) for r in records if r.label_id < cut]
        test = [r.model_copy(update={"split": Split.TEST}) for r in records if r.label_id >= cut]
    else:
        raise ContractError(f"unknown split mode {mode!r}; expected 'open' or 'closed'")
    logger.debug(f"build_split({mode}): {len(train)} train / {len(test)} test")
    return train, test


def train_class_count(records: Sequence[ManifestRecord]) -> int:
    """Number of training categories |C^o| (labels are contiguous from 0)"""
    return max(r.label_id for r in records) + 1


def write_recall(path: str, table: RecallTable) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["K", "recall"])
        for k in sorted(table.recalls):
            writer.writerow([k, f"{table.recalls[k]:.6f}"])
    return path


def evaluate(embeddings: EmbeddingSet, ks: Sequence[int]) -> RecallTable:
    return RecallTable(recalls=recall_at_k(embeddings, ks), n_queries=len(embeddings))
