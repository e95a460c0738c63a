import csv
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from dva.src.models.exceptions import ContractError
from dva.src.models.schemas import AblationRow, AdapterConfig, RunConfig
from dva.src.services import opa
from dva.src.services.adapters import adapter_param_count, attach
from dva.src.services.encoder import EncoderWeights, ViTEncoder
from dva.src.services.losses import ProxyBank
from dva.src.services.retrieval import build_split, embed_gallery, recall_at_k, train_class_count
from dva.src.services.synthetic import DETECTIONS_FILE, MANIFEST_FILE
from dva.src.services.trainer import ImagePipeline, Trainer
from dva.src.utils.manifest import load_detections, read_manifest

# Initialize logger
logger = logging.getLogger(__name__)

ABLATION_FILE = "ablation.csv"


class Variant(BaseModel):
    """One row of the component ablation"""
    name: str
    train: bool = True
    use_opa: bool = True
    use_dpt: bool = True
    use_background: bool = True
    opa_at_inference: bool = False


VARIANTS: Dict[str, Variant] = {
    # frozen backbone with zero-init adapters
    "base": Variant(name="base", train=False, use_opa=False, use_dpt=False),
    "ica": Variant(name="ica", use_opa=False, use_dpt=False),
    # OPA samples in training, discriminative crop also at inference
    "ica_opa": Variant(name="ica_opa", use_dpt=False, opa_at_inference=True),
    # discriminative perception only (no background category) + distillation
    "ica_dp_dpt": Variant(name="ica_dp_dpt", use_background=False),
    "ica_opa_dpt": Variant(name="ica_opa_dpt"),
}

FULL_METHOD = "ica_opa_dpt"


class AblationRunner:
    """Train and evaluate variants on one dataset, averaging over seeds"""

    def __init__(self, cfg: RunConfig, data_dir: str, work_dir: str, seeds: Sequence[int]):
        if not seeds:
            raise ContractError("ablation needs at least one seed")
        self.cfg = cfg
        self.work_dir = work_dir
        self.seeds = [int(s) for s in seeds]
        records = read_manifest(os.path.join(data_dir, MANIFEST_FILE))
        self.detections = load_detections(os.path.join(data_dir, DETECTIONS_FILE), cfg.opa.conf_threshold)
        self.train_records, self.test_records = build_split(records, cfg.eval.mode)
        self.num_classes = train_class_count(self.train_records)
        self.pipeline = ImagePipeline(cfg.encoder.image_size,
                                      cfg.train.effective_resize(cfg.encoder.image_size))
        self._opa_records: Optional[list] = None
        logger.info(f"AblationRunner initialized: {len(self.train_records)} train / "
                    f"{len(self.test_records)} test images, seeds={self.seeds}")

    def opa_records(self) -> list:
        if self._opa_records is None:
            self._opa_records = opa.build_opa_dataset(
                self.train_records, self.detections, self.cfg.opa,
                os.path.join(self.work_dir, "opa"), num_classes=self.num_classes,
            )
        return self._opa_records

    def _run_once(self, cfg: RunConfig, variant: Variant, seed: int) -> Dict[str, object]:
        weights = EncoderWeights.init(cfg.encoder, seed)
        encoder = ViTEncoder(weights)
        adapters = attach(cfg.adapter, cfg.encoder, seed)
        if variant.train:
            train_cfg = cfg.model_copy(update={
                "train": cfg.train.model_copy(update={
                    "seed": seed, "use_opa": variant.use_opa, "use_dpt": variant.use_dpt,
                }),
                "opa": cfg.opa.model_copy(update={"use_background": variant.use_background}),
            })
            samples = self.opa_records() if variant.use_opa else []
            bank = ProxyBank.init(self.num_classes, cfg.encoder.dim, seed)
            Trainer(train_cfg, encoder, adapters, bank).run(self.train_records, samples)
        gallery = embed_gallery(
            self.test_records, encoder, adapters, self.pipeline,
            batch_size=cfg.train.batch_size,
            detections=self.detections if variant.opa_at_inference else None,
            opa_cfg=cfg.opa,
        )
        return {"recalls": recall_at_k(gallery, cfg.eval.ks), "latency_ms": gallery.latency_ms}

    def run(self, variant: Variant, cfg: Optional[RunConfig] = None, label: Optional[str] = None) -> AblationRow:
        cfg = cfg or self.cfg
        label = label or variant.name
        logger.info(f"[ABLATE] {label}")
        results = []
        for i, seed in enumerate(self.seeds, start=1):
            results.append(self._run_once(cfg, variant, seed))
            logger.info(f"  [{i}/{len(self.seeds)}] seed={seed} R@1={results[-1]['recalls'][cfg.eval.ks[0]]:.4f}")
        recalls = {k: float(np.mean([r["recalls"][k] for r in results])) for k in cfg.eval.ks}
        return AblationRow(
            variant=label,
            recalls=recalls,
            latency_ms=float(np.mean([r["latency_ms"] for r in results])),
            adapter_params=adapter_param_count(cfg.adapter, cfg.encoder),
            seeds=self.seeds,
            opa_at_inference=variant.opa_at_inference,
        )

    def run_variants(self, names: Sequence[str]) -> List[AblationRow]:
        unknown = [n for n in names if n not in VARIANTS]
        if unknown:
            raise ContractError(f"unknown variants {unknown}; expected some of {list(VARIANTS)}")
        return [self.run(VARIANTS[n]) for n in names]

    def run_projectors(self, subsets: Sequence[str]) -> List[AblationRow]:
        """Full method with adapters on each projector subset (e.g. ``q``, ``qk``, ``qkv``)"""
        rows = []
        for subset in subsets:
            adapter_cfg = AdapterConfig(**{**self.cfg.adapter.model_dump(), "projectors": list(subset)})
            cfg = self.cfg.model_copy(update={"adapter": adapter_cfg})
            rows.append(self.run(VARIANTS[FULL_METHOD], cfg, label=f"{FULL_METHOD}[proj={subset}]"))
        return rows

    def run_betas(self, betas: Sequence[float]) -> List[AblationRow]:
        """Full method at each distillation weight"""
        rows = []
        for beta in betas:
            cfg = self.cfg.model_copy(update={"loss": self.cfg.loss.model_copy(update={"beta": float(beta)})})
            rows.append(self.run(VARIANTS[FULL_METHOD], cfg, label=f"{FULL_METHOD}[beta={beta:g}]"))
        return rows


def write_rows(path: str, rows: Sequence[AblationRow]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ks = sorted({k for row in rows for k in row.recalls})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant"] + [f"recall@{k}" for k in ks] + ["latency_ms", "adapter_params", "seeds"])
        for row in rows:
            writer.writerow([row.variant] + [f"{row.recalls.get(k, float('nan')):.6f}" for k in ks]
                            + [f"{row.latency_ms:.4f}", row.adapter_params, " ".join(map(str, row.seeds))])
    return path


def format_rows(rows: Sequence[AblationRow]) -> str:
    ks = sorted({k for row in rows for k in row.recalls})
    width = max([len(r.variant) for r in rows] + [7])
    header = f"{'variant':<{width}}  " + "  ".join(f"R@{k:<4d}" for k in ks) + "  latency(ms)  params"
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = "  ".join(f"{100.0 * row.recalls[k]:6.2f}" for k in ks)
        lines.append(f"{row.variant:<{width}}  {cells}  {row.latency_ms:11.3f}  {row.adapter_params}")
    return "\n".join(lines)
