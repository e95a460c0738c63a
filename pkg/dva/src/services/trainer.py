import csv
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dva.src.models.exceptions import ContractError, NumericError
from dva.src.models.schemas import EpochStats, ManifestRecord, Role, RunConfig, TrainingReport
from dva.src.services import tensor as T
from dva.src.services.adapters import AdapterSet
from dva.src.services.encoder import ViTEncoder
from dva.src.services.losses import ProxyBank, total_loss
from dva.src.utils import imaging
from dva.src.utils.seeding import make_rng

# Initialize logger
logger = logging.getLogger(__name__)

REPORT_FILE = "train_report.csv"
REPORT_COLUMNS = ["epoch", "mean_loss_proxy", "mean_loss_dpt", "lr"]
ADAPTERS_FILE = "adapters.ntw"
PROXIES_FILE = "proxies.ntw"
NAN_DUMP_FILE = "nan_dump.json"


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2, no warmup"""
    if total_steps < 1:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    if 2 * step == total_steps:
        return lr0 / 2.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamState:
    """First/second moment buffers for a fixed list of parameters"""

    def __init__(self, params: Sequence[T.Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.shapes = [p.shape for p in params]
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: Sequence[T.Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, weight_decay: float, lr_scales: Optional[Sequence[float]] = None) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update (in place).

    Args:
        params: Trainable tensors, in the order the state was built for
        grads: Gradient per parameter
        state: Moment buffers and step counter
        lr: Learning rate of this step
        weight_decay: Decoupled decay coefficient
        lr_scales: Optional per-parameter learning-rate multipliers

    Raises:
        ContractError: a gradient is missing or the parameter list does not match the state
    """
    if len(params) != len(state.shapes) or len(grads) != len(params):
        raise ContractError(f"adam_step got {len(params)} params / {len(grads)} grads for a "
                            f"state of {len(state.shapes)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ContractError(f"missing gradient for trainable parameter {p.name or i}")
        if p.shape != state.shapes[i] or g.shape != p.shape:
            raise ContractError(f"shape mismatch for parameter {p.name or i}: {p.shape} vs {g.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        step_lr = lr * (lr_scales[i] if lr_scales is not None else 1.0)
        value = p.data.astype(np.float64)
        value -= step_lr * weight_decay * value
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        value -= step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data[...] = value.astype(p.dtype)


class ImagePipeline:
    """Square resize (cached), then random or center crop to the encoder input"""

    def __init__(self, image_size: int, resize_size: int, hflip: bool = True):
        if resize_size < image_size:
            raise ContractError(f"resize {resize_size} smaller than crop {image_size}")
        self.image_size = image_size
        self.resize_size = resize_size
        self.hflip = hflip
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def load(self, path: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(path)
        if cached is not None:
            return cached
        image = imaging.resize_square(imaging.read_ppm(path), self.resize_size)
        with self._lock:
            self._cache[path] = image
        return image

    def prefetch(self, paths: Sequence[str], workers: int = 4) -> None:
        missing = [p for p in dict.fromkeys(paths) if p not in self._cache]
        if not missing:
            return
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            list(pool.map(self.load, missing))

    def draw_augmentation(self, rng: np.random.Generator) -> Tuple[int, int, bool]:
        """(top, left, flip); three draws per image regardless of settings"""
        span = self.resize_size - self.image_size + 1
        top = int(rng.integers(0, span))
        left = int(rng.integers(0, span))
        flip = bool(rng.random() < 0.5)
        return top, left, flip and self.hflip

    def train_view(self, path: str, augmentation: Tuple[int, int, bool]) -> np.ndarray:
        top, left, flip = augmentation
        view = imaging.crop(self.load(path), top, left, self.image_size)
        return imaging.hflip(view) if flip else view

    def eval_view(self, image: np.ndarray) -> np.ndarray:
        return imaging.center_crop(imaging.resize_square(image, self.resize_size), self.image_size)


def write_report(path: str, epochs: Sequence[EpochStats]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for e in epochs:
            writer.writerow([e.epoch, f"{e.mean_loss_proxy:.6f}", f"{e.mean_loss_dpt:.6f}", f"{e.lr:.8g}"])
    return path


class Trainer:
    """Joint optimization of adapters and proxies over a frozen encoder.

    Each iteration draws a batch of original images together with their
    paired OPA samples. The OPA samples feed the proxy term over every proxy
    (background included unless ``opa.use_background`` is off); the originals
    feed the distillation term over the category proxies only.
    """

    def __init__(self, cfg: RunConfig, encoder: ViTEncoder, adapters: AdapterSet, bank: ProxyBank,
                 out_dir: Optional[str] = None):
        self.cfg = cfg
        self.encoder = encoder
        self.adapters = adapters
        self.bank = bank
        self.out_dir = out_dir
        self.pipeline = ImagePipeline(
            cfg.encoder.image_size,
            cfg.train.effective_resize(cfg.encoder.image_size),
            hflip=cfg.train.hflip,
        )
        self.params = adapters.parameters() + bank.parameters()
        self.lr_scales = [1.0] * len(adapters.parameters()) + [cfg.train.proxy_lr_scale]
        self.state = AdamState(self.params, cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps)
        logger.info(f"Trainer initialized: {self.trainable_parameters()} trainable parameters "
                    f"(opa={cfg.train.use_opa}, dpt={cfg.train.use_dpt}, beta={cfg.loss.beta})")

    def trainable_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def _pair(self, records: Sequence[ManifestRecord],
              opa_records: Sequence[ManifestRecord]) -> Dict[str, List[ManifestRecord]]:
        paired: Dict[str, List[ManifestRecord]] = {r.image_id: [] for r in records}
        for r in opa_records:
            if r.image_id in paired:
                paired[r.image_id].append(r)
        if self.cfg.train.use_opa:
            unpaired = [k for k, v in paired.items() if not v]
            if unpaired:
                raise ContractError(f"{len(unpaired)} training images have no OPA samples "
                                    f"(e.g. {unpaired[:3]}); run prep-opa first")
        for samples in paired.values():
            samples.sort(key=lambda r: r.role.value)
        return paired

    def _check_labels(self, records: Sequence[ManifestRecord], opa_records: Sequence[ManifestRecord]) -> None:
        n = self.bank.num_classes
        bad = sorted({r.label_id for r in records if r.label_id >= n})
        if bad:
            raise ContractError(f"training labels {bad} exceed the {n} categories of the proxy bank")
        for r in opa_records:
            expected_bg = r.role == Role.BG
            if expected_bg != (r.label_id == self.bank.background_index) or r.label_id > n:
                raise ContractError(f"OPA sample {r.image_id} ({r.role.value}) has label {r.label_id}")

    def _dump(self, step: int, epoch: int, lr: float, values: Dict[str, float], batch_ids: List[str]) -> Optional[str]:
        if self.out_dir is None:
            return None
        path = os.path.join(self.out_dir, NAN_DUMP_FILE)
        os.makedirs(self.out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss": {k: repr(v) for k, v in values.items()},
                "batch_image_ids": batch_ids,
                "param_norms": {p.name or str(i): repr(float(np.linalg.norm(p.data)))
                                for i, p in enumerate(self.params)},
            }, f, indent=2)
        return path

    def run(self, records: Sequence[ManifestRecord],
            opa_records: Sequence[ManifestRecord] = ()) -> TrainingReport:
        """Train for the configured epochs and return the report.

        Args:
            records: Original training images (role ``orig``)
            opa_records: OPA samples keyed to the originals by image_id

        Returns:
            TrainingReport with one row per epoch
        """
        tc = self.cfg.train
        records = [r for r in records if r.role == Role.ORIG]
        if not records:
            raise ContractError("training manifest is empty")
        opa_records = list(opa_records) if tc.use_opa else []
        with_background = tc.use_opa and self.cfg.opa.use_background
        if not with_background:
            opa_records = [r for r in opa_records if r.role != Role.BG]
        self._check_labels(records, opa_records)
        paired = self._pair(records, opa_records)

        steps_per_epoch = math.ceil(len(records) / tc.batch_size)
        total_steps = steps_per_epoch * tc.epochs
        if tc.max_steps is not None:
            total_steps = min(total_steps, tc.max_steps)
        # c_b stays in the softmax even when no I_b sample exists
        opa_active = self.bank.all_rows if with_background else self.bank.original_rows

        logger.info(f"[TRAIN] {len(records)} images, {len(opa_records)} OPA samples, "
                    f"{tc.epochs} epochs x {steps_per_epoch} steps (total {total_steps})")
        self.pipeline.prefetch([r.image_path for r in records] + [r.image_path for r in opa_records])

        rng = make_rng(tc.seed, "train")
        report = TrainingReport(trainable_parameters=self.trainable_parameters())
        started = time.perf_counter()
        step = 0
        for epoch in range(tc.epochs):
            if step >= total_steps:
                break
            order = rng.permutation(len(records))
            proxy_values: List[float] = []
            dpt_values: List[float] = []
            lr = cosine_lr(step, total_steps, tc.lr0)
            for start in range(0, len(order), tc.batch_size):
                if step >= total_steps:
                    break
                batch = [records[i] for i in order[start:start + tc.batch_size]]
                opa_batch = [s for r in batch for s in paired[r.image_id]]
                orig_aug = [self.pipeline.draw_augmentation(rng) for _ in batch]
                opa_aug = [self.pipeline.draw_augmentation(rng) for _ in opa_batch]

                lr = cosine_lr(step, total_steps, tc.lr0)
                orig_images = np.stack([self.pipeline.train_view(r.image_path, a) for r, a in zip(batch, orig_aug)])
                orig_labels = [r.label_id for r in batch]
                orig_emb = self.encoder.encode(orig_images, self.adapters)
                if tc.use_opa:
                    opa_images = np.stack([self.pipeline.train_view(s.image_path, a)
                                           for s, a in zip(opa_batch, opa_aug)])
                    opa_emb = self.encoder.encode(opa_images, self.adapters)
                    opa_labels = [s.label_id for s in opa_batch]
                    active = opa_active
                else:
                    opa_emb, opa_labels, active = orig_emb, orig_labels, self.bank.original_rows

                losses = total_loss(opa_emb, opa_labels, orig_emb, orig_labels, self.bank,
                                    self.cfg.loss, use_dpt=tc.use_dpt, opa_active_set=active)
                values = {"total": losses.total.item(), "proxy": losses.proxy, "dpt": losses.dpt}
                if not all(math.isfinite(v) for v in values.values()):
                    dump = self._dump(step, epoch, lr, values, [r.image_id for r in batch])
                    logger.error(f"[ERROR] Non-finite loss at step {step}: {values}")
                    raise NumericError(f"non-finite loss at step {step} (epoch {epoch})", dump_path=dump)

                T.zero_grad(self.params)
                T.backward(losses.total)
                adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                          tc.weight_decay, self.lr_scales)
                proxy_values.append(losses.proxy)
                dpt_values.append(losses.dpt)
                step += 1
                logger.debug(f"  step {step}/{total_steps} lr={lr:.6g} proxy={losses.proxy:.4f} dpt={losses.dpt:.4f}")

            stats = EpochStats(epoch=epoch, mean_loss_proxy=float(np.mean(proxy_values)),
                               mean_loss_dpt=float(np.mean(dpt_values)), lr=lr)
            report.epochs.append(stats)
            logger.info(f"  [{epoch + 1}/{tc.epochs}] proxy={stats.mean_loss_proxy:.4f} "
                        f"dpt={stats.mean_loss_dpt:.4f} lr={lr:.6g}")

        report.steps = step
        report.elapsed_seconds = time.perf_counter() - started
        if self.out_dir is not None:
            self.save(self.out_dir, report)
        logger.info(f"[SUCCESS] Training finished: {step} steps in {report.elapsed_seconds:.1f}s")
        return report

    def save(self, out_dir: str, report: TrainingReport) -> None:
        write_report(os.path.join(out_dir, REPORT_FILE), report.epochs)
        self.adapters.save(os.path.join(out_dir, ADAPTERS_FILE))
        self.bank.save(os.path.join(out_dir, PROXIES_FILE))


def train(cfg: RunConfig, records: Sequence[ManifestRecord], opa_records: Sequence[ManifestRecord],
          encoder: ViTEncoder, adapters: AdapterSet, bank: ProxyBank,
          out_dir: Optional[str] = None) -> TrainingReport:
    return Trainer(cfg, encoder, adapters, bank, out_dir).run(records, opa_records)
