"""
Command-line entry point: ``python -m dva.main <command> [options]``
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError

from config.settings import settings
from dva.src.models.exceptions import EXIT_DATA, EXIT_OK, EXIT_USAGE, DvaError, MissingArtifactError
from dva.src.models.schemas import ParamReport, RecallTable, Role, RunConfig
from dva.src.services import ablation, opa, synthetic, trainer
from dva.src.services.adapters import AdapterSet, adapter_param_count, attach
from dva.src.services.encoder import EncoderWeights, ViTEncoder, backbone_param_count
from dva.src.services.losses import ProxyBank
from dva.src.services.retrieval import (
    RECALL_FILE, EmbeddingSet, build_split, embed_gallery, evaluate, train_class_count, write_recall,
)
from dva.src.utils.manifest import load_detections, read_manifest

BACKBONE_FILE = "backbone.ntw"
EFFECTIVE_CONFIG = "effective_config.json"
REFERENCE_VIT_B_TOTAL = 85.6e6

logger = logging.getLogger("dva")


# Configure logging
def setup_logging(verbose: bool = False) -> logging.Logger:
    """Console (INFO) + rotating file (DEBUG) handlers on the root logger"""
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    root_logger = logging.getLogger()
    if getattr(root_logger, "_dva_configured", False):
        return logger

    os.makedirs(settings.LOG_DIR, exist_ok=True)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    console_handler.setFormatter(logging.Formatter(log_format))

    # File handler with rotation
    file_handler = RotatingFileHandler(
        os.path.join(settings.LOG_DIR, settings.LOG_FILE),
        maxBytes=settings.LOG_MAX_BYTES,
        backupCount=settings.LOG_BACKUP_COUNT,
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(log_format))

    root_logger.setLevel(logging.DEBUG if (settings.DEBUG or verbose) else logging.INFO)
    root_logger.addHandler(console_handler)
    root_logger.addHandler(file_handler)
    root_logger._dva_configured = True
    return logger


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1"""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """Strictly parse a RunConfig JSON file (defaults when no path is given)"""
    if path is None:
        cfg = RunConfig()
    else:
        if not os.path.exists(path):
            raise MissingArtifactError(path, "configuration file")
        with open(path, encoding="utf-8") as f:
            cfg = RunConfig.model_validate_json(f.read())
    return cfg.with_seed(seed) if seed is not None else cfg


def stage_dir(cfg: RunConfig, out: str, stage: str) -> str:
    sub = getattr(cfg.paths, stage)
    return sub if os.path.isabs(sub) else os.path.join(out, sub)


def write_effective_config(cfg: RunConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, EFFECTIVE_CONFIG)
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.model_dump_json(indent=2))
    return path


def load_splits(cfg: RunConfig, out: str):
    manifest = os.path.join(stage_dir(cfg, out, "data"), synthetic.MANIFEST_FILE)
    if not os.path.exists(manifest):
        raise MissingArtifactError(manifest, "run gen-data or place a manifest there")
    return build_split(read_manifest(manifest), cfg.eval.mode)


def load_backbone(cfg: RunConfig, out: str) -> EncoderWeights:
    path = os.path.join(stage_dir(cfg, out, "weights"), BACKBONE_FILE)
    if not os.path.exists(path):
        raise MissingArtifactError(path, "run init-weights")
    return EncoderWeights.load(path, cfg.encoder)


def load_adapters(cfg: RunConfig, out: str, untrained: bool) -> AdapterSet:
    if untrained:
        return attach(cfg.adapter, cfg.encoder, cfg.train.seed)
    path = os.path.join(stage_dir(cfg, out, "train"), trainer.ADAPTERS_FILE)
    if not os.path.exists(path):
        raise MissingArtifactError(path, "run train, or pass --untrained")
    return AdapterSet.load(path, cfg.adapter, cfg.encoder)


def build_param_report(cfg: RunConfig) -> ParamReport:
    total = backbone_param_count(cfg.encoder, "all")
    adapter = adapter_param_count(cfg.adapter, cfg.encoder)
    return ParamReport(
        attention_projector=backbone_param_count(cfg.encoder, "attention_projector"),
        output_projector=backbone_param_count(cfg.encoder, "output_projector"),
        mlp=backbone_param_count(cfg.encoder, "mlp"),
        backbone_total=total,
        adapter=adapter,
        adapter_pct_of_backbone=100.0 * adapter / total,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = stage_dir(cfg, args.out, "data")
    write_effective_config(cfg, out_dir)
    synthetic.gen_dataset(cfg.synthetic, out_dir)
    return EXIT_OK


def cmd_prep_opa(args: argparse.Namespace, cfg: RunConfig) -> int:
    data_dir = stage_dir(cfg, args.out, "data")
    out_dir = stage_dir(cfg, args.out, "opa")
    train_records, _ = load_splits(cfg, args.out)
    detections = load_detections(args.detections or os.path.join(data_dir, synthetic.DETECTIONS_FILE),
                                 cfg.opa.conf_threshold)
    write_effective_config(cfg, out_dir)
    opa.build_opa_dataset(train_records, detections, cfg.opa, out_dir,
                          num_classes=train_class_count(train_records), workers=args.workers)
    return EXIT_OK


def cmd_init_weights(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = stage_dir(cfg, args.out, "weights")
    write_effective_config(cfg, out_dir)
    weights = EncoderWeights.init(cfg.encoder, cfg.train.seed)
    path = weights.save(os.path.join(out_dir, BACKBONE_FILE))
    logger.info(f"[SUCCESS] {weights.num_parameters():,} backbone parameters -> {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.beta is not None:
        cfg = cfg.model_copy(update={"loss": cfg.loss.model_copy(update={"beta": args.beta})})
    if args.lr is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"lr0": args.lr})})
    cfg = RunConfig.model_validate(cfg.model_dump())
    out_dir = stage_dir(cfg, args.out, "train")

    train_records, _ = load_splits(cfg, args.out)
    num_classes = train_class_count(train_records)
    opa_records = []
    if cfg.train.use_opa:
        opa_manifest = os.path.join(stage_dir(cfg, args.out, "opa"), opa.OPA_MANIFEST)
        if not os.path.exists(opa_manifest):
            raise MissingArtifactError(opa_manifest, "run prep-opa")
        opa_records = read_manifest(opa_manifest)
        if not cfg.opa.use_background:
            opa_records = [r for r in opa_records if r.role != Role.BG]

    weights = load_backbone(cfg, args.out)
    digest = hashlib.sha256(weights.serialize()).hexdigest()
    adapters = attach(cfg.adapter, cfg.encoder, cfg.train.seed)
    bank = ProxyBank.init(num_classes, cfg.encoder.dim, cfg.train.seed)
    write_effective_config(cfg, out_dir)

    trainer.train(cfg, train_records, opa_records, ViTEncoder(weights), adapters, bank, out_dir)

    if hashlib.sha256(weights.serialize()).hexdigest() != digest:
        raise DvaError("backbone weights changed during training")
    logger.info(f"  [OK] Backbone unchanged (sha256 {digest[:12]})")
    return EXIT_OK


def cmd_embed(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = stage_dir(cfg, args.out, "embed")
    _, test_records = load_splits(cfg, args.out)
    encoder = ViTEncoder(load_backbone(cfg, args.out))
    adapters = load_adapters(cfg, args.out, args.untrained)
    detections = None
    if cfg.eval.use_opa_at_inference:
        detections = load_detections(os.path.join(stage_dir(cfg, args.out, "data"), synthetic.DETECTIONS_FILE),
                                     cfg.opa.conf_threshold)
    pipeline = trainer.ImagePipeline(cfg.encoder.image_size, cfg.train.effective_resize(cfg.encoder.image_size))
    write_effective_config(cfg, out_dir)
    gallery = embed_gallery(test_records, encoder, adapters, pipeline, batch_size=cfg.train.batch_size,
                            detections=detections, opa_cfg=cfg.opa, workers=args.workers)
    gallery.save(out_dir)
    logger.info(f"[SUCCESS] {len(gallery)} embeddings -> {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = stage_dir(cfg, args.out, "eval")
    gallery = EmbeddingSet.load(stage_dir(cfg, args.out, "embed"))
    write_effective_config(cfg, out_dir)
    table: RecallTable = evaluate(gallery, cfg.eval.ks)
    write_recall(os.path.join(out_dir, RECALL_FILE), table)
    print(f"Recall@K ({cfg.eval.mode}-set, {table.n_queries} queries)")
    print(table.format())
    return EXIT_OK


def cmd_params(args: argparse.Namespace, cfg: RunConfig) -> int:
    report = build_param_report(cfg)
    enc = cfg.encoder
    print(f"Backbone (D={enc.dim}, L={enc.depth}, MLP={enc.mlp_hidden}, patch={enc.patch_size})")
    print(f"  attention_projector  {report.attention_projector:>12,}")
    print(f"  output_projector     {report.output_projector:>12,}")
    print(f"  mlp                  {report.mlp:>12,}")
    print(f"  total                {report.backbone_total:>12,}   "
          f"(reference ViT-B/16 total {REFERENCE_VIT_B_TOTAL / 1e6:.1f}M)")
    layers = len(cfg.adapter.resolve_layers(enc.depth))
    print(f"Adapters (d={cfg.adapter.d}, projectors={','.join(cfg.adapter.projectors)}, layers={layers})")
    print(f"  adapter              {report.adapter:>12,}")
    print(f"  adapter / backbone   {report.adapter_pct_of_backbone:>11.2f}%")
    print("Projector subsets")
    for subset in ("q", "qk", "qkv"):
        sub_cfg = cfg.adapter.model_copy(update={"projectors": list(subset)})
        print(f"  {subset:<19}  {adapter_param_count(sub_cfg, enc):>12,}")
    if args.out is not None and args.write:
        write_effective_config(cfg, args.out)
        with open(os.path.join(args.out, "params.json"), "w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = os.path.join(args.out, "ablation")
    data_dir = stage_dir(cfg, args.out, "data")
    if not os.path.exists(os.path.join(data_dir, synthetic.MANIFEST_FILE)):
        logger.info("[ABLATE] No dataset found; generating one")
        synthetic.gen_dataset(cfg.synthetic, data_dir)
    write_effective_config(cfg, out_dir)
    runner = ablation.AblationRunner(cfg, data_dir, out_dir, args.seeds)
    rows = runner.run_variants(args.variants)
    if args.projectors:
        rows += runner.run_projectors(args.projectors)
    if args.betas:
        rows += runner.run_betas(args.betas)
    ablation.write_rows(os.path.join(out_dir, ablation.ABLATION_FILE), rows)
    print(ablation.format_rows(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "prep-opa": cmd_prep_opa,
    "init-weights": cmd_init_weights,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "params": cmd_params,
    "ablate": cmd_ablate,
}


def build_parser() -> CliParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    common = CliParser(add_help=False)
    common.add_argument("--config", default=None, help="RunConfig JSON file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="Seed for every random stream (overrides the config)")
    common.add_argument("--out", default=settings.DEFAULT_OUT_DIR, help="Output root directory")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level on the console")

    parser = CliParser(prog="dva", description=f"{settings.APP_NAME} {settings.APP_VERSION}",
                       formatter_class=formatter)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("gen-data", parents=[common], formatter_class=formatter,
                   help="Generate the synthetic fine-grained dataset")

    p = sub.add_parser("prep-opa", parents=[common], formatter_class=formatter,
                       help="Build discriminative / background images for the training split")
    p.add_argument("--detections", default=None, help="Detection sidecar (default: <data>/detections.jsonl)")
    p.add_argument("--workers", type=int, default=1, help="Image-processing threads")

    sub.add_parser("init-weights", parents=[common], formatter_class=formatter,
                   help="Write seeded frozen backbone weights")

    p = sub.add_parser("train", parents=[common], formatter_class=formatter,
                       help="Train adapters and proxies")
    p.add_argument("--beta", type=float, default=None, help="Distillation weight (overrides loss.beta)")
    p.add_argument("--lr", type=float, default=None, help="Initial learning rate (overrides train.lr0)")

    p = sub.add_parser("embed", parents=[common], formatter_class=formatter,
                       help="Embed the test split")
    p.add_argument("--untrained", action="store_true", help="Use zero-init adapters instead of trained ones")
    p.add_argument("--workers", type=int, default=1, help="Image-processing threads")

    sub.add_parser("eval", parents=[common], formatter_class=formatter,
                   help="Compute Recall@K over the embedded test split")

    p = sub.add_parser("params", parents=[common], formatter_class=formatter,
                       help="Print backbone and adapter parameter counts")
    p.add_argument("--write", action="store_true", help="Also write params.json under --out")

    p = sub.add_parser("ablate", parents=[common], formatter_class=formatter,
                       help="Component / projector / beta ablations averaged over seeds")
    p.add_argument("--variants", nargs="+", default=list(ablation.VARIANTS), choices=list(ablation.VARIANTS),
                   help="Component variants")
    p.add_argument("--projectors", nargs="*", default=[], help="Projector subsets, e.g. q qk qkv")
    p.add_argument("--betas", nargs="*", type=float, default=[], help="Distillation weights to sweep")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="Seeds to average over")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    handler = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.seed)
        logger.info(f"[{args.command.upper()}] Starting (out={args.out})")
        code = handler(args, cfg)
        logger.info(f"[SUCCESS] {args.command} finished")
        return code
    except ValidationError as e:
        logger.error(f"[ERROR] Invalid configuration: {e}")
        return EXIT_USAGE
    except DvaError as e:
        logger.error(f"[ERROR] {args.command} failed: {e}", exc_info=settings.DEBUG)
        return e.exit_code
    except OSError as e:
        logger.error(f"[ERROR] {args.command} failed: {e}", exc_info=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
