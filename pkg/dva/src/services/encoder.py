import logging
from collections import OrderedDict
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from dva.src.models.exceptions import ContractError, DimensionError
from dva.src.models.schemas import EncoderConfig, PROJECTOR_ORDER
from dva.src.services import tensor as T
from dva.src.services.adapters import AdapterLayer, AdapterSet, adapter_forward
from dva.src.services.tensor import Tensor
from dva.src.utils import ntw1
from dva.src.utils.seeding import make_rng, truncated_normal

# Initialize logger
logger = logging.getLogger(__name__)

PARAM_GROUPS = ("attention_projector", "output_projector", "mlp", "all")


def weight_schema(cfg: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every backbone parameter name with its shape, in file order"""
    D, H = cfg.dim, cfg.mlp_hidden
    schema: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    schema["patch_embed.weight"] = (cfg.patch_dim, D)
    schema["patch_embed.bias"] = (D,)
    schema["cls_token"] = (1, D)
    schema["pos_embed"] = (cfg.n_tokens, D)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        schema[f"{p}.ln1.gain"] = (D,)
        schema[f"{p}.ln1.bias"] = (D,)
        for proj in PROJECTOR_ORDER:
            schema[f"{p}.attn.{proj}.weight"] = (D, D)
            schema[f"{p}.attn.{proj}.bias"] = (D,)
        schema[f"{p}.attn.out.weight"] = (D, D)
        schema[f"{p}.attn.out.bias"] = (D,)
        schema[f"{p}.ln2.gain"] = (D,)
        schema[f"{p}.ln2.bias"] = (D,)
        schema[f"{p}.mlp.fc1.weight"] = (D, H)
        schema[f"{p}.mlp.fc1.bias"] = (H,)
        schema[f"{p}.mlp.fc2.weight"] = (H, D)
        schema[f"{p}.mlp.fc2.bias"] = (D,)
    schema["final_ln.gain"] = (D,)
    schema["final_ln.bias"] = (D,)
    return schema


def backbone_param_count(cfg: EncoderConfig, group: str) -> int:
    """Exact parameter count (weights + biases) of a backbone group.

    attention_projector = L * 3 * (D*D + D)
    output_projector    = L * (D*D + D)
    mlp                 = L * (D*H + H + H*D + D), H = mlp_ratio * D
    all                 = every entry of the weight schema (adds patch
                          embedding, CLS, positions and LayerNorms)
    """
    D, H, L = cfg.dim, cfg.mlp_hidden, cfg.depth
    if group == "attention_projector":
        return L * 3 * (D * D + D)
    if group == "output_projector":
        return L * (D * D + D)
    if group == "mlp":
        return L * (D * H + H + H * D + D)
    if group == "all":
        return int(sum(int(np.prod(shape)) for shape in weight_schema(cfg).values()))
    raise ContractError(f"unknown parameter group {group!r}; expected one of {PARAM_GROUPS}")


class EncoderWeights:
    """Named frozen backbone parameters.

    Arrays are stored read-only; an optimizer step that tried to write into
    one would fail loudly.
    """

    def __init__(self, cfg: EncoderConfig, arrays: Mapping[str, np.ndarray], dtype=np.float32):
        ntw1.check_schema(arrays, weight_schema(cfg), kind="encoder weights")
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name in weight_schema(cfg):
            t = Tensor(arrays[name], requires_grad=False, name=name, dtype=dtype)
            t.data.flags.writeable = False
            self.params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int) -> "EncoderWeights":
        """Seeded truncated-normal weights, unit LN gains, zero biases"""
        rng = make_rng(seed, "backbone")
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in weight_schema(cfg).items():
            if name.endswith(".gain"):
                arrays[name] = np.ones(shape, dtype=np.float32)
            elif name.endswith(".bias"):
                arrays[name] = np.zeros(shape, dtype=np.float32)
            else:
                arrays[name] = truncated_normal(rng, shape, cfg.init_std)
        logger.debug(f"Initialized {len(arrays)} backbone tensors (seed={seed})")
        return cls(cfg, arrays)

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.params.items())

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(self.cfg, self.to_arrays(), dtype=dtype)

    def serialize(self) -> bytes:
        return ntw1.dumps(self.to_arrays())

    def save(self, path: str) -> str:
        return ntw1.save(path, self.to_arrays())

    @classmethod
    def load(cls, path: str, cfg: EncoderConfig) -> "EncoderWeights":
        return cls(cfg, ntw1.load(path))

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def images_to_patches(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Normalize pixels and cut images into flattened patches.

    Args:
        images: [B, H, W, 3] or [H, W, 3] array, values in [0, 1]
        cfg: Encoder description

    Returns:
        [B, N_patches, patch_size*patch_size*3] array (row-major patch order)
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(
            f"expected images of shape [B, {cfg.image_size}, {cfg.image_size}, 3], got {images.shape}"
        )
    mean = np.asarray(cfg.pixel_mean, dtype=np.float32)
    std = np.asarray(cfg.pixel_std, dtype=np.float32)
    x = (images.astype(np.float32) - mean) / std
    B, P, g = x.shape[0], cfg.patch_size, cfg.grid
    x = x.reshape(B, g, P, g, P, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, cfg.patch_dim))


def _linear(x: Tensor, weights: EncoderWeights, prefix: str) -> Tensor:
    return T.matmul(x, weights[f"{prefix}.weight"]) + weights[f"{prefix}.bias"]


def attention_block(tokens: Tensor, weights: EncoderWeights, layer: int,
                    adapters: Optional[Mapping[str, AdapterLayer]] = None) -> Tensor:
    """Pre-LN transformer block with optional in-context adapters.

    For each projector p that has an adapter the projection becomes
    ``Proj_p(LN1(E)) + IC_p(LN1(E))``.

    Args:
        tokens: [B, T, D] or [T, D] token sequence
        weights: Frozen backbone
        layer: Block index
        adapters: Optional projector -> AdapterLayer mapping for this block

    Returns:
        Token sequence with the shape of ``tokens``
    """
    cfg = weights.cfg
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.dim:
        raise DimensionError(f"attention_block expects [B, T, {cfg.dim}] tokens, got {tokens.shape}")
    B, n_tok, D = tokens.shape
    heads, head_dim = cfg.heads, cfg.head_dim
    p = f"blocks.{layer}"

    h = T.layer_norm(tokens, weights[f"{p}.ln1.gain"], weights[f"{p}.ln1.bias"], cfg.ln_eps)
    projected: Dict[str, Tensor] = {}
    for proj in PROJECTOR_ORDER:
        out = _linear(h, weights, f"{p}.attn.{proj}")
        if adapters and proj in adapters:
            if adapters[proj].dim != D:
                raise DimensionError(f"adapter {proj} has width {adapters[proj].dim}, block D={D}")
            out = out + adapter_forward(h, adapters[proj])
        projected[proj] = T.transpose(T.reshape(out, (B, n_tok, heads, head_dim)), (0, 2, 1, 3))

    scores = T.matmul(projected["q"], T.transpose(projected["k"], (0, 1, 3, 2))) * (head_dim ** -0.5)
    context = T.matmul(T.softmax(scores), projected["v"])
    context = T.reshape(T.transpose(context, (0, 2, 1, 3)), (B, n_tok, D))
    tokens = tokens + _linear(context, weights, f"{p}.attn.out")

    h2 = T.layer_norm(tokens, weights[f"{p}.ln2.gain"], weights[f"{p}.ln2.bias"], cfg.ln_eps)
    tokens = tokens + _linear(T.gelu(_linear(h2, weights, f"{p}.mlp.fc1")), weights, f"{p}.mlp.fc2")

    if squeeze:
        tokens = T.reshape(tokens, (n_tok, D))
    return tokens


class ViTEncoder:
    """Frozen ViT-style encoder whose CLS output is the retrieval embedding"""

    def __init__(self, weights: EncoderWeights):
        self.weights = weights
        self.cfg = weights.cfg

    def patchify(self, images: np.ndarray) -> Tensor:
        """Images -> [B, 1 + N_patches, D] tokens (CLS first, positions added)"""
        w = self.weights
        patches = Tensor(images_to_patches(images, self.cfg), dtype=w["patch_embed.weight"].dtype)
        embedded = _linear(patches, w, "patch_embed")
        B = embedded.shape[0]
        cls = T.broadcast_to(T.reshape(w["cls_token"], (1, 1, self.cfg.dim)), (B, 1, self.cfg.dim))
        return T.concat([cls, embedded], axis=1) + w["pos_embed"]

    def forward_tokens(self, tokens: Tensor, adapters: Optional[AdapterSet] = None) -> Tensor:
        """Run every block and the final LayerNorm"""
        if adapters is not None:
            adapters.check_dim(self.cfg.dim)
        for layer in range(self.cfg.depth):
            tokens = attention_block(tokens, self.weights, layer,
                                     adapters.get(layer) if adapters is not None else None)
        return T.layer_norm(tokens, self.weights["final_ln.gain"], self.weights["final_ln.bias"],
                            self.cfg.ln_eps)

    def encode(self, images: np.ndarray, adapters: Optional[AdapterSet] = None) -> Tensor:
        """Retrieval embeddings E^R, one row per image (not normalized).

        Args:
            images: [B, H, W, 3] or [H, W, 3] array in [0, 1]
            adapters: Optional in-context adapters

        Returns:
            [B, D] tensor (the CLS token after the final LayerNorm)
        """
        tokens = self.forward_tokens(self.patchify(images), adapters)
        return tokens[:, 0, :]
