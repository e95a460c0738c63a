import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from dva.src.models.exceptions import DimensionError
from dva.src.models.schemas import AdapterConfig, EncoderConfig, PROJECTOR_ORDER
from dva.src.services.tensor import Tensor, matmul
from dva.src.utils import ntw1
from dva.src.utils.seeding import make_rng

# Initialize logger
logger = logging.getLogger(__name__)

ADAPTER_PREFIX = "ica."
DOWN_INIT_STD = 0.02


class AdapterLayer:
    """Bottleneck pair (W_down: D x d, W_up: d x D) without biases"""

    def __init__(self, down: Tensor, up: Tensor):
        if down.ndim != 2 or up.ndim != 2:
            raise DimensionError(f"adapter weights must be 2-D, got {down.shape} and {up.shape}")
        dim, width = down.shape
        if up.shape != (width, dim):
            raise DimensionError(f"adapter W_up {up.shape} does not mirror W_down {down.shape}")
        if width >= dim:
            raise DimensionError(f"adapter width d={width} must be smaller than D={dim}")
        self.down = down
        self.up = up
        self.down.requires_grad = True
        self.up.requires_grad = True

    @property
    def dim(self) -> int:
        return self.down.shape[0]

    @property
    def width(self) -> int:
        return self.down.shape[1]

    def parameters(self) -> List[Tensor]:
        return [self.down, self.up]

    def num_parameters(self) -> int:
        return self.down.size + self.up.size


def adapter_forward(x_ln: Tensor, adapter: AdapterLayer) -> Tensor:
    """In-context features: ``x_ln @ W_down @ W_up``.

    Args:
        x_ln: LN1 output of the hosting block, shape [..., T, D]
        adapter: Bottleneck pair

    Returns:
        Tensor with the same shape as ``x_ln``
    """
    if x_ln.shape[-1] != adapter.dim:
        raise DimensionError(f"adapter expects width {adapter.dim}, input has shape {x_ln.shape}")
    return matmul(matmul(x_ln, adapter.down), adapter.up)


class AdapterSet:
    """Adapters keyed by encoder layer, then by projector (q/k/v)"""

    def __init__(self, layers: Mapping[int, Mapping[str, AdapterLayer]]):
        self.layers: "OrderedDict[int, OrderedDict[str, AdapterLayer]]" = OrderedDict()
        for index in sorted(layers):
            self.layers[index] = OrderedDict(
                (p, layers[index][p]) for p in PROJECTOR_ORDER if p in layers[index]
            )

    def get(self, layer: int) -> Optional[Mapping[str, AdapterLayer]]:
        return self.layers.get(layer)

    def __len__(self) -> int:
        return sum(len(per_layer) for per_layer in self.layers.values())

    def __iter__(self) -> Iterator[Tuple[int, str, AdapterLayer]]:
        for index, per_layer in self.layers.items():
            for projector, adapter in per_layer.items():
                yield index, projector, adapter

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for index, projector, adapter in self:
            named[f"{ADAPTER_PREFIX}layer{index}.{projector}.down"] = adapter.down
            named[f"{ADAPTER_PREFIX}layer{index}.{projector}.up"] = adapter.up
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(adapter.num_parameters() for _, _, adapter in self)

    def check_dim(self, dim: int) -> None:
        for index, projector, adapter in self:
            if adapter.dim != dim:
                raise DimensionError(
                    f"adapter layer{index}.{projector} has width {adapter.dim}, encoder D={dim}"
                )

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters().items())

    def astype(self, dtype) -> "AdapterSet":
        return AdapterSet({
            index: {p: AdapterLayer(a.down.astype(dtype), a.up.astype(dtype)) for p, a in per_layer.items()}
            for index, per_layer in self.layers.items()
        })

    def save(self, path: str) -> str:
        return ntw1.save(path, self.to_arrays())

    @classmethod
    def from_arrays(cls, entries: Mapping[str, np.ndarray], adapter_cfg: AdapterConfig,
                    enc_cfg: EncoderConfig) -> "AdapterSet":
        schema = adapter_schema(adapter_cfg, enc_cfg)
        ntw1.check_schema(entries, schema, kind="adapters")
        layers: Dict[int, Dict[str, AdapterLayer]] = {}
        for index in adapter_cfg.resolve_layers(enc_cfg.depth):
            layers[index] = {}
            for projector in adapter_cfg.projectors:
                stem = f"{ADAPTER_PREFIX}layer{index}.{projector}"
                layers[index][projector] = AdapterLayer(
                    Tensor(entries[f"{stem}.down"], requires_grad=True, name=f"{stem}.down"),
                    Tensor(entries[f"{stem}.up"], requires_grad=True, name=f"{stem}.up"),
                )
        return cls(layers)

    @classmethod
    def load(cls, path: str, adapter_cfg: AdapterConfig, enc_cfg: EncoderConfig) -> "AdapterSet":
        entries = ntw1.select(ntw1.load(path), ADAPTER_PREFIX)
        return cls.from_arrays(entries, adapter_cfg, enc_cfg)


def adapter_schema(adapter_cfg: AdapterConfig, enc_cfg: EncoderConfig) -> "OrderedDict[str, Tuple[int, int]]":
    schema: "OrderedDict[str, Tuple[int, int]]" = OrderedDict()
    for index in adapter_cfg.resolve_layers(enc_cfg.depth):
        for projector in adapter_cfg.projectors:
            stem = f"{ADAPTER_PREFIX}layer{index}.{projector}"
            schema[f"{stem}.down"] = (enc_cfg.dim, adapter_cfg.d)
            schema[f"{stem}.up"] = (adapter_cfg.d, enc_cfg.dim)
    return schema


def attach(adapter_cfg: AdapterConfig, enc_cfg: EncoderConfig, seed: int) -> AdapterSet:
    """Create fresh adapters for every (layer, projector) pair.

    W_down is drawn from a seeded normal (sigma 0.02); W_up starts at exactly
    zero so the adapted encoder reproduces the frozen one until trained.

    Args:
        adapter_cfg: Placement and bottleneck width
        enc_cfg: Host encoder description
        seed: Run seed (the adapter stream is derived from it)

    Returns:
        AdapterSet with requires_grad leaves
    """
    if adapter_cfg.d >= enc_cfg.dim:
        raise DimensionError(f"adapter width d={adapter_cfg.d} must be smaller than D={enc_cfg.dim}")
    rng = make_rng(seed, "adapters")
    layers: Dict[int, Dict[str, AdapterLayer]] = {}
    for index in adapter_cfg.resolve_layers(enc_cfg.depth):
        layers[index] = {}
        for projector in adapter_cfg.projectors:
            stem = f"{ADAPTER_PREFIX}layer{index}.{projector}"
            down = rng.normal(0.0, DOWN_INIT_STD, size=(enc_cfg.dim, adapter_cfg.d)).astype(np.float32)
            up = np.zeros((adapter_cfg.d, enc_cfg.dim), dtype=np.float32)
            layers[index][projector] = AdapterLayer(
                Tensor(down, requires_grad=True, name=f"{stem}.down"),
                Tensor(up, requires_grad=True, name=f"{stem}.up"),
            )
    adapters = AdapterSet(layers)
    logger.debug(f"Attached {len(adapters)} adapters ({adapters.num_parameters()} parameters)")
    return adapters


def adapter_param_count(adapter_cfg: AdapterConfig, enc_cfg: EncoderConfig) -> int:
    """|layers| x |projectors| x 2 D d"""
    layers = adapter_cfg.resolve_layers(enc_cfg.depth)
    return len(layers) * len(adapter_cfg.projectors) * 2 * enc_cfg.dim * adapter_cfg.d
