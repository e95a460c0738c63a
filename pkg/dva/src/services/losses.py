import logging
from typing import NamedTuple, Optional, Sequence

import numpy as np

from dva.src.models.exceptions import ContractError, DegenerateInputError, DimensionError
from dva.src.models.schemas import LossConfig
from dva.src.services import tensor as T
from dva.src.services.tensor import Tensor
from dva.src.utils import ntw1
from dva.src.utils.seeding import make_rng

# Initialize logger
logger = logging.getLogger(__name__)

PROXY_ENTRY = "proxies.all"
PROXY_INIT_STD = 0.02


class ProxyBank:
    """Learnable category proxies.

    Rows ``0 .. n-1`` are the original categories C^o; row ``n`` is the
    background proxy c_b. Rows are stored unnormalized.
    """

    def __init__(self, proxies: Tensor, num_classes: int):
        if proxies.ndim != 2 or proxies.shape[0] != num_classes + 1:
            raise DimensionError(
                f"proxy bank needs {num_classes + 1} rows ({num_classes} categories + background), "
                f"got shape {proxies.shape}"
            )
        self.proxies = proxies
        self.proxies.requires_grad = True
        self.num_classes = num_classes

    @property
    def dim(self) -> int:
        return self.proxies.shape[1]

    @property
    def background_index(self) -> int:
        return self.num_classes

    @property
    def original_rows(self) -> list:
        return list(range(self.num_classes))

    @property
    def all_rows(self) -> list:
        return list(range(self.num_classes + 1))

    def parameters(self) -> list:
        return [self.proxies]

    def num_parameters(self) -> int:
        return self.proxies.size

    @classmethod
    def init(cls, num_classes: int, dim: int, seed: int) -> "ProxyBank":
        if num_classes < 1:
            raise ContractError(f"proxy bank needs at least one category, got {num_classes}")
        rng = make_rng(seed, "proxies")
        data = rng.normal(0.0, PROXY_INIT_STD, size=(num_classes + 1, dim)).astype(np.float32)
        return cls(Tensor(data, requires_grad=True, name=PROXY_ENTRY), num_classes)

    def astype(self, dtype) -> "ProxyBank":
        return ProxyBank(self.proxies.astype(dtype), self.num_classes)

    def save(self, path: str) -> str:
        return ntw1.save(path, {PROXY_ENTRY: self.proxies.data})

    @classmethod
    def load(cls, path: str, num_classes: int, dim: int) -> "ProxyBank":
        entries = ntw1.select(ntw1.load(path), "proxies.")
        ntw1.check_schema(entries, {PROXY_ENTRY: (num_classes + 1, dim)}, kind="proxies")
        return cls(Tensor(entries[PROXY_ENTRY], requires_grad=True, name=PROXY_ENTRY), num_classes)


def proxy_distance(e: np.ndarray, c: np.ndarray) -> float:
    """Squared Euclidean distance between the L2-normalized inputs (= 2 - 2 cos)"""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if e.shape != c.shape:
        raise DimensionError(f"proxy_distance shape mismatch: {e.shape} vs {c.shape}")
    ne, nc = np.linalg.norm(e), np.linalg.norm(c)
    if ne == 0 or nc == 0:
        raise DegenerateInputError("proxy_distance() of a zero vector")
    diff = e / ne - c / nc
    return float(diff @ diff)


def distance_matrix(embeddings: Tensor, proxies: Tensor) -> Tensor:
    """[B, K] squared distances between normalized embeddings and normalized proxies"""
    if embeddings.ndim != 2 or proxies.ndim != 2 or embeddings.shape[1] != proxies.shape[1]:
        raise DimensionError(f"cannot compare embeddings {embeddings.shape} with proxies {proxies.shape}")
    sim = T.matmul(T.l2_normalize(embeddings), T.transpose(T.l2_normalize(proxies)))
    return 2.0 - sim * 2.0


def _nca(embeddings: Tensor, labels: Sequence[int], proxies: Tensor, active_set: Sequence[int]) -> Tensor:
    active = [int(r) for r in active_set]
    if not active:
        raise ContractError("active proxy set is empty")
    position = {row: i for i, row in enumerate(active)}
    labels = [int(y) for y in labels]
    if len(labels) != embeddings.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {embeddings.shape[0]} embeddings")
    outside = sorted({y for y in labels if y not in position})
    if outside:
        raise ContractError(f"labels {outside} are not in the active proxy set")
    dist = distance_matrix(embeddings, T.take_rows(proxies, active))
    log_probs = T.log_softmax(-dist)
    picked = log_probs[np.arange(len(labels)), np.asarray([position[y] for y in labels])]
    return -T.mean(picked)


def proxy_loss(embeddings: Tensor, labels: Sequence[int], bank: ProxyBank,
               active_set: Optional[Sequence[int]] = None) -> Tensor:
    """Softmax-over-distances proxy loss, averaged over the batch.

    Args:
        embeddings: [B, D] batch (unnormalized)
        labels: Row index of each sample's proxy
        bank: Proxy bank
        active_set: Rows entering the softmax (defaults to every row, background included)

    Returns:
        Scalar tensor
    """
    if active_set is None:
        active_set = bank.all_rows
    return _nca(embeddings, labels, bank.proxies, active_set)


def dpt_loss(embeddings: Tensor, labels: Sequence[int], bank: ProxyBank,
             detach_proxies: bool = False) -> Tensor:
    """Distillation term: original-image embeddings against the category proxies C^o"""
    if any(int(y) == bank.background_index for y in labels):
        raise ContractError("background label passed to the distillation term")
    proxies = bank.proxies.detach() if detach_proxies else bank.proxies
    return _nca(embeddings, labels, proxies, bank.original_rows)


class LossBreakdown(NamedTuple):
    total: Tensor
    proxy: float
    dpt: float


def total_loss(opa_embeddings: Tensor, opa_labels: Sequence[int],
               orig_embeddings: Tensor, orig_labels: Sequence[int],
               bank: ProxyBank, cfg: LossConfig, use_dpt: bool = True,
               opa_active_set: Optional[Sequence[int]] = None) -> LossBreakdown:
    """L = L_proxy(OPA batch over C-hat) + beta * L_dpt(original batch over C^o).

    The distillation value is always computed and reported; it joins the
    objective only when ``use_dpt`` is set and beta > 0.

    Args:
        opa_embeddings: Embeddings of the I_d / I_b samples
        opa_labels: Their labels (background samples use ``bank.background_index``)
        orig_embeddings: Embeddings of the unmodified images of the same iteration
        orig_labels: Their category labels
        bank: Proxy bank shared by both terms
        cfg: beta and proxy-detach switch
        use_dpt: Include the distillation term
        opa_active_set: Rows of the proxy softmax (defaults to every row)

    Returns:
        LossBreakdown(total tensor, proxy value, dpt value)
    """
    l_proxy = proxy_loss(opa_embeddings, opa_labels, bank, opa_active_set)
    l_dpt = dpt_loss(orig_embeddings, orig_labels, bank, cfg.detach_proxies_in_dpt)
    total = l_proxy
    if use_dpt and cfg.beta > 0:
        total = l_proxy + l_dpt * cfg.beta
    return LossBreakdown(total=total, proxy=l_proxy.item(), dpt=l_dpt.item())
