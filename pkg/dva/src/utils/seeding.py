import numpy as np

# One independent stream per consumer so that, e.g., changing the adapter
# placement never shifts the data order.
STREAMS = {
    "backbone": 1,
    "adapters": 2,
    "proxies": 3,
    "train": 4,
    "synthetic": 5,
}


def make_rng(seed: int, stream: str, *substream: int) -> np.random.Generator:
    """Seeded generator for a named stream (optionally split further)"""
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream: {stream}")
    return np.random.default_rng([int(seed), STREAMS[stream], *(int(s) for s in substream)])


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +-bound*std"""
    values = rng.standard_normal(size=shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(size=int(outside.sum()))
        outside = np.abs(values) > bound
    return (values * std).astype(np.float32)
