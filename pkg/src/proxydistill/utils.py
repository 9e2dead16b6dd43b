"""Shared small utilities: seed derivation, schedules, determinism knobs."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Iterator

import numpy as np
import torch

MAX_SEED = 2**31 - 1


def derive_seed(*parts: Any) -> int:
    """Derive a stable sub-seed from a tuple of parts.

    Hashes the repr of the parts with sha256 so that streams keyed by
    (seed, purpose, epoch, ...) are independent of each other and stable
    across processes.  Returns a non-negative int that fits in 31 bits so it
    is accepted by both numpy and torch seeding APIs.
    """
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (MAX_SEED + 1)


def make_generator(*parts: Any) -> torch.Generator:
    """torch.Generator seeded from derive_seed(*parts)."""
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def make_rng(*parts: Any) -> np.random.Generator:
    """numpy Generator seeded from derive_seed(*parts)."""
    return np.random.default_rng(derive_seed(*parts))


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from base_lr at epoch 0 toward 0 at total_epochs.

    Evaluated per epoch; a phase of length 1 just uses base_lr.
    """
    if total_epochs <= 1:
        return base_lr
    t = epoch / (total_epochs - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def configure_determinism(deterministic: bool = True) -> None:
    """Pin the knobs that make CPU runs bit-reproducible.

    Single-threaded execution is the main one: reduction order inside a
    parallel matmul is not stable otherwise.
    """
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def batch_indices(n: int, batch_size: int,
                  rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    """Yield index batches over [0, n); shuffled when rng is given.

    The final partial batch is kept.
    """
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[N, H, W, C] numpy image block -> [N, C, H, W] torch tensor."""
    if images.ndim != 4:
        raise ValueError(f"expected [N,H,W,C] images, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def canonical_json(obj: Any) -> str:
    """Whitespace- and key-order-independent JSON encoding."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
