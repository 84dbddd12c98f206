"""Batched differentially-private per-bucket counters.

Events are staged exactly; when the staged mass reaches ``batch_size`` the
batch is released into the global totals with independent noise per bucket.
Only the noisy totals are ever readable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import PCAttribute, get_pc


@dataclass(frozen=True)
class DPParams:
    epsilon: float = 0.8
    delta: float = 0.05
    sensitivity: float = 1.0
    batch_size: int = 10
    mechanism: str = "gaussian"

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        if self.mechanism not in ("gaussian", "laplace"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DPParams":
        return cls(**{k: d[k] for k in ("epsilon", "delta", "sensitivity", "batch_size", "mechanism") if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_sigma(params: DPParams) -> float:
    """Noise scale of the (epsilon, delta) Gaussian mechanism."""
    return math.sqrt(
        2.0 * math.log(1.25 / params.delta) * params.sensitivity ** 2 / params.epsilon ** 2
    )


def noise_scale(params: DPParams) -> float:
    """Scale parameter of the configured mechanism (std for Gaussian, b for Laplace)."""
    if params.mechanism == "laplace":
        return params.sensitivity / params.epsilon
    return gaussian_sigma(params)


class NoisyBucketCounter:
    """Per-bucket impression counter with batch-wise noise.

    Parameters
    ----------
    pc : attribute whose buckets are counted.
    params : privacy parameters; ``batch_size`` is the aggregation level.
    rng : generator or seed for the noise stream.
    sigma : optional override of the noise scale (``0`` gives exact counts,
        for tests and the internal audit channel).
    auto_flush : flush automatically when staged mass reaches ``batch_size``.
    """

    def __init__(self, pc, params: DPParams | None = None, rng=None,
                 sigma: float | None = None, auto_flush: bool = True):
        self.pc: PCAttribute = get_pc(pc)
        self.params = params or DPParams()
        self.rng = np.random.default_rng(rng)
        self.sigma = noise_scale(self.params) if sigma is None else float(sigma)
        self.auto_flush = auto_flush
        n = self.pc.n_buckets
        self.global_counts = np.zeros(n)
        self.staging = np.zeros(n)
        self.batches_flushed = 0

    @property
    def staged_mass(self) -> float:
        return float(self.staging.sum())

    def add_event(self, bucket) -> bool:
        """Stage one event; ``bucket`` is an index (hard count) or a
        per-bucket mass vector summing to one (soft count).

        Returns True when the event triggered a flush.
        """
        if isinstance(bucket, (int, np.integer)):
            self.staging[bucket] += 1.0
        else:
            self.staging += np.asarray(bucket, dtype=float)
        if self.auto_flush and self.staging.sum() >= self.params.batch_size - 1e-9:
            self.flush_batch()
            return True
        return False

    def _noise(self, rng, size):
        if self.sigma == 0:
            return np.zeros(size)
        if self.params.mechanism == "laplace":
            return rng.laplace(0.0, self.sigma, size)
        return rng.normal(0.0, self.sigma, size)

    def flush_batch(self, rng=None) -> None:
        """Fold the staged batch plus fresh noise into the global totals.

        Flushing an empty stage still draws noise (end-of-run convention).
        """
        rng = self.rng if rng is None else rng
        self.global_counts += self.staging + self._noise(rng, self.staging.shape[0])
        self.staging[:] = 0.0
        self.batches_flushed += 1

    def read_counts(self) -> np.ndarray:
        return self.global_counts.copy()

    # checkpointing
    def to_dict(self) -> dict:
        return {
            "pc": self.pc.name,
            "params": self.params.to_dict(),
            "sigma": self.sigma,
            "auto_flush": self.auto_flush,
            "global_counts": self.global_counts.tolist(),
            "staging": self.staging.tolist(),
            "batches_flushed": self.batches_flushed,
            "rng_state": self.rng.bit_generator.state,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NoisyBucketCounter":
        c = cls(d["pc"], DPParams.from_dict(d["params"]), sigma=d["sigma"],
                auto_flush=d.get("auto_flush", True))
        c.global_counts = np.asarray(d["global_counts"], dtype=float)
        c.staging = np.asarray(d["staging"], dtype=float)
        c.batches_flushed = int(d["batches_flushed"])
        c.rng.bit_generator.state = d["rng_state"]
        return c

    @classmethod
    def from_json(cls, text: str) -> "NoisyBucketCounter":
        return cls.from_dict(json.loads(text))
