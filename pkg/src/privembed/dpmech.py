"""Local differential privacy machinery.

L1 clipping, seeded Laplace sampling, the clip-then-noise privacy layer,
and an append-only budget ledger. The noise scale is always derived from
the worst-case sensitivity of the clipped input (twice the clipping
threshold) so the guarantee never depends on data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigError

__all__ = [
    "DpConfig",
    "NoiseSource",
    "BudgetLedger",
    "LedgerEntry",
    "clip_l1",
    "laplace_sample",
    "dp_transform",
    "DpLayer",
]


@dataclass(frozen=True)
class DpConfig:
    """Privacy parameters for one clip-then-noise release.

    ``epsilon`` may be ``math.inf``, which means "clipping only, no noise".
    """

    clip_threshold: float
    epsilon: float

    def __post_init__(self):
        if not (self.clip_threshold > 0 and math.isfinite(self.clip_threshold)):
            raise ConfigError(f"clip threshold must be positive and finite, got {self.clip_threshold}")
        if not self.epsilon > 0:
            raise ConfigError(f"privacy budget must be positive, got {self.epsilon}")

    @property
    def sensitivity(self) -> float:
        """Worst-case L1 distance between any two clipped inputs."""
        return 2.0 * self.clip_threshold

    @property
    def scale(self) -> float:
        """Laplace scale; exactly 0 for an infinite budget."""
        if math.isinf(self.epsilon):
            return 0.0
        return self.sensitivity / self.epsilon


class NoiseSource:
    """Seeded uniform-deviate stream feeding the Laplace sampler.

    A single source must not be shared between threads; ``split`` derives an
    independent child stream and is the sanctioned way to parallelize.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self.position = 0
        self._rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key))
        )

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles uniform in [0, 1); advances the stream position."""
        u = self._rng.random(int(n))
        self.position += int(n)
        return u

    def split(self, key: int) -> "NoiseSource":
        return NoiseSource(self.seed, self.spawn_key + (int(key),))


def laplace_sample(source: NoiseSource, scale: float, dim: int) -> np.ndarray:
    """``dim`` independent draws from Laplace(0, scale) via the inverse CDF.

    Each component is ``-scale * sign(u) * ln(1 - 2|u|)`` with ``u`` uniform
    in (-0.5, 0.5). A scale of exactly 0 returns the zero vector without
    consuming the stream.
    """
    if scale < 0:
        raise ConfigError(f"noise scale must be nonnegative, got {scale}")
    dim = int(dim)
    if scale == 0.0:
        return np.zeros(dim)
    u = source.uniforms(dim) - 0.5
    # u == -0.5 occurs with probability 2**-53; nudge it off the endpoint
    u[u == -0.5] = np.nextafter(-0.5, 0.0)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def _clip_coeffs(z: np.ndarray, clip_threshold: float) -> np.ndarray:
    """Per-row scaling coefficients ``1 / max(1, ||row||_1 / C)``."""
    norms = np.abs(z).sum(axis=-1, keepdims=True)
    return 1.0 / np.maximum(1.0, norms / clip_threshold)


def clip_l1(z, clip_threshold: float) -> np.ndarray:
    """Scale ``z`` down so its L1 norm is at most the threshold.

    Accepts a vector or a matrix; matrix rows are clipped independently.
    Direction is preserved and inputs already inside the ball pass through
    unchanged.
    """
    if not clip_threshold > 0:
        raise ConfigError(f"clip threshold must be positive, got {clip_threshold}")
    z = np.asarray(z, dtype=np.float64)
    return z * _clip_coeffs(z, clip_threshold)


def dp_transform(z, cfg: DpConfig, source: NoiseSource | None = None) -> np.ndarray:
    """Clip ``z`` and add per-component Laplace noise at ``cfg.scale``.

    With an infinite budget this reduces to pure clipping and ``source`` is
    not touched. Rows of a matrix input are treated as independent releases.
    """
    out = clip_l1(z, cfg.clip_threshold)
    if cfg.scale > 0.0:
        if source is None:
            raise ConfigError("a NoiseSource is required for a finite privacy budget")
        out = out + laplace_sample(source, cfg.scale, out.size).reshape(out.shape)
    return out


class DpLayer:
    """Clip-then-noise layer with a straight-through backward rule.

    The layer has no learnable parameters. Noise is an additive constant in
    the backward pass, and the clipping coefficient computed in the forward
    pass is treated as a constant multiplier of the gradient (no gradient
    through the norm). With ``cfg=None`` the layer is a plain identity,
    which is how training runs before a clipping threshold exists.
    """

    def __init__(self, cfg: DpConfig | None = None):
        self.cfg = cfg
        self._coeffs: np.ndarray | float | None = None

    def forward(self, z, source: NoiseSource | None = None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.cfg is None:
            self._coeffs = 1.0
            return z
        coeffs = _clip_coeffs(z, self.cfg.clip_threshold)
        out = z * coeffs
        if self.cfg.scale > 0.0:
            if source is None:
                raise ConfigError("a NoiseSource is required for a finite privacy budget")
            out = out + laplace_sample(source, self.cfg.scale, out.size).reshape(out.shape)
        self._coeffs = coeffs
        return out

    def backward(self, grad_out) -> np.ndarray:
        if self._coeffs is None:
            raise ConfigError("backward called before forward")
        return np.asarray(grad_out, dtype=np.float64) * self._coeffs


@dataclass(frozen=True)
class LedgerEntry:
    release_id: str
    epsilon: float


class BudgetLedger:
    """Append-only record of privacy spend under sequential composition."""

    def __init__(self, entries=()):
        self._entries: list[LedgerEntry] = list(entries)

    def record(self, epsilon: float, release_id: str | None = None) -> LedgerEntry:
        """Append one release; the budget must be positive and finite."""
        epsilon = float(epsilon)
        if not (epsilon > 0) or math.isinf(epsilon):
            raise BudgetError(f"recorded budget must be positive and finite, got {epsilon}")
        if release_id is None:
            release_id = f"release-{len(self._entries)}"
        entry = LedgerEntry(str(release_id), epsilon)
        self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def total(self) -> float:
        return float(sum(e.epsilon for e in self._entries))

    def __len__(self) -> int:
        return len(self._entries)
