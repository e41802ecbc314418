"""
Randomness policy and uncertainty quantification.

Every stochastic operation in the package draws its random numbers from a generator built
by `generator(seed, *labels)`, so a root seed plus the labels recorded in a run manifest
replay any result bit-exactly.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)

Label = Union[str, int]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class EstimateCI:
    """A point estimate with a two-sided confidence interval."""

    mean: float
    half_width: float
    confidence: float
    n: int
    lower: Optional[float] = None
    upper: Optional[float] = None

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError(f"half_width must be >= 0, got {self.half_width}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"confidence must lie in (0, 1), got {self.confidence}")
        # Symmetric intervals leave the bounds implicit.
        if self.lower is None:
            object.__setattr__(self, "lower", self.mean - self.half_width)
        if self.upper is None:
            object.__setattr__(self, "upper", self.mean + self.half_width)

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    @property
    def std_error(self) -> float:
        return self.half_width / _z(self.confidence)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_stderr: float


def _z(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return float(sps.norm.ppf(0.5 + confidence / 2.0))


def mean_ci(samples: Sequence[float], confidence: float = 0.95) -> EstimateCI:
    """Sample mean with a normal-approximation interval."""
    values = np.asarray(samples, dtype=np.float64)
    n = int(values.size)
    if n < 2:
        raise ValueError(f"mean_ci needs at least 2 samples, got {n}")
    mean = float(values.mean())
    sd = float(values.std(ddof=1))
    return EstimateCI(mean, _z(confidence) * sd / math.sqrt(n), confidence, n)


def proportion_ci(hits: int, n: int, confidence: float = 0.95) -> EstimateCI:
    """
    Wilson score interval for a binomial proportion.

    `mean` is the raw proportion hits/n; `lower`/`upper` are the Wilson bounds, centred on
    the Wilson centre, and `half_width` is their half distance.
    """
    if n < 1:
        raise ValueError(f"proportion_ci needs n >= 1, got {n}")
    if not 0 <= hits <= n:
        raise ValueError(f"hits must lie in [0, {n}], got {hits}")
    z = _z(confidence)
    p = hits / n
    z2n = z * z / n
    centre = (p + z2n / 2.0) / (1.0 + z2n)
    half_width = z / (1.0 + z2n) * math.sqrt(p * (1.0 - p) / n + z2n / (4.0 * n))
    return EstimateCI(
        mean=p,
        half_width=half_width,
        confidence=confidence,
        n=n,
        lower=max(0.0, centre - half_width),
        upper=min(1.0, centre + half_width),
    )


def _label_word(label: Label) -> int:
    if isinstance(label, bool):
        raise TypeError("stream labels must be str or int, not bool")
    if isinstance(label, int):
        if label < 0:
            raise ValueError(f"integer stream labels must be >= 0, got {label}")
        return label & _MASK64
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_stream(seed: int, *labels: Label) -> int:
    """
    Derive a 64-bit sub-seed from a root seed and a label path.

    Pure and order independent: the result depends only on (seed, labels). String labels are
    hashed with SHA-256; the label path is then mixed by numpy's SeedSequence.
    """
    words = [_label_word(label) for label in labels]
    seq = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(words))
    state = seq.generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def generator(seed: int, *labels: Label) -> np.random.Generator:
    """A counter-based (Philox) generator for the stream (seed, *labels)."""
    return np.random.Generator(np.random.Philox(derive_stream(seed, *labels)))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    if len(x) < 2:
        raise ValueError("linear_fit needs at least 2 points")
    result = sps.linregress(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    stderr = float(result.stderr) if len(x) > 2 else 0.0
    return LinearFit(float(result.slope), float(result.intercept), stderr)
