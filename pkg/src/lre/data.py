"""Deterministic synthetic datasets for the toy-scale training harness.

Three task families: sinusoid classification (1D time series), oriented
gratings (2D grids), and motif-presence multilabel sequences. Each comes
with an independent oracle (frequency-energy bank, motif scan) that proves
separability without going through the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str                     # freq1d | pattern2d | multilabel
    seed: int = 0
    classes: int = 6
    length: int = 3750
    snr: float = 10.0             # signal power / noise power; inf = clean
    grid: tuple[int, int] = (32, 32)
    labels_per_sample: int = 3
    noise_symbols: int = 8        # multilabel vocab beyond the motif symbols
    occurrences: tuple[int, int] = (4, 12)  # per active motif, inclusive range

    def __post_init__(self):
        if self.kind not in ("freq1d", "pattern2d", "multilabel"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        lo, hi = self.occurrences
        if not (1 <= lo <= hi):
            raise ConfigError("occurrences range must satisfy 1 <= lo <= hi")

    @property
    def vocab(self) -> int:
        return self.classes + self.noise_symbols

    @property
    def in_channels(self) -> int:
        return self.vocab if self.kind == "multilabel" else 1

    @property
    def multilabel(self) -> bool:
        return self.kind == "multilabel"


@dataclass
class Dataset:
    x: np.ndarray                 # (n, L, C) or (n, H, W, C)
    y: np.ndarray                 # (n,) int labels or (n, C) binary
    spec: SyntheticTaskSpec
    symbols: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.x)


def class_frequencies(spec: SyntheticTaskSpec) -> np.ndarray:
    """Cycles per window for each class; spaced to stay well below Nyquist."""
    return np.array([8 * (c + 1) + 4 * c * c for c in range(spec.classes)],
                    dtype=np.float64)


def generate(spec: SyntheticTaskSpec, n: int) -> Dataset:
    if n < 1:
        raise ConfigError("need n >= 1 samples")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "freq1d":
        return _gen_freq1d(spec, n, rng)
    if spec.kind == "pattern2d":
        return _gen_pattern2d(spec, n, rng)
    return _gen_multilabel(spec, n, rng)


def _noise_std(spec: SyntheticTaskSpec) -> float:
    if np.isinf(spec.snr):
        return 0.0
    return float(np.sqrt(0.5 / spec.snr))  # unit-amplitude sinusoid has power 1/2


def _gen_freq1d(spec: SyntheticTaskSpec, n: int, rng) -> Dataset:
    length = spec.length
    freqs = class_frequencies(spec)
    y = rng.integers(0, spec.classes, size=n)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    t = np.arange(length) / length
    x = np.sin(2 * np.pi * freqs[y][:, None] * t[None, :] + phases[:, None])
    x += _noise_std(spec) * rng.standard_normal((n, length))
    return Dataset(x=x[..., None].astype(np.float32), y=y.astype(np.int64), spec=spec)


def _gen_pattern2d(spec: SyntheticTaskSpec, n: int, rng) -> Dataset:
    h, w = spec.grid
    y = rng.integers(0, spec.classes, size=n)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    angles = np.pi * y / spec.classes
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = 4.0 / max(h, w)
    proj = (np.cos(angles)[:, None, None] * ii[None]
            + np.sin(angles)[:, None, None] * jj[None])
    x = np.sin(2 * np.pi * f * proj + phases[:, None, None])
    x += _noise_std(spec) * rng.standard_normal((n, h, w))
    return Dataset(x=x[..., None].astype(np.float32), y=y.astype(np.int64), spec=spec)


def _gen_multilabel(spec: SyntheticTaskSpec, n: int, rng) -> Dataset:
    """Symbol sequences; label c is on iff motif symbol c occurs anywhere."""
    length = spec.length
    c, v = spec.classes, spec.vocab
    symbols = rng.integers(c, v, size=(n, length))  # background noise symbols
    y = np.zeros((n, c), dtype=np.int64)
    for i in range(n):
        chosen = rng.choice(c, size=spec.labels_per_sample, replace=False)
        y[i, chosen] = 1
        reps = rng.integers(spec.occurrences[0], spec.occurrences[1] + 1,
                            size=len(chosen))
        pos = rng.choice(length, size=int(reps.sum()), replace=False)
        offset = 0
        for lab, r in zip(chosen, reps):
            symbols[i, pos[offset:offset + r]] = lab
            offset += r
        # a noise draw can never collide with a motif symbol: ranges are disjoint
    x = np.zeros((n, length, v), dtype=np.float32)
    np.put_along_axis(x, symbols[..., None], 1.0, axis=-1)
    return Dataset(x=x, y=y, spec=spec, symbols=symbols)


# ---------------------------------------------------------------------------
# independent oracles

def frequency_oracle(x: np.ndarray, spec: SyntheticTaskSpec) -> np.ndarray:
    """Predict classes from the energy at each candidate frequency."""
    sig = x[..., 0]
    t = np.arange(spec.length) / spec.length
    freqs = class_frequencies(spec)
    basis = np.exp(-2j * np.pi * freqs[:, None] * t[None, :])  # (C, L)
    energy = np.abs(sig @ basis.T.conj())
    return np.argmax(energy, axis=-1)


def motif_oracle(symbols: np.ndarray, classes: int) -> np.ndarray:
    """Scan each sequence for the motif symbols; exact label reconstruction."""
    n = symbols.shape[0]
    y = np.zeros((n, classes), dtype=np.int64)
    for c in range(classes):
        y[:, c] = (symbols == c).any(axis=1)
    return y
