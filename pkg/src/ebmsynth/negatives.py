"""Negative-sample generation for contrastive training.

A negative starts from a base sequence (the reference itself, a degraded
hypothesis, or a pre-generated file) and is corrupted by masking or warping:

  RM  independent per-cell replacement with the fill value
  TM  one contiguous block of frames replaced entirely
  FM  a contiguous band of frequency bins replaced across all frames
  TW  uniform temporal resampling by a compress/stretch factor

Counts use round-half-up; whenever a positive masking fraction would round to
zero elements, one element is still masked so a drawn negative never equals
the positive. With several methods enabled, each drawn negative applies one
method picked uniformly ("single-method-per-sample" / "uniform-mix"); the
"compose-all" policy instead applies every enabled method in a fixed order
(RM, TM, FM, TW) for experimentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import degrade_hypothesis, read_features, round_half_up

__all__ = ["NegativeSpec", "HypothesisSource", "time_mask", "freq_mask",
           "random_mask", "time_warp", "draw_negative"]

_SOURCES = ("reference", "degraded-hypothesis", "file")
_COMBINATIONS = ("single-method-per-sample", "uniform-mix", "compose-all")


@dataclass(frozen=True)
class NegativeSpec:
    """Declarative description of one negative-sampling pipeline."""
    source: str = "reference"
    rm: float | None = None   # per-cell masking probability
    tm: float | None = None   # masked fraction of frames
    fm: float | None = None   # masked fraction of frequency bins
    tw: float | None = None   # warp factor; >1 compresses, <1 stretches
    combination: str = "single-method-per-sample"
    fill: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"unknown source '{self.source}', expected one of {_SOURCES}")
        if self.combination not in _COMBINATIONS:
            raise ValueError(f"unknown combination '{self.combination}'")
        for name in ("rm", "tm", "fm"):
            p = getattr(self, name)
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} fraction {p} outside [0, 1]")
        if self.tw is not None and self.tw <= 0:
            raise ValueError(f"warp factor must be > 0, got {self.tw}")
        if self.source == "reference" and not self.methods():
            raise ValueError("reference source needs at least one method enabled "
                             "(the negative would equal the positive)")

    def methods(self) -> list[tuple[str, float]]:
        out = []
        for name in ("rm", "tm", "fm", "tw"):
            value = getattr(self, name)
            if value is not None:
                out.append((name, value))
        return out

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "NegativeSpec":
        return cls(**d)


@dataclass(frozen=True)
class HypothesisSource:
    """Provider of base sequences for non-reference negatives (and for
    sampler initialisation): either the parametric degradation operator or a
    manifest of pre-generated feature files keyed by utterance id."""
    kind: str = "degrade"
    smoothing_width: int = 5
    noise_scale: float = 0.1
    files: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.kind not in ("degrade", "files"):
            raise ValueError(f"unknown hypothesis source kind '{self.kind}'")
        if self.kind == "files" and not self.files:
            raise ValueError("files source needs an id -> path mapping")

    def base(self, reference: np.ndarray, rng: np.random.Generator,
             utt_id: str | None = None) -> np.ndarray:
        if self.kind == "degrade":
            return degrade_hypothesis(reference, self.smoothing_width,
                                      self.noise_scale, rng)
        try:
            path = self.files[utt_id]
        except KeyError:
            raise KeyError(f"no hypothesis file for utterance '{utt_id}'") from None
        return read_features(path)


def _masked_count(p: float, n: int) -> int:
    count = round_half_up(p * n)
    if p > 0 and count == 0:
        count = 1  # a drawn negative must differ from the positive
    return min(count, n)


def time_mask(Y: np.ndarray, p: float, fill: float,
              rng: np.random.Generator) -> np.ndarray:
    """Replace one contiguous block of round(p*T) frames with the fill value."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction {p} outside [0, 1]")
    Y = np.asarray(Y, dtype=np.float64)
    out = Y.copy()
    count = _masked_count(p, Y.shape[0])
    if count == 0:
        return out
    start = int(rng.integers(0, Y.shape[0] - count + 1))
    out[start:start + count, :] = fill
    return out


def freq_mask(Y: np.ndarray, p: float, fill: float,
              rng: np.random.Generator) -> np.ndarray:
    """Replace round(p*F) contiguous frequency bins across all frames."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction {p} outside [0, 1]")
    Y = np.asarray(Y, dtype=np.float64)
    out = Y.copy()
    count = _masked_count(p, Y.shape[1])
    if count == 0:
        return out
    start = int(rng.integers(0, Y.shape[1] - count + 1))
    out[:, start:start + count] = fill
    return out


def random_mask(Y: np.ndarray, p: float, fill: float,
                rng: np.random.Generator) -> np.ndarray:
    """Replace each time-frequency cell independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction {p} outside [0, 1]")
    Y = np.asarray(Y, dtype=np.float64)
    if p == 0.0:
        return Y.copy()
    mask = rng.random(Y.shape) < p
    if not mask.any():
        mask[rng.integers(0, Y.shape[0]), rng.integers(0, Y.shape[1])] = True
    return np.where(mask, fill, Y)


def time_warp(Y: np.ndarray, f: float) -> np.ndarray:
    """Uniformly resample the time axis to round(T/f) frames by linear
    interpolation; f > 1 compresses, f < 1 stretches. A single output frame
    takes input frame 0."""
    if f <= 0:
        raise ValueError(f"warp factor must be > 0, got {f}")
    Y = np.asarray(Y, dtype=np.float64)
    frames = Y.shape[0]
    out_frames = round_half_up(frames / f)
    if out_frames < 1:
        raise ValueError(f"warp factor {f} leaves no frames (T={frames})")
    if out_frames == 1:
        return Y[:1].copy()
    positions = np.arange(out_frames, dtype=np.float64) * (frames - 1) / (out_frames - 1)
    lo = np.floor(positions).astype(np.int64)
    frac = positions - lo
    hi = np.minimum(lo + 1, frames - 1)
    out = np.empty((out_frames, Y.shape[1]))
    exact = frac == 0.0
    out[exact] = Y[lo[exact]]
    blend = ~exact
    out[blend] = (Y[lo[blend]] * (1.0 - frac[blend, None])
                  + Y[hi[blend]] * frac[blend, None])
    return out


_APPLIERS = {
    "rm": lambda Y, v, fill, rng: random_mask(Y, v, fill, rng),
    "tm": lambda Y, v, fill, rng: time_mask(Y, v, fill, rng),
    "fm": lambda Y, v, fill, rng: freq_mask(Y, v, fill, rng),
    "tw": lambda Y, v, fill, rng: time_warp(Y, v),
}


def draw_negative(spec: NegativeSpec, reference: np.ndarray,
                  source: HypothesisSource | None = None,
                  rng: np.random.Generator | None = None,
                  utt_id: str | None = None) -> np.ndarray:
    """Draw one negative sample for a reference sequence."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    reference = np.asarray(reference, dtype=np.float64)
    if spec.source == "reference":
        base = reference
    else:
        if source is None:
            raise ValueError(f"source '{spec.source}' needs a HypothesisSource")
        base = source.base(reference, rng, utt_id=utt_id)
    methods = spec.methods()
    if not methods:
        return base.copy()
    if spec.combination == "compose-all":
        out = base
        for name, value in methods:
            out = _APPLIERS[name](out, value, spec.fill, rng)
        return out
    name, value = methods[int(rng.integers(0, len(methods)))]
    return _APPLIERS[name](base, value, spec.fill, rng)
