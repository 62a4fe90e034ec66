"""Synthetic text-to-feature task, feature-file persistence, dataset manifests.

The synthetic task maps each token to a fixed spectral prototype row; an
utterance's feature matrix is the per-token prototype repeated for a fixed
number of frames plus Gaussian observation noise. The last feature channel is
a designated F0 carrier: it holds the utterance's fundamental-frequency track
(token-dependent base plus a slow sinusoidal contour) divided by a fixed
scale, so any hypothesis feature matrix yields an F0 readout without ever
touching waveforms.

File formats (all little-endian):
  features  magic "EBMF", u32 version, u32 T, u32 F, then T*F f64 row-major
  F0 track  magic "EBF0", u32 T, then T f64
  tokens    UTF-8 text, whitespace-separated integer ids
  manifest  JSON: format_version, split, utterances[{id, text, features, f0?}]
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

__all__ = [
    "DataError", "FileFormatError", "SyntheticTaskSpec", "Utterance",
    "DatasetManifest", "round_half_up", "prototypes", "generate_synthetic",
    "f0_from_features", "degrade_hypothesis", "write_features", "read_features",
    "write_f0", "read_f0", "write_tokens", "read_tokens", "split_dataset",
    "save_manifest", "load_manifest", "write_split", "load_utterances",
    "corpus_stats",
]

FEATURE_MAGIC = b"EBMF"
F0_MAGIC = b"EBF0"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


class DataError(Exception):
    """Dataset-level failure: missing files, bad manifests, empty inputs."""


class FileFormatError(DataError):
    """A binary file failed magic/version/size validation."""


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero toward +inf."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 8
    frames_per_token: int = 5
    feature_dim: int = 16
    noise_sigma: float = 0.05
    min_tokens: int = 4
    max_tokens: int = 10
    f0_base_hz: float = 100.0
    f0_step_hz: float = 20.0
    f0_contour_amp_hz: float = 2.0
    f0_contour_period: float = 16.0
    f0_channel_scale: float = 100.0
    voicing_threshold_hz: float = 50.0
    seed: int = 1234

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2 (last channel carries F0)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


@dataclass
class Utterance:
    id: str
    tokens: np.ndarray
    features: np.ndarray
    f0: np.ndarray | None = None


def prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-token spectral prototypes, shape (V, F); seeded by the task spec.

    The last channel holds the token's base F0 divided by the channel scale.
    """
    rng = np.random.default_rng(spec.seed)
    protos = rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.feature_dim))
    bases = spec.f0_base_hz + spec.f0_step_hz * np.arange(spec.vocab_size)
    protos[:, -1] = bases / spec.f0_channel_scale
    return protos


def _f0_track(spec: SyntheticTaskSpec, tokens: np.ndarray) -> np.ndarray:
    frames = len(tokens) * spec.frames_per_token
    token_per_frame = np.repeat(tokens, spec.frames_per_token)
    base = spec.f0_base_hz + spec.f0_step_hz * token_per_frame
    t = np.arange(frames, dtype=np.float64)
    contour = spec.f0_contour_amp_hz * np.sin(2 * np.pi * t / spec.f0_contour_period)
    return base + contour


def generate_synthetic(spec: SyntheticTaskSpec, count: int,
                       rng: np.random.Generator, start_index: int = 0) -> list[Utterance]:
    """Draw utterances: random token sequences, prototype frames plus noise."""
    if count < 1:
        raise ValueError("count must be >= 1")
    protos = prototypes(spec)
    utts = []
    for i in range(count):
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = rng.integers(0, spec.vocab_size, size=length)
        frames = length * spec.frames_per_token
        features = np.repeat(protos[tokens], spec.frames_per_token, axis=0)
        if spec.noise_sigma > 0:
            features = features + rng.normal(0.0, spec.noise_sigma,
                                             size=(frames, spec.feature_dim))
        else:
            features = features.copy()
        f0 = _f0_track(spec, tokens)
        contour = f0 - (spec.f0_base_hz + spec.f0_step_hz * np.repeat(
            tokens, spec.frames_per_token))
        features[:, -1] += contour / spec.f0_channel_scale
        utts.append(Utterance(id=f"utt{start_index + i:05d}", tokens=tokens,
                              features=features, f0=f0))
    return utts


def f0_from_features(Y: np.ndarray, spec: SyntheticTaskSpec) -> np.ndarray:
    """Read the F0 track off the designated feature channel; values under the
    voicing threshold are reported unvoiced (0)."""
    f0 = np.asarray(Y, dtype=np.float64)[:, -1] * spec.f0_channel_scale
    return np.where(f0 > spec.voicing_threshold_hz, f0, 0.0)


def degrade_hypothesis(Y: np.ndarray, smoothing_width: int, noise_scale: float,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Stand-in for an over-smoothed synthesis hypothesis: moving-average
    smoothing along time (edge-clamped) plus additive Gaussian noise."""
    if smoothing_width < 1 or smoothing_width % 2 == 0:
        raise ValueError(f"smoothing width must be odd and >= 1, got {smoothing_width}")
    if noise_scale < 0:
        raise ValueError("noise scale must be >= 0")
    Y = np.asarray(Y, dtype=np.float64)
    if smoothing_width == 1:
        out = Y.copy()
    else:
        out = uniform_filter1d(Y, size=smoothing_width, axis=0, mode="nearest")
    if noise_scale > 0:
        if rng is None:
            raise ValueError("rng required when noise_scale > 0")
        out = out + rng.normal(0.0, noise_scale, size=Y.shape)
    return out


# ---------------------------------------------------------------------------
# Binary file formats
# ---------------------------------------------------------------------------

def write_features(path, Y: np.ndarray) -> None:
    Y = np.ascontiguousarray(Y, dtype="<f8")
    if Y.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {Y.shape}")
    frames, dim = Y.shape
    if frames >= 2 ** 32 or dim >= 2 ** 32:
        raise FileFormatError(f"dimensions {Y.shape} overflow the u32 header")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, frames, dim))
        fh.write(Y.tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FileFormatError(f"{path}: truncated header")
    if blob[:4] != FEATURE_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, frames, dim = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = 16 + frames * dim * 8
    if len(blob) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(frames, dim).copy()


def write_f0(path, track: np.ndarray) -> None:
    track = np.ascontiguousarray(track, dtype="<f8")
    if track.ndim != 1:
        raise ValueError(f"F0 track must be 1-D, got shape {track.shape}")
    if track.size >= 2 ** 32:
        raise FileFormatError("track length overflows the u32 header")
    with open(path, "wb") as fh:
        fh.write(F0_MAGIC)
        fh.write(struct.pack("<I", track.size))
        fh.write(track.tobytes())


def read_f0(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FileFormatError(f"{path}: truncated header")
    if blob[:4] != F0_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}")
    (frames,) = struct.unpack("<I", blob[4:8])
    if len(blob) != 8 + frames * 8:
        raise FileFormatError(f"{path}: expected {8 + frames * 8} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=8).copy()


def write_tokens(path, tokens) -> None:
    Path(path).write_text(" ".join(str(int(t)) for t in tokens) + "\n", encoding="utf-8")


def read_tokens(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    try:
        ids = np.array([int(tok) for tok in text.split()], dtype=np.int64)
    except ValueError as err:
        raise FileFormatError(f"{path}: non-integer token ({err})") from None
    if ids.size == 0:
        raise FileFormatError(f"{path}: empty token sequence")
    return ids


# ---------------------------------------------------------------------------
# Manifests and splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    entries: list[dict]  # id, text, features, optional f0 (paths relative to manifest)
    format_version: int = MANIFEST_VERSION


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "format_version": manifest.format_version,
        "split": manifest.split,
        "utterances": manifest.entries,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise FileFormatError(f"{path}: invalid JSON ({err})") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FileFormatError(f"{path}: unsupported manifest version "
                              f"{doc.get('format_version')}")
    entries = doc.get("utterances", [])
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate utterance ids")
    if check_files:
        missing = []
        for e in entries:
            for key in ("text", "features", "f0"):
                rel = e.get(key)
                if rel is not None and not (path.parent / rel).exists():
                    missing.append(f"{e['id']}:{key}")
        if missing:
            raise DataError(f"{path}: missing files for {missing}")
    return DatasetManifest(split=doc.get("split", ""), entries=entries)


def write_split(out_dir, split: str, utterances: list[Utterance],
                with_tokens: bool = True) -> Path:
    """Write one utterance-per-file layout plus the split manifest; returns
    the manifest path."""
    out_dir = Path(out_dir)
    files_dir = out_dir / split
    files_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in utterances:
        entry = {"id": utt.id}
        if with_tokens:
            write_tokens(files_dir / f"{utt.id}.tokens.txt", utt.tokens)
            entry["text"] = f"{split}/{utt.id}.tokens.txt"
        write_features(files_dir / f"{utt.id}.ebmf", utt.features)
        entry["features"] = f"{split}/{utt.id}.ebmf"
        if utt.f0 is not None:
            write_f0(files_dir / f"{utt.id}.ebf0", utt.f0)
            entry["f0"] = f"{split}/{utt.id}.ebf0"
        entries.append(entry)
    manifest_path = out_dir / f"{split}.json"
    save_manifest(manifest_path, DatasetManifest(split=split, entries=entries))
    return manifest_path


def load_utterances(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    utts = []
    for e in manifest.entries:
        tokens = read_tokens(root / e["text"]) if e.get("text") else np.zeros(1, np.int64)
        f0 = read_f0(root / e["f0"]) if e.get("f0") else None
        utts.append(Utterance(id=e["id"], tokens=tokens,
                              features=read_features(root / e["features"]), f0=f0))
    return utts


def split_dataset(utterances: list[Utterance], fractions, seed: int):
    """Seeded shuffle into three disjoint, exhaustive splits."""
    if not utterances:
        raise DataError("cannot split an empty utterance list")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(utterances)
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(round_half_up(fractions[0] * n), n)
    n_val = min(round_half_up(fractions[1] * n), n - n_train)
    shuffled = [utterances[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def corpus_stats(utterances: list[Utterance]) -> dict:
    """Scalar mean/variance/min over every feature cell in the corpus."""
    cells = np.concatenate([u.features.reshape(-1) for u in utterances])
    return {"mean": float(cells.mean()), "var": float(cells.var()),
            "min": float(cells.min())}
