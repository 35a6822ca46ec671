"""Acoustic front-end: 40-dim MFCC, energy VAD, sliding-window CMN, archives.

The recipe is fixed across train and test: 25 ms window / 10 ms shift at
16 kHz, pre-emphasis 0.97, periodic Hann window, 512-point FFT, 40 mel
filters spanning 20-7600 Hz, orthonormal DCT-II keeping all 40 cepstra
(C0 included).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .corpus import AudioClip
from .errors import DataError, EmptyAfterVadError, TooShortError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
NFFT = 512
N_MELS = 40
N_CEPS = 40
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0
PREEMPHASIS = 0.97
ENERGY_FLOOR = 1e-10
CMN_WINDOW = 300  # 3 s at a 10 ms shift


@dataclass
class FeatureMatrix:
    """Frames-by-coefficients matrix for one utterance."""

    frames: np.ndarray
    source_utt: str = ""
    frame_shift_ms: float = 10.0

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("FeatureMatrix needs a (T >= 1, dim) array")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("FeatureMatrix values must be finite")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int) -> int:
    """Frame count for the 400/160 framing; valid for num_samples >= 400."""
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def _frame_signal(x: np.ndarray) -> np.ndarray:
    t = num_frames(x.size)
    idx = np.arange(t)[:, None] * FRAME_SHIFT + np.arange(FRAME_LENGTH)[None, :]
    return x[idx]


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def _mel_filterbank(n_mels: int, nfft: int, sample_rate: int, low_hz: float, high_hz: float) -> np.ndarray:
    """Triangular mel filters as an (nfft//2+1, n_mels) matrix."""
    mel_points = np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bins = hz_points / sample_rate * nfft
    freqs = np.arange(nfft // 2 + 1)
    bank = np.zeros((freqs.size, n_mels))
    for m in range(n_mels):
        left, center, right = bins[m], bins[m + 1], bins[m + 2]
        up = (freqs - left) / (center - left)
        down = (right - freqs) / (right - center)
        bank[:, m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


@lru_cache(maxsize=2)
def _periodic_hann(length: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def frame_log_energy(clip: AudioClip) -> np.ndarray:
    """Per-frame log energy of the raw signal (same framing as mfcc)."""
    if clip.samples.size < FRAME_LENGTH:
        raise TooShortError(
            f"clip of {clip.samples.size} samples is shorter than one 25 ms frame"
        )
    frames = _frame_signal(clip.samples)
    return np.log(np.maximum((frames * frames).sum(axis=1), ENERGY_FLOOR))


def mfcc(clip: AudioClip, source_utt: str = "") -> FeatureMatrix:
    """40-dimensional MFCCs with a 25 ms window and 10 ms shift."""
    if clip.sample_rate != SAMPLE_RATE:
        raise DataError(
            f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz (no resampling)"
        )
    x = clip.samples
    if x.size < FRAME_LENGTH:
        raise TooShortError(f"clip of {x.size} samples is shorter than one 25 ms frame")
    emphasized = np.empty_like(x)
    emphasized[0] = x[0] * (1.0 - PREEMPHASIS)
    emphasized[1:] = x[1:] - PREEMPHASIS * x[:-1]
    frames = _frame_signal(emphasized) * _periodic_hann(FRAME_LENGTH)
    spectrum = np.fft.rfft(frames, NFFT, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    bank = _mel_filterbank(N_MELS, NFFT, SAMPLE_RATE, MEL_LOW_HZ, MEL_HIGH_HZ)
    log_mel = np.log(np.maximum(power @ bank, ENERGY_FLOOR))
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    return FeatureMatrix(ceps, source_utt=source_utt)


@dataclass(frozen=True)
class VadConfig:
    """Keep a frame when its log energy exceeds both the utterance mean plus
    ``mean_offset`` and the absolute ``energy_floor``."""

    mean_offset: float = -1.5
    energy_floor: float = -10.0


def energy_vad(features_or_clip, cfg: VadConfig = VadConfig()) -> np.ndarray:
    """Boolean keep-mask over frames from an AudioClip or a log-energy vector.

    Raises EmptyAfterVadError when every frame falls below the threshold.
    """
    if isinstance(features_or_clip, AudioClip):
        log_energy = frame_log_energy(features_or_clip)
    else:
        log_energy = np.asarray(features_or_clip, dtype=np.float64)
        if log_energy.ndim != 1 or log_energy.size < 1:
            raise ValueError("expected an AudioClip or a 1-D log-energy vector")
    threshold = max(log_energy.mean() + cfg.mean_offset, cfg.energy_floor)
    mask = log_energy > threshold
    if not mask.any():
        raise EmptyAfterVadError("VAD removed every frame of the utterance")
    return mask


def apply_vad(features: FeatureMatrix, mask: np.ndarray) -> FeatureMatrix:
    """Delete masked-out rows; frame count must match the mask length."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (features.num_frames,):
        raise ValueError(
            f"mask length {mask.size} does not match {features.num_frames} frames"
        )
    if not mask.any():
        raise EmptyAfterVadError("VAD removed every frame of the utterance")
    return FeatureMatrix(
        features.frames[mask], features.source_utt, features.frame_shift_ms
    )


def sliding_cmn(features: FeatureMatrix, window: int = CMN_WINDOW) -> FeatureMatrix:
    """Subtract a sliding window mean per coefficient.

    The window is centered and keeps its full size near the edges by shifting
    (so T <= window reduces to global mean subtraction).
    """
    if window < 1:
        raise ValueError("window must be positive")
    x = features.frames
    t = x.shape[0]
    eff = min(window, t)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(t) - window // 2, 0, t - eff)
    hi = lo + eff
    means = (csum[hi] - csum[lo]) / eff
    return FeatureMatrix(x - means, features.source_utt, features.frame_shift_ms)


def extract_features(
    clip: AudioClip,
    source_utt: str = "",
    vad_cfg: VadConfig = VadConfig(),
    cmn_window: int = CMN_WINDOW,
) -> FeatureMatrix:
    """Full front-end for one utterance: MFCC, energy VAD, sliding CMN."""
    feats = mfcc(clip, source_utt=source_utt)
    mask = energy_vad(clip, vad_cfg)
    return sliding_cmn(apply_vad(feats, mask), cmn_window)


ARCHIVE_MAGIC = b"FEA1"


class FeatureArchiveWriter:
    """Append per-utterance matrices to a binary archive plus a text index.

    Record layout: 4 magic bytes, u32 rows, u32 cols, row-major f32 payload,
    all little-endian. The index holds `utt_id<TAB>byte_offset` lines.
    """

    def __init__(self, path):
        self.path = str(path)
        self._data = open(self.path, "wb")
        self._index = open(self.path + ".idx", "w", encoding="utf-8")

    def write(self, utt_id: str, matrix: np.ndarray) -> None:
        if "\t" in utt_id or "\n" in utt_id:
            raise ValueError("utt_id may not contain tabs or newlines")
        m = np.ascontiguousarray(matrix, dtype="<f4")
        if m.ndim != 2:
            raise ValueError("archive entries must be 2-D matrices")
        offset = self._data.tell()
        self._data.write(ARCHIVE_MAGIC)
        self._data.write(struct.pack("<II", m.shape[0], m.shape[1]))
        self._data.write(m.tobytes())
        self._index.write(f"{utt_id}\t{offset}\n")

    def close(self) -> None:
        self._data.close()
        self._index.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FeatureArchive:
    """Random-access reader over an archive written by FeatureArchiveWriter."""

    def __init__(self, path):
        self.path = str(path)
        self._offsets: dict[str, int] = {}
        with open(self.path + ".idx", "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    utt_id, offset = line.split("\t")
                    self._offsets[utt_id] = int(offset)
                except ValueError as exc:
                    raise DataError(f"{self.path}.idx:{lineno}: bad index line") from exc

    def keys(self):
        return self._offsets.keys()

    def __len__(self) -> int:
        return len(self._offsets)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._offsets

    def __getitem__(self, utt_id: str) -> np.ndarray:
        offset = self._offsets[utt_id]
        with open(self.path, "rb") as f:
            f.seek(offset)
            magic = f.read(4)
            if magic != ARCHIVE_MAGIC:
                raise DataError(f"{self.path}@{offset}: bad record magic {magic!r}")
            rows, cols = struct.unpack("<II", f.read(8))
            payload = f.read(rows * cols * 4)
            if len(payload) != rows * cols * 4:
                raise DataError(f"{self.path}@{offset}: truncated record")
        return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
