"""Audio ingestion, synthetic corpus generation, manifests, and trial lists.

Manifest lines are `utt_id<TAB>speaker_id<TAB>path<TAB>alpha<TAB>rate_label`;
trial lines are `enroll_utt test_utt target|nontarget`.
"""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, EmptyTrialError, UnsupportedWavError, WavFormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000

RATE_SLOW = "slow"
RATE_NORMAL = "normal"
RATE_FAST = "fast"
RATE_LABELS = (RATE_SLOW, RATE_NORMAL, RATE_FAST)
RATE_TO_INDEX = {label: i for i, label in enumerate(RATE_LABELS)}

# alpha within this distance of 1.0 counts as an original
_NORMAL_TOL = 1e-9


def rate_label_for(alpha: float) -> str:
    """Map a time-scale factor to its rate label: <1 slow, >1 fast, ~1 normal."""
    if not math.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"alpha must be a positive finite real, got {alpha!r}")
    if abs(alpha - 1.0) <= _NORMAL_TOL:
        return RATE_NORMAL
    return RATE_SLOW if alpha < 1.0 else RATE_FAST


@dataclass
class AudioClip:
    """Mono waveform with sample rate and the time-scale factor it came from."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_alpha: float = 1.0

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be a 1-D mono array")
        if self.samples.size < 1:
            raise ValueError("AudioClip must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must all be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not math.isfinite(self.source_alpha) or self.source_alpha <= 0:
            raise ValueError(f"source_alpha must be positive, got {self.source_alpha}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wav:
            n_channels = wav.getnchannels()
            sampwidth = wav.getsampwidth()
            rate = wav.getframerate()
            raw = wav.readframes(wav.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if n_channels != 1:
        raise UnsupportedWavError(
            f"{path}: has {n_channels} channels; only mono is supported (no downmix)"
        )
    if sampwidth != 2:
        raise UnsupportedWavError(
            f"{path}: {8 * sampwidth}-bit samples; only 16-bit PCM is supported"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise WavFormatError(f"{path}: empty audio payload")
    return AudioClip(samples, rate)


def save_wav(path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM; amplitudes are clipped to [-1, 1]."""
    quantized = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(int(clip.sample_rate))
        wav.writeframes(quantized.tobytes())


@dataclass(frozen=True)
class UtteranceRecord:
    """Manifest entry binding an audio file to speaker, alpha, and rate label."""

    utt_id: str
    speaker_id: str
    path: str
    alpha: float
    rate_label: str

    def __post_init__(self) -> None:
        expected = rate_label_for(self.alpha)
        if self.rate_label != expected:
            raise ValueError(
                f"{self.utt_id}: rate_label {self.rate_label!r} inconsistent with "
                f"alpha={self.alpha} (expected {expected!r})"
            )


def make_record(utt_id: str, speaker_id: str, path, alpha: float = 1.0) -> UtteranceRecord:
    """Build an UtteranceRecord with the rate label derived from alpha."""
    return UtteranceRecord(utt_id, speaker_id, str(path), float(alpha), rate_label_for(alpha))


def write_manifest(records: Sequence[UtteranceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.utt_id}\t{r.speaker_id}\t{r.path}\t{r.alpha:.10g}\t{r.rate_label}\n")


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
            utt_id, speaker_id, rec_path, alpha_s, label = parts
            try:
                record = UtteranceRecord(utt_id, speaker_id, rec_path, float(alpha_s), label)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            records.append(record)
    return records


@dataclass
class ManifestBuild:
    """Result of scanning a corpus directory: records plus per-file problems."""

    records: list[UtteranceRecord]
    errors: list[str]
    warning: str | None = None


def build_manifest(root, alpha_map: dict[str, float] | None = None) -> ManifestBuild:
    """Scan a `speaker_id/utt.wav` directory tree into utterance records.

    ``alpha_map`` assigns time-scale factors by utt_id (default 1.0). Unreadable
    files become per-file error entries rather than a global failure; an empty
    tree yields an empty manifest with a warning.
    """
    root = Path(root)
    alpha_map = alpha_map or {}
    records: list[UtteranceRecord] = []
    errors: list[str] = []
    speaker_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    for spk_dir in speaker_dirs:
        for wav_path in sorted(spk_dir.glob("*.wav")):
            utt_id = wav_path.stem
            try:
                with wave.open(str(wav_path), "rb") as wav:
                    wav.getparams()
            except (wave.Error, EOFError, OSError) as exc:
                errors.append(f"{wav_path}: {exc}")
                continue
            alpha = float(alpha_map.get(utt_id, 1.0))
            records.append(make_record(utt_id, spk_dir.name, wav_path, alpha))
    warning = None
    if not records:
        warning = f"no utterances found under {root}"
        log.warning(warning)
    return ManifestBuild(records, errors, warning)


@dataclass(frozen=True)
class SynthSpeakerProfile:
    """Parametric voice: fundamental plus three formant resonances."""

    f0: float
    formant_centers: tuple[float, float, float]
    formant_bandwidths: tuple[float, float, float]
    seed: int

    def __post_init__(self) -> None:
        if not 100.0 <= self.f0 <= 300.0:
            raise ValueError(f"f0 must lie in [100, 300] Hz, got {self.f0}")
        nyquist = SAMPLE_RATE / 2
        for c in self.formant_centers:
            if not 0.0 < c < nyquist:
                raise ValueError(f"formant center {c} Hz outside (0, Nyquist)")
        for b in self.formant_bandwidths:
            if b <= 0:
                raise ValueError("formant bandwidths must be positive")


def random_profiles(n: int, seed: int = 0) -> list[SynthSpeakerProfile]:
    """Deterministically draw n speaker profiles with well-separated f0 values."""
    if n < 1:
        raise ValueError("need at least one profile")
    rng = np.random.default_rng(seed)
    # spread f0 across [105, 285] so dominant spectral peaks stay distinct
    base = np.linspace(105.0, 285.0, n)
    jitter = rng.uniform(-0.3, 0.3, size=n) * (base[1] - base[0] if n > 1 else 1.0)
    profiles = []
    for i in range(n):
        f0 = float(np.clip(base[i] + jitter[i], 100.0, 300.0))
        centers = (
            float(rng.uniform(350.0, 800.0)),
            float(rng.uniform(900.0, 2200.0)),
            float(rng.uniform(2300.0, 3200.0)),
        )
        bandwidths = (
            float(rng.uniform(60.0, 120.0)),
            float(rng.uniform(80.0, 160.0)),
            float(rng.uniform(100.0, 200.0)),
        )
        profiles.append(SynthSpeakerProfile(f0, centers, bandwidths, seed=int(rng.integers(2**31))))
    return profiles


def _formant_gain(freqs: np.ndarray, centers: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    """Lorentzian resonance envelope evaluated at the given frequencies."""
    peak_levels = np.array([1.0, 0.7, 0.45])
    gain = np.full(freqs.shape, 0.15)
    for c, b, a in zip(centers, bandwidths, peak_levels):
        gain = gain + a * (b * b) / ((freqs - c) ** 2 + b * b)
    return gain


def synth_utterance(
    profile: SynthSpeakerProfile,
    duration: float,
    syllable_rate: float,
    seed: int,
    sample_rate: int = SAMPLE_RATE,
) -> AudioClip:
    """Synthesize a voiced utterance: harmonics at f0, formant-shaped, with a
    syllable-rate amplitude gate per-syllable formant jitter, and a noise floor.

    Deterministic given (profile, seed). The fundamental is kept dominant so
    the clip's FFT peak sits at f0.
    """
    if not 0.5 <= duration <= 10.0:
        raise ValueError(f"duration must lie in [0.5, 10] s, got {duration}")
    if not 1.0 <= syllable_rate <= 10.0:
        raise ValueError(f"syllable_rate must lie in [1, 10] Hz, got {syllable_rate}")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, profile.seed])
    t = np.arange(n) / sample_rate

    # slow vibrato keeps instantaneous f0 within +-1.5% of the profile value
    vib_rate = rng.uniform(0.7, 1.5)
    vib_phase = rng.uniform(0, 2 * np.pi)
    f0_track = profile.f0 * (1.0 + 0.015 * np.sin(2 * np.pi * vib_rate * t + vib_phase))
    phase = 2.0 * np.pi * np.cumsum(f0_track) / sample_rate

    max_harm = int((0.45 * sample_rate) / (profile.f0 * 1.02))
    n_harm = max(1, min(max_harm, 44))
    harm = np.arange(1, n_harm + 1)

    # one formant-jitter draw per syllable; gains change where the gate is shut
    syl_len = max(1, int(round(sample_rate / syllable_rate)))
    n_syl = int(np.ceil(n / syl_len))
    jitters = rng.uniform(0.88, 1.15, size=(n_syl, 3))
    centers = np.asarray(profile.formant_centers)
    bandwidths = np.asarray(profile.formant_bandwidths)
    gains = np.empty((n_syl, n_harm))
    for s in range(n_syl):
        env = _formant_gain(harm * profile.f0, centers * jitters[s], bandwidths)
        amp = env / harm
        # enforce fundamental dominance without flattening the formant shape
        if n_harm > 1 and amp[1:].max() > 0.75 * amp[0]:
            amp[1:] *= 0.75 * amp[0] / amp[1:].max()
        gains[s] = amp
    syl_index = np.minimum(np.arange(n) // syl_len, n_syl - 1)

    harm_phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    sig = np.zeros(n)
    for k in range(n_harm):
        sig += gains[syl_index, k] * np.sin((k + 1) * phase + harm_phases[k])

    gate = 0.5 - 0.5 * np.cos(2 * np.pi * syllable_rate * t)
    envelope = 0.06 + 0.94 * gate**2
    sig *= envelope

    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.45 / peak
    sig += rng.normal(0.0, 0.004, size=n)
    return AudioClip(np.clip(sig, -1.0, 1.0), sample_rate)


class Trial(NamedTuple):
    enroll: str
    test: str
    target: bool


def make_trials(
    test_manifest: Sequence[UtteranceRecord],
    enroll_rate: str,
    test_rate,
) -> list[Trial]:
    """Cross-product trials: every enroll utterance at ``enroll_rate`` against
    every test utterance matching ``test_rate`` (a rate label or an alpha).

    Self-pairs are excluded; targets are same-speaker pairs. Raises if either
    side is empty or if no target/impostor pair exists.
    """
    if enroll_rate not in RATE_LABELS:
        raise ValueError(f"enroll_rate must be one of {RATE_LABELS}, got {enroll_rate!r}")
    enroll = [r for r in test_manifest if r.rate_label == enroll_rate]
    if isinstance(test_rate, str):
        if test_rate not in RATE_LABELS:
            raise ValueError(f"test_rate label must be one of {RATE_LABELS}, got {test_rate!r}")
        test = [r for r in test_manifest if r.rate_label == test_rate]
        selector = test_rate
    else:
        alpha = float(test_rate)
        test = [r for r in test_manifest if abs(r.alpha - alpha) <= 1e-9]
        selector = f"alpha={alpha:g}"
    if not enroll:
        raise EmptyTrialError(f"no utterances with enroll rate {enroll_rate!r}")
    if not test:
        raise EmptyTrialError(f"no utterances matching test selector {selector}")
    trials = [
        Trial(e.utt_id, r.utt_id, e.speaker_id == r.speaker_id)
        for e in enroll
        for r in test
        if e.utt_id != r.utt_id
    ]
    n_target = sum(t.target for t in trials)
    if n_target == 0 or n_target == len(trials):
        raise EmptyTrialError(
            f"trial set needs both targets and impostors "
            f"(got {n_target} targets out of {len(trials)} trials)"
        )
    return trials


def write_trials(trials: Sequence[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}\n")


def read_trials(path) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise DataError(f"{path}:{lineno}: expected 'enroll test target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials
