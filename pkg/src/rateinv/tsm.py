"""Time-scale modification: WSOLA time stretching plus augmentation planning.

WSOLA changes duration while preserving pitch by copying windowed waveform
segments whose positions are refined by cross-correlation before overlap-add.
A naive resampler is included as a contrast path: it warps duration too, but
scales every frequency by the same factor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import AudioClip, UtteranceRecord, load_wav, make_record, save_wav
from .errors import DataError, TooShortError

log = logging.getLogger(__name__)

ALPHA_MIN = 0.5
ALPHA_MAX = 2.0


def snap_alpha(alpha: float) -> float:
    """Snap a scale factor onto the 0.1 grid used throughout the pipeline."""
    snapped = round(float(alpha) * 10.0) / 10.0
    if not ALPHA_MIN <= snapped <= ALPHA_MAX:
        raise ValueError(f"alpha {alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")
    return snapped


@dataclass(frozen=True)
class TsmConfig:
    """WSOLA analysis/synthesis geometry. Defaults target 16 kHz audio:
    64 ms frames, 75% overlap, +-16 ms alignment search."""

    frame_length: int = 1024
    synthesis_hop: int = 256
    search_tolerance: int = 256
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.frame_length < 2:
            raise ValueError("frame_length must be at least 2 samples")
        if not 0 < self.synthesis_hop <= self.frame_length:
            raise ValueError("synthesis_hop must lie in (0, frame_length]")
        if self.search_tolerance < 0:
            raise ValueError("search_tolerance must be non-negative")
        window = self.window
        if window is None:
            window = np.hanning(self.frame_length)
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (self.frame_length,):
            raise ValueError("window length must equal frame_length")
        envelope = np.zeros(self.synthesis_hop)
        for start in range(0, self.frame_length, self.synthesis_hop):
            seg = window[start : start + self.synthesis_hop]
            envelope[: seg.size] += seg
        if envelope.min() <= 0:
            raise ValueError("window must overlap-add to a strictly positive envelope")
        object.__setattr__(self, "window", window)


def wsola_align(reference: np.ndarray, candidate_region: np.ndarray, zero_offset: int | None = None) -> int:
    """Offset of the candidate frame best matching ``reference``.

    ``candidate_region`` holds all candidate frames; ``zero_offset`` is the
    region index corresponding to offset 0 (defaults to the center). Returns
    the offset maximizing normalized cross-correlation, ties broken toward
    the smallest absolute offset (negative before positive at equal distance).
    All-zero regions or references score 0 everywhere and return offset 0.
    """
    reference = np.asarray(reference, dtype=np.float64)
    region = np.asarray(candidate_region, dtype=np.float64)
    n = reference.size
    n_candidates = region.size - n + 1
    if n_candidates <= 0:
        raise ValueError("candidate region shorter than the reference frame")
    if zero_offset is None:
        zero_offset = (region.size - n) // 2
    if not 0 <= zero_offset < n_candidates:
        raise ValueError("zero_offset must index a candidate position inside the region")

    ref_norm = np.sqrt(np.dot(reference, reference))
    if ref_norm == 0.0 or n_candidates == 1:
        return 0
    corr = np.correlate(region, reference, mode="valid")
    csum = np.concatenate(([0.0], np.cumsum(region * region)))
    window_energy = np.maximum(csum[n:] - csum[:-n], 0.0)
    denom = ref_norm * np.sqrt(window_energy)
    scores = np.where(denom > 0.0, corr / np.where(denom > 0.0, denom, 1.0), 0.0)

    offsets = np.arange(n_candidates) - zero_offset
    order = np.lexsort((offsets, np.abs(offsets)))
    best = order[int(np.argmax(scores[order]))]
    return int(offsets[best])


def time_stretch(clip: AudioClip, alpha: float, cfg: TsmConfig = TsmConfig()) -> AudioClip:
    """WSOLA time stretch: output duration ~ input/alpha, pitch unchanged.

    alpha > 1 yields faster (shorter) audio, alpha < 1 slower (longer);
    alpha = 1 returns the input clip unchanged.
    """
    alpha = float(alpha)
    if not ALPHA_MIN <= alpha <= ALPHA_MAX:
        raise ValueError(f"alpha {alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")
    x = clip.samples
    n = cfg.frame_length
    if x.size < n:
        raise TooShortError(
            f"clip of {x.size} samples is shorter than one TSM frame ({n})"
        )
    if alpha == 1.0:
        return clip

    hop = cfg.synthesis_hop
    tol = cfg.search_tolerance
    w = cfg.window
    out_len = int(round(x.size / alpha))
    n_frames = max(2, int(np.ceil(max(out_len - n, 0) / hop)) + 1)
    last_start = x.size - n

    out = np.zeros((n_frames - 1) * hop + n)
    acc = np.zeros_like(out)
    prev = 0
    for m in range(n_frames):
        nominal = min(int(round(m * hop * alpha)), last_start)
        if m == 0 or tol == 0:
            chosen = nominal
        else:
            ref_start = min(prev + hop, last_start)
            reference = x[ref_start : ref_start + n]
            lo = max(0, nominal - tol)
            hi = min(last_start, nominal + tol)
            region = x[lo : hi + n]
            chosen = nominal + wsola_align(reference, region, zero_offset=nominal - lo)
        seg = x[chosen : chosen + n]
        pos = m * hop
        out[pos : pos + n] += seg * w
        acc[pos : pos + n] += w
        prev = chosen

    out = out[:out_len] / np.maximum(acc[:out_len], 1e-8)
    return AudioClip(out, clip.sample_rate, source_alpha=alpha)


def naive_resample(clip: AudioClip, alpha: float) -> AudioClip:
    """Contrast path: plain time warp x(alpha*t) by linear interpolation.

    Duration scales like WSOLA's, but every frequency is multiplied by alpha,
    so pitch shifts — the artifact TSM exists to avoid.
    """
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = clip.samples
    out_len = int(round(x.size / alpha))
    positions = np.arange(out_len) * alpha
    positions = np.minimum(positions, x.size - 1)
    out = np.interp(positions, np.arange(x.size), x)
    return AudioClip(out, clip.sample_rate, source_alpha=alpha)


@dataclass(frozen=True)
class AugmentationPlan:
    """Per-scale augmentation fractions; alpha 1.0 is never planned because
    the originals already cover it."""

    entries: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        seen = set()
        for alpha, fraction in self.entries:
            snapped = snap_alpha(alpha)
            if snapped != alpha:
                raise ValueError(f"plan alpha {alpha} is off the 0.1 grid")
            if abs(alpha - 1.0) <= 1e-9:
                raise ValueError("alpha 1.0 cannot appear in an augmentation plan")
            if alpha in seen:
                raise ValueError(f"duplicate plan alpha {alpha}")
            seen.add(alpha)
            if not 0.0 < fraction <= 1.0:
                raise ValueError(f"fraction for alpha {alpha} must lie in (0, 1]")

    def count_for(self, alpha: float, n_originals: int) -> int:
        for a, fraction in self.entries:
            if a == alpha:
                return int(round(fraction * n_originals))
        raise KeyError(f"alpha {alpha} not in plan")

    def expected_total(self, n_originals: int) -> int:
        """Originals plus every planned per-scale subset."""
        return n_originals + sum(
            int(round(fraction * n_originals)) for _, fraction in self.entries
        )


def plan_voxceleb_style(n_originals: int) -> AugmentationPlan:
    """The 15-scale plan: one fourth of the data per slow scale (0.5-0.9),
    one eighth per fast scale (1.1-2.0), about 3.5x the original total."""
    if n_originals < 1:
        raise ValueError("need at least one original utterance")
    slow = [(round(i / 10.0, 1), 0.25) for i in range(5, 10)]
    fast = [(round(i / 10.0, 1), 0.125) for i in range(11, 21)]
    return AugmentationPlan(tuple(slow + fast))


@dataclass
class AugmentResult:
    """Augmented manifest (originals preserved) plus per-file failures."""

    records: list[UtteranceRecord]
    new_records: list[UtteranceRecord]
    errors: list[str]


def augment_corpus(
    manifest: Sequence[UtteranceRecord],
    plan: AugmentationPlan,
    cfg: TsmConfig = TsmConfig(),
    seed: int = 0,
) -> AugmentResult:
    """Stretch seeded per-scale subsets of the originals and write the results
    next to the source files as `{utt_id}_a{alpha}.wav`.

    Per-file stretch failures are collected, not fatal. All input records must
    be originals (alpha 1.0).
    """
    originals = sorted(manifest, key=lambda r: r.utt_id)
    for r in originals:
        if r.rate_label != "normal":
            raise ValueError(f"augment_corpus expects originals only; {r.utt_id} has alpha {r.alpha}")
    rng = np.random.default_rng(seed)
    new_records: list[UtteranceRecord] = []
    errors: list[str] = []
    for alpha, fraction in plan.entries:
        count = int(round(fraction * len(originals)))
        picks = rng.choice(len(originals), size=min(count, len(originals)), replace=False)
        for idx in sorted(picks):
            rec = originals[idx]
            new_id = f"{rec.utt_id}_a{alpha:g}"
            out_path = Path(rec.path).with_name(f"{new_id}.wav")
            try:
                stretched = time_stretch(load_wav(rec.path), alpha, cfg)
                save_wav(out_path, stretched)
            except (DataError, ValueError, OSError) as exc:
                errors.append(f"{rec.utt_id} at alpha {alpha:g}: {exc}")
                continue
            new_records.append(make_record(new_id, rec.speaker_id, out_path, alpha))
    return AugmentResult(list(originals) + new_records, new_records, errors)
