"""STFT analysis and overlap-add synthesis for mono waveforms.

Framing is left-aligned (no centering): frame ``tau`` covers samples
``tau*hop .. tau*hop + n - 1``, and the signal tail is zero-padded so the
final partial frame is complete.  Synthesis applies the analysis window a
second time and divides by the accumulated per-sample sum of squared window
values, which makes the round trip exact wherever the window coverage is
non-degenerate, for any window/hop combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Per-sample floor for the overlap-add normalization denominator.
_DENOM_FLOOR = 1e-8


class CoverageError(ValueError):
    """Requested output samples lie beyond the span covered by any frame."""


@dataclass(frozen=True)
class Waveform:
    """1-D sampled audio signal, nominal amplitude range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class AnalysisWindow:
    """Window coefficients plus the hop used to slide it."""

    coefficients: np.ndarray
    hop: int

    def __post_init__(self):
        w = np.asarray(self.coefficients, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] < 2:
            raise ValueError("window needs at least 2 coefficients")
        if not np.all(np.isfinite(w)):
            raise ValueError("window contains non-finite coefficients")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("window coefficients must lie in [0, 1]")
        if np.max(np.abs(w - w[::-1])) > 1e-12:
            raise ValueError("window must be symmetric")
        if int(self.hop) < 1:
            raise ValueError(f"hop must be >= 1, got {self.hop}")
        object.__setattr__(self, "coefficients", w)
        object.__setattr__(self, "hop", int(self.hop))

    def __len__(self):
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class Spectrogram:
    """F x T non-negative magnitude matrix with its frame geometry."""

    values: np.ndarray
    frame_hop: int
    fft_size: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram contains non-finite values")
        if v.min() < 0.0:
            raise ValueError("spectrogram magnitudes must be non-negative")
        if v.shape[0] != self.fft_size // 2 + 1:
            raise ValueError(
                f"expected {self.fft_size // 2 + 1} frequency bins for "
                f"fft_size={self.fft_size}, got {v.shape[0]}"
            )
        object.__setattr__(self, "values", v)

    @property
    def num_bins(self):
        return self.values.shape[0]

    @property
    def num_frames(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class PhaseMatrix:
    """Companion F x T phase matrix, radians."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"phase matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("phase matrix contains non-finite values")
        object.__setattr__(self, "values", v)


def hann_window(n: int, hop: int | None = None) -> AnalysisWindow:
    """Symmetric Hann window ``w[t] = sin^2(pi*t/(n-1))``, default hop ``n//2``.

    The second half is mirrored from the first, so the symmetry
    ``w[t] == w[n-1-t]`` holds exactly.
    """
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    half = np.sin(np.pi * np.arange((n + 1) // 2) / (n - 1)) ** 2
    if n % 2 == 0:
        w = np.concatenate([half, half[::-1]])
    else:
        w = np.concatenate([half, half[:-1][::-1]])
    return AnalysisWindow(w, n // 2 if hop is None else hop)


def frame_count(n_samples: int, win: AnalysisWindow) -> int:
    """Number of analysis frames for a signal, tail padding included."""
    n = len(win)
    if n_samples < n:
        raise ValueError(f"signal length {n_samples} is shorter than one frame ({n})")
    return 1 + math.ceil((n_samples - n) / win.hop)


def padded_length(n_samples: int, win: AnalysisWindow) -> int:
    """Length after zero-padding the tail so the last frame is complete."""
    return (frame_count(n_samples, win) - 1) * win.hop + len(win)


def stft(x: Waveform, win: AnalysisWindow) -> tuple[Spectrogram, PhaseMatrix]:
    """Windowed DFT of every frame; returns magnitude and phase, F = n/2 + 1.

    Phase of zero-magnitude bins is 0.
    """
    n = len(win)
    t_frames = frame_count(len(x), win)
    xp = np.zeros(padded_length(len(x), win))
    xp[: len(x)] = x.samples
    frames = np.lib.stride_tricks.sliding_window_view(xp, n)[:: win.hop]
    assert frames.shape[0] == t_frames
    spec = np.fft.rfft(frames * win.coefficients, axis=1)
    mag = np.abs(spec).T
    phase = np.angle(spec).T
    return Spectrogram(mag, win.hop, n), PhaseMatrix(phase)


def istft(
    mag: Spectrogram,
    phase: PhaseMatrix,
    win: AnalysisWindow,
    out_len: int,
    sample_rate: int,
) -> Waveform:
    """Inverse DFT per frame, windowed overlap-add, per-sample normalization.

    Divides by the accumulated sum of squared window values (floored at 1e-8,
    so edge samples with vanishing coverage decay to zero instead of blowing
    up).  Raises CoverageError when out_len extends past the last frame.
    """
    if mag.values.shape != phase.values.shape:
        raise ValueError(
            f"magnitude shape {mag.values.shape} != phase shape {phase.values.shape}"
        )
    n = mag.fft_size
    if len(win) != n:
        raise ValueError(f"window length {len(win)} != fft size {n}")
    if mag.frame_hop != win.hop:
        raise ValueError(f"spectrogram hop {mag.frame_hop} != window hop {win.hop}")
    t_frames = mag.num_frames
    span = (t_frames - 1) * win.hop + n
    if out_len > span:
        raise CoverageError(
            f"requested {out_len} samples but frames only cover {span}"
        )

    frames = np.fft.irfft(mag.values * np.exp(1j * phase.values), n=n, axis=0)
    out = np.zeros(span)
    denom = np.zeros(span)
    w = win.coefficients
    w_sq = w * w
    for tau in range(t_frames):
        s = tau * win.hop
        out[s : s + n] += w * frames[:, tau]
        denom[s : s + n] += w_sq
    out /= np.maximum(denom, _DENOM_FLOOR)
    return Waveform(out[:out_len], sample_rate)
