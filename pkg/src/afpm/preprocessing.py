"""Band-pass filtering, resampling to a common rate, and amplitude rescaling.

Stage order is fixed: bandpass -> resample -> rescale. Filtering is a
zero-phase 4th-order Butterworth band-pass (forward-backward, odd reflection
padding); resampling is polyphase with a Kaiser-windowed sinc low-pass.
All stages are pure per-trial functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.signal import butter, firwin, resample_poly, sosfiltfilt

from .data_model import DatasetManifest, DatasetWriter, EEGTrial, load_trial
from .errors import ConfigError, DataError

FILTER_ORDER = 4
# Odd reflection padding for the forward-backward pass.
PAD_LEN = 3 * (FILTER_ORDER + 1)
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class PreprocessConfig:
    """Band edges in Hz, target rate, and the multiplier into 0.1 mV units."""

    band_lo_hz: float
    band_hi_hz: float
    target_rate_hz: float = 256.0
    unit_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.band_lo_hz < self.band_hi_hz:
            raise ConfigError("need 0 < band_lo_hz < band_hi_hz")
        if self.band_hi_hz >= self.target_rate_hz / 2:
            raise ConfigError(
                f"band_hi_hz {self.band_hi_hz} must stay below the target Nyquist "
                f"{self.target_rate_hz / 2}"
            )
        if self.unit_scale <= 0:
            raise ConfigError("unit_scale must be positive")


def default_config(task: str, unit_scale: float = 1.0) -> PreprocessConfig:
    """4-30 Hz for MI, 1-30 Hz for ERP, 256 Hz target rate."""
    lo = 4.0 if task.lower() == "mi" else 1.0
    return PreprocessConfig(band_lo_hz=lo, band_hi_hz=30.0, unit_scale=unit_scale)


def bandpass(trial: EEGTrial, cfg: PreprocessConfig) -> EEGTrial:
    """Zero-phase Butterworth band-pass, each channel filtered independently."""
    if trial.rate_hz <= 2 * cfg.band_hi_hz:
        raise DataError(
            f"band edge {cfg.band_hi_hz} Hz violates Nyquist at rate {trial.rate_hz} Hz"
        )
    if trial.n_samples <= PAD_LEN:
        raise DataError(
            f"trial too short for zero-phase filtering: {trial.n_samples} samples, "
            f"need more than {PAD_LEN}"
        )
    sos = butter(FILTER_ORDER, [cfg.band_lo_hz, cfg.band_hi_hz],
                 btype="bandpass", fs=trial.rate_hz, output="sos")
    out = sosfiltfilt(sos, trial.data.astype(np.float64), axis=1,
                      padtype="odd", padlen=PAD_LEN)
    return replace(trial, data=out)


def _rate_fraction(target_hz: float, rate_hz: float) -> Fraction:
    return (Fraction(target_hz).limit_denominator(1 << 16)
            / Fraction(rate_hz).limit_denominator(1 << 16))


def resample(trial: EEGTrial, target_rate_hz: float) -> EEGTrial:
    """Polyphase band-limited resampling to ``target_rate_hz``.

    Output length is round(T * target / rate). The anti-alias low-pass is a
    Kaiser-windowed sinc (beta 8.6, 64 taps per phase); the caller is
    responsible for the signal being band-limited below the target Nyquist.
    """
    if target_rate_hz <= 0:
        raise DataError("target_rate_hz must be positive")
    frac = _rate_fraction(target_rate_hz, trial.rate_hz)
    up, down = frac.numerator, frac.denominator
    n_want = math.floor(trial.n_samples * frac + Fraction(1, 2))
    if n_want < 1:
        raise DataError("resampled trial would be empty")
    if up == down:
        return replace(trial, rate_hz=float(target_rate_hz))
    max_rate = max(up, down)
    half_len = (TAPS_PER_PHASE // 2) * max_rate
    # Unit-gain prototype; resample_poly scales by the upsampling factor.
    h = firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    out = resample_poly(trial.data.astype(np.float64), up, down, axis=1, window=h)
    out = out[:, :n_want]
    return replace(trial, data=out, rate_hz=float(target_rate_hz))


def rescale(trial: EEGTrial, unit_scale: float) -> EEGTrial:
    """Multiply every sample by ``unit_scale`` (maps input units to 0.1 mV)."""
    if unit_scale <= 0:
        raise DataError("unit_scale must be positive")
    if unit_scale == 1.0:
        return trial
    return replace(trial, data=trial.data * unit_scale)


def preprocess_trial(trial: EEGTrial, cfg: PreprocessConfig) -> EEGTrial:
    trial = bandpass(trial, cfg)
    trial = resample(trial, cfg.target_rate_hz)
    return rescale(trial, cfg.unit_scale)


def preprocess_dataset(manifest: DatasetManifest, cfg: PreprocessConfig,
                       out_dir: str) -> DatasetManifest:
    """Apply bandpass -> resample -> rescale to every trial; write a new dataset.

    The output manifest's unit_scale is 1.0: trials are already in 0.1 mV units.
    """
    writer = DatasetWriter(
        out_dir=out_dir, name=manifest.name, task=manifest.task,
        rate_hz=cfg.target_rate_hz, class_names=manifest.class_names,
        unit_scale=1.0,
    )
    for i in range(len(manifest.trials)):
        trial = load_trial(manifest, i)
        done = preprocess_trial(trial, cfg)
        writer.add_trial(done.data, done.channels, done.label, done.domain_id)
    return writer.finish()
