"""Synthetic MLII records with beat and rhythm annotations.

Beats are sums of Gaussian bumps (P, Q, R, S, T) whose shape depends on the
beat symbol; rhythms control the RR process and the beat pattern. Signals are
stored as 11-bit ADC values at 360 Hz with gain 200, like MIT-BIH, so every
downstream step can be run without the real database.
"""

from __future__ import annotations

import numpy as np

from .wfdb import CODE_FOR_SYMBOL, Annotation, EcgRecord, RecordHeader, SignalSpec, checksum

FS = 360
GAIN = 200
ADC_ZERO = 1024

# (centre s, width s, amplitude mV) relative to the R peak
_WAVES = {
    "N": [(-0.20, 0.025, 0.15), (-0.03, 0.010, -0.10), (0.0, 0.012, 1.2), (0.03, 0.010, -0.25), (0.25, 0.045, 0.30)],
    "A": [(-0.15, 0.020, -0.10), (-0.03, 0.010, -0.10), (0.0, 0.012, 1.1), (0.03, 0.010, -0.25), (0.24, 0.045, 0.28)],
    "V": [(0.0, 0.035, -1.3), (0.06, 0.030, 0.6), (0.30, 0.060, 0.45)],
    "F": [(-0.20, 0.025, 0.12), (0.0, 0.022, 0.4), (0.03, 0.020, -0.6), (0.27, 0.050, 0.35)],
    "L": [(-0.20, 0.025, 0.15), (-0.02, 0.025, 0.9), (0.03, 0.025, 0.9), (0.28, 0.055, -0.35)],
    "R": [(-0.20, 0.025, 0.15), (0.0, 0.012, 0.9), (0.035, 0.012, -0.4), (0.07, 0.018, 0.6), (0.26, 0.045, 0.25)],
    "E": [(0.0, 0.040, 1.0), (0.30, 0.070, -0.40)],
    "/": [(-0.06, 0.002, 1.6), (0.0, 0.030, -0.9), (0.05, 0.030, 0.5), (0.30, 0.060, 0.35)],
    "f": [(-0.06, 0.002, 1.2), (0.0, 0.020, 0.8), (0.04, 0.025, -0.5), (0.28, 0.050, 0.3)],
}

# rhythm label -> (mean RR s, RR jitter fraction, beat pattern)
RHYTHMS = {
    "NSR": ("(N", 0.85, 0.03, ["N"]),
    "APB": ("(N", 0.85, 0.03, ["N", "N", "N", "A"]),
    "AFL": ("(AFL", 0.70, 0.05, ["N"]),
    "AFIB": ("(AFIB", 0.65, 0.25, ["N"]),
    "SVTA": ("(SVTA", 0.40, 0.04, ["A"]),
    "WPW": ("(PREX", 0.80, 0.03, ["N"]),
    "PVC": ("(N", 0.85, 0.03, ["N", "N", "N", "N", "V"]),
    "Bigeminy": ("(B", 0.80, 0.03, ["N", "V"]),
    "Trigeminy": ("(T", 0.80, 0.03, ["N", "N", "V"]),
    "VT": ("(VT", 0.38, 0.04, ["V"]),
    "IVR": ("(IVR", 1.40, 0.04, ["E"]),
    "VFL": ("(VFL", 0.24, 0.02, ["!"]),
    "Fusion": ("(N", 0.85, 0.03, ["N", "N", "F"]),
    "LBBB": ("(N", 0.85, 0.03, ["L"]),
    "RBBB": ("(N", 0.85, 0.03, ["R"]),
    "BII": ("(BII", 1.60, 0.03, ["N"]),
    "Pacemaker": ("(P", 0.83, 0.01, ["/"]),
}


def _beat_wave(symbol: str, t: np.ndarray, amp: float, wpw: bool) -> np.ndarray:
    waves = _WAVES.get(symbol, _WAVES["N"])
    out = np.zeros_like(t)
    for centre, width, a in waves:
        out += a * np.exp(-0.5 * ((t - centre) / width) ** 2)
    if wpw and symbol == "N":
        out += 0.35 * np.exp(-0.5 * ((t + 0.05) / 0.02) ** 2)  # delta wave
    return amp * out


def synthesize(episodes: list[tuple[str, float]], rng: np.random.Generator | int = 0,
               noise_mv: float = 0.02) -> tuple[np.ndarray, list[Annotation]]:
    """Signal in mV and annotations for consecutive (rhythm key, seconds) episodes."""
    rng = np.random.default_rng(rng)
    n = int(round(sum(sec for _, sec in episodes) * FS))
    t_all = np.arange(n) / FS
    signal = np.zeros(n)
    anns: list[Annotation] = []
    start = 0.0
    last_rhythm = None
    for key, seconds in episodes:
        label, rr, jitter, pattern = RHYTHMS[key]
        end = start + seconds
        if label != last_rhythm:
            anns.append(Annotation(int(round(start * FS)), CODE_FOR_SYMBOL["+"], "+", label))
            last_rhythm = label
        amp = rng.uniform(0.8, 1.2)
        lo, hi = int(start * FS), min(n, int(end * FS))
        seg_t = t_all[lo:hi]
        if key == "AFL":
            signal[lo:hi] += 0.12 * (2 * ((seg_t * 5.0) % 1.0) - 1)
        if key == "AFIB":
            signal[lo:hi] += 0.05 * np.sin(2 * np.pi * 7.3 * seg_t + rng.uniform(0, 6.3))
        if key == "VFL":
            signal[lo:hi] += amp * 0.9 * np.sin(2 * np.pi * seg_t / rr)
        beat_t = start + rng.uniform(0.1, rr)
        i = 0
        while beat_t < end - 0.05:
            symbol = pattern[i % len(pattern)]
            if key == "BII" and i % 2 == 1:
                signal[lo:hi] += 0.15 * np.exp(-0.5 * ((seg_t - beat_t + 0.2) / 0.025) ** 2)  # dropped P
                beat_t += rr / 2 * (1 + jitter * rng.normal())
                i += 1
                continue
            local = rr * (1 + jitter * rng.normal())
            if symbol in ("A", "V", "F") and len(pattern) > 1:
                local *= 0.7  # premature
            sample = int(round(beat_t * FS))
            if sample < n:
                if symbol != "!":
                    w0, w1 = max(0, sample - 180), min(n, sample + 180)
                    signal[w0:w1] += _beat_wave(symbol, t_all[w0:w1] - beat_t, amp, key == "WPW")
                anns.append(Annotation(sample, CODE_FOR_SYMBOL[symbol], symbol))
            beat_t += max(0.2, local)
            i += 1
        start = end
    signal += noise_mv * rng.normal(size=n)
    signal += 0.1 * np.sin(2 * np.pi * 0.2 * t_all + rng.uniform(0, 6.3))  # baseline wander
    anns.sort(key=lambda a: (a.sample_index, a.type_code != CODE_FOR_SYMBOL["+"]))
    return signal, anns


def synthetic_record(name: str, episodes: list[tuple[str, float]], rng: np.random.Generator | int = 0,
                     lead: str = "MLII") -> EcgRecord:
    """A one-lead 360 Hz record in ADC units with a consistent header checksum."""
    mv, anns = synthesize(episodes, rng)
    adc = np.clip(np.round(mv * GAIN + ADC_ZERO), 0, 2047).astype(np.int32)
    spec = SignalSpec(f"{name}.dat", 212, GAIN, 11, ADC_ZERO, int(adc[0]), checksum(adc), 0, lead)
    header = RecordHeader(name, 1, FS, adc.size, (spec,))
    return EcgRecord(header, [adc], anns)


def synthetic_database(n_records: int = 6, seconds_per_episode: float = 60.0,
                       rng: np.random.Generator | int = 0) -> list[EcgRecord]:
    """Records cycling through every rhythm so each class has labelable windows."""
    rng = np.random.default_rng(rng)
    keys = list(RHYTHMS)
    records = []
    for r in range(n_records):
        order = [keys[(r + k) % len(keys)] for k in range(len(keys))]
        episodes = []
        for key in order:
            episodes.append((key, seconds_per_episode))
            if RHYTHMS[key][0] not in ("(N", "(P"):
                episodes.append(("NSR", 12.0))
        records.append(synthetic_record(f"s{r:02d}", episodes, rng))
    return records
