"""Reading MIT-BIH Arrhythmia records: WFDB headers, format 212, MIT annotations.

Files are fetched over HTTP into a per-record cache directory and parsed
bit-exactly. Encoders for both binary formats exist so round trips can be
checked.
"""

from __future__ import annotations

import os
import re
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_BASE_URL = "https://physionet.org/files/mitdb/1.0.0/"
SUFFIXES = (".hea", ".dat", ".atr")

ALL_RECORDS = (
    [str(r) for r in range(100, 110)]
    + [str(r) for r in range(111, 120)]
    + ["121", "122", "123", "124", "200", "201", "202", "203", "205", "207", "208", "209", "210"]
    + ["212", "213", "214", "215", "217", "219", "220", "221", "222", "223", "228"]
    + ["230", "231", "232", "233", "234"]
)
# 102 and 104 carry no MLII lead; 201 and 202 come from the same subject.
NO_MLII = ("102", "104")
SAME_SUBJECT = {"202": "201"}
DEFAULT_RECORDS = tuple(r for r in ALL_RECORDS if r not in NO_MLII and r not in SAME_SUBJECT)

# Annotation codes from the WFDB ecgcodes table; index == code.
SYMBOLS = (
    " NLRaVFJASEj/Q~" + "?" + "|" + "?" + "sT*D\"=pB^t+u?![]en@xf()r"
)
BEAT_CODES = frozenset(list(range(1, 14)) + [25, 30, 34, 35, 38, 41])
MAX_CODE = 49
SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


class WfdbParseError(ValueError):
    """Malformed header, signal or annotation bytes."""


class MissingLeadError(KeyError):
    """The record has no signal with the requested lead name."""


class TransportError(OSError):
    def __init__(self, message: str, status: int | None = None, retries: int = 0):
        super().__init__(message)
        self.status = status
        self.retries = retries


class CorruptFileError(ValueError):
    """Downloaded samples disagree with the header checksum."""


def symbol_for(code: int) -> str:
    return SYMBOLS[code] if 0 < code < len(SYMBOLS) else "?"


CODE_FOR_SYMBOL = {s: i for i, s in enumerate(SYMBOLS) if i and s != "?"}


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format: int
    gain: float
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int
    block_size: int
    lead_name: str
    baseline: int | None = None
    units: str = "mV"


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float
    n_samples: int
    signals: tuple[SignalSpec, ...] = ()
    comments: tuple[str, ...] = ()

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    type_code: int
    symbol: str
    aux: str | None = None
    channel: int = 0
    subtype: int = 0
    number: int = 0

    @property
    def is_beat(self) -> bool:
        return self.type_code in BEAT_CODES


@dataclass
class EcgRecord:
    header: RecordHeader
    signals: list[np.ndarray]
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.header.record_name


# ---------------------------------------------------------------- header

_GAIN = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(\S+))?$")


def _field(line_no: int, column: int, token: str, kind, what: str):
    try:
        return kind(token)
    except ValueError:
        raise WfdbParseError(f"line {line_no}, column {column}: bad {what} {token!r}") from None


def parse_header(data: bytes | str) -> RecordHeader:
    """Parse a WFDB ``.hea`` file (single-segment records)."""
    text = data.decode("ascii") if isinstance(data, bytes) else data
    lines = []
    comments = []
    for no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped[1:].strip())
            continue
        lines.append((no, raw))
    if not lines:
        raise WfdbParseError("line 1, column 1: empty header")

    no, record_line = lines[0]
    tokens = record_line.split()
    cols = [m.start() + 1 for m in re.finditer(r"\S+", record_line)]
    if len(tokens) < 2:
        raise WfdbParseError(f"line {no}, column 1: record line needs a name and a signal count")
    name = tokens[0]
    if "/" in name:
        raise WfdbParseError(f"line {no}, column 1: multi-segment records are not supported")
    n_signals = _field(no, cols[1], tokens[1], int, "signal count")
    fs = 250.0
    if len(tokens) > 2:
        fs = _field(no, cols[2], re.split(r"[/(]", tokens[2])[0], float, "sampling frequency")
    n_samples = _field(no, cols[3], tokens[3], int, "sample count") if len(tokens) > 3 else 0

    signals = []
    for no, line in lines[1 : 1 + n_signals]:
        signals.append(_parse_signal_line(no, line))
    if len(signals) != n_signals:
        raise WfdbParseError(f"line {no}: expected {n_signals} signal lines, found {len(signals)}")
    return RecordHeader(name, n_signals, fs, n_samples, tuple(signals), tuple(comments))


def _parse_signal_line(no: int, line: str) -> SignalSpec:
    tokens = line.split()
    cols = [m.start() + 1 for m in re.finditer(r"\S+", line)]
    if len(tokens) < 2:
        raise WfdbParseError(f"line {no}, column 1: signal line needs a file name and a format")
    fmt = _field(no, cols[1], re.split(r"[x:+]", tokens[1])[0], int, "format")
    gain, baseline, units = 200.0, None, "mV"
    if len(tokens) > 2:
        m = _GAIN.match(tokens[2])
        if not m:
            raise WfdbParseError(f"line {no}, column {cols[2]}: bad gain {tokens[2]!r}")
        gain = _field(no, cols[2], m.group(1), float, "gain") or 200.0
        baseline = int(m.group(2)) if m.group(2) else None
        units = m.group(3) or "mV"
    ints = []
    for i, what in zip(range(3, 8), ("adc resolution", "adc zero", "initial value", "checksum", "block size")):
        ints.append(_field(no, cols[i], tokens[i], int, what) if len(tokens) > i else 0)
    resolution, zero, initial, checksum_value, block = ints
    if len(tokens) <= 3:
        resolution = 12
    lead = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    if not lead:
        raise WfdbParseError(f"line {no}, column {len(line) + 1}: missing lead name")
    if len(tokens) <= 5:
        initial = zero
    return SignalSpec(tokens[0], fmt, gain, resolution, zero, initial, checksum_value, block, lead,
                      baseline, units)


def format_header(header: RecordHeader) -> str:
    lines = [f"{header.record_name} {header.n_signals} {header.sampling_frequency:g} {header.n_samples}"]
    for s in header.signals:
        gain = f"{s.gain:g}" + (f"({s.baseline})" if s.baseline is not None else "")
        if s.units != "mV":
            gain += f"/{s.units}"
        lines.append(f"{s.file_name} {s.format} {gain} {s.adc_resolution} {s.adc_zero} "
                     f"{s.initial_value} {s.checksum} {s.block_size} {s.lead_name}")
    lines += [f"# {c}" for c in header.comments]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- format 212


def bytes_for_212(n_values: int) -> int:
    return (3 * n_values + 1) // 2


def decode_212(data: bytes, n_values: int) -> np.ndarray:
    """Unpack ``n_values`` 12-bit two's-complement samples (frame order)."""
    need = bytes_for_212(n_values)
    if len(data) < need:
        raise WfdbParseError(
            f"format 212 stream truncated at byte offset {len(data)}; {need} bytes needed"
        )
    groups = (n_values + 1) // 2
    raw = np.zeros(3 * groups, dtype=np.uint8)
    raw[:need] = np.frombuffer(data, dtype=np.uint8, count=need)
    b = raw.reshape(groups, 3).astype(np.int32)
    out = np.empty(2 * groups, dtype=np.int32)
    out[0::2] = ((b[:, 1] & 0x0F) << 8) | b[:, 0]
    out[1::2] = ((b[:, 1] & 0xF0) << 4) | b[:, 2]
    out[out > 2047] -= 4096
    return out[:n_values]


def encode_212(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if values.size and (values.min() < -2048 or values.max() > 2047):
        raise ValueError("format 212 holds 12-bit samples in [-2048, 2047]")
    n = values.size
    u = np.zeros(2 * ((n + 1) // 2), dtype=np.int64)
    u[:n] = values & 0xFFF
    s1, s2 = u[0::2], u[1::2]
    out = np.empty((s1.size, 3), dtype=np.uint8)
    out[:, 0] = s1 & 0xFF
    out[:, 1] = ((s1 >> 8) & 0x0F) | ((s2 >> 4) & 0xF0)
    out[:, 2] = s2 & 0xFF
    return out.reshape(-1)[: bytes_for_212(n)].tobytes()


def parse_signal_212(data: bytes, n_signals: int = 2, n_samples: int | None = None) -> list[np.ndarray]:
    """Per-lead ADC arrays from an interleaved format-212 stream."""
    if n_samples is None:
        n_samples = (2 * len(data) // 3) // n_signals
    flat = decode_212(data, n_samples * n_signals)
    frames = flat.reshape(n_samples, n_signals)
    return [np.ascontiguousarray(frames[:, i]) for i in range(n_signals)]


def checksum(samples: np.ndarray) -> int:
    """16-bit two's-complement sum, as stored in WFDB headers."""
    total = int(np.asarray(samples, dtype=np.int64).sum())
    return (total + 32768) % 65536 - 32768


# ---------------------------------------------------------------- annotations


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT-format annotation stream.

    Pseudo-codes following an annotation modify it (SUB, AUX) or set the
    channel/number carried by it and every later one (CHN, NUM). SKIP adds a
    32-bit interval, stored high word first, to the running time.
    """
    n = len(data)
    words = np.frombuffer(data[: n - n % 2], dtype="<u2")
    out: list[dict] = []
    time_ = 0
    chan = num = 0
    i = 0
    terminated = False
    while i < len(words):
        word = int(words[i])
        code, delta = word >> 10, word & 0x3FF
        i += 1
        if word == 0:
            terminated = True
            break
        if code == SKIP:
            if i + 2 > len(words):
                raise WfdbParseError(f"SKIP at byte {2 * (i - 1)} lacks its 4-byte interval")
            interval = (int(words[i]) << 16) | int(words[i + 1])
            if interval >= 2**31:
                interval -= 2**32
            time_ += interval
            i += 2
        elif code == NUM:
            num = _signed10(delta)
            if out:
                out[-1]["number"] = num
        elif code == SUB:
            if out:
                out[-1]["subtype"] = _signed10(delta)
        elif code == CHN:
            chan = delta
            if out:
                out[-1]["channel"] = chan
        elif code == AUX:
            start = 2 * i
            end = start + delta
            if end > n:
                raise WfdbParseError(
                    f"AUX at byte {start - 2} declares {delta} bytes; only {n - start} remain"
                )
            text = data[start:end].split(b"\0", 1)[0].decode("latin-1")
            if out:
                out[-1]["aux"] = text
            i += (delta + 1) // 2
        elif code == 0:
            time_ += delta  # placeholder with no label; advances time only
        else:
            time_ += delta
            out.append(dict(sample_index=time_, type_code=code, symbol=symbol_for(code),
                            channel=chan, number=num))
    if terminated and 2 * i < n and any(data[2 * i :]):
        warnings.warn(f"{n - 2 * i} bytes after the annotation terminator ignored", stacklevel=2)
    return [Annotation(**a) for a in out]


def _signed10(v: int) -> int:
    return v - 1024 if v > 511 else v


def encode_annotations(annotations: list[Annotation]) -> bytes:
    """Inverse of :func:`parse_annotations` (used for round-trip checks)."""
    words: list[int] = []
    time_ = chan = num = 0
    for a in annotations:
        delta = a.sample_index - time_
        if delta < 0 or delta > 1023:
            words += [SKIP << 10, (delta >> 16) & 0xFFFF, delta & 0xFFFF]
            delta = 0
        words.append((a.type_code << 10) | delta)
        time_ = a.sample_index
        if a.subtype:
            words.append((SUB << 10) | (a.subtype & 0x3FF))
        if a.channel != chan:
            words.append((CHN << 10) | a.channel)
            chan = a.channel
        if a.number != num:
            words.append((NUM << 10) | (a.number & 0x3FF))
            num = a.number
        if a.aux is not None:
            payload = a.aux.encode("latin-1")
            words.append((AUX << 10) | len(payload))
            if len(payload) % 2:
                payload += b"\0"
            words += list(np.frombuffer(payload, dtype="<u2"))
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


# ---------------------------------------------------------------- records


def select_lead(record: EcgRecord, lead: str = "MLII") -> np.ndarray:
    for spec, signal in zip(record.header.signals, record.signals):
        if spec.lead_name == lead:
            return signal
    raise MissingLeadError(f"record {record.name} has leads {record.header.lead_names}, not {lead}")


def to_millivolts(adc, adc_zero: int, gain: float) -> np.ndarray:
    return (np.asarray(adc, dtype=np.float64) - adc_zero) / gain


def verify_checksums(header: RecordHeader, signals: list[np.ndarray]) -> None:
    for spec, sig in zip(header.signals, signals):
        if checksum(sig) != spec.checksum:
            raise CorruptFileError(
                f"{header.record_name} {spec.lead_name}: checksum {checksum(sig)} != header {spec.checksum}"
            )


def read_record(directory, name: str, verify: bool = True) -> EcgRecord:
    """Parse ``name`` from ``directory`` (``.hea``, ``.dat`` and, if present, ``.atr``)."""
    directory = Path(directory)
    header = parse_header((directory / f"{name}.hea").read_bytes())
    for spec in header.signals:
        if spec.format != 212:
            raise WfdbParseError(f"{name}: signal format {spec.format} is not supported")
    if len({s.file_name for s in header.signals}) != 1:
        raise WfdbParseError(f"{name}: signals split across several files are not supported")
    data = (directory / header.signals[0].file_name).read_bytes()
    signals = parse_signal_212(data, header.n_signals, header.n_samples)
    if verify:
        verify_checksums(header, signals)
    atr = directory / f"{name}.atr"
    annotations = parse_annotations(atr.read_bytes()) if atr.exists() else []
    return EcgRecord(header, signals, annotations)


def write_record(record: EcgRecord, directory) -> Path:
    """Write ``record`` as ``.hea``, ``.dat`` (format 212) and ``.atr`` files in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.header.record_name
    (directory / f"{name}.hea").write_text(format_header(record.header))
    frames = np.stack([np.asarray(s, dtype=np.int64) for s in record.signals], axis=1).reshape(-1)
    (directory / record.header.signals[0].file_name).write_bytes(encode_212(frames))
    (directory / f"{name}.atr").write_bytes(encode_annotations(record.annotations))
    return directory


# ---------------------------------------------------------------- fetching


def default_cache_dir() -> Path:
    return Path(os.environ.get("ECGFORGE_CACHE", Path.home() / ".cache" / "ecgforge"))


def default_base_url() -> str:
    return os.environ.get("ECGFORGE_BASE_URL", DEFAULT_BASE_URL)


def _download(url: str, retries: int, backoff: float, timeout: float) -> bytes:
    status = None
    for attempt in range(retries + 1):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            status = exc.code
            if exc.code < 500:  # the server answered; retrying will not help
                raise TransportError(f"GET {url}: HTTP {exc.code}", exc.code, attempt) from None
        except (urllib.error.URLError, OSError) as exc:
            last = exc
            status = None
        if attempt < retries:
            time.sleep(backoff * 2**attempt)
    reason = f"HTTP {status}" if status else f"{last}"
    raise TransportError(f"GET {url}: {reason} after {retries} retries", status, retries)


def fetch_record(
    name: str,
    cache_dir=None,
    base_url: str | None = None,
    *,
    retries: int = 3,
    backoff: float = 0.5,
    timeout: float = 60.0,
) -> dict[str, Path]:
    """Make ``name``'s files present in ``cache_dir/name/``; return their paths.

    Cached files are used as is. New downloads are checked against the header
    checksums before they become visible.
    """
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    base_url = base_url or default_base_url()
    if not base_url.endswith("/"):
        base_url += "/"
    folder = cache_dir / name
    paths = {s: folder / f"{name}{s}" for s in SUFFIXES}
    if all(p.exists() for p in paths.values()):
        return paths
    folder.mkdir(parents=True, exist_ok=True)
    blobs = {s: _download(base_url + f"{name}{s}", retries, backoff, timeout)
             for s, p in paths.items() if not p.exists()}
    if ".hea" in blobs or ".dat" in blobs:
        header = parse_header(blobs.get(".hea") or paths[".hea"].read_bytes())
        dat = blobs.get(".dat") or paths[".dat"].read_bytes()
        verify_checksums(header, parse_signal_212(dat, header.n_signals, header.n_samples))
    for suffix, blob in blobs.items():
        tmp = folder / f".{name}{suffix}.part{os.getpid()}"
        tmp.write_bytes(blob)
        os.replace(tmp, paths[suffix])
    return paths


def load_records(names, cache_dir=None, base_url=None, fetch: bool = True) -> list[EcgRecord]:
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    records = []
    for name in names:
        if fetch:
            fetch_record(name, cache_dir, base_url)
        records.append(read_record(cache_dir / name, name))
    return records
