"""Segments, labels, masked samples and the DS0 / DS1-DS2 / QRS test-set builders."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .wfdb import BEAT_CODES, CODE_FOR_SYMBOL, EcgRecord, MissingLeadError, select_lead

WINDOW = 3600
MASK = 100
JITTER = 10
BEAT_MARGIN = 60  # eligible beats lie in [60, 3540]
N_REPETITIONS = 24
SPLITS = ("train", "val", "test")
BEAT_SYMBOLS = frozenset(s for s, c in CODE_FOR_SYMBOL.items() if c in BEAT_CODES)


class DegenerateWindowError(ValueError):
    """A window with fewer than two distinct values cannot be scaled."""


class NoBeatError(ValueError):
    """No beat annotation lies far enough from the window edges to mask."""


class UngroupableError(ValueError):
    """A window without annotations has no QRS group."""


class ConstructionError(ValueError):
    """Too few non-overlapping segments for some classes."""


# ---------------------------------------------------------------- class table


@dataclass(frozen=True)
class ClassDef:
    index: int
    key: str
    name: str
    rhythms: frozenset
    require_rhythm: frozenset
    beats: frozenset
    require_beat: frozenset
    segments: int
    train: int
    val: int
    test: int

    def matches(self, symbols: set, rhythms: set) -> bool:
        if not rhythms or not rhythms <= self.rhythms or not symbols <= self.beats:
            return False
        if self.require_rhythm and not rhythms & self.require_rhythm:
            return False
        return not self.require_beat or bool(symbols & self.require_beat)


@dataclass(frozen=True)
class ClassTable:
    classes: tuple[ClassDef, ...]
    counted_symbols: frozenset
    version: int = 1

    def __len__(self):
        return len(self.classes)

    def counts(self) -> dict[int, tuple[int, int, int]]:
        return {c.index: (c.train, c.val, c.test) for c in self.classes}

    def scaled(self, per_class: tuple[int, int, int]) -> "ClassTable":
        """Same definitions with the given (train, val, test) counts for every class."""
        tr, va, te = per_class
        return ClassTable(
            tuple(ClassDef(**{**c.__dict__, "train": tr, "val": va, "test": te, "segments": tr + va + te})
                  for c in self.classes),
            self.counted_symbols, self.version,
        )


def load_class_table(path=None) -> ClassTable:
    """The shipped 17-class table, or one read from ``path``."""
    if path is None:
        text = resources.files("ecgforge").joinpath("data/classes_v1.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    defs = []
    for c in raw["classes"]:
        defs.append(ClassDef(
            c["index"], c["key"], c["name"], frozenset(c["rhythms"]), frozenset(c["require_rhythm"]),
            frozenset(c["beats"]), frozenset(c["require_beat"]), c["segments"], c["train"], c["val"], c["test"],
        ))
        if c["train"] + c["val"] + c["test"] != c["segments"]:
            raise ValueError(f"class {c['key']}: split counts do not add up to its segment count")
    if [d.index for d in defs] != list(range(len(defs))):
        raise ValueError("class indices must be 0..n-1 in order")
    return ClassTable(tuple(defs), frozenset(raw["counted_symbols"]), raw.get("version", 1))


# ---------------------------------------------------------------- segments


def scale_minmax(window) -> np.ndarray:
    """Map a window affinely onto [-1, 1]."""
    w = np.asarray(window, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi <= lo:
        raise DegenerateWindowError("window is constant")
    out = 2.0 * (w - lo) / (hi - lo) - 1.0
    out[w == lo] = -1.0  # exact endpoints despite rounding
    out[w == hi] = 1.0
    return out


@dataclass
class Source:
    """MLII signal and annotations of one record, shared by its segments."""

    record_name: str
    signal: np.ndarray
    sample_index: np.ndarray
    symbols: np.ndarray
    aux: list
    rhythm_at: np.ndarray  # rhythm label in force after each annotation

    @classmethod
    def from_record(cls, record: EcgRecord, lead: str = "MLII") -> "Source":
        signal = select_lead(record, lead)
        idx = np.array([a.sample_index for a in record.annotations], dtype=np.int64)
        symbols = np.array([a.symbol for a in record.annotations], dtype=object)
        aux = [a.aux for a in record.annotations]
        rhythm = []
        current = None
        for a in aux:
            if a and a.startswith("("):
                current = a
            rhythm.append(current)
        return cls(record.name, signal, idx, symbols, aux, np.array(rhythm, dtype=object))

    def window(self, start: int) -> tuple[list[tuple[int, str, str | None]], str | None]:
        """Annotations inside [start, start+3600) and the rhythm in force at ``start``."""
        lo = np.searchsorted(self.sample_index, start)
        hi = np.searchsorted(self.sample_index, start + WINDOW)
        carried = self.rhythm_at[lo - 1] if lo > 0 else None
        inside = [(int(self.sample_index[i] - start), str(self.symbols[i]), self.aux[i]) for i in range(lo, hi)]
        return inside, carried


@dataclass
class Segment:
    record_name: str
    start_sample: int
    source: Source = field(repr=False)
    label: int | None = None
    annotations_in_window: list = field(default_factory=list, repr=False)
    carried_rhythm: str | None = None

    @property
    def values(self) -> np.ndarray:
        return scale_minmax(self.source.signal[self.start_sample : self.start_sample + WINDOW])

    @property
    def rhythms(self) -> set:
        found = {aux for _, _, aux in self.annotations_in_window if aux and aux.startswith("(")}
        if self.carried_rhythm and not any(off == 0 and aux and aux.startswith("(")
                                           for off, _, aux in self.annotations_in_window):
            found.add(self.carried_rhythm)
        return found

    def beat_offsets(self) -> list[int]:
        return [off for off, sym, _ in self.annotations_in_window if sym in BEAT_SYMBOLS]

    def beat_symbols(self) -> set:
        return {sym for _, sym, _ in self.annotations_in_window if sym in BEAT_SYMBOLS}


def make_segment(source: Source, start: int, label: int | None = None) -> Segment:
    inside, carried = source.window(start)
    return Segment(source.record_name, int(start), source, label, inside, carried)


def sources_from_records(records, lead: str = "MLII", sampling_frequency: float = 360) -> list[Source]:
    """MLII sources; records without the lead or too short are skipped with a warning."""
    out = []
    for rec in records:
        if rec.header.sampling_frequency != sampling_frequency:
            raise ValueError(f"record {rec.name} is sampled at {rec.header.sampling_frequency} Hz, "
                             f"expected {sampling_frequency}")
        try:
            src = Source.from_record(rec, lead)
        except MissingLeadError:
            warnings.warn(f"record {rec.name} has no {lead} lead; excluded", stacklevel=2)
            continue
        if src.signal.size < WINDOW:
            warnings.warn(f"record {rec.name} is shorter than {WINDOW} samples; excluded", stacklevel=2)
            continue
        out.append(src)
    return out


# ---------------------------------------------------------------- labels and groups


def label_segment(segment: Segment, table: ClassTable) -> int | None:
    symbols = {s for _, s, _ in segment.annotations_in_window if s in table.counted_symbols}
    rhythms = segment.rhythms
    hits = [c.index for c in table.classes if c.matches(symbols, rhythms)]
    return hits[0] if len(hits) == 1 else None


def assign_group(beats: set, rhythms: set) -> str:
    """QRS test group N, P, X or M from the window's beat symbols and rhythm labels."""
    if not beats and not rhythms:
        raise UngroupableError("window has no annotations")
    if beats == {"N"} and rhythms == {"(N"}:
        return "N"
    if beats == {"/"} and rhythms == {"(P"}:
        return "P"
    if len(beats) == 1 and len(rhythms) == 1:
        return "X"
    return "M"


def segment_group(segment: Segment) -> str:
    return assign_group(segment.beat_symbols(), segment.rhythms)


# ---------------------------------------------------------------- masking


@dataclass
class MaskedSample:
    input: np.ndarray
    target: np.ndarray
    mask_start: int
    segment: Segment | None = field(default=None, repr=False)
    beat_offset: int | None = None
    group: str | None = None


def eligible_beats(segment: Segment) -> list[int]:
    return [o for o in segment.beat_offsets() if BEAT_MARGIN <= o <= WINDOW - BEAT_MARGIN]


def mask_start_for_beat(beat_offset: int, shift: int) -> int:
    return int(min(max(beat_offset - MASK // 2 + shift, 0), WINDOW - MASK))


def apply_mask(values: np.ndarray, mask_start: int) -> tuple[np.ndarray, np.ndarray]:
    masked = values.copy()
    target = values[mask_start : mask_start + MASK].copy()
    masked[mask_start : mask_start + MASK] = 0.0
    return masked, target


def make_masked_sample(segment: Segment, rng: np.random.Generator, policy: str = "beat_centered",
                       values: np.ndarray | None = None) -> MaskedSample:
    """Zero 100 samples around a randomly chosen beat (shifted by up to 10 samples)."""
    values = segment.values if values is None else values
    if policy == "uniform":
        start = int(rng.integers(0, WINDOW - MASK + 1))
        beat = None
    elif policy == "beat_centered":
        beats = eligible_beats(segment)
        if not beats:
            raise NoBeatError(f"{segment.record_name}@{segment.start_sample}: no beat in [60, 3540]")
        beat = beats[int(rng.integers(len(beats)))]
        start = mask_start_for_beat(beat, int(rng.integers(-JITTER, JITTER + 1)))
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
    masked, target = apply_mask(values, start)
    return MaskedSample(masked, target, start, segment, beat)


# ---------------------------------------------------------------- DS0


def _usable(segment: Segment) -> bool:
    w = segment.source.signal[segment.start_sample : segment.start_sample + WINDOW]
    return w.max() > w.min() and bool(eligible_beats(segment))


def build_ds0(sources: list[Source], n_total: int, rng: np.random.Generator | int = 0,
              max_redraws: int = 1000) -> list[Segment]:
    """``n_total / len(sources)`` uniformly placed windows per subject.

    Windows that are constant or hold no maskable beat are redrawn.
    """
    rng = np.random.default_rng(rng)
    if not sources:
        raise ValueError("no usable records")
    if n_total % len(sources):
        raise ValueError(f"n_total {n_total} is not divisible by {len(sources)} subjects")
    per = n_total // len(sources)
    out = []
    for src in sources:
        high = src.signal.size - WINDOW + 1
        for _ in range(per):
            for _ in range(max_redraws):
                seg = make_segment(src, int(rng.integers(0, high)))
                if _usable(seg):
                    break
            else:
                raise ConstructionError(f"record {src.record_name}: no usable window in {max_redraws} draws")
            out.append(seg)
    return out


def split_fraction(items: list, fraction: float, rng: np.random.Generator | int = 0) -> tuple[list, list]:
    """Random (1 - fraction, fraction) split, e.g. the 90/10 DS0 train/val split."""
    rng = np.random.default_rng(rng)
    order = rng.permutation(len(items))
    n_second = int(round(fraction * len(items)))
    return [items[i] for i in order[n_second:]], [items[i] for i in order[:n_second]]


# ---------------------------------------------------------------- DS1 / DS2


@dataclass
class ClassificationBundle:
    pool: list[Segment]
    splits: list[dict[str, np.ndarray]]  # per repetition: split name -> indices into pool
    table: ClassTable

    def split(self, name: str, repetition: int = 0) -> list[Segment]:
        return [self.pool[i] for i in self.splits[repetition][name]]

    def arrays(self, name: str, repetition: int = 0) -> tuple[np.ndarray, np.ndarray]:
        segs = self.split(name, repetition)
        return (np.stack([s.values for s in segs]) if segs else np.zeros((0, WINDOW)),
                np.array([s.label for s in segs], dtype=np.int64))


def candidate_windows(sources: list[Source], table: ClassTable, stride: int = 360) -> dict[int, list[Segment]]:
    """Every labelable window on a ``stride`` grid, grouped by class."""
    by_class: dict[int, list[Segment]] = {c.index: [] for c in table.classes}
    for src in sources:
        for start in range(0, src.signal.size - WINDOW + 1, stride):
            seg = make_segment(src, start)
            w = src.signal[start : start + WINDOW]
            if w.max() <= w.min():
                continue
            label = label_segment(seg, table)
            if label is not None:
                seg.label = label
                by_class[label].append(seg)
    return by_class


def select_non_overlapping(by_class: dict[int, list[Segment]], table: ClassTable,
                           rng: np.random.Generator) -> list[Segment]:
    """Pick each class's quota, scarcest classes first, with disjoint sample ranges per record."""
    taken: dict[str, list[int]] = {}

    def free(seg: Segment) -> bool:
        starts = taken.get(seg.record_name, [])
        return all(abs(seg.start_sample - s) >= WINDOW for s in starts)

    need = {c.index: c.segments for c in table.classes}
    order = sorted(need, key=lambda k: (len(by_class[k]) / max(need[k], 1), k))
    chosen: dict[int, list[Segment]] = {}
    deficits = {}
    for k in order:
        picks = []
        for i in rng.permutation(len(by_class[k])):
            if len(picks) == need[k]:
                break
            seg = by_class[k][i]
            if free(seg):
                picks.append(seg)
                taken.setdefault(seg.record_name, []).append(seg.start_sample)
        if len(picks) < need[k]:
            deficits[table.classes[k].key] = need[k] - len(picks)
        chosen[k] = sorted(picks, key=lambda s: (s.record_name, s.start_sample))
    if deficits:
        raise ConstructionError(f"not enough non-overlapping segments: short by {deficits}")
    return [s for k in sorted(chosen) for s in chosen[k]]


def resample_splits(pool: list[Segment], table: ClassTable, repetitions: int = N_REPETITIONS,
                    seed: int = 0) -> list[dict[str, np.ndarray]]:
    """Per repetition, permute each class's segments and cut them into train/val/test."""
    labels = np.array([s.label for s in pool])
    splits = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        parts = {name: [] for name in SPLITS}
        for c in table.classes:
            members = np.flatnonzero(labels == c.index)
            members = members[rng.permutation(members.size)]
            parts["train"].append(members[: c.train])
            parts["val"].append(members[c.train : c.train + c.val])
            parts["test"].append(members[c.train + c.val : c.segments])
        splits.append({k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in parts.items()})
    return splits


def build_ds1_ds2(sources: list[Source], table: ClassTable | None = None, rng: np.random.Generator | int = 0,
                  repetitions: int = N_REPETITIONS, stride: int = 360) -> ClassificationBundle:
    rng = np.random.default_rng(rng)
    table = table or load_class_table()
    pool = select_non_overlapping(candidate_windows(sources, table, stride), table, rng)
    split_seed = int(rng.integers(2**31))
    return ClassificationBundle(pool, resample_splits(pool, table, repetitions, split_seed), table)


# ---------------------------------------------------------------- QRS test set

QRS_COUNTS = {"N": 10000, "X": 10000, "M": 10000, "P": 2281}


@dataclass
class QrsTestSet:
    samples: dict[str, list[MaskedSample]]
    shortfall: dict[str, int]


def build_qrs_testset(sources: list[Source], counts: dict[str, int] | None = None,
                      rng: np.random.Generator | int = 0, stride: int = 180) -> QrsTestSet:
    """Masked windows per group; groups with too few candidates are filled as far as possible."""
    rng = np.random.default_rng(rng)
    counts = dict(QRS_COUNTS if counts is None else counts)
    candidates: dict[str, list[Segment]] = {g: [] for g in counts}
    for src in sources:
        for start in range(0, src.signal.size - WINDOW + 1, stride):
            seg = make_segment(src, start)
            if not seg.annotations_in_window and not seg.carried_rhythm:
                continue
            group = segment_group(seg)
            if group in candidates and eligible_beats(seg):
                w = src.signal[start : start + WINDOW]
                if w.max() > w.min():
                    candidates[group].append(seg)
    samples, shortfall = {}, {}
    for group, want in counts.items():
        pool = candidates[group]
        take = min(want, len(pool))
        if take < want:
            shortfall[group] = want - take
            warnings.warn(f"group {group}: {len(pool)} windows available, {want} requested", stacklevel=2)
        chosen = [pool[i] for i in rng.choice(len(pool), size=take, replace=False)] if take else []
        samples[group] = []
        for seg in chosen:
            ms = make_masked_sample(seg, rng)
            ms.group = group
            samples[group].append(ms)
    return QrsTestSet(samples, shortfall)


# ---------------------------------------------------------------- manifests


def manifest_rows(dataset: str, segments: list[Segment], split: str | None = None,
                  repetition: int | None = None) -> list[dict]:
    return [
        {"dataset": dataset, "record_name": s.record_name, "start_sample": s.start_sample,
         "label": s.label, "split": split, "repetition": repetition}
        for s in segments
    ]


def bundle_rows(bundle: ClassificationBundle) -> list[dict]:
    rows = []
    for rep, parts in enumerate(bundle.splits):
        for name in SPLITS:
            rows += manifest_rows("ds1" if name != "test" else "ds2",
                                  [bundle.pool[i] for i in parts[name]], name, rep)
    return rows


def write_manifest(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def segments_from_rows(rows: list[dict], sources: list[Source]) -> list[Segment]:
    by_name = {s.record_name: s for s in sources}
    return [make_segment(by_name[r["record_name"]], r["start_sample"], r.get("label")) for r in rows]


def bundle_from_rows(rows: list[dict], sources: list[Source], table: ClassTable | None = None) -> ClassificationBundle:
    """Rebuild a classification bundle from its manifest (pool in canonical label, record, start order)."""
    table = table or load_class_table()
    by_name = {s.record_name: s for s in sources}
    keys = sorted({(r["label"], r["record_name"], r["start_sample"]) for r in rows})
    index = {k: i for i, k in enumerate(keys)}
    pool = [make_segment(by_name[name], start, label) for label, name, start in keys]
    reps: dict[int, dict[str, list[int]]] = {}
    for r in rows:
        k = index[(r["label"], r["record_name"], r["start_sample"])]
        reps.setdefault(r["repetition"], {n: [] for n in SPLITS})[r["split"]].append(k)
    splits = [{n: np.sort(np.array(v, dtype=np.int64)) for n, v in reps[k].items()} for k in sorted(reps)]
    return ClassificationBundle(pool, splits, table)
