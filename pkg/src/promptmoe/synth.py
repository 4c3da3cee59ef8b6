"""Synthetic labeled IQ datasets with channel impairments.

Randomness comes from numpy's PCG64 generator.  Each record gets its own
seed derived with ``SeedSequence((dataset_seed, record_index))``, so the
content of a record never depends on generation order.  Inside a record,
symbols, channel draws and noise come from three spawned child streams.
That way a noise-free twin of a record has exactly the same symbols.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dsp import DEFAULT_STFT, IQRecord, STFTConfig, batch_spectrograms, read_iq, write_iq

log = logging.getLogger(__name__)

SCHEMES = ("BPSK", "QPSK", "PSK8", "QAM16", "QAM64", "FSK2", "AM_TONE")


@dataclass(frozen=True)
class ModScheme:
    name: str
    sps: int = 8
    pulse: str = "rrc"  # "rrc" or "rect"
    rolloff: float = 0.35

    def __post_init__(self) -> None:
        if self.name not in SCHEMES:
            raise ValueError(f"unknown modulation {self.name!r}; choose from {SCHEMES}")
        if self.sps < 2:
            raise ValueError("samples per symbol must be >= 2")
        if self.pulse not in ("rrc", "rect"):
            raise ValueError(f"unknown pulse shape {self.pulse!r}")


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = float("inf")
    cfo_norm: float = 0.0
    phase_deg: float = 0.0
    multipath_taps: tuple[complex, ...] | None = None

    def __post_init__(self) -> None:
        if np.isnan(self.snr_db) or self.snr_db == -np.inf:
            raise ValueError("snr_db must be finite (or +inf for a noise-free record)")
        if not abs(self.cfo_norm) < 0.5:
            raise ValueError("|cfo_norm| must be < 0.5")
        if self.multipath_taps is not None:
            if len(self.multipath_taps) == 0 or self.multipath_taps[0] == 0:
                raise ValueError("multipath taps need a nonzero first tap")


@dataclass(frozen=True)
class ChannelRanges:
    """Uniform ranges the per-record channel draws come from."""

    snr_db: tuple[float, float] = (15.0, 25.0)
    cfo_norm: tuple[float, float] = (0.0, 0.0)
    phase_deg: tuple[float, float] = (0.0, 360.0)
    multipath_taps: int = 0  # 0 disables multipath
    multipath_decay: float = 0.5

    def draw(self, rng: np.random.Generator) -> ChannelConfig:
        snr = rng.uniform(*self.snr_db)
        cfo = rng.uniform(*self.cfo_norm)
        phase = rng.uniform(*self.phase_deg)
        taps = None
        if self.multipath_taps > 0:
            n = self.multipath_taps
            amp = self.multipath_decay ** np.arange(n)
            g = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2) * amp
            g[0] = 1.0
            taps = tuple(complex(v) for v in g)
        return ChannelConfig(snr_db=float(snr), cfo_norm=float(cfo), phase_deg=float(phase),
                             multipath_taps=taps)


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[ModScheme, ...]
    per_class_count: int = 100
    channel: ChannelRanges = field(default_factory=ChannelRanges)
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    n_samples: int = 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if not self.classes:
            raise ValueError("need at least one class")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        classes = tuple(ModScheme(**c) if isinstance(c, dict) else ModScheme(c) for c in d["classes"])
        ch = d.get("channel", {})
        ch = ChannelRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in ch.items()})
        rest = {k: v for k, v in d.items() if k not in ("classes", "channel")}
        if "split" in rest:
            rest["split"] = tuple(rest["split"])
        return cls(classes=classes, channel=ch, **rest)


# waveform generation ----------------------------------------------------------

def constellation(name: str) -> np.ndarray:
    """Unit average power constellation points."""
    if name == "BPSK":
        pts = np.array([1.0, -1.0], dtype=complex)
    elif name in ("QPSK", "PSK8"):
        m = 4 if name == "QPSK" else 8
        off = np.pi / 4 if m == 4 else 0.0
        pts = np.exp(1j * (2 * np.pi * np.arange(m) / m + off))
    elif name in ("QAM16", "QAM64"):
        side = 4 if name == "QAM16" else 8
        lv = np.arange(side) * 2 - (side - 1)
        pts = (lv[:, None] + 1j * lv[None, :]).ravel()
    else:
        raise ValueError(f"{name} has no symbol constellation")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def rrc_taps(sps: int, rolloff: float, span: int = 8) -> np.ndarray:
    """Root-raised-cosine taps over ``span`` symbols, scaled so sum(h^2) = sps."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 - b + 4 * b / np.pi
        elif b > 0 and abs(abs(4 * b * ti) - 1.0) < 1e-9:
            h[i] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                       + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            h[i] = num / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    return h * np.sqrt(sps / np.sum(h ** 2))


def modulate(scheme: ModScheme, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Noise-free baseband waveform with unit average power."""
    sps = scheme.sps
    if scheme.name == "FSK2":
        n_sym = -(-n_samples // sps)
        bits = rng.integers(0, 2, n_sym) * 2 - 1
        freq = np.repeat(bits, sps)[:n_samples] * (0.5 / sps)  # modulation index 1
        phase = 2 * np.pi * np.cumsum(freq) + rng.uniform(0, 2 * np.pi)
        return np.exp(1j * phase)
    if scheme.name == "AM_TONE":
        n = np.arange(n_samples)
        fm = rng.uniform(0.5, 2.0) / sps
        env = 1.0 + 0.5 * np.cos(2 * np.pi * fm * n + rng.uniform(0, 2 * np.pi))
        return env / np.sqrt(1.125) + 0j
    pts = constellation(scheme.name)
    if scheme.pulse == "rect":
        n_sym = -(-n_samples // sps)
        sym = pts[rng.integers(0, len(pts), n_sym)]
        return np.repeat(sym, sps)[:n_samples]
    h = rrc_taps(sps, scheme.rolloff)
    delay = (len(h) - 1) // 2
    n_sym = -(-(n_samples + 2 * delay) // sps) + 1
    sym = pts[rng.integers(0, len(pts), n_sym)]
    up = np.zeros(n_sym * sps, dtype=complex)
    up[::sps] = sym
    y = np.convolve(up, h)
    # skip the filter transient so every returned sample is in steady state
    return y[2 * delay: 2 * delay + n_samples]


def apply_channel(x: np.ndarray, chan: ChannelConfig, noise_rng: np.random.Generator | None) -> np.ndarray:
    y = x
    if chan.multipath_taps is not None:
        y = np.convolve(y, np.asarray(chan.multipath_taps, dtype=complex))[: len(x)]
    y = y * np.exp(1j * np.deg2rad(chan.phase_deg))
    if chan.cfo_norm:
        y = y * np.exp(2j * np.pi * chan.cfo_norm * np.arange(len(y)))
    if np.isfinite(chan.snr_db) and noise_rng is not None:
        p_sig = np.mean(np.abs(y) ** 2)
        p_noise = p_sig / 10 ** (chan.snr_db / 10)
        noise = (noise_rng.standard_normal(len(y)) + 1j * noise_rng.standard_normal(len(y)))
        y = y + noise * np.sqrt(p_noise / 2)
    return y


def _streams(seed) -> tuple[np.random.Generator, ...]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # explicit spawn keys: SeedSequence.spawn() is stateful and would make
    # repeated calls on the same seed diverge
    return tuple(np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i,), pool_size=ss.pool_size)))
        for i in range(3))


def generate_record(scheme: ModScheme, n_samples: int, chan: ChannelConfig, seed,
                    label: int = 0, noise: bool = True) -> IQRecord:
    """One labeled record; ``noise=False`` gives the noise-free twin."""
    sym_rng, _, noise_rng = _streams(seed)
    clean = modulate(scheme, n_samples, sym_rng)
    y = apply_channel(clean, chan, noise_rng if noise else None)
    meta = {"scheme": scheme.name, "sps": scheme.sps, "snr_db": chan.snr_db,
            "cfo_norm": chan.cfo_norm, "phase_deg": chan.phase_deg,
            "multipath_taps": None if chan.multipath_taps is None
            else [[c.real, c.imag] for c in chan.multipath_taps]}
    return IQRecord(y.astype(np.complex64), label=label, meta=meta)


def record_seed(dataset_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(dataset_seed), int(index)))


# datasets -------------------------------------------------------------------

@dataclass
class LabeledSet:
    """Spectrograms with labels; ``index`` maps rows back to dataset records."""

    specs: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows: np.ndarray) -> "LabeledSet":
        rows = np.asarray(rows, dtype=np.intp)
        return LabeledSet(self.specs[rows], self.labels[rows], self.index[rows])


@dataclass
class Dataset:
    spec: DatasetSpec
    records: list[IQRecord]
    specs: np.ndarray
    labels: np.ndarray
    partitions: dict[str, np.ndarray]

    @property
    def n_classes(self) -> int:
        return len(self.spec.classes)

    def part(self, name: str) -> LabeledSet:
        rows = self.partitions[name]
        return LabeledSet(self.specs[rows], self.labels[rows], rows)

    @property
    def train(self) -> LabeledSet:
        return self.part("train")

    @property
    def val(self) -> LabeledSet:
        return self.part("val")

    @property
    def test(self) -> LabeledSet:
        return self.part("test")

    def partition_digest(self) -> str:
        h = hashlib.sha256()
        for name in ("train", "val", "test"):
            h.update(name.encode())
            h.update(np.asarray(self.partitions[name], dtype="<i8").tobytes())
        return h.hexdigest()


def stratified_split(labels: np.ndarray, fractions: Sequence[float], rng: np.random.Generator
                     ) -> dict[str, np.ndarray]:
    """Per-class shuffle then cut; each partition is in shuffled order."""
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        n_va = min(n_va, n - n_tr)
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr:n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va:])
    out = {}
    for name, chunks in parts.items():
        merged = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.intp)
        # interleave classes in a seeded order so batches are mixed
        out[name] = merged[rng.permutation(len(merged))]
    return out


def build_dataset(spec: DatasetSpec, stft: STFTConfig = DEFAULT_STFT) -> Dataset:
    if spec.per_class_count < 10:
        raise ValueError(f"need at least 10 records per class, got {spec.per_class_count}")
    records: list[IQRecord] = []
    i = 0
    for label, scheme in enumerate(spec.classes):
        for _ in range(spec.per_class_count):
            ss = record_seed(spec.seed, i)
            _, chan_rng, _ = _streams(ss)
            chan = spec.channel.draw(chan_rng)
            rec = generate_record(scheme, spec.n_samples, chan, ss, label=label)
            rec.meta["seed"] = [int(spec.seed), i]
            records.append(rec)
            i += 1
    labels = np.array([r.label for r in records], dtype=np.int64)
    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(spec.seed), -1 & 0xFFFFFFFF))))
    parts = stratified_split(labels, spec.split, split_rng)
    return Dataset(spec, records, batch_spectrograms(records, stft), labels, parts)


def _per_class_prefix(part: LabeledSet, n: int, strict: bool) -> LabeledSet:
    keep = []
    for c in np.unique(part.labels):
        rows = np.flatnonzero(part.labels == c)
        if len(rows) < n:
            if strict:
                raise ValueError(f"class {c} has {len(rows)} records, {n} requested")
            log.warning("class %d has only %d records; cap %d keeps all", c, len(rows), n)
        keep.append(rows[:n])
    rows = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.intp)
    return part.subset(rows)


def cap_per_class(train: LabeledSet, n: int) -> LabeledSet:
    """First ``n`` records of each class in the partition's shuffled order."""
    if n < 1:
        raise ValueError("cap must be >= 1")
    return _per_class_prefix(train, n, strict=False)


def kshot_support(train: LabeledSet, k: int) -> LabeledSet:
    """Exactly ``k`` records per class; ``k=0`` gives an empty set."""
    if k < 0:
        raise ValueError("shot count must be >= 0")
    if k == 0:
        return train.subset(np.zeros(0, dtype=np.intp))
    return _per_class_prefix(train, k, strict=True)


def make_shift_pair(source_spec: DatasetSpec | Sequence[DatasetSpec], target_spec: DatasetSpec,
                    stft: STFTConfig = DEFAULT_STFT):
    """Build source (one dataset, or one per slice) and target datasets."""
    if isinstance(source_spec, DatasetSpec):
        source = build_dataset(source_spec, stft)
    else:
        source = [build_dataset(s, stft) for s in source_spec]
    return source, build_dataset(target_spec, stft)


# default desk-scale tasks ------------------------------------------------------

TARGET_CLASSES = ("BPSK", "QPSK", "PSK8", "QAM16", "FSK2")
SOURCE_SPS = (4, 8, 16)


def default_target_spec(per_class_count: int = 300, seed: int = 1, shifted: bool = True) -> DatasetSpec:
    classes = tuple(ModScheme(n, sps=8) for n in TARGET_CLASSES)
    ranges = (ChannelRanges(snr_db=(0.0, 10.0), cfo_norm=(-0.02, 0.02), multipath_taps=3)
              if shifted else ChannelRanges())
    return DatasetSpec(classes=classes, per_class_count=per_class_count, channel=ranges, seed=seed)


def default_source_specs(per_class_count: int = 200, seed: int = 100) -> list[DatasetSpec]:
    """One pretext slice per expert, differing in samples per symbol."""
    return [DatasetSpec(classes=tuple(ModScheme(n, sps=sps) for n in TARGET_CLASSES),
                        per_class_count=per_class_count, channel=ChannelRanges(),
                        seed=seed + i)
            for i, sps in enumerate(SOURCE_SPS)]


# on-disk format -----------------------------------------------------------------

def save_dataset(ds: Dataset, directory: str | os.PathLike) -> None:
    """Write ``iq.bin`` plus ``manifest.json`` (records, partitions, spec)."""
    os.makedirs(directory, exist_ok=True)
    spans = write_iq(os.path.join(directory, "iq.bin"), ds.records)
    manifest = {
        "spec": ds.spec.to_dict(),
        "records": [{"offset": off, "length": n, "label": int(r.label), "channel": {
            k: r.meta.get(k) for k in ("snr_db", "cfo_norm", "phase_deg", "multipath_taps")},
            "scheme": r.meta.get("scheme"), "sps": r.meta.get("sps"), "seed": r.meta.get("seed")}
            for (off, n), r in zip(spans, ds.records)],
        "partitions": {k: [int(i) for i in v] for k, v in ds.partitions.items()},
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, default=_json_default)


def _json_default(o):
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o))


def load_dataset(directory: str | os.PathLike, stft: STFTConfig = DEFAULT_STFT) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    path = os.path.join(directory, "iq.bin")
    records = []
    for e in manifest["records"]:
        meta = dict(e["channel"], scheme=e.get("scheme"), sps=e.get("sps"), seed=e.get("seed"))
        records.append(IQRecord(read_iq(path, e["offset"], e["length"]), label=e["label"], meta=meta))
    labels = np.array([r.label for r in records], dtype=np.int64)
    parts = {k: np.asarray(v, dtype=np.intp) for k, v in manifest["partitions"].items()}
    spec = DatasetSpec.from_dict(manifest["spec"])
    return Dataset(spec, records, batch_spectrograms(records, stft), labels, parts)


def with_seed(spec: DatasetSpec, seed: int) -> DatasetSpec:
    return replace(spec, seed=seed)
