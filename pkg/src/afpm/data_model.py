"""Channel registry, trial containers, the on-disk dataset format, and domain grouping.

A dataset on disk is a directory holding ``manifest.json`` plus one raw binary
file per trial (little-endian float32, row-major channels x time, no header).
Channel lists are stored once in the manifest and referenced per trial.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "afpm-dataset-v1"

TASKS = ("mi", "erp")

# Target channel sets: 17 channels over the primary motor cortex for motor
# imagery, 28 channels over midline parietal/central regions for ERP.
MI_TEMPLATE_CHANNELS = (
    "FC3", "FC1", "FCZ", "FC2", "FC4",
    "C5", "C3", "C1", "CZ", "C2", "C4", "C6",
    "CP3", "CP1", "CPZ", "CP2", "CP4",
)
ERP_TEMPLATE_CHANNELS = (
    "FP1", "FP2", "F5", "F3", "FZ", "F4", "F6", "FCZ",
    "T7", "C3", "CZ", "C4", "T8",
    "CP3", "CPZ", "CP4",
    "P7", "P3", "PZ", "P4", "P8",
    "PO7", "PO3", "PO4", "PO8",
    "O1", "OZ", "O2",
)

# Template lengths in samples at 256 Hz: 5 s for MI (longest admissible
# training trial), 1 s for ERP.
MI_TEMPLATE_LEN = 1280
ERP_TEMPLATE_LEN = 256


def canonical_channel(name: str) -> str:
    """Canonicalize an electrode name: uppercase, separators stripped.

    Datasets disagree on casing ("Fcz" vs "FCZ") and some insert dots or
    spaces; comparison throughout the package is on this canonical form.
    """
    cleaned = name.strip().replace(".", "").replace(" ", "").upper()
    if not cleaned:
        raise DataError(f"empty channel name {name!r}")
    return cleaned


def canonical_channels(names) -> tuple[str, ...]:
    """Canonicalize a channel list and enforce uniqueness."""
    out = tuple(canonical_channel(n) for n in names)
    if len(set(out)) != len(out):
        dupes = sorted({n for n in out if out.count(n) > 1})
        raise DataError(f"duplicate channel names after canonicalization: {dupes}")
    return out


@dataclass(frozen=True)
class TaskTemplateSpec:
    """Unified model input layout: ordered target channels and template length."""

    task: str
    target_channels: tuple[str, ...]
    template_len: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.template_len < 1:
            raise DataError("template_len must be positive")
        object.__setattr__(self, "target_channels", canonical_channels(self.target_channels))

    @property
    def n_channels(self) -> int:
        return len(self.target_channels)

    def row_index(self, channel: str) -> int:
        return self.target_channels.index(canonical_channel(channel))


def task_template(task: str) -> TaskTemplateSpec:
    """Built-in template for ``task``: 'mi' (17 ch, 1280 samples) or 'erp' (28 ch, 256)."""
    task = task.lower()
    if task == "mi":
        return TaskTemplateSpec("mi", MI_TEMPLATE_CHANNELS, MI_TEMPLATE_LEN)
    if task == "erp":
        return TaskTemplateSpec("erp", ERP_TEMPLATE_CHANNELS, ERP_TEMPLATE_LEN)
    raise DataError(f"unknown task {task!r}, expected one of {TASKS}")


@dataclass(frozen=True)
class EEGTrial:
    """One labeled trial: float matrix [channels x samples] in 0.1 mV units."""

    data: np.ndarray
    channels: tuple[str, ...]
    rate_hz: float
    label: int
    domain_id: str

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DataError(f"trial data must be 2-D, got shape {data.shape}")
        if len(self.channels) != data.shape[0]:
            raise DataError(
                f"channel list length {len(self.channels)} != matrix rows {data.shape[0]}"
            )
        if not np.all(np.isfinite(data)):
            raise DataError("non-finite sample in trial data")
        if self.rate_hz <= 0:
            raise DataError("rate_hz must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", canonical_channels(self.channels))
        data.setflags(write=False)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DomainGroup:
    """Trials sharing subject/session/device; the unit of alignment statistics."""

    domain_id: str
    trials: tuple[EEGTrial, ...]

    def __post_init__(self):
        if not self.trials:
            raise DataError(f"domain {self.domain_id!r} has no trials")

    def __len__(self) -> int:
        return len(self.trials)


@dataclass(frozen=True)
class TrialRecord:
    path: str
    channel_set: str
    label: int
    domain_id: str
    n_samples: int


@dataclass(frozen=True)
class DatasetManifest:
    """Validated description of an on-disk dataset."""

    root: str
    name: str
    task: str
    rate_hz: float
    class_names: tuple[str, ...]
    channel_sets: dict[str, tuple[str, ...]]
    trials: tuple[TrialRecord, ...]
    unit_scale: float = 1.0
    alignment: dict | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def channels_of(self, rec: TrialRecord) -> tuple[str, ...]:
        return self.channel_sets[rec.channel_set]

    def all_channels(self) -> tuple[str, ...]:
        """Union of every referenced channel set, sorted for determinism."""
        names: set[str] = set()
        for rec in self.trials:
            names.update(self.channels_of(rec))
        return tuple(sorted(names))


_MANIFEST_KEYS = {
    "format", "name", "task", "rate_hz", "unit_scale",
    "class_names", "channel_sets", "trials", "alignment",
}
_TRIAL_KEYS = {"path", "channels", "label", "domain_id", "n_samples"}


def _require(cond: bool, where: str, msg: str):
    if not cond:
        raise DataError(f"{where}: {msg}")


def load_manifest(path: str) -> DatasetManifest:
    """Load and fully validate a dataset manifest.

    ``path`` may point at the manifest file itself or at its directory.
    Every referenced trial file must exist with exactly
    ``4 * n_channels * n_samples`` bytes.
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed manifest {path}: {e}") from e
    root = os.path.dirname(os.path.abspath(path))

    _require(isinstance(raw, dict), "manifest", "top level must be an object")
    unknown = set(raw) - _MANIFEST_KEYS
    _require(not unknown, "manifest", f"unknown keys {sorted(unknown)}")
    for key in ("name", "task", "rate_hz", "class_names", "channel_sets", "trials"):
        _require(key in raw, "manifest", f"missing key {key!r}")
    fmt = raw.get("format", DATASET_FORMAT)
    _require(fmt == DATASET_FORMAT, "manifest.format", f"unsupported format {fmt!r}")
    task = str(raw["task"]).lower()
    _require(task in TASKS, "manifest.task", f"unknown task {raw['task']!r}")
    rate_hz = float(raw["rate_hz"])
    _require(rate_hz > 0, "manifest.rate_hz", "must be positive")
    unit_scale = float(raw.get("unit_scale", 1.0))
    _require(unit_scale > 0, "manifest.unit_scale", "must be positive")
    class_names = tuple(str(c) for c in raw["class_names"])
    _require(len(class_names) >= 2, "manifest.class_names", "need at least 2 classes")

    channel_sets: dict[str, tuple[str, ...]] = {}
    for set_id, names in raw["channel_sets"].items():
        try:
            channel_sets[str(set_id)] = canonical_channels(names)
        except DataError as e:
            raise DataError(f"manifest.channel_sets[{set_id!r}]: {e}") from e

    trials: list[TrialRecord] = []
    for i, t in enumerate(raw["trials"]):
        where = f"manifest.trials[{i}]"
        _require(isinstance(t, dict), where, "must be an object")
        unknown = set(t) - _TRIAL_KEYS
        _require(not unknown, where, f"unknown keys {sorted(unknown)}")
        for key in _TRIAL_KEYS:
            _require(key in t, where, f"missing key {key!r}")
        set_id = str(t["channels"])
        _require(set_id in channel_sets, f"{where}.channels",
                 f"unknown channel set {set_id!r}")
        label = int(t["label"])
        _require(0 <= label < len(class_names), f"{where}.label",
                 f"label {label} out of range for {len(class_names)} classes")
        n_samples = int(t["n_samples"])
        _require(n_samples > 0, f"{where}.n_samples", "must be positive")
        rel = str(t["path"])
        file_path = os.path.join(root, rel)
        _require(os.path.isfile(file_path), f"{where}.path", f"missing file {rel!r}")
        expect = 4 * len(channel_sets[set_id]) * n_samples
        actual = os.path.getsize(file_path)
        _require(actual == expect, f"{where}.path",
                 f"size mismatch: {rel!r} has {actual} bytes, expected {expect}")
        trials.append(TrialRecord(rel, set_id, label, str(t["domain_id"]), n_samples))

    return DatasetManifest(
        root=root, name=str(raw["name"]), task=task, rate_hz=rate_hz,
        class_names=class_names, channel_sets=channel_sets,
        trials=tuple(trials), unit_scale=unit_scale,
        alignment=raw.get("alignment"),
    )


def load_trial(manifest: DatasetManifest, index: int) -> EEGTrial:
    """Read one trial referenced by the manifest.

    The payload is raw little-endian float32, row-major channels x time; the
    returned matrix is float32. Non-finite samples are rejected.
    """
    if not 0 <= index < len(manifest.trials):
        raise DataError(f"trial index {index} out of range (dataset has {len(manifest.trials)})")
    rec = manifest.trials[index]
    channels = manifest.channels_of(rec)
    path = os.path.join(manifest.root, rec.path)
    try:
        flat = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise DataError(f"cannot read {rec.path!r}: {e}") from e
    expect = len(channels) * rec.n_samples
    if flat.size != expect:
        raise DataError(f"{rec.path!r}: size mismatch, {flat.size} values, expected {expect}")
    data = flat.reshape(len(channels), rec.n_samples)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{rec.path!r}: non-finite sample")
    return EEGTrial(data=data, channels=channels, rate_hz=manifest.rate_hz,
                    label=rec.label, domain_id=rec.domain_id)


def load_all_trials(manifest: DatasetManifest) -> list[EEGTrial]:
    return [load_trial(manifest, i) for i in range(len(manifest.trials))]


def group_by_domain(trials) -> list[DomainGroup]:
    """Partition trials by domain_id, sorted by id, order-stable within a group.

    Raises if trials inside one domain disagree on channel list or rate.
    """
    trials = list(trials)
    if not trials:
        raise DataError("no trials to group")
    by_id: dict[str, list[EEGTrial]] = {}
    for t in trials:
        by_id.setdefault(t.domain_id, []).append(t)
    groups = []
    for domain_id in sorted(by_id):
        members = by_id[domain_id]
        ref = members[0]
        for t in members[1:]:
            if t.channels != ref.channels:
                raise DataError(f"domain {domain_id!r}: heterogeneous channel lists")
            if t.rate_hz != ref.rate_hz:
                raise DataError(f"domain {domain_id!r}: heterogeneous sampling rates")
        groups.append(DomainGroup(domain_id=domain_id, trials=tuple(members)))
    return groups


@dataclass
class DatasetWriter:
    """Incrementally writes a dataset directory (trial payloads + manifest).

    Channel sets are deduplicated; trial payload files are numbered in the
    order trials are added, so on-disk order is the chronology of the set.
    """

    out_dir: str
    name: str
    task: str
    rate_hz: float
    class_names: tuple[str, ...]
    unit_scale: float = 1.0
    alignment: dict | None = None
    _sets: dict[tuple[str, ...], str] = field(default_factory=dict)
    _trials: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.task = self.task.lower()
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        os.makedirs(os.path.join(self.out_dir, "trials"), exist_ok=True)

    def _set_id(self, channels: tuple[str, ...]) -> str:
        channels = canonical_channels(channels)
        if channels not in self._sets:
            self._sets[channels] = str(len(self._sets))
        return self._sets[channels]

    def add_trial(self, data: np.ndarray, channels, label: int, domain_id: str) -> str:
        data = np.ascontiguousarray(data, dtype="<f4")
        if data.ndim != 2:
            raise DataError(f"trial data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("non-finite sample in trial data")
        channels = canonical_channels(channels)
        if data.shape[0] != len(channels):
            raise DataError("channel count does not match matrix rows")
        if not 0 <= int(label) < len(self.class_names):
            raise DataError(f"label {label} out of range")
        rel = os.path.join("trials", f"{len(self._trials):06d}.f32")
        data.tofile(os.path.join(self.out_dir, rel))
        self._trials.append({
            "path": rel,
            "channels": self._set_id(channels),
            "label": int(label),
            "domain_id": str(domain_id),
            "n_samples": int(data.shape[1]),
        })
        return rel

    def finish(self) -> DatasetManifest:
        doc = {
            "format": DATASET_FORMAT,
            "name": self.name,
            "task": self.task,
            "rate_hz": float(self.rate_hz),
            "unit_scale": float(self.unit_scale),
            "class_names": list(self.class_names),
            "channel_sets": {sid: list(chs) for chs, sid in self._sets.items()},
            "trials": self._trials,
        }
        if self.alignment is not None:
            doc["alignment"] = self.alignment
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        return load_manifest(path)
