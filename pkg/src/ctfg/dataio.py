"""Recording ingestion, sliding windows, per-user z-scoring, LOGO splits and
stratified batches."""

from __future__ import annotations

import csv
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import load_checkpoint, save_checkpoint


class DataError(ValueError):
    """Malformed input data; ``row`` is the 0-based data row when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass
class Schema:
    """Column layout of a delimiter-separated recording file."""

    channels: list[str]
    label: str
    user: str
    sample_rate: float
    delimiter: str = ","
    groups: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> Schema:
        """Parse ``key=value`` lines; ``groups`` reads ``A:1,2;B:3,4``."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise DataError(f"cannot read schema {path}: {e}") from None
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"schema {path}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        missing = {"channels", "label", "user", "sample_rate"} - kv.keys()
        if missing:
            raise DataError(f"schema {path}: missing keys {sorted(missing)}")
        delim = kv.get("delimiter", ",")
        delim = {"tab": "\t", "\\t": "\t", "comma": ",", "space": " "}.get(delim, delim)
        return cls(channels=[c.strip() for c in kv["channels"].split(",") if c.strip()],
                   label=kv["label"], user=kv["user"], sample_rate=float(kv["sample_rate"]),
                   delimiter=delim, groups=parse_groups(kv.get("groups", "")))

    def to_text(self) -> str:
        delim = {"\t": "tab", " ": "space"}.get(self.delimiter, self.delimiter)
        lines = [f"channels={','.join(self.channels)}", f"label={self.label}",
                 f"user={self.user}", f"sample_rate={self.sample_rate:g}", f"delimiter={delim}"]
        if self.groups:
            lines.append("groups=" + format_groups(self.groups))
        return "\n".join(lines) + "\n"


def parse_groups(text: str) -> dict[str, list[int]]:
    groups = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        name, _, users = part.partition(":")
        groups[name.strip()] = [int(u) for u in users.split(",") if u.strip()]
    return groups


def format_groups(groups: Mapping[str, Sequence[int]]) -> str:
    return ";".join(f"{g}:{','.join(str(u) for u in us)}" for g, us in groups.items())


@dataclass
class Recording:
    user_id: int
    samples: np.ndarray  # (T, d)
    labels: np.ndarray  # (T,) int
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.labels) != len(self.samples):
            raise DataError(f"recording shape mismatch: samples {self.samples.shape}, labels {self.labels.shape}")
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")
        if len(self.labels) and self.labels.min() < 1:
            raise DataError("labels must be in 1..C")


@dataclass
class WindowSet:
    """Stacked sensor windows: x (N, l, d), labels y, users u, group names."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    group: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.int64)
        if self.group is None:
            self.group = np.full(len(self.y), "", dtype=object)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.x[idx], self.y[idx], self.u[idx], self.group[idx])

    @classmethod
    def concat(cls, sets: Sequence[WindowSet]) -> WindowSet:
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls(np.zeros((0, 0, 0)), [], [])
        return cls(np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]),
                   np.concatenate([s.u for s in sets]), np.concatenate([s.group for s in sets]))

    @property
    def users(self) -> list[int]:
        return sorted(set(self.u.tolist()))

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.y.tolist()))


def _interpolate_gaps(col: np.ndarray) -> np.ndarray:
    bad = np.isnan(col)
    if not bad.any():
        return col
    good = np.flatnonzero(~bad)
    if len(good) == 0:
        raise DataError("channel has no numeric values")
    # np.interp holds the end values constant beyond the data range
    col = col.copy()
    col[bad] = np.interp(np.flatnonzero(bad), good, col[good])
    return col


def _read_table(path: Path, schema: Schema):
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f, delimiter=schema.delimiter, skipinitialspace=True))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in [*schema.channels, schema.label, schema.user]:
        if col not in header:
            raise DataError(f"{path}: unknown column {col!r}")
    ch_idx = [header.index(c) for c in schema.channels]
    lab_idx, user_idx = header.index(schema.label), header.index(schema.user)
    n = len(rows) - 1
    values = np.empty((n, len(ch_idx)))
    labels = np.empty(n, dtype=np.int64)
    users = np.empty(n, dtype=np.int64)
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: expected {len(header)} fields, got {len(row)}", row=r)
        for j, c in enumerate(ch_idx):
            cell = row[c].strip()
            if cell == "" or cell.lower() in ("nan", "na"):
                values[r, j] = np.nan
                continue
            try:
                values[r, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} in {header[c]!r}", row=r) from None
        try:
            labels[r] = int(float(row[lab_idx]))
            users[r] = int(float(row[user_idx]))
        except ValueError:
            raise DataError(f"{path}: non-numeric label or user", row=r) from None
    return values, labels, users


def load_recordings(path, schema: Schema) -> list[Recording]:
    """Read one file or every ``*.csv``/``*.txt``/``*.dat`` file of a directory.

    Each (file, user) pair becomes one Recording with row order preserved.
    Missing channel values are linearly interpolated within the recording.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".csv", ".txt", ".dat"))
        if not files:
            raise DataError(f"{path}: no data files")
    else:
        files = [path]
    recs = []
    for f in files:
        values, labels, users = _read_table(f, schema)
        for uid in dict.fromkeys(users.tolist()):
            sel = users == uid
            block = values[sel]
            block = np.column_stack([_interpolate_gaps(block[:, j]) for j in range(block.shape[1])])
            recs.append(Recording(int(uid), block, labels[sel], schema.sample_rate))
    recs.sort(key=lambda r: r.user_id)
    return recs


def window_stride(window_len: int, overlap: float) -> int:
    return max(1, int(np.floor(window_len * (1.0 - overlap))))


def make_windows(rec: Recording, window_len: int, overlap: float) -> WindowSet:
    """Slide windows of ``window_len`` rows with stride floor(l*(1-overlap)).

    Each window takes the majority label of its rows; windows whose majority
    covers less than half the rows are dropped.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    T, d = rec.samples.shape
    if window_len > T:
        return WindowSet(np.zeros((0, window_len, d)), [], [])
    stride = window_stride(window_len, overlap)
    starts = np.arange(0, T - window_len + 1, stride)
    xs, ys = [], []
    for s0 in starts:
        lab = rec.labels[s0:s0 + window_len]
        counts = np.bincount(lab)
        top = int(np.argmax(counts))
        if 2 * counts[top] < window_len:
            continue
        xs.append(rec.samples[s0:s0 + window_len])
        ys.append(top)
    if not xs:
        return WindowSet(np.zeros((0, window_len, d)), [], [])
    return WindowSet(np.stack(xs), ys, np.full(len(ys), rec.user_id))


def windows_from_recordings(recs: Sequence[Recording], window_len: int, overlap: float) -> WindowSet:
    return WindowSet.concat([make_windows(r, window_len, overlap) for r in recs])


def zscore_per_user(windows: WindowSet, min_std: float = 1e-8) -> WindowSet:
    """Standardize each channel with the statistics of that user's windows."""
    x = windows.x.copy()
    for uid in windows.users:
        sel = windows.u == uid
        flat = x[sel].reshape(-1, x.shape[-1])
        if len(flat) < 2:
            raise DataError(f"user {uid}: need at least 2 samples for z-scoring")
        mu = flat.mean(axis=0)
        sd = flat.std(axis=0)
        if np.any(sd < min_std):
            warnings.warn(f"user {uid}: constant channel(s) {np.flatnonzero(sd < min_std).tolist()}",
                          RuntimeWarning, stacklevel=2)
        x[sel] = (x[sel] - mu) / np.maximum(sd, min_std)
    return WindowSet(x, windows.y, windows.u, windows.group)


@dataclass
class SplitPlan:
    groups: dict[str, list[int]]
    heldout: str

    def __post_init__(self):
        if self.heldout not in self.groups:
            raise DataError(f"held-out group {self.heldout!r} not in plan {list(self.groups)}")
        seen = set()
        for g, users in self.groups.items():
            if seen & set(users):
                raise DataError(f"group {g!r} overlaps another group")
            seen |= set(users)

    def group_of(self) -> dict[int, str]:
        return {u: g for g, us in self.groups.items() for u in us}


def split_logo(windows: WindowSet, plan: SplitPlan) -> tuple[WindowSet, WindowSet]:
    """Leave-one-group-out split. Users outside the plan are dropped."""
    owner = plan.group_of()
    known = np.array([u in owner for u in windows.u.tolist()], dtype=bool)
    if not known.all():
        stray = sorted(set(windows.u[~known].tolist()))
        warnings.warn(f"users {stray} not in split plan; dropped", RuntimeWarning, stacklevel=2)
    ws = windows.subset(known)
    ws.group = np.array([owner[u] for u in ws.u.tolist()], dtype=object)
    test = ws.group == plan.heldout
    train_set, test_set = ws.subset(~test), ws.subset(test)
    if len(train_set) == 0 or len(test_set) == 0:
        raise DataError(f"empty {'train' if len(train_set) == 0 else 'test'} partition "
                        f"when holding out {plan.heldout!r}")
    return train_set, test_set


@dataclass
class BatchSpec:
    samples_per_cell: int = 2

    def __post_init__(self):
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be positive")


def stratified_batch(windows: WindowSet, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Indices of a batch holding ``samples_per_cell`` windows per (user, class).

    Cells smaller than the request are sampled with replacement.
    """
    picks, empty = [], []
    for uid in windows.users:
        for c in windows.classes:
            cell = np.flatnonzero((windows.u == uid) & (windows.y == c))
            if len(cell) == 0:
                empty.append((uid, c))
                continue
            replace = len(cell) < spec.samples_per_cell
            picks.append(rng.choice(cell, size=spec.samples_per_cell, replace=replace))
    if empty:
        warnings.warn(f"stratified_batch: empty (user, class) cells skipped: {empty}",
                      RuntimeWarning, stacklevel=2)
    if not picks:
        return np.zeros(0, dtype=np.int64)
    idx = np.concatenate(picks)
    return idx[rng.permutation(len(idx))]


def save_windows(path, windows: WindowSet) -> None:
    """Cache windows in the checkpoint framing (group names are not kept)."""
    save_checkpoint(path, {"x": windows.x, "y": windows.y.astype(np.float64),
                           "u": windows.u.astype(np.float64)})


def load_windows(path) -> WindowSet:
    d = load_checkpoint(path)
    return WindowSet(d["x"], d["y"].astype(np.int64), d["u"].astype(np.int64))
