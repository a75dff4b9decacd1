"""File formats: IMU dataset CSV, normalization stats, metrics history and
the flat binary checkpoint."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

DATASET_HEADER = ["t", "ax", "ay", "az", "gx", "gy", "gz", "label_id"]
METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_acc", "lr"]
CHECKPOINT_MAGIC = b"MSSM1"
BUFFER_PREFIX = "buffer."


class DataFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class Recording:
    rid: str
    t: np.ndarray
    signals: np.ndarray   # (T, 6)
    labels: np.ndarray    # (T,)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def read_dataset_csv(path) -> list[Recording]:
    """Parse a split file into recordings.

    The first line is the header; ``# recording <id>`` lines start a new
    recording and blank lines are ignored. Rows before the first marker
    form a recording named ``"0"``.
    """
    recs: list[Recording] = []
    rid, rows = None, []

    def flush():
        if rows:
            arr = np.array([r[:7] for r in rows])
            recs.append(Recording(rid if rid is not None else "0", arr[:, 0], arr[:, 1:7],
                                  np.array([r[7] for r in rows], dtype=np.int64)))

    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != DATASET_HEADER:
        raise DataFormatError(path, 1, "header must be " + ",".join(DATASET_HEADER))
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) != 2 or parts[0] != "recording":
                raise DataFormatError(path, no, "comment lines must read '# recording <id>'")
            flush()
            rid, rows = parts[1], []
            continue
        fields = line.split(",")
        if len(fields) != 8:
            raise DataFormatError(path, no, f"expected 8 fields, got {len(fields)}")
        try:
            vals = [float(f) for f in fields[:7]]
            label = int(fields[7])
        except ValueError as exc:
            raise DataFormatError(path, no, f"bad value: {exc}") from None
        if not np.all(np.isfinite(vals)) or label < 0:
            raise DataFormatError(path, no, "values must be finite and labels non-negative")
        rows.append(vals + [label])
    flush()
    if not recs:
        raise DataFormatError(path, len(lines), "no data rows")
    return recs


def write_dataset_csv(path, recordings: list[Recording]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for rec in recordings:
            fh.write(f"# recording {rec.rid}\n")
            for t, sig, lab in zip(rec.t, rec.signals, rec.labels):
                w.writerow([_fmt(t)] + [_fmt(v) for v in sig] + [int(lab)])


def write_stats_csv(path, mean, std) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "mean", "std"])
        for name, m, s in zip(DATASET_HEADER[1:7], mean, std):
            w.writerow([name, _fmt(m), _fmt(s)])


def read_stats_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["channel", "mean", "std"]:
        raise DataFormatError(path, 1, "header must be channel,mean,std")
    try:
        mean = np.array([float(r[1]) for r in rows[1:]])
        std = np.array([float(r[2]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise DataFormatError(path, 2, f"bad stats row: {exc}") from None
    return mean, std


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [_fmt(row[k]) for k in METRICS_HEADER[1:]])


def save_checkpoint(path, params: dict, buffers: dict | None = None) -> None:
    """``MSSM1`` magic, u64 entry count, then per entry: u64 name length, utf-8
    name, u64 ndim, u64 dims, float64 payload (all little-endian)."""
    entries = list(params.items()) + [(BUFFER_PREFIX + k, v) for k, v in (buffers or {}).items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)) + raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, buffers)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise DataFormatError(path, 0, "not a checkpoint (bad magic)")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(path, 0, "truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith(BUFFER_PREFIX):
            buffers[name[len(BUFFER_PREFIX):]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise DataFormatError(path, 0, "trailing bytes after checkpoint entries")
    return params, buffers
