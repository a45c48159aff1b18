"""Event stream types and file IO.

Events are kept as parallel numpy arrays (struct-of-arrays) inside an
immutable ``EventSlice``.  Two on-disk formats are supported:

* binary: little-endian, 18-byte header (``b"EVLS"``, version u16, W u16,
  H u16, count u64) followed by 14-byte records (t u64 [us], x u16, y u16,
  p i8, pad i8).
* csv: one ``t,x,y,p`` per line.  An optional ``# geometry W H`` comment and
  an optional ``t,x,y,p`` header line may precede the records.

Masks are 8-bit grayscale PGM or PNG files, 0 = background, 255 = foreground.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MAGIC = b"EVLS"
VERSION = 1

HEADER_DTYPE = np.dtype([("magic", "S4"), ("version", "<u2"), ("width", "<u2"),
                         ("height", "<u2"), ("count", "<u8")])
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "i1")])


class EventFormatError(ValueError):
    """Raised for malformed event files or records violating the geometry."""


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 2 or int(self.height) < 2:
            raise ValueError(f"sensor geometry must be at least 2x2, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self) -> tuple[int, int]:
        """(H, W), numpy image order."""
        return (self.height, self.width)


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EventSlice:
    """A time-ordered window of events on a fixed sensor.

    ``resorted`` is set when the input had to be stably sorted by timestamp.
    """

    geometry: SensorGeometry
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    resorted: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "t", _readonly(self.t, np.int64))
        object.__setattr__(self, "x", _readonly(self.x, np.int64))
        object.__setattr__(self, "y", _readonly(self.y, np.int64))
        object.__setattr__(self, "p", _readonly(self.p, np.int8))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")
        _validate(self.geometry, self.t, self.x, self.y, self.p)
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")

    @classmethod
    def from_arrays(cls, geometry, t, x, y, p) -> "EventSlice":
        """Build a slice from unsorted arrays, stably sorting by t if needed."""
        t = np.asarray(t, dtype=np.int64)
        x, y, p = (np.asarray(a) for a in (x, y, p))
        resorted = False
        if len(t) > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
            resorted = True
        return cls(geometry, t, x, y, p, resorted=resorted)

    @classmethod
    def empty(cls, geometry) -> "EventSlice":
        z = np.zeros(0, dtype=np.int64)
        return cls(geometry, z, z, z, z)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, EventSlice):
            return NotImplemented
        return (self.geometry == other.geometry
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def __repr__(self):
        return (f"EventSlice({self.geometry.width}x{self.geometry.height}, "
                f"n={len(self)}, resorted={self.resorted})")


@dataclass(frozen=True, eq=False)
class NormalizedEvents:
    """Events with timestamps rescaled to [0, 1]."""

    geometry: SensorGeometry
    t: np.ndarray  # float64 in [0, 1]
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    duration_us: int

    def __len__(self):
        return len(self.t)


def _validate(geometry, t, x, y, p):
    if len(t) == 0:
        return
    if np.any(t < 0):
        raise EventFormatError("negative timestamp")
    bad = (x < 0) | (x >= geometry.width) | (y < 0) | (y >= geometry.height)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EventFormatError(
            f"event {i} at (x={int(x[i])}, y={int(y[i])}) outside "
            f"{geometry.width}x{geometry.height} sensor")
    badp = (p != 1) & (p != -1)
    if np.any(badp):
        i = int(np.flatnonzero(badp)[0])
        raise EventFormatError(f"event {i} has polarity {int(p[i])}, expected +1 or -1")


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("binary", "csv"):
            raise ValueError(f"unknown event format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def load_events(path, fmt=None, geometry=None) -> EventSlice:
    """Read an event file.

    ``fmt`` is ``"binary"`` or ``"csv"``; inferred from the extension when
    omitted.  CSV files need either a ``# geometry W H`` line or an explicit
    ``geometry``.
    """
    fmt = _infer_format(path, fmt)
    if fmt == "binary":
        return _load_binary(path)
    return _load_csv(path, geometry)


def save_events(slice_: EventSlice, path, fmt=None) -> None:
    fmt = _infer_format(path, fmt)
    if fmt == "binary":
        _save_binary(slice_, path)
    else:
        _save_csv(slice_, path)


def _load_binary(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < HEADER_DTYPE.itemsize:
        raise EventFormatError(f"{path}: truncated header")
    hdr = raw[:HEADER_DTYPE.itemsize].view(HEADER_DTYPE)[0]
    if hdr["magic"] != MAGIC:
        raise EventFormatError(f"{path}: bad magic {bytes(hdr['magic'])!r}")
    if int(hdr["version"]) != VERSION:
        raise EventFormatError(f"{path}: unsupported version {int(hdr['version'])}")
    try:
        geometry = SensorGeometry(int(hdr["width"]), int(hdr["height"]))
    except ValueError as e:
        raise EventFormatError(f"{path}: {e}") from None
    count = int(hdr["count"])
    body = raw[HEADER_DTYPE.itemsize:]
    if body.size != count * RECORD_DTYPE.itemsize:
        raise EventFormatError(
            f"{path}: header declares {count} records but body holds {body.size} bytes")
    rec = body.view(RECORD_DTYPE)
    if np.any(rec["t"] > np.iinfo(np.int64).max):
        raise EventFormatError(f"{path}: timestamp overflow")
    return EventSlice.from_arrays(geometry, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])


def _save_binary(s, path):
    hdr = np.zeros(1, dtype=HEADER_DTYPE)
    hdr["magic"] = MAGIC
    hdr["version"] = VERSION
    hdr["width"] = s.geometry.width
    hdr["height"] = s.geometry.height
    hdr["count"] = len(s)
    rec = np.zeros(len(s), dtype=RECORD_DTYPE)
    rec["t"] = s.t
    rec["x"] = s.x
    rec["y"] = s.y
    rec["p"] = s.p
    with open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(rec.tobytes())


def _load_csv(path, geometry):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "geometry":
                    try:
                        g = SensorGeometry(int(parts[1]), int(parts[2]))
                    except ValueError as e:
                        raise EventFormatError(f"{path}:{lineno}: {e}") from None
                    if geometry is not None and g != geometry:
                        raise EventFormatError(f"{path}: geometry {g} conflicts with {geometry}")
                    geometry = g
                continue
            if line.replace(" ", "") == "t,x,y,p":
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append(tuple(int(v) for v in parts))
            except ValueError:
                raise EventFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    if geometry is None:
        raise EventFormatError(f"{path}: no geometry line and no geometry given")
    if not rows:
        return EventSlice.empty(geometry)
    a = np.array(rows, dtype=np.int64)
    return EventSlice.from_arrays(geometry, a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def _save_csv(s, path):
    with open(path, "w") as f:
        f.write(f"# geometry {s.geometry.width} {s.geometry.height}\n")
        f.write("t,x,y,p\n")
        if len(s):
            a = np.stack([s.t, s.x, s.y, s.p.astype(np.int64)], axis=1)
            np.savetxt(f, a, fmt="%d", delimiter=",")


def take_window(s: EventSlice, n: int) -> EventSlice:
    """First ``min(n, len(s))`` events."""
    n = int(n)
    if n < 1:
        raise ValueError("window size must be >= 1")
    return EventSlice(s.geometry, s.t[:n], s.x[:n], s.y[:n], s.p[:n], resorted=s.resorted)


def normalize_timestamps(s: EventSlice) -> NormalizedEvents:
    if len(s) == 0:
        raise ValueError("cannot normalize an empty event slice")
    t0, t1 = int(s.t[0]), int(s.t[-1])
    span = t1 - t0
    if span == 0:
        tn = np.zeros(len(s))
    else:
        tn = (s.t - t0).astype(np.float64) / span
    return NormalizedEvents(s.geometry, tn, s.x, s.y, s.p, span)


# -- masks -----------------------------------------------------------------

def save_mask(mask, path) -> None:
    """Write a boolean mask as 8-bit grayscale (format from extension: .pgm or .png)."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    bad = (img != 0) & (img != 255)
    if np.any(bad):
        raise EventFormatError(f"{path}: mask values must be 0 or 255")
    return img == 255


def save_gray(image, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
