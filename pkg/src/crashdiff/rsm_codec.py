"""Road segment map encoding and decoding.

Vehicle records (position, footprint, heading) are rasterized into single
channel occupancy images. Row 0 is the top of the segment (``y_max``) and
column 0 is its upstream edge (``x_min``). Maps never carry vehicle identity.
"""

from __future__ import annotations

import enum
import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

VEHICLE_INTENSITY = 1.0
MARKING_INTENSITY = 0.5

_MAP_MAGIC = b"RSM1"
_EIGHT_NEIGHBOURS = np.ones((3, 3), dtype=bool)


class RecordError(ValueError):
    """A vehicle record cannot be rendered."""


class ConfigurationError(ValueError):
    """Invalid extent, dimensions or scenario configuration."""


class ParseError(ValueError):
    """Malformed line in a record or map file."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class VehicleClass(enum.IntEnum):
    CAR = 0
    TRUCK = 1

    @classmethod
    def parse(cls, token: str) -> "VehicleClass":
        if token.lstrip("-").isdigit():
            return cls(int(token))
        return cls[token.upper()]


@dataclass(frozen=True)
class VehicleRecord:
    time: float
    x: float
    y: float
    length: float
    width: float
    heading: float = 0.0
    cls: VehicleClass = VehicleClass.CAR

    def validate(self) -> None:
        values = (self.time, self.x, self.y, self.length, self.width, self.heading)
        if not all(math.isfinite(v) for v in values):
            raise RecordError(f"non-finite value in record {self}")
        if self.length <= 0 or self.width <= 0:
            raise RecordError(f"vehicle size must be positive, got {self.length}x{self.width}")
        if not -math.pi - 1e-9 <= self.heading <= math.pi + 1e-9:
            raise RecordError(f"heading {self.heading} outside [-pi, pi]")


@dataclass(frozen=True)
class SegmentExtent:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def validate(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ConfigurationError(f"degenerate segment extent {self}")

    @classmethod
    def for_lanes(cls, lane_count: int, segment_length: float, lane_width: float = 3.6) -> "SegmentExtent":
        return cls(0.0, float(segment_length), 0.0, lane_count * float(lane_width))


@dataclass(frozen=True)
class MapDims:
    channels: int = 1
    height: int = 64
    width: int = 64

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if self.height < 16 or self.width < 16:
            raise ConfigurationError(f"map must be at least 16x16, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass
class SegmentMap:
    """One timestep of the segment; ``values`` is H x W x C in [0, 1]."""

    dims: MapDims
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != self.dims.shape:
            raise ConfigurationError(f"values shape {self.values.shape} != dims {self.dims.shape}")

    @property
    def vehicle_layer(self) -> np.ndarray:
        return self.values[..., 0]

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(self.values, -1, 0))

    @classmethod
    def from_chw(cls, array: np.ndarray, time: float = 0.0) -> "SegmentMap":
        array = np.asarray(array, dtype=np.float32)
        c, h, w = array.shape
        return cls(MapDims(c, h, w), np.moveaxis(array, 0, -1), time)


@dataclass
class BackgroundMap:
    dims: MapDims
    values: np.ndarray
    lane_count: int

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(self.values, -1, 0))


@dataclass
class MapSequence:
    frames: list[SegmentMap]
    interval: float

    def __post_init__(self):
        if not self.frames:
            raise ConfigurationError("a map sequence needs at least one frame")
        times = np.array([f.time for f in self.frames])
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(steps <= 0) or not np.allclose(steps, self.interval, atol=1e-6):
                raise ConfigurationError(f"frames are not uniformly spaced at {self.interval}s")

    def __len__(self) -> int:
        return len(self.frames)

    def stack(self) -> np.ndarray:
        """f x C x H x W array."""
        return np.stack([f.chw() for f in self.frames])


# --------------------------------------------------------------------------- rasterization


def pixel_scale(extent: SegmentExtent, dims: MapDims) -> tuple[float, float]:
    """Meters per pixel along x (columns) and y (rows)."""
    return (
        (extent.x_max - extent.x_min) / (dims.width - 1),
        (extent.y_max - extent.y_min) / (dims.height - 1),
    )


def world_to_pixel(x: float, y: float, extent: SegmentExtent, dims: MapDims) -> tuple[float, float]:
    """Unrounded (row, col) of a world point."""
    col = (x - extent.x_min) / (extent.x_max - extent.x_min) * (dims.width - 1)
    row = (extent.y_max - y) / (extent.y_max - extent.y_min) * (dims.height - 1)
    return row, col


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def footprint_mask(record: VehicleRecord, extent: SegmentExtent, dims: MapDims) -> np.ndarray:
    """Boolean H x W mask of one vehicle's rendered footprint."""
    sx, sy = pixel_scale(extent, dims)
    row_f, col_f = world_to_pixel(record.x, record.y, extent, dims)
    r0, c0 = _round_half_up(row_f), _round_half_up(col_f)
    reach = 0.5 * math.hypot(record.length, record.width)
    dr, dc = int(math.ceil(reach / sy)) + 1, int(math.ceil(reach / sx)) + 1
    mask = np.zeros((dims.height, dims.width), dtype=bool)
    rows = np.arange(max(r0 - dr, 0), min(r0 + dr, dims.height - 1) + 1)
    cols = np.arange(max(c0 - dc, 0), min(c0 + dc, dims.width - 1) + 1)
    if rows.size == 0 or cols.size == 0:
        return mask
    # offsets of pixel centres from the snapped vehicle centre, in meters
    ox = (cols[None, :] - c0) * sx
    oy = (r0 - rows[:, None]) * sy
    cos_h, sin_h = math.cos(record.heading), math.sin(record.heading)
    along = ox * cos_h + oy * sin_h
    across = -ox * sin_h + oy * cos_h
    eps = 1e-9
    inside = (np.abs(along) <= 0.5 * record.length + eps) & (np.abs(across) <= 0.5 * record.width + eps)
    mask[np.ix_(rows, cols)] = inside
    return mask


def rasterize_frame(
    records: list[VehicleRecord],
    extent: SegmentExtent,
    dims: MapDims = MapDims(),
    time: float | None = None,
) -> SegmentMap:
    """Render every vehicle as a filled rotated rectangle on channel 0."""
    extent.validate()
    dims.validate()
    times = {r.time for r in records}
    if len(times) > 1:
        raise RecordError(f"records span several timesteps: {sorted(times)[:3]}...")
    layer = np.zeros((dims.height, dims.width), dtype=bool)
    for record in records:
        record.validate()
        layer |= footprint_mask(record, extent, dims)
    values = np.zeros(dims.shape, dtype=np.float32)
    values[..., 0] = layer * VEHICLE_INTENSITY
    if time is None:
        time = records[0].time if records else 0.0
    return SegmentMap(dims, values, float(time))


def make_background(lane_count: int, extent: SegmentExtent, dims: MapDims = MapDims()) -> BackgroundMap:
    """Lane boundaries at rows 0 and H-1, dividers at floor(i*H/lanes)."""
    extent.validate()
    dims.validate()
    if lane_count < 1:
        raise ConfigurationError("lane_count must be >= 1")
    rows = {0, dims.height - 1}
    rows.update((i * dims.height) // lane_count for i in range(1, lane_count))
    values = np.zeros(dims.shape, dtype=np.float32)
    values[sorted(rows), :, :] = MARKING_INTENSITY
    return BackgroundMap(dims, values, lane_count)


def fuse_layers(vehicles: SegmentMap, background: BackgroundMap) -> SegmentMap:
    if vehicles.dims != background.dims:
        raise ConfigurationError(f"dims mismatch: {vehicles.dims} vs {background.dims}")
    fused = np.where(vehicles.values > 0, vehicles.values, background.values)
    return SegmentMap(vehicles.dims, fused, vehicles.time)


# --------------------------------------------------------------------------- decoding


def _as_layer(map_or_array) -> np.ndarray:
    if isinstance(map_or_array, SegmentMap):
        return map_or_array.vehicle_layer
    array = np.asarray(map_or_array)
    if array.ndim == 3:
        # C x H x W tensors from the model side
        return array[0]
    return array


def label_components(map_or_array, threshold: float = 0.5) -> tuple[np.ndarray, int]:
    """8-connected labelling; labels are numbered in row-major discovery order."""
    layer = _as_layer(map_or_array)
    labels, count = ndimage.label(layer > threshold, structure=_EIGHT_NEIGHBOURS)
    return labels, int(count)


def count_vehicles(map_or_array, threshold: float = 0.5) -> int:
    return label_components(map_or_array, threshold)[1]


def vehicle_centroids(map_or_array, threshold: float = 0.5) -> list[tuple[float, float]]:
    labels, count = label_components(map_or_array, threshold)
    if count == 0:
        return []
    centres = ndimage.center_of_mass(np.ones(labels.shape), labels, range(1, count + 1))
    return [(float(r), float(c)) for r, c in centres]


def flood_fill_components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Plain BFS labelling, kept as a reference for the vectorized path."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    components = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            queue = deque([(r, c)])
            seen[r, c] = True
            pixels = []
            while queue:
                pr, pc = queue.popleft()
                pixels.append((pr, pc))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = pr + dr, pc + dc
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                            seen[nr, nc] = True
                            queue.append((nr, nc))
            components.append(pixels)
    return components


# --------------------------------------------------------------------------- file formats

_RECORD_FIELDS = ("frame_index", "time_s", "x_m", "y_m", "length_m", "width_m", "heading_rad", "class")


def parse_record_line(line: str, lineno: int | None = None) -> tuple[int, VehicleRecord]:
    tokens = line.split()
    if len(tokens) != len(_RECORD_FIELDS):
        raise ParseError(f"expected {len(_RECORD_FIELDS)} fields, got {len(tokens)}", lineno)
    parsed = []
    for name, token in zip(_RECORD_FIELDS[:-1], tokens[:-1]):
        try:
            parsed.append(int(token) if name == "frame_index" else float(token))
        except ValueError:
            raise ParseError(f"field '{name}' is not numeric: {token!r}", lineno, name) from None
    try:
        cls = VehicleClass.parse(tokens[-1])
    except (KeyError, ValueError):
        raise ParseError(f"field 'class' has unknown value {tokens[-1]!r}", lineno, "class") from None
    frame, time, x, y, length, width, heading = parsed
    record = VehicleRecord(time, x, y, length, width, heading, cls)
    try:
        record.validate()
    except RecordError as err:
        raise ParseError(str(err), lineno) from None
    return frame, record


def read_records(path) -> list[tuple[float, list[VehicleRecord]]]:
    """Frames in file order as (time, records); frames with no vehicles appear
    only if announced by a ``# frame <index> <time>`` comment."""
    frames: dict[int, tuple[float, list[VehicleRecord]]] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "frame":
                    try:
                        frames.setdefault(int(parts[1]), (float(parts[2]), []))
                    except ValueError:
                        raise ParseError("malformed frame marker", lineno) from None
                continue
            index, record = parse_record_line(line, lineno)
            frames.setdefault(index, (record.time, []))[1].append(record)
    return [frames[i] for i in sorted(frames)]


def format_records(frames: list[tuple[float, list[VehicleRecord]]], header: dict | None = None) -> str:
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append("# " + " ".join(_RECORD_FIELDS))
    for index, (time, records) in enumerate(frames):
        lines.append(f"# frame {index} {float(time)!r}")
        for r in records:
            # repr keeps every bit, so files round-trip exactly
            values = " ".join(repr(float(v)) for v in (r.time, r.x, r.y, r.length, r.width, r.heading))
            lines.append(f"{index} {values} {r.cls.name.lower()}")
    return "\n".join(lines) + "\n"


def write_records(path, frames, header: dict | None = None) -> None:
    Path(path).write_text(format_records(frames, header))


def write_map(path, segment_map: SegmentMap) -> None:
    """Raw tensor: ``RSM1`` + uint32 C, H, W, then little-endian float32 C x H x W."""
    d = segment_map.dims
    payload = segment_map.chw().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAP_MAGIC + struct.pack("<3I", d.channels, d.height, d.width) + payload)


def read_map(path, time: float = 0.0) -> SegmentMap:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != _MAP_MAGIC:
        raise ParseError(f"{path}: not an RSM1 map file")
    c, h, w = struct.unpack("<3I", blob[4:16])
    expected = 16 + 4 * c * h * w
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)}")
    array = np.frombuffer(blob, dtype="<f4", offset=16).reshape(c, h, w)
    return SegmentMap.from_chw(array.astype(np.float32), time)


def export_image(path, segment_map: SegmentMap | BackgroundMap) -> None:
    """8-bit grayscale PNG of channel 0, for inspection only."""
    from PIL import Image

    pixels = np.clip(np.rint(segment_map.values[..., 0] * 255), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)
