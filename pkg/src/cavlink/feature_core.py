"""Feature-map tensors, synthetic scenes, and the tensor <-> symbol mapping.

A feature map is the unit of data every other module consumes: a real
(channels, height, width) float64 tensor belonging to one agent (ego or a
CAV). Scenes plant isotropic Gaussian blobs as "objects" so that detection
on a fused map has an exact, seedable ground truth. Transmission maps the
flattened tensor onto complex I/Q symbols normalized to unit average power;
the inverse mapping undoes it exactly up to whatever the channel did to the
symbols.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

TENSOR_MAGIC = b"CWDT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    """One agent's intermediate feature tensor.

    data is float64, shape (channels, height, width), finite everywhere.
    Instances are immutable; the backing array is marked read-only so they
    can be shared freely across sweep workers.
    """

    channels: int
    height: int
    width: int
    data: np.ndarray
    frame_id: int = 0
    cav_id: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.channels * self.height * self.width:
            raise ConfigurationError(
                f"data has {arr.size} entries, expected "
                f"{self.channels}x{self.height}x{self.width}"
            )
        arr = arr.reshape(self.channels, self.height, self.width)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ConfigurationError("feature map contains NaN or Inf")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        """Same identity/geometry, new values."""
        return FeatureMap(self.channels, self.height, self.width,
                          data, self.frame_id, self.cav_id)


def feature_map_from_array(arr: np.ndarray, frame_id: int = 0,
                           cav_id: int = 0) -> FeatureMap:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigurationError(f"expected 3-d array, got shape {arr.shape}")
    c, h, w = arr.shape
    return FeatureMap(c, h, w, arr, frame_id, cav_id)


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene description: planted Gaussian blobs plus noise.

    object_centers may be given explicitly (row, col pairs inside the map)
    or left None to be drawn uniformly with a 2-pixel margin. Visibility
    masks list the object indices each agent can see; by default the ego
    is blinded to one rng-chosen object (so fusion is informative) and
    every CAV sees everything.
    """

    channels: int = 4
    height: int = 16
    width: int = 16
    num_objects: int = 3
    blob_amplitude: float = 3.0
    blob_sigma: float = 1.6
    background_std: float = 0.25
    object_centers: tuple[tuple[float, float], ...] | None = None
    ego_visible: tuple[int, ...] | None = None
    cav_visible: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigurationError("scene dimensions must be positive")
        if self.num_objects < 0:
            raise ConfigurationError("num_objects must be >= 0")
        if self.blob_sigma <= 0:
            raise ConfigurationError("blob_sigma must be > 0")
        if self.background_std < 0:
            raise ConfigurationError("background_std must be >= 0")
        if self.object_centers is not None:
            if len(self.object_centers) != self.num_objects:
                raise ConfigurationError(
                    "object_centers length must equal num_objects")
            for r, c in self.object_centers:
                if not (0 <= r < self.height and 0 <= c < self.width):
                    raise ConfigurationError(
                        f"object center ({r},{c}) outside map")


def _blob_image(height: int, width: int, center: tuple[float, float],
                amplitude: float, sigma: float) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return amplitude * np.exp(-d2 / (2.0 * sigma * sigma))


def generate_scene(spec: SceneSpec, num_cavs: int, rng_seed: int
                   ) -> tuple[FeatureMap, list[FeatureMap],
                              list[tuple[float, float]]]:
    """Build one scene: an ego map, num_cavs CAV maps, and the true centers.

    Every agent's map is the sum of the blobs it can see (same blob on all
    channels) plus i.i.d. N(0, background_std^2) per channel. The ego sees
    a strict subset of the objects unless the spec overrides visibility.
    Deterministic for a fixed seed.
    """
    if num_cavs < 1:
        raise ConfigurationError("num_cavs must be >= 1")
    rng = np.random.default_rng(rng_seed)

    if spec.object_centers is not None:
        centers = [tuple(map(float, c)) for c in spec.object_centers]
    else:
        margin = 2.0
        centers = []
        for _ in range(spec.num_objects):
            r = rng.uniform(margin, spec.height - margin)
            c = rng.uniform(margin, spec.width - margin)
            centers.append((float(r), float(c)))

    if spec.ego_visible is not None:
        ego_vis = tuple(spec.ego_visible)
    elif spec.num_objects > 0:
        hidden = int(rng.integers(spec.num_objects))
        ego_vis = tuple(i for i in range(spec.num_objects) if i != hidden)
    else:
        ego_vis = ()

    if spec.cav_visible is not None:
        if len(spec.cav_visible) != num_cavs:
            raise ConfigurationError("cav_visible length must equal num_cavs")
        cav_vis = [tuple(v) for v in spec.cav_visible]
    else:
        cav_vis = [tuple(range(spec.num_objects)) for _ in range(num_cavs)]

    def build(visible: Sequence[int], cav_id: int, frame_id: int) -> FeatureMap:
        img = np.zeros((spec.height, spec.width))
        for i in visible:
            if not 0 <= i < spec.num_objects:
                raise ConfigurationError(f"visibility index {i} out of range")
            img += _blob_image(spec.height, spec.width, centers[i],
                               spec.blob_amplitude, spec.blob_sigma)
        data = np.broadcast_to(img, (spec.channels, spec.height, spec.width)).copy()
        if spec.background_std > 0:
            data += rng.normal(0.0, spec.background_std, size=data.shape)
        return FeatureMap(spec.channels, spec.height, spec.width, data,
                          frame_id=frame_id, cav_id=cav_id)

    ego = build(ego_vis, cav_id=0, frame_id=0)
    cavs = [build(cav_vis[k], cav_id=k + 1, frame_id=0)
            for k in range(num_cavs)]
    return ego, cavs, centers


@dataclass(frozen=True)
class SymbolFrame:
    """A feature tensor flattened onto complex symbols.

    Consecutive real entries become the (I, Q) parts of one symbol; the
    symbol stream is zero-padded up to a whole number of slots and scaled
    to unit mean power over the padded frame. scale is the factor that
    multiplies symbols back into tensor units; pad counts the appended
    all-zero tail symbols.
    """

    symbols: np.ndarray
    scale: float
    pad: int
    slot_boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        arr = np.asarray(self.symbols, dtype=np.complex128).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "symbols", arr)
        if arr.size == 0:
            raise ConfigurationError("symbol frame is empty")
        if not (np.all(np.isfinite(arr.real)) and np.all(np.isfinite(arr.imag))):
            raise ConfigurationError("symbol frame contains NaN or Inf")

    @property
    def num_slots(self) -> int:
        return len(self.slot_boundaries)

    @property
    def slot_len(self) -> int:
        a, b = self.slot_boundaries[0]
        return b - a

    def slot(self, index: int) -> np.ndarray:
        a, b = self.slot_boundaries[index]
        return self.symbols[a:b]


def to_symbols(f: FeatureMap, slot_len: int) -> SymbolFrame:
    """Map a feature tensor to a unit-power complex symbol frame.

    slot_len is the payload symbol count per time slot (>= 2 and even).
    An all-zero tensor is transmitted as zeros with scale 1 so that silent
    CAVs stay representable.
    """
    if slot_len < 2 or slot_len % 2 != 0:
        raise ConfigurationError("slot_len must be >= 2 and even")
    flat = f.data.ravel()
    if flat.size == 0:
        raise ConfigurationError("cannot transmit an empty tensor")
    n = flat.size
    if n % 2:
        flat = np.concatenate([flat, [0.0]])
    raw = flat[0::2] + 1j * flat[1::2]
    pad = (-raw.size) % slot_len
    if pad:
        raw = np.concatenate([raw, np.zeros(pad, dtype=np.complex128)])
    mean_power = float(np.mean(np.abs(raw) ** 2))
    scale = float(np.sqrt(mean_power)) if mean_power > 0 else 1.0
    symbols = raw / scale
    bounds = tuple((k * slot_len, (k + 1) * slot_len)
                   for k in range(symbols.size // slot_len))
    frame = SymbolFrame(symbols, scale, pad, bounds)
    power = float(np.mean(np.abs(frame.symbols) ** 2))
    assert power == 0.0 or abs(power - 1.0) <= 1e-9
    return frame


def from_symbols(frame: SymbolFrame, shape: tuple[int, int, int]
                 ) -> FeatureMap:
    """Invert to_symbols for a (possibly channel-distorted) frame."""
    c, h, w = shape
    n = c * h * w
    n_sym = (n + 1) // 2
    if frame.symbols.size - frame.pad != n_sym:
        raise ConfigurationError(
            f"frame holds {frame.symbols.size - frame.pad} payload symbols, "
            f"shape {shape} needs {n_sym}")
    payload = frame.symbols[:n_sym] * frame.scale
    reals = np.empty(2 * n_sym)
    reals[0::2] = payload.real
    reals[1::2] = payload.imag
    return FeatureMap(c, h, w, reals[:n])


def write_tensor(path: str | Path, f: FeatureMap) -> None:
    """Write the binary tensor format: magic, u32 version, u32 c/h/w, f64 LE."""
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<IIII", TENSOR_VERSION,
                             f.channels, f.height, f.width))
        fh.write(f.data.astype("<f8").tobytes())


def read_tensor(path: str | Path) -> FeatureMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise ConfigurationError(f"{path}: bad magic {magic!r}")
        version, c, h, w = struct.unpack("<IIII", fh.read(16))
        if version != TENSOR_VERSION:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(8 * c * h * w), dtype="<f8")
        if data.size != c * h * w:
            raise ConfigurationError(f"{path}: truncated tensor payload")
    return FeatureMap(c, h, w, data.astype(np.float64))
