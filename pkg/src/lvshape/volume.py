"""Label volumes: storage format, label code table, block downsampling."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .mesh import Peripheral, Side

_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}

BACKGROUND = 0


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ParameterError("dims must be three positive integers")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError("spacing must be three positive floats")

    def centers(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing[axis]

    def index_to_mm(self, ijk):
        return np.asarray(self.origin) + (np.asarray(ijk, dtype=float) + 0.5) * np.asarray(self.spacing)

    @classmethod
    def around(cls, points, spacing=1.0, margin=4.0):
        """Grid covering ``points`` plus ``margin`` mm, corners snapped to multiples of spacing."""
        pts = np.asarray(points, float)
        sp = np.broadcast_to(np.asarray(spacing, float), (3,))
        lo = np.floor((pts.min(0) - margin) / sp) * sp
        hi = np.ceil((pts.max(0) + margin) / sp) * sp
        dims = np.round((hi - lo) / sp).astype(int)
        return cls(tuple(dims), tuple(sp), tuple(lo))


@dataclass
class SegmentationVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ParameterError("labels must be a 3D array")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if min(self.spacing) <= 0:
            raise ParameterError("spacing must be positive")

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def grid(self):
        return GridSpec(self.dims, self.spacing, self.origin)

    def index_to_mm(self, ijk):
        return np.asarray(self.origin) + (np.asarray(ijk, dtype=float) + 0.5) * np.asarray(self.spacing)


@dataclass(frozen=True)
class LabelCodes:
    """Segmentation label codes per (structure, side); defaults follow FreeSurfer/SynthSeg."""

    lv: tuple = (4, 43)
    hippocampus: tuple = (17, 53)
    thalamus: tuple = (10, 49)
    caudate: tuple = (11, 50)
    white_matter: tuple = (2, 41)

    def code(self, structure, side):
        return getattr(self, structure)[int(side)]

    def peripheral_of(self, code, side):
        """Peripheral class a neighbouring label code represents for an LV of ``side``, or None."""
        side = int(side)
        if code == self.hippocampus[side]:
            return Peripheral.HIPPOCAMPUS
        if code == self.lv[1 - side]:
            return Peripheral.OPPOSITE_LV
        if code == self.thalamus[side]:
            return Peripheral.THALAMUS
        if code == self.caudate[side]:
            return Peripheral.CAUDATE
        if code == self.white_matter[side]:
            return Peripheral.WHITE_MATTER
        return None

    def peripheral_code(self, cls, side):
        """Label code that represents peripheral class ``cls`` next to an LV of ``side``."""
        cls = Peripheral(cls)
        side = int(side)
        if cls == Peripheral.HIPPOCAMPUS:
            return self.hippocampus[side]
        if cls == Peripheral.OPPOSITE_LV:
            return self.lv[1 - side]
        if cls == Peripheral.THALAMUS:
            return self.thalamus[side]
        if cls == Peripheral.CAUDATE:
            return self.caudate[side]
        return self.white_matter[side]

    @classmethod
    def from_json(cls, path_or_dict):
        """Override from a JSON map like ``{"left_lv": 4, "right_hippocampus": 53}``."""
        data = path_or_dict
        if not isinstance(data, dict):
            with open(path_or_dict) as fh:
                data = json.load(fh)
        base = cls()
        values = {}
        for name in ("lv", "hippocampus", "thalamus", "caudate", "white_matter"):
            left, right = getattr(base, name)
            left = int(data.get(f"left_{name}", left))
            right = int(data.get(f"right_{name}", right))
            values[name] = (left, right)
        unknown = set(data) - {f"{s}_{n}" for s in ("left", "right") for n in values}
        if unknown:
            raise ParameterError(f"unknown label code keys: {sorted(unknown)}")
        return cls(**values)


def side_from_name(name):
    try:
        return Side[str(name).upper()]
    except KeyError:
        raise ParameterError(f"side must be 'left' or 'right', got {name!r}") from None


def _payload_path(header_path, header):
    header_path = Path(header_path)
    name = header.get("payload", header_path.with_suffix(".raw").name)
    return header_path.parent / name


def load_segmentation(path) -> SegmentationVolume:
    try:
        with open(path) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in header:
            raise FormatError(f"header missing {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unknown dtype {header['dtype']!r}")
    if header.get("order", "C") != "C":
        raise FormatError("only C order payloads are supported")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) <= 0:
        raise FormatError("dims must be three positive integers")
    dtype = _DTYPES[header["dtype"]]
    payload = _payload_path(path, header)
    raw = payload.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"payload has {len(raw)} bytes, header implies {expected}")
    labels = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.int32)
    try:
        return SegmentationVolume(labels, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))
    except ParameterError as exc:
        raise FormatError(str(exc)) from None


def save_segmentation(vol: SegmentationVolume, path):
    """Write ``<path>`` (JSON header) and the raw payload next to it."""
    path = Path(path)
    maxval = int(vol.labels.max(initial=0))
    dtype = "u8" if maxval < 256 else "u16"
    if vol.labels.min(initial=0) < 0 or maxval >= 65536:
        raise ParameterError("labels must fit in uint16")
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": dtype,
        "order": "C",
        "payload": path.with_suffix(".raw").name,
    }
    payload = path.with_suffix(".raw")
    payload.write_bytes(np.ascontiguousarray(vol.labels, dtype=_DTYPES[dtype]).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(header, fh, indent=1)
    os.replace(tmp, path)


def downsample_segmentation(vol: SegmentationVolume, factor: int) -> SegmentationVolume:
    """Block-majority label per factor^3 block; ties go to background."""
    if int(factor) != factor or factor < 2:
        raise ParameterError("factor must be an integer >= 2")
    f = int(factor)
    lab = vol.labels
    pad = [(0, (-d) % f) for d in lab.shape]
    lab = np.pad(lab, pad, constant_values=BACKGROUND)
    I, J, K = (d // f for d in lab.shape)
    blocks = lab.reshape(I, f, J, f, K, f).transpose(0, 2, 4, 1, 3, 5).reshape(I, J, K, f ** 3)
    values = np.unique(blocks)
    counts = np.stack([(blocks == v).sum(axis=-1) for v in values])
    best = counts.max(axis=0)
    winner = values[counts.argmax(axis=0)]
    tied = (counts == best).sum(axis=0) > 1
    out = np.where(tied, BACKGROUND, winner).astype(vol.labels.dtype)
    return SegmentationVolume(out, tuple(s * f for s in vol.spacing), vol.origin)
