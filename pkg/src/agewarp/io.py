"""Volume and field serialization.

Two formats:

* NIfTI-1 single file (``.nii``), little-endian, identity orientation.
  Intensities and fields are float32, labels int16 (uint8 is read too).
  Fields use ``dim[5] = 3`` with the vector intent code; ``intent_name``
  records the kind.
* Native: raw little-endian float32 payload in C order
  (``x, y, z[, component]``) plus a ``<path>.json`` sidecar carrying
  dims, spacing, origin and kind.

Anything stored is float32, so a round trip is bit-exact for float32
data and for integer labels. Concurrent writes to one path are undefined.
"""

from __future__ import annotations

import json
from pathlib import Path

import nibabel as nib
import numpy as np

from .grid import GridGeometry, ScalarVolume, VectorField

KINDS = ("intensity", "labels", "svf", "displacement")
NATIVE_TAG = "agewarp-raw"
NIFTI_INTENT_VECTOR = 1007


class FormatError(ValueError):
    """Input file is malformed or outside the supported subset."""


def kind_of(obj: ScalarVolume | VectorField, kind: str | None = None) -> str:
    if isinstance(obj, VectorField):
        kind = kind or "svf"
        if kind not in ("svf", "displacement"):
            raise ValueError(f"vector field kind must be svf or displacement, got {kind!r}")
    else:
        expected = "labels" if obj.is_labels else "intensity"
        if kind not in (None, expected):
            raise ValueError(f"scalar volume kind is {expected!r}, got {kind!r}")
        kind = expected
    return kind


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("nifti", "native"):
            raise ValueError(f"unknown format {fmt!r}")
        return fmt
    return "nifti" if path.name.endswith(".nii") else "native"


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_volume(obj: ScalarVolume | VectorField, path: str | Path, fmt: str | None = None, kind: str | None = None) -> None:
    path = Path(path)
    kind = kind_of(obj, kind)
    if _format_for(path, fmt) == "nifti":
        _write_nifti(obj, path, kind)
    else:
        _write_native(obj, path, kind)


def read_volume(path: str | Path, fmt: str | None = None) -> ScalarVolume | VectorField:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _format_for(path, fmt) == "nifti":
        return _read_nifti(path)
    return _read_native(path)


def _payload(obj) -> np.ndarray:
    arr = obj.vectors if isinstance(obj, VectorField) else obj.values
    return np.ascontiguousarray(arr, dtype="<f4")


def _write_native(obj, path: Path, kind: str) -> None:
    g = obj.geometry
    meta = {
        "format": NATIVE_TAG,
        "version": 1,
        "kind": kind,
        "dims": list(g.dims),
        "spacing": list(g.spacing),
        "origin": list(g.origin),
        "dtype": "float32",
        "byte_order": "little",
        "components": 3 if isinstance(obj, VectorField) else 1,
    }
    path.write_bytes(_payload(obj).tobytes(order="C"))
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_native(path: Path):
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {side} is not valid JSON: {exc}") from exc
    if meta.get("format") != NATIVE_TAG:
        raise FormatError(f"sidecar format tag is {meta.get('format')!r}, expected {NATIVE_TAG!r}")
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little":
        raise FormatError(f"unsupported payload dtype/byte_order {meta.get('dtype')}/{meta.get('byte_order')}")
    kind = meta.get("kind")
    if kind not in KINDS:
        raise FormatError(f"unknown kind {kind!r}")
    geom = GridGeometry(tuple(meta["dims"]), tuple(meta["spacing"]), tuple(meta["origin"]))
    ncomp = 3 if kind in ("svf", "displacement") else 1
    raw = path.read_bytes()
    expected = 4 * geom.n_voxels * ncomp
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if ncomp == 3:
        return VectorField(geom, data.reshape(geom.dims + (3,)))
    data = data.reshape(geom.dims)
    if kind == "labels":
        return ScalarVolume(geom, data.astype(np.int32), is_labels=True)
    return ScalarVolume(geom, data)


def _affine(g: GridGeometry) -> np.ndarray:
    aff = np.diag(list(g.spacing) + [1.0])
    aff[:3, 3] = g.origin
    return aff


def _write_nifti(obj, path: Path, kind: str) -> None:
    g = obj.geometry
    if isinstance(obj, VectorField):
        # NIfTI stores vector components along dim[5]
        data = _payload(obj).reshape(g.dims + (1, 3))
        dtype = np.float32
    elif kind == "labels":
        if obj.values.size and obj.values.max() > np.iinfo(np.int16).max:
            raise ValueError("label ids above 32767 cannot be stored as int16")
        data = obj.values.astype("<i2")
        dtype = np.int16
    else:
        data = _payload(obj)
        dtype = np.float32
    hdr = nib.Nifti1Header()
    hdr.set_data_dtype(dtype)
    img = nib.Nifti1Image(data, _affine(g), header=hdr)
    img.header.set_xyzt_units("mm")
    img.header.set_qform(_affine(g), code=1)
    img.header.set_sform(_affine(g), code=1)
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    if isinstance(obj, VectorField):
        img.header.set_intent("vector", (), name=kind)
    else:
        img.header["intent_name"] = kind.encode()
    nib.save(img, str(path))


def _read_nifti(path: Path):
    try:
        img = nib.Nifti1Image.from_filename(str(path))
    except Exception as exc:
        raise FormatError(f"cannot parse NIfTI header of {path}: {exc}") from exc
    hdr = img.header
    if hdr.endianness != "<":
        raise FormatError("sizeof_hdr: big-endian NIfTI is not supported")
    if isinstance(img, nib.Nifti2Image) or int(hdr["sizeof_hdr"]) != 348:
        raise FormatError("sizeof_hdr: only NIfTI-1 is supported")
    code = int(hdr["datatype"])
    allowed = {16: np.float32, 4: np.int16, 2: np.uint8}
    if code not in allowed:
        raise FormatError(f"datatype: code {code} not supported (float32, int16, uint8 only)")
    slope, inter = hdr.get_slope_inter()
    if slope not in (None, 1.0) or inter not in (None, 0.0):
        raise FormatError(f"scl_slope/scl_inter: scaled data not supported ({slope}, {inter})")
    dim = [int(d) for d in hdr["dim"]]
    dims = tuple(dim[1:4])
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    geom = GridGeometry(dims, spacing, origin)
    data = np.asarray(img.dataobj)
    name = bytes(hdr["intent_name"]).split(b"\x00")[0].decode(errors="replace")
    is_vector = dim[0] == 5 and dim[5] == 3 and int(hdr["intent_code"]) == NIFTI_INTENT_VECTOR
    if is_vector:
        if code != 16:
            raise FormatError("datatype: vector fields must be float32")
        if dim[4] != 1:
            raise FormatError(f"dim[4]: expected 1 for a vector field, got {dim[4]}")
        return VectorField(geom, data.reshape(dims + (3,)).astype(np.float32))
    if dim[0] > 3 and any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise FormatError(f"dim[0]: {dim[0]}-D data other than vector fields is not supported")
    data = data.reshape(dims)
    if code in (4, 2) or name == "labels":
        return ScalarVolume(geom, data.astype(np.int32), is_labels=True)
    return ScalarVolume(geom, data.astype(np.float32))


def read_kind(path: str | Path) -> str:
    """Kind recorded in a file (sidecar ``kind`` or NIfTI ``intent_name``)."""
    path = Path(path)
    if path.name.endswith(".nii"):
        hdr = nib.load(str(path)).header
        name = bytes(hdr["intent_name"]).split(b"\x00")[0].decode(errors="replace")
        if name in KINDS:
            return name
        obj = _read_nifti(path)
        return kind_of(obj)
    return json.loads(sidecar_path(path).read_text())["kind"]
