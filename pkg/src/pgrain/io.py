"""Readers and writers for point clouds and tensors.

Three formats, all with bit-exact round trips on machine-representable
values:

* XYZ text: one point per line, ``x y z f1 ... fn [label]``.
* PLY: ASCII or binary-little-endian, element ``vertex`` with x/y/z and
  optional red/green/blue (uchar, mapped to features in [0, 1]).
* TensorFile: magic ``PGTN1\\n``, one ASCII header line
  ``<dtype> <rank> <dims...>``, then a row-major little-endian payload.

Readers and writers are reentrant and share no state.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .core import DomainError, PointCloud

TENSOR_MAGIC = b"PGTN1\n"
_TENSOR_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8"}
_DIMS_PRODUCT_CAP = 1 << 48  # refuse absurd headers before allocating

PathLike = Union[str, Path]


def _fmt(value: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(value))


# ---------------------------------------------------------------------------
# XYZ text format
# ---------------------------------------------------------------------------

def read_xyz(path: PathLike, feature_dim: int, has_label: bool = False) -> PointCloud:
    """Parse a whitespace-separated XYZ file into a PointCloud.

    Every line must carry exactly ``3 + feature_dim`` tokens, plus one
    trailing nonnegative integer label when ``has_label`` is set.  File
    order is preserved.

    Raises:
        DomainError: ``token-count-mismatch`` or ``parse-error`` with the
            1-based line number; cloud invariant violations propagate.
    """
    expected = 3 + feature_dim + (1 if has_label else 0)
    coords, feats, labels = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens and lineno == 1 and line in ("", "\n"):
                continue  # tolerate a lone trailing newline in empty files
            if len(tokens) != expected:
                raise DomainError(
                    "token-count-mismatch",
                    f"line {lineno} has {len(tokens)} tokens, expected {expected}",
                )
            try:
                values = [float(t) for t in tokens[: 3 + feature_dim]]
            except ValueError:
                raise DomainError("parse-error", f"line {lineno}: non-numeric token") from None
            if has_label:
                token = tokens[-1]
                try:
                    label = int(token)
                except ValueError:
                    raise DomainError("parse-error", f"line {lineno}: label {token!r} is not an integer") from None
                if label < 0:
                    raise DomainError("parse-error", f"line {lineno}: label must be nonnegative")
                labels.append(label)
            coords.append(values[:3])
            feats.append(values[3:])
    if not coords:
        raise DomainError("empty-cloud", f"{path} contains no points")
    return PointCloud(
        coords=np.asarray(coords, dtype=np.float64),
        features=np.asarray(feats, dtype=np.float64).reshape(len(coords), feature_dim),
        labels=np.asarray(labels, dtype=np.int64) if has_label else None,
    )


def write_xyz(path: PathLike, cloud: PointCloud) -> None:
    """Write a cloud as XYZ text; labels become a final column when present."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(cloud.num_points):
            tokens = [_fmt(v) for v in cloud.coords[i]]
            tokens += [_fmt(v) for v in cloud.features[i]]
            if cloud.labels is not None:
                tokens.append(str(int(cloud.labels[i])))
            fh.write(" ".join(tokens) + "\n")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def read_ply(path: PathLike) -> PointCloud:
    """Read an ASCII or binary-little-endian PLY vertex cloud.

    Vertex x/y/z become coordinates; red/green/blue (uchar) are divided by
    255 and become the 3 feature channels.  Clouds without RGB are rejected:
    PointCloud requires at least one feature channel.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or header_end < 0:
        raise DomainError("unsupported-format", f"{path} is not a PLY file")
    header_lines = blob[:header_end].decode("ascii", errors="replace").splitlines()
    body = blob[header_end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(prop_name, prop_type)])
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise DomainError("unsupported-format", f"PLY format {parts[1]!r} is not supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise DomainError("unsupported-format", "property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            else:
                elements[-1][2].append((parts[-1], parts[1]))
    if fmt is None:
        raise DomainError("unsupported-format", "PLY header lacks a format line")
    if not elements or elements[0][0] != "vertex":
        raise DomainError("missing-vertex-element", "PLY must declare element vertex first")
    _, count, props = elements[0]
    if any(ptype == "list" for _, ptype in props):
        raise DomainError("unsupported-format", "list properties in element vertex are not supported")
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise DomainError("missing-vertex-element", f"vertex lacks property {axis}")
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    if not has_rgb:
        raise DomainError("no-features", "vertex has no red/green/blue properties")

    if fmt == "binary":
        dtype = np.dtype([(name, "<" + _PLY_SCALARS[ptype]) for name, ptype in props])
        if len(body) < count * dtype.itemsize:
            raise DomainError("parse-error", "PLY payload shorter than vertex data")
        table = np.frombuffer(body, dtype=dtype, count=count)
        column = lambda name: table[name].astype(np.float64)  # noqa: E731
    else:
        rows = body.decode("ascii").splitlines()
        if len(rows) < count:
            raise DomainError("parse-error", "PLY has fewer data lines than vertices")
        try:
            grid = np.array([[float(t) for t in rows[i].split()] for i in range(count)], dtype=np.float64)
        except ValueError:
            raise DomainError("parse-error", "non-numeric token in PLY vertex data") from None
        if grid.shape[1] != len(props):
            raise DomainError("token-count-mismatch", f"vertex lines carry {grid.shape[1]} tokens, expected {len(props)}")
        index = {name: i for i, name in enumerate(names)}
        column = lambda name: grid[:, index[name]]  # noqa: E731

    coords = np.stack([column("x"), column("y"), column("z")], axis=1)
    rgb = np.stack([column("red"), column("green"), column("blue")], axis=1)
    return PointCloud(coords=coords, features=rgb / 255.0)


def write_ply(path: PathLike, cloud: PointCloud, binary: bool = True) -> None:
    """Write coords (double) plus 3 feature channels as uchar RGB.

    Features are clipped to [0, 1] and scaled by 255; a binary round trip
    through :func:`read_ply` is bit-identical.
    """
    if cloud.feature_dim != 3:
        raise DomainError("dimension-mismatch", f"write_ply needs 3 feature channels, cloud has {cloud.feature_dim}")
    rgb = np.rint(np.clip(cloud.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {cloud.num_points}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            dtype = np.dtype([(n, "<f8") for n in "xyz"] + [(c, "u1") for c in ("red", "green", "blue")])
            table = np.empty(cloud.num_points, dtype=dtype)
            for j, n in enumerate("xyz"):
                table[n] = cloud.coords[:, j]
            for j, c in enumerate(("red", "green", "blue")):
                table[c] = rgb[:, j]
            fh.write(table.tobytes())
        else:
            for i in range(cloud.num_points):
                line = " ".join(_fmt(v) for v in cloud.coords[i])
                line += " " + " ".join(str(int(v)) for v in rgb[i])
                fh.write((line + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# TensorFile
# ---------------------------------------------------------------------------

def write_tensor(path: PathLike, array: np.ndarray) -> None:
    """Serialize one array: magic, header line, little-endian payload."""
    arr = np.asarray(array)
    if arr.dtype == np.float64:
        tag = "f8"
    elif arr.dtype == np.float32:
        tag = "f4"
    elif np.issubdtype(arr.dtype, np.integer):
        tag, arr = "i8", arr.astype(np.int64)
    else:
        raise DomainError("unsupported-format", f"tensor dtype {arr.dtype} is not storable")
    if arr.size > _DIMS_PRODUCT_CAP:
        raise DomainError("dims-overflow", f"tensor with {arr.size} elements exceeds the format cap")
    header = " ".join([tag, str(arr.ndim)] + [str(d) for d in arr.shape])
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write((header + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(arr).astype("<" + tag, copy=False).tobytes())


def read_tensor(path: PathLike) -> np.ndarray:
    """Read a TensorFile back into a native-endian array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(TENSOR_MAGIC):
        raise DomainError("unsupported-format", f"{path} lacks the PGTN1 magic")
    newline = blob.find(b"\n", len(TENSOR_MAGIC))
    if newline < 0:
        raise DomainError("parse-error", "tensor header line is unterminated")
    fields = blob[len(TENSOR_MAGIC):newline].decode("ascii").split()
    if len(fields) < 2 or fields[0] not in _TENSOR_DTYPES:
        raise DomainError("parse-error", "malformed tensor header")
    tag, rank = fields[0], int(fields[1])
    dims = [int(d) for d in fields[2:]]
    if len(dims) != rank or any(d < 0 for d in dims):
        raise DomainError("parse-error", f"tensor header rank {rank} disagrees with dims {dims}")
    size = 1
    for d in dims:
        size *= d
        if size > _DIMS_PRODUCT_CAP:
            raise DomainError("dims-overflow", f"dims {dims} overflow the format cap")
    payload = blob[newline + 1:]
    dtype = np.dtype(_TENSOR_DTYPES[tag])
    if len(payload) != size * dtype.itemsize:
        raise DomainError(
            "parse-error",
            f"payload is {len(payload)} bytes, header implies {size * dtype.itemsize}",
        )
    arr = np.frombuffer(payload, dtype=dtype, count=size).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor_dir(path: PathLike, tensors: dict) -> None:
    """Write a named set of tensors: one TensorFile each plus a manifest.

    The manifest lists ``name rank dims...`` per line, sorted by name, so
    directory contents are byte-stable for identical inputs.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        write_tensor(root / f"{name}.pgtn", arr)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tensor_dir(path: PathLike) -> dict:
    """Read back a tensor directory written by :func:`save_tensor_dir`."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DomainError("parse-error", f"{root} has no manifest.txt")
    out = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        fields = line.split()
        if not fields:
            continue
        name = fields[0]
        arr = read_tensor(root / f"{name}.pgtn")
        declared = tuple(int(d) for d in fields[2:])
        if arr.shape != declared:
            raise DomainError("parse-error", f"tensor {name} has shape {arr.shape}, manifest says {declared}")
        out[name] = arr
    return out


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    """Write one integer class id per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(labels).ravel():
            fh.write(f"{int(v)}\n")


def read_labels(path: PathLike) -> np.ndarray:
    """Read one integer class id per line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            token = line.strip()
            if not token:
                continue
            try:
                out.append(int(token))
            except ValueError:
                raise DomainError("parse-error", f"line {lineno}: label {token!r} is not an integer") from None
    return np.asarray(out, dtype=np.int64)
