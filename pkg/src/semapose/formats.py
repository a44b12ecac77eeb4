"""On-disk artifact formats.

Binary containers (all little-endian):
  GSFM  feature image:  magic "GSFM", u32 version=1, u32 H, u32 W, u32 D,
        then H*W*D float32 row-major (v, then u, then channel). Depth maps
        and masks reuse the container with D=1.
  GSFC  feature cloud:  magic "GSFC", u32 version=1, u32 N, u32 D,
        N*3 float32 points, N*D float32 features, N u32 view counts.
  GSMW  network weights: magic "GSMW", u32 version=1, u32 tensor count,
        per tensor u16 name length, UTF-8 name, u8 rank, u32 dims,
        float32 data.

Reference models travel as ASCII PLY with an optional per-vertex 0/1
"part" property and optional triangle faces.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .featurelift import FeatureCloud, FeatureMap, ReferenceModel, SymmetryDescriptor

_GSFM_MAGIC = b"GSFM"
_GSFC_MAGIC = b"GSFC"
_GSMW_MAGIC = b"GSMW"


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def write_gsfm(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise FormatError(f"GSFM expects HxWxD data, got shape {arr.shape}")
    h, w, d = arr.shape
    with open(path, "wb") as f:
        f.write(_GSFM_MAGIC)
        f.write(struct.pack("<IIII", 1, h, w, d))
        f.write(arr.astype("<f4").tobytes())


def read_gsfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _GSFM_MAGIC:
            raise FormatError(f"bad GSFM magic {magic!r} in {path}")
        version, h, w, d = struct.unpack("<IIII", _read_exact(f, 16, "header"))
        if version != 1:
            raise FormatError(f"unsupported GSFM version {version}")
        if h < 1 or w < 1 or d < 1:
            raise FormatError(f"bad GSFM dimensions {h}x{w}x{d}")
        payload = _read_exact(f, h * w * d * 4, "payload")
        if f.read(1):
            raise FormatError("trailing bytes after GSFM payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).copy()


def validate_gsfm(path) -> tuple[int, int, int]:
    """Strict conformance check; returns (H, W, D) or raises FormatError."""
    arr = read_gsfm(path)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"GSFM payload contains non-finite floats in {path}")
    return arr.shape


def read_feature_map(path) -> FeatureMap:
    return FeatureMap(read_gsfm(path))


def write_depth_map(path, depth) -> None:
    write_gsfm(path, np.asarray(depth, dtype=np.float32)[:, :, None])


def read_depth_map(path) -> np.ndarray:
    arr = read_gsfm(path)
    if arr.shape[2] != 1:
        raise FormatError(f"depth map should have D=1, got D={arr.shape[2]}")
    return arr[:, :, 0].astype(np.float64)


def write_mask(path, mask) -> None:
    write_gsfm(path, np.asarray(mask, dtype=np.float32)[:, :, None])


def read_mask(path) -> np.ndarray:
    arr = read_gsfm(path)
    if arr.shape[2] != 1:
        raise FormatError(f"mask should have D=1, got D={arr.shape[2]}")
    return arr[:, :, 0] > 0.5


def write_gsfc(path, cloud: FeatureCloud) -> None:
    n, d = cloud.points.shape[0], cloud.dim
    with open(path, "wb") as f:
        f.write(_GSFC_MAGIC)
        f.write(struct.pack("<III", 1, n, d))
        f.write(cloud.points.astype("<f4").tobytes())
        f.write(cloud.features.astype("<f4").tobytes())
        f.write(cloud.view_counts.astype("<u4").tobytes())


def read_gsfc(path) -> FeatureCloud:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _GSFC_MAGIC:
            raise FormatError(f"bad GSFC magic {magic!r} in {path}")
        version, n, d = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != 1:
            raise FormatError(f"unsupported GSFC version {version}")
        pts = np.frombuffer(_read_exact(f, n * 12, "points"), dtype="<f4").reshape(n, 3)
        feats = np.frombuffer(_read_exact(f, n * d * 4, "features"), dtype="<f4").reshape(n, d)
        counts = np.frombuffer(_read_exact(f, n * 4, "view counts"), dtype="<u4")
        if f.read(1):
            raise FormatError("trailing bytes after GSFC payload")
    return FeatureCloud(pts.astype(np.float64), feats.copy(), counts.astype(np.int32))


def write_gsmw(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_GSMW_MAGIC)
        f.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f4").tobytes())


def read_gsmw(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _GSMW_MAGIC:
            raise FormatError(f"bad GSMW magic {magic!r} in {path}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != 1:
            raise FormatError(f"unsupported GSMW version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, size * 4, name), dtype="<f4")
            tensors[name] = data.reshape(dims).copy()
        if f.read(1):
            raise FormatError("trailing bytes after GSMW payload")
    return tensors


def write_ply(path, model: ReferenceModel) -> None:
    pts = model.points
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    lines += ["property float x", "property float y", "property float z"]
    if model.part_mask is not None:
        lines.append("property uchar part")
    ntri = 0 if model.triangles is None else len(model.triangles)
    if ntri:
        lines.append(f"element face {ntri}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(pts):
            row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if model.part_mask is not None:
                row += f" {int(model.part_mask[i])}"
            f.write(row + "\n")
        if ntri:
            for tri in model.triangles:
                f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def read_ply(path, category: str = "unknown", symmetry: SymmetryDescriptor | None = None) -> ReferenceModel:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path} is not a PLY file")
        n_vertex = n_face = 0
        vertex_props: list[str] = []
        element = None
        for line in f:
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                if tok[1] != "ascii":
                    raise FormatError("only ASCII PLY is supported")
            elif tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    n_vertex = int(tok[2])
                elif element == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and element == "vertex" and tok[1] != "list":
                vertex_props.append(tok[-1])
        else:
            raise FormatError("missing end_header")
        for axis in ("x", "y", "z"):
            if axis not in vertex_props:
                raise FormatError(f"PLY vertex data lacks property {axis}")
        cols = {name: i for i, name in enumerate(vertex_props)}
        rows = []
        for _ in range(n_vertex):
            rows.append(f.readline().split())
        data = np.asarray(rows, dtype=np.float64)
        if data.shape != (n_vertex, len(vertex_props)):
            raise FormatError("vertex table shape mismatch")
        pts = data[:, [cols["x"], cols["y"], cols["z"]]]
        part = data[:, cols["part"]].astype(bool) if "part" in cols else None
        tris = []
        for _ in range(n_face):
            tok = f.readline().split()
            if int(tok[0]) != 3:
                raise FormatError("only triangle faces are supported")
            tris.append([int(tok[1]), int(tok[2]), int(tok[3])])
    return ReferenceModel(
        points=pts,
        category=category,
        triangles=np.asarray(tris, dtype=np.int64) if tris else None,
        part_mask=part,
        symmetry=symmetry if symmetry is not None else SymmetryDescriptor.none(),
    )


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON in {path}: {e}") from e


def load_manifest(path) -> list[dict]:
    """Manifest JSON: {"entries": [{image_id, camera_file, feature_file, ...}]}.

    Relative paths are resolved against the manifest's directory.
    """
    obj = read_json(path)
    entries = obj.get("entries") if isinstance(obj, dict) else obj
    if not isinstance(entries, list):
        raise FormatError(f"manifest {path} has no entry list")
    base = Path(path).parent
    out = []
    for e in entries:
        if "image_id" not in e:
            raise FormatError("manifest entry lacks image_id")
        resolved = dict(e)
        for key in ("camera_file", "feature_file", "depth_file", "mask_file", "image_file"):
            if key in e and e[key] is not None:
                p = Path(e[key])
                resolved[key] = str(p if p.is_absolute() else base / p)
        out.append(resolved)
    return out
