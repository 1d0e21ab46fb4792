"""Point-cloud container, PLY I/O, color conversion and patching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .sampling import fps

PATCH_SIZE = 2048

# BT.709 luma weights.
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722
_CB_SCALE = 2.0 * (1.0 - _KB)  # 1.8556
_CR_SCALE = 2.0 * (1.0 - _KR)  # 1.5748

# Upper bound on points fed to the patch-center FPS; larger clouds are subsampled.
_CENTER_FPS_CAP = 65536


class PlyError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    color_space: str = "RGB"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be [N, 3], got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ValueError(
                f"colors {self.colors.shape} do not match positions {self.positions.shape}"
            )
        if len(self.positions) == 0:
            raise ValueError("empty cloud")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        if self.colors.min() < -1e-6 or self.colors.max() > 1 + 1e-6:
            raise ValueError("colors must lie in [0, 1]")
        if self.color_space not in ("RGB", "YUV"):
            raise ValueError(f"unknown color space {self.color_space!r}")

    def __len__(self):
        return len(self.positions)

    def to_yuv(self) -> "PointCloud":
        if self.color_space == "YUV":
            return self
        return PointCloud(self.positions, rgb_to_yuv(self.colors), "YUV")

    def to_rgb(self) -> "PointCloud":
        if self.color_space == "RGB":
            return self
        return PointCloud(self.positions, yuv_to_rgb(self.colors), "RGB")


@dataclass
class Patch:
    """A fixed-size, unit-ball normalized piece of a cloud.

    ``parent_indices`` maps rows back to the parent cloud; ``-1`` marks filler
    rows that duplicate the patch's own points to reach the fixed size.
    """

    positions: np.ndarray
    colors: np.ndarray
    parent_indices: np.ndarray
    centroid: np.ndarray
    scale: float

    @property
    def owned(self) -> np.ndarray:
        return self.parent_indices >= 0

    def denormalize(self, positions: np.ndarray | None = None) -> np.ndarray:
        p = self.positions if positions is None else positions
        return p * self.scale + self.centroid


# ---------------------------------------------------------------------------
# color conversion


def rgb_to_yuv(colors: np.ndarray) -> np.ndarray:
    c = np.asarray(colors, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    y = _KR * r + _KG * g + _KB * b
    u = (b - y) / _CB_SCALE + 0.5
    v = (r - y) / _CR_SCALE + 0.5
    return np.clip(np.stack([y, u, v], axis=-1), 0.0, 1.0)


def yuv_to_rgb(colors: np.ndarray) -> np.ndarray:
    c = np.asarray(colors, dtype=np.float64)
    y, u, v = c[..., 0], c[..., 1] - 0.5, c[..., 2] - 0.5
    r = y + _CR_SCALE * v
    b = y + _CB_SCALE * u
    g = (y - _KR * r - _KB * b) / _KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def to_uint8(colors: np.ndarray) -> np.ndarray:
    """Quantize [0,1] colors to bytes, rounding half away from zero."""
    scaled = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyError("not a PLY file (missing 'ply' magic) at byte offset 0")
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError(f"header not terminated (no 'end_header') at byte offset {len(data)}")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1

    fmt = None
    elements = []  # (name, count, [(prop, type or ("list", count_t, item_t))])
    offset = 0
    for raw in data[:end].split(b"\n"):
        line_offset = offset
        offset += len(raw) + 1
        words = raw.decode("ascii", errors="replace").strip().split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        key = words[0]
        if key == "format":
            if len(words) != 3 or words[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported format line {raw!r} at byte offset {line_offset}")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"malformed element line {raw!r} at byte offset {line_offset}")
            elements.append((words[1], int(words[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError(f"property before any element at byte offset {line_offset}")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"unknown list type in {raw!r} at byte offset {line_offset}")
                elements[-1][2].append((words[4], ("list", words[2], words[3])))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1][2].append((words[2], words[1]))
            else:
                raise PlyError(f"malformed property line {raw!r} at byte offset {line_offset}")
        else:
            raise PlyError(f"unexpected header keyword {key!r} at byte offset {line_offset}")
    if fmt is None:
        raise PlyError("missing format line at byte offset 3")
    return fmt, elements, body_start


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body_start = _parse_header(data)

    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PlyError(f"no vertex element (header ends at byte offset {body_start})")
    vertex = elements[names.index("vertex")]
    props = [p for p, _ in vertex[2]]
    for axis in "xyz":
        if axis not in props:
            raise PlyError(f"vertex property {axis!r} missing (header ends at byte offset {body_start})")
    if not all(c in props for c in ("red", "green", "blue")):
        raise PlyError("attributes required: vertex red/green/blue properties are missing")
    if any(isinstance(t, tuple) for _, t in vertex[2]):
        raise PlyError("list properties on vertices are not supported")

    if fmt == "ascii":
        table = _read_ascii_vertices(data, body_start, elements, names.index("vertex"))
        cols = {p: table[:, i] for i, p in enumerate(props)}
    else:
        pos = body_start
        for name, count, eprops in elements:
            if name == "vertex":
                break
            if any(isinstance(t, tuple) for _, t in eprops):
                raise PlyError(f"cannot skip list element {name!r} preceding vertices")
            pos += count * np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in eprops]).itemsize
        dtype = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in vertex[2]])
        need = pos + vertex[1] * dtype.itemsize
        if need > len(data):
            raise PlyError(f"vertex data truncated: need {need} bytes, file has {len(data)}")
        arr = np.frombuffer(data, dtype=dtype, count=vertex[1], offset=pos)
        cols = {p: arr[p] for p in props}

    positions = np.stack([cols[a].astype(np.float64) for a in "xyz"], axis=1)
    rgb = np.stack([cols[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1)
    return PointCloud(positions, rgb / 255.0, "RGB")


def _read_ascii_vertices(data, body_start, elements, vertex_pos):
    lines = data[body_start:].split(b"\n")
    line_no = 0
    for name, count, _ in elements[:vertex_pos]:
        line_no += count
    count = elements[vertex_pos][1]
    nprop = len(elements[vertex_pos][2])
    rows = [ln for ln in lines[line_no:line_no + count]]
    if len(rows) < count:
        raise PlyError(f"ascii vertex data truncated after byte offset {body_start}")
    try:
        table = np.array([[float(w) for w in r.split()] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise PlyError(f"malformed ascii vertex data after byte offset {body_start}: {exc}")
    if table.shape != (count, nprop):
        raise PlyError(f"ascii vertex rows do not have {nprop} values (data starts at byte offset {body_start})")
    return table


def write_ply(pc: PointCloud, path, format: str = "binary") -> None:
    if len(pc.positions) == 0:
        raise ValueError("empty cloud")
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    rgb = to_uint8(pc.to_rgb().colors)
    pos = pc.positions
    # float32 unless that would lose precision
    ptype = "float" if np.array_equal(pos.astype(np.float32).astype(np.float64), pos) else "double"
    n = len(pos)
    fmt_name = "ascii" if format == "ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {fmt_name} 1.0\nelement vertex {n}\n"
        f"property {ptype} x\nproperty {ptype} y\nproperty {ptype} z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    ).encode("ascii")
    if format == "ascii":
        body = "".join(
            f"{repr(float(x))} {repr(float(y))} {repr(float(z))} {r} {g} {b}\n"
            for (x, y, z), (r, g, b) in zip(pos.tolist(), rgb.tolist())
        ).encode("ascii")
    else:
        ft = "<" + _PLY_TYPES[ptype]
        arr = np.empty(n, dtype=[("x", ft), ("y", ft), ("z", ft), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        arr["x"], arr["y"], arr["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
        arr["red"], arr["green"], arr["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        body = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


# ---------------------------------------------------------------------------
# patching


def _assign_capacitated(points, centers, capacity):
    """Assign every point to a near center without exceeding ``capacity`` per center.

    Rounds widen the candidate list until every point has an owner. Within a
    round, contested centers keep the closest proposals (ties by point index).
    """
    n, m = len(points), len(centers)
    owner = np.full(n, -1, dtype=np.int64)
    load = np.zeros(m, dtype=np.int64)
    tree = cKDTree(centers)
    k = min(m, 4)
    while True:
        todo = np.flatnonzero(owner < 0)
        if len(todo) == 0:
            return owner
        dist, cand = tree.query(points[todo], k=k)
        dist = dist.reshape(len(todo), k)
        cand = cand.reshape(len(todo), k)
        for r in range(k):
            free = owner[todo] < 0
            if not free.any():
                break
            pts, c, d = todo[free], cand[free, r], dist[free, r]
            order = np.lexsort((pts, d, c))
            pts, c = pts[order], c[order]
            # rank of each proposal within its center's group
            starts = np.r_[0, np.flatnonzero(np.diff(c)) + 1]
            group_start = np.repeat(starts, np.diff(np.r_[starts, len(c)]))
            rank = np.arange(len(c)) - group_start
            ok = rank < (capacity - load[c])
            owner[pts[ok]] = c[ok]
            np.add.at(load, c[ok], 1)
        if k == m:
            if (owner < 0).any():
                raise RuntimeError("patch assignment failed to place every point")
            return owner
        k = min(m, 2 * k)


def make_patches(pc: PointCloud, patch_size: int = PATCH_SIZE, seed: int = 0) -> list[Patch]:
    """Split a cloud into fixed-size normalized YUV patches.

    Patch centers come from farthest point sampling; each point is owned by
    exactly one patch. ``seed`` only matters for clouds large enough that the
    center search runs on a random subsample.
    """
    n = len(pc.positions)
    if n == 0:
        raise ValueError("empty cloud")
    yuv = pc.to_yuv().colors
    pos = pc.positions
    m = math.ceil(n / patch_size)

    if n > _CENTER_FPS_CAP:
        rng = np.random.default_rng(seed)
        pool = np.sort(rng.choice(n, size=_CENTER_FPS_CAP, replace=False))
    else:
        pool = np.arange(n)
    centers = pos[pool[fps(pos[pool], m)]]
    owner = _assign_capacitated(pos, centers, patch_size) if m > 1 else np.zeros(n, dtype=np.int64)

    patches = []
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(m + 1))
    for j in range(m):
        own = order[bounds[j]:bounds[j + 1]]
        n_own = len(own)
        rows = own[np.arange(patch_size) % n_own]
        parent = np.where(np.arange(patch_size) < n_own, rows, -1)
        p = pos[rows]
        centroid = pos[own].mean(axis=0)
        centered = p - centroid
        scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
        if scale == 0.0:
            scale = 1.0
        patches.append(Patch(centered / scale, yuv[rows].copy(), parent, centroid, scale))
    return patches


def merge_patches(patches: list[Patch], decoded_colors, n: int) -> np.ndarray:
    out = np.empty((n, 3), dtype=np.float64)
    covered = np.zeros(n, dtype=bool)
    if len(patches) != len(decoded_colors):
        raise ValueError("patch cover incomplete: colors and patches differ in count")
    for patch, colors in zip(patches, decoded_colors):
        own = patch.parent_indices >= 0
        idx = patch.parent_indices[own]
        out[idx] = np.asarray(colors)[own]
        covered[idx] = True
    if not covered.all():
        missing = int((~covered).sum())
        raise ValueError(f"patch cover incomplete: {missing} points uncovered")
    return out
