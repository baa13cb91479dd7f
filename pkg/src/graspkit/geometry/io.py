"""PLY / OBJ reading and PLY writing. Positions and faces only; polygons are fan-triangulated."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import MeshFormatError
from .mesh import TriangleMesh, from_arrays

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path, scale: float = 1.0) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        V, F, N = _read_ply(path)
    elif suffix == ".obj":
        V, F, N = _read_obj(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r} ({path})")
    if len(F) == 0:
        raise MeshFormatError(f"{path} contains no faces")
    return from_arrays(V * scale, F, N, name=path.stem)


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(path: Path):
    V, VN, F, FN = [], [], [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                V.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                VN.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                vi, ni = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    idx = int(fields[0])
                    vi.append(idx - 1 if idx > 0 else len(V) + idx)
                    if len(fields) >= 3 and fields[2]:
                        n = int(fields[2])
                        ni.append(n - 1 if n > 0 else len(VN) + n)
                F.extend(_fan(vi))
                if len(ni) == len(vi):
                    FN.extend(_fan(ni))
    V = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(F, dtype=np.int64).reshape(-1, 3)
    N = None
    if VN and len(FN) == len(F):
        # only usable when each vertex maps to one normal
        FN = np.asarray(FN, dtype=np.int64)
        VN = np.asarray(VN, dtype=np.float64)
        mapping = np.full(len(V), -1, dtype=np.int64)
        consistent = True
        for fv, fn in zip(F.reshape(-1), FN.reshape(-1)):
            if mapping[fv] == -1:
                mapping[fv] = fn
            elif mapping[fv] != fn:
                consistent = False
                break
        if consistent and np.all(mapping >= 0):
            N = VN[mapping]
    return V, F, N


def _read_ply(path: Path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError(f"{path}: missing 'ply' magic")
        fmt = None
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshFormatError(f"{path}: unterminated header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append({"name": tokens[1], "count": int(tokens[2]), "props": []})
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1]["props"].append((tokens[4], "list", tokens[2], tokens[3]))
                else:
                    elements[-1]["props"].append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt == "ascii":
            data = _read_ply_ascii(fh, elements)
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            data = _read_ply_binary(fh, elements, "<" if fmt == "binary_little_endian" else ">")
        else:
            raise MeshFormatError(f"{path}: unknown PLY format {fmt!r}")
    vert = data.get("vertex")
    if vert is None:
        raise MeshFormatError(f"{path}: no vertex element")
    V = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    N = None
    if all(k in vert for k in ("nx", "ny", "nz")):
        N = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
    F = []
    face = data.get("face", {})
    polys = face.get("vertex_indices", face.get("vertex_index", []))
    for poly in polys:
        F.extend(_fan([int(i) for i in poly]))
    return V, np.asarray(F, dtype=np.int64).reshape(-1, 3), N


def _read_ply_ascii(fh, elements):
    text = fh.read().decode("ascii", errors="replace").split()
    pos = 0
    out = {}
    for el in elements:
        cols = {p[0]: [] for p in el["props"]}
        for _ in range(el["count"]):
            for prop in el["props"]:
                if prop[1] == "list":
                    n = int(text[pos])
                    cols[prop[0]].append(text[pos + 1 : pos + 1 + n])
                    pos += 1 + n
                else:
                    cols[prop[0]].append(float(text[pos]))
                    pos += 1
        out[el["name"]] = {
            k: (np.asarray(v, dtype=np.float64) if not any(p[0] == k and p[1] == "list" for p in el["props"]) else v)
            for k, v in cols.items()
        }
    return out


def _read_ply_binary(fh, elements, endian):
    out = {}
    for el in elements:
        props = el["props"]
        if all(p[1] != "list" for p in props):
            dtype = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in props])
            raw = fh.read(dtype.itemsize * el["count"])
            if len(raw) < dtype.itemsize * el["count"]:
                raise MeshFormatError("truncated binary PLY")
            arr = np.frombuffer(raw, dtype=dtype)
            out[el["name"]] = {p[0]: arr[p[0]] for p in props}
            continue
        cols = {p[0]: [] for p in props}
        for _ in range(el["count"]):
            for prop in props:
                if prop[1] == "list":
                    ct = np.dtype(endian + _PLY_TYPES[prop[2]])
                    it = np.dtype(endian + _PLY_TYPES[prop[3]])
                    n = int(np.frombuffer(fh.read(ct.itemsize), dtype=ct)[0])
                    cols[prop[0]].append(np.frombuffer(fh.read(it.itemsize * n), dtype=it))
                else:
                    t = np.dtype(endian + _PLY_TYPES[prop[1]])
                    cols[prop[0]].append(np.frombuffer(fh.read(t.itemsize), dtype=t)[0])
        out[el["name"]] = cols
    return out


def save_mesh_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    V, F, N = mesh.vertices, mesh.triangles, mesh.normals
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(V)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        f"element face {len(F)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.hstack([V, N]).astype("<f4").tobytes())
            rec = np.zeros(len(F), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = F
            fh.write(rec.tobytes())
        else:
            for v, n in zip(V, N):
                fh.write(("%.9g %.9g %.9g %.9g %.9g %.9g\n" % (*v, *n)).encode("ascii"))
            for f in F:
                fh.write(("3 %d %d %d\n" % tuple(f)).encode("ascii"))


def save_points_ply(path, points, normals=None, scalars: dict | None = None) -> None:
    """Binary little-endian PLY point cloud with optional normals and float scalar fields."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    scalars = scalars or {}
    fields += [(name, "<f4") for name in scalars]
    rec = np.zeros(len(points), dtype=fields)
    rec["x"], rec["y"], rec["z"] = points.T
    if normals is not None:
        normals = np.asarray(normals).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = normals.T
    for name, vals in scalars.items():
        rec[name] = vals
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property float {name}" for name, _ in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def load_points_ply(path):
    """Read a point-cloud PLY written by :func:`save_points_ply` (or any PLY vertex element)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError(f"{path}: missing 'ply' magic")
        fmt, elements = None, []
        while True:
            tokens = fh.readline().decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append({"name": tokens[1], "count": int(tokens[2]), "props": []})
            elif tokens[0] == "property":
                elements[-1]["props"].append((tokens[-1], "list") if tokens[1] == "list" else (tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt == "ascii":
            data = _read_ply_ascii(fh, elements)
        else:
            data = _read_ply_binary(fh, elements, "<" if fmt == "binary_little_endian" else ">")
    vert = data["vertex"]
    pts = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    nrm = None
    if "nx" in vert:
        nrm = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
    return pts, nrm

