"""Minimal PLY reader/writer for vertex-only point clouds (ascii and binary little endian)."""

import numpy as np

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


class PlyError(ValueError):
    pass


def write_point_cloud(path, positions, normals=None, colors=None):
    """Binary little-endian PLY with float x,y,z[,nx,ny,nz] and uchar red,green,blue."""
    positions = np.asarray(positions, dtype=np.float32)
    n = len(positions)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(n, dtype=fields)
    data["x"], data["y"], data["z"] = positions.T
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float32)
        data["nx"], data["ny"], data["nz"] = nrm.T
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors, dtype=float) * 255.0), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = c.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def read_ply(path):
    """Vertex element of a PLY file as a dict of 1-D arrays keyed by property name."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise PlyError(f"{path}: {e}") from e
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyError(f"{path}: not a PLY file")
    nl = blob.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"{path}: truncated header")
    try:
        lines = blob[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise PlyError(f"{path}: non-ascii header") from e
    body = blob[nl + 1 :]

    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format" and len(parts) >= 2:
            fmt = parts[1]
        elif parts[0] == "element" and len(parts) == 3:
            try:
                elements.append((parts[1], int(parts[2]), []))
            except ValueError as e:
                raise PlyError(f"{path}: bad element line {line!r}") from e
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                raise PlyError(f"{path}: list properties are not supported")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyError(f"{path}: bad property line {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"{path}: unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"{path}: unsupported format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if count < 0 or not props:
        raise PlyError(f"{path}: empty vertex element")

    if fmt == "ascii":
        rows = body.decode("ascii", errors="replace").split("\n")
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise PlyError(f"{path}: expected {count} vertices, found {len(rows)}")
        try:
            table = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows])
        except ValueError as e:
            raise PlyError(f"{path}: malformed vertex data") from e
        if count and table.shape != (count, len(props)):
            raise PlyError(f"{path}: malformed vertex rows")
        table = table.reshape(count, len(props))
        return {name: table[:, i] for i, (name, _) in enumerate(props)}

    order = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(name, order + t) for name, t in props])
    need = dtype.itemsize * count
    if len(body) < need:
        raise PlyError(f"{path}: truncated vertex data ({len(body)} < {need} bytes)")
    data = np.frombuffer(body[:need], dtype=dtype, count=count)
    return {name: data[name].astype(np.float64) for name, _ in props}


def read_point_cloud(path):
    """(positions, normals or None, colors in [0,1] or None)."""
    v = read_ply(path)
    for k in ("x", "y", "z"):
        if k not in v:
            raise PlyError(f"{path}: vertex element lacks '{k}'")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1)
    nrm = None
    if all(k in v for k in ("nx", "ny", "nz")):
        nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1)
    col = None
    if all(k in v for k in ("red", "green", "blue")):
        col = np.stack([v["red"], v["green"], v["blue"]], axis=1) / 255.0
    return pos, nrm, col
