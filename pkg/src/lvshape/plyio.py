"""PLY reading/writing for labeled meshes (ASCII and binary little-endian)."""
from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, LVShapeError
from .mesh import LabeledMesh

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

LABEL_PROPERTIES = (
    ("x", "double"),
    ("y", "double"),
    ("z", "double"),
    ("structure_label", "uchar"),
    ("peripheral_class", "char"),
    ("side", "uchar"),
)


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError("missing 'ply' magic", record=0)
    fmt = None
    elements = []
    line_no = 0
    while True:
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise FormatError("unterminated header", record=line_no)
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element", record=line_no)
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", tok[2], tok[3]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown property type {tok[1]!r}", record=line_no)
                elements[-1]["props"].append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            return fmt, elements, line_no
        else:
            raise FormatError(f"unexpected header keyword {tok[0]!r}", record=line_no)


def _read_ascii(fh, elements, line_no):
    out = {}
    for el in elements:
        rows = []
        for r in range(el["count"]):
            raw = fh.readline()
            line_no += 1
            if not raw:
                raise FormatError(f"unexpected end of file in element {el['name']}", record=line_no)
            tok = raw.split()
            vals, pos = {}, 0
            try:
                for prop in el["props"]:
                    if prop[1] == "list":
                        n = int(tok[pos])
                        vals[prop[0]] = [int(t) for t in tok[pos + 1 : pos + 1 + n]]
                        if len(vals[prop[0]]) != n:
                            raise IndexError
                        pos += 1 + n
                    else:
                        vals[prop[0]] = float(tok[pos]) if _PLY_TYPES[prop[1]][0] == "f" else int(tok[pos])
                        pos += 1
            except (IndexError, ValueError):
                raise FormatError(f"malformed {el['name']} record", record=line_no) from None
            rows.append(vals)
        out[el["name"]] = (rows, line_no - el["count"] + 1)
    return out


def _read_binary(fh, elements):
    out = {}
    for el in elements:
        scalar = [p for p in el["props"] if p[1] != "list"]
        lists = [p for p in el["props"] if p[1] == "list"]
        if lists:
            if len(el["props"]) != 1:
                raise FormatError(f"unsupported mixed list element {el['name']}")
            name, _, ctype, itype = lists[0]
            dt = np.dtype([("n", "<" + _PLY_TYPES[ctype]), ("v", "<" + _PLY_TYPES[itype], 3)])
            buf = fh.read(dt.itemsize * el["count"])
            if len(buf) != dt.itemsize * el["count"]:
                raise FormatError(f"truncated binary element {el['name']}")
            arr = np.frombuffer(buf, dtype=dt)
            bad = np.flatnonzero(arr["n"] != 3)
            if len(bad):
                raise FormatError("only triangle faces are supported", record=int(bad[0]))
            out[el["name"]] = ({name: arr["v"].astype(np.int64)}, 0)
        else:
            dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in scalar])
            buf = fh.read(dt.itemsize * el["count"])
            if len(buf) != dt.itemsize * el["count"]:
                raise FormatError(f"truncated binary element {el['name']}")
            arr = np.frombuffer(buf, dtype=dt)
            out[el["name"]] = ({p[0]: arr[p[0]] for p in scalar}, 0)
    return out


def _columns(rows, names, record0):
    cols = {}
    for name in names:
        try:
            cols[name] = np.array([r[name] for r in rows])
        except KeyError:
            raise FormatError(f"missing vertex property {name!r}", record=record0) from None
    return cols


def load_labeled_mesh(path) -> LabeledMesh:
    """Read a labeled PLY; every structural invariant is checked on load."""
    with open(path, "rb") as fh:
        fmt, elements, line_no = _parse_header(fh)
        names = {e["name"] for e in elements}
        if "vertex" not in names or "face" not in names:
            raise FormatError("PLY needs vertex and face elements")
        if fmt == "ascii":
            data = _read_ascii(fh, elements, line_no)
            vrows, vstart = data["vertex"]
            frows, fstart = data["face"]
            vcols = _columns(vrows, [p[0] for p in LABEL_PROPERTIES], vstart)
            face_prop = next(p[0] for e in elements if e["name"] == "face" for p in e["props"])
            faces = []
            for k, r in enumerate(frows):
                if len(r[face_prop]) != 3:
                    raise FormatError("only triangle faces are supported", record=fstart + k)
                faces.append(r[face_prop])
            faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        elif fmt == "binary_little_endian":
            data = _read_binary(fh, elements)
            vcols, vstart = data["vertex"]
            fstart = 0
            missing = [p[0] for p in LABEL_PROPERTIES if p[0] not in vcols]
            if missing:
                raise FormatError(f"missing vertex property {missing[0]!r}")
            faces = next(iter(data["face"][0].values()))
        else:
            raise FormatError(f"unsupported PLY format {fmt!r}")

    n = len(vcols["x"])
    if faces.size:
        out_of_range = np.flatnonzero((faces < 0).any(1) | (faces >= n).any(1))
        if len(out_of_range):
            raise FormatError("face index out of range", record=fstart + int(out_of_range[0]))
    structure = vcols["structure_label"].astype(np.int64)
    peripheral = vcols["peripheral_class"].astype(np.int64)
    side = vcols["side"].astype(np.int64)
    for name, arr, lo, hi in (
        ("structure_label", structure, 0, 2),
        ("peripheral_class", peripheral, -1, 4),
        ("side", side, 0, 1),
    ):
        bad = np.flatnonzero((arr < lo) | (arr > hi))
        if len(bad):
            raise FormatError(f"{name} out of range", record=vstart + int(bad[0]))
    missing_peri = np.flatnonzero((structure != 1) & (peripheral == -1))
    if len(missing_peri):
        raise FormatError("LV vertex without peripheral_class", record=vstart + int(missing_peri[0]))
    mesh = LabeledMesh(
        np.column_stack([vcols["x"], vcols["y"], vcols["z"]]).astype(np.float64),
        faces,
        structure,
        peripheral,
        side,
    )
    try:
        mesh.validate()
    except LVShapeError as exc:
        raise FormatError(f"invalid labeled mesh: {exc}") from exc
    return mesh


def save_labeled_mesh(mesh: LabeledMesh, path, binary=False, comments=()):
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {mesh.n_vertices}")
    header += [f"property {t} {n}" for n, t in LABEL_PROPERTIES]
    header.append(f"element face {len(mesh.faces)}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vdt = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t in LABEL_PROPERTIES])
            v = np.empty(mesh.n_vertices, dtype=vdt)
            v["x"], v["y"], v["z"] = mesh.vertices.T
            v["structure_label"] = mesh.structure
            v["peripheral_class"] = mesh.peripheral
            v["side"] = mesh.side
            fh.write(v.tobytes())
            fdt = np.dtype([("n", "u1"), ("v", "<i4", 3)])
            f = np.empty(len(mesh.faces), dtype=fdt)
            f["n"] = 3
            f["v"] = mesh.faces
            fh.write(f.tobytes())
        else:
            lines = [
                f"{x!r} {y!r} {z!r} {s} {p} {sd}"
                for (x, y, z), s, p, sd in zip(
                    mesh.vertices.tolist(),
                    mesh.structure.tolist(),
                    mesh.peripheral.tolist(),
                    mesh.side.tolist(),
                )
            ]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
    os.replace(tmp, path)


def save_scalar_ply(path, vertices, faces, scalars):
    """ASCII PLY with extra float vertex properties (e.g. p-value maps for viewers)."""
    names = list(scalars)
    cols = [np.asarray(scalars[n], dtype=np.float64) for n in names]
    header = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}"]
    header += ["property double x", "property double y", "property double z"]
    header += [f"property double {n}" for n in names]
    header += [f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i, p in enumerate(np.asarray(vertices).tolist()):
            fh.write(" ".join(repr(v) for v in p + [c[i].item() for c in cols]) + "\n")
        for a, b, c in np.asarray(faces).tolist():
            fh.write(f"3 {a} {b} {c}\n")
