"""Mesh, landmark and model file formats.

* meshes: ASCII OBJ (``v`` / ``f`` records, 1-based) and binary little-endian PLY
* landmarks: text lines ``name index`` or ``name x y z``
* skeleton, weights, topology, config: JSON; floats are written with
  ``repr`` so every value round-trips bit-exactly
* shape space, landmark model: ``BFIT`` container = magic, uint32 version,
  uint32 header length, JSON header, then little-endian float64 arrays
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .landmarks import GaussianPotential, LandmarkModel, LandmarkTopology
from .mesh import TriangleMesh
from .shape_space import ShapeSpace
from .skeleton import RiggedTemplate, Skeleton

MAGIC = b"BFIT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---- meshes --------------------------------------------------------------

def save_obj(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    if any(i == 0 for i in idx):
                        raise ValueError("OBJ indices are 1-based; found 0")
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    try:
        return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_ply(path, mesh: TriangleMesh):
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\nproperty double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    fa = np.empty(len(mesh.faces), dtype=face_dt)
    fa["n"] = 3
    fa["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(fa.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
              "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int32": "<i4", "uint32": "<u4",
              "float32": "<f4", "float64": "<f8"}


def load_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in lines:
        p = line.split()
        if p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p[0] == "property":
            elements[-1][2].append(p[1:])
    off = end + len(b"end_header\n")
    verts = faces = None
    for name, count, props in elements:
        if name == "vertex":
            dt = np.dtype([(pp[-1], _PLY_TYPES[pp[0]]) for pp in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            verts = np.column_stack([arr["x"], arr["y"], arr["z"]]).astype(float)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise FormatError(f"{path}: unsupported face layout")
            ct, it = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            dt = np.dtype([("n", ct), ("idx", it, (3,))])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off)
            if np.any(arr["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            off += dt.itemsize * count
            faces = arr["idx"].astype(np.int64)
        else:
            raise FormatError(f"{path}: unexpected element {name!r}")
    if verts is None or faces is None:
        raise FormatError(f"{path}: missing vertex or face element")
    return TriangleMesh(verts, faces)


def load_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise FormatError(f"{path}: unknown mesh format {suffix!r}")


def save_mesh(path, mesh: TriangleMesh):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return save_obj(path, mesh)
    if suffix == ".ply":
        return save_ply(path, mesh)
    raise FormatError(f"{path}: unknown mesh format {suffix!r}")


# ---- landmarks -----------------------------------------------------------

def save_landmarks(path, names, values):
    """Write ``name index`` lines for an index array, ``name x y z`` for positions."""
    values = np.asarray(values)
    with open(path, "w") as fh:
        for n, v in zip(names, values):
            if values.ndim == 1:
                fh.write(f"{n} {int(v)}\n")
            else:
                fh.write(f"{n} {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")


def load_landmarks(path, names=None):
    """Read a landmark file; returns indices (n,) or positions (n, 3) ordered by ``names``."""
    entries = {}
    kind = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            p = line.split("#", 1)[0].split()
            if not p:
                continue
            try:
                if len(p) == 2:
                    k, val = "index", int(p[1])
                elif len(p) == 4:
                    k, val = "position", [float(t) for t in p[1:]]
                else:
                    raise ValueError("expected 'name index' or 'name x y z'")
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if kind is not None and k != kind:
                raise FormatError(f"{path}:{lineno}: mixed index and position lines")
            kind = k
            entries[p[0]] = val
    order = list(entries) if names is None else list(names)
    missing = [n for n in order if n not in entries]
    if missing:
        raise FormatError(f"{path}: missing landmarks {missing}")
    if kind == "index":
        return np.array([entries[n] for n in order], dtype=np.int64)
    return np.array([entries[n] for n in order], dtype=float).reshape(-1, 3)


# ---- JSON documents ------------------------------------------------------

def save_json(path, obj):
    # json writes floats with repr, which round-trips exactly
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None


def skeleton_to_dict(s: Skeleton) -> dict:
    return {"names": list(s.names), "parents": s.parents.tolist(), "heads": s.heads.tolist(), "tails": s.tails.tolist()}


def skeleton_from_dict(d) -> Skeleton:
    return Skeleton(tuple(d["names"]), d["parents"], d["heads"], d["tails"])


def topology_to_dict(t: LandmarkTopology) -> dict:
    return {"names": list(t.names), "edges": [list(e) for e in t.edges], "root": t.root}


def topology_from_dict(d) -> LandmarkTopology:
    return LandmarkTopology(d["names"], d["edges"], d.get("root"))


def save_template(directory, template: RiggedTemplate, landmark_names):
    """Template as ``template.obj``, ``skeleton.json``, ``weights.json``, ``landmarks.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_obj(d / "template.obj", template.mesh)
    save_json(d / "skeleton.json", skeleton_to_dict(template.skeleton))
    save_json(d / "weights.json", {"bones": list(template.skeleton.names), "weights": template.weights.tolist()})
    save_landmarks(d / "landmarks.txt", landmark_names, template.landmarks)


def load_template(directory, landmark_names=None) -> RiggedTemplate:
    d = Path(directory)
    mesh = load_obj(d / "template.obj")
    skel = skeleton_from_dict(load_json(d / "skeleton.json"))
    w = load_json(d / "weights.json")
    lm = load_landmarks(d / "landmarks.txt", landmark_names)
    if lm.ndim != 1:
        raise FormatError("template landmarks must be vertex indices")
    return RiggedTemplate(mesh, skel, np.array(w["weights"], dtype=float), lm)


# ---- BFIT container ------------------------------------------------------

def write_container(path, kind: str, meta: dict, arrays: dict):
    header = {"kind": kind, "meta": meta, "arrays": []}
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        header["arrays"].append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_container(path, kind: str):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt header at offset 12") from None
    if header.get("kind") != kind:
        raise FormatError(f"{path}: contains {header.get('kind')!r}, expected {kind!r}")
    off = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if off + 8 * count > len(data):
            raise FormatError(f"{path}: truncated array {spec['name']!r} at offset {off}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(spec["shape"]).copy()
        off += 8 * count
    return header["meta"], arrays


def save_shape_space(path, space: ShapeSpace):
    write_container(path, "shape-space",
                    {"retained_fraction": space.retained_fraction, "total_variance": space.total_variance},
                    {"mean": space.mean, "components": space.components, "eigenvalues": space.eigenvalues})


def load_shape_space(path) -> ShapeSpace:
    meta, a = read_container(path, "shape-space")
    return ShapeSpace(a["mean"], a["components"], a["eigenvalues"], meta["retained_fraction"], meta["total_variance"])


def save_landmark_model(path, model: LandmarkModel):
    arrays = {"radii": model.radii, "reference_positions": model.reference_positions}
    for j, p in enumerate(model.node_potentials):
        arrays[f"node{j}.mean"] = p.mean
        arrays[f"node{j}.cov"] = p.covariance
    for e, p in enumerate(model.edge_potentials):
        arrays[f"edge{e}.mean"] = p.mean
        arrays[f"edge{e}.cov"] = p.covariance
    write_container(path, "landmark-model", {"topology": topology_to_dict(model.topology)}, arrays)


def load_landmark_model(path) -> LandmarkModel:
    meta, a = read_container(path, "landmark-model")
    top = topology_from_dict(meta["topology"])
    nodes = [GaussianPotential(a[f"node{j}.mean"], a[f"node{j}.cov"]) for j in range(top.n_nodes)]
    edges = [GaussianPotential(a[f"edge{e}.mean"], a[f"edge{e}.cov"]) for e in range(len(top.edges))]
    return LandmarkModel(top, nodes, edges, a["reference_positions"], a["radii"])
