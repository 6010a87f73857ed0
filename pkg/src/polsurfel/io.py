"""File formats: PFM rasters, ASCII PLY surfel sets, cube-map face sets and
camera metadata."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .render.cubemap import FACE_NAMES, Cubemap
from .surfel import Camera, SurfelSet


class FormatError(ValueError):
    pass


def write_pfm(path, img):
    """Write a float raster: ``PF`` for (H, W, 3), ``Pf`` for (H, W).

    Little-endian (scale -1.0), rows stored bottom to top, 32-bit floats.
    """
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF\n"
    elif img.ndim == 2:
        tag = b"Pf\n"
    else:
        raise FormatError(f"PFM holds (H, W) or (H, W, 3) rasters, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(tag)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = data[m.end():]
    if len(body) < 4 * count:
        raise FormatError(f"{path}: truncated PFM data")
    arr = np.frombuffer(body[:4 * count], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.flipud(arr).copy()


PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz", "opacity", "scale_0", "scale_1"]
              + [f"rot_{i}" for i in range(4)] + [f"f_dc_{i}" for i in range(3)])


def write_ply(path, surfels: SurfelSet):
    """ASCII PLY in raw optimizer parameterization.

    ``opacity`` is the pre-sigmoid logit and ``scale_*`` are log scales, as in
    common splatting checkpoints; normals are derived and ignored on load.
    """
    cols = np.column_stack([surfels.xyz, surfels.normal, surfels.opacity_logit,
                            surfels.log_scale, surfels.quat, surfels.f_dc])
    header = ["ply", "format ascii 1.0", f"element vertex {len(surfels)}"]
    header += [f"property double {name}" for name in PLY_FIELDS]
    header.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        np.savetxt(f, cols, fmt="%.17g")


def read_ply(path) -> SurfelSet:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    names, n, end = [], None, None
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            names.append(parts[-1])
        elif line.strip() == "end_header":
            end = i + 1
            break
    if end is None or n is None:
        raise FormatError(f"{path}: malformed PLY header")
    missing = set(PLY_FIELDS) - set(names)
    if missing:
        raise FormatError(f"{path}: missing properties {sorted(missing)}")
    data = np.loadtxt(lines[end:end + n], ndmin=2) if n else np.zeros((0, len(names)))
    col = {name: data[:, i] for i, name in enumerate(names)}
    stack = lambda *ks: np.column_stack([col[k] for k in ks]) if n else np.zeros((0, len(ks)))
    return SurfelSet(stack("x", "y", "z"), stack("scale_0", "scale_1"),
                     stack("rot_0", "rot_1", "rot_2", "rot_3"), col["opacity"],
                     stack("f_dc_0", "f_dc_1", "f_dc_2"))


def write_cubemap(directory, cubemap: Cubemap):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, face in zip(FACE_NAMES, cubemap.texels):
        write_pfm(directory / f"{name}.pfm", face)


def read_cubemap(directory) -> Cubemap:
    directory = Path(directory)
    return Cubemap(np.stack([read_pfm(directory / f"{n}.pfm") for n in FACE_NAMES]).astype(np.float64))


def write_cameras(path, cameras, names=None, extra=None):
    names = names or [f"view_{i:03d}" for i in range(len(cameras))]
    doc = {"views": [dict(name=n, **c.to_dict()) for n, c in zip(names, cameras)]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def read_cameras(path):
    doc = json.loads(Path(path).read_text())
    if "views" not in doc:
        raise FormatError(f"{path}: missing 'views'")
    try:
        cams = [Camera.from_dict(v) for v in doc["views"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad camera entry ({e})") from e
    return cams, [v.get("name", f"view_{i:03d}") for i, v in enumerate(doc["views"])], doc
