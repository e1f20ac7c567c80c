"""Binary PLY serialization in the community 3DGS property layout.

Stored properties per vertex, in order, all little-endian float32:
x y z nx ny nz f_dc_0..2 f_rest_0..(3(K-1)-1) opacity scale_0..2 rot_0..3
with K = (degree+1)^2. Normals are written as zeros. Scales are stored as
logs, opacity as a logit, rotations as raw scalar-first quaternions, i.e.
the exact optimizer-space parameters, which is what common viewers expect.
"""

from __future__ import annotations

import numpy as np

from .core import GaussianCloud, sh_coeff_count
from .errors import FormatError

_MAGIC = b"ply"
_FORMAT = b"format binary_little_endian 1.0"


def _property_names(degree: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (sh_coeff_count(degree) - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def ply_export(cloud: GaussianCloud, path) -> None:
    """Write a cloud to ``path``; fields are cast to float32."""
    degree = cloud.sh_degree
    names = _property_names(degree)
    n = cloud.n
    k = sh_coeff_count(degree)

    rec = np.zeros(n, dtype=np.dtype([(name, "<f4") for name in names]))
    rec["x"], rec["y"], rec["z"] = cloud.means.astype(np.float32).T
    for c in range(3):
        rec[f"f_dc_{c}"] = cloud.sh_coeffs[:, c, 0].astype(np.float32)
    for c in range(3):
        for j in range(1, k):
            rec[f"f_rest_{c * (k - 1) + j - 1}"] = cloud.sh_coeffs[:, c, j].astype(np.float32)
    rec["opacity"] = cloud.opacity_logits.astype(np.float32)
    for a in range(3):
        rec[f"scale_{a}"] = cloud.log_scales[:, a].astype(np.float32)
    for a in range(4):
        rec[f"rot_{a}"] = cloud.rotations[:, a].astype(np.float32)

    header = [_MAGIC, _FORMAT, b"element vertex %d" % n]
    header += [b"property float " + name.encode() for name in names]
    header += [b"end_header"]
    with open(path, "wb") as fh:
        fh.write(b"\n".join(header) + b"\n")
        rec.tofile(fh)


def ply_import(path) -> GaussianCloud:
    """Read a cloud written by :func:`ply_export` (or any compatible file)."""
    with open(path, "rb") as fh:
        data = fh.read()

    end = data.find(b"end_header\n")
    if not data.startswith(_MAGIC) or end < 0:
        raise FormatError(f"{path}: not a PLY file (missing header)")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    payload = data[end + len(b"end_header\n"):]

    n = None
    props: list[str] = []
    fmt_seen = False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if line.encode() != _FORMAT:
                raise FormatError(f"{path}: unsupported format '{line}'")
            fmt_seen = True
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"{path}: unexpected element '{parts[1]}'")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise FormatError(f"{path}: property '{parts[-1]}' has non-float type")
            props.append(parts[2])
    if not fmt_seen or n is None:
        raise FormatError(f"{path}: incomplete header")

    degree = _degree_from_props(path, props)
    expected = _property_names(degree)
    for got, want in zip(props, expected):
        if got != want:
            raise FormatError(f"{path}: unexpected property '{got}' (expected '{want}')")

    dtype = np.dtype([(name, "<f4") for name in props])
    if len(payload) < n * dtype.itemsize:
        raise FormatError(
            f"{path}: truncated payload ({len(payload)} bytes for {n} vertices)"
        )
    rec = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype)

    k = sh_coeff_count(degree)
    sh = np.zeros((n, 3, k), dtype=np.float64)
    for c in range(3):
        sh[:, c, 0] = rec[f"f_dc_{c}"]
        for j in range(1, k):
            sh[:, c, j] = rec[f"f_rest_{c * (k - 1) + j - 1}"]
    return GaussianCloud(
        means=np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64),
        rotations=np.stack([rec[f"rot_{a}"] for a in range(4)], axis=1).astype(np.float64),
        log_scales=np.stack([rec[f"scale_{a}"] for a in range(3)], axis=1).astype(np.float64),
        opacity_logits=rec["opacity"].astype(np.float64),
        sh_coeffs=sh,
    )


def _degree_from_props(path, props: list[str]) -> int:
    for name in ("x", "y", "z", "opacity", "f_dc_0"):
        if name not in props:
            raise FormatError(f"{path}: missing property '{name}'")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    for degree in range(4):
        if 3 * (sh_coeff_count(degree) - 1) == n_rest:
            return degree
    raise FormatError(f"{path}: f_rest property count {n_rest} matches no SH degree 0..3")
