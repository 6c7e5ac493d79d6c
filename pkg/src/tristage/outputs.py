"""File artifacts: voxel grids, STL/SVG geometry, run history, plots.

All artifact writers are deterministic: fixed float formatting, no
timestamps, lexicographic ordering. Invoked from the pipeline and reusable
standalone (the export subcommand).
"""

import json
import struct

import numpy as np

from .errors import ConfigError

_DENS_MAGIC = b"TSDENS01"


def save_density(values, dims, path, h=1.0):
    """Binary voxel grid: magic, u32 D, u32 dims, f64 h, f64 data (x fastest)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size != int(np.prod(dims)):
        raise ConfigError("density", "value count does not match dims")
    with open(path, "wb") as fh:
        fh.write(_DENS_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<d", h))
        fh.write(values.astype("<f8").tobytes())


def load_density(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _DENS_MAGIC:
            raise ConfigError("density_file", "bad magic")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        (h,) = struct.unpack("<d", fh.read(8))
        values = np.frombuffer(fh.read(8 * int(np.prod(dims))), dtype="<f8")
    return values.copy(), dims, h


def save_density_csv(values, dims, path):
    with open(path, "w") as fh:
        fh.write(f"# dims: {' '.join(str(d) for d in dims)}\n")
        fh.write("density\n")
        for v in np.asarray(values, dtype=float).ravel():
            fh.write(f"{v!r}\n")


def write_history_csv(rows, path):
    """rows: (stage, iteration, C, C_over_ref, V_over_Vmax)."""
    with open(path, "w") as fh:
        fh.write("stage,iteration,C,C_over_Cref,V_over_Vmax\n")
        for stage, it, c, cref, v in rows:
            fh.write(f"{stage},{it},{c:.12g},{cref:.12g},{v:.12g}\n")


def write_stl(mesh, path):
    """Binary STL, little-endian: 80-byte header, u32 count, 50-byte records."""
    tris = mesh.triangles
    verts = mesh.vertices
    with open(path, "wb") as fh:
        header = b"tristage binary STL" + b" " * 61
        fh.write(header[:80])
        fh.write(struct.pack("<I", len(tris)))
        if len(tris) == 0:
            return
        a = verts[tris[:, 0]]
        b = verts[tris[:, 1]]
        c = verts[tris[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(norm, 1e-300)
        rec = np.zeros(len(tris), dtype=np.dtype([
            ("normal", "<f4", 3), ("v0", "<f4", 3), ("v1", "<f4", 3),
            ("v2", "<f4", 3), ("attr", "<u2")]))
        rec["normal"], rec["v0"], rec["v1"], rec["v2"] = n, a, b, c
        fh.write(rec.tobytes())


def read_stl_counts(path):
    """(triangle count, header bytes) for format checks."""
    with open(path, "rb") as fh:
        header = fh.read(80)
        (count,) = struct.unpack("<I", fh.read(4))
    return count, header


def write_svg(contours, domain_size, path, stroke=0.15):
    """Contour polylines over the design domain as an SVG 1.1 drawing."""
    W, H = domain_size
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {W} {H}" width="{W * 8}" height="{H * 8}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white" '
        f'stroke="#999" stroke-width="{stroke / 2}"/>',
    ]
    for poly in contours.polylines:
        closed = np.allclose(poly[0], poly[-1])
        pts = poly[:-1] if closed else poly
        # SVG y runs downward; flip to keep the drawing upright
        path_d = "M " + " L ".join(f"{x:.6g} {H - y:.6g}" for x, y in pts)
        if closed:
            path_d += " Z"
        lines.append(f'<path d="{path_d}" fill="none" stroke="black" '
                     f'stroke-width="{stroke}" stroke-linejoin="round"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def plot_density(values, dims, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = np.asarray(values).reshape(dims, order="F")
    fig, ax = plt.subplots(figsize=(6, 6 * dims[1] / dims[0]))
    ax.imshow(1.0 - img.T, cmap="gray", origin="lower", vmin=0.0, vmax=1.0,
              interpolation="nearest")
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)


def plot_history(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    stages = sorted({r[0] for r in rows})
    offset = 0
    for stage in stages:
        pts = [(r[1], r[3]) for r in rows if r[0] == stage]
        xs = [offset + i for i in range(1, len(pts) + 1)]
        ax.plot(xs, [p[1] for p in pts], marker="o", markersize=2,
                label=f"stage {stage}")
        offset = xs[-1]
    ax.set_xlabel("iteration")
    ax.set_ylabel("C / C_ref")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)
