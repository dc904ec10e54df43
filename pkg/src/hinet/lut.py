"""3D colour lookup tables: trilinear application, overflow penalty,
keyframe interpolation and ``.cube`` import/export."""

from dataclasses import dataclass

import numpy as np

from . import kernels

DEFAULT_DIM = 7
MAX_DIM = 33


class CubeParseError(ValueError):
    pass


@dataclass
class Lut3D:
    """D x D x D lattice of output colours indexed ``[r][g][b]``."""

    lattice: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lattice, dtype=np.float64)
        if lat.ndim != 4 or lat.shape[3] != 3 or not (lat.shape[0] == lat.shape[1] == lat.shape[2]):
            raise ValueError(f"lattice must have shape (D, D, D, 3), got {lat.shape}")
        if lat.shape[0] < 2:
            raise ValueError("LUT dimension must be >= 2")
        if not np.all(np.isfinite(lat)):
            raise ValueError("LUT lattice has non-finite entries")
        self.lattice = lat

    @property
    def dim(self):
        return self.lattice.shape[0]


def identity_lattice(dim):
    axis = np.arange(dim) / (dim - 1)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([r, g, b], axis=-1)


def lut_identity(dim=DEFAULT_DIM):
    if dim < 2:
        raise ValueError("LUT dimension must be >= 2")
    return Lut3D(identity_lattice(dim))


def corner_weights(rgb, dim):
    """Flat lattice indices (n, 8) and trilinear weights (n, 8) for each colour.

    Colours are clamped to [0, 1].  Each axis uses the cell
    ``[i0, i0 + 1]`` with ``i0 = min(floor(c * (D - 1)), D - 2)``.
    """
    rgb = np.clip(np.asarray(rgb, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    t = rgb * (dim - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), dim - 2)
    f = t - i0
    n = rgb.shape[0]
    index = np.empty((n, 8), dtype=np.int64)
    weight = np.empty((n, 8))
    k = 0
    for dr in (0, 1):
        wr = f[:, 0] if dr else 1.0 - f[:, 0]
        for dg in (0, 1):
            wg = f[:, 1] if dg else 1.0 - f[:, 1]
            for db in (0, 1):
                wb = f[:, 2] if db else 1.0 - f[:, 2]
                index[:, k] = ((i0[:, 0] + dr) * dim + (i0[:, 1] + dg)) * dim + (i0[:, 2] + db)
                weight[:, k] = wr * wg * wb
                k += 1
    return index, weight


def lut_apply(lut, rgb):
    """Map colours through the LUT by trilinear interpolation.

    Evaluated as ``c + trilinear(lattice - identity)``: trilinear interpolation
    reproduces the identity lattice exactly, so this equals the plain
    interpolation while making the identity LUT an exact no-op.
    Accepts (3,), (n, 3) or (H, W, 3) input and returns the same shape.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    shape = rgb.shape
    flat = np.clip(rgb.reshape(-1, 3), 0.0, 1.0)
    index, weight = corner_weights(flat, lut.dim)
    residual = (lut.lattice - identity_lattice(lut.dim)).reshape(-1, 3)
    out = np.empty_like(flat)
    kernels.lut_apply_residual(residual, flat, index, weight, out)
    return out.reshape(shape)


def lut_overflow_penalty(lut):
    """Mean squared excursion of lattice entries outside [0, 1]."""
    v = np.asarray(lut.lattice if isinstance(lut, Lut3D) else lut, dtype=np.float64)
    over = np.maximum(v - 1.0, 0.0)
    under = np.maximum(-v, 0.0)
    return float(np.mean(over * over + under * under))


def lut_interp(lut_m, lut_n, k, m, n):
    """Linear blend of two keyframe LUTs for frame ``k`` between frames ``m`` and ``n``.

    Entries where both keyframes agree are copied exactly, so a static
    sequence yields bitwise-identical LUTs.
    """
    if lut_m.dim != lut_n.dim:
        raise ValueError("LUT dimensions differ")
    if not m < n:
        raise ValueError("keyframes must satisfy m < n")
    if not m <= k <= n:
        raise ValueError(f"frame {k} outside keyframe range [{m}, {n}]")
    t = (k - m) / (n - m)
    a, b = lut_m.lattice, lut_n.lattice
    blend = (1.0 - t) * a + t * b
    return Lut3D(np.where(a == b, a, blend))


# --------------------------------------------------------------- .cube I/O

def export_cube(lut, path, title="hinet"):
    """Write an Adobe/Resolve style ``.cube`` file (red index varies fastest)."""
    d = lut.dim
    lines = [f'TITLE "{title}"', f"LUT_3D_SIZE {d}", "DOMAIN_MIN 0.0 0.0 0.0", "DOMAIN_MAX 1.0 1.0 1.0"]
    for b in range(d):
        for g in range(d):
            for r in range(d):
                v = lut.lattice[r, g, b]
                lines.append(f"{v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_cube(path):
    size = None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key = line.split()[0]
            if key == "LUT_3D_SIZE":
                try:
                    size = int(line.split()[1])
                except (IndexError, ValueError):
                    raise CubeParseError(f"{path}:{lineno}: bad LUT_3D_SIZE line") from None
                if not 2 <= size <= MAX_DIM:
                    raise CubeParseError(f"{path}:{lineno}: unsupported LUT size {size}")
                continue
            if key == "LUT_1D_SIZE":
                raise CubeParseError(f"{path}:{lineno}: 1D LUTs are not supported")
            if key in ("TITLE", "DOMAIN_MIN", "DOMAIN_MAX", "LUT_3D_INPUT_RANGE"):
                if key == "DOMAIN_MIN" and [float(v) for v in line.split()[1:]] != [0.0] * 3:
                    raise CubeParseError(f"{path}:{lineno}: only the [0, 1] domain is supported")
                if key == "DOMAIN_MAX" and [float(v) for v in line.split()[1:]] != [1.0] * 3:
                    raise CubeParseError(f"{path}:{lineno}: only the [0, 1] domain is supported")
                continue
            if size is None:
                raise CubeParseError(f"{path}:{lineno}: data before LUT_3D_SIZE header")
            parts = line.split()
            try:
                values = [float(p) for p in parts]
            except ValueError:
                raise CubeParseError(f"{path}:{lineno}: unrecognised line {line!r}") from None
            if len(values) != 3:
                raise CubeParseError(f"{path}:{lineno}: expected 3 values, got {len(values)}")
            rows.append(values)
    if size is None:
        raise CubeParseError(f"{path}: missing LUT_3D_SIZE header")
    if len(rows) != size ** 3:
        raise CubeParseError(f"{path}: expected {size ** 3} entries, found {len(rows)}")
    # file order: red fastest, then green, then blue
    lattice = np.asarray(rows).reshape(size, size, size, 3).transpose(2, 1, 0, 3)
    return Lut3D(np.ascontiguousarray(lattice))
