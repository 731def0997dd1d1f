"""Point-cloud files (XYZ, ASCII PLY) and the procedural shape corpus.

Dataset layout::

    <root>/manifest.txt                 # "<category> <id> <seed>" per line
    <root>/<category>/<id>_partial.xyz
    <root>/<category>/<id>_gt.xyz
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geom
from .config import DataConfig
from .errors import ContractError, ParseError

PRIMITIVES = ("box", "sphere", "cylinder", "plane-composite")
_FMT = "%.10f"


# -- file formats ----------------------------------------------------------------


def write_xyz(path, points) -> None:
    pts = geom._coords(points, "points")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for p in pts:
            fh.write(f"{_FMT % p[0]} {_FMT % p[1]} {_FMT % p[2]}\n")


def _parse_coords(line: str, path, lineno: int) -> list[float]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"expected 3 coordinates, got {len(parts)}", path=path, line=lineno)
    try:
        vals = [float(x) for x in parts]
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {line.strip()!r}", path=path, line=lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", path=path, line=lineno)
    return vals


def read_xyz(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file: a cloud needs at least one point", path=path)
    pts = [_parse_coords(line, path, i) for i, line in enumerate(lines, start=1)]
    return np.array(pts, dtype=np.float64)


_PLY_PROPS = ("x", "y", "z")


def write_ply(path, points) -> None:
    pts = geom._coords(points, "points")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        for name in _PLY_PROPS:
            fh.write(f"property float {name}\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write(f"{_FMT % p[0]} {_FMT % p[1]} {_FMT % p[2]}\n")


def read_ply(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", path=path)
    it = iter(enumerate(lines, start=1))

    def header_line():
        for lineno, line in it:
            if line.startswith("comment"):
                continue
            return lineno, line.strip()
        raise ParseError("truncated header", path=path, line=len(lines))

    lineno, line = header_line()
    if line != "ply":
        raise ParseError(f"expected 'ply', got {line!r}", path=path, line=lineno)
    lineno, line = header_line()
    if line != "format ascii 1.0":
        raise ParseError(f"expected 'format ascii 1.0', got {line!r}", path=path, line=lineno)
    lineno, line = header_line()
    parts = line.split()
    if len(parts) != 3 or parts[:2] != ["element", "vertex"]:
        raise ParseError(f"expected 'element vertex N', got {line!r}", path=path, line=lineno)
    try:
        n = int(parts[2])
    except ValueError:
        raise ParseError(f"bad vertex count {parts[2]!r}", path=path, line=lineno) from None
    if n < 1:
        raise ParseError("a cloud needs at least one vertex", path=path, line=lineno)
    for expected in _PLY_PROPS:
        lineno, line = header_line()
        parts = line.split()
        if len(parts) != 3 or parts[0] != "property" or parts[1] not in ("float", "double"):
            raise ParseError(f"expected 'property float {expected}', got {line!r}", path=path, line=lineno)
        if parts[2] != expected:
            raise ParseError(
                f"property {parts[2]!r} where {expected!r} was expected", path=path, line=lineno
            )
    lineno, line = header_line()
    if line != "end_header":
        raise ParseError(f"expected 'end_header', got {line!r}", path=path, line=lineno)
    body = lines[lineno:]
    if len(body) < n:
        raise ParseError(f"expected {n} vertices, found {len(body)}", path=path, line=len(lines))
    pts = [_parse_coords(body[i], path, lineno + 1 + i) for i in range(n)]
    extra = [i for i, line in enumerate(body[n:]) if line.strip()]
    if extra:
        raise ParseError("unexpected data after vertices", path=path, line=lineno + n + 1 + extra[0])
    return np.array(pts, dtype=np.float64)


def read_cloud(path) -> np.ndarray:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_cloud(path, points) -> None:
    if str(path).lower().endswith(".ply"):
        write_ply(path, points)
    else:
        write_xyz(path, points)


# -- shapes ----------------------------------------------------------------------------


@dataclass
class ShapeSpec:
    primitive: str
    params: dict = field(default_factory=dict)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    category: str | None = None

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ContractError(f"unknown primitive {self.primitive!r}; expected one of {PRIMITIVES}")
        if self.category is None:
            self.category = self.primitive


def _area_choice(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _sample_box(params, n, rng):
    size = np.asarray(params.get("size", (1.0, 1.0, 1.0)), dtype=np.float64)
    if size.shape != (3,) or np.any(size <= 0):
        raise ContractError(f"box size must be three positive extents, got {size}")
    half = size / 2
    areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2
    face = _area_choice(rng, areas, n)
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_sphere(params, n, rng):
    radius = float(params.get("radius", 1.0))
    if radius <= 0:
        raise ContractError(f"sphere radius must be positive, got {radius}")
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cylinder(params, n, rng):
    radius = float(params.get("radius", 0.5))
    height = float(params.get("height", 1.0))
    if radius <= 0 or height <= 0:
        raise ContractError(f"cylinder needs positive radius and height, got {radius}, {height}")
    areas = [2 * np.pi * radius * height, np.pi * radius**2, np.pi * radius**2]
    part = _area_choice(rng, areas, n)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n), np.where(part == 1, height / 2, -height / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_panels(params, n, rng):
    panels = params.get("panels")
    if not panels:
        raise ContractError("plane-composite needs at least one panel")
    centers, us, vs, areas = [], [], [], []
    for center, u, v in panels:
        u, v = np.asarray(u, float), np.asarray(v, float)
        area = 4 * np.linalg.norm(np.cross(u, v))
        if area <= 0:
            raise ContractError("plane-composite panel has zero area")
        centers.append(np.asarray(center, float))
        us.append(u)
        vs.append(v)
        areas.append(area)
    which = _area_choice(rng, areas, n)
    a = rng.uniform(-1, 1, (n, 1))
    b = rng.uniform(-1, 1, (n, 1))
    return np.array(centers)[which] + a * np.array(us)[which] + b * np.array(vs)[which]


_SAMPLERS = {
    "box": _sample_box,
    "sphere": _sample_sphere,
    "cylinder": _sample_cylinder,
    "plane-composite": _sample_panels,
}


def sample_surface(shape: ShapeSpec, n: int, seed) -> np.ndarray:
    """``n`` points uniform by area on the posed surface of ``shape``."""
    if n < 1:
        raise ContractError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    local = _SAMPLERS[shape.primitive](shape.params, n, rng)
    return local @ np.asarray(shape.rotation, float).T + np.asarray(shape.translation, float)


def normalize(points: np.ndarray) -> np.ndarray:
    """Centre the bounding box at the origin and scale into [-0.5, 0.5]^3."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    centred = points - (lo + hi) / 2
    extent = np.abs(centred).max()
    if extent == 0:
        raise ContractError("cannot normalize a cloud with zero extent")
    return centred * (0.5 / extent)


def random_shape_spec(category: str, rng: np.random.Generator) -> ShapeSpec:
    """Random dimensions and pose for one primitive category."""
    if category == "box":
        params = {"size": tuple(rng.uniform(0.3, 1.0, 3))}
    elif category == "sphere":
        params = {"radius": float(rng.uniform(0.3, 0.5))}
    elif category == "cylinder":
        params = {"radius": float(rng.uniform(0.15, 0.4)), "height": float(rng.uniform(0.4, 1.0))}
    elif category == "plane-composite":
        # a table-like slab on a support panel plus an optional back panel
        w, d = rng.uniform(0.3, 0.5, 2)
        h = rng.uniform(0.2, 0.5)
        panels = [
            ((0.0, 0.0, h), (w, 0.0, 0.0), (0.0, d, 0.0)),
            ((0.0, 0.0, h / 2), (w * rng.uniform(0.2, 0.9), 0.0, 0.0), (0.0, 0.0, h / 2)),
        ]
        if rng.uniform() < 0.5:
            panels.append(((0.0, -d, h + h / 2), (w, 0.0, 0.0), (0.0, 0.0, h / 2)))
        params = {"panels": panels}
    else:
        raise ContractError(f"unknown category {category!r}; expected one of {PRIMITIVES}")
    rot = Rotation.random(random_state=rng).as_matrix()
    trans = rng.uniform(-0.2, 0.2, 3)
    return ShapeSpec(category, params, rot, trans, category)


def crop_by_plane(gt: np.ndarray, anchor, normal, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Drop points with ``(p - anchor) . normal > 0``; fps or pad the rest to ``n_points``."""
    kept = gt[(gt - np.asarray(anchor)) @ np.asarray(normal) <= 0]
    return fit_count(kept, n_points, rng)


def fit_count(points: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) == 0:
        raise ContractError("no points left to sample from")
    if len(points) >= n_points:
        return points[geom.fps(points, n_points, start=0)]
    extra = rng.choice(len(points), size=n_points - len(points), replace=True)
    return np.concatenate([points, points[extra]])


def choose_cut(
    gt: np.ndarray,
    rng: np.random.Generator,
    keep_range: tuple[float, float] = (0.4, 0.7),
    max_tries: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Random occluding plane ``(anchor, unit normal)`` through a random surface point.

    Planes are redrawn until the kept fraction lies in ``keep_range``; after
    ``max_tries`` the last normal is kept and the plane is shifted so the kept
    fraction is the middle of the range.
    """
    lo, hi = keep_range
    for _ in range(max_tries):
        anchor = gt[rng.integers(len(gt))]
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        frac = np.mean((gt - anchor) @ normal <= 0)
        if lo <= frac <= hi:
            return anchor, normal
    offset = np.quantile(gt @ normal, (lo + hi) / 2)
    return offset * normal, normal


def make_partial(
    gt: np.ndarray,
    n_points: int,
    seed,
    keep_range: tuple[float, float] = (0.4, 0.7),
    max_tries: int = 200,
) -> np.ndarray:
    """Half-space occlusion of ``gt`` (see :func:`choose_cut`), resampled to ``n_points``."""
    rng = np.random.default_rng(seed)
    gt = geom._coords(gt, "gt")
    anchor, normal = choose_cut(gt, rng, keep_range, max_tries)
    return crop_by_plane(gt, anchor, normal, n_points, rng)


# -- dataset ------------------------------------------------------------------------------


@dataclass
class DatasetEntry:
    partial: np.ndarray
    gt: np.ndarray
    category: str
    id: str
    seed: int = 0


def entry_seed(master_seed: int, category_index: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, category_index, index]).generate_state(1)[0])


def make_entry(category: str, ident: str, seed: int, cfg: DataConfig) -> DatasetEntry:
    rng = np.random.default_rng(seed)
    shape = random_shape_spec(category, rng)
    gt = normalize(sample_surface(shape, cfg.gt_points, rng))
    partial = make_partial(gt, cfg.partial_points, rng)
    return DatasetEntry(partial, gt, category, ident, seed)


def generate_dataset(root, cfg: DataConfig, master_seed: int) -> list[DatasetEntry]:
    """Write the corpus to ``root``; returns the entries in manifest order."""
    cfg.validate()
    root = Path(root)
    entries = []
    for ci, category in enumerate(cfg.categories):
        for i in range(cfg.shapes_per_category):
            seed = entry_seed(master_seed, ci, i)
            entries.append(make_entry(category, f"{i:04d}", seed, cfg))
    write_dataset(root, entries)
    return entries


def write_dataset(root, entries: list[DatasetEntry]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for e in entries:
        d = root / e.category
        d.mkdir(exist_ok=True)
        write_xyz(d / f"{e.id}_partial.xyz", e.partial)
        write_xyz(d / f"{e.id}_gt.xyz", e.gt)
    tmp = root / "manifest.txt.tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.category} {e.id} {e.seed}\n")
    os.replace(tmp, root / "manifest.txt")


def read_manifest(root) -> list[tuple[str, str, int]]:
    path = Path(root) / "manifest.txt"
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError("expected '<category> <id> <seed>'", path=path, line=lineno)
            try:
                rows.append((parts[0], parts[1], int(parts[2])))
            except ValueError:
                raise ParseError(f"bad seed {parts[2]!r}", path=path, line=lineno) from None
    return rows


def load_dataset(root) -> list[DatasetEntry]:
    root = Path(root)
    entries = []
    for category, ident, seed in read_manifest(root):
        d = root / category
        entries.append(
            DatasetEntry(
                read_xyz(d / f"{ident}_partial.xyz"), read_xyz(d / f"{ident}_gt.xyz"), category, ident, seed
            )
        )
    return entries


def split_dataset(entries: list[DatasetEntry], train_fraction: float = 0.8):
    """Per-category split in manifest order: the first ``train_fraction`` train, the rest test."""
    by_cat: dict[str, list[DatasetEntry]] = {}
    for e in entries:
        by_cat.setdefault(e.category, []).append(e)
    train, test = [], []
    for items in by_cat.values():
        cut = int(round(train_fraction * len(items)))
        train.extend(items[:cut])
        test.extend(items[cut:])
    return train, test
