"""Synthetic forgery generation: splice / copy-move composites with
rotation, scale and optional boundary blur, plus toy source imagery whose
tampered regions carry distinct noise statistics.

Geometry convention: coordinates are (row, col) with pixel centers at
integer positions. The object is rotated by ``rotation`` degrees
counter-clockwise and scaled about its bounding-box center, then that
center is moved to ``paste``. Cosine/sine values within 1e-9 of 0 or +-1
snap exactly so axis-aligned content survives 90-degree multiples
unchanged.
"""
from __future__ import annotations

import csv
import math
import os

import numpy as np

from .morphology import (DEFAULT_SHAPE, DEFAULT_SIZE, dilate, edge_gt, erode,
                         structuring_element)
from .ppm import read_ppm, write_mask, write_ppm

KINDS = ("splice", "copy-move")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate padding; (H, W) or (H, W, C)."""
    k = gaussian_kernel_1d(sigma)
    if k.size == 1:
        return np.asarray(image, dtype=np.float64).copy()
    r = k.size // 2
    out = np.asarray(image, dtype=np.float64)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out[:, :, 0] if squeeze else out


def quantize(image: np.ndarray, levels: int) -> np.ndarray:
    """Requantize uint8 samples into ``levels`` uniform bins (bin centers)."""
    if not 2 <= levels <= 256:
        raise ValueError(f"levels must be in [2, 256], got {levels}")
    v = np.asarray(image, dtype=np.float64)
    bins = np.minimum(np.floor(v / 256.0 * levels), levels - 1)
    centers = (bins + 0.5) * (256.0 / levels)
    return np.clip(centers, 0, 255).astype(np.uint8)


def _snap(value: float) -> float:
    for target in (0.0, 1.0, -1.0):
        if abs(value - target) < 1e-9:
            return target
    return value


def _bilinear(plane: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample at float (row, col) positions; outside the plane reads 0."""
    h, w = plane.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = None
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = plane[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
        vals = np.where(valid[..., None] if plane.ndim == 3 else valid, vals, 0.0)
        term = (wt[..., None] if plane.ndim == 3 else wt) * vals
        out = term if out is None else out + term
    return out


def compose_forgery(dest: np.ndarray, source: np.ndarray, obj_mask: np.ndarray, *,
                    rotation: float = 0.0, scale: float = 1.0,
                    paste: "tuple[float, float] | None" = None,
                    blur_sigma: float = 0.0):
    """Paste the object cut from ``source`` by ``obj_mask`` onto ``dest``.

    Returns (composite uint8, region mask bool). ``paste`` is the (row, col)
    destination of the object's bbox center; None keeps it in place.
    Copy-move is just ``source is dest``.
    """
    dest = np.asarray(dest)
    source = np.asarray(source)
    obj_mask = np.asarray(obj_mask, dtype=bool)
    if dest.ndim != 3 or source.ndim != 3:
        raise ValueError("dest and source must be (H, W, 3) images")
    if obj_mask.shape != source.shape[:2]:
        raise ValueError(f"object mask {obj_mask.shape} does not match source {source.shape[:2]}")
    if not obj_mask.any():
        raise ValueError("object mask is empty")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")

    rows, cols = np.nonzero(obj_mask)
    center = ((rows.min() + rows.max()) / 2.0, (cols.min() + cols.max()) / 2.0)
    if paste is None:
        paste = center
    theta = math.radians(rotation)
    cos = _snap(math.cos(theta))
    sin = _snap(math.sin(theta))

    # Forward-map the object bbox corners to clip a destination window.
    h, w = dest.shape[:2]
    corners = []
    for r in (rows.min() - 1, rows.max() + 1):
        for c in (cols.min() - 1, cols.max() + 1):
            dr, dc = r - center[0], c - center[1]
            corners.append((paste[0] + scale * (cos * dr - sin * dc),
                            paste[1] + scale * (sin * dr + cos * dc)))
    rlo = max(0, int(math.floor(min(p[0] for p in corners))))
    rhi = min(h - 1, int(math.ceil(max(p[0] for p in corners))))
    clo = max(0, int(math.floor(min(p[1] for p in corners))))
    chi = min(w - 1, int(math.ceil(max(p[1] for p in corners))))
    if rlo > rhi or clo > chi:
        raise ValueError("paste position places the object fully outside the canvas")

    gr, gc = np.meshgrid(np.arange(rlo, rhi + 1, dtype=np.float64),
                         np.arange(clo, chi + 1, dtype=np.float64), indexing="ij")
    # Inverse map back into source coordinates.
    dr = (gr - paste[0]) / scale
    dc = (gc - paste[1]) / scale
    sr = center[0] + cos * dr + sin * dc
    sc = center[1] - sin * dr + cos * dc

    alpha = _bilinear(obj_mask.astype(np.float64), sr, sc)
    patch = _bilinear(source.astype(np.float64), sr, sc)

    out = dest.astype(np.float64).copy()
    window = out[rlo:rhi + 1, clo:chi + 1]
    out[rlo:rhi + 1, clo:chi + 1] = alpha[:, :, None] * patch + (1 - alpha[:, :, None]) * window

    mask = np.zeros((h, w), dtype=bool)
    mask[rlo:rhi + 1, clo:chi + 1] = alpha >= 0.5
    if not mask.any():
        raise ValueError("paste position places the object fully outside the canvas")

    if blur_sigma > 0:
        se = structuring_element("rect", 3)
        band = dilate(mask, se) & ~erode(mask, se)
        if band.any():
            blurred = gaussian_blur(out, blur_sigma)
            out[band] = blurred[band]
    return np.clip(np.round(out), 0, 255).astype(np.uint8), mask


def _low_frequency_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth field in [0, 1] from a handful of long-wavelength sinusoids."""
    gr, gc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.zeros((size, size))
    for _ in range(4):
        fr, fc = rng.uniform(-1.5, 1.5, size=2) / size
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fr * gr + fc * gc) + phase)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def toy_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-frequency background; near-zero high-pass residual."""
    base = rng.uniform(40, 210, size=3)
    field = _low_frequency_field(rng, size)
    img = base[None, None, :] + (field[:, :, None] - 0.5) * rng.uniform(30, 80)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def toy_object_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """High-frequency texture whose noise residual differs from backgrounds."""
    base = rng.uniform(40, 210, size=3)
    noise = rng.normal(0.0, rng.uniform(12, 30), size=(size, size, 1))
    gr, gc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    period = rng.integers(2, 5)
    grid = ((gr // period + gc // period) % 2).astype(np.float64) - 0.5
    img = base[None, None, :] + noise + grid[:, :, None] * rng.uniform(10, 40)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def toy_object_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random filled ellipse or rectangle covering a modest area."""
    mask = np.zeros((size, size), dtype=bool)
    half = rng.integers(size // 8, size // 4 + 1, size=2)
    cr = int(rng.integers(half[0], size - half[0]))
    cc = int(rng.integers(half[1], size - half[1]))
    if rng.random() < 0.5:
        mask[cr - half[0]:cr + half[0] + 1, cc - half[1]:cc + half[1] + 1] = True
    else:
        gr, gc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        mask[((gr - cr) / half[0]) ** 2 + ((gc - cc) / half[1]) ** 2 <= 1.0] = True
    return mask


def _list_images(directory) -> list:
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ppm"))
    return [os.path.join(directory, n) for n in names]


def _list_masks(directory) -> list:
    names = sorted(n for n in os.listdir(directory) if n.endswith(".pgm"))
    return [os.path.join(directory, n) for n in names]


def generate_dataset(out_dir, count: int, *, size: int = 64, seed: int = 0,
                     image_paths=None, object_paths=None,
                     rotation_range=(-30.0, 30.0), scale_range=(0.7, 1.3),
                     blur_sigma_range=(0.0, 1.0), splice_prob: float = 0.75):
    """Write ``count`` forgeries under ``out_dir``: images/, masks/,
    manifest.csv (image_path,mask_path) and gen_params.csv.

    Without ``image_paths`` the sources are synthesized toy scenes. Sample i
    draws everything from a generator seeded with ``seed + i``, so a fixed
    seed reproduces the dataset byte for byte.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if image_paths is not None and len(image_paths) == 0:
        raise ValueError("image list is empty")
    if object_paths is not None and len(object_paths) == 0:
        raise ValueError("object mask list is empty")
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    manifest_rows = []
    param_rows = []
    for i in range(count):
        rng = np.random.default_rng(seed + i)
        kind = "splice" if rng.random() < splice_prob else "copy-move"
        rotation = float(rng.uniform(*rotation_range))
        scale = float(rng.uniform(*scale_range))
        sigma = float(rng.uniform(*blur_sigma_range))

        if image_paths is None:
            dest = toy_background(rng, size)
            src_name = "toy"
            if kind == "splice":
                source = toy_object_texture(rng, size)
                obj_toy = toy_object_mask(rng, size)
            else:
                # Copy-move within one toy scene: embed a textured object
                # first, then move a copy of it, so the tampered region
                # differs from its smooth surroundings.
                texture = toy_object_texture(rng, size)
                obj_toy = toy_object_mask(rng, size)
                dest[obj_toy] = texture[obj_toy]
                source = dest
        else:
            dest_path = image_paths[int(rng.integers(len(image_paths)))]
            dest = read_ppm(dest_path)
            if kind == "splice":
                src_path = image_paths[int(rng.integers(len(image_paths)))]
                source = read_ppm(src_path)
                src_name = os.path.basename(src_path)
            else:
                source = dest
                src_name = os.path.basename(dest_path)
        if object_paths is not None:
            from .ppm import read_mask
            obj_path = object_paths[int(rng.integers(len(object_paths)))]
            obj = read_mask(obj_path)
            if obj.shape != source.shape[:2]:
                raise ValueError(f"{obj_path}: object mask {obj.shape} does not "
                                 f"match source {source.shape[:2]}")
        elif image_paths is None:
            obj = obj_toy
        else:
            obj = toy_object_mask(rng, source.shape[0])
        h, w = dest.shape[:2]
        paste = (float(rng.uniform(h * 0.2, h * 0.8)), float(rng.uniform(w * 0.2, w * 0.8)))

        image, mask = compose_forgery(dest, source, obj, rotation=rotation,
                                      scale=scale, paste=paste, blur_sigma=sigma)
        img_path = os.path.join("images", f"{i:05d}.ppm")
        mask_path = os.path.join("masks", f"{i:05d}.pgm")
        write_ppm(os.path.join(out_dir, img_path), image)
        write_mask(os.path.join(out_dir, mask_path), mask)
        manifest_rows.append((img_path, mask_path))
        param_rows.append((i, seed + i, kind, f"{rotation:.6f}", f"{scale:.6f}",
                           f"{paste[0]:.6f}", f"{paste[1]:.6f}", f"{sigma:.6f}", src_name))

    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "mask_path"])
        writer.writerows(manifest_rows)
    with open(os.path.join(out_dir, "gen_params.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "seed", "kind", "rotation_deg", "scale",
                        "paste_row", "paste_col", "blur_sigma", "source"])
        writer.writerows(param_rows)
    return manifest


def attach_edges(manifest_path, *, shape: str = DEFAULT_SHAPE,
                 size: int = DEFAULT_SIZE, out_dir=None):
    """Derive edge masks for every manifest row and write an updated manifest
    with an edge_path column. ``out_dir`` defaults to the manifest directory;
    a different directory gets a manifest whose paths reach back to the
    originals relatively."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    out_dir = base if out_dir is None else os.path.abspath(out_dir)
    rows = read_manifest(manifest_path)
    se = structuring_element(shape, size)
    os.makedirs(os.path.join(out_dir, "edges"), exist_ok=True)

    from .ppm import read_mask
    new_rows = []
    for i, row in enumerate(rows):
        mask_file = os.path.join(base, row["mask_path"])
        if not os.path.exists(mask_file):
            raise FileNotFoundError(
                f"manifest row {i} ({row['image_path']}): mask file {mask_file} is missing")
        edge = edge_gt(read_mask(mask_file), se)
        name = os.path.splitext(os.path.basename(row["mask_path"]))[0] + ".pgm"
        edge_rel = os.path.join("edges", name)
        write_mask(os.path.join(out_dir, edge_rel), edge)
        new = {"image_path": os.path.relpath(os.path.join(base, row["image_path"]), out_dir),
               "mask_path": os.path.relpath(mask_file, out_dir),
               "edge_path": edge_rel}
        new_rows.append(new)
    out_manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(out_manifest, new_rows)
    return out_manifest


def read_manifest(path) -> list:
    """Rows as dicts with keys image_path, mask_path and optionally edge_path."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image_path" not in reader.fieldnames \
                or "mask_path" not in reader.fieldnames:
            raise ValueError(f"{path}: manifest needs image_path,mask_path columns")
        return list(reader)


def write_manifest(path, rows) -> None:
    fields = ["image_path", "mask_path"]
    if any("edge_path" in r for r in rows):
        fields.append("edge_path")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
