"""Array files, geometry sidecars, logs and PNG export."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .tomo import Geometry, Sinogram, Volume

ARRAY_MAGIC = b"DINRT001"


def write_array(path, arr: np.ndarray) -> None:
    """magic, u8 rank, rank x u32 dims (LE), float32 LE row-major payload."""
    arr = np.ascontiguousarray(arr)
    head = ARRAY_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype("<f4").tobytes())


def read_array(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != ARRAY_MAGIC:
        raise ValueError(f"{path}: not a DINRT001 array file")
    rank = buf[8]
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    off = 9 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 4 * n:
        raise ValueError(f"{path}: payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float64)


def write_geometry(path, geom: Geometry) -> None:
    lines = [
        f"n_views={geom.n_views}",
        f"n_detectors={geom.n_detectors}",
        f"detector_spacing={geom.detector_spacing!r}",
        f"image_size={geom.image_size[0]},{geom.image_size[1]}",
        "angles=" + ",".join(repr(float(a)) for a in geom.angles),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_geometry(path) -> Geometry:
    kv = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        angles = np.array([float(a) for a in kv["angles"].split(",")])
        size = tuple(int(s) for s in kv["image_size"].split(","))
        geom = Geometry(angles, int(kv["n_detectors"]), size, float(kv.get("detector_spacing", 1.0)))
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
    if "n_views" in kv and int(kv["n_views"]) != geom.n_views:
        raise ValueError(f"{path}: n_views disagrees with the angle list")
    return geom


def save_volume(path, vol: Volume) -> None:
    write_array(path, vol.data)


def load_volume(path) -> Volume:
    return Volume(read_array(path))


def save_sinogram(path, sino: Sinogram) -> Path:
    """Writes the array and a ``<path>.geom`` sidecar; returns the sidecar path."""
    path = Path(path)
    write_array(path, sino.data)
    side = path.with_name(path.name + ".geom")
    write_geometry(side, sino.geometry)
    return side


def load_sinogram(path) -> Sinogram:
    path = Path(path)
    return Sinogram(read_geometry(path.with_name(path.name + ".geom")), read_array(path))


def quantize(x: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Clamp to [lo, hi] and map linearly onto 0..255."""
    x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
    return np.round((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def tile_slices(vol: np.ndarray) -> np.ndarray:
    vol = np.asarray(vol)
    return vol if vol.ndim == 2 else np.concatenate(list(vol), axis=1)


def save_png(path, vol: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """8-bit grayscale PNG, slices side by side; returns the quantized image written."""
    from PIL import Image

    img = quantize(tile_slices(vol), lo, hi)
    Image.fromarray(img, mode="L").save(path)
    return img


def load_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"))


def write_log_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "adapt_loss", "data_term", "prox_term", "psnr_if_truth"])
        for e in log:
            w.writerow([e.t, f"{e.adapt_loss:.8g}", f"{e.data_term:.8g}", f"{e.prox_term:.8g}",
                        "" if e.psnr is None else f"{e.psnr:.4f}"])


def write_kv(path, d: dict, prefix: str = "") -> None:
    """Flat key=value dump of a (nested) dict, keys sorted."""
    lines = []

    def walk(obj, pre):
        for k in sorted(obj):
            v = obj[k]
            key = f"{pre}{k}"
            if isinstance(v, dict):
                walk(v, key + ".")
            else:
                lines.append(f"{key}={v}")

    walk(d, prefix)
    Path(path).write_text("\n".join(lines) + "\n")
