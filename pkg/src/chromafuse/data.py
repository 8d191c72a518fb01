"""Image ingestion, PNG persistence, manifests, and synthetic pair generation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] image as an 8-bit PNG with round-half-up quantization.

    Accepts (H, W), (H, W, 1) gray or (H, W, 3) color arrays.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"cannot save image of shape {np.shape(image)}")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError("image values must lie in [0, 1]")
    quantized = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG into [0, 1]; (H, W) for gray, (H, W, 3) for color."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise OSError(f"image {path} is not 8-bit")
    return arr.astype(np.float64) / 255.0


def load_pair(vis_path: str | Path, ir_path: str | Path) -> np.ndarray:
    """Load a visible+infrared pair into one (H, W, 4) array in [0, 1].

    The visible file must decode to 3 channels. The infrared file may be
    single-channel, or 3-channel with identical planes (collapsed to one).
    """
    vis = load_image(vis_path)
    ir = load_image(ir_path)
    if vis.ndim != 3 or vis.shape[2] != 3:
        raise ValueError(f"visible image {vis_path} must have 3 channels, got shape {vis.shape}")
    if ir.ndim == 3:
        if ir.shape[2] == 3 and np.array_equal(ir[:, :, 0], ir[:, :, 1]) and np.array_equal(ir[:, :, 0], ir[:, :, 2]):
            ir = ir[:, :, 0]
        else:
            raise ValueError(f"infrared image {ir_path} must be single-channel or three identical channels")
    if vis.shape[:2] != ir.shape[:2]:
        raise ValueError(
            f"dimension mismatch: {vis_path} is {vis.shape[:2]}, {ir_path} is {ir.shape[:2]}"
        )
    return np.concatenate([vis, ir[:, :, None]], axis=2)


@dataclass(frozen=True)
class PairEntry:
    pair_id: str
    vis_path: Path
    ir_path: Path


@dataclass
class DatasetManifest:
    """Pair listing for one split; synthetic manifests remember their seed."""

    entries: list[PairEntry] = field(default_factory=list)
    split: str = "train"
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def load_pairs(self) -> list[np.ndarray]:
        return [load_pair(e.vis_path, e.ir_path) for e in self.entries]


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{e.pair_id}\t{e.vis_path}\t{e.ir_path}" for e in manifest.entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path, split: str = "train") -> DatasetManifest:
    path = Path(path)
    entries = []
    seen = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{line_no}: expected 'id<TAB>visible<TAB>infrared'")
        pair_id, vis, ir = parts
        if pair_id in seen:
            raise ValueError(f"{path}:{line_no}: duplicate pair id {pair_id!r}")
        seen.add(pair_id)
        vis_path = (path.parent / vis) if not Path(vis).is_absolute() else Path(vis)
        ir_path = (path.parent / ir) if not Path(ir).is_absolute() else Path(ir)
        for p in (vis_path, ir_path):
            if not p.exists():
                raise FileNotFoundError(f"{path}:{line_no}: missing image file {p}")
        entries.append(PairEntry(pair_id, vis_path, ir_path))
    return DatasetManifest(entries=entries, split=split)


def mask_path_for(entry: PairEntry) -> Path:
    """Conventional location of the thermal mask written by gen_synthetic."""
    return entry.ir_path.parent.parent / "masks" / f"{entry.pair_id}.png"


# -- synthetic scenes ----------------------------------------------------------

MIN_COMPLEMENTARY_FRACTION = 0.01
COMPLEMENTARY_MARGIN = 0.3

_LUMA = np.array([0.299, 0.587, 0.114])


def _bilinear_background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    corners = rng.uniform(0.15, 0.95, size=(2, 2, 3))
    ys = np.linspace(0.0, 1.0, h)[:, None, None]
    xs = np.linspace(0.0, 1.0, w)[None, :, None]
    top = corners[0, 0] * (1 - xs) + corners[0, 1] * xs
    bottom = corners[1, 0] * (1 - xs) + corners[1, 1] * xs
    return top * (1 - ys) + bottom * ys


def _disc_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def _rect_mask(h: int, w: int, top: int, left: int, rh: int, rw: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[top : top + rh, left : left + rw] = True
    return mask


def _binomial_smooth(image: np.ndarray) -> np.ndarray:
    """One [1,2,1]/4 pass per spatial axis (edge-padded); keeps scenes
    sensor-like instead of aliased-hard."""
    tail = [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, [(1, 1), (0, 0)] + tail, mode="edge")
    out = 0.25 * (padded[:-2] + 2.0 * padded[1:-1] + padded[2:])
    padded = np.pad(out, [(0, 0), (1, 1)] + tail, mode="edge")
    return 0.25 * (padded[:, :-2] + 2.0 * padded[:, 1:-1] + padded[:, 2:])


def synthesize_pair(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One deterministic scene: (visible (H, W, 3), infrared (H, W), thermal mask).

    The visible image is a colored gradient with a few shapes and one
    darkened region; the infrared image is dark except for hot blobs, one
    of which sits inside the dark region so the sources are guaranteed to
    carry complementary information.
    """
    vis = _bilinear_background(h, w, rng)
    for _ in range(int(rng.integers(1, 3))):
        color = rng.uniform(0.1, 1.0, size=3)
        if rng.random() < 0.5:
            rh, rw = int(rng.integers(h // 6, h // 2)), int(rng.integers(w // 6, w // 2))
            shape = _rect_mask(h, w, int(rng.integers(0, h - rh)), int(rng.integers(0, w - rw)), rh, rw)
        else:
            r = float(rng.uniform(min(h, w) / 8, min(h, w) / 4))
            shape = _disc_mask(h, w, float(rng.uniform(0, h)), float(rng.uniform(0, w)), r)
        vis[shape] = 0.75 * color + 0.25 * vis[shape]

    # darkened region of the visible scene; the guaranteed hot blob lives here
    sh, sw = max(h // 3, 6), max(w // 3, 6)
    stop = int(rng.integers(0, h - sh + 1))
    sleft = int(rng.integers(0, w - sw + 1))
    shadow = _rect_mask(h, w, stop, sleft, sh, sw)
    vis[shadow] *= 0.2
    vis = np.clip(vis, 0.0, 1.0)

    ir = 0.05 + 0.1 * np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    mask = np.zeros((h, w), dtype=bool)
    r = max(2.0, min(h, w) / 8)
    blob = _disc_mask(h, w, stop + sh / 2, sleft + sw / 2, r)
    blobs = [blob]
    if rng.random() < 0.7:
        blobs.append(_disc_mask(h, w, float(rng.uniform(0, h)), float(rng.uniform(0, w)), float(rng.uniform(2, r))))
    for b in blobs:
        ir[b] = rng.uniform(0.85, 1.0)
        mask |= b
    vis = np.clip(_binomial_smooth(vis), 0.0, 1.0)
    ir = np.clip(_binomial_smooth(ir), 0.0, 1.0)

    luma = vis @ _LUMA
    hot_fraction = float(np.mean(ir - luma >= COMPLEMENTARY_MARGIN))
    if hot_fraction < MIN_COMPLEMENTARY_FRACTION:
        # construction guarantees this never triggers, but keep the promise
        vis[mask] *= 0.1
        luma = vis @ _LUMA
        hot_fraction = float(np.mean(ir - luma >= COMPLEMENTARY_MARGIN))
    assert hot_fraction >= MIN_COMPLEMENTARY_FRACTION
    return vis, ir, mask


def gen_synthetic(
    count: int, h: int, w: int, seed: int, out_dir: str | Path, split: str = "train"
) -> DatasetManifest:
    """Write ``count`` synthetic pairs (plus thermal masks) under ``out_dir``.

    Layout: vis/<id>.png, ir/<id>.png, masks/<id>.png, manifest.tsv. The
    same seed always produces byte-identical files.
    """
    if h % 16 or w % 16:
        raise ValueError("height and width must be divisible by 16")
    if count < 0:
        raise ValueError("count must be >= 0")
    out_dir = Path(out_dir)
    entries = []
    # the split tag enters the stream derivation so that e.g. a test split
    # with the same seed never repeats the training scenes
    split_key = zlib.crc32(split.encode("utf-8"))
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(split_key, i)))
        vis, ir, mask = synthesize_pair(h, w, rng)
        pair_id = f"{split}{i:04d}"
        vis_path = out_dir / "vis" / f"{pair_id}.png"
        ir_path = out_dir / "ir" / f"{pair_id}.png"
        save_image(vis, vis_path)
        save_image(ir, ir_path)
        save_image(mask.astype(np.float64), out_dir / "masks" / f"{pair_id}.png")
        entries.append(PairEntry(pair_id, vis_path, ir_path))
    manifest = DatasetManifest(entries=entries, split=split, seed=seed)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
