"""Netpbm images and maps, fixation lists, dataset manifests."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import FixationSet
from .train import Dataset

MANIFEST_HEADER = "# deepfix manifest v1"
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed or out-of-range input file."""


# --- netpbm -----------------------------------------------------------------

def _read_header(data: bytes, path):
    """Parse magic, width, height, maxval; returns them and the pixel offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated netpbm header")
        tokens.append(data[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r} (expected P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric size or maxval in header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid header values {width}x{height} maxval {maxval}")
    return magic, width, height, maxval, pos + 1  # exactly one whitespace byte ends the header


def read_netpbm(path):
    """Return ``(array, maxval)``; array is (H, W) for P5 and (H, W, 3) for P6."""
    data = Path(path).read_bytes()
    magic, width, height, maxval, offset = _read_header(data, path)
    channels = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise FormatError(f"{path}: pixel data truncated")
    arr = np.frombuffer(data, dtype, count=count, offset=offset).astype(np.int64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape), maxval


def write_netpbm(path, arr, maxval):
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = "P6"
    elif arr.ndim == 2:
        magic = "P5"
    else:
        raise FormatError(f"cannot write array of shape {arr.shape} as netpbm")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"{magic}\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.clip(arr, 0, maxval).astype(dtype).tobytes())


def crop_box(height, width):
    """Centred crop ``(top, left, h8, w8)`` to the largest multiples of 8."""
    h8, w8 = height - height % 8, width - width % 8
    if h8 == 0 or w8 == 0:
        raise FormatError(f"image {width}x{height} is smaller than 8x8")
    return (height - h8) // 2, (width - w8) // 2, h8, w8


def _crop(arr, box):
    top, left, h, w = box
    return arr[..., top:top + h, left:left + w]


def load_image(path, crop=True):
    """(3, H, W) reals in [0, 1], centre-cropped to multiples of 8."""
    arr, maxval = read_netpbm(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    img = arr.transpose(2, 0, 1).astype(np.float64) / maxval
    return _crop(img, crop_box(*img.shape[1:])) if crop else img


def load_map(path, crop=True):
    """(H, W) map, min-max normalised to [0, 1] and cropped like :func:`load_image`."""
    arr, _ = read_netpbm(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    m = arr.astype(np.float64)
    lo, hi = m.min(), m.max()
    m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return _crop(m, crop_box(*m.shape)) if crop else m


def save_image(path, img):
    write_netpbm(path, np.round(np.asarray(img).transpose(1, 2, 0) * 255), 255)


def save_map(path, m, maxval=65535):
    write_netpbm(path, np.round(np.asarray(m) * maxval), maxval)


def load_fixations(path, width, height):
    """Fixations from ``x,y`` lines (``#`` starts a comment), bounds-checked."""
    pts = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'x,y', got {raw.strip()!r}")
        try:
            x, y = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer coordinate in {raw.strip()!r}") from None
        if not 0 <= x < width:
            raise FormatError(f"{path}:{lineno}: x={x} outside image width {width}")
        if not 0 <= y < height:
            raise FormatError(f"{path}:{lineno}: y={y} outside image height {height}")
        pts.append((x, y))
    return FixationSet(np.array(pts, dtype=np.int64).reshape(-1, 2), width, height)


def save_fixations(path, fix: FixationSet):
    lines = [f"# {fix.width}x{fix.height}"] + [f"{x},{y}" for x, y in fix.points]
    Path(path).write_text("\n".join(lines) + "\n")


def crop_fixations(fix: FixationSet, box):
    top, left, h, w = box
    pts = fix.points - np.array([left, top])
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    return FixationSet(pts[keep], w, h)


# --- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    split: str
    image: str
    map: str | None = None
    fixations: str | None = None


@dataclass
class DatasetManifest:
    """Dataset listing; relative paths resolve against ``root``.

    On disk: a header comment, an optional ``# seed=N`` line, then a
    tab-separated table with columns split, image, map, fixations
    (``-`` marks a missing file).
    """
    records: list = field(default_factory=list)
    root: Path = Path(".")
    seed: int | None = None

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, rel):
        return Path(self.root) / rel

    def validate(self, check_files=True):
        seen = {}
        for k, r in enumerate(self.records, start=1):
            if r.split not in SPLITS:
                raise FormatError(f"record {k}: unknown split {r.split!r}")
            if r.split == "train" and r.map is None:
                raise FormatError(f"record {k}: train record {r.image} has no ground-truth map")
            if r.image in seen and seen[r.image] != r.split:
                raise FormatError(f"record {k}: {r.image} appears in both {seen[r.image]} and {r.split}")
            seen[r.image] = r.split
            if check_files:
                for p in (r.image, r.map, r.fixations):
                    if p is not None and not self.resolve(p).exists():
                        raise FormatError(f"record {k}: missing file {p}")

    def to_text(self):
        lines = [MANIFEST_HEADER]
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        lines.append("split\timage\tmap\tfixations")
        for r in self.records:
            lines.append("\t".join([r.split, r.image, r.map or "-", r.fixations or "-"]))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text, root="."):
        seed = None
        records = []
        header_seen = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# seed="):
                    seed = int(line.split("=", 1)[1])
                continue
            cols = line.split("\t")
            if not header_seen:
                if cols != ["split", "image", "map", "fixations"]:
                    raise FormatError(f"manifest line {lineno}: expected column header")
                header_seen = True
                continue
            if len(cols) != 4:
                raise FormatError(f"manifest line {lineno}: expected 4 tab-separated fields")
            split, image, gt, fix = cols
            records.append(Record(split, image, None if gt == "-" else gt, None if fix == "-" else fix))
        return cls(records, Path(root), seed)

    @classmethod
    def read(cls, path, check_files=True):
        path = Path(path)
        manifest = cls.from_text(path.read_text(), root=path.parent)
        manifest.validate(check_files)
        return manifest


def load_split(manifest: DatasetManifest, split: str) -> Dataset:
    """Load every record of ``split`` into memory, cropping consistently."""
    recs = manifest.split(split)
    if not recs:
        raise FormatError(f"manifest has no {split!r} records")
    images, maps, fixes, ids = [], [], [], []
    for r in recs:
        full = load_image(manifest.resolve(r.image), crop=False)
        h, w = full.shape[1:]
        box = crop_box(h, w)
        images.append(_crop(full, box))
        if r.map is not None:
            m = load_map(manifest.resolve(r.map), crop=False)
            if m.shape != (h, w):
                raise FormatError(f"{r.map}: map is {m.shape[1]}x{m.shape[0]}, image is {w}x{h}")
            maps.append(_crop(m, box))
        if r.fixations is not None:
            fixes.append(crop_fixations(load_fixations(manifest.resolve(r.fixations), w, h), box))
        ids.append(Path(r.image).stem)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise FormatError(f"{split} images differ in size after cropping: {sorted(shapes)}")
    if maps and len(maps) != len(images):
        raise FormatError(f"{split}: some records lack ground-truth maps")
    if fixes and len(fixes) != len(images):
        raise FormatError(f"{split}: some records lack fixation files")
    maps_arr = np.stack(maps) if maps else np.zeros((len(images), 0, 0))
    return Dataset(np.stack(images), maps_arr, fixes, ids)


def generate_synthetic_dataset(out_dir, count, resolution=(48, 64), center_bias_strength=0.7,
                               seed=0, val_count=0, test_count=0) -> DatasetManifest:
    """Write ``count`` train (+ val/test) samples and a manifest under ``out_dir``."""
    from .synthetic import synthetic_dataset

    out = Path(out_dir)
    for sub in ("images", "maps", "fixations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    total = count + val_count + test_count
    data = synthetic_dataset(total, resolution, center_bias_strength, seed)
    splits = ["train"] * count + ["val"] * val_count + ["test"] * test_count
    records = []
    for k, split in enumerate(splits):
        stem = f"{k:05d}"
        rec = Record(split, f"images/{stem}.ppm", f"maps/{stem}.pgm", f"fixations/{stem}.txt")
        save_image(out / rec.image, data.images[k])
        save_map(out / rec.map, data.maps[k])
        save_fixations(out / rec.fixations, data.fixations[k])
        records.append(rec)
    manifest = DatasetManifest(records, out, seed)
    manifest.write(out / "manifest.tsv")
    return manifest

