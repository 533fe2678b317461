"""Dataset format, input resize rule, and the synthetic audio-visual generator.

On-disk layout of one split::

    root/
      manifest.json     {"version": 1, "split": "train", "samples": [...]}
      frames/*.png      RGB frames
      masks/*.png       single-channel masks, values {0, 255}
      audio/*.savt      raw float32 tensors, shape [D_a]

A generated dataset holds one such directory per split (``train/``, ``val/``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

from .validation import DataError

MAGIC = b"SAVT"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


# -- raw tensor files -------------------------------------------------------

def write_raw_tensor(path, array) -> None:
    arr = np.require(np.asarray(array, dtype="<f4"), requirements="C")
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape)},
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_raw_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DataError(f"corrupt raw tensor file (bad magic): {path}")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise DataError(f"corrupt raw tensor file (truncated header): {path}")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
        shape = [int(s) for s in header["shape"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"corrupt raw tensor file (bad header): {path}") from exc
    if header.get("dtype") != "f32":
        raise DataError(f"unsupported dtype {header.get('dtype')!r} in {path}")
    payload = blob[8 + header_len:]
    if len(payload) != 4 * math.prod(shape):
        raise DataError(f"corrupt raw tensor file (payload is {len(payload)} bytes, "
                        f"expected {4 * math.prod(shape)}): {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(tuple(shape)).astype(np.float32)


# -- manifest ---------------------------------------------------------------

@dataclass
class SampleRecord:
    video_id: str
    frame_index: int
    image_path: str
    mask_path: str
    audio_path: str
    category: str


@dataclass
class Manifest:
    version: int
    split: str
    samples: list

    def to_dict(self) -> dict:
        return {"version": self.version, "split": self.split,
                "samples": [dataclasses.asdict(s) for s in self.samples]}

    def save(self, root) -> Path:
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, root, check_files: bool = True) -> "Manifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise DataError(f"missing file: {path}")
        try:
            data = json.loads(path.read_text())
            manifest = cls(int(data["version"]), data["split"],
                           [SampleRecord(**s) for s in data["samples"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        if manifest.split not in SPLITS:
            raise DataError(f"unknown split {manifest.split!r} in {path}")
        if check_files:
            for rec in manifest.samples:
                for rel in (rec.image_path, rec.mask_path, rec.audio_path):
                    if not (root / rel).exists():
                        raise DataError(f"missing file: {root / rel}")
        return manifest


# -- resize rule ------------------------------------------------------------

@dataclass(frozen=True)
class Provenance:
    pad_flag: bool
    original_size: tuple  # (h, w)
    padded_size: int


def resize_with_rule(image: torch.Tensor, target: int, mode: str = "bilinear"):
    """Bring ``[C, H, W]`` (or ``[H, W]``) to ``target x target``.

    Images smaller than ``target`` on both sides are placed at the top-left
    of a zero canvas; anything else is resampled (``mode="nearest"`` for masks).
    Returns ``(resized, pad_flag, (h, w))``.
    """
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    squeeze = image.ndim == 2
    x = image.unsqueeze(0) if squeeze else image
    h, w = x.shape[-2:]
    if h == 0 or w == 0:
        raise DataError("cannot resize an empty image")
    if h < target and w < target:
        out = x.new_zeros(x.shape[0], target, target)
        out[:, :h, :w] = x
        pad = True
    elif (h, w) == (target, target):
        out, pad = x.clone(), False
    else:
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        out = F.interpolate(x.unsqueeze(0).float(), size=(target, target), mode=mode,
                            **kwargs)[0].to(x.dtype)
        pad = False
    return (out[0] if squeeze else out), pad, (int(h), int(w))


def load_sample(record: SampleRecord, root, resolution: int):
    """Read one record. Returns ``(image [3,R,R], audio [D_a], mask [R,R], provenance)``."""
    root = Path(root)
    img_path, mask_path = root / record.image_path, root / record.mask_path
    for p in (img_path, mask_path):
        if not p.exists():
            raise DataError(f"missing file: {p}")
    rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
    raw_mask = np.asarray(Image.open(mask_path))
    if raw_mask.ndim != 2:
        raise DataError(f"mask must be single-channel: {mask_path}")
    if not np.isin(raw_mask, (0, 255)).all():
        raise DataError(f"mask must only contain values 0 and 255: {mask_path}")
    if raw_mask.shape != rgb.shape[:2]:
        raise DataError(f"mask and frame sizes differ for {record.video_id}/{record.frame_index}")
    audio = read_raw_tensor(root / record.audio_path)
    if audio.ndim != 1:
        raise DataError(f"audio feature must be a vector: {root / record.audio_path}")

    image, pad, size = resize_with_rule(torch.from_numpy(rgb).permute(2, 0, 1), resolution)
    mask, _, _ = resize_with_rule(torch.from_numpy((raw_mask > 0).astype(np.float32)),
                                  resolution, mode="nearest")
    return image.contiguous(), torch.from_numpy(audio), mask, Provenance(pad, size, resolution)


class AVSDataset(Dataset):
    """In-memory frames, audio features and masks at the network resolution."""

    def __init__(self, images, audio, masks, records=None, provenance=None):
        self.images = torch.as_tensor(images, dtype=torch.float32)
        self.audio = torch.as_tensor(audio, dtype=torch.float32)
        self.masks = torch.as_tensor(masks, dtype=torch.float32)
        n = len(self.images)
        if len(self.audio) != n or len(self.masks) != n:
            raise DataError("images, audio and masks must have the same length")
        self.records = list(records) if records is not None else [None] * n
        if provenance is None:
            r = self.images.shape[-1] if n else 0
            provenance = [Provenance(False, (r, r), r)] * n
        self.provenance = list(provenance)

    @classmethod
    def from_manifest(cls, root, resolution: int) -> "AVSDataset":
        manifest = Manifest.load(root)
        if not manifest.samples:
            raise DataError(f"manifest in {root} has no samples")
        items = [load_sample(rec, root, resolution) for rec in manifest.samples]
        dims = {it[1].shape[0] for it in items}
        if len(dims) != 1:
            raise DataError(f"inconsistent audio feature lengths {sorted(dims)} in {root}")
        ds = cls(torch.stack([it[0] for it in items]), torch.stack([it[1] for it in items]),
                 torch.stack([it[2] for it in items]), manifest.samples,
                 [it[3] for it in items])
        ds.root = Path(root)
        return ds

    @property
    def categories(self) -> list:
        return [r.category if r is not None else "all" for r in self.records]

    def with_audio(self, audio) -> "AVSDataset":
        """Copy of this dataset with the audio features replaced."""
        audio = torch.as_tensor(audio, dtype=torch.float32).expand_as(self.audio).clone()
        return AVSDataset(self.images, audio, self.masks, self.records, self.provenance)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], self.audio[idx], self.masks[idx]


def batch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    """Shuffled sample order, a pure function of ``(seed, epoch)``."""
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=g)


# -- synthetic generator ----------------------------------------------------

SHAPE_FAMILIES = ("circle", "square", "triangle", "diamond", "cross", "ring", "hbar", "vbar")
PALETTE = (
    (230, 40, 40), (40, 200, 60), (50, 90, 240), (240, 200, 30),
    (200, 40, 220), (30, 210, 210), (250, 130, 20), (245, 245, 245),
)


@dataclass
class SyntheticSpec:
    num_videos: int = 200
    frames_per_video: int = 2
    num_classes: int = 4
    canvas: int = 64
    objects_per_frame: int = 2
    noise_sigma: float = 0.1
    seed: int = 0
    audio_dim: int = 32
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > len(SHAPE_FAMILIES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_FAMILIES)}]")
        if self.objects_per_frame < 2 or self.objects_per_frame > self.num_classes:
            raise ValueError("objects_per_frame must be in [2, num_classes]")
        if self.num_videos < 2 or self.frames_per_video < 1:
            raise ValueError("need num_videos >= 2 and frames_per_video >= 1")
        if self.canvas < 16:
            raise ValueError("canvas must be at least 16 pixels")
        if self.noise_sigma < 0 or self.audio_dim < 1:
            raise ValueError("noise_sigma must be >= 0 and audio_dim >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


def class_name(k: int) -> str:
    r, g, b = PALETTE[k]
    return f"{SHAPE_FAMILIES[k]}_{r:02x}{g:02x}{b:02x}"


def rasterize_shape(family: str, top: int, left: int, size: int, canvas: int) -> np.ndarray:
    """Boolean mask of one shape inside the ``size``-wide box at ``(top, left)``.

    Pixels are tested at their centers against the shape's geometry.
    """
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    u = (xx - left) / size - 0.5  # [-0.5, 0.5] across the box
    v = (yy - top) / size - 0.5
    inside_box = (np.abs(u) <= 0.5) & (np.abs(v) <= 0.5)
    if family == "circle":
        m = u ** 2 + v ** 2 <= 0.25
    elif family == "square":
        m = inside_box
    elif family == "triangle":
        m = inside_box & (np.abs(u) <= (v + 0.5) / 2)
    elif family == "diamond":
        m = np.abs(u) + np.abs(v) <= 0.5
    elif family == "cross":
        m = inside_box & ((np.abs(u) <= 0.17) | (np.abs(v) <= 0.17))
    elif family == "ring":
        r2 = u ** 2 + v ** 2
        m = (r2 <= 0.25) & (r2 >= 0.06)
    elif family == "hbar":
        m = inside_box & (np.abs(v) <= 0.22)
    elif family == "vbar":
        m = inside_box & (np.abs(u) <= 0.22)
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return m


def _background(rng: np.random.Generator, canvas: int) -> np.ndarray:
    # Channels stay in [30, 120], below every palette color's brightest channel.
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    freq = rng.uniform(0.1, 0.4, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq[0] * xx + freq[1] * yy + phase)
    base = rng.uniform(55, 95, size=3)
    bg = base[None, None, :] + 15 * stripes[..., None] + rng.normal(0, 4, (canvas, canvas, 3))
    return np.clip(np.rint(bg), 30, 120).astype(np.uint8)


def _place_boxes(rng, canvas, count, max_tries=1000):
    lo, hi = max(int(canvas * 0.25), 4), max(int(canvas * 0.42), 5)
    for _ in range(max_tries):
        boxes = []
        for _ in range(count):
            size = int(rng.integers(lo, hi + 1))
            top, left = (int(v) for v in rng.integers(0, canvas - size + 1, size=2))
            boxes.append((top, left, size))
        if all(_disjoint(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:]):
            return boxes
    raise RuntimeError("could not place non-overlapping objects; canvas too small")


def _disjoint(a, b):
    (t1, l1, s1), (t2, l2, s2) = a, b
    return t1 + s1 <= t2 or t2 + s2 <= t1 or l1 + s1 <= l2 or l2 + s2 <= l1


def class_anchors(spec: SyntheticSpec) -> np.ndarray:
    """One fixed audio anchor per class, at least 4 sigma apart pairwise."""
    rng = np.random.default_rng([spec.seed, 1])
    anchors = rng.normal(0.0, 1.0, size=(spec.num_classes, spec.audio_dim))
    diffs = anchors[:, None, :] - anchors[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))[np.triu_indices(spec.num_classes, 1)]
    if dist.min() < 4 * spec.noise_sigma:
        raise ValueError("class audio anchors are not separable at this noise level")
    return anchors.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write a train/val dataset of composited shapes with class-anchored audio.

    Every frame shows ``objects_per_frame`` shapes of distinct classes, one of
    which is sounding for the whole video. The mask covers only the sounding
    shape and the audio vector is that class's anchor plus Gaussian noise.
    Returns ``{split: Manifest}``.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng([spec.seed, 0])
    anchors = class_anchors(spec)
    c = spec.canvas

    video_ids = [f"v{i:04d}" for i in range(spec.num_videos)]
    n_val = max(1, round(spec.val_fraction * spec.num_videos))
    shuffled = rng.permutation(spec.num_videos)
    split_of = {video_ids[i]: ("val" if k < n_val else "train") for k, i in enumerate(shuffled)}

    samples = {"train": [], "val": []}
    for split in samples:
        for sub in ("frames", "masks", "audio"):
            (out_dir / split / sub).mkdir(parents=True, exist_ok=True)

    for vid in video_ids:
        classes = rng.choice(spec.num_classes, size=spec.objects_per_frame, replace=False)
        sounding = int(rng.integers(spec.objects_per_frame))
        split = split_of[vid]
        root = out_dir / split
        for f in range(spec.frames_per_video):
            frame = _background(rng, c)
            mask = np.zeros((c, c), dtype=bool)
            for j, (top, left, size) in enumerate(_place_boxes(rng, c, spec.objects_per_frame)):
                k = int(classes[j])
                shape = rasterize_shape(SHAPE_FAMILIES[k], top, left, size, c)
                frame[shape] = PALETTE[k]
                if j == sounding:
                    mask = shape
            audio = anchors[classes[sounding]] + rng.normal(0, spec.noise_sigma, spec.audio_dim)

            stem = f"{vid}_{f:03d}"
            rec = SampleRecord(vid, f, f"frames/{stem}.png", f"masks/{stem}.png",
                               f"audio/{stem}.savt", class_name(int(classes[sounding])))
            Image.fromarray(frame).save(root / rec.image_path)
            Image.fromarray(mask.astype(np.uint8) * 255).save(root / rec.mask_path)
            write_raw_tensor(root / rec.audio_path, audio)
            samples[split].append(rec)

    manifests = {}
    for split, recs in samples.items():
        manifests[split] = Manifest(MANIFEST_VERSION, split, recs)
        manifests[split].save(out_dir / split)
    return manifests
