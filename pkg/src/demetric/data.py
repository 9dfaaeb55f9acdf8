"""Synthetic attribute-glyph dataset, zero-shot splits, and image I/O.

Each class is a tuple of attribute values, one per slot; every
(slot, value) pair owns a distinct binary glyph stamped at the slot's
position.  Splits are built so a strict subset of slots suffices to
separate the seen classes while the unseen classes differ only in the
remaining slots: a learner that shortcuts onto the sufficient subset
trains fine and fails on the unseen classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations, product
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError, ParameterError, SplitDesignError
from .tensor import Tensor

_PATTERN_STREAM = 20240001  # glyph shapes stay fixed across dataset seeds


@dataclass(frozen=True)
class GlyphSpec:
    """Geometry and noise model of the glyph images."""

    slots: int = 4
    values: int = 3
    glyph_size: int = 6
    image_size: int = 32
    noise: float = 0.15
    jitter: int = 0
    cluster_jitter: int = 0

    def __post_init__(self):
        if self.slots < 1 or self.values < 2:
            raise ParameterError("need at least 1 slot and 2 values per slot")
        if self.noise < 0 or self.jitter < 0 or self.cluster_jitter < 0:
            raise ParameterError("noise and jitter amplitudes must be nonnegative")
        if self.cluster_extent > self.image_size:
            raise ParameterError(
                f"glyph cluster ({self.cluster_extent}px) exceeds image ({self.image_size}px)")

    @property
    def n_classes(self) -> int:
        return self.values ** self.slots

    @property
    def grid(self) -> int:
        return int(np.ceil(np.sqrt(self.slots)))

    @property
    def pitch(self) -> int:
        return self.glyph_size + 3

    @property
    def cluster_extent(self) -> int:
        return (self.grid - 1) * self.pitch + self.glyph_size

    def anchors(self) -> list[tuple[int, int]]:
        """Slot positions relative to the cluster origin."""
        return [((s // self.grid) * self.pitch, (s % self.grid) * self.pitch)
                for s in range(self.slots)]

    def class_tuple(self, class_id: int) -> tuple[int, ...]:
        if not 0 <= class_id < self.n_classes:
            raise ParameterError(f"class id {class_id} out of range")
        digits = []
        for _ in range(self.slots):
            digits.append(class_id % self.values)
            class_id //= self.values
        return tuple(reversed(digits))

    def class_id(self, values: tuple[int, ...]) -> int:
        if len(values) != self.slots:
            raise ParameterError(f"value tuple {values} has wrong length")
        cid = 0
        for v in values:
            if not 0 <= v < self.values:
                raise ParameterError(f"value {v} out of range")
            cid = cid * self.values + v
        return cid


def glyph_patterns(spec: GlyphSpec) -> dict[tuple[int, int], np.ndarray]:
    """Distinct binary patterns per (slot, value), fixed across seeds."""
    rng = np.random.default_rng(_PATTERN_STREAM)
    seen: set[bytes] = set()
    patterns = {}
    for slot in range(spec.slots):
        for value in range(spec.values):
            while True:
                p = rng.random((spec.glyph_size, spec.glyph_size)) < 0.5
                key = p.tobytes()
                if p.any() and not p.all() and key not in seen:
                    break
            seen.add(key)
            patterns[(slot, value)] = p
    return patterns


@dataclass
class GlyphDataset:
    """Images (n, 1, S, S) in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    spec: GlyphSpec | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, class_ids) -> "GlyphDataset":
        mask = np.isin(self.labels, np.asarray(list(class_ids)))
        return GlyphDataset(self.images[mask], self.labels[mask], self.spec)

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


def generate_dataset(spec: GlyphSpec, per_class: int, seed: int,
                     class_ids=None) -> GlyphDataset:
    """Render ``per_class`` images for each class, bit-reproducibly.

    Every image draws from its own RNG stream keyed by
    (seed, class_id, copy index), so generation order and class subsets
    do not change pixel values.
    """
    if per_class < 4:
        raise ParameterError(f"per_class must be at least 4, got {per_class}")
    if class_ids is None:
        class_ids = range(spec.n_classes)
    class_ids = sorted(int(c) for c in class_ids)
    patterns = glyph_patterns(spec)
    anchors = spec.anchors()
    s = spec.image_size
    g = spec.glyph_size
    base = (s - spec.cluster_extent) // 2

    images = np.empty((len(class_ids) * per_class, 1, s, s))
    labels = np.empty(len(class_ids) * per_class, dtype=np.int64)
    n = 0
    for cid in class_ids:
        tup = spec.class_tuple(cid)
        for copy in range(per_class):
            rng = np.random.default_rng([seed, cid, copy])
            img = rng.random((s, s)) * spec.noise
            cj = spec.cluster_jitter
            coff = rng.integers(-cj, cj + 1, size=2) if cj else np.zeros(2, dtype=int)
            for slot, value in enumerate(tup):
                ar, ac = anchors[slot]
                jit = (rng.integers(-spec.jitter, spec.jitter + 1, size=2)
                       if spec.jitter else np.zeros(2, dtype=int))
                r = int(np.clip(base + ar + coff[0] + jit[0], 0, s - g))
                c = int(np.clip(base + ac + coff[1] + jit[1], 0, s - g))
                img[r:r + g, c:c + g][patterns[(slot, value)]] = 1.0
            images[n, 0] = img
            labels[n] = cid
            n += 1
    return GlyphDataset(images=images, labels=labels, spec=spec)


# zero-shot splits -----------------------------------------------------------


@dataclass(frozen=True)
class ZeroShotSplit:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]


@dataclass
class SplitReport:
    disjoint: bool
    separating_subsets: list[tuple[int, ...]]  # subsets satisfying all properties
    ok: bool
    reason: str = ""


def default_split(spec: GlyphSpec) -> ZeroShotSplit:
    """Seen classes vary on the first half of the slots (rest zero);
    unseen classes are zero there and vary on the remaining slots."""
    if spec.slots < 2:
        raise ParameterError("a zero-shot split needs at least 2 slots")
    head = spec.slots // 2 if spec.slots > 2 else 1
    head_slots = list(range(head))
    tail_slots = list(range(head, spec.slots))
    seen = []
    for combo in product(range(spec.values), repeat=len(head_slots)):
        tup = [0] * spec.slots
        for slot, v in zip(head_slots, combo):
            tup[slot] = v
        seen.append(spec.class_id(tuple(tup)))
    unseen = []
    for combo in product(range(spec.values), repeat=len(tail_slots)):
        if all(v == 0 for v in combo):
            continue
        tup = [0] * spec.slots
        for slot, v in zip(tail_slots, combo):
            tup[slot] = v
        unseen.append(spec.class_id(tuple(tup)))
    return ZeroShotSplit(seen=tuple(seen), unseen=tuple(unseen))


def _separates(tuples: list[tuple[int, ...]], subset: tuple[int, ...]) -> bool:
    projected = {tuple(t[s] for s in subset) for t in tuples}
    return len(projected) == len(tuples)


def _all_collide(tuples: list[tuple[int, ...]], subset: tuple[int, ...]) -> bool:
    projected = {tuple(t[s] for s in subset) for t in tuples}
    return len(projected) == 1


def analyze_split(split: ZeroShotSplit, spec: GlyphSpec) -> SplitReport:
    """Check the split's construction properties without raising.

    A proper, nonempty slot subset qualifies when it separates every
    seen class while all unseen classes collide on it and are separated
    by its complement.
    """
    seen_set = set(split.seen)
    unseen_set = set(split.unseen)
    disjoint = not (seen_set & unseen_set)
    seen_t = [spec.class_tuple(c) for c in split.seen]
    unseen_t = [spec.class_tuple(c) for c in split.unseen]

    qualifying = []
    for size in range(1, spec.slots):
        for subset in combinations(range(spec.slots), size):
            rest = tuple(s for s in range(spec.slots) if s not in subset)
            if (_separates(seen_t, subset) and _all_collide(unseen_t, subset)
                    and _separates(unseen_t, rest)):
                qualifying.append(subset)

    if not disjoint:
        return SplitReport(False, qualifying, False,
                           f"seen/unseen share classes {sorted(seen_set & unseen_set)}")
    if not qualifying:
        return SplitReport(True, [], False,
                           "no proper slot subset separates the seen classes while "
                           "hiding every distinction between the unseen ones")
    return SplitReport(True, qualifying, True)


def verify_split(split: ZeroShotSplit, spec: GlyphSpec) -> SplitReport:
    """As :func:`analyze_split`, but raise on a violated property."""
    report = analyze_split(split, spec)
    if not report.ok:
        raise SplitDesignError(report.reason)
    return report


# PGM / PPM ------------------------------------------------------------------


def _next_token(blob: bytes, off: int) -> tuple[bytes, int]:
    while off < len(blob):
        ch = blob[off:off + 1]
        if ch.isspace():
            off += 1
        elif ch == b"#":
            nl = blob.find(b"\n", off)
            if nl < 0:
                raise FormatError(f"unterminated comment starting at byte {off}")
            off = nl + 1
        else:
            break
    start = off
    while off < len(blob) and not blob[off:off + 1].isspace():
        off += 1
    if start == off:
        raise FormatError(f"missing header token at byte {start}")
    return blob[start:off], off


def read_image(path) -> Tensor:
    """Load a binary PGM (P5) or PPM (P6) as a (H, W) tensor in [0, 1].

    PPM images are reduced to grayscale by the channel mean.
    """
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte 0 (want P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    off = 2
    fields = []
    for _ in range(3):
        token, off = _next_token(blob, off)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"non-numeric header token {token!r} at byte {off - len(token)}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height} in header")
    if not 0 < maxval < 65536:
        raise FormatError(f"bad maxval {maxval} in header")
    if off >= len(blob) or not blob[off:off + 1].isspace():
        raise FormatError(f"missing whitespace before payload at byte {off}")
    off += 1
    bytes_per = 1 if maxval < 256 else 2
    expected = width * height * channels * bytes_per
    actual = len(blob) - off
    if actual < expected:
        raise FormatError(
            f"payload truncated at byte {off}: expected {expected} bytes, found {actual}")
    dtype = np.uint8 if bytes_per == 1 else np.dtype(">u2")
    raw = np.frombuffer(blob, dtype=dtype, count=width * height * channels, offset=off)
    pixels = raw.astype(np.float64) / maxval
    if channels == 3:
        pixels = pixels.reshape(height, width, 3).mean(axis=2)
    else:
        pixels = pixels.reshape(height, width)
    return Tensor(pixels)


def write_pgm(grid, path) -> None:
    """Write a 2D map as an 8-bit binary PGM, min-max scaled."""
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 2:
        raise ParameterError(f"write_pgm expects a 2D map, got shape {data.shape}")
    lo, hi = float(data.min()), float(data.max())
    scaled = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
    payload = np.round(scaled * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


# dataset directories ---------------------------------------------------------


def save_dataset(dataset: GlyphDataset, split: ZeroShotSplit, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in range(len(dataset)):
        name = f"img_{idx:05d}_c{int(dataset.labels[idx]):03d}.pgm"
        img = dataset.images[idx, 0]
        # images are already in [0, 1]; write them verbatim at 8 bit
        payload = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        h, w = img.shape
        with open(out / name, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(payload.tobytes())
        rows.append((name, int(dataset.labels[idx])))
    with open(out / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "class_id"])
        writer.writerows(rows)
    with open(out / "split.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "split"])
        for cid in split.seen:
            writer.writerow([cid, "seen"])
        for cid in split.unseen:
            writer.writerow([cid, "unseen"])


def load_dataset(data_dir) -> tuple[GlyphDataset, ZeroShotSplit]:
    root = Path(data_dir)
    labels_path = root / "labels.csv"
    split_path = root / "split.csv"
    if not labels_path.exists() or not split_path.exists():
        raise FileNotFoundError(f"{data_dir} lacks labels.csv / split.csv")
    names, labels = [], []
    with open(labels_path, newline="") as f:
        for row in csv.DictReader(f):
            names.append(row["filename"])
            labels.append(int(row["class_id"]))
    if not names:
        raise DatasetError(f"{labels_path} lists no images")
    images = np.stack([read_image(root / n).data for n in names])[:, None, :, :]
    seen, unseen = [], []
    with open(split_path, newline="") as f:
        for row in csv.DictReader(f):
            (seen if row["split"] == "seen" else unseen).append(int(row["class_id"]))
    dataset = GlyphDataset(images=images, labels=np.asarray(labels, dtype=np.int64))
    return dataset, ZeroShotSplit(seen=tuple(seen), unseen=tuple(unseen))
