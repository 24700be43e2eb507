"""Dataset ingestion, synthetic texture corpora, augmentation, balancing.

Images are H x W x C float32 arrays in [0, 1] with C = 1 (gray) or 3
(color).  On-disk formats are binary PGM (P5) and PPM (P6) with maxval
255, chosen because they parse in a few lines anywhere.

The synthetic generator stands in for a large medical corpus at desk
scale: each class is a band-filtered noise texture with its own center
frequency, orientation, pixel mean, and contrast.  Class means and
contrasts are assigned from evenly spaced slots (shuffled, with jitter
kept below a quarter of the slot spacing), so any two classes differ by
a guaranteed margin and even a pixel-histogram baseline can separate
them; frequency and orientation differ per class so a convolutional
model has texture structure worth transferring.
"""

import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Rng, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
AUGMENT_OPS = ("hflip", "vflip", "rot90", "crop_pad")
CROP_PAD_MAX_SHIFT = 4


class DataError(ValueError):
    """Malformed image file or dataset layout."""


@dataclass(frozen=True)
class Sample:
    """One labeled image; ``source_id`` names where it came from."""

    image: np.ndarray  # H x W x C float32 in [0, 1]
    label: int
    source_id: str


@dataclass
class Dataset:
    samples: list
    class_names: list
    colorspace: str  # "gray" or "color"

    def __len__(self):
        return len(self.samples)

    def class_counts(self):
        counts = [0] * len(self.class_names)
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def arrays(self):
        """Stacked (images, labels) for the training loop."""
        images = np.stack([s.image for s in self.samples]).astype(np.float32)
        labels = np.array([s.label for s in self.samples], dtype=np.int64)
        return images, labels

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices],
                       list(self.class_names), self.colorspace)


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_pnm_header(data, path):
    """Parse 'magic width height maxval' allowing whitespace and # comments."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace byte separates header and pixels


def read_pnm(path):
    """Decode a binary PGM (P5) or PPM (P6) file to H x W x C in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _read_pnm_header(data, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r} (want binary P5/P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError(f"{path}: non-numeric header fields {tokens[1:4]}")
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (want 1..255)")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    payload = data[offset:offset + count]
    if len(payload) != count:
        raise DataError(f"{path}: expected {count} pixel bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.astype(np.float32) / np.float32(maxval)


def write_pnm(path, image):
    """Write H x W x 1 as PGM or H x W x 3 as PPM (maxval 255).

    The debugging/round-trip counterpart of :func:`read_pnm`; values are
    clipped to [0, 1] and quantized to 8 bits.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError(f"write_pnm expects H x W x 1 or H x W x 3, got {image.shape}")
    magic = b"P5" if image.shape[2] == 1 else b"P6"
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, image.shape[1], image.shape[0])
    with open(path, "wb") as f:
        f.write(header)
        f.write(quantized.tobytes())


def to_gray(image):
    """Luminance conversion; already-gray images pass through."""
    if image.shape[2] == 1:
        return image
    r, g, b = LUMA_WEIGHTS
    gray = r * image[..., 0] + g * image[..., 1] + b * image[..., 2]
    return gray[..., None].astype(image.dtype)


def to_color(image):
    """Replicate a gray channel to three; color images pass through."""
    if image.shape[2] == 3:
        return image
    return np.repeat(image, 3, axis=2)


def bilinear_resize(image, out_h, out_w):
    """Bilinear resample with half-pixel-center alignment.

    Same-size input is returned unchanged (the sampling grid degenerates
    to the identity).
    """
    h, w, c = image.shape
    if (h, w) == (out_h, out_w):
        return image
    scale_y = h / out_h
    scale_x = w / out_w
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * scale_y - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * scale_x - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return out.astype(image.dtype)


def load_image_dir(root_path, colorspace, target_size):
    """Read a root/<class>/<file>.{pgm,ppm} tree into a Dataset.

    Classes are the subdirectory names in lexicographic order.  Files are
    decoded, converted to ``colorspace``, bilinearly resized to
    ``target_size`` (an int for square, or an (h, w) pair), and scaled to
    [0, 1].  Undecodable files are skipped with a warning tally.
    """
    if colorspace not in ("gray", "color"):
        raise DataError(f"colorspace must be 'gray' or 'color', got {colorspace!r}")
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    convert = to_gray if colorspace == "gray" else to_color
    class_names = sorted(
        d for d in os.listdir(root_path)
        if os.path.isdir(os.path.join(root_path, d))
    )
    if not class_names:
        raise DataError(f"{root_path}: no class directories")
    samples = []
    skipped = 0
    for label, name in enumerate(class_names):
        class_dir = os.path.join(root_path, name)
        files = sorted(
            f for f in os.listdir(class_dir)
            if f.lower().endswith((".pgm", ".ppm"))
        )
        if not files:
            raise DataError(f"{class_dir}: empty class directory")
        for filename in files:
            path = os.path.join(class_dir, filename)
            try:
                image = read_pnm(path)
            except DataError:
                skipped += 1
                continue
            image = convert(image)
            image = bilinear_resize(image, *target_size)
            samples.append(Sample(np.clip(image, 0.0, 1.0), label,
                                  f"{name}/{filename}"))
    if skipped:
        warnings.warn(f"{root_path}: skipped {skipped} undecodable file(s)")
    dataset = Dataset(samples, class_names, colorspace)
    dataset.skipped = skipped
    return dataset


# ---------------------------------------------------------------------------
# Synthetic corpus


def _margin_slots(rng, count, low, high):
    """Evenly spaced values in [low, high], shuffled, jittered < spacing/4.

    Any two outputs differ by at least half the slot spacing.
    """
    if count == 1:
        return np.array([(low + high) / 2.0])
    slots = np.linspace(low, high, count)
    spacing = slots[1] - slots[0]
    jitter = rng.uniform(-0.25, 0.25, count) * spacing
    return np.take(slots + jitter, rng.permutation(count))


def _class_params(kind, num_classes, seed):
    """Per-class texture recipe; margin-enforced means and contrasts."""
    rng = Rng(seed).child(101)
    means = _margin_slots(rng.child(0), num_classes, 0.30, 0.70)
    contrasts = _margin_slots(rng.child(1), num_classes, 0.08, 0.20)
    freqs = _margin_slots(rng.child(2), num_classes, 0.10, 0.32)
    thetas = (np.arange(num_classes) * np.pi / num_classes
              + rng.child(3).uniform(0, np.pi / (4 * num_classes), num_classes))
    params = []
    for k in range(num_classes):
        p = {
            "mean": float(means[k]),
            "contrast": float(contrasts[k]),
            "freq": float(freqs[k]),
            "theta": float(thetas[k]),
            "freq_sigma": 0.04,
            "theta_sigma": 0.35,
        }
        if kind == "color":
            mix = rng.child(4, k).uniform(0.4, 1.0, 3)
            p["mix"] = mix / mix.max()
            p["channel_offset"] = rng.child(5, k).uniform(-0.05, 0.05, 3)
        params.append(p)
    return params


def _bandpass_filter(size, p):
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    phi = np.arctan2(fy, fx) % np.pi
    d_theta = np.abs(phi - p["theta"])
    d_theta = np.minimum(d_theta, np.pi - d_theta)
    filt = (np.exp(-0.5 * ((radius - p["freq"]) / p["freq_sigma"]) ** 2)
            * np.exp(-0.5 * (d_theta / p["theta_sigma"]) ** 2))
    filt[0, 0] = 0.0  # the class mean is set explicitly, not by the DC bin
    return filt


def _texture(size, p, rng):
    noise = rng.normal(size=(size, size))
    spectrum = np.fft.fft2(noise) * _bandpass_filter(size, p)
    t = np.fft.ifft2(spectrum).real
    std = t.std()
    if std < 1e-9:
        return np.zeros_like(t)
    return (t - t.mean()) / std


def synth_dataset(kind, num_classes, samples_per_class, size, seed):
    """Deterministic class-separable texture corpus.

    ``kind`` is "gray" (C=1) or "color" (C=3).  Identical arguments give
    bitwise-identical datasets.
    """
    if kind not in ("gray", "color"):
        raise DataError(f"kind must be 'gray' or 'color', got {kind!r}")
    if num_classes < 2:
        raise DataError(f"num_classes must be >= 2, got {num_classes}")
    params = _class_params(kind, num_classes, seed)
    base = Rng(seed).child(202)
    samples = []
    for k, p in enumerate(params):
        for i in range(samples_per_class):
            t = _texture(size, p, base.child(k, i))
            if kind == "gray":
                image = p["mean"] + p["contrast"] * t
                image = image[..., None]
            else:
                channels = [
                    p["mean"] + p["channel_offset"][c]
                    + p["contrast"] * p["mix"][c] * t
                    for c in range(3)
                ]
                image = np.stack(channels, axis=2)
            image = np.clip(image, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(image, k,
                                  f"synth/{kind}/{seed}/class_{k:02d}/{i:04d}"))
    class_names = [f"class_{k:02d}" for k in range(num_classes)]
    return Dataset(samples, class_names, kind)


def save_dataset_dir(dataset, root_path):
    """Write a dataset back out as root/<class>/<index>.{pgm,ppm}."""
    extension = ".pgm" if dataset.colorspace == "gray" else ".ppm"
    counters = [0] * len(dataset.class_names)
    for sample in dataset.samples:
        class_dir = os.path.join(root_path, dataset.class_names[sample.label])
        os.makedirs(class_dir, exist_ok=True)
        filename = f"{counters[sample.label]:05d}{extension}"
        counters[sample.label] += 1
        write_pnm(os.path.join(class_dir, filename), sample.image)


# ---------------------------------------------------------------------------
# Augmentation, balancing, splitting


def _crop_pad(image, rng):
    """Shift by up to CROP_PAD_MAX_SHIFT pixels each axis, zero-filling."""
    max_shift = CROP_PAD_MAX_SHIFT
    dy = int(rng.integers(-max_shift, max_shift + 1))
    dx = int(rng.integers(-max_shift, max_shift + 1))
    out = np.zeros_like(image)
    h, w, _ = image.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment(sample, ops, rng=None):
    """Label-preserving geometric transforms, applied in the order given.

    Flips and rot90 are deterministic; crop_pad draws its shift from
    ``rng``.  Output shape always equals input shape.
    """
    image = sample.image
    for op in ops:
        if op == "hflip":
            image = image[:, ::-1, :]
        elif op == "vflip":
            image = image[::-1, :, :]
        elif op == "rot90":
            if image.shape[0] != image.shape[1]:
                raise ShapeError("rot90 requires square images to preserve shape")
            image = np.rot90(image, axes=(0, 1))
        elif op == "crop_pad":
            if rng is None:
                raise ValueError("crop_pad needs an rng")
            image = _crop_pad(image, rng)
        else:
            raise ValueError(f"unknown augmentation op {op!r} "
                             f"(supported: {AUGMENT_OPS})")
    return replace(sample, image=np.ascontiguousarray(image))


def oversample_balance(dataset, rng):
    """Duplicate minority-class samples until every class matches the max.

    Originals are all retained (duplicates are appended); the draw is
    seeded sampling with replacement per class.
    """
    counts = dataset.class_counts()
    if any(c == 0 for c in counts):
        empty = dataset.class_names[counts.index(0)]
        raise DataError(f"class {empty!r} has no samples")
    target = max(counts)
    by_class = [[] for _ in counts]
    for sample in dataset.samples:
        by_class[sample.label].append(sample)
    new_samples = list(dataset.samples)
    for label, members in enumerate(by_class):
        need = target - len(members)
        if need > 0:
            picks = rng.child(label).integers(0, len(members), size=need)
            new_samples.extend(members[int(i)] for i in picks)
    return Dataset(new_samples, list(dataset.class_names), dataset.colorspace)


def split(dataset, fractions, seed):
    """Stratified seeded split by largest-remainder apportionment.

    Partitions are disjoint and their union is the original multiset.
    Every class must have at least as many samples as there are parts.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise DataError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got sum {sum(fractions)}")
    parts = len(fractions)
    by_class = [[] for _ in dataset.class_names]
    for index, sample in enumerate(dataset.samples):
        by_class[sample.label].append(index)
    rng = Rng(seed)
    part_indices = [[] for _ in range(parts)]
    for label, members in enumerate(by_class):
        n = len(members)
        if n < parts:
            raise DataError(
                f"class {dataset.class_names[label]!r} has {n} samples, "
                f"fewer than the {parts} requested partitions"
            )
        order = rng.child(label).permutation(n)
        shuffled = [members[int(i)] for i in order]
        quotas = [f * n for f in fractions]
        base = [int(q) for q in quotas]
        remainders = [q - b for q, b in zip(quotas, base)]
        leftover = n - sum(base)
        for j in sorted(range(parts), key=lambda j: -remainders[j])[:leftover]:
            base[j] += 1
        cursor = 0
        for j, take in enumerate(base):
            part_indices[j].extend(shuffled[cursor:cursor + take])
            cursor += take
    return [dataset.subset(sorted(indices)) for indices in part_indices]


# ---------------------------------------------------------------------------
# Canonical target-task fixtures (the "five small target datasets")

TARGET_TASKS = {
    "gray2": ("gray", 2, 7001),
    "color4": ("color", 4, 7002),
    "gray3": ("gray", 3, 7003),
    "color2": ("color", 2, 7004),
    "gray5": ("gray", 5, 7005),
}


def target_task(name, samples_per_class=50, size=64):
    """One of the five frozen synthetic target tasks by name."""
    if name not in TARGET_TASKS:
        raise DataError(f"unknown target task {name!r} "
                        f"(choose from {sorted(TARGET_TASKS)})")
    kind, num_classes, seed = TARGET_TASKS[name]
    return synth_dataset(kind, num_classes, samples_per_class, size, seed)
