"""
Synthetic forgery corpus and dataset I/O.
Generates real images (smooth fields with an elliptical region) and fakes
spliced into that region. Every fake carries the same feathered boundary seam
plus one artifact unique to its method. Also reads/writes manifests, imports
external image folders and serves paired real/fake batches.
"""

import functools
import json
import logging
import queue
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .filters import AhfKernel, ahf_apply
from .losses import FAKE, REAL, REAL_METHOD_CLASS
from .utils import unknown_name_message

logger = logging.getLogger(__name__)


GENERATOR_VERSION = "1"
MANIFEST_NAME = "manifest.json"

METHODS = ("splice_noise", "splice_block", "splice_hue")
REAL_METHOD = "real"
SPLITS = ("train", "val", "test")
IMAGE_FORMATS = ("png", "bin")
# decoded images kept per loader; None is unbounded
IMAGE_CACHE_SIZE = 4096

# Width (pixels) of the linear feather ramp outside the ellipse
FEATHER_WIDTH = 2.0
# Peak amplitude of the alternating pattern inside the feather band
SEAM_AMPLITUDE = 0.08
MAX_WAVES = 6
BLOCK_SIZE = 8
HUE_GAINS = (1.25, 1.0, 0.75)

BIN_MAGIC = b"FSEM"
BIN_HEADER = struct.Struct("<4sIII")

# Independent random streams derived from the corpus seed
_STREAM_IMAGE = 1
_STREAM_SPLIT = 2


class CorpusError(Exception):
    """Raised for invalid corpus specs, manifests and unusable directories."""
    pass


@dataclass
class CorpusSpec:
    """What to generate: counts, methods, size, seed and split fractions."""
    n_real: int = 300
    n_fake_per_method: int = 150
    methods: Tuple[str, ...] = METHODS
    image_size: int = 32
    seed: int = 0
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    image_format: str = "png"

    def validate(self) -> "CorpusSpec":
        if self.n_real <= 0 or self.n_fake_per_method <= 0:
            raise CorpusError("n_real and n_fake_per_method must be positive")
        if not self.methods:
            raise CorpusError("At least one forgery method is required")
        for method in self.methods:
            if method not in METHODS:
                raise CorpusError(unknown_name_message("forgery method", method, METHODS))
        if len(set(self.methods)) != len(self.methods):
            raise CorpusError("Forgery methods must not repeat")
        if self.image_size < 8:
            raise CorpusError(f"image_size must be >= 8, got {self.image_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise CorpusError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        fractions = self.split_fractions
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
        if self.image_format not in IMAGE_FORMATS:
            raise CorpusError(f"image_format must be one of {IMAGE_FORMATS}, got '{self.image_format}'")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["methods"] = list(self.methods)
        data["split_fractions"] = list(self.split_fractions)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in data.items() if k in known}
        if "methods" in values:
            values["methods"] = tuple(values["methods"])
        if "split_fractions" in values:
            values["split_fractions"] = tuple(float(f) for f in values["split_fractions"])
        return cls(**values)


@dataclass
class Record:
    """One image: relative path, binary label y, method label and split."""
    path: str
    y: int
    method: str
    split: str
    meta: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"path": self.path, "y": self.y, "method": self.method, "split": self.split, "meta": self.meta}

    @classmethod
    def from_dict(cls, data: Dict) -> "Record":
        try:
            return cls(data["path"], int(data["y"]), data["method"], data["split"], dict(data.get("meta", {})))
        except KeyError as e:
            raise CorpusError(f"Manifest record missing field {e}")


@dataclass
class CorpusManifest:
    """Record list plus generator version and an echo of the generating spec."""
    records: List[Record]
    spec: Dict
    version: str = GENERATOR_VERSION
    root: Optional[Path] = None
    skipped: int = 0

    @property
    def image_size(self) -> int:
        return int(self.spec.get("image_size", 32))

    @property
    def methods(self) -> List[str]:
        """Fake methods in first-seen order."""
        seen = []
        for r in self.records:
            if r.y == FAKE and r.method not in seen:
                seen.append(r.method)
        return seen

    def select(self, split: Optional[str] = None, methods: Optional[Iterable[str]] = None,
               include_real: bool = True) -> List[Record]:
        return filter_records(self.records, split=split, methods=methods, include_real=include_real)

    def resolve(self, record: Union[Record, str]) -> Path:
        path = Path(record.path if isinstance(record, Record) else record)
        return path if path.is_absolute() or self.root is None else self.root / path

    def to_dict(self) -> Dict:
        return {
            "version": self.version,
            "spec": self.spec,
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Optional[str] = None) -> Path:
        if path is None:
            if self.root is None:
                raise CorpusError("Manifest has no root directory; pass a path")
            path = self.root / MANIFEST_NAME
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(self.to_json(), encoding="utf-8")
        return output_path

    @classmethod
    def load(cls, path: str, check_files: bool = True) -> "CorpusManifest":
        """
        Read a manifest from a JSON file or a corpus directory.

        Raises:
            OSError: The file cannot be read
            CorpusError: Schema errors, label inconsistencies or missing images
        """
        manifest_path = Path(path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        try:
            data = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CorpusError(f"Manifest {manifest_path} is not valid JSON: {e}")
        for key in ("version", "spec", "records"):
            if key not in data:
                raise CorpusError(f"Manifest {manifest_path} missing '{key}'")

        manifest = cls(
            records=[Record.from_dict(r) for r in data["records"]],
            spec=data["spec"],
            version=str(data["version"]),
            root=manifest_path.parent,
        )
        for r in manifest.records:
            if (r.y == REAL) != (r.method == REAL_METHOD) or r.y not in (FAKE, REAL):
                raise CorpusError(f"Record {r.path}: method '{r.method}' inconsistent with y={r.y}")
            if r.split not in SPLITS:
                raise CorpusError(f"Record {r.path}: unknown split '{r.split}'")
        if check_files:
            missing = [r.path for r in manifest.records if not manifest.resolve(r).exists()]
            if missing:
                raise CorpusError(f"{len(missing)} manifest path(s) do not exist, e.g. {missing[0]}")
        return manifest


def filter_records(records: Sequence[Record], split: Optional[str] = None,
                   methods: Optional[Iterable[str]] = None, include_real: bool = True) -> List[Record]:
    """Keep records in a split whose method is listed (reals kept unless include_real=False)."""
    wanted = None if methods is None else set(methods)
    selected = []
    for r in records:
        if split is not None and r.split != split:
            continue
        if r.y == REAL:
            if include_real:
                selected.append(r)
        elif wanted is None or r.method in wanted:
            selected.append(r)
    return selected


def write_bin(image: np.ndarray, path: str) -> None:
    """Write a C x H x W float32 array with the 16-byte FSEM header."""
    array = np.ascontiguousarray(image, dtype="<f4")
    if array.ndim != 3:
        raise CorpusError(f".bin images must be C x H x W, got shape {array.shape}")
    channels, height, width = array.shape
    with open(path, "wb") as f:
        f.write(BIN_HEADER.pack(BIN_MAGIC, channels, height, width))
        f.write(array.tobytes())


def read_bin(path: str) -> np.ndarray:
    """Read an FSEM container back into a C x H x W float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < BIN_HEADER.size:
        raise CorpusError(f"{path}: truncated .bin header")
    magic, channels, height, width = BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    expected = BIN_HEADER.size + 4 * channels * height * width
    if len(raw) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=BIN_HEADER.size)
    return data.reshape(channels, height, width).astype(np.float32)


def load_image(path: Path, image_size: int) -> np.ndarray:
    """
    Load an image as a 3 x S x S float32 array in [0, 1].

    PNG and other raster formats are converted to RGB and bilinearly resized
    when their size differs; .bin containers are returned as stored.
    """
    path = Path(path)
    if path.suffix == ".bin":
        return read_bin(str(path))
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _save(image: np.ndarray, path: Path, image_format: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if image_format == "bin":
        write_bin(image.astype(np.float32), str(path))
    else:
        Image.fromarray(_to_uint8(image)).save(path, format="PNG")


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Base colour plus at most six low-frequency sinusoids per channel."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    image = np.broadcast_to(rng.uniform(0.25, 0.75, size=(3, 1, 1)), (3, size, size)).copy()
    for _ in range(int(rng.integers(2, MAX_WAVES + 1))):
        fx, fy = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amplitude = rng.uniform(0.02, 0.08, size=(3, 1, 1))
        image += amplitude * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    return np.clip(image, 0.0, 1.0)


def _ellipse(rng: np.random.Generator, size: int) -> List[float]:
    cx, cy = rng.uniform(0.4, 0.6, size=2) * size
    a, b = rng.uniform(0.2, 0.3, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    return [float(cx), float(cy), float(a), float(b), float(theta)]


def ellipse_radius(size: int, region: Sequence[float]) -> np.ndarray:
    """Normalized elliptical radius per pixel (1.0 on the boundary)."""
    cx, cy, a, b, theta = region
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def region_mask(size: int, region: Sequence[float], dilation: float = 0.0) -> np.ndarray:
    """Boolean mask of the ellipse dilated by `dilation` pixels."""
    radius = ellipse_radius(size, region)
    return radius <= 1.0 + dilation / min(region[2], region[3])


def _real_image(spec: CorpusSpec, index: int) -> Tuple[np.ndarray, List[float]]:
    rng = np.random.default_rng([spec.seed, _STREAM_IMAGE, index])
    size = spec.image_size
    background = _smooth_field(rng, size)
    content = _smooth_field(rng, size)
    region = _ellipse(rng, size)
    radius = ellipse_radius(size, region)
    # one-pixel anti-aliased edge for the natural region
    pixels = (radius - 1.0) * min(region[2], region[3])
    inside = np.clip(0.5 - pixels, 0.0, 1.0)
    return inside * content + (1.0 - inside) * background, region


def _unique_artifact(method: str, donor: np.ndarray) -> np.ndarray:
    size = donor.shape[-1]
    if method == "splice_noise":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        return donor + 0.06 * np.sin(2.0 * np.pi * (xx + yy) / 3.0)
    if method == "splice_block":
        blocks = -(-size // BLOCK_SIZE)
        padded = np.pad(donor, ((0, 0), (0, blocks * BLOCK_SIZE - size), (0, blocks * BLOCK_SIZE - size)), mode="edge")
        means = padded.reshape(3, blocks, BLOCK_SIZE, blocks, BLOCK_SIZE).mean(axis=(2, 4))
        quantized = np.round(means * 16.0) / 16.0
        return np.repeat(np.repeat(quantized, BLOCK_SIZE, axis=1), BLOCK_SIZE, axis=2)[:, :size, :size]
    if method == "splice_hue":
        return donor * np.asarray(HUE_GAINS, dtype=np.float64)[:, None, None]
    raise CorpusError(f"Unknown forgery method '{method}'")


def _fake_image(spec: CorpusSpec, index: int, method: str, reals: Sequence[Tuple[np.ndarray, List[float]]]
                ) -> Tuple[np.ndarray, int, List[float]]:
    rng = np.random.default_rng([spec.seed, _STREAM_IMAGE, index])
    size = spec.image_size
    base = int(rng.integers(len(reals)))
    base_image, region = reals[base]

    donor = _unique_artifact(method, _smooth_field(rng, size))
    radius = ellipse_radius(size, region)
    pixels = (radius - 1.0) * min(region[2], region[3])
    alpha = np.clip(1.0 - pixels / FEATHER_WIDTH, 0.0, 1.0)
    alpha[pixels <= 0.0] = 1.0

    yy, xx = np.mgrid[0:size, 0:size]
    checker = np.where((xx + yy) % 2 == 0, 1.0, -1.0)
    seam = SEAM_AMPLITUDE * 4.0 * alpha * (1.0 - alpha) * checker

    fake = alpha * donor + (1.0 - alpha) * base_image + seam
    outside = alpha == 0.0
    fake = np.where(outside, base_image, np.clip(fake, 0.0, 1.0))
    return fake, base, region


def _assign_splits(count: int, fractions: Sequence[float], rng: np.random.Generator) -> List[str]:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    n_train = min(n_train, count)
    n_val = min(n_val, count - n_train)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val)
    order = rng.permutation(count)
    assigned = [""] * count
    for position, index in enumerate(order):
        assigned[int(index)] = labels[position]
    return assigned


def gen_corpus(spec: CorpusSpec, out_dir: str, workers: int = 1) -> CorpusManifest:
    """
    Generate a corpus and its manifest under out_dir.

    Reals come first (indices 0..n_real-1), then fakes grouped by method.
    Each image draws from its own seed stream, so output bytes depend only on
    (spec, seed) and not on the number of workers.

    Raises:
        CorpusError: Invalid spec
        OSError: out_dir not writable
    """
    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ext = "bin" if spec.image_format == "bin" else "png"

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        reals = list(pool.map(lambda i: _real_image(spec, i), range(spec.n_real)))

        jobs = []
        index = spec.n_real
        for method in spec.methods:
            for k in range(spec.n_fake_per_method):
                jobs.append((index, method, k))
                index += 1
        fakes = list(pool.map(lambda job: _fake_image(spec, job[0], job[1], reals), jobs))

    records: List[Record] = []
    split_rng = np.random.default_rng([spec.seed, _STREAM_SPLIT])
    real_splits = _assign_splits(spec.n_real, spec.split_fractions, split_rng)
    for i, (image, region) in enumerate(reals):
        path = Path("real") / f"real_{i:05d}.{ext}"
        _save(image, root / path, spec.image_format)
        records.append(Record(path.as_posix(), REAL, REAL_METHOD, real_splits[i],
                              {"index": i, "seam": False, "region": region}))

    for m, method in enumerate(spec.methods):
        splits = _assign_splits(spec.n_fake_per_method, spec.split_fractions, split_rng)
        for k in range(spec.n_fake_per_method):
            job = m * spec.n_fake_per_method + k
            image, base, region = fakes[job]
            path = Path("fake") / method / f"{method}_{k:05d}.{ext}"
            _save(image, root / path, spec.image_format)
            records.append(Record(path.as_posix(), FAKE, method, splits[k],
                                  {"index": jobs[job][0], "base": base, "seam": True, "region": region}))

    manifest = CorpusManifest(records=records, spec=spec.to_dict(), root=root)
    manifest.save()
    logger.info(f"Generated {spec.n_real} real and {len(jobs)} fake images in {root}")
    return manifest


def import_images(src_dir: str, image_size: int = 32, seed: int = 0,
                  split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)) -> CorpusManifest:
    """
    Build a manifest from a `<label>/<method>/<file>` directory tree.

    label is `real` or `fake`; real images get method `real` whatever their
    method folder is called. Unreadable or non-image files are skipped with a
    warning and counted in manifest.skipped. Images are resized at load time.

    Raises:
        CorpusError: Missing directory or no usable images
    """
    root = Path(src_dir)
    if not root.is_dir():
        raise CorpusError(f"Import directory not found: {src_dir}")

    groups: Dict[str, List[Tuple[str, int]]] = {}
    skipped = 0
    for path in sorted(p for p in root.glob("*/*/*") if p.is_file()):
        label, method = path.parts[-3], path.parts[-2]
        if label not in ("real", "fake"):
            logger.warning(f"Skipping {path}: label folder must be 'real' or 'fake'")
            skipped += 1
            continue
        try:
            with Image.open(path) as img:
                img.verify()
        except (UnidentifiedImageError, OSError) as e:
            logger.warning(f"Skipping unreadable image {path}: {e}")
            skipped += 1
            continue
        y = REAL if label == "real" else FAKE
        key = REAL_METHOD if y == REAL else method
        groups.setdefault(key, []).append((path.relative_to(root).as_posix(), y))

    if not groups:
        raise CorpusError(f"No images found under {src_dir} (expected <label>/<method>/*.png)")

    rng = np.random.default_rng([seed, _STREAM_SPLIT])
    records = []
    for key in sorted(groups, key=lambda k: (k != REAL_METHOD, k)):
        entries = groups[key]
        splits = _assign_splits(len(entries), split_fractions, rng)
        records.extend(Record(p, y, key, split) for (p, y), split in zip(entries, splits))

    spec = {
        "image_size": image_size,
        "seed": seed,
        "split_fractions": list(split_fractions),
        "methods": sorted(k for k in groups if k != REAL_METHOD),
        "imported": True,
    }
    if skipped:
        logger.warning(f"Skipped {skipped} file(s) during import")
    logger.info(f"Imported {len(records)} images from {root}")
    return CorpusManifest(records=records, spec=spec, root=root, skipped=skipped)


@dataclass
class PairedBatch:
    """batch/2 fakes and batch/2 reals with their high-frequency streams; fake i pairs with real i."""
    x_fake: torch.Tensor
    x_real: torch.Tensor
    xh_fake: torch.Tensor
    xh_real: torch.Tensor
    y: List[int]
    s: List[int]

    @property
    def x(self) -> torch.Tensor:
        return torch.cat([self.x_fake, self.x_real])

    @property
    def xh(self) -> torch.Tensor:
        return torch.cat([self.xh_fake, self.xh_real])

    def __len__(self) -> int:
        return len(self.y)


class PairLoader:
    """
    Seeded paired-batch loader over one split of a manifest.

    Each pass over the loader is one epoch: reals and fakes are shuffled
    independently with a generator seeded by (seed, epoch) and drawn without
    replacement until either class runs out.
    Decoded images sit in an LRU cache of cache_size entries.
    """

    def __init__(
        self,
        manifest: CorpusManifest,
        batch_size: int,
        seed: int,
        highpass: AhfKernel,
        split: str = "train",
        methods: Optional[Sequence[str]] = None,
        cache_size: Optional[int] = IMAGE_CACHE_SIZE,
    ):
        if batch_size < 2 or batch_size % 2:
            raise CorpusError(f"batch size must be even and >= 2, got {batch_size}")
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = seed
        self.highpass = highpass
        self.split = split
        self.methods = list(methods) if methods is not None else manifest.methods
        self.method_classes = {m: i + 1 for i, m in enumerate(self.methods)}
        self.epoch = 0

        records = manifest.select(split=split, methods=self.methods)
        self.reals = [r for r in records if r.y == REAL]
        self.fakes = [r for r in records if r.y == FAKE]
        if not self.reals or not self.fakes:
            raise CorpusError(
                f"Split '{split}' needs both classes: {len(self.reals)} real, {len(self.fakes)} fake"
            )
        self._load = functools.lru_cache(maxsize=cache_size)(self._decode)

    def __len__(self) -> int:
        half = self.batch_size // 2
        return min(len(self.reals), len(self.fakes)) // half

    def _decode(self, path: str) -> torch.Tensor:
        array = load_image(self.manifest.resolve(path), self.manifest.image_size)
        return torch.from_numpy(array).to(torch.get_default_dtype())

    def _image(self, record: Record) -> torch.Tensor:
        return self._load(record.path)

    def cache_info(self):
        """Hit/miss counters and size of the decoded-image cache."""
        return self._load.cache_info()

    @torch.no_grad()
    def _stack(self, records: Sequence[Record]) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.stack([self._image(r) for r in records])
        return x, ahf_apply(self.highpass, x)

    def batch(self, fakes: Sequence[Record], reals: Sequence[Record]) -> PairedBatch:
        x_fake, xh_fake = self._stack(fakes)
        x_real, xh_real = self._stack(reals)
        y = [FAKE] * len(fakes) + [REAL] * len(reals)
        s = [self.method_classes[r.method] for r in fakes] + [REAL_METHOD_CLASS] * len(reals)
        return PairedBatch(x_fake, x_real, xh_fake, xh_real, y, s)

    def __iter__(self) -> Iterator[PairedBatch]:
        rng = np.random.default_rng([self.seed, self.epoch])
        self.epoch += 1
        real_order = rng.permutation(len(self.reals))
        fake_order = rng.permutation(len(self.fakes))
        half = self.batch_size // 2
        for step in range(len(self)):
            window = slice(step * half, (step + 1) * half)
            yield self.batch(
                [self.fakes[i] for i in fake_order[window]],
                [self.reals[i] for i in real_order[window]],
            )


def load_pairs(manifest: CorpusManifest, batch_size: int, seed: int, highpass: AhfKernel,
               split: str = "train", methods: Optional[Sequence[str]] = None) -> PairLoader:
    """Create a paired-batch loader; iterate it once per epoch."""
    return PairLoader(manifest, batch_size, seed, highpass, split=split, methods=methods)


_END = object()
_PUT_TIMEOUT = 0.05
PREFETCH_THREAD = "forgesem-prefetch"


def prefetch(batches: Iterable, depth: int = 2) -> Iterator:
    """
    Produce items from a background thread through a bounded queue.

    Order is preserved; exceptions raised by the producer are re-raised here.
    Closing the iterator early (break, exception in the consumer) stops the
    producer and joins its thread.
    """
    buffer: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
    stop = threading.Event()

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=_PUT_TIMEOUT)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for item in batches:
                if not offer(item):
                    return
        except BaseException as e:  # handed to the consumer
            offer(e)
            return
        offer(_END)

    worker = threading.Thread(target=produce, name=PREFETCH_THREAD, daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _END:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while True:
            try:
                buffer.get_nowait()
            except queue.Empty:
                break
        worker.join()
