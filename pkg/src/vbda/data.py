"""Domain-pair datasets: seeded synthetic generators, IDX digits, batching."""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import RngStream
from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ContractError(f"x {self.x.shape} and y {self.y.shape} do not line up")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]


class DomainPair:
    """Labelled source data plus target inputs.

    Target labels exist only for evaluation and are reachable solely through
    :meth:`target_eval`; batching and the training objective never call it.
    """

    def __init__(self, source: Dataset, target: Dataset):
        if source.d_x != target.d_x or source.n_classes != target.n_classes:
            raise ContractError("source and target disagree on input width or class count")
        self.source = source
        self.target_x = target.x
        self._target = target

    @property
    def n_classes(self) -> int:
        return self.source.n_classes

    @property
    def d_x(self) -> int:
        return self.source.d_x

    def target_eval(self) -> Dataset:
        return self._target


@dataclass
class DomainBatch:
    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray


DEFAULT_NOISE = {"nuisance_correlation": 0.43, "rotated_moons": 0.1}


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "nuisance_correlation"
    n: int = 2000
    n_classes: int = 2
    d_signal: int = 2
    d_nuisance: int = 16
    rho: float = 0.95
    angle: float = 30.0
    noise: float | None = None  # per-kind default, see DEFAULT_NOISE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise is None:
            object.__setattr__(self, "noise", DEFAULT_NOISE.get(self.kind, 0.0))

    def validate(self) -> None:
        if self.kind not in ("nuisance_correlation", "rotated_moons"):
            raise ContractError(f"unknown synthetic task kind {self.kind!r}")
        if self.n < 1:
            raise ContractError("n must be positive")
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must lie in [0, 1], got {self.rho}")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        if self.kind == "nuisance_correlation":
            if self.d_signal < 1 or (self.n_classes > 2 and self.d_signal < 2):
                raise ContractError("d_signal must be >= 1 (>= 2 for more than two classes)")
            if self.d_nuisance < 1:
                raise ContractError("d_nuisance must be positive")

    @property
    def d_x(self) -> int:
        return 2 if self.kind == "rotated_moons" else self.d_signal + self.d_nuisance


def _balanced_labels(rng: RngStream, n: int, k: int) -> np.ndarray:
    return (np.arange(n) % k)[rng.permutation(n)].astype(np.int64)


def _class_centres(k: int, width: int) -> np.ndarray:
    """Unit-radius centres, one per class, spread on a circle in the first two
    coordinates (on a line when width is 1)."""
    centres = np.zeros((k, width))
    if width == 1:
        centres[:, 0] = np.linspace(-1.0, 1.0, k)
    else:
        theta = 2.0 * np.pi * np.arange(k) / k
        centres[:, 0], centres[:, 1] = np.cos(theta), np.sin(theta)
    return centres


def _nuisance_centres(k: int, width: int) -> np.ndarray:
    """The class-circle layout tiled over consecutive coordinate pairs, so the
    background code is visible in every nuisance dimension."""
    base = _class_centres(k, 2 if width >= 2 else 1)
    reps = math.ceil(width / base.shape[1])
    return np.tile(base, (1, reps))[:, :width]


def _nuisance_domain(spec: SyntheticSpec, rng: RngStream, rho: float) -> Dataset:
    n, k = spec.n, spec.n_classes
    y = _balanced_labels(rng, n, k)
    coupled = rng.random(n) < rho
    code = np.where(coupled, y, rng.integers(0, k, n)).astype(np.int64)
    signal = _class_centres(k, spec.d_signal)[y] + spec.noise * rng.normal((n, spec.d_signal))
    nuisance = _nuisance_centres(k, spec.d_nuisance)[code] + spec.noise * rng.normal((n, spec.d_nuisance))
    x = np.hstack([signal, nuisance])
    return Dataset(x, y, k, meta={"nuisance_code": code})


def generate_nuisance_task(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Source/target pair whose only shift is a label-background coupling.

    Signal coordinates hold class-conditional Gaussians shared by both
    domains. Nuisance coordinates hold a categorical background code embedded
    the same way; the code equals the label with probability ``rho`` (and is
    uniform otherwise) in the source, and is independent of the label in the
    target. Labels are balanced, so the code marginal is uniform in both.
    """
    spec.validate()
    if spec.kind != "nuisance_correlation":
        raise ContractError(f"expected a nuisance_correlation spec, got {spec.kind!r}")
    root = RngStream(spec.seed)
    source = _nuisance_domain(spec, root.spawn("source"), spec.rho)
    target = _nuisance_domain(spec, root.spawn("target"), 0.0)
    return source, target


def _moons(rng: RngStream, n: int, noise: float) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(rng, n, 2)
    t = rng.uniform(0.0, np.pi, n)
    x = np.where(
        (y == 0)[:, None],
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    x = x - np.array([0.5, 0.25]) + noise * rng.normal((n, 2))
    return x, y


def moon_centroids() -> np.ndarray:
    """Exact class means of the noiseless, centred half-circles."""
    c = 2.0 / np.pi
    return np.array([[-0.5, c - 0.25], [0.5, 0.25 - c]])


def generate_rotated_moons(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Two interleaved half-circles (centred on the origin); the target copy is
    rotated by ``spec.angle`` degrees about the origin."""
    spec.validate()
    if spec.n_classes != 2:
        raise ContractError("rotated moons are defined for exactly two classes")
    root = RngStream(spec.seed)
    xs, ys = _moons(root.spawn("source"), spec.n, spec.noise)
    xt, yt = _moons(root.spawn("target"), spec.n, spec.noise)
    a = np.deg2rad(spec.angle)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return Dataset(xs, ys, 2), Dataset(xt @ rot.T, yt, 2)


def generate(spec: SyntheticSpec) -> DomainPair:
    make = generate_rotated_moons if spec.kind == "rotated_moons" else generate_nuisance_task
    return DomainPair(*make(spec))


# ---------------------------------------------------------------------------
# batching


def _index_blocks(rng: RngStream, n: int, b: int) -> Iterator[np.ndarray]:
    while True:
        perm = rng.permutation(n)
        for i in range(n // b):
            yield perm[i * b:(i + 1) * b]


def batch_iterator(pair: DomainPair, b_s: int, b_t: int, rng: RngStream) -> Iterator[DomainBatch]:
    """Endless stream of batches; each domain reshuffles at its own epoch
    boundary and drops its short tail."""
    n_s, n_t = len(pair.source), pair.target_x.shape[0]
    if n_s == 0 or n_t == 0:
        raise ContractError("cannot batch an empty dataset")
    if not (1 <= b_s <= n_s and 1 <= b_t <= n_t):
        raise ContractError(f"batch sizes ({b_s}, {b_t}) must lie in [1, dataset size] ({n_s}, {n_t})")
    src = _index_blocks(rng.spawn("source"), n_s, b_s)
    tgt = _index_blocks(rng.spawn("target"), n_t, b_t)
    xs, ys, xt = pair.source.x, pair.source.y, pair.target_x
    for i, j in zip(src, tgt):
        yield DomainBatch(xs[i], ys[i], xt[j])


# ---------------------------------------------------------------------------
# IDX digits


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, n_dims: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * n_dims
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic number", offset=len(raw))
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(n_dims))
    expected = header + math.prod(dims)
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, found {len(raw)}",
                          offset=len(raw))
    return dims, raw[header:expected]


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (rank 1 labels or rank 3 images)."""
    array = np.asarray(array)
    if array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    elif array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    else:
        raise ContractError("IDX writer handles label vectors and image stacks only")
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages the input cells covered by output cell i (fractional overlap)."""
    step = n_in / n_out
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / step


def downsample(images: np.ndarray, size: int = 16) -> np.ndarray:
    rows = area_matrix(images.shape[1], size)
    cols = area_matrix(images.shape[2], size)
    return np.einsum("ij,njk,lk->nil", rows, images, cols)


def load_idx(images_path, labels_path, downsample_to_16: bool = False, limit: int | None = None,
             n_classes: int | None = None, crop: int = 0) -> Dataset:
    """Read an IDX image/label pair, scaled to [0, 1] and flattened.

    ``crop`` strips that many pixels from every border before the optional
    area-average resize to 16x16.
    """
    (n, h, w), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_lab != n:
        raise FormatError(f"{images_path} holds {n} images but {labels_path} holds {n_lab} labels")
    count = n if limit is None else min(n, int(limit))
    images = np.frombuffer(pixels, dtype=np.uint8, count=count * h * w).reshape(count, h, w) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8, count=count).astype(np.int64)
    if crop:
        if 2 * crop >= min(h, w):
            raise ContractError(f"crop {crop} leaves nothing of {h}x{w} images")
        images = images[:, crop:h - crop, crop:w - crop]
    if downsample_to_16:
        images = downsample(images, 16)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    return Dataset(np.ascontiguousarray(images.reshape(count, -1)), y, k)


def prepare_digits(out_dir, n: int = 2000, seed: int = 0) -> dict[str, Path]:
    """Write the digits proxy pair as IDX files.

    Source: ``n`` MNIST images (28x28) from the 5000-image subset bundled
    with mlxtend. Target: the UCI handwritten digits bundled with
    scikit-learn (8x8, 17 grey levels), upscaled 2x to 16x16; used in place
    of USPS, which cannot be fetched offline. Returns the four file paths.
    """
    from mlxtend.data import mnist_data
    from sklearn.datasets import load_digits

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x_m, y_m = mnist_data()
    pick_idx = np.sort(RngStream(seed).permutation(len(y_m))[:n])
    mnist_images = x_m[pick_idx].reshape(-1, 28, 28).round().astype(np.uint8)
    digits = load_digits()
    small = digits.images[:n] * (255.0 / 16.0)
    big = np.kron(small, np.ones((1, 2, 2))).round().astype(np.uint8)
    paths = {
        "source_images": out / "mnist-images.idx",
        "source_labels": out / "mnist-labels.idx",
        "target_images": out / "uci16-images.idx",
        "target_labels": out / "uci16-labels.idx",
    }
    write_idx(paths["source_images"], mnist_images)
    write_idx(paths["source_labels"], y_m[pick_idx].astype(np.uint8))
    write_idx(paths["target_images"], big)
    write_idx(paths["target_labels"], digits.target[:n].astype(np.uint8))
    return paths


# ---------------------------------------------------------------------------
# dataset cache: textual header line, then float64 rows of [x..., label]


def save_cache(path, ds: Dataset) -> None:
    header = f"vbda-dataset n={len(ds)} d_x={ds.d_x} K={ds.n_classes}\n".encode()
    rows = np.hstack([ds.x, ds.y[:, None].astype(np.float64)]).astype("<f8")
    Path(path).write_bytes(header + rows.tobytes())


def load_cache(path) -> Dataset:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0 or not raw.startswith(b"vbda-dataset "):
        raise FormatError(f"{path}: missing dataset header", offset=0)
    fields = dict(kv.split("=") for kv in raw[:end].decode().split()[1:])
    n, d_x, k = int(fields["n"]), int(fields["d_x"]), int(fields["K"])
    body = raw[end + 1:]
    if len(body) != n * (d_x + 1) * 8:
        raise FormatError(f"{path}: expected {n} rows of {d_x + 1} values", offset=end + 1 + len(body))
    rows = np.frombuffer(body, dtype="<f8").reshape(n, d_x + 1)
    return Dataset(rows[:, :d_x].copy(), rows[:, d_x].astype(np.int64), k)
