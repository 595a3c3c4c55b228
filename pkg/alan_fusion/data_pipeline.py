"""Grayscale image loading, patching, degradation and synthetic pair generation.

All images are single-channel float64 arrays in [0, 1]. Every random choice is
drawn from a ``numpy.random.Generator`` seeded by the caller so that emitted
samples are a pure function of (inputs, seed).
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset

from .const import (
    DEFAULT_BLUR_SIGMA_RANGE,
    DEFAULT_BRIGHTNESS_RANGE,
    DEFAULT_NOISE_SIGMA_RANGE,
    ENV_THREADS,
    IMAGE_SUFFIXES,
    PAIR_KIND_CROSS_MODAL,
    PAIR_KIND_MULTI_FOCUS,
    PAIR_KIND_RECON,
    PAIR_KINDS,
    PAIR_KINDS_WITH_GT,
    PREPARE_CVS_SYNTH,
    PREPARE_KINDS,
    PREPARE_MULTIFOCUS,
)
from .exceptions import ImageLoadError, ManifestError, PatchSizeError, ShapeMismatchError

_LOGGER = logging.getLogger(__name__)

# ITU-R BT.601 luma weights
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_EIGHT_BIT_MODES = {"L", "P", "RGB", "RGBA", "LA", "CMYK", "YCbCr"}
_SIXTEEN_BIT_MODES = {"I;16", "I;16B", "I;16L", "I;16N", "I"}

# Low-light rendering used for the enhanced-vision modality
_EVS_SPEC_RANGES = {
    "brightness_range": (0.3, 0.5),
    "blur_sigma_range": (0.0, 0.0),
    "noise_sigma_range": (0.02, 0.05),
}
_SVS_SMOOTH_SIGMA = 1.0
_MULTIFOCUS_BLUR_RANGE = (1.5, 3.0)


@dataclass(frozen=True)
class Image:
    """Single-channel image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ShapeMismatchError(f"image must be 2-D, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ShapeMismatchError("image must have a positive width and height")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image contains non-finite values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return the image as a (1, 1, H, W) tensor."""
        return torch.tensor(self.pixels, dtype=dtype).reshape(1, 1, self.height, self.width)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> Image:
        """Build an image from any tensor holding a single H x W plane, clipped to [0, 1]."""
        plane = tensor.detach().to(torch.float64).cpu().numpy()
        plane = np.squeeze(plane)
        if plane.ndim != 2:
            raise ShapeMismatchError(f"tensor does not hold a single plane: {tuple(tensor.shape)}")
        return cls(np.clip(plane, 0.0, 1.0))


@dataclass(frozen=True)
class ImagePair:
    """Two registered images of the same scene.

    For ``recon`` pairs ``a`` is the degraded input and ``b`` the clean target;
    ``multi_focus`` pairs may carry their all-in-focus ``ground_truth``.
    """

    a: Image
    b: Image
    pair_kind: str
    ground_truth: Image | None = None

    def __post_init__(self) -> None:
        if self.pair_kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.pair_kind!r}")
        if self.a.pixels.shape != self.b.pixels.shape:
            raise ShapeMismatchError(
                f"pair members differ in size: {self.a.pixels.shape} vs {self.b.pixels.shape}"
            )
        if (
            self.ground_truth is not None
            and self.ground_truth.pixels.shape != self.a.pixels.shape
        ):
            raise ShapeMismatchError("ground truth differs in size from the pair")


@dataclass(frozen=True)
class DegradationSpec:
    """Ranges sampled by :func:`degrade`."""

    brightness_range: tuple[float, float] = DEFAULT_BRIGHTNESS_RANGE
    blur_sigma_range: tuple[float, float] = DEFAULT_BLUR_SIGMA_RANGE
    noise_sigma_range: tuple[float, float] = DEFAULT_NOISE_SIGMA_RANGE
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("brightness_range", "blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            if lo < 0:
                raise ValueError(f"{name}: bounds must be nonnegative")
        if self.brightness_range[0] <= 0:
            raise ValueError("brightness_range: lower bound must be positive")

    def with_seed(self, seed: int) -> DegradationSpec:
        return DegradationSpec(
            self.brightness_range, self.blur_sigma_range, self.noise_sigma_range, seed
        )


@dataclass(frozen=True)
class ManifestRecord:
    """One manifest line: paths relative to the manifest root."""

    path_a: str
    path_b: str
    path_gt: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Pairs listed in a tab-separated manifest file."""

    root: Path
    pair_kind: str
    records: tuple[ManifestRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.pair_kind not in PAIR_KINDS:
            raise ManifestError(f"unknown pair kind {self.pair_kind!r}")
        needs_gt = self.pair_kind in PAIR_KINDS_WITH_GT
        for record in self.records:
            if needs_gt != (record.path_gt is not None):
                raise ManifestError(
                    f"{self.pair_kind} records must {'' if needs_gt else 'not '}"
                    f"carry a ground-truth path: {record}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, relative: str) -> Path:
        return self.root / relative


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def load_grayscale(path: str | os.PathLike[str]) -> Image:
    """Load an 8- or 16-bit raster as a grayscale image in [0, 1].

    Colour inputs are reduced with the 0.299/0.587/0.114 luminance weights on
    the exact channel values (no intermediate 8-bit rounding).
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise ImageLoadError(f"image file not found: {file_path}")
    try:
        with PILImage.open(file_path) as raw:
            raw.load()
            mode = raw.mode
            if mode in _SIXTEEN_BIT_MODES:
                pixels = np.asarray(raw, dtype=np.float64) / 65535.0
            elif mode in _EIGHT_BIT_MODES:
                if mode == "L":
                    pixels = np.asarray(raw, dtype=np.float64) / 255.0
                else:
                    rgb = np.asarray(raw.convert("RGB"), dtype=np.float64) / 255.0
                    pixels = rgb @ _LUMA_WEIGHTS
            else:
                raise ImageLoadError(f"unsupported image mode {mode!r}: {file_path}")
    except (UnidentifiedImageError, OSError, SyntaxError) as err:
        raise ImageLoadError(f"cannot decode image {file_path}: {err}") from err
    if pixels.size == 0:
        raise ImageLoadError(f"image has zero area: {file_path}")
    _LOGGER.debug("Loaded %s (%s, %dx%d)", file_path, mode, pixels.shape[1], pixels.shape[0])
    return Image(np.clip(pixels, 0.0, 1.0))


def save_grayscale(image: Image, path: str | os.PathLike[str]) -> Path:
    """Write an image as 8-bit PNG or PGM (chosen by suffix)."""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(image.pixels * 255.0).astype(np.uint8)
    fmt = "PPM" if file_path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    PILImage.fromarray(quantized).save(file_path, format=fmt)
    return file_path


def worker_count(requested: int = 0) -> int:
    """Return the data-loading worker count, capped by the threads env var."""
    cap = os.environ.get(ENV_THREADS)
    if cap is not None:
        try:
            return max(0, min(requested, int(cap)))
        except ValueError:
            _LOGGER.warning("Ignoring non-integer %s=%r", ENV_THREADS, cap)
    return max(0, requested)


def load_manifest(path: str | os.PathLike[str]) -> DatasetManifest:
    """Parse a manifest file.

    Format: an optional ``#kind<TAB><pair_kind>`` header line, then one record
    per line with two or three tab-separated paths relative to the manifest's
    directory. Blank lines and other ``#`` comments are ignored.
    """
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    pair_kind = PAIR_KIND_CROSS_MODAL
    records: list[ManifestRecord] = []
    for line_no, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split("\t")
            if parts[0].strip() == "kind" and len(parts) == 2:
                pair_kind = parts[1].strip()
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ManifestError(
                f"{manifest_path}:{line_no}: expected 2 or 3 tab-separated paths"
            )
        records.append(ManifestRecord(*fields))
    manifest = DatasetManifest(manifest_path.parent, pair_kind, tuple(records))
    for record in manifest.records:
        for relative in (record.path_a, record.path_b, record.path_gt):
            if relative is not None and not manifest.resolve(relative).is_file():
                raise ManifestError(f"{manifest_path}: referenced file missing: {relative}")
    _LOGGER.debug("Manifest %s: %d %s records", manifest_path, len(records), pair_kind)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike[str]) -> Path:
    """Write a manifest in the format read by :func:`load_manifest`."""
    manifest_path = Path(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"#kind\t{manifest.pair_kind}"]
    for record in manifest.records:
        fields = [record.path_a, record.path_b]
        if record.path_gt is not None:
            fields.append(record.path_gt)
        lines.append("\t".join(fields))
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


class ManifestDataset(Dataset[ImagePair]):
    """The pairs of a manifest, read from disk on access."""

    def __init__(self, manifest: DatasetManifest) -> None:
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, index: int) -> ImagePair:
        record = self.manifest.records[index]
        resolve = self.manifest.resolve
        gt = load_grayscale(resolve(record.path_gt)) if record.path_gt else None
        return ImagePair(
            load_grayscale(resolve(record.path_a)),
            load_grayscale(resolve(record.path_b)),
            self.manifest.pair_kind,
            gt,
        )


def _keep_sample(sample: Any) -> Any:
    return sample


def load_pairs(manifest: DatasetManifest, workers: int = 0) -> list[ImagePair]:
    """Load every manifest record, preserving manifest order."""
    loader = DataLoader(
        ManifestDataset(manifest),
        batch_size=None,
        shuffle=False,
        num_workers=worker_count(workers),
        collate_fn=_keep_sample,
    )
    return list(loader)


# ---------------------------------------------------------------------------
# Patching and augmentation
# ---------------------------------------------------------------------------


def patch_count(width: int, height: int, patch_w: int, patch_h: int, stride: int) -> int:
    """Closed-form number of patches cut by :func:`extract_patches`."""
    return ((width - patch_w) // stride + 1) * ((height - patch_h) // stride + 1)


def extract_patches(
    pair: ImagePair, patch_w: int, patch_h: int, stride: int | None = None
) -> list[ImagePair]:
    """Cut aligned patches from both images, row-major order.

    Without a stride the patches tile the image without overlap.
    """
    step_x = patch_w if stride is None else stride
    step_y = patch_h if stride is None else stride
    if min(step_x, step_y) < 1:
        raise PatchSizeError(f"stride must be at least 1, got {min(step_x, step_y)}")
    if patch_w > pair.a.width or patch_h > pair.a.height:
        raise PatchSizeError(
            f"patch {patch_w}x{patch_h} exceeds image {pair.a.width}x{pair.a.height}"
        )
    patches: list[ImagePair] = []
    for top in range(0, pair.a.height - patch_h + 1, step_y):
        for left in range(0, pair.a.width - patch_w + 1, step_x):
            window = (slice(top, top + patch_h), slice(left, left + patch_w))
            gt = pair.ground_truth
            patches.append(
                ImagePair(
                    Image(pair.a.pixels[window]),
                    Image(pair.b.pixels[window]),
                    pair.pair_kind,
                    Image(gt.pixels[window]) if gt is not None else None,
                )
            )
    return patches


@dataclass(frozen=True)
class AugmentOptions:
    hflip: bool = False
    vflip: bool = False
    random_crop: bool = False
    crop_fraction: float = 0.9

    @property
    def active(self) -> bool:
        return self.hflip or self.vflip or self.random_crop


def augment(pair: ImagePair, options: AugmentOptions, seed: int) -> ImagePair:
    """Apply the same random flips/crop to every member of a pair.

    A crop keeps ``crop_fraction`` of each side and is resized back by
    nearest-neighbour so patch geometry is unchanged.
    """
    rng = np.random.default_rng(seed)
    members = [pair.a.pixels, pair.b.pixels]
    if pair.ground_truth is not None:
        members.append(pair.ground_truth.pixels)
    if options.hflip and rng.random() < 0.5:
        members = [m[:, ::-1] for m in members]
    if options.vflip and rng.random() < 0.5:
        members = [m[::-1, :] for m in members]
    if options.random_crop:
        height, width = members[0].shape
        crop_h = max(1, int(height * options.crop_fraction))
        crop_w = max(1, int(width * options.crop_fraction))
        top = int(rng.integers(0, height - crop_h + 1))
        left = int(rng.integers(0, width - crop_w + 1))
        rows = top + (np.arange(height) * crop_h) // height
        cols = left + (np.arange(width) * crop_w) // width
        members = [m[np.ix_(rows, cols)] for m in members]
    images = [Image(np.ascontiguousarray(m)) for m in members]
    return ImagePair(images[0], images[1], pair.pair_kind, images[2] if len(images) > 2 else None)


# ---------------------------------------------------------------------------
# Degradation and synthesis
# ---------------------------------------------------------------------------


def degrade(img: Image, spec: DegradationSpec) -> Image:
    """Brightness scaling, then Gaussian blur, then additive Gaussian noise, clipped."""
    rng = np.random.default_rng(spec.seed)
    brightness = rng.uniform(*spec.brightness_range)
    blur_sigma = rng.uniform(*spec.blur_sigma_range)
    noise_sigma = rng.uniform(*spec.noise_sigma_range)
    pixels = img.pixels * brightness
    if blur_sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, sigma=blur_sigma, mode="reflect")
    if noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, noise_sigma, size=pixels.shape)
    return Image(np.clip(pixels, 0.0, 1.0))


def edge_rendering(img: Image, smooth_sigma: float = _SVS_SMOOTH_SIGMA) -> Image:
    """Sobel gradient magnitude of a smoothed image, scaled to a peak of 1."""
    smooth = ndimage.gaussian_filter(img.pixels, sigma=smooth_sigma, mode="nearest")
    magnitude = np.hypot(
        ndimage.sobel(smooth, axis=1, mode="nearest"),
        ndimage.sobel(smooth, axis=0, mode="nearest"),
    )
    peak = magnitude.max()
    if peak <= 1e-12:
        return Image(np.zeros_like(magnitude))
    return Image(magnitude / peak)


def synthesize_cross_modal_pair(base: Image, seed: int) -> ImagePair:
    """Stand-in for an enhanced/synthetic vision pair.

    Modality A is a noisy low-light rendering of ``base``; modality B is an
    edge map of a smoothed ``base``.
    """
    evs = degrade(base, DegradationSpec(seed=seed, **_EVS_SPEC_RANGES))  # type: ignore[arg-type]
    return ImagePair(evs, edge_rendering(base), PAIR_KIND_CROSS_MODAL)


def synthesize_multifocus_pair(base: Image, seed: int) -> ImagePair:
    """Split ``base`` into two complementary defocused views.

    A random straight boundary (vertical or horizontal) separates the region
    kept sharp in ``a`` from the region kept sharp in ``b``; ``base`` is the
    all-in-focus ground truth.
    """
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(*_MULTIFOCUS_BLUR_RANGE)
    blurred = ndimage.gaussian_filter(base.pixels, sigma=sigma, mode="reflect")
    mask = np.zeros(base.pixels.shape, dtype=bool)
    if rng.random() < 0.5:
        split = int(rng.integers(1, max(2, base.width)))
        mask[:, :split] = True
    else:
        split = int(rng.integers(1, max(2, base.height)))
        mask[:split, :] = True
    near = np.where(mask, base.pixels, blurred)
    far = np.where(mask, blurred, base.pixels)
    return ImagePair(
        Image(np.clip(near, 0.0, 1.0)),
        Image(np.clip(far, 0.0, 1.0)),
        PAIR_KIND_MULTI_FOCUS,
        base,
    )


def synthesize_recon_pair(base: Image, spec: DegradationSpec) -> ImagePair:
    """Degraded input and clean target for the reconstruction subtask."""
    return ImagePair(degrade(base, spec), base, PAIR_KIND_RECON)


def derive_seed(*parts: int) -> int:
    """A 32-bit seed that depends on every part, e.g. (seed, epoch, index)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class PatchDataset(Dataset[dict[str, torch.Tensor]]):
    """Training patches of one source as ``{"a", "b"[, "gt"]}`` tensors of shape (1, H, W).

    Augmentation is seeded by (seed, epoch, index), so a sample does not
    depend on which loader worker produced it. Call :meth:`set_epoch` before
    each epoch.
    """

    def __init__(
        self,
        patches: Sequence[ImagePair],
        options: AugmentOptions | None = None,
        seed: int = 0,
        with_ground_truth: bool = False,
    ) -> None:
        self.patches = list(patches)
        self.options = options or AugmentOptions()
        self.seed = seed
        self.with_ground_truth = with_ground_truth
        self.epoch = 0
        if with_ground_truth and any(pair.ground_truth is None for pair in self.patches):
            raise ManifestError("multi-focus pair lacks its all-in-focus ground truth")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        pair = self.patches[index]
        if self.options.active:
            pair = augment(pair, self.options, derive_seed(self.seed, self.epoch, index))
        sample = {"a": pair.a.to_tensor()[0], "b": pair.b.to_tensor()[0]}
        if self.with_ground_truth and pair.ground_truth is not None:
            sample["gt"] = pair.ground_truth.to_tensor()[0]
        return sample


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------


def list_images(directory: str | os.PathLike[str]) -> list[Path]:
    """Raster files directly inside ``directory``, sorted by name."""
    folder = Path(directory)
    if not folder.is_dir():
        raise ManifestError(f"input directory not found: {folder}")
    return sorted(
        path for path in folder.iterdir() if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES
    )


def _record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def prepare_dataset(
    input_dir: str | os.PathLike[str],
    out_manifest: str | os.PathLike[str],
    kind: str,
    seed: int = 0,
    spec: DegradationSpec | None = None,
) -> DatasetManifest:
    """Generate a paired dataset from base images and write its manifest.

    Generated images go to an ``images`` folder next to the manifest, one set
    per base image in name order; every record draws from its own seed derived
    from ``(seed, index)``.
    """
    if kind not in PREPARE_KINDS:
        raise ManifestError(f"unknown dataset kind {kind!r}; expected one of {tuple(PREPARE_KINDS)}")
    bases = list_images(input_dir)
    if not bases:
        raise ManifestError(f"no images found in {input_dir}")
    manifest_path = Path(out_manifest)
    image_dir = manifest_path.parent / "images"
    degradation = spec or DegradationSpec()
    records: list[ManifestRecord] = []
    try:
        for index, source in enumerate(bases):
            base = load_grayscale(source)
            record_seed = _record_seed(seed, index)
            gt: Image | None = None
            if kind == PREPARE_CVS_SYNTH:
                pair = synthesize_cross_modal_pair(base, record_seed)
            elif kind == PREPARE_MULTIFOCUS:
                pair = synthesize_multifocus_pair(base, record_seed)
                gt = pair.ground_truth
            else:
                pair = synthesize_recon_pair(base, degradation.with_seed(record_seed))
            stem = f"{index:05d}_{source.stem}"
            save_grayscale(pair.a, image_dir / f"{stem}_a.png")
            save_grayscale(pair.b, image_dir / f"{stem}_b.png")
            gt_path = None
            if gt is not None:
                save_grayscale(gt, image_dir / f"{stem}_gt.png")
                gt_path = f"images/{stem}_gt.png"
            records.append(ManifestRecord(f"images/{stem}_a.png", f"images/{stem}_b.png", gt_path))
        manifest = DatasetManifest(manifest_path.parent, PREPARE_KINDS[kind], tuple(records))
        write_manifest(manifest, manifest_path)
    except OSError as err:
        raise ManifestError(f"cannot write dataset to {manifest_path.parent}: {err}") from err
    _LOGGER.info("Prepared %d %s records in %s", len(records), kind, manifest_path)
    return manifest
