"""Small photographic corpus assembled from images shipped with common packages.

Large benchmark datasets are not redistributed. For desk-scale experiments
ten photos bundled with scikit-image and matplotlib serve as the training set
and two photos bundled with scikit-learn serve as held-out validation images.
Files are located through the packages' install directories; nothing is
downloaded.
"""

from __future__ import annotations

import importlib.util
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PuzzleDataError
from .puzzle_io import downscale_bicubic, load_image, quantize_8bit, save_image


@dataclass(frozen=True)
class SampleImage:
    name: str
    package: str
    relpath: str
    downscale: int = 1


TRAIN_IMAGES = (
    SampleImage("astronaut", "skimage", "data/astronaut.png"),
    SampleImage("coffee", "skimage", "data/coffee.png"),
    SampleImage("chelsea", "skimage", "data/chelsea.png"),
    SampleImage("rocket", "skimage", "data/rocket.jpg"),
    SampleImage("hubble", "skimage", "data/hubble_deep_field.jpg", downscale=2),
    SampleImage("ihc", "skimage", "data/ihc.png"),
    SampleImage("motorcycle", "skimage", "data/motorcycle_left.png"),
    SampleImage("grace_hopper", "matplotlib", "mpl-data/sample_data/grace_hopper.jpg"),
    SampleImage("camera", "skimage", "data/camera.png"),
    SampleImage("brick", "skimage", "data/brick.png"),
)

VALIDATION_IMAGES = (
    SampleImage("china", "sklearn", "datasets/images/china.jpg"),
    SampleImage("flower", "sklearn", "datasets/images/flower.jpg"),
)


def _package_dir(package: str) -> Path:
    spec = importlib.util.find_spec(package)
    if spec is None or not spec.submodule_search_locations:
        raise PuzzleDataError(f"sample images need the {package!r} package installed")
    return Path(next(iter(spec.submodule_search_locations)))


def sample_path(sample: SampleImage) -> Path:
    path = _package_dir(sample.package) / sample.relpath
    if not path.is_file():
        raise PuzzleDataError(f"sample image {sample.name} not found at {path}")
    return path


def load_sample(sample: SampleImage) -> np.ndarray:
    img = load_image(sample_path(sample))
    if sample.downscale > 1:
        img = quantize_8bit(downscale_bicubic(img, sample.downscale))
    return img


def training_images() -> list[tuple[str, np.ndarray]]:
    return [(s.name, load_sample(s)) for s in TRAIN_IMAGES]


def validation_images() -> list[tuple[str, np.ndarray]]:
    return [(s.name, load_sample(s)) for s in VALIDATION_IMAGES]


def export(directory: str | Path, which: str = "train") -> list[Path]:
    """Write the chosen sample set as PNG files, ready for ``jigsawcm cut`` or ``train``."""
    images = {"train": training_images, "val": validation_images}[which]()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in images:
        path = directory / f"{name}.png"
        save_image(img, path)
        paths.append(path)
    return paths
