"""
Synthetic fine-grained dataset: the class lives only in a small glyph patch, pasted at a
jittered position on a large textured background that is independent of the class.

Backgrounds are drawn from a pool of noise-field signatures; the correlation strength rho
mixes the pooled signature with per-instance noise (rho=1: pure signature). Every view of
an instance carries the same background, which gives instance discrimination an easy
shortcut that has nothing to do with the label.

Glyphs sit at least `margin` pixels from the border so crops and the test-time center crop keep
them, and backgrounds are squeezed into a band around mid-grey so the black and white glyph
stands out.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional, List
import numpy as np
import torch
from scipy import ndimage, stats
from torchvision.io import write_png
from tqdm import tqdm
from .data_helpers import DatasetManifest, read_image
from .errors import ConfigurationError


@dataclass
class SyntheticSpec:
    classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 64
    patch_size: int = 8
    background_pool: int = 16
    correlation: float = 1.0
    glyph_density: float = 0.5
    glyph_cell: int = 2
    margin: int = 8
    background_contrast: float = 0.6
    glyph_order: Optional[List[int]] = None
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if min(self.train_per_class, self.test_per_class, self.background_pool) < 1:
            raise ConfigurationError("counts must be positive")
        if not 0 < self.patch_size <= self.image_size:
            raise ConfigurationError("patch must fit inside the image")
        if self.glyph_cell < 1 or self.patch_size % self.glyph_cell:
            raise ConfigurationError("glyph_cell must divide patch_size")
        if self.margin < 0 or self.patch_size + 2 * self.margin > self.image_size:
            raise ConfigurationError("patch plus margins must fit inside the image")
        if not 0.0 < self.background_contrast <= 1.0:
            raise ConfigurationError("background_contrast must lie in (0, 1]")
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigurationError("correlation strength must lie in [0, 1]")
        if self.glyph_order is not None and sorted(self.glyph_order) != list(range(self.classes)):
            raise ConfigurationError("glyph_order must be a permutation of the class indices")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))


def make_glyphs(spec: SyntheticSpec) -> np.ndarray:
    """
    One binary patch per class, drawn on a grid of glyph_cell x glyph_cell blocks so the
    pattern survives resampling, pairwise at least a quarter of the blocks apart.
    Drawn from their own seed stream so glyph_order never changes the backgrounds.
    """
    rng = np.random.default_rng([spec.seed, 1])
    p, cell = spec.patch_size, spec.glyph_cell
    n = p // cell
    min_dist = max(1, (n * n) // 4) * cell * cell
    block = np.ones((cell, cell), dtype=np.float32)
    glyphs = []
    for _ in range(10_000):
        g = np.kron((rng.random((n, n)) < spec.glyph_density).astype(np.float32), block)
        if all(np.abs(g - h).sum() >= min_dist for h in glyphs):
            glyphs.append(g)
        if len(glyphs) == spec.classes:
            break
    else:
        raise ConfigurationError(f"cannot draw {spec.classes} distinct {p}x{p} glyphs")
    glyphs = np.stack(glyphs)
    if spec.glyph_order is not None:
        glyphs = glyphs[spec.glyph_order]
    return glyphs


def noise_field(rng: np.random.Generator, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    """
    Smooth value noise (Perlin-style octave sum) plus a colored linear gradient, 3xSxS in [0, 1].
    """
    field_ = np.zeros((3, size, size), dtype=np.float64)
    amp = 1.0
    for cells in octaves:
        coarse = rng.random((3, cells + 1, cells + 1))
        zoom = size / (cells + 1)
        field_ += amp * ndimage.zoom(coarse, (1, zoom, zoom), order=3)[:, :size, :size]
        amp /= 2
    field_ /= sum(1 / 2 ** i for i in range(len(octaves)))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    color = rng.random((3, 1, 1))
    field_ = 0.6 * field_ + 0.4 * color * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    return np.clip(field_, 0.0, 1.0)


def render_image(background: np.ndarray, glyph: np.ndarray, x: int, y: int) -> np.ndarray:
    """
    Pastes the glyph (opaque, white on black) at column x, row y.
    """
    image = background.copy()
    p = glyph.shape[0]
    image[:, y:y + p, x:x + p] = glyph[None]
    return image


@dataclass
class _Job:
    rel: str
    label: int
    split: str
    background_id: int
    box: list = field(default_factory=list)
    noise_seed: int = 0


def generate_synthetic(spec: SyntheticSpec, out_dir, workers: int=0) -> DatasetManifest:
    """
    Writes root/class_XX/<split>_<n>.png, boxes.json (file -> [x, y, w, h]), glyphs.npy,
    spec.json and manifest.json.

    Inputs:
        spec (SyntheticSpec)
        out_dir (str) - created if missing
        workers (int) - threads for rendering/writing, 0 renders inline

    Outputs:
        DatasetManifest
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    glyphs = make_glyphs(spec)

    bg_rng = np.random.default_rng([spec.seed, 2])
    pool = np.stack([noise_field(bg_rng, spec.image_size) for _ in range(spec.background_pool)])

    layout_rng = np.random.default_rng([spec.seed, 3])
    S, p = spec.image_size, spec.patch_size
    classes = [f"class_{c:02d}" for c in range(spec.classes)]
    jobs = []
    for label, name in enumerate(classes):
        for split, count in [('train', spec.train_per_class), ('test', spec.test_per_class)]:
            for n in range(count):
                x, y = (int(v) for v in layout_rng.integers(spec.margin, S - p - spec.margin + 1, size=2))
                jobs.append(_Job(
                    rel=f"{name}/{split}_{n:04d}.png", label=label, split=split,
                    background_id=int(layout_rng.integers(spec.background_pool)),
                    box=[x, y, p, p], noise_seed=int(layout_rng.integers(2 ** 31)),
                    ))

    def render(job: _Job):
        background = pool[job.background_id]
        if spec.correlation < 1.0:
            own = noise_field(np.random.default_rng([spec.seed, 4, job.noise_seed]), S)
            background = spec.correlation * background + (1 - spec.correlation) * own
        background = 0.5 - spec.background_contrast / 2 + spec.background_contrast * background
        image = render_image(background, glyphs[job.label], job.box[0], job.box[1])
        pixels = torch.from_numpy(np.round(image * 255).astype(np.uint8))
        path = root / job.rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(pixels, str(path))

    print(f"rendering {len(jobs)} synthetic images to {root}...")
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool_:
            list(tqdm(pool_.map(render, jobs), total=len(jobs), leave=False))
    else:
        for job in tqdm(jobs, leave=False):
            render(job)

    boxes = {j.rel: j.box for j in jobs}
    (root / 'boxes.json').write_text(json.dumps(boxes, indent=1, sort_keys=True))
    (root / 'spec.json').write_text(json.dumps(asdict(spec), indent=1))
    np.save(root / 'glyphs.npy', glyphs)
    manifest = DatasetManifest(
        root=str(root),
        classes=classes,
        items=sorted([j.rel, j.label, j.split] for j in jobs),
        extra={
            'generator': 'synthetic',
            'background_ids': {j.rel: j.background_id for j in jobs},
            'image_size': S,
            },
        )
    manifest.to_json(root / 'manifest.json')
    return manifest


def load_boxes(root) -> dict:
    path = Path(root) / 'boxes.json'
    if not path.exists():
        raise FileNotFoundError(f"no boxes.json under {root}")
    return json.loads(path.read_text())


def classify_patch(patch: np.ndarray, glyphs: np.ndarray) -> int:
    """
    Nearest-template label for a 3xPxP (or PxP) crop in [0, 1].
    """
    if patch.ndim == 3:
        patch = patch.mean(axis=0)
    return int(np.argmin(((glyphs - patch[None]) ** 2).sum(axis=(1, 2))))


def template_accuracy(manifest: DatasetManifest) -> float:
    """
    Re-reads every image, crops its recorded box and re-labels it by template matching.
    """
    root = Path(manifest.root)
    glyphs = np.load(root / 'glyphs.npy')
    boxes = load_boxes(root)
    correct = 0
    for rel, label, _ in manifest.items:
        x, y, w, h = boxes[rel]
        image = read_image(root / rel).numpy() / 255.0
        correct += classify_patch(image[:, y:y + h, x:x + w], glyphs) == label
    return correct / len(manifest.items)


def background_independence(manifest: DatasetManifest) -> float:
    """
    Chi-square test of background id against class label; returns the p-value.
    """
    ids = manifest.extra.get('background_ids')
    if not ids:
        raise ValueError("manifest has no background ids (not a synthetic dataset)")
    labels = np.array([label for _, label, _ in manifest.items])
    backgrounds = np.array([ids[rel] for rel, _, _ in manifest.items])
    table = np.zeros((labels.max() + 1, backgrounds.max() + 1))
    np.add.at(table, (labels, backgrounds), 1)
    table = table[:, table.sum(axis=0) > 0]
    return float(stats.chi2_contingency(table)[1])
