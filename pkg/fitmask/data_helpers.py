"""
Folder datasets (root/class-name/image files), manifests and torch Dataset wrappers.
"""

import json
import warnings
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Union
import numpy as np
import torch
from torch.utils.data import Dataset
from torchvision.io import read_image as tv_read_image, ImageReadMode
from tqdm import tqdm
from .augment import AugmentationPolicy, make_views, to_float_image
from .errors import DataError, FitmaskWarning

IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg'}
SPLITS = ('train', 'test')


@dataclass
class DatasetManifest:
    """
    Inputs:
        root (str) - dataset folder
        classes (list) - class names, index = label
        items (list) - [relative path, label, split] per image
        skipped (list) - files that could not be decoded
        extra (dict) - generator metadata (background ids, glyph seed, ...)
    """
    root: str
    classes: List[str]
    items: List[list]
    skipped: List[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = [list(i) for i in self.items]
        self.validate()

    @property
    def class_to_idx(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def split(self, name: str) -> List[list]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [i for i in self.items if i[2] == name]

    def validate(self):
        seen = {}
        for rel, label, split in self.items:
            if split not in SPLITS:
                raise DataError(f"{rel} has unknown split {split!r}")
            if rel in seen:
                raise DataError(f"{rel} listed twice (splits {seen[rel]} and {split})")
            seen[rel] = split
        for idx, name in enumerate(self.classes):
            for s in SPLITS:
                if not any(i[1] == idx and i[2] == s for i in self.items):
                    raise DataError(f"class {name!r} has no {s} images")
        return self

    def to_json(self, path=None) -> Union[str, Path]:
        text = json.dumps(asdict(self), indent=1, sort_keys=True)
        if path is None:
            return text
        path = Path(path)
        path.write_text(text)
        return path

    @classmethod
    def from_json(cls, source) -> "DatasetManifest":
        source = Path(source)
        if not source.exists():
            raise FileNotFoundError(f"no manifest at {source}")
        return cls(**json.loads(source.read_text()))


def read_image(path) -> torch.Tensor:
    """
    Decodes an image file to a uint8 3xHxW tensor.
    """
    try:
        return tv_read_image(str(path), mode=ImageReadMode.RGB)
    except (RuntimeError, ValueError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e


def parse_split_rule(rule) -> Fraction:
    """
    '2/1' -> train share 2/3; a float in (0, 1) is taken as the train share directly.
    """
    if isinstance(rule, str) and '/' in rule:
        a, b = (int(x) for x in rule.split('/'))
        if a <= 0 or b <= 0:
            raise ValueError(f"bad split rule {rule!r}")
        return Fraction(a, a + b)
    share = Fraction(str(rule))
    if not 0 < share < 1:
        raise ValueError(f"train share must lie in (0, 1), got {rule!r}")
    return share


def load_image_folder(root, split_rule='2/1', seed: int=0, check_decode: bool=True) -> DatasetManifest:
    """
    Indexes root/class-name/image files and assigns a per-class train/test split.

    Inputs:
        root (str) - dataset folder
        split_rule (str or float) - 'train/test' ratio such as '2/1', or the train share
        seed (int) - shuffles each class before splitting
        check_decode (bool) - decode every file and list failures in manifest.skipped

    Outputs:
        DatasetManifest
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} not found")
    share = parse_split_rule(split_rule)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"{root} has no class folders")

    rng = np.random.default_rng(seed)
    items, skipped = [], []
    for label, class_dir in enumerate(tqdm(class_dirs, desc="indexing classes", leave=False)):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if check_decode:
            good = []
            for f in files:
                try:
                    read_image(f)
                    good.append(f)
                except DataError:
                    skipped.append(str(f.relative_to(root)))
            files = good
        if not files:
            raise DataError(f"class folder {class_dir.name!r} has no readable images")
        order = rng.permutation(len(files))
        n_train = int(round(len(files) * share))
        n_train = min(max(n_train, 1), len(files) - 1) if len(files) > 1 else 1
        for rank, i in enumerate(order):
            split = 'train' if rank < n_train else 'test'
            items.append([str(files[i].relative_to(root)), label, split])

    if skipped:
        warnings.warn(f"skipped {len(skipped)} unreadable files under {root}", FitmaskWarning)
    return DatasetManifest(
        root=str(root), classes=[d.name for d in class_dirs], items=sorted(items), skipped=skipped)


def load_dataset(root, split_rule='2/1', seed: int=0) -> DatasetManifest:
    """
    manifest.json if the folder has one (generated data), otherwise index the folder.
    """
    root = Path(root)
    if (root / 'manifest.json').exists():
        manifest = DatasetManifest.from_json(root / 'manifest.json')
        manifest.root = str(root)
        return manifest
    return load_image_folder(root, split_rule, seed)


class ImageDataset(Dataset):
    """
    Inputs:
        manifest (DatasetManifest)
        split (str) - 'train' or 'test'
        policy (AugmentationPolicy)
        mode (str) - 'views' yields (x, x', index) for pretraining; 'eval' yields (x, label, index)
        seed (int) - with set_epoch, fixes every view pair independently of worker scheduling
    """
    def __init__(
            self,
            manifest: DatasetManifest,
            split: str,
            policy: AugmentationPolicy,
            mode: str='views',
            seed: int=0,
            cache: bool=True
            ):
        if mode not in ('views', 'eval'):
            raise ValueError(f"unknown mode {mode!r}")
        self.root = Path(manifest.root)
        self.items = manifest.split(split)
        self.policy = policy
        self.mode = mode
        self.seed = seed
        self.epoch = 0
        self.cache = {} if cache else None
        self.test_transform = policy.test_transform()

    def __len__(self):
        return len(self.items)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    @property
    def labels(self) -> torch.Tensor:
        return torch.tensor([i[1] for i in self.items], dtype=torch.long)

    def load(self, index: int) -> torch.Tensor:
        if self.cache is not None and index in self.cache:
            return self.cache[index]
        image = read_image(self.root / self.items[index][0])
        if self.cache is not None:
            self.cache[index] = image
        return image

    def view_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, self.epoch, index]).generate_state(1)[0])

    def __getitem__(self, index):
        image = self.load(index)
        if self.mode == 'views':
            x, x_prime = make_views(image, self.policy, self.view_seed(index))
            return x, x_prime, index
        return self.test_transform(to_float_image(image)), self.items[index][1], index
