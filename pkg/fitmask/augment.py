"""
Two-view augmentation for contrastive pretraining, plus the test-time resize / center-crop.
"""

from dataclasses import dataclass
from typing import Tuple
import torch
from torchvision import transforms as T
from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AugmentationPolicy:
    """
    MoCo v2 style policy: random-resized-crop, horizontal flip, color jitter,
    grayscale and gaussian blur. A probability of 0 drops that transform.
    """
    size: int = 224
    test_resize: int = 256
    crop: bool = True
    crop_scale: tuple = (0.2, 1.0)
    flip_p: float = 0.5
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    normalize: bool = True

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.jitter = tuple(self.jitter)
        self.blur_sigma = tuple(self.blur_sigma)
        if self.size <= 0 or self.test_resize < self.size:
            raise ValueError("need 0 < size <= test_resize")
        for p in [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")

    @classmethod
    def identity(cls, size: int) -> "AugmentationPolicy":
        return cls(
            size=size, test_resize=size, crop=False, flip_p=0.0, jitter_p=0.0,
            grayscale_p=0.0, blur_p=0.0, normalize=False
            )

    def train_transform(self) -> T.Compose:
        steps = []
        if self.crop:
            steps.append(T.RandomResizedCrop(self.size, scale=self.crop_scale, antialias=True))
        else:
            steps.append(T.Resize((self.size, self.size), antialias=True))
        if self.jitter_p > 0:
            steps.append(T.RandomApply([T.ColorJitter(*self.jitter)], p=self.jitter_p))
        if self.grayscale_p > 0:
            steps.append(T.RandomGrayscale(p=self.grayscale_p))
        if self.blur_p > 0:
            # kernel roughly a tenth of the image, odd
            kernel = max(3, (self.size // 10) | 1)
            steps.append(T.RandomApply([T.GaussianBlur(kernel, sigma=self.blur_sigma)], p=self.blur_p))
        if self.flip_p > 0:
            steps.append(T.RandomHorizontalFlip(p=self.flip_p))
        if self.normalize:
            steps.append(T.Normalize(IMAGENET_MEAN, IMAGENET_STD))
        return T.Compose(steps)

    def test_transform(self) -> T.Compose:
        steps = [
            T.Resize(self.test_resize, antialias=True),
            T.CenterCrop(self.size),
        ]
        if self.normalize:
            steps.append(T.Normalize(IMAGENET_MEAN, IMAGENET_STD))
        return T.Compose(steps)


def to_float_image(image: torch.Tensor) -> torch.Tensor:
    """
    uint8 CxHxW -> float in [0, 1]; float inputs pass through.
    """
    if not isinstance(image, torch.Tensor) or image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"expected a 1 or 3 channel CxHxW image tensor, got {getattr(image, 'shape', type(image))}")
    if image.dtype == torch.uint8:
        image = image.float() / 255.0
    if image.shape[0] == 1:
        image = image.expand(3, -1, -1)
    return image


def make_views(image: torch.Tensor, policy: AugmentationPolicy, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draws two independent augmentations t, t' of one image.

    Inputs:
        image (Tensor) - CxHxW, uint8 or float in [0, 1]
        policy (AugmentationPolicy)
        seed (int) - the pair is a pure function of (image, policy, seed)

    Outputs:
        (x, x') - two SxS float views
    """
    image = to_float_image(image)
    transform = policy.train_transform()
    # torchvision draws from the global torch generator, so fork it to keep callers unaffected
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        x = transform(image)
        x_prime = transform(image)
    return x, x_prime
