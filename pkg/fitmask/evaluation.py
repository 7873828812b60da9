from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib import colormaps
from torch.utils.data import DataLoader
from torchvision import transforms as T
from tqdm import tqdm
from .access import Access
from .augment import IMAGENET_MEAN, IMAGENET_STD
from .checkpoint import load_checkpoint, load_features, save_features
from .config import TrainConfig
from .data_helpers import DatasetManifest, ImageDataset
from .errors import ConfigurationError, DataError
from .metric_helpers import (
    PROBE_FRACTIONS, attention_mass, collapse_check, probe_report, projection_variance, retrieval_eval
    )
from .model import FitMaskModel
from .rationale_helpers import attention_normalize
from .synthetic import load_boxes
from .variants import configure_variant


def _batches(dataset, batch_size: int):
    return DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)


@torch.no_grad()
def extract_features(
        dataset: ImageDataset,
        model: FitMaskModel,
        aggregation: Optional[str]=None,
        subset: Optional[Sequence[int]]=None,
        batch_size: int=64
        ) -> tuple:
    """
    Frozen test-time features for every image of an eval-mode dataset.

    Inputs:
        dataset (ImageDataset) - mode='eval'
        model (FitMaskModel)
        aggregation (str) - defaults to the variant's test aggregation
        subset (list) - projection indices for subset inference

    Outputs:
        features (Tensor) - NxF, F per the variant (C, or C*K for bilinear pooling)
        labels (Tensor) - N
    """
    if dataset.mode != 'eval':
        raise ConfigurationError("feature extraction needs an eval-mode dataset")
    aggregation = aggregation or model.variant.test_aggregation
    if aggregation != 'gap' and not model.variant.has_branch:
        raise ConfigurationError(f"variant {model.variant.mode} has no branch for {aggregation} features")
    param = next(model.parameters())
    model.eval()
    rows, labels = [], []
    for x, y, _ in tqdm(_batches(dataset, batch_size), desc="extracting", leave=False):
        rows.append(model.features(x.to(param.device, param.dtype), aggregation, subset).cpu())
        labels.append(y)
    features = torch.cat(rows)
    expected = model.variant.feature_dim if aggregation == model.variant.test_aggregation else None
    if subset is None and expected is not None and features.shape[1] != expected:
        raise ConfigurationError(f"features have dim {features.shape[1]}, variant promises {expected}")
    return features, torch.cat(labels)


@torch.no_grad()
def extract_maps(dataset: ImageDataset, model: FitMaskModel, kind: str='feature', batch_size: int=64) -> torch.Tensor:
    """
    Per-image grid maps: 'feature' gives NxHxWxC feature maps, 'attention' the normalized A'.
    """
    param = next(model.parameters())
    model.eval()
    maps = []
    for x, _, _ in _batches(dataset, batch_size):
        feature_map, _ = model.encode(x.to(param.device, param.dtype), 'query')
        if kind == 'attention':
            feature_map = attention_normalize(model.attention(feature_map), model.pool_normalization)
        maps.append(feature_map.cpu())
    if not maps:
        raise DataError("dataset is empty")
    return torch.cat(maps)


def scale_heatmap(heatmap: torch.Tensor) -> torch.Tensor:
    """
    Min-max scaling to [0, 1]; a constant map becomes all zeros.
    """
    lo, hi = heatmap.min(), heatmap.max()
    if hi - lo < 1e-12:
        return torch.zeros_like(heatmap)
    return (heatmap - lo) / (hi - lo)


def export_heatmaps(images: torch.Tensor, maps: torch.Tensor, out_dir, cmap: str='jet', alpha: float=0.5) -> List[Path]:
    """
    Writes one color-overlay PNG per image, heatmap_0000.png, heatmap_0001.png, ...

    Inputs:
        images (Tensor) - Nx3xSxS in [0, 1]
        maps (Tensor) - NxHxW, any scale (only relative strength is shown)
        out_dir (str)

    Outputs:
        list of written paths
    """
    if len(images) != len(maps):
        raise ValueError(f"{len(images)} images but {len(maps)} maps")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    colormap = colormaps[cmap]
    paths = []
    for i, (image, heatmap) in enumerate(zip(images, maps)):
        size = image.shape[-2:]
        up = F.interpolate(heatmap[None, None].double(), size=size, mode='bilinear', align_corners=False)[0, 0]
        intensity = scale_heatmap(up).clamp(0.0, 1.0).cpu().numpy()
        colored = colormap(intensity)[..., :3]
        base = image.permute(1, 2, 0).double().clamp(0.0, 1.0).cpu().numpy()
        overlay = np.clip((1 - alpha) * base + alpha * colored, 0.0, 1.0)
        path = out_dir / f"heatmap_{i:04d}.png"
        plt.imsave(path, overlay)
        paths.append(path)
    return paths


class Evaluator(Access):
    """
    Evaluation of one pretrained model on a dataset's test split (and train split for the probe).

    Inputs:
        model (FitMaskModel)
        config (TrainConfig)
        manifest (DatasetManifest)
        out_dir (str)
        force_env (bool) - see Access
    """
    def __init__(
            self,
            model: FitMaskModel,
            config: TrainConfig,
            manifest: DatasetManifest,
            out_dir: Optional[str]=None,
            force_env: Optional[bool]=None
            ):
        super().__init__(out_dir=out_dir, force_env=force_env)
        self.model = model.to(self.device, self.dtype).eval()
        self.config = config
        self.manifest = manifest
        self._features = {}

    @classmethod
    def from_checkpoint(cls, path, manifest: DatasetManifest, out_dir=None, force_env=None) -> "Evaluator":
        ckpt = load_checkpoint(path)
        config = TrainConfig.from_dict(ckpt.config)
        variant = configure_variant(config.variant, config.K, config.encoder.channels)
        model = FitMaskModel(config, variant)
        model.load_state_dict(ckpt.params)
        return cls(model, config, manifest, out_dir=out_dir, force_env=force_env)

    def dataset(self, split: str='test', normalize: Optional[bool]=None) -> ImageDataset:
        policy = self.config.augment
        if normalize is not None:
            policy = replace(policy, normalize=normalize)
        return ImageDataset(self.manifest, split, policy, mode='eval', seed=self.config.seed)

    @property
    def default_aggregation(self) -> Optional[str]:
        if self.config.feature_source == 'gap':
            return 'gap'
        return None

    def features(self, split: str='test', aggregation: Optional[str]=None, subset=None) -> tuple:
        key = (split, aggregation, tuple(subset) if subset is not None else None)
        if key not in self._features:
            self._features[key] = extract_features(
                self.dataset(split), self.model, aggregation, subset, self.config.batch_size)
        return self._features[key]

    def cache_features(self, split: str='test', name: Optional[str]=None) -> Path:
        features, labels = self.features(split, self.default_aggregation)
        return save_features(
            self.out_path(name or f"features_{split}.npz"), features, labels,
            meta={'split': split, 'variant': self.model.variant.mode, 'config_hash': self.config.config_hash},
            )

    def retrieval(self, split: str='test', metric: str='cosine', name: Optional[str]="retrieval.json"):
        features, labels = self.features(split, self.default_aggregation)
        report = retrieval_eval(features, labels, metric)
        if name:
            self.write_json(report.to_dict(), name)
        return report

    def probe(self, fractions=PROBE_FRACTIONS, seed: int=0, name: Optional[str]="probe.csv"):
        print("fitting linear probes...")
        train_f, train_y = self.features('train', self.default_aggregation)
        test_f, test_y = self.features('test', self.default_aggregation)
        report = probe_report(train_f, train_y, test_f, test_y, fractions, seed)
        if name:
            self.write_frame(pd.DataFrame(report.rows), name)
        return report

    def projections(self, top: int=8, seed: int=0, split: str='test', name: Optional[str]="projections.json") -> dict:
        """
        Ranks the branch's projections by response variance over the train split, then runs
        retrieval with all projections, the top ones, and as many drawn from the rest.
        """
        branch = self.model.branch
        if branch is None or not hasattr(branch, 'weight'):
            raise ConfigurationError(f"variant {self.model.variant.mode} has no linear projections to rank")
        maps = extract_maps(self.dataset('train'), self.model, 'feature', self.config.batch_size)
        report = projection_variance(branch.weight.detach().cpu(), maps)
        K = len(report.ranking)
        subsets = {'all': list(range(K)), 'high-variance': sorted(report.top(top))}
        if K > top:
            subsets['random'] = report.random_others(top, seed)
        rows = []
        for mode, subset in subsets.items():
            features, labels = self.features(split, None, subset)
            r = retrieval_eval(features, labels)
            rows.append({'mode': mode, 'subset': subset, 'rank1': r.rank1, 'rank5': r.rank5, 'mAP': r.mAP})
        payload = {'variance': report.to_dict(), 'subset_retrieval': rows}
        if name:
            self.write_json(payload, name)
        return payload

    def collapse(self, split: str='test', name: Optional[str]="collapse.json"):
        features, labels = self.features(split, self.default_aggregation)
        report = collapse_check(features, labels)
        if name:
            self.write_json(report.to_dict(), name)
        return report

    def localization(self, split: str='test') -> dict:
        """
        Attention mass inside the ground-truth glyph boxes (synthetic datasets only).
        """
        boxes = load_boxes(self.manifest.root)
        dataset = self.dataset(split)
        maps = extract_maps(dataset, self.model, 'attention', self.config.batch_size)
        source = self.manifest.extra.get('image_size', self.config.augment.size)
        policy = self.config.augment
        return attention_mass(
            maps, [boxes[item[0]] for item in dataset.items], source, policy.test_resize, policy.size)

    def heatmaps(self, split: str='test', limit: int=16, out: str="heatmaps") -> List[Path]:
        if not self.model.variant.has_branch:
            raise ConfigurationError(f"variant {self.model.variant.mode} has no attention map to draw")
        raw = self.dataset(split, normalize=False)
        count = min(limit, len(raw))
        images = torch.stack([raw[i][0] for i in range(count)])
        x = images
        if self.config.augment.normalize:
            x = T.Normalize(IMAGENET_MEAN, IMAGENET_STD)(images)
        param = next(self.model.parameters())
        with torch.no_grad():
            feature_map, _ = self.model.encode(x.to(param.device, param.dtype))
            maps = self.model.attention(feature_map).cpu()
        return export_heatmaps(images, maps, self.out_dir / out)


def evaluate_cached(path, metric: str='cosine'):
    """
    Retrieval straight from an extract-features cache file.
    """
    features, labels, meta = load_features(path)
    return retrieval_eval(features, labels, metric), meta
