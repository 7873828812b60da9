"""
Query / key networks, the projector head and the fitting branch, wired per VariantSpec.
"""

import copy
from typing import Optional, Sequence, Tuple
import torch
import torch.nn as nn
from .backbones import build_backbone
from .config import TrainConfig, EncoderConfig
from .errors import ConfigurationError, NumericError
from .moco_helpers import l2_normalize, momentum_update
from .rationale_helpers import RationaleBranch, attention_normalize, weighted_pool
from .variants import VariantSpec, MLPBranch, bilinear_pool


class ProjectionHead(nn.Module):
    """
    g_theta: hidden Linear+ReLU layers, then a Linear (+BatchNorm) to the embedding dimension D.
    """
    def __init__(self, in_dim: int, dims: Sequence[int], bn: bool=True):
        super().__init__()
        layers = []
        widths = [in_dim, *dims]
        for c_in, c_out in zip(widths[:-2], widths[1:-1]):
            layers += [nn.Linear(c_in, c_out), nn.ReLU()]
        layers.append(nn.Linear(widths[-2], widths[-1]))
        if bn:
            layers.append(nn.BatchNorm1d(widths[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class FitMaskModel(nn.Module):
    """
    MoCo-style encoder pair with an optional GradCAM fitting branch.

    Inputs:
        config (TrainConfig) - encoder shape, K, tau, m, pooling normalization
        variant (VariantSpec) - which branch exists and where it interacts

    The key network mirrors the query network (backbone, projector and, for bilinear
    variants, the pooling projections) and is only ever moved by momentum_update. The
    fitting branch of the other variants lives outside both networks and is trained by SGD.
    """
    def __init__(self, config: TrainConfig, variant: VariantSpec):
        super().__init__()
        enc: EncoderConfig = config.encoder
        if variant.channels != enc.channels:
            raise ConfigurationError(f"variant built for C={variant.channels}, encoder has C={enc.channels}")
        self.variant = variant
        self.tau = config.tau
        self.m = config.m
        self.pool_normalization = config.pool_normalization
        self.embed_dim = enc.embed_dim

        self.query = nn.ModuleDict({
            'backbone': build_backbone(enc),
            'projector': ProjectionHead(variant.projector_in, enc.projector_dims, enc.projector_bn),
        })
        branch = None
        if variant.branch == 'maxout':
            branch = RationaleBranch(variant.K, enc.channels)
        elif variant.branch == 'mlp':
            branch = MLPBranch(enc.channels, config.mlp_hidden)
        if variant.train_interaction == 'bilinear-pool':
            self.query['branch'] = branch
            self.side_branch = None
        else:
            self.side_branch = branch

        self.key = copy.deepcopy(self.query)
        for p in self.key.parameters():
            p.requires_grad = False

    @property
    def branch(self) -> Optional[nn.Module]:
        if 'branch' in self.query:
            return self.query['branch']
        return self.side_branch

    def trainable_parameters(self):
        """
        Everything SGD updates: query network plus the side branch.
        """
        return [p for name, p in self.named_parameters() if not name.startswith('key.')]

    def named_trainable_parameters(self):
        return [(name, p) for name, p in self.named_parameters() if not name.startswith('key.')]

    def encode(self, images: torch.Tensor, network: str='query', splits: int=1) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Inputs:
            images (Tensor) - Nx3xSxS
            network (str) - 'query' or 'key'
            splits (int) - the backbone runs on this many consecutive groups, so BatchNorm
                statistics in train mode are per group

        Outputs:
            feature_map (Tensor) - NxHxWxC
            pooled (Tensor) - NxC global average pool of the map
        """
        net = self.query if network == 'query' else self.key
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected Nx3xSxS images, got {tuple(images.shape)}")
        chunks = torch.tensor_split(images, splits) if splits > 1 else (images,)
        feature_map = torch.cat([net['backbone'](chunk) for chunk in chunks]).permute(0, 2, 3, 1)
        if not torch.isfinite(feature_map).all():
            raise NumericError("non-finite activations in the feature map")
        return feature_map, feature_map.mean(dim=(1, 2))

    def attention(self, feature_map: torch.Tensor, subset: Optional[Sequence[int]]=None) -> torch.Tensor:
        """
        Raw attention map A from the fitting branch, NxHxW.
        """
        if self.branch is None:
            raise ConfigurationError(f"variant {self.variant.mode} has no fitting branch")
        return self.branch(feature_map, subset=subset)

    def attention_pool(self, feature_map, subset=None) -> torch.Tensor:
        weights = attention_normalize(self.attention(feature_map, subset), self.pool_normalization)
        return weighted_pool(feature_map, weights)

    def train_pool(self, feature_map: torch.Tensor, pooled: torch.Tensor, network: str='query') -> torch.Tensor:
        """
        Vector fed to the projector during training, per the variant's train-time interaction.
        """
        interaction = self.variant.train_interaction
        if interaction == 'bilinear-pool':
            net = self.query if network == 'query' else self.key
            return bilinear_pool(feature_map, net['branch'].weight, self.tau)
        if interaction == 'weighted-pool' and network == 'query':
            return self.attention_pool(feature_map)
        return pooled

    def project(self, pooled: torch.Tensor, network: str='query') -> torch.Tensor:
        net = self.query if network == 'query' else self.key
        return l2_normalize(net['projector'](pooled), dim=-1)

    def embed(self, images: torch.Tensor, network: str='query', splits: int=1) -> torch.Tensor:
        """
        Unit-norm embeddings through the training path (train-time pooling + projector).
        """
        feature_map, pooled = self.encode(images, network, splits)
        return self.project(self.train_pool(feature_map, pooled, network), network)

    @torch.no_grad()
    def features(
            self,
            images: torch.Tensor,
            aggregation: Optional[str]=None,
            subset: Optional[Sequence[int]]=None
            ) -> torch.Tensor:
        """
        Test-time representation: GAP, attention-weighted pooling or bilinear pooling
        of the query feature map (the projector is not used downstream).
        """
        aggregation = aggregation or self.variant.test_aggregation
        feature_map, pooled = self.encode(images, 'query')
        if aggregation == 'gap':
            return pooled
        if aggregation == 'weighted-pool':
            return self.attention_pool(feature_map, subset)
        if aggregation == 'bilinear-pool':
            weight = self.branch.weight
            if subset is not None:
                weight = weight[sorted(set(subset))]
            return bilinear_pool(feature_map, weight, self.tau)
        raise ConfigurationError(f"unknown aggregation {aggregation!r}")

    @torch.no_grad()
    def momentum_update(self):
        momentum_update(self.query, self.key, self.m)

    def sync_key(self):
        """
        Key network := query network (start of training).
        """
        momentum_update(self.query, self.key, 0.0)
