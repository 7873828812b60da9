"""
Ablation matrix: which branch a run trains, how it interacts with the feature branch
at train and test time, and the resulting feature dimensionality.

    mode               branch   fits gradcam  train           test            dim
    ours               max-out  yes           none            weighted-pool   C
    ours-multitask     max-out  yes           none            gap             C
    ours-dualpooling   max-out  yes           weighted-pool   weighted-pool   C
    sam-ssl            1 proj   yes           none            gap             C
    sam-ssl-bilinear   max-out  yes           bilinear-pool   bilinear-pool   C*K
    moco-bilinear      K projs  no            bilinear-pool   bilinear-pool   C*K
    moco-baseline      none     no            none            gap             C
    mlp-gfb            mlp      yes           none            weighted-pool   C
"""

from dataclasses import dataclass, replace
import torch
import torch.nn as nn
from .errors import ConfigurationError
from .rationale_helpers import softmax_normalize

MODES = (
    'ours', 'ours-multitask', 'ours-dualpooling', 'sam-ssl',
    'sam-ssl-bilinear', 'moco-bilinear', 'moco-baseline', 'mlp-gfb'
)
INTERACTIONS = ('none', 'weighted-pool', 'bilinear-pool')
AGGREGATIONS = ('gap', 'weighted-pool', 'bilinear-pool')

# mode -> (branch, fits_gradcam, train interaction, test aggregation)
_TABLE = {
    'ours': ('maxout', True, 'none', 'weighted-pool'),
    'ours-multitask': ('maxout', True, 'none', 'gap'),
    'ours-dualpooling': ('maxout', True, 'weighted-pool', 'weighted-pool'),
    'sam-ssl': ('maxout', True, 'none', 'gap'),
    'sam-ssl-bilinear': ('maxout', True, 'bilinear-pool', 'bilinear-pool'),
    'moco-bilinear': ('maxout', False, 'bilinear-pool', 'bilinear-pool'),
    'moco-baseline': ('none', False, 'none', 'gap'),
    'mlp-gfb': ('mlp', True, 'none', 'weighted-pool'),
}


@dataclass(frozen=True)
class VariantSpec:
    mode: str
    K: int
    channels: int
    branch: str
    fits_gradcam: bool
    train_interaction: str
    test_aggregation: str

    @property
    def feature_dim(self) -> int:
        if self.test_aggregation == 'bilinear-pool':
            return self.channels * self.K
        return self.channels

    @property
    def projector_in(self) -> int:
        if self.train_interaction == 'bilinear-pool':
            return self.channels * self.K
        return self.channels

    @property
    def has_branch(self) -> bool:
        return self.branch != 'none'

    def check(self):
        if self.K < 1 or self.channels < 1:
            raise ConfigurationError("K and C must be positive")
        if self.train_interaction not in INTERACTIONS or self.test_aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"bad interaction {self.train_interaction!r}/{self.test_aggregation!r}")
        if self.mode == 'ours' and (self.train_interaction != 'none' or self.test_aggregation != 'weighted-pool'):
            raise ConfigurationError("ours trains without interaction and pools by attention at test")
        if self.mode == 'ours-dualpooling' and (self.train_interaction, self.test_aggregation) != ('weighted-pool',) * 2:
            raise ConfigurationError("ours-dualpooling uses weighted pooling at train and test")
        if self.mode == 'ours-multitask' and self.test_aggregation != 'gap':
            raise ConfigurationError("ours-multitask aggregates by global average pooling at test")
        if self.mode == 'sam-ssl' and self.K != 1:
            raise ConfigurationError("sam-ssl uses a single projection")
        if self.mode == 'moco-baseline' and self.branch != 'none':
            raise ConfigurationError("moco-baseline has no fitting branch")
        if (self.branch == 'none') and ('none', 'gap') != (self.train_interaction, self.test_aggregation):
            raise ConfigurationError("attention or bilinear pooling needs a branch")
        if self.branch == 'mlp' and 'bilinear-pool' in (self.train_interaction, self.test_aggregation):
            raise ConfigurationError("bilinear pooling needs linear projections, not an mlp branch")
        return self


def configure_variant(mode: str, K: int, C: int, /, **overrides) -> VariantSpec:
    """
    Builds the VariantSpec for one row of the ablation matrix.

    Inputs:
        mode (str) - one of MODES
        K (int) - number of projections (forced to 1 for sam-ssl)
        C (int) - feature channels of the backbone
        overrides - train_interaction / test_aggregation, checked against the row's constraints

    Outputs:
        VariantSpec
    """
    if mode not in _TABLE:
        raise ConfigurationError(f"unknown variant {mode!r}, expected one of {MODES}")
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    branch, fits, train, test = _TABLE[mode]
    if mode == 'sam-ssl':
        K = 1
    spec = VariantSpec(mode, K, C, branch, fits, train, test)
    bad = set(overrides) - {'train_interaction', 'test_aggregation'}
    if bad:
        raise ConfigurationError(f"cannot override {sorted(bad)}")
    return replace(spec, **overrides).check()


def bilinear_pool(feature_map: torch.Tensor, weight: torch.Tensor, tau: float=0.4) -> torch.Tensor:
    """
    Per-part attention pooling, concatenated: for every projection k,
    f_k = sum_ij softmax(w_k . phi / tau)[i,j] phi[i,j]; output [f_1 ... f_K], length C*K.
    """
    if weight.ndim != 2 or feature_map.shape[-1] != weight.shape[1]:
        raise ValueError(f"weight {tuple(weight.shape)} does not match feature map {tuple(feature_map.shape)}")
    parts = torch.einsum('...hwc,kc->...khw', feature_map, weight)
    masks = softmax_normalize(parts, tau)
    pooled = torch.einsum('...khw,...hwc->...kc', masks, feature_map)
    return pooled.flatten(start_dim=-2)


class MLPBranch(nn.Module):
    """
    Two-layer perceptron applied at every grid cell: phi[i,j] -> scalar A[i,j].
    """
    def __init__(self, channels: int, hidden: int=32):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, feature_map, subset=None):
        if subset is not None:
            raise ValueError("the mlp branch has no projections to subset")
        return mlp_gfb_forward(feature_map, self)


def mlp_gfb_forward(feature_map: torch.Tensor, mlp: MLPBranch) -> torch.Tensor:
    if feature_map.shape[-1] != mlp.fc1.in_features:
        raise ConfigurationError(
            f"mlp branch expects {mlp.fc1.in_features} channels, feature map has {feature_map.shape[-1]}")
    return mlp.fc2(mlp.act(mlp.fc1(feature_map))).squeeze(-1)
