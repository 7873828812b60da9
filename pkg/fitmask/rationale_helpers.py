"""
GradCAM from the contrastive objective and the GradCAM fitting branch (GFB).

Feature maps are channels-last throughout: N x H x W x C (a single map may drop N).
"""

import math
from typing import Optional, Sequence
import torch
import torch.nn as nn
import torch.nn.functional as F
from .config import LossWeights
from .errors import ConfigurationError, NumericError

KL_FLOOR = 1e-12
DEGENERATE_RANGE = 1e-12


def gradcam(feature_map: torch.Tensor, objective: torch.Tensor, retain_graph: bool=True) -> torch.Tensor:
    """
    G[i,j] = ReLU(g[i,j] . phi[i,j]) with g the gradient of the objective w.r.t. the feature map.

    Uses autograd.grad, so parameter .grad fields are left untouched. The result is detached.

    Inputs:
        feature_map (Tensor) - ...xHxWxC, part of the graph that produced objective
        objective (Tensor) - differentiable scalar (sum per-sample objectives for a batch)

    Outputs:
        G (Tensor) - ...xHxW, nonnegative
    """
    if not objective.requires_grad:
        raise ValueError("gradcam objective is not differentiable (requires_grad is False)")
    if objective.numel() != 1:
        raise ValueError("gradcam objective must be a scalar")
    try:
        (grads,) = torch.autograd.grad(objective, feature_map, retain_graph=retain_graph)
    except RuntimeError as e:
        raise ValueError(f"objective is not differentiable w.r.t. the feature map: {e}") from e
    return F.relu((grads * feature_map).sum(dim=-1)).detach()


def gradcam_objective(
        source: str,
        l_pos: Optional[torch.Tensor]=None,
        loss: Optional[torch.Tensor]=None,
        logits: Optional[torch.Tensor]=None,
        labels: Optional[torch.Tensor]=None
        ) -> torch.Tensor:
    """
    Scalar to differentiate for each GradCAM source.

    positive-logit: sum of raw positive logits.
    full-loss: minus the contrastive loss, i.e. the log-probability of the positive, so a region
        that helps the instance-discrimination task gets a positive weight.
    supervised-ce: log-softmax of classifier logits at the given labels.
    """
    if source == 'positive-logit':
        if l_pos is None:
            raise ValueError("positive-logit source needs l_pos")
        return l_pos.sum()
    if source == 'full-loss':
        if loss is None:
            raise ValueError("full-loss source needs the contrastive loss")
        return -loss
    if source == 'supervised-ce':
        if logits is None or labels is None:
            raise ValueError("supervised-ce source needs logits and labels")
        return F.log_softmax(logits, dim=-1).gather(-1, labels.view(-1, 1)).sum()
    raise ValueError(f"unknown gradcam source {source!r}")


def projection_responses(feature_map: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """
    Per-projection maps w_k . phi, ...xHxWxK. Each w_k . phi is reduced on its own, so the
    value for one projection does not depend on which other projections sit beside it.
    """
    return torch.stack([(feature_map * w).sum(dim=-1) for w in weight], dim=-1)


def gfb_forward(feature_map: torch.Tensor, weight: torch.Tensor, subset: Optional[Sequence[int]]=None) -> torch.Tensor:
    """
    Max-out over K bias-free 1x1 projections: A[i,j] = max_k w_k . phi[i,j].

    Inputs:
        feature_map (Tensor) - ...xHxWxC
        weight (Tensor) - KxC
        subset (list) - optional projection indices to restrict the max to

    Outputs:
        A (Tensor) - ...xHxW
    """
    if weight.ndim != 2 or feature_map.shape[-1] != weight.shape[1]:
        raise ConfigurationError(
            f"branch expects {weight.shape[-1]} channels, feature map has {feature_map.shape[-1]}")
    if subset is not None:
        weight = weight[_check_subset(subset, weight.shape[0]).to(weight.device)]
    return projection_responses(feature_map, weight).amax(dim=-1)


def _check_subset(subset: Sequence[int], K: int) -> torch.Tensor:
    idx = sorted(set(int(i) for i in subset))
    if not idx:
        raise ValueError("projection subset is empty")
    if idx[0] < 0 or idx[-1] >= K:
        raise ValueError(f"projection subset {idx} outside 0..{K - 1}")
    return torch.tensor(idx, dtype=torch.long)


class RationaleBranch(nn.Module):
    """
    GradCAM fitting branch: K projection vectors w_k (a bias-free 1x1 convolution) and a max-out.
    """
    def __init__(self, K: int, channels: int):
        super().__init__()
        if K < 1:
            raise ConfigurationError("K must be at least 1")
        self.weight = nn.Parameter(torch.empty(K, channels))
        # same init as a 1x1 nn.Conv2d
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def K(self) -> int:
        return self.weight.shape[0]

    def forward(self, feature_map, subset=None):
        return gfb_forward(feature_map, self.weight, subset)

    def responses(self, feature_map):
        """
        Per-projection maps w_k . phi, ...xHxWxK.
        """
        return projection_responses(feature_map, self.weight)


def softmax_normalize(maps: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Flatten the last two (grid) dims, softmax(map / tau), reshape back.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not torch.isfinite(maps).all():
        raise NumericError("map has non-finite entries")
    flat = maps.flatten(start_dim=-2)
    return F.softmax(flat / tau, dim=-1).view_as(maps)


def kl_fitting_loss(a_bar: torch.Tensor, g_bar: torch.Tensor, direction: str='attention-first') -> torch.Tensor:
    """
    KL between normalized attention and normalized GradCAM, averaged over the batch.

    attention-first: sum A log(A / G)   (the written objective)
    gradcam-first:   sum G log(G / A)   (what kl_div(log A, G) computes)

    G is detached and floored at 1e-12 before the log.
    """
    if a_bar.shape != g_bar.shape:
        raise ValueError(f"map shapes differ: {tuple(a_bar.shape)} vs {tuple(g_bar.shape)}")
    g_bar = g_bar.detach()
    log_g = g_bar.clamp_min(KL_FLOOR).log()
    if direction == 'attention-first':
        per_cell = torch.xlogy(a_bar, a_bar) - a_bar * log_g
    elif direction == 'gradcam-first':
        per_cell = F.kl_div(a_bar.clamp_min(KL_FLOOR).log(), g_bar, reduction='none')
    else:
        raise ValueError(f"unknown kl direction {direction!r}")
    per_map = per_cell.flatten(start_dim=-2).sum(dim=-1)
    return per_map.mean() if per_map.ndim else per_map


def total_loss(l_cl: torch.Tensor, l_kl: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    if not (torch.isfinite(torch.as_tensor(l_cl)).all() and torch.isfinite(torch.as_tensor(l_kl)).all()):
        raise NumericError(f"non-finite loss component: l_cl={float(l_cl)}, l_kl={float(l_kl)}")
    return weights.lam * l_cl + weights.nu * l_kl


def attention_normalize(A: torch.Tensor, mode: str='literal') -> torch.Tensor:
    """
    Inference-time mask A' from the raw GFB map, per map over the last two dims.

    literal: (A - min A) / (1e-7 + max A)
    range:   (A - min A) / (1e-7 + max A - min A)

    A constant map (max - min < 1e-12) becomes uniform 1/(H*W). When max A <= 0 the literal
    denominator is not positive, so those maps use the range form.
    """
    if not torch.isfinite(A).all():
        raise NumericError("attention map has non-finite entries")
    if mode not in ('literal', 'range'):
        raise ValueError(f"unknown normalization {mode!r}")
    flat = A.flatten(start_dim=-2)
    a_min = flat.amin(dim=-1, keepdim=True)
    a_max = flat.amax(dim=-1, keepdim=True)
    spread = a_max - a_min
    denom = 1e-7 + spread
    if mode == 'literal':
        denom = torch.where(a_max > 0, 1e-7 + a_max, denom)
    out = (flat - a_min) / denom
    uniform = torch.full_like(flat, 1.0 / flat.shape[-1])
    out = torch.where(spread < DEGENERATE_RANGE, uniform, out)
    return out.view_as(A)


def weighted_pool(feature_map: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """
    f = sum_ij A'[i,j] phi[i,j] (a weighted sum, no division by sum A').
    """
    if feature_map.shape[:-1] != weights.shape:
        raise ValueError(f"grid mismatch: features {tuple(feature_map.shape)} vs weights {tuple(weights.shape)}")
    return torch.einsum('...hw,...hwc->...c', weights, feature_map)
