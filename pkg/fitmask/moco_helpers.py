"""
Momentum-contrast pieces: unit-norm embeddings, the negative queue, InfoNCE and the key-network update.
"""

from typing import Optional, Tuple, Union, Mapping
import torch
import torch.nn as nn
import torch.nn.functional as F
from .errors import NumericError, StateError

ZERO_NORM = 1e-12


def l2_normalize(v: torch.Tensor, dim: int=-1) -> torch.Tensor:
    norms = v.norm(dim=dim, keepdim=True)
    if not torch.isfinite(v).all():
        raise NumericError("non-finite values before normalization")
    if (norms < ZERO_NORM).any():
        raise NumericError("zero-norm vector cannot be normalized")
    return v / norms


class EmbeddingQueue:
    """
    FIFO ring of at most Q unit-norm key embeddings used as negatives.

    Inputs:
        capacity (int) - Q
        dim (int) - embedding dimension D
    """
    def __init__(self, capacity: int, dim: int, device=None, dtype=torch.float32):
        if capacity <= 0 or dim <= 0:
            raise ValueError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, device=device, dtype=dtype)
        self.cursor = 0
        self.size = 0

    @classmethod
    def random(cls, capacity: int, dim: int, seed: int=0, device=None, dtype=torch.float32) -> "EmbeddingQueue":
        """
        Full queue of normalized gaussian vectors, so step 0 already has Q negatives.
        """
        queue = cls(capacity, dim, device=device, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        init = torch.randn(capacity, dim, generator=gen, dtype=torch.float64)
        queue.buffer.copy_(F.normalize(init, dim=1).to(dtype))
        queue.size = capacity
        return queue

    def __len__(self):
        return self.size

    @property
    def negatives(self) -> torch.Tensor:
        """
        Stored embeddings in slot order (cheap; order is irrelevant to the loss).
        """
        return self.buffer[:self.size]

    def entries(self) -> torch.Tensor:
        """
        Stored embeddings from oldest to newest.
        """
        if self.size < self.capacity:
            return self.buffer[:self.size].clone()
        return torch.cat([self.buffer[self.cursor:], self.buffer[:self.cursor]])

    @torch.no_grad()
    def push(self, keys: torch.Tensor):
        n = keys.shape[0]
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"keys must be Nx{self.dim}, got {tuple(keys.shape)}")
        if n > self.capacity:
            raise ValueError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        idx = (self.cursor + torch.arange(n, device=self.buffer.device)) % self.capacity
        self.buffer[idx] = keys.detach().to(self.buffer.dtype)
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        return self

    def to(self, device=None, dtype=None) -> "EmbeddingQueue":
        self.buffer = self.buffer.to(device=device, dtype=dtype)
        return self

    def state(self) -> dict:
        return {'buffer': self.buffer, 'cursor': self.cursor, 'size': self.size}

    @classmethod
    def from_state(cls, state: dict) -> "EmbeddingQueue":
        buffer = state['buffer']
        queue = cls(buffer.shape[0], buffer.shape[1], device=buffer.device, dtype=buffer.dtype)
        queue.buffer.copy_(buffer)
        queue.cursor = int(state['cursor'])
        queue.size = int(state['size'])
        return queue


def contrastive_loss(
        z: torch.Tensor,
        z_pos: torch.Tensor,
        queue: Union[EmbeddingQueue, torch.Tensor],
        t: float
        ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    InfoNCE with the positive logit at index 0 and the queue as negatives.

    Inputs:
        z (Tensor) - NxD (or D) normalized query embeddings
        z_pos (Tensor) - matching key embeddings, treated as constants
        queue - EmbeddingQueue or QxD tensor of negatives
        t (float) - temperature

    Outputs:
        loss (Tensor) - mean over the batch of -log softmax(logits / t)[0]
        l_pos (Tensor) - raw positive logits z . z_pos (length N), still attached to the graph
    """
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    negatives = queue.negatives if isinstance(queue, EmbeddingQueue) else queue
    if negatives.shape[0] == 0:
        raise StateError("contrastive loss needs a non-empty queue")
    squeeze = z.ndim == 1
    if squeeze:
        z, z_pos = z.unsqueeze(0), z_pos.unsqueeze(0)

    z_pos = z_pos.detach()
    l_pos = torch.einsum('nd,nd->n', z, z_pos)
    l_neg = z @ negatives.detach().T
    logits = torch.cat([l_pos.unsqueeze(1), l_neg], dim=1) / t
    labels = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
    loss = F.cross_entropy(logits, labels)
    return loss, (l_pos[0] if squeeze else l_pos)


def _param_map(source: Union[nn.Module, Mapping[str, torch.Tensor]]) -> dict:
    if isinstance(source, nn.Module):
        return dict(source.named_parameters())
    return dict(source)


@torch.no_grad()
def momentum_update(
        query: Union[nn.Module, Mapping[str, torch.Tensor]],
        key: Union[nn.Module, Mapping[str, torch.Tensor]],
        m: float
        ):
    """
    theta_k <- m * theta_k + (1 - m) * theta_q, in place on the key side.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    q_params, k_params = _param_map(query), _param_map(key)
    if q_params.keys() != k_params.keys():
        diff = sorted(set(q_params) ^ set(k_params))
        raise StateError(f"query/key parameter schemas differ: {diff[:5]}")
    for name, k_param in k_params.items():
        q_param = q_params[name]
        if q_param.shape != k_param.shape:
            raise StateError(f"shape mismatch for {name}: {tuple(q_param.shape)} vs {tuple(k_param.shape)}")
        # lerp returns exactly k at weight 0 and exactly q at weight 1
        k_param.lerp_(q_param.detach(), 1.0 - m)
    return key


def queue_update(queue: EmbeddingQueue, keys: torch.Tensor) -> EmbeddingQueue:
    return queue.push(keys)
