"""Weighted k-NN classification on frozen encoder embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from mixmask import nnet


@dataclass
class FeatureBank:
    embeddings: torch.Tensor  # M x d, unit rows
    labels: torch.Tensor
    source: str = ""

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError("bank needs an M x d embedding matrix and M labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def build_bank(checkpoint, dataset, config: nnet.EncoderConfig | None = None) -> FeatureBank:
    """Embed every image of ``dataset`` (no augmentation) with an encoder or checkpoint path."""
    if isinstance(checkpoint, torch.nn.Module):
        model, source = checkpoint, "model"
    else:
        model, _ = nnet.load(checkpoint, config)
        source = str(checkpoint)
    if dataset.labels is None:
        raise ValueError("k-NN bank needs a labeled dataset")
    x = dataset.data.to(next(model.parameters()).dtype)
    c = model.config
    if x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
        raise ValueError(f"dataset images {tuple(x.shape[1:])} do not match the encoder input "
                         f"({c.in_channels}, {c.image_size}, {c.image_size})")
    emb = nnet.embed(model, x)
    return FeatureBank(emb, dataset.labels.clone(), source)


def knn_classify(bank: FeatureBank, queries: torch.Tensor, k: int = 20, temperature: float = 0.1,
                 num_classes: int | None = None) -> torch.Tensor:
    """Vote among the top-k cosine neighbours with weights exp(sim / temperature).

    Ties between classes go to the lower class id.
    """
    if len(bank) == 0:
        raise ValueError("feature bank is empty")
    if not 1 <= k <= len(bank):
        raise ValueError(f"k must lie in [1, {len(bank)}], got {k}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    num_classes = num_classes or bank.num_classes
    sims = queries.to(bank.embeddings.dtype) @ bank.embeddings.T
    top_sim, top_idx = sims.topk(k, dim=1)
    weights = torch.exp((top_sim - top_sim[:, :1]) / temperature)  # row-wise rescale, same argmax
    votes = torch.zeros(len(queries), num_classes, dtype=weights.dtype)
    votes.scatter_add_(1, bank.labels[top_idx], weights)
    return votes.argmax(dim=1)


def knn_accuracy(bank: FeatureBank, queries: torch.Tensor, labels: torch.Tensor, k: int = 20,
                 temperature: float = 0.1) -> tuple[float, dict[int, float]]:
    """Overall accuracy and per-class accuracy over ``queries``."""
    num_classes = max(bank.num_classes, int(labels.max()) + 1)
    pred = knn_classify(bank, queries, k, temperature, num_classes)
    correct = pred == labels
    per_class = {int(c): float(correct[labels == c].float().mean()) for c in labels.unique()}
    return float(correct.float().mean()), per_class


def evaluate_knn(model_or_ckpt, train_set, test_set, k: int = 20, temperature: float = 0.1):
    model = model_or_ckpt if isinstance(model_or_ckpt, torch.nn.Module) else nnet.load(model_or_ckpt)[0]
    bank = build_bank(model, train_set)
    queries = nnet.embed(model, test_set.data.to(bank.embeddings.dtype))
    return knn_accuracy(bank, queries, test_set.labels, k, temperature)
