"""Prototype-based few-shot classification over patch embeddings.

An encoder maps standardized patches to D-dimensional vectors; class
prototypes are support-set means; queries are scored by negative squared
Euclidean distance to each prototype, trained with cross-entropy on those
logits. Public operations (compute_prototypes, classify_queries,
episode_loss) are numpy functions so they can be checked against simple
oracles; the training loop uses equivalent torch ops end to end.
"""

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import EpisodeMetrics, episode_metrics

ENCODER_DIMS = {
    "resnet18": 512,
    "resnet34": 512,
    "resnet50": 2048,
    "tiny_test_cnn": 8,
}


class Encoder(nn.Module):
    """Backbone network producing a flat embedding, no classifier head."""

    def __init__(self, identity: str, pretrained: bool = False):
        super().__init__()
        if identity not in ENCODER_DIMS:
            raise ValueError(f"unknown encoder identity {identity!r}")
        self.identity = identity
        self.pretrained = pretrained
        self.embedding_dim = ENCODER_DIMS[identity]
        if identity == "tiny_test_cnn":
            if pretrained:
                raise ValueError("tiny_test_cnn has no pretrained weights")
            self.net = _tiny_test_cnn()
        else:
            self.net = _resnet_backbone(identity, pretrained)

    def forward(self, x):
        return self.net(x)


def _tiny_test_cnn() -> nn.Sequential:
    # ~1k parameters so exhaustive finite-difference checks stay fast; tanh
    # and average pooling keep the function smooth for those checks
    return nn.Sequential(
        nn.Conv2d(3, 4, kernel_size=5, stride=4, padding=2),
        nn.Tanh(),
        nn.AvgPool2d(2),
        nn.Conv2d(4, 6, kernel_size=3, stride=2, padding=1),
        nn.Tanh(),
        nn.Conv2d(6, 8, kernel_size=3, stride=2, padding=1),
        nn.Tanh(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
    )


def _resnet_backbone(identity: str, pretrained: bool) -> nn.Module:
    from torchvision import models

    factory = getattr(models, identity)
    weights = "IMAGENET1K_V1" if pretrained else None
    net = factory(weights=weights)
    # drop the classifier: the pooled features pass through unchanged
    net.fc = nn.Flatten(start_dim=1)
    return net


def make_encoder(identity: str, pretrained: bool = False, seed: int = 0) -> Encoder:
    """Build an encoder with deterministic random initialization."""
    torch.manual_seed(seed)
    encoder = Encoder(identity, pretrained)
    encoder.eval()
    return encoder


# ---------------------------------------------------------------------------
# embeddings, prototypes, query classification


@dataclass
class EmbeddingBatch:
    """B x D embedding matrix with per-row episode labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValueError("vectors must be a nonempty B x D matrix")
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValueError("one label per embedding row is required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding batch contains non-finite entries")


@dataclass
class PrototypeSet:
    """One centroid embedding per episode class, rows ordered by label."""

    prototypes: np.ndarray
    class_order: tuple

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape[0] != len(self.class_order):
            raise ValueError("one prototype row per class is required")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes contain non-finite entries")


def _to_input_tensor(patches, dtype=torch.float32) -> torch.Tensor:
    if isinstance(patches, torch.Tensor):
        x = patches
    else:
        x = torch.from_numpy(np.ascontiguousarray(patches))
    if x.ndim != 4:
        raise ValueError("expected a (B, H, W, C) patch batch")
    return x.permute(0, 3, 1, 2).contiguous().to(dtype)


def embed(encoder: Encoder, patches, train_mode: bool = False) -> np.ndarray:
    """Map a batch of standardized patches to a B x D float32 matrix.

    Runs in evaluation mode (deterministic normalization statistics) unless
    train_mode is set by a training step.
    """
    x = _to_input_tensor(patches)
    if x.shape[0] == 0:
        raise ValueError("empty patch batch")
    encoder.train(train_mode)
    with torch.no_grad():
        out = encoder(x)
    encoder.eval()
    vectors = out.cpu().numpy().astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
    if bad.size:
        raise ValueError(f"non-finite embedding at batch index {int(bad[0])}")
    return vectors


def compute_prototypes(support: EmbeddingBatch, n_way: int, class_order=None) -> PrototypeSet:
    """Prototype k = arithmetic mean of support vectors labeled k."""
    if class_order is None:
        class_order = tuple(range(n_way))
    if len(class_order) != n_way:
        raise ValueError("class_order length must equal n_way")
    rows = []
    for k in range(n_way):
        mask = support.labels == k
        if not mask.any():
            raise ValueError(f"no support examples for class {k}")
        rows.append(support.vectors[mask].mean(axis=0))
    return PrototypeSet(prototypes=np.stack(rows), class_order=tuple(class_order))


def classify_queries(queries: EmbeddingBatch, prototypes: PrototypeSet):
    """Score queries by negative squared Euclidean distance to each prototype.

    Returns (logits, probabilities, predictions); probabilities are the
    row-wise softmax of the logits and argmax ties go to the lowest class
    index.
    """
    q = queries.vectors
    p = prototypes.prototypes
    if q.shape[1] != p.shape[1]:
        raise ValueError(
            f"query dimension {q.shape[1]} does not match prototype dimension {p.shape[1]}"
        )
    diffs = q[:, None, :] - p[None, :, :]
    logits = -np.einsum("bkd,bkd->bk", diffs, diffs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probabilities = expd / expd.sum(axis=1, keepdims=True)
    predictions = np.argmax(logits, axis=1)
    return logits, probabilities, predictions


def episode_loss(logits, labels) -> float:
    """Mean cross-entropy of the episode's query logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite entries")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of range")
    row_max = logits.max(axis=1)
    lse = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(lse - picked))


# ---------------------------------------------------------------------------
# torch episode forward (shared by training and the gradient harness)


def _prototypes_t(z: torch.Tensor, labels: torch.Tensor, n_way: int) -> torch.Tensor:
    return torch.stack([z[labels == k].mean(dim=0) for k in range(n_way)])


def _negsq_logits_t(zq: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    return -(zq[:, None, :] - protos[None, :, :]).pow(2).sum(dim=-1)


def _episode_loss_t(encoder: Encoder, x: torch.Tensor, support_labels: torch.Tensor,
                    query_labels: torch.Tensor, n_way: int) -> torch.Tensor:
    """Embed the whole episode in one pass and return the query cross-entropy."""
    n_support = support_labels.shape[0]
    z = encoder(x)
    protos = _prototypes_t(z[:n_support], support_labels, n_way)
    logits = _negsq_logits_t(z[n_support:], protos)
    return F.cross_entropy(logits, query_labels)


def _episode_tensors(episode, patch_source, dtype=torch.float32):
    x = _to_input_tensor(
        patch_source.batch(episode.support_ids + episode.query_ids), dtype
    )
    ls = torch.as_tensor(episode.support_labels, dtype=torch.long)
    lq = torch.as_tensor(episode.query_labels, dtype=torch.long)
    return x, ls, lq


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainState:
    """Encoder plus optimizer moments and the loss trace of a training run."""

    encoder: Encoder
    optimizer: torch.optim.Optimizer
    learning_rate: float
    step: int = 0
    loss_history: list = field(default_factory=list)


def init_train_state(encoder: Encoder, learning_rate: float = 1e-4) -> TrainState:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    optimizer = torch.optim.Adam(
        encoder.parameters(), lr=learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    return TrainState(encoder=encoder, optimizer=optimizer, learning_rate=learning_rate)


def train_episodic(state: TrainState, episodes, patch_source, iterations: int) -> TrainState:
    """One Adam step per episode: prototypes from support, loss on queries."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    encoder = state.encoder
    done = 0
    for episode in episodes:
        if done >= iterations:
            break
        n_way = len(episode.classes)
        x, ls, lq = _episode_tensors(episode, patch_source)
        encoder.train()
        loss = _episode_loss_t(encoder, x, ls, lq, n_way)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {state.step}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.step += 1
        state.loss_history.append(float(loss.detach()))
        done += 1
    encoder.eval()
    if done < iterations:
        raise ValueError(f"episode stream ended after {done} of {iterations} iterations")
    return state


def evaluate(encoder: Encoder, episodes, patch_source) -> list:
    """Score episodes without touching parameters; one metrics record each."""
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to evaluate")
    results = []
    for episode in episodes:
        n_way = len(episode.classes)
        vectors = embed(encoder, patch_source.batch(episode.support_ids + episode.query_ids))
        n_support = len(episode.support)
        support = EmbeddingBatch(vectors[:n_support], episode.support_labels)
        queries = EmbeddingBatch(vectors[n_support:], episode.query_labels)
        protos = compute_prototypes(support, n_way, class_order=episode.classes)
        _, _, predictions = classify_queries(queries, protos)
        results.append(
            episode_metrics(predictions, episode.query_labels, n_way, episode.index)
        )
    return results


# ---------------------------------------------------------------------------
# gradient verification harness


def analytic_episode_gradients(encoder: Encoder, episode, patch_source) -> dict:
    """Backpropagated episode-loss gradient for every named parameter."""
    n_way = len(episode.classes)
    x, ls, lq = _episode_tensors(episode, patch_source)
    encoder.train()
    encoder.zero_grad(set_to_none=True)
    loss = _episode_loss_t(encoder, x, ls, lq, n_way)
    loss.backward()
    encoder.eval()
    return {
        name: p.grad.detach().cpu().numpy().copy()
        for name, p in encoder.named_parameters()
    }


def finite_difference_gradients(encoder: Encoder, episode, patch_source,
                                step: float = 1e-3) -> dict:
    """Central finite differences of the episode loss for every parameter.

    Evaluations run on a float64 clone of the encoder so the difference
    quotient is not dominated by forward-pass rounding.
    """
    n_way = len(episode.classes)
    clone = copy.deepcopy(encoder).to(torch.float64)
    clone.eval()
    x, ls, lq = _episode_tensors(episode, patch_source, dtype=torch.float64)

    grads = {}
    with torch.no_grad():
        for name, param in clone.named_parameters():
            flat = param.view(-1)
            grad = np.empty(flat.shape[0], dtype=np.float64)
            for i in range(flat.shape[0]):
                orig = flat[i].item()
                flat[i] = orig + step
                up = _episode_loss_t(clone, x, ls, lq, n_way).item()
                flat[i] = orig - step
                down = _episode_loss_t(clone, x, ls, lq, n_way).item()
                flat[i] = orig
                grad[i] = (up - down) / (2 * step)
            grads[name] = grad.reshape(param.shape)
    return grads


def max_gradient_error(analytic: dict, numeric: dict, atol: float = 1e-5,
                       rtol: float = 1e-3) -> float:
    """Worst per-parameter relative error between two gradient sets.

    The denominator carries an atol/rtol floor, so a result below rtol is
    exactly |a - n| <= atol + rtol * max(|a|, |n|) for every parameter;
    without the floor, parameters with near-zero gradients would amplify
    finite-difference noise into meaningless ratios.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 0.0) + atol / rtol
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state_or_encoder, config_hash: str = "") -> None:
    """Write the opaque weight blob plus a sidecar JSON descriptor."""
    if isinstance(state_or_encoder, TrainState):
        encoder = state_or_encoder.encoder
        payload = {
            "state_dict": encoder.state_dict(),
            "optimizer": state_or_encoder.optimizer.state_dict(),
            "step": state_or_encoder.step,
            "learning_rate": state_or_encoder.learning_rate,
            "loss_history": list(state_or_encoder.loss_history),
        }
        step = state_or_encoder.step
    else:
        encoder = state_or_encoder
        payload = {"state_dict": encoder.state_dict(), "step": 0}
        step = 0
    payload["identity"] = encoder.identity
    payload["pretrained"] = encoder.pretrained
    torch.save(payload, path)
    descriptor = {
        "identity": encoder.identity,
        "embedding_dim": encoder.embedding_dim,
        "pretrained": encoder.pretrained,
        "config_hash": config_hash,
        "step": step,
        "saved_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    Path(str(path) + ".json").write_text(json.dumps(descriptor, indent=1))


def load_checkpoint(path) -> tuple:
    """Rebuild the encoder from a checkpoint; returns (encoder, descriptor)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    encoder = Encoder(payload["identity"], pretrained=False)
    encoder.pretrained = payload.get("pretrained", False)
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    sidecar = Path(str(path) + ".json")
    descriptor = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    descriptor.setdefault("step", payload.get("step", 0))
    return encoder, descriptor
