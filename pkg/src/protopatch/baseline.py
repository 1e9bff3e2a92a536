"""Conventional fine-tuned classifier: the non-episodic comparison model.

Same backbones, same budgeted training data as the episodic pipeline, but a
fresh linear head and plain mini-batch cross-entropy training. Evaluation is
a single pass over every test patch.
"""

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._util import rng_from
from .episodes import BudgetedDataset
from .metrics import ClassificationMetrics, episode_metrics
from .protonet import Encoder, _to_input_tensor, make_encoder


@dataclass
class ClassifierConfig:
    backbone: str
    n_classes: int = 6
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    pretrained: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class BaselineClassifier(nn.Module):
    """Backbone plus a fresh linear head over the embedding."""

    def __init__(self, encoder: Encoder, n_classes: int, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.classes: tuple = ()
        self.head = nn.Linear(encoder.embedding_dim, n_classes)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.head.weight.uniform_(-0.01, 0.01, generator=gen)
            self.head.bias.zero_()

    def forward(self, x):
        return self.head(self.encoder(x))


def epochs_for_step_parity(n_train: int, batch_size: int, target_steps: int = 1000) -> int:
    """Epoch count whose optimizer-step total lands nearest target_steps."""
    steps_per_epoch = math.ceil(n_train / batch_size)
    return max(1, round(target_steps / steps_per_epoch))


def train_baseline(config: ClassifierConfig, data: BudgetedDataset, patch_source):
    """Fine-tune backbone + head with cross-entropy on shuffled mini-batches.

    Returns (model, step_losses). The model's class order is the sorted class
    keys of the budgeted train split.
    """
    populations = data.populations("train")
    classes = sorted(populations)
    if len(classes) != config.n_classes:
        raise ValueError(
            f"budget has {len(classes)} classes, config expects {config.n_classes}"
        )
    ids, labels = [], []
    for label, class_key in enumerate(classes):
        pool = populations[class_key]
        if not pool:
            raise ValueError(f"class {class_key} has no budgeted train patches")
        ids.extend(pool)
        labels.extend([label] * len(pool))
    labels = np.asarray(labels, dtype=np.int64)

    encoder = make_encoder(config.backbone, config.pretrained, config.seed)
    model = BaselineClassifier(encoder, config.n_classes, config.seed)
    model.classes = tuple(classes)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    rng = rng_from(config.seed, "baseline-shuffle")

    step_losses = []
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            x = _to_input_tensor(patch_source.batch([ids[i] for i in batch_idx]))
            y = torch.as_tensor(labels[batch_idx], dtype=torch.long)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {len(step_losses)}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_losses.append(float(loss.detach()))
    model.eval()
    return model, step_losses


def predict_baseline(model: BaselineClassifier, patch_ids, patch_source,
                     batch_size: int = 64) -> np.ndarray:
    """Argmax class indices for the given patches, in input order."""
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(patch_ids), batch_size):
            chunk = patch_ids[start : start + batch_size]
            logits = model(_to_input_tensor(patch_source.batch(chunk)))
            outputs.append(logits.argmax(dim=1).cpu().numpy())
    return np.concatenate(outputs)


def evaluate_baseline(model: BaselineClassifier, test_ids, test_labels,
                      patch_source) -> ClassificationMetrics:
    """Single-pass accuracy/precision/recall/F1 (macro) over all test patches."""
    test_ids = list(test_ids)
    if not test_ids:
        raise ValueError("empty test split")
    predictions = predict_baseline(model, test_ids, patch_source)
    m = episode_metrics(predictions, test_labels, len(model.classes))
    return ClassificationMetrics(
        accuracy=m.accuracy,
        precision_macro=m.precision_macro,
        recall_macro=m.recall_macro,
        f1_macro=m.f1_macro,
        confusion=m.confusion,
        n=m.n,
    )


def save_baseline(path, model: BaselineClassifier, config_hash: str = "") -> None:
    """Encoder-checkpoint format extended with the classifier head weights."""
    payload = {
        "state_dict": model.state_dict(),
        "identity": model.encoder.identity,
        "pretrained": model.encoder.pretrained,
        "n_classes": model.head.out_features,
        "classes": list(model.classes),
    }
    torch.save(payload, path)
    descriptor = {
        "identity": model.encoder.identity,
        "embedding_dim": model.encoder.embedding_dim,
        "pretrained": model.encoder.pretrained,
        "n_classes": model.head.out_features,
        "config_hash": config_hash,
        "saved_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    Path(str(path) + ".json").write_text(json.dumps(descriptor, indent=1))


def load_baseline(path) -> BaselineClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    encoder = Encoder(payload["identity"], pretrained=False)
    encoder.pretrained = payload.get("pretrained", False)
    model = BaselineClassifier(encoder, payload["n_classes"])
    model.load_state_dict(payload["state_dict"])
    model.classes = tuple(payload.get("classes", ()))
    model.eval()
    return model


def split_items(data: BudgetedDataset, split: str = "test"):
    """(patch_ids, labels) for one split, labels indexing the sorted class keys."""
    populations = data.populations(split)
    classes = sorted(populations)
    ids, labels = [], []
    for label, class_key in enumerate(classes):
        ids.extend(populations[class_key])
        labels.extend([label] * len(populations[class_key]))
    return ids, np.asarray(labels, dtype=np.int64)
