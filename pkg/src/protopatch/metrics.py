"""Classification metrics, mean/std aggregation, and embedding export.

Per-episode metrics are macro-averaged over classes; grid summaries use the
sample standard deviation (divisor n-1). The embedding dump stores the raw
M x D matrix with class labels; 2-D projection is left to external tooling.
"""

import struct
from dataclasses import dataclass

import numpy as np

EMBED_MAGIC = b"PSEMB1"


@dataclass
class ClassificationMetrics:
    """Single-pass accuracy and macro precision/recall/F1 with the confusion matrix."""

    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    confusion: np.ndarray
    n: int


@dataclass
class EpisodeMetrics(ClassificationMetrics):
    episode_index: int = -1


@dataclass
class MetricsSummary:
    """Mean and sample standard deviation of a metric over several runs."""

    mean: float
    std: float
    n: int
    inputs: tuple


@dataclass
class EmbeddingDump:
    """Raw embedding matrix with class labels, ready for external projection."""

    vectors: np.ndarray  # M x D float32
    class_keys: tuple  # M labels
    view: str
    config_hash: str = ""


def confusion_matrix(predictions, truth, n_classes: int) -> np.ndarray:
    """Counts with truth on rows and predictions on columns."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth must have equal length")
    if predictions.size == 0:
        raise ValueError("empty input")
    for name, arr in (("predictions", predictions), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels out of range [0, {n_classes})")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (truth, predictions), 1)
    return matrix


def episode_metrics(predictions, truth, n_way: int, episode_index: int = -1) -> EpisodeMetrics:
    """Accuracy plus macro precision/recall/F1 for one episode.

    A class that is never predicted contributes precision 0, never NaN, so
    aggregation stays total.
    """
    matrix = confusion_matrix(predictions, truth, n_way)
    total = int(matrix.sum())
    diag = np.diag(matrix).astype(np.float64)
    predicted = matrix.sum(axis=0).astype(np.float64)
    actual = matrix.sum(axis=1).astype(np.float64)

    precision = np.divide(diag, predicted, out=np.zeros(n_way), where=predicted > 0)
    recall = np.divide(diag, actual, out=np.zeros(n_way), where=actual > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_way), where=pr > 0)

    return EpisodeMetrics(
        accuracy=float(diag.sum() / total),
        precision_macro=float(precision.mean()),
        recall_macro=float(recall.mean()),
        f1_macro=float(f1.mean()),
        confusion=matrix,
        n=total,
        episode_index=episode_index,
    )


def aggregate(values) -> MetricsSummary:
    """Arithmetic mean and sample std (divisor n-1) of a value sequence."""
    inputs = tuple(float(v) for v in values)
    if len(inputs) < 2:
        raise ValueError("aggregation needs at least 2 values for a sample std")
    arr = np.asarray(inputs, dtype=np.float64)
    return MetricsSummary(
        mean=float(arr.mean()), std=float(arr.std(ddof=1)), n=len(inputs), inputs=inputs
    )


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(encoder, patches, class_keys, destination,
                      view: str = "SUR", config_hash: str = "") -> EmbeddingDump:
    """Embed standardized patches and write the dump file; returns the dump."""
    from .protonet import embed  # local import to avoid a module cycle

    patches = np.asarray(patches)
    if patches.size == 0:
        raise ValueError("empty patch set")
    class_keys = tuple(class_keys)
    if len(class_keys) != patches.shape[0]:
        raise ValueError("one class key per patch is required")
    vectors = embed(encoder, patches).astype(np.float32)
    dump = EmbeddingDump(vectors=vectors, class_keys=class_keys,
                         view=view, config_hash=config_hash)
    write_embedding_dump(dump, destination)
    return dump


def write_embedding_dump(dump: EmbeddingDump, path) -> None:
    """Binary layout: magic, M, D, view, config hash, key table, matrix, labels."""
    vectors = np.ascontiguousarray(dump.vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("vectors must be a nonempty M x D matrix")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("vectors contain non-finite entries")
    m, d = vectors.shape
    keys = sorted(set(dump.class_keys))
    if len(keys) > 255:
        raise ValueError("at most 255 distinct class keys are supported")
    key_index = {k: i for i, k in enumerate(keys)}
    labels = bytes(key_index[k] for k in dump.class_keys)

    view_b = dump.view.encode("ascii")
    hash_b = dump.config_hash.encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(EMBED_MAGIC)
            fh.write(struct.pack("<II", m, d))
            fh.write(struct.pack("<B", len(view_b)) + view_b)
            fh.write(struct.pack("<H", len(hash_b)) + hash_b)
            fh.write(struct.pack("<B", len(keys)))
            for k in keys:
                kb = k.encode("utf-8")
                fh.write(struct.pack("<B", len(kb)) + kb)
            fh.write(vectors.tobytes())
            fh.write(labels)
    except OSError as exc:
        raise OSError(f"failed writing embedding dump to {path}: {exc}") from exc


def read_embedding_dump(path) -> EmbeddingDump:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise OSError(f"failed reading embedding dump from {path}: {exc}") from exc
    if blob[: len(EMBED_MAGIC)] != EMBED_MAGIC:
        raise ValueError(f"{path} is not an embedding dump")
    off = len(EMBED_MAGIC)
    m, d = struct.unpack_from("<II", blob, off)
    off += 8
    (vlen,) = struct.unpack_from("<B", blob, off)
    off += 1
    view = blob[off : off + vlen].decode("ascii")
    off += vlen
    (hlen,) = struct.unpack_from("<H", blob, off)
    off += 2
    config_hash = blob[off : off + hlen].decode("utf-8")
    off += hlen
    (n_keys,) = struct.unpack_from("<B", blob, off)
    off += 1
    keys = []
    for _ in range(n_keys):
        (klen,) = struct.unpack_from("<B", blob, off)
        off += 1
        keys.append(blob[off : off + klen].decode("utf-8"))
        off += klen
    vectors = np.frombuffer(blob, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    off += m * d * 4
    labels = blob[off : off + m]
    class_keys = tuple(keys[b] for b in labels)
    return EmbeddingDump(vectors=vectors.copy(), class_keys=class_keys,
                         view=view, config_hash=config_hash)


def write_embedding_text(dump: EmbeddingDump, path) -> None:
    """Tab-separated text variant for human inspection."""
    with open(path, "w") as fh:
        fh.write(f"# view={dump.view} config_hash={dump.config_hash} "
                 f"m={dump.vectors.shape[0]} d={dump.vectors.shape[1]}\n")
        for key, row in zip(dump.class_keys, dump.vectors):
            fh.write(key + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
