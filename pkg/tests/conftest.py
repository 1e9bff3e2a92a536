import numpy as np
import pytest

from protopatch import DatasetManifest, PatchRecord
from protopatch.data import CLASS_KEYS, PatchSource
from protopatch._util import rng_from


def flat_manifest(per_class_train, per_class_test=0, n_classes=6, view="SUR", seed=0):
    """Metadata-only balanced manifest; no pixel payloads attached."""
    records, split = [], {}
    for class_key in CLASS_KEYS[:n_classes]:
        for i in range(per_class_train + per_class_test):
            pid = f"{view}/{class_key}/img{i // 10:03d}.png#p{i % 10:04d}"
            records.append(
                PatchRecord(
                    patch_id=pid,
                    source_image_id=f"{view}/{class_key}/img{i // 10:03d}.png",
                    class_key=class_key,
                    view=view,
                    origin=(0, 0),
                )
            )
            split[pid] = "train" if i < per_class_train else "test"
    return DatasetManifest(records=records, view=view, split=split, seed=seed)


class RandomPatchSource(PatchSource):
    """Deterministic standardized noise per patch id, for encoder plumbing tests.

    Patch content depends only on the id, so identical ids always produce
    identical arrays regardless of call order.
    """

    def __init__(self, size=64, class_shift=0.0):
        self.size = size
        self.class_shift = class_shift

    def standardized(self, patch_id):
        rng = rng_from("pixels", patch_id)
        arr = rng.normal(0.0, 1.0, size=(self.size, self.size, 3))
        if self.class_shift:
            class_key = patch_id.split("/")[1]
            idx = CLASS_KEYS.index(class_key)
            direction = np.zeros(3)
            direction[idx % 3] = 1.0 if idx < 3 else -1.0
            arr = arr + self.class_shift * direction
        return arr


@pytest.fixture(scope="session")
def synthetic_corpus():
    from protopatch import gen_synthetic_dataset

    return gen_synthetic_dataset(
        n_classes=6, images_per_class=4, image_size=288, separability=2.5, seed=11
    )


@pytest.fixture(scope="session")
def synthetic_manifest(synthetic_corpus):
    from protopatch import build_manifest

    # 4 images/class, quota 40 -> 10 patches per image, 3/1 image split
    manifest, source = build_manifest(
        synthetic_corpus, per_class_quota=40, train_fraction=0.8, seed=7
    )
    return manifest, source
