"""Shared fixtures: a small synthetic corpus with extracted features."""

from dataclasses import dataclass

import numpy as np
import pytest

from asckit import dataio, dsp


@dataclass
class SynthCorpus:
    root: object            # pathlib.Path of the dataset directory
    manifest_path: object
    rows: list              # ManifestRow, manifest order
    features: dict          # segment_id -> float32 [256, 512]


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """10 classes x 4 segments with features, used across test modules."""
    root = tmp_path_factory.mktemp("synthcorpus")
    manifest = dataio.synth_dataset(root, per_class=4, seed=20250809)
    rows, errors = dataio.parse_manifest(manifest.read_text())
    assert not errors
    features = {}
    for r in rows:
        samples, rate = dataio.decode_wav((root / r.path).read_bytes())
        feats = dsp.extract_features(samples, rate)
        features[r.segment_id] = feats.values.astype(np.float32)
    return SynthCorpus(root=root, manifest_path=manifest, rows=rows,
                       features=features)
