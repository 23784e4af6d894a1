import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hybridps.corpus import DomainSpec, StyleSpec, SynthSpec, generate_synthetic_corpus


def small_synth_spec():
    """A tiny 4-domain pre-training corpus plus a target train/eval pair."""
    return SynthSpec(domains=[
        DomainSpec("det_a", "detection", 20, (64, 64),
                   StyleSpec([[0.16, 0.28, 0.48], [0.26, 0.40, 0.62]], 6.0, 0.0, 0.02),
                   glyphs_per_image=(1, 4)),
        DomainSpec("det_b", "detection", 20, (80, 64),
                   StyleSpec([[0.52, 0.36, 0.18], [0.68, 0.52, 0.30]], 3.0, 0.9, 0.03),
                   glyphs_per_image=(1, 3)),
        DomainSpec("reid_lab", "reid_labeled", 24, (24, 48),
                   StyleSpec([[0.18, 0.44, 0.24], [0.30, 0.58, 0.36]], 4.0, 1.6, 0.02),
                   identities=6),
        DomainSpec("reid_unlab", "reid_unlabeled", 16, (24, 48),
                   StyleSpec([[0.40, 0.20, 0.42], [0.56, 0.32, 0.58]], 8.0, 0.5, 0.03)),
        DomainSpec("target_train", "detection", 16, (64, 64),
                   StyleSpec([[0.42, 0.42, 0.46], [0.55, 0.53, 0.58]], 5.0, 0.3, 0.02),
                   identities=10, glyphs_per_image=(2, 3), with_identities=True),
        DomainSpec("target_eval", "detection", 16, (64, 64),
                   StyleSpec([[0.42, 0.42, 0.46], [0.55, 0.53, 0.58]], 5.0, 0.3, 0.02),
                   identities=10, glyphs_per_image=(2, 3), with_identities=True),
    ])


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifests = generate_synthetic_corpus(small_synth_spec(), out, seed=7)
    return {"root": out, "manifests": manifests,
            "by_name": {m.dataset_id: m for m in manifests}}
