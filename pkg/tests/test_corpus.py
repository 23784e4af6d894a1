import filecmp
import os

import numpy as np
import pytest

from hybridps.corpus import (
    CorpusGenerationError,
    CorpusManifest,
    DetectionRecord,
    ManifestIngestionError,
    ManifestParseError,
    ManifestValidationError,
    ReidRecord,
    DomainSpec,
    StyleSpec,
    SynthSpec,
    generate_synthetic_corpus,
    histogram_domain_accuracy,
    identity_color_pair,
    load_manifest,
    render_scene,
    save_manifest,
)
from hybridps.utils import load_image, rng_for, save_image

from conftest import small_synth_spec


def _write_image(path, w=32, h=40):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_image(np.full((h, w, 3), 0.5, np.float32), path)


def _write_manifest(tmp_path, lines):
    p = tmp_path / "manifest.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


HEADER = '{"dataset_id":"d0","kind":"detection","manifest_version":1}'


class TestLoadManifest:
    def test_valid_detection_lines(self, tmp_path):
        _write_image(tmp_path / "img/a.png")
        lines = [HEADER] + [
            '{"image":"img/a.png","boxes":[[1,2,10,20]]}',
            '{"image":"img/a.png","boxes":[]}',
            '{"image":"img/a.png","boxes":[[0,0,32,40],[5,5,6,6]]}',
        ]
        m = load_manifest(_write_manifest(tmp_path, lines))
        assert m.kind == "detection" and m.dataset_id == "d0"
        assert len(m.records) == 3
        assert m.records[1].boxes == []
        assert m.image_size_stats == {"width": [32, 32], "height": [40, 40]}

    def test_invalid_box_cites_line(self, tmp_path):
        _write_image(tmp_path / "img/a.png")
        lines = [HEADER, '{"image":"img/a.png","boxes":[[10,2,10,20]]}']
        with pytest.raises(ManifestValidationError, match="line 2"):
            load_manifest(_write_manifest(tmp_path, lines))

    def test_malformed_json_cites_line(self, tmp_path):
        _write_image(tmp_path / "img/a.png")
        lines = [HEADER, '{"image":"img/a.png","boxes":[[1,2,3,4]]}', "{not json"]
        with pytest.raises(ManifestParseError, match="line 3"):
            load_manifest(_write_manifest(tmp_path, lines))

    def test_missing_image_is_ingestion_error(self, tmp_path):
        lines = [HEADER, '{"image":"img/nope.png","boxes":[]}']
        with pytest.raises(ManifestIngestionError):
            load_manifest(_write_manifest(tmp_path, lines))

    def test_box_outside_image_rejected(self, tmp_path):
        _write_image(tmp_path / "img/a.png", w=32, h=40)
        lines = [HEADER, '{"image":"img/a.png","boxes":[[1,2,33,20]]}']
        with pytest.raises(ManifestValidationError):
            load_manifest(_write_manifest(tmp_path, lines))

    def test_labeled_reid_requires_identity(self, tmp_path):
        _write_image(tmp_path / "img/a.png")
        header = '{"dataset_id":"r0","kind":"reid_labeled","manifest_version":1}'
        lines = [header, '{"image":"img/a.png","identity":null}']
        with pytest.raises(ManifestValidationError):
            load_manifest(_write_manifest(tmp_path, lines))

    def test_unlabeled_reid_rejects_identity(self, tmp_path):
        _write_image(tmp_path / "img/a.png")
        header = '{"dataset_id":"r0","kind":"reid_unlabeled","manifest_version":1}'
        lines = [header, '{"image":"img/a.png","identity":4}']
        with pytest.raises(ManifestValidationError):
            load_manifest(_write_manifest(tmp_path, lines))


class TestRoundTrip:
    def test_random_manifests_roundtrip(self, tmp_path):
        rng = rng_for(11, "roundtrip")
        for trial in range(8):
            root = tmp_path / f"m{trial}"
            kind = ["detection", "reid_labeled", "reid_unlabeled"][trial % 3]
            records = []
            for i in range(int(rng.integers(1, 6))):
                rel = f"img/{i}.png"
                w, h = int(rng.integers(16, 64)), int(rng.integers(16, 64))
                _write_image(root / rel, w, h)
                if kind == "detection":
                    boxes = []
                    for _ in range(int(rng.integers(0, 4))):
                        x0 = rng.uniform(0, w - 2)
                        y0 = rng.uniform(0, h - 2)
                        boxes.append((round(x0, 3), round(y0, 3),
                                      round(rng.uniform(x0 + 1, w), 3),
                                      round(rng.uniform(y0 + 1, h), 3)))
                    ids = list(range(len(boxes))) if trial % 2 else None
                    records.append(DetectionRecord(rel, boxes, "dX", ids))
                elif kind == "reid_labeled":
                    records.append(ReidRecord(rel, int(rng.integers(0, 9)), "dX"))
                else:
                    records.append(ReidRecord(rel, None, "dX"))
            m = CorpusManifest("dX", kind, records, root=str(root))
            path = root / "manifest.jsonl"
            save_manifest(m, path)
            loaded = load_manifest(path)
            assert loaded.dataset_id == m.dataset_id and loaded.kind == m.kind
            assert loaded.records == m.records
            # a second save of the loaded manifest is byte-identical
            path2 = root / "again.jsonl"
            save_manifest(loaded, path2)
            assert path.read_text() == path2.read_text()


class TestGenerator:
    def test_domain_cardinality_and_counts(self, tiny_corpus):
        names = [m.dataset_id for m in tiny_corpus["manifests"]]
        assert len(set(names)) == len(names) == 6
        lab = tiny_corpus["by_name"]["reid_lab"]
        assert len(lab.records) == 24
        per_id = {}
        for r in lab.records:
            per_id[r.identity] = per_id.get(r.identity, 0) + 1
        assert per_id == {i: 4 for i in range(6)}
        unlab = tiny_corpus["by_name"]["reid_unlab"]
        assert all(r.identity is None for r in unlab.records)

    def test_labeled_counts_match_spec_example(self, tmp_path):
        spec = SynthSpec(domains=[DomainSpec(
            "r", "reid_labeled", 80, (24, 48),
            StyleSpec([[0.3, 0.3, 0.3]]), identities=10)])
        (m,) = generate_synthetic_corpus(spec, tmp_path, seed=5)
        assert len(m.records) == 80
        counts = {}
        for r in m.records:
            counts[r.identity] = counts.get(r.identity, 0) + 1
        assert counts == {i: 8 for i in range(10)}

    def test_determinism_byte_identical(self, tmp_path):
        spec = small_synth_spec()
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic_corpus(spec, a, seed=7)
        generate_synthetic_corpus(spec, b, seed=7)
        for dom in ("det_a", "reid_lab"):
            assert (a / dom / "manifest.jsonl").read_bytes() == (b / dom / "manifest.jsonl").read_bytes()
            ia = sorted((a / dom / "images").iterdir())
            ib = sorted((b / dom / "images").iterdir())
            assert [p.name for p in ia] == [p.name for p in ib]
            for pa, pb in zip(ia, ib):
                assert filecmp.cmp(pa, pb, shallow=False)

    def test_different_seed_changes_pixels(self, tmp_path):
        spec = small_synth_spec()
        generate_synthetic_corpus(spec, tmp_path / "a", seed=7)
        generate_synthetic_corpus(spec, tmp_path / "b", seed=8)
        assert not filecmp.cmp(tmp_path / "a/det_a/images/00000.png",
                               tmp_path / "b/det_a/images/00000.png", shallow=False)

    def test_identity_capacity_error(self, tmp_path):
        spec = SynthSpec(domains=[DomainSpec(
            "r", "reid_labeled", 4, (24, 48),
            StyleSpec([[0.3, 0.3, 0.3]]), identities=100000)])
        with pytest.raises(CorpusGenerationError, match="capacity"):
            generate_synthetic_corpus(spec, tmp_path, seed=1)

    def test_boxes_enclose_glyph_masks(self, tiny_corpus):
        # re-render scenes through the same derivation and check the masks
        spec = {d.name: d for d in small_synth_spec().domains}["det_a"]
        m = tiny_corpus["by_name"]["det_a"]
        checked = 0
        for i, rec in enumerate(m.records[:10]):
            img, boxes, _, masks = render_scene(spec, rng_for(7, "synth", "det_a", i), 7)
            assert [tuple(b) for b in boxes] == [tuple(b) for b in rec.boxes]
            h, w = img.shape[:2]
            for box, mask in zip(boxes, masks):
                x0, y0, x1, y1 = box
                assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h
                total = mask.sum()
                if total == 0:
                    continue
                inside = mask[int(y0):int(np.ceil(y1)), int(x0):int(np.ceil(x1))].sum()
                assert inside / total >= 0.95
                checked += 1
        assert checked > 0

    def test_rendered_image_matches_written_file(self, tiny_corpus):
        spec = {d.name: d for d in small_synth_spec().domains}["det_a"]
        m = tiny_corpus["by_name"]["det_a"]
        img, _, _, _ = render_scene(spec, rng_for(7, "synth", "det_a", 0), 7)
        disk = load_image(m.resolve(m.records[0]))
        assert np.abs(disk - np.clip(img, 0, 1)).max() <= 1.0 / 255.0

    def test_identity_colors_are_stable_and_bounded(self):
        a1 = identity_color_pair("d", 3, seed=0)
        a2 = identity_color_pair("d", 3, seed=0)
        assert np.allclose(a1[0], a2[0]) and np.allclose(a1[1], a2[1])
        with pytest.raises(CorpusGenerationError):
            identity_color_pair("d", 10**6, seed=0)


def test_domain_histogram_separability(tiny_corpus):
    pretrain = [tiny_corpus["by_name"][n] for n in ("det_a", "det_b", "reid_lab", "reid_unlab")]
    acc = histogram_domain_accuracy(pretrain, seed=3)
    assert acc >= 0.9
