"""Generator tests: planted structure, mutual pairing, determinism, disk layout."""

import numpy as np
import pytest

from gvmt.dataio import (
    Vocabulary,
    load_corpus,
    read_embeddings,
    read_features,
)
from gvmt.errors import ConfigError, DataError
from gvmt.retrieval import build_index, retrieve_top_p, similarity_row
from gvmt.synthetic import (
    AmbiguityLabel,
    GenConfig,
    _place_pairs,
    audit_summary,
    generate,
    load_dataset,
    load_labels,
    source_token_inventory,
    target_token_inventory,
    write_dataset,
    write_labels,
)

CFG = GenConfig(n_videos=24, segs_per_video=12, ambiguity_rate=1.0 / 3.0, seed=7)


@pytest.fixture(scope="module")
def data():
    return generate(CFG)


def nearest_in_video(data, vid, seg):
    index = build_index(data.embeddings[vid])
    sims = similarity_row(index, seg).copy()
    sims[seg] = -np.inf
    return int(np.argmax(sims)), float(sims.max())


class TestStructure:
    def test_counts(self, data):
        assert CFG.pairs_per_video == 2
        assert len(data.records) == 24 * 12
        assert len(data.labels) == 24 * 4  # both pair members carry a label
        assert set(data.features) == {f"v{i:03d}" for i in range(24)}
        for vid in data.features:
            assert len(data.features[vid]) == 12
            assert data.features[vid][3].regions.shape == (4, 16)
            assert len(data.embeddings[vid]) == 12

    def test_audit_summary_rate(self, data):
        s = audit_summary(data)
        assert s["ambiguous_segments"] == 96
        assert s["ambiguity_rate"] == pytest.approx(4 / 12)

    def test_embeddings_are_unit(self, data):
        for vid in data.embeddings:
            for e in data.embeddings[vid]:
                assert np.linalg.norm(e.vector) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        a = generate(CFG)
        b = generate(CFG)
        assert [(r.video_id, r.seg_idx, r.source, r.target) for r in a.records] == [
            (r.video_id, r.seg_idx, r.source, r.target) for r in b.records
        ]
        for vid in a.features:
            for fa, fb in zip(a.features[vid], b.features[vid]):
                assert np.array_equal(fa.regions, fb.regions)
            for ea, eb in zip(a.embeddings[vid], b.embeddings[vid]):
                assert np.array_equal(ea.vector, eb.vector)
        assert a.labels == b.labels

    def test_seed_changes_content(self):
        base = generate(CFG)
        other = generate(
            GenConfig(n_videos=24, segs_per_video=12, ambiguity_rate=1.0 / 3.0, seed=8)
        )
        same = all(
            np.array_equal(fa.regions, fb.regions)
            for fa, fb in zip(base.features["v000"], other.features["v000"])
        )
        assert not same


class TestPlantedStructure:
    def test_partner_is_nearest_and_mutual(self, data):
        labelled = {(l.video_id, l.seg_idx) for l in data.labels}
        for lab in data.labels:
            partner, sim = nearest_in_video(data, lab.video_id, lab.seg_idx)
            assert sim > 0.9, "planted prototype should dominate"
            assert abs(partner - lab.seg_idx) >= CFG.min_marker_distance
            assert (lab.video_id, partner) in labelled
            back, _ = nearest_in_video(data, lab.video_id, partner)
            assert back == lab.seg_idx

    def test_partner_grid_encodes_my_sense(self, data):
        by_key = {(r.video_id, r.seg_idx): r for r in data.records}
        for lab in data.labels:
            rec = by_key[(lab.video_id, lab.seg_idx)]
            topic = int(rec.source[1][len("topic"):])
            partner, _ = nearest_in_video(data, lab.video_id, lab.seg_idx)
            grid = data.features[lab.video_id][partner].regions
            assert grid[:, 2 * topic].mean() > CFG.beacon / 2
            sense = grid[:, 2 * topic + 1].mean()
            want = f"form{topic}a" if sense > 0 else f"form{topic}b"
            assert want == lab.gold

    def test_top2_retrieval_contains_partner(self, data):
        for lab in data.labels[:12]:
            index = build_index(data.embeddings[lab.video_id])
            partner, _ = nearest_in_video(data, lab.video_id, lab.seg_idx)
            got = retrieve_top_p(index, lab.seg_idx, 2)
            assert sorted(got) == sorted([lab.seg_idx, partner])

    def test_query_grid_is_blind_on_its_own_topic(self, data):
        by_key = {(r.video_id, r.seg_idx): r for r in data.records}
        for lab in data.labels:
            rec = by_key[(lab.video_id, lab.seg_idx)]
            topic = int(rec.source[1][len("topic"):])
            own = data.features[lab.video_id][lab.seg_idx].regions
            level = np.abs(own[:, 2 * topic: 2 * topic + 2].mean(axis=0)).max()
            assert level < CFG.beacon / 2

    def test_topics_within_a_video_are_distinct(self, data):
        by_video = {}
        by_key = {(r.video_id, r.seg_idx): r for r in data.records}
        for lab in data.labels:
            rec = by_key[(lab.video_id, lab.seg_idx)]
            by_video.setdefault(lab.video_id, []).append(rec.source[1])
        for vid, topics in by_video.items():
            assert len(set(topics)) == len(topics), vid

    def test_both_forms_occur(self, data):
        suffixes = [lab.gold[-1] for lab in data.labels]
        assert suffixes.count("a") > 10
        assert suffixes.count("b") > 10

    def test_full_rate_labels_every_segment(self):
        cfg = GenConfig(
            n_videos=4, segs_per_video=6, ambiguity_rate=1.0, topics=6, seed=2
        )
        full = generate(cfg)
        assert len(full.labels) == 4 * 6
        labelled = {(l.video_id, l.seg_idx) for l in full.labels}
        assert len(labelled) == 24


class TestSentences:
    def test_query_sentences_carry_the_ambiguous_token(self, data):
        labelled = {(l.video_id, l.seg_idx): l for l in data.labels}
        for rec in data.records:
            key = (rec.video_id, rec.seg_idx)
            if key in labelled:
                assert rec.source[2] == "amb"
                assert rec.target[2] == labelled[key].gold
                assert labelled[key].distractor not in rec.target
            else:
                assert "amb" not in rec.source
            assert len(rec.source) == 5
            assert len(rec.target) == 5

    def test_inventories_cover_the_corpus(self, data):
        src_vocab = Vocabulary.build([source_token_inventory(CFG)])
        tgt_vocab = Vocabulary.build([target_token_inventory(CFG)])
        for rec in data.records:
            assert src_vocab.decode(src_vocab.encode(rec.source)) == rec.source
            assert tgt_vocab.decode(tgt_vocab.encode(rec.target)) == rec.target


class TestDisk:
    def test_round_trip(self, data, tmp_path):
        write_dataset(data, tmp_path)
        records, features, embeddings, labels, manifest = load_dataset(tmp_path)
        assert len(records) == len(data.records)
        assert records[0].source == data.records[0].source
        assert set(features) == set(data.features)
        for got, want in zip(features["v003"], data.features["v003"]):
            assert np.allclose(got.regions, want.regions, atol=1e-6)
        for got, want in zip(embeddings["v003"], data.embeddings["v003"]):
            assert np.allclose(got.vector, want.vector, atol=1e-9)
        assert labels == data.labels
        assert manifest["segments"] == len(data.records)

    def test_missing_corpus_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_label_file_errors(self, tmp_path):
        p = tmp_path / "labels.jsonl"
        p.write_text('{"video_id": "v0", "seg_idx": 1, "gold": "x"}\n')
        with pytest.raises(DataError, match="labels.jsonl:1"):
            load_labels(p)

    def test_label_round_trip(self, tmp_path):
        labs = [AmbiguityLabel("v9", 3, "form1a", "form1b")]
        write_labels(labs, tmp_path / "l.jsonl")
        assert load_labels(tmp_path / "l.jsonl") == labs


class TestPlacement:
    def test_distance_always_respected(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            pairs = _place_pairs(rng, 12, 2, 3)
            slots = [s for pair in pairs for s in pair]
            assert len(set(slots)) == len(slots)
            for q, m in pairs:
                assert abs(q - m) >= 3

    def test_tightest_full_matching(self):
        # six slots at distance three force the unique antipodal matching
        pairs = _place_pairs(np.random.default_rng(0), 6, 3, 3)
        assert sorted(tuple(sorted(p)) for p in pairs) == [(0, 3), (1, 4), (2, 5)]

    def test_impossible_placement_raises(self):
        with pytest.raises(DataError):
            _place_pairs(np.random.default_rng(0), 12, 2, 12)


class TestConfigValidation:
    def test_channel_capacity(self):
        with pytest.raises(ConfigError):
            GenConfig(ev=10, topics=6)

    def test_filler_floor(self):
        with pytest.raises(ConfigError):
            GenConfig(fillers=2)

    def test_topics_must_cover_pairs(self):
        with pytest.raises(ConfigError):
            GenConfig(segs_per_video=12, ambiguity_rate=1.0, topics=6)

    def test_room_for_pairs(self):
        with pytest.raises(ConfigError):
            GenConfig(
                segs_per_video=4,
                ambiguity_rate=1.0,
                topics=8,
                min_marker_distance=3,
            )

    def test_rate_bounds(self):
        with pytest.raises(ConfigError):
            GenConfig(ambiguity_rate=1.5)
