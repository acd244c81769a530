import numpy as np
import pytest

from privembed import dataio
from privembed.dataio import (
    EmbeddingSet,
    SplitSpec,
    SynthConfig,
    Trial,
    generate_synthetic,
    make_splits,
    read_embedding_file,
    read_trial_list,
    write_embedding_file,
    write_trial_list,
)
from privembed.errors import ConfigError, DataError, FormatError


def small_set(n=6, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingSet(
        speaker_ids=np.arange(n) // 2,
        segment_ids=np.arange(n) % 2,
        genders=(np.arange(n) // 2) % 2,
        vectors=rng.standard_normal((n, dim)),
    )


class TestEmbeddingFile:
    def test_empty_file_round_trips(self, tmp_path):
        es = EmbeddingSet(np.array([], dtype=np.int64), np.array([], dtype=np.int64),
                          np.array([], dtype=np.uint8), np.zeros((0, 4)))
        path = tmp_path / "empty.emb"
        write_embedding_file(es, path)
        back = read_embedding_file(path)
        assert len(back) == 0 and back.dim == 4

    def test_single_record_file_size(self, tmp_path):
        es = EmbeddingSet([7], [1], [1], np.array([[0.0, 1.0]]))
        path = tmp_path / "one.emb"
        write_embedding_file(es, path)
        # 16-byte header + 4 + 4 + 1 + 2 * 8 per record
        assert path.stat().st_size == 41

    def test_random_records_round_trip_bit_exactly(self, tmp_path):
        rng = np.random.default_rng(17)
        n = 10_000
        es = EmbeddingSet(
            speaker_ids=rng.integers(0, 500, size=n),
            segment_ids=np.arange(n),
            genders=rng.integers(0, 2, size=n),
            vectors=rng.standard_normal((n, 8)),
        )
        path = tmp_path / "big.emb"
        write_embedding_file(es, path)
        back = read_embedding_file(path)
        assert np.array_equal(back.speaker_ids, es.speaker_ids)
        assert np.array_equal(back.segment_ids, es.segment_ids)
        assert np.array_equal(back.genders, es.genders)
        assert np.array_equal(back.vectors, es.vectors)
        # write -> read -> write is byte-identical
        path2 = tmp_path / "big2.emb"
        write_embedding_file(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected_with_offset(self, tmp_path):
        path = tmp_path / "bad.emb"
        write_embedding_file(small_set(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="byte 0"):
            read_embedding_file(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.emb"
        write_embedding_file(small_set(), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            read_embedding_file(path)

    def test_truncation_rejected_with_offset(self, tmp_path):
        path = tmp_path / "trunc.emb"
        write_embedding_file(small_set(), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 5])
        with pytest.raises(FormatError, match="byte"):
            read_embedding_file(path)
        path.write_bytes(data[:10])
        with pytest.raises(FormatError, match="byte 10"):
            read_embedding_file(path)

    def test_invalid_gender_byte_rejected(self, tmp_path):
        path = tmp_path / "gender.emb"
        write_embedding_file(small_set(), path)
        data = bytearray(path.read_bytes())
        data[16 + 8] = 3  # first record's gender byte
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="gender"):
            read_embedding_file(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        es = EmbeddingSet([1, 1], [2, 2], [0, 1], np.zeros((2, 2)))
        with pytest.raises(DataError, match="unique"):
            write_embedding_file(es, tmp_path / "dup.emb")

    def test_nonfinite_vector_rejected_on_write(self, tmp_path):
        es = EmbeddingSet([1], [2], [0], np.array([[np.nan, 0.0]]))
        with pytest.raises(DataError, match="finite"):
            write_embedding_file(es, tmp_path / "nan.emb")


class TestSyntheticGenerator:
    def test_deterministic_under_seed(self):
        cfg = SynthConfig(n_speakers=10, segments_per_speaker=3, dim=8, seed=5)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(a.speaker_ids, b.speaker_ids)

    def test_unit_norm_vectors(self):
        es = generate_synthetic(SynthConfig(n_speakers=20, segments_per_speaker=5, dim=16, seed=2))
        norms = np.linalg.norm(es.vectors, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-10

    def test_gender_balance(self):
        for n in (10, 11):
            es = generate_synthetic(SynthConfig(n_speakers=n, segments_per_speaker=2, dim=4, seed=1))
            per_speaker = {int(s): int(g) for s, g in zip(es.speaker_ids, es.genders)}
            counts = np.bincount(list(per_speaker.values()), minlength=2)
            assert abs(int(counts[0]) - int(counts[1])) <= 1

    def test_zero_segment_noise_gives_identical_segments(self):
        es = generate_synthetic(
            SynthConfig(n_speakers=4, segments_per_speaker=3, dim=8, segment_noise=0.0, seed=3)
        )
        for sid in range(4):
            rows = es.vectors[es.speaker_ids == sid]
            assert np.allclose(rows, rows[0])

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_speakers=1)
        with pytest.raises(ConfigError):
            SynthConfig(segments_per_speaker=0)
        with pytest.raises(ConfigError):
            SynthConfig(speaker_spread=0.0)


class TestSplits:
    def test_each_role_nonempty_with_four_speakers(self):
        es = generate_synthetic(SynthConfig(n_speakers=4, segments_per_speaker=4, dim=8, seed=7))
        splits, trials = make_splits(es, SplitSpec(n_target_trials=10, n_nontarget_trials=10), seed=0)
        for role in dataio.SPLIT_ROLES:
            assert len(splits[role]) > 0
        assert any(t.target for t in trials) and any(not t.target for t in trials)

    def test_same_seed_same_splits(self):
        es = generate_synthetic(SynthConfig(n_speakers=12, segments_per_speaker=4, dim=8, seed=7))
        s1, t1 = make_splits(es, SplitSpec(), seed=9)
        s2, t2 = make_splits(es, SplitSpec(), seed=9)
        for role in dataio.SPLIT_ROLES:
            assert np.array_equal(s1[role].vectors, s2[role].vectors)
        assert t1 == t2

    def test_speaker_disjointness_over_many_seeds(self):
        es = generate_synthetic(SynthConfig(n_speakers=12, segments_per_speaker=3, dim=6, seed=11))
        for seed in range(100):
            splits, _ = make_splits(es, SplitSpec(), seed=seed)
            aae = set(splits["aae_train"].speaker_ids.tolist())
            attacker = set(splits["attacker_train"].speaker_ids.tolist())
            eval_spk = set(splits["eval_enroll"].speaker_ids.tolist()) | set(
                splits["eval_test"].speaker_ids.tolist()
            )
            assert not (aae & attacker)
            assert not (aae & eval_spk)
            assert not (attacker & eval_spk)

    def test_enroll_and_test_share_speakers_but_not_segments(self):
        es = generate_synthetic(SynthConfig(n_speakers=12, segments_per_speaker=4, dim=6, seed=13))
        splits, _ = make_splits(es, SplitSpec(), seed=1)
        enroll = splits["eval_enroll"]
        test = splits["eval_test"]
        assert set(enroll.speaker_ids.tolist()) == set(test.speaker_ids.tolist())
        enroll_pairs = set(zip(enroll.speaker_ids.tolist(), enroll.segment_ids.tolist()))
        test_pairs = set(zip(test.speaker_ids.tolist(), test.segment_ids.tolist()))
        assert not (enroll_pairs & test_pairs)

    def test_insufficient_speakers_rejected(self):
        es = generate_synthetic(SynthConfig(n_speakers=2, segments_per_speaker=4, dim=6, seed=1))
        with pytest.raises(ConfigError):
            make_splits(es, SplitSpec(), seed=0)

    def test_trial_counts_capped_by_availability(self):
        es = generate_synthetic(SynthConfig(n_speakers=8, segments_per_speaker=4, dim=6, seed=3))
        splits, trials = make_splits(
            es, SplitSpec(n_target_trials=10**6, n_nontarget_trials=10**6), seed=0
        )
        n_test = len(splits["eval_test"])
        n_eval_speakers = len(set(splits["eval_test"].speaker_ids.tolist()))
        assert sum(1 for t in trials if t.target) == n_test
        assert sum(1 for t in trials if not t.target) == n_test * (n_eval_speakers - 1)


class TestTrialList:
    def test_round_trip(self, tmp_path):
        trials = [Trial(1, 1, 0, True), Trial(1, 2, 3, False)]
        path = tmp_path / "trials.txt"
        write_trial_list(trials, path)
        assert read_trial_list(path) == trials
        text = path.read_text()
        assert "1\t1\t0\ttarget" in text
        assert "1\t2\t3\tnontarget" in text

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "trials.txt"
        path.write_text("1\t2\t3\tmaybe\n")
        with pytest.raises(FormatError, match="line 1"):
            read_trial_list(path)

    def test_empty_list_rejected(self, tmp_path):
        path = tmp_path / "trials.txt"
        path.write_text("")
        with pytest.raises(DataError):
            read_trial_list(path)
