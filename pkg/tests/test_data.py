"""Corpus loading, vocabulary, encoding, splitting, and the synthetic task."""

import json

import numpy as np
import pytest

from admix import data


def write_corpus(tmp_path, lines, name="corpus.tsv"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


class TestLoadCorpus:
    def test_named_labels_map_in_first_appearance_order(self, tmp_path):
        path = write_corpus(
            tmp_path,
            ["LOC\twhere is tokyo", "NUM\thow many moons", "LOC\twhere is oslo"],
        )
        ds = data.load_corpus(path)
        assert ds.num_classes == 2
        assert ds.label_names == {"LOC": 0, "NUM": 1}
        assert ds.examples == [
            ("where is tokyo", 0),
            ("how many moons", 1),
            ("where is oslo", 0),
        ]

    def test_integer_labels_used_directly(self, tmp_path):
        path = write_corpus(tmp_path, ["0\talpha", "2\tbeta", "1\tgamma"])
        ds = data.load_corpus(path)
        assert ds.num_classes == 3
        assert [label for _, label in ds.examples] == [0, 2, 1]

    def test_mixed_labels_fall_back_to_names(self, tmp_path):
        path = write_corpus(tmp_path, ["1\talpha", "x\tbeta"])
        ds = data.load_corpus(path)
        assert ds.label_names == {"1": 0, "x": 1}

    def test_missing_tab_names_line(self, tmp_path):
        path = write_corpus(tmp_path, ["LOC\tfine", "broken line", "NUM\talso fine"])
        with pytest.raises(ValueError, match="line 2"):
            data.load_corpus(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            data.load_corpus(path)

    def test_empty_label_rejected(self, tmp_path):
        path = write_corpus(tmp_path, ["\ttext without label"])
        with pytest.raises(ValueError, match="line 1"):
            data.load_corpus(path)

    def test_empty_text_is_allowed(self, tmp_path):
        path = write_corpus(tmp_path, ["A\t", "B\tsomething"])
        ds = data.load_corpus(path)
        assert ds.examples[0] == ("", 0)

    def test_single_class_rejected(self, tmp_path):
        path = write_corpus(tmp_path, ["A\tone", "A\ttwo"])
        with pytest.raises(ValueError, match="2 classes"):
            data.load_corpus(path)


class TestVocab:
    def test_reserved_ids_and_first_appearance_order(self):
        ds = data.Dataset([("the cat sat", 0), ("the dog ran", 1)], 2)
        vocab = data.build_vocab(ds)
        assert vocab.id_to_token[:2] == [data.PAD_TOKEN, data.UNK_TOKEN]
        assert vocab.token_to_id["the"] == 2
        assert vocab.token_to_id["cat"] == 3
        assert len(vocab) == 2 + 5  # reserved ids plus unique tokens

    def test_min_freq_filters_rare_tokens(self):
        ds = data.Dataset([("a a b", 0), ("a c", 1)], 2)
        vocab = data.build_vocab(ds, min_freq=2)
        assert "a" in vocab.token_to_id
        assert "b" not in vocab.token_to_id
        assert vocab.encode_token("b") == data.UNK_ID

    def test_tokenization_lowercases(self):
        ds = data.Dataset([("The THE the", 0), ("x y", 1)], 2)
        vocab = data.build_vocab(ds)
        assert "the" in vocab.token_to_id
        assert "The" not in vocab.token_to_id

    def test_bad_min_freq(self):
        with pytest.raises(ValueError, match="min_freq"):
            data.build_vocab(data.Dataset([("a", 0)], 2), min_freq=0)


class TestEncodeBatch:
    def setup_method(self):
        ds = data.Dataset([("the cat sat on the mat", 0), ("dogs run", 1)], 2)
        self.vocab = data.build_vocab(ds)

    def test_padding_and_valid_lengths(self):
        batch = data.encode_batch(
            [("the cat", 0), ("dogs run far away", 1)], self.vocab, max_len=5, num_classes=2
        )
        assert batch.token_ids.shape == (2, 5)
        np.testing.assert_array_equal(batch.valid_lens, [2, 4])
        assert (batch.token_ids[0, 2:] == data.PAD_ID).all()
        np.testing.assert_array_equal(batch.label_rows, [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(batch.label_ids, [0, 1])

    def test_truncates_at_max_len(self):
        batch = data.encode_batch(
            [("the cat sat on the mat", 0)], self.vocab, max_len=3, num_classes=2
        )
        np.testing.assert_array_equal(batch.valid_lens, [3])

    def test_unknown_tokens_map_to_unk(self):
        batch = data.encode_batch([("zebra cat", 0)], self.vocab, max_len=4, num_classes=2)
        assert batch.token_ids[0, 0] == data.UNK_ID
        assert batch.token_ids[0, 1] == self.vocab.token_to_id["cat"]

    def test_empty_text_becomes_single_unk(self):
        batch = data.encode_batch([("", 1)], self.vocab, max_len=4, num_classes=2)
        np.testing.assert_array_equal(batch.valid_lens, [1])
        assert batch.token_ids[0, 0] == data.UNK_ID

    def test_round_trip_through_decode(self):
        text = "the cat sat"
        batch = data.encode_batch([(text, 0)], self.vocab, max_len=8, num_classes=2)
        vl = batch.valid_lens[0]
        assert self.vocab.decode(batch.token_ids[0, :vl]) == text.split()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            data.encode_batch([("the cat", 5)], self.vocab, max_len=4, num_classes=2)


def balanced_dataset(per_class=10, num_classes=3):
    examples = [
        (f"tok{c}_{i}", c) for c in range(num_classes) for i in range(per_class)
    ]
    return data.Dataset(examples, num_classes)


class TestSubsample:
    def test_ratio_one_keeps_everything_in_order(self):
        ds = balanced_dataset()
        out = data.subsample_per_class(ds, 1.0, np.random.default_rng(0))
        assert out.examples == ds.examples

    def test_floor_with_minimum_of_one(self):
        ds = balanced_dataset(per_class=10)
        out = data.subsample_per_class(ds, 0.25, np.random.default_rng(1))
        np.testing.assert_array_equal(out.class_counts(), [2, 2, 2])
        tiny = data.subsample_per_class(ds, 0.05, np.random.default_rng(1))
        np.testing.assert_array_equal(tiny.class_counts(), [1, 1, 1])

    def test_deterministic_and_seed_sensitive(self):
        ds = balanced_dataset(per_class=30)
        a = data.subsample_per_class(ds, 0.3, np.random.default_rng(5))
        b = data.subsample_per_class(ds, 0.3, np.random.default_rng(5))
        c = data.subsample_per_class(ds, 0.3, np.random.default_rng(6))
        assert a.examples == b.examples
        assert a.examples != c.examples

    def test_bad_ratio(self):
        ds = balanced_dataset()
        for ratio in (0.0, -0.5, 1.2):
            with pytest.raises(ValueError, match="ratio"):
                data.subsample_per_class(ds, ratio, np.random.default_rng(0))


class TestSplitDev:
    def test_stratified_fraction(self):
        ds = balanced_dataset(per_class=100)
        train, dev = data.split_dev(ds, 0.1, np.random.default_rng(2))
        np.testing.assert_array_equal(dev.class_counts(), [10, 10, 10])
        np.testing.assert_array_equal(train.class_counts(), [90, 90, 90])

    def test_partition_is_disjoint_and_complete(self):
        ds = balanced_dataset(per_class=7)
        train, dev = data.split_dev(ds, 0.3, np.random.default_rng(3))
        assert len(train) + len(dev) == len(ds)
        assert set(train.examples).isdisjoint(dev.examples)
        assert sorted(train.examples + dev.examples) == sorted(ds.examples)

    def test_every_class_keeps_a_training_example(self):
        ds = balanced_dataset(per_class=2)
        train, dev = data.split_dev(ds, 0.9, np.random.default_rng(4))
        assert (train.class_counts() >= 1).all()
        np.testing.assert_array_equal(dev.class_counts(), [1, 1, 1])

    def test_single_example_class_warns_and_stays(self):
        ds = data.Dataset([("only one", 0), ("a", 1), ("b", 1), ("c", 1)], 2)
        with pytest.warns(UserWarning, match="single example"):
            train, dev = data.split_dev(ds, 0.5, np.random.default_rng(5))
        assert train.class_counts()[0] == 1

    def test_bad_fraction(self):
        ds = balanced_dataset()
        for fraction in (0.0, 1.0, -0.1):
            with pytest.raises(ValueError, match="fraction"):
                data.split_dev(ds, fraction, np.random.default_rng(0))


class TestSyntheticCorpus:
    def generate(self, rng_seed=0, **kwargs):
        args = dict(
            num_classes=4,
            per_class=50,
            vocab_size=120,
            signal_tokens_per_class=5,
            noise_len=8,
            rng=np.random.default_rng(rng_seed),
        )
        args.update(kwargs)
        return data.generate_synthetic_corpus(**args)

    def token_ids(self, text):
        return [int(tok[1:]) for tok in text.split()]

    def test_size_and_balance(self):
        ds = self.generate()
        assert len(ds) == 200
        np.testing.assert_array_equal(ds.class_counts(), [50, 50, 50, 50])
        assert ds.num_classes == 4

    def test_tokens_stay_in_inventory(self):
        ds = self.generate()
        for text, _ in ds.examples:
            for k in self.token_ids(text):
                assert 0 <= k < 120

    def test_signal_tokens_come_from_own_block_without_label_noise(self):
        ds = self.generate(label_noise=0.0)
        for text, label in ds.examples:
            lo = label * 5
            signal = [k for k in self.token_ids(text) if k < 4 * 5]
            assert 2 <= len(signal) <= 4
            assert all(lo <= k < lo + 5 for k in signal)

    def test_label_noise_rate_is_about_ten_percent(self):
        ds = self.generate(per_class=150, label_noise=0.1)
        corrupted = 0
        for text, label in ds.examples:
            lo = label * 5
            off_block = [k for k in self.token_ids(text) if k < 20 and not lo <= k < lo + 5]
            assert len(off_block) <= 1
            corrupted += bool(off_block)
        # 600 draws at p = 0.1: stay within 5 standard deviations
        assert 23 <= corrupted <= 97

    def test_zero_noise_len_gives_pure_signal(self):
        ds = self.generate(noise_len=0, label_noise=0.0)
        for text, label in ds.examples:
            lo = label * 5
            assert all(lo <= k < lo + 5 for k in self.token_ids(text))

    def test_example_length_bounds(self):
        ds = self.generate(noise_len=8, label_noise=0.0)
        lengths = {len(text.split()) for text, _ in ds.examples}
        assert lengths <= {10, 11, 12}

    def test_deterministic_under_seed(self):
        a = self.generate(rng_seed=7)
        b = self.generate(rng_seed=7)
        c = self.generate(rng_seed=8)
        assert a.examples == b.examples
        assert a.examples != c.examples

    def test_vocab_must_exceed_signal_blocks(self):
        with pytest.raises(ValueError, match="vocab_size"):
            self.generate(vocab_size=20)

    def test_bad_shape_parameters(self):
        with pytest.raises(ValueError):
            self.generate(num_classes=1)
        with pytest.raises(ValueError):
            self.generate(per_class=0)
        with pytest.raises(ValueError):
            self.generate(label_noise=1.5)


class TestManifest:
    def test_hash_tracks_content(self):
        ds_a = balanced_dataset()
        ds_b = balanced_dataset()
        assert data.dataset_hash(ds_a) == data.dataset_hash(ds_b)
        ds_b.examples[0] = ("changed", 0)
        assert data.dataset_hash(ds_a) != data.dataset_hash(ds_b)

    def test_manifest_contents(self, tmp_path):
        ds = balanced_dataset()
        ds.label_names = {"A": 0, "B": 1, "C": 2}
        path = tmp_path / "manifest.json"
        data.write_manifest(path, ds, seeds=[0, 1, 2], subsample_ratio=0.25, extra={"policy": "amp"})
        loaded = json.loads(path.read_text())
        assert loaded["dataset_hash"] == data.dataset_hash(ds)
        assert loaded["seeds"] == [0, 1, 2]
        assert loaded["subsample_ratio"] == 0.25
        assert loaded["label_map"] == {"A": 0, "B": 1, "C": 2}
        assert loaded["num_examples"] == 30
        assert loaded["policy"] == "amp"
