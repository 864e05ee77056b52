import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailmix.data import (
    DEFAULT_VOCABULARY,
    DatasetFiles,
    EmbeddingSet,
    LabeledDataset,
    SynthConfig,
    class_prototypes,
    fnv1a64,
    generate_meta_text,
    generate_synthetic_longtail,
    group_of,
    load_embeddings,
    load_labels,
    load_vocabulary,
    prototype_encode,
    save_embeddings,
    save_labels,
    separated_directions,
    splitmix64,
    token_vector,
    tokenize,
)
from tailmix.errors import (
    BadMagic,
    CountMismatch,
    DuplicateId,
    MalformedLine,
    SeparationUnsatisfiable,
    TruncatedFile,
    UnknownLabel,
    ValidationError,
)

SMALL = dict(n_classes=6, d=16, tier_classes=(2, 2, 2), tier_samples=(60, 20, 5))


@pytest.fixture(scope="module")
def default_synth():
    return generate_synthetic_longtail(SynthConfig())


class TestSynthetic:
    def test_tail_is_the_twelve_smallest(self, default_synth):
        counts = default_synth.dataset.counts()
        tiers = default_synth.tiers
        assert (tiers == 2).sum() == 12
        order = np.argsort(counts, kind="stable")
        assert set(order[:12]) == set(np.flatnonzero(tiers == 2))
        np.testing.assert_array_equal(counts[tiers == 2], 40)

    def test_tier_ordering(self, default_synth):
        counts, tiers = default_synth.dataset.counts(), default_synth.tiers
        assert counts[tiers == 0].min() > counts[tiers == 1].max()
        assert counts[tiers == 1].min() > counts[tiers == 2].max()

    def test_primary_quota_ratios(self):
        cfg = SynthConfig()
        head, med, tail = cfg.tier_samples
        assert head / tail == 50 and med / tail == 7.5

    def test_rare_fraction_small(self, default_synth):
        counts, tiers = default_synth.dataset.counts(), default_synth.tiers
        assert counts[tiers == 2].sum() / counts.sum() < 0.02

    def test_split_integrity(self, default_synth):
        ds = default_synth.dataset
        train = {group_of(ds.ids[i]) for i in ds.indices("train")}
        test = {group_of(ds.ids[i]) for i in ds.indices("test")}
        assert not train & test
        n_groups = len(train | test)
        assert abs(len(test) - 0.2 * n_groups) <= 1

    def test_labels_per_item(self, default_synth):
        sizes = {len(s) for s in default_synth.dataset.label_sets}
        assert sizes <= {1, 2, 3} and 1 in sizes and 2 in sizes

    def test_directions_separated(self, default_synth):
        D = default_synth.directions
        np.testing.assert_allclose(np.linalg.norm(D, axis=1), 1.0, atol=1e-12)
        G = D @ D.T - 2 * np.eye(len(D))
        assert G.max() <= math.cos(math.radians(60.0)) + 1e-12

    def test_zero_noise_single_label_is_direction(self):
        syn = generate_synthetic_longtail(SynthConfig(**SMALL, noise=0.0, co_occurrence=0.0, seed=3))
        X = syn.embeddings.matrix
        names = syn.dataset.vocabulary
        for row, labels in enumerate(syn.dataset.label_sets):
            (lab,) = labels
            np.testing.assert_array_equal(X[row], syn.directions[names.index(lab)].astype(np.float32))

    def test_seed_determinism(self, tmp_path):
        paths = []
        for k in range(2):
            syn = generate_synthetic_longtail(SynthConfig(**SMALL, seed=7))
            files = DatasetFiles(tmp_path / str(k))
            files.save(syn.dataset, syn.embeddings)
            paths.append(files)
        for attr in ("labels", "vocabulary", "embeddings", "ids"):
            assert getattr(paths[0], attr).read_bytes() == getattr(paths[1], attr).read_bytes()

    def test_heavy_tail_runs(self):
        syn = generate_synthetic_longtail(SynthConfig(**SMALL, heavy_tail=True))
        assert np.isfinite(syn.embeddings.matrix).all()

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            SynthConfig(n_classes=40, tier_classes=(10, 10, 10))
        with pytest.raises(ValidationError):
            SynthConfig(**{**SMALL, "tier_samples": (10, 0, 1)})

    def test_separation_unsatisfiable(self):
        with pytest.raises(SeparationUnsatisfiable):
            separated_directions(5, 2, 120.0, np.random.default_rng(0))


class TestMetaText:
    def test_quoted_example(self):
        text = generate_meta_text({"Pulmonary Effusion", "Adenopathy"}, DEFAULT_VOCABULARY)
        assert text == "adenopathy is present, pulmonary effusion is present"

    def test_empty(self):
        assert generate_meta_text(set(), DEFAULT_VOCABULARY) == "no finding is present"

    def test_single(self):
        assert generate_meta_text({"Atelectasis"}, DEFAULT_VOCABULARY) == "atelectasis is present"

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel):
            generate_meta_text({"Dragon"}, DEFAULT_VOCABULARY)


class TestPrototypes:
    def test_hash_reference_values(self):
        # published FNV-1a 64 and SplitMix64 test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8
        stream = splitmix64(1234567)
        assert [next(stream) for _ in range(3)] == [
            6457827717110365317,
            3203168211198807973,
            9817491932198370423,
        ]

    def test_deterministic_and_unordered(self):
        a = prototype_encode("pleural effusion is present", 32)
        np.testing.assert_array_equal(a, prototype_encode("pleural effusion is present", 32))
        np.testing.assert_array_equal(prototype_encode("a b", 32), prototype_encode("b a", 32))

    def test_seed_changes_vectors(self):
        assert not np.allclose(token_vector("edema", 16, 0), token_vector("edema", 16, 1))

    def test_shared_tokens_raise_similarity(self):
        base = prototype_encode("atelectasis is present", 64)
        near = prototype_encode("lobar atelectasis is present", 64)
        far = prototype_encode("pleural effusion is present", 64)
        assert base @ near > base @ far
        # shared-token oracle: token vectors are nearly orthogonal, so cosine ~ shared / sqrt(n1 n2)
        assert base @ near == pytest.approx(3 / math.sqrt(12), abs=0.25)
        assert base @ far == pytest.approx(2 / 3, abs=0.25)

    def test_tokenizer(self):
        assert tokenize("Calcification of the Aorta, 2x!") == ["calcification", "of", "the", "aorta", "2x"]

    def test_no_tokens(self):
        with pytest.raises(ValidationError):
            prototype_encode("  ,;  ", 8)

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet="abcdefgh ,.", min_size=1, max_size=40).filter(lambda s: tokenize(s)), st.integers(1, 96))
    def test_unit_norm(self, text, d):
        assert abs(np.linalg.norm(prototype_encode(text, d)) - 1.0) < 1e-9

    def test_class_prototypes_shape(self):
        P = class_prototypes(DEFAULT_VOCABULARY, 64)
        assert P.shape == (40, 64)
        np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0, atol=1e-12)


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path):
        emb = EmbeddingSet([f"i{j}" for j in range(10)], np.random.default_rng(0).normal(size=(10, 8)))
        save_embeddings(emb, tmp_path / "e.emb")
        back = load_embeddings(tmp_path / "e.emb")
        assert back.ids == emb.ids
        assert back.matrix.tobytes() == emb.matrix.tobytes()
        save_embeddings(back, tmp_path / "f.emb")
        assert (tmp_path / "e.emb").read_bytes() == (tmp_path / "f.emb").read_bytes()

    def test_header_layout(self, tmp_path):
        save_embeddings(EmbeddingSet(["a", "b"], np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])), tmp_path / "e.emb")
        raw = (tmp_path / "e.emb").read_bytes()
        assert raw[:12] == b"EMB1" + struct.pack("<II", 2, 3)
        assert struct.unpack("<6f", raw[12:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)

    def _write(self, tmp_path, n=10, d=8):
        path = tmp_path / "e.emb"
        save_embeddings(EmbeddingSet([str(j) for j in range(n)], np.ones((n, d))), path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self._write(tmp_path)
        path.write_bytes(b"EMB2" + path.read_bytes()[4:])
        with pytest.raises(BadMagic) as exc:
            load_embeddings(path)
        assert exc.value.code == "E_BAD_MAGIC" and exc.value.exit_code == 3

    def test_truncated_row(self, tmp_path):
        path = self._write(tmp_path)
        path.write_bytes(path.read_bytes()[: -4 * 8])
        with pytest.raises(TruncatedFile):
            load_embeddings(path)

    def test_truncated_header(self, tmp_path):
        path = self._write(tmp_path)
        path.write_bytes(path.read_bytes()[:7])
        with pytest.raises(TruncatedFile):
            load_embeddings(path)

    def test_trailing_bytes(self, tmp_path):
        path = self._write(tmp_path)
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(CountMismatch):
            load_embeddings(path)

    def test_ids_mismatch(self, tmp_path):
        path = self._write(tmp_path)
        ids = path.with_name("e.emb.ids")
        ids.write_text("\n".join(ids.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(CountMismatch):
            load_embeddings(path)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            EmbeddingSet(["a"], np.array([[np.nan]]))


class TestLabelsFile:
    def test_single_line(self, tmp_path):
        path = tmp_path / "l.jsonl"
        path.write_text('{"id":"x1","labels":["Adenopathy"],"split":"train"}\n')
        ds = load_labels(path, DEFAULT_VOCABULARY)
        assert len(ds) == 1 and ds.label_sets[0] == ("Adenopathy",)

    def test_duplicate_id_named(self, tmp_path):
        path = tmp_path / "l.jsonl"
        line = '{"id":"x1","labels":[],"split":"train"}\n'
        path.write_text(line * 2)
        with pytest.raises(DuplicateId, match="x1"):
            load_labels(path, DEFAULT_VOCABULARY)

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "l.jsonl"
        path.write_text('{"id":"a","labels":[],"split":"train"}\n{oops\n')
        with pytest.raises(MalformedLine) as exc:
            load_labels(path, DEFAULT_VOCABULARY)
        assert exc.value.lineno == 2

    def test_bad_split(self, tmp_path):
        path = tmp_path / "l.jsonl"
        path.write_text(json.dumps({"id": "a", "labels": [], "split": "val"}) + "\n")
        with pytest.raises(MalformedLine):
            load_labels(path, DEFAULT_VOCABULARY)

    def test_unknown_label(self, tmp_path):
        path = tmp_path / "l.jsonl"
        path.write_text(json.dumps({"id": "a", "labels": ["Dragon"], "split": "test"}) + "\n")
        with pytest.raises(UnknownLabel):
            load_labels(path, DEFAULT_VOCABULARY)

    def test_synthetic_round_trip_bytes(self, tmp_path):
        syn = generate_synthetic_longtail(SynthConfig(**SMALL, seed=2))
        files = DatasetFiles(tmp_path / "a")
        files.save(syn.dataset, syn.embeddings)
        ds, emb = files.load()
        assert ds.ids == syn.dataset.ids and ds.label_sets == syn.dataset.label_sets
        assert ds.splits == syn.dataset.splits and ds.vocabulary == syn.dataset.vocabulary
        again = DatasetFiles(tmp_path / "b")
        again.save(ds, emb)
        for attr in ("labels", "vocabulary", "embeddings", "ids"):
            assert getattr(files, attr).read_bytes() == getattr(again, attr).read_bytes()

    def test_non_ascii_names(self, tmp_path):
        vocab = ["Ödem", "Erguss"]
        ds = LabeledDataset(["a"], [["Erguss", "Ödem"]], ["test"], vocab)
        save_labels(ds, tmp_path / "l.jsonl")
        assert "Ödem" in (tmp_path / "l.jsonl").read_text(encoding="utf-8")
        assert load_labels(tmp_path / "l.jsonl", vocab).label_sets == [("Ödem", "Erguss")]

    def test_empty_vocabulary_entry(self, tmp_path):
        (tmp_path / "v.txt").write_text("A\n\nB\n")
        with pytest.raises(MalformedLine):
            load_vocabulary(tmp_path / "v.txt")


class TestDatasetInvariants:
    def test_counts_consistent(self):
        ds = LabeledDataset(["a", "b"], [["x", "y"], ["y"]], ["train", "test"], ["x", "y", "z"])
        np.testing.assert_array_equal(ds.counts(), [1, 2, 0])
        np.testing.assert_array_equal(ds.label_matrix().sum(axis=0), ds.counts())

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateId):
            LabeledDataset(["a", "a"], [[], []], ["train", "train"], ["x"])

    def test_aligned_to(self):
        emb = EmbeddingSet(["a", "b", "c"], np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(emb.aligned_to(["c", "a"]), [[4.0, 5.0], [0.0, 1.0]])
        with pytest.raises(CountMismatch):
            emb.aligned_to(["zz"])
