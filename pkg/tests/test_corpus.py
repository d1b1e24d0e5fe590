import filecmp

import pytest

from conceptnorm.corpus import (
    ConceptInventory,
    Fold,
    FoldSet,
    MentionRecord,
    SyntheticNoise,
    build_inventory,
    generate_synthetic,
    load_dataset,
    preprocess_foldset,
    save_dataset,
    validation_split,
)
from conceptnorm.errors import EmptyDataset, FormatError, InvalidParams, TooSmall, UnknownConcept


def recs(n, concepts="ABC"):
    return [MentionRecord(f"mention {i}", concepts[i % len(concepts)]) for i in range(n)]


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


class TestInventory:
    def test_first_appearance(self):
        inv = build_inventory([MentionRecord("x", c) for c in "ABAC"])
        assert len(inv) == 3
        assert [inv.index(c) for c in "ABC"] == [0, 1, 2]

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            build_inventory([])

    def test_unknown(self):
        with pytest.raises(UnknownConcept):
            ConceptInventory(["A"]).index("B")

    def test_spans_train_and_test(self):
        folds = FoldSet([Fold(recs(4, "AB"), [MentionRecord("t", "Z")])])
        assert build_inventory(folds.records()).ids == ["A", "B", "Z"]

    def test_fingerprint_tracks_order(self):
        assert ConceptInventory(["A", "B"]).fingerprint() != ConceptInventory(["B", "A"]).fingerprint()
        assert ConceptInventory(["A", "B"], ["x", "y"]).fingerprint() == ConceptInventory(["A", "B"]).fingerprint()


class TestValidationSplit:
    def test_cardinality(self):
        train, val = validation_split(recs(100), 0.1, seed=7)
        assert (len(train), len(val)) == (90, 10)

    def test_deterministic(self):
        assert validation_split(recs(100), 0.1, 7) == validation_split(recs(100), 0.1, 7)

    def test_smm4h_size(self):
        train, val = validation_split(recs(6650), 0.1, seed=0)
        assert (len(train), len(val)) == (5985, 665)

    def test_disjoint_and_complete(self):
        data = recs(37)
        train, val = validation_split(data, 0.1, seed=1)
        assert sorted(train + val, key=data.index) == data
        assert not set(r.raw_text for r in train) & set(r.raw_text for r in val)

    def test_minimum_one(self):
        train, val = validation_split(recs(3), 0.1, seed=0)
        assert (len(train), len(val)) == (2, 1)

    def test_too_small(self):
        with pytest.raises(TooSmall):
            validation_split(recs(1), 0.1, 0)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(InvalidParams):
            validation_split(recs(10), fraction, 0)


class TestSynthetic:
    def test_sizes(self):
        inv, folds = generate_synthetic(20, 200, noise=0.3, seed=1)
        assert len(inv) == 20 and len(folds) == 1
        assert (len(folds[0].train), len(folds[0].test)) == (160, 40)

    def test_every_concept_trained(self):
        inv, folds = generate_synthetic(20, 200, seed=1)
        assert {r.concept_id for r in folds[0].train} == set(inv)

    def test_noise_free_equals_templates(self):
        inv, folds = generate_synthetic(20, 200, noise=0, seed=1)
        for r in folds.records():
            assert r.raw_text == inv.term(inv.index(r.concept_id))

    def test_templates_distinct_as_bags(self):
        inv, _ = generate_synthetic(200, 200, noise=0, seed=4)
        bags = {tuple(sorted(t.split())) for t in inv.terms}
        assert len(bags) == 200

    def test_noise_is_exercised(self):
        inv, folds = generate_synthetic(20, 400, noise=SyntheticNoise(0.5, 0.5, 1.0), seed=2)
        raw = [r.raw_text for r in folds.records()]
        templates = set(inv.terms)
        assert sum(t not in templates for t in raw) > len(raw) // 2

    def test_same_seed_same_files(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(tmp_path / name, *generate_synthetic(20, 200, noise=0.4, seed=9))
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in ("fold_0/train.tsv", "fold_0/test.tsv", "concepts.tsv"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    @pytest.mark.parametrize("n_concepts, n_mentions", [(1, 10), (10, 5)])
    def test_invalid(self, n_concepts, n_mentions):
        with pytest.raises(InvalidParams):
            generate_synthetic(n_concepts, n_mentions)

    def test_invalid_noise(self):
        with pytest.raises(InvalidParams):
            generate_synthetic(5, 10, noise=1.5)


class TestFiles:
    def test_round_trip(self, tmp_path):
        inv, folds = generate_synthetic(15, 90, noise=0.5, seed=11)
        save_dataset(tmp_path, inv, folds)
        inv2, folds2 = load_dataset(tmp_path)
        assert inv2 == inv
        assert folds2.folds == folds.folds

    def test_round_trip_bytes(self, tmp_path):
        inv, folds = generate_synthetic(15, 90, noise=0.5, seed=11)
        save_dataset(tmp_path / "a", inv, preprocess_foldset(folds))
        save_dataset(tmp_path / "b", *load_dataset(tmp_path / "a"))
        for sub in ("concepts.tsv", "fold_0/train.tsv", "fold_0/test.tsv"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_processed_column(self, tmp_path):
        inv, folds = generate_synthetic(5, 10, noise=0.5, seed=0)
        folds = preprocess_foldset(folds)
        save_dataset(tmp_path, inv, folds)
        _, loaded = load_dataset(tmp_path)
        assert all(r.processed_text is not None for r in loaded.records())

    def test_multi_fold_and_comments(self, tmp_path):
        write(tmp_path / "concepts.tsv", "# header comment\nC1\tPain\nC2\n")
        for k in range(2):
            write(tmp_path / f"fold_{k}/train.tsv", f"back hurts\tC1\n# skip\nfeel sick {k}\tC2\n")
            write(tmp_path / f"fold_{k}/test.tsv", "my back\tC1\n")
        inv, folds = load_dataset(tmp_path)
        assert inv.ids == ["C1", "C2"] and inv.terms == ["Pain", None]
        assert len(folds) == 2 and len(folds[1].train) == 2
        for fold in folds:
            assert not fold.overlap()

    def test_empty_mentions_file(self, tmp_path):
        write(tmp_path / "concepts.tsv", "C1\tPain\n")
        write(tmp_path / "fold_0/train.tsv", "")
        write(tmp_path / "fold_0/test.tsv", "x\tC1\n")
        with pytest.raises(FormatError, match="empty"):
            load_dataset(tmp_path)

    def test_malformed_line_number(self, tmp_path):
        write(tmp_path / "concepts.tsv", "C1\tPain\n")
        write(tmp_path / "fold_0/train.tsv", "ok\tC1\nno tab here\n")
        write(tmp_path / "fold_0/test.tsv", "x\tC1\n")
        with pytest.raises(FormatError) as err:
            load_dataset(tmp_path)
        assert err.value.line == 2

    def test_unknown_concept(self, tmp_path):
        write(tmp_path / "concepts.tsv", "C1\tPain\n")
        write(tmp_path / "fold_0/train.tsv", "ok\tC1\n")
        write(tmp_path / "fold_0/test.tsv", "x\tC9\n")
        with pytest.raises(UnknownConcept, match="C9"):
            load_dataset(tmp_path)

    def test_missing_concepts_file(self, tmp_path):
        write(tmp_path / "fold_0/train.tsv", "ok\tC1\n")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_fold_numbering(self, tmp_path):
        write(tmp_path / "concepts.tsv", "C1\n")
        for k in (0, 2):
            write(tmp_path / f"fold_{k}/train.tsv", "a\tC1\n")
            write(tmp_path / f"fold_{k}/test.tsv", "a\tC1\n")
        with pytest.raises(FormatError, match="numbered"):
            load_dataset(tmp_path)

    def test_tab_in_text_rejected_on_save(self, tmp_path):
        folds = FoldSet([Fold([MentionRecord("a\tb", "C1")], [MentionRecord("c", "C1")])])
        with pytest.raises(FormatError):
            save_dataset(tmp_path, ConceptInventory(["C1"]), folds)
