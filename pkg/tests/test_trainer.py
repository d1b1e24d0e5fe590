import dataclasses

import numpy as np
import pytest

from conceptnorm.encoder import ToyEncoder
from conceptnorm.errors import ConfigError, Diverged
from conceptnorm.evaluator import evaluate
from conceptnorm.sim_head import init_concepts
from conceptnorm.trainer import (
    AdamW,
    Choice,
    ConceptNormalizer,
    HparamSpace,
    IntRange,
    LogUniform,
    TrainConfig,
    TrainReport,
    derive_seeds,
    random_search,
    read_search_config,
    train,
    validation_split,
)

FAST = TrainConfig(max_epochs=30, patience=5, seed=0)


class TestAdamW:
    def test_matches_torch(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(0)
        init = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
        grads = [{k: rng.normal(size=v.shape) for k, v in init.items()} for _ in range(6)]

        ours = {k: v.copy() for k, v in init.items()}
        opt = AdamW(ours, lr=0.05, weight_decay=0.1, no_decay={"b"})

        theirs = {k: torch.tensor(v.copy(), requires_grad=True) for k, v in init.items()}
        topt = torch.optim.AdamW(
            [
                {"params": [theirs["w"]], "weight_decay": 0.1},
                {"params": [theirs["b"]], "weight_decay": 0.0},
            ],
            lr=0.05,
        )
        for g in grads:
            opt.step(g)
            for k, t in theirs.items():
                t.grad = torch.tensor(g[k])
            topt.step()
        for k in init:
            np.testing.assert_allclose(ours[k], theirs[k].detach().numpy(), rtol=1e-10, atol=1e-12)

    def test_zero_lr_is_identity(self):
        p = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
        before = p["w"].copy()
        opt = AdamW(p, lr=0.0, weight_decay=0.5)
        for _ in range(5):
            opt.step({"w": np.ones((2, 3), dtype=np.float32)})
        np.testing.assert_array_equal(p["w"], before)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-2 and cfg.val_fraction == 0.1 and cfg.batch_size == 32

    @pytest.mark.parametrize(
        "field, value",
        [("learning_rate", -1.0), ("val_fraction", 0.0), ("val_fraction", 1.0), ("patience", 0), ("batch_size", 0)],
    )
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError) as err:
            TrainConfig(**{field: value})
        assert err.value.key == field

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(learning_rate=3e-5, batch_size=16, seed=9, dtype="float64")
        path = tmp_path / "train.cfg"
        path.write_text(cfg.to_text())
        assert TrainConfig.from_file(path) == cfg

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rate = 0.1\nlearnig_rate = 0.2\n")
        with pytest.raises(ConfigError) as err:
            TrainConfig.from_file(path)
        assert err.value.key == "learnig_rate"

    def test_bad_value(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("batch_size = lots\n")
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig.from_file(path)

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# comment\n\nseed = 4  # trailing\n")
        assert TrainConfig.from_file(path).seed == 4


class TestTrain:
    def test_lr_zero_leaves_parameters(self, clean_corpus):
        inv, folds = clean_corpus
        records = folds[0].train
        cfg = dataclasses.replace(FAST, learning_rate=0.0, max_epochs=3)
        seeds = derive_seeds(cfg.seed)
        sub, _ = validation_split(records, cfg.val_fraction, seeds["split"])
        fresh = ToyEncoder.from_records(sub, dim=cfg.dim, seed=seeds["encoder"])
        model, _ = train(records, cfg, inv)
        for name, value in fresh.state().items():
            np.testing.assert_array_equal(model.encoder.state()[name], value)

    def test_deterministic(self, clean_corpus):
        inv, folds = clean_corpus
        _, r1 = train(folds[0].train, FAST, inv)
        _, r2 = train(folds[0].train, FAST, inv)
        assert r1.to_json() == r2.to_json()

    def test_deterministic_float64(self, noisy_corpus):
        inv, folds = noisy_corpus
        cfg = dataclasses.replace(FAST, dtype="float64", max_epochs=5)
        _, r1 = train(folds[0].train, cfg, inv)
        _, r2 = train(folds[0].train, cfg, inv)
        assert r1.train_losses == r2.train_losses

    def test_seed_matters(self, noisy_corpus):
        inv, folds = noisy_corpus
        _, r1 = train(folds[0].train, dataclasses.replace(FAST, max_epochs=3), inv)
        _, r2 = train(folds[0].train, dataclasses.replace(FAST, max_epochs=3, seed=1), inv)
        assert r1.train_losses != r2.train_losses

    def test_report_bookkeeping(self, noisy_corpus):
        inv, folds = noisy_corpus
        _, report = train(folds[0].train, FAST, inv)
        assert [e.epoch for e in report.epochs] == list(range(len(report.epochs)))
        assert 0 <= report.best_epoch < len(report.epochs)
        assert report.n_train + report.n_val == len(folds[0].train)
        assert report.config["seed"] == 0
        # epoch loss is a sum over instances, bounded by n * log N at worst-case scores
        assert all(0 < e.train_loss < report.n_train * 2 * np.log(len(inv)) for e in report.epochs)
        assert "wall_time" not in report.to_json()
        assert TrainReport.from_dict(report.to_dict()).to_json() == report.to_json()

    def test_early_stopping_restores_best(self, noisy_corpus):
        inv, folds = noisy_corpus
        cfg = dataclasses.replace(FAST, max_epochs=80, patience=3)
        model, report = train(folds[0].train, cfg, inv)
        assert report.best_val_accuracy == max(e.val_accuracy for e in report.epochs)
        seeds = derive_seeds(cfg.seed)
        _, val = validation_split(folds[0].train, cfg.val_fraction, seeds["split"])
        assert evaluate(model, val).accuracy == report.best_val_accuracy
        if report.stopped_early:
            assert len(report.epochs) == report.best_epoch + 1 + cfg.patience

    def test_joint_update(self, clean_corpus):
        inv, folds = clean_corpus
        records = folds[0].train
        cfg = TrainConfig(seed=0)
        seeds = derive_seeds(cfg.seed)
        sub, _ = validation_split(records, cfg.val_fraction, seeds["split"])
        enc = ToyEncoder.from_records(sub, dim=cfg.dim, seed=seeds["encoder"])
        model = ConceptNormalizer(enc, init_concepts(len(inv), cfg.dim, 0, np.float32), inv, cfg)
        before = {k: v.copy() for k, v in model.parameters().items()}
        batch = sub[:8]
        gold = np.array([inv.index(r.concept_id) for r in batch])
        _, grads, _ = model.loss_and_grads([r.text for r in batch], gold)
        AdamW(model.parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay, no_decay=model.no_decay()).step(grads)
        after = model.parameters()
        assert any(
            not np.array_equal(before[k], after[k]) for k in before if k.startswith("encoder.")
        )
        for g in set(gold):
            assert not np.array_equal(before["concepts"][g], after["concepts"][g])
        touched = {enc.vocab.lookup(t) for r in batch for t in r.text.split()}
        E0, E1 = before["encoder.token_embeddings"], after["encoder.token_embeddings"]
        for row in range(len(E0)):
            assert np.array_equal(E0[row], E1[row]) == (row not in touched)

    def test_diverged(self, clean_corpus):
        inv, folds = clean_corpus

        class NaNEncoder(ToyEncoder):
            def forward(self, texts):
                M, cache = super().forward(texts)
                return M * np.nan, cache

        def factory(cfg, records):
            return NaNEncoder.from_records(records, dim=cfg.dim)

        with pytest.raises(Diverged) as err:
            train(folds[0].train, FAST, inv, encoder=factory)
        assert err.value.report is not None and err.value.report.error

    def test_partial_last_batch(self, clean_corpus):
        inv, folds = clean_corpus
        cfg = dataclasses.replace(FAST, batch_size=1000, max_epochs=2)
        _, report = train(folds[0].train, cfg, inv)
        assert len(report.epochs) == 2

    def test_overfit_noise_free(self, clean_corpus):
        inv, folds = clean_corpus
        model, report = train(folds[0].train, TrainConfig(max_epochs=200, seed=1), inv)
        assert evaluate(model, folds[0].train).accuracy >= 0.99
        assert evaluate(model, folds[0].test).accuracy >= 0.90

    def test_first_epoch_lowers_loss_for_most_seeds(self, clean_corpus):
        inv, folds = clean_corpus
        cfg = dataclasses.replace(FAST, max_epochs=2, patience=5)
        drops = 0
        for seed in range(100):
            _, report = train(folds[0].train, dataclasses.replace(cfg, seed=seed), inv)
            drops += report.train_losses[1] < report.train_losses[0]
        assert drops >= 95

    def test_fold_changes_split(self, clean_corpus):
        inv, folds = clean_corpus
        assert derive_seeds(0, 0)["split"] != derive_seeds(0, 1)["split"]


class TestRandomSearch:
    def test_single_trial(self, clean_corpus):
        inv, folds = clean_corpus
        space = HparamSpace({"learning_rate": LogUniform(1e-3, 1e-1)}, n_trials=1)
        best, trials = random_search(space, folds[0].train, inv, FAST)
        assert len(trials) == 1 and best == trials[0].config

    def test_sane_beats_degenerate(self, clean_corpus):
        inv, folds = clean_corpus
        space = HparamSpace({"learning_rate": Choice((0.0, 0.01))}, n_trials=4, search_seed=2)
        assert {p["learning_rate"] for p in space.sample()} == {0.0, 0.01}
        best, trials = random_search(space, folds[0].train, inv, FAST)
        assert best.learning_rate == 0.01

    def test_sampling_deterministic_and_in_range(self):
        space = HparamSpace(
            {"learning_rate": LogUniform(1e-4, 1e-1), "batch_size": Choice((8, 16, 32)), "dim": IntRange(8, 64)},
            n_trials=50,
            search_seed=7,
        )
        points = space.sample()
        assert points == space.sample()
        for p in points:
            assert p["learning_rate"] in space.ranges["learning_rate"]
            assert p["batch_size"] in (8, 16, 32)
            assert 8 <= p["dim"] <= 64

    def test_failed_trial_ranked_last(self, clean_corpus):
        inv, folds = clean_corpus
        # batch_size 0 fails TrainConfig validation inside the trial
        space = HparamSpace({"batch_size": Choice((0, 16))}, n_trials=4, search_seed=0)
        best, trials = random_search(space, folds[0].train, inv, FAST)
        assert best.batch_size == 16
        assert any(t.failed for t in trials)

    def test_workers_do_not_change_result(self, clean_corpus):
        inv, folds = clean_corpus
        space = HparamSpace({"learning_rate": LogUniform(1e-3, 5e-2)}, n_trials=3, search_seed=1)
        base = dataclasses.replace(FAST, max_epochs=5)
        b1, t1 = random_search(space, folds[0].train, inv, base)
        b2, t2 = random_search(space, folds[0].train, inv, base, workers=3)
        assert b1 == b2
        assert [t.report.to_json() for t in t1] == [t.report.to_json() for t in t2]

    def test_search_config(self):
        text = "learning_rate = loguniform(1e-4, 1e-1)\nbatch_size = choice(16, 32)\ndim = int(16, 64)\nmax_epochs = 50\nn_trials = 5\nsearch_seed = 3\n"
        space, base = read_search_config(text, is_text=True)
        assert space.n_trials == 5 and space.search_seed == 3
        assert space.ranges["batch_size"] == Choice((16, 32))
        assert space.ranges["dim"] == IntRange(16, 64)
        assert base.max_epochs == 50

    def test_search_config_unknown_key(self):
        with pytest.raises(ConfigError):
            read_search_config("lr = loguniform(1e-4, 1e-1)\n", is_text=True)
