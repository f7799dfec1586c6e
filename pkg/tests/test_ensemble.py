import os

import numpy as np
import pytest

from kgensemble.data import SyntheticSpec, Vocabulary, build_filter_index, generate_synthetic
from kgensemble.embedding import ModelParams, init_model
from kgensemble.ensemble import (
    CheckpointError,
    EnsembleError,
    EnsembleModel,
    VocabularyMismatch,
    ensemble_score,
    load_checkpoint,
    max_workers,
    read_checkpoint_metadata,
    save_checkpoint,
    train_ensemble,
    train_replica,
)
from kgensemble.evaluation import evaluate_model
from kgensemble.training import TrainConfig


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec("mixed", 60, 400, fan=3, valid_fraction=0.1, test_fraction=0.1), 3)


FAST = TrainConfig(gamma=4, eta=4, lr=0.01, batches=4, max_epochs=6, valid_every=3, patience=2, seed=10)


def _const(value, n_ent=3, d=2):
    # DistMult with unit entity rows: score = sum(r) for every triple
    return ModelParams("DistMult", np.ones((n_ent, d)), np.full((1, d), value / d), d, 0)


class TestScore:
    def test_mean_of_two(self):
        m = EnsembleModel([_const(-1.0), _const(-3.0)])
        assert ensemble_score(m, (0, 0, 1)) == -2.0

    def test_k1_identity(self):
        p = init_model("RotatE", 10, 2, 6, seed=3)
        m = EnsembleModel([p])
        triples = np.array([[0, 0, 1], [4, 1, 9], [2, 1, 2]])
        assert m.score_triples(triples).tobytes() == p.score_triples(triples).tobytes()
        assert m.score_tails(triples[:, 0], triples[:, 1]).tobytes() == \
            p.score_tails(triples[:, 0], triples[:, 1]).tobytes()

    def test_permutation_and_mean(self):
        reps = [init_model("ComplEx", 12, 3, 8, seed=s) for s in range(5)]
        rng = np.random.default_rng(0)
        triples = np.stack([rng.integers(0, 12, 50), rng.integers(0, 3, 50), rng.integers(0, 12, 50)], axis=1)
        a = EnsembleModel(reps).score_triples(triples)
        b = EnsembleModel(reps[::-1]).score_triples(triples)
        mean = np.mean([r.score_triples(triples) for r in reps], axis=0)
        assert np.abs(a - b).max() <= 1e-12
        assert np.abs(a - mean).max() <= 1e-12
        np.testing.assert_allclose(EnsembleModel(reps).score_heads(triples[:, 1], triples[:, 2]),
                                   np.mean([r.score_heads(triples[:, 1], triples[:, 2]) for r in reps], axis=0),
                                   rtol=0, atol=1e-12)

    def test_out_of_bounds(self):
        m = EnsembleModel([_const(1.0)])
        with pytest.raises(IndexError):
            ensemble_score(m, (0, 0, 7))

    def test_size_report(self):
        reps = [init_model("TransE", 4, 1, 200, seed=s) for s in range(6)]
        m = EnsembleModel(reps)
        assert (m.k, m.d_l, m.d) == (6, 200, 1200)

    def test_mixed_replicas_rejected(self):
        with pytest.raises(ValueError):
            EnsembleModel([init_model("TransE", 4, 1, 4, seed=0), init_model("TransE", 4, 1, 6, seed=1)])
        with pytest.raises(ValueError):
            EnsembleModel([])


class TestTraining:
    def test_k1_equals_single(self, small):
        m = train_ensemble("TransE", 1, 8, small, FAST)
        single = train_replica("TransE", 8, small, FAST, seed=FAST.seed)
        assert m.replicas[0].entity.tobytes() == single.params.entity.tobytes()
        fi = build_filter_index(small)
        assert evaluate_model(m, small, fi).ranks.tobytes() == evaluate_model(single.params, small, fi).ranks.tobytes()

    def test_seeds(self, small):
        m = train_ensemble("DistMult", 3, 4, small, FAST, base_seed=40)
        assert m.seeds == [40, 41, 42]
        assert not np.array_equal(m.replicas[0].entity, m.replicas[1].entity)

    @pytest.mark.slow
    def test_workers_byte_identical(self, small, tmp_path):
        a = train_ensemble("TransE", 4, 8, small, FAST, workers=1)
        b = train_ensemble("TransE", 4, 8, small, FAST, workers=4)
        save_checkpoint(a, str(tmp_path / "a.kge"))
        save_checkpoint(b, str(tmp_path / "b.kge"))
        assert (tmp_path / "a.kge").read_bytes() == (tmp_path / "b.kge").read_bytes()

    def test_failure_names_replica(self, small):
        bad = TrainConfig(loss="multiclass-n3", optimizer="adagrad", lr=0.1, max_epochs=1)
        with pytest.raises(ValueError):
            train_ensemble("TransE", 2, 4, small, bad)
        nan_cfg = TrainConfig(gamma=4, eta=4, lr=1e308, batches=1, max_epochs=3, seed=0)
        with np.errstate(all="ignore"), pytest.raises(EnsembleError) as err:
            train_ensemble("DistMult", 2, 4, small, nan_cfg)
        assert err.value.replica == 0

    def test_invalid_counts(self, small):
        with pytest.raises(ValueError):
            train_ensemble("TransE", 0, 4, small, FAST)

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv("KGE_THREADS", "2")
        assert max_workers(8) == 2
        monkeypatch.setenv("KGE_THREADS", "nonsense")
        assert max_workers(3) == 3
        monkeypatch.delenv("KGE_THREADS")
        assert max_workers(5) == 5


class TestCheckpoint:
    @pytest.fixture
    def model(self, small):
        return train_ensemble("RotatE", 2, 6, small, FAST)

    def test_round_trip(self, model, small, tmp_path):
        path = str(tmp_path / "m.kge")
        save_checkpoint(model, path)
        back = load_checkpoint(path, small.vocabulary)
        for a, b in zip(model.replicas, back.replicas):
            assert a.entity.tobytes() == b.entity.tobytes()
            assert a.relation.tobytes() == b.relation.tobytes()
            assert (a.kind, a.d, a.seed, a.norm) == (b.kind, b.d, b.seed, b.norm)
        assert back.config == model.config
        assert back.vocabulary_hash == small.vocabulary.digest()
        meta = read_checkpoint_metadata(path)
        assert meta["k"] == 2 and meta["d_l"] == 6 and meta["d_rel"] == 3 and meta["seeds"] == model.seeds
        assert meta["config_digest"] == model.config.digest()

    def test_layout(self, model, tmp_path):
        path = tmp_path / "m.kge"
        save_checkpoint(model, str(path))
        raw = path.read_bytes()
        assert raw[:4] == b"KGEE"
        assert int.from_bytes(raw[4:6], "little") == 1
        meta_len = int.from_bytes(raw[6:10], "little")
        pos = 10 + meta_len
        first = int.from_bytes(raw[pos:pos + 8], "little")
        assert first == model.replicas[0].entity.size * 8
        table = np.frombuffer(raw[pos + 8:pos + 8 + first], dtype="<f8").reshape(model.replicas[0].entity.shape)
        np.testing.assert_array_equal(table, model.replicas[0].entity)

    @pytest.mark.parametrize("cut", [3, 20, -1, -100])
    def test_truncated(self, model, tmp_path, cut):
        path = tmp_path / "m.kge"
        save_checkpoint(model, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_flipped_byte(self, model, tmp_path):
        path = tmp_path / "m.kge"
        save_checkpoint(model, str(path))
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(str(path))

    def test_trailing_bytes(self, model, tmp_path):
        path = tmp_path / "m.kge"
        save_checkpoint(model, str(path))
        with open(path, "ab") as fh:
            fh.write(b"x")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(str(path))

    def test_vocabulary_mismatch(self, model, tmp_path):
        path = str(tmp_path / "m.kge")
        save_checkpoint(model, path)
        other = generate_synthetic(SyntheticSpec("mixed", 61, 400, fan=3, test_fraction=0.1), 3)
        with pytest.raises(VocabularyMismatch):
            load_checkpoint(path, other.vocabulary)
        with pytest.raises(VocabularyMismatch):
            load_checkpoint(path, Vocabulary.numeric(5, 1))

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(str(tmp_path / "nope.kge"))

    def test_no_partial_file_left(self, model, tmp_path):
        save_checkpoint(model, str(tmp_path / "m.kge"))
        assert os.listdir(tmp_path) == ["m.kge"]
