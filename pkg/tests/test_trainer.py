import math

import numpy as np
import pytest

from gaitreid import trainer
from gaitreid.dataio import GaitDataset, Tracklet
from gaitreid.embedder import ModelConfig, init_model
from gaitreid.errors import InsufficientIdentities, InvalidConfig, NoValidTriplets
from gaitreid.trainer import (
    Adam,
    BatchSpec,
    LossConfig,
    TrainConfig,
    batch_all_triplet_loss,
    batch_all_triplet_loss_grad,
    flip_tracklet,
    sample_batch,
    train,
)

from oracles import adam_ref, triplet_ref


def make_dataset(rng, n_ids=6, tracklets_per_id=3, frames=10, cameras=("cam0", "cam1")):
    tracklets = []
    for i in range(n_ids):
        pid = f"p{i:02d}"
        for r in range(tracklets_per_id):
            cam = cameras[r % len(cameras)]
            frames_arr = rng.random((frames, 64, 44)) > 0.6
            tracklets.append(Tracklet(f"{pid}-t{r}", pid, cam, frames_arr))
    return GaitDataset(tracklets)


class TestBatchSpec:
    def test_p1_rejected(self):
        with pytest.raises(InvalidConfig):
            BatchSpec(p=1, k=2, c=4)

    def test_k1_rejected(self):
        with pytest.raises(InvalidConfig):
            BatchSpec(p=2, k=1, c=4)

    def test_c0_rejected(self):
        with pytest.raises(InvalidConfig):
            BatchSpec(p=2, k=2, c=0)


class TestSampleBatch:
    def test_batch_dimensions(self, rng):
        ds = make_dataset(rng, n_ids=8, tracklets_per_id=4, frames=40)
        frames, labels = sample_batch(ds, BatchSpec(p=8, k=4, c=30), np.random.default_rng(0))
        assert frames.shape == (32, 30, 64, 44)
        assert frames.shape[0] * frames.shape[1] == 960
        assert len(labels) == 32
        assert len(set(labels)) == 8
        for pid in set(labels):
            assert labels.count(pid) == 4

    def test_insufficient_identities(self, rng):
        ds = make_dataset(rng, n_ids=3)
        with pytest.raises(InsufficientIdentities):
            sample_batch(ds, BatchSpec(p=4, k=2, c=2), np.random.default_rng(0))

    def test_short_tracklet_frame_frequencies(self, rng):
        # one identity with a single 5-frame tracklet; c=2 without replacement
        marks = np.zeros((5, 64, 44), bool)
        for t in range(5):
            marks[t, t, :t + 1] = True  # frame t has t+1 foreground pixels
        ds = GaitDataset(
            [Tracklet("a-t0", "a", "cam0", marks), Tracklet("b-t0", "b", "cam0", marks.copy())]
        )
        spec = BatchSpec(p=2, k=2, c=2, flip_prob=0.0)
        counts = np.zeros(5)
        draws = 0
        g = np.random.default_rng(7)
        for _ in range(2500):  # 2500 batches x 4 samples = 10k tracklet draws
            frames, _ = sample_batch(ds, spec, g)
            for sample in frames:
                for fr in sample:
                    counts[int(fr.sum()) - 1] += 1
                draws += 1
        freq = counts / draws
        assert np.all(np.abs(freq - 0.4) < 0.02)

    def test_deterministic_given_rng_seed(self, rng):
        ds = make_dataset(rng)
        a, la = sample_batch(ds, BatchSpec(p=4, k=2, c=5, seed=3), np.random.default_rng(11))
        b, lb = sample_batch(ds, BatchSpec(p=4, k=2, c=5, seed=3), np.random.default_rng(11))
        assert np.array_equal(a, b)
        assert la == lb


class TestFlip:
    def test_involution(self, rng):
        frames = rng.random((4, 64, 44)) > 0.5
        assert np.array_equal(flip_tracklet(flip_tracklet(frames)), frames)

    def test_symmetric_frame_unchanged(self):
        frame = np.zeros((1, 64, 44), bool)
        frame[0, 10:20, 10:34] = True  # symmetric about the column center
        assert np.array_equal(flip_tracklet(frame), frame)

    def test_column_index_mapping(self, rng):
        frames = rng.random((2, 64, 44)) > 0.5
        flipped = flip_tracklet(frames)
        for j in range(44):
            assert np.array_equal(flipped[:, :, j], frames[:, :, 43 - j])


class TestTripletLoss:
    def test_hand_case_equals_0_9(self):
        emb = np.array([[0.0], [2.0], [1.0], [3.0]])[:, None, :]  # one strip, 1-D
        loss, per_strip, nonzero = batch_all_triplet_loss(emb, ["A", "A", "B", "B"], LossConfig(margin=0.2))
        assert loss == pytest.approx(0.9, abs=1e-12)
        assert per_strip.shape == (1,)
        assert nonzero == 6

    def test_identical_embeddings_give_margin(self, rng):
        e = np.tile(rng.standard_normal((1, 3, 4)), (6, 1, 1))
        loss, _, _ = batch_all_triplet_loss(e, ["A"] * 3 + ["B"] * 3, LossConfig(margin=0.25))
        assert loss == pytest.approx(0.25, abs=1e-12)

    def test_separated_clusters_give_zero(self):
        a = np.zeros((2, 1, 2))
        b = np.full((2, 1, 2), 100.0)
        emb = np.concatenate([a, b])
        loss, _, nonzero = batch_all_triplet_loss(emb, ["A", "A", "B", "B"], LossConfig(margin=0.2))
        assert loss == 0.0
        assert nonzero == 0

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(3, 13))
            s = int(rng.integers(1, 5))
            d = int(rng.integers(1, 4))
            emb = rng.standard_normal((n, s, d))
            labels = [str(x) for x in rng.integers(0, max(2, n // 2), size=n)]
            if trainer.triplet_count(labels) == 0:
                continue
            for averaging in ("all-triplets", "nonzero-only"):
                cfg = LossConfig(margin=float(rng.uniform(0.0, 0.5)), averaging=averaging)
                loss, per_strip, nonzero = batch_all_triplet_loss(emb, labels, cfg)
                ref_loss, ref_strips, ref_nonzero = triplet_ref(
                    emb.tolist(), labels, cfg.margin, averaging
                )
                assert loss == pytest.approx(ref_loss, abs=1e-10)
                assert np.allclose(per_strip, ref_strips, atol=1e-10)
                assert nonzero == ref_nonzero

    def test_no_valid_triplets_raises(self, rng):
        emb = rng.standard_normal((3, 1, 2))
        with pytest.raises(NoValidTriplets):
            batch_all_triplet_loss(emb, ["A", "B", "C"], LossConfig())

    def test_gradient_matches_finite_differences(self, rng):
        emb = rng.standard_normal((6, 2, 3))
        labels = ["A", "A", "B", "B", "C", "C"]
        cfg = LossConfig(margin=0.3)
        loss, _, _, grad = batch_all_triplet_loss_grad(emb, labels, cfg)
        h = 1e-7
        for _ in range(25):
            i = rng.integers(0, 6)
            s = rng.integers(0, 2)
            d = rng.integers(0, 3)
            pert = emb.copy()
            pert[i, s, d] += h
            lp, _, _ = batch_all_triplet_loss(pert, labels, cfg)
            pert[i, s, d] -= 2 * h
            lm, _, _ = batch_all_triplet_loss(pert, labels, cfg)
            fd = (lp - lm) / (2 * h)
            assert fd == pytest.approx(grad[i, s, d], abs=1e-6)


class TestAdam:
    def test_matches_scalar_reference_on_quadratic(self):
        # minimize (x - 3)^2 / 2, gradient x - 3
        x0 = 0.0
        lr = 0.05
        weights = {"x": np.array([x0])}
        opt = Adam(weights, lr=lr)
        got = []
        for _ in range(50):
            opt.step({"x": weights["x"] - 3.0})
            got.append(float(weights["x"][0]))
        want = adam_ref(x0, lambda x: x - 3.0, lr, 50)
        assert np.allclose(got, want, atol=1e-12)

    def test_updates_all_tensors(self, rng):
        weights = {"a": rng.standard_normal((2, 2)), "b": rng.standard_normal(3)}
        before = {k: v.copy() for k, v in weights.items()}
        opt = Adam(weights, lr=0.1)
        opt.step({"a": np.ones((2, 2)), "b": np.ones(3)})
        for k in weights:
            assert not np.array_equal(weights[k], before[k])


class TestTrain:
    def _tiny_setup(self, rng, n_ids=4):
        ds = make_dataset(rng, n_ids=n_ids, tracklets_per_id=2, frames=6)
        cfg = ModelConfig(conv_channels=(2, 3, 4), pyramid_scales=(1, 2), strip_dim=3, seed=0)
        return ds, init_model(cfg)

    def test_overfit_smoke_loss_decreases(self, rng):
        ds, model = self._tiny_setup(rng)
        spec = BatchSpec(p=4, k=2, c=4, seed=5)
        result = train(model, ds, spec, LossConfig(), TrainConfig(learning_rate=1e-3, iterations=200, seed=0))
        first = result.history[0][1]
        last = result.history[-1][1]
        assert last < first

    def test_same_seed_bit_identical_history(self, rng):
        histories = []
        for _ in range(2):
            ds = make_dataset(np.random.default_rng(42), n_ids=4, tracklets_per_id=2, frames=6)
            cfg = ModelConfig(conv_channels=(2, 3, 4), pyramid_scales=(1, 2), strip_dim=3, seed=0)
            model = init_model(cfg)
            spec = BatchSpec(p=4, k=2, c=4, seed=5)
            res = train(model, ds, spec, LossConfig(), TrainConfig(learning_rate=1e-3, iterations=20, seed=0))
            histories.append(res.history)
        assert histories[0] == histories[1]

    def test_validation_checkpoint_selection(self, rng):
        train_ds, model = self._tiny_setup(rng)
        val_ds = make_dataset(np.random.default_rng(9), n_ids=3, tracklets_per_id=2, frames=6)
        # rename val identities so they are disjoint from train
        for t in val_ds.tracklets:
            t.person_id = "v" + t.person_id
        val_ds = GaitDataset(val_ds.tracklets)
        res = train(
            model,
            train_ds,
            BatchSpec(p=4, k=2, c=4, seed=5),
            LossConfig(),
            TrainConfig(learning_rate=1e-3, iterations=10, checkpoint_every=5, seed=0),
            val_ds,
        )
        assert not math.isnan(res.best_map)
        assert res.best_iteration in (5, 10)
        vals = [row[3] for row in res.history if not math.isnan(row[3])]
        assert len(vals) == 2

    def test_overlapping_identities_rejected(self, rng):
        ds, model = self._tiny_setup(rng)
        with pytest.raises(ValueError):
            train(model, ds, BatchSpec(p=4, k=2, c=4), LossConfig(), TrainConfig(iterations=1), ds)

    def test_history_csv_roundtrip(self, tmp_path):
        rows = [(1, 0.5, 0.9, math.nan), (2, 0.4, 0.8, 0.75)]
        path = tmp_path / "hist.csv"
        trainer.save_history_csv(path, rows)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "iteration,loss,nonzero_fraction,val_mAP"
        assert lines[1].endswith(",")  # nan -> empty field
        assert lines[2].split(",")[3] == "0.750000"
