"""Triplet loss values and gradients, mining oracle, ADAM, schedule, loop."""

import numpy as np
import pytest

from iconsim.data import generate_synthetic_dataset, stratified_split
from iconsim.errors import ShapeError
from iconsim.nn import build_model, desk_config
from iconsim.tensor import Graph, Tensor, backward, finite_difference_grad
from iconsim.training import (
    AdamState,
    TrainConfig,
    Triplet,
    adam_step,
    lr_at,
    mine_triplets,
    train,
    triplet_loss,
    triplet_satisfaction,
)

from conftest import max_rel_error


class TestTripletLoss:
    def test_satisfied_margin_is_zero(self):
        fr = Tensor(np.array([[0.0, 0.0]]))
        fp = Tensor(np.array([[0.0, 0.0]]))
        fn = Tensor(np.array([[1.0, 0.0]]))
        assert triplet_loss(fr, fp, fn, 0.2).item() == 0.0

    def test_partial_violation_value(self):
        # 0.3^2 - 0.4^2 + 0.2 = 0.09 - 0.16 + 0.2 = 0.13
        fr = Tensor(np.array([[0.0, 0.0]], dtype=np.float64))
        fp = Tensor(np.array([[0.3, 0.0]], dtype=np.float64))
        fn = Tensor(np.array([[0.4, 0.0]], dtype=np.float64))
        assert triplet_loss(fr, fp, fn, 0.2).item() == pytest.approx(0.13, abs=1e-12)

    def test_equal_pos_neg_gives_margin_per_row(self, rng):
        f = Tensor(rng.standard_normal((5, 3)))
        fr = Tensor(rng.standard_normal((5, 3)))
        assert triplet_loss(fr, f, f, 0.2).item() == pytest.approx(5 * 0.2, rel=1e-5)

    def test_nonnegative_property(self, rng):
        for _ in range(50):
            fr = Tensor(rng.standard_normal((4, 8)))
            fp = Tensor(rng.standard_normal((4, 8)))
            fn = Tensor(rng.standard_normal((4, 8)))
            assert triplet_loss(fr, fp, fn, 0.2).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            triplet_loss(
                Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), 0.2
            )

    def test_gradients_vs_finite_differences(self, rng):
        fp0 = rng.standard_normal((6, 4))
        fn0 = rng.standard_normal((6, 4))
        fr0 = rng.standard_normal((6, 4))
        for which in range(3):
            tensors = [
                Tensor(a, dtype=np.float64) for a in (fr0, fp0, fn0)
            ]
            tensors[which] = Tensor(
                (fr0, fp0, fn0)[which], requires_grad=True, dtype=np.float64
            )
            with Graph() as g:
                loss = triplet_loss(*tensors, margin=0.2)
            backward(loss, g)

            def f(t, which=which):
                args = [Tensor(a, dtype=np.float64) for a in (fr0, fp0, fn0)]
                args[which] = t
                return triplet_loss(*args, margin=0.2)

            fd = finite_difference_grad(f, tensors[which])
            assert max_rel_error(tensors[which].grad, fd) < 1e-4


def _random_setup(rng, n_icons=20, n_classes=4, dim=8):
    from iconsim.data import IconRecord, Manifest

    records = []
    embeddings = {}
    for i in range(n_icons):
        icon_id = f"i{i:02d}"
        records.append(IconRecord(icon_id, f"{icon_id}.pgm", f"c{i % n_classes}"))
        embeddings[icon_id] = rng.standard_normal(dim)
    return Manifest(records), embeddings


class TestMineTriplets:
    def test_positive_is_farthest_same_class(self):
        from iconsim.data import IconRecord, Manifest

        m = Manifest(
            [
                IconRecord("r", "r", "a"),
                IconRecord("near", "n", "a"),
                IconRecord("far", "f", "a"),
                IconRecord("x", "x", "b"),
                IconRecord("y", "y", "b"),
            ]
        )
        emb = {
            "r": np.array([0.0]),
            "near": np.array([0.1]),
            "far": np.array([0.9]),
            "x": np.array([0.5]),
            "y": np.array([2.0]),
        }
        triplets = mine_triplets(emb, m, 30, np.random.default_rng(0))
        for t in triplets:
            if t.reference_id == "r":
                assert t.positive_id == "far"
                assert t.negative_id == "x"  # argmin within the only other class

    def test_invariants(self, rng):
        m, emb = _random_setup(rng)
        coll = {r.id: r.collection for r in m.records}
        triplets = mine_triplets(emb, m, 40, np.random.default_rng(1))
        assert len(triplets) == 40
        for t in triplets:
            assert len({t.reference_id, t.positive_id, t.negative_id}) == 3
            assert coll[t.reference_id] == coll[t.positive_id]
            assert coll[t.reference_id] != coll[t.negative_id]

    def test_references_cycle_without_repetition(self, rng):
        m, emb = _random_setup(rng)
        triplets = mine_triplets(emb, m, 20, np.random.default_rng(2))
        assert sorted(t.reference_id for t in triplets) == sorted(e.id for e in m.records)

    def test_brute_force_oracle(self):
        # miner's picks equal an exhaustive scan, 50 random configurations
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            m, emb = _random_setup(rng)
            coll = {r.id: r.collection for r in m.records}
            by_coll = m.by_collection()
            triplets = mine_triplets(emb, m, 20, np.random.default_rng(seed))
            for t in triplets:
                ref = emb[t.reference_id]
                same = [r.id for r in by_coll[coll[t.reference_id]] if r.id != t.reference_id]
                best_pos = max(same, key=lambda i: (((ref - emb[i]) ** 2).sum(), -same.index(i)))
                assert t.positive_id == best_pos
                neg_pool = [r.id for r in by_coll[coll[t.negative_id]]]
                best_neg = min(neg_pool, key=lambda i: (((ref - emb[i]) ** 2).sum(), neg_pool.index(i)))
                assert t.negative_id == best_neg

    def test_single_class_rejected(self, rng):
        from iconsim.data import IconRecord, Manifest

        m = Manifest([IconRecord("a", "a", "c"), IconRecord("b", "b", "c")])
        with pytest.raises(ValueError):
            mine_triplets({"a": np.zeros(2), "b": np.zeros(2)}, m, 1, rng)

    def test_deterministic_given_rng(self, rng):
        m, emb = _random_setup(rng)
        a = mine_triplets(emb, m, 25, np.random.default_rng(7))
        b = mine_triplets(emb, m, 25, np.random.default_rng(7))
        assert a == b


class TestAdam:
    def _params(self, value=1.0):
        return {"w": Tensor(np.full(3, value, dtype=np.float32), requires_grad=True)}

    def test_zero_gradient_no_change(self):
        params = self._params()
        params["w"].grad = np.zeros(3, dtype=np.float32)
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, 1.0)

    def test_single_step_unit_gradient(self):
        # bias-corrected first step moves by ~lr against the gradient
        params = self._params(0.0)
        params["w"].grad = np.ones(3, dtype=np.float32)
        state = AdamState.for_params(params)
        adam_step(params, state, lr=1e-2)
        np.testing.assert_allclose(params["w"].data, -1e-2, rtol=1e-5)
        assert state.step == 1

    def test_constant_gradient_step_size_approaches_lr(self):
        params = self._params(0.0)
        state = AdamState.for_params(params)
        lr = 1e-3
        prev = params["w"].data.copy()
        for _ in range(200):
            params["w"].grad = np.full(3, 2.5, dtype=np.float32)
            prev = params["w"].data.copy()
            adam_step(params, state, lr=lr)
        step = np.abs(params["w"].data - prev)
        np.testing.assert_allclose(step, lr, rtol=1e-3)


class TestSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == pytest.approx(1e-4, rel=1e-12)
        assert lr_at(60, cfg) == pytest.approx(1e-5, rel=1e-12)
        assert lr_at(120, cfg) == pytest.approx(1e-6, rel=1e-12)

    def test_non_increasing(self):
        cfg = TrainConfig()
        values = [lr_at(e, cfg) for e in range(0, 200)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_synthetic_dataset(4, 4, 64, seed=21, out_dir=out)
    return stratified_split(manifest, seed=21)


class TestTrainLoop:
    def test_smoke_two_classes(self, tmp_path):
        manifest = generate_synthetic_dataset(2, 2, 64, seed=5, out_dir=tmp_path / "d")
        model = build_model(desk_config(), seed=5)
        cfg = TrainConfig(epochs=1, seed=5, triplets_per_epoch=4)
        result = train(manifest, model, cfg)
        assert len(result.history) == 1
        assert np.isfinite(result.history[0]["train_loss"])
        assert result.history[0]["val_loss"] is None

    def test_same_seed_identical_loss_curve(self, tiny_corpus):
        losses = []
        for _ in range(2):
            model = build_model(desk_config(), seed=3)
            cfg = TrainConfig(epochs=3, seed=3)
            result = train(tiny_corpus, model, cfg)
            losses.append([m["train_loss"] for m in result.history])
        assert losses[0] == losses[1]

    def test_metrics_logged_as_jsonl(self, tiny_corpus, tmp_path):
        import json

        model = build_model(desk_config(), seed=1)
        log = tmp_path / "log.jsonl"
        train(tiny_corpus, model, TrainConfig(epochs=2, seed=1), log_path=log)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 2
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"epoch", "lr", "train_loss", "val_loss", "triplet_satisfaction"}

    def test_callback_can_stop(self, tiny_corpus):
        model = build_model(desk_config(), seed=2)
        calls = []

        def stop_after_first(metrics):
            calls.append(metrics["epoch"])
            return True

        result = train(tiny_corpus, model, TrainConfig(epochs=30, seed=2), callbacks=[stop_after_first])
        assert calls == [0]
        assert len(result.history) == 1

    @pytest.mark.slow
    def test_overfit_small_corpus(self, tmp_path):
        # 8 collections x 10 icons: training should satisfy >= 95% of its
        # own hard triplets within 50 epochs
        manifest = generate_synthetic_dataset(8, 10, 64, seed=13, out_dir=tmp_path / "d")
        manifest = stratified_split(manifest, seed=13)
        model = build_model(desk_config(), seed=13)
        reached = []

        def until_satisfied(metrics):
            if metrics["triplet_satisfaction"] >= 0.95:
                reached.append(metrics["epoch"])
                return True
            return False

        train(
            manifest,
            model,
            TrainConfig(epochs=50, seed=13),
            callbacks=[until_satisfied],
        )
        assert reached, "never reached 0.95 triplet satisfaction within 50 epochs"

    def test_resume_reproduces_next_loss(self, tiny_corpus, tmp_path):
        from iconsim.nn import load_checkpoint, save_checkpoint
        from iconsim.training import AdamState

        cfg = TrainConfig(epochs=3, seed=9)
        model = build_model(desk_config(), seed=9)
        full = train(tiny_corpus, model, cfg)

        model2 = build_model(desk_config(), seed=9)
        part = train(tiny_corpus, model2, TrainConfig(epochs=2, seed=9))
        path = tmp_path / "resume.ckpt"
        save_checkpoint(
            part.final.model, part.final.optimizer_state, path, epoch=part.final.epoch
        )
        ck = load_checkpoint(path)
        resumed = train(
            tiny_corpus,
            ck.model,
            cfg,
            optimizer_state=AdamState.from_dict(ck.optimizer_state),
            start_epoch=ck.epoch + 1,
        )
        assert resumed.history[0]["train_loss"] == full.history[2]["train_loss"]


class TestSatisfaction:
    def test_counts_strict_inequalities(self):
        emb = {"r": np.zeros(2), "p": np.array([1.0, 0.0]), "n": np.array([2.0, 0.0])}
        ts = [Triplet("r", "p", "n"), Triplet("r", "n", "p")]
        assert triplet_satisfaction(emb, ts) == 0.5
