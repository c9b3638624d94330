import numpy as np
import pytest

from pego import trainer, vit
from pego.data import DatasetSpec, generate_dataset
from pego.errors import ConfigError, NumericError
from pego.numerics import make_rng
from pego.trainer import (
    AdamState,
    TrainConfig,
    adam_init,
    adam_step,
    canonical_vit_config,
    leave_one_domain_out,
    pretrain_base,
    run_single,
    stderr,
    sweep_n,
    train,
)
from pego.vit import VitConfig, init_vit


def _tiny_vit():
    return VitConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2, mlp_ratio=2.0, num_classes=2)


def _tiny_cfg(**overrides):
    defaults = dict(
        iterations=6,
        eval_every=3,
        batch_per_domain=4,
        group_n=2,
        rank=2,
        seed=0,
        vit=_tiny_vit(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(DatasetSpec(domains=4, classes=2, per_class=6, image_size=8), seed=0)


@pytest.fixture(scope="module")
def tiny_base():
    return init_vit(_tiny_vit(), make_rng(99))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.alpha == 1e-3
        assert cfg.rank == 4
        assert cfg.lr == 5e-4
        assert cfg.val_fraction == 0.2
        assert cfg.n_search == (2, 4, 6)
        assert cfg.batch_per_domain == 32

    def test_validation(self):
        with pytest.raises(ConfigError):
            _tiny_cfg(alpha=-1.0).validate()
        with pytest.raises(ConfigError):
            _tiny_cfg(val_fraction=1.5).validate()
        with pytest.raises(ConfigError):
            _tiny_cfg(lr=0.0).validate()
        with pytest.raises(ConfigError):
            _tiny_cfg(group_n=0).validate()

    def test_dict_roundtrip(self):
        cfg = _tiny_cfg(alpha=0.5, n_search=(2, 6))
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"alhpa": 1.0})


class TestAdam:
    def test_zero_gradient_leaves_params_and_increments_t(self):
        params = {"p": np.array([[1.0, -2.0]])}
        state = adam_init(params)
        adam_step(params, {"p": np.zeros((1, 2))}, state, lr=0.1)
        assert np.array_equal(params["p"], np.array([[1.0, -2.0]]))
        assert state.t == 1

    def test_first_step_hand_computed(self):
        # g = 1: bias correction gives m_hat = v_hat = 1, so the update is
        # lr / (1 + eps), within eps of lr itself.
        params = {"p": np.array([[3.0]])}
        state = adam_init(params)
        adam_step(params, {"p": np.array([[1.0]])}, state, lr=0.1)
        assert params["p"][0, 0] == pytest.approx(3.0 - 0.1, abs=1e-7)

    def test_lr_zero_is_identity(self):
        rng = make_rng(1)
        params = {"p": rng.normal(size=(3, 3))}
        before = params["p"].copy()
        state = adam_init(params)
        for _ in range(5):
            adam_step(params, {"p": rng.normal(size=(3, 3))}, state, lr=0.0)
        assert np.array_equal(params["p"], before)

    def test_trajectory_is_deterministic(self):
        def run():
            rng = make_rng(2)
            params = {"p": np.ones((2, 2))}
            state = adam_init(params)
            for _ in range(10):
                adam_step(params, {"p": rng.normal(size=(2, 2))}, state, lr=0.01)
            return params["p"]

        assert np.array_equal(run(), run())

    def test_non_finite_gradient_raises(self):
        params = {"p": np.ones((1, 1))}
        state = adam_init(params)
        with pytest.raises(NumericError, match="p"):
            adam_step(params, {"p": np.array([[np.nan]])}, state, lr=0.1)

    def test_state_shapes(self):
        params = {"a": np.zeros((2, 3)), "b": np.zeros((1, 4))}
        state = adam_init(params)
        assert isinstance(state, AdamState)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (1, 4)
        assert state.beta1 == 0.9 and state.beta2 == 0.999 and state.eps == 1e-8


class TestTrain:
    def test_history_and_cadence_bookkeeping(self, tiny_dataset, tiny_base):
        cfg = _tiny_cfg(iterations=7, eval_every=3)
        result = train(tiny_base, tiny_dataset.without("d3"), cfg)
        assert len(result.history) == 7
        evaluated = [row.iteration for row in result.history if row.val_acc is not None]
        assert evaluated == [3, 6, 7]
        assert result.selected_iter in evaluated
        assert 0.0 <= result.best_val_acc <= 1.0

    def test_zero_iterations_returns_base_backbone(self, tiny_dataset, tiny_base):
        result = train(tiny_base, tiny_dataset.without("d3"), _tiny_cfg(iterations=0))
        assert result.history == []
        assert not result.model.has_adapters()
        base_arrays = vit.model_to_arrays(tiny_base)
        merged_arrays = vit.model_to_arrays(result.model)
        for name, arr in merged_arrays.items():
            if not name.startswith("head."):
                assert np.array_equal(arr, base_arrays[name]), name

    def test_frozen_backbone_is_bitwise_invariant(self, tiny_dataset, tiny_base):
        before = vit.model_to_arrays(tiny_base)
        result = train(tiny_base, tiny_dataset.without("d0"), _tiny_cfg(iterations=5))
        after = vit.model_to_arrays(result.adapted)
        for name in after:
            if not vit.is_trainable_name(name):
                assert np.array_equal(after[name], before[name]), name

    def test_training_actually_updates_trainables(self, tiny_dataset, tiny_base):
        result = train(tiny_base, tiny_dataset.without("d0"), _tiny_cfg(iterations=5))
        arrays = vit.model_to_arrays(result.adapted)
        assert any(np.abs(arrays[n]).sum() > 0 for n in arrays if n.endswith(".B"))

    def test_determinism_across_runs(self, tiny_dataset, tiny_base):
        cfg = _tiny_cfg(iterations=5)
        r1 = train(tiny_base, tiny_dataset.without("d1"), cfg)
        r2 = train(tiny_base, tiny_dataset.without("d1"), cfg)
        a1 = vit.model_to_arrays(r1.model)
        a2 = vit.model_to_arrays(r2.model)
        for name in a1:
            assert np.array_equal(a1[name], a2[name]), name
        assert [row.loss_cls for row in r1.history] == [row.loss_cls for row in r2.history]

    def test_domains_touched_excludes_nothing_from_sources(self, tiny_dataset, tiny_base):
        sources = tiny_dataset.without("d2")
        result = train(tiny_base, sources, _tiny_cfg(iterations=4))
        assert result.domains_touched == set(sources.domains)


class TestLodo:
    def test_counting_and_aggregation(self, tiny_dataset, tiny_base):
        result = leave_one_domain_out(tiny_dataset, _tiny_cfg(iterations=3), [0, 1], base=tiny_base)
        assert len(result.records) == 8
        means = result.per_domain_mean()
        assert set(means) == set(tiny_dataset.domains)
        assert result.average == pytest.approx(np.mean(list(means.values())))
        for rec in result.records:
            assert 0.0 <= rec.accuracy <= 1.0
        for err in result.per_domain_stderr().values():
            assert err >= 0.0

    def test_leak_detection_fires(self, tiny_dataset, tiny_base, monkeypatch):
        real_train = trainer.train

        def leaky_train(base, sources, cfg):
            result = real_train(base, sources, cfg)
            result.domains_touched.add("d1")
            return result

        monkeypatch.setattr(trainer, "train", leaky_train)
        with pytest.raises(RuntimeError, match="leaked"):
            run_single(tiny_dataset, _tiny_cfg(iterations=2), tiny_base, "d1", seed=0)

    def test_requires_three_domains_and_seeds(self, tiny_dataset, tiny_base):
        with pytest.raises(ConfigError):
            leave_one_domain_out(tiny_dataset.without("d0").without("d1"), _tiny_cfg(), [0], base=tiny_base)
        with pytest.raises(ConfigError):
            leave_one_domain_out(tiny_dataset, _tiny_cfg(), [], base=tiny_base)


class TestAblate:
    def test_grid_shape_and_baseline_equivalence(self, tiny_dataset, tiny_base):
        cfg = _tiny_cfg(iterations=3)
        rows = trainer.ablate(tiny_dataset, cfg, [0], base=tiny_base)
        assert [r.label for r in rows] == ["both", "preserve_only", "diversify_only", "none", "lora"]
        assert [(r.preserve_on, r.diversify_on) for r in rows[:4]] == [
            (True, True),
            (True, False),
            (False, True),
            (False, False),
        ]
        assert rows[4].group_n == 1
        # the both-off row is the plain group baseline: exact same computation
        from dataclasses import replace

        baseline = leave_one_domain_out(
            tiny_dataset, replace(cfg, preserve_on=False, diversify_on=False), [0], base=tiny_base
        )
        assert rows[3].mean_acc == np.mean(list(baseline.per_seed_average().values()))


class TestSweep:
    def test_single_candidate_returned_trivially(self, tiny_dataset, tiny_base):
        result = sweep_n(tiny_dataset, _tiny_cfg(iterations=2), values=(4,), seeds=[0], base=tiny_base)
        assert result.best_n == 4
        assert len(result.rows) == 1

    def test_tie_goes_to_smaller_n(self, tiny_dataset, tiny_base, monkeypatch):
        def fake_train(base, sources, cfg):
            return trainer.TrainResult(
                model=base, adapted=base, history=[], selected_iter=0, best_val_acc=0.75, domains_touched=set()
            )

        monkeypatch.setattr(trainer, "train", fake_train)
        result = sweep_n(tiny_dataset, _tiny_cfg(), values=(6, 2, 4), seeds=[0], base=tiny_base)
        assert result.best_n == 2

    def test_selection_never_sees_the_held_out_domain(self, tiny_dataset, tiny_base, monkeypatch):
        # every evaluate() call during a sweep must score source-domain data only
        real_evaluate = trainer.evaluate
        seen: list[set] = []

        def spy(model, dataset, domains=None):
            seen.append(set(domains or dataset.domains))
            return real_evaluate(model, dataset, domains)

        monkeypatch.setattr(trainer, "evaluate", spy)
        sweep_n(tiny_dataset, _tiny_cfg(iterations=2), values=(2,), seeds=[0], base=tiny_base)
        assert seen
        for domains in seen:
            assert len(domains) < len(tiny_dataset.domains)

    def test_empty_values_rejected(self, tiny_dataset, tiny_base):
        with pytest.raises(ConfigError):
            sweep_n(tiny_dataset, _tiny_cfg(), values=(), seeds=[0], base=tiny_base)


def test_stderr_behaviour():
    assert stderr([0.5]) == 0.0
    assert stderr([0.4, 0.6]) == pytest.approx(np.std([0.4, 0.6], ddof=1) / np.sqrt(2))
    assert stderr([0.5, 0.5, 0.5]) == 0.0


def test_pretrain_base_is_deterministic_and_cached():
    cfg = _tiny_vit()
    a = pretrain_base(cfg, seed=5, iterations=10, per_class=3)
    b = pretrain_base(cfg, seed=5, iterations=10, per_class=3)
    assert a is b
    c = pretrain_base(cfg, seed=6, iterations=10, per_class=3)
    assert not np.array_equal(a.head_w.data, c.head_w.data)
    for _, t in vit.named_params(a):
        assert np.all(np.isfinite(t.data))


def test_canonical_vit_config_shape():
    cfg = canonical_vit_config()
    assert (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.num_blocks, cfg.num_heads) == (16, 4, 32, 2, 4)
