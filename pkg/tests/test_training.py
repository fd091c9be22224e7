import math

import numpy as np
import pytest

from afpm.errors import ConfigError, DataError
from afpm.model import (FPEConfig, ModelConfig, TransformerConfig, forward,
                        init_model)
from afpm.training import (
    OptimizerState, TrainConfig, adamw_step, backward, balanced_batches,
    batch_cross_entropy, chronological_split, cross_entropy, finetune,
    onecycle_lr, train,
)


def tiny_cfg(m=2, t_prime=32, n_classes=2, final_norm=True):
    fpe = FPEConfig(embed_dim=3, frame_window=8, frame_stride=8, avg_window=2,
                    avg_shift=1, token_dim=6, mlp_hidden=5)
    t = TransformerConfig(depth=1, heads=2, dim_head=2, dim_mlp=4,
                          n_classes=n_classes, final_norm=final_norm)
    return ModelConfig(task="mi", template_channels=tuple(f"C{i}" for i in range(m)),
                       template_len=t_prime, fpe=fpe, transformer=t)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss, grad = cross_entropy(np.array([0.0, 0.0]), 0)
        assert loss == pytest.approx(math.log(2.0))
        assert np.allclose(grad, [-0.5, 0.5])

    def test_extreme_logits_no_overflow(self):
        loss, _ = cross_entropy(np.array([1000.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_three_class_hand_value(self):
        loss, _ = cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
        assert loss == pytest.approx(math.log(1 + math.e ** -1 + math.e ** -2))
        assert loss == pytest.approx(0.40760596444438, abs=1e-10)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = np.array([0.3, -0.2, 1.1])
        loss, grad = cross_entropy(logits, 1)
        z = np.exp(logits - logits.max())
        soft = z / z.sum()
        soft[1] -= 1.0
        assert np.allclose(grad, soft)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(np.zeros(2), 2)


class TestBackward:
    def test_zero_input_dead_patch_weights(self):
        cfg = tiny_cfg()
        model = init_model(cfg, seed=0, dtype=np.float64)
        model.params["pos"][:] = 0.0
        model.params["cls"][:] = 0.0
        x = np.zeros((2, 2, 32))
        _, grads = backward(x, np.array([0, 1]), model)
        assert np.allclose(grads["patch.w1"], 0.0)

    def test_duplicated_sample_leaves_mean_gradient_unchanged(self, rng):
        cfg = tiny_cfg()
        model = init_model(cfg, seed=1, dtype=np.float64)
        x = rng.standard_normal((2, 2, 32))
        y = np.array([0, 1])
        _, g1 = backward(x, y, model)
        x_dup = np.concatenate([x, x], axis=0)
        y_dup = np.concatenate([y, y])
        _, g2 = backward(x_dup, y_dup, model)
        for k in g1:
            assert np.allclose(g1[k], g2[k], atol=1e-12)

    def test_batch_loss_matches_single_losses(self, rng):
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 2])
        loss, _ = batch_cross_entropy(logits.copy(), labels)
        singles = [cross_entropy(logits[i], labels[i])[0] for i in range(4)]
        assert loss == pytest.approx(np.mean(singles))


class TestAdamW:
    def _setup(self):
        params = {"w": np.array([[1.0]], dtype=np.float64),
                  "b": np.array([1.0], dtype=np.float64)}
        state = OptimizerState.zeros_like(params)
        return params, state

    def test_zero_grad_no_decay_keeps_params(self):
        params, state = self._setup()
        cfg = TrainConfig(weight_decay=0.0, seed=0)
        adamw_step(params, {"w": np.zeros((1, 1)), "b": np.zeros(1)},
                   state, lr=0.1, cfg=cfg)
        assert params["w"][0, 0] == 1.0 and params["b"][0] == 1.0

    def test_decoupled_decay_on_weights_only(self):
        params, state = self._setup()
        cfg = TrainConfig(weight_decay=0.5, seed=0)
        adamw_step(params, {"w": np.zeros((1, 1)), "b": np.zeros(1)},
                   state, lr=0.1, cfg=cfg)
        assert params["w"][0, 0] == pytest.approx(1.0 * (1 - 0.1 * 0.5))
        assert params["b"][0] == 1.0  # 1-D tensors are exempt

    def test_single_step_hand_value(self):
        params = {"w": np.array([[1.0]], dtype=np.float64)}
        state = OptimizerState.zeros_like(params)
        cfg = TrainConfig(beta1=0.9, beta2=0.999, eps_adam=1e-8,
                          weight_decay=0.0, seed=0)
        adamw_step(params, {"w": np.array([[1.0]])}, state, lr=0.1, cfg=cfg)
        # m-hat = v-hat = 1 after bias correction; update = 1/(1 + 1e-8)
        assert params["w"][0, 0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_determinism_and_state_round_trip(self, rng, tmp_path):
        from afpm.model import load_checkpoint, save_checkpoint
        cfg = tiny_cfg()
        model = init_model(cfg, seed=0)
        state = OptimizerState.zeros_like(model.params)
        grads = {k: rng.standard_normal(v.shape).astype(np.float32)
                 for k, v in model.params.items()}
        tc = TrainConfig(seed=0)
        adamw_step(model.params, grads, state, lr=1e-3, cfg=tc)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(model, path, opt_state=state.as_dict())
        loaded, opt, _ = load_checkpoint(path)
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])
            assert np.array_equal(opt["m"][k], state.m[k])
            assert np.array_equal(opt["v"][k], state.v[k])
        assert opt["step"] == 1


class TestOneCycle:
    CFG = TrainConfig(lr_init=2.5e-4, lr_max=5e-4, seed=0)

    def test_starts_at_lr_init(self):
        assert onecycle_lr(0, 1000, self.CFG) == pytest.approx(2.5e-4, abs=1e-12)

    def test_peak_at_30_percent(self):
        assert onecycle_lr(300, 1000, self.CFG) == pytest.approx(5e-4, abs=1e-12)

    def test_final_step_is_init_over_100(self):
        lr = onecycle_lr(999, 1000, self.CFG)
        assert lr == pytest.approx(2.5e-6, rel=0.01)

    def test_max_over_steps_is_lr_max(self):
        lrs = [onecycle_lr(s, 500, self.CFG) for s in range(500)]
        assert max(lrs) == pytest.approx(5e-4, abs=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            onecycle_lr(1000, 1000, self.CFG)

    def test_single_step_schedule(self):
        assert onecycle_lr(0, 1, self.CFG) == pytest.approx(2.5e-4)


class TestBalancedBatches:
    def test_imbalanced_set_yields_even_expected_counts(self):
        labels = np.array([1] * 100 + [0] * 500)
        batches = list(balanced_batches(labels, 2, 100, seed=0, n_batches=1000))
        frac = np.mean([np.mean(labels[b] == 1) for b in batches])
        assert 0.48 <= frac <= 0.52

    def test_already_balanced_marginal_unchanged(self):
        labels = np.array([0, 1] * 50)
        batches = list(balanced_batches(labels, 2, 50, seed=1, n_batches=500))
        frac = np.mean([np.mean(labels[b] == 1) for b in batches])
        assert 0.45 <= frac <= 0.55

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="class 1 has no trials"):
            list(balanced_batches(np.zeros(10, dtype=int), 2, 4, 0, 1))

    def test_deterministic_given_seed(self):
        labels = np.array([0, 0, 1, 1, 1])
        a = [b.tolist() for b in balanced_batches(labels, 2, 4, seed=9, n_batches=5)]
        b = [b.tolist() for b in balanced_batches(labels, 2, 4, seed=9, n_batches=5)]
        assert a == b

    def test_chi_square_uniform_classes(self):
        labels = np.array([0] * 30 + [1] * 300 + [2] * 60)
        counts = np.zeros(3)
        n_batches, batch = 1000, 60
        for idx in balanced_batches(labels, 3, batch, seed=3, n_batches=n_batches):
            for c in range(3):
                counts[c] += np.sum(labels[idx] == c)
        expected = n_batches * batch / 3
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        # chi-square with 2 dof: p > 0.01 means chi2 < 9.21
        assert chi2 < 9.21


def separable_toy(rng, n=120, m=2, t_prime=64):
    """Linearly separable two-class set: constant-offset rows by class."""
    y = np.array([i % 2 for i in range(n)])
    x = 0.1 * rng.standard_normal((n, m, t_prime))
    x[y == 0, 0, :] += 1.0
    x[y == 1, 0, :] -= 1.0
    return x.astype(np.float32), y


class TestTrain:
    def test_loss_drops_on_separable_toy(self, rng):
        x, y = separable_toy(rng)
        cfg = tiny_cfg(m=2, t_prime=64)
        model = init_model(cfg, seed=0)
        tc = TrainConfig(epochs=50, batch_size=32, lr_init=2e-3, lr_max=4e-3,
                         weight_decay=0.0, seed=0)
        result = train(x, y, model, tc)
        assert len(result.history) <= 200
        assert result.history[-1]["loss"] < 0.1
        assert not result.diverged

    def test_zero_lr_zero_decay_keeps_params(self, rng):
        x, y = separable_toy(rng, n=16)
        cfg = tiny_cfg(m=2, t_prime=64)
        model = init_model(cfg, seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        tc = TrainConfig(epochs=2, batch_size=8, lr_init=1e-30, lr_max=1e-30,
                         weight_decay=0.0, seed=0)
        result = train(x, y, model, tc)
        for k, v in result.model.params.items():
            assert np.allclose(v, before[k], atol=1e-12)

    def test_same_seed_bit_identical_history(self, rng):
        x, y = separable_toy(rng, n=32)
        cfg = tiny_cfg(m=2, t_prime=64)
        tc = TrainConfig(epochs=3, batch_size=8, seed=5)
        r1 = train(x, y, init_model(cfg, seed=2), tc)
        r2 = train(x, y, init_model(cfg, seed=2), tc)
        assert [h["loss"] for h in r1.history] == [h["loss"] for h in r2.history]
        for k in r1.model.params:
            assert np.array_equal(r1.model.params[k], r2.model.params[k])

    def test_divergence_guard_restores_last_good(self, rng):
        x, y = separable_toy(rng, n=32)
        cfg = tiny_cfg(m=2, t_prime=64)
        model = init_model(cfg, seed=0)
        # an absurd learning rate explodes the parameters after one step, so a
        # later step hits non-finite activations and trips the guard
        tc = TrainConfig(epochs=2, batch_size=8, lr_init=1e18, lr_max=1e18,
                         weight_decay=0.0, seed=0)
        result = train(x, y, model, tc)
        assert result.diverged
        assert len(result.history) >= 1
        for v in result.model.params.values():
            assert np.all(np.isfinite(v))

    def test_epoch_zero_returns_input(self, rng):
        x, y = separable_toy(rng, n=8)
        model = init_model(tiny_cfg(m=2, t_prime=64), seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        result = train(x, y, model, TrainConfig(epochs=0, seed=0))
        for k in before:
            assert np.array_equal(result.model.params[k], before[k])

    def test_empty_training_set_rejected(self):
        model = init_model(tiny_cfg(), seed=0)
        with pytest.raises(DataError, match="empty"):
            train(np.zeros((0, 2, 32), dtype=np.float32), np.zeros(0, dtype=int),
                  model, TrainConfig(seed=0))

    def test_head_only_convex_probe_decreases_monotonically(self, rng):
        # with frozen features the loss is convex in the head weights, so
        # small-step gradient descent on the head alone cannot go up
        cfg = tiny_cfg(m=2, t_prime=64, final_norm=False)
        model = init_model(cfg, seed=0, dtype=np.float64)
        x, y = separable_toy(rng, n=32)
        x = x.astype(np.float64)
        losses = []
        for _ in range(25):
            loss, grads = backward(x, y, model)
            losses.append(loss)
            model.params["head.w"] -= 0.5 * grads["head.w"]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestFinetune:
    def test_30_70_split(self):
        tune, evl = chronological_split(100, 0.3)
        assert tune.size == 30 and evl.size == 70
        assert tune[-1] == 29 and evl[0] == 30

    def test_single_trial_rejected(self):
        with pytest.raises(DataError):
            chronological_split(1, 0.3)

    def test_zero_epochs_returns_input_checkpoint(self, rng):
        x, y = separable_toy(rng, n=20)
        model = init_model(tiny_cfg(m=2, t_prime=64), seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        result, tune_idx, eval_idx = finetune(
            model, x, y, 0.3, TrainConfig(epochs=0, seed=0))
        assert tune_idx.size == 6 and eval_idx.size == 14
        for k in before:
            assert np.array_equal(result.model.params[k], before[k])

    def test_finetune_improves_on_subject_shift(self, rng):
        # pretrain on one offset sign convention, fine-tune flips one row scale
        x, y = separable_toy(rng, n=80)
        model = init_model(tiny_cfg(m=2, t_prime=64), seed=0)
        tc = TrainConfig(epochs=30, batch_size=16, lr_init=1e-3, lr_max=2e-3, seed=0)
        pre = train(x, y, model, tc)
        # subject with weaker signal
        xs, ys = separable_toy(rng, n=40)
        xs *= 0.4
        ft_cfg = TrainConfig(epochs=10, batch_size=8, lr_init=5e-4, lr_max=1e-3, seed=0)
        result, tune_idx, eval_idx = finetune(pre.model, xs, ys, 0.3, ft_cfg)
        logits = forward(xs[eval_idx], result.model)
        acc = np.mean(np.argmax(logits, axis=1) == ys[eval_idx])
        assert acc > 0.9
