import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcglr import autodiff as ad
from dcglr.backbone import BackboneConfig, init_params
from dcglr.data import synth_dataset
from dcglr.train import (AdamState, NumericalError, TrainConfig, TrainState, adamw_step, decays,
                         ema_update, epoch_batches, load_teacher, loss_global, loss_local,
                         lr_schedule, momentum_schedule, prepare_batch, pretrain, teacher_targets,
                         total_loss, train_step, update_center)

TOY = BackboneConfig(k_patch=8, dim=16, depth=1, heads=2, mlp_hidden=32, out_dim=8,
                     proj_hidden=16, embed_hidden=8)


def toy_config(**kw):
    base = dict(global_size=32, local_size=16, epochs=2, batch_size=4, warmup_epochs=1,
                checkpoint_every=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def toy_clouds(n=8, seed=0):
    return synth_dataset(per_class=max(1, n // 6 + 1), n_points=64, seed=seed).clouds[:n]


def random_probs(rng, *shape):
    x = rng.uniform(0.01, 1.0, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


# scalar-loop oracles -------------------------------------------------------------

def h_oracle(p, q):
    return -sum(p[k] * math.log(q[k]) for k in range(len(p)))


def loss_global_oracle(t, s):
    total, pairs = 0.0, 0
    for i in range(len(t)):
        for j in range(len(s)):
            if i != j:
                total += h_oracle(t[i], s[j])
                pairs += 1
    return total / pairs


def loss_local_oracle(t, s):
    return sum(h_oracle(ti, sj) for ti in t for sj in s) / (len(t) * len(s))


class TestLosses:
    @pytest.mark.parametrize("I, J", [(2, 1), (2, 10), (3, 4), (5, 2)])
    def test_match_oracles(self, I, J):
        rng = np.random.default_rng(I * 10 + J)
        t, sg, sl = random_probs(rng, I, 7), random_probs(rng, I, 7), random_probs(rng, J, 7)
        lg, ll = loss_global(t, sg), loss_local(t, sl)
        assert abs(lg.item() - loss_global_oracle(t, sg)) <= 1e-12
        assert abs(ll.item() - loss_local_oracle(t, sl)) <= 1e-12
        tot = total_loss(lg, ll, 0.3, 1.7).item()
        assert abs(tot - (0.3 * loss_global_oracle(t, sg) + 1.7 * loss_local_oracle(t, sl))) <= 1e-12

    def test_two_globals_use_exactly_the_cross_pairs(self):
        rng = np.random.default_rng(0)
        t, s = random_probs(rng, 2, 5), random_probs(rng, 2, 5)
        expected = 0.5 * (h_oracle(t[0], s[1]) + h_oracle(t[1], s[0]))
        assert abs(loss_global(t, s).item() - expected) <= 1e-12

    def test_batch_is_mean_of_clouds(self):
        rng = np.random.default_rng(1)
        t, s = random_probs(rng, 3, 2, 6), random_probs(rng, 3, 2, 6)
        per = [loss_global_oracle(t[b], s[b]) for b in range(3)]
        assert abs(loss_global(t, s).item() - np.mean(per)) <= 1e-12

    def test_global_ignores_same_view_pairs(self):
        rng = np.random.default_rng(2)
        t, s = random_probs(rng, 2, 6), random_probs(rng, 2, 6)
        base = loss_global(t, s).item()
        # changing t[0] only alters H(t0, s1); moving s1 to t0 cannot touch H(t0, s0)
        s2 = s.copy()
        s2[0] = random_probs(rng, 6)
        t2 = t.copy()
        t2[1] = t[1]
        assert loss_global(t2, s2).item() != base
        expected = 0.5 * (h_oracle(t[0], s2[1]) + h_oracle(t[1], s2[0]))
        assert abs(loss_global(t2, s2).item() - expected) <= 1e-12

    def test_single_global_rejected(self):
        with pytest.raises(ValueError):
            loss_global(np.ones((1, 3)) / 3, np.ones((1, 3)) / 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 4))
    def test_matching_student_minimises_global_loss(self, seed, I):
        """With shared targets, the best student is the target itself (Gibbs)."""
        rng = np.random.default_rng(seed)
        t = np.repeat(random_probs(rng, 1, 5), I, axis=0)
        best = loss_global(t, t).item()
        other = loss_global(t, random_probs(rng, I, 5)).item()
        assert best <= other + 1e-12


class TestTargets:
    def test_shift_invariance_bit_stable(self):
        rng = np.random.default_rng(0)
        # multiples of 2**-10 keep o - c exact, so any drift would come from the softmax itself
        logits = np.round(rng.normal(size=(4, 2, 8)) * 1024) / 1024
        center = np.round(rng.normal(size=8) * 1024) / 1024
        a = teacher_targets(logits, center, 0.04)
        b = teacher_targets(logits + 2.0, center + 2.0, 0.04)
        np.testing.assert_array_equal(a, b)

    def test_rows_sum_to_one(self):
        out = teacher_targets(np.random.default_rng(0).normal(size=(6, 8)) * 20, np.zeros(8), 0.04)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_centering_removes_a_dominant_dimension(self):
        logits = np.tile(np.array([5.0, 0, 0, 0]), (3, 1))
        assert teacher_targets(logits, np.zeros(4), 0.5)[0, 0] > 0.99
        np.testing.assert_allclose(teacher_targets(logits, logits[0], 0.5), 0.25)


class TestUpdates:
    def test_center_algebra(self):
        rng = np.random.default_rng(0)
        c, logits = rng.normal(size=6), rng.normal(size=(3, 2, 6))
        out = update_center(c, logits, 0.9)
        for k in range(6):
            mean = sum(logits[b, i, k] for b in range(3) for i in range(2)) / 6
            assert abs(out[k] - (0.9 * c[k] + 0.1 * mean)) <= 1e-12

    def test_ema_algebra(self):
        t, s = init_params(TOY, 1), init_params(TOY, 2)
        out = ema_update(t, s, 0.996)
        for name in t:
            ref = 0.996 * t[name] + (1 - 0.996) * s[name]
            assert np.max(np.abs(out[name] - ref)) <= 1e-12

    def test_ema_endpoints_exact(self):
        t, s = init_params(TOY, 1), init_params(TOY, 2)
        assert all(np.array_equal(ema_update(t, s, 1.0)[n], t[n]) for n in t)
        assert all(np.array_equal(ema_update(t, s, 0.0)[n], s[n]) for n in t)

    def test_momentum_schedule(self):
        assert momentum_schedule(0, 100) == 0.996
        assert momentum_schedule(100, 100) == 1.0
        assert momentum_schedule(50, 100) == pytest.approx(0.998, abs=1e-15)
        vals = [momentum_schedule(s, 100) for s in range(101)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_lr_schedule(self):
        assert lr_schedule(0, 100, 10, 1.0) == 0.0
        assert lr_schedule(5, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_schedule(10, 100, 10, 1.0) == 1.0
        assert lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_schedule(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_adamw_first_step_closed_form(self):
        p = {"a.w": np.array([1.0, -2.0, 3.0])}
        g = {"a.w": np.array([0.5, -0.1, 0.0])}
        adamw_step(p, g, AdamState(), lr=0.01, weight_decay=0.1)
        # bias-corrected first step moves each coordinate by lr * sign(g)
        expected = np.array([1.0, -2.0, 3.0]) * (1 - 0.01 * 0.1) - 0.01 * np.array(
            [0.5 / (0.5 + 1e-8), -0.1 / (0.1 + 1e-8), 0.0])
        np.testing.assert_allclose(p["a.w"], expected, rtol=0, atol=1e-15)

    def test_decay_is_decoupled_from_gradient(self):
        p = {"x.w": np.array([2.0]), "x.b": np.array([2.0])}
        adamw_step(p, {"x.w": np.zeros(1), "x.b": np.zeros(1)}, AdamState(), 0.1, 0.5, decay=decays)
        assert p["x.w"][0] == pytest.approx(2.0 * (1 - 0.05))
        assert p["x.b"][0] == 2.0

    def test_decay_filter(self):
        assert decays("blocks.0.attn.qkv.w")
        assert not decays("blocks.0.ln1.g") and not decays("cls_token") and not decays("proj.fc1.b")


class TestStep:
    def prepared(self, cfg, n=4):
        clouds = toy_clouds(n)
        seeds = [np.random.SeedSequence([0, i]) for i in range(n)]
        return prepare_batch(clouds, seeds, cfg, TOY)

    def test_teacher_gets_no_gradient(self):
        cfg = toy_config()
        state = TrainState.fresh(TOY, 0)
        teacher_before = state.teacher.copy()
        batch = self.prepared(cfg)
        train_step(batch, state, cfg, total_steps=10, warmup_steps=0)
        # the teacher moves only by EMA, which at step 0 uses lambda = 0.996
        for n in state.teacher:
            ref = 0.996 * teacher_before[n] + 0.004 * state.student[n]
            np.testing.assert_allclose(state.teacher[n], ref, atol=1e-12)

    def test_teacher_tensors_never_on_tape(self):
        # the teacher pass creates tensors without requires_grad, so a tape records nothing
        from dcglr.backbone import forward_inputs
        cfg = toy_config()
        batch = self.prepared(cfg)
        state = TrainState.fresh(TOY, 0)
        P = state.teacher.tensors()
        with ad.Tape() as tape:
            forward_inputs(batch.globals, P, TOY)
        assert tape.nodes == []
        assert all(t.grad is None for t in P.values())

    def test_crop_shapes(self):
        cfg = toy_config()
        b = self.prepared(cfg)
        assert b.globals.shape == (4 * 2, 4, 8, 6)
        assert b.locals.shape == (4 * 8, 2, 8, 6)
        assert b.resolution.shape == (4 * 2, 4, 8, 6)

    def test_metrics_and_center(self):
        cfg = toy_config()
        state = TrainState.fresh(TOY, 0)
        m = train_step(self.prepared(cfg), state, cfg, 10, 2)
        assert set(m) >= {"step", "epoch", "loss_g", "loss_l", "loss", "lr", "lambda", "center_norm"}
        assert m["loss"] == pytest.approx(m["loss_g"] + m["loss_l"])
        assert m["center_norm"] > 0
        assert state.step == 1

    def test_centering_disabled_keeps_zero_center(self):
        cfg = toy_config(centering=False, teacher_temp=1.0)
        state = TrainState.fresh(TOY, 0)
        train_step(self.prepared(cfg), state, cfg, 10, 2)
        np.testing.assert_array_equal(state.center, 0.0)

    def test_degenerate_samples_skipped(self):
        cfg = toy_config()
        clouds = toy_clouds(3) + [np.zeros((5, 3))]
        b = prepare_batch(clouds, [np.random.SeedSequence(i) for i in range(4)], cfg, TOY)
        assert b.n_samples == 3 and b.skipped == 1

    def test_nan_raises_with_metrics(self):
        cfg = toy_config()
        state = TrainState.fresh(TOY, 0)
        state.student.arrays["proj.fc3.b"][0] = np.nan
        with pytest.raises(NumericalError) as info:
            train_step(self.prepared(cfg), state, cfg, 10, 0)
        assert "loss" in info.value.metrics

    def test_overfits_a_frozen_batch(self):
        cfg = toy_config(base_lr=5e-3, centering=False)
        state = TrainState.fresh(TOY, 0)
        batch = self.prepared(cfg)
        losses = []
        for _ in range(50):
            # frozen centre and a slow teacher leave the targets nearly fixed
            losses.append(train_step(batch, state, cfg, total_steps=10**6, warmup_steps=0)["loss"])
        assert losses[-1] < losses[0] - 0.5


class TestPretrain:
    def test_determinism_byte_identical_logs(self, tmp_path):
        clouds, cfg = toy_clouds(8), toy_config()
        pretrain(clouds, TOY, cfg, tmp_path / "a")
        pretrain(clouds, TOY, cfg, tmp_path / "b")
        assert strip_wall(tmp_path / "a") == strip_wall(tmp_path / "b")
        a = (tmp_path / "a" / "checkpoint_last.bin").read_bytes()
        assert a == (tmp_path / "b" / "checkpoint_last.bin").read_bytes()

    def test_resume_equals_uninterrupted(self, tmp_path):
        clouds, cfg = toy_clouds(8), toy_config(epochs=3)
        full, _ = pretrain(clouds, TOY, cfg, tmp_path / "full")
        pretrain(clouds, TOY, cfg, tmp_path / "cut", stop_after=3)
        state, saved_cfg = TrainState.load(tmp_path / "cut" / "checkpoint_last.bin")
        assert saved_cfg == cfg and state.step == 3
        resumed, _ = pretrain(clouds, TOY, cfg, tmp_path / "cut", state=state)
        assert strip_wall(tmp_path / "full") == strip_wall(tmp_path / "cut")
        for n in full.teacher:
            assert full.teacher[n].tobytes() == resumed.teacher[n].tobytes()
        assert full.center.tobytes() == resumed.center.tobytes()

    def test_prefetch_does_not_change_results(self):
        clouds = toy_clouds(8)
        a, _ = pretrain(clouds, TOY, toy_config(prefetch=True))
        b, _ = pretrain(clouds, TOY, toy_config(prefetch=False))
        assert all(np.array_equal(a.student[n], b.student[n]) for n in a.student)

    def test_checkpoints_and_teacher_loading(self, tmp_path):
        state, hist = pretrain(toy_clouds(8), TOY, toy_config(), tmp_path)
        assert (tmp_path / "checkpoint_e0001.bin").exists()
        assert (tmp_path / "checkpoint_e0002.bin").exists()
        assert len(hist) == 4
        teacher = load_teacher(tmp_path / "checkpoint_last.bin")
        assert all(np.array_equal(teacher[n], state.teacher[n]) for n in teacher)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_dump_written(self, tmp_path):
        state = TrainState.fresh(TOY, 0)
        state.student.arrays["proj.fc3.b"][:] = np.inf
        with pytest.raises(NumericalError):
            pretrain(toy_clouds(8), TOY, toy_config(), tmp_path, state=state)
        assert "step" in json.loads((tmp_path / "nan_dump.json").read_text())

    def test_epoch_batches_permute_all_samples(self):
        cfg = toy_config(batch_size=3)
        batches = epoch_batches(10, 0, cfg)
        assert len(batches) == 3
        idx = np.concatenate([b[0] for b in batches])
        assert len(set(idx.tolist())) == 9

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(teacher_temp=0)
        with pytest.raises(ValueError):
            TrainConfig(n_global=1)


def strip_wall(run_dir):
    rows = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    for r in rows:
        r.pop("wall_ms")
    return json.dumps(rows, sort_keys=True).encode()
