"""Schedule algebra, freezing contracts, determinism, ablation identity,
divergence handling, and learnability on a structured synthetic dataset."""

import numpy as np
import pytest

from rateinv.corpus import make_record
from rateinv.errors import ConfigError, TrainingDivergedError
from rateinv.losses import LossConfig, total_loss
from rateinv.model import ModelConfig, init_params, load_checkpoint
from rateinv.trainer import (
    AdversarialSchedule,
    OptimizerState,
    SYSTEM_PRESETS,
    TrainExample,
    TrainerConfig,
    batch_objective,
    classification_accuracy,
    run_training,
    train_step_max,
    train_step_min,
)

CFG = ModelConfig(n_speakers=4, feat_dim=10, channels=6, embed_dim=16, map_dim=8)


def structured_features(speaker, rate, utt, t=60, f=10):
    """Speaker sets a static spectral pattern, rate sets a modulation speed."""
    base = np.random.default_rng(1000 + speaker).standard_normal(f) * 1.5
    direction = np.random.default_rng(2000 + rate).standard_normal(f)
    period = (30.0, 15.0, 7.0)[rate]
    phase = np.random.default_rng([speaker, rate, utt]).uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * np.arange(t) / period + phase)
    noise = np.random.default_rng([utt, speaker, rate]).standard_normal((t, f)) * 0.3
    return base + wave[:, None] * direction + noise


def toy_data(n_speakers=4, utts=3):
    records, feats = [], {}
    alphas = (0.8, 1.0, 1.3)
    for s in range(n_speakers):
        for r in range(3):
            for u in range(utts):
                uid = f"s{s}r{r}u{u}"
                records.append(make_record(uid, f"spk{s}", uid + ".wav", alphas[r]))
                feats[uid] = structured_features(s, r, u)
    return records, feats


def batch_from(feats_map, n=6, chunk=40, seed=0):
    rng = np.random.default_rng(seed)
    keys = sorted(feats_map)
    batch = []
    for _ in range(n):
        k = keys[int(rng.integers(len(keys)))]
        s = int(k[1])
        r = int(k[3])
        batch.append(TrainExample(feats_map[k][:chunk], s, r))
    return batch


class TestSchedule:
    def test_phase_function(self):
        sched = AdversarialSchedule(20, 50)
        trace = sched.trace(140)
        assert trace[:20] == ["maximize"] * 20
        assert trace[20:70] == ["minimize"] * 50
        assert trace[70:90] == ["maximize"] * 20
        assert trace[90:140] == ["minimize"] * 50

    def test_pure_function_of_step(self):
        sched = AdversarialSchedule(3, 5)
        assert [sched.phase_at(s) for s in range(16)] == sched.trace(16)

    def test_validation(self):
        with pytest.raises(ValueError):
            AdversarialSchedule(0, 5)


class TestFreezing:
    def test_max_step_freezes_everything_but_map(self):
        records, feats = toy_data()
        params = init_params(CFG, seed=0)
        opt = OptimizerState(0.01)
        batch = batch_from(feats)
        frozen = params.names_in(["encoder", "attention", "id_head", "rate_head"])
        before = {n: params.arrays[n].copy() for n in params.arrays}
        train_step_max(batch, params, opt, LossConfig())
        for name in frozen:
            assert np.array_equal(before[name], params.arrays[name]), name
        assert any(
            not np.array_equal(before[n], params.arrays[n])
            for n in params.names_in(["cosine_map"])
        )
        assert params.trainable == {
            "encoder": False, "attention": False, "id_head": False,
            "rate_head": False, "cosine_map": True,
        }

    def test_min_step_freezes_map(self):
        records, feats = toy_data()
        params = init_params(CFG, seed=1)
        opt = OptimizerState(0.01)
        batch = batch_from(feats)
        before = {n: params.arrays[n].copy() for n in params.arrays}
        train_step_min(batch, params, opt, LossConfig())
        for name in params.names_in(["cosine_map"]):
            assert np.array_equal(before[name], params.arrays[name]), name
        assert any(
            not np.array_equal(before[n], params.arrays[n])
            for n in params.names_in(["encoder"])
        )

    def test_zero_learning_rate_still_emits_metrics(self):
        _, feats = toy_data()
        params = init_params(CFG, seed=2)
        before = {n: params.arrays[n].copy() for n in params.arrays}
        metrics = train_step_max(batch_from(feats), params, OptimizerState(0.0), LossConfig())
        assert set(metrics) >= {"l_id", "l_rate", "l_cos", "total"}
        for name in params.arrays:
            assert np.array_equal(before[name], params.arrays[name])

    def test_id_head_columns_unit_norm_after_min_step(self):
        _, feats = toy_data()
        params = init_params(CFG, seed=3)
        train_step_min(batch_from(feats), params, OptimizerState(0.01), LossConfig())
        norms = np.linalg.norm(params.arrays["id_w"], axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestObjectiveModes:
    def test_lambda2_zero_matches_deleted_cos_term(self):
        """A min step with lambda2=0 produces the exact gradients of a
        multi-task objective with the cosine term removed."""
        _, feats = toy_data()
        params = init_params(CFG, seed=4)
        batch = batch_from(feats)
        cfg0 = LossConfig(lambda1=0.1, lambda2=0.0)
        _, grads = batch_objective(batch, params, cfg0, mode="min")

        # reassemble the objective without the cosine branch
        from rateinv.model import (
            decompose_backward, decompose_forward, encode_backward,
            encode_forward, id_logits_backward, id_logits_forward, rate_logits,
            rate_logits_backward,
        )
        from rateinv.losses import am_softmax_grad, rate_ce_grad

        manual = {}
        for ex in batch:
            phi, enc_cache = encode_forward(ex.frames, params)
            x_id, x_rate, _, dec_cache = decompose_forward(phi, params)
            cos, id_cache = id_logits_forward(x_id, params)
            _, dcos = am_softmax_grad(cos, ex.speaker, cfg0.am_scale, cfg0.am_margin)
            logits = rate_logits(x_rate, params)
            _, dlog = rate_ce_grad(logits, ex.rate)
            dx_id, idg = id_logits_backward(dcos, id_cache)
            dx_rate, rg = rate_logits_backward(cfg0.lambda1 * dlog, x_rate, params)
            dphi, dg = decompose_backward(dx_id, dx_rate, dec_cache, params)
            for d in (idg, rg, dg, encode_backward(dphi, enc_cache, params)):
                for k, v in d.items():
                    manual[k] = manual.get(k, 0) + v
        for k in manual:
            manual[k] = manual[k] / len(batch)
        assert set(grads) == set(manual)
        for k in grads:
            np.testing.assert_allclose(grads[k], manual[k], atol=1e-12, err_msg=k)

    def test_max_mode_targets_map_only(self):
        _, feats = toy_data()
        params = init_params(CFG, seed=5)
        _, grads = batch_objective(batch_from(feats), params, LossConfig(), mode="max")
        assert set(grads) == set(params.names_in(["cosine_map"]))


class TestRunTraining:
    def test_schedule_trace_140(self):
        sched = AdversarialSchedule(20, 50)
        trace = sched.trace(140)
        blocks = []
        for phase in trace:
            if blocks and blocks[-1][0] == phase:
                blocks[-1][1] += 1
            else:
                blocks.append([phase, 1])
        assert blocks == [["maximize", 20], ["minimize", 50], ["maximize", 20], ["minimize", 50]]

    def test_deterministic_logs(self):
        records, feats = toy_data()
        tc = TrainerConfig(steps=30, batch_size=4, chunk_frames=40,
                           learning_rate=0.005, monitor_batch_size=4)
        run1 = run_training(records, feats, CFG, tc, LossConfig(), seed=9)
        run2 = run_training(records, feats, CFG, tc, LossConfig(), seed=9)
        assert run1.log_lines == run2.log_lines

    def test_log_line_format(self):
        records, feats = toy_data()
        tc = TrainerConfig(steps=3, batch_size=4, chunk_frames=40, monitor_batch_size=4)
        run = run_training(records, feats, CFG, tc, LossConfig(), seed=0)
        parts = run.log_lines[0].split()
        assert len(parts) == 6
        int(parts[0])
        assert parts[1] in ("maximize", "minimize")
        for p in parts[2:]:
            float(p)

    def test_freezing_contract_over_full_run(self):
        records, feats = toy_data()
        tc = TrainerConfig(steps=25, batch_size=4, chunk_frames=40,
                           learning_rate=0.005, monitor_batch_size=4,
                           schedule=AdversarialSchedule(5, 5))
        # replicate the run step by step to snapshot around updates
        from rateinv.trainer import build_dataset, _sample_example
        from rateinv.model import init_params as init

        params = init(CFG, seed=3)
        dataset, _ = build_dataset(records, feats, 15)
        rng = np.random.default_rng(3)
        _ = [_sample_example(dataset, rng, 40) for _ in range(4)]  # monitor draw
        opt = OptimizerState(0.005)
        sched = tc.schedule
        map_names = params.names_in(["cosine_map"])
        other_names = params.names_in(["encoder", "attention", "id_head", "rate_head"])
        for step in range(tc.steps):
            batch = [_sample_example(dataset, rng, 40) for _ in range(4)]
            before = {n: params.arrays[n].copy() for n in params.arrays}
            if sched.phase_at(step) == "maximize":
                train_step_max(batch, params, opt, LossConfig())
                unchanged = other_names
            else:
                train_step_min(batch, params, opt, LossConfig())
                unchanged = map_names
            for name in unchanged:
                assert np.array_equal(before[name], params.arrays[name]), (step, name)

    def test_missing_rate_class_is_config_error(self):
        records, feats = toy_data()
        only_normal = [r for r in records if r.rate_label == "normal"]
        with pytest.raises(ConfigError, match="rate"):
            run_training(only_normal, feats, CFG,
                         TrainerConfig(steps=2, batch_size=2, chunk_frames=40,
                                       monitor_batch_size=2),
                         LossConfig(lambda1=0.1), seed=0)

    def test_rate_task_off_allows_single_rate(self):
        records, feats = toy_data()
        only_normal = [r for r in records if r.rate_label == "normal"]
        run = run_training(only_normal, feats, CFG,
                           TrainerConfig(steps=2, batch_size=2, chunk_frames=40,
                                         monitor_batch_size=2, adversarial=False),
                           LossConfig(lambda1=0.0, lambda2=0.0), seed=0)
        assert all(m["phase"] == "minimize" for m in run.metrics)

    def test_divergence_aborts_with_checkpoint(self, tmp_path):
        records, feats = toy_data()
        ckpt = tmp_path / "last_good.npz"
        with pytest.raises(TrainingDivergedError):
            run_training(records, feats, CFG,
                         TrainerConfig(steps=200, batch_size=4, chunk_frames=40,
                                       learning_rate=500.0, monitor_batch_size=4),
                         LossConfig(), seed=0, checkpoint_path=ckpt)
        assert ckpt.exists()
        params, meta = load_checkpoint(ckpt)
        assert meta["diverged"] is True
        for arr in params.arrays.values():
            assert np.all(np.isfinite(arr))

    def test_speaker_count_mismatch(self):
        records, feats = toy_data()
        bad_cfg = ModelConfig(n_speakers=9, feat_dim=10, channels=6, embed_dim=16, map_dim=8)
        with pytest.raises(ConfigError):
            run_training(records, feats, bad_cfg,
                         TrainerConfig(steps=1, batch_size=2, chunk_frames=40,
                                       monitor_batch_size=2),
                         LossConfig(), seed=0)

    def test_learnable_above_chance(self):
        """Both heads beat chance on held-out utterances of the toy task."""
        records, feats = toy_data(n_speakers=4, utts=4)
        held_out = {f"s{s}r{r}u3" for s in range(4) for r in range(3)}
        train_recs = [r for r in records if r.utt_id not in held_out]
        tc = TrainerConfig(steps=280, batch_size=8, chunk_frames=40,
                           learning_rate=0.01, monitor_batch_size=8,
                           schedule=AdversarialSchedule(20, 50))
        run = run_training(train_recs, feats, CFG, tc, LossConfig(), seed=2)
        eval_batch = [
            TrainExample(feats[uid], int(uid[1]), int(uid[3])) for uid in sorted(held_out)
        ]
        id_acc, rate_acc = classification_accuracy(eval_batch, run.params)
        assert id_acc > 1.0 / 4
        assert rate_acc > 1.0 / 3

    def test_warm_start_from_checkpoint(self, tmp_path):
        records, feats = toy_data()
        tc = TrainerConfig(steps=5, batch_size=4, chunk_frames=40, monitor_batch_size=4)
        run = run_training(records, feats, CFG, tc, LossConfig(), seed=0,
                           checkpoint_path=tmp_path / "a.npz")
        params, _ = load_checkpoint(tmp_path / "a.npz")
        run2 = run_training(records, feats, CFG, tc, LossConfig(), seed=1, init=params)
        assert len(run2.metrics) == 5


class TestPresets:
    def test_preset_table(self):
        assert set(SYSTEM_PRESETS) == {"baseline", "tsm-aug", "fd-att", "al-cos", "fd-al"}
        assert SYSTEM_PRESETS["baseline"]["train_data"] == "originals"
        assert SYSTEM_PRESETS["fd-att"]["lambda2"] == 0.0
        assert SYSTEM_PRESETS["al-cos"]["decomposition"] == "projection"
        assert SYSTEM_PRESETS["fd-al"]["decomposition"] == "attention"

    def test_baseline_embedding_is_phi(self):
        """identity decomposition: sigma forced to zero means x_id equals phi."""
        from rateinv.model import decompose_forward

        cfg = ModelConfig(n_speakers=4, feat_dim=10, channels=6, embed_dim=16,
                          map_dim=8, decomposition="identity")
        params = init_params(cfg, seed=0)
        phi = np.random.default_rng(0).standard_normal(16)
        x_id, x_rate, _, _ = decompose_forward(phi, params)
        np.testing.assert_array_equal(x_id, phi)
        np.testing.assert_array_equal(x_rate, 0.0)
