import math
import os

import numpy as np
import pytest
import torch

from textspotter.config import config_from_dict
from textspotter.corpus import (FULL, PARTIAL, SpecSampler,
                                degrade_to_partial, generate_samples)
from textspotter.model import build_model
from textspotter.objective import (CheckpointError, LossWeights,
                                   NonFiniteLossError,
                                   RoiOutputs, RpnOutputs, TrainState,
                                   detection_losses, learning_rate_at,
                                   load_checkpoint, make_optimizer,
                                   recognition_loss, run_strategy,
                                   save_checkpoint, smooth_l1, total_loss,
                                   train_step)


def tiny_config(**train_overrides):
    train = {"steps": 4, "batch_size": 1, "learning_rate": 1e-3,
             "lr_decay_interval": 1000}
    train.update(train_overrides)
    return config_from_dict({
        "alphabet": "0123456789",
        "seed": 0,
        "data": {"canvas": [64, 64], "max_words": 1, "word_length": [2, 3],
                 "font_scale": [10, 12], "kinds": ["line"]},
        "detector": {"anchor_scales": [16.0, 32.0],
                     "rpn_pre_nms_top_n": 300, "rpn_post_nms_top_n": 50,
                     "roi_batch_size": 16, "rpn_batch_size": 64},
        "recognizer": {"hidden_dim": 32, "attn_dim": 16, "embed_dim": 8},
        "train": train,
    })


def tiny_samples(n=4, partial=0.0, seed=2):
    sampler = SpecSampler(alphabet="0123456789", word_length=(2, 3),
                          font_scale=(10, 12), kinds=("line",), max_words=1)
    return generate_samples(n, (64, 64), seed=seed, sampler=sampler,
                            partial_fraction=partial, drop_fraction=0.0)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.beta, w.gamma) == (1.0, 1.0, 1.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)


class TestTotalLoss:
    def test_partial_is_gamma_recog_exactly(self):
        w = LossWeights(gamma=1.7)
        b = total_loss(0.3, 0.5, 0.9, 2.0, PARTIAL, w)
        assert b.delta == 0
        assert b.total == 1.7 * 2.0
        assert b.l_rpn == 0.3  # still reported

    def test_full_all_ones_default_weights(self):
        b = total_loss(1.0, 1.0, 1.0, 1.0, FULL, LossWeights())
        assert b.delta == 1
        assert b.total == 4.0

    def test_identity_exact_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            vals = rng.random(4)
            w = LossWeights(*rng.random(3))
            comp = FULL if rng.random() < 0.5 else PARTIAL
            b = total_loss(*vals, comp, w)
            expect = b.delta * (b.l_rpn + w.alpha * b.l_rcnn
                                + w.beta * b.l_mask) + w.gamma * b.l_recog
            assert b.total == expect  # bitwise


class TestRecognitionLoss:
    def test_smoothing_one_is_plain_ce(self):
        torch.manual_seed(0)
        logits = torch.randn(5, 7, dtype=torch.float64)
        target = torch.tensor([1, 3, 0, 6, 2])
        got = recognition_loss(logits, target, smoothing=1.0)
        want = torch.nn.functional.cross_entropy(logits, target)
        assert torch.allclose(got, want, atol=1e-12)

    def test_uniform_logits_log_v(self):
        for v in (3, 12, 40):
            logits = torch.zeros(4, v, dtype=torch.float64)
            target = torch.tensor([0, 1, 2, 0])
            for s in (0.6, 0.9, 1.0):
                got = recognition_loss(logits, target, smoothing=s)
                assert float(got) == pytest.approx(math.log(v), abs=1e-12)

    def test_hand_computed_oracle(self):
        # V=3, one step, logits (2, 0, 0), target 0, smoothing 0.9
        logits = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
        target = torch.tensor([0])
        got = float(recognition_loss(logits, target, smoothing=0.9))
        z = math.exp(2) + 2.0
        logp = [2 - math.log(z), -math.log(z), -math.log(z)]
        q = [0.9, 0.05, 0.05]
        want = -sum(qi * li for qi, li in zip(q, logp))
        assert got == pytest.approx(want, abs=1e-8)

    def test_mass_mode(self):
        logits = torch.tensor([[0.5, -1.0, 0.2]], dtype=torch.float64)
        target = torch.tensor([2])
        got = float(recognition_loss(logits, target, smoothing=0.3,
                                     mode="mass"))
        logp = torch.log_softmax(logits[0], 0).numpy()
        q = np.full(3, 0.3 / 3)
        q[2] += 0.7
        assert got == pytest.approx(float(-(q * logp).sum()), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            recognition_loss(torch.zeros(3, 5), torch.tensor([0, 1]))

    def test_eos_check(self):
        with pytest.raises(ValueError):
            recognition_loss(torch.zeros(2, 5), torch.tensor([0, 1]), eos_id=4)


class TestSmoothL1:
    def test_piecewise_values(self):
        x = torch.tensor([0.5])
        assert float(smooth_l1(x, torch.zeros(1))) == pytest.approx(0.125)
        assert float(smooth_l1(torch.tensor([2.0]), torch.zeros(1))) \
            == pytest.approx(1.5)

    def test_symmetric(self):
        assert float(smooth_l1(torch.tensor([-0.5]), torch.zeros(1))) \
            == pytest.approx(0.125)


class TestDetectionLosses:
    def test_perfect_predictions_zero(self):
        rpn = RpnOutputs(
            logits=torch.tensor([100.0, -100.0, 100.0]),
            labels=torch.tensor([1.0, 0.0, 1.0]),
            deltas=torch.zeros(2, 4),
            delta_targets=torch.zeros(2, 4),
        )
        roi = RoiOutputs(
            cls_logits=torch.tensor([[-100.0, 100.0], [100.0, -100.0]]),
            labels=torch.tensor([1, 0]),
            deltas=torch.full((1, 4), 0.25),
            delta_targets=torch.full((1, 4), 0.25),
            mask_logits=torch.full((1, 28, 28), 100.0),
            mask_targets=torch.ones(1, 28, 28),
        )
        l_rpn, l_rcnn, l_mask = detection_losses(rpn, roi)
        assert float(l_rpn) == pytest.approx(0.0, abs=1e-8)
        assert float(l_rcnn) == pytest.approx(0.0, abs=1e-8)
        assert float(l_mask) == pytest.approx(0.0, abs=1e-8)

    def test_rcnn_matches_independent_oracle(self):
        rng = np.random.default_rng(3)
        cls_logits = rng.normal(size=(5, 2))
        labels = rng.integers(0, 2, 5)
        deltas = rng.normal(size=(3, 4)) * 0.8
        targets = rng.normal(size=(3, 4)) * 0.8
        roi = RoiOutputs(
            cls_logits=torch.tensor(cls_logits),
            labels=torch.tensor(labels),
            deltas=torch.tensor(deltas),
            delta_targets=torch.tensor(targets),
            mask_logits=torch.zeros(0, 28, 28),
            mask_targets=torch.zeros(0, 28, 28),
        )
        rpn = RpnOutputs(logits=torch.zeros(0), labels=torch.zeros(0),
                         deltas=torch.zeros(0, 4),
                         delta_targets=torch.zeros(0, 4))
        _, l_rcnn, _ = detection_losses(rpn, roi, counters={})
        # independent oracle: mean CE over rows + mean elementwise smooth-L1
        ce = 0.0
        for row, lab in zip(cls_logits, labels):
            m = row.max()
            logz = m + math.log(np.exp(row - m).sum())
            ce += logz - row[lab]
        ce /= len(labels)
        sl1 = 0.0
        for d, t in zip(deltas.ravel(), targets.ravel()):
            x = abs(d - t)
            sl1 += 0.5 * x * x if x < 1 else x - 0.5
        sl1 /= deltas.size
        assert float(l_rcnn) == pytest.approx(ce + sl1, abs=1e-7)

    def test_no_positives_counter(self):
        counters = {}
        rpn = RpnOutputs(logits=torch.zeros(4), labels=torch.zeros(4),
                         deltas=torch.zeros(0, 4),
                         delta_targets=torch.zeros(0, 4))
        roi = RoiOutputs(cls_logits=torch.zeros(2, 2),
                         labels=torch.zeros(2, dtype=torch.long),
                         deltas=torch.zeros(0, 4),
                         delta_targets=torch.zeros(0, 4),
                         mask_logits=torch.zeros(0, 28, 28),
                         mask_targets=torch.zeros(0, 28, 28))
        _, _, l_mask = detection_losses(rpn, roi, counters)
        assert float(l_mask) == 0.0
        assert counters["no_positive_rois"] == 1


class TestDeltaGating:
    def test_partial_batch_zero_detector_gradients(self):
        cfg = tiny_config()
        model = build_model(cfg)
        sample = degrade_to_partial(tiny_samples(1)[0], 0.0, seed=0)
        state = TrainState(optimizer=make_optimizer(model, cfg))
        breakdown, _ = train_step(model, [sample], state)
        assert breakdown.delta == 0
        for p in model.detector_exclusive_parameters():
            assert p.grad is None or not p.grad.any()
        # the recognizer, by contrast, received signal
        got_recog_grad = any(p.grad is not None and p.grad.abs().sum() > 0
                             for p in model.recognizer_parameters())
        assert got_recog_grad
        # and so did the shared backbone, through the recognizer
        got_backbone_grad = any(p.grad is not None and p.grad.abs().sum() > 0
                                for p in model.backbone.parameters())
        assert got_backbone_grad

    def test_full_batch_nonzero_detector_gradients(self):
        cfg = tiny_config()
        model = build_model(cfg)
        state = TrainState(optimizer=make_optimizer(model, cfg))
        breakdown, _ = train_step(model, tiny_samples(1), state)
        assert breakdown.delta == 1
        got = any(p.grad is not None and p.grad.abs().sum() > 0
                  for p in model.detector_exclusive_parameters())
        assert got


class TestTrainStep:
    def test_deterministic_sequences(self):
        cfg = tiny_config(steps=10)
        samples = tiny_samples(3)
        _, h1 = run_strategy("single_step", cfg, samples)
        _, h2 = run_strategy("single_step", cfg, samples)
        assert len(h1) == len(h2) == 10
        for a, b in zip(h1, h2):
            assert (a.l_rpn, a.l_rcnn, a.l_mask, a.l_recog, a.total) == \
                (b.l_rpn, b.l_rcnn, b.l_mask, b.l_recog, b.total)

    def test_zero_learning_rate_keeps_params(self):
        cfg = tiny_config(learning_rate=0.0)
        model = build_model(cfg)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        state = TrainState(optimizer=make_optimizer(model, cfg))
        train_step(model, tiny_samples(1), state)
        after = model.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k]), k

    def test_momentum_closed_form_recurrence(self):
        # torch SGD with momentum: v <- mu v + g; p <- p - lr v
        p = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
        opt = torch.optim.SGD([p], lr=0.1, momentum=0.9)
        xs = [float(p.detach())]
        for _ in range(5):
            opt.zero_grad()
            loss = 0.5 * (p ** 2).sum()  # grad = p
            loss.backward()
            opt.step()
            xs.append(float(p.detach()))
        x, v = 3.0, 0.0
        want = [x]
        for _ in range(5):
            v = 0.9 * v + x
            x = x - 0.1 * v
            want.append(x)
        for got, expect in zip(xs, want):
            assert got == pytest.approx(expect, abs=1e-10)

    def test_lr_schedule_decays_by_three(self):
        cfg = tiny_config(learning_rate=0.9, lr_decay_interval=100)
        assert learning_rate_at(0, cfg) == 0.9
        assert learning_rate_at(99, cfg) == 0.9
        assert learning_rate_at(100, cfg) == pytest.approx(0.3)
        assert learning_rate_at(250, cfg) == pytest.approx(0.1)

    def test_non_finite_loss_reports_component(self):
        cfg = tiny_config()
        model = build_model(cfg)
        with torch.no_grad():
            model.rpn.objectness.weight.fill_(float("nan"))
        state = TrainState(optimizer=make_optimizer(model, cfg))
        with pytest.raises(NonFiniteLossError) as exc:
            train_step(model, tiny_samples(1), state)
        assert exc.value.component == "l_rpn"


class TestStrategies:
    def test_two_step_phase1_keeps_recognizer_at_init(self):
        cfg = tiny_config(steps=3, phase1_steps=3, strategy="two_step")
        model0 = build_model(cfg)
        init = {k: v.clone() for k, v in model0.decoder.state_dict().items()}
        model, _ = run_strategy("two_step", cfg, tiny_samples(3))
        for k, v in model.decoder.state_dict().items():
            assert torch.equal(init[k], v), k

    def test_two_step_phase2_trains_recognizer(self):
        cfg = tiny_config(steps=4, phase1_steps=2, strategy="two_step")
        model0 = build_model(cfg)
        init = {k: v.clone() for k, v in model0.decoder.state_dict().items()}
        model, _ = run_strategy("two_step", cfg, tiny_samples(3))
        changed = any(not torch.equal(init[k], v)
                      for k, v in model.decoder.state_dict().items())
        assert changed

    def test_gamma_zero_degenerates_to_detection_only(self):
        cfg = tiny_config(steps=3, loss_gamma=0.0)
        model0 = build_model(cfg)
        init = {k: v.clone() for k, v in model0.decoder.state_dict().items()}
        model, hist = run_strategy("single_step", cfg, tiny_samples(2))
        for k, v in model.decoder.state_dict().items():
            assert torch.equal(init[k], v), k
        assert all(h.total == h.l_rpn + h.l_rcnn + h.l_mask for h in hist)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            run_strategy("three_step", tiny_config(), tiny_samples(1))


class TestCheckpointing:
    def test_round_trip_and_hash_guard(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg)
        state = TrainState(optimizer=make_optimizer(model, cfg), step=5)
        path = str(tmp_path / "ck.pt")
        save_checkpoint(model, state, path)
        payload = load_checkpoint(path, cfg)
        assert payload["step"] == 5
        # a longer run is not a config change; a different LR is
        assert load_checkpoint(path, tiny_config(steps=99))["step"] == 5
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path, tiny_config(learning_rate=0.5))

    def test_missing_checkpoint(self):
        with pytest.raises(CheckpointError):
            load_checkpoint("/nonexistent/ck.pt")

    def test_resume_equals_straight_run(self, tmp_path):
        samples = tiny_samples(3)
        cfg8 = tiny_config(steps=8, checkpoint_interval=0)
        straight, _ = run_strategy("single_step", cfg8, samples)

        cfg4 = tiny_config(steps=4, checkpoint_interval=0)
        d1 = str(tmp_path / "a")
        run_strategy("single_step", cfg4, samples, out_dir=d1)
        # resume trains 4 MORE steps: 4 + 4 must equal the straight 8
        resumed, _ = run_strategy(
            "single_step", cfg4, samples, out_dir=str(tmp_path / "b"),
            resume=os.path.join(d1, "checkpoint.pt"))
        # a genuinely different config must be refused
        with pytest.raises(CheckpointError):
            run_strategy("single_step",
                         tiny_config(steps=4, learning_rate=5e-3), samples,
                         resume=os.path.join(d1, "checkpoint.pt"))
        for (k, a), (_, b) in zip(straight.state_dict().items(),
                                  resumed.state_dict().items()):
            assert torch.equal(a, b), k

    def test_csv_total_matches_identity(self, tmp_path):
        cfg = tiny_config(steps=5)
        out = str(tmp_path / "run")
        run_strategy("single_step", cfg, tiny_samples(2, partial=0.5),
                     out_dir=out)
        import csv as csvmod

        with open(os.path.join(out, "metrics.csv")) as fh:
            rows = list(csvmod.DictReader(fh))
        assert len(rows) == 5
        w = LossWeights(cfg.train.loss_alpha, cfg.train.loss_beta,
                        cfg.train.loss_gamma)
        for row in rows:
            delta = int(row["delta"])
            total = delta * (float(row["l_rpn"]) + w.alpha * float(row["l_rcnn"])
                             + w.beta * float(row["l_mask"])) \
                + w.gamma * float(row["l_recog"])
            assert float(row["total"]) == total  # bitwise
