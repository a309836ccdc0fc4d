import csv

import numpy as np
import pytest

from engine.errors import ConfigurationError
from engine.optim import TrainHyperparams
from application.checkpoint import load_checkpoint
from application.dataset import ImageCache
from application.evaluator import evaluate
from application.normalization import DEFAULT_RULES
from application.synthetic import SyntheticSpec, generate_synthetic
from application.trainer import (BASE_LM, OBJECTIVES, STAGE_JOINT, STAGE_TEXT, STAGE_VISION,
                                 EpochRow, StageData, StagePlan, StepRow, Trainer, TrainLog,
                                 build_samples, emit_loss_csv, make_plan, plans_for,
                                 run_stage, shape_classes)
from application.vlm_model import GenerationParams, VLMModel


@pytest.fixture
def stage_data(synthetic_corpus):
    records, images = synthetic_corpus
    return StageData(records[:8], records[8:], images)


def _snapshot(model, prefix=""):
    return {n: t.data.copy() for n, t in model.named_parameters() if n.startswith(prefix)}


def _base_lm(model):
    return {n: v for n, v in _snapshot(model, "lm.").items() if "lora" not in n}


class TestPlans:
    def test_standard_plans_partition_parameters(self, tiny_model):
        tiny_model.attach_lora(Trainer(tiny_model).lora)
        for stage in (STAGE_VISION, STAGE_TEXT, STAGE_JOINT):
            trainable, frozen = make_plan(stage, 10).resolve(tiny_model)
            assert len(trainable) + len(frozen) == len(list(tiny_model.named_parameters()))
            assert not set(trainable) & set(frozen)

    def test_text_stage_trains_only_adapters(self, tiny_model):
        tiny_model.attach_lora(Trainer(tiny_model).lora)
        trainable, _ = make_plan("text", 10).resolve(tiny_model)
        assert trainable and all(n.endswith((".lora_a", ".lora_b")) for n in trainable)

    def test_unmatched_parameter(self, tiny_model):
        plan = StagePlan(STAGE_JOINT, ["vision.*"], ["lm.*"], OBJECTIVES[STAGE_JOINT], 5,
                         make_plan(STAGE_JOINT, 5).schedule)
        with pytest.raises(ConfigurationError, match="projector"):
            plan.resolve(tiny_model)

    def test_overlapping_selectors(self, tiny_model):
        plan = StagePlan(STAGE_JOINT, ["*"], ["lm.*"], OBJECTIVES[STAGE_JOINT], 5,
                         make_plan(STAGE_JOINT, 5).schedule)
        with pytest.raises(ConfigurationError):
            plan.resolve(tiny_model)

    def test_wrong_objective(self):
        with pytest.raises(ConfigurationError):
            StagePlan(STAGE_TEXT, ["*"], [], "fused_vqa", 1, make_plan(STAGE_TEXT, 1).schedule)

    def test_plans_for_all(self):
        plans = plans_for("all", {STAGE_VISION: 3, STAGE_TEXT: 0, STAGE_JOINT: 7})
        assert [p.stage for p in plans] == [STAGE_VISION, STAGE_TEXT, STAGE_JOINT]
        assert [p.steps for p in plans] == [3, 0, 7]
        assert plans[0].schedule.warmup_steps == 3


class TestSamples:
    def test_classes_and_classification_samples(self, synthetic_corpus, tiny_model):
        records, _ = synthetic_corpus
        classes = shape_classes(records)
        assert classes == ["circle", "cross", "square"]
        samples = build_samples(tiny_model, OBJECTIVES[STAGE_VISION], records, classes)
        assert len(samples) == 6
        assert samples == sorted(samples)

    def test_text_samples_have_no_image(self, synthetic_corpus, tiny_model):
        records, _ = synthetic_corpus
        samples = build_samples(tiny_model, OBJECTIVES[STAGE_TEXT], records, [])
        assert all(image is None for image, _, _ in samples)
        assert samples[0][2][-1] == 258

    def test_options_rejected(self, synthetic_corpus, tiny_model):
        records, _ = synthetic_corpus
        records[0].options = {"A": "circle"}
        with pytest.raises(ConfigurationError):
            build_samples(tiny_model, OBJECTIVES[STAGE_JOINT], records, [])


class TestRunStage:
    def test_zero_steps_is_noop(self, tiny_model, stage_data):
        before = _snapshot(tiny_model)
        log = run_stage(tiny_model, make_plan(STAGE_JOINT, 0), stage_data)
        assert log.is_empty()
        assert tiny_model.lora_config is None
        for name, value in _snapshot(tiny_model).items():
            np.testing.assert_array_equal(value, before[name])

    def test_vision_stage_leaves_lm_untouched(self, tiny_model, stage_data):
        lm_before = _snapshot(tiny_model, "lm.")
        projector_before = _snapshot(tiny_model, "projector.")
        vision_before = _snapshot(tiny_model, "vision.")
        log = run_stage(tiny_model, make_plan(STAGE_VISION, 3, base_lr=1e-2, warmup_steps=0),
                        stage_data, TrainHyperparams(batch_size=2))
        assert len(log.steps) == 3
        for name, value in {**lm_before, **projector_before}.items():
            np.testing.assert_array_equal(dict(tiny_model.named_parameters())[name].data, value)
        changed = [n for n, v in vision_before.items()
                   if not np.array_equal(dict(tiny_model.named_parameters())[n].data, v)]
        assert changed

    def test_base_lm_bit_identical_after_adapter_stages(self, tiny_model, stage_data):
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=4))
        trainer.run_stage(make_plan(STAGE_VISION, 2, base_lr=1e-2, warmup_steps=0), stage_data)
        after_stage_one = _base_lm(tiny_model)
        trainer.run_stage(make_plan(STAGE_TEXT, 3, base_lr=1e-2, warmup_steps=0), stage_data)
        trainer.run_stage(make_plan(STAGE_JOINT, 3, base_lr=1e-2, warmup_steps=0), stage_data)
        after = _base_lm(tiny_model)
        assert set(after) == set(after_stage_one)
        for name, value in after_stage_one.items():
            np.testing.assert_array_equal(after[name], value)
        lora_b = dict(tiny_model.named_parameters())["lm.blocks.0.attn.q.lora_b"].data
        assert np.any(lora_b != 0.0)

    def test_log_rows_and_epochs(self, tiny_model, stage_data):
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=4))
        log = trainer.run_stage(make_plan(STAGE_JOINT, 5, warmup_steps=2), stage_data)
        assert [r.step for r in log.steps] == [0, 1, 2, 3, 4]
        assert log.steps[0].lr == 0.0
        assert [e.epoch for e in log.epochs] == [1, 2, 3]
        assert all(e.test_loss is not None for e in log.epochs)

    def test_train_and_test_loss_use_same_reduction(self, tiny_model, stage_data):
        # lr = 0 ở step đầu warmup nên model không đổi giữa hai lần đo
        same = StageData(stage_data.train, stage_data.train, stage_data.images)
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=8))
        log = trainer.run_stage(make_plan(STAGE_JOINT, 1, warmup_steps=1), same)
        epoch = log.epochs[0]
        assert epoch.test_loss == pytest.approx(epoch.train_loss, rel=1e-9)

    def test_epochs_numbered_across_stages(self, tiny_model, stage_data):
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=8))
        log = trainer.run(plans_for("all", {STAGE_VISION: 1, STAGE_TEXT: 1, STAGE_JOINT: 1},
                                    warmup_steps=0), stage_data)
        assert [(e.stage, e.epoch) for e in log.epochs] == [
            (STAGE_VISION, 1), (STAGE_TEXT, 2), (STAGE_JOINT, 3)]

    def test_observer_registration(self, tiny_model, stage_data):
        class Counter(TrainLog):
            pass

        counter = Counter()
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=8))
        trainer.register_observer(counter)
        trainer.register_observer(counter)
        trainer.run_stage(make_plan(STAGE_TEXT, 2), stage_data)
        assert len(counter.steps) == 2
        trainer.unregister_observer(counter)
        trainer.unregister_observer(trainer.log)
        assert trainer.observers == [trainer.log]


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, tiny_vision, tiny_lm, synthetic_corpus,
                                               tmp_path):
        records, images = synthetic_corpus
        data = StageData(records, [], images)
        hyper = TrainHyperparams(batch_size=4, seed=11)
        plan = make_plan(STAGE_JOINT, 6, base_lr=5e-3, warmup_steps=2)

        full = Trainer(VLMModel(tiny_vision, tiny_lm, seed=7), hyper,
                       out_dir=tmp_path / "a", checkpoint_every=2)
        full.run_stage(plan, data)

        model, checkpoint = load_checkpoint(tmp_path / "a" / f"ckpt-{STAGE_JOINT}-4")
        assert checkpoint.training["epoch_step"] == 1
        resumed = Trainer(model, hyper, out_dir=tmp_path / "b", checkpoint_every=2)
        resumed.run_stage(plan, data, resume=checkpoint)

        assert resumed.log.to_dict() == full.log.to_dict()
        for (name, a), (_, b) in zip(full.model.named_parameters(), model.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_run_skips_finished_stage(self, tiny_model, stage_data, tmp_path):
        trainer = Trainer(tiny_model, TrainHyperparams(batch_size=8), out_dir=tmp_path)
        trainer.run_stage(make_plan(STAGE_VISION, 1, warmup_steps=0), stage_data)
        model, checkpoint = load_checkpoint(tmp_path / f"ckpt-{STAGE_VISION}-1")
        log = Trainer(model, TrainHyperparams(batch_size=8)).run(
            plans_for("all", {STAGE_VISION: 1, STAGE_TEXT: 1, STAGE_JOINT: 0}, warmup_steps=0),
            stage_data, resume=checkpoint)
        assert [r.stage for r in log.steps] == [STAGE_VISION, STAGE_TEXT]


class TestLossCsv:
    def test_header_and_rows(self, tmp_path):
        log = TrainLog([StepRow(STAGE_JOINT, 0, 0.0, 5.5)],
                       [EpochRow(STAGE_JOINT, 1, 5.5, 5.25), EpochRow(STAGE_JOINT, 2, 4.0, None)])
        emit_loss_csv(log, tmp_path / "loss.csv")
        with open(tmp_path / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows == [["epoch", "train_loss", "test_loss"], ["1", "5.5", "5.25"],
                        ["2", "4.0", ""]]

    def test_identical_runs_identical_csv(self, tiny_vision, tiny_lm, stage_data, tmp_path):
        for name in ("a", "b"):
            trainer = Trainer(VLMModel(tiny_vision, tiny_lm, seed=1), TrainHyperparams(batch_size=4))
            log = trainer.run_stage(make_plan(STAGE_JOINT, 3, warmup_steps=1), stage_data)
            emit_loss_csv(log, tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.slow
def test_fully_trainable_overfit_converges():
    """Mở khóa mọi tensor (kể cả base LM) với objective joint.

    Không phải plan joint_finetune chuẩn, vốn giữ base LM đóng băng.
    """
    records, images = generate_synthetic(SyntheticSpec(num_images=16, image_size=32, noise_seed=0))
    model = VLMModel(seed=0)
    plan = make_plan(STAGE_JOINT, 300, base_lr=3e-3, warmup_steps=10)
    plan.trainable, plan.frozen = ["*"], []
    trainer = Trainer(model, TrainHyperparams(batch_size=8))
    log = trainer.run_stage(plan, StageData(records, [], ImageCache(preloaded=images)))
    assert log.epochs[-1].train_loss < 0.1 * log.steps[0].loss
    assert log.epochs[0].train_loss > log.epochs[-1].train_loss
    report = evaluate(model, records, ImageCache(preloaded=images), DEFAULT_RULES,
                      GenerationParams(max_new_tokens=8))
    assert report.overall.accuracy_pct >= 95.0
