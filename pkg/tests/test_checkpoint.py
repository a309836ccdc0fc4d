import json

import numpy as np
import pytest

from engine.errors import IntegrityError, MigrationError, StorageError
from engine.lora import LoRAConfig, merge_all
from engine.optim import AdamW
from engine.tensor import Tensor, backward
from application.checkpoint import (MANIFEST_FILE, OPTIM_FILE, PARAMS_FILE, load_checkpoint,
                                    read_checkpoint, restore_optimizer, save_checkpoint,
                                    snap_to_storage)
from application.tokenizer import EOS_ID, tokenize
from application.vlm_model import answer_logits, sample_loss


def _train_one_step(model, rng):
    optimizer = AdamW([(n, t) for n, t in model.named_parameters() if t.requires_grad])
    image = rng.random((16, 16))
    backward(sample_loss(model, image, tokenize("Q?"), tokenize("no") + [EOS_ID]))
    optimizer.step(1e-3)
    return optimizer, image


class TestRoundTrip:
    def test_forward_bit_identical_after_snap(self, tiny_model, tmp_path, rng):
        image = rng.random((16, 16))
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        snap_to_storage(tiny_model)
        loaded, checkpoint = load_checkpoint(tmp_path / "ckpt")
        np.testing.assert_array_equal(answer_logits(loaded, image, tokenize("Q?")).data,
                                      answer_logits(tiny_model, image, tokenize("Q?")).data)
        assert checkpoint.step == 0
        assert not (tmp_path / "ckpt" / OPTIM_FILE).exists()

    def test_float32_little_endian_blob(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        blob = (tmp_path / "ckpt" / PARAMS_FILE).read_bytes()
        assert len(blob) == 4 * tiny_model.num_parameters()
        _, first = next(iter(tiny_model.named_parameters()))
        stored = np.frombuffer(blob, dtype="<f4", count=first.size)
        np.testing.assert_array_equal(stored, first.data.reshape(-1).astype(np.float32))

    def test_lora_and_flags_restored(self, tiny_model, tmp_path):
        tiny_model.attach_lora(LoRAConfig(rank=2, alpha=8))
        save_checkpoint(tiny_model, None, tmp_path / "ckpt", training={"stage": "text_lora"})
        loaded, checkpoint = load_checkpoint(tmp_path / "ckpt")
        assert checkpoint.stage == "text_lora"
        assert loaded.lora_config.rank == 2
        flags = {n: t.requires_grad for n, t in loaded.named_parameters()}
        assert flags == {n: t.requires_grad for n, t in tiny_model.named_parameters()}
        assert not flags["lm.tok"]
        assert flags["lm.blocks.0.attn.q.lora_b"]

    @pytest.mark.parametrize("via_model", [True, False])
    def test_merged_model_round_trips(self, tiny_model, tmp_path, rng, via_model):
        tiny_model.attach_lora(LoRAConfig(rank=2, alpha=8))
        for name, tensor in tiny_model.named_parameters():
            if name.endswith("lora_b"):
                tensor.data = rng.normal(0.0, 0.1, size=tensor.shape)
        image = rng.random((16, 16))
        before = answer_logits(tiny_model, image, tokenize("Q?")).data
        if via_model:
            assert tiny_model.merge_lora() == 2
            assert tiny_model.lora_config is None
        else:
            assert merge_all(tiny_model) == 2
        assert not tiny_model.has_lora()
        assert "lora" not in tiny_model.architecture()
        save_checkpoint(tiny_model, None, tmp_path / "merged")
        snap_to_storage(tiny_model)
        loaded, _ = load_checkpoint(tmp_path / "merged")
        assert loaded.lora_config is None
        assert not any(n.endswith(("lora_a", "lora_b")) for n, _ in loaded.named_parameters())
        np.testing.assert_allclose(answer_logits(loaded, image, tokenize("Q?")).data, before,
                                   atol=1e-4)
        np.testing.assert_array_equal(answer_logits(loaded, image, tokenize("Q?")).data,
                                      answer_logits(tiny_model, image, tokenize("Q?")).data)

    def test_optimizer_state_and_extra_tensors(self, tiny_model, tmp_path, rng):
        optimizer, _ = _train_one_step(tiny_model, rng)
        head = Tensor(rng.normal(size=(3, 16)), requires_grad=True)
        optimizer.params["head.vision_cls.weight"] = head
        save_checkpoint(tiny_model, optimizer, tmp_path / "ckpt", training={"step": 1})
        snap_to_storage(tiny_model, optimizer)

        loaded, checkpoint = load_checkpoint(tmp_path / "ckpt")
        fresh_head = Tensor(np.zeros((3, 16)), requires_grad=True)
        named = [(n, t) for n, t in loaded.named_parameters() if t.requires_grad]
        restored = AdamW(named + [("head.vision_cls.weight", fresh_head)])
        restore_optimizer(restored, checkpoint)
        assert restored.state.step_count == 1
        np.testing.assert_array_equal(fresh_head.data, head.data)
        for name in optimizer.state.m:
            np.testing.assert_array_equal(restored.state.m[name], optimizer.state.m[name])
            np.testing.assert_array_equal(restored.state.v[name], optimizer.state.v[name])


class TestIntegrity:
    def test_truncated_blob(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        path = tmp_path / "ckpt" / PARAMS_FILE
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "ckpt")

    def test_unknown_version(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(MigrationError, match="99"):
            read_checkpoint(tmp_path / "ckpt")

    def test_renamed_parameter(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text())
        manifest["parameters"][0]["name"] = "vision.bogus"
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(IntegrityError, match="bogus"):
            load_checkpoint(tmp_path / "ckpt")

    @pytest.mark.parametrize("mutate", [
        lambda m: m.pop("architecture"),
        lambda m: m.pop("parameters"),
        lambda m: m["parameters"][0].pop("shape"),
        lambda m: m["architecture"].pop("lm"),
        lambda m: m["architecture"]["vision"].update(bogus=1),
    ])
    def test_manifest_missing_fields(self, tiny_model, tmp_path, mutate):
        save_checkpoint(tiny_model, None, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / MANIFEST_FILE
        manifest = json.loads(manifest_path.read_text())
        mutate(manifest)
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(StorageError):
            load_checkpoint(tmp_path / "nothing")

    def test_integrity_is_storage_error(self):
        assert IntegrityError.exit_code == 2
