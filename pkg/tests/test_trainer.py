import csv
import json
import math
import os

import numpy as np
import pytest

from dva.src.models.exceptions import ContractError, NumericError
from dva.src.models.schemas import Role
from dva.src.services import trainer as trainer_module
from dva.src.services.adapters import attach
from dva.src.services.encoder import EncoderWeights, ViTEncoder
from dva.src.services.losses import ProxyBank, dpt_loss
from dva.src.services.tensor import Tensor, no_grad
from dva.src.services.trainer import AdamState, ImagePipeline, Trainer, adam_step, cosine_lr
from dva.src.utils import imaging


# =============================================================================
# Schedule and optimizer
# =============================================================================

def test_cosine_endpoints():
    assert cosine_lr(0, 10, 0.1) == 0.1
    assert cosine_lr(5, 10, 0.1) == 0.05
    assert cosine_lr(10, 10, 0.1) == 0.0
    values = [cosine_lr(s, 10, 0.1) for s in range(11)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_cosine_out_of_range():
    with pytest.raises(ContractError):
        cosine_lr(11, 10, 0.1)
    with pytest.raises(ContractError):
        cosine_lr(0, 0, 0.1)


def _param(value):
    return Tensor(np.full((2, 3), value), requires_grad=True)


def test_adam_zero_gradient_leaves_params():
    p = _param(0.5)
    state = AdamState([p])
    adam_step([p], [np.zeros((2, 3))], state, lr=0.1, weight_decay=0.0)
    assert np.all(p.data == np.float32(0.5))


def test_adam_first_step_is_lr_sized():
    p = _param(0.0)
    state = AdamState([p])
    adam_step([p], [np.ones((2, 3))], state, lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(p.data, -0.1, rtol=1e-6)
    assert state.step == 1


def test_adam_decoupled_decay():
    p = _param(1.0)
    state = AdamState([p])
    adam_step([p], [np.zeros((2, 3))], state, lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose(p.data, 0.99, rtol=1e-6)


def test_adam_lr_scales():
    a, b = _param(0.0), _param(0.0)
    state = AdamState([a, b])
    adam_step([a, b], [np.ones((2, 3)), np.ones((2, 3))], state, lr=0.1, weight_decay=0.0, lr_scales=[1.0, 10.0])
    np.testing.assert_allclose(b.data, 10 * a.data, rtol=1e-6)


def test_adam_missing_gradient():
    p = _param(0.0)
    with pytest.raises(ContractError):
        adam_step([p], [None], AdamState([p]), lr=0.1, weight_decay=0.0)


# =============================================================================
# Image pipeline
# =============================================================================

def test_pipeline_views(tiny_dataset):
    pipeline = ImagePipeline(32, 37)
    path = tiny_dataset["train"][0].image_path
    rng = np.random.default_rng(0)
    aug = pipeline.draw_augmentation(rng)
    assert 0 <= aug[0] <= 5 and 0 <= aug[1] <= 5
    assert pipeline.train_view(path, aug).shape == (32, 32, 3)
    assert pipeline.eval_view(imaging.read_ppm(path)).shape == (32, 32, 3)


def test_pipeline_always_draws_three_values():
    no_flip = ImagePipeline(32, 37, hflip=False)
    flip = ImagePipeline(32, 37, hflip=True)
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    no_flip.draw_augmentation(a)
    flip.draw_augmentation(b)
    assert a.random() == b.random()


# =============================================================================
# Training loop
# =============================================================================

def build(cfg, num_classes, seed=0):
    weights = EncoderWeights.init(cfg.encoder, seed=0)
    adapters = attach(cfg.adapter, cfg.encoder, seed=seed)
    bank = ProxyBank.init(num_classes, cfg.encoder.dim, seed=seed)
    return weights, adapters, bank


def run(cfg, data, out_dir=None, seed=0):
    weights, adapters, bank = build(cfg, data["num_classes"], seed)
    trainer = Trainer(cfg, ViTEncoder(weights), adapters, bank, out_dir)
    report = trainer.run(data["train"], data["opa"])
    return report, weights, adapters, bank


def test_backbone_is_untouched(tiny_run_cfg, tiny_dataset):
    """100 optimizer steps change adapters and proxies only"""
    cfg = tiny_run_cfg.model_copy(update={"train": tiny_run_cfg.train.model_copy(
        update={"epochs": 40, "max_steps": 100})})
    weights, adapters, bank = build(cfg, tiny_dataset["num_classes"])
    before = weights.serialize()
    proxies_before = bank.proxies.data.copy()
    report = Trainer(cfg, ViTEncoder(weights), adapters, bank).run(tiny_dataset["train"], tiny_dataset["opa"])
    assert report.steps == 100
    assert weights.serialize() == before
    assert all(np.any(a.up.data != 0) for _, _, a in adapters)
    assert not np.array_equal(bank.proxies.data, proxies_before)


def test_training_reduces_distillation_loss(tiny_run_cfg, tiny_dataset):
    cfg = tiny_run_cfg.model_copy(update={"train": tiny_run_cfg.train.model_copy(update={"epochs": 6})})
    weights, adapters, bank = build(cfg, tiny_dataset["num_classes"])
    encoder = ViTEncoder(weights)
    pipeline = ImagePipeline(32, cfg.train.effective_resize(32), hflip=False)
    records = tiny_dataset["train"]
    images = np.stack([pipeline.eval_view(imaging.read_ppm(r.image_path)) for r in records])
    labels = [r.label_id for r in records]

    def evaluate():
        with no_grad():
            return dpt_loss(encoder.encode(images, adapters), labels, bank).item()

    before = evaluate()
    report = Trainer(cfg, encoder, adapters, bank).run(records, tiny_dataset["opa"])
    after = evaluate()
    assert after < before
    assert len(report.epochs) == 6
    assert report.steps == 6 * math.ceil(len(records) / cfg.train.batch_size)


def test_training_is_deterministic(tiny_run_cfg, tiny_dataset):
    _, _, first, bank_a = run(tiny_run_cfg, tiny_dataset)
    _, _, second, bank_b = run(tiny_run_cfg, tiny_dataset)
    for (name, a), (_, b) in zip(first.named_parameters().items(), second.named_parameters().items()):
        assert np.array_equal(a.data, b.data), name
    assert np.array_equal(bank_a.proxies.data, bank_b.proxies.data)


def test_beta_zero_matches_no_distillation(tiny_run_cfg, tiny_dataset):
    zero = tiny_run_cfg.model_copy(update={"loss": tiny_run_cfg.loss.model_copy(update={"beta": 0.0})})
    off = tiny_run_cfg.model_copy(update={"train": tiny_run_cfg.train.model_copy(update={"use_dpt": False})})
    _, _, a, bank_a = run(zero, tiny_dataset)
    _, _, b, bank_b = run(off, tiny_dataset)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert np.array_equal(bank_a.proxies.data, bank_b.proxies.data)


def test_training_without_opa(tiny_run_cfg, tiny_dataset):
    cfg = tiny_run_cfg.model_copy(update={"train": tiny_run_cfg.train.model_copy(update={"use_opa": False})})
    weights, adapters, bank = build(cfg, tiny_dataset["num_classes"])
    report = Trainer(cfg, ViTEncoder(weights), adapters, bank).run(tiny_dataset["train"])
    assert report.steps > 0
    # background proxy never enters the softmax
    assert bank.proxies.grad[bank.background_index].tolist() == [0.0] * cfg.encoder.dim


def test_background_proxy_in_softmax_without_background_samples(tiny_run_cfg, tiny_dataset):
    """With the background category on, c_b competes even when no I_b image made it into the set"""
    disc_only = [r for r in tiny_dataset["opa"] if r.role == Role.DISC]
    assert disc_only
    weights, adapters, bank = build(tiny_run_cfg, tiny_dataset["num_classes"])
    Trainer(tiny_run_cfg, ViTEncoder(weights), adapters, bank).run(tiny_dataset["train"], disc_only)
    assert np.any(bank.proxies.grad[bank.background_index] != 0)


def test_background_off_drops_background_proxy(tiny_run_cfg, tiny_dataset):
    cfg = tiny_run_cfg.model_copy(update={"opa": tiny_run_cfg.opa.model_copy(update={"use_background": False})})
    weights, adapters, bank = build(cfg, tiny_dataset["num_classes"])
    Trainer(cfg, ViTEncoder(weights), adapters, bank).run(tiny_dataset["train"], tiny_dataset["opa"])
    assert bank.proxies.grad[bank.background_index].tolist() == [0.0] * cfg.encoder.dim


def test_max_steps(tiny_run_cfg, tiny_dataset):
    cfg = tiny_run_cfg.model_copy(update={"train": tiny_run_cfg.train.model_copy(update={"max_steps": 2})})
    report, _, _, _ = run(cfg, tiny_dataset)
    assert report.steps == 2


def test_non_finite_loss_dumps_state(tmp_path, tiny_run_cfg, tiny_dataset):
    weights, adapters, bank = build(tiny_run_cfg, tiny_dataset["num_classes"])
    bank.proxies.data[...] = np.nan
    trainer = Trainer(tiny_run_cfg, ViTEncoder(weights), adapters, bank, str(tmp_path))
    with pytest.raises(NumericError) as exc:
        trainer.run(tiny_dataset["train"], tiny_dataset["opa"])
    assert exc.value.dump_path == os.path.join(str(tmp_path), trainer_module.NAN_DUMP_FILE)
    with open(exc.value.dump_path) as f:
        dump = json.load(f)
    assert dump["step"] == 0
    assert len(dump["batch_image_ids"]) == tiny_run_cfg.train.batch_size


def test_empty_manifest(tiny_run_cfg, tiny_dataset):
    weights, adapters, bank = build(tiny_run_cfg, tiny_dataset["num_classes"])
    with pytest.raises(ContractError):
        Trainer(tiny_run_cfg, ViTEncoder(weights), adapters, bank).run([], tiny_dataset["opa"])


def test_unpaired_images(tiny_run_cfg, tiny_dataset):
    weights, adapters, bank = build(tiny_run_cfg, tiny_dataset["num_classes"])
    opa_subset = [r for r in tiny_dataset["opa"] if r.image_id != tiny_dataset["train"][0].image_id]
    with pytest.raises(ContractError):
        Trainer(tiny_run_cfg, ViTEncoder(weights), adapters, bank).run(tiny_dataset["train"], opa_subset)


def test_outputs_written(tmp_path, tiny_run_cfg, tiny_dataset):
    report, _, adapters, _ = run(tiny_run_cfg, tiny_dataset, out_dir=str(tmp_path))
    with open(tmp_path / trainer_module.REPORT_FILE, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "mean_loss_proxy", "mean_loss_dpt", "lr"]
    assert len(rows) == 1 + tiny_run_cfg.train.epochs
    rates = [float(r[3]) for r in rows[1:]]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[0] < tiny_run_cfg.train.lr0
    assert (tmp_path / trainer_module.ADAPTERS_FILE).exists()
    assert (tmp_path / trainer_module.PROXIES_FILE).exists()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
