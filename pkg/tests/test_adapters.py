import numpy as np
import pytest

from dva.src.models.exceptions import DimensionError
from dva.src.models.schemas import AdapterConfig, EncoderConfig
from dva.src.services import tensor as T
from dva.src.services.adapters import AdapterLayer, AdapterSet, adapter_forward, adapter_param_count, attach
from dva.src.services.encoder import ViTEncoder, weight_schema
from dva.src.services.tensor import Tensor, gradcheck


@pytest.mark.parametrize("projectors,expected", [
    (["q"], 294_912),
    (["q", "k"], 589_824),
    (["q", "k", "v"], 884_736),
])
def test_vit_b_adapter_counts(projectors, expected):
    cfg = AdapterConfig(d=16, projectors=projectors)
    assert adapter_param_count(cfg, EncoderConfig.vit_b16()) == expected


def test_toy_adapter_count(toy_cfg, toy_adapter_cfg):
    assert adapter_param_count(toy_adapter_cfg, toy_cfg) == 2 * 2 * 2 * 32 * 4
    assert attach(toy_adapter_cfg, toy_cfg, seed=0).num_parameters() == 1_024


def test_attach_initialisation(toy_cfg, toy_adapter_cfg):
    adapters = attach(toy_adapter_cfg, toy_cfg, seed=0)
    assert len(adapters) == 4
    for _, _, adapter in adapters:
        assert adapter.down.shape == (32, 4)
        assert adapter.up.shape == (4, 32)
        assert np.all(adapter.up.data == 0.0)
        assert adapter.down.requires_grad and adapter.up.requires_grad


def test_down_projection_std():
    adapters = attach(AdapterConfig(d=16, projectors=["q"]), EncoderConfig.vit_b16(), seed=0)
    stacked = np.concatenate([a.down.data.reshape(-1) for _, _, a in adapters])
    assert abs(stacked.std() - 0.02) < 1e-3


def test_projectors_are_canonically_ordered():
    assert AdapterConfig(projectors=["v", "q"]).projectors == ["q", "v"]
    with pytest.raises(ValueError):
        AdapterConfig(projectors=[])
    with pytest.raises(ValueError):
        AdapterConfig(projectors=["q", "q"])


def test_layer_subset(toy_cfg):
    adapters = attach(AdapterConfig(d=4, projectors=["q"], layers=[1]), toy_cfg, seed=0)
    assert adapters.get(0) is None
    assert list(adapters.get(1)) == ["q"]
    with pytest.raises(ValueError):
        attach(AdapterConfig(d=4, layers=[5]), toy_cfg, seed=0)


def test_width_must_be_a_bottleneck(toy_cfg):
    with pytest.raises(DimensionError):
        attach(AdapterConfig(d=32), toy_cfg, seed=0)
    with pytest.raises(DimensionError):
        AdapterLayer(Tensor(np.zeros((8, 2))), Tensor(np.zeros((3, 8))))


def test_adapter_forward_gradcheck():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 5, 8)), dtype=np.float64)
    layer = AdapterLayer(Tensor(rng.standard_normal((8, 3)), dtype=np.float64),
                         Tensor(rng.standard_normal((3, 8)), dtype=np.float64))
    errors = gradcheck(lambda d, u: T.sum(adapter_forward(x, AdapterLayer(d, u)) * 0.5), [layer.down, layer.up])
    assert max(errors) < 1e-3


def test_trainability_partition(toy_cfg, toy_adapter_cfg, toy_weights, toy_images):
    """Adapter parameters get gradients; backbone tensors do not"""
    adapters = attach(toy_adapter_cfg, toy_cfg, seed=0)
    rng = np.random.default_rng(2)
    for _, _, adapter in adapters:
        adapter.up.data[...] = rng.normal(0, 0.02, size=adapter.up.shape)
    loss = T.sum(ViTEncoder(toy_weights).encode(toy_images[:2], adapters))
    loss.backward()
    for p in adapters.parameters():
        assert p.grad is not None and np.any(p.grad != 0)
    for name in weight_schema(toy_cfg):
        assert toy_weights[name].grad is None


def test_down_gradient_vanishes_at_init(toy_cfg, toy_adapter_cfg, toy_weights, toy_images):
    adapters = attach(toy_adapter_cfg, toy_cfg, seed=0)
    T.sum(ViTEncoder(toy_weights).encode(toy_images[:2], adapters)).backward()
    for _, _, adapter in adapters:
        assert np.all(adapter.down.grad == 0)


def test_parameter_names(toy_cfg, toy_adapter_cfg):
    names = list(attach(toy_adapter_cfg, toy_cfg, seed=0).named_parameters())
    assert names[:2] == ["ica.layer0.q.down", "ica.layer0.q.up"]
    assert all(n.startswith("ica.") for n in names)


def test_save_load(tmp_path, toy_cfg, toy_adapter_cfg):
    adapters = attach(toy_adapter_cfg, toy_cfg, seed=5)
    path = adapters.save(str(tmp_path / "adapters.ntw"))
    loaded = AdapterSet.load(path, toy_adapter_cfg, toy_cfg)
    for (name, a), (_, b) in zip(adapters.named_parameters().items(), loaded.named_parameters().items()):
        assert np.array_equal(a.data, b.data), name


def test_load_with_other_placement(tmp_path, toy_cfg, toy_adapter_cfg):
    path = attach(toy_adapter_cfg, toy_cfg, seed=0).save(str(tmp_path / "adapters.ntw"))
    with pytest.raises(DimensionError):
        AdapterSet.load(path, AdapterConfig(d=4, projectors=["q", "k", "v"]), toy_cfg)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
