import csv
import os

import pytest

from dva.src.models.exceptions import ContractError
from dva.src.models.schemas import (
    AdapterConfig, EncoderConfig, EvalConfig, GenConfig, OpaConfig, RunConfig, TrainConfig,
)
from dva.src.services import ablation
from dva.src.services.ablation import FULL_METHOD, VARIANTS, AblationRunner
from dva.src.services.synthetic import gen_dataset


@pytest.fixture(scope="module")
def runner(tiny_dataset, tmp_path_factory):
    cfg = RunConfig(
        encoder=EncoderConfig.toy(),
        adapter=AdapterConfig(d=4, projectors=["q", "k"]),
        opa=OpaConfig(blur_kernel=9, output_size=64),
        train=TrainConfig(lr0=0.01, epochs=1, batch_size=6),
        eval=EvalConfig(ks=[1, 2]),
        synthetic=GenConfig(n_classes=4, n_per_class=6, image_size=64),
    )
    work_dir = str(tmp_path_factory.mktemp("ablation"))
    return AblationRunner(cfg, tiny_dataset["data_dir"], work_dir, seeds=[0])


def test_variant_table():
    assert list(VARIANTS) == ["base", "ica", "ica_opa", "ica_dp_dpt", "ica_opa_dpt"]
    assert not VARIANTS["base"].train
    assert VARIANTS["ica_opa"].opa_at_inference
    assert not VARIANTS["ica_dp_dpt"].use_background
    assert FULL_METHOD in VARIANTS


def test_base_and_full_rows(runner):
    rows = runner.run_variants(["base", FULL_METHOD])
    assert [r.variant for r in rows] == ["base", FULL_METHOD]
    for row in rows:
        assert set(row.recalls) == {1, 2}
        assert all(0.0 <= v <= 1.0 for v in row.recalls.values())
        assert row.recalls[1] <= row.recalls[2]
        assert row.adapter_params == 1_024
        assert row.seeds == [0]


def test_base_is_repeatable(runner):
    first = runner.run_variants(["base"])[0]
    second = runner.run_variants(["base"])[0]
    assert first.recalls == second.recalls


def test_projector_and_beta_sweeps(runner):
    rows = runner.run_projectors(["q", "qkv"])
    assert [r.adapter_params for r in rows] == [512, 1_536]
    assert rows[1].variant == f"{FULL_METHOD}[proj=qkv]"
    betas = runner.run_betas([0.0])
    assert betas[0].variant == f"{FULL_METHOD}[beta=0]"


def test_unknown_variant(runner):
    with pytest.raises(ContractError):
        runner.run_variants(["nope"])


def test_needs_a_seed(tiny_dataset, tiny_run_cfg, tmp_path):
    with pytest.raises(ContractError):
        AblationRunner(tiny_run_cfg, tiny_dataset["data_dir"], str(tmp_path), seeds=[])


def test_rows_record_the_inference_path(runner):
    rows = runner.run_variants(["ica", "ica_opa", FULL_METHOD])
    by_name = {r.variant: r for r in rows}
    assert by_name["ica_opa"].opa_at_inference
    assert not by_name["ica"].opa_at_inference
    assert not by_name[FULL_METHOD].opa_at_inference


DESK_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "desk.json")


def test_desk_config_uses_default_synthetic_set():
    with open(DESK_CONFIG, encoding="utf-8") as f:
        cfg = RunConfig.model_validate_json(f.read())
    assert cfg.synthetic == GenConfig()
    assert cfg.opa == OpaConfig()
    assert cfg.adapter.projectors == ["q", "k", "v"]


@pytest.mark.skipif(not os.environ.get("DVA_SLOW"), reason="desk-scale ablation, set DVA_SLOW=1")
def test_desk_ablation_ordering(tmp_path):
    """Default synthetic set, three seeds: ICA well above base, full method at least ICA, no crop at eval"""
    with open(DESK_CONFIG, encoding="utf-8") as f:
        cfg = RunConfig.model_validate_json(f.read())
    data_dir = str(tmp_path / "data")
    gen_dataset(cfg.synthetic, data_dir)
    runner = AblationRunner(cfg, data_dir, str(tmp_path / "work"), seeds=[0, 1, 2])
    base, ica, full = runner.run_variants(["base", "ica", FULL_METHOD])

    assert ica.recalls[1] - base.recalls[1] >= 0.15
    assert full.recalls[1] >= ica.recalls[1]
    # same eval path, so timing only differs by noise
    assert not full.opa_at_inference and not ica.opa_at_inference
    assert full.latency_ms < 2.0 * ica.latency_ms


def test_write_and_format(runner, tmp_path):
    rows = runner.run_variants(["base"])
    path = ablation.write_rows(str(tmp_path / ablation.ABLATION_FILE), rows)
    with open(path, newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == ["variant", "recall@1", "recall@2", "latency_ms", "adapter_params", "seeds"]
    assert table[1][0] == "base"
    text = ablation.format_rows(rows)
    assert text.splitlines()[0].startswith("variant")
    assert os.path.exists(path)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
