import pytest

from core.ablation import STRATEGIES, results_frame, run_ablation, strategy_config
from core.data import load_dataset
from core.errors import ConfigError
from core.training import TrainConfig


@pytest.fixture
def config(tiny_encoder):
    return TrainConfig(encoder=tiny_encoder, epochs_per_resolution=1, finetune_epochs=1, batch_size=6,
                       progress=False, seed=0)


class TestStrategyConfig:
    def test_multi_is_unchanged(self, config):
        assert strategy_config(config, "multi") is config
        assert strategy_config(config, "none") is config

    def test_single_keeps_epoch_budget(self, config):
        config.epochs_per_resolution = 3
        single = strategy_config(config, "single")
        assert single.ladder == [32]
        assert single.epochs_per_resolution == 6
        assert config.ladder == [16, 32]

    def test_unknown_strategy(self, config):
        with pytest.raises(ConfigError) as info:
            strategy_config(config, "double")
        assert "double" in str(info.value)


def test_run_ablation(config, tiny_dataset_dir, tmp_path):
    train, val, test = (load_dataset(tiny_dataset_dir, split) for split in ("train", "val", "test"))
    results = run_ablation(config, train, val, test, strategies=("none", "multi"), log_dir=tmp_path)

    assert [r.strategy for r in results] == ["none", "multi"]
    assert results[0].resolutions == []
    assert results[1].resolutions == [16, 32]
    assert not (tmp_path / "train_log_single.jsonl").exists()
    assert (tmp_path / "train_log_none.jsonl").exists()
    multi_log = (tmp_path / "train_log_multi.jsonl").read_text().splitlines()
    assert len(multi_log) == 3
    for r in results:
        assert 0.0 <= r.test_BAcc <= 1.0
        assert 0.0 <= r.AP_top1 <= 1.0
        assert 0 <= r.prototype < config.encoder.embed_dim

    frame = results_frame(results)
    assert list(frame["strategy"]) == ["none", "multi"]
    assert {"val_BAcc", "test_F1", "baseline_AP"} <= set(frame.columns)


def test_strategies_constant():
    assert STRATEGIES == ("none", "single", "multi")
