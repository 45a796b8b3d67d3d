import os

import numpy as np
import pytest
import torch
import torch.nn as nn

from src.checkpoints import FORMAT_VERSION, Checkpoint, load_checkpoint, module_checksum, save_checkpoint
from src.config import STAGE_DEFAULTS, load_run_config
from src.errors import ArgumentError, ConfigurationError, DependencyError
from src.tools.feature_cache import FeatureCache
from src.tools.frame_store import FrameStore
from src.trainer import lr_at_epochs
from tests.helpers import CONFIG


def _env_file(tmp_path, text: str) -> str:
    path = tmp_path / "run.env"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_stage_defaults():
    detector = load_run_config("detector", environ={})
    assert (detector.epochs, detector.lr, detector.optimizer, detector.drop_steps) == (12, 0.02, "sgd", (8, 11))
    parser = load_run_config("part_parser", environ={})
    assert (parser.epochs, parser.lr, parser.optimizer, parser.drop_steps) == (40, 1e-4, "adam", (30, 35))
    action = load_run_config("action_parser", environ={})
    assert (action.epochs, action.lr, action.optimizer, action.schedule) == (30, 1e-3, "adamw", "cosine")
    assert action.members == (("frame", "instance", "part", "state"),)


def test_step_schedules_drop_by_ten():
    rates = lr_at_epochs(load_run_config("detector", environ={}))
    assert len(rates) == 12
    assert rates[:8] == pytest.approx([0.02] * 8)
    assert rates[8:11] == pytest.approx([0.002] * 3)
    assert rates[11] == pytest.approx(0.0002)
    rates = lr_at_epochs(load_run_config("part_parser", environ={}))
    assert rates[29] == pytest.approx(1e-4)
    assert rates[30] == pytest.approx(1e-5)
    assert rates[35] == pytest.approx(1e-6)


def test_cosine_schedule_decays():
    rates = lr_at_epochs(load_run_config("action_parser", environ={}))
    assert rates[0] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] < 1e-4


def test_file_env_and_overrides_layer(tmp_path):
    path = _env_file(tmp_path, "EPOCHS=5\nPART_PARSER_EPOCHS=7\nLR=0.5\nVARIANT=shared\n")
    detector = load_run_config("detector", path, environ={})
    assert detector.epochs == 5 and detector.lr == 0.5
    parser = load_run_config("part_parser", path, environ={"DAP_LR": "0.25"})
    assert parser.epochs == 7 and parser.lr == 0.25 and parser.variant == "shared"
    assert parser.source["epochs"] == "PART_PARSER_EPOCHS"
    assert parser.source["lr"] == "DAP_LR"
    scoped = load_run_config("part_parser", path, environ={"DAP_LR": "0.25", "DAP_PART_PARSER_LR": "0.125"})
    assert scoped.lr == 0.125
    cli = load_run_config("part_parser", path, environ={}, overrides={"epochs": 0, "seed": None})
    assert cli.epochs == 0 and cli.seed == 0 and cli.source["epochs"] == "cli"


def test_list_valued_keys(tmp_path):
    path = _env_file(tmp_path, "ENSEMBLE_MEMBERS=frame|instance,part|all\nENSEMBLE_WEIGHTS=1,1,2\n"
                               "DROP_STEPS=2,4\nHFLIP=no\n")
    cfg = load_run_config("action_parser", path, environ={})
    assert cfg.members == (("frame",), ("instance", "part"), ("frame", "instance", "part", "state"))
    assert cfg.ensemble_weights == (1.0, 1.0, 2.0)
    assert cfg.hflip is False


def test_invalid_values_are_configuration_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config("detector", _env_file(tmp_path, "EPOCHS=many\n"), environ={})
    with pytest.raises(ConfigurationError):
        load_run_config("detector", environ={"DAP_OPTIMIZER": "lbfgs"})
    with pytest.raises(ConfigurationError):
        load_run_config("action_parser", environ={"DAP_FAMILIES": "frame,pose"})
    with pytest.raises(ConfigurationError):
        load_run_config("action_parser", environ={"DAP_ENSEMBLE_MEMBERS": "frame|part", "DAP_ENSEMBLE_WEIGHTS": "1"})
    with pytest.raises(ConfigurationError):
        load_run_config("pose", environ={})
    with pytest.raises(ConfigurationError):
        load_run_config("detector", str(tmp_path / "missing.env"), environ={})


def test_config_hash_tracks_architecture_only():
    base = load_run_config("part_parser", environ={})
    other_lr = load_run_config("part_parser", environ={"DAP_LR": "0.5", "DAP_EPOCHS": "1"})
    other_variant = load_run_config("part_parser", environ={"DAP_VARIANT": "shared"})
    assert len(base.config_hash(CONFIG)) == 16
    assert base.config_hash(CONFIG) == other_lr.config_hash(CONFIG)
    assert base.config_hash(CONFIG) != other_variant.config_hash(CONFIG)
    assert base.config_hash(CONFIG) != load_run_config("detector", environ={}).config_hash(CONFIG)


def test_checkpoint_round_trip_and_hash_check(tmp_path):
    module = nn.Linear(3, 2)
    path = str(tmp_path / "ckpt" / "detector.pt")
    save_checkpoint(path, Checkpoint(stage="detector", config_hash="abc", state={"detector": module.state_dict()},
                                     settings={"detector": {"num_actions": 3, "anchor_sizes": (28.0,)}}, epoch=2,
                                     metrics={"history": [{"l_det": 1.5, "lr": 0.02}]}))
    loaded = load_checkpoint(path, "detector", expected_hash="abc")
    assert loaded.epoch == 2
    assert loaded.metrics["history"][0]["l_det"] == 1.5
    assert torch.equal(loaded.state["detector"]["weight"], module.weight.detach())
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, "detector", expected_hash="xyz")
    assert load_checkpoint(path, "detector", expected_hash="xyz", allow_mismatch=True).config_hash == "abc"
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, "part_parser")
    with pytest.raises(DependencyError):
        load_checkpoint(str(tmp_path / "none.pt"), "detector")


def test_checkpoint_format_version_is_written_and_checked(tmp_path):
    checkpoint = Checkpoint(stage="detector", config_hash="abc", state={"detector": nn.Linear(3, 2).state_dict()},
                            settings={"detector": {"num_actions": 3}})
    path = str(tmp_path / "detector.pt")
    save_checkpoint(path, checkpoint)
    assert torch.load(path, weights_only=True)["format_version"] == FORMAT_VERSION

    future = str(tmp_path / "future.pt")
    torch.save({**checkpoint.to_dict(), "format_version": FORMAT_VERSION + 98}, future)
    with pytest.raises(ConfigurationError) as info:
        load_checkpoint(future, "detector")
    assert "format version" in str(info.value)


def test_foreign_and_corrupt_files_are_configuration_errors(tmp_path):
    foreign = tmp_path / "foreign.pt"
    torch.save({"weights": {}}, str(foreign))
    with pytest.raises(ConfigurationError) as info:
        load_checkpoint(str(foreign), "detector")
    assert str(foreign) in str(info.value)

    listed = tmp_path / "list.pt"
    torch.save([1, 2, 3], str(listed))
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(listed), "detector")

    corrupt = tmp_path / "corrupt.pt"
    corrupt.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ConfigurationError) as info:
        load_checkpoint(str(corrupt), "detector")
    assert str(corrupt) in str(info.value)


def test_module_checksum_follows_weights():
    torch.manual_seed(0)
    module = nn.Linear(3, 2)
    before = module_checksum(module)
    assert before == module_checksum(module)
    with torch.no_grad():
        module.bias.add_(1.0)
    assert module_checksum(module) != before


def test_feature_cache_hits_and_misses(tmp_path):
    cache = FeatureCache(str(tmp_path / "cache"))
    key = FeatureCache.key("v0", "abc", 8, 4, 1)
    assert key != FeatureCache.key("v0", "abc", 8, 4, 2)
    assert cache.load(key) is None
    cache.save(key, {"mask": np.ones((2, 3), dtype=bool)})
    arrays = cache.load(key)
    assert arrays["mask"].all() and arrays["mask"].shape == (2, 3)
    assert (cache.hits, cache.misses) == (1, 1)
    assert "1 hits, 1 misses" in cache.summary()
    assert not os.path.exists(os.path.join(cache.cache_dir, key + ".npz.tmp.npz"))


def test_disabled_cache_never_writes(tmp_path):
    cache = FeatureCache(None)
    cache.save("k", {"a": np.zeros(1)})
    assert cache.load("k") is None
    assert not cache.is_enabled()


def test_table_defaults_are_exposed():
    assert set(STAGE_DEFAULTS) == {"detector", "part_parser", "action_parser"}


def test_frame_store_reports_missing_frames(tmp_path):
    store = FrameStore(str(tmp_path / "frames"))
    with pytest.raises(ArgumentError) as info:
        store.frame("missing", 0)
    assert "missing" in str(info.value)
    store.save("v0", np.zeros((2, 4, 4, 3), dtype=np.uint8), indices=np.array([0, 5]))
    assert store.frame("v0", 5).shape == (4, 4, 3)
    with pytest.raises(ArgumentError):
        store.frame("v0", 1)
