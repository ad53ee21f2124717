import pytest
from pydantic import ValidationError

from config import RunConfig, load_config


def test_defaults_are_valid():
    config = RunConfig()
    assert config.ablation_label == "both"
    assert config.timesteps == 200
    assert config.n_max == 16


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError, match="learning_rate"):
        RunConfig(learning_rate=0.1)


def test_out_of_range_values_are_rejected():
    with pytest.raises(ValidationError, match="train_size"):
        RunConfig(train_size=0)
    with pytest.raises(ValidationError, match="probe_gate"):
        RunConfig(probe_gate=1.5)


@pytest.mark.parametrize(
    "overrides, message",
    [
        (dict(text_dim=10, text_heads=4), "divisible"),
        (dict(lora_rank=128), "lora_rank"),
        (dict(beta_start=0.05, beta_end=0.02), "beta_start"),
        (dict(timesteps=10, sample_steps=20), "sample_steps"),
        (dict(unet_channels=12), "multiple of 8"),
    ],
)
def test_cross_field_checks(overrides, message):
    with pytest.raises(ValidationError, match=message):
        RunConfig(**overrides)


@pytest.mark.parametrize(
    "use_vt, use_vv, label",
    [(False, False, "none"), (True, False, "vt"), (False, True, "vv"), (True, True, "both")],
)
def test_ablation_label(use_vt, use_vv, label):
    assert RunConfig(use_vt=use_vt, use_vv=use_vv).ablation_label == label


def test_config_is_frozen():
    with pytest.raises(ValidationError):
        RunConfig().seed = 3


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("SEED=5\nTEXT_STEPS=10\nuse_vv=false\nALPHA=0.5\n")
    config = load_config(path)
    assert config.seed == 5
    assert config.text_steps == 10
    assert config.use_vv is False
    assert config.alpha == 0.5


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("SEED=5\nOUTPUT_DIR=runs/a\n")
    config = load_config(path, seed=9, output_dir=None)
    assert config.seed == 9
    assert config.output_dir == "runs/a"


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.env")
    path = tmp_path / "bad.env"
    path.write_text("NOT_A_KEY=1\n")
    with pytest.raises(ValidationError):
        load_config(path)


def test_with_overrides_revalidates():
    config = RunConfig()
    assert config.with_overrides(alpha=2.0, seed=None).alpha == 2.0
    assert config.with_overrides(seed=None).seed == config.seed
    with pytest.raises(ValidationError):
        config.with_overrides(sample_steps=1000)


def test_fingerprint_tracks_only_named_fields():
    config = RunConfig()
    fields = ("seed", "alpha")
    assert config.fingerprint(fields) == RunConfig().fingerprint(("alpha", "seed"))
    assert config.fingerprint(fields) == config.with_overrides(workers=4).fingerprint(fields)
    assert config.fingerprint(fields) != config.with_overrides(alpha=0.5).fingerprint(fields)
    assert len(config.fingerprint(fields)) == 16
