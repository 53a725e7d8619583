import pytest

from disp.budget import total_params
from disp.config import Settings, load_config_file, resolve_settings
from disp.errors import ConfigError, UsageError


def test_defaults():
    s = resolve_settings({}, environ={})
    assert s.target_ratio == 0.5 and s.lambda_ == 6.0 and s.gate_bias == 3.0 and s.tau == 1.0
    assert s.model_path.name == "dense.ckpt"
    budget = s.budget(s.model_spec())
    assert budget.t_total == total_params(s.model_spec())


def test_precedence_env_then_file_then_flags(tmp_path):
    cfg = tmp_path / "run.env"
    cfg.write_text("seed=5\ntarget-ratio=0.3\nlambda=8\n")
    env = {"DISP_SEED": "1", "DISP_OUT": "from-env"}

    s = resolve_settings({}, environ=env)
    assert s.seed == 1 and s.out == "from-env"

    s = resolve_settings({}, config_file=str(cfg), environ=env)
    assert s.seed == 5 and s.out == "from-env"
    assert s.target_ratio == 0.3 and s.lambda_ == 8.0

    s = resolve_settings({"seed": 9, "lambda_": None, "target_ratio": 0.7}, config_file=str(cfg), environ=env)
    assert s.seed == 9 and s.target_ratio == 0.7 and s.lambda_ == 8.0


def test_unknown_key_is_rejected(tmp_path):
    cfg = tmp_path / "bad.env"
    cfg.write_text("warmup=10\n")
    with pytest.raises(ConfigError):
        resolve_settings({}, config_file=str(cfg), environ={})


def test_invalid_value_is_a_config_error():
    with pytest.raises(ConfigError):
        resolve_settings({"seq_len": 128, "max_seq_len": 64}, environ={}).pretrain_config()
    with pytest.raises(ConfigError):
        resolve_settings({"gate_param": "transformer"}, environ={})
    with pytest.raises(ConfigError):
        resolve_settings({"tau": 0.0}, environ={}).reinmax_config()
    with pytest.raises(ConfigError):
        resolve_settings({"target_ratio": 1.5}, environ={}).budget(Settings().model_spec())


def test_missing_config_file():
    with pytest.raises(UsageError):
        load_config_file("/nonexistent/run.env")


def test_list_settings():
    s = resolve_settings({"seeds": "0, 1,2", "lambdas": "4,6"}, environ={})
    assert s.int_list("seeds") == [0, 1, 2]
    assert s.float_list("lambdas") == [4.0, 6.0]
    with pytest.raises(UsageError):
        Settings(seeds="").int_list("seeds")


def test_builders_carry_the_values():
    s = resolve_settings({"mode": "no-gru", "iterations": 7, "d": 32, "n_heads": 2, "seed": 3}, environ={})
    assert s.train_config().gate_param == "no-gru"
    assert s.train_config().iterations == 7
    assert s.model_spec().d == 32
    assert s.reinmax_config().rng_seed == 3


def test_search_windows_are_not_bound_by_the_default_architecture():
    s = resolve_settings({"seq_len": 128}, environ={})
    assert s.train_config().seq_len == 128
    assert s.max_seq_len == 64


def test_gate_param_reaches_the_train_config():
    s = resolve_settings({"mode": "constrained", "gate_param": "no-gru", "resume": True}, environ={})
    cfg = s.train_config()
    assert cfg.gate_param == "no-gru" and cfg.tied
    assert s.resume
