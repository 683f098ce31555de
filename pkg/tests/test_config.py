import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightlora.config import RunConfig, load_config
from weightlora.errors import ContractError

configs = st.builds(
    RunConfig,
    method=st.sampled_from(["lora", "wlora", "wlora+", "rlora", "full"]),
    k=st.integers(1, 6), t=st.integers(0, 50), total_steps=st.integers(51, 500),
    rank=st.integers(1, 8), expansion=st.sampled_from(["none", "gaussian", "qr"]),
    r_new=st.none() | st.integers(1, 32), lr=st.floats(1e-6, 1.0),
    lr_omega=st.none() | st.floats(0, 1), omega_every=st.none() | st.integers(1, 50),
    dropout_p=st.floats(0, 0.9), seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=5),
    outdir=st.none() | st.text("abc/_", min_size=1, max_size=8),
)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trips_through_json(cfg):
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


@settings(max_examples=50, deadline=None)
@given(configs, st.integers(0, 100))
def test_run_id_ignores_where_outputs_go(cfg, seed):
    moved = cfg.model_copy(update=dict(outdir="elsewhere", workers=3, seeds=[seed]))
    assert moved.run_id(seed) == cfg.run_id(seed)
    assert cfg.run_id(seed) != cfg.run_id(seed + 1)


def test_unknown_keys_are_named(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"method": "wlora", "learning_rate": 0.1}))
    with pytest.raises(ContractError, match="unknown key 'learning_rate'"):
        load_config(path)


def test_bad_values_name_the_key():
    with pytest.raises(ContractError, match="^method:"):
        load_config(method="dora")
    with pytest.raises(ContractError, match="^k:"):
        load_config(k="two")


def test_overrides_win_over_file_values(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"k": 3, "rank": 4, "lr": 0.01}))
    cfg = load_config(path, k=5, rank=None)
    assert (cfg.k, cfg.rank, cfg.lr) == (5, 4, 0.01)


def test_config_file_must_be_an_object(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("[1, 2]")
    with pytest.raises(ContractError):
        load_config(path)


@pytest.mark.parametrize("update,message", [
    ({"k": 0}, "k must be ≥ 1"), ({"rank": 0}, "rank"), ({"dropout_p": 1.0}, "dropout_p"),
    ({"workers": 0}, "workers"), ({"seeds": []}, "seeds"), ({"t": 700}, "t must"),
])
def test_check_rejects_invalid_settings(update, message):
    with pytest.raises(ContractError, match=message):
        RunConfig(**update).check()


def test_schedule_carries_every_training_field():
    cfg = RunConfig(k=3, t=10, total_steps=90, post_t_batch_size=128, omega_every=5,
                    expansion="qr", r_new=4, gate_after_freeze="train")
    s = cfg.schedule(7)
    assert (s.K, s.T, s.total_steps, s.seed) == (3, 10, 90, 7)
    assert (s.post_T_batch_size, s.omega_every, s.expansion, s.r_new) == (128, 5, "qr", 4)
    assert s.gate_after_freeze == "train"
