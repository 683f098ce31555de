import numpy as np
import pytest

from weightlora import tensor as T
from weightlora.adapters import AdapterState
from weightlora.catalog import get_catalog, load_catalog
from weightlora.diagnostics import count_catalog, count_trainable
from weightlora.errors import ContractError
from weightlora.models import ToyMLP, ToyTransformer, attach_adapters, detach_adapters
from weightlora.tasks import make_planted_task, parse_task_spec
from weightlora.trainer import TrainSchedule, run_method

from desk import desk_task
from oracles import gradcheck


def _randomize_b(model, seed=0):
    rng = np.random.default_rng(seed)
    for a in model.adapters.values():
        a.B.data[:] = 0.1 * rng.standard_normal(a.B.shape)


# -- toy models -----------------------------------------------------------------------
def test_mlp_slots_and_determinism():
    m1, m2 = ToyMLP(4, 8, seed=3), ToyMLP(4, 8, seed=3)
    x = np.random.default_rng(0).standard_normal((8, 5))
    assert m1.n_slots == 4 and m1.slot_names == ["layer0", "layer1", "layer2", "layer3"]
    assert np.array_equal(m1.forward(x).data, m2.forward(x).data)
    assert all(not W.requires_grad for W in m1.base_weights())


def test_transformer_forward_shape_and_slots():
    model = ToyTransformer(vocab=7, d_model=8, n_heads=2, seq_len=4, n_blocks=2, n_classes=3)
    tokens = np.random.default_rng(1).integers(0, 7, size=(5, 4))
    assert model.forward(tokens).shape == (3, 5)
    assert model.n_slots == 12 and model.slot_names[6] == "block1.query"
    with pytest.raises(ContractError):
        model.forward(tokens[:, :3])


def test_transformer_adapter_gradients_by_finite_differences():
    model = ToyTransformer(vocab=5, d_model=4, n_heads=2, seq_len=3, d_ff=6, n_classes=3, seed=2)
    # unit scale keeps attention scores moderate; at alpha/r = 32 the softmax saturates and
    # central differences themselves drift past 1e-6
    attach_adapters(model, [0, 2, 4], 1, gated=True, K=2, alpha=1.0, dropout_p=0.0, seed=0)
    rng = np.random.default_rng(3)
    tokens = rng.integers(0, 5, size=(2, 3))
    labels = rng.integers(0, 3, size=2)
    order = [model.adapters[s] for s in (0, 2, 4)]

    def loss(*params):
        for a, (A, B) in zip(order, zip(params[0:6:2], params[1:6:2])):
            a.A, a.B = A, B
        model.gates.omega = params[6]
        return T.cross_entropy(model.forward(tokens), labels)

    for _ in range(20):
        inputs = []
        for a in order:
            inputs += [rng.standard_normal(a.A.shape), 0.5 * rng.standard_normal(a.B.shape)]
        inputs.append(1.0 + 0.3 * rng.standard_normal(3))
        assert gradcheck(loss, inputs) <= 1e-6


# -- attaching adapters ------------------------------------------------------------------------
@pytest.mark.parametrize("make", [lambda: ToyMLP(5, 6, seed=4),
                                  lambda: ToyTransformer(d_model=8, n_heads=2, seq_len=4, seed=4)])
def test_unit_gates_match_ungated_model_bitwise(make):
    plain, gated = make(), make()
    slots = [0, 2, 3]
    attach_adapters(plain, slots, 2, seed=9)
    attach_adapters(gated, slots, 2, gated=True, K=1, seed=9)
    _randomize_b(plain)
    _randomize_b(gated)
    x = (np.random.default_rng(5).standard_normal((6, 4)) if isinstance(plain, ToyMLP)
         else np.random.default_rng(5).integers(0, 16, size=(3, 4)))
    assert np.array_equal(plain.forward(x).data, gated.forward(x).data)
    assert gated.gates.n == 3 and gated.gate_slots == slots


def test_zero_slots_leave_model_untouched():
    model = ToyMLP(3, 4, seed=0)
    x = np.ones((4, 2))
    before = model.forward(x).data
    assert attach_adapters(model, [], 4, gated=True) is model
    assert not model.adapters and model.gates is None
    assert np.array_equal(model.forward(x).data, before)


@pytest.mark.parametrize("slots", [[1, 1], [7], [-1]])
def test_invalid_slots_rejected(slots):
    with pytest.raises(ContractError):
        attach_adapters(ToyMLP(3, 4), slots, 1)


def test_slot_cannot_carry_two_adapters():
    model = attach_adapters(ToyMLP(3, 4), [0], 1)
    with pytest.raises(ContractError):
        attach_adapters(model, [0], 1)
    detach_adapters(model)
    attach_adapters(model, [0], 1)


def test_deberta_sized_adapter_set_counts_442368():
    rng = np.random.default_rng(0)
    adapters = [AdapterState.init(i, 768, 768, 8, rng=rng) for i in range(36)]
    cat = get_catalog("deberta-v3-base")
    result = count_trainable(adapters, cat)
    assert result.count == 442_368 == count_catalog(cat, 8).count
    assert result.percent == "0.24%"


# -- catalog ---------------------------------------------------------------------------------
def test_catalog_deberta_entry():
    cat = get_catalog("deberta-v3-base")
    slots = cat.slots()
    assert cat.total_params == 184_000_000 and len(slots) == 36
    assert all((s.d, s.k) == (768, 768) for s in slots)
    assert {s.projection for s in slots} == {"query", "key", "value"}
    assert len(cat.slots("all_attention")) == 72 and cat.inferred["all_attention"]
    assert not cat.inferred["self_attention"]


def test_catalog_errors():
    with pytest.raises(ContractError):
        get_catalog("gpt-17")
    with pytest.raises(ContractError):
        get_catalog("deberta-v3-base").slots("mlp")


def test_catalog_loads_from_an_explicit_file(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text('{"format": "weightlora-shape-catalog", "models": {"tiny": {"total_params": 10,'
                    ' "n_layers": 2, "groups": {"g": {"per_layer": [{"projection": "q", "d": 2,'
                    ' "k": 3}]}}}}}')
    cat = load_catalog(path)["tiny"]
    assert count_catalog(cat, 1).count == 10 and count_catalog(cat, 1).percent == "100%"


# -- planted tasks ---------------------------------------------------------------------------
def test_planted_task_regeneration_is_bit_identical():
    a, b = desk_task(3), desk_task(3)
    assert a.planted_slots == b.planted_slots
    for name in ("x_train", "y_train", "x_val", "y_val"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_planted_task_structure():
    task = desk_task(4)
    student, teacher = task.student(), task.teacher()
    for s in range(student.n_slots):
        diff = teacher.bases[s].W.data - student.bases[s].W.data
        if s in task.planted_slots:
            assert np.linalg.matrix_rank(diff, tol=1e-9) == task.rank_star
        else:
            assert not diff.any()
    assert np.allclose(teacher.forward(task.x_val).data, task.y_val)
    train_cols = {c.tobytes() for c in task.x_train.T}
    assert not any(c.tobytes() in train_cols for c in task.x_val.T)


def test_explicit_planted_slots_and_errors():
    task = make_planted_task(6, [1, 4], 2, seed=0)
    assert task.planted_slots == (1, 4)
    with pytest.raises(ContractError):
        make_planted_task(6, [], 2)
    with pytest.raises(ContractError):
        make_planted_task(6, [2, 2], 2)
    with pytest.raises(ContractError):
        make_planted_task(6, 2, 0)


def test_adapters_on_planted_slots_reach_a_tenth_of_baseline():
    for seed in range(3):
        task = desk_task(seed)
        schedule = TrainSchedule(K=2, T=1, total_steps=2000, batch_size=64, lr=2e-3,
                                 warmup_steps=20, seed=seed)
        report, _ = run_method(task, "lora", schedule, 2, slots=task.planted_slots)
        assert report.final_val_loss <= 0.1 * task.baseline_loss()


def test_all_layers_planted_is_solved_by_full_lora():
    task = make_planted_task(6, list(range(6)), 2, seed=1)
    schedule = TrainSchedule(K=6, T=1, total_steps=2000, batch_size=64, lr=2e-3,
                             warmup_steps=20, seed=1)
    report, _ = run_method(task, "lora", schedule, 2)
    assert report.final_val_loss <= 0.1 * task.baseline_loss()


def test_task_spec_parsing():
    task = parse_task_spec("planted:n6k2", seed=0)
    assert task.kind == "regression" and len(task.planted_slots) == 2
    cls = parse_task_spec("planted:n5k1r1c3", seed=2, n_train=64, n_val=32)
    assert cls.kind == "classification" and cls.rank_star == 1 and cls.y_train.shape == (64,)
    assert set(np.unique(cls.y_train)) <= {0, 1, 2}
    for bad in ("planted:n6", "planted:n2k3", "random:n6k2", "planted:n6k0"):
        with pytest.raises(ContractError):
            parse_task_spec(bad)


def test_transformer_task_and_columnar_export(tmp_path):
    task = make_planted_task(arch="transformer", kind="classification", seed=0, n_train=32,
                             n_val=16)
    assert task.x_train.shape == (32, 8) and task.n_val == 16
    path = tmp_path / "task.csv"
    task.to_columns(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# kind=classification") and lines[1].startswith("split,x0")
    assert len(lines) == 2 + 48 and lines[2].startswith("train,")
    with pytest.raises(ContractError):
        make_planted_task(arch="transformer", kind="regression")
