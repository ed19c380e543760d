import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from cctprobe.architecture import get_preset
from cctprobe.data import AugmentConfig
from cctprobe.errors import ChecksumError, ConfigurationError, InputError, NumericError
from cctprobe.model import build_model, model_hash
from cctprobe.trainer import (AdamWState, Checkpoint, OptimizerConfig, Schedule, Trainer, accuracy,
                              adamw_step, load_checkpoint, save_checkpoint, schedule_value,
                              soft_target_cross_entropy, train)

from conftest import DESK_OPT, tiny_spec
from oracles import central_difference


def test_cross_entropy_of_uniform_logits_is_log_l():
    logits = torch.zeros(3, 100)
    targets = torch.nn.functional.one_hot(torch.tensor([0, 50, 99]), 100).float()
    assert math.isclose(float(soft_target_cross_entropy(logits, targets)), math.log(100), rel_tol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), labels=st.integers(2, 20))
def test_cross_entropy_equals_entropy_when_logits_are_log_targets(seed, labels):
    g = torch.Generator().manual_seed(seed)
    t = torch.softmax(torch.randn(4, labels, generator=g, dtype=torch.float64), -1)
    entropy = float(-(t * t.log()).sum(-1).mean())
    assert math.isclose(float(soft_target_cross_entropy(t.log(), t)), entropy, abs_tol=1e-10)


def test_cross_entropy_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(5, 7, generator=g, dtype=torch.float64, requires_grad=True)
    t = torch.softmax(torch.randn(5, 7, generator=g, dtype=torch.float64), -1)
    soft_target_cross_entropy(z, t).backward()
    fd = central_difference(lambda: soft_target_cross_entropy(z.detach(), t), z.data)
    assert torch.allclose(z.grad, fd, atol=1e-6)
    assert torch.allclose(z.grad, (torch.softmax(z, -1) - t).detach() / 5, atol=1e-12)


def test_cross_entropy_rejects_non_finite_logits():
    with pytest.raises(NumericError):
        soft_target_cross_entropy(torch.tensor([[float("nan"), 0.0]]), torch.tensor([[1.0, 0.0]]))


def _cfg(**kw):
    return OptimizerConfig(**kw)


def test_zero_gradients_without_decay_leave_parameters_fixed():
    p = {"w": torch.randn(4, 3)}
    before = p["w"].clone()
    state = AdamWState()
    for _ in range(10):
        adamw_step(p, {"w": torch.zeros(4, 3)}, state, _cfg(), lr=1e-2, weight_decay=0.0)
    assert torch.equal(p["w"], before)


def test_zero_gradients_decay_geometrically():
    p = {"w": torch.ones(3, dtype=torch.float64)}
    state = AdamWState()
    lr, wd, k = 1e-2, 0.5, 25
    for _ in range(k):
        adamw_step(p, {"w": torch.zeros(3, dtype=torch.float64)}, state, _cfg(), lr, wd)
    assert torch.allclose(p["w"], torch.full((3,), (1 - lr * wd) ** k, dtype=torch.float64),
                          rtol=1e-12)


def test_scalar_quadratic_converges():
    p = {"x": torch.tensor([5.0], dtype=torch.float64)}
    state = AdamWState()
    for step in range(2000):
        x = p["x"]
        adamw_step(p, {"x": 2 * (x - 1.5)}, state, _cfg(), lr=1e-2, weight_decay=0.0)
        if abs(float(p["x"]) - 1.5) < 1e-3:
            break
    assert abs(float(p["x"]) - 1.5) < 1e-3
    assert step < 2000


@pytest.mark.parametrize("wd", [0.0, 6e-2])
def test_matches_torch_adamw(wd):
    g = torch.Generator().manual_seed(0)
    w0 = torch.randn(6, 4, generator=g, dtype=torch.float64)
    grads = [torch.randn(6, 4, generator=g, dtype=torch.float64) for _ in range(20)]
    ours = {"w": w0.clone()}
    ref = torch.nn.Parameter(w0.clone())
    opt_cls = torch.optim.Adam if wd == 0 else torch.optim.AdamW
    opt = opt_cls([ref], lr=3e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    state = AdamWState()
    for grad in grads:
        adamw_step(ours, {"w": grad}, state, _cfg(), 3e-3, wd)
        ref.grad = grad.clone()
        opt.step()
    assert torch.allclose(ours["w"], ref.detach(), rtol=1e-10, atol=1e-12)


def test_non_finite_gradient_names_tensor():
    with pytest.raises(NumericError, match="blocks.0.wq"):
        adamw_step({"blocks.0.wq": torch.zeros(2)}, {"blocks.0.wq": torch.tensor([1.0, float("inf")])},
                   AdamWState(), _cfg(), 1e-3, 0.0)


def test_linear_schedule_example():
    s = Schedule.linear(0.78, 10)
    assert math.isclose(schedule_value(s, 25, 100, 1e-3), 6.084e-4, rel_tol=1e-12)
    assert Schedule.parse("linear:0.78,10") == s


@given(total=st.integers(1, 200), step=st.integers(1, 30), q=st.floats(0.05, 0.99))
def test_linear_schedule_plateaus(total, step, q):
    s = Schedule.linear(q, step)
    values = [schedule_value(s, e, total, 1.0) for e in range(total)]
    assert len(set(values)) == math.ceil(total / step)
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_cosine_schedule_endpoints():
    s = Schedule("cosine")
    assert schedule_value(s, 0, 50, 6e-4) == 6e-4
    assert math.isclose(schedule_value(s, 25, 50, 6e-4), 3e-4, rel_tol=1e-12)
    assert abs(schedule_value(s, 50, 50, 6e-4)) < 1e-18


def test_config_validation_names_field():
    with pytest.raises(ConfigurationError) as err:
        OptimizerConfig(lr=0.0)
    assert err.value.field == "lr"
    with pytest.raises(ConfigurationError):
        Schedule.parse("step:3")


def _tiny_data(n=20, labels=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, 8, 8, generator=g), torch.arange(n) % labels


def test_freeze_mask_leaves_frozen_tensors_bitwise():
    model = build_model(tiny_spec(), seed=0)
    frozen = [n for n, _ in model.named_parameters() if not n.startswith("classifier")]
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    x, y = _tiny_data()
    Trainer(model, DESK_OPT.replace(epochs=2), x, y, 5, freeze=frozen).fit()
    after = dict(model.named_parameters())
    assert all(torch.equal(before[n], after[n]) for n in frozen)
    assert not torch.equal(before["classifier.weight"], after["classifier.weight"])


def test_freezing_everything_is_rejected():
    model = build_model(tiny_spec())
    x, y = _tiny_data()
    with pytest.raises(ConfigurationError):
        Trainer(model, DESK_OPT, x, y, 5, freeze=[n for n, _ in model.named_parameters()])
    with pytest.raises(ConfigurationError):
        Trainer(model, DESK_OPT, x, y, 5, freeze=["no.such.tensor"])


def test_accuracy_on_empty_set():
    with pytest.raises(InputError):
        accuracy(build_model(tiny_spec()), torch.empty(0, 3, 8, 8), torch.empty(0, dtype=torch.long))


def test_trained_tiny_model_fits_training_set(trained_tiny, tiny_data):
    train_ds, _ = tiny_data
    model, history = trained_tiny
    assert accuracy(model, train_ds.images, train_ds.labels) >= 0.99
    assert history[-1]["loss"] < history[0]["loss"]


def test_strict_runs_are_bit_identical():
    x, y = _tiny_data()
    hashes = []
    for _ in range(2):
        model = build_model(tiny_spec(), seed=3)
        Trainer(model, DESK_OPT.replace(epochs=3, strict=True), x, y, 5).fit()
        hashes.append(model_hash(model))
    assert hashes[0] == hashes[1]


def _trainer(epochs=4, seed=7):
    x, y = _tiny_data()
    model = build_model(tiny_spec(), seed=seed)
    cfg = DESK_OPT.replace(epochs=epochs, batch_size=8, strict=True,
                           augment=AugmentConfig())
    return Trainer(model, cfg, x, y, 5)


def test_checkpoint_bytes_are_stable(tmp_path):
    trainer = _trainer()
    trainer.fit(2)
    save_checkpoint(trainer.checkpoint(), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    straight = _trainer()
    straight.fit()
    first = _trainer()
    first.fit(2)
    save_checkpoint(first.checkpoint(), tmp_path / "mid.ckpt")
    resumed = _trainer(seed=99)          # different init: everything must come from the file
    resumed.restore(load_checkpoint(tmp_path / "mid.ckpt"))
    resumed.fit()
    assert model_hash(resumed.module) == model_hash(straight.module)
    assert repr(resumed.history) == repr(straight.history)


def test_checkpoint_for_other_architecture_is_rejected(tmp_path):
    trainer = _trainer(epochs=1)
    trainer.fit()
    save_checkpoint(trainer.checkpoint(), tmp_path / "x.ckpt")
    ckpt = load_checkpoint(tmp_path / "x.ckpt")
    assert ckpt.spec == tiny_spec()
    with pytest.raises(InputError):
        ckpt.restore_params(build_model(tiny_spec(dim=32, conv_channels=(32,))))
    with pytest.raises(InputError):
        ckpt.restore_params(build_model(get_preset("cct-1/3x1-tiny")))


def test_corrupt_checkpoint_is_detected(tmp_path):
    trainer = _trainer(epochs=1)
    path = tmp_path / "x.ckpt"
    save_checkpoint(trainer.checkpoint(), path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_unknown_format_version_is_rejected(tmp_path):
    trainer = _trainer(epochs=1)
    ckpt = trainer.checkpoint()
    ckpt.version = 2
    save_checkpoint(ckpt, tmp_path / "v2.ckpt")
    with pytest.raises(ChecksumError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_train_wrapper_returns_history(tiny_data):
    train_ds, val_ds = tiny_data
    model = build_model(get_preset("cct-1/3x1-tiny"), seed=0)
    _, history = train(model, train_ds, DESK_OPT.replace(epochs=2), validation=val_ds)
    assert [r["epoch"] for r in history] == [0, 1]
    assert 0.0 <= history[-1]["val_acc"] <= 1.0


def test_checkpoint_build_model_round_trip(tmp_path):
    model = build_model(tiny_spec(), seed=11)
    ckpt = Checkpoint(model.spec, {n: p.detach().clone() for n, p in model.named_parameters()},
                      meta={"seed": 11, "epoch": 0, "step": 0})
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    assert model_hash(load_checkpoint(tmp_path / "m.ckpt").build_model()) == model_hash(model)
