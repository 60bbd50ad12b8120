import math

import numpy as np
import pytest

from vmd.losses import LossWeights
from vmd.networks import STUDENT, TEACHER, CheckpointError, ModelConfig, VmdModel
from vmd.synthdata import GeneratorSpec, generate
from vmd.tensor import Tensor
from vmd.train import (
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    build_model,
    load_config,
    restore,
    run_training,
    train_student_ce,
)

SPEC = GeneratorSpec(n_samples=48, feature_dim=10, report_dim=4, signal_dims=3, mask_noise_dims=4, seed=1)
DATA = generate(SPEC)


def small_cfg(**kw):
    base = dict(epochs=3, batch_size=8, latent_dim=3, hidden_dims=[6], expert_hidden_dims=[5], seed=2)
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(model):
    return {k: v.data.tobytes() for k, v in model.named_parameters().items()}


def test_adam_first_step_by_hand():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -0.1, 0.0])
    lr, wd = 0.01, 0.1
    adam_step({"p": p}, AdamState(), lr, wd)
    # t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    x0 = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.1, 0.0])
    expected = x0 * (1 - lr * wd) - lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_second_step_by_hand():
    p = Tensor(np.array([0.4]), requires_grad=True)
    st = AdamState()
    g1, g2, lr = 0.2, -0.5, 0.1
    p.grad = np.array([g1])
    adam_step({"p": p}, st, lr, 0.0)
    p.grad = np.array([g2])
    adam_step({"p": p}, st, lr, 0.0)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    step2 = lr * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    expected = 0.4 - lr * g1 / (abs(g1) + 1e-8) - step2
    assert abs(p.data[0] - expected) <= 1e-15


def test_zero_grad_only_decays():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(), 0.1, 0.5)
    np.testing.assert_array_equal(p.data, np.array([2.0, -4.0]) * (1 - 0.05))


def test_none_grad_is_skipped():
    p = Tensor(np.array([2.0]), requires_grad=True)
    st = AdamState()
    adam_step({"p": p}, st, 0.1, 0.5)
    assert p.data[0] == 2.0 and "p" not in st.m


def test_config_invariants_and_paper_scale():
    for kw in ({"epochs": 0}, {"lr": 0.0}, {"batch_size": 1}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.weight_decay) == (100, 16, 5e-4, 1e-4)
    paper = cfg.paper_scale()
    assert paper.epochs == 400 and paper.latent_dim == 512
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})


def test_load_config(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        "[train]\nepochs = 7\nlr = 0.001\n\n[model]\nlatent_dim = 5\n\n"
        "[weights]\nalpha = [0, 1, 0, 1]\nlambda = [1, 1, 1]\ntau = 0.25\n"
    )
    cfg = load_config(path)
    assert cfg.epochs == 7 and cfg.lr == 0.001 and cfg.latent_dim == 5
    assert cfg.weights.alpha == (0, 1, 0, 1) and cfg.weights.tau == 0.25


def test_one_step_changes_every_trained_parameter():
    cfg = small_cfg(epochs=1, batch_size=48)
    model = build_model(cfg, DATA)
    before = params_bytes(model)
    _, log = run_training(model, DATA, cfg)
    assert log.entries[0]["steps"] == 1
    after = params_bytes(model)
    assert all(before[k] != after[k] for k in before)


def test_loss_decreases_on_moving_average():
    cfg = small_cfg(epochs=10, lr=5e-3)
    _, log = run_training(build_model(cfg, DATA), DATA, cfg)
    totals = np.array([e["loss"]["total"] for e in log.entries])
    ma = np.convolve(totals, np.ones(3) / 3, mode="valid")
    assert ma[-1] < ma[0]


def test_log_entries_and_validation(tmp_path):
    cfg = small_cfg(epochs=4, eval_every=2)
    log_path = tmp_path / "log.jsonl"
    _, log = run_training(build_model(cfg, DATA), DATA, cfg, list(range(36)), list(range(36, 48)), log_path=log_path)
    assert [e["epoch"] for e in log.entries] == [1, 2, 3, 4]
    assert log.entries[0]["val"] is None and log.entries[1]["val"]["n"] == 12
    assert set(log.entries[0]["loss"]) >= {"total", "I_ST", "I_SE", "I_TE", "H_cls"}
    assert len(log_path.read_text().splitlines()) == 4


def test_training_is_deterministic(tmp_path):
    cfg_a = small_cfg(checkpoint_dir=str(tmp_path / "a"))
    cfg_b = small_cfg(checkpoint_dir=str(tmp_path / "b"))
    _, log_a = run_training(build_model(cfg_a, DATA), DATA, cfg_a)
    _, log_b = run_training(build_model(cfg_b, DATA), DATA, cfg_b)
    assert log_a.deterministic_view() == log_b.deterministic_view()
    a = (tmp_path / "a" / "final.vmdckpt").read_bytes()
    b = (tmp_path / "b" / "final.vmdckpt").read_bytes()
    assert a == b


def test_resume_matches_uninterrupted(tmp_path):
    full = small_cfg(epochs=10)
    ref, ref_log = run_training(build_model(full, DATA), DATA, full)

    first = small_cfg(epochs=5, checkpoint_dir=str(tmp_path))
    model, _ = run_training(build_model(first, DATA), DATA, first)
    state = restore(tmp_path / "final.vmdckpt")
    assert state.epoch == 5
    resumed, log = run_training(state.model, DATA, full, state=state)
    assert params_bytes(resumed) == params_bytes(ref)
    assert log.deterministic_view() == ref_log.deterministic_view()


def test_restore_rejects_mismatched_dims(tmp_path):
    cfg = small_cfg(epochs=1, checkpoint_dir=str(tmp_path))
    run_training(build_model(cfg, DATA), DATA, cfg)
    other = ModelConfig(feature_dim=11, report_dim=4, hidden_dims=[6], expert_hidden_dims=[5], latent_dim=3)
    with pytest.raises(CheckpointError):
        restore(tmp_path / "final.vmdckpt", other)


def test_data_dims_must_match_model():
    cfg = small_cfg()
    model = VmdModel.init(cfg.model_config(9, 4), 0)
    with pytest.raises(ValueError, match="dims"):
        run_training(model, DATA, cfg)


def test_nan_aborts_with_term_name():
    cfg = small_cfg(epochs=1)
    model = build_model(cfg, DATA)
    model.classifier(STUDENT).weight.data[...] = np.nan
    with pytest.raises(NonFiniteLossError, match="loss term"):
        run_training(model, DATA, cfg)


def test_shared_head_after_every_step():
    cfg = small_cfg(epochs=2)
    model = build_model(cfg, DATA)
    seen = []

    def check(state):
        s, t = state.model.classifier(STUDENT), state.model.classifier(TEACHER)
        seen.append(s is t and s.weight.data.tobytes() == t.weight.data.tobytes())

    run_training(model, DATA, cfg, on_step=check)
    assert seen and all(seen)


def test_baseline_reduces_to_plain_ce():
    w = LossWeights(alpha=(0, 0, 0, 1), lam=(0, 1, 0))
    cfg = small_cfg(epochs=3, weights=w)
    a, _ = run_training(build_model(cfg, DATA), DATA, cfg)
    b = train_student_ce(build_model(cfg, DATA), DATA, cfg)
    student = [k for k in params_bytes(a) if k.startswith(("student_", "shared_"))]
    assert student
    pa, pb = params_bytes(a), params_bytes(b)
    assert all(pa[k] == pb[k] for k in student)
