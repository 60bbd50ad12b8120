import json

import numpy as np
import pytest

from vmd.eval import (
    STUDENT_VARIANTS,
    TEACHER_VARIANTS,
    AblationSpec,
    check_trends,
    infer_branch,
    infer_student,
    run_ablation,
)
from vmd.metrics import METRIC_NAMES
from vmd.networks import ModelConfig, VmdModel
from vmd.synthdata import GeneratorSpec, generate
from vmd.tensor import ShapeError
from vmd.train import TrainConfig

CFG = ModelConfig(feature_dim=6, report_dim=4, hidden_dims=[5], expert_hidden_dims=[5], latent_dim=3)


def test_infer_student_mean_mode_is_deterministic():
    model = VmdModel.init(CFG, 3)
    x = np.random.default_rng(0).standard_normal((5, 6))
    a, b = infer_student(model, x), infer_student(model, x)
    assert a.probabilities.data.tobytes() == b.probabilities.data.tobytes()


def test_infer_student_sample_mode_needs_rng():
    model = VmdModel.init(CFG, 3)
    x = np.ones((2, 6))
    with pytest.raises(ValueError):
        infer_student(model, x, mode="sample")
    a = infer_student(model, x, "sample", np.random.default_rng(1))
    b = infer_student(model, x, "sample", np.random.default_rng(1))
    assert a.logits.data.tobytes() == b.logits.data.tobytes()


def test_infer_student_touches_no_teacher_or_expert():
    model = VmdModel.init(CFG, 3)
    model.reset_access_counts()
    infer_student(model, np.ones((4, 6)))
    counts = model.access_counts()
    assert counts["teacher_encoder"] == counts["teacher_head"] == 0
    assert counts["expert_encoder"] == counts["expert_head"] == counts["expert_classifier"] == 0
    assert counts["student_encoder"] > 0


def test_zero_classifier_gives_half():
    model = VmdModel.init(CFG, 3)
    for name, p in model.named_parameters().items():
        if name.startswith("shared_classifier"):
            p.data[...] = 0.0
    np.testing.assert_array_equal(infer_student(model, np.ones((2, 6))).probabilities.data, 0.5)


def test_infer_dim_mismatch():
    with pytest.raises(ShapeError):
        infer_branch(VmdModel.init(CFG, 3), "T", np.ones((2, 5)))


def test_variant_weights():
    by_name = {v.name: v for v in STUDENT_VARIANTS + TEACHER_VARIANTS}
    assert by_name["baseline"].weights.alpha == (0, 0, 0, 1)
    assert by_name["baseline"].weights.lam == (0, 1, 0)
    assert by_name["full VMD"].weights.alpha == (1, 1, 1, 1)
    assert by_name["w/o teacher"].weights.alpha == (0, 1, 0, 1)
    assert by_name["w/o expert"].weights.alpha == (1, 0, 0, 1)
    assert by_name["teacher"].branch == "teacher"
    assert by_name["teacher"].weights.alpha[2] > 0
    assert by_name["teacher w/o expert"].weights.alpha[2] == 0


def test_ablation_schema_and_refusal():
    data = generate(GeneratorSpec(n_samples=60, feature_dim=10, report_dim=4, signal_dims=3, mask_noise_dims=4))
    cfg = TrainConfig(epochs=2, batch_size=16, latent_dim=3, hidden_dims=[6], expert_hidden_dims=[5])
    spec = AblationSpec().select(["baseline", "w/o teacher", "w/o expert", "full VMD"])
    with pytest.raises(ValueError):
        run_ablation(spec, data, [0], cfg)
    res = run_ablation(spec, data, [0, 1], cfg)
    table = res.to_dict()
    assert [r["setting"] for r in table["rows"]] == ["baseline", "w/o teacher", "w/o expert", "full VMD"]
    assert table["columns"] == list(METRIC_NAMES)
    assert all(len(r["per_seed"]) == 2 for r in table["rows"])
    json.loads(res.to_json())
    text = res.to_text().splitlines()
    assert len(text) == 2 + 4 and text[0].startswith("Setting")
    assert len(check_trends(res)) == 5
    with pytest.raises(ValueError):
        AblationSpec().select(["nope"])
