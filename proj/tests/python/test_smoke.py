"""Smoke tests for the Python bindings."""

import math

import numpy as np
import pytest

import hybridvfl as hv


def test_version():
    assert hv.__version__


def test_communication_arithmetic_is_exact():
    assert hv.upstream_bytes_per_sample(400) == 6400
    assert hv.raw_image_bytes(100, 100) == 120000
    assert hv.reduction_ratio(100, 100, 400) == 18.75


def test_synthetic_dataset_shapes_and_determinism():
    a = hv.generate_synthetic(n=40, k=4, image_hw=8, tab_p=6, seed=3)
    b = hv.generate_synthetic(n=40, k=4, image_hw=8, tab_p=6, seed=3)
    assert a["images"].shape == (40, 3, 8, 8)
    assert a["tabular"].shape == (40, 6)
    assert a["labels"].shape == (40, 4)
    assert np.array_equal(a["images"], b["images"])
    assert np.array_equal(a["labels"], b["labels"])
    assert sorted(a["train_ids"] + a["val_ids"] + a["test_ids"]) == list(range(40))
    # labels are one-hot
    assert np.all(a["labels"].sum(axis=1) == 1.0)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(5, 7))
    p = hv.softmax(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0)


def test_attention_single_token_returns_values():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 1, 3))
    k = rng.normal(size=(2, 1, 3))
    v = rng.normal(size=(2, 1, 4))
    out = hv.attention(q, k, v)
    assert np.allclose(out, v, atol=1e-12)


def test_cosine_consistency_anchors():
    a = np.array([[1.0, 0.0]])
    assert hv.cosine_consistency(a, a) == pytest.approx(0.0, abs=1e-9)
    assert hv.cosine_consistency(a, np.array([[0.0, 1.0]])) == pytest.approx(1.0, abs=1e-9)
    assert hv.cosine_consistency(a, -a) == pytest.approx(2.0, abs=1e-9)


def test_cross_entropy_uniform_is_log_k():
    y_hat = np.full((2, 7), 1.0 / 7)
    y = np.zeros((2, 7))
    y[0, 3] = 1.0
    y[1, 0] = 1.0
    assert hv.cross_entropy(y_hat, y) == pytest.approx(math.log(7.0), abs=1e-9)


def test_gradient_check_is_tight():
    assert hv.gradient_check_softmax(3, 5, seed=7) < 1e-4


def test_encoders_emit_dual_outputs():
    rng = np.random.default_rng(2)
    z_inv, z_spec = hv.encode_tabular(rng.normal(size=(3, 6)), seed=1, d_e=16)
    assert z_inv.shape == (3, 16)
    assert z_spec.shape == (3, 16)
    assert not np.array_equal(z_inv, z_spec)


def test_wire_round_trip():
    rng = np.random.default_rng(3)
    z_inv = rng.normal(size=(2, 8)).astype(np.float32).astype(np.float64)
    z_spec = rng.normal(size=(2, 8)).astype(np.float32).astype(np.float64)
    raw = hv.serialize_embedding_upload(5, "image", [10, 11], z_inv, z_spec)
    msg = hv.parse_message(raw)
    assert msg["round"] == 5
    assert msg["sender"] == "ImageClient"
    assert msg["kind"] == "EmbeddingUpload"
    assert msg["ids"] == [10, 11]
    assert msg["payload_bytes"] == 2 * 2 * 8 * 4
    assert np.array_equal(msg["tensors"][0], z_inv)  # f32-clean values survive


def test_macro_metrics_match_a_hand_case():
    # two classes, one error each way
    report = hv.macro_metrics([0, 0, 1, 1], [0, 1, 1, 0], k=2)
    assert report["accuracy"] == pytest.approx(0.5)
    assert report["balanced_accuracy"] == pytest.approx(0.5)
    assert report["macro_recall"] == report["balanced_accuracy"]


def test_untrained_experiment_runs_and_reports(tmp_path):
    runs = hv.run_experiment(
        variant="HybridVFL", n=60, k=3, interaction_strength=0.5,
        epochs=0, batch=16, seeds=[0], out_dir=str(tmp_path),
    )
    assert len(runs) == 1
    r = runs[0]
    assert 0.0 <= r["balanced_accuracy"] <= 1.0
    assert r["initial_train_loss"] == r["final_train_loss"]
    assert (tmp_path / "HybridVFL_seed0" / "metrics.txt").exists()
    assert (tmp_path / "HybridVFL_seed0" / "transcript.log").exists()
    passed, violations = hv.audit_transcript(
        str(tmp_path / "HybridVFL_seed0" / "transcript.log")
    )
    assert passed and violations == []
