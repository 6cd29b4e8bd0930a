import json

import numpy as np
import pytest

from himix import numkit as nk
from himix.cli import _task_model
from himix.trainer import (
    TrainingDiverged,
    accuracy,
    evaluate,
    gen_task,
    predict,
    train,
)


def model_for(variant="himix-dedicated", seed=0):
    return _task_model(variant, seed, d_model=64, layers=2, n_patches=8, n_classes=4, d_vision=32)


@pytest.fixture(scope="module")
def heldout():
    return gen_task(7919, 8, 4, 500)


# --- task ---------------------------------------------------------------------------

def test_same_seed_same_task():
    a, b = gen_task(3, 8, 4, 50), gen_task(3, 8, 4, 50)
    for f in ("patches", "tokens", "labels", "query_index"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert gen_task(4, 8, 4, 50).patches.tobytes() != a.patches.tobytes()


def test_classes_are_balanced():
    counts = np.bincount(gen_task(0, 8, 4, 1000).labels, minlength=4)
    assert all(abs(c - 250) <= 1 for c in counts)
    odd = np.bincount(gen_task(0, 8, 3, 1000).labels, minlength=3)
    assert odd.max() - odd.min() <= 1


def test_label_is_the_queried_patch_class():
    t = gen_task(1, 8, 4, 200)
    block = t.patches[np.arange(200), t.query_index, 8:12]
    np.testing.assert_array_equal(block.argmax(-1), t.labels)
    np.testing.assert_array_equal(t.tokens[:, 1], t.query_index)
    assert (t.tokens[:, 0] == t.separator).all()
    np.testing.assert_allclose(np.linalg.norm(t.patches, axis=-1), 1.0)


def test_linear_probe_reads_class_perfectly():
    t = gen_task(2, 8, 4, 1000)
    x = t.patches[np.arange(len(t)), t.query_index]
    y = np.eye(4)[t.labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert accuracy((x @ w).argmax(-1), t.labels) == 1.0


@pytest.mark.parametrize("args", [(0, 8, 1, 10), (0, 0, 4, 10), (0, 8, 4, 0), (0, 30, 4, 10)])
def test_degenerate_sizes_rejected(args):
    with pytest.raises(ValueError):
        gen_task(*args)


# --- evaluation ----------------------------------------------------------------------

def test_fresh_models_are_near_chance(heldout):
    accs = [evaluate(model_for(seed=s), heldout) for s in range(10)]
    assert all(0.10 <= a <= 0.45 for a in accs)


def test_oracle_labels_score_one(heldout):
    assert accuracy(heldout.labels, heldout.labels) == 1.0


def test_evaluate_has_no_side_effects(heldout):
    m = model_for()
    before = {k: v.copy() for k, v in m.params.items()}
    a = predict(m, heldout)
    b = predict(m, heldout)
    assert a.tobytes() == b.tobytes()
    assert all(before[k].tobytes() == m.params[k].tobytes() for k in before)


# --- training loop -------------------------------------------------------------------

def test_zero_learning_rate_keeps_loss_constant():
    t = gen_task(0, 8, 4, 96)
    m = model_for()
    r = train(m, t, epochs=3, lr=0.0, optimizer="sgd")
    assert len(r.losses) == 3 and r.steps == 9
    assert max(r.losses) - min(r.losses) < 1e-6


def test_training_is_deterministic():
    t = gen_task(0, 8, 4, 64)
    a, b = model_for(), model_for()
    ra, rb = train(a, t, epochs=2), train(b, t, epochs=2)
    assert ra.losses == rb.losses
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_loss_stays_finite_at_high_rate(optimizer):
    for seed in range(10):
        r = train(model_for(seed=seed), gen_task(seed, 8, 4, 320), epochs=1, lr=1e-2, optimizer=optimizer)
        assert np.isfinite(r.losses).all()
        assert all(0.0 <= a <= 1.0 for a in r.accuracies)


def test_divergence_reports_step(monkeypatch):
    real = nk.cross_entropy
    calls = []

    def flaky(z, labels):
        calls.append(1)
        out = real(z, labels)
        return nk.scale(out, float("nan")) if len(calls) == 4 else out

    monkeypatch.setattr(nk, "cross_entropy", flaky)
    with pytest.raises(TrainingDiverged) as err:
        train(model_for(), gen_task(0, 8, 4, 320), epochs=1)
    assert err.value.step == 3


def test_vocab_mismatch():
    with pytest.raises(ValueError):
        train(model_for(), gen_task(0, 8, 5, 10), epochs=1)


def test_report_serialises():
    r = train(model_for(), gen_task(0, 8, 4, 32), epochs=1)
    data = json.loads(r.to_json())
    assert data["seed"] == 0 and data["config"]["variant"] == "himix-dedicated"
    assert data["final_accuracy"] is None


@pytest.mark.parametrize("variant", ["himix-dedicated", "vanilla"])
def test_reference_task_is_learned(variant, heldout):
    m = model_for(variant)
    r = train(m, gen_task(0, 8, 4, 2000), heldout=heldout)
    assert r.final_accuracy >= 0.90
    if variant == "himix-dedicated":
        assert evaluate(m, heldout, zero_vision=True) <= 0.35
