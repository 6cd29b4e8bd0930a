import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from himix.decoder import ForwardTrace, LayerRecord, ModelConfig, forward, init_model
from himix.numkit import ShapeError
from himix.probe import cosine_profile, profile_csv


def make_trace(x_l, outs, x_v=None, vis_outs=None):
    layers = [LayerRecord(x_l, o, x_v, vo) for o, vo in zip(outs, vis_outs or [None] * len(outs))]
    return ForwardTrace("vanilla" if x_v is not None else "himix-dedicated", layers, outs[-1], x_l, x_v)


def cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


@pytest.mark.parametrize("variant", ["vanilla", "himix-dedicated"])
def test_zero_weight_layers_give_one(variant):
    cfg = ModelConfig(n_layers=3, d_model=8, d_vision=4, n_heads=2, vocab=5, variant=variant)
    model = init_model(cfg)
    for k in model.params:
        if k.startswith("layers.") and "norm" not in k:
            model.params[k] = np.zeros_like(model.params[k])
    r = np.random.default_rng(0)
    prof = cosine_profile(forward(model, r.standard_normal((5, 4)), r.standard_normal((3, 8))))
    np.testing.assert_allclose(prof.language, 1.0, atol=1e-12)
    if variant == "vanilla":
        np.testing.assert_allclose(prof.vision, 1.0, atol=1e-12)
    else:
        assert prof.vision is None


def test_negation_gives_minus_one(rng):
    x = rng.standard_normal((4, 6))
    prof = cosine_profile(make_trace(x, [-x, -2 * x]))
    np.testing.assert_allclose(prof.language, -1.0, atol=1e-15)


def test_hand_computed_cosines():
    x = np.array([[1.0, 0.0, 2.0], [0.5, -1.0, 1.0], [3.0, 1.0, 0.0]])
    y1 = np.array([[0.0, 1.0, 2.0], [1.0, 1.0, 1.0], [-1.0, 2.0, 0.5]])
    y2 = np.array([[2.0, 2.0, -1.0], [0.5, -1.0, 1.5], [1.0, 0.0, 1.0]])
    prof = cosine_profile(make_trace(x, [y1, y2]))
    for got, y in zip(prof.language, (y1, y2)):
        want = sum(cos(a, b) for a, b in zip(x.tolist(), y.tolist())) / 3
        assert abs(got - want) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_positive_scaling_is_invisible(seed, c):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((5, 4)), r.standard_normal((5, 4))
    a = cosine_profile(make_trace(x, [y])).language[0]
    b = cosine_profile(make_trace(x, [c * y])).language[0]
    assert abs(a - b) < 1e-12


def test_input_against_itself(rng):
    x = rng.standard_normal((4, 3))
    assert cosine_profile(make_trace(x, [x.copy()])).language == [1.0]


def test_values_in_range_and_length():
    cfg = ModelConfig(n_layers=4, d_model=8, d_vision=4, n_heads=2, vocab=5, variant="vanilla")
    r = np.random.default_rng(1)
    prof = cosine_profile(forward(init_model(cfg, std=0.5), r.standard_normal((6, 4)), r.standard_normal((3, 8))))
    assert prof.n_layers == 4 and len(prof.vision) == 4
    assert all(-1 <= v <= 1 for v in prof.language + prof.vision)


def test_zero_norm_rows_are_excluded(rng):
    x = rng.standard_normal((3, 4))
    y = x.copy()
    y[1] = 0.0
    prof = cosine_profile(make_trace(x, [y]))
    assert prof.language == [1.0]
    assert prof.excluded["language"] == [1]


def test_reference_shape_checked(rng):
    x = rng.standard_normal((3, 4))
    with pytest.raises(ShapeError):
        cosine_profile(make_trace(x, [x]), language_ref=np.ones((2, 4)))


def test_csv_layout(rng):
    x, v = rng.standard_normal((2, 4)), rng.standard_normal((3, 4))
    text = profile_csv(cosine_profile(make_trace(x, [x, x], v, [v, -v])))
    lines = text.strip().splitlines()
    assert lines[0] == "layer,modality,mean_cos,excluded_tokens"
    assert lines[1:] == ["1,language,1.0,0", "2,language,1.0,0", "1,vision,1.0,0", "2,vision,-1.0,0"]
