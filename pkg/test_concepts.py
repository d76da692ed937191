#!/usr/bin/env python3
"""
Tests for concept modules, the concept-alignment loss, the modulator and
block-wise refinement
"""

import numpy as np
import pytest

from unlearning.concepts import (
    ConceptModule,
    ConceptRegistry,
    ModulatorState,
    concept_activations,
    concept_alignment_loss,
    expand_weights,
    modulator_backward,
    modulator_forward,
    modulator_loss,
    param_name,
    refine,
    refine_batch,
    uniform_weights,
)
from unlearning.errors import LabelError, ParameterError, RegistryError, ShapeError
from unlearning.numerics import finite_diff_check, make_rng


def _registry(dim=5, sizes=(2, 3)):
    registry = ConceptRegistry(dim)
    for i, n in enumerate(sizes):
        registry.add_category(f"c{i}", n, seed=0, init_scale=0.5)
    return registry


def test_registry_block_layout_follows_registration_order():
    registry = _registry(sizes=(2, 3, 1))
    index = registry.block_index("img")
    assert list(index) == ["c0", "c1", "c2"]
    assert index["c1"] == slice(2, 5)
    assert registry.width("txt") == 6
    assert registry.block_sizes("img") == [2, 3, 1]
    with pytest.raises(RegistryError):
        registry.add_category("c1", 3, seed=0, init_scale=0.5)


def test_registry_forward_concatenates_module_outputs():
    registry = _registry()
    x = make_rng(0, "test", "x").standard_normal(5)
    batch = registry.forward("img", np.vstack([x, x]))
    modules = registry.ordered("img")
    single = concept_activations(modules, x)
    assert np.allclose(batch[0], single.values)
    assert np.allclose(single.block("c1"), modules[1].weights @ x + modules[1].bias)
    assert len(single.blocks) == 2


def test_concept_activations_reject_bad_module_lists():
    with pytest.raises(RegistryError):
        concept_activations([], np.ones(3))
    a = ConceptModule("a", "img", np.ones((1, 3)), np.zeros(1))
    b = ConceptModule("b", "txt", np.ones((1, 3)), np.zeros(1))
    with pytest.raises(RegistryError):
        concept_activations([a, b], np.ones(3))


def test_registry_init_is_seeded_per_category():
    a = ConceptRegistry(4)
    a.add_category("x", 2, seed=3, init_scale=1.0)
    b = ConceptRegistry(4)
    b.add_category("y", 2, seed=3, init_scale=1.0)
    b.add_category("x", 2, seed=3, init_scale=1.0)
    assert np.array_equal(a.modules["img"]["x"].weights, b.modules["img"]["x"].weights)


def test_registry_takes_initial_weights_per_modality():
    start = make_rng(0, "test", "start").standard_normal((2, 4))
    registry = ConceptRegistry(4)
    registry.add_category("x", 2, seed=3, init_scale=1.0, initial_weights={"img": start})
    assert np.array_equal(registry.modules["img"]["x"].weights, start)
    assert np.all(registry.modules["img"]["x"].bias == 0.0)
    seeded = ConceptRegistry(4)
    seeded.add_category("x", 2, seed=3, init_scale=1.0)
    assert np.array_equal(registry.modules["txt"]["x"].weights, seeded.modules["txt"]["x"].weights)
    with pytest.raises(ShapeError):
        registry.add_category("y", 3, seed=3, init_scale=1.0, initial_weights={"txt": start})
    assert "y" not in registry


def test_registry_backward_matches_finite_differences():
    registry = _registry()
    rng = make_rng(0, "test", "backward")
    X = rng.standard_normal((4, 5))
    G = rng.standard_normal((4, registry.width("img")))

    def loss_fn(params):
        registry.load_params(params)
        out = registry.forward("img", X)
        return float(np.sum(out * G)), registry.backward("img", X, G)

    only = [name for name in registry.params() if ".img." in name]
    assert finite_diff_check(loss_fn, registry.params(), only=only).passed


def test_alignment_loss_is_minus_two_at_perfect_alignment():
    rng = make_rng(0, "test", "align")
    T_img, T_txt = rng.standard_normal((2, 3, 4))
    result = concept_alignment_loss(2.0 * T_img, 0.5 * T_txt, T_img, T_txt)
    assert result.loss == pytest.approx(-2.0)
    assert np.allclose(result.grad_img, 0.0, atol=1e-12)


def test_alignment_loss_counts_degenerate_rows():
    T = np.ones((2, 3))
    E = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    result = concept_alignment_loss(E, T, T, T)
    assert result.degenerate == 1
    assert result.loss == pytest.approx(-(0.5 + 1.0))
    with pytest.raises(ShapeError):
        concept_alignment_loss(E, T, T[:1], T)


def test_alignment_loss_gradient():
    rng = make_rng(0, "test", "align-grad")
    T_img, T_txt, E_img, E_txt = rng.standard_normal((4, 3, 5))

    def loss_fn(params):
        result = concept_alignment_loss(params["E_img"], params["E_txt"], T_img, T_txt)
        return result.loss, {"E_img": result.grad_img, "E_txt": result.grad_txt}

    assert finite_diff_check(loss_fn, {"E_img": E_img, "E_txt": E_txt}).passed


def test_modulator_growth_preserves_earlier_logits():
    rng = make_rng(0, "test", "grow")
    M = ModulatorState.empty().grow(["a", "b"], 4, 4)
    M.weights = rng.standard_normal(M.weights.shape)
    M.bias = rng.standard_normal(M.bias.shape)
    E_img, E_txt = rng.standard_normal((2, 5, 4))
    before = modulator_forward(M, E_img, E_txt).logits

    grown = M.grow(["c"], 6, 7)
    assert grown.weights.shape == (3, 13)
    wide_img = np.hstack([E_img, rng.standard_normal((5, 2))])
    wide_txt = np.hstack([E_txt, rng.standard_normal((5, 3))])
    after = modulator_forward(grown, wide_img, wide_txt).logits
    assert np.allclose(after[:, :2], before)
    assert np.all(grown.weights[2] == 0.0)

    with pytest.raises(RegistryError):
        grown.grow(["a"], 6, 7)
    with pytest.raises(RegistryError):
        grown.grow(["d"], 5, 7)
    with pytest.raises(RegistryError):
        modulator_forward(grown, E_img, E_txt)


def test_modulator_activation_choices():
    M = ModulatorState.empty().grow(["a", "b", "c"], 1, 1)
    m = modulator_forward(M, np.ones(1), np.ones(1)).m
    assert np.allclose(m, 1.0 / 3.0)
    s = modulator_forward(M, np.ones(1), np.ones(1), activation="sigmoid").m
    assert np.allclose(s, 0.5)
    with pytest.raises(ParameterError):
        modulator_forward(M, np.ones(1), np.ones(1), activation="relu")


def test_modulator_loss_values():
    assert modulator_loss(np.zeros(4), 2).loss == pytest.approx(np.log(4))
    assert modulator_loss(np.array([50.0, 0.0]), 0).loss == pytest.approx(0.0, abs=1e-12)
    batch = modulator_loss(np.zeros((3, 2)), np.array([0, 1, 1]))
    assert batch.grad_logits.shape == (3, 2)
    assert np.allclose(batch.grad_logits.sum(axis=1), 0.0)
    with pytest.raises(LabelError):
        modulator_loss(np.zeros(3), 3)
    with pytest.raises(LabelError):
        modulator_loss(np.zeros((2, 3)), np.array([0]))


def test_modulator_backward_gradients():
    rng = make_rng(0, "test", "modulator-grad")
    M = ModulatorState.empty().grow(["a", "b", "c"], 4, 3)
    params = {
        "modulator.weight": rng.standard_normal(M.weights.shape),
        "modulator.bias": rng.standard_normal(3),
        "E_img": rng.standard_normal((5, 4)),
        "E_txt": rng.standard_normal((5, 3)),
    }
    labels = np.array([0, 2, 1, 1, 0])

    def loss_fn(p):
        M.load_params(p)
        out = modulator_forward(M, p["E_img"], p["E_txt"])
        cls = modulator_loss(out.logits, labels)
        grads, d_img, d_txt = modulator_backward(M, p["E_img"], p["E_txt"], cls.grad_logits)
        grads.update({"E_img": d_img, "E_txt": d_txt})
        return cls.loss, grads

    assert finite_diff_check(loss_fn, params).passed


def test_refine_scales_blocks():
    registry = _registry(sizes=(2, 3))
    E = concept_activations(registry.ordered("img"), np.ones(5))
    refined = refine(E, np.array([0.0, 1.0]))
    assert np.all(refined.blocks[0] == 0.0)
    assert np.allclose(refined.blocks[1], E.blocks[1])
    with pytest.raises(ShapeError):
        refine(E, np.ones(3))


def test_refine_batch_and_expand_weights():
    m = np.array([[0.25, 0.75], [1.0, 0.0]])
    expanded = expand_weights(m, [1, 2])
    assert expanded.tolist() == [[0.25, 0.75, 0.75], [1.0, 0.0, 0.0]]
    E = np.ones((2, 3))
    assert np.allclose(refine_batch(E, m, [1, 2]), expanded)
    assert np.allclose(uniform_weights(4), 0.25)
    assert uniform_weights(2, batch=3).shape == (3, 2)
    with pytest.raises(ShapeError):
        expand_weights(np.ones(3), [1, 2])


def test_param_names():
    assert param_name("img", "cat000", "weight") == "concept.img.cat000.weight"
    assert set(_registry().params()) >= {"concept.txt.c1.bias", "concept.img.c0.weight"}
