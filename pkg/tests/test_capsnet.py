import numpy as np
import pytest

from capsattack import ops
from capsattack.capsnet import (
    CapsNet,
    argmax_lowest,
    caps_logits,
    compute_votes,
    dynamic_routing,
    margin_loss,
    per_vote_losses,
    routing_counter,
    vote_logits,
)
from capsattack.config import CapsNetConfig
from capsattack.enums import TargetHead
from capsattack.errors import ConfigError
from capsattack.tensor import Tensor, no_grad

from conftest import double


def reference_routing(votes: np.ndarray, iterations: int):
    """Plain numpy routing by agreement over (N, M, d) votes."""
    b = np.zeros(votes.shape[:2])
    for t in range(iterations):
        c = np.exp(b) / np.exp(b).sum(axis=1, keepdims=True)
        s = (c[..., None] * votes).sum(axis=0)
        norm = np.linalg.norm(s, axis=-1, keepdims=True)
        v = norm / (1 + norm**2) * s
        if t < iterations - 1:
            b = b + (votes * v[None]).sum(axis=-1)
    return v, c


def test_primary_shape_of_original_architecture():
    config = CapsNetConfig.preset("original")
    assert config.num_primary == 1152
    assert config.primary_dim == 8


def test_primary_shape(capsnet, tiny_data):
    assert capsnet.extract_primary(tiny_data.images[:3]).shape == (3, 36, 4)


def test_num_primary_must_match_backbone(tiny_config):
    values = tiny_config.to_dict()
    CapsNetConfig.from_dict(dict(values, num_primary=36))
    with pytest.raises(ConfigError):
        CapsNetConfig.from_dict(dict(values, num_primary=35))


def test_channels_must_split_into_capsules(tiny_config):
    with pytest.raises(ConfigError):
        CapsNetConfig.from_dict(dict(tiny_config.to_dict(), primary_dim=3))


def test_zero_input_gives_zero_primary_capsules(capsnet):
    u = capsnet.extract_primary(np.zeros((1, 8, 8)))
    np.testing.assert_array_equal(u.data, 0.0)


def test_wrong_input_shape(capsnet):
    with pytest.raises(ConfigError):
        capsnet.forward(np.zeros((1, 1, 9, 9)))


def test_votes_hand_case():
    u = Tensor([[3.0, 4.0]])
    weights = Tensor([[[1.0, 0.0], [0.0, 2.0]]])
    np.testing.assert_array_equal(compute_votes(u, weights, 1).data, [[[3.0, 8.0]]])


def test_block_identity_votes_copy_primary_capsules(rng):
    u = rng.normal(size=(5, 2))
    weights = np.tile(np.eye(2), (5, 1, 3))
    votes = compute_votes(double(u), double(weights), 3).data
    for j in range(3):
        np.testing.assert_allclose(votes[:, j], u)


def test_zero_primary_capsules_vote_zero(rng):
    votes = compute_votes(Tensor(np.zeros((2, 5, 2))), Tensor(rng.normal(size=(5, 2, 6))), 3)
    np.testing.assert_array_equal(votes.data, 0.0)


def test_votes_dimension_mismatch():
    with pytest.raises(ConfigError):
        compute_votes(Tensor(np.zeros((5, 2))), Tensor(np.zeros((5, 3, 6))), 3)


def test_single_iteration_routing_is_squashed_mean(rng):
    votes = rng.normal(size=(2, 7, 3, 4))
    v, coupling = dynamic_routing(double(votes), 1)
    expected = ops.squash(double(votes.sum(axis=1) / 3)).data
    np.testing.assert_allclose(v.data, expected, atol=1e-6)
    np.testing.assert_allclose(coupling.c.data, 1 / 3)


def test_routing_matches_reference():
    votes = np.array(
        [
            [[0.5, -0.2], [0.1, 0.9]],
            [[0.4, 0.3], [-0.7, 0.2]],
        ]
    )
    v, coupling = dynamic_routing(double(votes), 3)
    expected_v, expected_c = reference_routing(votes, 3)
    np.testing.assert_allclose(v.data, expected_v, atol=1e-6)
    np.testing.assert_allclose(coupling.c.data, expected_c, atol=1e-6)
    assert coupling.iterations == 3


def test_coupling_rows_sum_to_one(rng):
    for _ in range(100):
        votes = rng.normal(scale=rng.uniform(0.1, 3.0), size=(4, 3, 2))
        _, coupling = dynamic_routing(double(votes), 3)
        for c in coupling.history:
            np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-6)


def test_routing_needs_an_iteration():
    with pytest.raises(ConfigError):
        dynamic_routing(Tensor(np.zeros((2, 2, 2))), 0)


def test_routing_counter_counts_forward_passes(capsnet, tiny_data):
    routing_counter.reset()
    capsnet.predict(tiny_data.images[:2])
    capsnet.head_logits(tiny_data.images[:2], "votes")
    assert routing_counter.value == 1


def test_caps_logits_half_length():
    assert caps_logits(double([[0.5, 0.0]])).data[0] == pytest.approx(np.log(0.5))


def test_caps_logits_clamp_zero_length():
    assert caps_logits(double([[0.0, 0.0]])).data[0] == pytest.approx(np.log(1e-12))


def test_caps_logits_softmax_is_normalised_lengths():
    logits = caps_logits(double([[0.9, 0.0], [0.0, 0.1]]))
    np.testing.assert_allclose(logits.data, [np.log(0.9), np.log(0.1)])
    np.testing.assert_allclose(ops.softmax(logits).data, [0.9, 0.1])
    assert ops.cross_entropy(ops.reshape(logits, (1, 2)), [0]).item() == pytest.approx(0.1054, abs=1e-4)


def test_vote_logits_hand_case():
    votes = double([[[1.0, 0.0]], [[0.0, 1.0]]])
    # mean (0.5, 0.5) has squared length 0.5, so the squashed length is 0.5 / 1.5
    assert vote_logits(votes).data[0] == pytest.approx(np.log(1 / 3))


def test_vote_logit_variants_agree_for_one_voter(rng):
    votes = double(rng.normal(size=(1, 3, 4)))
    np.testing.assert_allclose(
        vote_logits(votes, "average-then-squash").data,
        vote_logits(votes, "squash-then-average").data,
    )


def test_per_vote_loss_single_voter(rng):
    votes = double(rng.normal(size=(1, 3, 4)))
    expected = ops.cross_entropy(ops.reshape(vote_logits(votes), (1, 3)), [1]).item()
    assert per_vote_losses(votes, 1).item() == pytest.approx(expected)


def test_per_vote_loss_identical_voters(rng):
    shared = rng.normal(size=(1, 3, 4))
    votes = double(np.repeat(shared, 5, axis=0))
    expected = ops.cross_entropy(ops.reshape(vote_logits(double(shared)), (1, 3)), [2]).item()
    assert per_vote_losses(votes, 2).item() == pytest.approx(expected)


def test_per_vote_loss_two_voters(rng):
    votes = rng.normal(size=(2, 3, 4))
    separate = [ops.cross_entropy(ops.reshape(vote_logits(double(votes[i : i + 1])), (1, 3)), [0]).item() for i in range(2)]
    assert per_vote_losses(double(votes), 0).item() == pytest.approx(np.mean(separate))


def test_argmax_picks_lowest_index_on_ties():
    assert argmax_lowest(np.array([0.1, 0.9, 0.3])) == 1
    assert argmax_lowest(np.array([0.5, 0.5])) == 0


def test_margin_loss():
    lengths = double([[0.95, 0.05], [0.5, 0.6]])
    expected = (0.9 - 0.5) ** 2 + 0.5 * (0.6 - 0.1) ** 2
    assert margin_loss(lengths, [0, 0]).item() == pytest.approx(expected)


def test_margin_loss_of_a_broken_model_is_nan(capsnet, tiny_data):
    capsnet.weights.data[...] = np.nan
    classification, _ = capsnet.loss_terms(tiny_data.images[:2], tiny_data.labels[:2], "margin")
    assert np.isnan(classification.item())


def test_heads_that_bypass_routing():
    assert [head.value for head in TargetHead if head.bypasses_routing] == ["votes", "votes-v1", "votes-v2"]


def test_vote_heads_skip_routing(capsnet, tiny_data):
    routing_counter.reset()
    for head in ("votes", "votes-v1", "votes-v2"):
        capsnet.head_loss(tiny_data.images[:2], tiny_data.labels[:2], head)
    assert routing_counter.value == 0


def test_head_loss_shapes(capsnet, tiny_data):
    for head in ("caps", "votes", "votes-v1", "votes-v2"):
        assert capsnet.head_loss(tiny_data.images[:3], tiny_data.labels[:3], head).shape == (3,)


def test_capsnet_has_no_logits_head(capsnet, tiny_data):
    with pytest.raises(ConfigError):
        capsnet.head_logits(tiny_data.images[:1], "logits")


def test_forward_result(capsnet, tiny_data):
    with no_grad():
        result = capsnet.forward(tiny_data.images[:4])
    assert result.capsules.shape == (4, 3, 4)
    assert result.votes.shape == (4, 36, 3, 4)
    assert np.all(result.lengths < 1)
    np.testing.assert_array_equal(result.prediction, np.argmax(result.lengths, axis=-1))


def test_unbatched_input(capsnet, tiny_data):
    assert capsnet.predict(tiny_data.images[0]).shape == (1,)


def test_same_seed_same_weights(tiny_config):
    a, b = CapsNet(tiny_config, seed=5), CapsNet(tiny_config, seed=5)
    for (name, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=name)


def test_parameter_names(capsnet):
    names = [name for name, _ in capsnet.named_parameters()]
    assert names[:3] == ["weights", "backbone.0.weight", "backbone.0.bias"]
    assert "recon.stack.0.weight" in names
    assert len(names) == len(set(names))


def test_loss_terms(capsnet, tiny_data):
    classification, reconstruction = capsnet.loss_terms(tiny_data.images[:3], tiny_data.labels[:3], "margin")
    assert classification.size == 1
    assert reconstruction.item() > 0
