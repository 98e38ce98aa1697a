import numpy as np
import pytest
import torch

from btr.errors import InvalidArgumentError
from btr.ops.binarizer import BinaryTokenRep, recover_rows, recovery_loss
from btr.ops.bitvec import pack
from btr.services.gradcheck import check_parameter_gradients
from btr.services.reader import (
    PAD_SOURCE,
    QUERY_SOURCE,
    EncoderState,
    MiniReader,
    PassageCache,
    encode_pairs,
    infer,
    infer_from_states,
    make_batch,
    passage_states,
    precompute_passage,
    precompute_passage_arrays,
    reference_forward,
)
from btr.services.training import task_loss
from btr.structures.reader_structure import MergeSchedule

QUERY = [4, 5, 6, 7]
PASSAGES = [[8, 9, 10, 11, 12, 13, 14, 15], [16, 17, 18, 19, 20, 21, 22, 23]]


def query_states(model, query):
    ids = torch.as_tensor(query)[None]
    return model.run_encoder(model.embed_query(ids), None, 0, model.k)[0][0].detach()


def test_precompute_is_deterministic(tiny_model):
    a = precompute_passage(tiny_model, PASSAGES[0])
    b = precompute_passage(tiny_model, PASSAGES[0])
    assert [r.bits for r in a] == [r.bits for r in b]
    assert [r.scale for r in a] == [r.scale for r in b]
    assert len(a) == len(PASSAGES[0])
    assert all(r.bits.dim == 16 and r.scale > 0 for r in a)


def test_precompute_edge_cases(tiny_model):
    assert precompute_passage(tiny_model, []) == []
    bits, scales = precompute_passage_arrays(tiny_model, [])
    assert len(bits) == 0 and scales.shape == (0,)
    with pytest.raises(InvalidArgumentError):
        precompute_passage(tiny_model, [5] * 25)


def test_passage_states_do_not_see_the_query(tiny_model):
    states = passage_states(tiny_model, PASSAGES[0])
    for query in ([4], [30, 31, 32, 33, 34]):
        enc = tiny_model.forward_decomposed(make_batch([query], [[PASSAGES[0]]]))
        assert torch.allclose(enc.passage_states[0], states, atol=1e-5)


def test_reference_forward_is_deterministic(tiny_model):
    a = reference_forward(tiny_model, QUERY, PASSAGES)
    assert a == reference_forward(tiny_model, QUERY, PASSAGES)
    assert len(a) <= tiny_model.config.max_answer_len


def plain_encoder_memory(model, query, passages):
    """Every pair through all encoder layers in one loop, without the layer-k split."""
    rows = []
    for passage in passages:
        q = model.embed(torch.as_tensor(query)) + model.query_pos.weight[: len(query)]
        p = model.embed(torch.as_tensor(passage)) + model.passage_pos.weight[: len(passage)]
        h = torch.cat([q, p])[None]
        for layer in model.encoder:
            h = layer(h)[0]
        rows.append(model.enc_norm(h)[0])
    return torch.cat(rows)[None]


@torch.no_grad()
def test_reference_forward_matches_plain_encoder(tiny_model):
    memory = plain_encoder_memory(tiny_model, QUERY, PASSAGES)
    enc = tiny_model.forward_reference(make_batch([QUERY], [PASSAGES]))
    assert torch.allclose(enc.memory, memory, atol=1e-5)
    assert reference_forward(tiny_model, QUERY, PASSAGES) == tiny_model.generate(memory)[0]


@torch.no_grad()
def test_reference_pairs_do_not_see_each_other(tiny_model):
    a = tiny_model.forward_reference(make_batch([QUERY], [PASSAGES])).memory
    other = [PASSAGES[0], [30, 31, 32, 33, 34, 35, 36, 37]]
    b = tiny_model.forward_reference(make_batch([QUERY], [other])).memory
    width = len(QUERY) + len(PASSAGES[0])
    assert torch.allclose(a[0, :width], b[0, :width], atol=1e-6)
    assert not torch.allclose(a[0, width:], b[0, width:])
    # a shorter partner only adds masked padding
    c = tiny_model.forward_reference(make_batch([QUERY], [[PASSAGES[0], [30, 31]]])).memory
    assert torch.allclose(a[0, :width], c[0, :width], atol=1e-6)


def test_continuous_cache_matches_decomposed_forward(tiny_model):
    batch = make_batch([QUERY], [PASSAGES])
    enc = tiny_model.forward_decomposed(batch)
    states = [passage_states(tiny_model, p) for p in PASSAGES]
    schedule = MergeSchedule(r_p=0.0)
    answer, memories = infer_from_states(
        tiny_model, query_states(tiny_model, QUERY), states, schedule, return_memory=True
    )
    assert torch.allclose(memories[0][0], enc.memory[0], atol=1e-5)
    assert answer == tiny_model.generate(enc.memory, enc.memory_mask)[0]
    assert infer(tiny_model, QUERY, states, schedule) == answer


def test_binary_cache_matches_binarized_forward(tiny_model):
    tiny_model.binarize_mode = "ste"
    enc = tiny_model.forward_decomposed(make_batch([QUERY], [PASSAGES]))
    caches = [precompute_passage(tiny_model, p) for p in PASSAGES]
    w = tiny_model.norm_weights()
    restored = []
    for cache in caches:
        packed = PassageCache.from_reps(cache, 16)
        restored.append(torch.as_tensor(recover_rows(packed.bits, packed.scales, w), dtype=torch.float32))
    _, memories = infer_from_states(
        tiny_model, query_states(tiny_model, QUERY), restored, MergeSchedule(r_p=0.0), return_memory=True
    )
    assert torch.allclose(memories[0][0], enc.memory[0], atol=1e-4)
    schedule = MergeSchedule(r_p=0.0)
    assert infer(tiny_model, QUERY, caches, schedule) == tiny_model.generate(enc.memory, enc.memory_mask)[0]


def test_upper_layer_merge_counts(tiny_config):
    model = MiniReader(tiny_config.model_copy(update={"n_enc": 4, "max_passage_len": 16})).eval()
    query = list(range(4, 12))
    passage = list(range(12, 28))
    pairs = EncoderState.pairs(query_states(model, query), [passage_states(model, passage)])
    assert len(pairs) == 24
    encoded = encode_pairs(model, pairs, MergeSchedule(r_p=0.2, g=3, merge_rule="every-g"))
    # 24 -> 20 -> 16 -> 13 over three upper layers
    assert len(encoded) == 13
    assert encoded.sizes.sum().item() == pytest.approx(24)


def test_pairs_of_different_lengths_merge_on_their_own_budgets(tiny_model):
    q = query_states(tiny_model, QUERY)
    long_p, short_p = passage_states(tiny_model, PASSAGES[0]), passage_states(tiny_model, PASSAGES[1][:3])
    schedule = MergeSchedule(r_p=0.2)
    both = encode_pairs(tiny_model, EncoderState.pairs(q, [long_p, short_p]), schedule)
    # 12 tokens keep 10, 7 tokens keep 6
    assert both.lengths.tolist() == [10, 6]
    for row, passage in enumerate((long_p, short_p)):
        alone = encode_pairs(tiny_model, EncoderState.pairs(q, [passage]), schedule)
        n = int(alone.lengths[0])
        assert torch.allclose(both.hidden[row, :n], alone.hidden[0, :n], atol=1e-5)
        assert torch.equal(both.position[row, :n], alone.position[0, :n])
    assert (both.source[1, 6:] == PAD_SOURCE).all()


@pytest.mark.parametrize("rule,g,expected", [("alg2", 3, [16, 13]), ("every-g", 2, [20, 16]), ("every-g", 3, [20, 20])])
def test_decoder_memory_merge_schedule(tiny_model, rule, g, expected):
    states = [passage_states(tiny_model, p) for p in PASSAGES]
    schedule = MergeSchedule(r_p=0.2, g=g, merge_rule=rule)
    _, memories = infer_from_states(
        tiny_model, query_states(tiny_model, QUERY), states, schedule, return_memory=True
    )
    # each pair of 12 tokens keeps 10 after the single upper layer
    assert [m.shape[1] for m in memories] == expected


def test_merge_conserves_sizes(rng):
    hidden = torch.as_tensor(rng.standard_normal((15, 6)))
    state = EncoderState.pairs(hidden[:5], [hidden[5:]])
    merged = state.merge(0.5)
    assert len(merged) == 15 - 7
    assert merged.sizes.sum().item() == pytest.approx(15)
    assert state.merge(0.0) is state


def test_protect_query_keeps_query_rows(tiny_model):
    q = query_states(tiny_model, QUERY)
    pairs = EncoderState.pairs(q, [passage_states(tiny_model, PASSAGES[0])])
    encoded = encode_pairs(tiny_model, pairs, MergeSchedule(r_p=0.5, protect_query=True)).flatten()
    assert sorted(encoded.position[encoded.source == QUERY_SOURCE].tolist()) == [0, 1, 2, 3]
    assert len(encoded) < len(pairs)


def test_protected_positions_are_kept(tiny_model):
    pairs = EncoderState.pairs(query_states(tiny_model, QUERY), [passage_states(tiny_model, PASSAGES[0])])
    encoded = encode_pairs(tiny_model, pairs, MergeSchedule(r_p=0.5, protected_positions=(4, 6, 8)))
    assert {4, 6, 8} <= set(encoded.position[encoded.mask].tolist())


def test_cache_dimension_mismatch(tiny_model):
    wrong = [BinaryTokenRep(pack(np.ones(8), 8), 1.0)]
    with pytest.raises(InvalidArgumentError):
        infer(tiny_model, QUERY, [wrong])
    with pytest.raises(InvalidArgumentError):
        infer(tiny_model, QUERY, [torch.zeros(3, 8)])


def test_empty_passage_list_answers_from_query(tiny_model):
    answer = infer(tiny_model, QUERY, [], MergeSchedule(r_p=0.0))
    assert answer == reference_forward(tiny_model, QUERY, [])


def test_memory_shapes(tiny_model):
    batch = make_batch([QUERY, QUERY[:2]], [PASSAGES, [PASSAGES[1][:3], PASSAGES[0]]], [[24, 25], [26]])
    logits, enc = tiny_model(batch, decomposed=True)
    assert enc.memory.shape == (2, 2 * (4 + 8), 16)
    assert enc.memory_mask.shape == (2, 24)
    assert enc.memory_mask[1].sum().item() == (2 + 3) + (2 + 8)
    assert logits.shape == (2, 3, 64)
    assert batch.labels[1].tolist() == [26, 2, 0]


def test_overlong_query_rejected(tiny_model):
    with pytest.raises(InvalidArgumentError):
        infer(tiny_model, list(range(4, 13)), [])


def test_decoder_is_causal(tiny_model):
    memory = torch.randn(1, 10, 16)
    dec = torch.tensor([[1, 24, 25, 26]])
    changed = dec.clone()
    changed[0, 2:] = torch.tensor([30, 31])
    a = tiny_model.decode(dec, memory)
    b = tiny_model.decode(changed, memory)
    assert torch.allclose(a[:, :2], b[:, :2], atol=1e-6)
    assert not torch.allclose(a[:, 2:], b[:, 2:])


def test_full_reader_gradient_in_tanh_mode(tiny_config):
    model = MiniReader(tiny_config).double()
    model.binarize_mode = "tanh"
    batch = make_batch([[4, 5, 6]], [[[7, 8, 9, 10], [4, 11]]], [[5, 6]])

    def loss():
        logits, enc = model(batch, decomposed=True)
        keep = enc.passage_mask
        return task_loss(logits, batch.labels) + recovery_loss(model.recovery(enc.codes[keep]), enc.passage_states[keep])

    err, checked = check_parameter_gradients(model, loss, entries_per_tensor=2)
    assert checked > 50
    assert err <= 1e-3
