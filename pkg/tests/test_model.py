import numpy as np
import pytest

from steamrec.autodiff import Tensor
from steamrec.data import Op, Vocab
from steamrec.model import (
    ModelConfig,
    ModelParameters,
    SequenceTooLong,
    correct_batch,
    correct_sequence,
    decode_insertion,
    encode,
    generator_hidden,
    generator_step_distributions,
    next_item_distributions,
    next_item_scores,
    pad_batch,
    predict_operations,
    score_candidates,
)

CFG = ModelConfig(embed_dim=8, max_raw_len=10, max_corrected_len=14)
VOCAB = Vocab(12)


@pytest.fixture
def params():
    return ModelParameters.init(CFG, VOCAB, np.random.default_rng(0))


def test_parameter_shapes(params):
    assert params.item_emb.shape == (VOCAB.total_rows, 8)
    assert params.pos_emb.shape == (CFG.max_corrected_len + 2, 8)
    assert params.op_proj.shape == (3, 8)
    names = [n for n, _ in params.named()]
    assert len(names) == len(set(names)) == 3 + 3 * 16


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(heads=2)
    with pytest.raises(ValueError):
        ModelConfig(max_raw_len=50, max_corrected_len=40)
    with pytest.raises(ValueError):
        ModelConfig(position_rows=10)


def test_encode_shape_and_padding_invariance(params):
    ids, valid = pad_batch([[1, 2, 3], [4, 5, 6, 7, 8]])
    h = encode(ids, valid, params, CFG).data
    assert h.shape == (2, 5, 8)
    alone = encode(*pad_batch([[1, 2, 3]]), params, CFG).data
    assert np.allclose(h[0, :3], alone[0], atol=1e-12)


def test_encode_too_long(params):
    ids, valid = pad_batch([list(range(1, 13)) * 2])
    with pytest.raises(SequenceTooLong):
        encode(ids, valid, params, CFG)


def test_operation_distributions(params):
    h = encode(*pad_batch([[3, 4, 5]]), params, CFG)
    p = predict_operations(h, params)
    assert p.shape == (1, 3, 3)
    assert np.allclose(p.sum(-1), 1, atol=1e-9) and (p >= 0).all()


def test_generator_is_causal(params):
    rng = np.random.default_rng(1)
    anchor = Tensor(rng.standard_normal((1, 8)))
    a = generator_hidden(anchor, np.array([[3, 4, 5]]), np.ones((1, 3), bool), params, CFG).data
    b = generator_hidden(anchor, np.array([[3, 9, 1]]), np.ones((1, 3), bool), params, CFG).data
    assert np.array_equal(a[0, :2], b[0, :2])
    assert not np.allclose(a[0, 2], b[0, 2])


def test_generator_step_distributions_are_valid(params):
    d = generator_step_distributions(np.ones(8), [2, 3], params, CFG)
    assert d.shape == (3, VOCAB.total_rows)
    assert np.allclose(d.sum(-1), 1, atol=1e-9)


def test_decode_replay_matches_greedy(params):
    rng = np.random.default_rng(2)
    for _ in range(10):
        anchor = rng.standard_normal(8) * 3
        out = decode_insertion(anchor, params, CFG, VOCAB)
        assert len(out) <= CFG.max_insert_decode
        assert all(x not in (VOCAB.pad_id, VOCAB.mask_id, VOCAB.eos_id) for x in out)
        # replay: each emitted item is the argmax over allowed ids given the prefix
        for n in range(len(out) + 1):
            dist = generator_step_distributions(anchor, out[:n], params, CFG)[-1].copy()
            dist[[VOCAB.pad_id, VOCAB.mask_id]] = -1
            want = int(dist.argmax())
            if n < len(out):
                assert want == out[n]
            elif len(out) < CFG.max_insert_decode:
                assert want == VOCAB.eos_id


def test_forced_labels(params):
    seq = [3, 7, 2, 9]
    fixed, log = correct_sequence(seq, params, CFG, VOCAB, force_label=Op.KEEP)
    assert fixed == seq and not log.changed
    fixed, log = correct_sequence(seq, params, CFG, VOCAB, force_label=Op.DELETE)
    # deleting everything is refused: the last item survives
    assert fixed == [9] and log.labels == [1, 1, 1, 0]


def test_insert_places_reversed_generation(params, monkeypatch):
    import steamrec.model as model

    monkeypatch.setattr(model, "decode_insertions", lambda anchors, *a: [[5, 4]] * len(anchors))
    labels = np.array([[0, 2]])
    monkeypatch.setattr(model, "operation_logits",
                        lambda h, p: Tensor(np.eye(3)[labels[0]] * 10.0))
    fixed, log = correct_sequence([1, 3], params, CFG, VOCAB)
    assert fixed == [1, 4, 5, 3]
    assert log.insertions == {1: [5, 4]} and log.labels == [0, 2]


def test_op_set_restricts_labels(params):
    seqs = [[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12, 1, 2]]
    for op_set, banned in (("delete_keep", Op.INSERT), ("insert_keep", Op.DELETE)):
        for _, log in correct_batch(seqs, params, CFG, VOCAB, op_set):
            assert banned not in log.labels


def test_correct_batch_matches_single(params):
    seqs = [[1, 2, 3, 4, 5], [6, 7], [9, 10, 11]]
    batch = correct_batch(seqs, params, CFG, VOCAB)
    for s, (fixed, log) in zip(seqs, batch):
        f1, l1 = correct_sequence(s, params, CFG, VOCAB)
        assert f1 == fixed and l1.labels == log.labels


def test_corrected_length_capped(params):
    out = correct_batch([list(range(1, 11))], params, CFG, VOCAB, force_label=Op.INSERT)
    assert len(out[0][0]) <= CFG.max_corrected_len


def test_empty_sequence_rejected(params):
    with pytest.raises(ValueError):
        correct_batch([[]], params, CFG, VOCAB)


def test_next_item_scores(params):
    cands = list(range(1, 13))
    s = next_item_scores([1, 2, 3], cands, params, CFG, VOCAB)
    full = next_item_distributions([[1, 2, 3]], params, CFG, VOCAB)[0]
    assert np.allclose(full.sum(), 1, atol=1e-9)
    assert np.array_equal(s, full[cands])
    both = score_candidates([[1, 2, 3], [4, 5]], np.array([cands, cands]), params, CFG, VOCAB)
    assert np.allclose(both[0], s, atol=1e-12)


def test_parts_share_item_embeddings(params):
    before = next_item_scores([1, 2], [3], params, CFG, VOCAB)
    params.item_emb.data[3] += 1.0
    assert next_item_scores([1, 2], [3], params, CFG, VOCAB)[0] != before[0]
    d0 = generator_step_distributions(np.ones(8), [], params, CFG)[0, 3]
    params.item_emb.data[3] -= 1.0
    assert generator_step_distributions(np.ones(8), [], params, CFG)[0, 3] != d0


def test_copy_is_independent(params):
    clone = params.copy()
    assert [n for n, _ in clone.named()] == [n for n, _ in params.named()]
    clone.encoder[0].wq.data += 1
    assert not np.array_equal(clone.encoder[0].wq.data, params.encoder[0].wq.data)
