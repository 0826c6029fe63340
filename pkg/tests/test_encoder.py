import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import TINY_MODEL, ToyStack, finite_difference_check, np_layer_norm, np_linear
from maskct.encoder import (
    EncoderArray,
    EncoderLayer,
    EncoderSequence,
    FeatureDiscovery,
    LabelHead,
    MultiHeadSelfAttention,
    classify_head,
)
from maskct.labels import LabelState
from maskct.model import MaskCT


# attention

def test_two_by_two_softmax_closed_form():
    attn = MultiHeadSelfAttention(2, 1).double()
    with torch.no_grad():
        attn.w_q.weight.copy_(torch.eye(2))
        attn.w_k.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 1.0]]))
    x = torch.tensor([[[1.0, 0.0], [0.5, 1.0]]], dtype=torch.float64)
    att = attn.attention(x)[0, 0]
    keys = [(2.0, 0.0), (1.0, 1.0)]
    for i, q in enumerate([(1.0, 0.0), (0.5, 1.0)]):
        s = [(q[0] * k[0] + q[1] * k[1]) / math.sqrt(2) for k in keys]
        p0 = 1 / (1 + math.exp(s[1] - s[0]))
        assert att[i, 0].item() == pytest.approx(p0, abs=1e-15)
        assert att[i, 1].item() == pytest.approx(1 - p0, abs=1e-15)


def test_identical_tokens_give_uniform_rows():
    torch.manual_seed(0)
    attn = MultiHeadSelfAttention(8, 2)
    x = torch.randn(1, 1, 8).expand(1, 5, 8)
    torch.testing.assert_close(attn.attention(x), torch.full((1, 2, 5, 5), 0.2))
    assert torch.equal(attn.attention(torch.randn(1, 1, 8)), torch.ones(1, 2, 1, 1))


@given(st.integers(1, 12), st.integers(0, 1000))
def test_rows_are_stochastic(m, seed):
    torch.manual_seed(seed)
    attn = MultiHeadSelfAttention(16, 4)
    att = attn.attention(3 * torch.randn(2, m, 16))
    assert (att >= 0).all()
    torch.testing.assert_close(att.sum(-1), torch.ones(2, 4, m), rtol=0, atol=1e-6)


def test_nan_is_an_error():
    attn = MultiHeadSelfAttention(8, 2)
    x = torch.zeros(1, 3, 8)
    x[0, 1, 2] = float("nan")
    with pytest.raises(FloatingPointError):
        attn(x)
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(10, 4)


def test_attention_maps_rows_all_layers():
    torch.manual_seed(1)
    enc = EncoderArray(16, 4, 4, 32)
    seq = EncoderSequence(torch.randn(2, 9, 16), 6, 1, 2)
    maps = enc.attention_maps(seq)
    assert len(maps) == 4
    for a in maps:
        torch.testing.assert_close(a.sum(-1), torch.ones(2, 4, 9), rtol=0, atol=1e-6)


# encoder layers

def zero_branches(layer):
    with torch.no_grad():
        for lin in (layer.attn.w_out, layer.w_r, layer.w_o):
            lin.weight.zero_()
            lin.bias.zero_()
        layer.attn.w_v.weight.copy_(torch.eye(layer.attn.w_v.weight.shape[0]))


def test_identity_layers():
    torch.manual_seed(2)
    enc = EncoderArray(16, 4, 4, 32, dropout=0.0)
    for layer in enc.layers:
        zero_branches(layer)
    x = torch.randn(3, 7, 16)
    out = enc(EncoderSequence(x, 4, 1, 2))
    assert torch.equal(out.tokens, x)
    assert (out.n_features, out.n_fd, out.n_labels) == (4, 1, 2)


def test_single_token_numpy_oracle():
    torch.manual_seed(3)
    layer = EncoderLayer(8, 2, 16, dropout=0.0).double().eval()
    x = torch.randn(1, 1, 8, dtype=torch.float64)
    got = layer(x).detach().numpy()[0, 0]
    xn = x.numpy()[0, 0]
    # one token: softmax over one entry is 1, so attention returns its own value vector
    v = np_linear(np_layer_norm(xn, layer.norm1), layer.attn.w_v)
    h = xn + np_linear(v, layer.attn.w_out)
    ffn = np_linear(np.maximum(np_linear(np_layer_norm(h, layer.norm2), layer.w_r), 0), layer.w_o)
    np.testing.assert_allclose(got, h + ffn, rtol=0, atol=1e-12)


def test_one_layer_array_equals_manual_call():
    torch.manual_seed(4)
    enc = EncoderArray(16, 4, 1, 32).eval()
    x = torch.randn(2, 5, 16)
    assert torch.equal(enc(EncoderSequence(x, 3, 1, 1)).tokens, enc.layers[0](x))


def test_layers_do_not_share_parameters():
    enc = EncoderArray(16, 4, 4, 32)
    ptrs = [p.data_ptr() for p in enc.parameters()]
    assert len(ptrs) == len(set(ptrs))
    a, b = enc.layers[0].attn.w_q.weight, enc.layers[1].attn.w_q.weight
    assert not torch.equal(a, b)


def test_seeded_replay_bit_exact():
    outs = []
    for _ in range(2):
        torch.manual_seed(5)
        enc = EncoderArray(16, 4, 4, 64).eval()
        outs.append(enc(EncoderSequence(torch.randn(2, 6, 16), 3, 1, 2)).tokens)
    assert torch.equal(*outs)


def test_central_differences_every_group():
    torch.manual_seed(6)
    model = ToyStack(d=8, heads=2, layers=2, ffn=16, labels=1).double()
    feats = torch.randn(1, 1, 8, dtype=torch.float64)  # 1 feature + FD + 1 label = 3 tokens
    states = torch.tensor([[int(LabelState.MASKED)]])
    target = torch.tensor([[1.0]], dtype=torch.float64)

    def loss():
        logits = model(feats, states)
        return torch.nn.functional.binary_cross_entropy_with_logits(logits, target)

    errors = finite_difference_check(model, loss)
    assert len(errors) >= 20
    bad = {k: v for k, v in errors.items() if v > 1e-4}
    assert not bad, bad


# feature discovery

def fd_oracle(feats, ls, fd):
    w = fd.conv.weight.detach().double().numpy()[0]
    b = fd.conv.bias.detach().double().item()
    pf, pl = feats.mean(0), ls.mean(0)
    return b + np.correlate(pf, w[0], "same") + np.correlate(pl, w[1], "same")


def test_fd_matches_numpy_oracle_and_conv():
    torch.manual_seed(7)
    fd = FeatureDiscovery(3).double()
    feats = torch.randn(2, 5, 8, dtype=torch.float64)
    ls = torch.randn(2, 3, 8, dtype=torch.float64)
    out = fd(feats, ls)
    assert out.shape == (2, 1, 8)
    for i in range(2):
        np.testing.assert_allclose(out[i, 0].detach().numpy(), fd_oracle(feats[i].numpy(), ls[i].numpy(), fd), atol=1e-14)
    pooled = torch.stack([feats.mean(1), ls.mean(1)], 1)
    torch.testing.assert_close(out, fd.conv(pooled), rtol=0, atol=1e-14)


def test_fd_zero_label_path_and_permutation():
    torch.manual_seed(8)
    fd = FeatureDiscovery(3).double()
    with torch.no_grad():
        fd.conv.bias.zero_()
    feats = torch.randn(1, 6, 8, dtype=torch.float64)
    out = fd(feats, torch.zeros(1, 4, 8, dtype=torch.float64))[0, 0].detach().numpy()
    w = fd.conv.weight.detach().numpy()[0, 0]
    np.testing.assert_allclose(out, np.correlate(feats[0].numpy().mean(0), w, "same"), atol=1e-14)
    perm = feats[:, torch.randperm(6)]
    torch.testing.assert_close(fd(perm, torch.zeros(1, 4, 8, dtype=torch.float64))[0, 0].detach(),
                               torch.from_numpy(out), rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        fd(feats, torch.zeros(1, 4, 7, dtype=torch.float64))


# head

def test_head_scalar_oracle():
    head = LabelHead(4, dropout=0.0).double().eval()
    with torch.no_grad():
        head.linear.weight.copy_(torch.tensor([[0.5, -1.0, 2.0, 0.0]]))
        head.linear.bias.fill_(0.25)
    labels = torch.tensor([[[1.0, 2.0, 0.5, 9.0], [0.0, 0.0, 0.0, 0.0]]], dtype=torch.float64)
    seq = EncoderSequence(torch.cat([torch.zeros(1, 2, 4, dtype=torch.float64), labels], 1), 1, 1, 2)
    probs = classify_head(seq, head)[0]
    z0 = 0.5 * 1 - 2 + 2 * 0.5 + 0.25
    assert probs[0].item() == pytest.approx(1 / (1 + math.exp(-z0)), abs=1e-15)
    assert probs[1].item() == pytest.approx(1 / (1 + math.exp(-0.25)), abs=1e-15)


def test_sigmoid_limits():
    assert torch.sigmoid(torch.tensor(0.0)).item() == 0.5
    p = torch.sigmoid(torch.tensor(30.0, dtype=torch.float64)).item()
    assert 1 - 1e-12 < p < 1
    assert torch.sigmoid(torch.tensor(1e4)).item() == 1.0


def test_head_requires_labels():
    with pytest.raises(ValueError):
        LabelHead(4)(EncoderSequence(torch.zeros(1, 3, 4), 2, 1, 0))
    with pytest.raises(ValueError):
        EncoderSequence(torch.zeros(1, 3, 4), 2, 1, 1)


# full model

def tiny_model(num_labels=5, seed=0):
    torch.manual_seed(seed)
    return MaskCT(TINY_MODEL, num_labels, seed).double().eval()


def test_probabilities_in_open_interval():
    model = tiny_model()
    x = torch.randn(3, 3, 32, 32, dtype=torch.float64)
    p = model.predict_proba(x)
    assert p.shape == (3, 5) and torch.isfinite(p).all() and ((p > 0) & (p < 1)).all()


def test_label_permutation_equivariance():
    model = tiny_model()
    perm = torch.tensor([3, 0, 4, 1, 2])
    permuted = tiny_model()
    with torch.no_grad():
        permuted.label_table.copy_(model.label_table[perm])
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    states = torch.tensor([[0, 1, 2, 0, 1], [2, 2, 0, 0, 1]])
    a = model(x, states)
    b = permuted(x, states[:, perm])
    torch.testing.assert_close(b, a[:, perm], rtol=0, atol=1e-12)


def test_masked_truth_never_reaches_model():
    model = tiny_model()
    x = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    # the forward pass only ever sees states; equal states give equal logits
    s = torch.tensor([[0, 1, 0, 2, 0]])
    assert torch.equal(model(x, s), model(x, s.clone()))
    with torch.no_grad():
        assert not torch.equal(model(x, s), model(x, torch.tensor([[0, 2, 0, 2, 0]])))
