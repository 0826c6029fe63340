"""Shared oracles and tiny fixtures for the test suite."""

from fractions import Fraction
from itertools import product

import numpy as np
import torch
from torch import nn

from maskct.config import ModelConfig
from maskct.encoder import EncoderArray, EncoderSequence, FeatureDiscovery, LabelHead
from maskct.labels import embed_label_states

TINY_MODEL = ModelConfig(image_size=32, d_model=16, heads=4, layers=2, ffn_dim=32, dropout=0.0, dropout_fc=0.0)


class ToyStack(nn.Module):
    """Feature discovery, encoder array, final norm and head on raw feature tokens."""

    def __init__(self, d=8, heads=2, layers=2, ffn=16, labels=1):
        super().__init__()
        self.label_table = nn.Parameter(torch.randn(labels, d))
        self.state_table = nn.Parameter(torch.randn(3, d))
        self.fd = FeatureDiscovery(3)
        self.encoder = EncoderArray(d, heads, layers, ffn, dropout=0.0)
        self.norm = nn.LayerNorm(d)
        self.head = LabelHead(d, dropout=0.0)
        with torch.no_grad():
            for p in list(self.norm.parameters()) + [q for l in self.encoder.layers for q in (*l.norm1.parameters(), *l.norm2.parameters())]:
                p.add_(0.3 * torch.randn_like(p))

    def forward(self, feats, states):
        ls = embed_label_states(states, self.label_table, self.state_table)
        fd = self.fd(feats, ls)
        seq = EncoderSequence(torch.cat([feats, fd, ls], 1), feats.shape[1], 1, ls.shape[1])
        out = self.encoder(seq)
        return self.head(out.replace(self.norm(out.tokens)))


def finite_difference_check(model, loss_fn, h=1e-6):
    """Worst relative error (per parameter tensor, L2) between autograd and central differences."""
    model.zero_grad()
    loss_fn().backward()
    worst = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                nflat[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst[name] = (analytic - numeric).norm().item() / scale
    return worst


def brute_force_metrics(truth, pred):
    """Precision/recall family evaluated exactly as printed, with plain loops and Fractions."""
    n, k = len(truth), len(truth[0])

    def ratio(a, b):
        return Fraction(a, b) if b else Fraction(0)

    prec, rec = [], []
    for i in range(k):
        tp = sum(1 for r in range(n) if truth[r][i] == 1 and pred[r][i] == 1)
        fp = sum(1 for r in range(n) if truth[r][i] == 0 and pred[r][i] == 1)
        fn = sum(1 for r in range(n) if truth[r][i] == 1 and pred[r][i] == 0)
        prec.append(ratio(tp, tp + fp))
        rec.append(ratio(tp, tp + fn))
    cp = sum(prec, Fraction(0)) / k
    cr = sum(rec, Fraction(0)) / k
    f = sum(1 for r in range(n) for i in range(k) if truth[r][i] == pred[r][i])
    op = Fraction(f, n * k)
    positives = sum(truth[r][i] for r in range(n) for i in range(k))
    orr = Fraction(f, positives) if positives else None

    def hm(a, b):
        if a is None or b is None:
            return None
        return 2 * a * b / (a + b) if a + b else Fraction(0)

    return {"precision": prec, "recall": rec, "CP": cp, "CR": cr, "CF1": hm(cp, cr),
            "OP": op, "OR": orr, "OF1": hm(op, orr)}


def all_binary_matrices(n, k):
    for bits in product((0, 1), repeat=n * k):
        yield [list(bits[r * k : (r + 1) * k]) for r in range(n)]


def np_layer_norm(x, ln):
    w, b = ln.weight.detach().double().numpy(), ln.bias.detach().double().numpy()
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * w + b


def np_linear(x, lin):
    out = x @ lin.weight.detach().double().numpy().T
    return out + lin.bias.detach().double().numpy() if lin.bias is not None else out


WEATHER5 = ("sunny", "cloudy", "foggy", "rainy", "snowy")

TINY_TOML = """\
seed = 3
out_dir = "{out}"

[model]
image_size = 32
d_model = 16
heads = 4
layers = 2
ffn_dim = 32

[train]
lr_init = 0.001
batch_size = 8
max_epochs = {epochs}

[data]
vocab = "vocab.txt"
train = "train.jsonl"
val = "val.jsonl"
"""


def tiny_workspace(root, epochs=1):
    """Planted-cue images, vocabulary, train/val manifests and a TOML config under ``root``."""
    from maskct.labels import LabelVocabulary
    from maskct.synthetic import write_planted

    root.mkdir(parents=True, exist_ok=True)
    LabelVocabulary(WEATHER5).write(root / "vocab.txt")
    write_planted(root / "train_img", 12, WEATHER5, 32, seed=1, split="train").write(root / "train.jsonl")
    write_planted(root / "val_img", 6, WEATHER5, 32, seed=2, split="val").write(root / "val.jsonl")
    (root / "run.toml").write_text(TINY_TOML.format(out=root / "run", epochs=epochs))
    return root / "run.toml"


def frame_stream(root, counts, size=32, seed=10):
    """Frame manifest whose ``source`` field splits it into named subsets."""
    from maskct.data import DatasetManifest
    from maskct.synthetic import write_planted

    records = []
    for k, (name, n) in enumerate(counts.items()):
        records += write_planted(root / name, n, WEATHER5, size, seed=seed + k, split="test", source=name).records
    m = DatasetManifest(WEATHER5, records)
    m.write(root / "frames.jsonl")
    return root / "frames.jsonl"
