import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsr.corpus import PAD, CrossDomainSequence, truncate_pad
from cdsr.seqmodel import SequenceBatch, SequenceEncoder, gather_rows, user_states
from oracles import gru_step


@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def encoder(kind="gnn-att", d=4, N=6, seed=0, **kw):
    torch.manual_seed(seed)
    enc = SequenceEncoder(d, N, kind, dropout=0.0, **kw).double()
    if kind != "recurrent":
        with torch.no_grad():
            enc.pos.normal_()
    return enc.eval()


def np_of(module):
    return {k: v.detach().numpy() for k, v in module.state_dict().items()}


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * w + b


def gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def attention_oracle(enc, x, valid):
    """Position-by-position loop over one sequence ``x`` (N, d)."""
    p = np_of(enc)
    N, d = x.shape
    h = enc.blocks[0].attn.n_heads
    dh = d // h
    for b in range(len(enc.blocks)):
        pre = f"blocks.{b}."
        z = np.stack([layer_norm(x[t], p[pre + "ln_attn.weight"], p[pre + "ln_attn.bias"]) for t in range(N)])
        q = z @ p[pre + "attn.q.weight"].T + p[pre + "attn.q.bias"]
        k = z @ p[pre + "attn.k.weight"].T + p[pre + "attn.k.bias"]
        v = z @ p[pre + "attn.v.weight"].T + p[pre + "attn.v.bias"]
        ctx = np.zeros((N, d))
        for t in range(N):
            keys = [s for s in range(t + 1) if valid[s]]
            for head in range(h):
                sl = slice(head * dh, (head + 1) * dh)
                if not keys:
                    continue
                logits = np.array([q[t, sl] @ k[s, sl] / math.sqrt(dh) for s in keys])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                ctx[t, sl] = sum(wi * v[s, sl] for wi, s in zip(w, keys))
        x = x + ctx @ p[pre + "attn.out.weight"].T + p[pre + "attn.out.bias"]
        out = []
        for t in range(N):
            z = layer_norm(x[t], p[pre + "ln_ff.weight"], p[pre + "ln_ff.bias"])
            hid = gelu(z @ p[pre + "ff.0.weight"].T + p[pre + "ff.0.bias"])
            out.append(x[t] + hid @ p[pre + "ff.3.weight"].T + p[pre + "ff.3.bias"])
        x = np.stack(out)
    return np.stack([layer_norm(x[t], p["ln_out.weight"], p["ln_out.bias"]) for t in range(N)])


def test_gather_rows_zero_at_pad():
    table = torch.randn(5, 3)
    out = gather_rows(table, torch.tensor([[PAD, 2, 4]]))
    assert torch.equal(out[0, 0], torch.zeros(3))
    assert torch.equal(out[0, 2], table[4])
    with pytest.raises(IndexError):
        gather_rows(table, torch.tensor([[5]]))


def test_embed_positions_only_on_real_items():
    enc = encoder(N=4)
    table = torch.randn(6, 4)
    idx = torch.tensor([[PAD, PAD, 3, 1]])
    x = enc.embed(table, idx)
    assert torch.equal(x[0, 0], torch.zeros(4))
    assert torch.allclose(x[0, 3], table[1] + enc.pos[3])
    # shorter inputs take the trailing rows of the positional table
    x2 = enc.embed(table, torch.tensor([[3, 1]]))
    assert torch.allclose(x2[0], x[0, 2:])
    with pytest.raises(ValueError):
        enc.embed(table, torch.zeros(1, 5, dtype=torch.long))


def test_hand_set_attention_d2_n2():
    # q=k=0 gives uniform weights, v/out identity, ff zero: position 1 averages both inputs
    enc = encoder(d=2, N=2, n_blocks=1, n_heads=1)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            p.zero_()
        enc.blocks[0].attn.v.weight.copy_(torch.eye(2))
        enc.blocks[0].attn.out.weight.copy_(torch.eye(2))
        for ln in (enc.blocks[0].ln_attn, enc.blocks[0].ln_ff, enc.ln_out):
            ln.weight.fill_(1.0)
    x = torch.tensor([[[1.0, 3.0], [2.0, -2.0]]])
    out = enc(x, torch.tensor([[True, True]]))
    # LN of (1,3) is (-1,1), of (2,-2) is (1,-1); mean of the two is 0
    pre_out = torch.tensor([[1.0 - 1.0, 3.0 + 1.0], [2.0 + 0.0, -2.0 + 0.0]])
    expected = torch.stack([torch.nn.functional.layer_norm(r, (2,)) for r in pre_out])
    assert torch.allclose(out[0], expected, atol=1e-12)


@pytest.mark.parametrize("n_heads", [1, 2])
def test_attention_matches_loop_oracle(n_heads):
    enc = encoder(d=4, N=5, n_heads=n_heads, seed=n_heads)
    x = torch.randn(1, 5, 4)
    valid = torch.tensor([[False, True, True, False, True]])
    x = x * valid.unsqueeze(-1)
    out = enc(x, valid)[0].detach().numpy()
    expected = attention_oracle(enc, x[0].numpy(), valid[0].tolist())
    np.testing.assert_allclose(out[valid[0].numpy()], expected[valid[0].numpy()], atol=1e-10)


def test_recurrent_matches_step_loop():
    enc = encoder("recurrent", d=3)
    x = torch.randn(1, 5, 3)
    valid = torch.tensor([[False, True, True, False, True]])
    out = enc(x, valid)[0].detach().numpy()
    p = np_of(enc)
    h = np.zeros(3)
    for t in range(5):
        if valid[0, t]:
            h = gru_step(x[0, t].numpy(), h, p["gru.weight_ih"], p["gru.weight_hh"], p["gru.bias_ih"], p["gru.bias_hh"])
        np.testing.assert_allclose(out[t], h, atol=1e-12)


@pytest.mark.parametrize("kind", ["gnn-att", "recurrent"])
def test_causality(kind):
    enc = encoder(kind)
    x = torch.randn(2, 6, 4)
    valid = torch.ones(2, 6, dtype=torch.bool)
    base = enc(x, valid)
    for t in range(6):
        y = x.clone()
        y[:, t:] += torch.randn(2, 6 - t, 4)
        assert torch.equal(enc(y, valid)[:, :t], base[:, :t])


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=6), st.sampled_from(["gnn-att", "attention-only", "recurrent"]))
def test_pad_neutrality(items, kind):
    enc = encoder(kind, N=10)
    table = torch.randn(8, 4)
    short = torch.tensor([items])
    padded = torch.tensor([[PAD] * (10 - len(items)) + items])
    a = enc(enc.embed(table, short), short >= 0)[0, -1]
    b = enc(enc.embed(table, padded), padded >= 0)[0, -1]
    if kind == "recurrent":
        assert torch.allclose(a, b, atol=1e-12)
    else:
        # positions come from the trailing rows, so the last state is independent of padding
        assert torch.allclose(a, b, atol=1e-10)


def test_fully_padded_row_is_finite():
    enc = encoder()
    valid = torch.zeros(1, 6, dtype=torch.bool)
    assert torch.isfinite(enc(torch.zeros(1, 6, 4), valid)).all()


def test_dropout_inactive_in_eval():
    torch.manual_seed(0)
    enc = SequenceEncoder(4, 6, dropout=0.5).double().eval()
    x = torch.randn(1, 6, 4)
    valid = torch.ones(1, 6, dtype=torch.bool)
    assert torch.equal(enc(x, valid), enc(x, valid))


def test_user_states_share_parameters_and_views():
    enc = encoder(N=6)
    seq = truncate_pad(CrossDomainSequence("u", [0, 4, 1, 5, 2], list("XYXYX")), 6)
    batch = SequenceBatch.from_sequences([seq], n_x=4)
    table = torch.randn(7, 4)
    tables = {"mixed": table, "X": table[:4], "Y": table[4:]}
    H, HX, HY = user_states(enc, batch, tables)
    for which, got in (("mixed", H), ("X", HX), ("Y", HY)):
        idx = batch.view(which)
        assert torch.allclose(got, enc(enc.embed(tables[which], idx), idx >= 0), atol=1e-12)
    assert batch.view("Y").tolist() == [[PAD, PAD, 0, PAD, 1, PAD]]


def test_constructor_validation():
    with pytest.raises(ValueError):
        SequenceEncoder(4, 6, "transformer-xl")
    with pytest.raises(ValueError):
        SequenceEncoder(5, 6, n_heads=2)
    assert SequenceEncoder(4, 6).uses_graph and not SequenceEncoder(4, 6, "attention-only").uses_graph
