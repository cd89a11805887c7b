import math

import numpy as np
import pytest
import torch

from kgetm.gat import GAT, GatNumericalError, attention_coefficients, edge_tensors


def undirected(n, pairs):
    tgt = [u for u, v in pairs] + [v for u, v in pairs] + list(range(n))
    src = [v for u, v in pairs] + [u for u, v in pairs] + list(range(n))
    return edge_tensors(np.array(tgt), np.array(src))


def random_pairs(rng, n, m):
    return sorted({(min(u, v), max(u, v)) for u, v in rng.integers(0, n, size=(m, 2)) if u != v})


def make_gat(dim, layers, heads, seed=0):
    gat = GAT(dim, layers, heads)
    gat.reset_parameters(torch.Generator().manual_seed(seed))
    return gat


def leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def dense_layer(x, W, a, nbrs):
    """Explicit-loop attention layer: x is N x L (rows nodes), returns N x L for one head."""
    n, L = x.shape
    z = x @ W.T
    out = np.zeros_like(x)
    for c in range(n):
        scores = [leaky(a[:L] @ z[c] + a[L:] @ z[j]) for j in nbrs[c]]
        w = np.exp(np.array(scores) - max(scores))
        w /= w.sum()
        out[c] = sum(wi * z[j] for wi, j in zip(w, nbrs[c]))
    return out


def test_attention_sums_to_one():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(2, 15))
        tgt, src = undirected(n, random_pairs(rng, n, 2 * n))
        gat = make_gat(4, 2, 3, seed=trial)
        x = torch.from_numpy(rng.normal(size=(n, 4)))
        for layer in range(2):
            _, att = gat.layer_attention(x, layer, tgt, src)
            sums = torch.zeros(3, n, dtype=torch.float64).index_add(1, tgt, att)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9, rtol=0)


def test_identical_embeddings_give_uniform_weights():
    pairs = [(0, 1), (0, 2), (0, 3)]
    tgt, src = undirected(4, pairs)
    gat = make_gat(3, 1, 2)
    emb = torch.ones(3, 4, dtype=torch.float64)
    w = attention_coefficients(gat, 0, 1, emb, tgt, src, 0)
    assert set(w) == {0, 1, 2, 3}
    for v in w.values():
        assert abs(v - 0.25) < 1e-12


def test_isolated_node_attends_to_itself():
    tgt, src = undirected(3, [(0, 1)])
    gat = make_gat(3, 1, 1)
    emb = torch.randn(3, 3, dtype=torch.float64)
    assert attention_coefficients(gat, 0, 0, emb, tgt, src, 2) == {2: 1.0}


def test_star_matches_hand_softmax():
    rng = np.random.default_rng(1)
    tgt, src = undirected(3, [(0, 1), (0, 2)])
    gat = make_gat(2, 1, 1, seed=4)
    emb = rng.normal(size=(2, 3))
    W = gat.weight[0, 0].detach().numpy()
    a = gat.attn[0, 0].detach().numpy()
    w = attention_coefficients(gat, 0, 0, torch.from_numpy(emb), tgt, src, 0)
    z = [W @ emb[:, j] for j in range(3)]
    e = {j: math.exp(leaky(float(a[:2] @ z[0] + a[2:] @ z[j]))) for j in (0, 1, 2)}
    total = sum(e.values())
    for j in (0, 1, 2):
        assert abs(w[j] - e[j] / total) < 1e-12


def test_identity_fixed_point_on_single_node():
    gat = GAT(3, 2, 2)
    with torch.no_grad():
        gat.weight.copy_(torch.eye(3, dtype=torch.float64).expand(2, 2, 3, 3))
        gat.attn.zero_()
    tgt, src = undirected(1, [])
    rho0 = torch.tensor([[1.5], [-2.0], [0.3]], dtype=torch.float64)
    assert torch.equal(gat(rho0, tgt, src), rho0)


def test_two_node_path_matches_dense_loops():
    gat = make_gat(3, 1, 1, seed=2)
    tgt, src = undirected(2, [(0, 1)])
    rho0 = np.random.default_rng(3).normal(size=(3, 2))
    out = gat(torch.from_numpy(rho0), tgt, src).detach().numpy()
    ref = dense_layer(rho0.T, gat.weight[0, 0].detach().numpy(), gat.attn[0, 0].detach().numpy(),
                      {0: [0, 1], 1: [1, 0]})
    np.testing.assert_allclose(out, ref.T, atol=1e-12)


def test_multilayer_multihead_matches_dense_loops():
    rng = np.random.default_rng(5)
    n = 7
    pairs = random_pairs(rng, n, 10)
    tgt, src = undirected(n, pairs)
    nbrs = {c: [c] + [v for u, v in pairs if u == c] + [u for u, v in pairs if v == c] for c in range(n)}
    gat = make_gat(4, 3, 2, seed=6)
    rho0 = rng.normal(size=(4, n))
    x = rho0.T
    layers = []
    for i in range(3):
        heads = [dense_layer(x, gat.weight[i, h].detach().numpy(), gat.attn[i, h].detach().numpy(), nbrs)
                 for h in range(2)]
        x = np.mean(heads, axis=0)
        layers.append(x)
    ref = np.max(layers, axis=0).T
    np.testing.assert_allclose(gat(torch.from_numpy(rho0), tgt, src).detach().numpy(), ref, atol=1e-12)


def test_zero_input_gives_zero_output():
    tgt, src = undirected(4, [(0, 1), (1, 2)])
    out = make_gat(3, 3, 4)(torch.zeros(3, 4, dtype=torch.float64), tgt, src)
    assert torch.count_nonzero(out) == 0


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    for trial in range(5):
        n = int(rng.integers(3, 21))
        pairs = random_pairs(rng, n, 2 * n)
        perm = rng.permutation(n)  # new label of old node i is perm[i]
        gat = make_gat(4, 2, 2, seed=trial)
        rho0 = rng.normal(size=(4, n))
        out = gat(torch.from_numpy(rho0), *undirected(n, pairs)).detach().numpy()
        permuted_rho = np.empty_like(rho0)
        permuted_rho[:, perm] = rho0
        out_p = gat(torch.from_numpy(permuted_rho), *undirected(n, [(perm[u], perm[v]) for u, v in pairs]))
        np.testing.assert_allclose(out_p.detach().numpy()[:, perm], out, atol=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    n = 8
    tgt, src = undirected(n, random_pairs(rng, n, 12))
    gat = make_gat(4, 2, 2, seed=9)
    rho0 = torch.from_numpy(rng.normal(size=(4, n)))
    proj = torch.from_numpy(rng.normal(size=(4, n)))
    loss = lambda: (gat(rho0, tgt, src) * proj).sum()
    loss().backward()
    h = 1e-5
    for param in (gat.weight, gat.attn):
        analytic = param.grad.clone()
        numeric = torch.zeros_like(param)
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            down = loss().item()
            flat[i] = old
            numeric.view(-1)[i] = (up - down) / (2 * h)
        rel = (analytic - numeric).norm() / max(numeric.norm(), 1e-12)
        assert rel <= 1e-4


def test_zero_layers_is_identity():
    tgt, src = undirected(3, [(0, 1)])
    rho0 = torch.randn(2, 3, dtype=torch.float64)
    assert torch.equal(GAT(2, 0, 4)(rho0, tgt, src), rho0)


def test_non_finite_raises_with_location():
    gat = make_gat(2, 2, 2)
    with torch.no_grad():
        gat.weight[1, 1].fill_(1e308)
    tgt, src = undirected(2, [(0, 1)])
    with pytest.raises(GatNumericalError) as err:
        gat(torch.ones(2, 2, dtype=torch.float64) * 1e10, tgt, src)
    assert err.value.layer == 2 and err.value.head == 2
