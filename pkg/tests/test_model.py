import numpy as np
import pytest
import torch
from hypothesis import example, given, settings, strategies as st
from torch import nn

from poisonforge import model as M
from poisonforge.errors import FormatError, StateError, UnsupportedOperationError


def central_diff(fn, x, h=1e-4):
    """Central finite differences of a scalar function of a float64 tensor."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def test_mlp_zero_image_gives_finite_logits():
    b = M.build_bundle("MLP", (3, 8, 8), D=16, P=16, K=2, projector_layers=3, with_momentum=False, seed=0)
    out = M.forward(b, torch.zeros(1, 3, 8, 8), heads={"logits"})
    assert out["logits"].shape == (1, 2)
    assert torch.isfinite(out["logits"]).all()


@pytest.mark.parametrize("arch", ["TinyConvNet", "MLP"])
def test_same_seed_same_parameters(arch):
    a = M.build_bundle(arch, (3, 8, 8), D=8, P=8, K=3, seed=4, width=4)
    b = M.build_bundle(arch, (3, 8, 8), D=8, P=8, K=3, seed=4, width=4)
    c = M.build_bundle(arch, (3, 8, 8), D=8, P=8, K=3, seed=5, width=4)
    assert M.param_digest(a) == M.param_digest(b)
    assert M.param_digest(a) != M.param_digest(c)


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expect = torch.rand(3)
    torch.manual_seed(0)
    M.build_bundle("MLP", (1, 4, 4), D=4, P=4, K=2, seed=9)
    assert torch.equal(torch.rand(3), expect)


def test_momentum_copy_bit_equal_at_init():
    b = M.build_bundle("TinyConvNet", (3, 8, 8), D=8, P=8, K=2, with_momentum=True, seed=1, width=4)
    for mom, src in b.momentum_pairs():
        for pm, ps in zip(mom.state_dict().values(), src.state_dict().values()):
            assert pm.shape == ps.shape and torch.equal(pm, ps)


def test_projector_layers_and_linear_classifier():
    b = M.build_bundle("MLP", (1, 4, 4), D=6, P=5, K=3, projector_layers=3, seed=0)
    linears = [m for m in b.projector if isinstance(m, nn.Linear)]
    assert len(linears) == 3 and linears[-1].out_features == 5
    assert isinstance(b.classifier, nn.Linear) and b.classifier.in_features == 6


@pytest.mark.parametrize("kw", [dict(D=0), dict(P=0), dict(K=0), dict(image_shape=(3, 8)), dict(arch="ResNet")])
def test_build_argument_errors(kw):
    args = dict(arch="MLP", image_shape=(3, 8, 8), D=4, P=4, K=2)
    args.update(kw)
    with pytest.raises(ValueError):
        M.build_bundle(**args)


def test_forward_heads_shapes(tiny_bundle):
    x = torch.rand(5, 3, 8, 8)
    out = M.forward(tiny_bundle, x, heads={"rep", "proj", "logits"})
    assert out["rep"].shape == (5, 16)
    assert out["proj"].shape == (5, 8)
    assert out["logits"].shape == (5, 4)


def test_forward_duplicate_rows_identical(tiny_bundle):
    x = torch.rand(3, 3, 8, 8)
    x[2] = x[0]
    out = M.forward(tiny_bundle, x, heads={"rep", "proj", "logits"})
    for v in out.values():
        assert torch.equal(v[0], v[2])


def test_forward_rep_only_is_lazy(tiny_bundle):
    calls = {"projector": 0, "classifier": 0}

    def hook(name):
        def f(*_):
            calls[name] += 1
        return f

    tiny_bundle.projector.register_forward_hook(hook("projector"))
    tiny_bundle.classifier.register_forward_hook(hook("classifier"))
    M.forward(tiny_bundle, torch.rand(2, 3, 8, 8), heads={"rep"})
    assert calls == {"projector": 0, "classifier": 0}
    M.forward(tiny_bundle, torch.rand(2, 3, 8, 8), heads={"logits"})
    assert calls == {"projector": 0, "classifier": 1}


def test_forward_empty_batch(tiny_bundle):
    out = M.forward(tiny_bundle, torch.zeros(0, 3, 8, 8), heads={"rep", "logits"})
    assert out["rep"].shape == (0, 16) and out["logits"].shape == (0, 4)


def test_forward_shape_mismatch(tiny_bundle):
    with pytest.raises(ValueError):
        M.forward(tiny_bundle, torch.zeros(2, 3, 9, 9))
    with pytest.raises(ValueError):
        M.forward(tiny_bundle, torch.zeros(2, 3, 8, 8), heads={"bogus"})


def test_forward_has_no_side_effects(tiny_bundle):
    before = M.param_digest(tiny_bundle)
    M.forward(tiny_bundle, torch.rand(4, 3, 8, 8), heads={"rep", "proj", "logits"})
    assert M.param_digest(tiny_bundle) == before


def test_forward_permutation_equivariant(tiny_bundle):
    x = torch.rand(6, 3, 8, 8)
    perm = torch.tensor([5, 2, 0, 1, 4, 3])
    a = M.forward(tiny_bundle, x, heads={"rep", "proj", "logits"})
    b = M.forward(tiny_bundle, x[perm], heads={"rep", "proj", "logits"})
    for h in a:
        torch.testing.assert_close(a[h][perm], b[h], rtol=1e-5, atol=1e-6)


def _linear_bundle(W):
    enc = nn.Sequential(nn.Flatten(), nn.Linear(W.shape[1], W.shape[0], bias=False)).double()
    with torch.no_grad():
        enc[1].weight.copy_(W)
    d = W.shape[0]
    return M.ModelBundle(enc, nn.Identity(), nn.Linear(d, 2).double(), {"D": d, "P": d, "K": 2},
                         {"image_shape": [1, 2, 3]})


def test_grad_linear_closed_form():
    W = torch.randn(4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    b = _linear_bundle(W)
    x = torch.rand(3, 1, 2, 3, dtype=torch.float64)
    g = M.grad_wrt_input(b, x, lambda o: o.rep.sum())
    expect = W.sum(dim=0).reshape(1, 2, 3)
    for row in g:
        torch.testing.assert_close(row, expect)


def test_grad_constant_loss_is_zero(tiny_bundle):
    g = M.grad_wrt_input(tiny_bundle, torch.rand(2, 3, 8, 8), lambda o: torch.tensor(3.0))
    assert torch.count_nonzero(g) == 0 and g.shape == (2, 3, 8, 8)


def test_grad_non_tensor_closure_unsupported(tiny_bundle):
    with pytest.raises(UnsupportedOperationError):
        M.grad_wrt_input(tiny_bundle, torch.rand(2, 3, 8, 8), lambda o: float(o.rep.detach().sum()))


def test_grad_leaves_parameters_untouched(tiny_bundle):
    before = M.param_digest(tiny_bundle)
    M.grad_wrt_input(tiny_bundle, torch.rand(2, 3, 8, 8), lambda o: o.logits.sum())
    assert M.param_digest(tiny_bundle) == before
    assert all(p.grad is None for p in tiny_bundle.parameters())


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 10_000), arch=st.sampled_from(["TinyConvNet", "MLP"]),
       head=st.sampled_from(["rep", "proj", "logits"]))
@example(seed=266, arch="TinyConvNet", head="proj")
def test_grad_matches_finite_differences(seed, arch, head):
    b = M.build_bundle(arch, (2, 4, 4), D=5, P=4, K=3, projector_layers=2, seed=seed, width=3, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 2, 4, 4, dtype=torch.float64, generator=gen)
    w = torch.randn(2, {"rep": 5, "proj": 4, "logits": 3}[head], dtype=torch.float64, generator=gen)

    def loss(o):
        return (torch.tanh(o[head]) * w).sum()

    g = M.grad_wrt_input(b, x, loss)
    with torch.no_grad():
        # the encoder is piecewise linear; a small step keeps the stencil off ReLU and max-pool kinks
        fd = central_diff(lambda z: loss(M.Outputs(b, z)), x.clone(), h=1e-7)
    err = (g - fd).norm() / max(fd.norm().item(), 1e-12)
    assert err < 1e-3


def test_momentum_update_endpoints():
    b = M.build_bundle("MLP", (1, 2, 2), D=2, P=2, K=2, with_momentum=True, seed=0)
    with torch.no_grad():
        for p in b.encoder.parameters():
            p.add_(1.0)
    mom_before = M.param_digest(b.momentum_encoder)
    M.momentum_update(b, 1.0)
    assert M.param_digest(b.momentum_encoder) == mom_before
    M.momentum_update(b, 0.0)
    assert M.param_digest(b.momentum_encoder) == M.param_digest(b.encoder)


def test_momentum_update_arithmetic():
    b = M.build_bundle("MLP", (1, 2, 2), D=2, P=2, K=2, with_momentum=True, seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in b.encoder.parameters():
            p.fill_(1.0)
        for p in b.momentum_encoder.parameters():
            p.fill_(0.0)
    M.momentum_update(b, 0.999)
    for p in b.momentum_encoder.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.001))


def test_momentum_update_errors(tiny_bundle):
    with pytest.raises(StateError):
        M.momentum_update(tiny_bundle, 0.5)
    b = M.build_bundle("MLP", (1, 2, 2), D=2, P=2, K=2, with_momentum=True)
    with pytest.raises(ValueError):
        M.momentum_update(b, 1.5)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    b = M.build_bundle("TinyConvNet", (3, 8, 8), D=8, P=6, K=3, with_momentum=True, seed=2, width=4,
                       with_predictor=True)
    with torch.no_grad():
        for p in b.parameters():
            p.add_(0.125)
    path = tmp_path / "m.ckpt"
    M.save_bundle(b, path, extra={"note": 1})
    c = M.load_bundle(path)
    assert M.param_digest(b) == M.param_digest(c)
    assert c.arch == b.arch and c.has_momentum and c.predictor is not None


def test_load_rejects_non_checkpoint(tmp_path):
    from poisonforge.data import make_toy_dataset, save_dataset

    p = tmp_path / "d.pf"
    save_dataset(make_toy_dataset(2, 2, 8, 0), p)
    with pytest.raises(FormatError):
        M.load_bundle(p)


def test_parameter_set_round_trip(tiny_bundle):
    ps = M.ParameterSet.from_module(tiny_bundle)
    assert ps.names == list(tiny_bundle.state_dict())
    other = M.build_bundle("TinyConvNet", (3, 8, 8), D=16, P=8, K=4, projector_layers=2, seed=7, width=8)
    ps.load_into(other)
    assert M.param_digest(other) == M.param_digest(tiny_bundle)
    with pytest.raises(ValueError):
        M.ParameterSet(["a"], [np.array([np.nan])])
