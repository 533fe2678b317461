import torch
from torch import nn

from save_avs.audio_adapter import AudioPE, ResidualAudioAdapter


def central_diff_check(module, loss, eps=1e-6, tol=1e-4):
    module.zero_grad()
    loss().backward()
    for name, p in module.named_parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        numeric = torch.empty_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss().item()
            flat[i] = orig - eps
            down = loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        scale = max(grad.abs().max().item(), 1e-5)
        assert (grad - numeric).abs().max().item() / scale <= tol, name


def stack(mode="last", n=4, dim=8, seed=0):
    torch.manual_seed(seed)
    return ResidualAudioAdapter(6, dim, 12, n, mode).double()


def test_pe_with_zero_mlp_is_identity():
    pe = AudioPE(8).double().zero_init_()
    f = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(pe(f), f)


def test_pe_of_zero_with_zero_biases_is_zero():
    pe = AudioPE(8).double()
    with torch.no_grad():
        pe.fc1.bias.zero_()
        pe.fc2.bias.zero_()
    assert torch.equal(pe(torch.zeros(1, 8, dtype=torch.float64)), torch.zeros(1, 8, dtype=torch.float64))


def test_pe_hidden_width_is_half():
    assert AudioPE(64).fc1.out_features == 32


def test_pe_gradients_match_central_differences():
    torch.manual_seed(1)
    pe = AudioPE(8).double()
    f = torch.randn(2, 8, dtype=torch.float64)
    w = torch.randn(2, 8, dtype=torch.float64)
    central_diff_check(pe, lambda: (pe(f) * w).sum())


def test_zero_init_unrolls_to_multiples():
    s = stack().zero_init_()
    with torch.no_grad():
        s.input_proj.weight.normal_()
        s.input_proj.bias.normal_()
    f_raw = torch.randn(5, 6, dtype=torch.float64)
    f_a = s.input_proj(f_raw)
    bundle = s(f_raw)
    assert len(bundle.injections) == 4
    for i, a in enumerate(bundle.injections, start=1):
        assert torch.equal(a, i * f_a)


def test_prompt_source_last_vs_sum():
    g = torch.Generator().manual_seed(2)
    for _ in range(20):
        f_a = torch.randn(3, 8, generator=g, dtype=torch.float64)
        last, total = stack("last").zero_init_(), stack("sum").zero_init_()
        assert torch.equal(last.prompt_source(last.stages(f_a)), 4 * f_a)
        torch.testing.assert_close(total.prompt_source(total.stages(f_a)), 10 * f_a,
                                   rtol=1e-15, atol=0)


def test_zero_audio_with_zero_biases_gives_zero_bundle():
    s = stack()
    with torch.no_grad():
        for m in s.modules():
            if isinstance(m, nn.Linear):
                m.bias.zero_()
    bundle = s(torch.zeros(2, 6, dtype=torch.float64))
    assert all(torch.equal(a, torch.zeros(2, 8, dtype=torch.float64)) for a in bundle.injections)
    assert torch.equal(bundle.prompt, torch.zeros(2, 1, 12, dtype=torch.float64))


def test_injection_count_independent_of_mode():
    for mode in ("last", "sum"):
        assert len(stack(mode, n=3)(torch.randn(1, 6, dtype=torch.float64)).injections) == 3


def test_project_prompt_zero_weights_and_shape():
    s = stack()
    out = s.project_prompt(torch.randn(1, 8, dtype=torch.float64))
    assert out.shape == (1, 1, 12)
    with torch.no_grad():
        for p in s.prompt_proj.parameters():
            p.zero_()
    assert torch.equal(s.project_prompt(torch.randn(1, 8, dtype=torch.float64)),
                       torch.zeros(1, 1, 12, dtype=torch.float64))


def test_project_prompt_gradients_match_central_differences():
    s = stack(seed=4)
    src = torch.randn(2, 8, dtype=torch.float64)
    w = torch.randn(2, 1, 12, dtype=torch.float64)
    central_diff_check(s.prompt_proj, lambda: (s.project_prompt(src) * w).sum())
