"""Shared-trunk multi-target head: independence, sharing, shapes."""

import torch

from bayesmtr.encoder import DTYPE
from bayesmtr.mtr import AffineHead, DeepMTRHead, mtr_forward


def fresh_head(seed=0, aleatoric=True, d_latent=16, trunk=(32, 16, 8)) -> DeepMTRHead:
    head = DeepMTRHead(d_latent, trunk, aleatoric_head=aleatoric).to(DTYPE)
    head.init_weights(torch.Generator().manual_seed(seed))
    return head


class TestDeepMTRHead:
    def test_all_zero_weights_give_zero_outputs(self):
        head = DeepMTRHead(8, (4, 4, 4)).to(DTYPE)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        means, log_vars = head(torch.randn(8, dtype=DTYPE))
        assert torch.equal(means, torch.zeros(4, dtype=DTYPE))
        assert torch.equal(log_vars, torch.zeros(4, dtype=DTYPE))

    def test_head_independence(self):
        head = fresh_head(seed=1)
        z = torch.randn(16, dtype=DTYPE)
        base_means, _ = head(z)
        with torch.no_grad():
            head.mean_heads[2].weight.add_(1.0)
            head.mean_heads[2].bias.add_(0.5)
        new_means, _ = head(z)
        for i in (0, 1, 3):
            assert new_means[i] == base_means[i]
        assert new_means[2] != base_means[2]

    def test_bias_only_head_ignores_input(self):
        head = fresh_head(seed=2)
        with torch.no_grad():
            head.mean_heads[0].weight.zero_()
            head.mean_heads[0].bias.fill_(0.37)
        a, _ = head(torch.randn(16, dtype=DTYPE))
        b, _ = head(torch.randn(16, dtype=DTYPE))
        assert a[0].item() == b[0].item() == 0.37

    def test_gradient_flows_from_every_mean_to_trunk(self):
        head = fresh_head(seed=3)
        z = torch.randn(16, dtype=DTYPE)
        for i in range(4):
            head.zero_grad()
            means, _ = head(z)
            means[i].backward()
            grad_norm = sum(
                linear.weight.grad.abs().sum().item() for linear in head.trunk
            )
            assert grad_norm > 0.0

    def test_head_gradient_does_not_leak_across_targets(self):
        head = fresh_head(seed=4)
        z = torch.randn(16, dtype=DTYPE)
        means, _ = head(z)
        means[1].backward()
        assert head.mean_heads[1].weight.grad.abs().sum() > 0
        for i in (0, 2, 3):
            assert head.mean_heads[i].weight.grad is None or (
                head.mean_heads[i].weight.grad.abs().sum() == 0
            )

    def test_output_shapes(self):
        for aleatoric in (True, False):
            head = fresh_head(seed=5, aleatoric=aleatoric)
            means, log_vars = mtr_forward(torch.randn(16, dtype=DTYPE), head)
            assert means.shape == (4,)
            assert log_vars.shape == (4,)

    def test_log_vars_clamped(self):
        head = fresh_head(seed=6)
        with torch.no_grad():
            head.log_var_heads[0].bias.fill_(100.0)
            head.log_var_heads[1].bias.fill_(-100.0)
        _, log_vars = head(torch.randn(16, dtype=DTYPE))
        assert log_vars[0].item() == 3.0
        assert log_vars[1].item() == -10.0

    def test_fallback_log_vars_used_without_aleatoric_head(self):
        head = fresh_head(seed=7, aleatoric=False)
        with torch.no_grad():
            head.fallback_log_vars.copy_(torch.tensor([-1.0, -2.0, -3.0, -4.0]))
        _, log_vars = head(torch.randn(16, dtype=DTYPE))
        torch.testing.assert_close(
            log_vars, torch.tensor([-1.0, -2.0, -3.0, -4.0], dtype=DTYPE)
        )


class TestAffineHead:
    def test_parameter_count(self):
        head = AffineHead(d_latent=128)
        n = sum(p.numel() for p in head.parameters())
        assert n == 128 * 4 + 4

    def test_is_affine(self):
        head = AffineHead(d_latent=8).to(DTYPE)
        head.init_weights(torch.Generator().manual_seed(8))
        z1 = torch.randn(8, dtype=DTYPE)
        z2 = torch.randn(8, dtype=DTYPE)
        m1, _ = head(z1)
        m2, _ = head(z2)
        m_mid, _ = head((z1 + z2) / 2)
        torch.testing.assert_close(m_mid, (m1 + m2) / 2)
