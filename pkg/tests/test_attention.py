import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtscene.attention import (FastAttention, fast_attention, fast_attention_oracle,
                               l2_normalize_rows)

from helpers import tensor_grad_max_rel_err


def rand(shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = l2_normalize_rows(torch.tensor([[3.0, 4.0]]))
        assert torch.allclose(out, torch.tensor([[0.6, 0.8]]))

    def test_zero_row_stays_zero(self):
        out = l2_normalize_rows(torch.tensor([[0.0, 0.0]]))
        assert torch.equal(out, torch.tensor([[0.0, 0.0]]))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_row_norms_zero_or_one(self, seed):
        x = rand((17, 5), seed=seed)
        x[3] = 0  # plant a degenerate row
        norms = torch.linalg.vector_norm(l2_normalize_rows(x), dim=-1)
        assert all(abs(n) < 1e-6 or abs(n - 1) < 1e-6 for n in norms.tolist())

    def test_gradient_finite_at_zero_row(self):
        x = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
        l2_normalize_rows(x).sum().backward()
        assert torch.isfinite(x.grad).all()


class TestFastAttention:
    def test_single_position_identity(self):
        # cosine similarity of a vector with itself is 1; n = 1
        v = torch.tensor([[2.0, -1.0, 0.5]])
        p = torch.tensor([[3.0, 7.0]])
        y = fast_attention(v, v, p)
        assert torch.allclose(y, p, atol=1e-6)

    def test_zero_query_rows_give_zero_output(self):
        q = rand((6, 4), seed=1)
        q[2] = 0
        q[5] = 0
        y = fast_attention(q, rand((6, 4), seed=2), rand((6, 3), seed=3))
        assert torch.equal(y[2], torch.zeros(3, dtype=y.dtype))
        assert torch.equal(y[5], torch.zeros(3, dtype=y.dtype))

    def test_matches_oracle_on_stated_sizes(self):
        q = rand((1024, 32), seed=4)
        k = rand((1024, 32), seed=5)
        v = rand((1024, 64), seed=6)
        diff = (fast_attention(q, k, v) - fast_attention_oracle(q, k, v)).abs().max()
        assert diff < 1e-5

    def test_dimension_mismatch_reports_shapes(self):
        with pytest.raises(ValueError, match=r"\(4, 3\).*\(4, 2\)"):
            fast_attention(torch.zeros(4, 3), torch.zeros(4, 2), torch.zeros(4, 5))
        with pytest.raises(ValueError, match="position mismatch"):
            fast_attention(torch.zeros(4, 3), torch.zeros(4, 3), torch.zeros(5, 2))

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 64), st.integers(1, 8))
    @settings(max_examples=25, deadline=None)
    def test_row_scale_invariance(self, seed, n, cp):
        # multiplying raw Q or K rows by positive scalars cannot change Y
        q, k = rand((n, cp), seed=seed), rand((n, cp), seed=seed + 1)
        v = rand((n, cp + 2), seed=seed + 2)
        g = torch.Generator().manual_seed(seed + 3)
        scales = torch.rand(n, 1, generator=g, dtype=torch.float64) * 5 + 0.1
        base = fast_attention(q, k, v)
        assert (fast_attention(q * scales, k, v) - base).abs().max() < 1e-5
        assert (fast_attention(q, k * scales, v) - base).abs().max() < 1e-5


class TestFastAttentionOracle:
    def test_orthonormal_rows_halve_values(self):
        # Qh = Kh = I2 rows -> affinity is the identity, Y = V / n with n = 2
        eye = torch.eye(2)
        v = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
        assert torch.allclose(fast_attention_oracle(eye, eye, v), v / 2)

    def test_affinity_entries_bounded_by_cosine(self):
        q = l2_normalize_rows(rand((64, 8), seed=9))
        k = l2_normalize_rows(rand((64, 8), seed=10))
        affinity = q @ k.T
        assert affinity.max() <= 1 + 1e-9
        assert affinity.min() >= -1 - 1e-9

    def test_association_orders_agree(self):
        q, k, v = rand((128, 16), seed=11), rand((128, 16), seed=12), rand((128, 8), seed=13)
        diff = (fast_attention(q, k, v) - fast_attention_oracle(q, k, v)).abs().max()
        assert diff < 1e-5


def test_gradients_match_finite_differences():
    q, k, v = rand((5, 3), seed=20), rand((5, 3), seed=21), rand((5, 4), seed=22)
    err = tensor_grad_max_rel_err(lambda a, b, c: fast_attention(a, b, c).sum(),
                                  [q, k, v])
    assert err < 1e-4


def test_module_shape_and_determinism():
    torch.manual_seed(0)
    mod = FastAttention(8, 4)
    x = torch.randn(2, 8, 6, 5)
    y1, y2 = mod(x), mod(x)
    assert y1.shape == (2, 8, 6, 5)
    assert torch.equal(y1, y2)


def test_module_rejects_oversized_reduction():
    with pytest.raises(ValueError, match="attn_channels"):
        FastAttention(4, 8)
