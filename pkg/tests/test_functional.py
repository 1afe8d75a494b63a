import math

import numpy as np
import pytest

from lgc3d.functional import Conv3dSpec
from lgc3d.functional import avg_pool3d
from lgc3d.functional import batch_norm
from lgc3d.functional import conv3d
from lgc3d.functional import conv3d_forward
from lgc3d.functional import cross_entropy
from lgc3d.functional import fold_batch_norm
from lgc3d.functional import global_avg_pool
from lgc3d.functional import linear
from lgc3d.functional import relu
from lgc3d.functional import softmax_rows
from lgc3d.tensor import Tensor
from lgc3d.tensor import parameter
from lgc3d.utils import LabelRangeError
from lgc3d.utils import ShapeError


def reference_conv3d(x, w, stride, padding):
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    n, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    od = (xp.shape[2] - kd) // sd + 1
    oh = (xp.shape[3] - kh) // sh + 1
    ow = (xp.shape[4] - kw) // sw + 1
    out = np.zeros((x.shape[0], n, od, oh, ow))
    for b in range(x.shape[0]):
        for k in range(n):
            for i in range(od):
                for j in range(oh):
                    for m in range(ow):
                        window = xp[b, :, i * sd : i * sd + kd, j * sh : j * sh + kh, m * sw : m * sw + kw]
                        out[b, k, i, j, m] = (window * w[k]).sum()
    return out


@pytest.mark.parametrize(
    "kernel,stride,padding",
    [
        ((3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((3, 2, 3), (1, 1, 1), (1, 0, 1)),
        ((2, 3, 3), (2, 1, 2), (0, 1, 1)),
    ],
)
def test_conv3d_matches_loops(rng, kernel, stride, padding):
    """Test the windowed convolution against a direct loop implementation."""
    x = rng.standard_normal((2, 3, 5, 4, 5))
    w = rng.standard_normal((4, 3, *kernel))
    np.testing.assert_allclose(conv3d_forward(x, w, stride, padding), reference_conv3d(x, w, stride, padding))


def test_conv3d_output_dims(rng):
    """Test that a padded 3x3x3 convolution keeps the spatial size."""
    spec = Conv3dSpec(in_channels=2, out_kernels=5)
    out = conv3d(Tensor(rng.standard_normal((1, 2, 6, 7, 7))), Tensor(rng.standard_normal(spec.weight_shape)), spec)
    assert out.shape == (1, 5, 6, 7, 7)
    assert spec.output_dims((6, 7, 7)) == (6, 7, 7)


def test_conv3d_gradients(rng):
    """Test that the convolution gradient of a sum equals the windowed input sums."""
    spec = Conv3dSpec(in_channels=1, out_kernels=1, kernel=1, padding=0)
    x = parameter(rng.standard_normal((1, 1, 2, 2, 2)))
    w = parameter(np.full((1, 1, 1, 1, 1), 2.0))
    conv3d(x, w, spec).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2, 2), 2.0))
    np.testing.assert_allclose(w.grad.reshape(-1), [x.data.sum()])


def test_conv3d_shape_errors(rng):
    """Test that channel, weight and size mismatches raise shape errors."""
    spec = Conv3dSpec(in_channels=2, out_kernels=3)
    w = Tensor(rng.standard_normal(spec.weight_shape))
    with pytest.raises(ShapeError, match="channel axis"):
        conv3d(Tensor(np.ones((1, 3, 4, 4, 4))), w, spec)
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((3, 2, 1, 1, 1))), spec)
    with pytest.raises(ShapeError, match="depth"):
        conv3d(Tensor(np.ones((1, 2, 1, 4, 4))), w, Conv3dSpec(2, 3, padding=0))
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.ones((2, 4, 4, 4))), w, spec)


def test_conv3d_spec_validation():
    """Test that degenerate convolution geometries are refused."""
    with pytest.raises(ShapeError):
        Conv3dSpec(in_channels=0, out_kernels=1)
    with pytest.raises(ShapeError):
        Conv3dSpec(in_channels=1, out_kernels=1, stride=0)
    with pytest.raises(ShapeError):
        Conv3dSpec(in_channels=1, out_kernels=1, kernel=(3, 3))


def test_avg_pool3d():
    """Test average pooling values and its evenly spread gradient."""
    x = parameter(np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2))
    out = avg_pool3d(x, 2)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == pytest.approx(3.5)
    out.sum().backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2, 2), 0.125))


def test_avg_pool3d_window_too_large():
    """Test that a window larger than an axis raises a shape error."""
    with pytest.raises(ShapeError):
        avg_pool3d(Tensor(np.ones((1, 1, 1, 4, 4))), 2)


def test_batch_norm_training_updates_running_stats():
    """Test that training-mode normalization standardizes channels and moves the running statistics."""
    x = Tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(2, 1, 2, 1, 1))
    running_mean = np.zeros(1)
    running_var = np.ones(1)
    out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), running_mean, running_var, training=True)
    assert out.data.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.data.std() == pytest.approx(1.0, abs=1e-5)
    assert running_mean[0] == pytest.approx(0.4)
    # unbiased variance of [1, 3, 5, 7] is 20 / 3
    assert running_var[0] == pytest.approx(0.9 + 0.1 * 20.0 / 3.0)


def test_batch_norm_eval_matches_fold():
    """Test that evaluation-mode normalization equals the folded per-channel affine map."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 2, 2, 2))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), mean.copy(), var.copy(), training=False)
    scale, shift = fold_batch_norm(gamma, beta, mean, var)
    np.testing.assert_allclose(out.data, x * scale.reshape(1, 3, 1, 1, 1) + shift.reshape(1, 3, 1, 1, 1))


def test_batch_norm_channel_mismatch():
    """Test that per-channel parameters must match the channel axis."""
    with pytest.raises(ShapeError, match="channel axis"):
        batch_norm(Tensor(np.ones((2, 3, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)


def test_relu():
    """Test that negative entries are zeroed and receive no gradient."""
    x = parameter(np.array([-1.0, 0.5, 2.0]))
    out = relu(x)
    np.testing.assert_allclose(out.data, [0.0, 0.5, 2.0])
    out.sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])


def test_softmax_rows():
    """Test that equal logits give a uniform row and every row sums to one."""
    np.testing.assert_allclose(softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    out = softmax_rows(Tensor(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]])))
    np.testing.assert_allclose(out.data.sum(axis=1), [1.0, 1.0])
    assert np.isfinite(out.data).all()


def test_cross_entropy_uniform_logits():
    """Test that uniform logits give a loss of ln K."""
    loss = cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 4]))
    assert loss.item() == pytest.approx(math.log(5))


def test_cross_entropy_gradient():
    """Test that the gradient is the softmax minus the one-hot target, averaged over the batch."""
    logits = parameter(np.zeros((2, 2)))
    cross_entropy(logits, np.array([0, 1])).backward()
    np.testing.assert_allclose(logits.grad, [[-0.25, 0.25], [0.25, -0.25]])


def test_cross_entropy_label_range():
    """Test that labels outside [0, K) raise a label range error."""
    with pytest.raises(LabelRangeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(LabelRangeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))


def test_linear():
    """Test the affine map and its bias gradient."""
    x = Tensor(np.array([[1.0, 2.0]]))
    w = parameter(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    b = parameter(np.array([0.5, 0.0, -1.0]))
    out = linear(x, w, b)
    np.testing.assert_allclose(out.data, [[1.5, 2.0, 2.0]])
    out.sum().backward()
    np.testing.assert_allclose(b.grad, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(w.grad, [[1.0, 2.0]] * 3)
    with pytest.raises(ShapeError):
        linear(x, Tensor(np.ones((3, 3))))


def test_global_avg_pool():
    """Test that global pooling averages every axis after the channel axis."""
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 2, 2, 2, 2))
    np.testing.assert_allclose(global_avg_pool(x).data, [[3.5, 11.5]])
    with pytest.raises(ShapeError):
        global_avg_pool(Tensor(np.ones((2, 3))))
