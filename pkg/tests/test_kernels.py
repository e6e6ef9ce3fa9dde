import numpy as np
import pytest

from carformer import kernels


def test_backend_is_reported():
    assert kernels.BACKEND in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


@pytest.mark.skipif(kernels.COMPILED is None, reason="compiled kernels not built")
@pytest.mark.parametrize("rows,cols", [(1, 1), (3, 7), (257, 80)])
def test_compiled_kernels_match_numpy(rows, cols):
    rng = np.random.default_rng(rows * cols)
    x = rng.normal(scale=5.0, size=(rows, cols))
    gy = rng.normal(size=(rows, cols))
    gain, bias = rng.normal(size=cols), rng.normal(size=cols)
    c, p = kernels.COMPILED, kernels.PURE

    np.testing.assert_allclose(c["softmax_forward"](x), p["softmax_forward"](x), rtol=1e-13, atol=1e-15)
    y = p["softmax_forward"](x)
    np.testing.assert_allclose(c["softmax_backward"](y, gy), p["softmax_backward"](y, gy), atol=1e-13)

    for a, b in zip(c["layer_norm_forward"](x, gain, bias, 1e-5), p["layer_norm_forward"](x, gain, bias, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    _, xhat, rstd = p["layer_norm_forward"](x, gain, bias, 1e-5)
    for a, b in zip(c["layer_norm_backward"](gy, xhat, rstd, gain), p["layer_norm_backward"](gy, xhat, rstd, gain)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)


def test_softmax_handles_infinite_logits(backend):
    x = np.array([[-np.inf, 0.0, 1.0], [5.0, -np.inf, -np.inf]])
    y = kernels.softmax_forward(x)
    assert y[0, 0] == 0.0 and y[1, 1] == 0.0 and y[1, 0] == 1.0
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-15)


def test_env_var_forces_python_backend(tmp_path):
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "from carformer import kernels; print(kernels.BACKEND)"],
                         env={"CARFORMER_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True,
                         cwd=tmp_path, check=True)
    assert out.stdout.strip() == "python"
