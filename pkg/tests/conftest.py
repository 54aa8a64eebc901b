import pytest
import torch


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


def fd_gradcheck(loss_fn, params, eps=1e-6, rtol=1e-4):
    """Central finite differences against autograd, elementwise.

    Returns the worst relative error seen.  `loss_fn` must rebuild the
    forward pass on every call.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + eps
                fp = float(loss_fn())
                flat[k] = orig - eps
                fm = float(loss_fn())
                flat[k] = orig
            fd = (fp - fm) / (2 * eps)
            ag = gflat[k].item()
            rel = abs(fd - ag) / max(abs(fd), abs(ag), 1e-6)
            worst = max(worst, rel)
            assert rel <= rtol, (
                f"grad mismatch at param element {k}: fd={fd} autograd={ag}")
    return worst
