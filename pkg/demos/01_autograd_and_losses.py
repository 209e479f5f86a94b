"""Walk through the autograd engine and the three distillation losses.

Run with ``python demos/01_autograd_and_losses.py``. Takes a few seconds.
"""

import numpy as np

from okd_forge import distill, nets
from okd_forge import tensor as T
from okd_forge.oodgen import Augmentor


def numeric_grad(f, a, h=1e-5):
    g = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        old = a[idx]
        a[idx] = old + h
        up = f(a)
        a[idx] = old - h
        down = f(a)
        a[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def main():
    rng = np.random.default_rng(0)

    print("1. A tensor records how it was made; backward() walks that record in reverse.")
    w = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = rng.normal(size=(5, 4))
    loss = T.sum(T.relu(T.matmul(x, w)))
    loss.backward()
    fd = numeric_grad(lambda a: T.sum(T.relu(T.matmul(x, a))).item(), w.data.copy())
    print(f"   loss={loss.item():.6f}  max |autograd - finite diff| = {np.abs(w.grad - fd).max():.2e}")

    print("\n2. Temperature softens a distribution without moving its peak.")
    z = np.array([[2.0, 1.0, 0.1]])
    for pi in (1.0, 4.0, 16.0):
        p = T.softmax_temp(z, pi).data[0]
        print(f"   pi={pi:>4}: {np.array2string(p, precision=4)}  argmax={p.argmax()}")

    print("\n3. Build a 4-class student and a wider teacher for 16x16 RGB inputs.")
    shape = (3, 16, 16)
    student = nets.build(nets.preset("student2d", 4, shape, seed=1))
    teacher = nets.build(nets.preset("teacher2d", 4, shape, seed=2))
    print(f"   student: {student.param_count} parameters, teacher: {teacher.param_count}")

    xb = rng.normal(size=(8, *shape))
    yb = np.arange(8) % 4
    cfg = distill.DistillConfig(lam=0.1)
    kd = distill.kd_loss(xb, yb, student, teacher, cfg).item()
    print("\n4. The losses on one batch (lambda=0.1, CE at pi=1, KL at pi=4):")
    print(f"   kd              = {kd:.6f}")
    for kind in ("identity", "cutmix_mixup", "jigsaw"):
        okd = distill.okd_loss(xb, yb, student, teacher, Augmentor(kind), cfg, np.random.default_rng(3)).item()
        print(f"   okd[{kind:<12}] = {okd:.6f}  (extra KL on A(x): {okd - kd:.6f})")
    kl = distill.distill_term(student(T.Tensor(xb)), teacher, T.Tensor(xb), cfg).item()
    print(f"   with A = identity the extra term is exactly 0.9 * KL(x) = {0.9 * kl:.6f}")

    same = distill.kd_loss(xb, yb, student, student, cfg).item()
    ce = distill.cross_entropy(yb, student(T.Tensor(xb))).item()
    print(f"\n5. A student distilled from itself pays only lambda * CE: {same:.9f} vs {0.1 * ce:.9f}")


if __name__ == "__main__":
    main()
