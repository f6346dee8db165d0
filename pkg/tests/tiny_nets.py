"""Small smooth networks for gradient checks."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from stcloud.trainer import g_loss


class TinyGenerator(nn.Module):
    """Two 3x3 convs over the stacked inputs, tanh output."""

    def __init__(self, T=3, C=3, hidden=4):
        super().__init__()
        self.c1 = nn.Conv2d(T * C, hidden, 3, padding=1)
        self.c2 = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, x):
        return torch.tanh(self.c2(torch.tanh(self.c1(x.flatten(1, 2)))))


class TinyCritic(nn.Module):
    """Conditional two-layer patch critic with smooth activations."""

    def __init__(self, cond_channels=9, hidden=4):
        super().__init__()
        self.c1 = nn.Conv2d(cond_channels + 3, hidden, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, cond, cand):
        return self.c2(F.softplus(self.c1(torch.cat([cond.flatten(1, 2), cand], dim=1))))


def gradient_check(lam=10.0, n_coords=20, seed=0):
    """Max relative error between f32 / f64 autograd gradients of the total
    generator loss and f64 central differences, over random coordinates."""
    torch.manual_seed(seed)
    G, D = TinyGenerator(), TinyCritic()
    cond = torch.rand(2, 3, 3, 8, 8) * 2 - 1
    # targets kept away from tanh's range so |real - fake| never hits the L1 kink
    real = torch.where(torch.rand(2, 3, 8, 8) < 0.5, -1.5, 1.5)

    def total(Gm, Dm, dtype):
        fake = Gm(cond.to(dtype))
        return g_loss(Dm, cond.to(dtype), real.to(dtype), fake, lam)[2]

    params = list(G.parameters())
    grads32 = torch.autograd.grad(total(G, D, torch.float32), params)

    G64, D64 = TinyGenerator().double(), TinyCritic().double()
    G64.load_state_dict({k: v.double() for k, v in G.state_dict().items()})
    D64.load_state_dict({k: v.double() for k, v in D.state_dict().items()})
    p64 = list(G64.parameters())
    grads64 = torch.autograd.grad(total(G64, D64, torch.float64), p64)

    gen = torch.Generator().manual_seed(seed + 1)
    err32 = err64 = 0.0
    h = 1e-5
    for _ in range(n_coords):
        i = int(torch.randint(len(p64), (1,), generator=gen))
        j = int(torch.randint(p64[i].numel(), (1,), generator=gen))
        flat = p64[i].data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = total(G64, D64, torch.float64).item()
            flat[j] = orig - h
            down = total(G64, D64, torch.float64).item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        a32 = grads32[i].view(-1)[j].item()
        a64 = grads64[i].view(-1)[j].item()
        scale = max(abs(numeric), 1e-4)
        err32 = max(err32, abs(a32 - numeric) / scale)
        err64 = max(err64, abs(a64 - numeric) / scale)
    return err32, err64
