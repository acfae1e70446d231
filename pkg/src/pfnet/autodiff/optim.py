from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """Adam with decoupled weight decay.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`` where the decay
    term uses the pre-update parameter.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, state: AdamWState | None = None):
        self.params = params
        self.state = state or AdamWState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m = st.m[name]
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data = p.data - st.lr * update - st.lr * st.weight_decay * p.data


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    AdamW(params, state=state).step()
