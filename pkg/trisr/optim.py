from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from trisr.exceptions import MissingGradient
from trisr.networks import ParameterSet
from trisr.schemas import Owner, TrainingConfig


@dataclass
class AdamState:
    """First/second moment estimates per parameter name plus the step counter."""

    owner: Owner
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "AdamState":
        return cls(
            owner=params.owner,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"m/{name}": arr.copy() for name, arr in self.m.items()}
        out.update({f"v/{name}": arr.copy() for name, arr in self.v.items()})
        return out

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"m/{name}"], dtype=self.m[name].dtype).copy()
            self.v[name] = np.asarray(arrays[f"v/{name}"], dtype=self.v[name].dtype).copy()
        self.t = t


def adam_step(
    params: ParameterSet,
    grads: Optional[Mapping[str, Optional[np.ndarray]]],
    state: AdamState,
    cfg: TrainingConfig,
) -> None:
    """One bias-corrected Adam update of every parameter in ``params``.

    Args:
        params: Parameters to update in place
        grads: Gradient per parameter name; ``None`` reads each tensor's ``grad``
        state: Moments for ``params``, advanced by one step
        cfg: Supplies gamma, beta1, beta2 and adam_eps
    """
    if grads is None:
        grads = params.grads()
    missing = [name for name in params.names() if grads.get(name) is None]
    if missing:
        raise MissingGradient(f"No gradient for {len(missing)} {params.owner.value} parameter(s), e.g. {missing[0]}")

    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data = (p.data - cfg.gamma * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype, copy=False)
