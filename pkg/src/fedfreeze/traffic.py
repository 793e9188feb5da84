"""Expected uplink volume under uniform random layer selection."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .registry import ArchitectureDescriptor, count_parameters

BYTES_PER_PARAM = 4

# Single-run VGG16 realizations published alongside this method (uplink bytes over
# 10 clients and 100 rounds, full model 147.2M), and its headline reduction claims.
PUBLISHED_VGG16 = {
    "full_model_bytes": 147.2e6,
    "realized": {4: 34.88e6, 7: 67.92e6, 10: 101.3e6, 14: 147.2e6},
    "claimed_reduction": {4: 0.75, 7: 0.53},
}


@dataclass
class TrafficEstimate:
    architecture: str
    n_units: int
    layer_budget: int
    clients: int
    rounds: int
    trials: int
    full_model_bytes: int
    exact_fraction: float
    mean_fraction: float
    std_fraction: float
    ci95: tuple
    per_round_std: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.mean_fraction

    @property
    def expected_uplink_bytes(self) -> float:
        """Expected uplink tensor bytes summed over all clients and rounds."""
        return self.exact_fraction * self.full_model_bytes * self.clients * self.rounds

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture, "n_units": self.n_units,
            "layer_budget": self.layer_budget, "clients": self.clients, "rounds": self.rounds,
            "trials": self.trials, "full_model_bytes": self.full_model_bytes,
            "exact_fraction": self.exact_fraction, "mean_fraction": self.mean_fraction,
            "std_fraction": self.std_fraction, "ci95": list(self.ci95),
            "per_round_std": self.per_round_std, "reduction": self.reduction,
            "expected_uplink_bytes": self.expected_uplink_bytes,
        }


def _sample_fractions(sizes, budget, n_draws, rng, chunk=1 << 16):
    """Uplink fraction of ``n_draws`` independent uniform ``budget``-subsets."""
    total = sizes.sum()
    out = np.empty(n_draws)
    for lo in range(0, n_draws, chunk):
        hi = min(lo + chunk, n_draws)
        keys = rng.random((hi - lo, sizes.size))
        # the budget smallest keys of iid uniforms form a uniform random subset
        picked = np.argpartition(keys, budget - 1, axis=1)[:, :budget]
        out[lo:hi] = sizes[picked].sum(axis=1) / total
    return out


def estimate_uplink(arch: ArchitectureDescriptor, layer_budget: int, clients: int = 1,
                    rounds: int = 1, trials: int = 10000, seed: int = 0) -> TrafficEstimate:
    """Monte Carlo estimate of the run-level uplink fraction.

    Each trial simulates ``clients * rounds`` independent selections and
    records the fraction of full-model bytes sent.  ``exact_fraction`` is the
    closed form ``layer_budget / n_units``.
    """
    sizes = np.asarray(count_parameters(arch).unit_params, dtype=np.float64)
    L = sizes.size
    if L == 0:
        raise ConfigError("architecture has no trainable units")
    if not 1 <= layer_budget <= L:
        raise ConfigError(f"layers must be in [1, {L}], got {layer_budget}")
    if clients < 1 or rounds < 1 or trials < 1:
        raise ConfigError("clients, rounds and trials must be at least 1")
    rng = np.random.default_rng(seed)
    per_trial = clients * rounds
    # run means are accumulated over trials in chunks to bound memory
    means = np.empty(trials)
    per_round = []
    step = max(1, (1 << 18) // per_trial)
    for lo in range(0, trials, step):
        hi = min(lo + step, trials)
        f = _sample_fractions(sizes, layer_budget, (hi - lo) * per_trial, rng)
        f = f.reshape(hi - lo, rounds, clients)
        round_means = f.mean(axis=2)
        means[lo:hi] = round_means.mean(axis=1)
        per_round.append(round_means.reshape(-1))
    per_round = np.concatenate(per_round)
    mean = float(means.mean())
    std = float(means.std(ddof=1)) if trials > 1 else 0.0
    lo_q, hi_q = np.quantile(means, [0.025, 0.975])
    return TrafficEstimate(
        architecture=arch.name, n_units=L, layer_budget=layer_budget, clients=clients,
        rounds=rounds, trials=trials,
        full_model_bytes=int(sizes.sum()) * BYTES_PER_PARAM,
        exact_fraction=layer_budget / L, mean_fraction=mean, std_fraction=std,
        ci95=(float(lo_q), float(hi_q)),
        per_round_std=float(per_round.std(ddof=1)) if per_round.size > 1 else 0.0,
    )


def expected_uplink_fraction(arch, layer_budget, trials=10000, clients=1, rounds=1, seed=0) -> float:
    return estimate_uplink(arch, layer_budget, clients, rounds, trials, seed).mean_fraction


def published_reference(arch_name: str, layer_budget: int) -> dict | None:
    """Published single-run figures for VGG16 at this budget, if any."""
    if arch_name != "vgg16":
        return None
    full = PUBLISHED_VGG16["full_model_bytes"]
    realized = PUBLISHED_VGG16["realized"].get(layer_budget)
    claim = PUBLISHED_VGG16["claimed_reduction"].get(layer_budget)
    if realized is None and claim is None:
        return None
    return {
        "realized_bytes": realized,
        "realized_fraction": None if realized is None else realized / full,
        "claimed_reduction": claim,
    }
