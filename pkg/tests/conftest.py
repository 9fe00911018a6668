import numpy as np
import pytest

from ethpace.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_chain():
    """Two-day chain, ~500 blocks: big enough for full 120-block windows."""
    cfg = SynthConfig(
        n_days=2,
        mean_block_interval=340,
        block_capacity=8,
        arrival_rate=0.02,
        gas_price_distribution={"family": "lognormal", "mu": 3.0, "sigma": 1.0, "drift_sd": 0.05},
        issuer_pool_size=60,
        contract_pool_size=12,
        noise_sd=0.4,
        seed=42,
    )
    return generate(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
