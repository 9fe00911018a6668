"""Deterministic synthetic blockchain generator.

Simulates a pending pool drained by a miner that strictly prioritizes gas
price (ties by arrival time), honoring per-issuer nonce order: a transaction
is ineligible until every lower-nonce transaction from its issuer is mined.
Processing times emerge from the queue; ``plant_signal`` instead overwrites
the recorded submission times so that the target follows a chosen law, which
acceptance tests then have to recover.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .chain import (
    WEI_PER_GWEI,
    Block,
    ContractMeta,
    Dataset,
    SeriesSample,
    Transaction,
)
from .seeding import rng_for

log = logging.getLogger(__name__)

FIRST_BLOCK_NUMBER = 1_000_000
GENESIS = 1_700_092_800  # a UTC midnight

# planted-law constants (minutes)
COMPETITIVE_FAST = 1.0
COMPETITIVE_SLOW = 10.0
FLAT_MINUTES = 5.0

SIGNALS = ("competitiveness", "flat")


@dataclass
class SynthConfig:
    n_days: int = 30
    mean_block_interval: float = 15.0  # seconds
    block_capacity: int = 50
    arrival_rate: float = 2.0  # transactions per second
    gas_price_distribution: dict = field(
        default_factory=lambda: {"family": "lognormal", "mu": 3.0, "sigma": 1.0, "drift_sd": 0.0}
    )
    issuer_pool_size: int = 500
    contract_pool_size: int = 50
    noise_sd: float = 0.5  # minutes
    seed: int = 0
    contract_fraction: float = 0.6  # share of txs that invoke a contract

    def __post_init__(self):
        if self.n_days < 1 or self.block_capacity < 1 or self.issuer_pool_size < 1 or self.contract_pool_size < 1:
            raise ValueError("counts must be >= 1")
        if self.mean_block_interval <= 0 or self.arrival_rate <= 0:
            raise ValueError("rates must be > 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        family = self.gas_price_distribution.get("family", "lognormal")
        if family not in ("lognormal", "uniform"):
            raise ValueError(f"unknown gas price family {family!r}")


@dataclass
class _SimTx:
    seq: int
    issuer: int
    nonce: int
    arrival: int
    price_wei: int
    gas_limit: int
    gas_used: int
    value_eth: float
    input_length: int
    target: str | None
    selector: str | None
    block_pos: int = -1  # index of the mined block
    delay: float = 0.0  # seconds waited in the queue


@dataclass
class _Sim:
    block_times: list[int]
    difficulties: list[int]
    txs: list[_SimTx]
    blocks_txs: list[list[int]]  # mined tx seq ids per block, inclusion order
    contracts: dict[str, ContractMeta]


def _make_contracts(config: SynthConfig, rng: np.random.Generator):
    contracts: dict[str, ContractMeta] = {}
    selectors: dict[str, list[tuple[str, float]]] = {}
    for i in range(config.contract_pool_size):
        addr = f"0xc{i:039x}"
        kind = rng.random()
        contracts[addr] = ContractMeta(
            address=addr,
            deployed_block_number=int(rng.integers(1, FIRST_BLOCK_NUMBER)),
            bytecode_length=int(rng.integers(200, 60_000)),
            is_erc20=bool(kind < 0.4),
            is_erc721=bool(0.4 <= kind < 0.55),
        )
        funcs = []
        for j in range(int(rng.integers(1, 5))):
            base = float(np.exp(rng.normal(11.0, 0.6)))  # ~60k gas
            funcs.append((f"0x{rng.integers(0, 2**32):08x}", base))
        selectors[addr] = funcs
    return contracts, selectors


def _draw_price_wei(config: SynthConfig, rng: np.random.Generator, log_level: float) -> int:
    dist = config.gas_price_distribution
    family = dist.get("family", "lognormal")
    if family == "lognormal":
        gwei = math.exp(rng.normal(float(dist.get("mu", 3.0)), float(dist.get("sigma", 1.0))) + log_level)
    else:  # uniform
        gwei = rng.uniform(float(dist.get("low", 1.0)), float(dist.get("high", 100.0))) * math.exp(log_level)
    # most issuers pick round numbers, so prices tie heavily in practice
    round_share = float(dist.get("round_share", 0.85))
    u = rng.random()
    if u < round_share:
        gwei = max(1.0, round(gwei))
    elif u < round_share + 0.5 * (1.0 - round_share):
        gwei = max(0.1, round(gwei, 1))
    return max(1, round(gwei * WEI_PER_GWEI))


def _simulate(config: SynthConfig, unique_issuers: bool) -> _Sim:
    block_rng = rng_for(config.seed, "synth-blocks")
    tx_rng = rng_for(config.seed, "synth-txs")
    contracts, selectors = _make_contracts(config, rng_for(config.seed, "synth-contracts"))
    addresses = sorted(contracts)

    end_time = GENESIS + config.n_days * 86400
    if config.arrival_rate > config.block_capacity / config.mean_block_interval:
        log.warning(
            "arrival rate %.4f tx/s exceeds drain capacity %.4f tx/s: queue will grow without bound",
            config.arrival_rate,
            config.block_capacity / config.mean_block_interval,
        )

    # block schedule and difficulty walk
    block_times: list[int] = []
    t = GENESIS
    while True:
        t += max(1, int(round(block_rng.exponential(config.mean_block_interval))))
        if t >= end_time:
            break
        block_times.append(t)
    log_diff = math.log(2.5e12)
    difficulties = []
    for _ in block_times:
        log_diff += block_rng.normal(0.0, 0.01)
        difficulties.append(int(math.exp(log_diff)))

    drift_sd = float(config.gas_price_distribution.get("drift_sd", 0.0))
    log_level = 0.0

    # skewed issuer activity: a few heavy senders keep several txs in flight
    issuer_weights = 1.0 / np.arange(1, config.issuer_pool_size + 1) ** 0.8
    issuer_weights /= issuer_weights.sum()

    txs: list[_SimTx] = []
    issuer_next_nonce: dict[int, int] = {}
    prev_t = GENESIS
    arrivals_per_gap: list[list[int]] = []
    for bi, bt in enumerate(block_times):
        if drift_sd > 0.0:
            log_level += tx_rng.normal(0.0, drift_sd)
        gap = bt - prev_t
        n_new = int(tx_rng.poisson(config.arrival_rate * gap))
        arrival_times = np.sort(tx_rng.integers(prev_t + 1, bt + 1, size=n_new)) if n_new else []
        gap_seqs = []
        for at in arrival_times:
            seq = len(txs)
            issuer = seq if unique_issuers else int(tx_rng.choice(config.issuer_pool_size, p=issuer_weights))
            nonce = issuer_next_nonce.get(issuer, 0)
            issuer_next_nonce[issuer] = nonce + 1
            price = _draw_price_wei(config, tx_rng, log_level)
            if tx_rng.random() < config.contract_fraction:
                target = addresses[int(tx_rng.integers(0, len(addresses)))]
                sel, base = selectors[target][int(tx_rng.integers(0, len(selectors[target])))]
                gas_used = int(base * tx_rng.uniform(0.7, 1.0))
                gas_limit = int(base * tx_rng.uniform(1.0, 1.4))
                input_length = int(4 + 32 * tx_rng.integers(0, 8))
                # payable invocations carry value too
                value = float(np.round(np.exp(tx_rng.normal(-2.0, 1.0)), 6)) if tx_rng.random() < 0.3 else 0.0
            else:
                target, sel = None, None
                gas_used = 21_000
                gas_limit = 21_000
                input_length = 0
                value = float(np.round(np.exp(tx_rng.normal(-1.5, 1.0)), 6))
            txs.append(
                _SimTx(
                    seq=seq,
                    issuer=issuer,
                    nonce=nonce,
                    arrival=int(at),
                    price_wei=price,
                    gas_limit=gas_limit,
                    gas_used=gas_used,
                    value_eth=value,
                    input_length=input_length,
                    target=target,
                    selector=sel,
                )
            )
            gap_seqs.append(seq)
        arrivals_per_gap.append(gap_seqs)
        prev_t = bt

    # mining: per-issuer FIFO of arrived-unmined txs; a heap holds only each
    # issuer's frontier tx, keyed by (-price, arrival, seq)
    issuer_queue: dict[int, list[int]] = {}
    heap: list[tuple[int, int, int]] = []

    def push_frontier(seq: int) -> None:
        tx = txs[seq]
        heapq.heappush(heap, (-tx.price_wei, tx.arrival, seq))

    blocks_txs: list[list[int]] = []
    for bi, bt in enumerate(block_times):
        for seq in arrivals_per_gap[bi]:
            tx = txs[seq]
            q = issuer_queue.setdefault(tx.issuer, [])
            q.append(seq)
            if len(q) == 1:
                push_frontier(seq)
        chosen: list[int] = []
        while len(chosen) < config.block_capacity and heap:
            _, _, seq = heapq.heappop(heap)
            tx = txs[seq]
            chosen.append(seq)
            tx.block_pos = bi
            tx.delay = float(bt - tx.arrival)
            q = issuer_queue[tx.issuer]
            q.pop(0)
            if q:
                push_frontier(q[0])
        blocks_txs.append(chosen)

    leftover = sum(len(q) for q in issuer_queue.values())
    if leftover:
        log.info("%d transactions still pending at the end of the simulation window (discarded)", leftover)

    mined = [tx for tx in txs if tx.block_pos >= 0]
    return _Sim(
        block_times=block_times,
        difficulties=difficulties,
        txs=mined,
        blocks_txs=blocks_txs,
        contracts=contracts,
    )


def _assemble(config: SynthConfig, sim: _Sim, submission: dict[int, float]) -> Dataset:
    tx_by_seq = {tx.seq: tx for tx in sim.txs}
    blocks = []
    for bi, bt in enumerate(sim.block_times):
        hashes = tuple(f"0x{seq:016x}" for seq in sim.blocks_txs[bi] if seq in tx_by_seq)
        blocks.append(
            Block(
                number=FIRST_BLOCK_NUMBER + bi,
                timestamp=bt,
                difficulty=sim.difficulties[bi],
                tx_hashes=hashes,
            )
        )

    transactions = []
    for bi in range(len(blocks)):
        for seq in sim.blocks_txs[bi]:
            tx = tx_by_seq.get(seq)
            if tx is None:
                continue
            sub = submission[seq]
            transactions.append(
                Transaction(
                    hash=f"0x{seq:016x}",
                    block_number=FIRST_BLOCK_NUMBER + bi,
                    issuer=f"0xa{tx.issuer:039x}",
                    nonce=tx.nonce,
                    gas_price_wei=tx.price_wei,
                    gas_limit=tx.gas_limit,
                    value_eth=tx.value_eth,
                    input_length=tx.input_length,
                    target=tx.target,
                    function_selector=tx.selector,
                    submission_time=sub,
                    gas_used=tx.gas_used,
                )
            )

    pending_series, util_series = _sample_series(config, sim)
    return Dataset(
        blocks=tuple(blocks),
        transactions=tuple(transactions),
        contracts=dict(sim.contracts),
        pending_pool_series=pending_series,
        net_util_series=util_series,
    )


def _sample_series(config: SynthConfig, sim: _Sim):
    """Pending-pool size and network utilization, one sample per minute."""
    arrivals = np.sort(np.array([tx.arrival for tx in sim.txs], dtype=np.int64))
    mined_at = np.sort(np.array([sim.block_times[tx.block_pos] for tx in sim.txs], dtype=np.int64))
    block_ts = np.array(sim.block_times, dtype=np.int64)
    block_counts = np.array([len(h) for h in sim.blocks_txs], dtype=np.int64)
    cum_counts = np.concatenate([[0], np.cumsum(block_counts)])

    minutes = np.arange(GENESIS + 60, GENESIS + config.n_days * 86400, 60, dtype=np.int64)
    pool = np.searchsorted(arrivals, minutes, side="right") - np.searchsorted(mined_at, minutes, side="right")

    # utilization over the trailing five minutes of blocks
    hi = np.searchsorted(block_ts, minutes, side="right")
    lo = np.searchsorted(block_ts, minutes - 300, side="right")
    mined_in_window = cum_counts[hi] - cum_counts[lo]
    slots = (hi - lo) * config.block_capacity
    util = np.zeros(minutes.size)
    nz = slots > 0
    util[nz] = mined_in_window[nz] / slots[nz]

    pending = tuple(SeriesSample(int(t), float(v)) for t, v in zip(minutes, pool))
    utilization = tuple(SeriesSample(int(t), float(round(v, 6))) for t, v in zip(minutes, util))
    return pending, utilization


def _noisy_minutes(base_minutes: float, rng: np.random.Generator, noise_sd: float) -> float:
    noise = rng.normal(0.0, noise_sd) if noise_sd > 0 else 0.0
    return max(0.0, base_minutes + noise)


def generate(config: SynthConfig) -> Dataset:
    """Simulate the chain; processing times emerge from the queue plus noise.

    The noise lands on the recorded submission time (the block timestamp is
    shared by every transaction in the block), clamped so that processing
    times stay non-negative and same-issuer submission order follows nonce
    order.
    """
    sim = _simulate(config, unique_issuers=False)
    noise_rng = rng_for(config.seed, "synth-noise")
    submission: dict[int, float] = {}
    by_issuer: dict[int, list[_SimTx]] = {}
    for tx in sim.txs:
        by_issuer.setdefault(tx.issuer, []).append(tx)
    for issuer, group in sorted(by_issuer.items()):
        group.sort(key=lambda tx: tx.nonce)
        prev_sub = -math.inf
        for tx in group:
            block_ts = sim.block_times[tx.block_pos]
            minutes = _noisy_minutes(tx.delay / 60.0, noise_rng, config.noise_sd)
            sub = block_ts - round(minutes * 60.0)
            sub = min(float(block_ts), max(sub, prev_sub))
            submission[tx.seq] = sub
            prev_sub = sub
    return _assemble(config, sim, submission)


def competitiveness_of(price_wei, window_prices: list[np.ndarray]) -> float:
    """Median over the window blocks of the per-block fraction of prices
    strictly below the given price (empty blocks count as 0)."""
    if not window_prices:
        return 0.0
    fracs = np.empty(len(window_prices))
    for i, prices in enumerate(window_prices):
        if prices.size == 0:
            fracs[i] = 0.0
        else:
            fracs[i] = np.searchsorted(prices, price_wei, side="left") / prices.size
    return float(np.quantile(fracs, 0.5))


def planted_target_minutes(competitiveness: float) -> float:
    """The planted law: linearly decreasing in price competitiveness."""
    return COMPETITIVE_SLOW - (COMPETITIVE_SLOW - COMPETITIVE_FAST) * competitiveness


def plant_signal(config: SynthConfig, signal: str) -> Dataset:
    """Dataset whose target obeys the named law up to noise_sd.

    ``competitiveness``: processing time decreases linearly in the fraction
    of prices over the previous (up to) 120 blocks that sit below the
    transaction's price. ``flat``: price-independent times. Every planted
    transaction uses a fresh issuer so the recorded submission times never
    conflict with nonce ordering and the law holds exactly at noise_sd = 0.
    """
    if signal not in SIGNALS:
        raise ValueError(f"unknown signal {signal!r}: expected one of {SIGNALS}")
    sim = _simulate(config, unique_issuers=True)
    noise_rng = rng_for(config.seed, "synth-noise")

    tx_by_seq = {tx.seq: tx for tx in sim.txs}
    sorted_block_prices = [
        np.sort(np.array([tx_by_seq[s].price_wei for s in seqs if s in tx_by_seq], dtype=np.int64))
        for seqs in sim.blocks_txs
    ]

    submission: dict[int, float] = {}
    for tx in sim.txs:
        block_ts = sim.block_times[tx.block_pos]
        if signal == "flat":
            base = FLAT_MINUTES
        else:
            window = sorted_block_prices[max(0, tx.block_pos - 120) : tx.block_pos]
            base = planted_target_minutes(competitiveness_of(tx.price_wei, window))
        minutes = _noisy_minutes(base, noise_rng, config.noise_sd)
        submission[tx.seq] = block_ts - minutes * 60.0
    return _assemble(config, sim, submission)
