"""Chain record types, dump-file ingestion, validation, and block sampling.

Dumps are line-delimited JSON for blocks/transactions/contracts and CSV for
the pending-pool and network-utilization series. A loaded Dataset is
immutable and safe to share across threads.

Gas prices are stored internally as integer wei (1e-9 GWEI resolution) so
that above/same/below comparisons are exact; the wire format stays decimal
GWEI and round-trips bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from statistics import NormalDist

from .seeding import rng_for

WEI_PER_GWEI = 10**9
SECONDS_PER_DAY = 86400


class DataError(Exception):
    """Base class for ingestion and validation failures."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class IntegrityError(DataError):
    """A record references an id that does not resolve."""


class OrderError(DataError):
    """Timestamps or nonces out of order."""


def gwei_to_wei(gwei) -> int:
    wei = round(float(gwei) * WEI_PER_GWEI)
    return int(wei)


def wei_to_gwei(wei: int) -> float:
    return wei / WEI_PER_GWEI


def day_ordinal(timestamp) -> int:
    """UTC calendar day index (days since epoch)."""
    return int(math.floor(float(timestamp) / SECONDS_PER_DAY))


def weekday_of(timestamp) -> int:
    """Mon=0 .. Sun=6 (1970-01-01 was a Thursday)."""
    return (day_ordinal(timestamp) + 3) % 7


def hour_of(timestamp) -> int:
    return int(math.floor(float(timestamp) % SECONDS_PER_DAY)) // 3600


@dataclass(frozen=True)
class Block:
    number: int
    timestamp: int
    difficulty: int
    tx_hashes: tuple[str, ...]


@dataclass(frozen=True)
class Transaction:
    hash: str
    block_number: int
    issuer: str
    nonce: int
    gas_price_wei: int
    gas_limit: int
    value_eth: float
    input_length: int
    target: str | None
    function_selector: str | None
    submission_time: float
    gas_used: int | None = None

    @property
    def gas_price_gwei(self) -> float:
        return wei_to_gwei(self.gas_price_wei)


@dataclass(frozen=True)
class ContractMeta:
    address: str
    deployed_block_number: int
    bytecode_length: int
    is_erc20: bool
    is_erc721: bool


@dataclass(frozen=True)
class SeriesSample:
    timestamp: int
    value: float


@dataclass
class IngestReport:
    n_blocks: int = 0
    n_transactions: int = 0
    n_contracts: int = 0
    dropped_missing_submission: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Dataset:
    """Validated chain snapshot.

    ``blocks`` are sorted by number; ``transactions`` follow block order and,
    within a block, the order of Block.tx_hashes (the inclusion order).
    """

    blocks: tuple[Block, ...]
    transactions: tuple[Transaction, ...]
    contracts: dict[str, ContractMeta]
    pending_pool_series: tuple[SeriesSample, ...]
    net_util_series: tuple[SeriesSample, ...]

    @cached_property
    def block_by_number(self) -> dict[int, Block]:
        return {b.number: b for b in self.blocks}

    def day_ordinals(self) -> list[int]:
        return sorted({day_ordinal(b.timestamp) for b in self.blocks})

    def processing_time_of(self, tx: Transaction) -> float:
        block = self.block_by_number.get(tx.block_number)
        if block is None:
            raise IntegrityError(f"transaction {tx.hash} references missing block {tx.block_number}")
        return processing_time_minutes(block, tx)


def processing_time_minutes(block: Block, tx: Transaction) -> float:
    """(block.timestamp - submission_time) / 60, as decimal minutes."""
    if tx.block_number != block.number:
        raise IntegrityError(f"transaction {tx.hash} is not part of block {block.number}")
    delta = block.timestamp - tx.submission_time
    if delta < 0:
        raise DataError(f"transaction {tx.hash} submitted after its block timestamp")
    return delta / 60.0


def _require(record: dict, key: str, path, line_no):
    if key not in record or record[key] is None:
        raise ParseError(path, line_no, f"missing field {key!r}")
    return record[key]


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            yield line_no, record


def _read_series(path) -> tuple[SeriesSample, ...]:
    samples = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["timestamp", "value"]:
            raise ParseError(path, 1, "expected header 'timestamp,value'")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = int(row[0])
                value = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ParseError(path, line_no, f"bad sample row: {row!r}") from exc
            samples.append(SeriesSample(ts, value))
    for prev, cur in zip(samples, samples[1:]):
        if cur.timestamp <= prev.timestamp:
            raise OrderError(f"{path}: series timestamps not strictly increasing at t={cur.timestamp}")
    return tuple(samples)


def load_dataset(
    block_path,
    tx_path,
    contract_path,
    pending_pool_path=None,
    net_util_path=None,
) -> tuple[Dataset, IngestReport]:
    """Load and validate a dump. Returns the Dataset and an ingestion report.

    Transactions with a null submission_time are dropped (the target cannot
    be derived for them) and counted in the report.
    """
    report = IngestReport()

    blocks = []
    for line_no, rec in _read_jsonl(block_path):
        try:
            block = Block(
                number=int(_require(rec, "number", block_path, line_no)),
                timestamp=int(_require(rec, "timestamp", block_path, line_no)),
                difficulty=int(_require(rec, "difficulty", block_path, line_no)),
                tx_hashes=tuple(rec.get("tx_hashes") or ()),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(block_path, line_no, f"bad block record: {exc}") from exc
        if block.difficulty < 0:
            raise ParseError(block_path, line_no, "negative difficulty")
        blocks.append(block)

    seen = set()
    for b in blocks:
        if b.number in seen:
            raise IntegrityError(f"duplicate block number {b.number}")
        seen.add(b.number)
    blocks.sort(key=lambda b: b.number)
    for prev, cur in zip(blocks, blocks[1:]):
        if cur.timestamp < prev.timestamp:
            raise OrderError(
                f"block timestamps decrease from block {prev.number} (t={prev.timestamp}) "
                f"to block {cur.number} (t={cur.timestamp})"
            )

    contracts: dict[str, ContractMeta] = {}
    for line_no, rec in _read_jsonl(contract_path):
        try:
            meta = ContractMeta(
                address=str(_require(rec, "address", contract_path, line_no)),
                deployed_block_number=int(_require(rec, "deployed_block_number", contract_path, line_no)),
                bytecode_length=int(_require(rec, "bytecode_length", contract_path, line_no)),
                is_erc20=bool(rec.get("is_erc20", False)),
                is_erc721=bool(rec.get("is_erc721", False)),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(contract_path, line_no, f"bad contract record: {exc}") from exc
        if meta.bytecode_length <= 0:
            raise ParseError(contract_path, line_no, f"contract {meta.address} has no bytecode")
        contracts[meta.address] = meta

    block_index = {b.number: b for b in blocks}
    txs = []
    for line_no, rec in _read_jsonl(tx_path):
        if rec.get("submission_time") is None:
            report.dropped_missing_submission += 1
            continue
        try:
            tx = Transaction(
                hash=str(_require(rec, "hash", tx_path, line_no)),
                block_number=int(_require(rec, "block_number", tx_path, line_no)),
                issuer=str(_require(rec, "issuer", tx_path, line_no)),
                nonce=int(_require(rec, "nonce", tx_path, line_no)),
                gas_price_wei=gwei_to_wei(_require(rec, "gas_price_gwei", tx_path, line_no)),
                gas_limit=int(_require(rec, "gas_limit", tx_path, line_no)),
                value_eth=float(_require(rec, "value_eth", tx_path, line_no)),
                input_length=int(_require(rec, "input_length", tx_path, line_no)),
                target=rec.get("to"),
                function_selector=rec.get("function_selector"),
                submission_time=float(rec["submission_time"]),
                gas_used=int(rec["gas_used"]) if rec.get("gas_used") is not None else None,
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(tx_path, line_no, f"bad transaction record: {exc}") from exc
        if tx.gas_price_wei < 0 or tx.nonce < 0 or tx.input_length < 0 or tx.gas_limit < 0:
            raise ParseError(tx_path, line_no, f"negative field on transaction {tx.hash}")
        block = block_index.get(tx.block_number)
        if block is None:
            raise IntegrityError(f"transaction {tx.hash} references missing block {tx.block_number}")
        if tx.hash not in block.tx_hashes:
            raise IntegrityError(f"transaction {tx.hash} not listed in block {block.number}")
        if tx.submission_time > block.timestamp:
            raise DataError(
                f"transaction {tx.hash} has negative processing time "
                f"(submitted {tx.submission_time}, block at {block.timestamp})"
            )
        if tx.target is not None and tx.target not in contracts:
            raise IntegrityError(f"transaction {tx.hash} targets unknown contract {tx.target}")
        txs.append(tx)

    _check_nonce_order(txs)

    # canonical order: block order, then inclusion order within the block
    block_pos = {b.number: i for i, b in enumerate(blocks)}
    intra = {}
    for b in blocks:
        for i, h in enumerate(b.tx_hashes):
            intra[h] = i
    txs.sort(key=lambda t: (block_pos[t.block_number], intra[t.hash]))

    pending = _read_series(pending_pool_path) if pending_pool_path else ()
    util = _read_series(net_util_path) if net_util_path else ()

    report.n_blocks = len(blocks)
    report.n_transactions = len(txs)
    report.n_contracts = len(contracts)

    dataset = Dataset(
        blocks=tuple(blocks),
        transactions=tuple(txs),
        contracts=contracts,
        pending_pool_series=pending,
        net_util_series=util,
    )
    return dataset, report


def _check_nonce_order(txs) -> None:
    by_issuer: dict[str, list[Transaction]] = {}
    for tx in txs:
        by_issuer.setdefault(tx.issuer, []).append(tx)
    for issuer, group in by_issuer.items():
        group = sorted(group, key=lambda t: (t.submission_time, t.nonce))
        for prev, cur in zip(group, group[1:]):
            if cur.nonce <= prev.nonce:
                raise OrderError(
                    f"issuer {issuer}: nonce {cur.nonce} (tx {cur.hash}) does not increase "
                    f"after nonce {prev.nonce} (tx {prev.hash}) in submission order"
                )
        by_block = sorted(group, key=lambda t: (t.block_number, t.nonce))
        nonces = [t.nonce for t in by_block]
        if nonces != sorted(t.nonce for t in group):
            raise OrderError(f"issuer {issuer}: mined nonce order conflicts with block order")


def write_dataset(dataset: Dataset, out_dir) -> dict[str, str]:
    """Write the dump files. Reloading them yields a bit-identical Dataset."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "blocks": os.path.join(out_dir, "blocks.jsonl"),
        "transactions": os.path.join(out_dir, "transactions.jsonl"),
        "contracts": os.path.join(out_dir, "contracts.jsonl"),
        "pending_pool": os.path.join(out_dir, "pending_pool.csv"),
        "net_util": os.path.join(out_dir, "net_util.csv"),
    }
    with open(paths["blocks"], "w", encoding="utf-8") as fh:
        for b in dataset.blocks:
            fh.write(
                json.dumps(
                    {
                        "number": b.number,
                        "timestamp": b.timestamp,
                        "difficulty": b.difficulty,
                        "tx_hashes": list(b.tx_hashes),
                    }
                )
                + "\n"
            )
    with open(paths["transactions"], "w", encoding="utf-8") as fh:
        for t in dataset.transactions:
            sub = t.submission_time
            record = {
                "hash": t.hash,
                "block_number": t.block_number,
                "issuer": t.issuer,
                "nonce": t.nonce,
                "gas_price_gwei": t.gas_price_wei / WEI_PER_GWEI,
                "gas_limit": t.gas_limit,
                "value_eth": t.value_eth,
                "input_length": t.input_length,
                "to": t.target,
                "function_selector": t.function_selector,
                "submission_time": int(sub) if float(sub).is_integer() else sub,
            }
            if t.gas_used is not None:
                record["gas_used"] = t.gas_used
            fh.write(json.dumps(record) + "\n")
    with open(paths["contracts"], "w", encoding="utf-8") as fh:
        for addr in sorted(dataset.contracts):
            c = dataset.contracts[addr]
            fh.write(
                json.dumps(
                    {
                        "address": c.address,
                        "deployed_block_number": c.deployed_block_number,
                        "bytecode_length": c.bytecode_length,
                        "is_erc20": c.is_erc20,
                        "is_erc721": c.is_erc721,
                    }
                )
                + "\n"
            )
    for key, series in (("pending_pool", dataset.pending_pool_series), ("net_util", dataset.net_util_series)):
        with open(paths[key], "w", encoding="utf-8", newline="") as fh:
            fh.write("timestamp,value\n")
            for s in series:
                fh.write(f"{s.timestamp},{s.value!r}\n")
    return paths


def cochran_sample_size(population: int, confidence: float, margin: float) -> int:
    """Cochran's sample size with finite-population correction, rounded up.

    n0 = z^2 * 0.25 / margin^2 and n = n0 / (1 + (n0 - 1) / N). The 0.25
    factor is the worst-case proportion variance p(1-p) at p = 0.5.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must be in (0, 1)")
    if population < 1:
        raise ValueError("population must be >= 1")
    z = NormalDist().inv_cdf(1.0 - (1.0 - confidence) / 2.0)
    n0 = z * z * 0.25 / (margin * margin)
    n = n0 / (1.0 + (n0 - 1.0) / population)
    return min(population, int(math.ceil(n)))


def sample_blocks_per_day(
    dataset: Dataset, confidence: float, margin: float, seed: int
) -> tuple[list[int], list[str]]:
    """Per-UTC-day uniform block samples of the corrected Cochran size.

    Returns the sorted sampled block numbers and any warning records.
    Deterministic: each day's draw is keyed by (seed, day ordinal).
    """
    by_day: dict[int, list[int]] = {}
    for b in dataset.blocks:
        by_day.setdefault(day_ordinal(b.timestamp), []).append(b.number)
    sampled: list[int] = []
    warnings: list[str] = []
    for day in sorted(by_day):
        numbers = sorted(by_day[day])
        if not numbers:
            warnings.append(f"day {day}: empty, skipped")
            continue
        size = cochran_sample_size(len(numbers), confidence, margin)
        rng = rng_for(seed, "block-sample", day)
        picks = rng.choice(len(numbers), size=size, replace=False)
        sampled.extend(numbers[i] for i in sorted(picks))
    return sorted(sampled), warnings
